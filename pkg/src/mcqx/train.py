"""Training loop with early stopping, checkpointing, evaluation, ablation."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import (EncodedItem, McqItem, TruncationCaps, Vocabulary, encode_item,
                   tokenize_text)
from .metrics import classification_metrics, generation_metrics
from .model import Batch, McqModel, collate

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries the offending batch."""


@dataclass
class TrainConfig:
    """Optimization, truncation, and architecture settings."""

    learning_rate: float = 5e-5
    batch_size: int = 32
    context_cap: int = 400
    question_cap: int = 80
    option_cap: int = 20
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    mode: str = "multitask"            # "single" or "multitask"
    phrasal: bool = True               # the encoder ablation switch
    phrasal_per_layer: bool = False
    d_model: int = 64
    encoder_layers: int = 2
    heads: int = 4
    decoder_layers: int = 2
    ff_mult: int = 4
    retrieval_k: int = 15
    dev_fraction: float = 0.1
    max_explanation_len: int = 300

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.mode not in ("single", "multitask"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def caps(self) -> TruncationCaps:
        return TruncationCaps(self.context_cap, self.question_cap, self.option_cap)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        """Parse a flat key = value config file; unknown keys are rejected."""
        values: dict = {}
        fields = {f: cls.__dataclass_fields__[f].type for f in cls.__dataclass_fields__}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            sep = "=" if "=" in line else (":" if ":" in line else None)
            if sep is None:
                raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
            key, _, value = line.partition(sep)
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_config_value(value)
        return cls(**values)


def _parse_config_value(value: str):
    lowered = value.lower()
    if lowered in ("true", "on", "yes"):
        return True
    if lowered in ("false", "off", "no"):
        return False
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    return value


@dataclass
class EpochLog:
    epoch: int
    loss_choice: float
    loss_explanation: float
    dev_accuracy: float
    dev_f1: float


@dataclass
class TrainResult:
    checkpoint: dict
    history: list[EpochLog]
    best_epoch: int
    best_f1: float
    stopped_epoch: int


def build_vocab(items: Sequence[McqItem]) -> Vocabulary:
    """Vocabulary over every text field of the training items."""
    def texts():
        for item in items:
            yield item.question
            yield from item.options
            if item.context:
                yield item.context
            if item.explanation:
                yield item.explanation
    return Vocabulary.build(texts())


def split_dev(items: Sequence[McqItem], fraction: float, seed: int):
    """Seeded held-out split used when no explicit dev file is supplied."""
    order = np.random.default_rng((seed, 0xDE5)).permutation(len(items))
    n_dev = int(round(len(items) * fraction))
    dev_idx = set(order[:n_dev].tolist())
    train = [items[i] for i in range(len(items)) if i not in dev_idx]
    dev = [items[i] for i in sorted(dev_idx)]
    return train, dev


def _batches(encoded: list[EncodedItem], batch_size: int, caps: TruncationCaps,
             order: np.ndarray | None = None):
    idx = order if order is not None else np.arange(len(encoded))
    for start in range(0, len(idx), batch_size):
        chunk = [encoded[i] for i in idx[start:start + batch_size]]
        yield collate(chunk, caps)


def _dev_metrics(model: McqModel, encoded: list[EncodedItem], caps: TruncationCaps,
                 batch_size: int) -> tuple[float, float]:
    model.eval()
    gold, pred = [], []
    for batch in _batches(encoded, batch_size, caps):
        _, answers, _ = model.predict(batch, generate=False)
        gold.extend(batch.answer.tolist())
        pred.extend(answers.tolist())
    model.train()
    return classification_metrics(gold, pred)


def build_model(config: TrainConfig, vocab_size: int) -> McqModel:
    torch.manual_seed(config.seed)
    return McqModel(
        vocab_size=vocab_size,
        d_model=config.d_model,
        encoder_layers=config.encoder_layers,
        heads=config.heads,
        decoder_layers=config.decoder_layers,
        ff_mult=config.ff_mult,
        use_phrasal=config.phrasal,
        phrasal_per_layer=config.phrasal_per_layer,
        max_positions=config.max_explanation_len + 2,
    )


def train(config: TrainConfig, train_items: Sequence[McqItem],
          dev_items: Sequence[McqItem] | None = None) -> TrainResult:
    """Adam-optimize the joint loss; early-stop on dev macro F1.

    The best-dev checkpoint is returned. Stops once the best epoch is
    `patience` epochs old, or at max_epochs.
    """
    if dev_items is None:
        train_items, dev_items = split_dev(list(train_items), config.dev_fraction,
                                           config.seed)
    if not dev_items:
        dev_items = list(train_items)
    vocab = build_vocab(train_items)
    caps = config.caps()
    encoded_train = [encode_item(it, vocab) for it in train_items]
    encoded_dev = [encode_item(it, vocab) for it in dev_items]

    model = build_model(config, len(vocab))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 betas=(0.9, 0.999), eps=1e-8)

    history: list[EpochLog] = []
    best_f1 = -math.inf
    best_epoch = 0
    best_state: dict | None = None
    stopped_epoch = 0

    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng((config.seed, epoch)).permutation(len(encoded_train))
        sum_mc = sum_e = 0.0
        seen = 0
        for batch in _batches(encoded_train, config.batch_size, caps, order):
            optimizer.zero_grad()
            breakdown = model.loss(batch, mode=config.mode)
            total = breakdown.total
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting with id {batch.ids[0]}")
            total.backward()
            optimizer.step()
            sum_mc += float(breakdown.choice.detach()) * len(batch)
            sum_e += float(breakdown.explanation.detach()) * len(batch)
            seen += len(batch)
        dev_acc, dev_f1 = _dev_metrics(model, encoded_dev, caps, config.batch_size)
        history.append(EpochLog(epoch, sum_mc / seen, sum_e / seen, dev_acc, dev_f1))
        logger.info("epoch=%d l_mc=%.6f l_e=%.6f dev_acc=%.4f dev_f1=%.4f",
                    epoch, sum_mc / seen, sum_e / seen, dev_acc, dev_f1)
        if dev_f1 > best_f1:
            best_f1 = dev_f1
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        stopped_epoch = epoch
        if epoch - best_epoch >= config.patience:
            logger.info("early stop: no dev F1 improvement for %d epoch(s)",
                        config.patience)
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    checkpoint = build_checkpoint(model, config, vocab, best_epoch, best_f1)
    return TrainResult(checkpoint=checkpoint, history=history, best_epoch=best_epoch,
                       best_f1=best_f1, stopped_epoch=stopped_epoch)


def build_checkpoint(model: McqModel, config: TrainConfig, vocab: Vocabulary,
                     epoch: int, best_f1: float) -> dict:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "vocab": vocab.to_dict(),
        "vocab_size": len(vocab),
        "state": state,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "epoch": epoch,
        "best_f1": best_f1,
    }


def save_checkpoint(checkpoint: dict, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint, path)


def load_checkpoint(path: str | Path) -> dict:
    checkpoint = torch.load(path, weights_only=True)
    version = checkpoint.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    return checkpoint


def model_from_checkpoint(checkpoint: dict) -> tuple[McqModel, TrainConfig, Vocabulary]:
    config = TrainConfig(**checkpoint["config"])
    vocab = Vocabulary.from_dict(checkpoint["vocab"])
    if len(vocab) != checkpoint["vocab_size"]:
        raise ValueError("vocabulary mismatch: checkpoint size disagrees with table")
    model = build_model(config, len(vocab))
    model.load_state_dict(checkpoint["state"])
    model.eval()
    return model, config, vocab


@dataclass
class SliceMetrics:
    count: int
    accuracy: float
    f1_macro: float


@dataclass
class MetricReport:
    """Overall and per-subject / per-grade evaluation metrics."""

    n_items: int
    accuracy: float
    f1_macro: float
    bleu4: float | None = None
    rouge_l: float | None = None
    per_subject: dict = field(default_factory=dict)
    per_grade: dict = field(default_factory=dict)


def evaluate(checkpoint: dict, items: Sequence[McqItem],
             generate: bool | None = None,
             vocab: Vocabulary | None = None,
             batch_size: int | None = None):
    """Score a checkpoint on a dataset.

    Returns (MetricReport, predictions) where predictions are one dict per
    item: id, predicted answer letter, probabilities, explanation text.
    """
    model, config, ckpt_vocab = model_from_checkpoint(checkpoint)
    if vocab is not None and vocab.to_dict() != ckpt_vocab.to_dict():
        raise ValueError("vocabulary mismatch between checkpoint and supplied vocabulary")
    if generate is None:
        generate = config.mode == "multitask"
    batch_size = batch_size or config.batch_size
    caps = config.caps()
    encoded = [encode_item(it, ckpt_vocab) for it in items]

    gold, pred, predictions = [], [], []
    hyps, refs = [], []
    pos = 0
    for batch in _batches(encoded, batch_size, caps):
        probs, answers, expls = model.predict(batch, generate=generate,
                                              max_len=config.max_explanation_len)
        for i in range(len(batch)):
            item = items[pos]
            pos += 1
            answer = int(answers[i])
            gold.append(item.answer)
            pred.append(answer)
            text = None
            if expls is not None:
                text = ckpt_vocab.decode(expls[i])
                if item.explanation:
                    hyps.append(text.split())
                    refs.append(tokenize_text(item.explanation))
            predictions.append({
                "id": item.id,
                "answer": "ABCD"[answer],
                "probabilities": [float(p) for p in probs[i]],
                "explanation": text,
            })

    accuracy, f1 = classification_metrics(gold, pred)
    report = MetricReport(n_items=len(items), accuracy=accuracy, f1_macro=f1)
    if hyps:
        report.bleu4, report.rouge_l = generation_metrics(hyps, refs)

    for key_fn, bucket in ((lambda it: it.subject, report.per_subject),
                           (lambda it: it.grade, report.per_grade)):
        groups: dict = {}
        for item, g, p in zip(items, gold, pred):
            groups.setdefault(key_fn(item), []).append((g, p))
        for key, pairs in sorted(groups.items(), key=lambda kv: str(kv[0])):
            acc_k, f1_k = classification_metrics([g for g, _ in pairs],
                                                 [p for _, p in pairs])
            bucket[key] = SliceMetrics(len(pairs), acc_k, f1_k)
    return report, predictions


def write_predictions(predictions: list[dict], path: str | Path) -> None:
    import json
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in predictions:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


@dataclass
class AblationRow:
    phrasal: bool
    mode: str
    accuracy: float
    f1_macro: float
    bleu4: float | None
    rouge_l: float | None
    per_seed_accuracy: list[float]


def ablate_grid(train_items: Sequence[McqItem], test_items: Sequence[McqItem],
                base_config: TrainConfig, seeds: Sequence[int] = (0, 1, 2)) -> list[AblationRow]:
    """Train {phrasal on/off} x {single/multitask} over the seeds and report
    mean test metrics per configuration."""
    rows = []
    for phrasal in (False, True):
        for mode in ("single", "multitask"):
            accs, f1s, bleus, rouges = [], [], [], []
            for seed in seeds:
                config = replace(base_config, phrasal=phrasal, mode=mode, seed=seed)
                result = train(config, train_items)
                report, _ = evaluate(result.checkpoint, test_items)
                accs.append(report.accuracy)
                f1s.append(report.f1_macro)
                if report.bleu4 is not None:
                    bleus.append(report.bleu4)
                    rouges.append(report.rouge_l)
            rows.append(AblationRow(
                phrasal=phrasal, mode=mode,
                accuracy=float(np.mean(accs)), f1_macro=float(np.mean(f1s)),
                bleu4=float(np.mean(bleus)) if bleus else None,
                rouge_l=float(np.mean(rouges)) if rouges else None,
                per_seed_accuracy=accs,
            ))
    return rows


def format_ablation_table(rows: list[AblationRow]) -> str:
    lines = [f"{'phrasal':>8}  {'type':>9}  {'accuracy':>8}  {'f1-macro':>8}  "
             f"{'bleu-4':>7}  {'rouge-l':>7}"]
    for row in rows:
        bleu = f"{row.bleu4:.4f}" if row.bleu4 is not None else "-"
        rouge = f"{row.rouge_l:.4f}" if row.rouge_l is not None else "-"
        lines.append(f"{'on' if row.phrasal else 'off':>8}  {row.mode:>9}  "
                     f"{row.accuracy:8.4f}  {row.f1_macro:8.4f}  {bleu:>7}  {rouge:>7}")
    return "\n".join(lines)
