"""Command-line surface: dataset tools, retrieval, training, evaluation,
gradient checks, the ablation grid, and debug dumps."""

from __future__ import annotations

import argparse
import logging
import pickle
import sys
from pathlib import Path

from . import data as data_mod
from . import retrieval as ret
from .gradcheck import MODULE_NAMES, format_gradcheck, gradcheck
from .synth import DEFAULT_VOCAB_SIZE, synth_generate
from .train import (TrainConfig, ablate_grid, build_vocab, evaluate, format_ablation_table,
                    load_checkpoint, save_checkpoint, train, write_predictions)

logger = logging.getLogger(__name__)


def _cmd_synth(args):
    items = synth_generate(args.n, args.seed, args.vocab_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_mod.save_dataset(items, out / "items.jsonl")
    build_vocab(items).save(out / "vocab.json")
    print(f"wrote {len(items)} items to {out / 'items.jsonl'}")


def _cmd_data_validate(args):
    try:
        items = data_mod.load_dataset(args.path)
    except data_mod.DatasetError as err:
        for lineno, item_id, reason in err.violations:
            print(f"line {lineno} (id={item_id}): {reason}")
        sys.exit(1)
    print(f"{len(items)} valid item(s)")


def _cmd_data_shuffle(args):
    items = data_mod.load_dataset(args.path)
    shuffled = data_mod.debias_shuffle(items, args.seed)
    data_mod.save_dataset(shuffled, args.out)
    print(f"shuffled {len(items)} item(s) with seed {args.seed} -> {args.out}")


def _cmd_data_stats(args):
    items = data_mod.load_dataset(args.path)
    counts = data_mod.option_distribution(items)
    print(f"items: {len(items)}")
    for letter, count in zip("ABCD", counts):
        share = count / len(items) if items else 0.0
        print(f"answer {letter}: {count} ({share:.1%})")
    subjects = {}
    grades = {}
    for item in items:
        subjects[item.subject] = subjects.get(item.subject, 0) + 1
        grades[item.grade] = grades.get(item.grade, 0) + 1
    for subject, count in sorted(subjects.items()):
        print(f"subject {subject}: {count}")
    for grade, count in sorted(grades.items()):
        print(f"grade {grade}: {count}")


def _cmd_retrieve_build(args):
    units = ret.load_corpus(args.corpus)
    vectors = ret.load_unit_vectors(args.embeddings) if args.embeddings else None
    retriever = ret.Retriever(units, unit_vectors=vectors)
    with open(args.out, "wb") as fh:
        pickle.dump(retriever, fh)
    print(f"indexed {len(units)} unit(s) -> {args.out}")


def _load_retriever(path) -> ret.Retriever:
    with open(path, "rb") as fh:
        return pickle.load(fh)


def _cmd_retrieve_query(args):
    retriever = _load_retriever(args.index)
    if len(args.option) != 4:
        raise SystemExit("provide exactly four --option values")
    ranked = retriever.query(args.question, args.option, args.subject, args.k, args.mode)
    for rank, (uid, score) in enumerate(ranked.entries, start=1):
        print(f"{rank:>3}  unit {uid:>5}  score {score: .6f}  {retriever.unit(uid).text}")


def _retriever_from_args(args) -> ret.Retriever:
    if args.index:
        return _load_retriever(args.index)
    if args.corpus:
        return ret.Retriever(ret.load_corpus(args.corpus))
    raise SystemExit("provide --index or --corpus")


def _cmd_retrieve_eval(args):
    retriever = _retriever_from_args(args)
    items = data_mod.load_dataset(args.dataset)
    judgments = {j.query_id: j for j in ret.load_judgments(args.judgments)}
    k_list = [int(k) for k in args.k_list.split(",")]
    modes = args.modes.split(",")
    table = retrieval_eval_table(retriever, items, judgments, k_list, modes)
    print(table)


def retrieval_eval_table(retriever, items, judgments, k_list, modes) -> str:
    """Mean P@K / R@K per retrieval mode, formatted as one row per retriever."""
    header = f"{'retriever':<10}" + "".join(f"  {'P@' + str(k):>8}  {'R@' + str(k):>8}"
                                            for k in k_list)
    lines = [header]
    flagged = 0
    for mode in modes:
        cells = []
        for k in k_list:
            precisions, recalls = [], []
            for item in items:
                judgment = judgments.get(item.id)
                if judgment is None or not judgment.relevant:
                    flagged += 1
                    continue
                ranked = retriever.query(item.question, item.options, item.subject,
                                         k, mode)
                p, r = ret.retrieval_metrics(ranked, judgment, k)
                precisions.append(p)
                recalls.append(r)
            mp = sum(precisions) / len(precisions) if precisions else 0.0
            mr = sum(recalls) / len(recalls) if recalls else 0.0
            cells.append(f"  {mp:8.4f}  {mr:8.4f}")
        lines.append(f"{mode:<10}" + "".join(cells))
    if flagged:
        lines.append(f"# excluded {flagged} query/K pair(s) without judgments")
    return "\n".join(lines)


def _cmd_retrieve_attach(args):
    retriever = _retriever_from_args(args)
    items = data_mod.load_dataset(args.dataset)
    attached = []
    for item in items:
        ranked = retriever.query(item.question, item.options, item.subject,
                                 args.k, args.mode)
        if not ranked.entries:
            logger.warning("no retrieval results for item %s", item.id)
        context = ret.build_context(ranked, retriever, args.k, args.cap)
        attached.append(data_mod.McqItem(**{**item.__dict__, "context": context}))
    data_mod.save_dataset(attached, args.out)
    print(f"attached contexts for {len(items)} item(s) -> {args.out}")


def _cmd_train(args):
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = TrainConfig(**{**config.__dict__, "seed": args.seed})
    train_items = data_mod.load_dataset(args.train)
    dev_items = data_mod.load_dataset(args.dev) if args.dev else None
    result = train(config, train_items, dev_items)
    save_checkpoint(result.checkpoint, args.out)
    last = result.history[-1]
    print(f"stopped at epoch {result.stopped_epoch}; best epoch {result.best_epoch} "
          f"(dev F1 {result.best_f1:.4f}); final dev acc {last.dev_accuracy:.4f}")
    print(f"checkpoint -> {args.out}")


def _cmd_evaluate(args):
    checkpoint = load_checkpoint(args.ckpt)
    items = data_mod.load_dataset(args.test)
    generate = None if not args.no_generate else False
    report, predictions = evaluate(checkpoint, items, generate=generate)
    print(f"items: {report.n_items}")
    print(f"accuracy: {report.accuracy:.4f}  f1-macro: {report.f1_macro:.4f}")
    if report.bleu4 is not None:
        print(f"bleu-4: {report.bleu4:.4f}  rouge-l: {report.rouge_l:.4f}")
    for title, bucket in (("subject", report.per_subject), ("grade", report.per_grade)):
        for key, s in bucket.items():
            print(f"{title} {key}: n={s.count} accuracy={s.accuracy:.4f} "
                  f"f1-macro={s.f1_macro:.4f}")
    if args.pred_out:
        write_predictions(predictions, args.pred_out)
        print(f"predictions -> {args.pred_out}")


def _cmd_predict(args):
    checkpoint = load_checkpoint(args.ckpt)
    items = data_mod.load_dataset(args.input)
    _, predictions = evaluate(checkpoint, items)
    write_predictions(predictions, args.out)
    print(f"{len(predictions)} prediction(s) -> {args.out}")


def _cmd_gradcheck(args):
    seeds = range(args.seeds)
    reports = gradcheck(args.module, seeds, args.tolerance, args.step)
    print(format_gradcheck(reports))
    if not all(r.passed for r in reports):
        sys.exit(1)


def _cmd_ablate(args):
    items = data_mod.load_dataset(args.train)
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.epochs:
        config = TrainConfig(**{**config.__dict__, "max_epochs": args.epochs})
    seeds = [int(s) for s in args.seeds.split(",")]
    split = max(1, int(len(items) * args.test_fraction))
    test_items, train_items = items[:split], items[split:]
    rows = ablate_grid(train_items, test_items, config, seeds)
    table = format_ablation_table(rows)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n", encoding="utf-8")


def _cmd_dump_phrasal(args):
    import torch

    from .phrasal import PhrasalTextEncoder

    tokens = data_mod.tokenize_text(args.input)
    if args.ckpt:
        from .train import model_from_checkpoint
        model, _, vocab = model_from_checkpoint(load_checkpoint(args.ckpt))
        encoder = model.encoder
        ids = [vocab.id_of(t) for t in tokens]
    else:
        vocab = data_mod.Vocabulary(sorted(set(tokens)))
        torch.manual_seed(args.seed)
        encoder = PhrasalTextEncoder(len(vocab), d_model=16, layers=0, heads=2)
        ids = [vocab.id_of(t) for t in tokens]
    if encoder.block is None:
        raise SystemExit("checkpoint was trained without the phrasal block")
    id_tensor = torch.tensor([ids], dtype=torch.long)
    mask = torch.ones(1, len(ids), dtype=torch.bool)
    with torch.no_grad():
        embedded = encoder.embedding(id_tensor)
        scores = encoder.block.phrasal_scores(embedded, mask)[0]
    width = max(len(t) for t in tokens)
    print(" " * (width + 2) + "  ".join(f"{t:>8}" for t in tokens))
    for token, row in zip(tokens, scores):
        print(f"{token:>{width}}  " + "  ".join(f"{v:8.4f}" for v in row.tolist()))


def _cmd_inspect_attention(args):
    import torch

    from .train import model_from_checkpoint

    model, config, vocab = model_from_checkpoint(load_checkpoint(args.ckpt))
    items = [it for it in data_mod.load_dataset(args.data) if it.id == args.item]
    if not items:
        raise SystemExit(f"item {args.item!r} not found in {args.data}")
    from .data import encode_item
    from .model import collate
    batch = collate([encode_item(items[0], vocab)], config.caps())
    probe: dict = {}
    with torch.no_grad():
        model.option_pipeline(batch, probe=probe)
    shown = 0
    for name, matrix in probe.get("attention", []):
        if args.stage in name:
            print(f"== {name}  shape {tuple(matrix.shape)}")
            print(matrix.squeeze(0))
            shown += 1
    if not shown:
        names = ", ".join(sorted({n for n, _ in probe.get("attention", [])}))
        raise SystemExit(f"no attention stage matches {args.stage!r}; stages: {names}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcqx")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=DEFAULT_VOCAB_SIZE)
    p.add_argument("--out", default="synth_data")
    p.set_defaults(func=_cmd_synth)

    p_data = sub.add_parser("data", help="dataset utilities")
    data_sub = p_data.add_subparsers(dest="data_command", required=True)
    p = data_sub.add_parser("validate")
    p.add_argument("path")
    p.set_defaults(func=_cmd_data_validate)
    p = data_sub.add_parser("shuffle")
    p.add_argument("path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_data_shuffle)
    p = data_sub.add_parser("stats")
    p.add_argument("path")
    p.set_defaults(func=_cmd_data_stats)

    p_ret = sub.add_parser("retrieve", help="context retrieval")
    ret_sub = p_ret.add_subparsers(dest="retrieve_command", required=True)
    p = ret_sub.add_parser("build-index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", help="precomputed unit_id -> vector JSONL")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_retrieve_build)
    p = ret_sub.add_parser("query")
    p.add_argument("--index", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--option", action="append", default=[],
                   help="repeat four times, one per option")
    p.add_argument("--subject", required=True)
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--mode", choices=("sparse", "dense", "rrf"), default="sparse")
    p.set_defaults(func=_cmd_retrieve_query)
    p = ret_sub.add_parser("eval")
    p.add_argument("--index")
    p.add_argument("--corpus")
    p.add_argument("--dataset", required=True)
    p.add_argument("--judgments", required=True)
    p.add_argument("--k-list", default="10,15,20,30")
    p.add_argument("--modes", default="sparse,dense,rrf")
    p.set_defaults(func=_cmd_retrieve_eval)
    p = ret_sub.add_parser("attach")
    p.add_argument("--index")
    p.add_argument("--corpus")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--cap", type=int, default=400)
    p.add_argument("--mode", choices=("sparse", "dense", "rrf"), default="sparse")
    p.set_defaults(func=_cmd_retrieve_attach)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="checkpoint.pt")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--pred-out")
    p.add_argument("--no-generate", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("predict", help="write a prediction file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--module", choices=(*MODULE_NAMES, "all"), default="all")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--grid", action="store_true", help="accepted for clarity; the grid is the default")
    p.add_argument("--train", required=True)
    p.add_argument("--config")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_ablate)

    p_enc = sub.add_parser("encoder", help="encoder debugging")
    enc_sub = p_enc.add_subparsers(dest="encoder_command", required=True)
    p = enc_sub.add_parser("dump-phrasal")
    p.add_argument("--input", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_dump_phrasal)

    p_ins = sub.add_parser("inspect", help="model debugging")
    ins_sub = p_ins.add_subparsers(dest="inspect_command", required=True)
    p = ins_sub.add_parser("attention")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--item", required=True)
    p.add_argument("--stage", required=True)
    p.set_defaults(func=_cmd_inspect_attention)

    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)


if __name__ == "__main__":
    main()
