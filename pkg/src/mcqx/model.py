"""Full answer-selection + explanation model and batch collation."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import BOS_ID, EOS_ID, PAD_ID, EncodedItem, TruncationCaps, truncate_item
from .heads import ExplanationDecoder, decoder_memory, multitask_loss, option_probabilities, \
    option_scores, select_option
from .inference import NUM_OPTIONS, OptionComparator
from .phrasal import DEFAULT_DTYPE, PhrasalTextEncoder


@dataclass
class Batch:
    """Padded id/mask tensors for a list of encoded items."""

    ids: list[str]
    subjects: list[str]
    grades: list[int]
    question: torch.Tensor
    question_mask: torch.Tensor
    options: torch.Tensor        # (B, 4, n_o)
    options_mask: torch.Tensor
    context: torch.Tensor
    context_mask: torch.Tensor
    answer: torch.Tensor
    expl_input: torch.Tensor     # BOS-prefixed, (B, T)
    expl_target: torch.Tensor    # EOS-suffixed, (B, T)
    expl_mask: torch.Tensor
    has_explanation: torch.Tensor

    def __len__(self) -> int:
        return len(self.ids)


def _pad(seqs: list[list[int]], min_len: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(min_len, max((len(s) for s in seqs), default=0))
    ids = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for i, seq in enumerate(seqs):
        if seq:
            ids[i, :len(seq)] = torch.tensor(seq, dtype=torch.long)
            mask[i, :len(seq)] = True
    return ids, mask


def collate(items: list[EncodedItem], caps: TruncationCaps = TruncationCaps()) -> Batch:
    """Truncate and pad a list of encoded items into one batch."""
    items = [truncate_item(it, caps) for it in items]
    question, question_mask = _pad([it.question.ids for it in items])
    context, context_mask = _pad([it.context.ids for it in items])

    opt_seqs = [[it.options[k].ids for it in items] for k in range(NUM_OPTIONS)]
    opt_width = max(1, max(len(s) for col in opt_seqs for s in col))
    opt_cols = [_pad(col, min_len=opt_width) for col in opt_seqs]
    options = torch.stack([ids for ids, _ in opt_cols], dim=1)
    options_mask = torch.stack([m for _, m in opt_cols], dim=1)

    expl_in, expl_tgt, has_expl = [], [], []
    for it in items:
        if it.explanation is not None and len(it.explanation) > 0:
            full = [BOS_ID, *it.explanation.ids, EOS_ID]
            expl_in.append(full[:-1])
            expl_tgt.append(full[1:])
            has_expl.append(True)
        else:
            expl_in.append([BOS_ID])
            expl_tgt.append([EOS_ID])
            has_expl.append(False)
    expl_input, _ = _pad(expl_in)
    expl_target, expl_mask = _pad(expl_tgt)

    return Batch(
        ids=[it.id for it in items],
        subjects=[it.subject for it in items],
        grades=[it.grade for it in items],
        question=question, question_mask=question_mask,
        options=options, options_mask=options_mask,
        context=context, context_mask=context_mask,
        answer=torch.tensor([it.answer for it in items], dtype=torch.long),
        expl_input=expl_input, expl_target=expl_target,
        expl_mask=expl_mask.to(DEFAULT_DTYPE),
        has_explanation=torch.tensor(has_expl, dtype=torch.bool),
    )


class McqModel(nn.Module):
    """Shared text encoder, option comparator, option scorer, and decoder."""

    def __init__(self, vocab_size: int, d_model: int = 64, encoder_layers: int = 2,
                 heads: int = 4, decoder_layers: int = 2, ff_mult: int = 4,
                 use_phrasal: bool = True, phrasal_per_layer: bool = False,
                 max_positions: int = 512, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.encoder = PhrasalTextEncoder(vocab_size, d_model, encoder_layers, heads,
                                          ff_mult, use_phrasal, phrasal_per_layer, dtype)
        self.comparator = OptionComparator(d_model, dtype=dtype)
        # zero scorer init: the first optimizer steps already point it along
        # the mean gold-vs-distractor feature direction
        self.w_s = nn.Parameter(torch.zeros(d_model, dtype=dtype))
        self.decoder = ExplanationDecoder(self.encoder.embedding, decoder_layers,
                                          heads, ff_mult, max_positions, dtype)

    def encode_batch(self, batch: Batch, probe: dict | None = None):
        """Run the shared encoder over question, options, and context."""
        f_q = self.encoder(batch.question, batch.question_mask, probe, "question")
        f_p = self.encoder(batch.context, batch.context_mask, probe, "context")
        b, n_opt, width = batch.options.shape
        flat = self.encoder(batch.options.reshape(b * n_opt, width),
                            batch.options_mask.reshape(b * n_opt, width),
                            probe, "option")
        f_o = flat.reshape(b, n_opt, width, -1)
        return f_q, f_p, f_o

    def option_pipeline(self, batch: Batch, probe: dict | None = None):
        """Encoder + comparator + scorer; returns scores and per-option
        final features/masks."""
        f_q, f_p, f_o = self.encode_batch(batch, probe)
        opt_feats = [f_o[:, k] for k in range(NUM_OPTIONS)]
        opt_masks = [batch.options_mask[:, k] for k in range(NUM_OPTIONS)]
        finals, fused_masks = self.comparator(
            f_q, batch.question_mask, opt_feats, opt_masks,
            f_p, batch.context_mask, probe,
        )
        scores = option_scores(finals, fused_masks, self.w_s)
        return scores, finals, fused_masks, f_q, f_p

    def _memory_for(self, batch: Batch, finals, fused_masks, f_q, f_p,
                    selection: torch.Tensor):
        stacked = torch.stack(finals, dim=1)            # (B, 4, n_qk, d)
        stacked_m = torch.stack(fused_masks, dim=1)
        rows = torch.arange(len(batch), device=selection.device)
        f_k = stacked[rows, selection]
        m_k = stacked_m[rows, selection]
        return decoder_memory(f_q, batch.question_mask, f_p, batch.context_mask,
                              f_k, m_k)

    def forward(self, batch: Batch, mode: str = "multitask",
                teacher: str = "gold", probe: dict | None = None):
        """Training forward pass: option scores plus (in multitask mode)
        teacher-forced explanation logits conditioned on the gold option."""
        scores, finals, fused_masks, f_q, f_p = self.option_pipeline(batch, probe)
        expl_logits = None
        if mode == "multitask":
            selection = batch.answer if teacher == "gold" else select_option(scores)
            memory, memory_mask = self._memory_for(batch, finals, fused_masks,
                                                   f_q, f_p, selection)
            expl_logits = self.decoder(batch.expl_input, memory, memory_mask, probe)
        return scores, expl_logits

    def loss(self, batch: Batch, mode: str = "multitask"):
        scores, expl_logits = self.forward(batch, mode=mode)
        return multitask_loss(scores, batch.answer, expl_logits, batch.expl_target,
                              batch.expl_mask, batch.has_explanation, mode=mode)

    @torch.no_grad()
    def predict(self, batch: Batch, generate: bool = False, max_len: int = 300,
                beam: int = 1, probe: dict | None = None):
        """Answer probabilities, selected options, and (optionally) greedy or
        beam explanations conditioned on the predicted option."""
        scores, finals, fused_masks, f_q, f_p = self.option_pipeline(batch, probe)
        probs = option_probabilities(scores)
        answers = select_option(probs)
        explanations: list[list[int]] | None = None
        if generate:
            memory, memory_mask = self._memory_for(batch, finals, fused_masks,
                                                   f_q, f_p, answers)
            explanations = []
            for i in range(len(batch)):
                mem_i = memory[i:i + 1]
                mask_i = memory_mask[i:i + 1]
                if beam > 1:
                    ids = self.decoder.beam_decode(mem_i, mask_i, max_len, beam)
                else:
                    ids = self.decoder.greedy_decode(mem_i, mask_i, max_len)
                explanations.append(ids)
        return probs, answers, explanations
