"""Answer scoring, selection, explanation decoding, and the multitask loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import BOS_ID, EOS_ID
from .phrasal import DEFAULT_DTYPE, merge_heads, record, scaled_attention, split_heads


def option_scores(features: list[torch.Tensor], masks: list[torch.Tensor | None],
                  w_s: torch.Tensor) -> torch.Tensor:
    """Score each option: dot of w_s with the per-feature max over non-PAD
    positions. features: four (B, n_k, d) matrices; returns (B, 4)."""
    pooled = []
    for f, m in zip(features, masks):
        if m is not None:
            if (~m.any(dim=1)).any():
                raise ValueError("cannot max-pool an all-PAD option")
            f = f.masked_fill(~m[:, :, None], float("-inf"))
        elif f.shape[1] == 0:
            raise ValueError("cannot max-pool an empty option")
        pooled.append(f.max(dim=1).values)
    return torch.stack([p @ w_s for p in pooled], dim=-1)


def option_probabilities(scores: torch.Tensor) -> torch.Tensor:
    """Softmax over the four option scores."""
    if not torch.isfinite(scores).all():
        raise ValueError("non-finite option scores")
    return torch.softmax(scores, dim=-1)


def select_option(probs: torch.Tensor) -> torch.Tensor:
    """Argmax with ties broken toward the lowest index."""
    best = probs.max(dim=-1, keepdim=True).values
    idx = torch.arange(probs.shape[-1], device=probs.device).expand_as(probs)
    return torch.where(probs == best, idx, probs.shape[-1]).min(dim=-1).values


def decoder_memory(f_q: torch.Tensor, mask_q: torch.Tensor,
                   f_p: torch.Tensor, mask_p: torch.Tensor,
                   f_k: torch.Tensor, mask_k: torch.Tensor):
    """Concatenate question, context, and selected-option features along the
    sequence axis, with their masks."""
    if f_p.shape[1] == 0 or not mask_p.any():
        raise ValueError("decoder memory requires a retrieved context")
    memory = torch.cat([f_q, f_p, f_k], dim=1)
    mask = torch.cat([mask_q, mask_p, mask_k], dim=1)
    return memory, mask


class DecoderLayer(nn.Module):
    """Pre-norm decoder layer: causal self-attention, cross-attention over
    the memory, feed-forward."""

    def __init__(self, d_model: int, heads: int, ff_mult: int = 4, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d_model, dtype=dtype)
        self.norm2 = nn.LayerNorm(d_model, dtype=dtype)
        self.norm3 = nn.LayerNorm(d_model, dtype=dtype)
        self.self_q = nn.Linear(d_model, d_model, bias=False, dtype=dtype)
        self.self_k = nn.Linear(d_model, d_model, bias=False, dtype=dtype)
        self.self_v = nn.Linear(d_model, d_model, bias=False, dtype=dtype)
        self.cross_q = nn.Linear(d_model, d_model, bias=False, dtype=dtype)
        self.cross_k = nn.Linear(d_model, d_model, bias=False, dtype=dtype)
        self.cross_v = nn.Linear(d_model, d_model, bias=False, dtype=dtype)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model, dtype=dtype),
            nn.ReLU(),
            nn.Linear(ff_mult * d_model, d_model, dtype=dtype),
        )

    def forward(self, x, memory, memory_mask=None, probe=None, name="dec"):
        g = self.norm1(x)
        x = x + merge_heads(scaled_attention(
            split_heads(self.self_q(g), self.heads),
            split_heads(self.self_k(g), self.heads),
            split_heads(self.self_v(g), self.heads),
            causal=True, probe=probe, name=f"{name}.self",
        ))
        g = self.norm2(x)
        x = x + merge_heads(scaled_attention(
            split_heads(self.cross_q(g), self.heads),
            split_heads(self.cross_k(memory), self.heads),
            split_heads(self.cross_v(memory), self.heads),
            key_mask=memory_mask, probe=probe, name=f"{name}.cross",
        ))
        return x + self.ff(self.norm3(x))


class ExplanationDecoder(nn.Module):
    """Autoregressive decoder over the shared token embedding, conditioned on
    [question ; context ; selected option] features via cross-attention."""

    def __init__(self, embedding: nn.Embedding, layers: int = 2, heads: int = 4,
                 ff_mult: int = 4, max_positions: int = 512, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.embedding = embedding
        d_model = embedding.embedding_dim
        self.positions = nn.Embedding(max_positions, d_model, dtype=dtype)
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, heads, ff_mult, dtype=dtype) for _ in range(layers)
        )
        self.norm = nn.LayerNorm(d_model, dtype=dtype)
        # weight tying with the shared token table
        self.out = nn.Linear(d_model, embedding.num_embeddings, dtype=dtype)
        self.out.weight = embedding.weight

    def forward(self, ids: torch.Tensor, memory: torch.Tensor,
                memory_mask: torch.Tensor | None = None,
                probe: dict | None = None) -> torch.Tensor:
        """Teacher-forced logits (B, T, |V|) for the next token at each step."""
        if ids.shape[1] > self.positions.num_embeddings:
            raise ValueError("explanation longer than the positional table")
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.embedding(ids) + self.positions(pos)[None]
        for i, layer in enumerate(self.layers):
            x = layer(x, memory, memory_mask, probe=probe, name=f"decoder.layer{i}")
        return self.out(self.norm(x))

    @torch.no_grad()
    def greedy_decode(self, memory: torch.Tensor, memory_mask: torch.Tensor | None,
                      max_len: int = 300) -> list[int]:
        """Generate token ids from BOS until EOS or max_len (single item)."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        ids = [BOS_ID]
        for _ in range(max_len):
            inp = torch.tensor([ids], dtype=torch.long, device=memory.device)
            logits = self.forward(inp, memory, memory_mask)[0, -1]
            nxt = int(torch.argmax(logits))
            if nxt == EOS_ID:
                break
            ids.append(nxt)
        return ids[1:]

    @torch.no_grad()
    def beam_decode(self, memory: torch.Tensor, memory_mask: torch.Tensor | None,
                    max_len: int = 300, width: int = 1) -> list[int]:
        """Beam search over summed log-probabilities; width 1 matches greedy."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if width < 1:
            raise ValueError("beam width must be >= 1")
        beams: list[tuple[float, list[int], bool]] = [(0.0, [BOS_ID], False)]
        for _ in range(max_len):
            candidates = []
            for score, ids, done in beams:
                if done:
                    candidates.append((score, ids, True))
                    continue
                inp = torch.tensor([ids], dtype=torch.long, device=memory.device)
                logp = torch.log_softmax(self.forward(inp, memory, memory_mask)[0, -1], dim=-1)
                top = torch.topk(logp, min(width, logp.shape[0]))
                for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                    candidates.append((score + lp, ids + [tok], tok == EOS_ID))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            beams = candidates[:width]
            if all(done for _, _, done in beams):
                break
        _, best_ids, _ = beams[0]
        if best_ids and best_ids[-1] == EOS_ID:
            best_ids = best_ids[:-1]
        return best_ids[1:]


@dataclass
class LossBreakdown:
    """Multiple-choice loss, explanation loss, and their exact sum."""

    choice: torch.Tensor
    explanation: torch.Tensor
    total: torch.Tensor
    skipped_explanations: int = 0


def multitask_loss(scores: torch.Tensor, gold: torch.Tensor,
                   expl_logits: torch.Tensor | None = None,
                   expl_targets: torch.Tensor | None = None,
                   expl_mask: torch.Tensor | None = None,
                   has_explanation: torch.Tensor | None = None,
                   mode: str = "multitask") -> LossBreakdown:
    """Joint objective: mean gold-option NLL plus the explanation NLL
    (token-summed per item, averaged over items that carry an explanation).

    Single-task mode zeroes the explanation term. Items without explanations
    are excluded from the explanation term and counted as skipped.
    """
    if mode not in ("single", "multitask"):
        raise ValueError(f"unknown loss mode {mode!r}")
    log_probs = torch.log_softmax(scores, dim=-1)
    l_mc = -log_probs.gather(1, gold[:, None]).squeeze(1).mean()

    skipped = 0
    if mode == "single" or expl_logits is None:
        l_e = scores.new_zeros(())
        if mode == "multitask" and has_explanation is not None:
            skipped = int((~has_explanation).sum())
    else:
        token_logp = torch.log_softmax(expl_logits, dim=-1)
        picked = token_logp.gather(2, expl_targets[:, :, None]).squeeze(2)
        if expl_mask is not None:
            picked = picked * expl_mask
        per_item = picked.sum(dim=1)
        if has_explanation is None:
            has_explanation = torch.ones(scores.shape[0], dtype=torch.bool,
                                         device=scores.device)
        skipped = int((~has_explanation).sum())
        n_with = int(has_explanation.sum())
        if n_with == 0:
            l_e = scores.new_zeros(())
        else:
            l_e = -(per_item * has_explanation).sum() / n_with
    return LossBreakdown(choice=l_mc, explanation=l_e, total=l_mc + l_e,
                         skipped_explanations=skipped)
