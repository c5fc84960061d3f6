"""Phrasal-attention text encoder.

Self-attention is modulated elementwise by a phrasal score matrix P, where
P[i, j] is the probability that tokens i..j belong to one phrase. P is built
from adjacent-link probabilities (a bilinear score per neighboring pair,
softmax-normalized over each token's two neighbors, geometric-averaged per
link) and products over spans are evaluated in log space.

The encoder stack is: embedding table, one phrasal attention block with a
residual connection, then L pre-norm transformer layers. All parameters are
float64 by default so gradient checks run at full precision.
"""

from __future__ import annotations

import math

import torch
from torch import nn

DEFAULT_DTYPE = torch.float64


def record(probe: dict | None, kind: str, name: str, *tensors: torch.Tensor) -> None:
    """Stash detached tensors in a probe dict for inspection and tests."""
    if probe is None:
        return
    payload = tuple(t.detach().clone() for t in tensors)
    probe.setdefault(kind, []).append((name, *payload))


def link_probabilities(features: torch.Tensor, w_b: torch.Tensor,
                       mask: torch.Tensor | None = None) -> torch.Tensor:
    """Same-phrase probability for each adjacent token pair.

    features: (B, n, d); w_b: (d, d); mask: (B, n) with True at real tokens.
    Returns (B, n-1) link strengths in (0, 1]. Link k couples tokens k and
    k+1: the bilinear scores of each token against its neighbors are
    softmax-normalized per token (a boundary token gives its only neighbor
    probability 1), and the link is the geometric mean of the two directed
    probabilities. Links touching PAD are 1.
    """
    batch, n, _ = features.shape
    if n < 2:
        return features.new_ones((batch, 0))
    if mask is None:
        mask = features.new_ones((batch, n), dtype=torch.bool)
    lengths = mask.sum(dim=1)

    # r[k] = f_k^T W_b f_{k+1}
    r = torch.einsum("bkd,de,bke->bk", features[:, :-1], w_b, features[:, 1:])
    idx = torch.arange(n - 1, device=features.device)

    # token k's probability of relating rightward; token 0 has no left neighbor
    r_prev = torch.cat([r.new_zeros(batch, 1), r[:, :-1]], dim=1)
    pr_right = torch.sigmoid(r - r_prev)
    pr_right = torch.where(idx[None, :] == 0, pr_right.new_ones(()), pr_right)

    # token k+1's probability of relating leftward; the last real token has
    # no right neighbor
    r_next = torch.cat([r[:, 1:], r.new_zeros(batch, 1)], dim=1)
    pr_left = torch.sigmoid(r - r_next)
    is_last = idx[None, :] == (lengths[:, None] - 2)
    pr_left = torch.where(is_last, pr_left.new_ones(()), pr_left)

    links = torch.sqrt(pr_right * pr_left)
    real = idx[None, :] < (lengths[:, None] - 1)
    return torch.where(real, links, links.new_ones(()))


def phrasal_matrix(links: torch.Tensor,
                   mask: torch.Tensor | None = None) -> torch.Tensor:
    """Span probabilities P[i, j] = prod of links i..j-1, in log space.

    links: (B, n-1) in (0, 1]; returns (B, n, n), symmetric with unit
    diagonal. Entries involving PAD positions are 1 so modulation never
    resurrects masked attention weights.
    """
    if (links <= 0).any():
        raise ValueError("link probabilities must be positive (log undefined)")
    batch, n_links = links.shape
    n = n_links + 1
    cum = torch.cat([links.new_zeros(batch, 1), torch.log(links).cumsum(dim=1)], dim=1)
    matrix = torch.exp(-(cum[:, :, None] - cum[:, None, :]).abs())
    if mask is not None:
        valid = mask[:, :, None] & mask[:, None, :]
        matrix = torch.where(valid, matrix, matrix.new_ones(()))
    return matrix


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    batch, n, d = x.shape
    return x.view(batch, n, heads, d // heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    batch, heads, n, dh = x.shape
    return x.transpose(1, 2).reshape(batch, n, heads * dh)


def scaled_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     key_mask: torch.Tensor | None = None,
                     phrasal: torch.Tensor | None = None,
                     causal: bool = False,
                     probe: dict | None = None,
                     name: str = "attn") -> torch.Tensor:
    """Multihead scaled dot-product attention with optional phrasal modulation.

    q, k, v: (B, h, n, dh). PAD key columns are masked to -inf before the
    softmax; the modulated matrix A * P is used as-is, with no row
    renormalization. Rows whose keys are entirely PAD fall back to uniform
    weights so outputs stay finite (their positions are masked downstream).
    """
    dh = q.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(dh)
    if causal:
        n_q, n_k = logits.shape[-2:]
        future = torch.triu(torch.ones(n_q, n_k, dtype=torch.bool, device=q.device), 1)
        logits = logits.masked_fill(future, float("-inf"))
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        empty = ~key_mask.any(dim=1)
        if empty.any():
            logits = torch.where(empty[:, None, None, None], logits.new_zeros(()), logits)
    weights = torch.softmax(logits, dim=-1)
    record(probe, "attention", name, weights)
    if phrasal is not None:
        modulated = weights * phrasal[:, None]
        record(probe, "modulated", name, weights, modulated)
        weights = modulated
    return weights @ v


class PhrasalAttentionBlock(nn.Module):
    """Self-attention block whose weights are damped by phrasal scores.

    Pre-norm with a residual connection, so zeroing the value projection
    makes the block an exact identity. One P per call, shared across heads,
    derived from the block's normalized input.
    """

    def __init__(self, d_model: int, heads: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        if d_model % heads != 0:
            raise ValueError("d_model must be divisible by heads")
        self.heads = heads
        self.norm = nn.LayerNorm(d_model, dtype=dtype)
        self.w_q = nn.Linear(d_model, d_model, bias=False, dtype=dtype)
        self.w_k = nn.Linear(d_model, d_model, bias=False, dtype=dtype)
        self.w_v = nn.Linear(d_model, d_model, bias=False, dtype=dtype)
        # zero bilinear weights start every phrase link uninformative
        self.w_b = nn.Parameter(torch.zeros(d_model, d_model, dtype=dtype))

    def phrasal_scores(self, x: torch.Tensor,
                       mask: torch.Tensor | None = None) -> torch.Tensor:
        g = self.norm(x)
        return phrasal_matrix(link_probabilities(g, self.w_b, mask), mask)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None,
                probe: dict | None = None, name: str = "phrasal_block") -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in attention input")
        g = self.norm(x)
        links = link_probabilities(g, self.w_b, mask)
        scores = phrasal_matrix(links, mask)
        record(probe, "phrasal", name, scores)
        out = scaled_attention(
            split_heads(self.w_q(g), self.heads),
            split_heads(self.w_k(g), self.heads),
            split_heads(self.w_v(g), self.heads),
            key_mask=mask, phrasal=scores, probe=probe, name=name,
        )
        return x + merge_heads(out)


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer, optionally phrasal-modulated."""

    def __init__(self, d_model: int, heads: int, ff_mult: int = 4,
                 phrasal: bool = False, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d_model, dtype=dtype)
        self.norm2 = nn.LayerNorm(d_model, dtype=dtype)
        self.w_q = nn.Linear(d_model, d_model, bias=False, dtype=dtype)
        self.w_k = nn.Linear(d_model, d_model, bias=False, dtype=dtype)
        self.w_v = nn.Linear(d_model, d_model, bias=False, dtype=dtype)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model, dtype=dtype),
            nn.ReLU(),
            nn.Linear(ff_mult * d_model, d_model, dtype=dtype),
        )
        self.w_b = nn.Parameter(torch.zeros(d_model, d_model, dtype=dtype)) if phrasal else None

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None,
                probe: dict | None = None, name: str = "layer") -> torch.Tensor:
        g = self.norm1(x)
        scores = None
        if self.w_b is not None:
            scores = phrasal_matrix(link_probabilities(g, self.w_b, mask), mask)
            record(probe, "phrasal", name, scores)
        out = scaled_attention(
            split_heads(self.w_q(g), self.heads),
            split_heads(self.w_k(g), self.heads),
            split_heads(self.w_v(g), self.heads),
            key_mask=mask, phrasal=scores, probe=probe, name=name,
        )
        x = x + merge_heads(out)
        return x + self.ff(self.norm2(x))


class PhrasalTextEncoder(nn.Module):
    """Embedding table + phrasal attention block + L encoder layers.

    `use_phrasal=False` drops the block entirely (the ablation switch);
    `phrasal_per_layer=True` additionally modulates every encoder layer
    with its own link parameters.
    """

    def __init__(self, vocab_size: int, d_model: int = 64, layers: int = 2,
                 heads: int = 4, ff_mult: int = 4, use_phrasal: bool = True,
                 phrasal_per_layer: bool = False, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.d_model = d_model
        self.embedding = nn.Embedding(vocab_size, d_model, dtype=dtype)
        self.block = PhrasalAttentionBlock(d_model, heads, dtype=dtype) if use_phrasal else None
        self.layers = nn.ModuleList(
            EncoderLayer(d_model, heads, ff_mult,
                         phrasal=use_phrasal and phrasal_per_layer, dtype=dtype)
            for _ in range(layers)
        )

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None,
                probe: dict | None = None, name: str = "encoder") -> torch.Tensor:
        if ids.numel() and int(ids.max()) >= self.embedding.num_embeddings:
            raise ValueError("token id out of vocabulary range")
        x = self.embedding(ids)
        if self.block is not None:
            x = self.block(x, mask, probe=probe, name=f"{name}.block")
        for i, layer in enumerate(self.layers):
            x = layer(x, mask, probe=probe, name=f"{name}.layer{i}")
        return x
