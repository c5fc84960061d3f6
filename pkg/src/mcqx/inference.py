"""Option comparison network: each question-fused option is contrasted with
the other options (trilinear attention + keep-eliminate), gated back toward
its original features, co-attended with the retrieved context, and fused into
a final per-option representation.

Partner features are averaged with a sort-before-sum reduction so the result
is bitwise invariant to the order the four options arrive in.
"""

from __future__ import annotations

import torch
from torch import nn

from .phrasal import DEFAULT_DTYPE, record

NUM_OPTIONS = 4


def trilinear_attention(f_a: torch.Tensor, f_b: torch.Tensor, w_a: torch.Tensor,
                        key_mask: torch.Tensor | None = None,
                        probe: dict | None = None,
                        name: str = "trilinear") -> torch.Tensor:
    """Row-stochastic attention with logits w_a^T [a_i ; b_j ; a_i * b_j].

    f_a: (B, m, d); f_b: (B, n, d); w_a: (3d,). Returns (B, m, n) with PAD
    columns masked before the softmax.
    """
    d = f_a.shape[-1]
    u, v, w = w_a.split(d)
    logits = (f_a @ u)[:, :, None] + (f_b @ v)[:, None, :] + (f_a * w) @ f_b.transpose(1, 2)
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite attention logits")
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, :], float("-inf"))
        empty = ~key_mask.any(dim=1)
        if empty.any():
            logits = torch.where(empty[:, None, None], logits.new_zeros(()), logits)
    weights = torch.softmax(logits, dim=-1)
    record(probe, "attention", name, weights)
    return weights


def fuse_question_option(f_q: torch.Tensor, f_o: torch.Tensor,
                         mask_q: torch.Tensor | None = None,
                         mask_o: torch.Tensor | None = None):
    """Concatenate question rows before option rows along the sequence axis."""
    if f_q.shape[-1] != f_o.shape[-1]:
        raise ValueError("feature widths differ")
    fused = torch.cat([f_q, f_o], dim=1)
    if mask_q is None or mask_o is None:
        return fused, None
    return fused, torch.cat([mask_q, mask_o], dim=1)


def keep_eliminate(f: torch.Tensor, attended: torch.Tensor) -> torch.Tensor:
    """[f - f' ; f * f'] along the feature axis; near-zero difference marks
    options that say the same thing."""
    if f.shape != attended.shape:
        raise ValueError("shape mismatch between fused and attended features")
    return torch.cat([f - attended, f * attended], dim=-1)


def _sorted_mean(tensors: list[torch.Tensor]) -> torch.Tensor:
    # sort along the partner axis so the summation order cannot depend on
    # the order the options were supplied in
    stacked = torch.stack(tensors, dim=0)
    vals, _ = torch.sort(stacked, dim=0)
    total = vals[0]
    for i in range(1, vals.shape[0]):
        total = total + vals[i]
    return total / vals.shape[0]


def aggregate_comparisons(f: torch.Tensor, kept: list[torch.Tensor],
                          attended: list[torch.Tensor],
                          proj: nn.Linear) -> torch.Tensor:
    """Average the pairwise comparison features over the three partners and
    project [f ; mean diff ; mean product ; mean attended] down to width d."""
    if len(kept) != NUM_OPTIONS - 1 or len(attended) != NUM_OPTIONS - 1:
        raise ValueError(f"expected {NUM_OPTIONS - 1} comparison partners")
    d = f.shape[-1]
    mean_diff = _sorted_mean([k[..., :d] for k in kept])
    mean_prod = _sorted_mean([k[..., d:] for k in kept])
    mean_att = _sorted_mean(attended)
    return torch.tanh(proj(torch.cat([f, mean_diff, mean_prod, mean_att], dim=-1)))


def gated_fusion(f: torch.Tensor, compared: torch.Tensor,
                 gate: nn.Linear) -> torch.Tensor:
    """Per-token scalar gate between the fused features and the comparison
    features; the output is an elementwise convex combination of the two."""
    if f.shape != compared.shape:
        raise ValueError("shape mismatch in gated fusion")
    g = torch.sigmoid(gate(torch.cat([f, compared], dim=-1)))
    return g * f + (1.0 - g) * compared


def context_coattention(f_o: torch.Tensor, f_p: torch.Tensor,
                        w_opt_ctx: torch.Tensor, w_ctx_opt: torch.Tensor,
                        mask_o: torch.Tensor | None = None,
                        mask_p: torch.Tensor | None = None,
                        probe: dict | None = None,
                        name: str = "coattn") -> torch.Tensor:
    """Bidirectional attention with the context; returns (B, n_o, 2d)."""
    if f_p.shape[1] == 0 or (mask_p is not None and not mask_p.any()):
        raise ValueError("retrieval produced no context")
    attn_o = trilinear_attention(f_o, f_p, w_opt_ctx, mask_p, probe, f"{name}.opt_ctx")
    attn_p = trilinear_attention(f_p, f_o, w_ctx_opt, mask_o, probe, f"{name}.ctx_opt")
    return attn_o @ torch.cat([f_p, attn_p @ f_o], dim=-1)


def final_option_representation(f_o: torch.Tensor, f_hat: torch.Tensor,
                                w_self: torch.Tensor, proj_in: nn.Linear,
                                proj_out: nn.Linear,
                                mask_o: torch.Tensor | None = None,
                                probe: dict | None = None,
                                name: str = "final") -> torch.Tensor:
    """Self-attentive fusion of the gated and context-aware features.

    ReLU output, so every entry is non-negative.
    """
    hidden = torch.relu(proj_in(torch.cat([f_o, f_hat], dim=-1)))
    attn = trilinear_attention(hidden, hidden, w_self, mask_o, probe, f"{name}.self")
    pooled = attn @ hidden
    combined = torch.cat([hidden, pooled, hidden - pooled, hidden * pooled], dim=-1)
    return torch.relu(proj_out(combined))


def _vector_param(size: int, dtype) -> nn.Parameter:
    return nn.Parameter(torch.randn(size, dtype=dtype) * size ** -0.5)


class OptionComparator(nn.Module):
    """The full per-option pipeline; each trilinear call site has its own
    weight vector. Processing the four options in any order yields bitwise
    identical per-option outputs."""

    def __init__(self, d_model: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.d_model = d_model
        self.w_pair = _vector_param(3 * d_model, dtype)
        self.w_opt_ctx = _vector_param(3 * d_model, dtype)
        self.w_ctx_opt = _vector_param(3 * d_model, dtype)
        self.w_self = _vector_param(3 * d_model, dtype)
        self.compare = nn.Linear(4 * d_model, d_model, dtype=dtype)
        self.gate = nn.Linear(2 * d_model, 1, dtype=dtype)
        self.fuse_context = nn.Linear(3 * d_model, d_model, dtype=dtype)
        self.fuse_final = nn.Linear(4 * d_model, d_model, dtype=dtype)

    def forward(self, f_q: torch.Tensor, mask_q: torch.Tensor | None,
                option_features: list[torch.Tensor],
                option_masks: list[torch.Tensor | None],
                f_p: torch.Tensor, mask_p: torch.Tensor | None,
                probe: dict | None = None):
        """Returns (final_features, fused_masks): four (B, n_q + n_ok, d)
        matrices with everything non-negative, and their sequence masks."""
        if len(option_features) != NUM_OPTIONS:
            raise ValueError(f"expected {NUM_OPTIONS} options")
        fused, fused_masks = [], []
        for f_o, m_o in zip(option_features, option_masks):
            f, m = fuse_question_option(f_q, f_o, mask_q, m_o)
            fused.append(f)
            fused_masks.append(m)

        attended = [[None] * NUM_OPTIONS for _ in range(NUM_OPTIONS)]
        for k in range(NUM_OPTIONS):
            for l in range(NUM_OPTIONS):
                if l == k:
                    continue
                attn = trilinear_attention(fused[k], fused[l], self.w_pair,
                                           fused_masks[l], probe, f"pair.{k}.{l}")
                attended[k][l] = attn @ fused[l]

        finals = []
        for k in range(NUM_OPTIONS):
            partners = [attended[k][l] for l in range(NUM_OPTIONS) if l != k]
            kept = [keep_eliminate(fused[k], att) for att in partners]
            compared = aggregate_comparisons(fused[k], kept, partners, self.compare)
            gated = gated_fusion(fused[k], compared, self.gate)
            f_hat = context_coattention(gated, f_p, self.w_opt_ctx, self.w_ctx_opt,
                                        fused_masks[k], mask_p, probe, f"coattn.{k}")
            final = final_option_representation(gated, f_hat, self.w_self,
                                                self.fuse_context, self.fuse_final,
                                                fused_masks[k], probe, f"final.{k}")
            finals.append(final)
        return finals, fused_masks
