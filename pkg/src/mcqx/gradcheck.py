"""Finite-difference verification of analytic gradients.

For every named parameter of a module we compare the autograd gradient
against a central difference (step 1e-5, float64) along a random direction;
a fresh direction is retried once before a parameter is reported as failing.
A genuine gradient bug fails for every direction, so the retry only filters
rare ReLU-kink crossings of the probe step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
from torch import nn

from .data import BOS_ID
from .heads import ExplanationDecoder, multitask_loss, option_scores
from .inference import OptionComparator
from .phrasal import PhrasalTextEncoder

DEFAULT_TOLERANCE = 1e-3
DEFAULT_STEP = 1e-5
MODULE_NAMES = ("encoder", "inference", "heads")


@dataclass
class GradCheckReport:
    module: str
    seed: int
    max_rel_err: float
    worst_param: str
    passed: bool
    failures: list[str] = field(default_factory=list)
    per_param: dict = field(default_factory=dict)


def _encoder_case(seed: int):
    torch.manual_seed(seed)
    module = PhrasalTextEncoder(vocab_size=16, d_model=8, layers=2, heads=4)
    ids = torch.randint(4, 16, (2, 5))
    mask = torch.tensor([[True] * 5, [True, True, True, False, False]])
    proj = torch.randn(2, 5, 8, dtype=torch.float64) * mask[:, :, None]

    def loss_fn():
        return (module(ids, mask) * proj).sum()

    return module, loss_fn


def _inference_case(seed: int):
    torch.manual_seed(seed)
    d = 8
    module = OptionComparator(d)
    f_q = torch.randn(1, 3, d, dtype=torch.float64)
    options = [torch.randn(1, 2 + (k % 2), d, dtype=torch.float64) for k in range(4)]
    f_p = torch.randn(1, 4, d, dtype=torch.float64)
    mask_q = torch.ones(1, 3, dtype=torch.bool)
    opt_masks = [torch.ones(1, f.shape[1], dtype=torch.bool) for f in options]
    mask_p = torch.ones(1, 4, dtype=torch.bool)
    projs = [torch.randn(1, 3 + f.shape[1], d, dtype=torch.float64) for f in options]

    def loss_fn():
        finals, _ = module(f_q, mask_q, options, opt_masks, f_p, mask_p)
        return sum((f * p).sum() for f, p in zip(finals, projs))

    return module, loss_fn


class _Heads(nn.Module):
    def __init__(self, vocab_size: int, d_model: int, heads: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, d_model, dtype=torch.float64)
        self.w_s = nn.Parameter(torch.randn(d_model, dtype=torch.float64) * d_model ** -0.5)
        self.decoder = ExplanationDecoder(self.embedding, layers=1, heads=heads,
                                          max_positions=16)


def _heads_case(seed: int):
    torch.manual_seed(seed)
    d, vocab = 8, 12
    module = _Heads(vocab, d, heads=2)
    finals = [torch.randn(1, 3 + k % 2, d, dtype=torch.float64) for k in range(4)]
    masks = [torch.ones(1, f.shape[1], dtype=torch.bool) for f in finals]
    memory = torch.randn(1, 6, d, dtype=torch.float64)
    memory_mask = torch.ones(1, 6, dtype=torch.bool)
    targets = torch.randint(4, vocab, (1, 4))
    inputs = torch.cat([torch.full((1, 1), BOS_ID), targets[:, :-1]], dim=1)
    gold = torch.tensor([1])
    expl_mask = torch.ones(1, 4, dtype=torch.float64)
    has = torch.tensor([True])

    def loss_fn():
        scores = option_scores(finals, masks, module.w_s)
        logits = module.decoder(inputs, memory, memory_mask)
        return multitask_loss(scores, gold, logits, targets, expl_mask, has).total

    return module, loss_fn


_CASES = {
    "encoder": _encoder_case,
    "inference": _inference_case,
    "heads": _heads_case,
}


def directional_check(module: nn.Module, loss_fn: Callable[[], torch.Tensor],
                      tolerance: float = DEFAULT_TOLERANCE, step: float = DEFAULT_STEP,
                      seed: int = 0, retries: int = 1,
                      zero_grad_of: Iterable[str] = ()) -> dict[str, float]:
    """Per-parameter relative error between autograd and a central difference.

    `zero_grad_of` deliberately corrupts the analytic gradient of the named
    parameters (used to prove the check detects broken gradients).
    """
    zero_grad_of = set(zero_grad_of)
    params = [(name, p) for name, p in module.named_parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    gen = torch.Generator().manual_seed(seed * 0x9E3779B1 + 1)
    results: dict[str, float] = {}
    for (name, param), grad in zip(params, grads):
        if grad is None or name in zero_grad_of:
            grad = torch.zeros_like(param)
        best = None
        for _ in range(retries + 1):
            direction = torch.randn(param.shape, generator=gen, dtype=param.dtype)
            direction /= direction.norm().clamp_min(1e-12)
            analytic = float((grad * direction).sum())
            with torch.no_grad():
                param.add_(step * direction)
                loss_plus = float(loss_fn())
                param.sub_(2.0 * step * direction)
                loss_minus = float(loss_fn())
                param.add_(step * direction)
            fd = (loss_plus - loss_minus) / (2.0 * step)
            denom = max(abs(fd), abs(analytic))
            rel = 0.0 if denom < 1e-10 else abs(fd - analytic) / denom
            best = rel if best is None else min(best, rel)
            if best <= tolerance:
                break
        results[name] = best
    return results


def gradcheck_module(name: str, seed: int, tolerance: float = DEFAULT_TOLERANCE,
                     step: float = DEFAULT_STEP,
                     zero_grad_of: Iterable[str] = ()) -> GradCheckReport:
    if name not in _CASES:
        raise ValueError(f"unknown module {name!r}; pick from {MODULE_NAMES}")
    module, loss_fn = _CASES[name](seed)
    per_param = directional_check(module, loss_fn, tolerance, step, seed,
                                  zero_grad_of=zero_grad_of)
    worst = max(per_param, key=per_param.get)
    failures = sorted(n for n, r in per_param.items() if r > tolerance)
    return GradCheckReport(module=name, seed=seed, max_rel_err=per_param[worst],
                           worst_param=worst, passed=not failures,
                           failures=failures, per_param=per_param)


def gradcheck(selector: str = "all", seeds: Sequence[int] | None = None,
              tolerance: float = DEFAULT_TOLERANCE,
              step: float = DEFAULT_STEP) -> list[GradCheckReport]:
    """Run the finite-difference check for one module or all of them."""
    names = MODULE_NAMES if selector == "all" else (selector,)
    seeds = range(20) if seeds is None else seeds
    return [gradcheck_module(name, seed, tolerance, step)
            for name in names for seed in seeds]


def format_gradcheck(reports: list[GradCheckReport]) -> str:
    lines = []
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        line = (f"{status}  {r.module:<10} seed={r.seed:<3} "
                f"max_rel_err={r.max_rel_err:.3e}  worst={r.worst_param}")
        if r.failures:
            line += f"  failures: {', '.join(r.failures)}"
        lines.append(line)
    return "\n".join(lines)
