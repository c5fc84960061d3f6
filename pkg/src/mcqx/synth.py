"""Synthetic dataset generator for end-to-end checks.

Each item carries a short context; the gold option is the unique option whose
tokens all occur in that context, distractor tokens are drawn from outside
it, and the explanation follows the template
"answer <letter> because <overlapping tokens>" with the overlap listed in
context order. Answer positions are drawn uniformly.
"""

from __future__ import annotations

import numpy as np

from .data import GRADES, NUM_OPTIONS, SUBJECTS, McqItem

DEFAULT_VOCAB_SIZE = 80
CONTEXT_LEN = 12
OPTION_LEN = 4
_LETTERS = "ABCD"
_QUESTION = "which option matches the passage"


def synth_generate(n: int, seed: int, vocab_size: int = DEFAULT_VOCAB_SIZE) -> list[McqItem]:
    """Generate n items, deterministic given the seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if vocab_size < CONTEXT_LEN + 3 * OPTION_LEN:
        raise ValueError("vocab_size too small for disjoint distractors")
    rng = np.random.default_rng(seed)
    pool = np.array([f"w{i:03d}" for i in range(vocab_size)])
    items = []
    for i in range(n):
        ctx_idx = rng.choice(vocab_size, size=CONTEXT_LEN, replace=False)
        context_tokens = pool[ctx_idx]
        gold_pos_in_ctx = np.sort(rng.choice(CONTEXT_LEN, size=OPTION_LEN, replace=False))
        gold_tokens = context_tokens[gold_pos_in_ctx]

        outside = np.setdiff1d(np.arange(vocab_size), ctx_idx)
        distractor_idx = rng.choice(outside, size=3 * OPTION_LEN, replace=False)
        distractors = [pool[distractor_idx[j * OPTION_LEN:(j + 1) * OPTION_LEN]]
                       for j in range(3)]

        answer = int(rng.integers(NUM_OPTIONS))
        options = []
        d = iter(distractors)
        for pos in range(NUM_OPTIONS):
            tokens = gold_tokens if pos == answer else next(d)
            options.append(" ".join(tokens))

        explanation = f"answer {_LETTERS[answer]} because " + " ".join(gold_tokens)
        items.append(McqItem(
            id=f"syn{i:05d}",
            subject=str(rng.choice(SUBJECTS)),
            grade=int(rng.choice(GRADES)),
            question=_QUESTION,
            options=options,
            answer=answer,
            explanation=explanation,
            context=" ".join(context_tokens),
        ))
    return items


def overlap_count(option: str, context: str) -> int:
    """Distinct option tokens that also occur in the context."""
    ctx = set(context.split())
    return len({t for t in option.split() if t in ctx})
