"""Classification and generation metrics.

All metrics are implemented directly (no external metric packages) so they
can be cross-checked against hand-computed values: accuracy, macro F1 over
the four answer labels, corpus BLEU-4 with brevity penalty and add-epsilon
smoothing, and ROUGE-L as the balanced LCS F-measure.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from typing import Sequence

logger = logging.getLogger(__name__)

NUM_CLASSES = 4
BLEU_EPS = 1e-9


def classification_metrics(gold: Sequence[int], pred: Sequence[int]) -> tuple[float, float]:
    """(accuracy, macro F1) over the four answer labels.

    A class with zero precision+recall contributes F1 = 0.
    """
    if len(gold) != len(pred):
        raise ValueError("gold and prediction lengths differ")
    if any(not 0 <= g < NUM_CLASSES for g in gold) or any(not 0 <= p < NUM_CLASSES for p in pred):
        raise ValueError("labels must lie in [0, 3]")
    if not gold:
        return 0.0, 0.0
    correct = sum(1 for g, p in zip(gold, pred) if g == p)
    accuracy = correct / len(gold)

    f1_sum = 0.0
    for c in range(NUM_CLASSES):
        tp = sum(1 for g, p in zip(gold, pred) if g == c and p == c)
        fp = sum(1 for g, p in zip(gold, pred) if g != c and p == c)
        fn = sum(1 for g, p in zip(gold, pred) if g == c and p != c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1_sum += 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, f1_sum / NUM_CLASSES


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypotheses: list[Sequence[str]], references: list[Sequence[str]],
          max_n: int = 4, eps: float = BLEU_EPS) -> float:
    """Corpus BLEU up to 4-grams with brevity penalty.

    Zero clipped counts are smoothed to `eps` so short or disjoint corpora
    stay finite (and score ~0 rather than exactly 0).
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    clipped = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h_counts = _ngrams(hyp, n)
            r_counts = _ngrams(ref, n)
            totals[n - 1] += sum(h_counts.values())
            clipped[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
    if hyp_len == 0:
        return 0.0
    log_precision = 0.0
    for c, t in zip(clipped, totals):
        p = max(c, eps) / t if t > 0 else eps
        log_precision += math.log(p)
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_precision / max_n)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hypotheses: list[Sequence[str]], references: list[Sequence[str]]) -> float:
    """Mean balanced LCS F-measure over hypothesis/reference pairs."""
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    if not hypotheses:
        return 0.0
    total = 0.0
    for hyp, ref in zip(hypotheses, references):
        lcs = _lcs_length(hyp, ref)
        if lcs == 0 or not hyp or not ref:
            continue
        precision = lcs / len(hyp)
        recall = lcs / len(ref)
        total += 2 * precision * recall / (precision + recall)
    return total / len(hypotheses)


def generation_metrics(hypotheses: list[Sequence[str]],
                       references: list[Sequence[str]]) -> tuple[float, float]:
    """(BLEU-4, ROUGE-L) over paired token sequences.

    Pairs with an empty reference are excluded with a warning.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    kept_h, kept_r, skipped = [], [], 0
    for hyp, ref in zip(hypotheses, references):
        if not ref:
            skipped += 1
            continue
        kept_h.append(hyp)
        kept_r.append(ref)
    if skipped:
        logger.warning("generation_metrics: excluded %d pair(s) with empty references",
                       skipped)
    if not kept_h:
        return 0.0, 0.0
    return bleu4(kept_h, kept_r), rouge_l(kept_h, kept_r)
