"""BLEU (corpus and smoothed sentence level) and likelihood evaluation.

Scores are fractions in ``[0, 1]``; multiply by 100 for "BLEU points".
Inputs are token-id sequences; anything from the first EOS on, and PAD,
is ignored.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import strip_eos
from .model import ModelParams, log_prob_batch

MAX_ORDER = 4


class EmptyCorpusError(ValueError):
    pass


@dataclass
class BleuStats:
    """Clipped n-gram matches and totals for n = 1..4 plus lengths."""

    matches: list[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    totals: list[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    hyp_len: int = 0
    ref_len: int = 0

    def __iadd__(self, other: "BleuStats") -> "BleuStats":
        self.matches = [a + b for a, b in zip(self.matches, other.matches)]
        self.totals = [a + b for a, b in zip(self.totals, other.totals)]
        self.hyp_len += other.hyp_len
        self.ref_len += other.ref_len
        return self


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyp: Sequence[int], ref: Sequence[int]) -> BleuStats:
    hyp, ref = strip_eos(hyp), strip_eos(ref)
    stats = BleuStats(hyp_len=len(hyp), ref_len=len(ref))
    for n in range(1, MAX_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        stats.matches[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        stats.totals[n - 1] = max(len(hyp) - n + 1, 0)
    return stats


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - ref_len / hyp_len))


def _bleu_from_stats(stats: BleuStats, smooth: bool) -> float:
    if stats.hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(MAX_ORDER):
        m, t = stats.matches[n], stats.totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_sum += math.log(m / t)
    return brevity_penalty(stats.hyp_len, stats.ref_len) * math.exp(log_sum / MAX_ORDER)


def sentence_bleu_smoothed(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """BLEU-4 with add-one smoothing of matches and totals for n >= 2."""
    if not strip_eos(ref):
        raise ValueError("reference is empty")
    return _bleu_from_stats(bleu_stats(hyp, ref), smooth=True)


def corpus_bleu(pairs: Iterable[tuple[Sequence[int], Sequence[int]]]) -> float:
    """Unsmoothed corpus BLEU-4 over ``(hypothesis, reference)`` pairs."""
    total, n = BleuStats(), 0
    for hyp, ref in pairs:
        total += bleu_stats(hyp, ref)
        n += 1
    if n == 0:
        raise EmptyCorpusError("corpus_bleu of an empty corpus")
    return _bleu_from_stats(total, smooth=False)


def avg_log_likelihood(
    params: ModelParams,
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    batch_size: int = 256,
) -> float:
    """Mean per-token ``log p(Y|X)`` over ``(source, target)`` pairs (EOS counted)."""
    if len(pairs) == 0:
        raise EmptyCorpusError("avg_log_likelihood of an empty corpus")
    total, tokens = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        lp = log_prob_batch([list(y) for _, y in chunk], [list(x) for x, _ in chunk], params)
        total += float(np.sum(lp.data))
        tokens += sum(len(y) for _, y in chunk)
    return total / tokens
