"""Speedup, accept length and ROUGE-L.

Conventions used in every report:

* alpha is a micro-average: total emitted tokens over total decode time for a
  method, divided by the same ratio for autoregressive decoding.
* tau is a macro-average over verification steps of the number of drafted
  tokens accepted. The bonus token is not counted and zero-accept steps are.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


def speedup_alpha(tokens_generated: float, time_method: float, time_ar: float, tokens_ar: float | None = None) -> float:
    """Throughput of a method over autoregressive throughput."""
    if time_method <= 0 or time_ar <= 0:
        raise ValueError("times must be positive")
    if tokens_ar is None:
        tokens_ar = tokens_generated
    return (tokens_generated / time_method) / (tokens_ar / time_ar)


def _accepted(records) -> list[int]:
    return [r if isinstance(r, (int, np.integer)) else r.accepted for r in records]


def accept_length_tau(records: Iterable) -> float:
    """Mean accepted count per step. Takes step records or plain counts."""
    acc = _accepted(list(records))
    if not acc:
        raise ValueError("no verification steps")
    return sum(acc) / len(acc)


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length, O(len(a) * len(b)) time, O(len(b)) memory."""
    if not a or not b:
        return 0
    b_arr = np.asarray(b)
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    for tok in a:
        eq = b_arr == tok
        # row update: cur[j] = prev[j-1] + 1 if equal else max(prev[j], cur[j-1])
        diag = np.where(eq, prev[:-1] + 1, 0)
        cand = np.maximum(diag, prev[1:])
        cur = np.empty_like(prev)
        cur[0] = 0
        cur[1:] = np.maximum.accumulate(cand)
        prev = cur
    return int(prev[-1])


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    """LCS F1 between two token sequences, scaled to [0, 100]."""
    if len(candidate) == 0 or len(reference) == 0:
        raise ValueError("rouge_l needs two nonempty sequences")
    lcs = lcs_length(list(candidate), list(reference))
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 100.0 * 2 * p * r / (p + r)
