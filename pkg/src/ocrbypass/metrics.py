"""Edit-distance text metrics: Levenshtein alignment counts, CER, and word accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "EditCounts",
    "CerValue",
    "edit_counts",
    "cer",
    "cer_batch",
    "levenshtein_totals",
    "word_accuracy",
]


@dataclass(frozen=True)
class EditCounts:
    """Substitution/insertion/deletion counts of one minimal-cost alignment."""

    substitutions: int
    insertions: int
    deletions: int

    @property
    def total(self) -> int:
        return self.substitutions + self.insertions + self.deletions


@dataclass(frozen=True)
class CerValue:
    """Character error rate together with the reference length it was normalized by."""

    value: float
    reference_length: int


def edit_counts(prediction: str, reference: str) -> EditCounts:
    """Count substitutions, insertions and deletions of a minimal edit alignment.

    Insertions are prediction characters with no reference counterpart; deletions
    are reference characters missing from the prediction. When several minimal
    alignments exist, the backtrace prefers substitution, then deletion, then
    insertion, so the returned counts are deterministic.
    """
    la, lb = len(prediction), len(reference)
    width = lb + 1
    # dist[i*width + j] = distance between prediction[:i] and reference[:j]
    dist = list(range(width))
    for i in range(1, la + 1):
        prev = dist[(i - 1) * width :]
        row = [i]
        ca = prediction[i - 1]
        for j in range(1, width):
            cost_sub = prev[j - 1] + (ca != reference[j - 1])
            cost_del = row[j - 1] + 1
            cost_ins = prev[j] + 1
            best = cost_sub
            if cost_del < best:
                best = cost_del
            if cost_ins < best:
                best = cost_ins
            row.append(best)
        dist.extend(row)

    subs = ins = dels = 0
    i, j = la, lb
    while i > 0 or j > 0:
        here = dist[i * width + j]
        # Tie order: substitution/match, then deletion, then insertion.
        if i > 0 and j > 0 and dist[(i - 1) * width + j - 1] + (prediction[i - 1] != reference[j - 1]) == here:
            subs += prediction[i - 1] != reference[j - 1]
            i -= 1
            j -= 1
        elif j > 0 and dist[i * width + j - 1] + 1 == here:
            dels += 1
            j -= 1
        else:
            ins += 1
            i -= 1
    return EditCounts(substitutions=subs, insertions=ins, deletions=dels)


def cer(prediction: str, reference: str) -> CerValue:
    """Character error rate (s + i + d) / n, with n = reference length.

    An empty reference divides by max(1, n), so cer(p, "") = len(p).
    """
    counts = edit_counts(prediction, reference)
    n = len(reference)
    return CerValue(value=counts.total / max(1, n), reference_length=n)


def _encode(strings: Sequence[str], length: int, pad: int) -> np.ndarray:
    out = np.full((len(strings), max(length, 1)), pad, dtype=np.int32)
    for row, s in enumerate(strings):
        for col, ch in enumerate(s):
            out[row, col] = ord(ch)
    return out


def _totals_uniform(preds: Sequence[str], refs: Sequence[str]) -> np.ndarray:
    """Vectorized edit distance for pairs of uniform lengths (len(p), len(r))."""
    la = len(preds[0])
    lb = len(refs[0])
    n = len(preds)
    if la == 0:
        return np.full(n, lb, dtype=np.int64)
    if lb == 0:
        return np.full(n, la, dtype=np.int64)
    a = _encode(preds, la, -1)
    b = _encode(refs, lb, -2)
    cols = np.arange(lb + 1, dtype=np.int64)
    prev = np.broadcast_to(cols, (n, lb + 1)).copy()
    for i in range(1, la + 1):
        sub = prev[:, :-1] + (a[:, i - 1 : i] != b)
        ins = prev[:, 1:] + 1
        t = np.empty_like(prev)
        t[:, 0] = i
        np.minimum(sub, ins, out=t[:, 1:])
        # Fold in the left-neighbor dependency: cur[j] = min_k<=j (t[k] + j - k).
        cur = np.minimum.accumulate(t - cols, axis=1) + cols
        prev = cur
    return prev[:, -1]


def levenshtein_totals(predictions: Sequence[str], references: Sequence[str]) -> np.ndarray:
    """Edit distances for aligned lists of string pairs, vectorized by length group."""
    if len(predictions) != len(references):
        raise ValueError("predictions and references must have equal length")
    out = np.zeros(len(predictions), dtype=np.int64)
    groups: dict[tuple[int, int], list[int]] = {}
    for idx, (p, r) in enumerate(zip(predictions, references)):
        groups.setdefault((len(p), len(r)), []).append(idx)
    for _, idxs in groups.items():
        totals = _totals_uniform([predictions[i] for i in idxs], [references[i] for i in idxs])
        out[idxs] = totals
    return out


def cer_batch(predictions: Sequence[str], references: Sequence[str]) -> np.ndarray:
    """CER for aligned lists of pairs, using the max(1, n) empty-reference rule."""
    totals = levenshtein_totals(predictions, references)
    norms = np.array([max(1, len(r)) for r in references], dtype=np.float64)
    return totals / norms


def word_accuracy(predictions: Sequence[str], references: Sequence[str]) -> float:
    """Fraction of exact (case- and whitespace-sensitive) string matches."""
    if len(predictions) != len(references):
        raise ValueError("predictions and references must have equal length")
    if len(predictions) == 0:
        raise ValueError("word_accuracy requires at least one pair")
    hits = sum(p == r for p, r in zip(predictions, references))
    return hits / len(predictions)
