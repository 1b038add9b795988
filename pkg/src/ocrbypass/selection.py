"""Query-budget arithmetic and per-minibatch sample selection.

The budget n% is defined against an original system that queries the OCR
twice per sample per epoch (double jitter), so a minibatch of size B earns
raw = 2*(n/100)*B queries. Selection picks which samples spend them, driven
by each sample's stored CER from the previous epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .engines import OcrBackend, ResponseCache, image_hash
from .metrics import cer, cer_batch
from .synthdoc import TextStrip

__all__ = [
    "STRATEGY_KINDS",
    "BudgetPolicy",
    "BatchQueryPlan",
    "SelectionStrategy",
    "CerHistory",
    "compute_k",
    "select_uniform_cer",
    "select_topk_cer",
    "select_random",
    "initialize_history",
    "record_epoch_cers",
]

STRATEGY_KINDS = ("random", "uniform_cer", "topk_cer")


@dataclass(frozen=True)
class BudgetPolicy:
    """Query budget as a percentage of the original 2-queries-per-sample system."""

    budget_percent: float
    min_per_batch: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.budget_percent <= 100.0:
            raise ValueError("budget_percent must be in [0, 100]")
        if self.min_per_batch < 1:
            raise ValueError("min_per_batch must be >= 1")


class BatchQueryPlan(NamedTuple):
    """Exact query plan for one minibatch.

    k_select samples are chosen by the strategy; each is queried
    jitter_repeats times, and extra_queries of them (chosen by the strategy
    again) get one further query. total_queries is the ledger-exact sum.
    """

    k_select: int
    jitter_repeats: int
    extra_queries: int
    total_queries: int


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def compute_k(policy: BudgetPolicy, batch_size: int) -> BatchQueryPlan:
    """Turn the budget percentage into an exact per-batch query plan.

    raw = 2*(n/100)*batch_size. For n <= 50 (raw <= batch_size) we select
    max(min_per_batch, round(raw)) samples, one jitter each. For n > 50 every
    sample is selected; round(raw) queries are spread as floor(raw/B) repeats
    for all plus one extra for round(raw) mod B strategy-chosen samples.
    A 0% budget issues no queries at all (min_per_batch does not apply).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = policy.budget_percent
    if n == 0.0:
        return BatchQueryPlan(k_select=0, jitter_repeats=0, extra_queries=0, total_queries=0)
    raw = 2.0 * (n / 100.0) * batch_size
    if raw <= batch_size:
        k = max(policy.min_per_batch, _round_half_away(raw))
        k = min(k, batch_size)
        return BatchQueryPlan(k_select=k, jitter_repeats=1, extra_queries=0, total_queries=k)
    total = max(policy.min_per_batch, _round_half_away(raw))
    repeats, extra = divmod(total, batch_size)
    return BatchQueryPlan(k_select=batch_size, jitter_repeats=repeats, extra_queries=extra,
                          total_queries=total)


class CerHistory:
    """Latest stored CER per training sample, stamped with the epoch that wrote it.

    Selection in epoch e must only read values stamped before e; the stamp
    makes that contract checkable.
    """

    def __init__(self) -> None:
        self._entries: dict[str, tuple[float, int]] = {}

    def set(self, sample_id: str, cer_value: float, epoch: int) -> None:
        if cer_value < 0:
            raise ValueError("stored CER must be >= 0")
        self._entries[sample_id] = (float(cer_value), int(epoch))

    def cer_of(self, sample_id: str) -> float:
        return self._require(sample_id)[0]

    def epoch_of(self, sample_id: str) -> int:
        return self._require(sample_id)[1]

    def _require(self, sample_id: str) -> tuple[float, int]:
        try:
            return self._entries[sample_id]
        except KeyError:
            raise ValueError(f"no stored CER for sample {sample_id!r}") from None

    def cers(self, batch_ids: Sequence[str], *, before_epoch: int | None = None) -> np.ndarray:
        """Stored CERs for a batch; optionally assert all stamps precede an epoch."""
        values = np.empty(len(batch_ids), dtype=np.float64)
        for i, sid in enumerate(batch_ids):
            v, stamped = self._require(sid)
            if before_epoch is not None and stamped >= before_epoch:
                raise ValueError(f"sample {sid!r} CER was stamped in epoch {stamped}, "
                                 f"but selection in epoch {before_epoch} needs an older value")
            values[i] = v
        return values

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            fh.write("sample_id,epoch,cer\n")
            for sid in sorted(self._entries):
                v, e = self._entries[sid]
                fh.write(f"{sid},{e},{v}\n")


def _check_k(k: int, batch_len: int) -> None:
    if not 1 <= k <= batch_len:
        raise ValueError(f"k must be in [1, {batch_len}], got {k}")


def select_uniform_cer(batch_ids: Sequence[str], history: CerHistory, k: int,
                       rng: np.random.Generator) -> list[int]:
    """Draw k values uniformly in [cer_min, cer_max] of the batch and take, for
    each, the nearest not-yet-selected sample by stored CER.

    Ties (and the degenerate all-equal-CER batch) resolve to the lowest index,
    so the degenerate case reduces to the first k indices.
    """
    _check_k(k, len(batch_ids))
    cers = history.cers(batch_ids)
    cer_min, cer_max = float(cers.min()), float(cers.max())
    draws = rng.uniform(cer_min, cer_max, size=k)
    chosen: list[int] = []
    distances = np.empty_like(cers)
    for c in draws:
        np.abs(cers - c, out=distances)
        distances[chosen] = np.inf  # argmin over j not yet selected
        chosen.append(int(np.argmin(distances)))
    return chosen


def select_topk_cer(batch_ids: Sequence[str], history: CerHistory, k: int) -> list[int]:
    """The k indices of highest stored CER; ties broken by lowest index."""
    _check_k(k, len(batch_ids))
    cers = history.cers(batch_ids)
    order = np.argsort(-cers, kind="stable")
    return [int(i) for i in order[:k]]


def select_random(batch_ids: Sequence[str], k: int, rng: np.random.Generator) -> list[int]:
    """k distinct indices uniformly without replacement."""
    _check_k(k, len(batch_ids))
    return [int(i) for i in rng.choice(len(batch_ids), size=k, replace=False)]


@dataclass(frozen=True)
class SelectionStrategy:
    """Named selection rule; the kind is fixed for the whole run."""

    kind: str

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown selection strategy {self.kind!r}, expected one of {STRATEGY_KINDS}")

    def select(self, batch_ids: Sequence[str], history: CerHistory, k: int,
               rng: np.random.Generator) -> list[int]:
        if self.kind == "random":
            return select_random(batch_ids, k, rng)
        if self.kind == "uniform_cer":
            return select_uniform_cer(batch_ids, history, k, rng)
        return select_topk_cer(batch_ids, history, k)


def initialize_history(strips: Sequence[TextStrip], backend: OcrBackend,
                       cache: ResponseCache) -> CerHistory:
    """Seed the history with pre-pass OCR CERs (all reads come from the cache).

    Entries are stamped with epoch -1 so the first training epoch's staleness
    check passes. A strip whose pre-pass output is missing from the cache is
    an invalid state: the pre-pass must run first.
    """
    history = CerHistory()
    backend_id = backend.descriptor.backend_id
    for strip in strips:
        text = cache.get(backend_id, image_hash(strip.image))
        if text is None:
            raise ValueError(f"missing pre-pass OCR output for sample {strip.sample_id!r}")
        history.set(strip.sample_id, cer(text, strip.text).value, epoch=-1)
    return history


def record_epoch_cers(history: CerHistory, batch_ids: Sequence[str], decoded: Sequence[str],
                      ground_truths: Sequence[str], epoch: int) -> None:
    """Overwrite batch samples' CERs with decode-vs-ground-truth values for this epoch."""
    if not len(batch_ids) == len(decoded) == len(ground_truths):
        raise ValueError("batch_ids, decoded and ground_truths must be aligned")
    values = cer_batch(decoded, ground_truths)
    for sid, v in zip(batch_ids, values):
        history.set(sid, float(v), epoch)
