"""Forecast verification: contingency scores, rank histogram, CDF curves.

An event is a cell at or above the threshold. Scores with a zero
denominator are reported as None rather than silently zero, so a run with
no events cannot masquerade as a perfect or worthless forecast.

The rank histogram counts, for every evaluated (cell, time) pair, how many
members fall strictly below the observation; ties are resolved by seeded
uniform placement among the tied members, which keeps the histogram flat
for a perfectly calibrated but degenerate ensemble instead of piling ties
into the low bins.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

THRESHOLDS = (0.1, 2.0, 5.0, 10.0, 15.0, 20.0)


@dataclass(frozen=True)
class ContingencyTable:
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int
    threshold: float

    def __post_init__(self):
        for name in ("hits", "misses", "false_alarms", "correct_negatives"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def __add__(self, other: "ContingencyTable") -> "ContingencyTable":
        if other.threshold != self.threshold:
            raise ValidationError("cannot merge tables at different thresholds")
        return ContingencyTable(
            hits=self.hits + other.hits,
            misses=self.misses + other.misses,
            false_alarms=self.false_alarms + other.false_alarms,
            correct_negatives=self.correct_negatives + other.correct_negatives,
            threshold=self.threshold,
        )


@dataclass
class RankHistogram:
    """Occurrences of each observation rank among N members (N + 1 bins)."""

    counts: np.ndarray
    n_members: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.n_members + 1,):
            raise ValidationError("rank histogram needs n_members + 1 bins")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def frequencies(self) -> np.ndarray:
        if self.total == 0:
            raise ValidationError("empty rank histogram has no frequencies")
        return self.counts / self.total


def _values_of(field) -> np.ndarray:
    return np.asarray(getattr(field, "values", field))


def contingency(forecast, obs, threshold: float) -> ContingencyTable:
    """Classify every cell into hit / miss / false alarm / correct negative."""
    if not threshold > 0:
        raise ValidationError("threshold must be positive")
    f = _values_of(forecast)
    o = _values_of(obs)
    if f.shape != o.shape:
        raise ValidationError(f"forecast shape {f.shape} != observation shape {o.shape}")
    fe = f >= threshold
    oe = o >= threshold
    return ContingencyTable(
        hits=int(np.count_nonzero(fe & oe)),
        misses=int(np.count_nonzero(~fe & oe)),
        false_alarms=int(np.count_nonzero(fe & ~oe)),
        correct_negatives=int(np.count_nonzero(~fe & ~oe)),
        threshold=float(threshold),
    )


def csi_pod_far(table: ContingencyTable) -> tuple:
    """(CSI, POD, FAR); any score with a zero denominator is None."""
    h, m, fa = table.hits, table.misses, table.false_alarms
    csi = h / (h + m + fa) if h + m + fa > 0 else None
    pod = h / (h + m) if h + m > 0 else None
    far = fa / (h + fa) if h + fa > 0 else None
    return csi, pod, far


def _as_stack(members) -> np.ndarray:
    if hasattr(members, "stack"):
        return members.stack()
    arr = np.asarray(members)
    if arr.ndim < 2:
        raise ValidationError("member stack must be (N, ...) with N >= 2")
    return arr


def rank_histogram(member_series, obs_series, seed: int = 0) -> RankHistogram:
    """Rank of each observation within the member values at its cell.

    ``member_series`` is a sequence of member stacks (or EnsembleSets), one
    per time, each (N, ...) over a grid; ``obs_series`` gives the matching
    observed field per time. Rank = members strictly below the observation
    plus a seeded uniform draw over the tied members, binned into N + 1.
    """
    members = [_as_stack(m) for m in member_series]
    obs = [_values_of(o) for o in obs_series]
    if len(members) != len(obs):
        raise ValidationError("member and observation series lengths differ")
    if not members:
        raise ValidationError("rank histogram needs at least one time")
    n = members[0].shape[0]
    if n < 2:
        raise ValidationError("rank histogram needs at least two members")
    rng = np.random.default_rng(seed)
    counts = np.zeros(n + 1, dtype=np.int64)
    for stack, o in zip(members, obs):
        if stack.shape[0] != n:
            raise ValidationError("member count changed across the series")
        if stack.shape[1:] != o.shape:
            raise ValidationError("member and observation grids differ")
        below = np.count_nonzero(stack < o, axis=0)
        ties = np.count_nonzero(stack == o, axis=0)
        rank = below + rng.integers(0, ties + 1)
        counts += np.bincount(rank.ravel(), minlength=n + 1)
    return RankHistogram(counts=counts, n_members=n)


def cdf_curve(values, bins) -> np.ndarray:
    """Empirical P(X <= b) for each bin edge b, over all given values."""
    v = _values_of(values).ravel()
    if v.size == 0:
        raise ValidationError("cannot build a CDF from an empty region")
    edges = np.asarray(bins, dtype=np.float64)
    if edges.ndim != 1 or edges.size == 0:
        raise ValidationError("bins must be a non-empty 1-D sequence")
    if np.any(np.diff(edges) <= 0):
        raise ValidationError("bins must be strictly increasing")
    ordered = np.sort(v)
    return np.searchsorted(ordered, edges, side="right") / v.size
