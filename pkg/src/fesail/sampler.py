"""Replay reservoir construction.

The candidate filter keeps every pool sample that carries at least one stale
feature. The greedy selector then fills a fixed-capacity reservoir so the
total weight of covered stale features is maximized; the neighbor variant
reaches the same selection while only refreshing the marginal weights of
candidates that share a freshly covered feature.

Both greedy variants compute a candidate's marginal weight with the same
strict left-to-right summation over its (padded) stale-feature slots, so the
floating-point values - and therefore the selections and tie-breaks - are
identical by construction.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from typing import Iterable, Sequence

import numpy as np

from .errors import SizeError

logger = logging.getLogger(__name__)


@dataclass
class SamplePool:
    """Flat view over samples from one or more spans.

    ``uids`` carries (origin span, row-within-origin) pairs so the same
    physical sample can be tracked across runs and configurations.
    """

    feats: np.ndarray  # (P, m) int64
    labels: np.ndarray  # (P,) int8
    uids: np.ndarray  # (P, 2) int64

    def __len__(self) -> int:
        return len(self.labels)

    @staticmethod
    def from_span(span_index: int, feats: np.ndarray, labels: np.ndarray) -> "SamplePool":
        n = len(labels)
        uids = np.empty((n, 2), dtype=np.int64)
        uids[:, 0] = span_index
        uids[:, 1] = np.arange(n)
        return SamplePool(feats=feats, labels=np.asarray(labels, dtype=np.int8), uids=uids)

    @staticmethod
    def concat(parts: Sequence["SamplePool"]) -> "SamplePool":
        parts = [p for p in parts if len(p)]
        if not parts:
            return SamplePool(
                feats=np.zeros((0, 0), dtype=np.int64),
                labels=np.zeros(0, dtype=np.int8),
                uids=np.zeros((0, 2), dtype=np.int64),
            )
        return SamplePool(
            feats=np.concatenate([p.feats for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            uids=np.concatenate([p.uids for p in parts]),
        )

    def take(self, rows: np.ndarray) -> "SamplePool":
        return SamplePool(self.feats[rows], self.labels[rows], self.uids[rows])


@dataclass
class CandidateSet:
    """Pool samples that contain at least one stale feature.

    ``stale`` mirrors ``feats`` but keeps only stale slots; fresh slots hold
    the sentinel id ``num_features`` and carry zero weight everywhere.
    """

    feats: np.ndarray  # (C, m)
    labels: np.ndarray  # (C,)
    uids: np.ndarray  # (C, 2)
    stale: np.ndarray  # (C, m), sentinel-padded
    pool_index: np.ndarray  # (C,) rows of the original pool
    num_features: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sentinel(self) -> int:
        return self.num_features

    def stale_set(self, i: int) -> set[int]:
        row = self.stale[i]
        return {int(v) for v in row[row != self.sentinel]}


@dataclass
class Reservoir:
    """Fixed-capacity replay set, stored in ascending source order.

    ``selected`` holds the (sorted) indices into the structure the reservoir
    was drawn from - candidate indices for the greedy selectors, pool rows for
    random sampling. ``selection_log`` records (iteration, candidate index,
    marginal weight) in pick order; ``updates`` counts how many marginal
    weights the selector computed.
    """

    feats: np.ndarray
    labels: np.ndarray
    uids: np.ndarray
    capacity: int | None
    selected: np.ndarray
    selection_log: list[tuple[int, int, float]] = field(default_factory=list)
    updates: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def uid_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.uids}


def rss_filter(pool: SamplePool, current_features: np.ndarray) -> CandidateSet:
    """Keep pool samples with >= 1 feature absent from the current span.

    ``current_features`` is a boolean presence mask over feature ids; ids at
    or beyond its length cannot occur in a historical pool.
    """
    present = np.asarray(current_features, dtype=bool)
    nf = len(present)
    if len(pool) == 0:
        return CandidateSet(
            feats=pool.feats,
            labels=pool.labels,
            uids=pool.uids,
            stale=pool.feats.copy(),
            pool_index=np.zeros(0, dtype=np.int64),
            num_features=nf,
        )
    stale_slot = ~present[pool.feats]
    keep = np.flatnonzero(stale_slot.any(axis=1))
    feats = pool.feats[keep]
    stale = np.where(stale_slot[keep], feats, nf)
    return CandidateSet(
        feats=feats,
        labels=pool.labels[keep],
        uids=pool.uids[keep],
        stale=stale,
        pool_index=keep,
        num_features=nf,
    )


def _extended_weights(cands: CandidateSet, weights: np.ndarray) -> np.ndarray:
    w_ext = np.zeros(cands.num_features + 1, dtype=np.float64)
    w_ext[: len(weights)] = weights
    w_ext[cands.sentinel] = 0.0
    return w_ext


def _marginal_rows(
    stale_rows: np.ndarray, w_pad_rows: np.ndarray, covered_ext: np.ndarray
) -> np.ndarray:
    """Residual weight per row: sum of uncovered stale-feature weights.

    Accumulates column by column so the result is bit-identical no matter
    which subset of rows is being recomputed.
    """
    vals = w_pad_rows * ~covered_ext[stale_rows]
    acc = np.zeros(len(stale_rows), dtype=np.float64)
    for c in range(vals.shape[1]):
        acc += vals[:, c]
    return acc


def _resolve_budget(n_candidates: int, capacity: int | None) -> int:
    if capacity is None:
        return n_candidates
    if capacity < 0:
        raise ValueError(f"capacity must be >= 0, got {capacity}")
    return min(capacity, n_candidates)


def _make_reservoir(
    cands: CandidateSet,
    order: list[int],
    capacity: int | None,
    log: list[tuple[int, int, float]],
    updates: int,
) -> Reservoir:
    sel = np.asarray(sorted(order), dtype=np.int64)
    return Reservoir(
        feats=cands.feats[sel],
        labels=cands.labels[sel],
        uids=cands.uids[sel],
        capacity=capacity,
        selected=sel,
        selection_log=log,
        updates=updates,
    )


def sas_greedy_naive(
    cands: CandidateSet, weights: np.ndarray, capacity: int | None
) -> Reservoir:
    """Reference greedy: recompute every candidate's marginal weight each round.

    Ties break toward the smallest candidate index. Candidates with zero
    marginal weight still fill remaining capacity.
    """
    n = len(cands)
    budget = _resolve_budget(n, capacity)
    w_ext = _extended_weights(cands, weights)
    w_pad = w_ext[cands.stale]
    covered = np.zeros(cands.num_features + 1, dtype=bool)
    selected = np.zeros(n, dtype=bool)
    order: list[int] = []
    log: list[tuple[int, int, float]] = []
    updates = 0
    for it in range(budget):
        w_marg = _marginal_rows(cands.stale, w_pad, covered)
        updates += n
        w_marg[selected] = -np.inf
        j = int(np.argmax(w_marg))
        selected[j] = True
        order.append(j)
        log.append((it, j, float(w_marg[j])))
        row = cands.stale[j]
        fs = row[row != cands.sentinel]
        covered[fs] = True
    return _make_reservoir(cands, order, capacity, log, updates)


def sas_greedy_neighbor(
    cands: CandidateSet, weights: np.ndarray, capacity: int | None
) -> Reservoir:
    """Greedy selection that refreshes only neighbors of each pick.

    Neighbors are candidates sharing at least one newly covered stale feature;
    an inverted feature -> candidates index finds them, and a lazily
    invalidated max-heap yields the next pick. Output is identical to
    ``sas_greedy_naive`` on every input, including tie-breaks.
    """
    n = len(cands)
    budget = _resolve_budget(n, capacity)
    w_ext = _extended_weights(cands, weights)
    w_pad = w_ext[cands.stale]
    covered = np.zeros(cands.num_features + 1, dtype=bool)
    selected = np.zeros(n, dtype=bool)

    current = _marginal_rows(cands.stale, w_pad, covered)
    updates = n

    # inverted index: stale feature id -> candidate rows containing it
    rows, cols = np.nonzero(cands.stale != cands.sentinel)
    feat_of_slot = cands.stale[rows, cols]
    index: dict[int, np.ndarray] = {}
    if len(feat_of_slot):
        sort = np.argsort(feat_of_slot, kind="stable")
        sorted_feats = feat_of_slot[sort]
        sorted_rows = rows[sort]
        uniq, starts = np.unique(sorted_feats, return_index=True)
        bounds = np.append(starts, len(sorted_feats))
        for fid, a, b in zip(uniq, bounds[:-1], bounds[1:]):
            index[int(fid)] = sorted_rows[a:b]

    heap: list[tuple[float, int]] = [(-current[j], j) for j in range(n)]
    heapq.heapify(heap)

    order: list[int] = []
    log: list[tuple[int, int, float]] = []
    for it in range(budget):
        while True:
            neg_w, j = heapq.heappop(heap)
            if not selected[j] and neg_w == -current[j]:
                break
        selected[j] = True
        order.append(j)
        log.append((it, j, float(current[j])))

        row = cands.stale[j]
        fs = row[row != cands.sentinel]
        newly = fs[~covered[fs]]
        if len(newly) == 0:
            continue
        covered[newly] = True
        touched = [index[int(f)] for f in newly]
        affected = np.unique(np.concatenate(touched))
        affected = affected[~selected[affected]]
        if len(affected) == 0:
            continue
        current[affected] = _marginal_rows(
            cands.stale[affected], w_pad[affected], covered
        )
        updates += len(affected)
        for a in affected:
            heapq.heappush(heap, (-current[a], int(a)))
    return _make_reservoir(cands, order, capacity, log, updates)


def covered_weight(
    cands: CandidateSet, selection: Iterable[int], weights: np.ndarray
) -> float:
    """Total weight of the distinct stale features covered by a selection."""
    sel = list(selection)
    if not sel:
        return 0.0
    ids = np.unique(cands.stale[sel])
    ids = ids[ids != cands.sentinel]
    w_ext = _extended_weights(cands, weights)
    return float(np.sum(w_ext[ids]))


def brute_force_optimal(
    cands: CandidateSet, weights: np.ndarray, capacity: int
) -> tuple[float, tuple[int, ...]]:
    """Exhaustive optimum over all selections of size <= capacity (test oracle)."""
    n = len(cands)
    if n > 20:
        raise SizeError(f"brute force limited to 20 candidates, got {n}")
    k_max = min(capacity, n)
    total = sum(comb(n, r) for r in range(k_max + 1))
    if total > 1 << 21:
        raise SizeError(f"{total} subsets is too many to enumerate")
    best_w = 0.0
    best_sel: tuple[int, ...] = ()
    for r in range(k_max + 1):
        for sel in combinations(range(n), r):
            w = covered_weight(cands, sel, weights)
            if w > best_w:
                best_w = w
                best_sel = sel
    return best_w, best_sel


def random_sample(
    pool: SamplePool, capacity: int, rng: np.random.Generator | int
) -> Reservoir:
    """Uniform sample without replacement, deterministic per seed."""
    if capacity < 0:
        raise ValueError(f"capacity must be >= 0, got {capacity}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    k = min(capacity, len(pool))
    if k == 0:
        sel = np.zeros(0, dtype=np.int64)
    else:
        sel = np.sort(rng.choice(len(pool), size=k, replace=False))
    picked = pool.take(sel)
    return Reservoir(
        feats=picked.feats,
        labels=picked.labels,
        uids=picked.uids,
        capacity=capacity,
        selected=sel,
    )
