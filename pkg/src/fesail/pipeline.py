"""Incremental-training orchestration: pretrain, per-span sample/train/eval.

The span protocol: the reservoir starts as the pretraining span; at every
later span t the staleness table is updated with the new span's feature set,
a replay reservoir is built from the previous reservoir and previous span
according to the configured policy, the model trains on the shuffled union of
reservoir and new data with early stopping, and is then evaluated on the next
span. Averaged metrics never include the pretraining span.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .features import FeatureDictionary, StalenessTable, WEIGHT_FUNCS
from .model import (
    GuardConfig,
    ModelState,
    TrainConfig,
    ce_loss,
    forward,
    grow_embeddings,
    init_model,
    train_step,
)
from .sampler import (
    CandidateSet,
    Reservoir,
    SamplePool,
    random_sample,
    rss_filter,
    sas_greedy_neighbor,
)
from .stream import SpanDataset, load_span, parse_span_index

logger = logging.getLogger(__name__)

POLICIES = ("IU", "RS", "FSS", "RSS", "RSS+SAR", "RSS+SAS", "FeSAIL")
_SAS_POLICIES = frozenset({"RSS+SAS", "FeSAIL"})
_GUARD_POLICIES = frozenset({"RSS+SAR", "FeSAIL"})
_HISTORY_POLICIES = frozenset({"FSS"})
_SHUFFLE_STREAM, _RS_STREAM = 3, 4


@dataclass
class ModelConfig:
    embedding_size: int = 16
    hidden: tuple[int, ...] = (64,)

    def validate(self) -> None:
        if self.embedding_size < 1:
            raise ConfigError("embedding_size must be >= 1")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden must be a non-empty list of positive sizes")


@dataclass
class PolicyConfig:
    """Everything a single incremental run needs."""

    policy: str = "FeSAIL"
    capacity: int | str = "match"  # "match" span size, "inf", or a fixed int
    func: str = "inverse_proportional"
    bias: float = 1.0
    guard: GuardConfig = field(default_factory=GuardConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    iu_supplement: bool = False
    bucket_cap: int = 10

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(
                f"unknown policy {self.policy!r}; valid policies: {', '.join(POLICIES)}"
            )
        if isinstance(self.capacity, str):
            if self.capacity not in ("match", "inf"):
                raise ConfigError(
                    f"capacity must be 'match', 'inf' or an integer, got {self.capacity!r}"
                )
        elif self.capacity < 0:
            raise ConfigError("capacity must be >= 0")
        if self.func not in WEIGHT_FUNCS:
            raise ConfigError(f"unknown weight func {self.func!r}")
        if self.bias < 0:
            raise ConfigError("bias must be >= 0")
        if self.bucket_cap < 0:
            raise ConfigError("bucket_cap must be >= 0")
        self.guard.validate()
        self.train.validate()
        self.model.validate()


@dataclass
class BucketStat:
    bucket: int
    auc: float
    count: int


@dataclass
class DropReport:
    """Fraction of distinct stale candidate features left uncovered."""

    overall: float
    by_staleness: dict[int, float]


@dataclass
class SpanMetrics:
    span: int
    policy: str
    auc: float
    logloss: float
    reservoir_size: int
    covered_weight: float
    drop_ratio: float
    sample_ms: float
    train_ms: float
    buckets: list[BucketStat] = field(default_factory=list)
    drop_by_staleness: dict[int, float] = field(default_factory=dict)


@dataclass
class RunResult:
    policy: str
    seed: int
    metrics: list[SpanMetrics]
    reservoir_uids: dict[int, set[tuple[int, int]]]
    selection_logs: dict[int, list[tuple[int, int, float]]]
    eval_data: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] | None
    model: ModelState

    @property
    def mean_auc(self) -> float:
        return float(np.mean([m.auc for m in self.metrics]))

    @property
    def mean_logloss(self) -> float:
        return float(np.mean([m.logloss for m in self.metrics]))


def _tied_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    change = np.r_[True, sx[1:] != sx[:-1]]
    run_id = np.cumsum(change) - 1
    counts = np.bincount(run_id)
    ends = np.cumsum(counts)
    starts = ends - counts
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks within a tie run
    ranks = np.empty(len(x), dtype=np.float64)
    ranks[order] = avg[run_id]
    return ranks


def auc(preds: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUC (Mann-Whitney), ties counting one half."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC undefined: labels contain a single class")
    ranks = _tied_ranks(preds)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _bucket_ids(
    feats: np.ndarray, table: StalenessTable, bucket_cap: int
) -> np.ndarray:
    """Max staleness over a sample's features, capped; unknown ids count fresh."""
    size = int(feats.max()) + 1 if feats.size else 0
    s_ext = table.staleness_vector(size)
    b = s_ext[feats].max(axis=1)
    return np.minimum(b, bucket_cap)


def _bucket_stats(
    preds: np.ndarray,
    labels: np.ndarray,
    buckets: np.ndarray,
) -> list[BucketStat]:
    out: list[BucketStat] = []
    for v in np.unique(buckets):
        mask = buckets == v
        sub_labels = labels[mask]
        if len(np.unique(sub_labels)) < 2:
            continue  # single-class bucket: reported absent
        out.append(
            BucketStat(bucket=int(v), auc=auc(preds[mask], sub_labels), count=int(mask.sum()))
        )
    return out


def staleness_bucketed_eval(
    model: ModelState,
    test_span: SpanDataset,
    table: StalenessTable,
    bucket_cap: int = 10,
) -> list[BucketStat]:
    """Per-bucket AUC on a test span, bucketed by max contained staleness."""
    preds = forward(model, test_span.features)
    buckets = _bucket_ids(test_span.features, table, bucket_cap)
    return _bucket_stats(preds, test_span.labels, buckets)


def _stale_ids_of(feats: np.ndarray, table: StalenessTable) -> np.ndarray:
    size = int(feats.max()) + 1 if feats.size else 0
    mask = table.stale_mask(size)
    ids = np.unique(feats[mask[feats]]) if feats.size else np.zeros(0, dtype=np.int64)
    return ids


def drop_ratio_report(
    candidates: CandidateSet, reservoir: Reservoir, table: StalenessTable
) -> DropReport:
    """Per-staleness and overall fraction of candidate stale features not kept."""
    universe = np.unique(candidates.stale)
    universe = universe[universe != candidates.sentinel]
    if len(universe) == 0:
        return DropReport(overall=0.0, by_staleness={})
    covered = set(int(v) for v in _stale_ids_of(reservoir.feats, table))
    s_uni = table.staleness_vector(int(universe.max()) + 1)[universe]
    dropped = np.array([int(f) not in covered for f in universe])
    by: dict[int, float] = {}
    for v in np.unique(s_uni):
        sel = s_uni == v
        by[int(v)] = float(dropped[sel].mean())
    return DropReport(overall=float(dropped.mean()), by_staleness=by)


def _covered_stale_weight(
    feats: np.ndarray, table: StalenessTable, weights: np.ndarray
) -> float:
    ids = _stale_ids_of(feats, table)
    return float(np.sum(weights[ids]))


def _resolve_capacity(capacity: int | str, span_size: int) -> int | None:
    if capacity == "match":
        return span_size
    if capacity == "inf":
        return None
    return int(capacity)


def _empty_reservoir(pool: SamplePool) -> Reservoir:
    none = np.zeros(0, dtype=np.int64)
    picked = pool.take(none)
    return Reservoir(
        feats=picked.feats,
        labels=picked.labels,
        uids=picked.uids,
        capacity=0,
        selected=none,
    )


def _train_span(
    model: ModelState,
    feats: np.ndarray,
    labels: np.ndarray,
    table: StalenessTable,
    s_max: int,
    guard_cfg: GuardConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
) -> int:
    """Mini-batch training with early stopping on a held-out tail slice.

    Returns the number of epochs run. The validation slice is the last 10%
    (by default) of the seeded shuffle and stays fixed across epochs.
    """
    n = len(labels)
    perm = rng.permutation(n)
    feats = feats[perm]
    labels = np.asarray(labels, dtype=np.float64)[perm]
    n_val = max(1, int(round(train_cfg.val_fraction * n)))
    if n_val >= n:
        n_val = n - 1  # keep at least one training sample
    n_train = n - n_val
    val_feats, val_labels = feats[n_train:], labels[n_train:]
    best = np.inf
    bad = 0
    epochs = 0
    for _ in range(train_cfg.max_epochs):
        order = rng.permutation(n_train)
        for start in range(0, n_train, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            train_step(
                model, feats[idx], labels[idx], table, s_max, guard_cfg, train_cfg
            )
        epochs += 1
        if n_val == 0:
            continue
        val_loss = ce_loss(forward(model, val_feats), val_labels)
        if val_loss < best:
            best = val_loss
            bad = 0
        else:
            bad += 1
            if bad >= train_cfg.patience:
                break
    return epochs


def _ordered_span_paths(span_paths: Sequence[str | Path]) -> list[Path]:
    paths = [Path(p) for p in span_paths]
    indexed = sorted((parse_span_index(p), p) for p in paths)
    indices = [i for i, _ in indexed]
    if indices != list(range(len(indexed))):
        raise DataError(
            f"span files must be contiguous from span_000; found indices {indices}"
        )
    if len(indexed) < 3:
        raise DataError("need at least 3 spans: pretrain, >=1 incremental, >=1 test")
    return [p for _, p in indexed]


def _peek_num_fields(path: Path) -> int:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                return len(line.split(",")) - 1
    raise DataError(f"{path}: empty span")


def run_incremental(
    cfg: PolicyConfig,
    span_paths: Sequence[str | Path],
    keep_eval: bool = False,
) -> RunResult:
    """Run the full incremental protocol over ordered span files."""
    cfg.validate()
    paths = _ordered_span_paths(span_paths)
    m = _peek_num_fields(paths[0])
    dictionary = FeatureDictionary(m)
    table = StalenessTable()
    model = init_model(m, cfg.model.embedding_size, cfg.model.hidden, cfg.seed)

    needs_history = cfg.policy in _HISTORY_POLICIES or (
        cfg.policy == "IU" and cfg.iu_supplement
    )
    uses_sas = cfg.policy in _SAS_POLICIES
    guard_eff = cfg.guard if cfg.policy in _GUARD_POLICIES else replace(cfg.guard, lam=0.0)

    def shuffle_rng(span: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _SHUFFLE_STREAM, span])
        )

    # pretraining span: registers the initial vocabulary and seeds the reservoir
    d0 = load_span(paths[0], dictionary)
    grow_embeddings(model, dictionary.size)
    table.update(d0.feature_set)
    _train_span(
        model, d0.features, d0.labels, table, 0, guard_eff, cfg.train, shuffle_rng(0)
    )
    reservoir_pool = SamplePool.from_span(0, d0.features, d0.labels)
    prev_span_pool: SamplePool | None = None
    history: list[SamplePool] = [reservoir_pool] if needs_history else []

    cur = load_span(paths[1], dictionary)
    grow_embeddings(model, dictionary.size)

    metrics: list[SpanMetrics] = []
    reservoir_uids: dict[int, set[tuple[int, int]]] = {}
    selection_logs: dict[int, list[tuple[int, int, float]]] = {}
    eval_data: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    for t in range(1, len(paths) - 1):
        table.update(cur.feature_set)
        present = np.zeros(dictionary.size, dtype=bool)
        present[np.fromiter(cur.feature_set, dtype=np.int64)] = True
        weights = table.weights(cfg.func, cfg.bias, size=dictionary.size)

        if prev_span_pool is None:
            pool = reservoir_pool  # the degenerate first union R_0 | D_0 = D_0
        else:
            pool = SamplePool.concat([reservoir_pool, prev_span_pool])

        t_sample = time.perf_counter()
        cand_source = SamplePool.concat(history) if cfg.policy == "FSS" else pool
        candidates = rss_filter(cand_source, present)
        cap = _resolve_capacity(cfg.capacity, len(cur))
        reservoir = _build_reservoir(
            cfg, t, pool, candidates, weights, cap, history, present
        )
        sample_ms = (time.perf_counter() - t_sample) * 1000.0

        covered_w = _covered_stale_weight(reservoir.feats, table, weights)
        drop = drop_ratio_report(candidates, reservoir, table)

        train_pool = SamplePool.concat(
            [
                SamplePool(reservoir.feats, reservoir.labels, reservoir.uids),
                SamplePool.from_span(t, cur.features, cur.labels),
            ]
        )
        union_ids = np.unique(train_pool.feats)
        s_vec = table.staleness_vector(int(union_ids.max()) + 1 if len(union_ids) else 0)
        s_max = int(s_vec[union_ids].max()) if len(union_ids) else 0

        t_train = time.perf_counter()
        _train_span(
            model,
            train_pool.feats,
            train_pool.labels,
            table,
            s_max,
            guard_eff,
            cfg.train,
            shuffle_rng(t),
        )
        train_ms = (time.perf_counter() - t_train) * 1000.0

        nxt = load_span(paths[t + 1], dictionary)
        grow_embeddings(model, dictionary.size)
        preds = forward(model, nxt.features)
        span_auc = auc(preds, nxt.labels)
        span_logloss = ce_loss(preds, np.asarray(nxt.labels, dtype=np.float64))
        buckets_arr = _bucket_ids(nxt.features, table, cfg.bucket_cap)
        bucket_rows = _bucket_stats(preds, nxt.labels, buckets_arr)

        metrics.append(
            SpanMetrics(
                span=t,
                policy=cfg.policy,
                auc=span_auc,
                logloss=span_logloss,
                reservoir_size=len(reservoir),
                covered_weight=covered_w,
                drop_ratio=drop.overall,
                sample_ms=sample_ms,
                train_ms=train_ms,
                buckets=bucket_rows,
                drop_by_staleness=drop.by_staleness,
            )
        )
        reservoir_uids[t] = reservoir.uid_set()
        if uses_sas:
            selection_logs[t] = reservoir.selection_log
        if keep_eval:
            eval_data[t] = (preds, nxt.labels.copy(), buckets_arr)

        reservoir_pool = SamplePool(reservoir.feats, reservoir.labels, reservoir.uids)
        prev_span_pool = SamplePool.from_span(t, cur.features, cur.labels)
        if needs_history:
            history.append(prev_span_pool)
        cur = nxt

    logger.info(
        "run complete: policy=%s seed=%d mean_auc=%.4f",
        cfg.policy,
        cfg.seed,
        float(np.mean([x.auc for x in metrics])),
    )
    return RunResult(
        policy=cfg.policy,
        seed=cfg.seed,
        metrics=metrics,
        reservoir_uids=reservoir_uids,
        selection_logs=selection_logs,
        eval_data=eval_data if keep_eval else None,
        model=model,
    )


def _build_reservoir(
    cfg: PolicyConfig,
    span: int,
    pool: SamplePool,
    candidates: CandidateSet,
    weights: np.ndarray,
    cap: int | None,
    history: Sequence[SamplePool],
    present: np.ndarray,
) -> Reservoir:
    policy = cfg.policy
    if policy == "IU":
        if cfg.iu_supplement:
            full = SamplePool.concat(history)
            target = len(rss_filter(full, present))
            take = np.arange(max(0, len(full) - target), len(full), dtype=np.int64)
            picked = full.take(take)
            return Reservoir(
                feats=picked.feats,
                labels=picked.labels,
                uids=picked.uids,
                capacity=None,
                selected=take,
            )
        return _empty_reservoir(pool)
    if policy == "RS":
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _RS_STREAM, span])
        )
        k = cap if cap is not None else len(pool)
        return random_sample(pool, k, rng)
    if policy in ("FSS", "RSS", "RSS+SAR"):
        sel = np.arange(len(candidates), dtype=np.int64)
        return Reservoir(
            feats=candidates.feats,
            labels=candidates.labels,
            uids=candidates.uids,
            capacity=None,
            selected=sel,
        )
    # RSS+SAS and FeSAIL: capacity-bound greedy coverage
    return sas_greedy_neighbor(candidates, weights, cap)


@dataclass
class SweepCell:
    func: str
    bias: float
    mean_auc: float
    jaccard_vs_control: float
    is_control: bool
    reservoir_uids: dict[int, set[tuple[int, int]]]


@dataclass
class SweepResult:
    cells: list[SweepCell]

    def pairwise_jaccard(self) -> list[tuple[int, int, float]]:
        out = []
        for i in range(len(self.cells)):
            for j in range(i + 1, len(self.cells)):
                out.append(
                    (i, j, mean_reservoir_jaccard(
                        self.cells[i].reservoir_uids, self.cells[j].reservoir_uids
                    ))
                )
        return out


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def mean_reservoir_jaccard(
    a: dict[int, set[tuple[int, int]]], b: dict[int, set[tuple[int, int]]]
) -> float:
    spans = sorted(set(a) & set(b))
    if not spans:
        return 1.0
    return float(np.mean([jaccard(a[t], b[t]) for t in spans]))


def sweep(
    base: PolicyConfig,
    grid: Sequence[tuple[str, float]],
    span_paths: Sequence[str | Path],
    control: tuple[str, float] | None = None,
) -> SweepResult:
    """Run one cell per (func, bias) and compare against a control cell."""
    if not grid:
        raise ConfigError("sweep grid is empty")
    seen: list[tuple[str, float]] = []
    for cell in grid:
        cell = (cell[0], float(cell[1]))
        if cell in seen:
            logger.warning("duplicate sweep cell %s dropped", cell)
            continue
        seen.append(cell)
    if control is None:
        default = ("inverse_proportional", 1.0)
        control = default if default in seen else seen[0]
    elif (control[0], float(control[1])) not in seen:
        raise ConfigError(f"control cell {control} not in grid")
    control = (control[0], float(control[1]))

    results: dict[tuple[str, float], RunResult] = {}
    for func, bias in seen:
        cfg = replace(base, func=func, bias=bias)
        results[(func, bias)] = run_incremental(cfg, span_paths)
    ctrl_uids = results[control].reservoir_uids
    cells = [
        SweepCell(
            func=func,
            bias=bias,
            mean_auc=results[(func, bias)].mean_auc,
            jaccard_vs_control=mean_reservoir_jaccard(
                results[(func, bias)].reservoir_uids, ctrl_uids
            ),
            is_control=(func, bias) == control,
            reservoir_uids=results[(func, bias)].reservoir_uids,
        )
        for func, bias in seen
    ]
    return SweepResult(cells=cells)
