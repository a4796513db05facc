"""Embedding&MLP click predictor with a staleness-scaled update guard.

The network embeds each field's feature, concatenates the m embeddings and
runs them through a ReLU MLP to a sigmoid click probability. Training adds a
guard penalty on each stale feature's embedding displacement from its
batch-start snapshot, scaled by min(s, eta) / min(s_max, eta), and applies an
adaptive-moment update whose embedding moments live per row so rows outside
the batch never move.

Everything is plain float64 numpy with hand-written gradients: the package
needs bit-reproducible runs, byte-exact checkpoints and sparse row updates,
which are simpler to guarantee without an autograd framework.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError, StateError
from .features import StalenessTable
from .stream import sigmoid

PROB_CLAMP = 1e-7

_MLP_STREAM, _EMB_STREAM = 7, 11

CHECKPOINT_VERSION = 1


@dataclass
class GuardConfig:
    """Guard-regularizer knobs: staleness cap, strength, norm smoothing."""

    eta: int = 5
    lam: float = 0.1
    eps: float = 1e-8

    def validate(self) -> None:
        if self.eta < 1:
            raise ConfigError(f"eta must be >= 1, got {self.eta}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.eps <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.eps}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 10
    patience: int = 2
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")


class ModelState:
    """Parameters plus optimizer state; one instance per run.

    Embedding rows are grown on demand as the vocabulary expands; existing
    rows are never touched by growth. The embedding init stream is owned by
    the state so growth is deterministic for a given seed and growth history.
    """

    def __init__(self, m: int, k: int, hidden: tuple[int, ...], seed: int):
        self.m = m
        self.k = k
        self.hidden = hidden
        self.seed = seed
        dims = [m * k, *hidden, 1]
        rng = np.random.default_rng(np.random.SeedSequence([seed, _MLP_STREAM]))
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out, dtype=np.float64))
        self._emb_rng = np.random.default_rng(
            np.random.SeedSequence([seed, _EMB_STREAM])
        )
        self.emb = np.zeros((0, k), dtype=np.float64)
        # adaptive-moment state: dense for the MLP, per-row for embeddings
        self.w_m = [np.zeros_like(w) for w in self.weights]
        self.w_v = [np.zeros_like(w) for w in self.weights]
        self.b_m = [np.zeros_like(b) for b in self.biases]
        self.b_v = [np.zeros_like(b) for b in self.biases]
        self.step = 0
        self.emb_m = np.zeros((0, k), dtype=np.float64)
        self.emb_v = np.zeros((0, k), dtype=np.float64)
        self.emb_t = np.zeros(0, dtype=np.int64)

    @property
    def num_features(self) -> int:
        return len(self.emb)

    def param_arrays(self) -> list[np.ndarray]:
        return [self.emb, *self.weights, *self.biases]


def init_model(m: int, k: int, hidden_sizes: Sequence[int], seed: int) -> ModelState:
    """Fresh model with seeded zero-mean init scaled by 1/sqrt(fan-in)."""
    if m < 1:
        raise ConfigError(f"number of fields must be >= 1, got {m}")
    if k < 1:
        raise ConfigError(f"embedding size must be >= 1, got {k}")
    hidden = tuple(int(h) for h in hidden_sizes)
    if not hidden or any(h < 1 for h in hidden):
        raise ConfigError(f"hidden sizes must be a non-empty list of positives, got {hidden_sizes}")
    return ModelState(m=m, k=k, hidden=hidden, seed=seed)


def grow_embeddings(state: ModelState, new_total: int) -> ModelState:
    """Extend the embedding table to `new_total` rows; old rows stay bit-identical."""
    n = state.num_features
    if new_total < n:
        raise ValueError(f"cannot shrink embeddings from {n} to {new_total}")
    if new_total == n:
        return state
    extra = new_total - n
    block = state._emb_rng.normal(0.0, 1.0 / np.sqrt(state.k), size=(extra, state.k))
    state.emb = np.vstack([state.emb, block])
    state.emb_m = np.vstack([state.emb_m, np.zeros((extra, state.k))])
    state.emb_v = np.vstack([state.emb_v, np.zeros((extra, state.k))])
    state.emb_t = np.concatenate([state.emb_t, np.zeros(extra, dtype=np.int64)])
    return state


def _forward_cache(state: ModelState, feats: np.ndarray):
    feats = np.asarray(feats, dtype=np.int64)
    if feats.ndim != 2 or feats.shape[1] != state.m:
        raise ValueError(f"batch must have shape (B, {state.m}), got {feats.shape}")
    if feats.size and (feats.min() < 0 or feats.max() >= state.num_features):
        raise LookupError(
            f"feature id out of range [0, {state.num_features}) in batch"
        )
    x = state.emb[feats].reshape(len(feats), state.m * state.k)
    hs = [x]
    zs = []
    n_hidden = len(state.weights) - 1
    for layer in range(n_hidden):
        z = hs[-1] @ state.weights[layer] + state.biases[layer]
        zs.append(z)
        hs.append(np.maximum(z, 0.0))
    logits = (hs[-1] @ state.weights[-1] + state.biases[-1])[:, 0]
    probs = sigmoid(logits)
    return probs, (feats, x, hs, zs)


def forward(state: ModelState, feats: np.ndarray) -> np.ndarray:
    """Per-sample click probabilities in (0, 1); pure, no state change."""
    probs, _ = _forward_cache(state, feats)
    return probs


def ce_loss(preds: np.ndarray, labels: np.ndarray, clamp: float = PROB_CLAMP) -> float:
    """Mean binary cross entropy with probabilities clamped away from {0, 1}."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch: preds {preds.shape} vs labels {labels.shape}")
    p = np.clip(preds, clamp, 1.0 - clamp)
    return float(np.mean(-(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))))


def guard_coefficient(s: int, eta: int, s_max: int) -> float:
    """min(s, eta) / min(s_max, eta); zero for fresh features or an all-fresh span."""
    if s < 0:
        raise ValueError(f"staleness must be >= 0, got {s}")
    if s == 0:
        return 0.0
    denom = min(s_max, eta)
    if denom <= 0:
        return 0.0
    return min(s, eta) / denom


class AnchorTable:
    """Embedding snapshot for the current batch's feature ids."""

    def __init__(self, ids: np.ndarray, values: np.ndarray):
        self.ids = ids
        self.values = values

    @staticmethod
    def snapshot(emb: np.ndarray, feats: np.ndarray) -> "AnchorTable":
        ids = np.unique(np.asarray(feats, dtype=np.int64))
        return AnchorTable(ids=ids, values=emb[ids].copy())

    def values_for(self, ids: np.ndarray) -> np.ndarray:
        if len(ids) == 0:
            return self.values[:0]
        if len(self.ids) == 0:
            raise StateError(f"missing anchors for feature ids {ids.tolist()}")
        pos = np.searchsorted(self.ids, ids)
        bad = (pos >= len(self.ids)) | (self.ids[np.minimum(pos, len(self.ids) - 1)] != ids)
        if np.any(bad):
            raise StateError(f"missing anchors for feature ids {ids[bad].tolist()}")
        return self.values[pos]


def _guard_terms(
    ids: np.ndarray,
    table: StalenessTable,
    s_max: int,
    anchors: AnchorTable,
    emb: np.ndarray,
    cfg: GuardConfig,
):
    """Per-feature guard coefficients, displacements and smoothed norms."""
    denom = min(s_max, cfg.eta)
    if denom <= 0:
        return None
    s = table.staleness_vector(int(ids.max()) + 1 if len(ids) else 0)[ids]
    coef = np.where(s >= 1, np.minimum(s, cfg.eta) / denom, 0.0)
    diffs = emb[ids] - anchors.values_for(ids)
    norms = np.sqrt(np.sum(diffs * diffs, axis=1) + cfg.eps)
    return coef, diffs, norms


def guard_loss(
    batch_features: np.ndarray,
    table: StalenessTable,
    s_max: int,
    anchors: AnchorTable,
    emb: np.ndarray,
    cfg: GuardConfig,
) -> float:
    """Sum over distinct stale batch features of coef * smoothed ||e - anchor||."""
    cfg.validate()
    ids = np.unique(np.asarray(batch_features, dtype=np.int64))
    if len(ids) == 0:
        return 0.0
    terms = _guard_terms(ids, table, s_max, anchors, emb, cfg)
    if terms is None:
        return 0.0
    coef, _, norms = terms
    return float(np.dot(coef, norms))


@dataclass
class StepStats:
    total: float
    ce: float
    guard: float


def compute_gradients(
    state: ModelState,
    feats: np.ndarray,
    labels: np.ndarray,
    table: StalenessTable,
    s_max: int,
    guard_cfg: GuardConfig,
    anchors: AnchorTable | None = None,
):
    """Full-loss value and gradients for one batch.

    Returns (stats, ids, d_emb_rows, dW, db) where ``ids`` are the distinct
    batch feature ids and ``d_emb_rows`` their gradient rows. The guard
    gradient flows into embeddings only.
    """
    probs, (feats, x, hs, zs) = _forward_cache(state, feats)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: preds {probs.shape} vs labels {labels.shape}")
    batch = len(labels)
    ce = ce_loss(probs, labels)

    inside = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    dlogit = np.where(inside, probs - labels, 0.0) / batch

    d_w: list[np.ndarray] = [np.empty(0)] * len(state.weights)
    d_b: list[np.ndarray] = [np.empty(0)] * len(state.biases)
    dh = dlogit[:, None]
    d_w[-1] = hs[-1].T @ dh
    d_b[-1] = dh.sum(axis=0)
    dh = dh @ state.weights[-1].T
    for layer in range(len(zs) - 1, -1, -1):
        dz = dh * (zs[layer] > 0)
        d_w[layer] = hs[layer].T @ dz
        d_b[layer] = dz.sum(axis=0)
        dh = dz @ state.weights[layer].T

    dx = dh.reshape(batch, state.m, state.k)
    ids, inverse = np.unique(feats, return_inverse=True)
    d_emb = np.zeros((len(ids), state.k), dtype=np.float64)
    np.add.at(d_emb, inverse.reshape(batch, state.m), dx)

    guard_val = 0.0
    if guard_cfg.lam > 0:
        if anchors is None:
            anchors = AnchorTable(ids=ids, values=state.emb[ids].copy())
        terms = _guard_terms(ids, table, s_max, anchors, state.emb, guard_cfg)
        if terms is not None:
            coef, diffs, norms = terms
            guard_val = float(np.dot(coef, norms))
            d_emb += guard_cfg.lam * (coef / norms)[:, None] * diffs

    total = ce + guard_cfg.lam * guard_val if guard_cfg.lam > 0 else ce
    stats = StepStats(total=total, ce=ce, guard=guard_val)
    return stats, ids, d_emb, d_w, d_b


def loss_value(
    state: ModelState,
    feats: np.ndarray,
    labels: np.ndarray,
    table: StalenessTable,
    s_max: int,
    guard_cfg: GuardConfig,
    anchors: AnchorTable | None = None,
) -> float:
    """CE + lambda * guard as a pure function of the current parameters."""
    probs = forward(state, feats)
    ce = ce_loss(probs, np.asarray(labels, dtype=np.float64))
    if guard_cfg.lam <= 0:
        return ce
    ids = np.unique(np.asarray(feats, dtype=np.int64))
    if anchors is None:
        anchors = AnchorTable(ids=ids, values=state.emb[ids].copy())
    g = guard_loss(feats, table, s_max, anchors, state.emb, guard_cfg)
    return ce + guard_cfg.lam * g


def train_step(
    state: ModelState,
    feats: np.ndarray,
    labels: np.ndarray,
    table: StalenessTable,
    s_max: int,
    guard_cfg: GuardConfig,
    train_cfg: TrainConfig,
    anchors: AnchorTable | None = None,
) -> StepStats:
    """One optimizer step on a mini-batch.

    Snapshots anchors for the batch's features (unless an explicit anchor
    table is given), backpropagates CE + lambda * guard and applies one
    adaptive-moment update. Only embedding rows present in the batch change.
    """
    if len(labels) == 0:
        raise ValueError("batch must be non-empty")
    if anchors is None and guard_cfg.lam > 0:
        anchors = AnchorTable.snapshot(state.emb, feats)
    stats, ids, d_emb, d_w, d_b = compute_gradients(
        state, feats, labels, table, s_max, guard_cfg, anchors
    )
    if not np.isfinite(stats.total):
        raise NumericError(f"non-finite loss {stats.total!r} in training step")

    b1, b2, eps, lr = train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps, train_cfg.learning_rate
    state.step += 1
    t = state.step
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for i, (gw, gb) in enumerate(zip(d_w, d_b)):
        state.w_m[i] = b1 * state.w_m[i] + (1 - b1) * gw
        state.w_v[i] = b2 * state.w_v[i] + (1 - b2) * gw * gw
        state.weights[i] -= lr * (state.w_m[i] / corr1) / (np.sqrt(state.w_v[i] / corr2) + eps)
        state.b_m[i] = b1 * state.b_m[i] + (1 - b1) * gb
        state.b_v[i] = b2 * state.b_v[i] + (1 - b2) * gb * gb
        state.biases[i] -= lr * (state.b_m[i] / corr1) / (np.sqrt(state.b_v[i] / corr2) + eps)

    state.emb_t[ids] += 1
    t_rows = state.emb_t[ids].astype(np.float64)[:, None]
    m_rows = b1 * state.emb_m[ids] + (1 - b1) * d_emb
    v_rows = b2 * state.emb_v[ids] + (1 - b2) * d_emb * d_emb
    state.emb_m[ids] = m_rows
    state.emb_v[ids] = v_rows
    m_hat = m_rows / (1.0 - b1**t_rows)
    v_hat = v_rows / (1.0 - b2**t_rows)
    state.emb[ids] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return stats


def save_checkpoint(state: ModelState, path) -> None:
    """Versioned binary dump; loading restores bit-exact evaluation behavior."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "m": state.m,
        "k": state.k,
        "hidden": list(state.hidden),
        "seed": state.seed,
        "step": state.step,
        "num_features": state.num_features,
        "emb_rng_state": state._emb_rng.bit_generator.state,
    }
    arrays = {
        "emb": state.emb,
        "emb_m": state.emb_m,
        "emb_v": state.emb_v,
        "emb_t": state.emb_t,
    }
    for i, (w, b) in enumerate(zip(state.weights, state.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
        arrays[f"wm{i}"] = state.w_m[i]
        arrays[f"wv{i}"] = state.w_v[i]
        arrays[f"bm{i}"] = state.b_m[i]
        arrays[f"bv{i}"] = state.b_v[i]
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_checkpoint(path) -> ModelState:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta['version']}")
        state = ModelState(
            m=meta["m"], k=meta["k"], hidden=tuple(meta["hidden"]), seed=meta["seed"]
        )
        state.step = meta["step"]
        state.emb = data["emb"]
        state.emb_m = data["emb_m"]
        state.emb_v = data["emb_v"]
        state.emb_t = data["emb_t"]
        n_layers = len(state.weights)
        state.weights = [data[f"w{i}"] for i in range(n_layers)]
        state.biases = [data[f"b{i}"] for i in range(n_layers)]
        state.w_m = [data[f"wm{i}"] for i in range(n_layers)]
        state.w_v = [data[f"wv{i}"] for i in range(n_layers)]
        state.b_m = [data[f"bm{i}"] for i in range(n_layers)]
        state.b_v = [data[f"bv{i}"] for i in range(n_layers)]
    state._emb_rng.bit_generator.state = meta["emb_rng_state"]
    return state
