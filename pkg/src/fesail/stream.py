"""Span-partitioned datasets on disk and a synthetic drifting-stream generator.

Span files are CSV, one row per sample: ``label,token_1,...,token_m`` with a
binary label and comma-free UTF-8 tokens, named ``span_%03d.csv``. The
synthetic generator produces streams whose per-feature absence windows are
fully controlled, so staleness effects can be provoked and measured at desk
scale.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .features import FeatureDictionary, Sample

logger = logging.getLogger(__name__)

SPAN_NAME_RE = re.compile(r"^span_(\d{3,})\.csv$")

# seed-stream tags so every rng draw has a stable, component-local source
_GEN_LATENT, _GEN_CHOICE, _GEN_LABEL, _GEN_SCHEDULE = 101, 102, 103, 104


def span_filename(index: int) -> str:
    return f"span_{index:03d}.csv"


@dataclass
class SpanDataset:
    """One span's encoded samples plus the feature set they cover."""

    span_index: int
    features: np.ndarray  # (n, m) int64 feature ids
    labels: np.ndarray  # (n,) int8 in {0, 1}
    feature_set: frozenset[int]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_fields(self) -> int:
        return self.features.shape[1]

    def samples(self) -> Iterator[Sample]:
        for row, y in zip(self.features, self.labels):
            yield Sample(features=tuple(int(v) for v in row), label=int(y))


def parse_span_index(path: str | Path) -> int:
    name = Path(path).name
    match = SPAN_NAME_RE.match(name)
    if match is None:
        raise DataError(f"{path}: span files must be named span_%03d.csv")
    return int(match.group(1))


def load_span(path: str | Path, dictionary: FeatureDictionary) -> SpanDataset:
    """Load one span file, encoding every row through the shared dictionary."""
    path = Path(path)
    span_index = parse_span_index(path)
    m = dictionary.num_fields
    feats: list[list[int]] = []
    labels: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split(",")
            if len(cols) != m + 1:
                raise DataError(
                    f"{path}:{lineno}: expected {m + 1} columns, got {len(cols)}"
                )
            if cols[0] not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label not binary: {cols[0]!r}")
            labels.append(int(cols[0]))
            feats.append(
                [dictionary.encode_token(i, tok) for i, tok in enumerate(cols[1:])]
            )
    if not labels:
        raise DataError(f"{path}: empty span")
    features = np.asarray(feats, dtype=np.int64)
    return SpanDataset(
        span_index=span_index,
        features=features,
        labels=np.asarray(labels, dtype=np.int8),
        feature_set=frozenset(int(v) for v in np.unique(features)),
    )


def feature_token(field_index: int, feature_index: int) -> str:
    return f"f{field_index}_{feature_index}"


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic drifting stream.

    ``absence_schedule`` maps a token to the span indices where that feature
    is suppressed; features are guaranteed to appear in every span not listed.
    Labels come from a logistic click model over fixed per-feature latent
    weights, so a model that forgets a stale feature's effect measurably loses
    AUC when the feature returns.
    """

    num_spans: int
    samples_per_span: int
    num_fields: int
    features_per_field: int
    absence_schedule: dict[str, tuple[int, ...]] = field(default_factory=dict)
    click_noise: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.num_spans < 1:
            raise ConfigError("num_spans must be >= 1")
        if self.samples_per_span < 1:
            raise ConfigError("samples_per_span must be >= 1")
        if self.num_fields < 1:
            raise ConfigError("num_fields must be >= 1")
        if self.features_per_field < 1:
            raise ConfigError("features_per_field must be >= 1")
        if self.click_noise < 0:
            raise ConfigError("click_noise must be >= 0")
        known = {
            feature_token(f, j)
            for f in range(self.num_fields)
            for j in range(self.features_per_field)
        }
        for token, spans in self.absence_schedule.items():
            if token not in known:
                raise ConfigError(f"schedule references unknown token {token!r}")
            for s in spans:
                if not 0 <= s < self.num_spans:
                    raise ConfigError(
                        f"schedule for {token!r} lists span {s} outside the stream"
                    )
        for s in range(self.num_spans):
            for f in range(self.num_fields):
                alive = sum(
                    1
                    for j in range(self.features_per_field)
                    if s not in self.absence_schedule.get(feature_token(f, j), ())
                )
                if alive == 0:
                    raise DataError(f"field {f} emptied in span {s}")


def windowed_schedule(
    num_spans: int,
    num_fields: int,
    features_per_field: int,
    churn_fraction: float,
    start_prob: float,
    max_staleness: int,
    seed: int,
) -> dict[str, tuple[int, ...]]:
    """Random absence windows of length 1..max_staleness for a churn subset.

    Windows never start at span 0 (every feature is observable before it goes
    missing) and the same seed always yields the same schedule.
    """
    if not 0 <= churn_fraction <= 1:
        raise ConfigError("churn_fraction must be in [0, 1]")
    if not 0 <= start_prob <= 1:
        raise ConfigError("start_prob must be in [0, 1]")
    if max_staleness < 1:
        raise ConfigError("max_staleness must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _GEN_SCHEDULE]))
    schedule: dict[str, tuple[int, ...]] = {}
    for fld in range(num_fields):
        n_churn = int(round(churn_fraction * features_per_field))
        churn = rng.permutation(features_per_field)[:n_churn]
        for j in sorted(int(v) for v in churn):
            absent: list[int] = []
            s = 1
            while s < num_spans:
                if rng.random() < start_prob:
                    length = int(rng.integers(1, max_staleness + 1))
                    length = min(length, num_spans - s)
                    absent.extend(range(s, s + length))
                    s += length + 1  # guaranteed reappearance gap
                else:
                    s += 1
            if absent:
                schedule[feature_token(fld, j)] = tuple(absent)
    return schedule


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> list[Path]:
    """Write the stream's span files; deterministic for a given spec and seed."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_total = spec.num_fields * spec.features_per_field
    rng_latent = np.random.default_rng(np.random.SeedSequence([spec.seed, _GEN_LATENT]))
    rng_choice = np.random.default_rng(np.random.SeedSequence([spec.seed, _GEN_CHOICE]))
    rng_label = np.random.default_rng(np.random.SeedSequence([spec.seed, _GEN_LABEL]))
    latent = rng_latent.normal(0.0, 1.0, size=n_total)

    suppressed = np.zeros((spec.num_spans, spec.num_fields, spec.features_per_field), bool)
    for token, spans in spec.absence_schedule.items():
        fld, j = (int(v) for v in token[1:].split("_"))
        for s in spans:
            suppressed[s, fld, j] = True

    paths: list[Path] = []
    for s in range(spec.num_spans):
        n = spec.samples_per_span
        chosen = np.empty((n, spec.num_fields), dtype=np.int64)
        for fld in range(spec.num_fields):
            avail = np.flatnonzero(~suppressed[s, fld])
            picks = rng_choice.integers(0, len(avail), size=n)
            col = avail[picks]
            _force_presence(col, avail)
            chosen[:, fld] = col
        flat = chosen + np.arange(spec.num_fields)[None, :] * spec.features_per_field
        logits = latent[flat].mean(axis=1)
        logits = logits + spec.click_noise * rng_label.normal(0.0, 1.0, size=n)
        p = sigmoid(logits)
        y = (rng_label.random(n) < p).astype(np.int8)

        path = out_dir / span_filename(s)
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(n):
                toks = ",".join(
                    feature_token(fld, int(chosen[i, fld]))
                    for fld in range(spec.num_fields)
                )
                fh.write(f"{int(y[i])},{toks}\n")
        paths.append(path)
    logger.info("generated %d spans in %s", spec.num_spans, out_dir)
    return paths


def _force_presence(col: np.ndarray, avail: np.ndarray) -> None:
    """Rewrite slots so every available feature occurs at least once.

    Only slots whose current feature occurs more than once are sacrificed, so
    no previously present feature disappears.
    """
    counts = np.bincount(col, minlength=int(avail.max()) + 1 if len(avail) else 0)
    missing = [int(f) for f in avail if counts[f] == 0]
    if not missing:
        return
    if len(missing) > len(col):
        raise DataError(
            f"span too small to host all {len(avail)} scheduled features"
        )
    row = 0
    for f in missing:
        while row < len(col) and counts[col[row]] <= 1:
            row += 1
        if row >= len(col):
            raise DataError("cannot place scheduled feature without evicting another")
        counts[col[row]] -= 1
        col[row] = f
        counts[f] += 1
        row += 1


def feature_presence_histogram(spans: Sequence[SpanDataset]) -> dict[int, int]:
    """Count reappearance events by gap length.

    An event is a feature present in span ``b`` after being absent from
    exactly ``v`` spans since its previous presence ``a`` (v = b - a - 1).
    First appearances are not events.
    """
    if not spans:
        raise ValueError("need at least one span")
    presence: dict[int, list[int]] = {}
    for ds in spans:
        for fid in ds.feature_set:
            presence.setdefault(fid, []).append(ds.span_index)
    hist: dict[int, int] = {}
    for spans_present in presence.values():
        spans_present.sort()
        for a, b in zip(spans_present, spans_present[1:]):
            v = b - a - 1
            hist[v] = hist.get(v, 0) + 1
    return hist


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
