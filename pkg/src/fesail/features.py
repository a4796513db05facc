"""Feature vocabulary and per-feature staleness bookkeeping.

Feature ids are dense integers handed out in first-seen order across all
fields, so an id doubles as a row index into the embedding table. Every id
belongs to exactly one field and never moves. Staleness of a feature is the
number of consecutive spans it has been absent from the incremental data;
it is reset to zero the moment the feature shows up again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

WEIGHT_FUNCS = ("inverse_proportional", "negative_exponential")


@dataclass(frozen=True)
class Sample:
    """One labeled interaction: one feature id per field plus a binary label."""

    features: tuple[int, ...]
    label: int


class FeatureDictionary:
    """Append-only token vocabulary with one namespace per field.

    Ids are global and dense (max id + 1 == size). Encoding the same token
    twice yields the same id; unseen tokens grow the vocabulary.
    """

    def __init__(self, num_fields: int):
        if num_fields < 1:
            raise ConfigError(f"num_fields must be >= 1, got {num_fields}")
        self.num_fields = num_fields
        self._maps: list[dict[str, int]] = [{} for _ in range(num_fields)]
        self._field_of: list[int] = []
        self._token_of: list[str] = []

    def __len__(self) -> int:
        return len(self._field_of)

    @property
    def size(self) -> int:
        return len(self._field_of)

    def encode_token(self, field: int, token: str) -> int:
        mapping = self._maps[field]
        fid = mapping.get(token)
        if fid is None:
            fid = len(self._field_of)
            mapping[token] = fid
            self._field_of.append(field)
            self._token_of.append(token)
        return fid

    def encode(self, raw_tokens: Sequence[str]) -> Sample:
        if len(raw_tokens) != self.num_fields:
            raise ValueError(
                f"expected {self.num_fields} tokens, got {len(raw_tokens)}"
            )
        feats = tuple(
            self.encode_token(field, token) for field, token in enumerate(raw_tokens)
        )
        return Sample(features=feats, label=0)

    def field_of(self, fid: int) -> int:
        return self._field_of[fid]

    def token_of(self, fid: int) -> str:
        return self._token_of[fid]


def encode_sample(raw_tokens: Sequence[str], dictionary: FeatureDictionary,
                  label: int = 0) -> Sample:
    """Encode one row of raw tokens, growing the dictionary as needed."""
    sample = dictionary.encode(raw_tokens)
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    return Sample(features=sample.features, label=label)


class StalenessTable:
    """Consecutive-absence counters, one per known feature id.

    `update` is applied exactly once per span, when the span's feature set
    becomes available. Between updates all reads see frozen values, which is
    what both the replay sampler and the guard regularizer rely on.
    """

    def __init__(self):
        self._s = np.zeros(0, dtype=np.int64)
        self.span_index = 0  # number of updates applied so far

    def __len__(self) -> int:
        return len(self._s)

    @property
    def values(self) -> np.ndarray:
        """Staleness per feature id. Treat as read-only."""
        return self._s

    def staleness(self, fid: int) -> int:
        if not 0 <= fid < len(self._s):
            raise KeyError(f"unknown feature id {fid}")
        return int(self._s[fid])

    def update(self, present: Iterable[int]) -> None:
        """Apply one span's feature set: reset present counters, age the rest.

        Ids not seen before are registered with staleness 0; there is no
        retroactive aging for brand-new features.
        """
        ids = np.fromiter(present, dtype=np.int64)
        old_n = len(self._s)
        new_n = old_n
        if ids.size:
            if ids.min() < 0:
                raise ValueError("feature ids must be non-negative")
            new_n = max(old_n, int(ids.max()) + 1)
        if new_n > old_n:
            grown = np.zeros(new_n, dtype=np.int64)
            grown[:old_n] = self._s
            self._s = grown
        present_mask = np.zeros(new_n, dtype=bool)
        present_mask[ids] = True
        absent = ~present_mask
        absent[old_n:] = False  # new ids enter at 0
        self._s[absent] += 1
        self._s[present_mask] = 0
        self.span_index += 1

    def stale_mask(self, size: int | None = None) -> np.ndarray:
        """Boolean array over ids; True where staleness >= 1.

        `size` may exceed the table length (ids encoded but not yet covered
        by an update count as fresh).
        """
        n = len(self._s) if size is None else size
        mask = np.zeros(n, dtype=bool)
        upto = min(n, len(self._s))
        mask[:upto] = self._s[:upto] >= 1
        return mask

    def staleness_vector(self, size: int | None = None) -> np.ndarray:
        """Staleness per id, zero-padded past the table length."""
        n = len(self._s) if size is None else size
        out = np.zeros(n, dtype=np.int64)
        upto = min(n, len(self._s))
        out[:upto] = self._s[:upto]
        return out

    def weights(self, func: str, bias: float, size: int | None = None) -> np.ndarray:
        """Per-id coverage weights; entries for fresh features are left at 0.

        Only stale ids ever have their weight read by the sampler; the zeros
        are placeholders, not valid weights.
        """
        _check_weight_args(func, bias)
        n = len(self._s) if size is None else size
        w = np.zeros(n, dtype=np.float64)
        s = self.staleness_vector(n)
        stale = s >= 1
        if func == "inverse_proportional":
            w[stale] = 1.0 / s[stale] + bias
        else:
            w[stale] = np.exp(-s[stale].astype(np.float64)) + bias
        return w


def _check_weight_args(func: str, bias: float) -> None:
    if func not in WEIGHT_FUNCS:
        raise ConfigError(f"unknown weight func {func!r}; choose from {WEIGHT_FUNCS}")
    if bias < 0:
        raise ConfigError(f"bias must be >= 0, got {bias}")


def weight_of(s: int, func: str, bias: float) -> float:
    """Coverage weight of a stale feature; strictly decreasing in staleness."""
    _check_weight_args(func, bias)
    if s < 1:
        raise ValueError(f"weight is defined for stale features only (s >= 1), got s={s}")
    if func == "inverse_proportional":
        return 1.0 / s + bias
    return math.exp(-s) + bias


def update_staleness(table: StalenessTable, present: Iterable[int]) -> StalenessTable:
    """Apply one span's feature set to the table (in place) and return it."""
    table.update(present)
    return table


def stale_features(sample: Sample, table: StalenessTable) -> set[int]:
    """The sample's features with staleness >= 1; empty means not a replay candidate."""
    return {fid for fid in sample.features if table.staleness(fid) >= 1}
