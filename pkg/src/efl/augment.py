"""Distance-scaled and DTW-neighbour data augmentation for acoustic frames.

Two branches, both producing one new sample per input:

* intra: mix a sample with copies of itself attenuated as if recorded from
  ``1..Dis`` steps further away (``x / d**exponent``).
* inter: mix a sample with K/2 of its K nearest same-class neighbours from
  other persons, nearest by dynamic time warping.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numba
import numpy as np

from .errors import ConfigError, InsufficientDataError, ShapeError

logger = logging.getLogger(__name__)

MODES = ("intra", "inter")


class AugmentationWarning(UserWarning):
    """A sample could not be augmented and was passed through unchanged."""


@dataclass
class AugmentConfig:
    mode: str = "intra"
    Dis: int = 4
    K: int = 4
    w: float = 0.5
    seed: int = 0
    exponent: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if int(self.Dis) != self.Dis or self.Dis < 1:
            raise ConfigError("Dis must be an integer >= 1")
        if self.K < 2 or self.K % 2:
            raise ConfigError("K must be an even integer >= 2")
        if not 0.0 <= self.w <= 1.0:
            raise ConfigError("w must lie in [0, 1]")


@dataclass
class SampleSeries:
    values: np.ndarray
    label: int
    person_id: str
    sample_id: str = ""
    shape: Optional[Tuple[int, ...]] = None
    augmented: bool = False
    mode: Optional[str] = None
    source_sample_id: Optional[str] = None
    neighbor_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size == 0:
            raise ShapeError("series must be nonempty")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("series values must be finite")

    def provenance(self) -> dict:
        return {"augmented": self.augmented, "mode": self.mode,
                "source_sample_id": self.source_sample_id, "neighbor_ids": list(self.neighbor_ids)}


def _values(x) -> np.ndarray:
    v = np.asarray(getattr(x, "values", x), dtype=float).ravel()
    if v.size == 0:
        raise ShapeError("series must be nonempty")
    return v


@numba.njit(cache=True)
def _dtw_table(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.full(m + 1, np.inf)
    cur = np.empty(m + 1)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        ai = a[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = abs(ai - b[j - 1]) + best
        prev, cur = cur, prev
    return prev[m]


def dtw_distance(a, b) -> float:
    """Unconstrained DTW with absolute-difference local cost."""
    return float(_dtw_table(_values(a), _values(b)))


def intra_augment(d, Dis: int, w: float, exponent: float = 0.5):
    """``w*x + (1-w)/Dis * sum_{k=1..Dis} x / k**exponent``; labels kept."""
    if int(Dis) != Dis or Dis < 1:
        raise ConfigError("Dis must be an integer >= 1")
    if not 0.0 <= w <= 1.0:
        raise ConfigError("w must lie in [0, 1]")
    x = _values(d)
    scale = np.sum(1.0 / np.arange(1, int(Dis) + 1, dtype=float) ** exponent)
    out = w * x + ((1.0 - w) / Dis) * scale * x
    if isinstance(d, SampleSeries):
        return replace(d, values=out, augmented=True, mode="intra",
                       source_sample_id=d.sample_id, neighbor_ids=[], sample_id=d.sample_id + "-intra")
    return out


def knn_dtw(anchor, pool: Sequence, K: int) -> list:
    """The ``K`` pool members closest to ``anchor`` by DTW; ties keep pool order."""
    if len(pool) < K:
        raise InsufficientDataError(f"need {K} neighbours, pool has {len(pool)}")
    d = np.array([dtw_distance(anchor, p) for p in pool])
    order = np.argsort(d, kind="stable")[:K]
    return [pool[i] for i in order]


def resample_linear(x, n: int) -> np.ndarray:
    """Linearly interpolate ``x`` onto ``n`` evenly spaced points over the same span."""
    x = _values(x)
    if x.size == n:
        return x.copy()
    if x.size == 1:
        return np.full(n, x[0])
    return np.interp(np.linspace(0.0, x.size - 1, n), np.arange(x.size), x)


def inter_weights(K: int, w: float) -> np.ndarray:
    """Mixing weights ``[anchor, chosen_1, ..., chosen_{K/2}]``."""
    return np.concatenate([[w], np.full(K // 2, (1.0 - w) / (K // 2))])


def inter_augment(anchor, neighbors: Sequence, w: float, seed: int = 0):
    """Mix the anchor with a seeded random half of its ``K`` neighbours."""
    K = len(neighbors)
    if K < 2 or K % 2:
        raise ConfigError("neighbour count K must be even and >= 2")
    if not 0.0 <= w <= 1.0:
        raise ConfigError("w must lie in [0, 1]")
    a = _values(anchor)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(K, size=K // 2, replace=False))
    weights = inter_weights(K, w)
    out = weights[0] * a
    for wk, idx in zip(weights[1:], chosen):
        out = out + wk * resample_linear(neighbors[idx], a.size)
    if isinstance(anchor, SampleSeries):
        ids = [getattr(neighbors[i], "sample_id", str(i)) for i in chosen]
        return replace(anchor, values=out, augmented=True, mode="inter",
                       source_sample_id=anchor.sample_id, neighbor_ids=ids,
                       sample_id=anchor.sample_id + "-inter")
    return out


def _anchor_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def augment_dataset(data: Sequence[SampleSeries], cfg: AugmentConfig) -> List[SampleSeries]:
    """Originals followed by one augmented sample per input, in input order.

    In inter mode, anchors whose same-class pool from other persons holds
    fewer than ``K`` samples are skipped with an ``AugmentationWarning``.
    """
    data = list(data)
    out = list(data)
    if cfg.mode == "intra":
        out.extend(intra_augment(s, cfg.Dis, cfg.w, cfg.exponent) for s in data)
        return out
    cache: Dict[Tuple[int, int], float] = {}

    def dist(i, j):
        key = (i, j) if i < j else (j, i)
        if key not in cache:
            cache[key] = dtw_distance(data[i], data[j])
        return cache[key]

    for i, s in enumerate(data):
        pool = [j for j, o in enumerate(data) if o.label == s.label and o.person_id != s.person_id]
        if len(pool) < cfg.K:
            msg = f"sample {s.sample_id or i}: only {len(pool)} cross-person neighbours, need {cfg.K}"
            logger.warning(msg)
            warnings.warn(msg, AugmentationWarning, stacklevel=2)
            continue
        d = np.array([dist(i, j) for j in pool])
        nearest = [data[pool[k]] for k in np.argsort(d, kind="stable")[:cfg.K]]
        out.append(inter_augment(s, nearest, cfg.w, _anchor_seed(cfg.seed, i)))
    return out
