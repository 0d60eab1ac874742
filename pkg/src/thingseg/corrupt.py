"""Weather-style corruption of a clean cloud: selective jitter and point drop.

Every output point keeps ``origin_index`` pointing at its source point in the
clean cloud, which is what lets clean/augmented features be matched later.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .scanio import PointCloud

DROP_POLICIES = ("none", "uniform", "beam-burst", "loss-guided")


@dataclass(frozen=True)
class CorruptConfig:
    jitter_sigma: float = 0.05
    jitter_fraction: float = 0.5
    drop_policy: str = "uniform"
    drop_rate: float = 0.3
    burst_span: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.jitter_sigma < 0:
            raise ConfigError("corrupt.jitter_sigma must be >= 0")
        if not 0 <= self.jitter_fraction <= 1:
            raise ConfigError("corrupt.jitter_fraction must be in [0, 1]")
        if not 0 <= self.drop_rate < 1:
            raise ConfigError("corrupt.drop_rate must be in [0, 1)")
        if self.drop_policy not in DROP_POLICIES:
            raise ConfigError(f"corrupt.drop_policy must be one of {DROP_POLICIES}")
        if self.burst_span < 1:
            raise ConfigError("corrupt.burst_span must be >= 1")

    def with_seed(self, seed) -> "CorruptConfig":
        return dataclasses.replace(self, seed=seed)


def _rng(seed, stream):
    return np.random.default_rng([int(s) for s in np.atleast_1d(seed)] + [stream])


def jitter(cloud: PointCloud, cfg: CorruptConfig) -> PointCloud:
    if cfg.jitter_sigma == 0 or cfg.jitter_fraction == 0 or cloud.n == 0:
        return cloud
    rng = _rng(cfg.seed, 0)
    selected = rng.random(cloud.n) < cfg.jitter_fraction
    noise = rng.normal(0.0, cfg.jitter_sigma, size=(cloud.n, 3))
    xyz = cloud.xyz.astype(np.float64) + noise * selected[:, None]
    return cloud.replace(xyz=xyz)


def _burst_mask(cloud, cfg, target, rng):
    """Remove runs of ``burst_span`` azimuth-adjacent points inside random beams."""
    if cloud.beam is None:
        raise ConfigError("beam-burst drop needs beams assigned")
    az = np.arctan2(cloud.xyz[:, 1].astype(np.float64), cloud.xyz[:, 0].astype(np.float64))
    order = np.lexsort((np.arange(cloud.n), az, cloud.beam))
    beams, starts = np.unique(cloud.beam[order], return_index=True)
    ends = np.append(starts[1:], cloud.n)
    alive = np.ones(cloud.n, dtype=bool)
    removed = 0
    live_beams = list(range(len(beams)))
    while removed < target:
        k = live_beams[int(rng.integers(len(live_beams)))]
        ring = order[starts[k]:ends[k]]
        alive_pos = np.flatnonzero(alive[ring])
        s = int(alive_pos[rng.integers(len(alive_pos))])
        window = ring[(s + np.arange(min(cfg.burst_span, len(ring)))) % len(ring)]
        window = window[alive[window]][: target - removed]
        alive[window] = False
        removed += len(window)
        if not alive[ring].any():
            live_beams.remove(k)
    return alive


def drop(cloud: PointCloud, cfg: CorruptConfig, guidance=None) -> PointCloud:
    if cfg.drop_policy == "loss-guided" and (guidance is None or len(guidance) != cloud.n):
        raise ValueError("loss-guided drop needs one guidance score per point")
    if cfg.drop_policy == "none" or cfg.drop_rate == 0 or cloud.n == 0:
        return cloud
    rng = _rng(cfg.seed, 1)
    target = int(round(cfg.drop_rate * cloud.n))
    if cfg.drop_policy == "uniform":
        keep = rng.random(cloud.n) >= cfg.drop_rate
    elif cfg.drop_policy == "beam-burst":
        keep = _burst_mask(cloud, cfg, target, rng)
    else:
        ranked = np.argsort(-np.asarray(guidance, dtype=np.float64), kind="stable")
        keep = np.ones(cloud.n, dtype=bool)
        keep[ranked[:target]] = False
    return cloud.take(keep)


def corrupt(cloud: PointCloud, cfg: CorruptConfig, guidance: Optional[np.ndarray] = None):
    """Jitter then drop."""
    return drop(jitter(cloud, cfg), cfg, guidance)
