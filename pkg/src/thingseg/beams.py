"""Beam index assignment for clouds without ring ids.

Two estimators work on the pitch angle ``atan2(z, hypot(x, y))``:
equal-width binning over a fixed pitch range, and 1-D k-means over the
observed pitches. ``passthrough`` keeps beams that are already present
(synthetic scenes record the generating beam).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .scanio import PointCloud

METHODS = ("uniform-pitch", "sorted-cluster", "passthrough")


@dataclass(frozen=True)
class BeamConfig:
    n_beams: int = 64
    method: str = "sorted-cluster"
    pitch_min: float = -25.0  # degrees, uniform-pitch only
    pitch_max: float = 3.0
    max_iter: int = 100

    def __post_init__(self):
        if self.n_beams < 1:
            raise ConfigError("beams.n_beams must be >= 1")
        if self.method not in METHODS:
            raise ConfigError(f"beams.method must be one of {METHODS}")
        if self.method == "uniform-pitch" and not self.pitch_min < self.pitch_max:
            raise ConfigError("beams.pitch_min must be below beams.pitch_max")


def pitch_of(xyz) -> np.ndarray:
    """Pitch angle in radians."""
    xyz = np.asarray(xyz, dtype=np.float64)
    return np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1]))


def uniform_pitch_bins(pitch_rad, n_beams, pitch_min_deg, pitch_max_deg) -> np.ndarray:
    lo, hi = np.deg2rad(pitch_min_deg), np.deg2rad(pitch_max_deg)
    width = (hi - lo) / n_beams
    idx = np.floor((pitch_rad - lo) / width).astype(np.int64)
    return np.clip(idx, 0, n_beams - 1)


def kmeans_1d(values, k, max_iter=100):
    """Lloyd's k-means on a line.

    Initialisation is farthest-point starting from the minimum value, so the
    result does not depend on input order. Points equidistant from two centers
    go to the lower one. Returns ``(assignment, centers)`` with centers sorted
    ascending and cluster 0 the lowest.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    uniq = np.unique(x)
    centers = [uniq[0]]
    dist = np.abs(uniq - uniq[0])
    while len(centers) < k and dist.max() > 0:
        j = int(np.argmax(dist))  # first maximum on ties
        centers.append(uniq[j])
        dist = np.minimum(dist, np.abs(uniq - uniq[j]))
    centers = np.sort(np.array(centers))
    for _ in range(max_iter):
        mids = (centers[:-1] + centers[1:]) / 2
        assign = np.searchsorted(mids, x, side="left")
        sums = np.bincount(assign, weights=x, minlength=len(centers))
        counts = np.bincount(assign, minlength=len(centers))
        new = np.where(counts > 0, sums / np.maximum(counts, 1), centers)
        new = np.sort(new)
        if np.array_equal(new, centers):
            break
        centers = new
    mids = (centers[:-1] + centers[1:]) / 2
    order = np.argsort(np.asarray(values, dtype=np.float64), kind="stable")
    assign_sorted = np.searchsorted(mids, x, side="left")
    out = np.empty(len(x), dtype=np.int64)
    out[order] = assign_sorted
    return out, centers


def assign_beams(cloud: PointCloud, cfg: BeamConfig) -> PointCloud:
    if cfg.method == "passthrough":
        if cloud.beam is None:
            raise ConfigError("passthrough beam assignment needs a cloud with beams")
        return cloud
    if cloud.n == 0:
        return cloud.replace(beam=np.zeros(0, dtype=np.int64))
    xyz = np.asarray(cloud.xyz, dtype=np.float64)
    if not np.any(xyz):
        raise DegenerateInputError("all points are at the sensor origin; pitch is undefined")
    pitch = pitch_of(xyz)
    if cfg.method == "uniform-pitch":
        beam = uniform_pitch_bins(pitch, cfg.n_beams, cfg.pitch_min, cfg.pitch_max)
    else:
        beam, _ = kmeans_1d(pitch, cfg.n_beams, cfg.max_iter)
    return cloud.replace(beam=beam)


def ensure_beams(cloud: PointCloud, cfg: BeamConfig) -> PointCloud:
    """Keep beams that are already present, otherwise assign them."""
    if cloud.beam is not None:
        return cloud
    return assign_beams(cloud, cfg)
