"""Scan/label files in the KITTI velodyne layout, and ray-cast toy scenes.

Scan files hold little-endian float32 ``(x, y, z, intensity)`` quadruples.
Label files hold one little-endian uint32 per point; the semantic id lives in
the low 16 bits.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._toml import load_toml
from .errors import ConfigError, ConsistencyError, DataError, FormatError

UNLABELED = 0

_SCAN_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("<u4")


class WriteError(DataError):
    pass


class SceneWarning(UserWarning):
    pass


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Per-point arrays of one scan. Arrays are read-only after construction."""

    xyz: np.ndarray
    intensity: np.ndarray
    label: np.ndarray
    beam: Optional[np.ndarray] = None
    origin_index: Optional[np.ndarray] = None

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float32).reshape(-1, 3)
        n = len(xyz)
        intensity = np.asarray(self.intensity, dtype=np.float32).reshape(-1)
        label = np.asarray(self.label, dtype=np.int64).reshape(-1)
        origin = (np.arange(n, dtype=np.int64) if self.origin_index is None
                  else np.asarray(self.origin_index, dtype=np.int64).reshape(-1))
        beam = None if self.beam is None else np.asarray(self.beam, dtype=np.int64).reshape(-1)
        for name, arr in (("intensity", intensity), ("label", label),
                          ("origin_index", origin), ("beam", beam)):
            if arr is not None and len(arr) != n:
                raise ConsistencyError(f"{name} has {len(arr)} entries, expected {n}")
        if n and label.min() < 0:
            raise ConsistencyError("negative label id")
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "intensity", _frozen(intensity))
        object.__setattr__(self, "label", _frozen(label))
        object.__setattr__(self, "origin_index", _frozen(origin))
        object.__setattr__(self, "beam", None if beam is None else _frozen(beam))

    def __len__(self):
        return len(self.xyz)

    @property
    def n(self) -> int:
        return len(self.xyz)

    def replace(self, **changes) -> "PointCloud":
        return dataclasses.replace(self, **changes)

    def take(self, index) -> "PointCloud":
        """Sub-cloud at ``index`` (bool mask or integer positions)."""
        return PointCloud(
            xyz=self.xyz[index],
            intensity=self.intensity[index],
            label=self.label[index],
            beam=None if self.beam is None else self.beam[index],
            origin_index=self.origin_index[index],
        )

    def equals(self, other: "PointCloud") -> bool:
        """Bit-exact equality of every field."""
        if (self.beam is None) != (other.beam is None):
            return False
        pairs = [(self.xyz, other.xyz), (self.intensity, other.intensity),
                 (self.label, other.label), (self.origin_index, other.origin_index)]
        if self.beam is not None:
            pairs.append((self.beam, other.beam))
        return all(a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
                   for a, b in pairs)


def empty_cloud() -> PointCloud:
    return PointCloud(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))


def read_scan(path, label_path=None) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of 16")
    data = np.frombuffer(raw, dtype=_SCAN_DTYPE).reshape(-1, 4)
    n = len(data)
    if label_path is None:
        label = np.full(n, UNLABELED, dtype=np.int64)
    else:
        lraw = Path(label_path).read_bytes()
        if len(lraw) % 4:
            raise FormatError(f"{label_path}: {len(lraw)} bytes is not a multiple of 4")
        words = np.frombuffer(lraw, dtype=_LABEL_DTYPE)
        if len(words) != n:
            raise ConsistencyError(
                f"{label_path} has {len(words)} labels but {path} has {n} points")
        label = (words & 0xFFFF).astype(np.int64)
    return PointCloud(xyz=data[:, :3], intensity=data[:, 3], label=label)


def write_scan(cloud: PointCloud, path, label_path=None) -> None:
    buf = np.empty((cloud.n, 4), dtype=_SCAN_DTYPE)
    buf[:, :3] = cloud.xyz
    buf[:, 3] = cloud.intensity
    if label_path is not None and cloud.n and cloud.label.max() > 0xFFFF:
        raise ValueError("label ids must fit in 16 bits")
    try:
        Path(path).write_bytes(buf.tobytes())
        if label_path is not None:
            Path(label_path).write_bytes(cloud.label.astype(_LABEL_DTYPE).tobytes())
    except OSError as exc:
        raise WriteError(f"cannot write scan: {exc}") from exc


# --------------------------------------------------------------------------
# Synthetic scenes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Shape:
    """A solid object. ``size`` is (length, width, height) for boxes,
    (radius, height) for vertical cylinders and (radius,) for spheres.
    ``center`` is the geometric center; ``yaw`` is in degrees."""

    kind: str
    class_id: int
    center: tuple
    size: tuple
    yaw: float = 0.0


@dataclass(frozen=True)
class Surface:
    """Background surface.

    ``plane``: horizontal plane at ``height``.
    ``strip``: the same plane restricted to ``lo <= coord < hi`` along ``axis``.
    ``ring``: vertical cylinder wall of ``radius`` around the sensor, seen from
    inside, spanning ``z_min..z_max``.
    """

    kind: str
    class_id: int
    height: float = 0.0
    axis: str = "y"
    lo: float = -np.inf
    hi: float = np.inf
    radius: float = 0.0
    z_min: float = -np.inf
    z_max: float = np.inf


@dataclass(frozen=True)
class Template:
    """Randomly placed object family; instances rest on the ground plane."""

    kind: str
    class_id: int
    size: tuple
    count: tuple = (1, 1)
    x: tuple = (5.0, 30.0)
    y: tuple = (-10.0, 10.0)
    yaw: tuple = (0.0, 360.0)
    clearance: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    pitch_deg: tuple
    objects: tuple = ()
    surfaces: tuple = ()
    templates: tuple = ()
    seed: int = 0
    azimuth_min: float = -180.0
    azimuth_max: float = 180.0
    azimuth_step: float = 0.5
    sensor_height: float = 1.73
    max_range: float = 80.0
    range_noise: float = 0.0
    intensity: dict = field(default_factory=dict)  # class id -> (mean, std)

    def __post_init__(self):
        pitch = tuple(float(p) for p in self.pitch_deg)
        object.__setattr__(self, "pitch_deg", pitch)
        if not pitch:
            raise ConfigError("scene needs at least one beam")
        if any(b <= a for a, b in zip(pitch, pitch[1:])):
            raise ConfigError("beam pitch angles must be strictly increasing")
        if self.azimuth_step <= 0 or self.azimuth_max <= self.azimuth_min:
            raise ConfigError("invalid azimuth grid")

    @property
    def n_beams(self) -> int:
        return len(self.pitch_deg)

    @property
    def n_columns(self) -> int:
        return int(round((self.azimuth_max - self.azimuth_min) / self.azimuth_step))

    def class_ids(self) -> set:
        ids = {o.class_id for o in self.objects} | {s.class_id for s in self.surfaces}
        return ids | {t.class_id for t in self.templates}

    def ray_directions(self):
        """Unit directions for every (beam, column) ray, beam-major."""
        pitch = np.deg2rad(np.asarray(self.pitch_deg))
        az = np.deg2rad(self.azimuth_min + self.azimuth_step * np.arange(self.n_columns))
        p, a = np.meshgrid(pitch, az, indexing="ij")
        d = np.stack([np.cos(p) * np.cos(a), np.cos(p) * np.sin(a), np.sin(p)], axis=-1)
        beam = np.repeat(np.arange(self.n_beams), self.n_columns)
        return d.reshape(-1, 3), beam


_EPS = 1e-9


def _ray_box(d, shape):
    c = np.asarray(shape.center, dtype=float)
    half = np.asarray(shape.size, dtype=float) / 2.0
    yaw = np.deg2rad(shape.yaw)
    cs, sn = np.cos(yaw), np.sin(yaw)
    # rotate into the box frame (inverse yaw)
    o = -c
    o_l = np.array([cs * o[0] + sn * o[1], -sn * o[0] + cs * o[1], o[2]])
    d_l = np.stack([cs * d[:, 0] + sn * d[:, 1], -sn * d[:, 0] + cs * d[:, 1], d[:, 2]], axis=1)
    tmin = np.full(len(d), -np.inf)
    tmax = np.full(len(d), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(3):
            dk = d_l[:, k]
            t1 = (-half[k] - o_l[k]) / dk
            t2 = (half[k] - o_l[k]) / dk
            lo, hi = np.minimum(t1, t2), np.maximum(t1, t2)
            parallel = dk == 0
            inside = abs(o_l[k]) <= half[k]
            lo = np.where(parallel, -np.inf if inside else np.inf, lo)
            hi = np.where(parallel, np.inf if inside else -np.inf, hi)
            tmin = np.maximum(tmin, lo)
            tmax = np.minimum(tmax, hi)
    hit = (tmax >= tmin) & (tmin > _EPS)
    return np.where(hit, tmin, np.inf)


def _ray_cylinder(d, shape):
    cx, cy, cz = (float(v) for v in shape.center)
    r, h = float(shape.size[0]), float(shape.size[1])
    z0, z1 = cz - h / 2, cz + h / 2
    ox, oy = -cx, -cy
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (ox * d[:, 0] + oy * d[:, 1])
    c = ox * ox + oy * oy - r * r
    disc = b * b - 4 * a * c
    best = np.full(len(d), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, 0.0))
        for root in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = root * d[:, 2]
            ok = (disc >= 0) & (a > 0) & (root > _EPS) & (z >= z0) & (z <= z1)
            best = np.where(ok & (root < best), root, best)
        for zc in (z0, z1):
            t = zc / d[:, 2]
            px, py = t * d[:, 0] - cx, t * d[:, 1] - cy
            ok = (d[:, 2] != 0) & (t > _EPS) & (px * px + py * py <= r * r)
            best = np.where(ok & (t < best), t, best)
    return best


def _ray_sphere(d, shape):
    c = np.asarray(shape.center, dtype=float)
    r = float(shape.size[0])
    b = -2 * d @ c
    cc = c @ c - r * r
    disc = b * b - 4 * cc
    sq = np.sqrt(np.where(disc >= 0, disc, 0.0))
    best = np.full(len(d), np.inf)
    for root in ((-b + sq) / 2, (-b - sq) / 2):
        ok = (disc >= 0) & (root > _EPS)
        best = np.where(ok & (root < best), root, best)
    return best


def _ray_surface(d, s):
    with np.errstate(divide="ignore", invalid="ignore"):
        if s.kind in ("plane", "strip"):
            t = s.height / d[:, 2]
            ok = (d[:, 2] != 0) & (t > _EPS)
            if s.kind == "strip":
                axis = "xyz".index(s.axis)
                coord = t * d[:, axis]
                ok &= (coord >= s.lo) & (coord < s.hi)
            return np.where(ok, t, np.inf)
        if s.kind == "ring":
            rho = np.hypot(d[:, 0], d[:, 1])
            t = s.radius / rho
            z = t * d[:, 2]
            ok = (rho > 0) & (z >= s.z_min) & (z <= s.z_max)
            return np.where(ok, t, np.inf)
    raise ConfigError(f"unknown surface kind {s.kind!r}")


_SHAPES = {"box": _ray_box, "cylinder": _ray_cylinder, "sphere": _ray_sphere}


def _place_templates(spec: SceneSpec, rng) -> list:
    placed = []
    ground_z = -spec.sensor_height
    for t in spec.templates:
        n = int(rng.integers(t.count[0], t.count[1] + 1))
        for _ in range(n):
            x = rng.uniform(*t.x)
            y = rng.uniform(*t.y)
            yaw = rng.uniform(*t.yaw)
            height = t.size[-1] if t.kind != "sphere" else 2 * t.size[0]
            z = ground_z + t.clearance + height / 2
            placed.append(Shape(t.kind, t.class_id, (x, y, z), tuple(t.size), yaw))
    return placed


def cast_rays(spec: SceneSpec, shapes: Sequence[Shape]):
    """Nearest hit per ray: ``(t, primitive index)``; ``t`` is inf on a miss.

    Primitives are ordered as ``shapes`` then ``spec.surfaces``; exact ties go
    to the earlier primitive.
    """
    d, beam = spec.ray_directions()
    cols = []
    for s in shapes:
        if s.kind not in _SHAPES:
            raise ConfigError(f"unknown shape kind {s.kind!r}")
        cols.append(_SHAPES[s.kind](d, s))
    cols.extend(_ray_surface(d, s) for s in spec.surfaces)
    if not cols:
        return d, beam, np.full(len(d), np.inf), np.zeros(len(d), dtype=np.int64)
    t_all = np.stack(cols, axis=1)
    which = np.argmin(t_all, axis=1)
    t = t_all[np.arange(len(d)), which]
    t = np.where(t <= spec.max_range, t, np.inf)
    return d, beam, t, which


def synth_scene(spec: SceneSpec) -> PointCloud:
    """Ray-cast ``spec`` from a sensor at the origin; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    shapes = list(spec.objects) + _place_templates(spec, rng)
    d, beam, t, which = cast_rays(spec, shapes)
    hit = np.isfinite(t)
    class_of = np.array([s.class_id for s in shapes] + [s.class_id for s in spec.surfaces],
                        dtype=np.int64)
    for k, s in enumerate(shapes):
        if not np.any(hit & (which == k)):
            warnings.warn(f"object {k} ({s.kind}, class {s.class_id}) is not hit by any beam",
                          SceneWarning, stacklevel=2)
    d, beam, t, which = d[hit], beam[hit], t[hit], which[hit]
    label = class_of[which] if len(which) else np.zeros(0, dtype=np.int64)
    if spec.range_noise > 0:
        t = t + rng.normal(0.0, spec.range_noise, size=len(t))
    mean = np.full(len(label), 0.5)
    std = np.full(len(label), 0.05)
    for cid, (m, s) in spec.intensity.items():
        mean[label == cid] = m
        std[label == cid] = s
    intensity = np.clip(mean + std * rng.standard_normal(len(label)), 0.0, 1.0)
    return PointCloud(xyz=d * t[:, None], intensity=intensity, label=label, beam=beam)


# --------------------------------------------------------------------------
# TOML scene documents
# --------------------------------------------------------------------------

def _class_ref(value, taxonomy):
    if isinstance(value, str):
        if taxonomy is None:
            raise ConfigError(f"class name {value!r} needs a taxonomy")
        return taxonomy.class_id(value)
    return int(value)


def scene_spec_from_dict(doc: dict, taxonomy=None) -> SceneSpec:
    try:
        pitch = doc["pitch_deg"]
        if isinstance(pitch, dict):
            pitch = np.linspace(pitch["min"], pitch["max"], int(doc["n_beams"])).tolist()
        if "n_beams" in doc and int(doc["n_beams"]) != len(pitch):
            raise ConfigError(f"n_beams={doc['n_beams']} but {len(pitch)} pitch angles given")
        az = doc.get("azimuth", {})
        objects = tuple(
            Shape(o["shape"], _class_ref(o["class"], taxonomy), tuple(o["center"]),
                  tuple(o["size"]), float(o.get("yaw", 0.0)))
            for o in doc.get("object", []))
        surfaces = []
        for s in doc.get("surface", []):
            s = dict(s)
            cid = _class_ref(s.pop("class"), taxonomy)
            kind = s.pop("kind")
            surfaces.append(Surface(kind, cid, **{k: (float(v) if k != "axis" else v)
                                                  for k, v in s.items()}))
        templates = tuple(
            Template(t["shape"], _class_ref(t["class"], taxonomy), tuple(t["size"]),
                     tuple(t.get("count", (1, 1))), tuple(t.get("x", (5.0, 30.0))),
                     tuple(t.get("y", (-10.0, 10.0))), tuple(t.get("yaw", (0.0, 360.0))),
                     float(t.get("clearance", 0.0)))
            for t in doc.get("template", []))
        intensity = {_class_ref(k if not k.isdigit() else int(k), taxonomy): tuple(v)
                     for k, v in doc.get("intensity", {}).items()}
        spec = SceneSpec(
            pitch_deg=tuple(pitch), objects=objects, surfaces=tuple(surfaces),
            templates=templates, seed=int(doc.get("seed", 0)),
            azimuth_min=float(az.get("min", -180.0)), azimuth_max=float(az.get("max", 180.0)),
            azimuth_step=float(az.get("step", 0.5)),
            sensor_height=float(doc.get("sensor_height", 1.73)),
            max_range=float(doc.get("max_range", 80.0)),
            range_noise=float(doc.get("range_noise", 0.0)), intensity=intensity)
    except KeyError as exc:
        raise ConfigError(f"scene spec is missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed scene spec: {exc}") from exc
    if taxonomy is not None:
        unknown = spec.class_ids() - set(taxonomy.class_ids)
        if unknown:
            raise ConfigError(f"scene references unknown class ids {sorted(unknown)}")
    return spec


def load_scene_spec(path, taxonomy=None) -> SceneSpec:
    return scene_spec_from_dict(load_toml(path), taxonomy)
