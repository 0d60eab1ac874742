"""Experiment manifests: one TOML file describing data, model and training.

Schema (every table optional except the data source for training)::

    seed = 0                      # training / init seed
    taxonomy = "toy"              # preset name or path
    output_dir = "runs/toy"       # relative paths resolve against the manifest

    [train_data]                  # either a scene spec ...
    scene = "builtin:toy_scene.toml"   # packaged scene, or a path
    count = 200
    seed_base = 0
    # ... or scan files (labels next to them with a .label suffix)
    # scans = ["000000.bin", ...]   or   scan_dir = "velodyne"
    # remap_labels = false          # translate raw ids through the taxonomy

    [eval_data]                   # same keys, plus an optional corruption
    [eval_data.corrupt]           # CorruptConfig fields + seed_base

    [train]    TrainConfig scalars (epochs, batch_size, lr, ...)
    [weights]  aug, fb, bfd
    [corrupt]  CorruptConfig fields used for the augmented branch
    [beams]    BeamConfig fields
    [net]      hidden, feat_dim, proj_dim, proj_hidden, xy_scale, z_scale

Unknown keys are rejected with a ConfigError naming the offending field.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from ._toml import load_toml
from .beams import BeamConfig
from .checkpoint import dumps_checkpoint
from .corrupt import CorruptConfig, corrupt
from .errors import ConfigError, DataError
from .evaluation import evaluate
from .scanio import SceneSpec, load_scene_spec, read_scan, synth_scene
from .taxonomy import PRESETS, Taxonomy, load_taxonomy
from .trainer import LossWeights, NetDims, TrainConfig, train

_TRAIN_SCALARS = ("epochs", "batch_size", "lr", "weight_decay", "fb_variant", "bfd_mode",
                  "momentum", "freeze_clean", "bank_update_first", "guidance", "eval_every")
_DATA_KEYS = ("scene", "count", "seed_base", "scans", "scan_dir", "remap_labels", "corrupt")
_TOP_KEYS = ("seed", "taxonomy", "output_dir", "train_data", "eval_data", "train", "weights",
             "corrupt", "beams", "net")


def _check_keys(table: dict, allowed, where: str):
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown field {where}{key!r}")


def _build(cls, table: dict, where: str, allowed=None):
    allowed = allowed or [f.name for f in dataclasses.fields(cls)]
    _check_keys(table, allowed, where)
    try:
        return cls(**table)
    except TypeError as exc:
        raise ConfigError(f"bad value in [{where.rstrip('.')}]: {exc}") from exc


@dataclass(frozen=True)
class DataSource:
    """Where scans come from: a generated scene corpus or files on disk."""

    scene: Optional[Path] = None
    count: int = 0
    seed_base: int = 0
    scans: tuple = ()
    remap_labels: bool = False
    corrupt: Optional[CorruptConfig] = None
    corrupt_seed_base: int = 0

    def load(self, tax: Taxonomy) -> list:
        if self.scene is not None:
            spec = load_scene_spec(self.scene, tax)
            clouds = generate_corpus(spec, self.count, self.seed_base)
        else:
            clouds = [read_labeled(p, tax, self.remap_labels) for p in self.scans]
        if self.corrupt is not None:
            clouds = [corrupt(c, self.corrupt.with_seed(self.corrupt_seed_base + i))
                      for i, c in enumerate(clouds)]
        return clouds


def generate_corpus(spec: SceneSpec, count: int, seed_base: int = 0) -> list:
    """``count`` scenes drawn with seeds ``seed_base, seed_base + 1, ...``."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return [synth_scene(dataclasses.replace(spec, seed=seed_base + i)) for i in range(count)]


def label_path_for(scan_path) -> Path:
    return Path(scan_path).with_suffix(".label")


def read_labeled(path, tax: Taxonomy, remap: bool = False):
    path = Path(path)
    label = label_path_for(path)
    if not label.exists():
        raise DataError(f"no label file next to {path} (expected {label.name})")
    cloud = read_scan(path, label)
    if remap:
        cloud = cloud.replace(label=tax.remap_raw(cloud.label))
    return cloud


def expand_scan_paths(paths) -> list:
    """Files stay as given; directories expand to their sorted ``*.bin`` files."""
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(p.glob("*.bin")))
        elif p.exists():
            out.append(p)
        else:
            raise DataError(f"scan path does not exist: {p}")
    return out


@dataclass(frozen=True)
class ExperimentManifest:
    path: Path
    seed: int
    taxonomy: str
    output_dir: Path
    train_data: DataSource
    eval_data: Optional[DataSource]
    train: TrainConfig
    raw: dict = field(repr=False, default_factory=dict)

    def load_taxonomy(self) -> Taxonomy:
        return load_taxonomy(self.taxonomy)

    def with_seed(self, seed: int) -> "ExperimentManifest":
        return dataclasses.replace(self, seed=seed,
                                   train=dataclasses.replace(self.train, seed=seed))


BUILTIN = "builtin:"


def builtin_path(name: str) -> Path:
    """Filesystem path of a scene file shipped in ``thingseg/data``."""
    return Path(str(resources.files("thingseg.data").joinpath(name)))


def _resolve(base: Path, value) -> Path:
    if str(value).startswith(BUILTIN):
        return builtin_path(str(value)[len(BUILTIN):])
    p = Path(value)
    return p if p.is_absolute() else base / p


def _data_source(table: dict, base: Path, where: str) -> DataSource:
    _check_keys(table, _DATA_KEYS, f"{where}.")
    sources = [k for k in ("scene", "scans", "scan_dir") if k in table]
    if len(sources) != 1:
        raise ConfigError(f"[{where}] needs exactly one of scene, scans, scan_dir")
    kw = {"remap_labels": bool(table.get("remap_labels", False))}
    if "scene" in table:
        kw["scene"] = _resolve(base, table["scene"])
        if not kw["scene"].exists():
            raise ConfigError(f"{where}.scene: file not found: {kw['scene']}")
        kw["count"] = int(table.get("count", 1))
        kw["seed_base"] = int(table.get("seed_base", 0))
        if kw["count"] < 0:
            raise ConfigError(f"{where}.count must be >= 0")
    else:
        if "count" in table or "seed_base" in table:
            raise ConfigError(f"{where}: count/seed_base only apply to scene sources")
        raw = table.get("scans") or [table["scan_dir"]]
        try:
            kw["scans"] = tuple(expand_scan_paths(_resolve(base, p) for p in raw))
        except DataError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    if "corrupt" in table:
        c = dict(table["corrupt"])
        kw["corrupt_seed_base"] = int(c.pop("seed_base", 0))
        allowed = [f.name for f in dataclasses.fields(CorruptConfig) if f.name != "seed"]
        kw["corrupt"] = _build(CorruptConfig, c, f"{where}.corrupt.", allowed)
    return DataSource(**kw)


def manifest_from_dict(doc: dict, base: Path = Path("."), path: Path = Path("<memory>")):
    _check_keys(doc, _TOP_KEYS, "")
    if "train_data" not in doc:
        raise ConfigError("manifest needs a [train_data] table")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    tax = str(doc.get("taxonomy", "toy"))
    if tax not in PRESETS:
        tax = str(_resolve(base, tax))
        if not Path(tax).exists():
            raise ConfigError(f"taxonomy: file not found: {tax}")
    train_tbl = dict(doc.get("train", {}))
    _check_keys(train_tbl, _TRAIN_SCALARS, "train.")
    corrupt_tbl = dict(doc.get("corrupt", {}))
    if "seed" in corrupt_tbl:
        raise ConfigError("unknown field corrupt.'seed' (corruption seeds derive from the run seed)")
    cfg = _build(TrainConfig, dict(
        train_tbl, seed=seed,
        corrupt=_build(CorruptConfig, corrupt_tbl, "corrupt."),
        beams=_build(BeamConfig, dict(doc.get("beams", {})), "beams."),
        weights=_build(LossWeights, dict(doc.get("weights", {})), "weights."),
        net=_build(NetDims, dict(doc.get("net", {})), "net.")), "train.",
        allowed=list(_TRAIN_SCALARS) + ["seed", "corrupt", "beams", "weights", "net"])
    return ExperimentManifest(
        path=path, seed=seed, taxonomy=tax,
        output_dir=_resolve(base, doc.get("output_dir", "run")),
        train_data=_data_source(doc["train_data"], base, "train_data"),
        eval_data=(_data_source(doc["eval_data"], base, "eval_data")
                   if "eval_data" in doc else None),
        train=cfg, raw=doc)


def load_manifest(path) -> ExperimentManifest:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    return manifest_from_dict(load_toml(path), path.parent, path)


@dataclass
class RunResult:
    params: object
    bank: object
    log: list
    report: object  # EvalReport or None
    files: dict


def run_experiment(manifest: ExperimentManifest, output_dir: Optional[Path] = None) -> RunResult:
    """Train per the manifest and write the run directory.

    Files: ``checkpoint.json``, ``train_log.jsonl``, ``manifest.toml`` (copy)
    and, with eval data, ``report.json``.
    """
    tax = manifest.load_taxonomy()
    train_set = manifest.train_data.load(tax)
    eval_set = manifest.eval_data.load(tax) if manifest.eval_data else None
    cfg = manifest.train
    params, bank, log = train(cfg, train_set, tax, eval_clouds=eval_set)
    report = evaluate(params, eval_set, tax, cfg.beams) if eval_set else None

    out = Path(output_dir or manifest.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = {"checkpoint": out / "checkpoint.json", "log": out / "train_log.jsonl",
                 "manifest": out / "manifest.toml"}
        meta = {"seed": cfg.seed, "beams": dataclasses.asdict(cfg.beams),
                "train": {k: getattr(cfg, k) for k in _TRAIN_SCALARS},
                "weights": dataclasses.asdict(cfg.weights)}
        files["checkpoint"].write_text(dumps_checkpoint(params, bank, tax, meta))
        files["log"].write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in log))
        if manifest.path.exists():
            files["manifest"].write_bytes(manifest.path.read_bytes())
        else:
            del files["manifest"]
        if report is not None:
            files["report"] = out / "report.json"
            files["report"].write_text(report.to_json())
    except OSError as exc:
        raise DataError(f"cannot write run directory {out}: {exc}") from exc
    return RunResult(params, bank, log, report, files)
