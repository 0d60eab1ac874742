"""Command-line entry point: synth | augment | train | eval | inspect.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .beams import METHODS as BEAM_METHODS, BeamConfig, ensure_beams
from .checkpoint import load_checkpoint
from .corrupt import DROP_POLICIES, CorruptConfig, corrupt
from .errors import ConfigError, DataError, ThingsegError
from .evaluation import LEVELS, evaluate
from .experiment import (expand_scan_paths, generate_corpus, label_path_for, load_manifest,
                         read_labeled, run_experiment)
from .featnet import forward
from .scanio import load_scene_spec, write_scan
from .taxonomy import THINGS, load_taxonomy
from .trainer import point_guidance

def _out_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _seed(args, default: int) -> int:
    return default if args.seed is None else args.seed


# -- synth ---------------------------------------------------------------

def cmd_synth(args) -> int:
    tax = load_taxonomy(args.taxonomy)
    spec = load_scene_spec(args.scene, tax)
    seed = _seed(args, args.seed_base)
    out = _out_dir(args.out)
    clouds = generate_corpus(spec, args.count, seed)
    for i, cloud in enumerate(clouds):
        name = f"{i:06d}"
        write_scan(cloud, out / f"{name}.bin", out / f"{name}.label")
    print(f"synth: wrote {len(clouds)} scans to {out} (seed {seed})")
    return 0


# -- augment -------------------------------------------------------------

def cmd_augment(args) -> int:
    tax = load_taxonomy(args.taxonomy)
    seed = _seed(args, 0)
    cfg = CorruptConfig(jitter_sigma=args.sigma, jitter_fraction=args.fraction,
                        drop_policy=args.drop_policy, drop_rate=args.drop_rate,
                        burst_span=args.burst_span)
    params = None
    if cfg.drop_policy == "loss-guided":
        if args.checkpoint is None:
            raise ConfigError("--drop-policy loss-guided needs --checkpoint for guidance")
        params, _, _ = load_checkpoint(args.checkpoint, tax)
    beam_cfg = BeamConfig(n_beams=args.beams, method=args.beam_method)
    out = _out_dir(args.out)
    paths = expand_scan_paths(args.scans)
    for i, path in enumerate(paths):
        cloud = read_labeled(path, tax)
        guidance = None
        if params is not None:
            cloud = ensure_beams(cloud, beam_cfg)
            guidance = point_guidance(forward(params, cloud).logits,
                                      tax.train_index(cloud.label), args.guidance)
        aug = corrupt(cloud, cfg.with_seed(seed + i), guidance)
        write_scan(aug, out / path.name, out / label_path_for(path).name)
        print(f"augment: {path.name} {cloud.n} -> {aug.n} points")
    print(f"augment: wrote {len(paths)} scans to {out} (seed {seed})")
    return 0


# -- train ---------------------------------------------------------------

def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.seed is not None:
        manifest = manifest.with_seed(args.seed)
    result = run_experiment(manifest, args.out)
    last = result.log[-1]
    print(f"train: seed {manifest.seed}, {len(result.log)} epochs, "
          f"final total loss {last['total']:.6f}")
    if "eval" in last:
        ev = last["eval"]
        print(f"train: eval mIoU {_pct(ev['miou'])} things {_pct(ev['things_miou'])} "
              f"stuff {_pct(ev['stuff_miou'])}")
    if args.figures:
        from .plotting import save_loss_curve
        result.files["loss_curve"] = save_loss_curve(
            result.log, result.files["checkpoint"].parent / "loss_curve.png")
    for kind, path in result.files.items():
        print(f"train: {kind} -> {path}")
    return 0


def _pct(v) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


# -- eval ----------------------------------------------------------------

def cmd_eval(args) -> int:
    tax = load_taxonomy(args.taxonomy)
    params, _, meta = load_checkpoint(args.checkpoint, tax)
    beam_cfg = BeamConfig(**meta["beams"]) if "beams" in meta else BeamConfig()
    if args.beam_method is not None:
        beam_cfg = dataclasses.replace(beam_cfg, method=args.beam_method)
    clouds = [read_labeled(p, tax, args.remap_labels) for p in expand_scan_paths(args.scans)]
    if not clouds:
        raise DataError("no scans to evaluate")
    seed = _seed(args, meta.get("seed", 0))
    report = evaluate(params, clouds, tax, beam_cfg)
    out = _out_dir(args.out)
    (out / "report.json").write_text(report.to_json())
    levels = LEVELS if args.matrix_level == "all" else (args.matrix_level,)
    for level in levels:
        (out / f"confusion_{level}.csv").write_text(report.matrix_csv(level))
    if args.figures:
        from .plotting import save_confusion_figure
        for level in levels:
            save_confusion_figure(report, level, out / f"confusion_{level}.png")
    print(report.table(args.method), end="")
    print(f"eval: seed {seed}, {len(clouds)} scans, {report.confusion.sum()} points, "
          f"mIoU {_pct(report.miou)}")
    print(f"eval: wrote {out / 'report.json'}")
    return 0


# -- inspect -------------------------------------------------------------

def inspect_clouds(clouds, tax, beam_cfg: BeamConfig) -> dict:
    """Beam histogram and per-class point fractions over a corpus."""
    hist = np.zeros(beam_cfg.n_beams, dtype=np.int64)
    counts = np.zeros(len(tax.class_names), dtype=np.int64)
    for cloud in clouds:
        cloud = ensure_beams(cloud, beam_cfg)
        hist += np.bincount(cloud.beam, minlength=beam_cfg.n_beams)[:beam_cfg.n_beams]
        counts += np.bincount(cloud.label, minlength=len(counts))[:len(counts)]
    total = int(counts.sum())
    labelled = int(sum(counts[c] for c in tax.train_ids))
    things = int(sum(counts[c] for c in tax.train_ids if tax.category_of(c) == THINGS))
    return {
        "scans": len(clouds), "points": total,
        "beam_histogram": hist.tolist(),
        "class_fraction": {tax.class_names[c]: (counts[c] / total if total else 0.0)
                           for c in tax.class_ids},
        "things_fraction": things / labelled if labelled else 0.0,
    }


def cmd_inspect(args) -> int:
    tax = load_taxonomy(args.taxonomy)
    beam_cfg = BeamConfig(n_beams=args.beams, method=args.beam_method)
    clouds = [read_labeled(p, tax, args.remap_labels) for p in expand_scan_paths(args.scans)]
    info = inspect_clouds(clouds, tax, beam_cfg)
    seed = _seed(args, 0)
    if args.json:
        print(json.dumps({"seed": seed, **info}, sort_keys=True))
        return 0
    print(f"inspect: seed {seed}, {info['scans']} scans, {info['points']} points")
    print("class fractions:")
    for name, frac in info["class_fraction"].items():
        print(f"  {name:<16} {100 * frac:6.2f}%")
    print(f"things: {100 * info['things_fraction']:.1f}% of labelled points")
    print("beam histogram:")
    for b, n in enumerate(info["beam_histogram"]):
        print(f"  {b:3d} {n}")
    return 0


# -- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override the seed used by the command")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="thingseg", parents=[common],
                                description="Things-aware LiDAR segmentation lab.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate labelled toy scans")
    s.add_argument("scene", help="scene spec TOML")
    s.add_argument("out", help="output directory")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed-base", type=int, default=0)
    s.add_argument("--taxonomy", default="toy")
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("augment", parents=[common], help="write corrupted copies of scans")
    a.add_argument("scans", nargs="+", help="scan files or directories")
    a.add_argument("--out", required=True)
    a.add_argument("--taxonomy", default="toy")
    a.add_argument("--sigma", type=float, default=0.05)
    a.add_argument("--fraction", type=float, default=0.5)
    a.add_argument("--drop-policy", choices=DROP_POLICIES, default="uniform")
    a.add_argument("--drop-rate", type=float, default=0.3)
    a.add_argument("--burst-span", type=int, default=8)
    a.add_argument("--checkpoint", help="network whose clean pass guides loss-guided drop")
    a.add_argument("--guidance", choices=("entropy", "loss"), default="entropy")
    a.add_argument("--beams", type=int, default=64)
    a.add_argument("--beam-method", choices=BEAM_METHODS, default="sorted-cluster")
    a.set_defaults(func=cmd_augment)

    t = sub.add_parser("train", parents=[common], help="train from an experiment manifest")
    t.add_argument("manifest")
    t.add_argument("--out", help="run directory (default: manifest output_dir)")
    t.add_argument("--figures", action="store_true", help="also plot the loss curve")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on scans")
    e.add_argument("checkpoint")
    e.add_argument("scans", nargs="+")
    e.add_argument("--taxonomy", default="toy")
    e.add_argument("--out", default="eval")
    e.add_argument("--matrix-level", choices=LEVELS + ("all",), default="class")
    e.add_argument("--figures", action="store_true", help="also render confusion heatmaps")
    e.add_argument("--method", default="model", help="row label in the printed table")
    e.add_argument("--beam-method", choices=BEAM_METHODS)
    e.add_argument("--remap-labels", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", parents=[common], help="corpus statistics")
    i.add_argument("scans", nargs="+")
    i.add_argument("--taxonomy", default="toy")
    i.add_argument("--beams", type=int, default=64)
    i.add_argument("--beam-method", choices=BEAM_METHODS, default="sorted-cluster")
    i.add_argument("--remap-labels", action="store_true")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.seed = getattr(args, "seed", None)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ThingsegError as exc:
        print(f"thingseg {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"thingseg {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
