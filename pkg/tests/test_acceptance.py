"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (see the ``acceptance`` fixture); the lines
are repeated in the terminal summary under "acceptance criteria".
"""

import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from thingseg.beams import BeamConfig, assign_beams
from thingseg.corrupt import CorruptConfig, corrupt
from thingseg.distill import BFD_MODES, beam_class_means, bfd_loss, bfd_loss_arrays
from thingseg.evaluation import aggregate_matrix, evaluate, predict
from thingseg.experiment import load_manifest
from thingseg.featnet import NetConfig, backward, forward, init_params
from thingseg.prototypes import (PrototypeBank, fb_loss, fb_loss_arrays, fb_targets,
                                 superclass_prototype, update_bank_arrays)
from thingseg.scanio import PointCloud, SceneSpec, Surface, read_scan, synth_scene, write_scan
from thingseg.taxonomy import load_taxonomy
from thingseg.trainer import LossWeights, TrainConfig, cross_entropy, losses_and_grads, train

from conftest import random_cloud
from gradcheck import numeric_grad, rel_error

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
TAX = load_taxonomy("toy")
FB_CHECKED = ("superclass", "classwise", "coarse")


def small_instance(seed):
    """Clean/corrupted pair, a tiny network (D <= 8) and a filled bank."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(16, 33))
    clean = random_cloud(rng, n, n_beams=3)
    aug = corrupt(clean, CorruptConfig(jitter_sigma=0.1, jitter_fraction=1.0,
                                       drop_policy="uniform", drop_rate=0.3, seed=seed))
    net = NetConfig(n_classes=7, hidden=6, feat_dim=int(rng.integers(3, 9)), proj_dim=3,
                    proj_hidden=4, n_beams=3)
    params = init_params(net, seed)
    bank = PrototypeBank(rng.normal(size=(7, 3)), np.ones(7, dtype=bool), 0.9)
    return rng, clean, aug, params, bank


def component_losses(clean, aug, bank):
    """name -> (loss(params), analytic gradient(params))."""
    y_clean, y_aug = TAX.train_index(clean.label), TAX.train_index(aug.label)

    def ce(cloud, y):
        def value(q):
            return cross_entropy(forward(q, cloud).logits, y)[0]

        def grad(q):
            t = forward(q, cloud)
            return backward(q, t, d_logits=cross_entropy(t.logits, y)[1])
        return value, grad

    def fb(variant):
        def value(q):
            return fb_loss(bank, TAX, forward(q, aug), aug, variant)[0]

        def grad(q):
            t = forward(q, aug)
            return backward(q, t, d_proj=fb_loss(bank, TAX, t, aug, variant)[1])
        return value, grad

    def bfd(mode):
        def value(q):
            return bfd_loss(forward(q, clean), clean, forward(q, aug), aug, TAX, mode)[0]

        def grad(q):
            tc, ta = forward(q, clean), forward(q, aug)
            _, dc, da = bfd_loss(tc, clean, ta, aug, TAX, mode)
            gc, ga = backward(q, tc, d_feat=dc), backward(q, ta, d_feat=da)
            return {k: gc[k] + ga[k] for k in gc}
        return value, grad

    cfg = TrainConfig(weights=LossWeights(0.5, 0.5, 0.1), beams=BeamConfig(3, "passthrough"))

    def total_value(q):
        return losses_and_grads(q, bank, [clean], [aug], TAX, cfg, update_bank=False)[0].total

    def total_grad(q):
        return losses_and_grads(q, bank, [clean], [aug], TAX, cfg, update_bank=False)[1]

    out = {"clean": ce(clean, y_clean), "aug": ce(aug, y_aug), "total": (total_value, total_grad)}
    out.update({f"fb/{v}": fb(v) for v in FB_CHECKED})
    out.update({f"bfd/{m}": bfd(m) for m in BFD_MODES})
    return out


def test_c01_gradient_suite(acceptance):
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        _, clean, aug, params, bank = small_instance(seed)
        for name, (value, grad) in component_losses(clean, aug, bank).items():
            err = rel_error(grad(params), numeric_grad(value, params), params.names())
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = all(e < 1e-4 for e in worst.values()) and elapsed < 60
    acceptance(1, ok, f"{len(worst)} losses x 20 instances, worst rel err {worst[top]:.1e} "
                      f"({top}), {elapsed:.1f}s")


# -- criterion 2: brute-force oracles ------------------------------------------

def naive_group_means(feat, cloud, classes):
    sums, counts = {}, {}
    for i in range(cloud.n):
        c = int(cloud.label[i])
        if c in classes:
            key = (c, int(cloud.beam[i]))
            sums[key] = sums.get(key, 0.0) + feat[i]
            counts[key] = counts.get(key, 0) + 1
    return {k: (sums[k] / counts[k], counts[k]) for k in sums}


def naive_bfd(fc, clean, fa, aug, classes):
    mc, ma = naive_group_means(fc, clean, classes), naive_group_means(fa, aug, classes)
    return sum(float(np.sum((mc[k][0] - ma[k][0]) ** 2)) for k in mc if k in ma)


def naive_superclass(bank, s):
    members = TAX.superclasses[s].members
    acc = np.zeros(bank.prototypes.shape[1])
    for c in members:
        acc = acc + bank.prototypes[TAX.train_ids.index(c)]
    return acc / len(members)


def naive_confusion(clouds, preds, k):
    m = np.zeros((k, k), dtype=np.int64)
    for cloud, pred in zip(clouds, preds):
        for lab, p in zip(cloud.label, pred):
            if lab not in TAX.ignore:
                m[TAX.train_ids.index(int(lab)), p] += 1
    return m


def naive_aggregate(m, level):
    if level == "superclass":
        group = [TAX.superclass_of(c) for c in TAX.train_ids]
        g = len(TAX.superclasses)
    else:
        group = [0 if TAX.category_of(c) == "things" else 1 for c in TAX.train_ids]
        g = 2
    out = np.zeros((g, g), dtype=np.int64)
    for i in range(len(m)):
        for j in range(len(m)):
            out[group[i], group[j]] += m[i, j]
    return out


def test_c02_oracle_equivalence(acceptance):
    things = set(TAX.things_classes())
    failures = []
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        clean = random_cloud(rng, int(rng.integers(0, 60)), labelled=False, n_beams=4)
        aug = corrupt(clean, CorruptConfig(drop_rate=0.4, seed=seed))
        fc, fa = rng.normal(size=(clean.n, 5)), rng.normal(size=(aug.n, 5))

        got = beam_class_means(fc, clean, things)
        want = naive_group_means(fc, clean, things)
        if got.keys() != want.keys() or any(
                got[k][1] != want[k][1] or np.max(np.abs(got[k][0] - want[k][0])) > 1e-10
                for k in want):
            failures.append(f"beam_class_means#{seed}")

        loss = bfd_loss_arrays(fc, clean, fa, aug, TAX, "beam-wise-things")[0]
        if abs(loss - naive_bfd(fc, clean, fa, aug, things)) > 1e-10:
            failures.append(f"bfd_loss#{seed}")

        bank = PrototypeBank(rng.normal(size=(7, 4)), np.ones(7, bool))
        for s in range(len(TAX.superclasses)):
            if np.max(np.abs(superclass_prototype(bank, TAX, s) - naive_superclass(bank, s))) > 1e-10:
                failures.append(f"superclass_prototype#{seed}")

        params = init_params(NetConfig(n_classes=7, hidden=4, feat_dim=3, n_beams=4), seed)
        clouds = [random_cloud(rng, int(rng.integers(0, 30)), labelled=False, n_beams=4)
                  for _ in range(3)]
        report = evaluate(params, clouds, TAX)
        if not np.array_equal(report.confusion,
                              naive_confusion(clouds, [predict(params, c) for c in clouds], 7)):
            failures.append(f"evaluate#{seed}")

        m = rng.integers(0, 100, (7, 7))
        for level in ("superclass", "coarse"):
            if not np.array_equal(aggregate_matrix(m, TAX, level), naive_aggregate(m, level)):
                failures.append(f"aggregate_matrix/{level}#{seed}")
    acceptance(2, not failures, "5 operations x 100 instances"
               + (f", mismatches: {failures[:5]}" if failures else ", all equal"))


def test_c03_ema_law(acceptance):
    worst = 0.0
    for m in (0.0, 0.5, 0.9, 1.0):
        rng = np.random.default_rng(int(m * 10))
        mu = rng.normal(size=(7, 4))
        bank = PrototypeBank(rng.normal(size=(7, 4)), np.ones(7, bool), m)
        start = np.linalg.norm(bank.prototypes - mu, axis=1)
        for t in range(1, 51):
            # a batch whose per-class means are exactly mu
            bank = update_bank_arrays(bank, mu, np.arange(7))
            got = np.linalg.norm(bank.prototypes - mu, axis=1)
            worst = max(worst, float(np.max(np.abs(got - m ** t * start))))
    acceptance(3, worst <= 1e-9, f"m in {{0, 0.5, 0.9, 1}}, T <= 50, max deviation {worst:.1e}")


def test_c04_dropped_point_coverage(acceptance):
    beam_hits = point_hits = dropped_total = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        clean = random_cloud(rng, 600, n_beams=4)
        aug = corrupt(clean, CorruptConfig(jitter_sigma=0.05, jitter_fraction=1.0,
                                           drop_policy="uniform", drop_rate=0.5, seed=seed))
        params = init_params(NetConfig(n_classes=7, n_beams=4), seed)
        tc, ta = forward(params, clean), forward(params, aug)
        dropped = ~np.isin(clean.origin_index, aug.origin_index)
        sel = dropped & np.isin(clean.label, TAX.things_classes())
        _, dc_beam, _ = bfd_loss(tc, clean, ta, aug, TAX, "beam-wise-things")
        _, dc_point, _ = bfd_loss(tc, clean, ta, aug, TAX, "point-wise-things")
        dropped_total += int(sel.sum())
        beam_hits += int(np.sum(np.any(dc_beam[sel] != 0, axis=1)))
        point_hits += int(np.sum(np.any(dc_point[sel] != 0, axis=1)))
    ok = dropped_total > 0 and beam_hits == dropped_total and point_hits == 0
    acceptance(4, ok, f"{dropped_total} dropped things points: beam-wise "
                      f"{100 * beam_hits / dropped_total:.1f}%, point-wise "
                      f"{100 * point_hits / dropped_total:.1f}%")


def test_c05_zero_loss_identities(acceptance):
    bfd_values = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        clean = random_cloud(rng, 50, n_beams=3)
        same = corrupt(clean, CorruptConfig(jitter_sigma=0.0, drop_rate=0.0, seed=seed))
        params = init_params(NetConfig(n_classes=7, n_beams=3), seed)
        for mode in BFD_MODES:
            bfd_values.append(bfd_loss(forward(params, clean), clean, forward(params, same), same,
                                       TAX, mode)[0])
    fb_values = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for variant in ("superclass", "classwise", "coarse", "literal-eq3"):
            # arbitrary float prototypes, one point per class
            bank = PrototypeBank(rng.normal(size=(7, 3)), np.ones(7, bool))
            targets, ready = fb_targets(bank, TAX, variant)
            fb_values.append(fb_loss_arrays(targets.copy(), np.arange(7), targets, ready)[0])
            # many points per class on integer prototypes, so class means are exact
            idx = rng.integers(0, 7, 40)
            ints = PrototypeBank(np.repeat(rng.integers(-5, 5, (1, 3)), 7, axis=0).astype(float),
                                 np.ones(7, bool))
            t_int, r_int = fb_targets(ints, TAX, variant)
            fb_values.append(fb_loss_arrays(t_int[idx], idx, t_int, r_int)[0])
    ok = all(v == 0.0 for v in bfd_values) and all(v == 0.0 for v in fb_values)
    acceptance(5, ok, f"BFD max {max(bfd_values):.1e} over {len(bfd_values)} uncorrupted pairs, "
                      f"FB max {max(fb_values):.1e} over {len(fb_values)} cases")


def test_c06_parser_round_trip(acceptance, tmp_path):
    bad = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = 0 if seed == 0 else int(rng.integers(1, 300))
        # arbitrary finite float32 bit patterns, 16-bit labels
        bits = rng.integers(0, 2**32, size=(n, 4), dtype=np.uint64).astype(np.uint32)
        floats = bits.view(np.float32)
        floats = np.where(np.isfinite(floats), floats, np.float32(1.5))
        labels = rng.integers(0, 2**16, size=n).astype("<u4")
        scan_bytes, label_bytes = floats.astype("<f4").tobytes(), labels.tobytes()
        a_bin, a_lab = tmp_path / f"{seed}.bin", tmp_path / f"{seed}.label"
        a_bin.write_bytes(scan_bytes)
        a_lab.write_bytes(label_bytes)
        cloud = read_scan(a_bin, a_lab)
        b_bin, b_lab = tmp_path / f"{seed}b.bin", tmp_path / f"{seed}b.label"
        write_scan(cloud, b_bin, b_lab)
        if b_bin.read_bytes() != scan_bytes or b_lab.read_bytes() != label_bytes:
            bad.append(f"write(read)#{seed}")
        if not read_scan(b_bin, b_lab).equals(cloud):
            bad.append(f"read(write)#{seed}")
    acceptance(6, not bad, "100 scan/label pairs incl. N = 0"
               + (f", failures {bad[:5]}" if bad else ", bit-exact both ways"))


def test_c07_beam_recovery(acceptance):
    total = wrong = 0
    beams_seen = []
    for seed in range(20):
        n_beams = int(np.linspace(8, 64, 20).round()[seed])
        beams_seen.append(n_beams)
        spec = SceneSpec(pitch_deg=tuple(np.linspace(-25.0, 3.0, n_beams)), seed=seed,
                         azimuth_min=-180, azimuth_max=180, azimuth_step=4.0, range_noise=0.05,
                         surfaces=(Surface("plane", 5, height=-1.73),
                                   Surface("ring", 7, radius=35.0, z_min=-2.0, z_max=30.0)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scene = synth_scene(spec)
        got = assign_beams(scene.replace(beam=None), BeamConfig(n_beams, "sorted-cluster"))
        total += scene.n
        wrong += int(np.sum(got.beam != scene.beam))
    ok = wrong == 0
    acceptance(7, ok, f"20 seeds, {min(beams_seen)}-{max(beams_seen)} beams, "
                      f"{100 * (total - wrong) / total:.2f}% of {total} points recovered")


# -- criteria 8 and 9: paired toy experiments ---------------------------------

EXPERIMENT_SEEDS = (0, 1, 2, 3, 4)


def paired_things_miou(names, seeds=EXPERIMENT_SEEDS):
    """Train every manifest in ``names`` once per seed; things mIoU on its eval data."""
    manifests = {n: load_manifest(CONFIGS / f"{n}.toml") for n in names}
    data = {}

    def load(source, tax):
        if source not in data:
            data[source] = source.load(tax)
        return data[source]

    scores = {n: [] for n in names}
    for seed in seeds:
        for name, manifest in manifests.items():
            m = manifest.with_seed(seed)
            tax = m.load_taxonomy()
            params, _, _ = train(m.train, load(m.train_data, tax), tax)
            report = evaluate(params, load(m.eval_data, tax), tax, m.train.beams)
            scores[name].append(report.things_miou)
    return {n: np.array(v) for n, v in scores.items()}


def _fmt(values):
    return "[" + " ".join(f"{v:.3f}" for v in values) + "]"


@pytest.mark.slow
def test_c08_ntn_beats_baseline_under_corruption(acceptance):
    start = time.perf_counter()
    s = paired_things_miou(["toy_baseline", "toy_ntn"])
    elapsed = time.perf_counter() - start
    diff = s["toy_ntn"] - s["toy_baseline"]
    wins = int(np.sum(diff > 0))
    ok = wins >= 4 and diff.mean() > 0 and elapsed < 600
    acceptance(8, ok, f"things mIoU ntn {_fmt(s['toy_ntn'])} vs baseline "
                      f"{_fmt(s['toy_baseline'])}: {wins}/5 wins, mean diff {diff.mean():+.4f}, "
                      f"{elapsed:.0f}s")


@pytest.mark.slow
def test_c09_superclass_vs_classwise_prototypes(acceptance):
    s = paired_things_miou(["toy_fb_superclass", "toy_fb_classwise"])
    diff = s["toy_fb_superclass"] - s["toy_fb_classwise"]
    at_least = int(np.sum(diff >= 0))
    acceptance(9, at_least >= 3, f"things mIoU superclass {_fmt(s['toy_fb_superclass'])} vs "
                                 f"classwise {_fmt(s['toy_fb_classwise'])}: superclass >= "
                                 f"classwise in {at_least}/5 seeds, mean diff {diff.mean():+.4f}")


def _run_all_commands(root: Path):
    from thingseg.cli import main
    from thingseg.experiment import builtin_path

    scene = str(builtin_path("toy_scene.toml"))
    codes = [
        main(["synth", scene, str(root / "scans"), "--count", "3", "--seed", "11"]),
        main(["train", str(CONFIGS / "smoke.toml"), "--out", str(root / "run"), "--seed", "4",
              "--figures"]),
        main(["augment", str(root / "scans"), "--out", str(root / "aug"), "--seed", "2",
              "--drop-policy", "loss-guided", "--checkpoint", str(root / "run" / "checkpoint.json")]),
        main(["eval", str(root / "run" / "checkpoint.json"), str(root / "aug"),
              "--out", str(root / "eval"), "--matrix-level", "all", "--figures"]),
        main(["inspect", str(root / "aug"), "--json"]),
    ]
    return codes


def test_c10_determinism(acceptance, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    codes = _run_all_commands(a) + _run_all_commands(b)
    out = capsys.readouterr().out
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    differ = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    missing = [str(f) for f in files if not (b / f).exists()]
    halves = out.replace(str(a), "<root>").replace(str(b), "<root>")
    n = len(halves) // 2
    same_stdout = halves[:n] == halves[n:]
    ok = all(c == 0 for c in codes) and not differ and not missing and same_stdout
    acceptance(10, ok, f"synth/train/augment/eval/inspect twice: {len(files)} files compared, "
                       f"{len(differ)} differ" + (f" {differ}" if differ else "")
               + ("" if same_stdout else ", stdout differs"))
