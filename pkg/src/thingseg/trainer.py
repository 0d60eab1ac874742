"""Dual-branch training: clean and corrupted passes, four-term objective.

Per step, for a batch of clean scans::

    assign beams -> forward clean -> CE(clean)
    -> jitter + drop (guided by clean entropy/loss) -> forward aug -> CE(aug)
    -> bank update from clean projections -> binding loss on aug projections
    -> distillation between branches -> total -> backward -> SGD

    total = clean + w_aug * aug + w_fb * fb + w_bfd * bfd

CE is the mean over labelled points of the whole batch; binding and the bank
use batch-level class means; distillation is computed per scan and averaged
over the batch.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .beams import BeamConfig, ensure_beams
from .corrupt import CorruptConfig, corrupt
from .distill import BFD_MODES, bfd_loss_arrays
from .errors import ConfigError, NumericError
from .featnet import (NetConfig, NetParams, backward, encode, forward_inputs, init_params,
                      sgd_step, softmax)
from .prototypes import (FB_VARIANTS, PrototypeBank, fb_loss_arrays, fb_targets,
                         update_bank_arrays)
from .scanio import PointCloud
from .taxonomy import Taxonomy

log = logging.getLogger(__name__)

GUIDANCE = ("entropy", "loss")


@dataclass(frozen=True)
class LossWeights:
    aug: float = 0.5
    fb: float = 0.5
    bfd: float = 0.1

    def __post_init__(self):
        for k in ("aug", "fb", "bfd"):
            if not getattr(self, k) >= 0:
                raise ConfigError(f"weights.{k} must be >= 0")


@dataclass(frozen=True)
class NetDims:
    hidden: int = 32
    feat_dim: int = 16
    proj_dim: int = 8
    proj_hidden: int = 16
    xy_scale: float = 20.0
    z_scale: float = 2.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 2
    lr: float = 0.24
    weight_decay: float = 1e-4
    seed: int = 0
    corrupt: CorruptConfig = field(default_factory=CorruptConfig)
    beams: BeamConfig = field(default_factory=BeamConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetDims = field(default_factory=NetDims)
    fb_variant: str = "superclass"
    bfd_mode: str = "beam-wise-things"
    momentum: float = 0.9
    freeze_clean: bool = False
    bank_update_first: bool = True
    guidance: str = "entropy"
    eval_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("train.lr and train.weight_decay must be >= 0")
        if self.fb_variant not in FB_VARIANTS:
            raise ConfigError(f"train.fb_variant must be one of {FB_VARIANTS}")
        if self.bfd_mode not in BFD_MODES:
            raise ConfigError(f"train.bfd_mode must be one of {BFD_MODES}")
        if not 0 <= self.momentum <= 1:
            raise ConfigError("train.momentum must be in [0, 1]")
        if self.guidance not in GUIDANCE:
            raise ConfigError(f"train.guidance must be one of {GUIDANCE}")

    def net_config(self, tax: Taxonomy) -> NetConfig:
        return NetConfig(n_classes=tax.n_train, n_beams=self.beams.n_beams,
                         **dataclasses.asdict(self.net))


@dataclass(frozen=True)
class LossBreakdown:
    clean: float
    aug: float
    fb: float
    bfd: float
    total: float

    @classmethod
    def combine(cls, clean, aug, fb, bfd, w: LossWeights) -> "LossBreakdown":
        return cls(clean, aug, fb, bfd, clean + w.aug * aug + w.fb * fb + w.bfd * bfd)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def cross_entropy(logits: np.ndarray, target: np.ndarray):
    """Mean CE over rows with ``target >= 0``; returns ``(loss, dL/dlogits)``."""
    rows = np.flatnonzero(target >= 0)
    grad = np.zeros_like(logits)
    if len(rows) == 0:
        return 0.0, grad
    z = logits[rows]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    t = target[rows]
    loss = float(-np.mean(logp[np.arange(len(rows)), t]))
    p = np.exp(logp)
    p[np.arange(len(rows)), t] -= 1.0
    grad[rows] = p / len(rows)
    return loss, grad


def point_guidance(logits: np.ndarray, target: np.ndarray, kind: str = "entropy") -> np.ndarray:
    """Per-point drop score from the clean pass: predictive entropy or CE loss."""
    p = softmax(logits)
    if kind == "entropy":
        return -np.sum(p * np.log(np.clip(p, 1e-300, None)), axis=1)
    out = np.zeros(len(logits))
    rows = target >= 0
    out[rows] = -np.log(np.clip(p[rows, target[rows]], 1e-300, None))
    return out


def _stack_inputs(clouds, config):
    if not clouds:
        return np.zeros((0, 7)), np.zeros(1, dtype=np.int64)
    xs = [encode(c, config) for c in clouds]
    bounds = np.cumsum([0] + [len(x) for x in xs])
    return np.vstack(xs), bounds


def _labels(clouds, tax):
    if not clouds:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([tax.train_index(c.label) for c in clouds])


def losses_and_grads(params: NetParams, bank: PrototypeBank, clean: Sequence[PointCloud],
                     aug: Sequence[PointCloud], tax: Taxonomy, cfg: TrainConfig,
                     update_bank: bool = True, trace_clean=None):
    """Objective and parameter gradients for fixed clean/augmented clouds.

    With ``update_bank=False`` the bank is frozen, which makes the result a
    smooth function of ``params`` (used by gradient checks).
    Returns ``(LossBreakdown, grads, bank')``.
    """
    net = params.config
    if trace_clean is None:
        x_clean, bc = _stack_inputs(clean, net)
        trace_clean = forward_inputs(params, x_clean)
    else:
        bc = np.cumsum([0] + [c.n for c in clean])
    x_aug, ba = _stack_inputs(aug, net)
    trace_aug = forward_inputs(params, x_aug)
    y_clean, y_aug = _labels(clean, tax), _labels(aug, tax)

    l_clean, dl_clean = cross_entropy(trace_clean.logits, y_clean)
    l_aug, dl_aug = cross_entropy(trace_aug.logits, y_aug)

    if update_bank and cfg.bank_update_first:
        bank = update_bank_arrays(bank, trace_clean.proj, y_clean)
    targets, ready = fb_targets(bank, tax, cfg.fb_variant)
    l_fb, dp_aug = fb_loss_arrays(trace_aug.proj, y_aug, targets, ready)
    if update_bank and not cfg.bank_update_first:
        bank = update_bank_arrays(bank, trace_clean.proj, y_clean)

    df_clean = np.zeros_like(trace_clean.feat)
    df_aug = np.zeros_like(trace_aug.feat)
    l_bfd = 0.0
    n_scans = max(len(clean), 1)
    for k, (c, a) in enumerate(zip(clean, aug)):
        loss, dc, da = bfd_loss_arrays(trace_clean.feat[bc[k]:bc[k + 1]], c,
                                       trace_aug.feat[ba[k]:ba[k + 1]], a, tax,
                                       cfg.bfd_mode, cfg.freeze_clean)
        l_bfd += loss / n_scans
        df_clean[bc[k]:bc[k + 1]] = dc / n_scans
        df_aug[ba[k]:ba[k + 1]] = da / n_scans

    w = cfg.weights
    breakdown = LossBreakdown.combine(l_clean, l_aug, l_fb, l_bfd, w)
    if not np.isfinite(breakdown.total):
        raise NumericError(f"non-finite loss: {breakdown.as_dict()}")
    g_clean = backward(params, trace_clean, d_feat=w.bfd * df_clean, d_logits=dl_clean)
    g_aug = backward(params, trace_aug, d_feat=w.bfd * df_aug, d_proj=w.fb * dp_aug,
                     d_logits=w.aug * dl_aug)
    grads = {k: g_clean[k] + g_aug[k] for k in g_clean}
    return breakdown, grads, bank


def step_seed(seed: int, epoch: int, step: int, scan: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step, scan]).generate_state(1)[0])


def make_augmented(params: NetParams, clean: Sequence[PointCloud], tax: Taxonomy,
                   cfg: TrainConfig, epoch: int = 0, step: int = 0):
    """Clean forward pass plus the corrupted branch it guides."""
    x_clean, bc = _stack_inputs(clean, params.config)
    trace = forward_inputs(params, x_clean)
    guidance = None
    if cfg.corrupt.drop_policy == "loss-guided":
        guidance = point_guidance(trace.logits, _labels(clean, tax), cfg.guidance)
    aug = []
    for k, c in enumerate(clean):
        ccfg = cfg.corrupt.with_seed(step_seed(cfg.seed, epoch, step, k))
        g = None if guidance is None else guidance[bc[k]:bc[k + 1]]
        aug.append(corrupt(c, ccfg, g))
    return trace, aug


def train_step(params: NetParams, bank: PrototypeBank, batch: Sequence[PointCloud],
               tax: Taxonomy, cfg: TrainConfig, epoch: int = 0, step: int = 0):
    """One SGD step. Returns ``(params', bank', LossBreakdown)``."""
    clean = [ensure_beams(c, cfg.beams) for c in batch]
    trace, aug = make_augmented(params, clean, tax, cfg, epoch, step)
    try:
        breakdown, grads, bank = losses_and_grads(params, bank, clean, aug, tax, cfg,
                                                  update_bank=True, trace_clean=trace)
        params = sgd_step(params, grads, cfg.lr, cfg.weight_decay)
    except NumericError as exc:
        raise NumericError(f"epoch {epoch} step {step}: {exc}") from exc
    return params, bank, breakdown


def train(cfg: TrainConfig, dataset: Sequence[PointCloud], tax: Taxonomy,
          eval_clouds: Optional[Sequence[PointCloud]] = None,
          on_epoch: Optional[Callable[[dict], None]] = None):
    """Run ``cfg.epochs`` epochs. Returns ``(params, bank, log)``.

    ``log`` holds one dict per epoch with mean loss components and, on eval
    epochs, an ``eval`` summary.
    """
    from .evaluation import evaluate

    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    net = cfg.net_config(tax)
    params = init_params(net, cfg.seed)
    bank = PrototypeBank.empty(tax.n_train, net.proj_dim, cfg.momentum)
    dataset = [ensure_beams(c, cfg.beams) for c in dataset]
    history = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        sums = np.zeros(5)
        n_steps = 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            params, bank, b = train_step(params, bank, batch, tax, cfg, epoch, step)
            sums += [b.clean, b.aug, b.fb, b.bfd, b.total]
            n_steps += 1
        entry = {"epoch": epoch, "steps": n_steps}
        entry.update(zip(("clean", "aug", "fb", "bfd", "total"), (sums / n_steps).tolist()))
        last = epoch == cfg.epochs - 1
        if eval_clouds and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            entry["eval"] = evaluate(params, eval_clouds, tax, cfg.beams).summary()
        log.info("epoch %d total %.6f", epoch, entry["total"])
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return params, bank, history
