"""Prototype memory bank and the feature-binding loss.

The bank keeps one EMA prototype per trainable class in projector space,
filled from the clean branch. Binding pulls the batch mean projection of each
augmented class toward a target built from those prototypes: the class's own
prototype (``classwise``), the mean over its superclass (``superclass``), the
mean over its things/stuff half (``coarse``), or the mean over all superclass
prototypes (``literal-eq3``, one shared target for every class).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import NotReadyError
from .featnet import ForwardTrace
from .scanio import PointCloud
from .taxonomy import THINGS, Taxonomy

FB_VARIANTS = ("superclass", "classwise", "coarse", "literal-eq3")


@dataclass(frozen=True, eq=False)
class PrototypeBank:
    prototypes: np.ndarray  # (n_train, proj_dim)
    seen: np.ndarray        # (n_train,) bool
    momentum: float = 0.9

    @classmethod
    def empty(cls, n_train: int, proj_dim: int, momentum: float = 0.9) -> "PrototypeBank":
        return cls(np.zeros((n_train, proj_dim)), np.zeros(n_train, dtype=bool), momentum)

    def to_dict(self) -> dict:
        return {"momentum": self.momentum, "shape": list(self.prototypes.shape),
                "prototypes": self.prototypes.ravel().tolist(),
                "seen": self.seen.astype(int).tolist()}

    @classmethod
    def from_dict(cls, doc) -> "PrototypeBank":
        protos = np.asarray(doc["prototypes"], dtype=np.float64).reshape(doc["shape"])
        return cls(protos, np.asarray(doc["seen"], dtype=bool), float(doc["momentum"]))


def class_means(values: np.ndarray, class_index: np.ndarray, n_classes: int):
    """Per-class mean rows of ``values``; rows with index -1 are skipped.

    Returns ``(means, counts)``; classes without rows get a zero mean.
    """
    keep = class_index >= 0
    sums = np.zeros((n_classes, values.shape[1]))
    np.add.at(sums, class_index[keep], values[keep])
    counts = np.bincount(class_index[keep], minlength=n_classes)
    means = sums / np.maximum(counts, 1)[:, None]
    return means, counts


def update_bank(bank: PrototypeBank, trace_clean: ForwardTrace, cloud_clean: PointCloud,
                tax: Taxonomy) -> PrototypeBank:
    if trace_clean.n != cloud_clean.n:
        raise ValueError("trace and cloud disagree on point count")
    if trace_clean.proj.shape[1] != bank.prototypes.shape[1]:
        raise ValueError("projection width does not match the bank")
    return update_bank_arrays(bank, trace_clean.proj, tax.train_index(cloud_clean.label))


def update_bank_arrays(bank: PrototypeBank, proj, class_index) -> PrototypeBank:
    means, counts = class_means(proj, class_index, len(bank.seen))
    present = counts > 0
    m = bank.momentum
    blended = np.where(bank.seen[:, None], m * bank.prototypes + (1 - m) * means, means)
    protos = np.where(present[:, None], blended, bank.prototypes)
    return dataclasses.replace(bank, prototypes=protos, seen=bank.seen | present)


def superclass_prototype(bank: PrototypeBank, tax: Taxonomy, s: int) -> np.ndarray:
    members = [tax.train_index([c])[0] for c in tax.superclasses[s].members]
    return _group_mean(bank, members, tax.superclasses[s].name)


def _group_mean(bank, members, name):
    if not all(bank.seen[i] for i in members):
        raise NotReadyError(f"prototype group {name!r} has unseen members")
    return np.sum(bank.prototypes[members], axis=0) / len(members)


def fb_targets(bank: PrototypeBank, tax: Taxonomy, variant: str = "superclass"):
    """Target per trainable class and a mask of classes whose target is ready."""
    if variant not in FB_VARIANTS:
        raise ValueError(f"unknown feature-binding variant {variant!r}")
    k = tax.n_train
    targets = np.zeros_like(bank.prototypes)
    ready = np.zeros(k, dtype=bool)
    if variant == "classwise":
        return bank.prototypes.copy(), bank.seen.copy()
    if variant == "superclass":
        groups = [[tax.train_index([c])[0] for c in s.members] for s in tax.superclasses]
        owner = [tax.superclass_of(c) for c in tax.train_ids]
    elif variant == "coarse":
        things = set(tax.things_classes())
        groups = [[i for i, c in enumerate(tax.train_ids) if c in things],
                  [i for i, c in enumerate(tax.train_ids) if c not in things]]
        owner = [0 if tax.category_of(c) == THINGS else 1 for c in tax.train_ids]
    else:  # literal-eq3
        try:
            protos = [superclass_prototype(bank, tax, s) for s in range(len(tax.superclasses))]
        except NotReadyError:
            return targets, ready
        shared = np.sum(protos, axis=0) / len(protos)
        return np.tile(shared, (k, 1)), np.ones(k, dtype=bool)
    for g, members in enumerate(groups):
        if not members:
            continue
        try:
            mean = _group_mean(bank, members, str(g))
        except NotReadyError:
            continue
        for i in range(k):
            if owner[i] == g:
                targets[i] = mean
                ready[i] = True
    return targets, ready


def fb_loss_arrays(proj, class_index, targets, ready):
    means, counts = class_means(proj, class_index, len(ready))
    active = (counts > 0) & ready
    diff = np.where(active[:, None], means - targets, 0.0)
    loss = float(np.sum(diff ** 2))
    d_proj = np.zeros_like(proj)
    rows = class_index >= 0
    scale = 2.0 / np.maximum(counts, 1)
    d_proj[rows] = diff[class_index[rows]] * scale[class_index[rows], None]
    return loss, d_proj


def fb_loss(bank: PrototypeBank, tax: Taxonomy, trace_aug: ForwardTrace, cloud_aug: PointCloud,
            variant: str = "superclass"):
    """Binding loss on augmented projections and its cotangent ``dL/dG(F(x))``.

    Prototypes are constants here: nothing flows back into the bank.
    """
    if trace_aug.n != cloud_aug.n:
        raise ValueError("trace and cloud disagree on point count")
    targets, ready = fb_targets(bank, tax, variant)
    return fb_loss_arrays(trace_aug.proj, tax.train_index(cloud_aug.label), targets, ready)
