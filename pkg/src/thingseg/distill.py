"""Clean-to-augmented feature distillation over (class, beam) groups.

Modes:

``beam-wise-things``  match per-(class, beam) mean features, things classes only
``beam-wise-all``     same over every trainable class
``beam-all-things``   collapse beams: per-class means over all beams, things only
``point-wise-things`` match each surviving augmented point with its clean source

Groups empty in either branch contribute nothing. Sums run in a canonical
order (group, then origin index) so the loss does not depend on point order.
"""

from __future__ import annotations

import numpy as np

from .errors import ConsistencyError
from .featnet import ForwardTrace
from .scanio import PointCloud
from .taxonomy import Taxonomy

BFD_MODES = ("beam-wise-things", "beam-wise-all", "point-wise-things", "beam-all-things")


def _group_keys(cloud: PointCloud, classes, use_beams=True):
    """Integer key per point (-1 outside ``classes``)."""
    member = np.isin(cloud.label, np.fromiter(classes, dtype=np.int64))
    if use_beams:
        if cloud.beam is None:
            raise ConsistencyError("distillation needs beams assigned")
        key = cloud.label * (1 << 20) + cloud.beam
    else:
        key = cloud.label.copy()
    return np.where(member, key, -1)


def _ordered_sums(values, group, order_key, n_groups):
    sums = np.zeros((n_groups, values.shape[1]))
    sel = np.flatnonzero(group >= 0)
    sel = sel[np.lexsort((order_key[sel], group[sel]))]
    np.add.at(sums, group[sel], values[sel])
    counts = np.bincount(group[sel], minlength=n_groups)
    return sums, counts


def beam_class_means(features, cloud: PointCloud, classes, use_beams=True) -> dict:
    """``{(class, beam): (mean feature, count)}`` over nonempty groups.

    With ``use_beams=False`` keys are ``(class, None)``.
    """
    features = getattr(features, "feat", features)
    key = _group_keys(cloud, classes, use_beams)
    uniq, inv = np.unique(key, return_inverse=True)
    inv = inv.reshape(-1)
    group = np.where(key >= 0, inv, -1)
    sums, counts = _ordered_sums(features, group, cloud.origin_index, len(uniq))
    out = {}
    for g, k in enumerate(uniq):
        if k < 0:
            continue
        c = int(k >> 20) if use_beams else int(k)
        b = int(k & ((1 << 20) - 1)) if use_beams else None
        out[(c, b)] = (sums[g] / counts[g], int(counts[g]))
    return out


def source_positions(cloud_clean: PointCloud, cloud_aug: PointCloud) -> np.ndarray:
    """Row of the clean cloud that each augmented point came from."""
    src = cloud_clean.origin_index
    pos = np.searchsorted(src, cloud_aug.origin_index)
    bad = (pos >= len(src)) | (cloud_aug.origin_index < 0)
    if np.any(bad) or np.any(src[np.minimum(pos, len(src) - 1)] != cloud_aug.origin_index):
        raise ConsistencyError("augmented origin_index does not point into the clean cloud")
    return pos


def bfd_loss_arrays(feat_clean, cloud_clean, feat_aug, cloud_aug, tax: Taxonomy,
                    mode="beam-wise-things", freeze_clean=False):
    if mode not in BFD_MODES:
        raise ValueError(f"unknown distillation mode {mode!r}")
    if len(feat_clean) != cloud_clean.n or len(feat_aug) != cloud_aug.n:
        raise ValueError("features and clouds disagree on point count")
    pos = source_positions(cloud_clean, cloud_aug)
    classes = tax.train_ids if mode == "beam-wise-all" else tax.things_classes()
    d_clean = np.zeros_like(feat_clean)
    d_aug = np.zeros_like(feat_aug)
    if not classes:
        return 0.0, d_clean, d_aug

    if mode == "point-wise-things":
        sel = np.flatnonzero(np.isin(cloud_aug.label, classes))
        sel = sel[np.argsort(cloud_aug.origin_index[sel], kind="stable")]
        diff = feat_clean[pos[sel]] - feat_aug[sel]
        loss = float(np.sum(np.sum(diff ** 2, axis=1)))
        d_clean[pos[sel]] = 2 * diff
        d_aug[sel] = -2 * diff
    else:
        use_beams = mode != "beam-all-things"
        kc = _group_keys(cloud_clean, classes, use_beams)
        ka = _group_keys(cloud_aug, classes, use_beams)
        uniq, inv = np.unique(np.concatenate([kc, ka]), return_inverse=True)
        inv = inv.reshape(-1)
        gc = np.where(kc >= 0, inv[: len(kc)], -1)
        ga = np.where(ka >= 0, inv[len(kc):], -1)
        sc, nc = _ordered_sums(feat_clean, gc, cloud_clean.origin_index, len(uniq))
        sa, na = _ordered_sums(feat_aug, ga, cloud_aug.origin_index, len(uniq))
        active = (nc > 0) & (na > 0)
        diff = np.where(active[:, None],
                        sc / np.maximum(nc, 1)[:, None] - sa / np.maximum(na, 1)[:, None], 0.0)
        loss = float(np.sum(np.sum(diff ** 2, axis=1)))
        rc, ra = gc >= 0, ga >= 0
        d_clean[rc] = 2 * diff[gc[rc]] / np.maximum(nc, 1)[gc[rc], None]
        d_aug[ra] = -2 * diff[ga[ra]] / np.maximum(na, 1)[ga[ra], None]
    if freeze_clean:
        d_clean[:] = 0.0
    return loss, d_clean, d_aug


def bfd_loss(trace_clean: ForwardTrace, cloud_clean: PointCloud, trace_aug: ForwardTrace,
             cloud_aug: PointCloud, tax: Taxonomy, mode="beam-wise-things", freeze_clean=False):
    """Returns ``(loss, dL/dF clean, dL/dF augmented)``."""
    return bfd_loss_arrays(trace_clean.feat, cloud_clean, trace_aug.feat, cloud_aug, tax,
                           mode, freeze_clean)
