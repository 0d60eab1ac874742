"""IoU, mIoU with a things/stuff split, and confusion matrices.

TP/FP/FN are pooled over all scans before dividing. Classes with
TP + FP + FN = 0 are left out of every mean. Points carrying an ignored
label are dropped before tallying.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .beams import BeamConfig, ensure_beams
from .errors import VersioningError
from .featnet import NetParams, forward
from .scanio import PointCloud
from .taxonomy import THINGS, Taxonomy

LEVELS = ("class", "superclass", "coarse")


def confusion_matrix(target, pred, n_classes) -> np.ndarray:
    """Rows are ground truth, columns predictions; entries with target < 0 are skipped."""
    target = np.asarray(target, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    keep = target >= 0
    flat = target[keep] * n_classes + pred[keep]
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def aggregate_matrix(class_matrix, tax: Taxonomy, level: str) -> np.ndarray:
    if level == "class":
        return np.asarray(class_matrix)
    a = tax.superclass_matrix(level)
    return a.T @ np.asarray(class_matrix, dtype=np.int64) @ a


def row_normalized(matrix) -> np.ndarray:
    """Percent of each ground-truth row; empty rows stay zero."""
    m = np.asarray(matrix, dtype=np.float64)
    rows = m.sum(axis=1, keepdims=True)
    return np.divide(100.0 * m, rows, out=np.zeros_like(m), where=rows > 0)


def iou_from_confusion(conf) -> np.ndarray:
    """Per-class IoU; NaN where TP + FP + FN = 0."""
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    return np.divide(tp, denom, out=np.full_like(tp, np.nan), where=denom > 0)


def _mean(values):
    values = [v for v in values if not np.isnan(v)]
    return float(np.mean(values)) if values else None


@dataclass(frozen=True, eq=False)
class EvalReport:
    taxonomy: Taxonomy
    confusion: np.ndarray  # class level, over trainable classes

    @property
    def iou(self) -> np.ndarray:
        return iou_from_confusion(self.confusion)

    def per_class(self) -> dict:
        names = self.taxonomy.group_names("class")
        return {n: float(v) for n, v in zip(names, self.iou) if not np.isnan(v)}

    def _subset_mean(self, category: Optional[str]):
        tax = self.taxonomy
        iou = self.iou
        return _mean([iou[i] for i, c in enumerate(tax.train_ids)
                      if category is None or tax.category_of(c) == category])

    @property
    def miou(self):
        return self._subset_mean(None)

    @property
    def things_miou(self):
        return self._subset_mean(THINGS)

    @property
    def stuff_miou(self):
        return self._subset_mean("stuff")

    def matrix(self, level: str = "class") -> np.ndarray:
        return aggregate_matrix(self.confusion, self.taxonomy, level)

    def summary(self) -> dict:
        return {"miou": self.miou, "things_miou": self.things_miou,
                "stuff_miou": self.stuff_miou, "points": int(self.confusion.sum())}

    def to_dict(self) -> dict:
        out = {"taxonomy": self.taxonomy.name, **self.summary(), "iou": self.per_class()}
        out["confusion"] = {lvl: self.matrix(lvl).tolist() for lvl in LEVELS}
        out["labels"] = {lvl: self.taxonomy.group_names(lvl) for lvl in LEVELS}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def matrix_csv(self, level: str = "class") -> str:
        names = self.taxonomy.group_names(level)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gt\\pred"] + names)
        for name, row in zip(names, self.matrix(level).tolist()):
            w.writerow([name] + row)
        return buf.getvalue()

    def table(self, method: str = "model") -> str:
        """One aligned row of per-class IoU (percent) plus mIoU, things and stuff."""
        names = self.taxonomy.group_names("class")
        iou = self.iou
        cols = [n[:7] for n in names] + ["mIoU", "things", "stuff"]
        vals = ["-" if np.isnan(v) else f"{100 * v:.1f}" for v in iou]
        for v in (self.miou, self.things_miou, self.stuff_miou):
            vals.append("-" if v is None else f"{100 * v:.1f}")
        width = max(7, len(method))
        widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        head = "Method".ljust(width) + " | " + " ".join(c.rjust(k) for c, k in zip(cols, widths))
        row = method.ljust(width) + " | " + " ".join(v.rjust(k) for v, k in zip(vals, widths))
        return head + "\n" + row + "\n"


def predict(params: NetParams, cloud: PointCloud) -> np.ndarray:
    """Trainable-class index per point; argmax ties go to the lowest index."""
    return np.argmax(forward(params, cloud).logits, axis=1)


def evaluate(params: NetParams, clouds: Sequence[PointCloud], tax: Taxonomy,
             beam_cfg: Optional[BeamConfig] = None) -> EvalReport:
    if len(clouds) == 0:
        raise ValueError("evaluation needs at least one scan")
    if params.config.n_classes != tax.n_train:
        raise VersioningError(
            f"network predicts {params.config.n_classes} classes, taxonomy "
            f"{tax.name!r} has {tax.n_train}")
    beam_cfg = beam_cfg or BeamConfig()
    conf = np.zeros((tax.n_train, tax.n_train), dtype=np.int64)
    for cloud in clouds:
        cloud = ensure_beams(cloud, beam_cfg)
        conf += confusion_matrix(tax.train_index(cloud.label), predict(params, cloud),
                                 tax.n_train)
    return EvalReport(tax, conf)
