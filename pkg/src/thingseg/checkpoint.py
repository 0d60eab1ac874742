"""Versioned JSON checkpoints holding network weights and the prototype bank.

Layout::

    {"format": "thingseg-checkpoint", "version": 1,
     "taxonomy": {"name": ..., "classes": [...]},
     "net": {"config": {...layer sizes...}, "weights": {name: {"shape", "data"}}},
     "bank": {"momentum", "shape", "prototypes", "seen"} | null,
     "meta": {...}}

Floats are written with ``repr`` precision, so a load/save cycle is exact and
identical runs produce identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from .errors import VersioningError
from .featnet import NetParams, params_from_dict, params_to_dict
from .prototypes import PrototypeBank
from .taxonomy import Taxonomy

FORMAT = "thingseg-checkpoint"
VERSION = 1


def dumps_checkpoint(params: NetParams, bank: Optional[PrototypeBank], tax: Taxonomy,
                     meta: Optional[dict] = None) -> str:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "taxonomy": {"name": tax.name, "classes": [tax.class_names[c] for c in tax.train_ids]},
        "net": params_to_dict(params),
        "bank": None if bank is None else bank.to_dict(),
        "meta": meta or {},
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def save_checkpoint(path, params, bank, tax, meta=None) -> None:
    Path(path).write_text(dumps_checkpoint(params, bank, tax, meta))


def load_checkpoint(path, tax: Optional[Taxonomy] = None):
    """Returns ``(params, bank, meta)``; checks class count against ``tax``."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise VersioningError(f"checkpoint not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise VersioningError(f"{path} is not a checkpoint: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise VersioningError(f"{path} is not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise VersioningError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = params_from_dict(doc["net"])
    if tax is not None:
        if params.config.n_classes != tax.n_train:
            raise VersioningError(
                f"checkpoint predicts {params.config.n_classes} classes but taxonomy "
                f"{tax.name!r} has {tax.n_train}")
        names = [tax.class_names[c] for c in tax.train_ids]
        if doc["taxonomy"]["classes"] != names:
            raise VersioningError(f"checkpoint class table differs from taxonomy {tax.name!r}")
    bank = None if doc.get("bank") is None else PrototypeBank.from_dict(doc["bank"])
    return params, bank, doc.get("meta", {})
