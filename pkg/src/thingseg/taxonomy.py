"""Class table, superclass grouping and the things/stuff split.

Groupings are data: presets ship as TOML files next to this module and any
other grouping can be loaded from a file of the same shape::

    classes = ["unlabeled", "car", "road", ...]   # list position = class id
    ignore = ["unlabeled"]

    [[superclass]]
    name = "Vehicle"
    category = "things"          # or "stuff"
    members = ["car", ...]

An optional ``[category]`` table (class name -> things/stuff) is checked
against the owning superclass, and an optional ``[raw_labels]`` table maps
on-disk label ids to class names.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ._toml import load_toml, loads_toml
from .errors import ConfigError, TaxonomyLookupError, ValidationError

THINGS = "things"
STUFF = "stuff"
PRESETS = ("semantickitti-ntn", "semanticposs-ntn", "coarse", "toy", "toy4")


@dataclass(frozen=True)
class Superclass:
    name: str
    category: str
    members: tuple  # class ids


@dataclass(frozen=True, eq=False)
class Taxonomy:
    name: str
    class_names: tuple
    superclasses: tuple
    ignore: frozenset
    raw_labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self._validate()
        train_ids = tuple(i for i in range(len(self.class_names)) if i not in self.ignore)
        owner = {}
        for s_idx, s in enumerate(self.superclasses):
            for c in s.members:
                owner[c] = s_idx
        object.__setattr__(self, "train_ids", train_ids)
        object.__setattr__(self, "_owner", owner)
        lut = np.full(len(self.class_names), -1, dtype=np.int64)
        lut[list(train_ids)] = np.arange(len(train_ids))
        object.__setattr__(self, "_train_lut", lut)

    def _validate(self):
        n = len(self.class_names)
        if len(set(self.class_names)) != n:
            raise ValidationError("duplicate class names")
        seen = {}
        for s in self.superclasses:
            if s.category not in (THINGS, STUFF):
                raise ValidationError(f"superclass {s.name!r}: category must be things or stuff")
            if not s.members:
                raise ValidationError(f"superclass {s.name!r} has no members")
            for c in s.members:
                if not 0 <= c < n:
                    raise ValidationError(f"superclass {s.name!r}: unknown class id {c}")
                if c in self.ignore:
                    raise ValidationError(
                        f"superclass {s.name!r} contains ignored class {self.class_names[c]!r}")
                if c in seen:
                    raise ValidationError(
                        f"class {self.class_names[c]!r} is in both {seen[c]!r} and {s.name!r}")
                seen[c] = s.name
        missing = [self.class_names[c] for c in range(n) if c not in self.ignore and c not in seen]
        if missing:
            raise ValidationError(f"classes without a superclass: {missing}")

    # -- lookups ---------------------------------------------------------
    @property
    def class_ids(self) -> tuple:
        return tuple(range(len(self.class_names)))

    @property
    def n_train(self) -> int:
        return len(self.train_ids)

    def class_id(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise TaxonomyLookupError(f"unknown class {name!r}") from None

    def _check(self, class_id):
        if not 0 <= class_id < len(self.class_names):
            raise TaxonomyLookupError(f"unknown class id {class_id}")
        if class_id in self.ignore:
            raise TaxonomyLookupError(f"class id {class_id} is ignored")

    def superclass_of(self, class_id: int) -> int:
        self._check(class_id)
        return self._owner[class_id]

    def category_of(self, class_id: int) -> str:
        return self.superclasses[self.superclass_of(class_id)].category

    def things_classes(self) -> tuple:
        return tuple(c for c in self.train_ids if self.category_of(c) == THINGS)

    def stuff_classes(self) -> tuple:
        return tuple(c for c in self.train_ids if self.category_of(c) == STUFF)

    def train_index(self, labels) -> np.ndarray:
        """Map class ids to contiguous 0..n_train-1; ignored ids map to -1."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise TaxonomyLookupError("label ids outside the class table")
        return self._train_lut[labels]

    def superclass_matrix(self, level: str = "superclass") -> np.ndarray:
        """0/1 membership matrix (n_train x n_groups) for ``superclass`` or ``coarse``."""
        if level == "superclass":
            groups = [self.superclass_of(c) for c in self.train_ids]
            n_groups = len(self.superclasses)
        elif level == "coarse":
            groups = [0 if self.category_of(c) == THINGS else 1 for c in self.train_ids]
            n_groups = 2
        else:
            raise ValueError(f"unknown aggregation level {level!r}")
        m = np.zeros((self.n_train, n_groups), dtype=np.int64)
        m[np.arange(self.n_train), groups] = 1
        return m

    def group_names(self, level: str) -> list:
        if level == "class":
            return [self.class_names[c] for c in self.train_ids]
        if level == "superclass":
            return [s.name for s in self.superclasses]
        if level == "coarse":
            return [THINGS, STUFF]
        raise ValueError(f"unknown level {level!r}")

    def remap_raw(self, labels) -> np.ndarray:
        """Translate on-disk label ids via ``raw_labels``; unknown ids become ignored."""
        if not self.raw_labels:
            return np.asarray(labels, dtype=np.int64)
        fallback = min(self.ignore) if self.ignore else 0
        size = max(max(self.raw_labels) + 1, int(np.max(labels, initial=0)) + 1)
        lut = np.full(size, fallback, dtype=np.int64)
        for raw, cid in self.raw_labels.items():
            lut[raw] = cid
        return lut[np.asarray(labels, dtype=np.int64)]


def taxonomy_from_dict(doc: dict) -> Taxonomy:
    try:
        names = tuple(doc["classes"])
        index = {n: i for i, n in enumerate(names)}

        def ids(members, where):
            out = []
            for m in members:
                if m not in index:
                    raise ValidationError(f"{where}: unknown class {m!r}")
                out.append(index[m])
            return tuple(out)

        ignore = frozenset(ids(doc.get("ignore", []), "ignore"))
        supers = tuple(
            Superclass(s["name"], s["category"], ids(s["members"], s["name"]))
            for s in doc["superclass"])
        raw = {int(k): index[v] for k, v in doc.get("raw_labels", {}).items()}
    except KeyError as exc:
        raise ConfigError(f"taxonomy is missing {exc.args[0]!r}") from exc
    tax = Taxonomy(doc.get("name", "custom"), names, supers, ignore, raw)
    for cname, cat in doc.get("category", {}).items():
        cid = ids([cname], "category")[0]
        if cid in ignore:
            continue
        owner = tax.superclasses[tax.superclass_of(cid)]
        if cat != owner.category:
            raise ValidationError(
                f"superclass {owner.name!r} mixes things and stuff ({cname!r} is {cat})")
    return tax


def load_taxonomy(path_or_preset) -> Taxonomy:
    """Load a taxonomy from a TOML file or by preset name."""
    if str(path_or_preset) in PRESETS:
        text = resources.files("thingseg.presets").joinpath(f"{path_or_preset}.toml").read_text()
        return taxonomy_from_dict(loads_toml(text))
    path = Path(path_or_preset)
    if not path.exists():
        raise ConfigError(f"no taxonomy file or preset named {str(path_or_preset)!r}")
    return taxonomy_from_dict(load_toml(path))
