"""Synthetic multi-domain data, splitting, augmentation and table I/O.

A domain is a set of class-conditional Gaussian clusters around shared class
prototypes, pushed through one of four shift families:

``style``       rotation of each consecutive coordinate pair by ``magnitude`` radians
``background``  translation by ``magnitude`` along a fixed unit direction
``corruption``  extra isotropic Gaussian noise with std ``magnitude``
``texture``     per-feature scaling ``x_j * (1 + magnitude * s_j)``, ``s_j`` in [-1, 1]

Prototypes, the background direction and texture scales depend only on
``prototype_seed`` (shared by every domain of a benchmark); sample noise
depends only on ``seed``. Zero magnitude returns the canonical samples
untouched, so two zero-shift domains with the same seed are identical.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .rng import derive_rng

SHIFT_FAMILIES = ("style", "background", "corruption", "texture")


class DataError(ValueError):
    pass


class TableError(DataError):
    """Malformed delimited dataset file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    num_classes: int = 7
    examples_per_class: int = 60
    shift_family: str = "style"
    shift_magnitude: float = 0.0
    seed: int = 0
    feature_dim: int = 16
    class_separation: float = 4.0
    noise_std: float = 1.0
    prototype_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.examples_per_class < 1:
            raise DataError(f"examples_per_class must be positive, got {self.examples_per_class}")
        if self.feature_dim < 1:
            raise DataError(f"feature_dim must be positive, got {self.feature_dim}")
        if self.shift_family not in SHIFT_FAMILIES:
            raise DataError(f"unknown shift family {self.shift_family!r}; expected one of {SHIFT_FAMILIES}")
        if self.noise_std < 0:
            raise DataError(f"noise_std must be non-negative, got {self.noise_std}")


@dataclass(frozen=True)
class DomainData:
    """All examples of one domain. ``y == -1`` marks an unknown label."""

    domain_id: str
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.y)

    def subset(self, idx: np.ndarray) -> "DomainData":
        idx = np.asarray(idx, dtype=np.int64)
        return DomainData(self.domain_id, self.x[idx], self.y[idx], self.num_classes)

    def same_as(self, other: "DomainData") -> bool:
        return (self.domain_id == other.domain_id and self.num_classes == other.num_classes
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y))


@dataclass(frozen=True)
class LabelledSet:
    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray  # domain id per row

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True)
class UnlabelledSet:
    """Unlabelled examples. Ground truth is kept for evaluation only.

    Training code reads ``x``, ``domain`` and ``ids``; the ground truth is
    reachable only through :func:`upldg.metrics.reveal_labels`.
    """

    x: np.ndarray
    domain: np.ndarray
    _truth: np.ndarray = field(repr=False)
    ids: np.ndarray | None = None

    def __post_init__(self):
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(len(self.x), dtype=np.int64))

    def __len__(self):
        return len(self.x)


@dataclass(frozen=True)
class DomainDataset:
    domain_id: str
    labelled: LabelledSet
    unlabelled: UnlabelledSet
    num_classes: int


@dataclass(frozen=True)
class AugmentationConfig:
    weak_noise_sigma: float = 0.1
    strong_noise_sigma: float = 0.5
    strong_mask_count: int = 2

    def __post_init__(self):
        if self.weak_noise_sigma < 0 or self.strong_noise_sigma < 0:
            raise DataError("noise sigmas must be non-negative")
        if self.strong_noise_sigma < self.weak_noise_sigma:
            raise DataError("strong_noise_sigma must be >= weak_noise_sigma")
        if self.strong_mask_count < 0:
            raise DataError("strong_mask_count must be >= 0")


def class_prototypes(num_classes: int, dim: int, separation: float, prototype_seed: int) -> np.ndarray:
    """Random unit directions scaled to ``separation``, one per class."""
    rng = derive_rng(prototype_seed, "prototypes", num_classes, dim)
    raw = rng.normal(size=(num_classes, dim))
    return separation * raw / np.linalg.norm(raw, axis=1, keepdims=True)


def rotate_pairs(x: np.ndarray, angle: float) -> np.ndarray:
    """Rotate coordinates (0,1), (2,3), ... by ``angle``; an odd last coordinate is kept."""
    out = x.copy()
    c, s = math.cos(angle), math.sin(angle)
    n_pairs = x.shape[1] // 2
    a = x[:, 0:2 * n_pairs:2]
    b = x[:, 1:2 * n_pairs:2]
    out[:, 0:2 * n_pairs:2] = c * a - s * b
    out[:, 1:2 * n_pairs:2] = s * a + c * b
    return out


def apply_shift(x: np.ndarray, family: str, magnitude: float, *, seed: int, prototype_seed: int) -> np.ndarray:
    if magnitude == 0.0:
        return x
    dim = x.shape[1]
    if family == "style":
        return rotate_pairs(x, magnitude)
    if family == "background":
        direction = derive_rng(prototype_seed, "background", dim).normal(size=dim)
        return x + magnitude * direction / np.linalg.norm(direction)
    if family == "corruption":
        return x + magnitude * derive_rng(seed, "corruption").normal(size=x.shape)
    if family == "texture":
        scales = derive_rng(prototype_seed, "texture", dim).uniform(-1.0, 1.0, size=dim)
        return x * (1.0 + magnitude * scales)
    raise DataError(f"unknown shift family {family!r}")


def generate_domain(spec: DomainSpec) -> DomainData:
    """Draw one fully-labelled domain; rows are shuffled, deterministic in ``spec``."""
    protos = class_prototypes(spec.num_classes, spec.feature_dim, spec.class_separation, spec.prototype_seed)
    rng = derive_rng(spec.seed, "samples")
    y = np.repeat(np.arange(spec.num_classes), spec.examples_per_class)
    y = y[rng.permutation(len(y))]
    x = protos[y] + spec.noise_std * rng.normal(size=(len(y), spec.feature_dim))
    x = apply_shift(x, spec.shift_family, spec.shift_magnitude, seed=spec.seed, prototype_seed=spec.prototype_seed)
    return DomainData(spec.domain_id, x, y.astype(np.int64), spec.num_classes)


def _allocate(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of ``total`` proportional to ``counts``."""
    exact = counts * total / counts.sum()
    base = np.floor(exact).astype(np.int64)
    rem = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rem]] += 1
    return np.minimum(base, counts)


def train_val_split(data: DomainData, fraction: float = 0.9, seed: int = 0) -> tuple[DomainData, DomainData]:
    """Stratified split into ``round(fraction * n)`` training and the rest validation rows."""
    if len(data) == 0:
        raise DataError(f"cannot split empty domain {data.domain_id!r}")
    if not 0.0 < fraction < 1.0:
        raise DataError(f"fraction must be in (0, 1), got {fraction}")
    rng = derive_rng(seed, "train_val", data.domain_id)
    labels = np.unique(data.y)
    groups = [np.flatnonzero(data.y == c) for c in labels]
    n_train = int(round(fraction * len(data)))
    quota = _allocate(np.array([len(g) for g in groups]), n_train)
    train_idx, val_idx = [], []
    for g, q in zip(groups, quota):
        perm = g[rng.permutation(len(g))]
        train_idx.append(perm[:q])
        val_idx.append(perm[q:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return data.subset(train_idx), data.subset(val_idx)


def split_labelled(data: DomainData, n_per_class: int, seed: int = 0) -> DomainDataset:
    """Pick ``n_per_class`` labelled rows per class uniformly without replacement."""
    if n_per_class < 0:
        raise DataError(f"n_per_class must be non-negative, got {n_per_class}")
    rng = derive_rng(seed, "labelled", data.domain_id)
    chosen = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.y == c)
        if len(idx) < n_per_class:
            raise DataError(f"class {c} of domain {data.domain_id!r} has {len(idx)} examples, "
                            f"need {n_per_class}")
        chosen.append(idx[rng.permutation(len(idx))[:n_per_class]])
    lab = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    unl = np.setdiff1d(np.arange(len(data)), lab)
    dom = np.full(len(lab), data.domain_id, dtype=object)
    labelled = LabelledSet(data.x[lab], data.y[lab], dom)
    unlabelled = UnlabelledSet(data.x[unl], np.full(len(unl), data.domain_id, dtype=object), data.y[unl])
    return DomainDataset(data.domain_id, labelled, unlabelled, data.num_classes)


def weak_augment(x: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise with std ``weak_noise_sigma``."""
    x = np.asarray(x, dtype=np.float64)
    if config.weak_noise_sigma == 0.0:
        return x.copy()
    return x + config.weak_noise_sigma * rng.normal(size=x.shape)


def strong_augment(x: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise with std ``strong_noise_sigma``, then zero ``strong_mask_count`` coordinates per row."""
    x = np.asarray(x, dtype=np.float64)
    rows = np.atleast_2d(x)
    dim = rows.shape[1]
    m = config.strong_mask_count
    if m > dim:
        raise DataError(f"strong_mask_count {m} exceeds feature dimension {dim}")
    out = rows + config.strong_noise_sigma * rng.normal(size=rows.shape) if config.strong_noise_sigma else rows.copy()
    if m:
        keys = rng.random(rows.shape)
        cols = np.argsort(keys, axis=1)[:, :m]
        np.put_along_axis(out, cols, 0.0, axis=1)
    return out.reshape(x.shape)


# --- delimited tables -------------------------------------------------------

@dataclass(frozen=True)
class TableSchema:
    num_classes: int | None = None
    delimiter: str = ","


def read_table(path, schema: TableSchema = TableSchema()) -> dict[str, DomainData]:
    """Parse ``domain,label,f0,f1,...`` rows, grouped by domain in order of first appearance."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh, delimiter=schema.delimiter))
    if not rows:
        raise TableError("no rows")
    header = [h.strip() for h in rows[0]]
    if len(header) < 3 or header[0] != "domain" or header[1] != "label":
        raise TableError("header must start with 'domain,label' followed by feature columns", line=1)
    dim = len(header) - 2
    if not any(r for r in rows[1:]):
        raise TableError("no rows")
    xs: dict[str, list] = {}
    ys: dict[str, list] = {}
    max_label = -1
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 2:
            raise TableError(f"expected {dim} feature columns, found {len(row) - 2}", line=lineno)
        dom, lab = row[0].strip(), row[1].strip()
        if not dom:
            raise TableError("empty domain id", line=lineno)
        try:
            feats = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise TableError(f"non-numeric feature: {exc}", line=lineno) from None
        if not all(math.isfinite(v) for v in feats):
            raise TableError("non-finite feature value", line=lineno)
        if lab == "":
            label = -1
        else:
            try:
                label = int(lab)
            except ValueError:
                raise TableError(f"label {lab!r} is not an integer class index", line=lineno) from None
            if label < 0 or (schema.num_classes is not None and label >= schema.num_classes):
                raise TableError(f"unknown label {label}", line=lineno)
            max_label = max(max_label, label)
        xs.setdefault(dom, []).append(feats)
        ys.setdefault(dom, []).append(label)
    num_classes = schema.num_classes if schema.num_classes is not None else max(max_label + 1, 2)
    return {d: DomainData(d, np.array(xs[d], dtype=np.float64).reshape(-1, dim), np.array(ys[d], dtype=np.int64),
                          num_classes)
            for d in xs}


def load_external_table(path, schema: TableSchema = TableSchema()) -> dict[str, DomainDataset]:
    """Read a table and split each domain into labelled rows and unlabelled (blank-label) rows."""
    out = {}
    for dom, data in read_table(path, schema).items():
        has = data.y >= 0
        lab = LabelledSet(data.x[has], data.y[has], np.full(int(has.sum()), dom, dtype=object))
        unl = UnlabelledSet(data.x[~has], np.full(int((~has).sum()), dom, dtype=object), data.y[~has])
        out[dom] = DomainDataset(dom, lab, unl, data.num_classes)
    return out


def export_table(path, domains: Sequence[DomainData] | Mapping[str, DomainData], delimiter: str = ",") -> Path:
    """Write domains in the format read by :func:`read_table`; floats use ``repr`` so they round-trip."""
    if isinstance(domains, Mapping):
        domains = list(domains.values())
    if not domains:
        raise DataError("nothing to export")
    dim = domains[0].x.shape[1]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["domain", "label"] + [f"f{j}" for j in range(dim)])
        for d in domains:
            for xi, yi in zip(d.x, d.y):
                w.writerow([d.domain_id, "" if yi < 0 else int(yi)] + [repr(float(v)) for v in xi])
    return path


@dataclass(frozen=True)
class SourceSplit:
    """A source domain prepared for training: labelled/unlabelled train rows plus validation rows."""

    dataset: DomainDataset
    validation: DomainData

    @property
    def domain_id(self) -> str:
        return self.dataset.domain_id


def make_source_split(domain: DomainData, labels_per_class: int | None = 10, train_fraction: float = 0.9,
                      seed: int = 0) -> SourceSplit:
    """Hold out validation rows, then label ``labels_per_class`` per class (``None`` labels every row)."""
    train, val = train_val_split(domain, train_fraction, seed)
    if labels_per_class is None:
        dom = np.full(len(train), domain.domain_id, dtype=object)
        empty = np.zeros(0, dtype=np.int64)
        ds = DomainDataset(domain.domain_id, LabelledSet(train.x, train.y, dom),
                           UnlabelledSet(train.x[:0], dom[:0], empty), domain.num_classes)
    else:
        ds = split_labelled(train, labels_per_class, seed)
    return SourceSplit(ds, val)
