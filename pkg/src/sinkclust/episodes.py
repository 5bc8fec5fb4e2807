"""Datasets, episodic sampling and the synthetic attribute-grid generator.

Synthetic samples are described by a tuple of discrete attributes (think
shape, colour, border style). Which attribute defines the classes of an
episode is drawn per episode, so the consistency of class semantics across
episodes is an explicit knob.
"""

from __future__ import annotations

import csv
import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, ShapeError

MAX_COMBINATIONS = 1_000_000
EMB_MAGIC = b"EMB1"
_EMB_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class ConsistencyMode:
    """Distribution of the class-defining attribute over episodes.

    ``consistent(a)`` always uses attribute ``a``; ``mixed(probs)`` draws
    the attribute from ``probs`` independently per episode.
    """

    kind: str
    attribute: int = 0
    probs: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "consistent":
            if self.attribute < 0:
                raise ValueError("attribute index must be >= 0")
        elif self.kind == "mixed":
            p = np.asarray(self.probs, dtype=np.float64)
            if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise ValueError("mixed mode needs a probability vector over attributes")
        else:
            raise ValueError(f"unknown consistency mode {self.kind!r}")

    @classmethod
    def consistent(cls, attribute: int = 0) -> "ConsistencyMode":
        return cls("consistent", attribute=attribute)

    @classmethod
    def mixed(cls, probs: Sequence[float]) -> "ConsistencyMode":
        return cls("mixed", probs=tuple(float(p) for p in probs))

    @classmethod
    def uniform(cls, n_attributes: int) -> "ConsistencyMode":
        return cls.mixed([1.0 / n_attributes] * n_attributes)

    def draw(self, rng: np.random.Generator) -> int:
        if self.kind == "consistent":
            return self.attribute
        return int(rng.choice(len(self.probs), p=np.asarray(self.probs)))

    def to_dict(self) -> dict:
        if self.kind == "consistent":
            return {"kind": "consistent", "attribute": self.attribute}
        return {"kind": "mixed", "probs": list(self.probs)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConsistencyMode":
        if d["kind"] == "consistent":
            return cls.consistent(int(d["attribute"]))
        return cls.mixed(d["probs"])


@dataclass(frozen=True)
class AttributeSpec:
    """Parameters of the attribute-grid generator.

    ``attributes`` is a sequence of ``(cardinality, signal_strength)``.
    Each attribute contributes a block of ``cardinality * dim_per_value``
    features holding its one-hot value scaled by the signal strength.
    """

    attributes: tuple[tuple[int, float], ...]
    noise_std: float = 0.1
    dim_per_value: int = 1
    samples_per_combination: int = 1
    consistency: ConsistencyMode = field(default_factory=ConsistencyMode.consistent)

    def __post_init__(self):
        attrs = tuple((int(c), float(s)) for c, s in self.attributes)
        object.__setattr__(self, "attributes", attrs)
        if not attrs:
            raise ValueError("need at least one attribute")
        if any(c < 2 for c, _ in attrs):
            raise ValueError("attribute cardinalities must be >= 2")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be > 0")
        if self.dim_per_value < 1 or self.samples_per_combination < 1:
            raise ValueError("dim_per_value and samples_per_combination must be >= 1")
        c = self.consistency
        if c.kind == "consistent" and c.attribute >= len(attrs):
            raise ValueError(f"consistent attribute {c.attribute} out of range")
        if c.kind == "mixed" and len(c.probs) != len(attrs):
            raise ValueError("mixed probabilities must cover every attribute")

    @property
    def cardinalities(self) -> list[int]:
        return [c for c, _ in self.attributes]

    @property
    def n_combinations(self) -> int:
        return int(np.prod(self.cardinalities, dtype=object))

    @property
    def dim(self) -> int:
        return sum(self.cardinalities) * self.dim_per_value

    def to_dict(self) -> dict:
        return {
            "attributes": [list(a) for a in self.attributes],
            "noise_std": self.noise_std,
            "dim_per_value": self.dim_per_value,
            "samples_per_combination": self.samples_per_combination,
            "consistency": self.consistency.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSpec":
        return cls(
            attributes=tuple(tuple(a) for a in d["attributes"]),
            noise_std=d["noise_std"],
            dim_per_value=d["dim_per_value"],
            samples_per_combination=d["samples_per_combination"],
            consistency=ConsistencyMode.from_dict(d["consistency"]),
        )


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix with optional labels and latent attribute table."""

    features: np.ndarray
    labels: np.ndarray | None = None
    attribute_table: np.ndarray | None = None
    class_count: int = 0
    split: str = "train"
    spec: AttributeSpec | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ShapeError(f"features must be a non-empty 2-D matrix, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape != (x.shape[0],) or not np.issubdtype(y.dtype, np.integer):
                raise ShapeError("labels must be an integer vector with one entry per row")
            y = y.astype(np.int64)
            count = self.class_count or int(y.max()) + 1
            if y.min() < 0 or y.max() >= count:
                raise ValueError(f"labels must lie in [0, {count})")
            missing = np.flatnonzero(np.bincount(y, minlength=count) == 0)
            if missing.size:
                raise ValueError(f"class {int(missing[0])} has no samples")
            object.__setattr__(self, "labels", y)
            object.__setattr__(self, "class_count", count)
        if self.attribute_table is not None:
            t = np.asarray(self.attribute_table, dtype=np.int64)
            if t.ndim != 2 or t.shape[0] != x.shape[0]:
                raise ShapeError("attribute_table must have one row per sample")
            object.__setattr__(self, "attribute_table", t)
        if self.split not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_labels_from(self, attribute: int) -> "LabeledDataset":
        """Copy whose labels are the values of one latent attribute."""
        if self.attribute_table is None:
            raise ValueError("dataset has no attribute table")
        card = self.spec.cardinalities[attribute] if self.spec else None
        return LabeledDataset(
            self.features, self.attribute_table[:, attribute], self.attribute_table,
            card or 0, self.split, self.spec,
        )


def attribute_table(spec: AttributeSpec) -> np.ndarray:
    """Attribute values of every generated sample, in generation order."""
    if spec.n_combinations > MAX_COMBINATIONS:
        raise ValueError(
            f"{spec.n_combinations} attribute combinations exceed the limit of {MAX_COMBINATIONS}"
        )
    combos = np.array(list(itertools.product(*[range(c) for c in spec.cardinalities])), dtype=np.int64)
    return np.repeat(combos, spec.samples_per_combination, axis=0)


def gen_attribute_dataset(spec: AttributeSpec, seed: int = 0, split: str = "train") -> LabeledDataset:
    table = attribute_table(spec)
    n = table.shape[0]
    blocks = []
    for a, (card, signal) in enumerate(spec.attributes):
        onehot = np.zeros((n, card))
        onehot[np.arange(n), table[:, a]] = signal
        blocks.append(np.repeat(onehot, spec.dim_per_value, axis=1))
    clean = np.concatenate(blocks, axis=1)
    rng = np.random.default_rng(seed)
    features = clean + rng.normal(0.0, spec.noise_std, size=clean.shape)
    return LabeledDataset(features, None, table, 0, split, spec)


@dataclass(frozen=True)
class Episode:
    """One few-shot task.

    Support and query rows are shuffled; ``support_index`` and
    ``query_index`` point back into the source dataset.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    n_shot: int
    n_query: int
    semantic_attribute: int | None = None
    support_index: np.ndarray | None = None
    query_index: np.ndarray | None = None
    seed: int | None = None


def _draw_count(spec, rng, name):
    if isinstance(spec, (tuple, list)):
        lo, hi = spec
        if lo > hi or lo < 1:
            raise ValueError(f"invalid {name} range {spec}")
        return int(rng.integers(lo, hi + 1))
    return int(spec)


def sample_episode(
    ds: LabeledDataset,
    n_way,
    n_shot,
    n_query: int,
    seed: int,
    consistency: ConsistencyMode | None = None,
) -> Episode:
    """Draw an episode of ``n_way`` classes, ``n_shot + n_query`` samples each.

    ``n_way`` and ``n_shot`` may be ``(lo, hi)`` ranges drawn per episode.
    For datasets with an attribute table, the class-defining attribute is
    drawn from ``consistency`` (default: the dataset spec's mode; stored
    labels are used only when there is neither) and the
    episode classes are values of that attribute, relabelled ``0..K-1`` in
    sampled order.
    """
    rng = np.random.default_rng(seed)
    way = _draw_count(n_way, rng, "n_way")
    shot = _draw_count(n_shot, rng, "n_shot")
    if way < 1 or shot < 1 or n_query < 0:
        raise ValueError("need n_way >= 1, n_shot >= 1, n_query >= 0")

    attribute = None
    if ds.attribute_table is not None and (consistency is not None or ds.spec is not None or ds.labels is None):
        mode = consistency or (ds.spec.consistency if ds.spec else ConsistencyMode.consistent())
        attribute = mode.draw(rng)
        if attribute >= ds.attribute_table.shape[1]:
            raise ValueError(f"attribute {attribute} out of range")
        labels = ds.attribute_table[:, attribute]
    elif ds.labels is not None:
        labels = ds.labels
    else:
        raise ValueError("dataset has neither labels nor an attribute table")

    per = shot + n_query
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= per]
    if eligible.size < way:
        raise ValueError(
            f"need {way} classes with >= {per} samples each, only {eligible.size} "
            f"of {classes.size} classes qualify (max per-class count {counts.max()})"
        )
    chosen = rng.choice(eligible, size=way, replace=False)
    s_idx, s_y, q_idx, q_y = [], [], [], []
    for new_label, cls in enumerate(chosen):
        members = np.flatnonzero(labels == cls)
        pick = rng.choice(members, size=per, replace=False)
        s_idx.append(pick[:shot])
        q_idx.append(pick[shot:])
        s_y.append(np.full(shot, new_label))
        q_y.append(np.full(n_query, new_label))
    s_idx, s_y = np.concatenate(s_idx), np.concatenate(s_y)
    q_idx, q_y = np.concatenate(q_idx), np.concatenate(q_y)
    ps = rng.permutation(s_idx.size)
    pq = rng.permutation(q_idx.size)
    s_idx, s_y, q_idx, q_y = s_idx[ps], s_y[ps], q_idx[pq], q_y[pq]
    return Episode(
        support_x=ds.features[s_idx],
        support_y=s_y,
        query_x=ds.features[q_idx],
        query_y=q_y,
        n_way=way,
        n_shot=shot,
        n_query=n_query,
        semantic_attribute=attribute,
        support_index=s_idx,
        query_index=q_idx,
        seed=seed,
    )


# ---------------------------------------------------------------- file I/O


def _infer_format(path, fmt):
    if fmt:
        return fmt
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix == ".emb":
        return "emb"
    raise ValueError(f"cannot infer dataset format from {path!s}; pass format='csv' or 'emb'")


def save_dataset(ds: LabeledDataset, path, format: str | None = None) -> None:
    fmt = _infer_format(path, format)
    if fmt == "csv":
        _save_csv(ds, path)
    elif fmt == "emb":
        _save_emb(ds, path)
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_dataset(path, format: str | None = None, split: str = "test") -> LabeledDataset:
    fmt = _infer_format(path, format)
    if fmt == "csv":
        features, labels = _load_csv(path)
    elif fmt == "emb":
        features, labels = _load_emb(path)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    try:
        return LabeledDataset(features, labels, split=split)
    except ValueError as e:
        raise ParseError(str(e), path=path) from e


def _save_csv(ds, path):
    if ds.labels is None:
        raise ValueError("CSV format requires labels")
    d = ds.dim
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{t}" for t in range(d)])
        for y, row in zip(ds.labels, ds.features):
            w.writerow([int(y)] + [repr(float(v)) for v in row])


def _load_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path=path, line=1) from None
        d = len(header) - 1
        if d < 1 or header != ["label"] + [f"f{t}" for t in range(d)]:
            raise ParseError("malformed header, expected 'label,f0,...,f{d-1}'", path=path, line=1)
        labels, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 1:
                raise ParseError(f"expected {d + 1} fields, got {len(rec)}", path=path, line=lineno)
            try:
                y = int(rec[0])
            except ValueError:
                raise ParseError(f"label {rec[0]!r} is not an integer", path=path, line=lineno) from None
            if y < 0:
                raise ParseError(f"negative label {y}", path=path, line=lineno)
            try:
                vals = [float(v) for v in rec[1:]]
            except ValueError as e:
                raise ParseError(f"bad feature value ({e})", path=path, line=lineno) from None
            if not all(np.isfinite(vals)):
                raise ParseError("non-finite feature value", path=path, line=lineno)
            labels.append(y)
            rows.append(vals)
    if not rows:
        raise ParseError("no data rows", path=path, line=2)
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)


def _save_emb(ds, path):
    n, d = ds.features.shape
    has_labels = ds.labels is not None
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, n, d, int(has_labels)))
        fh.write(ds.features.astype("<f4").tobytes(order="C"))
        if has_labels:
            fh.write(ds.labels.astype("<u4").tobytes())


def _load_emb(path):
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise ParseError("truncated header", path=path, offset=len(raw))
    magic, rows, cols, flag = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise ParseError(f"bad magic {magic!r}", path=path, offset=0)
    if flag not in (0, 1):
        raise ParseError(f"label-presence flag must be 0 or 1, got {flag}", path=path, offset=12)
    if rows == 0 or cols == 0:
        raise ParseError("empty matrix", path=path, offset=4)
    off = _EMB_HEADER.size
    expected = off + rows * cols * 4 + (rows * 4 if flag else 0)
    if len(raw) != expected:
        raise ParseError(
            f"payload length {len(raw)} does not match {rows}x{cols} header (expected {expected} bytes)",
            path=path, offset=min(len(raw), expected),
        )
    features = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
    bad = np.flatnonzero(~np.isfinite(features).ravel())
    if bad.size:
        raise ParseError("non-finite feature value", path=path, offset=off + 4 * int(bad[0]))
    labels = None
    if flag:
        labels = np.frombuffer(raw, dtype="<u4", count=rows, offset=off + rows * cols * 4).astype(np.int64)
    return features.astype(np.float64), labels


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def write_sidecar(path, spec: AttributeSpec, seed: int, label_attribute: int, extra: dict | None = None) -> Path:
    meta = {"spec": spec.to_dict(), "seed": seed, "label_attribute": label_attribute}
    if extra:
        meta.update(extra)
    out = sidecar_path(path)
    out.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_with_sidecar(path, format: str | None = None, split: str = "test") -> LabeledDataset:
    """Load a dataset and, if a generator sidecar exists, its attribute table.

    The attribute table is rebuilt from the recorded spec (generation order
    is deterministic), so only the features need to be stored.
    """
    ds = load_dataset(path, format, split)
    side = sidecar_path(path)
    if not side.exists():
        return ds
    meta = json.loads(side.read_text(encoding="utf-8"))
    spec = AttributeSpec.from_dict(meta["spec"])
    table = attribute_table(spec)
    if table.shape[0] != ds.n:
        raise ParseError(f"sidecar describes {table.shape[0]} samples, file has {ds.n}", path=side)
    return LabeledDataset(ds.features, ds.labels, table, ds.class_count, split, spec)
