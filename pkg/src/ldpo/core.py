"""Domain types, deterministic splits and bit-exact file IO.

Binary layouts (all little-endian)::

    feature matrix   "LDPO" u32 version=1  u64 n_items  u64 dim
                     n_items x (u16 len, utf-8 id)
                     n_items*dim f32, row-major
    patch file       "LDPP" u32 version=1  u64 n_images u64 dim
                     per image: u16 len, utf-8 id, u32 n_patches,
                     per patch: f32 scale, u32 x, u32 y, dim x f32
    model container  "LDPM" u32 version=1  u16 len, utf-8 type tag
                     u32 len, utf-8 JSON metadata
                     u32 n_arrays, per array: u16 len, utf-8 name,
                     u8 dtype code ('d' f64 / 'q' i64), u8 ndim,
                     ndim x u64 shape, raw payload

Feature values are stored as float32.  Matrices built from float64 data are
rounded on write; anything that came out of ``load_feature_matrix`` writes
back to the identical byte stream.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEATURE_MAGIC = b"LDPO"
PATCH_MAGIC = b"LDPP"
MODEL_MAGIC = b"LDPM"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIQQ")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class LdpoError(Exception):
    """Base class for all package errors."""


class ValidationError(LdpoError, ValueError):
    """Input violates a documented precondition."""


class FormatError(LdpoError, ValueError):
    """A file could not be decoded.  ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """N x D dense features with one string id per row."""

    data: np.ndarray
    item_ids: tuple[str, ...]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValidationError(f"feature data must be 2-D, got shape {data.shape}")
        ids = tuple(str(i) for i in self.item_ids)
        if len(ids) != data.shape[0]:
            raise ValidationError(
                f"{len(ids)} item ids for {data.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise ValidationError("item ids must be unique")
        if not np.all(np.isfinite(data)):
            r, c = np.argwhere(~np.isfinite(data))[0]
            raise ValidationError(f"non-finite value at row {r}, column {c}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "item_ids", ids)

    @classmethod
    def from_array(cls, data, item_ids: Sequence[str] | None = None) -> "FeatureMatrix":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if item_ids is None:
            item_ids = [f"item{i}" for i in range(data.shape[0])]
        return cls(data, tuple(item_ids))

    @property
    def n_items(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def with_data(self, data) -> "FeatureMatrix":
        """Same ids, new values (row count must match)."""
        return FeatureMatrix(np.asarray(data, dtype=np.float64), self.item_ids)

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=np.intp)
        return FeatureMatrix(self.data[rows], tuple(self.item_ids[i] for i in rows))

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (self.item_ids == other.item_ids
                and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.item_ids, self.data.tobytes()))


@dataclass(frozen=True, eq=False)
class LabelVector:
    """Integer labels in ``[0, k)`` aligned with a list of item ids."""

    labels: np.ndarray
    k: int
    item_ids: tuple[str, ...]

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise ValidationError("labels must be 1-D")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValidationError("labels must be integers")
        labels = labels.astype(np.int64)
        k = int(self.k)
        ids = tuple(str(i) for i in self.item_ids)
        if len(ids) != labels.size:
            raise ValidationError(f"{len(ids)} item ids for {labels.size} labels")
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate item ids in label vector")
        if k < 1 and labels.size:
            raise ValidationError("k must be >= 1")
        if labels.size:
            bad = np.flatnonzero((labels < 0) | (labels >= k))
            if bad.size:
                i = bad[0]
                raise ValidationError(
                    f"label {labels[i]} of item {ids[i]!r} outside [0, {k})")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "item_ids", ids)

    @classmethod
    def from_labels(cls, labels, item_ids: Sequence[str] | None = None,
                    k: int | None = None) -> "LabelVector":
        labels = np.asarray(labels, dtype=np.int64)
        if item_ids is None:
            item_ids = [f"item{i}" for i in range(labels.size)]
        if k is None:
            k = int(labels.max()) + 1 if labels.size else 1
        return cls(labels, k, tuple(item_ids))

    def __len__(self):
        return self.labels.size

    @property
    def n_items(self) -> int:
        return self.labels.size

    def densify(self) -> "LabelVector":
        """Relabel to ``0..k_present-1`` preserving the order of label ids."""
        uniq, inv = np.unique(self.labels, return_inverse=True)
        return LabelVector(inv.astype(np.int64), max(len(uniq), 1), self.item_ids)

    def take(self, rows) -> "LabelVector":
        rows = np.asarray(rows, dtype=np.intp)
        return LabelVector(self.labels[rows], self.k,
                           tuple(self.item_ids[i] for i in rows))

    def check_aligned(self, features: "FeatureMatrix | LabelVector") -> None:
        if tuple(features.item_ids) != self.item_ids:
            raise ValidationError("label ids do not match the paired item ids")

    def __eq__(self, other):
        if not isinstance(other, LabelVector):
            return NotImplemented
        return (self.k == other.k and self.item_ids == other.item_ids
                and np.array_equal(self.labels, other.labels))

    def __hash__(self):
        return hash((self.k, self.item_ids, self.labels.tobytes()))


@dataclass(frozen=True, eq=False)
class PatchImage:
    """The patches of one image: scale, grid position and activation vector."""

    image_id: str
    scale: np.ndarray
    x: np.ndarray
    y: np.ndarray
    activations: np.ndarray

    def __post_init__(self):
        act = np.asarray(self.activations, dtype=np.float64)
        if act.ndim != 2:
            raise ValidationError("activations must be (n_patches, dim)")
        n = act.shape[0]
        scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if not (scale.size == x.size == y.size == n):
            raise ValidationError("scale/x/y must have one entry per patch")
        if np.any(scale <= 0):
            raise ValidationError(f"image {self.image_id!r}: patch scale must be > 0")
        if np.any(x < 0) or np.any(y < 0):
            raise ValidationError(f"image {self.image_id!r}: negative patch position")
        if not np.all(np.isfinite(act)):
            raise ValidationError(f"image {self.image_id!r}: non-finite activation")
        object.__setattr__(self, "image_id", str(self.image_id))
        object.__setattr__(self, "scale", _frozen(scale))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "activations", _frozen(act))

    @classmethod
    def from_activations(cls, image_id: str, activations, scale=1.0) -> "PatchImage":
        act = np.asarray(activations, dtype=np.float64)
        if act.ndim == 1:
            act = act[None, :]
        n = act.shape[0]
        return cls(image_id, np.broadcast_to(np.asarray(scale, float), (n,)),
                   np.arange(n), np.zeros(n, dtype=np.int64), act)

    @property
    def n_patches(self) -> int:
        return self.activations.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PatchImage):
            return NotImplemented
        return (self.image_id == other.image_id
                and np.array_equal(self.scale, other.scale)
                and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y)
                and self.activations.shape == other.activations.shape
                and np.array_equal(self.activations, other.activations))

    __hash__ = object.__hash__


@dataclass(frozen=True)
class PatchActivationSet:
    images: tuple[PatchImage, ...]
    dim: int

    def __post_init__(self):
        images = tuple(self.images)
        ids = [im.image_id for im in images]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate image ids in patch set")
        for im in images:
            if im.activations.shape[1] != self.dim:
                raise ValidationError(
                    f"image {im.image_id!r} has activation dim "
                    f"{im.activations.shape[1]}, expected {self.dim}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "dim", int(self.dim))

    @classmethod
    def from_images(cls, images: Iterable[PatchImage]) -> "PatchActivationSet":
        images = tuple(images)
        if not images:
            raise ValidationError("patch set needs at least one image")
        return cls(images, images[0].activations.shape[1])

    @property
    def image_ids(self) -> tuple[str, ...]:
        return tuple(im.image_id for im in self.images)

    @property
    def n_patches(self) -> int:
        return sum(im.n_patches for im in self.images)

    def stacked(self) -> np.ndarray:
        """All patch activations as one (total_patches, dim) array."""
        if not self.images:
            return np.zeros((0, self.dim))
        return np.concatenate([im.activations for im in self.images], axis=0)

    def by_id(self) -> dict[str, PatchImage]:
        return {im.image_id: im for im in self.images}


SPLIT_NAMES = ("train", "validation", "test")


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    """Per-item train/validation/test codes (0/1/2)."""

    codes: np.ndarray
    seed: int
    ratios: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "codes", _frozen(np.asarray(self.codes, dtype=np.int8)))

    @property
    def tags(self) -> list[str]:
        return [SPLIT_NAMES[c] for c in self.codes]

    def indices(self, part: str) -> np.ndarray:
        return np.flatnonzero(self.codes == SPLIT_NAMES.index(part))

    @property
    def train(self) -> np.ndarray:
        return self.indices("train")

    @property
    def validation(self) -> np.ndarray:
        return self.indices("validation")

    @property
    def test(self) -> np.ndarray:
        return self.indices("test")

    def counts(self) -> tuple[int, int, int]:
        return tuple(int(np.sum(self.codes == i)) for i in range(3))

    def __eq__(self, other):
        if not isinstance(other, SplitAssignment):
            return NotImplemented
        return (self.seed == other.seed and self.ratios == other.ratios
                and np.array_equal(self.codes, other.codes))

    __hash__ = object.__hash__


@dataclass
class IterationRecord:
    iteration: int
    k_clusters: int
    purity_adjacent: float | None = None
    nmi_adjacent: float | None = None
    top1: float | None = None
    top5: float | None = None
    rim_objective: float | None = None
    wall_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "iteration": self.iteration,
            "k_clusters": self.k_clusters,
            "purity_adjacent": self.purity_adjacent,
            "nmi_adjacent": self.nmi_adjacent,
            "top1": self.top1,
            "top5": self.top5,
            "rim_objective": self.rim_objective,
        }
        if timing:
            d["wall_seconds"] = self.wall_seconds
        d.update(self.extra)
        return d


@dataclass
class LoopTrace:
    records: list[IterationRecord] = field(default_factory=list)

    def append(self, rec: IterationRecord) -> None:
        expected = len(self.records)
        if rec.iteration != expected:
            raise ValidationError(
                f"iteration {rec.iteration} appended after {expected - 1}")
        for name in ("purity_adjacent", "nmi_adjacent", "top1", "top5"):
            v = getattr(rec, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name}={v} outside [0, 1]")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __iter__(self):
        return iter(self.records)

    def to_dicts(self, timing: bool = True) -> list[dict]:
        return [r.to_dict(timing) for r in self.records]


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def make_split(n_items: int, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitAssignment:
    """Seeded shuffle then prefix cut into train / validation / test.

    Part sizes come from largest-remainder rounding of ``n_items * ratio`` so
    every part is within one item of its requested size.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValidationError("need exactly three ratios")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios {ratios} must be non-negative and sum to 1")
    n_items = int(n_items)
    if n_items < 3:
        raise ValidationError("make_split needs at least 3 items")

    exact = [n_items * r for r in ratios]
    counts = [math.floor(e) for e in exact]
    short = n_items - sum(counts)
    order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    # give an empty non-zero-ratio part one item when the donor stays within +-1
    for i in range(3):
        if ratios[i] > 0 and counts[i] == 0:
            donor = max(range(3), key=lambda j: (counts[j], -j))
            if abs(counts[donor] - 1 - exact[donor]) <= 1.0:
                counts[donor] -= 1
                counts[i] += 1

    perm = np.random.default_rng(seed).permutation(n_items)
    codes = np.empty(n_items, dtype=np.int8)
    start = 0
    for part, c in enumerate(counts):
        codes[perm[start:start + c]] = part
        start += c
    return SplitAssignment(codes, int(seed), ratios)


# ---------------------------------------------------------------------------
# Binary IO helpers
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError("unexpected end of data", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def string16(self) -> str:
        (n,) = self.unpack(_U16)
        at = self.pos
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid utf-8 in id: {e.reason}", at) from None

    def floats(self, count: int, what: str) -> np.ndarray:
        nbytes = count * 4
        if self.pos + nbytes > len(self.buf):
            raise FormatError("unexpected end of data", len(self.buf))
        at = self.pos
        vals = np.frombuffer(self.buf, dtype="<f4", count=count, offset=self.pos)
        self.pos += nbytes
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise FormatError(f"non-finite {what} value", at + 4 * int(bad[0]))
        return vals


def _string16(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValidationError(f"id longer than 65535 bytes: {s[:40]!r}...")
    return _U16.pack(len(raw)) + raw


def _read_header(r: _Reader, magic: bytes, what: str) -> tuple[int, int]:
    got, version, n, dim = r.unpack(_HEADER)
    if got != magic:
        raise FormatError(f"bad magic {got!r} for {what}, expected {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported {what} format version {version}", 4)
    return n, dim


def _check_size(n: int, dim: int, per_value: int) -> None:
    if n * max(dim, 1) * per_value >= 2 ** 63:
        raise FormatError(f"dimension overflow: {n} x {dim} entries", 8)


def feature_matrix_bytes(m: FeatureMatrix) -> bytes:
    out = io.BytesIO()
    out.write(_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, m.n_items, m.dim))
    for item in m.item_ids:
        out.write(_string16(item))
    out.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
    return out.getvalue()


def write_feature_matrix(m: FeatureMatrix, path) -> None:
    Path(path).write_bytes(feature_matrix_bytes(m))


def parse_feature_matrix(buf: bytes) -> FeatureMatrix:
    r = _Reader(buf)
    n, dim = _read_header(r, FEATURE_MAGIC, "feature matrix")
    _check_size(n, dim, 4)
    ids = [r.string16() for _ in range(n)]
    data = r.floats(n * dim, "feature").astype(np.float64).reshape(n, dim)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after feature payload", r.pos)
    try:
        return FeatureMatrix(data, tuple(ids))
    except ValidationError as e:
        raise FormatError(str(e)) from None


def _load_feature_csv(path: Path) -> FeatureMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "item_id":
        raise FormatError(f"{path}: CSV features need an 'item_id,...' header")
    dim = len(rows[0]) - 1
    ids, vals = [], []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 1:
            raise FormatError(f"{path}: line {line} has {len(row) - 1} values, "
                              f"expected {dim}")
        ids.append(row[0])
        try:
            v = [float(x) for x in row[1:]]
        except ValueError as e:
            raise FormatError(f"{path}: line {line}: {e}") from None
        if not all(math.isfinite(x) for x in v):
            raise FormatError(f"{path}: line {line}: non-finite value")
        vals.append(v)
    data = np.array(vals, dtype=np.float64).reshape(len(ids), dim)
    try:
        return FeatureMatrix(data, tuple(ids))
    except ValidationError as e:
        raise FormatError(f"{path}: {e}") from None


def load_feature_matrix(path) -> FeatureMatrix:
    """Read a feature matrix; ``.csv`` files use the text fallback format."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_feature_csv(path)
    try:
        return parse_feature_matrix(path.read_bytes())
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


def write_feature_csv(m: FeatureMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id"] + [f"f{j}" for j in range(m.dim)])
        for item, row in zip(m.item_ids, m.data):
            w.writerow([item] + [repr(float(v)) for v in row])


# -- patches ----------------------------------------------------------------


def _patch_dtype(dim: int) -> np.dtype:
    return np.dtype([("scale", "<f4"), ("x", "<u4"), ("y", "<u4"),
                     ("act", "<f4", (dim,))])


def patches_bytes(ps: PatchActivationSet) -> bytes:
    out = io.BytesIO()
    out.write(_HEADER.pack(PATCH_MAGIC, FORMAT_VERSION, len(ps.images), ps.dim))
    dt = _patch_dtype(ps.dim)
    for im in ps.images:
        out.write(_string16(im.image_id))
        out.write(_U32.pack(im.n_patches))
        rec = np.zeros(im.n_patches, dtype=dt)
        rec["scale"] = im.scale
        rec["x"] = im.x
        rec["y"] = im.y
        rec["act"] = im.activations
        out.write(rec.tobytes())
    return out.getvalue()


def write_patches(ps: PatchActivationSet, path) -> None:
    Path(path).write_bytes(patches_bytes(ps))


def parse_patches(buf: bytes) -> PatchActivationSet:
    r = _Reader(buf)
    n, dim = _read_header(r, PATCH_MAGIC, "patch file")
    _check_size(n, dim, 4)
    dt = _patch_dtype(dim)
    images = []
    for _ in range(n):
        image_id = r.string16()
        (count,) = r.unpack(_U32)
        at = r.pos
        nbytes = count * dt.itemsize
        if at + nbytes > len(buf):
            raise FormatError("unexpected end of data", len(buf))
        rec = np.frombuffer(buf, dtype=dt, count=count, offset=at)
        r.pos += nbytes
        for name in ("scale", "act"):
            bad = np.argwhere(~np.isfinite(rec[name].reshape(count, -1)))
            if bad.size:
                i, j = bad[0]
                off = at + i * dt.itemsize + (12 + 4 * j if name == "act" else 0)
                raise FormatError(f"non-finite patch {name} value", int(off))
        try:
            images.append(PatchImage(image_id, rec["scale"].astype(np.float64),
                                     rec["x"].astype(np.int64), rec["y"].astype(np.int64),
                                     rec["act"].astype(np.float64).reshape(count, dim)))
        except ValidationError as e:
            raise FormatError(str(e), at) from None
    if r.pos != len(buf):
        raise FormatError("trailing bytes after patch payload", r.pos)
    try:
        return PatchActivationSet(tuple(images), dim)
    except ValidationError as e:
        raise FormatError(str(e)) from None


def load_patches(path) -> PatchActivationSet:
    path = Path(path)
    try:
        return parse_patches(path.read_bytes())
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


# -- labels -----------------------------------------------------------------


def write_labels(lv: LabelVector, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "label"])
        for item, lab in zip(lv.item_ids, lv.labels):
            w.writerow([item, int(lab)])


def load_labels(path, k: int | None = None,
                features: FeatureMatrix | None = None) -> LabelVector:
    """Read a labels CSV.  The header row is optional on input.

    ``k`` defaults to ``max(label) + 1``.  When ``features`` is given the ids
    must match its ids in the same order.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if rows and rows[0][:2] == ["item_id", "label"]:
        rows = rows[1:]
    ids, labels = [], []
    for line, row in enumerate(rows, start=1):
        if len(row) != 2:
            raise ValidationError(f"{path}: row {line} needs 'item_id,label'")
        try:
            lab = int(row[1])
        except ValueError:
            raise ValidationError(f"{path}: row {line}: bad label {row[1]!r}") from None
        ids.append(row[0])
        labels.append(lab)
    if k is None:
        k = max(labels) + 1 if labels else 1
    lv = LabelVector(np.array(labels, dtype=np.int64), k, tuple(ids))
    if features is not None:
        lv.check_aligned(features)
    return lv


# -- model container --------------------------------------------------------

_DTYPE_CODES = {b"d": np.dtype("<f8"), b"q": np.dtype("<i8")}


def model_bytes(tag: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    out = io.BytesIO()
    out.write(MODEL_MAGIC + _U32.pack(FORMAT_VERSION))
    out.write(_string16(tag))
    meta_raw = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    out.write(_U32.pack(len(meta_raw)) + meta_raw)
    out.write(_U32.pack(len(arrays)))
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        if np.issubdtype(a.dtype, np.integer) or a.dtype == bool:
            code, a = b"q", a.astype("<i8")
        else:
            code, a = b"d", a.astype("<f8")
        out.write(_string16(name) + code + bytes([a.ndim]))
        for s in a.shape:
            out.write(_U64.pack(s))
        out.write(np.ascontiguousarray(a).tobytes())
    return out.getvalue()


def write_model(path, tag: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Serialize named arrays plus JSON metadata under a type tag."""
    Path(path).write_bytes(model_bytes(tag, arrays, meta))


def parse_model(buf: bytes, expected_tag: str | None = None):
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r} for model container", 0)
    (version,) = r.unpack(_U32)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model container version {version}", 4)
    tag = r.string16()
    if expected_tag is not None and tag != expected_tag:
        raise FormatError(f"model tag {tag!r}, expected {expected_tag!r}", 8)
    (mlen,) = r.unpack(_U32)
    meta = json.loads(r.take(mlen).decode("utf-8"))
    (count,) = r.unpack(_U32)
    arrays = {}
    for _ in range(count):
        name = r.string16()
        at = r.pos
        code = r.take(1)
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code!r}", at)
        (ndim,) = r.take(1)
        shape = tuple(r.unpack(_U64)[0] for _ in range(ndim))
        dt = _DTYPE_CODES[code]
        count_vals = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.take(count_vals * dt.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return tag, arrays, meta


def read_model(path, expected_tag: str | None = None):
    """Return ``(tag, arrays, meta)`` from a model container file."""
    path = Path(path)
    try:
        return parse_model(path.read_bytes(), expected_tag)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


def dump_json(obj, path) -> None:
    """Deterministic JSON (sorted keys, fixed indentation, no NaN)."""
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")
