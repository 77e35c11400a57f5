"""Datasets: file formats, normalization, open-set splits and benchmarks."""

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidInputError, ParseError, SplitError

MOSR_MAGIC = b"MOSR"
MOSR_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    origin_ids: list = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise InvalidInputError("features must be (n, d) with one label per row")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]

    def families(self):
        return sorted(int(f) for f in np.unique(self.labels))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        ids = [self.origin_ids[i] for i in idx] if self.origin_ids is not None else None
        return Dataset(self.features[idx], self.labels[idx], ids)

    def digest(self):
        h = hashlib.sha256()
        h.update(struct.pack("<II", *self.features.shape))
        h.update(self.features.astype("<f4").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# feature tables

def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def load_feature_table(path, fmt="text"):
    """Read a dataset stored as delimited text or the ``MOSR`` binary layout.

    Text rows are ``family,f1,...,fd``.  The binary file starts with
    ``b"MOSR"`` and three little-endian u32 values (version, rows, d), then
    holds ``rows`` records of a u32 family id followed by ``d`` float32s.
    """
    if fmt in ("text", "csv"):
        return _load_text(path)
    if fmt in ("binary", "mosr"):
        return _load_binary(path)
    raise InvalidInputError(f"unknown dataset format {fmt!r}")


def _load_text(path):
    labels, rows = [], []
    width = None
    with _open(path, "rt") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
                if width < 2:
                    raise ParseError("need a label and at least one feature", lineno)
            elif len(parts) != width:
                raise ParseError(f"expected {width} columns, found {len(parts)}", lineno)
            try:
                labels.append(int(parts[0]))
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    if not rows:
        raise ParseError(f"{path}: no rows")
    return Dataset(np.array(rows, dtype=np.float32), np.array(labels, dtype=np.int64))


def _load_binary(path):
    with _open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise ParseError(f"{path}: file too short for a MOSR header")
    if blob[:4] != MOSR_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, n, d = struct.unpack_from("<III", blob, 4)
    if version != MOSR_VERSION:
        raise FormatError(f"{path}: unsupported MOSR version {version}")
    rec = np.dtype([("label", "<u4"), ("x", "<f4", (d,))])
    if len(blob) - 16 != n * rec.itemsize:
        raise ParseError(f"{path}: expected {n} rows of width {d}")
    if n == 0:
        raise ParseError(f"{path}: no rows")
    arr = np.frombuffer(blob, dtype=rec, count=n, offset=16)
    return Dataset(arr["x"].astype(np.float32), arr["label"].astype(np.int64))


def save_feature_table(dataset, path, fmt="text"):
    if fmt in ("text", "csv"):
        with _open(path, "wt") as fh:
            for lab, row in zip(dataset.labels, dataset.features):
                fh.write(str(int(lab)) + "," + ",".join(f"{v:.9g}" for v in row.tolist()) + "\n")
    elif fmt in ("binary", "mosr"):
        n, d = dataset.features.shape
        rec = np.dtype([("label", "<u4"), ("x", "<f4", (d,))])
        arr = np.empty(n, dtype=rec)
        arr["label"] = dataset.labels
        arr["x"] = dataset.features
        with _open(path, "wb") as fh:
            fh.write(MOSR_MAGIC + struct.pack("<III", MOSR_VERSION, n, d))
            fh.write(arr.tobytes())
    else:
        raise InvalidInputError(f"unknown dataset format {fmt!r}")


# ---------------------------------------------------------------------------
# normalization and reshaping

@dataclass
class MinMaxStats:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, features):
        features = np.asarray(features, dtype=np.float32)
        if len(features) == 0:
            raise InvalidInputError("cannot fit normalization on an empty split")
        return cls(features.min(axis=0), features.max(axis=0))

    def apply(self, features):
        x = np.asarray(features, dtype=np.float64)
        span = (self.hi - self.lo).astype(np.float64)
        const = span == 0
        out = (x - self.lo) / np.where(const, 1.0, span)
        out[:, const] = 0.5
        return np.clip(out, 0.0, 1.0).astype(np.float32)


def normalize(dataset, train_idx):
    """Min-max scale every feature using statistics from ``train_idx`` only."""
    stats = MinMaxStats.fit(dataset.features[np.asarray(train_idx, dtype=np.int64)])
    return Dataset(stats.apply(dataset.features), dataset.labels, dataset.origin_ids), stats


def pad_reshape(vector, side=25):
    """Zero-pad 622 features to 625 (a 25x25 image); 625 passes through.

    Accepts one vector or a ``(n, 622)`` matrix.
    """
    x = np.asarray(vector)
    width = side * side
    n = x.shape[-1]
    if n == width:
        return x.copy()
    if n != 622:
        raise InvalidInputError(f"expected 622 or {width} features, got {n}")
    pad = [(0, 0)] * (x.ndim - 1) + [(0, width - n)]
    return np.pad(x, pad)


def as_image(vector, side=25):
    return np.asarray(vector).reshape(np.shape(vector)[:-1] + (side, side))


# ---------------------------------------------------------------------------
# open-set splits

@dataclass
class OpenSetSplit:
    known_ids: list
    unknown_ids: list
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    unknown_test: np.ndarray
    seed: int = 0
    train_fraction: float = 0.72
    validation_fraction: float = 0.08
    dataset_digest: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("train", "validation", "test", "unknown_test"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        self.known_ids = [int(v) for v in self.known_ids]
        self.unknown_ids = [int(v) for v in self.unknown_ids]
        if set(self.known_ids) & set(self.unknown_ids):
            raise SplitError("known and unknown families overlap")

    @property
    def k(self):
        return len(self.known_ids)

    def family_index(self, labels):
        """Map raw family ids to known-family indices (``-1`` for unknown)."""
        lut = {f: i for i, f in enumerate(self.known_ids)}
        return np.array([lut.get(int(v), -1) for v in labels], dtype=np.int64)

    def known_xy(self, dataset, part):
        """Features and known-family indices for ``train``, ``validation`` or ``test``."""
        if part not in ("train", "validation", "test"):
            raise InvalidInputError(f"not a known-family partition: {part!r}")
        idx = getattr(self, part)
        y = self.family_index(dataset.labels[idx])
        if np.any(y < 0):
            raise SplitError(f"unknown-family instance found in the {part} partition")
        return dataset.features[idx], y

    def unknown_x(self, dataset):
        return dataset.features[self.unknown_test]

    def to_manifest(self):
        return {
            "known_ids": self.known_ids,
            "unknown_ids": self.unknown_ids,
            "train": self.train.tolist(),
            "validation": self.validation.tolist(),
            "test": self.test.tolist(),
            "unknown_test": self.unknown_test.tolist(),
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "validation_fraction": self.validation_fraction,
            "dataset_digest": self.dataset_digest,
            "extra": self.extra,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_manifest(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


def make_split(dataset, known_ids=None, known_count=None, train_fraction=0.72,
               validation_fraction=0.08, seed=0):
    """Partition families into known/unknown and known instances into train/val/test.

    ``known_ids`` lists the known families explicitly; otherwise the first
    ``known_count`` family ids in ascending order are known.  Fractions are
    of each known family's instances; the remainder becomes test.  All
    unknown-family instances go to ``unknown_test``.
    """
    families = dataset.families()
    if known_ids is None:
        if known_count is None:
            raise SplitError("give either known_ids or known_count")
        known_ids = families[:known_count]
    known_ids = [int(f) for f in known_ids]
    missing = set(known_ids) - set(families)
    if missing:
        raise SplitError(f"known families {sorted(missing)} not present in the dataset")
    unknown_ids = [f for f in families if f not in set(known_ids)]
    if not known_ids or not unknown_ids:
        raise SplitError("need at least one known and one unknown family")
    if not (0 < train_fraction < 1 and 0 <= validation_fraction < 1
            and train_fraction + validation_fraction < 1):
        raise SplitError("fractions must lie in (0, 1) and leave a test remainder")
    rng = np.random.default_rng(seed)
    parts = {"train": [], "validation": [], "test": []}
    for fam in known_ids:
        idx = np.flatnonzero(dataset.labels == fam)
        if len(idx) < 3:
            raise SplitError(f"family {fam} has {len(idx)} instances; need at least 3")
        idx = rng.permutation(idx)
        n = len(idx)
        n_train = max(1, int(round(train_fraction * n)))
        n_val = int(round(validation_fraction * n))
        n_val = min(n_val, n - n_train - 1)
        parts["train"].append(idx[:n_train])
        parts["validation"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    unknown = np.flatnonzero(np.isin(dataset.labels, unknown_ids))
    return OpenSetSplit(
        known_ids, unknown_ids,
        *(np.sort(np.concatenate(parts[p])) for p in ("train", "validation", "test")),
        unknown, seed=seed, train_fraction=train_fraction,
        validation_fraction=validation_fraction, dataset_digest=dataset.digest())


# ---------------------------------------------------------------------------
# IDX digit images

def _read_idx(path, magic):
    with _open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: too short for an IDX header")
    (got,) = struct.unpack_from(">I", blob, 0)
    if got != magic:
        raise FormatError(f"{path}: IDX magic {got:#010x}, expected {magic:#010x}")
    ndim = magic & 0xFF
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    offset = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(blob) - offset != count:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(blob, dtype=np.uint8, offset=offset).reshape(dims)


def load_idx_images(images_path, labels_path):
    """Digit images as flattened pixel vectors scaled into ``[0, 1]``."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    feats = images.reshape(len(images), -1).astype(np.float32) / 255.0
    return Dataset(feats, labels.astype(np.int64))


def write_idx(path, array):
    """Write a uint8 array as an IDX file (images: 3-D, labels: 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# ---------------------------------------------------------------------------
# synthetic Gaussian-family benchmark

@dataclass(frozen=True)
class SyntheticBenchmarkSpec:
    """Isotropic Gaussian families squashed into ``[0, 1]`` by a logistic map.

    Family means are drawn from the seed and rescaled so that the closest
    pair sits exactly ``spacing * sigma`` apart (``min_separation`` fixes
    that distance directly, which is needed when ``sigma`` is 0).
    """

    k_total: int = 10
    dim: int = 25
    per_family: int = 500
    sigma: float = 0.5
    spacing: float = 3.0
    seed: int = 0
    min_separation: float = None

    def __post_init__(self):
        if self.k_total < 3:
            raise InvalidInputError("need at least 3 families so one can be held out")
        if self.dim < 1 or self.per_family < 1 or self.sigma < 0 or self.spacing <= 0:
            raise InvalidInputError("invalid synthetic benchmark parameters")

    def latent_means(self):
        """Family centres before squashing."""
        rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(1)[0])
        raw = rng.standard_normal((self.k_total, self.dim))
        raw -= raw.mean(axis=0)
        diffs = raw[:, None, :] - raw[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1))
        closest = dist[np.triu_indices(self.k_total, 1)].min()
        target = self.min_separation if self.min_separation is not None else self.spacing * self.sigma
        return raw * (target / closest)

    def family_means(self):
        return _logistic(self.latent_means())


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_synthetic(spec, draw=0):
    """Sample ``spec.per_family`` instances per family; ``draw`` selects an independent sample."""
    means = spec.latent_means()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, draw]))
    noise = rng.standard_normal((spec.k_total, spec.per_family, spec.dim)) * spec.sigma
    latent = means[:, None, :] + noise
    feats = _logistic(latent).reshape(-1, spec.dim)
    labels = np.repeat(np.arange(spec.k_total), spec.per_family)
    return Dataset(feats.astype(np.float32), labels)


def nearest_mean_accuracy(spec, dataset):
    """Accuracy of assigning each instance to the closest true family centre."""
    x = np.clip(dataset.features.astype(np.float64), 1e-7, 1 - 1e-7)
    latent = np.log(x) - np.log1p(-x)
    means = spec.latent_means()
    d2 = ((latent[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    return float(np.mean(d2.argmin(axis=1) == dataset.labels))
