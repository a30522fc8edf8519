"""Datasets, target discretization, splitting and the synthetic GMM generator."""
import csv
import gzip
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}

DATASET_FORMAT = "cdenets.dataset/1"
TRUTH_FORMAT = "cdenets.truth/1"

MISSING_TOKENS = {"", "na", "nan", "null", "?"}


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via a same-directory temp file."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class DiscretizationGrid:
    """Evenly spaced bins per target dimension; flat bin indices are row-major."""

    lows: tuple
    highs: tuple
    bins: tuple

    def __post_init__(self):
        object.__setattr__(self, "lows", tuple(float(v) for v in self.lows))
        object.__setattr__(self, "highs", tuple(float(v) for v in self.highs))
        object.__setattr__(self, "bins", tuple(int(v) for v in self.bins))
        if not (len(self.lows) == len(self.highs) == len(self.bins) >= 1):
            raise ConfigError("grid lows, highs and bins must have equal non-zero length")
        for axis, (lo, hi, n) in enumerate(zip(self.lows, self.highs, self.bins)):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ConfigError(f"grid range for dimension {axis} must satisfy min < max, got [{lo}, {hi}]")
            if n < 1:
                raise ConfigError(f"bin count for dimension {axis} must be positive")

    @classmethod
    def fit(cls, targets, bins):
        """Grid spanning the empirical range of ``targets`` (n, d)."""
        y = np.atleast_2d(np.asarray(targets, dtype=float))
        bins = [int(b) for b in np.atleast_1d(bins)]
        if len(bins) == 1 and y.shape[1] > 1:
            bins = bins * y.shape[1]
        if len(bins) != y.shape[1]:
            raise ConfigError(f"{len(bins)} bin counts given for {y.shape[1]}-dimensional targets")
        lo, hi = y.min(axis=0), y.max(axis=0)
        if np.any(hi <= lo):
            raise DataError("a target dimension is constant on the training split; cannot fit a grid")
        return cls(tuple(lo), tuple(hi), tuple(bins))

    @property
    def ndim(self):
        return len(self.bins)

    @property
    def n_bins(self):
        return int(np.prod(self.bins))

    @property
    def widths(self):
        return np.array([(hi - lo) / n for lo, hi, n in zip(self.lows, self.highs, self.bins)])

    def edges(self, axis):
        return np.linspace(self.lows[axis], self.highs[axis], self.bins[axis] + 1)

    def centers(self, axis):
        e = self.edges(axis)
        return 0.5 * (e[:-1] + e[1:])

    def flat_centers(self):
        """(n_bins, d) array of bin centres in flat-index order."""
        mesh = np.meshgrid(*[self.centers(a) for a in range(self.ndim)], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def to_dict(self):
        return {"lows": list(self.lows), "highs": list(self.highs), "bins": list(self.bins)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["lows"]), tuple(d["highs"]), tuple(d["bins"]))


def discretize(targets, grid):
    """Flat bin index of each target row.

    Values on an interior edge go to the right-hand bin, the upper boundary
    belongs to the last bin, and out-of-range values clamp to boundary bins.
    """
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None] if grid.ndim == 1 else y[None, :]
    if y.shape[1] != grid.ndim:
        raise ValueError(f"targets have {y.shape[1]} columns, grid has {grid.ndim} dimensions")
    if not np.all(np.isfinite(y)):
        raise DataError("non-finite target value")
    per_axis = []
    for axis in range(grid.ndim):
        idx = np.searchsorted(grid.edges(axis), y[:, axis], side="right") - 1
        per_axis.append(np.clip(idx, 0, grid.bins[axis] - 1))
    return np.ravel_multi_index(per_axis, grid.bins).astype(np.int64)


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    split: np.ndarray = None
    grid: DiscretizationGrid = None
    classes: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        y = np.asarray(self.targets, dtype=float)
        self.targets = y[:, None] if y.ndim == 1 else y
        if self.features.shape[0] != self.targets.shape[0]:
            raise DataError("features and targets have different row counts")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.targets))):
            raise DataError("dataset contains non-finite values")
        if self.split is not None:
            self.split = np.asarray(self.split, dtype=np.int64)
        if self.classes is not None:
            self.classes = np.asarray(self.classes, dtype=np.int64)

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def target_dim(self):
        return self.targets.shape[1]

    def part(self, name):
        """(features, targets, row indices) of the named split."""
        if self.split is None:
            raise DataError("dataset has no split assignment")
        rows = np.flatnonzero(self.split == SPLIT_NAMES[name])
        return self.features[rows], self.targets[rows], rows

    def fit_grid(self, bins):
        if self.grid is not None:
            return self.grid
        _, y, _ = self.part("train")
        return DiscretizationGrid.fit(y, bins)

    def to_dict(self):
        d = {
            "format": DATASET_FORMAT,
            "features": self.features.tolist(),
            "targets": self.targets.tolist(),
            "metadata": self.metadata,
        }
        if self.split is not None:
            d["split"] = self.split.tolist()
        if self.grid is not None:
            d["grid"] = self.grid.to_dict()
        if self.classes is not None:
            d["classes"] = self.classes.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != DATASET_FORMAT:
            raise DataError(f"expected format {DATASET_FORMAT!r}, got {d.get('format')!r}")
        return cls(
            features=np.asarray(d["features"], dtype=float),
            targets=np.asarray(d["targets"], dtype=float),
            split=d.get("split"),
            grid=DiscretizationGrid.from_dict(d["grid"]) if d.get("grid") else None,
            classes=d.get("classes"),
            metadata=d.get("metadata", {}),
        )


def split_counts(n, fractions):
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split(dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Copy of ``dataset`` with a seeded random train/val/test assignment."""
    n = len(dataset)
    n_train, n_val, _ = split_counts(n, fractions)
    order = np.random.default_rng(seed).permutation(n)
    assignment = np.full(n, TEST, dtype=np.int64)
    assignment[order[:n_train]] = TRAIN
    assignment[order[n_train:n_train + n_val]] = VAL
    return Dataset(
        dataset.features, dataset.targets, assignment, dataset.grid, dataset.classes, dict(dataset.metadata)
    )


def standardize_features(dataset):
    """Standardize features with train-split mean and std (constant columns untouched)."""
    x_train, _, _ = dataset.part("train")
    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    out = Dataset((dataset.features - mean) / std, dataset.targets, dataset.split, dataset.grid,
                  dataset.classes, dict(dataset.metadata))
    out.metadata["standardized"] = True
    return out


# ---------------------------------------------------------------------------
# synthetic class-conditional mixtures
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_classes: int = 10
    n_components: int = 3
    bins: int = 32
    noise: float = 0.1
    seed: int = 0
    low: float = 0.0
    high: float = 1.0
    mean_range: tuple = (0.1, 0.9)
    scale_range: tuple = (0.03, 0.1)
    weights: np.ndarray = None
    means: np.ndarray = None
    scales: np.ndarray = None

    def __post_init__(self):
        if self.n_classes < 1 or self.n_components < 1 or self.bins < 1:
            raise ConfigError("class, component and bin counts must be positive")
        if self.noise < 0:
            raise ConfigError("feature noise scale must be >= 0")
        if self.weights is None:
            rng = np.random.default_rng(self.seed)
            shape = (self.n_classes, self.n_components)
            self.weights = rng.dirichlet(np.ones(self.n_components), size=self.n_classes)
            self.means = rng.uniform(*self.mean_range, size=shape)
            self.scales = rng.uniform(*self.scale_range, size=shape)
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.scales = np.asarray(self.scales, dtype=float)
        if np.any(self.scales <= 0) or not np.allclose(self.weights.sum(axis=1), 1.0):
            raise ConfigError("mixture weights must lie on the simplex and scales be positive")

    @property
    def grid(self):
        return DiscretizationGrid((self.low,), (self.high,), (self.bins,))

    def true_densities(self):
        """(n_classes, bins) discretized mixture masses, renormalized to the grid."""
        edges = self.grid.edges(0)
        z = (edges[None, None, :] - self.means[..., None]) / self.scales[..., None]
        mass = np.diff(ndtr(z), axis=-1)
        dens = np.einsum("ck,ckb->cb", self.weights, mass)
        return dens / dens.sum(axis=1, keepdims=True)

    def to_dict(self):
        return {
            "n_classes": self.n_classes, "n_components": self.n_components, "bins": self.bins,
            "noise": self.noise, "seed": self.seed, "low": self.low, "high": self.high,
            "weights": self.weights.tolist(), "means": self.means.tolist(), "scales": self.scales.tolist(),
        }


def sample_conditional_targets(spec, classes, rng):
    """Draw a bin from each row's class density, then a uniform point inside it."""
    truth = spec.true_densities()
    cdf = np.cumsum(truth, axis=1)
    u = rng.random(len(classes))
    bins = np.minimum((cdf[classes] < u[:, None]).sum(axis=1), spec.bins - 1)
    edges = spec.grid.edges(0)
    y = edges[bins] + rng.random(len(classes)) * (edges[bins + 1] - edges[bins])
    return y


def generate_synthetic(spec, n_samples, seed=None):
    """Tabular analogue of relabelled digit data.

    Features are a one-hot class code plus Gaussian noise of scale
    ``spec.noise``; each target is a draw from the class's discretized
    mixture.  Returns the dataset and the (n_classes, bins) true densities.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    classes = rng.integers(spec.n_classes, size=n_samples)
    features = np.eye(spec.n_classes)[classes]
    if spec.noise > 0:
        features = features + spec.noise * rng.standard_normal(features.shape)
    targets = sample_conditional_targets(spec, classes, rng)
    meta = {"kind": "synthetic", "spec": spec.to_dict(), "n_samples": int(n_samples),
            "sample_seed": None if seed is None else int(seed)}
    ds = Dataset(features, targets[:, None], grid=spec.grid, classes=classes, metadata=meta)
    return ds, spec.true_densities()


def synthetic_from_images(images, labels, spec, seed=0):
    """Pixel features (scaled to [0, 1]) with mixture targets keyed by digit label."""
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.max() >= spec.n_classes:
        raise ConfigError("image labels exceed the synthetic class count")
    rng = np.random.default_rng(seed)
    targets = sample_conditional_targets(spec, labels, rng)
    feats = images.reshape(len(images), -1) / 255.0
    meta = {"kind": "synthetic-images", "spec": spec.to_dict()}
    return Dataset(feats, targets[:, None], grid=spec.grid, classes=labels, metadata=meta)


def save_truth(path, spec, densities):
    doc = {"format": TRUTH_FORMAT, "grid": spec.grid.to_dict(), "spec": spec.to_dict(),
           "densities": np.asarray(densities).tolist()}
    atomic_write(path, json.dumps(doc))


def load_truth(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != TRUTH_FORMAT:
        raise DataError(f"{path}: not a ground-truth file")
    return DiscretizationGrid.from_dict(doc["grid"]), np.asarray(doc["densities"], dtype=float)


def save_dataset(path, dataset):
    atomic_write(path, json.dumps(dataset.to_dict()))


def load_dataset(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    return Dataset.from_dict(doc)


# ---------------------------------------------------------------------------
# external formats
# ---------------------------------------------------------------------------

def load_csv(path, feature_columns, target_columns, standardize=False, categorical=(),
             fractions=(0.8, 0.1, 0.1), seed=0):
    """Read a headered CSV into a Dataset.

    Columns named in ``categorical`` are one-hot encoded (sorted levels).
    Rows with a missing value in any used column are dropped and counted in
    ``metadata['dropped_rows']``.  With ``standardize`` the dataset is split
    with ``seed`` and features are scaled using training-split statistics.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        wanted = list(feature_columns) + list(target_columns)
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        pos = {c: header.index(c) for c in wanted}
        categorical = set(categorical)
        raw_rows, dropped = [], 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
            cells = {c: row[pos[c]].strip() for c in wanted}
            if any(v.lower() in MISSING_TOKENS for v in cells.values()):
                dropped += 1
                continue
            parsed = {}
            for c, v in cells.items():
                if c in categorical:
                    parsed[c] = v
                    continue
                try:
                    parsed[c] = float(v)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {c!r} has non-numeric value {v!r}") from None
            raw_rows.append(parsed)
    if dropped:
        log.warning("%s: dropped %d rows with missing values", path, dropped)
    if not raw_rows:
        raise DataError(f"{path}: no usable rows")

    columns, names = [], []
    for c in feature_columns:
        values = [r[c] for r in raw_rows]
        if c in categorical:
            levels = sorted(set(values), key=_level_key)
            index = {lv: i for i, lv in enumerate(levels)}
            onehot = np.zeros((len(values), len(levels)))
            onehot[np.arange(len(values)), [index[v] for v in values]] = 1.0
            columns.append(onehot)
            names.extend(f"{c}={lv}" for lv in levels)
        else:
            columns.append(np.asarray(values, dtype=float)[:, None])
            names.append(c)
    features = np.hstack(columns)
    targets = np.array([[r[c] for c in target_columns] for r in raw_rows], dtype=float)
    meta = {"kind": "csv", "path": os.fspath(path), "feature_names": names,
            "target_names": list(target_columns), "dropped_rows": dropped}
    ds = Dataset(features, targets, metadata=meta)
    if standardize:
        ds = standardize_features(split(ds, fractions, seed))
    return ds


def _level_key(v):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def read_idx(path):
    """Read an IDX array file (optionally gzipped)."""
    opener = gzip.open if os.fspath(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise DataError(f"{path}: bad IDX magic")
    code, ndim = data[2], data[3]
    if code not in IDX_DTYPES:
        raise DataError(f"{path}: unknown IDX element type 0x{code:02x}")
    header_end = 4 + 4 * ndim
    shape = tuple(int.from_bytes(data[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    dtype = np.dtype(IDX_DTYPES[code])
    count = int(np.prod(shape)) if shape else 1
    body = data[header_end:]
    if len(body) != count * dtype.itemsize:
        raise DataError(f"{path}: expected {count} elements, file holds {len(body) // dtype.itemsize}")
    return np.frombuffer(body, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_idx(path, array):
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in IDX_DTYPES.items()}
    code = codes.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    header = bytes([0, 0, code, array.ndim]) + b"".join(int(s).to_bytes(4, "big") for s in array.shape)
    atomic_write(path, header + array.astype(IDX_DTYPES[code]).tobytes())
