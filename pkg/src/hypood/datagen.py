"""Synthetic ID/OOD data, two-view augmentation and the dataset CSV format."""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyClass, EmptyDataset, InvalidParam, IoError, LabelOutOfRange, ParseError, SchemaError
from .rng import make_rng

MAX_REJECTION_TRIES = 100_000


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = "id"
    means: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise EmptyDataset(f"{self.name}: need a non-empty n x D feature matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise SchemaError(f"{self.name}: {self.features.shape[0]} rows but {self.labels.size} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise LabelOutOfRange(f"{self.name}: labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise SchemaError(f"{self.name}: non-finite features")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)

    def require_all_classes(self):
        missing = np.flatnonzero(self.class_counts() == 0)
        if missing.size:
            raise EmptyClass(f"{self.name}: class {int(missing[0])} has no samples")

    def class_means(self):
        """Generator means when known, otherwise empirical per-class means."""
        if self.means is not None:
            return self.means
        self.require_all_classes()
        sums = np.zeros((self.n_classes, self.dim))
        np.add.at(sums, self.labels, self.features)
        return sums / self.class_counts()[:, None]

    def subset(self, idx, name=None):
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes, name or self.name, self.means)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


@dataclass
class UnlabeledDataset:
    features: np.ndarray
    name: str = "ood"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise EmptyDataset(f"{self.name}: need a non-empty m x D feature matrix")
        if not np.all(np.isfinite(self.features)):
            raise SchemaError(f"{self.name}: non-finite features")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx, name=None):
        return UnlabeledDataset(self.features[idx], name or self.name)

    def fingerprint(self):
        return hashlib.sha256(np.ascontiguousarray(self.features).tobytes()).hexdigest()[:16]


def _angle(u, v):
    c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return math.acos(min(1.0, max(-1.0, c)))


def _min_pairwise_angle(means):
    best = math.pi
    for i in range(len(means)):
        for j in range(i + 1, len(means)):
            best = min(best, _angle(means[i], means[j]))
    return best


def _random_direction(rng, dim):
    while True:
        v = rng.standard_normal(dim)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def make_blobs(n_classes, n_per_class, input_dim, separation=5.0, noise_sigma=0.5, seed=0, name="id"):
    """Isotropic Gaussian blobs whose means sit on a sphere of radius ``separation``.

    Means are rejection-sampled so every pair is at least ``2*pi/(3*C)`` apart
    in angle.  Samples are ordered by class.
    """
    if n_classes < 2 or input_dim < 2:
        raise InvalidParam("make_blobs needs n_classes >= 2 and input_dim >= 2")
    if n_per_class < 1 or separation <= 0 or noise_sigma < 0:
        raise InvalidParam("make_blobs needs n_per_class >= 1, separation > 0, noise_sigma >= 0")
    rng = make_rng(seed, "blobs")
    min_angle = 2 * math.pi / (3 * n_classes)
    dirs = []
    tries = 0
    while len(dirs) < n_classes:
        tries += 1
        if tries > MAX_REJECTION_TRIES:
            raise InvalidParam(f"could not place {n_classes} means {math.degrees(min_angle):.1f} deg apart in R^{input_dim}")
        v = _random_direction(rng, input_dim)
        if all(_angle(v, u) >= min_angle for u in dirs):
            dirs.append(v)
    means = separation * np.array(dirs)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    noise = rng.standard_normal((labels.size, input_dim)) * noise_sigma
    features = means[labels] + noise
    return LabeledDataset(features, labels, n_classes, name, means)


def make_ood(id_data, mode, m, noise_sigma=0.5, seed=0, name=None):
    """OOD samples relative to an ID dataset.

    ``between``: midpoints of random distinct class-mean pairs plus noise.
    ``heldout``: a fresh blob whose mean is at least the ID minimum
    inter-mean angle away from every ID mean.
    ``uniform``: uniform over the bounding box of the ID features.
    """
    if m < 1 or noise_sigma < 0:
        raise InvalidParam("make_ood needs m >= 1 and noise_sigma >= 0")
    name = name or mode
    rng = make_rng(seed, f"ood-{mode}")
    dim = id_data.dim
    if mode == "between":
        means = id_data.class_means()
        C = means.shape[0]
        if C < 2:
            raise InvalidParam("between mode needs at least 2 ID classes")
        pairs = np.array([rng.choice(C, size=2, replace=False) for _ in range(m)])
        centers = 0.5 * (means[pairs[:, 0]] + means[pairs[:, 1]])
        feats = centers + rng.standard_normal((m, dim)) * noise_sigma
    elif mode == "heldout":
        means = id_data.class_means()
        threshold = _min_pairwise_angle(means) if len(means) > 1 else math.pi / 4
        radius = float(np.mean(np.linalg.norm(means, axis=1)))
        for _ in range(MAX_REJECTION_TRIES):
            v = _random_direction(rng, dim)
            if all(_angle(v, u) >= threshold for u in means):
                break
        else:
            raise InvalidParam("could not place a held-out mean away from all ID means")
        feats = radius * v + rng.standard_normal((m, dim)) * noise_sigma
    elif mode == "uniform":
        lo = id_data.features.min(axis=0)
        hi = id_data.features.max(axis=0)
        feats = lo + (hi - lo) * rng.random((m, dim))
    else:
        raise InvalidParam(f"unknown OOD mode {mode!r}")
    return UnlabeledDataset(feats, name)


def augment(x, noise_sigma, scale_lo, scale_hi, rng):
    """Two independent views ``s * x + noise`` with ``s ~ U[scale_lo, scale_hi]``.

    ``x`` may be a single vector or a batch; each row gets its own scale.
    """
    if not 0 < scale_lo <= scale_hi or noise_sigma < 0:
        raise InvalidParam("augment needs 0 < scale_lo <= scale_hi and noise_sigma >= 0")
    x = np.asarray(x, dtype=np.float64)
    rows = x.reshape(1, -1) if x.ndim == 1 else x
    views = []
    for _ in range(2):
        s = rng.uniform(scale_lo, scale_hi, size=(rows.shape[0], 1))
        v = s * rows
        if noise_sigma > 0:
            v = v + rng.standard_normal(rows.shape) * noise_sigma
        views.append(v.reshape(x.shape))
    return views[0], views[1]


def stratified_split(data, test_fraction, seed, names=("train", "test")):
    """Split each class by ``test_fraction``; both parts keep class order."""
    if not 0 < test_fraction < 1:
        raise InvalidParam("test_fraction must lie in (0, 1)")
    rng = make_rng(seed, "split")
    train_idx, test_idx = [], []
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(idx.size * test_fraction))
        test_idx.append(np.sort(idx[:k]))
        train_idx.append(np.sort(idx[k:]))
    return data.subset(np.concatenate(train_idx), names[0]), data.subset(np.concatenate(test_idx), names[1])


def subsample(data, m, seed):
    """Seeded subset of at most ``m`` rows (original order kept)."""
    if len(data) <= m:
        return data
    rng = make_rng(seed, f"subsample-{data.name}")
    idx = np.sort(rng.choice(len(data), size=m, replace=False))
    return data.subset(idx)


# Standard desk-scale benchmark shared by the acceptance suite and the CLI defaults.
BENCHMARK = dict(
    n_classes=4,
    input_dim=16,
    n_train_per_class=400,
    n_test_per_class=100,
    separation=5.0,
    noise_sigma=1.0,
    ood_noise_sigma=1.0,
)


def make_benchmark(seed, ood_modes=("between",), **overrides):
    """Train/test blobs plus OOD sets (sized to the ID test set)."""
    p = {**BENCHMARK, **overrides}
    n_pc = p["n_train_per_class"] + p["n_test_per_class"]
    full = make_blobs(p["n_classes"], n_pc, p["input_dim"], p["separation"], p["noise_sigma"], seed)
    frac = p["n_test_per_class"] / n_pc
    train, test = stratified_split(full, frac, seed, names=("id_train", "id_test"))
    oods = {mode: make_ood(train, mode, len(test), p["ood_noise_sigma"], seed) for mode in ood_modes}
    return train, test, oods


# --- CSV -----------------------------------------------------------------


def _fmt(x):
    return format(float(x), ".17g")


def save_csv(path, data):
    """Write a dataset in the CSV interchange format (17 significant digits, LF)."""
    D = data.dim
    labeled = isinstance(data, LabeledDataset)
    header = [f"feature_{k}" for k in range(D)] + (["label"] if labeled else [])
    lines = [",".join(header)]
    for i in range(len(data)):
        row = [_fmt(v) for v in data.features[i]]
        if labeled:
            row.append(str(int(data.labels[i])))
        lines.append(",".join(row))
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_csv(path, n_classes=None, name=None):
    """Read a CSV dataset; labeled iff the last header column is ``label``."""
    name = name or os.path.splitext(os.path.basename(str(path)))[0]
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise SchemaError(f"{path}: empty file")
    header = [h.strip() for h in lines[0].rstrip("\r").split(",")]
    labeled = header[-1] == "label"
    feat_cols = header[:-1] if labeled else header
    if not feat_cols or feat_cols != [f"feature_{k}" for k in range(len(feat_cols))]:
        raise SchemaError(f"{path}: header must be feature_0..feature_{{D-1}}[,label]")
    width = len(header)
    feats, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != width:
            raise SchemaError(f"{path}:{lineno}: expected {width} columns, got {len(cells)}")
        try:
            row = [float(c) for c in cells[: len(feat_cols)]]
        except ValueError:
            raise ParseError(path, lineno, "non-numeric feature") from None
        if not all(math.isfinite(v) for v in row):
            raise ParseError(path, lineno, "non-finite feature")
        feats.append(row)
        if labeled:
            cell = cells[-1].strip()
            if not cell.isdigit():
                raise ParseError(path, lineno, f"label {cell!r} is not a non-negative integer")
            labels.append(int(cell))
    if not feats:
        raise EmptyDataset(f"{path}: no data rows")
    X = np.array(feats, dtype=np.float64)
    if not labeled:
        return UnlabeledDataset(X, name)
    y = np.array(labels, dtype=np.int64)
    C = int(y.max()) + 1 if n_classes is None else int(n_classes)
    return LabeledDataset(X, y, C, name)
