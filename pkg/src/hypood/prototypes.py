"""Unit-norm class prototypes maintained by exponential moving average."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyClass, InvalidParam, LabelOutOfRange, ZeroVector
from .numerics import EPS_NORM, l2_normalize, normalize_rows
from .rng import make_rng


@dataclass
class PrototypeBank:
    vectors: np.ndarray
    alpha: float = 0.95
    update_count: np.ndarray = None

    def __post_init__(self):
        self.vectors = np.array(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise InvalidParam("a prototype bank needs C >= 2 rows")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidParam(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.update_count is None:
            self.update_count = np.zeros(self.vectors.shape[0], dtype=np.int64)
        else:
            self.update_count = np.array(self.update_count, dtype=np.int64)

    @property
    def n_classes(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def copy(self):
        return PrototypeBank(self.vectors.copy(), self.alpha, self.update_count.copy())

    def max_norm_deviation(self):
        return float(np.max(np.abs(np.linalg.norm(self.vectors, axis=1) - 1.0)))

    def to_dict(self):
        return {"alpha": self.alpha, "vectors": self.vectors.tolist(), "update_count": self.update_count.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["vectors"], dtype=np.float64), float(d["alpha"]), d.get("update_count"))


def from_embeddings(Z, labels, n_classes, alpha=0.95):
    """Prototypes as normalized per-class means of unit embeddings."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    counts = np.bincount(labels, minlength=n_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise EmptyClass(f"class {int(missing[0])} has no samples")
    sums = np.zeros((n_classes, Z.shape[1]))
    np.add.at(sums, labels, Z)
    means = sums / counts[:, None]
    try:
        vectors, _ = normalize_rows(means)
    except ZeroVector as exc:
        raise ZeroVector(f"class mean vanished: {exc}") from exc
    return PrototypeBank(vectors, alpha)


def init_from_data(encoder, dataset, alpha=0.95):
    """Prototypes from a full forward pass over ``dataset`` (no augmentation)."""
    dataset.require_all_classes()
    z = encoder.forward(dataset.features).z
    return from_embeddings(z, dataset.labels, dataset.n_classes, alpha)


def random_init(n_classes, dim, seed=0, alpha=0.95):
    rng = make_rng(seed, "prototype-init")
    vectors, _ = normalize_rows(rng.standard_normal((n_classes, dim)))
    return PrototypeBank(vectors, alpha)


def _normalization_jacobian(m, unorm):
    return (np.eye(m.size) - np.outer(m, m)) / unorm


def ema_update(bank: PrototypeBank, z, c, differentiable=False):
    """``mu_c <- normalize(alpha * mu_c + (1 - alpha) * z)`` in place.

    Returns the new prototype, plus ``d mu_c_new / d z`` when
    ``differentiable``.  ``alpha == 1`` is an exact fixed point.
    """
    if not 0 <= c < bank.n_classes:
        raise LabelOutOfRange(f"class {c} outside [0, {bank.n_classes})")
    a = bank.alpha
    bank.update_count[c] += 1
    if a == 1.0:
        new = bank.vectors[c].copy()
        jac = np.zeros((new.size, new.size))
        return (new, jac) if differentiable else new
    u = a * bank.vectors[c] + (1.0 - a) * np.asarray(z, dtype=np.float64)
    unorm = float(np.linalg.norm(u))
    if not unorm > EPS_NORM:
        raise ZeroVector(f"EMA update of class {c} cancelled out")
    new = u / unorm
    bank.vectors[c] = new
    if differentiable:
        return new, (1.0 - a) * _normalization_jacobian(new, unorm)
    return new


@dataclass
class EmaTrace:
    """Per-update records needed to backpropagate through a batch of EMA steps.

    Each step is ``(class, sample_indices, new_prototype, pre_norm)``.
    """

    alpha: float
    n_samples: int
    steps: list = field(default_factory=list)


def ema_batch(bank: PrototypeBank, Z, labels, mode="per_sample"):
    """Apply the EMA rule for a batch (in place) and record a trace.

    ``per_sample`` updates once per embedding in batch order; ``per_batch``
    updates each present class once with the batch class mean.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    trace = EmaTrace(bank.alpha, Z.shape[0])
    if labels.size and (labels.min() < 0 or labels.max() >= bank.n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {bank.n_classes})")
    a = bank.alpha
    if mode == "per_sample":
        groups = [(int(c), np.array([i])) for i, c in enumerate(labels)]
    elif mode == "per_batch":
        groups = [(int(c), np.flatnonzero(labels == c)) for c in np.unique(labels)]
    else:
        raise InvalidParam(f"unknown prototype update mode {mode!r}")
    for c, idx in groups:
        bank.update_count[c] += idx.size
        if a == 1.0:
            continue
        target = Z[idx[0]] if idx.size == 1 else Z[idx].mean(axis=0)
        u = a * bank.vectors[c] + (1.0 - a) * target
        unorm = float(np.sqrt(np.dot(u, u)))
        if not unorm > EPS_NORM:
            raise ZeroVector(f"EMA update of class {c} cancelled out")
        m = u / unorm
        bank.vectors[c] = m
        trace.steps.append((c, idx, m, unorm))
    return trace


def ema_backward(trace: EmaTrace, grad_proto):
    """Chain ``dL/d(final prototypes)`` back onto the batch embeddings.

    Prototypes from before the batch are treated as constants.
    """
    a = trace.alpha
    g = np.array(grad_proto, dtype=np.float64)
    gz = np.zeros((trace.n_samples, g.shape[1]))
    for c, idx, m, unorm in reversed(trace.steps):
        gc = g[c]
        gu = (gc - m * np.dot(m, gc)) / unorm
        if idx.size == 1:
            gz[idx[0]] += (1.0 - a) * gu
        else:
            gz[idx] += ((1.0 - a) / idx.size) * gu
        g[c] = a * gu
    return gz


def renormalize_guard(bank: PrototypeBank, tol=1e-12):
    """Re-project rows whose norm drifted by more than ``tol``; returns count fixed."""
    norms = np.linalg.norm(bank.vectors, axis=1)
    drift = np.flatnonzero(np.abs(norms - 1.0) > tol)
    for c in drift:
        bank.vectors[c] = l2_normalize(bank.vectors[c])
    return int(drift.size)
