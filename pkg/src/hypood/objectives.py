"""Training objectives with exact analytic gradients.

Each loss returns a :class:`LossOutput`.  Gradients are with respect to the
raw (ambient) coordinates of the embeddings and prototypes; projecting onto
the sphere happens when the caller chains through the normalization layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidParam, LabelOutOfRange, NoPositives

KINDS = ("cider", "comp_only", "dis_only", "ce", "supcon", "triple", "supcon_cider")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "cider"
    tau: float = 0.1
    lambda_c: float = 2.0
    lambda_d: float = 1.0
    detach_prototypes: bool = False
    mean_reduce: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParam(f"loss kind must be one of {KINDS}, got {self.kind!r}")
        if not self.tau > 0:
            raise InvalidParam("tau must be > 0")
        for name in ("lambda_c", "lambda_d"):
            w = getattr(self, name)
            if not (np.isfinite(w) and w >= 0):
                raise InvalidParam(f"{name} must be finite and >= 0")

    @property
    def uses_dispersion(self):
        return self.kind in ("cider", "dis_only", "triple", "supcon_cider")

    @property
    def uses_compactness(self):
        return self.kind in ("cider", "comp_only", "triple", "supcon_cider")

    @property
    def uses_ce(self):
        return self.kind in ("ce", "triple")

    @property
    def uses_supcon(self):
        return self.kind in ("supcon", "supcon_cider")


@dataclass
class LossOutput:
    value: float
    grad_z: np.ndarray | None = None
    grad_proto: np.ndarray | None = None
    grad_logits: np.ndarray | None = None

    def __add__(self, other):
        return LossOutput(
            self.value + other.value,
            _add(self.grad_z, other.grad_z),
            _add(self.grad_proto, other.grad_proto),
            _add(self.grad_logits, other.grad_logits),
        )

    def scaled(self, w):
        mul = lambda g: None if g is None else w * g  # noqa: E731
        return LossOutput(w * self.value, mul(self.grad_z), mul(self.grad_proto), mul(self.grad_logits))


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _protos(bank):
    return np.asarray(getattr(bank, "vectors", bank), dtype=np.float64)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    return labels


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def dispersion_loss(bank, tau=0.1):
    """Mean over prototypes of log-mean-exp similarity to the other prototypes."""
    M = _protos(bank)
    C = M.shape[0]
    if C < 2:
        raise InvalidParam("dispersion needs at least 2 prototypes")
    S = (M @ M.T) / tau
    np.fill_diagonal(S, -np.inf)
    lse = logsumexp(S, axis=1)
    value = float(np.mean(lse - np.log(C - 1)))
    P = np.exp(S - lse[:, None])
    grad = ((P + P.T) @ M) / (C * tau)
    return LossOutput(value, grad_proto=grad)


def compactness_loss(z, labels, bank, tau=0.1, mean_reduce=False):
    """Sample-to-prototype softmax loss, summed over the batch (or averaged)."""
    Z = np.asarray(z, dtype=np.float64)
    M = _protos(bank)
    y = _check_labels(labels, M.shape[0])
    L = (Z @ M.T) / tau
    lse = logsumexp(L, axis=1)
    b = Z.shape[0]
    per = lse - L[np.arange(b), y]
    G = np.exp(L - lse[:, None])
    G[np.arange(b), y] -= 1.0
    scale = 1.0 / b if mean_reduce else 1.0
    G *= scale
    return LossOutput(float(np.sum(per) * scale), grad_z=(G @ M) / tau, grad_proto=(G.T @ Z) / tau)


def cross_entropy_loss(logits, labels):
    """Batch-mean softmax cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_labels(labels, logits.shape[1])
    b = logits.shape[0]
    lse = logsumexp(logits, axis=1)
    value = float(np.mean(lse - logits[np.arange(b), y]))
    G = np.exp(logits - lse[:, None])
    G[np.arange(b), y] -= 1.0
    return LossOutput(value, grad_logits=G / b)


def positive_sets(labels):
    """Boolean ``N x N`` mask of positives: same label, different index."""
    labels = np.asarray(labels)
    mask = labels[:, None] == labels[None, :]
    np.fill_diagonal(mask, False)
    return mask


def supcon_loss(z_views, labels, tau=0.1, mean_reduce=False):
    """Supervised contrastive loss, positives averaged outside the log."""
    Z = np.asarray(z_views, dtype=np.float64)
    labels = np.asarray(labels)
    N = Z.shape[0]
    if N < 2:
        raise InvalidParam("supcon needs at least 2 samples")
    pos = positive_sets(labels)
    n_pos = pos.sum(axis=1)
    if np.any(n_pos == 0):
        raise NoPositives(f"anchor {int(np.flatnonzero(n_pos == 0)[0])} has no positive")
    S = (Z @ Z.T) / tau
    np.fill_diagonal(S, -np.inf)
    lse = logsumexp(S, axis=1)
    log_prob = S - lse[:, None]
    np.fill_diagonal(log_prob, 0.0)
    per = -(log_prob * pos).sum(axis=1) / n_pos
    scale = 1.0 / N if mean_reduce else 1.0
    Q = np.exp(S - lse[:, None])
    dS = (Q - pos / n_pos[:, None]) * scale
    grad = ((dS + dS.T) @ Z) / tau
    return LossOutput(float(np.sum(per) * scale), grad_z=grad)


def cider_loss(z, labels, bank, config: LossConfig):
    """``lambda_d * L_dis + lambda_c * L_comp`` with linearly combined gradients."""
    out = LossOutput(0.0)
    if config.lambda_d:
        out = out + dispersion_loss(bank, config.tau).scaled(config.lambda_d)
    if config.lambda_c:
        out = out + compactness_loss(z, labels, bank, config.tau, config.mean_reduce).scaled(config.lambda_c)
    return out


def combined_loss(config: LossConfig, z, labels, bank, logits=None):
    """The configured objective for one augmented batch."""
    out = LossOutput(0.0)
    if config.uses_ce:
        if logits is None:
            raise InvalidParam(f"loss kind {config.kind!r} needs classifier logits")
        out = out + cross_entropy_loss(logits, labels)
    if config.uses_supcon:
        out = out + supcon_loss(z, labels, config.tau, config.mean_reduce)
    if config.uses_dispersion and config.lambda_d:
        out = out + dispersion_loss(bank, config.tau).scaled(config.lambda_d)
    if config.uses_compactness and config.lambda_c:
        out = out + compactness_loss(z, labels, bank, config.tau, config.mean_reduce).scaled(config.lambda_c)
    return out
