"""Vector primitives, covariance estimation and SPD solves.

Everything here is float64 and side-effect free.
"""

import math

import numpy as np
import scipy.linalg

from .errors import EmptyDataset, LabelOutOfRange, NotSPD, NotUnit, ZeroVector

EPS_NORM = 1e-12
UNIT_TOL = 1e-6
RIDGE_REL = 1e-6


def l2_normalize(v):
    """Return ``v / ||v||``; raises :class:`ZeroVector` when ``||v|| <= 1e-12``."""
    v = np.asarray(v, dtype=np.float64)
    norm = math.sqrt(float(np.dot(v, v)))
    if not norm > EPS_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def normalize_rows(X):
    """Row-wise :func:`l2_normalize`. Returns ``(unit_rows, norms)``."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    bad = np.flatnonzero(~(norms > EPS_NORM))
    if bad.size:
        raise ZeroVector(f"row {int(bad[0])} has norm {norms[bad[0]]:.3g}")
    return X / norms[:, None], norms


def _check_unit(v, name):
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > UNIT_TOL:
        raise NotUnit(f"{name} has norm {n!r}")


def cosine_degrees(u, v):
    """Cosine of two unit vectors and the corresponding angle in degrees.

    The dot product is clamped to [-1, 1] before ``arccos``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_unit(u, "u")
    _check_unit(v, "v")
    c = min(1.0, max(-1.0, float(np.dot(u, v))))
    return c, math.degrees(math.acos(c))


def degrees(cosine):
    """Clamped ``arccos`` in degrees; works on scalars and arrays."""
    c = np.clip(cosine, -1.0, 1.0)
    out = np.degrees(np.arccos(c))
    return float(out) if np.ndim(out) == 0 else out


def _proto_matrix(prototypes):
    return np.asarray(getattr(prototypes, "vectors", prototypes), dtype=np.float64)


def raw_shared_covariance(embeddings, labels, prototypes):
    """Pooled within-class scatter around the given prototypes, divided by n."""
    Z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    M = _proto_matrix(prototypes)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise EmptyDataset("shared_covariance needs at least one embedding")
    if y.shape != (Z.shape[0],):
        raise LabelOutOfRange(f"expected {Z.shape[0]} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= M.shape[0]):
        raise LabelOutOfRange(f"labels must lie in [0, {M.shape[0]})")
    R = Z - M[y]
    return (R.T @ R) / Z.shape[0]


def ridge(sigma):
    """Scale-aware ridge: ``1e-6 * max(trace/d, 1e-12)``."""
    d = sigma.shape[0]
    return RIDGE_REL * max(float(np.trace(sigma)) / d, 1e-12)


def shared_covariance(embeddings, labels, prototypes):
    """Shared covariance of ID embeddings, symmetrized and ridge-regularized.

    ``prototypes`` may be a ``C x d`` array or anything with a ``vectors``
    attribute (a :class:`~hypood.prototypes.PrototypeBank`).
    """
    sigma = raw_shared_covariance(embeddings, labels, prototypes)
    sigma = 0.5 * (sigma + sigma.T)
    return sigma + ridge(sigma) * np.eye(sigma.shape[0])


def cholesky(sigma):
    """Lower Cholesky factor; raises :class:`NotSPD` on failure."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if not np.all(np.isfinite(sigma)):
        raise NotSPD("covariance has non-finite entries")
    try:
        return scipy.linalg.cholesky(sigma, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotSPD(str(exc)) from exc


def quadform_factored(L, diffs):
    """``diff^T (L L^T)^{-1} diff`` for each row of ``diffs`` (1-D or 2-D)."""
    diffs = np.asarray(diffs, dtype=np.float64)
    y = scipy.linalg.solve_triangular(L, diffs.T, lower=True, check_finite=False)
    return np.sum(y * y, axis=0)


def mahalanobis_quadform(sigma, diff):
    """Squared Mahalanobis length of ``diff`` under SPD ``sigma``.

    Solved through the Cholesky factor; no explicit inverse is formed.
    """
    L = cholesky(sigma)
    return float(quadform_factored(L, np.asarray(diff, dtype=np.float64)))
