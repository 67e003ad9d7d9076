"""OOD scores, detection metrics and hyperspherical embedding diagnostics.

All scorers follow the higher-is-ID convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidParam, LabelOutOfRange, TooFewSamples
from .numerics import cholesky, degrees, quadform_factored

TPR_PERCENT = 95
MIN_ID_SCORES = 20


def _protos(bank):
    return np.asarray(getattr(bank, "vectors", bank), dtype=np.float64)


# --- embedding diagnostics -----------------------------------------------


def dispersion_metric(bank):
    """Mean cosine over ordered prototype pairs ``i != j`` and its angle."""
    M = _protos(bank)
    C = M.shape[0]
    if C < 2:
        raise InvalidParam("dispersion needs at least 2 prototypes")
    G = M @ M.T
    mean_cos = float((G.sum() - np.trace(G)) / (C * (C - 1)))
    return mean_cos, degrees(mean_cos)


def compactness_metric(z, labels, bank, weighting="sample"):
    """Average cosine between embeddings and their class prototype.

    ``weighting="sample"`` averages over all samples; ``"class"`` averages
    per class first, then over the classes present.
    """
    Z = np.asarray(z, dtype=np.float64)
    M = _protos(bank)
    y = np.asarray(labels)
    if y.size == 0 or y.min() < 0 or y.max() >= M.shape[0]:
        raise LabelOutOfRange(f"labels must lie in [0, {M.shape[0]})")
    cos = np.einsum("ij,ij->i", Z, M[y])
    if weighting == "sample":
        mean_cos = float(np.mean(cos))
    elif weighting == "class":
        per = [np.mean(cos[y == c]) for c in range(M.shape[0]) if np.any(y == c)]
        mean_cos = float(np.mean(per))
    else:
        raise InvalidParam(f"unknown compactness weighting {weighting!r}")
    return mean_cos, degrees(mean_cos)


def nearest_prototype_cosine(z, bank):
    return np.max(np.atleast_2d(z) @ _protos(bank).T, axis=1)


def separability_metric(id_z, ood_z, bank, mode="angles"):
    """How much farther OOD embeddings sit from their nearest prototype than ID ones.

    ``angles`` (default): mean nearest-prototype angle of OOD minus that of ID.
    ``aggregate``: angle of the mean max-cosine, OOD minus ID.
    ``cosine``: mean max-cosine of OOD minus that of ID (negative when separable).
    """
    c_id = nearest_prototype_cosine(id_z, bank)
    c_ood = nearest_prototype_cosine(ood_z, bank)
    if mode == "angles":
        return float(np.mean(degrees(c_ood)) - np.mean(degrees(c_id)))
    if mode == "aggregate":
        return degrees(float(np.mean(c_ood))) - degrees(float(np.mean(c_id)))
    if mode == "cosine":
        return float(np.mean(c_ood) - np.mean(c_id))
    raise InvalidParam(f"unknown separability mode {mode!r}")


# --- scorers -------------------------------------------------------------


class MahalanobisScorer:
    """Negated minimum squared Mahalanobis distance to the class prototypes.

    The covariance is factored once at construction.
    """

    def __init__(self, bank, sigma):
        self.M = _protos(bank)
        self.L = cholesky(sigma)

    def distances(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        D = np.empty((Z.shape[0], self.M.shape[0]))
        for j, mu in enumerate(self.M):
            D[:, j] = quadform_factored(self.L, Z - mu)
        return D

    def __call__(self, Z):
        return -self.distances(Z).min(axis=1)


def mahalanobis_score(z, bank, sigma):
    z = np.asarray(z, dtype=np.float64)
    s = MahalanobisScorer(bank, sigma)(z)
    return float(s[0]) if z.ndim == 1 else s


def max_cosine_score(z, bank):
    z = np.asarray(z, dtype=np.float64)
    s = nearest_prototype_cosine(z, bank)
    return float(s[0]) if z.ndim == 1 else s


def softmax_max(logits):
    L = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    L = L - L.max(axis=1, keepdims=True)
    P = np.exp(L)
    return P.max(axis=1) / P.sum(axis=1)


def msp_score(x, probe, encoder):
    """Maximum softmax probability of the linear probe on penultimate features."""
    x = np.asarray(x, dtype=np.float64)
    pen = np.atleast_2d(encoder.forward(x).penultimate)
    s = softmax_max(probe.logits(pen))
    return float(s[0]) if x.ndim == 1 else s


# --- detection metrics ---------------------------------------------------


def _side(scores, name):
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise InvalidParam(f"{name} scores are empty")
    if not np.all(np.isfinite(s)):
        raise InvalidParam(f"{name} scores contain non-finite values")
    return s


def tpr95_threshold(id_scores):
    """Largest ``t`` with at least 95% of ID scores ``>= t``.

    That is the ``k``-th largest ID score with ``k = ceil(0.95 n)``.
    """
    s = _side(id_scores, "ID")
    n = s.size
    if n < MIN_ID_SCORES:
        raise TooFewSamples(f"need >= {MIN_ID_SCORES} ID scores, got {n}")
    k = (TPR_PERCENT * n + 99) // 100
    return float(np.sort(s)[n - k])


def fpr_at_95tpr(id_scores, ood_scores):
    lam = tpr95_threshold(id_scores)
    o = _side(ood_scores, "OOD")
    return float(np.count_nonzero(o >= lam) / o.size)


def auroc(id_scores, ood_scores):
    """Mann-Whitney AUROC (ID positive) with midrank ties."""
    a = _side(id_scores, "ID")
    b = _side(ood_scores, "OOD")
    ranks = rankdata(np.concatenate([a, b]), method="average")
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def decide(score, lam):
    return "ID" if score >= lam else "OOD"


# --- report --------------------------------------------------------------


@dataclass
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: dict = field(default_factory=dict)


@dataclass
class DetectionReport:
    ood: dict  # scorer -> set -> {fpr95, auroc, separability_deg}
    id: dict  # dispersion_deg, compactness_deg, probe_accuracy
    metadata: dict

    def to_dict(self):
        return {"id": self.id, "metadata": self.metadata, "ood": self.ood}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(d["ood"], d["id"], d["metadata"])

    def table(self):
        """Aligned text table: one row per (scorer, OOD set) plus an average row."""
        head = f"{'scorer':<12} {'ood set':<14} {'FPR95':>8} {'AUROC':>8} {'sep(deg)':>9}"
        rows = [head, "-" * len(head)]
        for scorer in sorted(self.ood):
            sets = self.ood[scorer]
            for name in sorted(sets):
                m = sets[name]
                rows.append(
                    f"{scorer:<12} {name:<14} {100 * m['fpr95']:>8.2f} {100 * m['auroc']:>8.2f} {m['separability_deg']:>9.2f}"
                )
            if len(sets) > 1:
                avg = {k: np.mean([sets[n][k] for n in sets]) for k in ("fpr95", "auroc", "separability_deg")}
                rows.append(
                    f"{scorer:<12} {'AVG':<14} {100 * avg['fpr95']:>8.2f} {100 * avg['auroc']:>8.2f} {avg['separability_deg']:>9.2f}"
                )
        i = self.id
        rows.append("")
        rows.append(
            f"ID: dispersion {i['dispersion_deg']:.2f} deg  compactness {i['compactness_deg']:.2f} deg  "
            f"ID ACC {100 * i['probe_accuracy']:.2f}"
        )
        return "\n".join(rows)


def detection_metrics(scores: ScoreSet):
    return {name: {"fpr95": fpr_at_95tpr(scores.id_scores, o), "auroc": auroc(scores.id_scores, o)} for name, o in scores.ood_scores.items()}
