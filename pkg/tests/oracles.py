"""Independent reference computations written as plain scalar loops.

Nothing here imports from ``hypood``; the point is to check the vectorized
implementations against code that shares none of their structure.
"""

import math


def dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def clamp(c):
    return min(1.0, max(-1.0, c))


def deg(c):
    return math.degrees(math.acos(clamp(c)))


def dispersion_loss(M, tau):
    C = len(M)
    total = 0.0
    for i in range(C):
        acc = 0.0
        for j in range(C):
            if j != i:
                acc += math.exp(dot(M[i], M[j]) / tau)
        total += math.log(acc / (C - 1))
    return total / C


def compactness_loss(Z, y, M, tau, mean=False):
    total = 0.0
    for z, c in zip(Z, y):
        denom = sum(math.exp(dot(z, m) / tau) for m in M)
        total += -math.log(math.exp(dot(z, M[c]) / tau) / denom)
    return total / len(Z) if mean else total


def cross_entropy(logits, y):
    total = 0.0
    for row, c in zip(logits, y):
        mx = max(row)
        denom = sum(math.exp(v - mx) for v in row)
        total += -((row[c] - mx) - math.log(denom))
    return total / len(logits)


def supcon(Z, y, tau, mean=False):
    N = len(Z)
    total = 0.0
    for i in range(N):
        denom = sum(math.exp(dot(Z[i], Z[a]) / tau) for a in range(N) if a != i)
        pos = [p for p in range(N) if p != i and y[p] == y[i]]
        s = 0.0
        for p in pos:
            s += math.log(math.exp(dot(Z[i], Z[p]) / tau) / denom)
        total += -s / len(pos)
    return total / N if mean else total


def dispersion_metric(M):
    C = len(M)
    s = 0.0
    for i in range(C):
        for j in range(C):
            if i != j:
                s += dot(M[i], M[j])
    return s / (C * (C - 1))


def compactness_metric(Z, y, M):
    return sum(dot(z, M[c]) for z, c in zip(Z, y)) / len(Z)


def separability_deg(id_z, ood_z, M):
    def mean_angle(S):
        return sum(deg(max(dot(z, m) for m in M)) for z in S) / len(S)

    return mean_angle(ood_z) - mean_angle(id_z)


def covariance(Z, y, M):
    n, d = len(Z), len(Z[0])
    S = [[0.0] * d for _ in range(d)]
    for i in range(n):
        r = [Z[i][k] - M[y[i]][k] for k in range(d)]
        for a in range(d):
            for b in range(d):
                S[a][b] += r[a] * r[b]
    return [[v / n for v in row] for row in S]


def gauss_jordan_inverse(A):
    n = len(A)
    aug = [list(map(float, A[i])) + [1.0 if j == i else 0.0 for j in range(n)] for i in range(n)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(aug[r][col]))
        aug[col], aug[piv] = aug[piv], aug[col]
        p = aug[col][col]
        aug[col] = [v / p for v in aug[col]]
        for r in range(n):
            if r != col:
                f = aug[r][col]
                aug[r] = [a - f * b for a, b in zip(aug[r], aug[col])]
    return [row[n:] for row in aug]


def quadform(A, diff):
    inv = gauss_jordan_inverse(A)
    d = len(diff)
    return sum(diff[a] * inv[a][b] * diff[b] for a in range(d) for b in range(d))


def mahalanobis_score(z, M, sigma):
    inv = gauss_jordan_inverse(sigma)
    best = math.inf
    for m in M:
        diff = [a - b for a, b in zip(z, m)]
        q = sum(diff[a] * inv[a][b] * diff[b] for a in range(len(z)) for b in range(len(z)))
        best = min(best, q)
    return -best


def pairwise_auroc(id_scores, ood_scores):
    wins = 0.0
    for a in id_scores:
        for b in ood_scores:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(id_scores) * len(ood_scores))


def sweep_fpr95(id_scores, ood_scores):
    """Try every candidate threshold; keep the largest with TPR >= 95%."""
    best = None
    for t in sorted(set(id_scores) | set(ood_scores)):
        hits = sum(1 for s in id_scores if s >= t)
        if hits * 100 >= 95 * len(id_scores) and (best is None or t > best):
            best = t
    return sum(1 for s in ood_scores if s >= best) / len(ood_scores)


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at the nested list/array ``x`` (flattened copy)."""
    import numpy as np

    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        fp = f(x)
        flat[i] = o - h
        fm = f(x)
        flat[i] = o
        gf[i] = (fp - fm) / (2 * h)
    return g
