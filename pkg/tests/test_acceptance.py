"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary.
Benchmark runs are cached per (loss, seed) so the ablation reuses the CIDER
runs of the benchmark comparison; each criterion's runtime is the sum of the
runs it depends on.
"""

import math
import os
import time

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES, unit_rows
from hypood.cli import main
from hypood.config import default_config
from hypood.datagen import make_benchmark
from hypood.encoder import Encoder, MlpSpec, grad_check
from hypood.evaluation import (
    auroc,
    compactness_metric,
    dispersion_metric,
    fpr_at_95tpr,
    mahalanobis_score,
    separability_metric,
)
from hypood.numerics import mahalanobis_quadform, raw_shared_covariance, shared_covariance
from hypood.objectives import LossConfig, dispersion_loss
from hypood.pipeline import evaluate_stage, read_embeddings, read_scores, train_stage
from hypood.prototypes import PrototypeBank, ema_batch, from_embeddings, random_init
from hypood.trainer import TrainConfig, initial_prototypes, make_objective, train

SEEDS = range(5)
CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "configs", "benchmark.ini")


def record(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# --- 1. gradient exactness ----------------------------------------------

GRAD_CASES = {
    "dispersion": LossConfig("dis_only"),
    "compactness": LossConfig("comp_only"),
    "cider_coupled": LossConfig("cider", detach_prototypes=False),
    "cider_detached": LossConfig("cider", detach_prototypes=True),
    "cross_entropy": LossConfig("ce"),
    "supcon": LossConfig("supcon"),
}


def grad_instance(kind, i):
    rng = np.random.default_rng([7, i])
    C = int(rng.integers(2, 7))
    d = int(rng.integers(2, 17))
    b = 2 * int(rng.integers(2, 9))
    spec = MlpSpec(input_dim=4, hidden_dims=(6,), penultimate_dim=6, proj_dim=d, n_classes=C if kind == "cross_entropy" else 0)
    enc = Encoder.init(spec, seed=i)
    for bias in enc.params[1::2]:
        bias[...] = rng.normal(0.0, 0.1, size=bias.shape)
    X = rng.normal(size=(b, 4))
    # redraw inputs whose penultimate layer is entirely inactive
    for _ in range(100):
        pen = np.maximum(np.maximum(X @ enc.params[0] + enc.params[1], 0) @ enc.params[2] + enc.params[3], 0)
        dead = ~np.any(pen > 0, axis=1)
        if not dead.any():
            break
        X[dead] = rng.normal(size=(int(dead.sum()), 4))
    y = rng.permutation(np.repeat(rng.integers(0, C, size=b // 2), 2))
    bank = random_init(C, d, seed=i, alpha=0.9)
    return enc, X, y, bank


def grad_objective(enc, X, y, bank, cfg):
    """Objective whose true derivative the analytic gradient should equal.

    With detached prototypes the reference function treats the post-update
    prototypes of this batch as constants (stop-gradient), so finite
    differences run against a frozen copy while the analytic gradient comes
    from the live detached computation.
    """
    live = make_objective(y, bank, cfg)
    if not cfg.detach_prototypes:
        return live
    after = bank.copy()
    ema_batch(after, enc.forward(X).z, y)
    frozen = make_objective(y, PrototypeBank(after.vectors, alpha=1.0), cfg)
    _, grads = live(enc, X)

    def loss_fn(e, Xv):
        value, _ = frozen(e, Xv)
        return value, grads

    return loss_fn


def test_gradients_exact():
    t0 = time.perf_counter()
    worst = {}
    for kind, cfg in GRAD_CASES.items():
        errs = []
        for i in range(20):
            enc, X, y, bank = grad_instance(kind, i)
            rep = grad_check(enc, grad_objective(enc, X, y, bank, cfg), X, step=1e-5, max_coords=10_000)
            assert rep.n_checked == enc.n_params
            errs.append(rep.worst_rel_error)
        worst[kind] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    assert record(1, "finite-difference gradients (max rel err < 1e-4, < 30 s)", ok, detail)


# --- 2. metric oracles --------------------------------------------------


def test_metric_oracles():
    t0 = time.perf_counter()
    worst = dict(dispersion=0.0, compactness=0.0, separability=0.0, covariance=0.0, quadform=0.0)
    for i in range(50):
        rng = np.random.default_rng([11, i])
        C, d = int(rng.integers(2, 7)), int(rng.integers(2, 9))
        n = int(rng.integers(2 * d + 2, 60))
        M = unit_rows(rng, C, d)
        Z = unit_rows(rng, n, d)
        y = rng.integers(0, C, n)
        O = unit_rows(rng, int(rng.integers(1, 40)), d)
        Ml, Zl = M.tolist(), Z.tolist()
        c, a = dispersion_metric(M)
        ref = oracles.dispersion_metric(Ml)
        worst["dispersion"] = max(worst["dispersion"], abs(c - ref), abs(a - oracles.deg(ref)))
        c, a = compactness_metric(Z, y, M)
        ref = oracles.compactness_metric(Zl, y.tolist(), Ml)
        worst["compactness"] = max(worst["compactness"], abs(c - ref), abs(a - oracles.deg(ref)))
        got = separability_metric(Z, O, M)
        worst["separability"] = max(worst["separability"], abs(got - oracles.separability_deg(Zl, O.tolist(), Ml)))
        S = raw_shared_covariance(Z, y, M)
        worst["covariance"] = max(worst["covariance"], float(np.abs(S - np.array(oracles.covariance(Zl, y.tolist(), Ml))).max()))
        S = shared_covariance(Z, y, M)
        diff = Z[0] - M[y[0]]
        q, qref = mahalanobis_quadform(S, diff), oracles.quadform(S.tolist(), diff.tolist())
        worst["quadform"] = max(worst["quadform"], abs(q - qref) / max(1.0, abs(qref)))
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-10 for v in worst.values()) and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.2f}s"
    assert record(2, "diagnostics and Mahalanobis match loop oracles (<= 1e-10, < 10 s)", ok, detail)


# --- 3. detection metrics -----------------------------------------------


def test_detection_metric_oracles():
    t0 = time.perf_counter()
    bad_auroc = bad_fpr = 0
    for i in range(100):
        rng = np.random.default_rng([13, i])
        n_id, n_ood = int(rng.integers(20, 201)), int(rng.integers(1, 201))
        if i % 2:
            a, b = rng.integers(0, 15, n_id).astype(float), rng.integers(0, 15, n_ood).astype(float)
        else:
            a, b = rng.normal(size=n_id), rng.normal(0.7, 1.0, size=n_ood)
        bad_auroc += auroc(a, b) != oracles.pairwise_auroc(a.tolist(), b.tolist())
        bad_fpr += fpr_at_95tpr(a, b) != oracles.sweep_fpr95(a.tolist(), b.tolist())
    elapsed = time.perf_counter() - t0
    ok = bad_auroc == 0 and bad_fpr == 0 and elapsed < 10
    detail = f"AUROC mismatches {bad_auroc}/100, FPR95 mismatches {bad_fpr}/100; {elapsed:.2f}s"
    assert record(3, "AUROC and FPR95 equal exhaustive oracles exactly (< 10 s)", ok, detail)


# --- 4. closed-form anchors ---------------------------------------------


def test_closed_form_anchors():
    M = np.array([[math.cos(2 * math.pi * k / 3), math.sin(2 * math.pi * k / 3)] for k in range(3)])
    deg = dispersion_metric(M)[1]
    loss = dispersion_loss(M, tau=0.1).value
    rng = np.random.default_rng(17)
    P = unit_rows(rng, 4, 5)
    Z = unit_rows(rng, 30, 5)
    got = mahalanobis_score(Z, P, np.eye(5))
    want = -np.min(((Z[:, None, :] - P[None]) ** 2).sum(axis=2), axis=1)
    maha = float(np.abs(got - want).max())
    ok = abs(deg - 120.0) <= 1e-9 and abs(loss + 5.0) <= 1e-9 and maha <= 1e-12
    detail = f"dispersion {deg:.12f} deg, L_dis {loss:.12f}, identity-Mahalanobis err {maha:.1e}"
    assert record(4, "equiangular prototypes and identity-covariance Mahalanobis", ok, detail)


# --- 5/6. benchmark runs ------------------------------------------------

_RUNS = {}


def benchmark_run(loss, seed):
    """Train and evaluate one (loss, seed) benchmark point; cached."""
    key = (loss, seed)
    if key not in _RUNS:
        t0 = time.perf_counter()
        cfg = default_config()
        cfg.set("data.seed", str(seed))
        cfg.set("train.seed", str(seed))
        cfg.set("train.loss", loss)
        cfg.set("eval.scorers", "mahalanobis")
        train_set, test_set, oods = make_benchmark(seed, ood_modes=("between",))
        encoder, bank, _ = train_stage(cfg, train_set)
        ev = evaluate_stage(cfg, encoder, bank, train_set, test_set, oods)
        r = ev.report
        _RUNS[key] = dict(
            dispersion=r.id["dispersion_deg"],
            probe=r.id["probe_accuracy"],
            auroc=r.ood["mahalanobis"]["between"]["auroc"],
            seconds=time.perf_counter() - t0,
        )
    return _RUNS[key]


def medians(loss):
    runs = [benchmark_run(loss, s) for s in SEEDS]
    return {k: float(np.median([r[k] for r in runs])) for k in ("dispersion", "probe", "auroc")}, sum(r["seconds"] for r in runs)


@pytest.mark.slow
def test_benchmark_cider_vs_ce():
    cider, t1 = medians("cider")
    ce, t2 = medians("ce")
    d_disp = cider["dispersion"] - ce["dispersion"]
    d_auroc = cider["auroc"] - ce["auroc"]
    elapsed = t1 + t2
    ok = d_disp >= 10.0 and d_auroc >= 0.05 and elapsed < 300
    detail = (
        f"dispersion {cider['dispersion']:.2f} vs {ce['dispersion']:.2f} deg (gap {d_disp:.2f} >= 10: {d_disp >= 10}), "
        f"Mahalanobis AUROC {cider['auroc']:.4f} vs {ce['auroc']:.4f} (gap {d_auroc:.4f} >= 0.05: {d_auroc >= 0.05}); {elapsed:.0f}s"
    )
    assert record(5, "benchmark: CIDER vs cross-entropy (medians over 5 seeds, < 5 min)", ok, detail)


@pytest.mark.slow
def test_ablation():
    dis, t1 = medians("dis_only")
    comp, t2 = medians("comp_only")
    cider, t3 = medians("cider")
    elapsed = t1 + t2 + t3
    chance = 1.0 / 4
    c_dis = abs(dis["probe"] - chance) <= 0.10
    c_comp = comp["probe"] >= 0.9
    c_auc = cider["auroc"] >= comp["auroc"]
    ok = c_dis and c_comp and c_auc and elapsed < 480
    detail = (
        f"dis_only probe {dis['probe']:.4f} within 0.10 of {chance}: {c_dis}, "
        f"comp_only probe {comp['probe']:.4f} >= 0.9: {c_comp}, "
        f"AUROC cider {cider['auroc']:.4f} >= comp_only {comp['auroc']:.4f}: {c_auc}; {elapsed:.0f}s"
    )
    assert record(6, "ablation (medians over 5 seeds, < 8 min)", ok, detail)


# --- 7. sphere invariants -----------------------------------------------


@pytest.mark.slow
def test_unit_norm_invariants():
    train_set, _, _ = make_benchmark(0)
    spec = MlpSpec(input_dim=train_set.dim)
    worst = [0.0, 0.0]

    def check(step, z, bank):
        worst[0] = max(worst[0], float(np.abs(np.linalg.norm(z, axis=1) - 1.0).max()))
        worst[1] = max(worst[1], bank.max_norm_deviation())

    _, _, hist = train(Encoder.init(spec, 0), train_set, TrainConfig(epochs=50), on_step=check)
    cfg = TrainConfig(epochs=50, prototype_alpha=1.0)
    enc = Encoder.init(spec, 0)
    init_bank = initial_prototypes(enc.copy(), train_set, cfg)
    _, bank, _ = train(enc, train_set, cfg)
    frozen = np.array_equal(bank.vectors, init_bank.vectors)
    ok = len(hist) == 50 and worst[0] <= 1e-8 and worst[1] <= 1e-8 and frozen
    detail = f"max embedding norm dev {worst[0]:.1e}, max prototype norm dev {worst[1]:.1e}, alpha=1 bit-identical: {frozen}"
    assert record(7, "unit norm after every step; alpha=1 freezes prototypes", ok, detail)


# --- 8. reproducible reports --------------------------------------------


@pytest.mark.slow
def test_reproducible_report(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["run", "--config", CONFIG_PATH, "--out", out]) == 0
        outs.append(out)
    docs = [open(os.path.join(o, "report.json"), "rb").read() for o in outs]
    identical = docs[0] == docs[1]

    import json

    rep = json.loads(docs[0])
    emb = read_embeddings(os.path.join(outs[0], "embeddings.csv"))
    Ztr, ytr = emb["id_train"]
    ref = from_embeddings(Ztr, ytr, int(ytr.max()) + 1)
    mismatches = []
    if dispersion_metric(ref)[1] != rep["id"]["dispersion_deg"]:
        mismatches.append("dispersion")
    if compactness_metric(Ztr, ytr, ref)[1] != rep["id"]["compactness_deg"]:
        mismatches.append("compactness")
    n_fields = 2
    for scorer, sets in rep["ood"].items():
        s = read_scores(os.path.join(outs[0], f"scores_{scorer}.csv"))
        for name, m in sets.items():
            checks = {
                "auroc": auroc(s["id_test"], s[name]),
                "fpr95": fpr_at_95tpr(s["id_test"], s[name]),
                "separability_deg": separability_metric(emb["id_test"][0], emb[name][0], ref),
            }
            for k, v in checks.items():
                n_fields += 1
                if v != m[k]:
                    mismatches.append(f"{scorer}/{name}/{k}")
    ok = identical and not mismatches
    detail = f"byte-identical reports: {identical}, {n_fields - len(mismatches)}/{n_fields} fields recomputed exactly"
    assert record(8, "same config and seed give identical, recomputable reports", ok, detail)
