"""End-to-end experiment orchestration and run artifacts."""

from __future__ import annotations

import contextlib
import hashlib
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass

import numpy as np

from . import prototypes as protos
from .config import ExperimentConfig
from .datagen import load_csv, make_blobs, make_ood, save_csv, stratified_split, subsample
from .encoder import Encoder, load_checkpoint, save_checkpoint
from .errors import ConfigError
from .evaluation import (
    DetectionReport,
    MahalanobisScorer,
    auroc,
    compactness_metric,
    dispersion_metric,
    fpr_at_95tpr,
    max_cosine_score,
    separability_metric,
    softmax_max,
)
from .numerics import normalize_rows, shared_covariance
from .trainer import train, train_linear_probe

log = logging.getLogger(__name__)

ID_TRAIN, ID_TEST = "id_train", "id_test"


@dataclass
class RunArtifacts:
    out_dir: str
    checkpoint: str
    history: str
    scores: dict  # scorer -> path
    embeddings: str
    report: str
    config: str


@dataclass
class Evaluation:
    report: DetectionReport
    scores: dict  # scorer -> {set_name: np.ndarray}
    embeddings: dict  # set_name -> (Z, labels or None)


# --- data ----------------------------------------------------------------


def load_data(cfg: ExperimentConfig):
    """``(train, test, {name: ood})`` with OOD sets capped at the ID test size."""
    d = cfg["data"]
    if d["source"] == "synthetic":
        n_pc = d["n_train_per_class"] + d["n_test_per_class"]
        if d["n_test_per_class"] < 1 or d["n_train_per_class"] < 1:
            raise ConfigError("data.n_test_per_class", "train and test sizes must be >= 1")
        full = make_blobs(d["n_classes"], n_pc, d["input_dim"], d["separation"], d["noise_sigma"], d["seed"])
        train_set, test_set = stratified_split(full, d["n_test_per_class"] / n_pc, d["seed"], names=(ID_TRAIN, ID_TEST))
        m = d["ood_size"] or len(test_set)
        oods = {mode: make_ood(train_set, mode, m, d["ood_noise_sigma"], d["seed"]) for mode in d["ood_modes"]}
    else:
        train_set = load_csv(cfg.resolve_path(d["train_csv"]), name=ID_TRAIN)
        test_set = load_csv(cfg.resolve_path(d["test_csv"]), n_classes=train_set.n_classes, name=ID_TEST)
        oods = {}
        for item in d["ood_csv"]:
            name, path = item.split("=", 1)
            oods[name.strip()] = load_csv(cfg.resolve_path(path.strip()), name=name.strip())
    cap = len(test_set)
    oods = {k: subsample(v, cap, cfg["eval"]["subsample_seed"]) for k, v in oods.items()}
    if not oods:
        raise ConfigError("data", "at least one OOD set is required")
    return train_set, test_set, oods


def data_hash(train_set, test_set, oods):
    h = hashlib.sha256()
    for part in [train_set, test_set, *[oods[k] for k in sorted(oods)]]:
        h.update(part.fingerprint().encode())
    return h.hexdigest()[:16]


def write_data(out_dir, train_set, test_set, oods):
    os.makedirs(out_dir, exist_ok=True)
    save_csv(os.path.join(out_dir, f"{ID_TRAIN}.csv"), train_set)
    save_csv(os.path.join(out_dir, f"{ID_TEST}.csv"), test_set)
    for name, ds in oods.items():
        save_csv(os.path.join(out_dir, f"ood_{name}.csv"), ds)


# --- stages --------------------------------------------------------------


def train_stage(cfg: ExperimentConfig, train_set):
    spec = cfg.mlp_spec(train_set.dim, train_set.n_classes)
    tc = cfg.train_config()
    encoder = Encoder.init(spec, tc.seed)
    return train(encoder, train_set, tc)


def _embed(encoder, X, space):
    out = encoder.forward(X)
    if space == "projection":
        return out.z, out.penultimate
    return normalize_rows(out.penultimate)[0], out.penultimate


def fit_probe(cfg: ExperimentConfig, encoder, train_set):
    pen = encoder.forward(train_set.features).penultimate
    e = cfg["eval"]
    return train_linear_probe(pen, train_set.labels, train_set.n_classes, e["probe_l2"], e["probe_iters"], e["probe_step"], cfg["train"]["seed"])


def evaluate_stage(cfg: ExperimentConfig, encoder, bank, train_set, test_set, oods, metadata=None):
    e = cfg["eval"]
    space = e["feature_space"]
    z_tr, _ = _embed(encoder, train_set.features, space)
    z_te, pen_te = _embed(encoder, test_set.features, space)
    z_ood, pen_ood = {}, {}
    for name, ds in oods.items():
        z_ood[name], pen_ood[name] = _embed(encoder, ds.features, space)

    if e["prototypes"] == "trained":
        ref = bank
    else:
        ref = protos.from_embeddings(z_tr, train_set.labels, train_set.n_classes, bank.alpha)
    probe, probe_acc = fit_probe(cfg, encoder, train_set)

    scores = {}
    for scorer in e["scorers"]:
        if scorer == "mahalanobis":
            fn = MahalanobisScorer(ref, shared_covariance(z_tr, train_set.labels, ref))
            s = {ID_TEST: fn(z_te), **{k: fn(v) for k, v in z_ood.items()}}
        elif scorer == "max_cosine":
            s = {ID_TEST: max_cosine_score(z_te, ref), **{k: max_cosine_score(v, ref) for k, v in z_ood.items()}}
        else:
            msp = lambda pen: softmax_max(probe.logits(pen))  # noqa: E731
            s = {ID_TEST: msp(pen_te), **{k: msp(v) for k, v in pen_ood.items()}}
        scores[scorer] = s

    sep = {name: separability_metric(z_te, z_ood[name], ref, e["separability_mode"]) for name in oods}
    ood_block = {}
    for scorer, s in scores.items():
        ood_block[scorer] = {
            name: {"fpr95": fpr_at_95tpr(s[ID_TEST], s[name]), "auroc": auroc(s[ID_TEST], s[name]), "separability_deg": sep[name]}
            for name in oods
        }
    id_block = {
        "dispersion_deg": dispersion_metric(ref)[1],
        "compactness_deg": compactness_metric(z_tr, train_set.labels, ref, e["compactness_weighting"])[1],
        "probe_accuracy": probe_acc,
    }
    meta = {
        "scorers": list(e["scorers"]),
        "feature_space": space,
        "prototypes": e["prototypes"],
        "seeds": {"data": cfg["data"]["seed"], "train": cfg["train"]["seed"], "subsample": e["subsample_seed"]},
        "data_hash": data_hash(train_set, test_set, oods),
        "config_digest": cfg.digest(),
        "n_id_test": len(test_set),
        "n_ood": {k: len(v) for k, v in oods.items()},
        **(metadata or {}),
    }
    embeddings = {ID_TRAIN: (z_tr, train_set.labels), ID_TEST: (z_te, test_set.labels), **{k: (v, None) for k, v in z_ood.items()}}
    return Evaluation(DetectionReport(ood_block, id_block, meta), scores, embeddings)


# --- artifact writers ----------------------------------------------------


def _f(x):
    return format(float(x), ".17g")


def write_scores(path, per_set):
    lines = ["sample_index,set_name,score"]
    for name, s in per_set.items():
        lines.extend(f"{i},{name},{_f(v)}" for i, v in enumerate(s))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_scores(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            _, name, v = line.rstrip("\n").split(",")
            out.setdefault(name, []).append(float(v))
    return {k: np.array(v) for k, v in out.items()}


def write_embeddings(path, embeddings):
    d = next(iter(embeddings.values()))[0].shape[1]
    lines = ["sample_index,set_name,label," + ",".join(f"z_{k}" for k in range(d))]
    for name, (Z, y) in embeddings.items():
        for i in range(Z.shape[0]):
            label = "-1" if y is None else str(int(y[i]))
            lines.append(f"{i},{name},{label}," + ",".join(_f(v) for v in Z[i]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_embeddings(path):
    rows = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            cells = line.rstrip("\n").split(",")
            rows.setdefault(cells[1], ([], []))
            rows[cells[1]][0].append([float(c) for c in cells[3:]])
            rows[cells[1]][1].append(int(cells[2]))
    return {k: (np.array(z), np.array(y)) for k, (z, y) in rows.items()}


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


@contextlib.contextmanager
def atomic_dir(out_dir):
    """Yield a temp dir that replaces ``out_dir`` only if the block succeeds."""
    out_dir = os.path.abspath(out_dir)
    parent = os.path.dirname(out_dir)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=f".{os.path.basename(out_dir)}.tmp-", dir=parent)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = None
    if os.path.exists(out_dir):
        old = tempfile.mkdtemp(prefix=f".{os.path.basename(out_dir)}.old-", dir=parent)
        os.rmdir(old)
        os.rename(out_dir, old)
    os.rename(tmp, out_dir)
    if old:
        shutil.rmtree(old, ignore_errors=True)


def run_experiment(cfg: ExperimentConfig, out_dir=None):
    """Data -> train -> probe -> evaluate, writing every artifact atomically."""
    out_dir = out_dir or cfg.resolve_path(cfg["output"]["dir"])
    train_set, test_set, oods = load_data(cfg)
    encoder, bank, history = train_stage(cfg, train_set)
    with atomic_dir(out_dir) as tmp:
        ck = os.path.join(tmp, "checkpoint.json")
        save_checkpoint(ck, encoder, bank, extra={"config_digest": cfg.digest()})
        history.to_csv(os.path.join(tmp, "history.csv"))
        ev = evaluate_stage(cfg, encoder, bank, train_set, test_set, oods, {"checkpoint": file_digest(ck)})
        for scorer, per_set in ev.scores.items():
            write_scores(os.path.join(tmp, f"scores_{scorer}.csv"), per_set)
        write_embeddings(os.path.join(tmp, "embeddings.csv"), ev.embeddings)
        ev.report.save(os.path.join(tmp, "report.json"))
        resolved = cfg.copy()
        resolved["output"]["dir"] = out_dir
        with open(os.path.join(tmp, "config.ini"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(resolved.to_ini())
    j = lambda name: os.path.join(out_dir, name)  # noqa: E731
    return RunArtifacts(
        out_dir,
        j("checkpoint.json"),
        j("history.csv"),
        {s: j(f"scores_{s}.csv") for s in cfg["eval"]["scorers"]},
        j("embeddings.csv"),
        j("report.json"),
        j("config.ini"),
    ), ev.report


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint, out_dir):
    """Evaluate a saved checkpoint against the configured data."""
    train_set, test_set, oods = load_data(cfg)
    encoder, bank, _ = load_checkpoint(checkpoint)
    if bank is None:
        bank = protos.init_from_data(encoder, train_set, cfg["train"]["prototype_alpha"])
    with atomic_dir(out_dir) as tmp:
        ev = evaluate_stage(cfg, encoder, bank, train_set, test_set, oods, {"checkpoint": file_digest(checkpoint)})
        for scorer, per_set in ev.scores.items():
            write_scores(os.path.join(tmp, f"scores_{scorer}.csv"), per_set)
        write_embeddings(os.path.join(tmp, "embeddings.csv"), ev.embeddings)
        ev.report.save(os.path.join(tmp, "report.json"))
    return ev.report


SWEEP_AXES = {
    "lambda_c": "train.lambda_c",
    "lr0": "train.lr0",
    "alpha": "train.prototype_alpha",
    "tau": "train.tau",
    "batch_size": "train.batch_size",
}


def sweep(cfg: ExperimentConfig, axis, values, out_dir, max_workers=1):
    """One run per value in its own subdirectory; returns the summary rows.

    A failing point becomes a row with an error message and empty metrics.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .errors import HypoodError

    if axis not in SWEEP_AXES:
        raise ConfigError("sweep.axis", f"must be one of {sorted(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep.values", "at least one value is required")
    scorer = cfg["eval"]["scorers"][0]

    def point(i, value):
        sub = cfg.copy()
        try:
            sub.set(SWEEP_AXES[axis], str(value))
            _, report = run_experiment(sub, os.path.join(out_dir, f"{axis}_{i:03d}"))
        except HypoodError as exc:
            return [{"value": value, "set_name": "", "fpr95": "", "auroc": "", "id_acc": "", "data_hash": "", "error": str(exc).replace(",", ";")}]
        rows = []
        for name, m in sorted(report.ood[scorer].items()):
            rows.append(
                {
                    "value": value,
                    "set_name": name,
                    "fpr95": _f(m["fpr95"]),
                    "auroc": _f(m["auroc"]),
                    "id_acc": _f(report.id["probe_accuracy"]),
                    "data_hash": report.metadata["data_hash"],
                    "error": "",
                }
            )
        return rows

    os.makedirs(out_dir, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        results = list(pool.map(lambda iv: point(*iv), enumerate(values)))
    rows = [r for rs in results for r in rs]
    cols = ["value", "set_name", "fpr95", "auroc", "id_acc", "data_hash", "error"]
    with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) for c in cols) + "\n")
    return rows
