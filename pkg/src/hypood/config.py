"""INI experiment configuration with typed fields and materialized defaults.

Sections are ``[data]``, ``[model]``, ``[train]``, ``[eval]`` and
``[output]``.  Every key has a default; unknown keys are rejected so typos
surface as :class:`ConfigError` with the offending ``section.key``.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import io
import os

from .datagen import BENCHMARK
from .encoder import MlpSpec
from .errors import ConfigError, HypoodError
from .objectives import KINDS, LossConfig
from .trainer import TrainConfig

SCORERS = ("mahalanobis", "max_cosine", "msp")
OOD_MODES = ("between", "heldout", "uniform")


def _int_list(s):
    return [int(x) for x in s.split(",") if x.strip()]


def _str_list(s):
    return [x.strip() for x in s.split(",") if x.strip()]


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


# section -> key -> (parser, default)
SCHEMA = {
    "data": {
        "source": (str, "synthetic"),
        "seed": (int, 0),
        "n_classes": (int, BENCHMARK["n_classes"]),
        "input_dim": (int, BENCHMARK["input_dim"]),
        "n_train_per_class": (int, BENCHMARK["n_train_per_class"]),
        "n_test_per_class": (int, BENCHMARK["n_test_per_class"]),
        "separation": (float, BENCHMARK["separation"]),
        "noise_sigma": (float, BENCHMARK["noise_sigma"]),
        "ood_modes": (_str_list, ["between"]),
        "ood_noise_sigma": (float, BENCHMARK["ood_noise_sigma"]),
        "ood_size": (int, 0),
        "train_csv": (str, ""),
        "test_csv": (str, ""),
        "ood_csv": (_str_list, []),
    },
    "model": {
        "hidden_dims": (_int_list, [64, 64]),
        "penultimate_dim": (int, 64),
        "proj_hidden_dims": (_int_list, []),
        "proj_dim": (int, 16),
        "classifier": (str, "auto"),
    },
    "train": {
        "epochs": (int, 50),
        "batch_size": (int, 128),
        "lr0": (float, 0.05),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-4),
        "schedule": (str, "cosine"),
        "seed": (int, 0),
        "prototype_alpha": (float, 0.95),
        "prototype_update": (str, "per_sample"),
        "prototype_init": (str, "data"),
        "aug_noise_sigma": (float, 0.1),
        "aug_scale_lo": (float, 0.8),
        "aug_scale_hi": (float, 1.2),
        "loss": (str, "cider"),
        "tau": (float, 0.1),
        "lambda_c": (float, 2.0),
        "lambda_d": (float, 1.0),
        "detach_prototypes": (_bool, False),
        "mean_reduce": (_bool, True),
    },
    "eval": {
        "scorers": (_str_list, list(SCORERS)),
        "subsample_seed": (int, 0),
        "feature_space": (str, "projection"),
        "prototypes": (str, "class_mean"),
        "separability_mode": (str, "angles"),
        "compactness_weighting": (str, "sample"),
        "probe_l2": (float, 1e-4),
        "probe_iters": (int, 500),
        "probe_step": (float, 0.1),
    },
    "output": {
        "dir": (str, "runs/default"),
    },
}

CHOICES = {
    ("data", "source"): ("synthetic", "csv"),
    ("model", "classifier"): ("auto", "yes", "no"),
    ("train", "loss"): KINDS,
    ("eval", "feature_space"): ("projection", "penultimate"),
    ("eval", "prototypes"): ("class_mean", "trained"),
    ("eval", "separability_mode"): ("angles", "aggregate", "cosine"),
    ("eval", "compactness_weighting"): ("sample", "class"),
}


class ExperimentConfig:
    """Resolved configuration: ``cfg[section][key]`` with every default filled in."""

    def __init__(self, values, base_dir="."):
        self.values = values
        self.base_dir = base_dir

    def __getitem__(self, section):
        return self.values[section]

    def copy(self):
        return ExperimentConfig(copy.deepcopy(self.values), self.base_dir)

    def set(self, dotted, raw):
        section, key = dotted.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(dotted, "unknown field")
        parser = SCHEMA[section][key][0]
        try:
            self.values[section][key] = parser(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(dotted, str(exc)) from None
        validate(self)

    def resolve_path(self, p):
        return p if os.path.isabs(p) else os.path.abspath(os.path.join(self.base_dir, p))

    # -- derived objects --

    def loss_config(self):
        t = self["train"]
        return LossConfig(t["loss"], t["tau"], t["lambda_c"], t["lambda_d"], t["detach_prototypes"], t["mean_reduce"])

    def train_config(self):
        t = self["train"]
        return TrainConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            lr0=t["lr0"],
            momentum=t["momentum"],
            weight_decay=t["weight_decay"],
            schedule=t["schedule"],
            seed=t["seed"],
            prototype_alpha=t["prototype_alpha"],
            prototype_update=t["prototype_update"],
            prototype_init=t["prototype_init"],
            aug_noise_sigma=t["aug_noise_sigma"],
            aug_scale_lo=t["aug_scale_lo"],
            aug_scale_hi=t["aug_scale_hi"],
            loss=self.loss_config(),
        )

    def mlp_spec(self, input_dim, n_classes):
        m = self["model"]
        want = m["classifier"] == "yes" or (m["classifier"] == "auto" and self.loss_config().uses_ce)
        return MlpSpec(input_dim, tuple(m["hidden_dims"]), m["penultimate_dim"], tuple(m["proj_hidden_dims"]), m["proj_dim"], n_classes if want else 0)

    def to_ini(self, sections=None):
        lines = []
        for section, keys in SCHEMA.items():
            if sections is not None and section not in sections:
                continue
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_fmt(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        """Hash of everything that affects results (the output location does not)."""
        text = self.to_ini(sections=("data", "model", "train", "eval"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def parse_config(text, base_dir=".", source="<config>"):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_file(io.StringIO(text), source=source)
    except configparser.Error as exc:
        raise ConfigError(source, str(exc).splitlines()[0]) from None
    values = {s: {k: copy.deepcopy(d) for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown field")
            parser = SCHEMA[section][key][0]
            try:
                values[section][key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}", str(exc)) from None
    cfg = ExperimentConfig(values, base_dir)
    validate(cfg)
    # input paths are pinned at load time so snapshots and digests do not depend on cwd
    d = values["data"]
    for key in ("train_csv", "test_csv"):
        if d[key]:
            d[key] = cfg.resolve_path(d[key])
    d["ood_csv"] = [f"{n.strip()}={cfg.resolve_path(p.strip())}" for n, p in (item.split("=", 1) for item in d["ood_csv"])]
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    return parse_config(text, os.path.dirname(os.path.abspath(path)), str(path))


def default_config():
    return parse_config("")


def validate(cfg: ExperimentConfig):
    for (section, key), allowed in CHOICES.items():
        if cfg[section][key] not in allowed:
            raise ConfigError(f"{section}.{key}", f"must be one of {allowed}, got {cfg[section][key]!r}")
    for s in cfg["eval"]["scorers"]:
        if s not in SCORERS:
            raise ConfigError("eval.scorers", f"unknown scorer {s!r}")
    if not cfg["eval"]["scorers"]:
        raise ConfigError("eval.scorers", "at least one scorer is required")
    d = cfg["data"]
    if d["source"] == "synthetic":
        for m in d["ood_modes"]:
            if m not in OOD_MODES:
                raise ConfigError("data.ood_modes", f"unknown OOD mode {m!r}")
    else:
        if not d["train_csv"] or not d["test_csv"]:
            raise ConfigError("data.train_csv", "csv source needs train_csv and test_csv")
        for item in d["ood_csv"]:
            if "=" not in item:
                raise ConfigError("data.ood_csv", f"expected name=path, got {item!r}")
    if cfg["eval"]["prototypes"] == "trained" and cfg["eval"]["feature_space"] != "projection":
        raise ConfigError("eval.prototypes", "trained prototypes live in the projection space")
    try:
        cfg.train_config()
    except HypoodError as exc:
        raise ConfigError("train", str(exc)) from None
