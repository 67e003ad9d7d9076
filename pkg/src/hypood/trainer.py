"""Two-view prototype training loop, SGD with momentum, and the linear probe."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import prototypes as protos
from .datagen import augment
from .errors import DimMismatch, InvalidParam, NonFiniteLoss, NumericError
from .evaluation import dispersion_metric
from .objectives import LossConfig, combined_loss
from .rng import make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    seed: int = 0
    prototype_alpha: float = 0.95
    prototype_update: str = "per_sample"
    prototype_init: str = "data"
    aug_noise_sigma: float = 0.1
    aug_scale_lo: float = 0.8
    aug_scale_hi: float = 1.2
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidParam("epochs must be >= 0 and batch_size >= 1")
        if not self.lr0 > 0:
            raise InvalidParam("lr0 must be > 0")
        if not 0 <= self.momentum < 1:
            raise InvalidParam("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidParam("weight_decay must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise InvalidParam(f"unknown schedule {self.schedule!r}")
        if self.prototype_update not in ("per_sample", "per_batch"):
            raise InvalidParam(f"unknown prototype_update {self.prototype_update!r}")
        if self.prototype_init not in ("data", "random"):
            raise InvalidParam(f"unknown prototype_init {self.prototype_init!r}")
        if not 0 <= self.prototype_alpha <= 1:
            raise InvalidParam("prototype_alpha must lie in [0, 1]")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    dispersion_deg: list = field(default_factory=list)
    compactness_deg: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def to_csv(self, path):
        lines = ["epoch,loss,lr,dispersion_deg,compactness_deg,seconds"]
        for e in range(len(self)):
            vals = (self.loss[e], self.lr[e], self.dispersion_deg[e], self.compactness_deg[e], self.seconds[e])
            lines.append(",".join([str(e + 1)] + [format(v, ".17g") for v in vals]))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def cosine_lr(t, T, lr0):
    """``lr0 * (1 + cos(pi * t / T)) / 2`` for ``0 <= t <= T``."""
    if T < 1 or not 0 <= t <= T:
        raise InvalidParam(f"cosine_lr needs T >= 1 and 0 <= t <= T (t={t}, T={T})")
    if t == T:
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / T))


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """In-place SGD with momentum and L2 weight decay.

    ``g = grad + wd * w;  v = momentum * v + g;  w = w - lr * v``
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise DimMismatch("params, grads and velocity must have equal length")
    for w, g, v in zip(params, grads, velocity):
        if w.shape != v.shape or (g is not None and g.shape != w.shape):
            raise DimMismatch(f"shape mismatch: w{w.shape} g{None if g is None else g.shape} v{v.shape}")
        step = weight_decay * w if g is None else g + weight_decay * w
        v *= momentum
        v += step
        w -= lr * v


@dataclass
class BatchResult:
    value: float
    grads: list
    z: np.ndarray
    losses: object = None


def batch_objective(encoder, X, labels, bank, config: LossConfig, update="per_sample"):
    """Forward, EMA prototype updates (in place on ``bank``), loss, backward.

    The loss sees the post-update prototypes.  Unless
    ``config.detach_prototypes`` is set, the prototype gradient is chained
    through the EMA updates of this batch onto the embeddings.
    """
    out = encoder.forward(X)
    trace = protos.ema_batch(bank, out.z, labels, update)
    loss = combined_loss(config, out.z, labels, bank, out.logits)
    if not np.isfinite(loss.value):
        raise NonFiniteLoss(f"loss is {loss.value}")
    dz = np.zeros_like(out.z) if loss.grad_z is None else loss.grad_z.copy()
    if loss.grad_proto is not None and not config.detach_prototypes:
        dz += protos.ema_backward(trace, loss.grad_proto)
    grads, _ = encoder.backward(out.cache, dz=dz, dlogits=loss.grad_logits)
    return BatchResult(loss.value, grads, out.z, loss)


def make_objective(labels, bank, config: LossConfig, update="per_sample"):
    """``loss_fn(encoder, X)`` for :func:`hypood.encoder.grad_check`.

    Every call restarts from a copy of ``bank`` so values are reproducible.
    """

    def loss_fn(encoder, X):
        res = batch_objective(encoder, X, labels, bank.copy(), config, update)
        return res.value, res.grads

    return loss_fn


def initial_prototypes(encoder, dataset, config: TrainConfig):
    if config.prototype_init == "random":
        return protos.random_init(dataset.n_classes, encoder.spec.proj_dim, config.seed, config.prototype_alpha)
    return protos.init_from_data(encoder, dataset, config.prototype_alpha)


def train(encoder, dataset, config: TrainConfig, on_step=None):
    """Run the prototype training loop; returns ``(encoder, bank, history)``.

    ``encoder`` is trained in place.  ``on_step(step, z, bank)`` is invoked
    after every optimizer step with the batch embeddings and the current
    bank.  The final partial batch of an epoch is processed.
    """
    if encoder.spec.input_dim != dataset.dim:
        raise DimMismatch(f"encoder expects dim {encoder.spec.input_dim}, data has {dataset.dim}")
    if config.loss.uses_ce and encoder.spec.n_classes != dataset.n_classes:
        raise InvalidParam(f"loss kind {config.loss.kind!r} needs a {dataset.n_classes}-way classifier head")
    dataset.require_all_classes()
    bank = initial_prototypes(encoder, dataset, config)
    history = TrainHistory()
    if config.epochs == 0:
        return encoder, bank, history

    n = len(dataset)
    n_batches = math.ceil(n / config.batch_size)
    total = config.epochs * n_batches
    velocity = [np.zeros_like(p) for p in encoder.params]
    shuffle_rng = make_rng(config.seed, "shuffle")
    aug_rng = make_rng(config.seed, "augment")
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        loss_sum, cos_sum, count = 0.0, 0.0, 0
        lr_epoch = None
        for k in range(n_batches):
            idx = order[k * config.batch_size : (k + 1) * config.batch_size]
            X, y = dataset.features[idx], dataset.labels[idx]
            v1, v2 = augment(X, config.aug_noise_sigma, config.aug_scale_lo, config.aug_scale_hi, aug_rng)
            Xv = np.concatenate([v1, v2])
            yv = np.concatenate([y, y])
            res = batch_objective(encoder, Xv, yv, bank, config.loss, config.prototype_update)
            lr = cosine_lr(step, total, config.lr0) if config.schedule == "cosine" else config.lr0
            if lr_epoch is None:
                lr_epoch = lr
            sgd_step(encoder.params, res.grads, velocity, lr, config.momentum, config.weight_decay)
            encoder.bump()
            fixed = protos.renormalize_guard(bank)
            if fixed:
                log.debug("re-normalized %d prototypes at step %d", fixed, step)
            loss_sum += res.value
            cos_sum += float(np.einsum("ij,ij->", res.z, bank.vectors[yv]))
            count += yv.size
            step += 1
            if on_step is not None:
                on_step(step, res.z, bank)
        dev = bank.max_norm_deviation()
        if dev > 1e-8:
            raise NumericError(f"prototype norm drifted by {dev:.3g} at epoch {epoch + 1}")
        history.loss.append(loss_sum / n_batches)
        history.lr.append(lr_epoch)
        history.dispersion_deg.append(dispersion_metric(bank)[1])
        history.compactness_deg.append(math.degrees(math.acos(min(1.0, max(-1.0, cos_sum / count)))))
        history.seconds.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.5f lr %.4g disp %.2f deg", epoch + 1, history.loss[-1], lr_epoch, history.dispersion_deg[-1])
    return encoder, bank, history


# --- linear probe --------------------------------------------------------


@dataclass
class LinearProbe:
    weight: np.ndarray  # C x e
    bias: np.ndarray  # C
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    feature_space: str = "penultimate"

    def logits(self, features):
        F = (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_scale
        return F @ self.weight.T + self.bias

    def predict(self, features):
        return np.argmax(self.logits(features), axis=1)


def fit_logistic(F, y, n_classes, l2_penalty=1e-4, max_iters=500, step=0.1):
    """Multinomial logistic regression by fixed-step full-batch gradient descent."""
    n, e = F.shape
    W = np.zeros((n_classes, e))
    b = np.zeros(n_classes)
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0
    for _ in range(max_iters):
        L = F @ W.T + b
        L -= L.max(axis=1, keepdims=True)
        P = np.exp(L)
        P /= P.sum(axis=1, keepdims=True)
        G = (P - Y) / n
        W -= step * (G.T @ F + l2_penalty * W)
        b -= step * G.sum(axis=0)
    return W, b


def train_linear_probe(features, labels, n_classes=None, l2_penalty=1e-4, max_iters=500, step=0.1, seed=0):
    """Fit a linear probe on 80% of the rows and score top-1 accuracy on the rest.

    Features are standardized with the training-fold statistics (constant
    columns keep scale 1) so the fixed step stays stable.
    """
    F = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    C = int(y.max()) + 1 if n_classes is None else int(n_classes)
    n = F.shape[0]
    if n < C or n < 2 or y.shape != (n,):
        raise InvalidParam(f"probe needs n >= C labelled rows (n={n}, C={C})")
    if max_iters < 0 or step <= 0 or l2_penalty < 0:
        raise InvalidParam("probe needs max_iters >= 0, step > 0, l2_penalty >= 0")
    perm = make_rng(seed, "probe-split").permutation(n)
    n_train = max(1, min(n - 1, int(round(0.8 * n))))
    tr, te = perm[:n_train], perm[n_train:]
    mean = F[tr].mean(axis=0)
    scale = F[tr].std(axis=0)
    scale[scale < 1e-12] = 1.0
    Ftr = (F[tr] - mean) / scale
    W, b = fit_logistic(Ftr, y[tr], C, l2_penalty, max_iters, step)
    probe = LinearProbe(W, b, mean, scale)
    acc = float(np.mean(probe.predict(F[te]) == y[te]))
    return probe, acc
