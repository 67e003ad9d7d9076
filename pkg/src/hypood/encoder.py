"""MLP encoder, projection head and output normalization with exact backprop.

The network is ``x -> f(x) (penultimate, relu) -> h(.) -> z~ -> z = z~/||z~||``
with an optional linear classifier on the penultimate features (used by the
cross-entropy objectives).  Weights are stored ``(in, out)`` so a batch is
propagated as ``X @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimMismatch, InvalidParam, IoError, SchemaError, StaleCache, VersionError, ZeroVector
from .numerics import EPS_NORM
from .rng import make_rng

FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int = 16
    hidden_dims: tuple = (64, 64)
    penultimate_dim: int = 64
    proj_hidden_dims: tuple = ()
    proj_dim: int = 16
    n_classes: int = 0
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "proj_hidden_dims", tuple(int(h) for h in self.proj_hidden_dims))
        dims = [self.input_dim, *self.hidden_dims, self.penultimate_dim, *self.proj_hidden_dims]
        if any(d < 1 for d in dims) or self.n_classes < 0:
            raise InvalidParam(f"all layer sizes must be >= 1: {self}")
        if self.proj_dim < 2:
            raise InvalidParam("proj_dim must be >= 2")
        if self.activation != "relu":
            raise InvalidParam(f"unsupported activation {self.activation!r}")

    def layer_shapes(self):
        """``(fan_in, fan_out)`` per layer: encoder, head, then classifier."""
        enc = [self.input_dim, *self.hidden_dims, self.penultimate_dim]
        head = [self.penultimate_dim, *self.proj_hidden_dims, self.proj_dim]
        shapes = list(zip(enc[:-1], enc[1:])) + list(zip(head[:-1], head[1:]))
        if self.n_classes:
            shapes.append((self.penultimate_dim, self.n_classes))
        return shapes

    @property
    def n_encoder_layers(self):
        return len(self.hidden_dims) + 1

    @property
    def n_head_layers(self):
        return len(self.proj_hidden_dims) + 1

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["proj_hidden_dims"] = list(self.proj_hidden_dims)
        return d


@dataclass
class ForwardCache:
    version: int
    inputs: list  # input to each linear layer
    pre: list  # pre-activation of each linear layer
    zt: np.ndarray
    norm: np.ndarray
    z: np.ndarray
    squeeze: bool = False


@dataclass
class ForwardOutput:
    penultimate: np.ndarray
    z: np.ndarray
    logits: np.ndarray | None
    cache: ForwardCache = field(repr=False)


class Encoder:
    """Weights plus spec.  ``params`` is ``[W0, b0, W1, b1, ...]`` in layer order.

    ``version`` must be bumped after any in-place weight change; caches from
    older versions are rejected by :meth:`backward`.
    """

    def __init__(self, spec: MlpSpec, params):
        self.spec = spec
        self.params = [np.asarray(p, dtype=np.float64) for p in params]
        self.version = 0
        self._check_shapes()

    @classmethod
    def init(cls, spec: MlpSpec, seed: int = 0):
        """Kaiming fan-in init: ``W ~ N(0, 2/fan_in)``, zero biases."""
        rng = make_rng(seed, "encoder-init")
        params = []
        for fan_in, fan_out in spec.layer_shapes():
            params.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
            params.append(np.zeros(fan_out))
        return cls(spec, params)

    def _check_shapes(self):
        shapes = self.spec.layer_shapes()
        if len(self.params) != 2 * len(shapes):
            raise SchemaError(f"expected {2 * len(shapes)} parameter arrays, got {len(self.params)}")
        for k, (fi, fo) in enumerate(shapes):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            if W.shape != (fi, fo) or b.shape != (fo,):
                raise SchemaError(f"layer {k}: expected W{(fi, fo)} b{(fo,)}, got W{W.shape} b{b.shape}")

    def bump(self):
        self.version += 1

    def copy(self):
        return Encoder(self.spec, [p.copy() for p in self.params])

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def forward(self, X) -> ForwardOutput:
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.spec.input_dim:
            raise DimMismatch(f"expected input dim {self.spec.input_dim}, got {X.shape[1]}")
        s = self.spec
        inputs, pre = [], []
        a = X
        n_enc, n_head = s.n_encoder_layers, s.n_head_layers
        for k in range(n_enc + n_head):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            inputs.append(a)
            h = a @ W + b
            pre.append(h)
            last_head = k == n_enc + n_head - 1
            a = h if last_head else np.maximum(h, 0.0)
            if k == n_enc - 1:
                pen = a
        zt = a
        norm = np.sqrt(np.einsum("ij,ij->i", zt, zt))
        bad = np.flatnonzero(~(norm > EPS_NORM))
        if bad.size:
            raise ZeroVector(f"projection output vanished for sample {int(bad[0])}")
        z = zt / norm[:, None]
        logits = None
        if s.n_classes:
            Wc, bc = self.params[-2], self.params[-1]
            logits = pen @ Wc + bc
        cache = ForwardCache(self.version, inputs, pre, zt, norm, z, squeeze)
        if squeeze:
            return ForwardOutput(pen[0], z[0], None if logits is None else logits[0], cache)
        return ForwardOutput(pen, z, logits, cache)

    def backward(self, cache: ForwardCache, dz=None, dpen=None, dlogits=None):
        """Gradients of a scalar loss w.r.t. every parameter and the input.

        ``dz``, ``dpen`` and ``dlogits`` are upstream gradients w.r.t. the
        normalized embedding, the penultimate features and the classifier
        logits; any of them may be omitted.
        """
        if cache.version != self.version:
            raise StaleCache(f"cache from weights v{cache.version}, current v{self.version}")
        s = self.spec
        n = cache.z.shape[0]

        def as2d(g, width):
            if g is None:
                return np.zeros((n, width))
            g = np.asarray(g, dtype=np.float64).reshape(n, width)
            return g

        dz = as2d(dz, s.proj_dim)
        grads = [None] * len(self.params)
        n_enc, n_head = s.n_encoder_layers, s.n_head_layers

        z = cache.z
        radial = np.einsum("ij,ij->i", z, dz)
        g = (dz - z * radial[:, None]) / cache.norm[:, None]

        for k in range(n_enc + n_head - 1, n_enc - 1, -1):
            if k != n_enc + n_head - 1:
                g = g * (cache.pre[k] > 0)
            W = self.params[2 * k]
            grads[2 * k] = cache.inputs[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ W.T
        g = g + as2d(dpen, s.penultimate_dim)
        if s.n_classes:
            dl = as2d(dlogits, s.n_classes)
            Wc = self.params[-2]
            pen = cache.inputs[n_enc]
            grads[-2] = pen.T @ dl
            grads[-1] = dl.sum(axis=0)
            g = g + dl @ Wc.T
        for k in range(n_enc - 1, -1, -1):
            g = g * (cache.pre[k] > 0)
            W = self.params[2 * k]
            grads[2 * k] = cache.inputs[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ W.T
        dx = g[0] if cache.squeeze else g
        return grads, dx


# --- gradient checking ---------------------------------------------------


@dataclass
class GradCheckReport:
    worst_rel_error: float
    worst_index: tuple | None
    n_checked: int

    def passed(self, tolerance):
        return self.worst_rel_error < tolerance


def grad_check(encoder: Encoder, loss_fn, batch, step=1e-5, max_coords=500, seed=0, abs_floor=1e-6):
    """Compare analytic parameter gradients with central differences.

    ``loss_fn(encoder, batch) -> (value, grads)`` where ``grads`` parallels
    ``encoder.params``.  Up to ``max_coords`` coordinates are sampled
    (seeded).  Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    Parameters are restored before returning.
    """
    if step <= 0:
        raise InvalidParam("step must be > 0")
    _, grads = loss_fn(encoder, batch)
    coords = [(p, i) for p, arr in enumerate(encoder.params) for i in range(arr.size)]
    if len(coords) > max_coords:
        rng = make_rng(seed, "grad-check")
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[k] for k in pick]
    worst, worst_at = 0.0, None
    for p, i in coords:
        flat = encoder.params[p].reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        encoder.bump()
        fp, _ = loss_fn(encoder, batch)
        flat[i] = orig - step
        encoder.bump()
        fm, _ = loss_fn(encoder, batch)
        flat[i] = orig
        encoder.bump()
        numeric = (fp - fm) / (2 * step)
        analytic = float(np.reshape(grads[p], -1)[i]) if grads[p] is not None else 0.0
        denom = max(abs(analytic), abs(numeric), abs_floor)
        err = abs(analytic - numeric) / denom
        if err > worst:
            worst, worst_at = err, (p, i)
    return GradCheckReport(worst, worst_at, len(coords))


# --- checkpoint ----------------------------------------------------------


def checkpoint_document(encoder: Encoder, bank=None, rng_state=None, extra=None):
    layers = []
    for k in range(len(encoder.params) // 2):
        layers.append({"W": encoder.params[2 * k].tolist(), "b": encoder.params[2 * k + 1].tolist()})
    doc = {"format_version": FORMAT_VERSION, "spec": encoder.spec.to_dict(), "weights": layers}
    if bank is not None:
        doc["prototypes"] = bank.to_dict()
    if rng_state is not None:
        doc["rng_state"] = rng_state
    if extra:
        doc.update(extra)
    return doc


def save_checkpoint(path, encoder: Encoder, bank=None, rng_state=None, extra=None):
    """Write a JSON checkpoint. Floats use shortest round-trip repr (<= 17 digits)."""
    doc = checkpoint_document(encoder, bank, rng_state, extra)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, sort_keys=True, allow_nan=False)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path, expect_spec: MlpSpec | None = None):
    """Return ``(encoder, bank_or_None, document)``."""
    from .prototypes import PrototypeBank

    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not a checkpoint document ({exc})") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    try:
        spec = MlpSpec(**doc["spec"])
        params = []
        for layer in doc["weights"]:
            params.append(np.array(layer["W"], dtype=np.float64))
            params.append(np.array(layer["b"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed checkpoint ({exc})") from exc
    if expect_spec is not None and spec != expect_spec:
        raise SchemaError(f"{path}: checkpoint spec {spec} does not match expected {expect_spec}")
    for k, (fi, fo) in enumerate(spec.layer_shapes()):
        if k >= len(params) // 2 or params[2 * k].shape != (fi, fo):
            raise SchemaError(f"{path}: layer {k} shape mismatch")
    encoder = Encoder(spec, params)
    bank = PrototypeBank.from_dict(doc["prototypes"]) if "prototypes" in doc else None
    return encoder, bank, doc
