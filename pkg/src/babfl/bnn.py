"""Hybrid Bayesian feed-forward classifier trained by mean-field variational inference.

The last ``n`` dense layers carry a factorized Gaussian over their weights and
biases, the rest are point masses. Standard deviations are parameterized as
``softplus(rho)``. Gradients of the negative ELBO are computed by hand-written
backpropagation through one reparameterized weight draw per step.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .gaussian import VARIANCE_FLOOR, DiagGaussian, PriorSpec, kl_divergence

DETERMINISTIC = "deterministic"
BAYESIAN = "bayesian"
ACTIVATIONS = ("relu", "identity", "softmax")
DEFAULT_SIGMA_INIT = 0.05


class ModelError(ValueError):
    """Shape, structure or data errors in the hybrid network."""


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# -- architecture ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    kind: str = DETERMINISTIC
    activation: str = "relu"

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise ModelError("layer widths must be positive")
        if self.kind not in (DETERMINISTIC, BAYESIAN):
            raise ModelError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")


def validate_specs(specs) -> None:
    if not specs:
        raise ModelError("a network needs at least one layer")
    for a, b in zip(specs, specs[1:]):
        if a.output_width != b.input_width:
            raise ModelError(f"layer widths do not chain: {a.output_width} -> {b.input_width}")
    if specs[-1].activation != "softmax" or any(s.activation == "softmax" for s in specs[:-1]):
        raise ModelError("exactly the last layer must use the softmax output")
    kinds = [s.kind for s in specs]
    n_bayes = kinds.count(BAYESIAN)
    if kinds[len(kinds) - n_bayes :] != [BAYESIAN] * n_bayes:
        raise ModelError("Bayesian layers must form a suffix of the layer list")


def build_specs(input_dim: int, hidden: list[int], n_classes: int, n_bayesian: int, activation="relu"):
    widths = [input_dim, *hidden, n_classes]
    n_layers = len(widths) - 1
    if not 0 <= n_bayesian <= n_layers:
        raise ModelError(f"n_bayesian must lie in [0, {n_layers}] for this architecture")
    specs = [
        LayerSpec(
            widths[i],
            widths[i + 1],
            BAYESIAN if i >= n_layers - n_bayesian else DETERMINISTIC,
            "softmax" if i == n_layers - 1 else activation,
        )
        for i in range(n_layers)
    ]
    validate_specs(specs)
    return specs


# -- parameters ------------------------------------------------------------------------------


@dataclass
class PointMassLayer:
    weights: np.ndarray  # (input_width, output_width)
    biases: np.ndarray  # (output_width,)

    kind = DETERMINISTIC

    def arrays(self):
        return {"weights": self.weights, "biases": self.biases}

    def copy(self):
        return PointMassLayer(self.weights.copy(), self.biases.copy())

    @property
    def shape(self):
        return self.weights.shape


@dataclass
class GaussianLayer:
    weight_means: np.ndarray
    weight_rhos: np.ndarray
    bias_means: np.ndarray
    bias_rhos: np.ndarray

    kind = BAYESIAN

    def arrays(self):
        return {
            "weight_means": self.weight_means,
            "weight_rhos": self.weight_rhos,
            "bias_means": self.bias_means,
            "bias_rhos": self.bias_rhos,
        }

    def copy(self):
        return GaussianLayer(*(a.copy() for a in self.arrays().values()))

    @property
    def shape(self):
        return self.weight_means.shape

    @property
    def size(self) -> int:
        return self.weight_means.size + self.bias_means.size

    def to_gaussian(self) -> DiagGaussian:
        """Flatten ``[weights, biases]`` into one diagonal Gaussian (variance floored)."""
        mean = np.concatenate([self.weight_means.ravel(), self.bias_means.ravel()])
        std = softplus(np.concatenate([self.weight_rhos.ravel(), self.bias_rhos.ravel()]))
        return DiagGaussian(mean, np.maximum(std**2, VARIANCE_FLOOR))

    @classmethod
    def from_gaussian(cls, g: DiagGaussian, weight_shape, bias_shape) -> "GaussianLayer":
        n_w = int(np.prod(weight_shape))
        if g.dim != n_w + int(np.prod(bias_shape)):
            raise ModelError("Gaussian dimension does not match the layer shape")
        rho = softplus_inv(g.std)
        return cls(
            g.mean[:n_w].reshape(weight_shape).copy(),
            rho[:n_w].reshape(weight_shape),
            g.mean[n_w:].reshape(bias_shape).copy(),
            rho[n_w:].reshape(bias_shape),
        )


@dataclass
class PosteriorParams:
    """Per-layer posterior: a list of point-mass or Gaussian dense layers."""

    layers: list

    def signature(self):
        return tuple((layer.kind, tuple(layer.shape)) for layer in self.layers)

    def copy(self):
        return PosteriorParams([layer.copy() for layer in self.layers])

    @property
    def bayesian_mask(self):
        return tuple(layer.kind == BAYESIAN for layer in self.layers)

    def n_bayesian_params(self) -> int:
        return sum(layer.size for layer in self.layers if layer.kind == BAYESIAN)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for layer in self.layers for a in layer.arrays().values()])

    def with_flat(self, vector) -> "PosteriorParams":
        vector = np.asarray(vector, dtype=np.float64)
        out, pos = self.copy(), 0
        for layer in out.layers:
            for a in layer.arrays().values():
                a[...] = vector[pos : pos + a.size].reshape(a.shape)
                pos += a.size
        if pos != vector.size:
            raise ModelError("flat vector length does not match the parameter count")
        return out

    def allclose(self, other: "PosteriorParams", rtol=0.0, atol=0.0) -> bool:
        return self.signature() == other.signature() and np.allclose(self.flat(), other.flat(), rtol=rtol, atol=atol)


def init_params(specs, rng: np.random.Generator, sigma_init: float = DEFAULT_SIGMA_INIT) -> PosteriorParams:
    """Uniform fan-in initialization; Bayesian standard deviations start at ``sigma_init``."""
    layers = []
    rho0 = float(softplus_inv(sigma_init))
    for s in specs:
        bound = 1.0 / math.sqrt(s.input_width)
        w = rng.uniform(-bound, bound, size=(s.input_width, s.output_width))
        b = rng.uniform(-bound, bound, size=s.output_width)
        if s.kind == BAYESIAN:
            layers.append(GaussianLayer(w, np.full_like(w, rho0), b, np.full_like(b, rho0)))
        else:
            layers.append(PointMassLayer(w, b))
    return PosteriorParams(layers)


@dataclass
class HybridNet:
    spec: list
    params: PosteriorParams
    prior: PriorSpec | None = field(default=None)

    def __post_init__(self):
        validate_specs(self.spec)
        if len(self.spec) != len(self.params.layers):
            raise ModelError("parameter list does not match the layer specs")
        for s, layer in zip(self.spec, self.params.layers):
            if s.kind != layer.kind or tuple(layer.shape) != (s.input_width, s.output_width):
                raise ModelError("parameters are not valid for the layer specs")
        n = self.params.n_bayesian_params()
        if n and self.prior is None:
            self.prior = PriorSpec(n)
        if (self.prior.dimension if self.prior else 0) != n:
            raise ModelError("prior dimension must equal the Bayesian parameter count")

    @classmethod
    def build(cls, input_dim, hidden, n_classes, n_bayesian, rng, sigma_init=DEFAULT_SIGMA_INIT):
        specs = build_specs(input_dim, list(hidden), n_classes, n_bayesian)
        return cls(specs, init_params(specs, rng, sigma_init))

    def with_params(self, params: PosteriorParams) -> "HybridNet":
        return HybridNet(self.spec, params)

    @property
    def n_classes(self) -> int:
        return self.spec[-1].output_width

    @property
    def deterministic(self) -> bool:
        return not any(self.params.bayesian_mask)

    def draw_noise(self, rng: np.random.Generator):
        return [
            (rng.standard_normal(layer.weight_means.shape), rng.standard_normal(layer.bias_means.shape))
            if layer.kind == BAYESIAN
            else None
            for layer in self.params.layers
        ]


@dataclass
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 0.1
    batch_size: int = 32
    kl_scale: float | None = None  # None: 1 / shard size
    mc_samples_train: int = 1
    freeze_variance: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.mc_samples_train < 1:
            raise ModelError("epochs must be >= 0; batch_size and mc_samples_train must be positive")
        if not self.learning_rate > 0:
            raise ModelError("learning_rate must be positive")
        if self.kl_scale is not None and self.kl_scale < 0:
            raise ModelError("kl_scale must be nonnegative")


# -- forward / loss / gradients --------------------------------------------------------------


def _as_noise(net: HybridNet, noise):
    layers = net.params.layers
    if noise is None:
        return [None if l.kind != BAYESIAN else (np.zeros(l.weight_means.shape), np.zeros(l.bias_means.shape)) for l in layers]
    if isinstance(noise, np.ndarray):
        if noise.size != net.params.n_bayesian_params():
            raise ModelError(f"noise has {noise.size} entries, expected {net.params.n_bayesian_params()}")
        out, pos = [], 0
        for l in layers:
            if l.kind != BAYESIAN:
                out.append(None)
                continue
            nw, nb = l.weight_means.size, l.bias_means.size
            out.append((noise[pos : pos + nw].reshape(l.weight_means.shape), noise[pos + nw : pos + nw + nb]))
            pos += nw + nb
        return out
    if len(noise) != len(layers):
        raise ModelError("noise list must have one entry per layer")
    for l, eps in zip(layers, noise):
        if l.kind == BAYESIAN and (eps is None or eps[0].shape != l.weight_means.shape or eps[1].shape != l.bias_means.shape):
            raise ModelError("noise shape does not match a Bayesian layer")
    return noise


def _sampled_weights(layer, eps):
    if layer.kind != BAYESIAN:
        return layer.weights, layer.biases
    w = layer.weight_means + softplus(layer.weight_rhos) * eps[0]
    b = layer.bias_means + softplus(layer.bias_rhos) * eps[1]
    return w, b


def _check_inputs(net: HybridNet, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.spec[0].input_width:
        raise ModelError(f"inputs must have shape (batch, {net.spec[0].input_width}), got {np.shape(inputs)}")
    if not np.all(np.isfinite(x)):
        raise ModelError("inputs must be finite")
    return x


def _forward_pass(net: HybridNet, x, noise):
    """Return logits plus the per-layer cache needed for backpropagation."""
    h, cache = x, []
    for spec, layer, eps in zip(net.spec, net.params.layers, noise):
        w, b = _sampled_weights(layer, eps)
        z = h @ w + b
        cache.append((h, w, z))
        h = np.maximum(z, 0.0) if spec.activation == "relu" else z
    return h, cache


def forward(net: HybridNet, inputs, noise=None) -> np.ndarray:
    """Class probabilities for a batch under one weight draw (``noise=None`` uses the means)."""
    logits, _ = _forward_pass(net, _check_inputs(net, inputs), _as_noise(net, noise))
    return softmax(logits, axis=1)


def kl_to_prior(params: PosteriorParams) -> float:
    """Closed-form ``KL(q || N(0, I))`` summed over the Bayesian layers."""
    total = 0.0
    for layer in params.layers:
        if layer.kind == BAYESIAN:
            g = layer.to_gaussian()
            total += kl_divergence(g, DiagGaussian.standard(g.dim))
    return total


def _check_labels(net: HybridNet, x, labels) -> np.ndarray:
    y = np.asarray(labels).astype(np.int64, copy=False).ravel()
    if y.size == 0:
        raise ModelError("empty batch")
    if y.size != x.shape[0]:
        raise ModelError("inputs and labels have different lengths")
    if np.any(y < 0) or np.any(y >= net.n_classes):
        raise ModelError(f"labels must lie in [0, {net.n_classes})")
    return y


def elbo_loss(net: HybridNet, inputs, labels, kl_scale: float, noise=None) -> float:
    """Mean cross-entropy over the batch plus ``kl_scale`` times the KL to the prior."""
    x = _check_inputs(net, inputs)
    y = _check_labels(net, x, labels)
    logits, _ = _forward_pass(net, x, _as_noise(net, noise))
    nll = -np.mean(log_softmax(logits, axis=1)[np.arange(y.size), y])
    return float(nll + kl_scale * kl_to_prior(net.params)) if kl_scale else float(nll)


def loss_and_gradients(net: HybridNet, inputs, labels, kl_scale: float, noise=None):
    x = _check_inputs(net, inputs)
    y = _check_labels(net, x, labels)
    noise = _as_noise(net, noise)
    logits, cache = _forward_pass(net, x, noise)
    logp = log_softmax(logits, axis=1)
    loss = -np.mean(logp[np.arange(y.size), y])

    dz = np.exp(logp)
    dz[np.arange(y.size), y] -= 1.0
    dz /= y.size
    grads = [None] * len(cache)
    for i in range(len(cache) - 1, -1, -1):
        h, w, z = cache[i]
        if i < len(cache) - 1 and net.spec[i].activation == "relu":
            dz = dz * (z > 0)
        dw, db = h.T @ dz, dz.sum(axis=0)
        if i > 0:
            dz = dz @ w.T
        layer = net.params.layers[i]
        if layer.kind != BAYESIAN:
            grads[i] = PointMassLayer(dw, db)
            continue
        eps_w, eps_b = noise[i]
        sw, sb = softplus(layer.weight_rhos), softplus(layer.bias_rhos)
        # d sigma / d rho = sigmoid(rho); d KL / d sigma = sigma - 1 / sigma against N(0, 1)
        grads[i] = GaussianLayer(
            dw + kl_scale * layer.weight_means,
            (dw * eps_w + kl_scale * (sw - 1.0 / sw)) * expit(layer.weight_rhos),
            db + kl_scale * layer.bias_means,
            (db * eps_b + kl_scale * (sb - 1.0 / sb)) * expit(layer.bias_rhos),
        )
    if kl_scale:
        loss = loss + kl_scale * kl_to_prior(net.params)
    return float(loss), PosteriorParams(grads)


def gradients(net: HybridNet, inputs, labels, kl_scale: float, noise=None) -> PosteriorParams:
    """Exact gradient of :func:`elbo_loss` at a fixed noise draw, shaped like the parameters."""
    return loss_and_gradients(net, inputs, labels, kl_scale, noise)[1]


# -- training / prediction -------------------------------------------------------------------


def local_train(net: HybridNet, inputs, labels, cfg: TrainConfig, seed) -> PosteriorParams | None:
    """Run ``cfg.epochs`` epochs of mini-batch gradient descent on the negative ELBO.

    Starts from ``net.params`` (left untouched) and returns the updated posterior.
    Returns ``None`` for an empty shard, meaning the client sits this round out.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels)
    if y.size == 0:
        return None
    n = y.size
    # negative ELBO per example: mean cross-entropy + KL / |shard|
    kl_scale = 1.0 / n if cfg.kl_scale is None else cfg.kl_scale
    rng = np.random.default_rng(seed)
    work = net.with_params(net.params.copy())
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            total = None
            for _ in range(cfg.mc_samples_train):
                _, g = loss_and_gradients(work, x[idx], y[idx], kl_scale, work.draw_noise(rng))
                total = g if total is None else _add(total, g)
            _apply_step(work.params, total, cfg.learning_rate / cfg.mc_samples_train, cfg.freeze_variance)
    return work.params


def _add(a: PosteriorParams, b: PosteriorParams) -> PosteriorParams:
    for la, lb in zip(a.layers, b.layers):
        for key, arr in la.arrays().items():
            arr += lb.arrays()[key]
    return a


def _apply_step(params: PosteriorParams, grads: PosteriorParams, lr: float, freeze_variance: bool):
    for layer, g in zip(params.layers, grads.layers):
        for key, arr in layer.arrays().items():
            if freeze_variance and key.endswith("rhos"):
                continue
            arr -= lr * g.arrays()[key]


def predictive(net: HybridNet, inputs, samples: int = 16, seed=0) -> np.ndarray:
    """Bayesian model average of ``samples`` reparameterized forward passes."""
    if samples < 1:
        raise ModelError("the number of Monte-Carlo samples must be positive")
    x = _check_inputs(net, inputs)
    if net.deterministic:
        return forward(net, x)
    rng = np.random.default_rng(seed)
    total = np.zeros((x.shape[0], net.n_classes))
    for _ in range(samples):
        total += forward(net, x, net.draw_noise(rng))
    return total / samples


# -- checkpoints -----------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"BABFLCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: HybridNet, metadata: dict | None = None) -> None:
    """Write ``net`` as magic, version, JSON header and raw little-endian float64 arrays."""
    layers, blobs = [], []
    for spec, layer in zip(net.spec, net.params.layers):
        arrays = []
        for name, arr in layer.arrays().items():
            arrays.append({"name": name, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        layers.append(
            {
                "kind": spec.kind,
                "input_width": spec.input_width,
                "output_width": spec.output_width,
                "activation": spec.activation,
                "arrays": arrays,
            }
        )
    header = json.dumps({"layers": layers, "metadata": metadata or {}}, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(
        CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)
    )


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(net, metadata)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 16:
        raise ModelError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    pos = 16 + header_len
    specs, layers = [], []
    for entry in header["layers"]:
        specs.append(LayerSpec(entry["input_width"], entry["output_width"], entry["kind"], entry["activation"]))
        arrays = []
        for a in entry["arrays"]:
            count = int(np.prod(a["shape"]))
            if pos + 8 * count > len(raw):
                raise ModelError(f"{path}: truncated at byte {pos}")
            arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(a["shape"]).astype(np.float64))
            pos += 8 * count
        layers.append(GaussianLayer(*arrays) if entry["kind"] == BAYESIAN else PointMassLayer(*arrays))
    if pos != len(raw):
        raise ModelError(f"{path}: {len(raw) - pos} trailing bytes after the last array")
    return HybridNet(specs, PosteriorParams(layers)), header["metadata"]
