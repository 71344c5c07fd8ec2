"""Reverse-mode differentiation over dense feed-forward networks.

Every forward pass records a replayable tape so that gradients can be taken
with respect to parameters (for optimizer updates) and with respect to the
network input (samplers follow gradients through observations and latent
codes, not just through weights).

All tensors are float64 numpy arrays in row-major order.  Network inputs and
outputs are 2-D, shaped (batch, features).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Tensor = np.ndarray

ACTIVATION_KINDS = ("linear", "relu", "leaky_relu", "tanh", "softplus", "sigmoid")


class NonFiniteError(ArithmeticError):
    """A computation produced NaN or infinity."""


@dataclass(frozen=True)
class Dense:
    """Affine layer y = x @ W + b, optionally weight-normalized.

    With weight_norm the effective weight is W = v * (g / ||v||) with the
    norm taken per output unit, so the direction v and the scale g are the
    trainable parameters.
    """

    width: int
    weight_norm: bool = False


@dataclass(frozen=True)
class Activation:
    fn: str
    slope: float = 0.2  # leaky_relu only

    def __post_init__(self):
        if self.fn not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind: {self.fn!r}")


@dataclass(frozen=True)
class BatchNorm:
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer stack with a fixed input width."""

    input_dim: int
    layers: tuple

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        for layer in self.layers:
            if isinstance(layer, Dense) and layer.width < 1:
                raise ValueError("dense width must be >= 1")
            if not isinstance(layer, (Dense, Activation, BatchNorm)):
                raise ValueError(f"unknown layer type: {layer!r}")
        if self.output_dim < 1:
            raise ValueError("final width must be >= 1")

    @property
    def output_dim(self) -> int:
        width = self.input_dim
        for layer in self.layers:
            if isinstance(layer, Dense):
                width = layer.width
        return width

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                layers.append({"kind": "dense", "width": layer.width,
                               "weight_norm": layer.weight_norm})
            elif isinstance(layer, Activation):
                layers.append({"kind": "activation", "fn": layer.fn,
                               "slope": layer.slope})
            else:
                layers.append({"kind": "batch_norm", "momentum": layer.momentum,
                               "eps": layer.eps})
        return {"input_dim": self.input_dim, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for entry in d["layers"]:
            kind = entry["kind"]
            if kind == "dense":
                layers.append(Dense(entry["width"], entry["weight_norm"]))
            elif kind == "activation":
                layers.append(Activation(entry["fn"], entry["slope"]))
            elif kind == "batch_norm":
                layers.append(BatchNorm(entry["momentum"], entry["eps"]))
            else:
                raise ValueError(f"unknown layer kind in checkpoint: {kind!r}")
        return cls(input_dim=d["input_dim"], layers=tuple(layers))


# A ParamSet is a plain dict mapping parameter names ("l0.v", "l0.g", ...)
# to float64 arrays.  Batch-norm running statistics live in the same dict
# but are not trainable: backward never emits gradients for them.
ParamSet = dict


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamSet:
    """Fresh parameters for a spec: v ~ N(0, 1/fan_in), g = 1, b = 0."""
    params: ParamSet = {}
    width = spec.input_dim
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            scale = 1.0 / np.sqrt(width)
            w = rng.standard_normal((width, layer.width)) * scale
            if layer.weight_norm:
                params[f"l{i}.v"] = w
                params[f"l{i}.g"] = np.ones(layer.width)
            else:
                params[f"l{i}.W"] = w
            params[f"l{i}.b"] = np.zeros(layer.width)
            width = layer.width
        elif isinstance(layer, BatchNorm):
            params[f"l{i}.gamma"] = np.ones(width)
            params[f"l{i}.beta"] = np.zeros(width)
            params[f"l{i}.running_mean"] = np.zeros(width)
            params[f"l{i}.running_var"] = np.ones(width)
    return params


def _param(params: ParamSet, name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise ValueError(f"missing parameter {name!r}") from None


def _sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: Tensor) -> Tensor:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


class Graph:
    """Replayable tape of one forward evaluation."""

    def __init__(self, spec: NetworkSpec, mode: str, input_shape: tuple,
                 output: Tensor):
        self.spec = spec
        self.mode = mode
        self.input_shape = input_shape
        self.output = output
        self.nodes: list[tuple[int, object, tuple]] = []


def forward(spec: NetworkSpec, params: ParamSet, x: Tensor, mode: str = "eval",
            update_stats: bool | None = None):
    """Evaluate the network, returning (output, graph).

    mode "train" normalizes batch-norm layers with minibatch statistics and
    (unless update_stats=False) folds them into the running statistics held
    in params; mode "eval" uses the stored running statistics, making the
    call a pure function of (params, x).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if update_stats is None:
        update_stats = mode == "train"
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(
            f"input shape {x.shape} incompatible with input_dim {spec.input_dim}")

    out = x
    graph = Graph(spec, mode, x.shape, out)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            b = _param(params, f"l{i}.b")
            if layer.weight_norm:
                v = _param(params, f"l{i}.v")
                g = _param(params, f"l{i}.g")
                norm = np.sqrt((v * v).sum(axis=0))
                if np.any(norm == 0.0):
                    raise ValueError(f"weight-norm direction of layer {i} is zero")
                w_scale = g / norm
                weight = v * w_scale
                cache = (out, v, g, norm, w_scale, weight)
            else:
                weight = _param(params, f"l{i}.W")
                cache = (out, weight)
            out = out @ weight + b
        elif isinstance(layer, Activation):
            pre = out
            if layer.fn == "linear":
                cache = ()
            elif layer.fn == "relu":
                out = np.maximum(pre, 0.0)
                cache = (pre,)
            elif layer.fn == "leaky_relu":
                out = np.where(pre > 0.0, pre, layer.slope * pre)
                cache = (pre,)
            elif layer.fn == "tanh":
                out = np.tanh(pre)
                cache = (out,)
            elif layer.fn == "softplus":
                out = _softplus(pre)
                cache = (pre,)
            else:  # sigmoid
                out = _sigmoid(pre)
                cache = (out,)
        else:  # BatchNorm
            gamma = _param(params, f"l{i}.gamma")
            beta = _param(params, f"l{i}.beta")
            if mode == "train":
                mean = out.mean(axis=0)
                var = out.var(axis=0)
                if update_stats:
                    m = layer.momentum
                    params[f"l{i}.running_mean"] = (
                        (1.0 - m) * _param(params, f"l{i}.running_mean") + m * mean)
                    params[f"l{i}.running_var"] = (
                        (1.0 - m) * _param(params, f"l{i}.running_var") + m * var)
                std = np.sqrt(var + layer.eps)
                xmu = out - mean
                xhat = xmu / std
                cache = ("train", xmu, xhat, std, gamma)
            else:
                mean = _param(params, f"l{i}.running_mean")
                var = _param(params, f"l{i}.running_var")
                std = np.sqrt(var + layer.eps)
                xhat = (out - mean) / std
                cache = ("eval", xhat, std, gamma)
            out = gamma * xhat + beta
        graph.nodes.append((i, layer, cache))

    if not np.all(np.isfinite(out)):
        raise NonFiniteError("network output is not finite")
    graph.output = out
    return out, graph


def backward(graph: Graph, output_seed: Tensor):
    """Gradients of seed.T @ output w.r.t. parameters and input.

    Returns (param_grads, input_grad).  The graph is untouched and can be
    replayed with a different seed.  Parameter gradients are accumulated
    (summed) over the batch rows; running statistics get no gradient.
    """
    seed = np.asarray(output_seed, dtype=np.float64)
    if seed.shape != graph.output.shape:
        raise ValueError(
            f"seed shape {seed.shape} != output shape {graph.output.shape}")

    grads: ParamSet = {}
    delta = seed
    for i, layer, cache in reversed(graph.nodes):
        if isinstance(layer, Dense):
            if layer.weight_norm:
                x_in, v, g, norm, w_scale, weight = cache
                d_weight = x_in.T @ delta
                dot = (d_weight * v).sum(axis=0)
                grads[f"l{i}.g"] = dot / norm
                grads[f"l{i}.v"] = d_weight * w_scale - v * (g * dot / norm**3)
            else:
                x_in, weight = cache
                grads[f"l{i}.W"] = x_in.T @ delta
            grads[f"l{i}.b"] = delta.sum(axis=0)
            delta = delta @ weight.T
        elif isinstance(layer, Activation):
            if layer.fn == "linear":
                pass
            elif layer.fn == "relu":
                delta = delta * (cache[0] > 0.0)
            elif layer.fn == "leaky_relu":
                delta = delta * np.where(cache[0] > 0.0, 1.0, layer.slope)
            elif layer.fn == "tanh":
                t = cache[0]
                delta = delta * (1.0 - t * t)
            elif layer.fn == "softplus":
                delta = delta * _sigmoid(cache[0])
            else:  # sigmoid
                s = cache[0]
                delta = delta * s * (1.0 - s)
        else:  # BatchNorm
            if cache[0] == "train":
                _, xmu, xhat, std, gamma = cache
                n = xmu.shape[0]
                grads[f"l{i}.gamma"] = (delta * xhat).sum(axis=0)
                grads[f"l{i}.beta"] = delta.sum(axis=0)
                dxhat = delta * gamma
                dvar = (dxhat * xmu).sum(axis=0) * (-0.5) / std**3
                dmean = -(dxhat / std).sum(axis=0)
                delta = dxhat / std + dvar * 2.0 * xmu / n + dmean / n
            else:
                _, xhat, std, gamma = cache
                grads[f"l{i}.gamma"] = (delta * xhat).sum(axis=0)
                grads[f"l{i}.beta"] = delta.sum(axis=0)
                delta = delta * gamma / std
    return grads, delta


def finite_diff(f, x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, componentwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += eps
        fp = float(f(xp))
        xm = x.copy()
        xm[idx] -= eps
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"function not finite near component {idx}")
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


def logsumexp(v: Tensor, axis: int | None = None):
    """log sum exp with max-shift; exact for a single entry."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of empty input")
    m = np.max(v, axis=axis, keepdims=axis is not None)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=axis is not None))
    if axis is None:
        return float(out)
    return np.squeeze(out, axis=axis)
