"""Potential networks, auxiliary latent-variable generators and their
density/gradient accessors.

The potential network maps an observation to K >= 1 head values; with K = 1
the single head is the potential u(x), with K >= 2 the heads are per-class
potentials u(x, y) and the marginal potential is their logsumexp.  The
generator is the directed model h ~ N(0, I), x = g(h) + sigma * eps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import (Activation, BatchNorm, Dense, NetworkSpec, ParamSet,
                       Tensor, backward, forward, init_params, logsumexp)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PotentialNet:
    spec: NetworkSpec
    params: ParamSet
    num_outputs: int = 1

    def __post_init__(self):
        if self.spec.output_dim != self.num_outputs:
            raise ValueError("final layer width must equal num_outputs")


@dataclass
class GeneratorNet:
    spec: NetworkSpec
    params: ParamSet
    latent_dim: int
    obs_dim: int
    sigma: float = 1.0

    def __post_init__(self):
        if self.spec.input_dim != self.latent_dim:
            raise ValueError("spec input width must equal latent_dim")
        if self.spec.output_dim != self.obs_dim:
            raise ValueError("spec output width must equal obs_dim")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError("sigma must be finite and positive")


@dataclass(frozen=True)
class LabeledExample:
    x: Tensor
    y: int  # class index in 1..K


def mlp_spec(input_dim, hidden, output_dim, activation="leaky_relu", slope=0.2,
             weight_norm=False, batch_norm=False, final_weight_norm=None):
    """Dense stack: (dense, activation[, batch_norm]) per hidden width, then
    a linear output layer."""
    if final_weight_norm is None:
        final_weight_norm = weight_norm
    layers = []
    for width in hidden:
        layers.append(Dense(width, weight_norm=weight_norm))
        layers.append(Activation(activation, slope))
        if batch_norm:
            layers.append(BatchNorm())
    layers.append(Dense(output_dim, weight_norm=final_weight_norm))
    return NetworkSpec(input_dim, tuple(layers))


def potential_mlp(input_dim, hidden=(100, 100), num_outputs=1,
                  activation="leaky_relu", slope=0.2, weight_norm=True,
                  rng=None) -> PotentialNet:
    spec = mlp_spec(input_dim, hidden, num_outputs, activation, slope,
                    weight_norm=weight_norm)
    rng = rng if rng is not None else np.random.default_rng()
    return PotentialNet(spec, init_params(spec, rng), num_outputs)


def generator_mlp(latent_dim, obs_dim, hidden=(50, 50), activation="relu",
                  slope=0.2, batch_norm=True, weight_norm=False,
                  final_weight_norm=False, sigma=1.0, rng=None) -> GeneratorNet:
    spec = mlp_spec(latent_dim, hidden, obs_dim, activation, slope,
                    weight_norm=weight_norm, batch_norm=batch_norm,
                    final_weight_norm=final_weight_norm)
    rng = rng if rng is not None else np.random.default_rng()
    return GeneratorNet(spec, init_params(spec, rng), latent_dim, obs_dim, sigma)


def _rows(x, dim):
    """Promote (d,) to (1, d); remember whether to squeeze the result."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"expected {dim} features, got {x.shape[0]}")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected (n, {dim}) input, got {x.shape}")
    return x, False


def heads(net: PotentialNet, x):
    """Raw head values, shape (n, K); eval mode."""
    rows, _ = _rows(x, net.spec.input_dim)
    out, _ = forward(net.spec, net.params, rows, mode="eval")
    return out


def potential(net: PotentialNet, x):
    """Marginal potential u(x): the single head for K=1, logsumexp of the
    heads for K>=2."""
    rows, squeeze = _rows(x, net.spec.input_dim)
    out = heads(net, rows)
    if net.num_outputs == 1:
        u = out[:, 0]
    else:
        u = logsumexp(out, axis=1)
        u = np.atleast_1d(u)
    return float(u[0]) if squeeze else u


def class_potentials(net: PotentialNet, x):
    """Per-class potentials u(x, y); requires K >= 2."""
    if net.num_outputs < 2:
        raise ValueError("class_potentials requires a multi-head potential")
    rows, squeeze = _rows(x, net.spec.input_dim)
    out = heads(net, rows)
    return out[0] if squeeze else out


def _softmax(z):
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def classifier_probs(net: PotentialNet, x):
    """Class posterior p(y|x) = softmax over the per-class potentials."""
    if net.num_outputs < 2:
        raise ValueError("classifier_probs requires a multi-head potential")
    rows, squeeze = _rows(x, net.spec.input_dim)
    p = _softmax(heads(net, rows))
    return p[0] if squeeze else p


def grad_potential_x(net: PotentialNet, x):
    """d u(x) / d x for the marginal potential (logsumexp head for K>=2)."""
    rows, squeeze = _rows(x, net.spec.input_dim)
    out, graph = forward(net.spec, net.params, rows, mode="eval")
    if net.num_outputs == 1:
        seed = np.ones_like(out)
    else:
        seed = _softmax(out)
    _, gx = backward(graph, seed)
    return gx[0] if squeeze else gx


def grad_class_potential_x(net: PotentialNet, x, y):
    """d u(x, y) / d x for a fixed class y (1-based; scalar or per-row)."""
    if net.num_outputs < 2:
        raise ValueError("per-class gradients require a multi-head potential")
    rows, squeeze = _rows(x, net.spec.input_dim)
    y_idx = np.asarray(y, dtype=int) - 1
    if y_idx.ndim == 0:
        y_idx = np.full(rows.shape[0], int(y_idx))
    if np.any((y_idx < 0) | (y_idx >= net.num_outputs)):
        raise ValueError("class label out of range")
    out, graph = forward(net.spec, net.params, rows, mode="eval")
    seed = np.zeros_like(out)
    seed[np.arange(rows.shape[0]), y_idx] = 1.0
    _, gx = backward(graph, seed)
    return gx[0] if squeeze else gx


def decode(gen: GeneratorNet, h):
    """Noise-free decode g(h), eval mode."""
    rows, squeeze = _rows(h, gen.latent_dim)
    out, _ = forward(gen.spec, gen.params, rows, mode="eval")
    return out[0] if squeeze else out


def ancestral_sample(gen: GeneratorNet, rng: np.random.Generator, n: int = 1):
    """Draw (h, x) pairs: h ~ N(0, I), x = g(h) + sigma * eps.

    Consumes exactly two draws from rng (h block first, then eps block), so
    replays with the same seed are identical.
    """
    h = rng.standard_normal((n, gen.latent_dim))
    eps = rng.standard_normal((n, gen.obs_dim))
    x = decode(gen, h) + gen.sigma * eps
    return h, x


def log_q_joint(gen: GeneratorNet, x, h):
    """log q(x, h) with full normalization constants."""
    xr, squeeze = _rows(x, gen.obs_dim)
    hr, _ = _rows(h, gen.latent_dim)
    if xr.shape[0] != hr.shape[0]:
        raise ValueError("x and h row counts differ")
    resid = xr - decode(gen, hr)
    s2 = gen.sigma**2
    val = (-(resid * resid).sum(axis=1) / (2.0 * s2)
           - (hr * hr).sum(axis=1) / 2.0
           - 0.5 * gen.obs_dim * np.log(2.0 * np.pi * s2)
           - 0.5 * gen.latent_dim * LOG_2PI)
    return float(val[0]) if squeeze else val


def grad_log_q_joint(gen: GeneratorNet, x, h):
    """(d/dx, d/dh) of log q(x, h); generator in eval mode."""
    xr, squeeze = _rows(x, gen.obs_dim)
    hr, _ = _rows(h, gen.latent_dim)
    out, graph = forward(gen.spec, gen.params, hr, mode="eval")
    resid_scaled = (xr - out) / gen.sigma**2
    grad_x = -resid_scaled
    _, jt = backward(graph, resid_scaled)
    grad_h = jt - hr
    if squeeze:
        return grad_x[0], grad_h[0]
    return grad_x, grad_h


def grad_log_q_joint_x(gen: GeneratorNet, x, h):
    """d log q(x, h) / d x alone; avoids the backward pass through g."""
    xr, squeeze = _rows(x, gen.obs_dim)
    hr, _ = _rows(h, gen.latent_dim)
    grad_x = -(xr - decode(gen, hr)) / gen.sigma**2
    return grad_x[0] if squeeze else grad_x


def grad_log_q_joint_h(gen: GeneratorNet, x, h):
    """d log q(x, h) / d h alone."""
    xr, squeeze = _rows(x, gen.obs_dim)
    hr, _ = _rows(h, gen.latent_dim)
    out, graph = forward(gen.spec, gen.params, hr, mode="eval")
    _, jt = backward(graph, (xr - out) / gen.sigma**2)
    grad_h = jt - hr
    return grad_h[0] if squeeze else grad_h


def grad_log_q_joint_params(gen: GeneratorNet, x, h,
                            update_stats: bool = False) -> ParamSet:
    """Parameter gradient of log q(x, h), summed over rows.

    Batch norm runs in train mode on this path; running statistics are only
    touched when update_stats is set, so the default call never mutates the
    generator.
    """
    xr, _ = _rows(x, gen.obs_dim)
    hr, _ = _rows(h, gen.latent_dim)
    out, graph = forward(gen.spec, gen.params, hr, mode="train",
                         update_stats=update_stats)
    seed = (xr - out) / gen.sigma**2
    grads, _ = backward(graph, seed)
    return grads


# -- checkpoints --------------------------------------------------------------

def _params_to_json(params: ParamSet) -> list:
    return [{"name": name, "shape": list(arr.shape),
             "data": [float(v) for v in arr.ravel()]}
            for name, arr in sorted(params.items())]


def _params_from_json(entries: list) -> ParamSet:
    params: ParamSet = {}
    for entry in entries:
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[entry["name"]] = arr
    return params


def save_checkpoint(net, path):
    """One JSON document per model; floats round-trip bit-faithfully."""
    if isinstance(net, PotentialNet):
        doc = {"kind": "potential", "num_outputs": net.num_outputs,
               "spec": net.spec.to_dict(), "params": _params_to_json(net.params)}
    elif isinstance(net, GeneratorNet):
        doc = {"kind": "generator", "latent_dim": net.latent_dim,
               "obs_dim": net.obs_dim, "sigma": net.sigma,
               "spec": net.spec.to_dict(), "params": _params_to_json(net.params)}
    else:
        raise TypeError(f"cannot checkpoint {type(net).__name__}")
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    spec = NetworkSpec.from_dict(doc["spec"])
    params = _params_from_json(doc["params"])
    if doc["kind"] == "potential":
        return PotentialNet(spec, params, doc["num_outputs"])
    if doc["kind"] == "generator":
        return GeneratorNet(spec, params, doc["latent_dim"], doc["obs_dim"],
                            doc["sigma"])
    raise ValueError(f"unknown checkpoint kind {doc['kind']!r}")
