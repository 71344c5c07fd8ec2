"""Joint training of the potential and the generator.

Each iteration draws a data minibatch, revises one model sample per data
point, ascends the potential on the data-vs-model gradient difference (plus
optional regularizers) and ascends the generator on the joint log-density of
the revised pairs.  The semi-supervised variant adds a class log-likelihood
term on a labeled minibatch, an entropy (confidence) regularizer and a
squared-potential control regularizer.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import models
from .autodiff import ParamSet, backward, forward, logsumexp
from .models import GeneratorNet, LabeledExample, PotentialNet
from .samplers import SamplerConfig, _sample_chains, rng_stream, rng_streams

METRIC_HEADER = "iteration,mean_data_potential,mean_model_potential,loss_c,loss_p,resets"


class TrainingDivergedError(RuntimeError):
    """Chains kept diverging past the reset budget."""


@dataclass
class TrainConfig:
    iterations: int = 10000
    batch_size: int = 100
    lr_potential: float = 1e-3
    lr_generator: float = 1e-3
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    alpha_d: float = 0.0
    alpha_c: float = 0.0
    alpha_p: float = 0.0
    seed: int = 0
    metric_every: int = 200
    reset_limit: int = 100000

    def __post_init__(self):
        if self.lr_potential <= 0 or self.lr_generator <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.alpha_d, self.alpha_c, self.alpha_p) < 0:
            raise ValueError("regularizer weights must be >= 0")


class AdamState:
    """First/second moment accumulators mirroring a parameter set."""

    def __init__(self, params: ParamSet):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(state: AdamState, params: ParamSet, grads: ParamSet, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamSet:
    """Bias-corrected Adam update, descending on the supplied gradients.

    Only parameters present in grads are touched (batch-norm running
    statistics never receive gradients).  Callers negate for ascent.
    """
    state.t += 1
    t = state.t
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def _scale(grads: ParamSet, c: float) -> ParamSet:
    return {k: c * v for k, v in grads.items()}


def _add_scaled(dst: ParamSet, src: ParamSet, c: float) -> ParamSet:
    for k, v in src.items():
        if k in dst:
            dst[k] = dst[k] + c * v
        else:
            dst[k] = c * v
    return dst


def _marginal_rows_and_seed(pot: PotentialNet, x, coeffs):
    """Forward pass giving per-row marginal potentials and the head seed
    realizing sum_i coeffs_i * d u(x_i)."""
    out, graph = forward(pot.spec, pot.params, x, mode="train")
    if pot.num_outputs == 1:
        u = out[:, 0]
        seed = np.asarray(coeffs, dtype=np.float64)[:, None] * np.ones_like(out)
    else:
        u = logsumexp(out, axis=1)
        p = np.exp(out - u[:, None])
        seed = np.asarray(coeffs, dtype=np.float64)[:, None] * p
    return u, graph, seed


def potential_param_grads(pot: PotentialNet, x, coeffs) -> ParamSet:
    """sum_i coeffs_i * grad_theta u(x_i) for the marginal potential."""
    _, graph, seed = _marginal_rows_and_seed(pot, x, coeffs)
    grads, _ = backward(graph, seed)
    return grads


def confidence_loss(pot: PotentialNet, batch):
    """Mean entropy of the classifier posterior, with its theta-gradient."""
    if pot.num_outputs < 2:
        raise ValueError("confidence loss requires a multi-head potential")
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n = x.shape[0]
    out, graph = forward(pot.spec, pot.params, x, mode="train")
    log_p = out - logsumexp(out, axis=1)[:, None]
    p = np.exp(log_p)
    ent = -(p * log_p).sum(axis=1)
    seed = -p * (log_p + ent[:, None]) / n
    grads, _ = backward(graph, seed)
    return float(ent.mean()), grads


def potential_control_loss(pot: PotentialNet, batch):
    """Mean squared marginal potential over the batch, with gradient."""
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n = x.shape[0]
    u, graph, base = _marginal_rows_and_seed(pot, x, np.ones(n))
    seed = (2.0 * u / n)[:, None] * base
    grads, _ = backward(graph, seed)
    return float((u * u).mean()), grads


def class_logprob_grads(pot: PotentialNet, x, y):
    """(mean log p(y|x), ascent gradient of the mean) over a labeled batch.

    y is 1-based.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y_idx = np.asarray(y, dtype=int) - 1
    n = x.shape[0]
    out, graph = forward(pot.spec, pot.params, x, mode="train")
    log_p = out - logsumexp(out, axis=1)[:, None]
    p = np.exp(log_p)
    onehot = np.zeros_like(out)
    onehot[np.arange(n), y_idx] = 1.0
    seed = (onehot - p) / n
    grads, _ = backward(graph, seed)
    value = float(log_p[np.arange(n), y_idx].mean())
    return value, grads


def _labeled_arrays(labeled):
    xs = np.stack([np.asarray(ex.x, dtype=np.float64) for ex in labeled])
    ys = np.array([ex.y for ex in labeled], dtype=int)
    return xs, ys


def _theta_ascent(pot, data, x_model, cfg):
    """Unsupervised ascent gradient for theta plus diagnostics.

    One forward over the stacked (data, model) rows; the potential-control
    gradient folds into the same backward seed on the data rows.
    """
    n = data.shape[0]
    stacked = np.vstack([data, x_model])
    u, graph, base = _marginal_rows_and_seed(pot, stacked, np.ones(2 * n))
    coeffs = np.concatenate([np.full(n, 1.0 / n), np.full(n, -1.0 / n)])
    if cfg.alpha_p > 0:
        coeffs[:n] -= cfg.alpha_p * 2.0 * u[:n] / n
    grads, _ = backward(graph, coeffs[:, None] * base)
    diag = {"mean_data_potential": float(u[:n].mean()),
            "mean_model_potential": float(u[n:].mean()),
            "loss_p": float((u[:n] ** 2).mean())}
    return grads, diag


def _phi_ascent(gen, x_model, h_model):
    n = x_model.shape[0]
    grads = models.grad_log_q_joint_params(gen, x_model, h_model,
                                           update_stats=True)
    return _scale(grads, 1.0 / n)


def unsup_update(pot: PotentialNet, gen: GeneratorNet, batch, cfg: TrainConfig,
                 opt_pot: AdamState, opt_gen: AdamState, streams) -> dict:
    """One unsupervised step: sample, ascend theta, ascend phi."""
    data = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n = data.shape[0]
    state = _sample_chains(pot, gen, cfg.sampler, streams[:n])
    grads, diag = _theta_ascent(pot, data, state.x, cfg)
    adam_step(opt_pot, pot.params, _scale(grads, -1.0), cfg.lr_potential,
              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    phi = _phi_ascent(gen, state.x, state.h)
    adam_step(opt_gen, gen.params, _scale(phi, -1.0), cfg.lr_generator,
              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    diag["loss_c"] = 0.0
    diag["resets"] = state.resets
    return diag


def semi_update(pot: PotentialNet, gen: GeneratorNet, batch, labeled,
                cfg: TrainConfig, opt_pot: AdamState, opt_gen: AdamState,
                streams) -> dict:
    """One semi-supervised step: unsupervised term on the marginal potential
    plus weighted supervised, confidence and potential-control terms."""
    if pot.num_outputs < 2:
        raise ValueError("semi-supervised training requires a multi-head potential")
    data = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n = data.shape[0]
    state = _sample_chains(pot, gen, cfg.sampler, streams[:n])
    grads, diag = _theta_ascent(pot, data, state.x, cfg)
    if cfg.alpha_d > 0 and len(labeled) > 0:
        x_lab, y_lab = _labeled_arrays(labeled)
        _, sup = class_logprob_grads(pot, x_lab, y_lab)
        _add_scaled(grads, sup, cfg.alpha_d)
    loss_c, gc = confidence_loss(pot, data)
    if cfg.alpha_c > 0:
        _add_scaled(grads, gc, -cfg.alpha_c)
    adam_step(opt_pot, pot.params, _scale(grads, -1.0), cfg.lr_potential,
              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    phi = _phi_ascent(gen, state.x, state.h)
    adam_step(opt_gen, gen.params, _scale(phi, -1.0), cfg.lr_generator,
              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    diag["loss_c"] = loss_c
    diag["resets"] = state.resets
    return diag


def _format_row(it, diag):
    return (f"{it},{diag['mean_data_potential']!r},{diag['mean_model_potential']!r},"
            f"{diag['loss_c']!r},{diag['loss_p']!r},{diag['resets']}")


def train(pot: PotentialNet, gen: GeneratorNet, data, cfg: TrainConfig,
          labeled=None, out_dir=None) -> list:
    """Run the configured number of iterations, mutating both nets in place.

    Returns the metric rows (one dict per logged iteration).  When out_dir
    is given, writes metrics.csv plus potential.json / generator.json
    checkpoints (an initial pair immediately, final pair at the end).
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n_data = data.shape[0]
    streams = rng_streams(cfg.seed, cfg.batch_size, label=0)
    batch_rng = rng_stream(cfg.seed, label=1)
    opt_pot = AdamState(pot.params)
    opt_gen = AdamState(gen.params)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        models.save_checkpoint(pot, os.path.join(out_dir, "potential.json"))
        models.save_checkpoint(gen, os.path.join(out_dir, "generator.json"))

    rows = []
    total_resets = 0
    for it in range(1, cfg.iterations + 1):
        idx = batch_rng.integers(0, n_data, size=cfg.batch_size)
        batch = data[idx]
        if labeled is None:
            diag = unsup_update(pot, gen, batch, cfg, opt_pot, opt_gen, streams)
        else:
            if len(labeled) > cfg.batch_size:
                pick = batch_rng.integers(0, len(labeled), size=cfg.batch_size)
                lab_batch = [labeled[i] for i in pick]
            else:
                lab_batch = labeled
            diag = semi_update(pot, gen, batch, lab_batch, cfg, opt_pot,
                               opt_gen, streams)
        total_resets += diag["resets"]
        if total_resets > cfg.reset_limit:
            raise TrainingDivergedError(
                f"{total_resets} chain resets exceeded the budget at iteration {it}")
        if it % cfg.metric_every == 0 or it == cfg.iterations:
            diag = dict(diag, iteration=it)
            rows.append(diag)

    if out_dir is not None:
        with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
            fh.write(METRIC_HEADER + "\n")
            for row in rows:
                fh.write(_format_row(row["iteration"], row) + "\n")
        models.save_checkpoint(pot, os.path.join(out_dir, "potential.json"))
        models.save_checkpoint(gen, os.path.join(out_dir, "generator.json"))
    return rows
