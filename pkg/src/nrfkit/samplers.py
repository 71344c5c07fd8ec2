"""Markov chain machinery for sampling the joint target p(x) q(h|x).

Chains start from ancestral generator proposals and are revised with finite
steps of stochastic-gradient Langevin dynamics (SGLD) or stochastic-gradient
Hamiltonian Monte Carlo (SGHMC).  The same recursions driven by exact
gradients serve as references on analytic targets, and an interleaved
x-then-h Langevin baseline is provided for comparison.

All states are batched: a ChainState holds K particles, one per row.  Each
particle owns a counter-seeded RNG stream, so running K chains in one batch
is identical to K single-chain runs and results never depend on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .autodiff import NonFiniteError
from .models import GeneratorNet, PotentialNet

STATE_LIMIT = 1e6  # beyond this magnitude a chain counts as divergent

SAMPLER_KINDS = ("sgld", "sghmc", "ld_exact", "hmc_exact", "coopnet")


class ChainDivergedError(RuntimeError):
    def __init__(self, step: int, count: int):
        super().__init__(f"{count} chain(s) diverged at step {step}")
        self.step = step
        self.count = count


def rng_streams(seed: int, n: int, label: int = 0) -> list:
    """n independent, reproducible generator streams for (seed, label)."""
    ss = np.random.SeedSequence((int(seed), int(label)))
    return [np.random.default_rng(child) for child in ss.spawn(n)]


def rng_stream(seed: int, label: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(label))))


def step_size(t: int, a: float, b: float, c: float) -> float:
    """Polynomially decaying schedule (a (1 + t/b))^-c, t >= 0."""
    if min(a, b, c) <= 0:
        raise ValueError("schedule constants must be positive")
    return float((a * (1.0 + t / b)) ** (-c))


@dataclass
class SamplerConfig:
    """Sampler kind plus step-size policy.

    Either a constant step size delta or a decaying (a, b, c) schedule must
    be set; the schedule wins when both are present.  delta_star is the
    inner Langevin refresh step for the latent conditional draw and defaults
    to the current outer step size.
    """

    kind: str = "sgld"
    steps: int = 10
    delta: float | None = 0.01
    schedule: tuple | None = None
    beta: float = 0.1
    inner_steps: int = 1
    delta_star: float | None = None
    coop_lx: int = 20
    coop_lh: int = 20

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.schedule is None and (self.delta is None or self.delta <= 0):
            raise ValueError("need a positive delta or an (a, b, c) schedule")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must be in (0, 1]")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")

    def step_size(self, t: int) -> float:
        if self.schedule is not None:
            a, b, c = self.schedule
            return step_size(t, a, b, c)
        return self.delta


@dataclass
class ChainState:
    """K sampler particles: observations, latents, momenta, step counter."""

    x: np.ndarray
    h: np.ndarray
    v_x: np.ndarray = None
    v_h: np.ndarray = None
    t: int = 0
    resets: int = 0

    def __post_init__(self):
        if self.v_x is None:
            self.v_x = np.zeros_like(self.x)
        if self.v_h is None:
            self.v_h = np.zeros_like(self.h)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "ChainState":
        return ChainState(self.x.copy(), self.h.copy(), self.v_x.copy(),
                          self.v_h.copy(), self.t, self.resets)


class ExactGradOracle:
    """Exact joint gradient field (x, h) -> (grad_x, grad_h)."""

    stochastic = False

    def __init__(self, grad_fn):
        self.grad_fn = grad_fn

    def grad(self, x, h, refresh_noise, delta_star, skip_refresh):
        return self.grad_fn(x, h)


class StochasticGradOracle:
    """Tractable biased gradient of log[p(x) q(h|x)].

    grad_x  = d/dx [log p(x) + log q(h, x) - log q(h*, x)]
    grad_h  = d/dh log q(h, x)

    where h* approximates a draw from q(h|x), obtained by inner Langevin
    steps started at h.  When skip_refresh is set (the first step of a chain
    fresh from ancestral sampling, where h already is an exact conditional
    draw) h* = h and grad_x collapses to d/dx log p(x) exactly.
    """

    stochastic = True

    def __init__(self, grad_logp_x, grad_logq_x, grad_logq_h):
        self.grad_logp_x = grad_logp_x
        self.grad_logq_x = grad_logq_x
        self.grad_logq_h = grad_logq_h

    def refresh(self, x, h, refresh_noise, delta_star):
        h_star = h
        for s in range(refresh_noise.shape[1]):
            drift = self.grad_logq_h(x, h_star)
            h_star = (h_star + delta_star * drift
                      + np.sqrt(2.0 * delta_star) * refresh_noise[:, s, :])
        return h_star

    def grad(self, x, h, refresh_noise, delta_star, skip_refresh):
        gx = self.grad_logp_x(x)
        gh = self.grad_logq_h(x, h)
        if not skip_refresh:
            h_star = self.refresh(x, h, refresh_noise, delta_star)
            gx = gx + self.grad_logq_x(x, h) - self.grad_logq_x(x, h_star)
        return gx, gh


def nrf_oracle(pot: PotentialNet, gen: GeneratorNet) -> StochasticGradOracle:
    """Stochastic oracle for the trained-model target p(x) q(h|x)."""
    return StochasticGradOracle(
        lambda x: models.grad_potential_x(pot, x),
        lambda x, h: models.grad_log_q_joint_x(gen, x, h),
        lambda x, h: models.grad_log_q_joint_h(gen, x, h),
    )


def conditional_oracle(pot: PotentialNet, gen: GeneratorNet, y) -> StochasticGradOracle:
    """Stochastic oracle with the class-y potential head as the target."""
    return StochasticGradOracle(
        lambda x: models.grad_class_potential_x(pot, x, y),
        lambda x, h: models.grad_log_q_joint_x(gen, x, h),
        lambda x, h: models.grad_log_q_joint_h(gen, x, h),
    )


def inner_ld_refresh(gen: GeneratorNet, x, h, delta_star: float,
                     rng: np.random.Generator, inner_steps: int = 1):
    """Langevin refresh of the latent toward q(h|x):
    h* = h + delta* d/dh log q(h, x) + sqrt(2 delta*) eta."""
    h_star = np.atleast_2d(np.asarray(h, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    for _ in range(inner_steps):
        drift = models.grad_log_q_joint_h(gen, x, h_star)
        if not np.all(np.isfinite(drift)):
            raise NonFiniteError("latent refresh gradient is not finite")
        eta = rng.standard_normal(h_star.shape)
        h_star = h_star + delta_star * drift + np.sqrt(2.0 * delta_star) * eta
    return h_star[0] if np.asarray(h).ndim == 1 else h_star


def stochastic_gradient(pot: PotentialNet, gen: GeneratorNet, x, h, h_star):
    """The biased gradient estimate for a given conditional draw h*."""
    gx = (models.grad_potential_x(pot, x)
          + models.grad_log_q_joint_x(gen, x, h)
          - models.grad_log_q_joint_x(gen, x, h_star))
    gh = models.grad_log_q_joint_h(gen, x, h)
    return gx, gh


def _divergent_rows(state: ChainState) -> np.ndarray:
    stacked = np.concatenate([state.x, state.h, state.v_x, state.v_h], axis=1)
    finite = np.isfinite(stacked).all(axis=1)
    bounded = np.abs(np.where(np.isfinite(stacked), stacked, 0.0)).max(axis=1) <= STATE_LIMIT
    return ~(finite & bounded)


def _reset_rows(state: ChainState, idx: np.ndarray, propose, streams):
    x_new, h_new = propose(idx, streams)
    state.x[idx] = x_new
    state.h[idx] = h_new
    state.v_x[idx] = 0.0
    state.v_h[idx] = 0.0
    state.resets += idx.size


def revise(cfg: SamplerConfig, oracle, state: ChainState, streams,
           propose=None) -> ChainState:
    """Run cfg.steps joint (x, h) updates, returning a new state.

    SGLD:   z <- z + delta grad + sqrt(2 delta) eta
    SGHMC:  v <- (1 - beta) v + delta grad + sqrt(2 beta delta) eta; z <- z + v

    Noise is pre-drawn per chain from its own stream (one block per call),
    so batched execution reproduces independent single-chain runs exactly.
    Divergent chains are re-proposed through `propose` when given, otherwise
    the call aborts.
    """
    new = state.copy()
    steps = cfg.steps
    if steps == 0:
        return new
    k, dx = new.x.shape
    dh = new.h.shape[1]
    if len(streams) != k:
        raise ValueError("need one RNG stream per chain")
    inner = cfg.inner_steps if oracle.stochastic else 0
    width = dx + dh + inner * dh
    noise = np.stack([s.standard_normal((steps, width)) for s in streams])

    hmc = cfg.kind in ("sghmc", "hmc_exact")
    for l in range(steps):
        t = new.t + l
        delta = cfg.step_size(t)
        eta_x = noise[:, l, :dx]
        eta_h = noise[:, l, dx:dx + dh]
        refresh = (noise[:, l, dx + dh:].reshape(k, inner, dh)
                   if inner else None)
        d_star = cfg.delta_star if cfg.delta_star is not None else delta
        gx, gh = oracle.grad(new.x, new.h, refresh, d_star,
                             skip_refresh=(t == 0))
        if hmc:
            scale = np.sqrt(2.0 * cfg.beta * delta)
            new.v_x = (1.0 - cfg.beta) * new.v_x + delta * gx + scale * eta_x
            new.v_h = (1.0 - cfg.beta) * new.v_h + delta * gh + scale * eta_h
            new.x = new.x + new.v_x
            new.h = new.h + new.v_h
        else:
            scale = np.sqrt(2.0 * delta)
            new.x = new.x + delta * gx + scale * eta_x
            new.h = new.h + delta * gh + scale * eta_h
        bad = _divergent_rows(new)
        if bad.any():
            if propose is None:
                raise ChainDivergedError(step=t + 1, count=int(bad.sum()))
            _reset_rows(new, np.flatnonzero(bad), propose, streams)
    new.t += steps
    return new


def coopnet_revise(grad_x_fn, grad_h_fn, state: ChainState, cfg: SamplerConfig,
                   streams, propose=None) -> ChainState:
    """Interleaved baseline: coop_lx Langevin steps on x under d/dx log p(x),
    then coop_lh Langevin steps on h under d/dh log q(h, x) with x frozen.

    One call advances the step counter by coop_lx, the per-variable
    iteration count used when comparing against joint samplers.
    """
    new = state.copy()
    lx, lh = cfg.coop_lx, cfg.coop_lh
    if lx == 0 and lh == 0:
        return new
    k, dx = new.x.shape
    dh = new.h.shape[1]
    flat = [s.standard_normal(lx * dx + lh * dh) for s in streams]
    noise = np.stack(flat)
    noise_x = noise[:, :lx * dx].reshape(k, lx, dx)
    noise_h = noise[:, lx * dx:].reshape(k, lh, dh)

    for i in range(lx):
        delta = cfg.step_size(new.t + i)
        new.x = new.x + delta * grad_x_fn(new.x) + np.sqrt(2.0 * delta) * noise_x[:, i, :]
        bad = _divergent_rows(new)
        if bad.any():
            if propose is None:
                raise ChainDivergedError(step=new.t + i + 1, count=int(bad.sum()))
            _reset_rows(new, np.flatnonzero(bad), propose, streams)
    for j in range(lh):
        delta = cfg.step_size(new.t + j)
        new.h = new.h + delta * grad_h_fn(new.x, new.h) + np.sqrt(2.0 * delta) * noise_h[:, j, :]
        bad = _divergent_rows(new)
        if bad.any():
            if propose is None:
                raise ChainDivergedError(step=new.t + j + 1, count=int(bad.sum()))
            _reset_rows(new, np.flatnonzero(bad), propose, streams)
    new.t += lx
    return new


def ancestral_rows(gen: GeneratorNet, streams, idx=None):
    """Per-chain ancestral proposals: chain i draws h then eps from its own
    stream; decoding is batched."""
    if idx is None:
        idx = range(len(streams))
    hs, eps = [], []
    for i in idx:
        hs.append(streams[i].standard_normal(gen.latent_dim))
        eps.append(streams[i].standard_normal(gen.obs_dim))
    h = np.stack(hs)
    x = models.decode(gen, h) + gen.sigma * np.stack(eps)
    return x, h


def _sample_chains(pot: PotentialNet, gen: GeneratorNet, cfg: SamplerConfig,
                   streams) -> ChainState:
    x0, h0 = ancestral_rows(gen, streams)
    state = ChainState(x0, h0)

    def propose(idx, strs):
        return ancestral_rows(gen, strs, idx)

    if cfg.steps == 0:
        return state
    if cfg.kind == "coopnet":
        return coopnet_revise(
            lambda x: models.grad_potential_x(pot, x),
            lambda x, h: models.grad_log_q_joint_h(gen, x, h),
            state, cfg, streams, propose)
    return revise(cfg, nrf_oracle(pot, gen), state, streams, propose)


def sample_model(pot: PotentialNet, gen: GeneratorNet, cfg: SamplerConfig,
                 streams):
    """Ancestral proposal followed by sample revision; returns (x, h)."""
    state = _sample_chains(pot, gen, cfg, streams)
    return state.x, state.h


def conditional_revise(pot: PotentialNet, gen: GeneratorNet, y,
                       cfg: SamplerConfig, streams):
    """Class-conditional revision: revise unconditional proposals under the
    class-y potential head.  y None picks each sample's predicted class."""
    if pot.num_outputs < 2:
        raise ValueError("conditional revision requires a multi-head potential")
    x0, h0 = ancestral_rows(gen, streams)
    if y is None:
        y_rows = np.argmax(models.classifier_probs(pot, x0), axis=1) + 1
    else:
        y_rows = int(y)
        if not 1 <= y_rows <= pot.num_outputs:
            raise ValueError("class label out of range")
    state = ChainState(x0, h0)
    if cfg.steps == 0:
        return state.x
    state = revise(cfg, conditional_oracle(pot, gen, y_rows), state, streams,
                   propose=lambda idx, strs: ancestral_rows(gen, strs, idx))
    return state.x


def interpolate_latent(gen: GeneratorNet, h1, h2, steps: int):
    """Noise-free decodes along the straight latent path from h1 to h2."""
    if steps < 2:
        raise ValueError("need at least the two endpoints")
    h1 = np.asarray(h1, dtype=np.float64).reshape(-1)
    h2 = np.asarray(h2, dtype=np.float64).reshape(-1)
    if h1.shape != (gen.latent_dim,) or h2.shape != (gen.latent_dim,):
        raise ValueError("endpoint dimension mismatch")
    ts = np.linspace(0.0, 1.0, steps)
    path = (1.0 - ts)[:, None] * h1 + ts[:, None] * h2
    return models.decode(gen, path)
