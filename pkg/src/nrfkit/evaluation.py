"""Metrics: mode coverage for ring mixtures, KL curves for the sampler
benchmark, and anomaly-detection scores (rank AUC, quantile precision/recall/F1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .samplers import (ChainState, ExactGradOracle, SamplerConfig,
                       StochasticGradOracle, coopnet_revise, revise,
                       rng_streams)
from .targets import GaussianJointBenchmark, empirical_gaussian, kl_gaussians

REALISM_RADIUS_SQ = 0.02  # squared distance under which a sample certifies a mode


@dataclass
class ModeCoverageReport:
    covered_mean: float
    covered_sd: float
    ratio_mean: float
    ratio_sd: float
    covered: list = field(default_factory=list)
    ratios: list = field(default_factory=list)


def mode_coverage(sample_source, modes, reps: int = 100,
                  radius_sq: float = REALISM_RADIUS_SQ,
                  seed: int = 0) -> ModeCoverageReport:
    """Covered-modes / realistic-ratio protocol.

    Per repetition the source draws a fresh batch of points; a mode counts
    as covered when some point lies within radius_sq of it (squared
    distance) and a point counts as realistic when its nearest mode is
    within radius_sq.  sample_source is a callable rng -> (n, 2) array;
    each repetition gets its own child stream of `seed`.
    """
    modes = np.asarray(modes, dtype=np.float64)
    if modes.ndim != 2 or modes.shape[0] < 1:
        raise ValueError("need at least one mode")
    covered, ratios = [], []
    for rep, rng in enumerate(rng_streams(seed, reps, label=7)):
        pts = np.asarray(sample_source(rng), dtype=np.float64)
        d2 = ((pts[:, None, :] - modes[None, :, :]) ** 2).sum(axis=2)
        covered.append(int((d2 < radius_sq).any(axis=0).sum()))
        ratios.append(float((d2.min(axis=1) < radius_sq).mean()))
    covered_arr = np.array(covered, dtype=np.float64)
    ratio_arr = np.array(ratios, dtype=np.float64)
    sd = lambda a: float(a.std(ddof=1)) if a.size > 1 else 0.0
    return ModeCoverageReport(float(covered_arr.mean()), sd(covered_arr),
                              float(ratio_arr.mean()), sd(ratio_arr),
                              covered, ratios)


@dataclass
class KlCurve:
    """KL(empirical chains || target) at increasing iteration counts."""

    sampler: str
    chains: int
    steps: int
    points: list  # [(iteration, kl), ...]

    @property
    def final_kl(self) -> float:
        return self.points[-1][1]

    @property
    def initial_kl(self) -> float:
        return self.points[0][1]


def log_checkpoints(total: int, count: int = 20, multiple: int = 1) -> list:
    """~count log-spaced checkpoints in [0, total], snapped to `multiple`."""
    pts = np.unique(np.round(np.geomspace(1, total, count)).astype(int))
    pts = np.unique((np.ceil(pts / multiple) * multiple).astype(int))
    pts = pts[(pts > 0) & (pts <= total)]
    out = [0] + pts.tolist()
    if out[-1] != total and total % multiple == 0:
        out.append(total)
    return out


def sampler_benchmark(bench: GaussianJointBenchmark, cfg: SamplerConfig,
                      chains: int, steps: int, seed: int = 0,
                      checkpoints=None) -> KlCurve:
    """Score a sampler against the joint Gaussian target.

    Chains start from ancestral draws of the proposal joint; at each
    checkpoint the K current states are fit with an empirical Gaussian and
    KL(empirical || target) is recorded.  One interleaved-baseline call
    counts as coop_lx iterations, matching its per-variable work.
    """
    d = bench.d
    if chains < 2 * d + 1:
        raise ValueError("need more chains than the joint dimension")
    multiple = cfg.coop_lx if cfg.kind == "coopnet" else 1
    if checkpoints is None:
        checkpoints = log_checkpoints(steps, multiple=multiple)
    streams = rng_streams(seed, chains, label=0)

    def propose(idx, strs):
        z = np.stack([bench.q_joint.mean
                      + bench.q_joint.chol @ strs[i].standard_normal(2 * d)
                      for i in idx])
        return z[:, :d], z[:, d:]

    z0 = np.stack([bench.q_joint.mean
                   + bench.q_joint.chol @ s.standard_normal(2 * d)
                   for s in streams])
    state = ChainState(z0[:, :d], z0[:, d:])

    if cfg.kind in ("ld_exact", "hmc_exact"):
        oracle = ExactGradOracle(bench.grad_log_pi)
    else:
        oracle = StochasticGradOracle(bench.grad_logp_x, bench.grad_logq_x,
                                      bench.grad_logq_h)

    def record(points):
        z = np.concatenate([state.x, state.h], axis=1)
        points.append((state.t, kl_gaussians(empirical_gaussian(z), bench.pi)))

    points = []
    record(points)
    for target_t in checkpoints:
        if target_t <= state.t:
            continue
        if cfg.kind == "coopnet":
            while state.t < target_t:
                state = coopnet_revise(bench.grad_logp_x, bench.grad_logq_h,
                                       state, cfg, streams, propose)
        else:
            seg = SamplerConfig(kind=cfg.kind, steps=target_t - state.t,
                                delta=cfg.delta, schedule=cfg.schedule,
                                beta=cfg.beta, inner_steps=cfg.inner_steps,
                                delta_star=cfg.delta_star)
            state = revise(seg, oracle, state, streams, propose)
        record(points)
    return KlCurve(cfg.kind, chains, steps, points)


# -- anomaly metrics -----------------------------------------------------------

def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ascending 1-based ranks with ties given their group average."""
    _, inverse, counts = np.unique(values, return_inverse=True,
                                   return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    return ((starts + ends) / 2.0)[inverse]


def roc_auc(scores, labels) -> float:
    """Probability that a random anomaly scores below a random normal
    sample (ties count half); anomalies are the truthy labels."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    ranks = _average_ranks(s)
    u_above = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(1.0 - u_above / (n_pos * n_neg))


def prf_at_quantile(scores, labels, quantile: float = 0.20):
    """Flag the floor(quantile * N) lowest scores as anomalies (ties broken
    by input order) and report precision, recall, F1 with anomaly positive."""
    if not 0.0 < quantile < 1.0:
        raise ValueError("quantile must be in (0, 1)")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.size == 0:
        raise ValueError("empty input")
    n_flag = int(np.floor(quantile * s.size))
    order = np.argsort(s, kind="stable")
    flagged = order[:n_flag]
    tp = int(y[flagged].sum())
    n_pos = int(y.sum())
    precision = tp / n_flag if n_flag else 0.0
    recall = tp / n_pos if n_pos else 0.0
    f1 = (2.0 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    return precision, recall, f1


# -- CSV emitters --------------------------------------------------------------

def write_kl_curves(path, curves):
    with open(path, "w") as fh:
        fh.write("sampler,iteration,kl\n")
        for curve in curves:
            for it, kl in curve.points:
                fh.write(f"{curve.sampler},{it},{kl!r}\n")


def write_coverage_csv(path, report: ModeCoverageReport):
    with open(path, "w") as fh:
        fh.write("run,covered,ratio\n")
        for i, (cov, ratio) in enumerate(zip(report.covered, report.ratios)):
            fh.write(f"{i},{cov},{ratio!r}\n")


def write_anomaly_csv(path, metrics: dict):
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        for name, value in metrics.items():
            fh.write(f"{name},{value!r}\n")
