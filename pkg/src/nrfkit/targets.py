"""Analytic targets and synthetic datasets.

Ring-layout Gaussian mixtures for the 2-D experiments, multivariate Gaussians
with exact densities/gradients/moments, and the joint Gaussian benchmark used
to score samplers against a tractable ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import logsumexp

COV_JITTER = 1e-8  # added to empirical covariances before factorizing


class GaussianDist:
    """Multivariate normal with a cached Cholesky factor."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match mean")
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-12:
            raise ValueError("covariance is not symmetric")
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
        self.log_det = 2.0 * float(np.log(np.diag(self.chol)).sum())

    @property
    def dim(self) -> int:
        return self.mean.size

    def _solve_cov(self, b):
        y = np.linalg.solve(self.chol, b)
        return np.linalg.solve(self.chol.T, y)

    def log_density(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        diff = z - self.mean
        u = np.linalg.solve(self.chol, diff.T)
        quad = (u * u).sum(axis=0)
        val = -0.5 * (quad + self.log_det + self.dim * np.log(2.0 * np.pi))
        return float(val[0]) if val.size == 1 else val

    def grad_log_density(self, z):
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        diff = np.atleast_2d(z) - self.mean
        grad = -self._solve_cov(diff.T).T
        return grad[0] if single else grad

    def sample(self, rng: np.random.Generator, n: int = 1):
        xi = rng.standard_normal((n, self.dim))
        return self.mean + xi @ self.chol.T


def empirical_gaussian(points) -> GaussianDist:
    """Moment fit with the 1/N covariance normalizer, jittered for stability."""
    pts = np.asarray(points, dtype=np.float64)
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / pts.shape[0]
    cov = (cov + cov.T) / 2.0 + COV_JITTER * np.eye(pts.shape[1])
    return GaussianDist(mean, cov)


def kl_gaussians(p: GaussianDist, q: GaussianDist) -> float:
    """KL(p || q) between multivariate normals, via Cholesky solves."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    k = p.dim
    y = np.linalg.solve(q.chol, p.chol)          # q^-1/2 p^1/2
    trace = float((y * y).sum())                 # tr(Sigma_q^-1 Sigma_p)
    w = np.linalg.solve(q.chol, q.mean - p.mean)
    maha = float(w @ w)
    return 0.5 * (trace + maha - k + q.log_det - p.log_det)


# -- ring mixtures -------------------------------------------------------------

@dataclass(frozen=True)
class GmmSpec:
    """Equally-weighted isotropic mixture over fixed 2-D means."""

    means: np.ndarray  # (M, 2)
    sigma: float

    def __post_init__(self):
        if self.means.ndim != 2 or self.means.shape[0] < 1:
            raise ValueError("need at least one component")
        if self.sigma <= 0:
            raise ValueError("component std must be positive")

    @property
    def num_components(self) -> int:
        return self.means.shape[0]


def gmm_rings(rings: int, per_ring: int, radii, sigma: float) -> GmmSpec:
    """Components on concentric circles; odd rings are staggered by half an
    angular step so neighboring rings interleave."""
    radii = tuple(radii)
    if len(radii) != rings:
        raise ValueError("need one radius per ring")
    if per_ring < 1:
        raise ValueError("per_ring must be >= 1")
    means = []
    for ring, radius in enumerate(radii):
        offset = np.pi / per_ring if ring % 2 == 1 else 0.0
        for k in range(per_ring):
            angle = 2.0 * np.pi * k / per_ring + offset
            means.append((radius * np.cos(angle), radius * np.sin(angle)))
    return GmmSpec(np.array(means, dtype=np.float64), float(sigma))


def gmm_32_modes(sigma: float = 0.1) -> GmmSpec:
    """4 rings x 8 components at radii 1..4."""
    return gmm_rings(4, 8, (1.0, 2.0, 3.0, 4.0), sigma)


def gmm_two_rings(sigma: float = 0.1) -> GmmSpec:
    """2 rings x 8 components at radii 1, 2; inner ring is class 1."""
    return gmm_rings(2, 8, (1.0, 2.0), sigma)


def gmm_sample(spec: GmmSpec, n: int, rng: np.random.Generator):
    """n points plus their component indices; components chosen uniformly."""
    comps = rng.integers(0, spec.num_components, size=n)
    noise = rng.standard_normal((n, 2))
    return spec.means[comps] + spec.sigma * noise, comps


def gmm_log_density(spec: GmmSpec, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    d2 = ((pts[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=2)
    comp_log = -d2 / (2.0 * spec.sigma**2) - np.log(2.0 * np.pi * spec.sigma**2)
    val = logsumexp(comp_log - np.log(spec.num_components), axis=1)
    val = np.atleast_1d(val)
    return float(val[0]) if single else val


def save_points_csv(path, points, labels=None):
    """x1,x2[,class] rows for plotting or re-ingestion."""
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write("x1,x2,class\n" if labels is not None else "x1,x2\n")
        for i, row in enumerate(points):
            line = f"{row[0]!r},{row[1]!r}"
            if labels is not None:
                line += f",{int(labels[i])}"
            fh.write(line + "\n")


def load_points_csv(path, with_labels: bool = False):
    data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
    data = np.atleast_2d(data)
    if with_labels:
        return data[:, :-1], data[:, -1].astype(int)
    return data, None


# -- joint Gaussian benchmark --------------------------------------------------

def random_spd(dim: int, rng: np.random.Generator) -> np.ndarray:
    """A A^T + dim I, rescaled to unit average diagonal: SPD with a bounded
    condition number by construction."""
    a = rng.standard_normal((dim, dim))
    s = a @ a.T + dim * np.eye(dim)
    s /= np.diag(s).mean()
    return (s + s.T) / 2.0


@dataclass
class GaussianJointBenchmark:
    """Target pi(x, h) = p(x) q(h|x) built from a Gaussian marginal p over x
    and a Gaussian joint q over (x, h), with all moments in closed form."""

    p_x: GaussianDist
    q_joint: GaussianDist
    pi: GaussianDist
    cond_gain: np.ndarray  # A in E[h|x] = mu_h + A (x - mu_x)
    cond_cov: np.ndarray   # Cov[h|x]
    cond_chol: np.ndarray

    @property
    def d(self) -> int:
        return self.p_x.dim

    def split(self, z):
        return z[..., :self.d], z[..., self.d:]

    def grad_log_pi(self, x, h):
        z = np.concatenate([np.atleast_2d(x), np.atleast_2d(h)], axis=1)
        g = self.pi.grad_log_density(z)
        return g[:, :self.d], g[:, self.d:]

    def grad_logp_x(self, x):
        return self.p_x.grad_log_density(x)

    def _grad_logq(self, x, h):
        z = np.concatenate([np.atleast_2d(x), np.atleast_2d(h)], axis=1)
        return self.q_joint.grad_log_density(z)

    def grad_logq_x(self, x, h):
        return self._grad_logq(x, h)[:, :self.d]

    def grad_logq_h(self, x, h):
        return self._grad_logq(x, h)[:, self.d:]

    def sample_q_joint(self, rng: np.random.Generator, n: int = 1):
        return self.q_joint.sample(rng, n)

    def sample_pi(self, rng: np.random.Generator, n: int = 1):
        """Ancestral draw from the target: x ~ p, then h | x."""
        x = self.p_x.sample(rng, n)
        mu_x = self.q_joint.mean[:self.d]
        mu_h = self.q_joint.mean[self.d:]
        cond_mean = mu_h + (x - mu_x) @ self.cond_gain.T
        h = cond_mean + rng.standard_normal((n, self.d)) @ self.cond_chol.T
        return np.concatenate([x, h], axis=1)


def make_benchmark(p_x: GaussianDist, q_joint: GaussianDist) -> GaussianJointBenchmark:
    """Compose pi(x, h) = p(x) q(h|x) from the given marginal and joint."""
    d = p_x.dim
    if q_joint.dim != 2 * d:
        raise ValueError("q_joint must live on (x, h) with matching dims")
    sxx = q_joint.cov[:d, :d]
    sxh = q_joint.cov[:d, d:]
    shh = q_joint.cov[d:, d:]
    gain = np.linalg.solve(sxx, sxh).T            # Sigma_hx Sigma_xx^-1
    cond_cov = shh - gain @ sxh
    cond_cov = (cond_cov + cond_cov.T) / 2.0

    mu_x = q_joint.mean[:d]
    mu_h = q_joint.mean[d:]
    mean = np.concatenate([p_x.mean, mu_h + gain @ (p_x.mean - mu_x)])
    top = np.hstack([p_x.cov, p_x.cov @ gain.T])
    bottom = np.hstack([gain @ p_x.cov, gain @ p_x.cov @ gain.T + cond_cov])
    cov = np.vstack([top, bottom])
    cov = (cov + cov.T) / 2.0
    pi = GaussianDist(mean, cov)
    return GaussianJointBenchmark(p_x, q_joint, pi, gain, cond_cov,
                                  np.linalg.cholesky(cond_cov))


def benchmark_target(d: int, rng: np.random.Generator) -> GaussianJointBenchmark:
    """Random marginal over x (dim d) and random joint over (x, h) (dim 2d)."""
    p_x = GaussianDist(0.5 * rng.standard_normal(d), random_spd(d, rng))
    q_joint = GaussianDist(0.5 * rng.standard_normal(2 * d),
                           random_spd(2 * d, rng))
    return make_benchmark(p_x, q_joint)


# -- closed forms for a linear generator --------------------------------------
# For x = h @ W + b + sigma * eps with h ~ N(0, I) the joint is Gaussian, so
# the marginal over x and the conditional over h given x are available
# exactly.  These serve as independent oracles for the stochastic-gradient
# estimator tests.  W has shape (latent_dim, obs_dim).

def linear_generator_marginal(W, b, sigma: float) -> GaussianDist:
    W = np.asarray(W, dtype=np.float64)
    cov = sigma**2 * np.eye(W.shape[1]) + W.T @ W
    return GaussianDist(np.asarray(b, dtype=np.float64), (cov + cov.T) / 2.0)


def linear_generator_conditional(W, b, sigma: float, x) -> GaussianDist:
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    prec = np.eye(W.shape[0]) + W @ W.T / sigma**2
    cov = np.linalg.inv(prec)
    cov = (cov + cov.T) / 2.0
    mean = cov @ (W @ (x - b)) / sigma**2
    return GaussianDist(mean, cov)
