"""Neural random field toolkit.

Unnormalized densities p(x) = exp(u(x))/Z with neural potentials, trained by
pairing maximum likelihood on the potential with inclusive-divergence
minimization of an auxiliary latent-variable generator, and sampled with
stochastic-gradient Langevin / Hamiltonian dynamics.
"""

__version__ = "0.1.0"
