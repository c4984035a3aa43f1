"""KL-divergence approximations against Gaussian mixtures.

For a single Gaussian ``p`` against a mixture ``Q`` the product estimate is a
lower bound and the variational estimate an upper bound; their average is the
working estimate. For mixture against mixture both are plain approximations.
Everything is evaluated in log space.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .gaussian import (
    DiagGaussian,
    GaussianMixture,
    kl_diag_arrays,
    log_pdf,
    log_product_normalizer_arrays,
    sample,
)


def _log_weights(w):
    with np.errstate(divide="ignore"):
        return np.log(w)


def _check(p, Q: GaussianMixture):
    if not isinstance(Q, GaussianMixture):
        raise TypeError("Q must be a GaussianMixture")
    if p.dim != Q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {Q.dim}")


def d_var_g_gm(p: DiagGaussian, Q: GaussianMixture) -> float:
    """Variational upper bound: -log sum_i a_i exp(-KL(p || Q_i))."""
    _check(p, Q)
    kls = kl_diag_arrays(p.mean[None], p.var[None], Q.means, Q.vars)
    if Q.n_components == 1:
        return max(float(kls[0]), 0.0)
    return float(-logsumexp(_log_weights(Q.weights) - kls))


def d_prod_g_gm(p: DiagGaussian, Q: GaussianMixture) -> float:
    """Product-of-Gaussians lower bound: -h(p) - log sum_i a_i E_p[Q_i]."""
    _check(p, Q)
    log_t = log_product_normalizer_arrays(p.mean[None], p.var[None], Q.means, Q.vars)
    return float(-p.entropy() - logsumexp(_log_weights(Q.weights) + log_t))


def d_est_g_gm(p: DiagGaussian, Q: GaussianMixture) -> float:
    return 0.5 * (d_prod_g_gm(p, Q) + d_var_g_gm(p, Q))


def _pairwise(P: GaussianMixture, R: GaussianMixture, fn):
    return fn(P.means[:, None, :], P.vars[:, None, :], R.means[None], R.vars[None])


def d_var_mm(P: GaussianMixture, Q: GaussianMixture) -> float:
    _check(P, Q)
    self_term = logsumexp(_log_weights(P.weights)[None] - _pairwise(P, P, kl_diag_arrays), axis=1)
    cross = logsumexp(_log_weights(Q.weights)[None] - _pairwise(P, Q, kl_diag_arrays), axis=1)
    return float(np.sum(P.weights * (self_term - cross)))


def d_prod_mm(P: GaussianMixture, Q: GaussianMixture) -> float:
    _check(P, Q)
    lw_p = _log_weights(P.weights)[None]
    self_term = logsumexp(lw_p + _pairwise(P, P, log_product_normalizer_arrays), axis=1)
    cross = logsumexp(
        _log_weights(Q.weights)[None] + _pairwise(P, Q, log_product_normalizer_arrays), axis=1
    )
    return float(np.sum(P.weights * (self_term - cross)))


def d_est_mm(P: GaussianMixture, Q: GaussianMixture) -> float:
    return 0.5 * (d_prod_mm(P, Q) + d_var_mm(P, Q))


def mc_kl(
    p: DiagGaussian | GaussianMixture,
    Q: GaussianMixture,
    samples: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Monte-Carlo KL(p || Q) with its standard error, from i.i.d. draws of p."""
    if samples < 1000:
        raise ValueError("mc_kl needs at least 1000 samples")
    _check(p, Q)
    x = sample(p, rng, samples)
    diff = log_pdf(p, x) - log_pdf(Q, x)
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(samples))
