"""Diagonal Gaussians and Gaussian mixtures.

Variances (not standard deviations) are stored everywhere. All divergences
are in nats.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

VAR_FLOOR = 1e-8
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class DiagGaussian:
    """N(mean, diag(var)); variances below ``VAR_FLOOR`` are raised to it."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        var = np.atleast_1d(np.asarray(self.var, dtype=float))
        if mean.ndim != 1 or mean.shape != var.shape:
            raise ValueError(
                f"mean and var must be 1-d of equal length, got {mean.shape} and {var.shape}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise ValueError("mean and var must be finite")
        if np.any(var < 0):
            raise ValueError("variances must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", np.maximum(var, VAR_FLOOR))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def entropy(self) -> float:
        """Differential entropy in nats."""
        return 0.5 * float(np.sum(LOG_2PI + 1.0 + np.log(self.var)))


@dataclass(frozen=True)
class GaussianMixture:
    """Weighted mixture of diagonal Gaussians sharing one dimension.

    ``means`` and ``vars`` have shape (M, d); ``weights`` has shape (M,).
    """

    means: np.ndarray
    vars: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        var = np.atleast_2d(np.asarray(self.vars, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if means.shape != var.shape:
            raise ValueError(f"means {means.shape} and vars {var.shape} differ in shape")
        if means.shape[0] == 0:
            raise ValueError("mixture needs at least one component")
        if weights.shape != (means.shape[0],):
            raise ValueError(f"expected {means.shape[0]} weights, got {weights.shape}")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "means", means)
        if np.any(var < 0):
            raise ValueError("variances must be nonnegative")
        object.__setattr__(self, "vars", np.maximum(var, VAR_FLOOR))
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_components(cls, components, weights) -> "GaussianMixture":
        comps = list(components)
        return cls(
            np.stack([c.mean for c in comps]),
            np.stack([c.var for c in comps]),
            weights,
        )

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[DiagGaussian]:
        return [DiagGaussian(m, v) for m, v in zip(self.means, self.vars)]


def _check_dims(d1: int, d2: int):
    if d1 != d2:
        raise ValueError(f"dimension mismatch: {d1} vs {d2}")


def kl_diag_arrays(mean_p, var_p, mean_q, var_q):
    """KL(N(mean_p, var_p) || N(mean_q, var_q)) summed over the last axis.

    Broadcasts, so one posterior can be compared with many components at once.
    """
    return 0.5 * np.sum(
        np.log(var_q) - np.log(var_p) + (var_p + (mean_p - mean_q) ** 2) / var_q - 1.0,
        axis=-1,
    )


def kl_diag(p: DiagGaussian, q: DiagGaussian) -> float:
    _check_dims(p.dim, q.dim)
    return float(max(kl_diag_arrays(p.mean, p.var, q.mean, q.var), 0.0))


def log_product_normalizer_arrays(mean_p, var_p, mean_q, var_q):
    """log of the integral of the product of two diagonal Gaussian densities."""
    s = var_p + var_q
    return -0.5 * np.sum(LOG_2PI + np.log(s) + (mean_p - mean_q) ** 2 / s, axis=-1)


def log_product_normalizer(p: DiagGaussian, q: DiagGaussian) -> float:
    _check_dims(p.dim, q.dim)
    return float(log_product_normalizer_arrays(p.mean, p.var, q.mean, q.var))


def product_normalizer(p: DiagGaussian, q: DiagGaussian) -> float:
    """t = E_p[q(X)]; underflows to 0 for distant pairs, use the log variant there."""
    return float(np.exp(log_product_normalizer(p, q)))


def log_density_at_mean_arrays(mean_p, mean_q, var_q):
    """log q(mean_p): the product normalizer with the posterior variance dropped."""
    return -0.5 * np.sum(LOG_2PI + np.log(var_q) + (mean_p - mean_q) ** 2 / var_q, axis=-1)


def log_product_normalizer_prior_only(p: DiagGaussian, q: DiagGaussian) -> float:
    """log t' where t' drops the posterior variance from the normalizer."""
    _check_dims(p.dim, q.dim)
    return float(log_density_at_mean_arrays(p.mean, q.mean, q.var))


def product_normalizer_prior_only(p: DiagGaussian, q: DiagGaussian) -> float:
    return float(np.exp(log_product_normalizer_prior_only(p, q)))


def log_pdf(g: DiagGaussian | GaussianMixture, x) -> np.ndarray | float:
    """Log density at ``x`` (a vector, or an (n, d) array of points)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    _check_dims(pts.shape[-1], g.dim)
    if isinstance(g, DiagGaussian):
        out = log_density_at_mean_arrays(pts, g.mean, g.var)
    else:
        comp = log_density_at_mean_arrays(pts[:, None, :], g.means[None], g.vars[None])
        with np.errstate(divide="ignore"):
            out = logsumexp(comp + np.log(g.weights)[None], axis=1)
    return float(out[0]) if single else out


def sample(g: DiagGaussian | GaussianMixture, rng: np.random.Generator, k: int) -> np.ndarray:
    """Draw ``k`` points as a (k, d) array via mean + std * standard normal."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(g, DiagGaussian):
        xi = rng.standard_normal((k, g.dim))
        return g.mean + np.sqrt(g.var) * xi
    idx = rng.choice(g.n_components, size=k, p=g.weights)
    xi = rng.standard_normal((k, g.dim))
    return g.means[idx] + np.sqrt(g.vars[idx]) * xi
