"""Data-dependent per-class Gaussian mixture prior.

The bank holds one mixture per class. Each training iteration runs an E-like
step (responsibilities), an M-like step (closed-form proposals) and a
moving-average blend with optional Gaussian noise. The same bank provides the
regularizer (an estimate of the posterior-to-prior KL) together with its
analytic gradient with respect to the posterior parameters.

Four modes are supported:

``lossless-var``
    variational upper bound with exact KL to each component.
``lossless-est``
    average of the variational bound and the product estimate.
``lossy-var`` / ``lossy-est``
    the same two estimates for the perturbed latent, where the mean part is
    compared under isotropic variance sqrt(d)/2 and the variance part is
    shifted by ``eps``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable

import numpy as np
from scipy.special import logsumexp, softmax

from .gaussian import LOG_2PI, VAR_FLOOR, GaussianMixture, DiagGaussian, kl_diag_arrays

BANK_FORMAT = "gmmdl.prior-bank"
BANK_VERSION = 1


class PriorMode(str, Enum):
    LOSSLESS_VAR = "lossless-var"
    LOSSLESS_EST = "lossless-est"
    LOSSY_VAR = "lossy-var"
    LOSSY_EST = "lossy-est"

    @property
    def lossy(self) -> bool:
        return self in (PriorMode.LOSSY_VAR, PriorMode.LOSSY_EST)

    @property
    def uses_beta(self) -> bool:
        return self in (PriorMode.LOSSLESS_EST, PriorMode.LOSSY_EST)


def _mode(mode) -> PriorMode:
    return mode if isinstance(mode, PriorMode) else PriorMode(mode)


@dataclass(frozen=True)
class PosteriorBatch:
    """Per-sample encoder posteriors N(means[i], diag(vars[i])) with labels."""

    labels: np.ndarray
    means: np.ndarray
    vars: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        var = np.atleast_2d(np.asarray(self.vars, dtype=float))
        if means.shape != var.shape or means.shape[0] != labels.shape[0]:
            raise ValueError(
                f"inconsistent batch shapes: labels {labels.shape}, means {means.shape}, vars {var.shape}"
            )
        if np.any(var <= 0):
            raise ValueError("posterior variances must be positive")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "vars", var)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class PriorBank:
    """C mixtures of M diagonal Gaussians in R^d plus update hyperparameters.

    ``eta`` are the moving-average coefficients for (means, variances,
    weights); ``zeta`` the noise variances added to means and variances.
    """

    means: np.ndarray  # (C, M, d)
    vars: np.ndarray  # (C, M, d)
    weights: np.ndarray  # (C, M)
    eta: tuple[float, float, float] = (1e-2, 5e-4, 1e-2)
    zeta: tuple[float, float] = (0.0, 0.0)
    eps: float = 0.0
    var_floor: float = VAR_FLOOR

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        var = np.asarray(self.vars, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if means.ndim != 3 or var.shape != means.shape or weights.shape != means.shape[:2]:
            raise ValueError(
                f"inconsistent bank shapes: means {means.shape}, vars {var.shape}, weights {weights.shape}"
            )
        if np.any(weights < 0) or np.any(np.abs(weights.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("per-class weights must form a simplex")
        if any(not 0.0 <= e <= 1.0 for e in self.eta):
            raise ValueError("eta coefficients must lie in [0, 1]")
        if np.any(var < 0):
            raise ValueError("variances must be nonnegative")
        if any(z < 0 for z in self.zeta) or self.eps < 0 or self.var_floor <= 0:
            raise ValueError("zeta and eps must be nonnegative, var_floor positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "vars", np.maximum(var, self.var_floor))
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "eta", tuple(float(e) for e in self.eta))
        object.__setattr__(self, "zeta", tuple(float(z) for z in self.zeta))

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def n_components(self) -> int:
        return self.means.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    def mixture(self, c: int) -> GaussianMixture:
        return GaussianMixture(self.means[c], self.vars[c], self.weights[c])

    def to_dict(self) -> dict:
        return {
            "format": BANK_FORMAT,
            "version": BANK_VERSION,
            "hyperparameters": {
                "eta": list(self.eta),
                "zeta": list(self.zeta),
                "eps": self.eps,
                "var_floor": self.var_floor,
            },
            "classes": [
                {
                    "label": c,
                    "components": [
                        {
                            "weight": float(self.weights[c, m]),
                            "mean": self.means[c, m].tolist(),
                            "var": self.vars[c, m].tolist(),
                        }
                        for m in range(self.n_components)
                    ],
                }
                for c in range(self.num_classes)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PriorBank":
        if doc.get("format") != BANK_FORMAT:
            raise ValueError(f"not a prior bank document (format={doc.get('format')!r})")
        if doc.get("version") != BANK_VERSION:
            raise ValueError(f"unsupported prior bank version {doc.get('version')!r}")
        classes = sorted(doc["classes"], key=lambda c: c["label"])
        hyper = doc.get("hyperparameters", {})
        return cls(
            means=[[comp["mean"] for comp in c["components"]] for c in classes],
            vars=[[comp["var"] for comp in c["components"]] for c in classes],
            weights=[[comp["weight"] for comp in c["components"]] for c in classes],
            eta=tuple(hyper.get("eta", (1e-2, 5e-4, 1e-2))),
            zeta=tuple(hyper.get("zeta", (0.0, 0.0))),
            eps=hyper.get("eps", 0.0),
            var_floor=hyper.get("var_floor", VAR_FLOOR),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PriorBank":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Responsibilities:
    gamma: np.ndarray  # (b, M)
    mode: PriorMode
    beta: np.ndarray | None = None  # (b, M), estimate modes only


@dataclass(frozen=True)
class Proposal:
    """Closed-form M-step targets for every (class, component)."""

    means: np.ndarray
    vars: np.ndarray
    weights: np.ndarray


def init_bank(
    num_classes: int,
    n_components: int,
    encoder_view: Callable[[object], PosteriorBatch],
    batch_source: Callable[[np.random.Generator], object],
    rng: np.random.Generator,
    *,
    eta=(1e-2, 5e-4, 1e-2),
    zeta=(0.0, 0.0),
    eps: float = 0.0,
    var_floor: float = VAR_FLOOR,
    max_retries: int = 10,
) -> PriorBank:
    """k-means++ style seeding of the component means.

    ``batch_source(rng)`` returns a large raw batch and ``encoder_view`` maps it
    to posteriors. The first mean of each class is a uniformly chosen latent
    mean; every further component is drawn from a fresh batch with probability
    proportional to the squared distance to the closest chosen center.
    Variances are s^2 + var_floor with s standard normal; weights are uniform.
    """

    def draw() -> PosteriorBatch:
        for _ in range(max_retries + 1):
            view = encoder_view(batch_source(rng))
            if np.all(np.bincount(view.labels, minlength=num_classes)[:num_classes] > 0):
                return view
        raise ValueError(f"some class is absent from {max_retries + 1} consecutive initialization batches")

    view = draw()
    d = view.dim
    means = np.empty((num_classes, n_components, d))
    for c in range(num_classes):
        pool = view.means[view.labels == c]
        means[c, 0] = pool[rng.integers(pool.shape[0])]
    for m in range(1, n_components):
        view = draw()
        for c in range(num_classes):
            pool = view.means[view.labels == c]
            dist = np.min(
                np.sum((pool[:, None, :] - means[c, None, :m, :]) ** 2, axis=-1), axis=1
            )
            total = dist.sum()
            if total > 0 and np.isfinite(total):
                idx = rng.choice(pool.shape[0], p=dist / total)
            else:
                idx = rng.integers(pool.shape[0])
            means[c, m] = pool[idx]
    s = rng.standard_normal((num_classes, n_components, d))
    return PriorBank(
        means=means,
        vars=s**2 + var_floor,
        weights=np.full((num_classes, n_components), 1.0 / n_components),
        eta=eta,
        zeta=zeta,
        eps=eps,
        var_floor=var_floor,
    )


def _check_batch(batch: PosteriorBatch, bank: PriorBank):
    if batch.dim != bank.dim:
        raise ValueError(f"batch dimension {batch.dim} does not match bank dimension {bank.dim}")
    if len(batch) and (batch.labels.min() < 0 or batch.labels.max() >= bank.num_classes):
        raise ValueError("batch labels out of range for this bank")


def d_kl_lossy_arrays(mean_p, var_p, mean_q, var_q, eps):
    """Lossy divergence, broadcasting over leading axes."""
    d = mean_p.shape[-1]
    mean_part = np.sum((mean_p - mean_q) ** 2, axis=-1) / np.sqrt(d)
    return mean_part + kl_diag_arrays(0.0, var_p + eps, 0.0, var_q + eps)


def d_kl_lossy(p: DiagGaussian, component: DiagGaussian, eps: float, d: int | None = None) -> float:
    """KL between the perturbed posterior and a prior component (nats).

    Mean part: N(mu_x, sqrt(d)/2 I) against N(mu_cm, sqrt(d)/2 I), which is
    ||mu_x - mu_cm||^2 / sqrt(d). Variance part: N(0, var_x + eps) against
    N(0, var_cm + eps).
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if p.dim != component.dim or (d is not None and d != p.dim):
        raise ValueError("dimension mismatch")
    return float(max(d_kl_lossy_arrays(p.mean, p.var, component.mean, component.var, eps), 0.0))


def _gathered(batch: PosteriorBatch, bank: PriorBank):
    mu_q = bank.means[batch.labels]  # (b, M, d)
    var_q = bank.vars[batch.labels]
    with np.errstate(divide="ignore"):
        log_alpha = np.log(bank.weights[batch.labels])  # (b, M)
    return mu_q, var_q, log_alpha


def component_divergences(batch: PosteriorBatch, bank: PriorBank, mode) -> np.ndarray:
    """(b, M) divergences from each posterior to the components of its class."""
    mode = _mode(mode)
    _check_batch(batch, bank)
    mu_q, var_q, _ = _gathered(batch, bank)
    mu_p = batch.means[:, None, :]
    var_p = batch.vars[:, None, :]
    if mode.lossy:
        return d_kl_lossy_arrays(mu_p, var_p, mu_q, var_q, bank.eps)
    return kl_diag_arrays(mu_p, var_p, mu_q, var_q)


def _beta_logits(batch: PosteriorBatch, bank: PriorBank, mode: PriorMode) -> np.ndarray:
    mu_q, var_q, log_alpha = _gathered(batch, bank)
    sq = (batch.means[:, None, :] - mu_q) ** 2
    if mode.lossy:
        return log_alpha - np.sum(sq, axis=-1) / (2.0 * np.sqrt(bank.dim))
    return log_alpha - np.sum(sq / (2.0 * var_q), axis=-1)


def responsibilities(batch: PosteriorBatch, bank: PriorBank, mode) -> Responsibilities:
    """gamma_im proportional to alpha_{y_i,m} exp(-divergence); beta for estimate modes."""
    mode = _mode(mode)
    div = component_divergences(batch, bank, mode)
    _, _, log_alpha = _gathered(batch, bank)
    gamma = softmax(log_alpha - div, axis=1)
    beta = softmax(_beta_logits(batch, bank, mode), axis=1) if mode.uses_beta else None
    return Responsibilities(gamma=gamma, mode=mode, beta=beta)


def m_step(batch: PosteriorBatch, resp: Responsibilities, bank: PriorBank, mode=None) -> Proposal:
    """Closed-form proposals for means, variances and weights.

    Variance proposals are centred on the bank's current means. A component
    with no responsibility mass in the batch keeps its current mean and
    variance; a class absent from the batch keeps its weights.
    """
    mode = resp.mode if mode is None else _mode(mode)
    if mode != resp.mode:
        raise ValueError(f"responsibilities were computed for {resp.mode.value}, not {mode.value}")
    if len(batch) == 0:
        raise ValueError("m_step needs a non-empty batch")
    _check_batch(batch, bank)
    C, M, d = bank.means.shape
    onehot = np.zeros((len(batch), C))
    onehot[np.arange(len(batch)), batch.labels] = 1.0

    gamma = resp.gamma
    if mode.uses_beta:
        beta = resp.beta
        mixed = (gamma + beta) / 2.0
        mean_w = (2.0 * gamma + beta) / 3.0 if mode.lossy else mixed
        weight_w = mixed
    else:
        mean_w = weight_w = gamma

    def per_class(w):
        # (b, M) sample weights scattered into (C, b, M)
        return onehot.T[:, :, None] * w[None, :, :]

    g_c = per_class(gamma)
    mass = g_c.sum(axis=1)  # (C, M)
    mean_c = per_class(mean_w)
    mean_mass = mean_c.sum(axis=1)
    weight_mass = per_class(weight_w).sum(axis=1)

    with np.errstate(invalid="ignore", divide="ignore"):
        new_means = np.einsum("cbm,bd->cmd", mean_c, batch.means) / mean_mass[..., None]
        if mode.lossy:
            num = np.einsum("cbm,bd->cmd", g_c, batch.vars)
        else:
            sq = (batch.means[None, :, None, :] - bank.means[:, None, :, :]) ** 2  # (C, b, M, d)
            fit_w = 2.0 * per_class(weight_w) if mode.uses_beta else g_c
            num = np.einsum("cbm,bd->cmd", g_c, batch.vars) + np.einsum("cbm,cbmd->cmd", fit_w, sq)
        new_vars = num / mass[..., None]
        class_mass = weight_mass.sum(axis=1, keepdims=True)
        new_weights = weight_mass / class_mass

    new_means = np.where((mean_mass > 0)[..., None], new_means, bank.means)
    new_vars = np.where((mass > 0)[..., None], new_vars, bank.vars)
    new_weights = np.where(class_mass > 0, new_weights, bank.weights)
    return Proposal(new_means, new_vars, new_weights)


def apply_ma_update(bank: PriorBank, proposal: Proposal, rng: np.random.Generator | None = None) -> PriorBank:
    """Blend proposals into the bank and add the configured noise."""
    if proposal.means.shape != bank.means.shape or proposal.weights.shape != bank.weights.shape:
        raise ValueError("proposal shape does not match bank")
    e1, e2, e3 = bank.eta
    z1, z2 = bank.zeta
    means = (1.0 - e1) * bank.means + e1 * proposal.means
    var = (1.0 - e2) * bank.vars + e2 * proposal.vars
    if z1 > 0 or z2 > 0:
        if rng is None:
            raise ValueError("noisy updates need an rng")
        if z1 > 0:
            means = means + np.sqrt(z1) * rng.standard_normal(means.shape)
        if z2 > 0:
            var = var + np.sqrt(z2) * rng.standard_normal(var.shape)
    weights = (1.0 - e3) * bank.weights + e3 * proposal.weights
    totals = weights.sum(axis=1, keepdims=True)
    if np.any(np.abs(totals - 1.0) > 1e-12):
        weights = weights / totals
    return replace(bank, means=means, vars=np.maximum(var, bank.var_floor), weights=weights)


def update_bank(batch: PosteriorBatch, bank: PriorBank, mode, rng=None) -> PriorBank:
    resp = responsibilities(batch, bank, mode)
    return apply_ma_update(bank, m_step(batch, resp, bank), rng)


def _lossy_prod_terms(batch, bank):
    """Per-sample product-estimate part and its mean gradient for the lossy modes."""
    d = bank.dim
    root_d = np.sqrt(d)
    mu_q, _, log_alpha = _gathered(batch, bank)
    diff = batch.means[:, None, :] - mu_q
    log_t = -0.5 * d * np.log(2.0 * np.pi * root_d) - np.sum(diff**2, axis=-1) / (2.0 * root_d)
    logits = log_alpha + log_t
    value = -0.5 * d * np.log(np.pi * np.e * root_d) - logsumexp(logits, axis=1)
    w = softmax(logits, axis=1)
    grad_mu = np.einsum("bm,bmd->bd", w, diff) / root_d
    return value, grad_mu


def _lossless_prod_terms(batch, bank):
    mu_q, var_q, log_alpha = _gathered(batch, bank)
    diff = batch.means[:, None, :] - mu_q
    log_t = -0.5 * np.sum(LOG_2PI + np.log(var_q) + diff**2 / var_q, axis=-1)
    logits = log_alpha + log_t
    entropy = 0.5 * np.sum(LOG_2PI + 1.0 + np.log(batch.vars), axis=1)
    value = -entropy - logsumexp(logits, axis=1)
    w = softmax(logits, axis=1)
    grad_mu = np.einsum("bm,bmd->bd", w, diff / var_q)
    grad_var = -0.5 / batch.vars
    return value, grad_mu, grad_var


def regularizer_terms(batch: PosteriorBatch, bank: PriorBank, mode):
    """Per-sample regularizer values (b,) and gradients w.r.t. means and variances (b, d).

    The bank is treated as a constant.
    """
    mode = _mode(mode)
    _check_batch(batch, bank)
    mu_q, var_q, log_alpha = _gathered(batch, bank)
    div = component_divergences(batch, bank, mode)
    logits = log_alpha - div
    var_value = -logsumexp(logits, axis=1)
    gamma = softmax(logits, axis=1)
    diff = batch.means[:, None, :] - mu_q
    if mode.lossy:
        eps = bank.eps
        d_mu = 2.0 * diff / np.sqrt(bank.dim)
        d_var = 0.5 * (1.0 / (var_q + eps) - 1.0 / (batch.vars[:, None, :] + eps))
    else:
        d_mu = diff / var_q
        d_var = 0.5 * (1.0 / var_q - 1.0 / batch.vars[:, None, :])
    g_mu = np.einsum("bm,bmd->bd", gamma, d_mu)
    g_var = np.einsum("bm,bmd->bd", gamma, d_var)
    if not mode.uses_beta:
        return var_value, g_mu, g_var
    if mode.lossy:
        prod_value, p_mu = _lossy_prod_terms(batch, bank)
        p_var = 0.0
    else:
        prod_value, p_mu, p_var = _lossless_prod_terms(batch, bank)
    return (
        0.5 * (var_value + prod_value),
        0.5 * (g_mu + p_mu),
        0.5 * (g_var + p_var),
    )


def regularizer(batch: PosteriorBatch, bank: PriorBank, mode):
    """(sum of per-sample values, grad w.r.t. posterior means, grad w.r.t. posterior variances)."""
    values, g_mu, g_var = regularizer_terms(batch, bank, mode)
    return float(np.sum(values)), g_mu, g_var


def variational_objective(
    batch: PosteriorBatch, bank: PriorBank, gamma: np.ndarray, mode=PriorMode.LOSSLESS_VAR
) -> float:
    """sum_i sum_m gamma_im (divergence_im - log(alpha_{y_i,m} / gamma_im)) for arbitrary simplex rows."""
    div = component_divergences(batch, bank, mode)
    _, _, log_alpha = _gathered(batch, bank)
    gamma = np.asarray(gamma, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(gamma > 0, gamma * np.log(np.where(gamma > 0, gamma, 1.0)), 0.0)
        cross = np.where(gamma > 0, gamma * (div - log_alpha), 0.0)
    return float(np.sum(cross + ent))


def frozen_estimate(
    batch: PosteriorBatch, bank: PriorBank, gamma: np.ndarray, beta: np.ndarray, mode
) -> float:
    """Average-estimate objective with both responsibility sets held fixed.

    The product part uses the Jensen surrogate
    -log sum_m a_m t_m <= sum_m beta_m (log beta_m - log a_m - log t_m).
    """
    mode = _mode(mode)
    var_part = variational_objective(batch, bank, gamma, mode)
    mu_q, var_q, log_alpha = _gathered(batch, bank)
    diff = batch.means[:, None, :] - mu_q
    d = bank.dim
    if mode.lossy:
        root_d = np.sqrt(d)
        log_t = -0.5 * d * np.log(2.0 * np.pi * root_d) - np.sum(diff**2, axis=-1) / (2.0 * root_d)
        const = -0.5 * d * np.log(np.pi * np.e * root_d) * len(batch)
    else:
        log_t = -0.5 * np.sum(LOG_2PI + np.log(var_q) + diff**2 / var_q, axis=-1)
        const = -float(np.sum(0.5 * np.sum(LOG_2PI + 1.0 + np.log(batch.vars), axis=1)))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(beta > 0, beta * (np.log(np.where(beta > 0, beta, 1.0)) - log_alpha - log_t), 0.0)
    return 0.5 * var_part + 0.5 * (const + float(np.sum(terms)))
