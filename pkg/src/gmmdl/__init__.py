"""MDL generalization bounds and Gaussian-mixture latent priors for stochastic encoders."""
from .bounds import (
    BoundInputs,
    LogBase,
    binary_entropy,
    curve_fig2,
    curve_fig3,
    gen_bound_thm1,
    h_C,
    h_D,
    h_D_inverse,
    sqrt_bound,
    theorem1_rhs,
)
from .data import Dataset, load_sparse, standardize, synth_blobs
from .estimators import GaussianMixturePrior, GMMDLClassifier
from .gaussian import DiagGaussian, GaussianMixture, kl_diag, product_normalizer
from .kl import d_est_g_gm, d_est_mm, d_prod_g_gm, d_prod_mm, d_var_g_gm, d_var_mm, mc_kl
from .prior import PosteriorBatch, PriorBank, PriorMode, init_bank, responsibilities, update_bank
from .trainer import RegKind, RunMetrics, TrainConfig, fit_models, train

__version__ = "0.1.0"

__all__ = [
    "BoundInputs", "LogBase", "binary_entropy", "curve_fig2", "curve_fig3", "gen_bound_thm1",
    "h_C", "h_D", "h_D_inverse", "sqrt_bound", "theorem1_rhs",
    "Dataset", "load_sparse", "standardize", "synth_blobs",
    "GaussianMixturePrior", "GMMDLClassifier",
    "DiagGaussian", "GaussianMixture", "kl_diag", "product_normalizer",
    "d_est_g_gm", "d_est_mm", "d_prod_g_gm", "d_prod_mm", "d_var_g_gm", "d_var_mm", "mc_kl",
    "PosteriorBatch", "PriorBank", "PriorMode", "init_bank", "responsibilities", "update_bank",
    "RegKind", "RunMetrics", "TrainConfig", "fit_models", "train",
]
