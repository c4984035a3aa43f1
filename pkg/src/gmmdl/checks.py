"""Numerical self-checks exposed through the CLI: KL sandwich and gradient check."""
from __future__ import annotations

import numpy as np

from .gaussian import DiagGaussian, GaussianMixture, kl_diag
from .kl import d_prod_g_gm, d_var_g_gm, mc_kl
from .prior import PriorBank
from .trainer import DecoderModel, EncoderModel, RegKind, TrainConfig, loss_and_grads, parameters


def random_sandwich_case(rng, max_dim: int = 8, max_components: int = 5):
    d = int(rng.integers(1, max_dim + 1))
    M = int(rng.integers(1, max_components + 1))
    Q = GaussianMixture(
        rng.normal(0.0, 1.5, size=(M, d)),
        rng.uniform(0.2, 2.0, size=(M, d)),
        rng.dirichlet(np.ones(M)),
    )
    p = DiagGaussian(rng.normal(0.0, 1.5, size=d), rng.uniform(0.2, 2.0, size=d))
    return p, Q


def kl_sandwich_report(
    trials: int = 200,
    samples: int = 200_000,
    max_dim: int = 8,
    max_components: int = 5,
    seed: int = 0,
) -> dict:
    """Check d_prod - 3 SE <= KL_MC <= d_var + 3 SE on random Gaussian-vs-mixture cases."""
    rng = np.random.default_rng(seed)
    rows = []
    worst_single = 0.0
    for t in range(trials):
        p, Q = random_sandwich_case(rng, max_dim, max_components)
        lower, upper = d_prod_g_gm(p, Q), d_var_g_gm(p, Q)
        est, se = mc_kl(p, Q, samples, rng)
        ok = lower - 3 * se <= est <= upper + 3 * se
        rows.append(
            {"trial": t, "dim": p.dim, "components": Q.n_components, "d_prod": lower,
             "d_var": upper, "mc": est, "se": se, "pass": bool(ok)}
        )
        single = GaussianMixture(Q.means[:1], Q.vars[:1], [1.0])
        worst_single = max(worst_single, abs(d_var_g_gm(p, single) - kl_diag(p, single.components[0])))
    rate = sum(r["pass"] for r in rows) / max(trials, 1)
    return {
        "trials": trials,
        "samples": samples,
        "pass_rate": rate,
        "single_component_max_abs_error": worst_single,
        "passed": rate >= 0.99 and worst_single <= 1e-12,
        "cases": rows,
    }


def _random_instance(rng, kind: RegKind, p=6, h=8, d=4, C=3, M=2, b=5):
    enc = EncoderModel.init(p, h, d, rng)
    dec = DecoderModel.init(d, C, rng)
    X = rng.normal(size=(b, p))
    y = rng.integers(0, C, size=b)
    m = 1 if kind is RegKind.CDVIB else M
    bank = PriorBank(
        rng.normal(size=(C, m, d)),
        rng.uniform(0.3, 2.0, size=(C, m, d)),
        rng.dirichlet(np.ones(m), size=C),
        eps=0.3,
    )
    return enc, dec, X, y, bank


def gradient_check(kind, seed: int, step: float = 1e-5, beta: float = 0.7, k: int = 2, mode=None) -> float:
    """Relative error ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||) for one random instance."""
    kind = RegKind(kind)
    rng = np.random.default_rng(seed)
    enc, dec, X, y, bank = _random_instance(rng, kind)
    mode = mode or TrainConfig(reg=kind).prior_mode
    noise_seed = int(rng.integers(2**32))

    def run():
        return loss_and_grads(X, y, enc, dec, kind, beta, bank, np.random.default_rng(noise_seed), k, mode)

    analytic = run().grads
    params = parameters(enc, dec)
    num, ana = [], []
    for name, arr in params.items():
        fd = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = run().loss
            arr[idx] = orig - step
            down = run().loss
            arr[idx] = orig
            fd[idx] = (up - down) / (2 * step)
        num.append(fd.ravel())
        ana.append(analytic[name].ravel())
    a, n = np.concatenate(ana), np.concatenate(num)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return float(np.linalg.norm(a - n) / scale)


def gradcheck_report(seeds=range(10), kinds=tuple(RegKind), tol: float = 1e-4) -> dict:
    errors = {RegKind(k).value: [gradient_check(k, s) for s in seeds] for k in kinds}
    worst = max(max(v) for v in errors.values())
    return {
        "tolerance": tol,
        "max_relative_error": worst,
        "per_kind_max": {k: max(v) for k, v in errors.items()},
        "per_kind": errors,
        "passed": worst <= tol,
    }
