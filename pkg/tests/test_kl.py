import math

import numpy as np
import pytest

from gmmdl.checks import random_sandwich_case
from gmmdl.gaussian import DiagGaussian, GaussianMixture, kl_diag, log_pdf, sample
from gmmdl.kl import d_est_g_gm, d_est_mm, d_prod_g_gm, d_prod_mm, d_var_g_gm, d_var_mm, mc_kl


def mixture_of(*gs, weights=None):
    weights = weights or [1.0 / len(gs)] * len(gs)
    return GaussianMixture.from_components(gs, weights)


def test_d_var_examples():
    p = DiagGaussian([0.1, 0.2], [1.0, 0.5])
    q = DiagGaussian([1.0, -1.0], [2.0, 1.0])
    assert d_var_g_gm(p, mixture_of(q)) == kl_diag(p, q)
    assert d_var_g_gm(p, mixture_of(q, p, weights=[0.7, 0.3])) <= -math.log(0.3) + 1e-12
    same = mixture_of(q, q, q, weights=[0.1, 0.2, 0.7])
    assert d_var_g_gm(p, same) == pytest.approx(kl_diag(p, q), abs=1e-12)


def test_d_prod_examples():
    p = DiagGaussian([0.0], [1.0])
    expect = 0.5 * math.log(2) - 0.5
    assert d_prod_g_gm(p, mixture_of(p)) == pytest.approx(expect, abs=1e-12)
    assert d_est_g_gm(p, mixture_of(p)) == pytest.approx(expect / 2, abs=1e-12)


def test_far_separation_is_finite():
    p = DiagGaussian(np.zeros(8), np.ones(8))
    Q = mixture_of(DiagGaussian(np.full(8, 1e3), np.ones(8)), DiagGaussian(np.full(8, -1e3), np.ones(8)))
    for fn in (d_var_g_gm, d_prod_g_gm, d_est_g_gm):
        v = fn(p, Q)
        assert math.isfinite(v) and v > 1e6
    P = mixture_of(p)
    for fn in (d_var_mm, d_prod_mm, d_est_mm):
        assert math.isfinite(fn(P, Q))


def test_ordering_random(rng):
    for _ in range(200):
        p, Q = random_sandwich_case(rng)
        lo, mid, hi = d_prod_g_gm(p, Q), d_est_g_gm(p, Q), d_var_g_gm(p, Q)
        assert lo <= mid <= hi


def test_mixture_mixture_examples(rng):
    P = GaussianMixture(rng.normal(size=(3, 2)), rng.uniform(0.5, 2, (3, 2)), [0.2, 0.3, 0.5])
    assert d_var_mm(P, P) == pytest.approx(0.0, abs=1e-12)
    assert d_prod_mm(P, P) == pytest.approx(0.0, abs=1e-12)
    p, q = DiagGaussian([0.0], [1.0]), DiagGaussian([1.0], [2.0])
    assert d_var_mm(mixture_of(p), mixture_of(q)) == pytest.approx(kl_diag(p, q), abs=1e-12)
    with pytest.raises(ValueError):
        d_var_mm(P, mixture_of(p))


def test_mixture_estimate_soft_claim(rng):
    better = 0
    for _ in range(200):
        d = int(rng.integers(1, 5))
        P = GaussianMixture(rng.normal(size=(2, d)), rng.uniform(0.3, 2, (2, d)), rng.dirichlet([1, 1]))
        Q = GaussianMixture(rng.normal(size=(3, d)), rng.uniform(0.3, 2, (3, d)), rng.dirichlet([1, 1, 1]))
        ref, _ = mc_kl(P, Q, 20_000, rng)
        e = abs(d_est_mm(P, Q) - ref)
        better += e <= abs(d_var_mm(P, Q) - ref) or e <= abs(d_prod_mm(P, Q) - ref)
    assert better >= 120


def test_est_within_half_width(rng):
    for _ in range(20):
        p, Q = random_sandwich_case(rng, 4, 3)
        ref, se = mc_kl(p, Q, 50_000, rng)
        half = (d_var_g_gm(p, Q) - d_prod_g_gm(p, Q)) / 2
        assert abs(d_est_g_gm(p, Q) - ref) <= half + 3 * se


def test_mc_kl():
    p = DiagGaussian([0.5, -0.5], [1.0, 2.0])
    est, se = mc_kl(p, mixture_of(p), 10_000, np.random.default_rng(0))
    assert abs(est) <= 3 * se + 1e-15
    Q = mixture_of(DiagGaussian([0.0, 0.0], [1.0, 1.0]), DiagGaussian([2.0, 0.0], [1.0, 1.0]))
    a = mc_kl(p, Q, 10_000, np.random.default_rng(5))
    b = mc_kl(p, Q, 10_000, np.random.default_rng(5))
    assert a == b
    _, se2 = mc_kl(p, Q, 40_000, np.random.default_rng(6))
    assert a[1] / se2 == pytest.approx(2.0, rel=0.15)
    with pytest.raises(ValueError):
        mc_kl(p, Q, 10, np.random.default_rng(0))


def test_mc_matches_reference_formula(rng):
    p = DiagGaussian([0.3], [0.7])
    Q = mixture_of(DiagGaussian([0.0], [1.0]), DiagGaussian([1.5], [0.5]), weights=[0.4, 0.6])
    x = sample(p, np.random.default_rng(9), 5000)
    ref = np.mean(log_pdf(p, x) - log_pdf(Q, x))
    est, _ = mc_kl(p, Q, 5000, np.random.default_rng(9))
    assert est == pytest.approx(ref, rel=1e-12)
