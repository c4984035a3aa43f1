import math

import numpy as np
import pytest
from helpers import random_bank, random_batch, random_simplex
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp

from gmmdl.gaussian import DiagGaussian, kl_diag, kl_diag_arrays, log_density_at_mean_arrays
from gmmdl.prior import (
    PosteriorBatch,
    PriorBank,
    PriorMode,
    Proposal,
    apply_ma_update,
    d_kl_lossy,
    frozen_estimate,
    init_bank,
    m_step,
    regularizer,
    regularizer_terms,
    responsibilities,
    update_bank,
    variational_objective,
)

MODES = list(PriorMode)


class TestBank:
    def test_validation(self):
        with pytest.raises(ValueError):
            PriorBank(np.zeros((2, 3, 4)), np.ones((2, 3, 4)), np.full((2, 3), 0.5))
        with pytest.raises(ValueError):
            PriorBank(np.zeros((2, 3, 4)), np.ones((2, 3, 5)), np.full((2, 3), 1 / 3))
        with pytest.raises(ValueError):
            PriorBank(np.zeros((1, 1, 1)), np.ones((1, 1, 1)), np.ones((1, 1)), eta=(2.0, 0.0, 0.0))

    def test_json_round_trip(self, rng):
        bank = random_bank(rng)
        doc = bank.to_dict()
        assert doc["classes"][1]["components"][2]["mean"] == bank.means[1, 2].tolist()
        back = PriorBank.from_json(bank.to_json())
        np.testing.assert_array_equal(back.means, bank.means)
        np.testing.assert_array_equal(back.vars, bank.vars)
        np.testing.assert_array_equal(back.weights, bank.weights)
        assert (back.eta, back.zeta, back.eps) == (bank.eta, bank.zeta, bank.eps)

    def test_rejects_foreign_document(self):
        with pytest.raises(ValueError):
            PriorBank.from_dict({"format": "other", "version": 1})
        with pytest.raises(ValueError):
            PriorBank.from_dict({"format": "gmmdl.prior-bank", "version": 99})


def _source(means, labels, size):
    n = len(labels)

    def view(idx):
        return PosteriorBatch(labels[idx], means[idx], np.ones_like(means[idx]))

    return view, lambda r: r.choice(n, size=min(size, n), replace=False)


class TestInit:
    def test_single_component_picks_class_mean(self, rng):
        means = rng.normal(size=(60, 3))
        labels = np.repeat(np.arange(3), 20)
        view, source = _source(means, labels, 60)
        bank = init_bank(3, 1, view, source, np.random.default_rng(0))
        for c in range(3):
            pool = means[labels == c]
            assert np.any(np.all(pool == bank.means[c, 0], axis=1))
        np.testing.assert_array_equal(bank.weights, 1.0)
        assert np.all(bank.vars >= bank.var_floor)

    def test_deterministic(self, rng):
        means = rng.normal(size=(80, 4))
        labels = np.arange(80) % 2
        view, source = _source(means, labels, 40)
        a = init_bank(2, 5, view, source, np.random.default_rng(7))
        b = init_bank(2, 5, view, source, np.random.default_rng(7))
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.vars, b.vars)

    def test_centres_are_distinct_latent_means(self, rng):
        means = rng.normal(size=(200, 2))
        labels = np.zeros(200, dtype=int)
        view, source = _source(means, labels, 200)
        bank = init_bank(1, 4, view, source, np.random.default_rng(1))
        assert len({tuple(m) for m in bank.means[0]}) == 4

    def test_degenerate_distances(self):
        means = np.tile([1.0, 2.0], (30, 1))
        labels = np.zeros(30, dtype=int)
        view, source = _source(means, labels, 30)
        bank = init_bank(1, 3, view, source, np.random.default_rng(0))
        np.testing.assert_array_equal(bank.means[0], [[1.0, 2.0]] * 3)

    def test_absent_class(self, rng):
        means = rng.normal(size=(10, 2))
        view, source = _source(means, np.zeros(10, dtype=int), 10)
        with pytest.raises(ValueError, match="absent"):
            init_bank(2, 2, view, source, rng, max_retries=2)


class TestResponsibilities:
    def test_single_component(self, rng):
        bank = random_bank(rng, M=1)
        for mode in MODES:
            r = responsibilities(random_batch(rng), bank, mode)
            np.testing.assert_array_equal(r.gamma, 1.0)

    def test_symmetric_bank_gives_uniform_rows(self):
        bank = PriorBank(np.zeros((1, 4, 2)), np.ones((1, 4, 2)), np.full((1, 4), 0.25))
        batch = PosteriorBatch([0, 0], [[1.0, 2.0], [0.0, -1.0]], [[1.0, 1.0], [0.5, 2.0]])
        for mode in MODES:
            r = responsibilities(batch, bank, mode)
            np.testing.assert_allclose(r.gamma, 0.25, atol=1e-15)

    def test_dominant_component(self):
        # component 0 matches the posterior exactly, the others sit sqrt(20) away: KL gap 10 nats
        means = np.array([[[0.0], [math.sqrt(20)], [-math.sqrt(20)]]])
        bank = PriorBank(means, np.ones((1, 3, 1)), np.full((1, 3), 1 / 3))
        r = responsibilities(PosteriorBatch([0], [[0.0]], [[1.0]]), bank, "lossless-var")
        assert r.gamma[0, 0] >= 1 - 2 * math.exp(-10)

    @given(st.integers(0, 2**31), st.sampled_from(MODES))
    def test_rows_are_simplex_points(self, seed, mode):
        rng = np.random.default_rng(seed)
        bank = random_bank(rng, spread=5.0)
        r = responsibilities(random_batch(rng), bank, mode)
        for m in (r.gamma, r.beta) if mode.uses_beta else (r.gamma,):
            assert np.all(m >= 0)
            assert np.max(np.abs(m.sum(axis=1) - 1)) <= 1e-9
        assert (r.beta is not None) == mode.uses_beta

    def test_minimizes_variational_objective(self, rng):
        for mode in MODES:
            bank = random_bank(rng)
            batch = random_batch(rng, b=1)
            best = variational_objective(batch, bank, responsibilities(batch, bank, mode).gamma, mode)
            others = [variational_objective(batch, bank, random_simplex(rng, (1, 4)), mode) for _ in range(200)]
            assert best <= min(others) + 1e-12

    def test_label_out_of_range(self, rng):
        bank = random_bank(rng, C=2)
        with pytest.raises(ValueError):
            responsibilities(random_batch(rng, C=3), bank, "lossless-var")


class TestLossyDivergence:
    def test_examples(self):
        p = DiagGaussian([0.5, -1.0, 0.0, 2.0], [0.3, 1.0, 2.0, 0.7])
        assert d_kl_lossy(p, p, 0.4) == 0.0
        q = DiagGaussian([1.5, -1.0, 0.0, 2.0], p.var)
        assert d_kl_lossy(p, q, 0.1) == pytest.approx(0.5, abs=1e-15)
        r = DiagGaussian(p.mean, [5.0, 0.01, 3.0, 1.0])
        assert d_kl_lossy(p, r, 1e6) == pytest.approx(0.0, abs=1e-6)
        with pytest.raises(ValueError):
            d_kl_lossy(p, q, -1.0)

    def test_decomposition(self, rng):
        d = 6
        p = DiagGaussian(rng.normal(size=d), rng.uniform(0.1, 2, d))
        q = DiagGaussian(rng.normal(size=d), rng.uniform(0.1, 2, d))
        eps = 0.3
        half = np.full(d, math.sqrt(d) / 2)
        expect = kl_diag(DiagGaussian(p.mean, half), DiagGaussian(q.mean, half)) + kl_diag(
            DiagGaussian(np.zeros(d), p.var + eps), DiagGaussian(np.zeros(d), q.var + eps)
        )
        assert d_kl_lossy(p, q, eps) == pytest.approx(expect, rel=1e-12)


class TestMStep:
    def test_two_samples_one_component(self):
        bank = PriorBank(np.zeros((1, 2, 2)), np.ones((1, 2, 2)), np.full((1, 2), 0.5))
        batch = PosteriorBatch([0, 0], [[1.0, 2.0], [3.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]])
        resp = responsibilities(batch, bank, "lossless-var")
        resp = type(resp)(np.array([[1.0, 0.0], [1.0, 0.0]]), resp.mode)
        prop = m_step(batch, resp, bank)
        np.testing.assert_allclose(prop.means[0, 0], [2.0, 1.0])
        np.testing.assert_array_equal(prop.means[0, 1], bank.means[0, 1])
        np.testing.assert_array_equal(prop.vars[0, 1], bank.vars[0, 1])
        np.testing.assert_allclose(prop.weights[0], [1.0, 0.0])

    def test_single_sample_variance(self):
        old = np.array([[[0.5, -0.5]]])
        bank = PriorBank(old, np.ones((1, 1, 2)), np.ones((1, 1)))
        batch = PosteriorBatch([0], [[1.0, 2.0]], [[0.3, 0.7]])
        prop = m_step(batch, responsibilities(batch, bank, "lossless-var"), bank)
        np.testing.assert_allclose(prop.vars[0, 0], [0.3 + 0.25, 0.7 + 6.25], rtol=1e-14)
        np.testing.assert_allclose(prop.means[0, 0], [1.0, 2.0])

    @pytest.mark.parametrize("mode", MODES)
    def test_weights_are_simplex(self, rng, mode):
        bank = random_bank(rng, C=4)
        batch = random_batch(rng, C=3)  # class 3 absent
        prop = m_step(batch, responsibilities(batch, bank, mode), bank)
        np.testing.assert_allclose(prop.weights.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(prop.weights[3], bank.weights[3])
        assert np.all(prop.vars > 0)

    def test_mode_mismatch_and_empty(self, rng):
        bank = random_bank(rng)
        batch = random_batch(rng)
        resp = responsibilities(batch, bank, "lossy-est")
        with pytest.raises(ValueError):
            m_step(batch, resp, bank, "lossless-var")
        empty = PosteriorBatch(np.zeros(0, dtype=int), np.zeros((0, 5)), np.ones((0, 5)))
        with pytest.raises(ValueError):
            m_step(empty, resp, bank)

    def test_estimate_modes_closed_forms(self, rng):
        # recompute the proposals for one (class, component) with explicit loops
        bank = random_bank(rng, C=2, M=3, d=2)
        batch = random_batch(rng, C=2, d=2, b=8)
        for mode in (PriorMode.LOSSLESS_EST, PriorMode.LOSSY_EST):
            resp = responsibilities(batch, bank, mode)
            prop = m_step(batch, resp, bank)
            c, m = 1, 2
            sel = batch.labels == c
            g, bt = resp.gamma[sel, m], resp.beta[sel, m]
            mu, var = batch.means[sel], batch.vars[sel]
            tilde = (g + bt) / 2
            w_mean = (2 * g + bt) / 3 if mode.lossy else tilde
            np.testing.assert_allclose(prop.means[c, m], (w_mean @ mu) / w_mean.sum(), rtol=1e-12)
            if mode.lossy:
                expect_var = (g @ var) / g.sum()
            else:
                expect_var = (g @ var + 2 * tilde @ (mu - bank.means[c, m]) ** 2) / g.sum()
            np.testing.assert_allclose(prop.vars[c, m], expect_var, rtol=1e-12)
            w_all = (resp.gamma[sel] + resp.beta[sel]) / 2
            np.testing.assert_allclose(prop.weights[c, m], tilde.sum() / w_all.sum(), rtol=1e-12)

    @pytest.mark.parametrize("mode", [PriorMode.LOSSLESS_EST, PriorMode.LOSSY_EST, PriorMode.LOSSY_VAR])
    def test_full_variants_do_not_increase_frozen_estimate(self, mode):
        rng = np.random.default_rng(99)
        worse = 0
        for _ in range(40):
            bank = random_bank(rng)
            batch = random_batch(rng)
            resp = responsibilities(batch, bank, mode)
            beta = resp.beta if resp.beta is not None else resp.gamma
            before = frozen_estimate(batch, bank, resp.gamma, beta, mode)
            after = frozen_estimate(batch, apply_ma_update(bank, m_step(batch, resp, bank)), resp.gamma, beta, mode)
            worse += after > before + 1e-9
        assert worse <= 2


class TestMovingAverage:
    def test_identity_and_replacement(self, rng):
        bank = random_bank(rng)
        prop = Proposal(rng.normal(size=bank.means.shape), rng.uniform(0.5, 1, bank.vars.shape),
                        rng.dirichlet(np.ones(4), size=3))
        still = apply_ma_update(PriorBank(bank.means, bank.vars, bank.weights, eta=(0, 0, 0)), prop)
        np.testing.assert_array_equal(still.means, bank.means)
        np.testing.assert_array_equal(still.vars, bank.vars)
        np.testing.assert_array_equal(still.weights, bank.weights)
        full = apply_ma_update(bank, prop)
        np.testing.assert_array_equal(full.means, prop.means)
        np.testing.assert_array_equal(full.vars, prop.vars)
        np.testing.assert_allclose(full.weights, prop.weights, atol=1e-15)

    def test_noise_and_floor(self, rng):
        bank = PriorBank(np.zeros((2, 3, 4)), np.full((2, 3, 4), 1e-3), np.full((2, 3), 1 / 3),
                         eta=(0.5, 0.5, 0.5), zeta=(0.1, 100.0))
        prop = Proposal(np.ones((2, 3, 4)), np.full((2, 3, 4), 1e-3), np.full((2, 3), 1 / 3))
        out = apply_ma_update(bank, prop, np.random.default_rng(0))
        assert np.all(out.vars >= bank.var_floor)
        assert np.any(out.vars == bank.var_floor)
        assert not np.allclose(out.means, 0.5)
        np.testing.assert_allclose(out.weights.sum(axis=1), 1.0, atol=1e-15)
        again = apply_ma_update(bank, prop, np.random.default_rng(0))
        np.testing.assert_array_equal(out.means, again.means)
        with pytest.raises(ValueError):
            apply_ma_update(bank, prop)

    @given(st.integers(0, 2**31))
    def test_simplex_preserved(self, seed):
        rng = np.random.default_rng(seed)
        bank = random_bank(rng, eta=tuple(rng.uniform(0, 1, 3)))
        batch = random_batch(rng)
        out = update_bank(batch, bank, "lossless-est")
        assert np.max(np.abs(out.weights.sum(axis=1) - 1)) <= 1e-12
        assert np.all(out.weights >= 0)


class TestRegularizer:
    def test_single_component_is_cdvib(self, rng):
        bank = random_bank(rng, M=1)
        batch = random_batch(rng)
        values, _, _ = regularizer_terms(batch, bank, "lossless-var")
        ref = kl_diag_arrays(batch.means, batch.vars, bank.means[batch.labels, 0], bank.vars[batch.labels, 0])
        np.testing.assert_array_equal(values, ref)

    def test_cdvib_update_matches_reference(self, rng):
        bank = random_bank(rng, M=1, eta=(0.1, 0.05, 0.2))
        batch = random_batch(rng, b=30)
        out = update_bank(batch, bank, "lossless-var")
        e1, e2, _ = bank.eta
        for c in range(3):
            mu, var = batch.means[batch.labels == c], batch.vars[batch.labels == c]
            old = bank.means[c, 0]
            np.testing.assert_allclose(out.means[c, 0], (1 - e1) * old + e1 * mu.mean(axis=0), rtol=1e-13)
            target = np.mean(var + (mu - old) ** 2, axis=0)
            np.testing.assert_allclose(out.vars[c, 0], (1 - e2) * bank.vars[c, 0] + e2 * target, rtol=1e-13)
        np.testing.assert_array_equal(out.weights, 1.0)

    def test_zero_at_matching_posteriors(self, rng):
        bank = random_bank(rng, M=1)
        labels = np.array([0, 1, 2, 1])
        batch = PosteriorBatch(labels, bank.means[labels, 0], bank.vars[labels, 0])
        total, _, _ = regularizer(batch, bank, "lossless-var")
        assert total == pytest.approx(0.0, abs=1e-12)

    def test_lossless_est_value(self, rng):
        bank = random_bank(rng)
        batch = random_batch(rng)
        values, _, _ = regularizer_terms(batch, bank, "lossless-est")
        mu_q, var_q = bank.means[batch.labels], bank.vars[batch.labels]
        log_a = np.log(bank.weights[batch.labels])
        kl = kl_diag_arrays(batch.means[:, None], batch.vars[:, None], mu_q, var_q)
        d_var = -logsumexp(log_a - kl, axis=1)
        ent = 0.5 * np.sum(np.log(2 * np.pi * np.e * batch.vars), axis=1)
        d_prod = -ent - logsumexp(log_a + log_density_at_mean_arrays(batch.means[:, None], mu_q, var_q), axis=1)
        np.testing.assert_allclose(values, (d_var + d_prod) / 2, rtol=1e-12)

    def test_lossy_est_value(self, rng):
        bank = random_bank(rng)
        batch = random_batch(rng)
        d = bank.dim
        values, _, _ = regularizer_terms(batch, bank, "lossy-est")
        rows = []
        for i in range(len(batch)):
            c = batch.labels[i]
            p = DiagGaussian(batch.means[i], batch.vars[i])
            divs = [d_kl_lossy(p, DiagGaussian(bank.means[c, m], bank.vars[c, m]), bank.eps) for m in range(4)]
            upper = -math.log(sum(a * math.exp(-v) for a, v in zip(bank.weights[c], divs)))
            sq = np.sum((batch.means[i] - bank.means[c]) ** 2, axis=1)
            t = (2 * math.pi * math.sqrt(d)) ** (-d / 2) * np.exp(-sq / (2 * math.sqrt(d)))
            lower = -0.5 * d * math.log(math.pi * math.e * math.sqrt(d)) - math.log(np.dot(bank.weights[c], t))
            rows.append((upper + lower) / 2)
        np.testing.assert_allclose(values, rows, rtol=1e-12)

    @pytest.mark.parametrize("mode", MODES)
    def test_gradients_match_finite_differences(self, mode):
        rng = np.random.default_rng(2024)
        h = 1e-6
        for _ in range(20):
            bank = random_bank(rng, C=3, M=3, d=8)
            batch = random_batch(rng, d=8, b=6)
            _, g_mu, g_var = regularizer(batch, bank, mode)

            def f(mu, var):
                return regularizer(PosteriorBatch(batch.labels, mu, var), bank, mode)[0]

            fd_mu = np.zeros_like(g_mu)
            fd_var = np.zeros_like(g_var)
            for idx in np.ndindex(g_mu.shape):
                for fd, arr_name in ((fd_mu, "mu"), (fd_var, "var")):
                    mu, var = batch.means.copy(), batch.vars.copy()
                    arr = mu if arr_name == "mu" else var
                    arr[idx] += h
                    up = f(mu, var)
                    arr[idx] -= 2 * h
                    fd[idx] = (up - f(mu, var)) / (2 * h)
            ana = np.concatenate([g_mu.ravel(), g_var.ravel()])
            num = np.concatenate([fd_mu.ravel(), fd_var.ravel()])
            assert np.linalg.norm(ana - num) <= 1e-6 * np.linalg.norm(num)

    def test_deterministic_update(self, rng):
        bank = random_bank(rng, eta=(0.1, 0.1, 0.1))
        bank = PriorBank(bank.means, bank.vars, bank.weights, eta=bank.eta, zeta=(0.01, 0.01))
        batch = random_batch(rng)
        a = update_bank(batch, bank, "lossy-est", np.random.default_rng(4))
        b = update_bank(batch, bank, "lossy-est", np.random.default_rng(4))
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.vars, b.vars)
