import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from stiefel_mc.errors import DataError, DomainError, InvalidModelError
from stiefel_mc.manifold import uniform_stiefel_sample
from stiefel_mc.models import (S_SVD, SVD, ABState, Hyperparams, ModelKind, ObservationSet,
                               SvdState, ab_log_likelihood, ab_log_posterior, ab_row_conditional,
                               b_svd, gamma_posterior_params, grad_U, grad_V, log_cond_s,
                               log_likelihood, log_posterior_unnorm, logistic, predict_entries,
                               predict_entry, sample_gamma_likelihood_precision, sample_tau,
                               softplus, tau_posterior_params)

KINDS = [SVD, S_SVD, b_svd(10)]


def random_problem(m, n, r, kind, n_obs, rng, gamma=1.7):
    flat = rng.choice(m * n, n_obs, replace=False)
    rows, cols = flat // n, flat % n
    if kind.name == "b-svd":
        y = rng.integers(0, kind.k + 1, n_obs).astype(float)
    elif kind.name == "s-svd":
        y = rng.exponential(1.0, n_obs) + 0.1
    else:
        y = rng.standard_normal(n_obs)
    obs = ObservationSet(m, n, rows, cols, y)
    state = SvdState(uniform_stiefel_sample(m, r, rng), rng.uniform(0.3, 2.0, r),
                     uniform_stiefel_sample(n, r, rng), gamma if kind.gaussian else None)
    return state, obs


def loop_loglik(state, kind, obs):
    """Per-entry summation with scipy densities."""
    total = 0.0
    for i, j, y, tr in zip(obs.rows, obs.cols, obs.values, obs.is_train):
        if not tr:
            continue
        x = sum(state.U[i, l] * state.s[l] * state.V[j, l] for l in range(len(state.s)))
        if kind.name == "svd":
            total += stats.norm.logpdf(y, x, 1 / math.sqrt(state.gamma))
        elif kind.name == "s-svd":
            total += stats.norm.logpdf(y, math.log1p(math.exp(x)), 1 / math.sqrt(state.gamma))
        else:
            total += stats.binom.logpmf(int(y), kind.k, 1 / (1 + math.exp(-x)))
    return total


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-12)))


class TestLinks:
    def test_softplus_zero(self):
        assert softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)

    def test_logistic_symmetry(self):
        assert logistic(0.0) == 0.5
        z = np.linspace(-40, 40, 81)
        np.testing.assert_allclose(logistic(z) + logistic(-z), 1.0, atol=1e-15)

    def test_no_overflow(self):
        assert softplus(800.0) == 800.0
        v = softplus(-800.0)
        assert 0.0 <= v < 1e-300
        assert logistic(-800.0) >= 0.0 and logistic(800.0) == 1.0


class TestObservationSet:
    def test_sorted_and_readonly(self):
        obs = ObservationSet(3, 3, [2, 0, 1], [0, 2, 1], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(obs.rows, [0, 1, 2])
        np.testing.assert_array_equal(obs.values, [2.0, 3.0, 1.0])
        with pytest.raises(ValueError):
            obs.values[0] = 5.0

    def test_rejects_duplicates(self):
        with pytest.raises(DataError):
            ObservationSet(2, 2, [0, 0], [1, 1], [1.0, 2.0])

    def test_rejects_out_of_range(self):
        with pytest.raises(DataError):
            ObservationSet(2, 2, [0, 2], [0, 0], [1.0, 2.0])

    def test_needs_training_entries(self):
        obs = ObservationSet(2, 2, [0], [0], [1.0], [False])
        with pytest.raises(DataError):
            obs.training

    def test_binomial_domain(self):
        obs = ObservationSet(2, 2, [0], [0], [2.5])
        with pytest.raises(DomainError):
            log_likelihood(SvdState(np.eye(2)[:, :1], [1.0], np.eye(2)[:, :1]), b_svd(3), obs)

    def test_unknown_kind(self):
        with pytest.raises(InvalidModelError):
            ModelKind("poisson")


class TestPrediction:
    def test_scalar_example(self):
        st_ = SvdState([[1.0]], [2.0], [[3.0]], 1.0)
        assert predict_entry(st_, SVD, 0, 0) == 6.0

    def test_vanishing_latent(self):
        # an all-zero s is outside the state domain; zero latent values give the same predictions
        st_ = SvdState([[0.0]], [1.0], [[1.0]], 1.0)
        assert predict_entry(st_, SVD, 0, 0) == 0.0
        assert predict_entry(st_, S_SVD, 0, 0) == pytest.approx(math.log(2))
        assert predict_entry(st_, b_svd(10), 0, 0) == pytest.approx(5.0)

    def test_dense_oracle(self, rng):
        state, _ = random_problem(5, 4, 2, SVD, 3, rng)
        D = state.U @ np.diag(state.s) @ state.V.T
        for i in range(5):
            for j in range(4):
                assert abs(predict_entry(state, SVD, i, j) - D[i, j]) < 1e-12
        rows, cols = np.divmod(np.arange(20), 4)
        np.testing.assert_allclose(predict_entries(state, S_SVD, rows, cols), softplus(D.ravel()), atol=1e-12)

    def test_index_error(self, rng):
        state, _ = random_problem(3, 3, 1, SVD, 2, rng)
        with pytest.raises(IndexError):
            predict_entry(state, SVD, 3, 0)

    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        state, _ = random_problem(6, 5, 3, SVD, 3, rng)
        p = rng.permutation(3)
        perm = SvdState(state.U[:, p], state.s[p], state.V[:, p], state.gamma)
        for kind in KINDS:
            for i, j in [(0, 0), (5, 4), (2, 3)]:
                assert predict_entry(perm, kind, i, j) == pytest.approx(predict_entry(state, kind, i, j), abs=1e-12)


class TestLikelihood:
    def test_zero_residual_gaussian(self):
        obs = ObservationSet(2, 1, [0, 1], [0, 0], [0.0, 0.0])
        st_ = SvdState([[1.0], [0.0]], [1e-300], [[1.0]], 1.0)
        assert log_likelihood(st_, SVD, obs) == pytest.approx(-math.log(2 * math.pi), abs=1e-14)

    def test_fair_bernoulli(self):
        obs = ObservationSet(1, 1, [0], [0], [1.0])
        st_ = SvdState([[0.0]], [1.0], [[1.0]])
        assert log_likelihood(st_, b_svd(1), obs) == pytest.approx(math.log(0.5), abs=1e-15)

    @pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.name)
    def test_matches_loop_oracle(self, rng, kind):
        state, obs = random_problem(5, 4, 2, kind, 14, rng)
        obs = obs.with_roles(np.arange(14) < 10)
        assert abs(log_likelihood(state, kind, obs) - loop_loglik(state, kind, obs)) < 1e-10

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_binomial_pmf_normalised(self, k):
        st_ = SvdState([[1.0]], [0.37], [[1.0]])
        tot = sum(math.exp(log_likelihood(st_, b_svd(k), ObservationSet(1, 1, [0], [0], [y])))
                  for y in range(k + 1))
        assert abs(tot - 1.0) < 1e-12


class TestPosterior:
    def test_lambda_linearity(self, rng):
        state, obs = random_problem(5, 4, 2, SVD, 10, rng)
        lp1 = log_posterior_unnorm(state, SVD, obs, Hyperparams(lam=0.8))
        lp2 = log_posterior_unnorm(state, SVD, obs, Hyperparams(lam=1.6))
        assert lp1 - lp2 == pytest.approx(0.8 * state.s.sum(), abs=1e-12)

    def test_small_lambda_is_likelihood_plus_constant(self, rng):
        hp = Hyperparams(lam=1e-300)
        state, obs = random_problem(5, 4, 2, SVD, 10, rng)
        other = SvdState(state.U, state.s * 3.0, state.V, state.gamma)
        d_post = log_posterior_unnorm(state, SVD, obs, hp) - log_posterior_unnorm(other, SVD, obs, hp)
        d_lik = log_likelihood(state, SVD, obs) - log_likelihood(other, SVD, obs)
        assert d_post == pytest.approx(d_lik, abs=1e-10)

    @pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.name)
    def test_term_by_term_oracle(self, rng, kind):
        hp = Hyperparams(lam=0.7, alpha_sigma=2.0, beta_sigma=0.5)
        state, obs = random_problem(4, 3, 2, kind, 8, rng)
        expected = loop_loglik(state, kind, obs) - 0.7 * sum(state.s)
        if kind.gaussian:
            expected += (2.0 - 1.0) * math.log(state.gamma) - 0.5 * state.gamma
        assert abs(log_posterior_unnorm(state, kind, obs, hp) - expected) < 1e-10

    def test_nuclear_norm_correspondence(self, rng):
        # log posterior in s = -(gamma/2 ||y - M s||^2 + lam ||X||_*) + const for orthonormal U, V
        hp = Hyperparams(lam=1.3)
        state, obs = random_problem(6, 5, 2, SVD, 18, rng)
        tr = obs.training
        M = state.U[tr.rows] * state.V[tr.cols]

        def objective(s):
            return 0.5 * state.gamma * np.sum((tr.y - M @ s) ** 2) + hp.lam * np.linalg.norm(
                (state.U * s) @ state.V.T, "nuc")

        consts = []
        for _ in range(10):
            s = rng.uniform(0.1, 3.0, 2)
            lp = log_posterior_unnorm(SvdState(state.U, s, state.V, state.gamma), SVD, obs, hp)
            consts.append(lp + objective(s))
        assert np.ptp(consts) < 1e-9


class TestGradients:
    @pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.name)
    def test_factor_gradients(self, kind):
        rng = np.random.default_rng(7)
        for _ in range(20):
            state, obs = random_problem(6, 5, 2, kind, 18, rng)

            def f_u(U):
                return log_likelihood(SvdState(U, state.s, state.V, state.gamma), kind, obs)

            def f_v(V):
                return log_likelihood(SvdState(state.U, state.s, V, state.gamma), kind, obs)

            assert max_rel_err(grad_U(state, kind, obs), fd_grad(f_u, state.U)) < 1e-5
            assert max_rel_err(grad_V(state, kind, obs), fd_grad(f_v, state.V)) < 1e-5

    @pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.name)
    def test_log_singular_gradient(self, kind):
        rng = np.random.default_rng(8)
        hp = Hyperparams(lam=0.9)
        for _ in range(20):
            state, obs = random_problem(6, 5, 2, kind, 18, rng)
            theta = rng.normal(0.0, 0.7, 2)
            _, g = log_cond_s(theta, state, kind, obs, hp)
            num = fd_grad(lambda t: log_cond_s(t, state, kind, obs, hp)[0], theta)
            assert max_rel_err(g, num) < 1e-5

    def test_zero_residual_gradient(self, rng):
        state, _ = random_problem(5, 4, 2, SVD, 3, rng)
        D = state.dense()
        obs = ObservationSet(5, 4, *np.divmod(np.arange(20), 4), D.ravel())
        np.testing.assert_allclose(grad_U(state, SVD, obs), 0.0, atol=1e-12)

    def test_scalar_chain_rule(self):
        u, s, v, y, g = 0.6, 1.5, 0.8, 2.0, 3.0
        state = SvdState([[u]], [s], [[v]], g)
        obs = ObservationSet(1, 1, [0], [0], [y])
        assert grad_U(state, SVD, obs)[0, 0] == pytest.approx(g * (y - u * s * v) * s * v, rel=1e-14)

    def test_prior_and_jacobian_only(self):
        # an observation with zero design row leaves only the prior and Jacobian
        state = SvdState([[0.0], [1.0]], [1.0], [[1.0]], 1.0)
        obs = ObservationSet(2, 1, [0], [0], [0.0])
        hp = Hyperparams(lam=2.0)
        theta = np.array([0.4])
        val, g = log_cond_s(theta, state, SVD, obs, hp)
        lik = log_likelihood(state, SVD, obs)
        assert val - lik == pytest.approx(-2.0 * math.exp(0.4) + 0.4, abs=1e-14)
        assert g[0] == pytest.approx(-2.0 * math.exp(0.4) + 1.0, abs=1e-14)

    def test_agrees_with_posterior(self, rng):
        hp = Hyperparams(lam=0.5)
        state, obs = random_problem(6, 5, 3, SVD, 20, rng)
        diffs = []
        for _ in range(10):
            theta = rng.normal(0.0, 1.0, 3)
            other = SvdState(state.U, np.exp(theta), state.V, state.gamma)
            diffs.append(log_cond_s(theta, state, SVD, obs, hp)[0]
                         - log_posterior_unnorm(other, SVD, obs, hp) - theta.sum())
        assert np.ptp(diffs) < 1e-10


class TestGamma:
    def _zero_residual(self, n_obs):
        U = np.eye(n_obs)[:, :1]
        obs = ObservationSet(n_obs, 1, np.arange(n_obs), np.zeros(n_obs), U[:, 0] * 2.0)
        return SvdState(U, [2.0], [[1.0]], 1.0), obs

    def test_zero_residual_params(self):
        state, obs = self._zero_residual(4)
        shape, rate = gamma_posterior_params(state, SVD, obs, Hyperparams())
        assert shape == pytest.approx(2.0001, abs=1e-15)
        assert rate == pytest.approx(1e-4, abs=1e-18)

    def test_residual_two(self):
        state, obs = self._zero_residual(4)
        obs = ObservationSet(4, 1, obs.rows, obs.cols, obs.values + np.array([1.0, -1.0, 0.0, 0.0]))
        shape, rate = gamma_posterior_params(state, SVD, obs, Hyperparams())
        assert (shape, rate) == pytest.approx((2.0001, 1.0001), abs=1e-14)

    def test_draw_moments(self, rng):
        state, obs = random_problem(5, 4, 2, S_SVD, 12, rng)
        hp = Hyperparams()
        shape, rate = gamma_posterior_params(state, S_SVD, obs, hp)
        draws = np.array([sample_gamma_likelihood_precision(state, S_SVD, obs, hp, rng)
                          for _ in range(100_000)])
        assert abs(draws.mean() / (shape / rate) - 1) < 0.02
        assert abs(draws.var() / (shape / rate**2) - 1) < 0.02

    def test_binomial_refused(self, rng):
        state, obs = random_problem(5, 4, 2, b_svd(10), 12, rng)
        with pytest.raises(InvalidModelError):
            sample_gamma_likelihood_precision(state, b_svd(10), obs, Hyperparams(), rng)


def loop_ab_log_posterior(A, B, g, t, obs, hp):
    m, r = A.shape
    n = B.shape[0]
    val, n_obs = 0.0, 0
    for i, j, y in zip(obs.rows, obs.cols, obs.values):
        fit = sum(A[i, l] * B[j, l] for l in range(r))
        val += -0.5 * g * (y - fit) ** 2
        n_obs += 1
    val += 0.5 * n_obs * math.log(g)
    for x in list(A.ravel()) + list(B.ravel()):
        val += -0.5 * t * x * x
    val += 0.5 * (m + n) * r * math.log(t)
    val += (hp.alpha_sigma - 1) * math.log(g) - hp.beta_sigma * g
    val += (hp.alpha_delta - 1) * math.log(t) - hp.beta_delta * t
    return val


class TestABModel:
    def test_zero_state(self):
        obs = ObservationSet(2, 2, [0, 1], [0, 1], [0.0, 0.0])
        state = ABState(np.zeros((2, 1)), np.zeros((2, 1)), 1.0, 1.0)
        assert ab_log_likelihood(state, obs) == pytest.approx(-math.log(2 * math.pi), abs=1e-14)

    def test_loop_oracle(self, rng):
        hp = Hyperparams(alpha_sigma=1.5, beta_sigma=0.3, alpha_delta=2.5, beta_delta=0.2)
        obs = ObservationSet(4, 3, [0, 1, 1, 3, 2], [0, 1, 2, 2, 0], rng.standard_normal(5))
        A, B = rng.standard_normal((4, 1)), rng.standard_normal((3, 1))
        got = ab_log_posterior(ABState(A, B, 1.3, 0.6), obs, hp)
        assert abs(got - loop_ab_log_posterior(A, B, 1.3, 0.6, obs, hp)) < 1e-10

    def test_scaling_symmetry(self, rng):
        hp = Hyperparams()
        obs = ObservationSet(4, 3, [0, 1, 2], [0, 1, 2], rng.standard_normal(3))
        A, B = rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
        s1, s2 = ABState(A, B, 1.0, 1.0), ABState(A * 2.5, B / 2.5, 1.0, 1.0)
        assert ab_log_likelihood(s1, obs) == pytest.approx(ab_log_likelihood(s2, obs), abs=1e-12)
        d = ab_log_posterior(s1, obs, hp) - ab_log_posterior(s2, obs, hp)
        prior = -0.5 * (np.sum(A**2) + np.sum(B**2)) + 0.5 * (np.sum((A * 2.5) ** 2) + np.sum((B / 2.5) ** 2))
        assert d == pytest.approx(prior, abs=1e-10)

    def test_empty_row_uses_prior(self, rng):
        obs = ObservationSet(3, 2, [0], [1], [1.0])
        state = ABState(rng.standard_normal((3, 2)), rng.standard_normal((2, 2)), 2.0, 0.7)
        mean, prec = ab_row_conditional("A", 2, state, obs)
        np.testing.assert_array_equal(mean, 0.0)
        np.testing.assert_allclose(prec, 0.7 * np.eye(2))

    def test_scalar_conditional(self):
        y, b, g, t = 1.7, 0.8, 3.0, 0.5
        obs = ObservationSet(1, 1, [0], [0], [y])
        mean, prec = ab_row_conditional("A", 0, ABState([[0.3]], [[b]], g, t), obs)
        assert mean[0] == pytest.approx(g * y * b / (t + g * b * b), rel=1e-14)
        assert prec[0, 0] == pytest.approx(t + g * b * b, rel=1e-14)

    @pytest.mark.parametrize("which", ["A", "B"])
    def test_matches_conditional_density_on_grid(self, rng, which):
        obs = ObservationSet(3, 4, [0, 0, 0, 1, 2], [0, 1, 3, 1, 3], rng.standard_normal(5))
        state = ABState(rng.standard_normal((3, 2)), rng.standard_normal((4, 2)), 1.8, 0.9)
        mean, prec = ab_row_conditional(which, 0, state, obs)
        grid = rng.uniform(-3, 3, (100, 2))

        def direct(a):
            A, B = state.A.copy(), state.B.copy()
            (A if which == "A" else B)[0] = a
            D = A @ B.T
            return (-0.5 * state.gamma * np.sum((obs.values - D[obs.rows, obs.cols]) ** 2)
                    - 0.5 * state.tau * a @ a)

        diff = [direct(a) - (-0.5 * (a - mean) @ prec @ (a - mean)) for a in grid]
        assert np.ptp(diff) < 1e-9

    def test_tau_params(self):
        state = ABState(np.array([[1.0], [1.0]]), np.array([[1.0], [-1.0]]), 1.0, 1.0)
        shape, rate = tau_posterior_params(state, Hyperparams())
        assert (shape, rate) == pytest.approx((2.0001, 2.0001), abs=1e-14)
        zero = ABState(np.zeros((2, 1)), np.zeros((2, 1)), 1.0, 1.0)
        assert tau_posterior_params(zero, Hyperparams())[1] == 1e-4

    def test_tau_moments(self, rng):
        state = ABState(rng.standard_normal((5, 2)), rng.standard_normal((4, 2)), 1.0, 1.0)
        hp = Hyperparams()
        shape, rate = tau_posterior_params(state, hp)
        draws = np.array([sample_tau(state, hp, rng) for _ in range(100_000)])
        assert abs(draws.mean() / (shape / rate) - 1) < 0.02
        assert abs(draws.var() / (shape / rate**2) - 1) < 0.02
