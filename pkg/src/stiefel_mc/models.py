"""Observation storage, likelihoods and conditional densities.

Two parameterisations of a rank-``r`` matrix ``X`` are supported:

* SVD form ``X = U diag(s) V^T`` with ``U``, ``V`` on Stiefel manifolds and
  ``s > 0`` (models ``svd``, ``s-svd``, ``b-svd``), and
* the two-factor form ``X = A B^T`` with Gaussian factors (the Gibbs
  baseline).

All log-densities are over the *training* entries of an
:class:`ObservationSet`.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import gammaln

from . import kernels
from .errors import DataError, DimensionError, DomainError, InvalidModelError
from .manifold import orthogonality_error

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# link functions
# ---------------------------------------------------------------------------

def softplus(z):
    """``log(1 + exp(z))`` without overflow."""
    z = np.asarray(z, dtype=float)
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return out if out.ndim else float(out)


def logistic(z):
    """``1 / (1 + exp(-z))`` without overflow."""
    z = np.asarray(z, dtype=float)
    ez = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Entries:
    """A set of observed entries stored row-grouped, with a column-grouped view.

    Entries are sorted by ``(row, col)``.  ``row_ptr[i]:row_ptr[i+1]`` spans
    row ``i``; ``col_perm`` reorders entries by column and
    ``col_ptr[j]:col_ptr[j+1]`` spans column ``j`` in that order.
    """

    m: int
    n: int
    rows: np.ndarray
    cols: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    @cached_property
    def row_ptr(self):
        return np.searchsorted(self.rows, np.arange(self.m + 1)).astype(np.int64)

    @cached_property
    def col_perm(self):
        return np.argsort(self.cols, kind="stable").astype(np.int64)

    @cached_property
    def col_ptr(self):
        return np.searchsorted(self.cols[self.col_perm], np.arange(self.n + 1)).astype(np.int64)

    @cached_property
    def _logbinom_cache(self):
        return {}

    def log_binom(self, k):
        """``log C(k, y)`` per entry; validates that every ``y`` is an integer in ``[0, k]``."""
        cache = self._logbinom_cache
        if k not in cache:
            y = self.y
            if np.any(y != np.round(y)) or np.any(y < 0) or np.any(y > k):
                raise DomainError(f"binomial model needs integer observations in [0, {k}]")
            cache[k] = gammaln(k + 1.0) - gammaln(y + 1.0) - gammaln(k - y + 1.0)
        return cache[k]


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Sparse ``(i, j, y)`` triples over an ``m x n`` matrix with train/holdout roles.

    Construction sorts entries by ``(row, col)`` and rejects out-of-range or
    duplicate indices.  ``meta`` carries loader details (id maps, counts).
    """

    m: int
    n: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    is_train: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        vals = np.asarray(self.values, dtype=float).ravel()
        is_train = (np.ones(len(vals), dtype=bool) if self.is_train is None
                    else np.asarray(self.is_train, dtype=bool).ravel())
        if not (len(rows) == len(cols) == len(vals) == len(is_train)):
            raise DimensionError("rows, cols, values and roles must have equal length")
        if self.m < 1 or self.n < 1:
            raise DimensionError("matrix dimensions must be positive")
        if len(rows) and (rows.min() < 0 or rows.max() >= self.m or cols.min() < 0 or cols.max() >= self.n):
            raise DataError(f"entry index outside the {self.m}x{self.n} matrix")
        if not np.all(np.isfinite(vals)):
            raise DataError("observed values must be finite")
        flat = rows * self.n + cols
        order = np.argsort(flat, kind="stable")
        flat = flat[order]
        if np.any(flat[1:] == flat[:-1]):
            raise DataError("duplicate (i, j) entries")
        for name, arr in (("rows", rows[order]), ("cols", cols[order]),
                          ("values", vals[order]), ("is_train", is_train[order])):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.values)

    @property
    def n_train(self):
        return int(self.is_train.sum())

    @property
    def n_holdout(self):
        return int(len(self) - self.is_train.sum())

    def _subset(self, mask):
        return Entries(self.m, self.n, self.rows[mask], self.cols[mask], self.values[mask])

    @cached_property
    def training(self):
        """Training entries (the index set the likelihood runs over)."""
        if self.n_train < 1:
            raise DataError("observation set has no training entries")
        return self._subset(self.is_train)

    @cached_property
    def holdout(self):
        return self._subset(~self.is_train)

    def with_roles(self, is_train):
        return ObservationSet(self.m, self.n, self.rows, self.cols, self.values, is_train, dict(self.meta))


# ---------------------------------------------------------------------------
# model kinds, hyperparameters, states
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelKind:
    """Likelihood family: ``svd`` (Gaussian), ``s-svd`` (Gaussian on softplus),
    ``b-svd`` (Binomial with ``k`` trials and logistic link)."""

    name: str
    k: int = None

    def __post_init__(self):
        if self.name not in ("svd", "s-svd", "b-svd"):
            raise InvalidModelError(f"unknown model kind {self.name!r}")
        if self.name == "b-svd":
            if self.k is None or int(self.k) != self.k or self.k < 1:
                raise InvalidModelError("b-svd needs a positive integer trial count k")
            object.__setattr__(self, "k", int(self.k))

    @property
    def gaussian(self):
        return self.name != "b-svd"

    def link(self, x):
        """Predictive mean of an entry with latent value ``x``."""
        if self.name == "svd":
            return x
        if self.name == "s-svd":
            return softplus(x)
        return self.k * logistic(x)


SVD = ModelKind("svd")
S_SVD = ModelKind("s-svd")


def b_svd(k=10):
    return ModelKind("b-svd", k)


@dataclass(frozen=True)
class Hyperparams:
    lam: float = 1.0
    alpha_sigma: float = 1e-4
    beta_sigma: float = 1e-4
    alpha_delta: float = 1e-4
    beta_delta: float = 1e-4

    def __post_init__(self):
        for name in ("lam", "alpha_sigma", "beta_sigma", "alpha_delta", "beta_delta"):
            if not getattr(self, name) > 0:
                raise DomainError(f"hyperparameter {name} must be positive")


@dataclass(frozen=True, eq=False)
class SvdState:
    """Posterior state ``(U, s, V, gamma)``; ``gamma`` is ``None`` for ``b-svd``."""

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    gamma: float = None

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        V = np.asarray(self.V, dtype=float)
        s = np.asarray(self.s, dtype=float).ravel()
        if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1] or s.shape != (U.shape[1],):
            raise DimensionError("U (m x r), s (r,) and V (n x r) disagree in rank")
        if not np.all(s > 0):
            raise DomainError("singular values must be positive")
        if self.gamma is not None and not self.gamma > 0:
            raise DomainError("gamma must be positive")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "s", s)

    @property
    def rank(self):
        return len(self.s)

    def check_invariants(self, tol=1e-8):
        return (orthogonality_error(self.U) <= tol and orthogonality_error(self.V) <= tol
                and bool(np.all(self.s > 0)))

    def dense(self):
        return (self.U * self.s) @ self.V.T


@dataclass(frozen=True, eq=False)
class ABState:
    """Two-factor state ``(A, B, gamma, tau)``."""

    A: np.ndarray
    B: np.ndarray
    gamma: float
    tau: float

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
            raise DimensionError("A (m x r) and B (n x r) disagree in rank")
        if not (self.gamma > 0 and self.tau > 0):
            raise DomainError("gamma and tau must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def rank(self):
        return self.A.shape[1]

    def dense(self):
        return self.A @ self.B.T


# ---------------------------------------------------------------------------
# SVD-parameterised likelihoods
# ---------------------------------------------------------------------------

def _entry_loglik(x, y, kind, gamma, log_binom=None):
    """Log-likelihood of the entries with latent values ``x`` and its derivative in ``x``."""
    if kind.name == "b-svd":
        k = kind.k
        val = np.sum(log_binom - y * softplus(-x) - (k - y) * softplus(x))
        return float(val), y - k * logistic(x)
    if gamma is None:
        raise DomainError("Gaussian likelihoods need a noise precision gamma")
    if kind.name == "svd":
        res = y - x
        dx = gamma * res
    else:
        res = y - softplus(x)
        dx = gamma * res * logistic(x)
    n_obs = len(y)
    val = -0.5 * n_obs * LOG_2PI + 0.5 * n_obs * np.log(gamma) - 0.5 * gamma * np.dot(res, res)
    return float(val), dx


def _check_shapes(state, obs):
    if state.U.shape[0] != obs.m or state.V.shape[0] != obs.n:
        raise DimensionError(f"state is {state.U.shape[0]}x{state.V.shape[0]}, data is {obs.m}x{obs.n}")


def latent_entries(state, rows, cols):
    """``X_ij = sum_l U_il s_l V_jl`` at the given index pairs."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    return kernels.gather_dot(state.U, rows, (state.V * state.s)[cols])


def predict_entries(state, kind, rows, cols):
    """Predictive means at index pairs (vectorised :func:`predict_entry`)."""
    if isinstance(state, ABState):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        return kernels.gather_dot(state.A, rows, state.B[cols])
    return kind.link(latent_entries(state, rows, cols))


def predict_entry(state, kind, i, j):
    """Predictive mean of entry ``(i, j)``: ``X_ij``, ``softplus(X_ij)`` or ``k logistic(X_ij)``."""
    m, n = state.U.shape[0], state.V.shape[0]
    if not (0 <= i < m and 0 <= j < n):
        raise IndexError(f"entry ({i}, {j}) outside {m}x{n}")
    x = float(np.dot(state.U[i] * state.s, state.V[j]))
    return float(kind.link(x))


def log_likelihood(state, kind, obs):
    """Exact log-density of the training entries, constants included."""
    _check_shapes(state, obs)
    tr = obs.training
    lb = tr.log_binom(kind.k) if kind.name == "b-svd" else None
    x = latent_entries(state, tr.rows, tr.cols)
    return _entry_loglik(x, tr.y, kind, state.gamma, lb)[0]


def log_prior(state, kind, hp):
    """Exponential prior on ``s`` (``-lam * sum(s)``) plus the unnormalised Gamma
    prior on ``gamma`` for Gaussian kinds; the uniform priors on ``U``, ``V``
    contribute 0."""
    val = -hp.lam * float(np.sum(state.s))
    if kind.gaussian:
        val += (hp.alpha_sigma - 1.0) * np.log(state.gamma) - hp.beta_sigma * state.gamma
    return float(val)


def log_posterior_unnorm(state, kind, obs, hp):
    return log_likelihood(state, kind, obs) + log_prior(state, kind, hp)


class FactorTarget:
    """Conditional log-density of one Stiefel factor with the other blocks fixed.

    ``idx`` holds the (sorted) rows of the sampled factor touched by each
    entry and ``B`` the matching rows of ``other * s``; evaluating at ``X``
    returns ``(log density, ambient gradient)``.
    """

    def __init__(self, idx, B, y, nrows, kind, gamma, log_binom=None):
        self.idx = idx
        self.B = np.ascontiguousarray(B)
        self.y = y
        self.nrows = nrows
        self.kind = kind
        self.gamma = gamma
        self.log_binom = log_binom

    def __call__(self, X):
        x = kernels.gather_dot(X, self.idx, self.B)
        val, dx = _entry_loglik(x, self.y, self.kind, self.gamma, self.log_binom)
        return val, kernels.scatter_rows(dx, self.idx, self.B, self.nrows)


def u_target(state, kind, obs):
    """Target for ``U | s, V, gamma`` (density w.r.t. the Hausdorff measure)."""
    _check_shapes(state, obs)
    tr = obs.training
    lb = tr.log_binom(kind.k) if kind.name == "b-svd" else None
    return FactorTarget(tr.rows, (state.V * state.s)[tr.cols], tr.y, obs.m, kind, state.gamma, lb)


def v_target(state, kind, obs):
    """Target for ``V | U, s, gamma``; entries are visited in column order."""
    _check_shapes(state, obs)
    tr = obs.training
    p = tr.col_perm
    lb = tr.log_binom(kind.k)[p] if kind.name == "b-svd" else None
    return FactorTarget(tr.cols[p], (state.U * state.s)[tr.rows[p]], tr.y[p], obs.n, kind, state.gamma, lb)


def grad_U(state, kind, obs):
    """Ambient Euclidean gradient of ``log pi(U | y, s, V, gamma)``."""
    return u_target(state, kind, obs)(state.U)[1]


def grad_V(state, kind, obs):
    """Ambient Euclidean gradient of ``log pi(V | y, s, U, gamma)``."""
    return v_target(state, kind, obs)(state.V)[1]


class LogSingularTarget:
    """Conditional of ``theta = log s`` given ``U``, ``V``, ``gamma``.

    With the design matrix ``M`` (rows ``U_i: * V_j:``) fixed, latent values
    are ``M exp(theta)``.  The value includes the exponential prior and the
    log-Jacobian ``sum(theta)`` of the exp map.
    """

    def __init__(self, state, kind, obs, hp):
        _check_shapes(state, obs)
        tr = obs.training
        self.M = state.U[tr.rows] * state.V[tr.cols]
        self.y = tr.y
        self.kind = kind
        self.gamma = state.gamma
        self.lam = hp.lam
        self.log_binom = tr.log_binom(kind.k) if kind.name == "b-svd" else None

    def __call__(self, theta):
        s = np.exp(theta)
        val, dx = _entry_loglik(self.M @ s, self.y, self.kind, self.gamma, self.log_binom)
        val += -self.lam * np.sum(s) + np.sum(theta)
        grad = (self.M.T @ dx) * s - self.lam * s + 1.0
        return float(val), grad


def log_cond_s(theta, state, kind, obs, hp):
    """``(value, gradient)`` of the log-singular-value conditional at ``theta``."""
    return LogSingularTarget(state, kind, obs, hp)(np.asarray(theta, dtype=float))


# ---------------------------------------------------------------------------
# Gamma conditionals
# ---------------------------------------------------------------------------

def _gamma_params(sse, count, alpha, beta):
    return count / 2.0 + alpha, 0.5 * sse + beta


def residual_sum_squares(state, kind, obs):
    tr = obs.training
    if isinstance(state, ABState):
        fit = kernels.gather_dot(state.A, tr.rows, state.B[tr.cols])
    else:
        fit = kind.link(latent_entries(state, tr.rows, tr.cols))
    res = tr.y - fit
    return float(np.dot(res, res))


def gamma_posterior_params(state, kind, obs, hp):
    """``(shape, rate)`` of ``gamma | rest`` for Gaussian kinds."""
    if not kind.gaussian:
        raise InvalidModelError("noise precision is only defined for Gaussian likelihoods")
    return _gamma_params(residual_sum_squares(state, kind, obs), obs.n_train, hp.alpha_sigma, hp.beta_sigma)


def sample_gamma_likelihood_precision(state, kind, obs, hp, rng):
    shape, rate = gamma_posterior_params(state, kind, obs, hp)
    return float(rng.gamma(shape, 1.0 / rate))


# ---------------------------------------------------------------------------
# two-factor (A B^T) baseline
# ---------------------------------------------------------------------------

def ab_log_likelihood(state, obs):
    n_obs = obs.n_train
    sse = residual_sum_squares(state, SVD, obs)
    return float(-0.5 * n_obs * LOG_2PI + 0.5 * n_obs * np.log(state.gamma) - 0.5 * state.gamma * sse)


def ab_log_posterior(state, obs, hp):
    """Unnormalised log of ``p(A, B, gamma, tau | y)``."""
    if state.A.shape[0] != obs.m or state.B.shape[0] != obs.n:
        raise DimensionError("factor shapes do not match the data")
    n_obs = obs.n_train
    m, r = state.A.shape
    n = state.B.shape[0]
    g, t = state.gamma, state.tau
    sse = residual_sum_squares(state, SVD, obs)
    sq = float(np.sum(state.A ** 2) + np.sum(state.B ** 2))
    return float(0.5 * n_obs * np.log(g) - 0.5 * g * sse
                 + (hp.alpha_sigma - 1.0) * np.log(g) - hp.beta_sigma * g
                 + 0.5 * (m + n) * r * np.log(t) - 0.5 * t * sq
                 + (hp.alpha_delta - 1.0) * np.log(t) - hp.beta_delta * t)


def ab_row_conditional(which, index, state, obs):
    """Gaussian full conditional ``(mean, precision)`` of row ``index`` of ``A`` or ``B``."""
    tr = obs.training
    r = state.rank
    if which == "A":
        if not 0 <= index < obs.m:
            raise IndexError(index)
        sl = slice(tr.row_ptr[index], tr.row_ptr[index + 1])
        other = state.B[tr.cols[sl]]
        y = tr.y[sl]
    elif which == "B":
        if not 0 <= index < obs.n:
            raise IndexError(index)
        p = tr.col_perm[tr.col_ptr[index]:tr.col_ptr[index + 1]]
        other = state.A[tr.rows[p]]
        y = tr.y[p]
    else:
        raise ValueError("which must be 'A' or 'B'")
    prec = state.tau * np.eye(r) + state.gamma * other.T @ other
    if len(y) == 0:
        return np.zeros(r), prec
    mean = np.linalg.solve(prec, state.gamma * other.T @ y)
    return mean, prec


def ab_gamma_posterior_params(state, obs, hp):
    return _gamma_params(residual_sum_squares(state, SVD, obs), obs.n_train, hp.alpha_sigma, hp.beta_sigma)


def tau_posterior_params(state, hp):
    m, r = state.A.shape
    n = state.B.shape[0]
    sq = float(np.sum(state.A ** 2) + np.sum(state.B ** 2))
    return hp.alpha_delta + 0.5 * (m + n) * r, hp.beta_delta + 0.5 * sq


def sample_tau(state, hp, rng):
    shape, rate = tau_posterior_params(state, hp)
    return float(rng.gamma(shape, 1.0 / rate))
