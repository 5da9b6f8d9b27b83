"""Geodesic HMC on Stiefel manifolds, Euclidean HMC, and the Gibbs drivers."""

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ConfigError, DomainError
from .manifold import (REORTH_TRIGGER, geodesic_step, orthogonality_error, project_to_tangent,
                       reorthonormalize, uniform_stiefel_sample)
from .models import (ABState, Hyperparams, LogSingularTarget, ModelKind, SvdState,
                     ab_gamma_posterior_params, ab_log_likelihood, ab_log_posterior,
                     log_likelihood, log_prior, sample_gamma_likelihood_precision,
                     tau_posterior_params, u_target, v_target)

logger = logging.getLogger(__name__)

SVD_BLOCKS = ("U", "V", "S")


@dataclass
class HmcConfig:
    """Step size ``epsilon``, trajectory length ``steps`` and adaptation settings."""

    epsilon: float = 0.05
    steps: int = 10
    target_accept: float = 0.8
    adapt_iters: int = 2000
    jitter: float = 0.2

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must lie in (0, 1)")
        if self.adapt_iters < 0:
            raise ConfigError("adapt_iters must be non-negative")
        if not 0 <= self.jitter < 1:
            raise ConfigError("jitter must lie in [0, 1)")


@dataclass
class StepResult:
    """Outcome of one HMC transition.

    ``delta_h`` is ``H_next - H_current`` with ``H = log pi - |v|^2 / 2``;
    it is ``-inf`` when the trajectory hit a non-finite value.
    """

    x: np.ndarray
    accepted: bool
    delta_h: float
    accept_prob: float
    n_reorth: int = 0
    diverged: bool = False


def _trajectory_length(cfg, rng):
    if cfg.jitter == 0:
        return cfg.steps
    return max(1, int(round(cfg.steps * (1.0 + cfg.jitter * rng.uniform(-1.0, 1.0)))))


def _finish(x0, x1, h0, h1, diverged, rng, n_reorth=0):
    u = rng.uniform()
    if diverged or not math.isfinite(h1):
        return StepResult(x0, False, -math.inf, 0.0, n_reorth, True)
    delta = h1 - h0
    prob = 1.0 if delta >= 0 else math.exp(delta)
    if u < prob:
        return StepResult(x1, True, delta, prob, n_reorth)
    return StepResult(x0, False, delta, prob, n_reorth)


def stiefel_leapfrog(X, V, target, epsilon, n_steps, logp=None, grad=None):
    """Integrate the split geodesic dynamics; returns ``(X, V, logp, n_reorth, ok)``.

    Each step: half kick with the ambient gradient, tangent projection,
    exact geodesic flow for ``epsilon``, half kick, projection.
    """
    if grad is None:
        logp, grad = target(X)
    n_reorth = 0
    half = 0.5 * epsilon
    for _ in range(n_steps):
        V = project_to_tangent(X, V + half * grad)
        try:
            X, V = geodesic_step(X, V, epsilon, check=False)
        except (DomainError, np.linalg.LinAlgError):
            return X, V, -math.inf, n_reorth, False
        if orthogonality_error(X) > REORTH_TRIGGER:
            X, V = reorthonormalize(X, V)
            n_reorth += 1
        logp, grad = target(X)
        if not (math.isfinite(logp) and np.all(np.isfinite(grad))):
            return X, V, logp, n_reorth, False
        V = project_to_tangent(X, V + half * grad)
    return X, V, logp, n_reorth, True


def hmc_stiefel_step(X, target, cfg, rng, n_steps=None):
    """One geodesic HMC transition on V(n, r).

    ``target(X)`` returns ``(log density w.r.t. Hausdorff measure, ambient
    gradient)``.  The kinetic energy is evaluated on the tangent momentum at
    both ends of the trajectory.
    """
    logp, grad = target(X)
    if not (math.isfinite(logp) and np.all(np.isfinite(grad))):
        raise ValueError("target is not finite at the current state")
    V = project_to_tangent(X, rng.standard_normal(X.shape))
    h0 = logp - 0.5 * float(np.sum(V * V))
    steps = n_steps if n_steps is not None else _trajectory_length(cfg, rng)
    # divergent trajectories are rejected below, so overflow inside them is not an error
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        X1, V1, logp1, n_reorth, ok = stiefel_leapfrog(X, V, target, cfg.epsilon, steps, logp, grad)
    h1 = logp1 - 0.5 * float(np.sum(V1 * V1)) if ok else -math.inf
    return _finish(X, X1, h0, h1, not ok, rng, n_reorth)


def leapfrog(theta, p, target, epsilon, n_steps, logp=None, grad=None):
    """Standard leapfrog with identity mass; returns ``(theta, p, logp, ok)``."""
    if grad is None:
        logp, grad = target(theta)
    half = 0.5 * epsilon
    for _ in range(n_steps):
        p = p + half * grad
        theta = theta + epsilon * p
        logp, grad = target(theta)
        if not (math.isfinite(logp) and np.all(np.isfinite(grad))):
            return theta, p, logp, False
        p = p + half * grad
    return theta, p, logp, True


def hmc_euclidean_step(theta, target, cfg, rng, n_steps=None):
    """One HMC transition in R^d with identity mass matrix."""
    theta = np.asarray(theta, dtype=float)
    logp, grad = target(theta)
    if not (math.isfinite(logp) and np.all(np.isfinite(grad))):
        raise ValueError("target is not finite at the current state")
    p = rng.standard_normal(theta.shape)
    h0 = logp - 0.5 * float(p @ p)
    steps = n_steps if n_steps is not None else _trajectory_length(cfg, rng)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        t1, p1, logp1, ok = leapfrog(theta, p, target, cfg.epsilon, steps, logp, grad)
    h1 = logp1 - 0.5 * float(p1 @ p1) if ok else -math.inf
    return _finish(theta, t1, h0, h1, not ok, rng)


class DualAveraging:
    """Nesterov dual averaging of ``log epsilon`` towards a target acceptance rate.

    Follows Hoffman & Gelman's step-size scheme with the usual constants
    (``gamma=0.05``, ``t0=10``, ``kappa=0.75``, shrinkage point ``10 * eps0``).
    """

    def __init__(self, eps0, target_accept=0.8, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.target = target_accept
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.t = 0
        self.hbar = 0.0
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0

    def update(self, accept_prob):
        """Feed one acceptance probability; returns the step size to use next."""
        if not math.isfinite(accept_prob):
            accept_prob = 0.0
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.hbar = (1.0 - eta) * self.hbar + eta * (self.target - accept_prob)
        self.log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.hbar
        w = self.t ** -self.kappa
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def final_epsilon(self):
        """Averaged step size, used once adaptation stops."""
        return math.exp(self.log_eps_bar) if self.t else math.exp(self.log_eps)


def adapt_step_size(history, eps0=0.1, target_accept=0.8):
    """Replay a history of acceptance probabilities through dual averaging.

    Returns the averaged step size reached at the end of the history.
    """
    da = DualAveraging(eps0, target_accept)
    for a in history:
        da.update(a)
    return da.final_epsilon


@dataclass
class ChainRecord:
    """One post-burn-in iteration of a chain (scalars only; factors go to snapshots)."""

    iteration: int
    log_posterior: float
    log_likelihood: float
    gamma: float = None
    tau: float = None
    s: np.ndarray = None
    accepted: dict = field(default_factory=dict)
    accept_prob: dict = field(default_factory=dict)
    step_size: dict = field(default_factory=dict)
    n_reorth: int = 0
    n_diverged: int = 0
    wall_time: float = 0.0


def gibbs_sweep_svd(state, kind, obs, hp, cfg_u, cfg_v, cfg_s, rng, iteration=0):
    """One sweep: ``U | s, V``, then ``V | s, U_new``, then ``s | U_new, V_new``,
    then the conjugate ``gamma`` draw for Gaussian kinds."""
    t_start = time.perf_counter()
    res_u = hmc_stiefel_step(state.U, u_target(state, kind, obs), cfg_u, rng)
    state = replace(state, U=res_u.x)
    res_v = hmc_stiefel_step(state.V, v_target(state, kind, obs), cfg_v, rng)
    state = replace(state, V=res_v.x)
    res_s = hmc_euclidean_step(np.log(state.s), LogSingularTarget(state, kind, obs, hp), cfg_s, rng)
    state = replace(state, s=np.exp(res_s.x))
    if kind.gaussian:
        state = replace(state, gamma=sample_gamma_likelihood_precision(state, kind, obs, hp, rng))
    ll = log_likelihood(state, kind, obs)
    results = dict(zip(SVD_BLOCKS, (res_u, res_v, res_s)))
    rec = ChainRecord(
        iteration=iteration,
        log_posterior=ll + log_prior(state, kind, hp),
        log_likelihood=ll,
        gamma=state.gamma,
        s=state.s.copy(),
        accepted={b: r.accepted for b, r in results.items()},
        accept_prob={b: r.accept_prob for b, r in results.items()},
        step_size={"U": cfg_u.epsilon, "V": cfg_v.epsilon, "S": cfg_s.epsilon},
        n_reorth=res_u.n_reorth + res_v.n_reorth,
        n_diverged=sum(r.diverged for r in results.values()),
        wall_time=time.perf_counter() - t_start,
    )
    return state, rec


def gibbs_sweep_ab(state, obs, hp, rng, iteration=0):
    """One sweep of the two-factor Gibbs sampler: ``gamma``, ``tau``, rows of ``A``, rows of ``B``."""
    t_start = time.perf_counter()
    shape, rate = ab_gamma_posterior_params(state, obs, hp)
    state = replace(state, gamma=float(rng.gamma(shape, 1.0 / rate)))
    shape, rate = tau_posterior_params(state, hp)
    state = replace(state, tau=float(rng.gamma(shape, 1.0 / rate)))
    tr = obs.training
    m, r = state.A.shape
    n = state.B.shape[0]
    A = kernels.row_gaussian_sweep(tr.row_ptr, tr.cols, tr.y, state.B, state.gamma, state.tau,
                                   rng.standard_normal((m, r)))
    p = tr.col_perm
    B = kernels.row_gaussian_sweep(tr.col_ptr, tr.rows[p], tr.y[p], A, state.gamma, state.tau,
                                   rng.standard_normal((n, r)))
    state = replace(state, A=A, B=B)
    rec = ChainRecord(
        iteration=iteration,
        log_posterior=ab_log_posterior(state, obs, hp),
        log_likelihood=ab_log_likelihood(state, obs),
        gamma=state.gamma,
        tau=state.tau,
        wall_time=time.perf_counter() - t_start,
    )
    return state, rec


# ---------------------------------------------------------------------------
# chain driver
# ---------------------------------------------------------------------------

MODELS = ("svd", "s-svd", "b-svd", "ab-gibbs")
INITS = ("uniform", "spectral")


@dataclass
class ChainSpec:
    """Everything needed to run one chain besides the data and the seed."""

    model: str = "svd"
    rank: int = 10
    k: int = 10
    hp: Hyperparams = field(default_factory=Hyperparams)
    hmc: HmcConfig = field(default_factory=HmcConfig)
    init: str = "uniform"
    init_s: float = 1.0
    init_gamma: float = 1.0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}; expected one of {INITS}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")

    @property
    def kind(self):
        if self.model == "ab-gibbs":
            return None
        return ModelKind(self.model, self.k if self.model == "b-svd" else None)

    def block_layout(self, m, n):
        """Names and shapes of the factor arrays written per snapshot."""
        r = self.rank
        if self.model == "ab-gibbs":
            return [("A", (m, r)), ("B", (n, r))]
        return [("U", (m, r)), ("s", (r,)), ("V", (n, r))]


@dataclass
class ChainSummary:
    n_iters: int
    burnin: int
    thin: int
    n_kept: int
    n_snapshots: int
    empty: bool
    acceptance: dict
    step_size: dict
    n_reorth: int
    n_diverged: int
    wall_time: float
    final_state: object = None


class MemorySink:
    """Keeps records (and optionally snapshots) in memory."""

    def __init__(self, keep_snapshots=True):
        self.keep_snapshots = keep_snapshots
        self.meta = None
        self.records = []
        self.snapshots = []
        self.summary = None

    def open(self, meta):
        self.meta = meta

    def record(self, rec):
        self.records.append(rec)

    def snapshot(self, iteration, arrays):
        if self.keep_snapshots:
            self.snapshots.append((iteration, {k: np.array(v) for k, v in arrays.items()}))

    def close(self, summary):
        self.summary = summary

    def abort(self, exc):
        self.summary = None


def _latent_targets(spec, y):
    # map observations to the latent scale of the link function
    if spec.model == "s-svd":
        y = np.maximum(y, 1e-3)
        return y + np.log(-np.expm1(-y))
    if spec.model == "b-svd":
        p = (y + 0.5) / (spec.k + 1.0)
        return np.log(p) - np.log1p(-p)
    return y


def spectral_start(spec, obs):
    """Rank-``r`` truncated SVD of the zero-filled, inverse-probability-scaled
    training matrix (on the latent scale of the link)."""
    tr = obs.training
    Y = np.zeros((obs.m, obs.n))
    Y[tr.rows, tr.cols] = _latent_targets(spec, tr.y)
    Y *= obs.m * obs.n / len(tr)
    U, s, Vt = np.linalg.svd(Y, full_matrices=False)
    r = spec.rank
    return U[:, :r], np.maximum(s[:r], 1e-3), Vt[:r].T


def initial_state(spec, obs, rng):
    """Starting point: uniform Stiefel draws with ``s = init_s`` (default) or the
    spectral estimate.  The two-factor model always starts from N(0, 1) factors."""
    m, n, r = obs.m, obs.n, spec.rank
    if spec.model == "ab-gibbs":
        return ABState(rng.standard_normal((m, r)), rng.standard_normal((n, r)), 1.0, 1.0)
    if r > min(m, n):
        raise ConfigError(f"rank {r} exceeds min(m, n) = {min(m, n)}")
    gamma = spec.init_gamma if spec.kind.gaussian else None
    if spec.init == "spectral":
        U, s, V = spectral_start(spec, obs)
        return SvdState(U, s, V, gamma)
    U = uniform_stiefel_sample(m, r, rng)
    V = uniform_stiefel_sample(n, r, rng)
    return SvdState(U, np.full(r, float(spec.init_s)), V, gamma)


def _snapshot_arrays(state):
    if isinstance(state, ABState):
        return {"A": state.A, "B": state.B}
    return {"U": state.U, "s": state.s, "V": state.V}


def run_chain(spec, obs, total_iters, burnin, thin, seed, sink, init=None, log_every=100):
    """Run one chain and stream kept records and snapshots into ``sink``.

    Step sizes of the ``U``, ``V`` and ``S`` blocks adapt independently by
    dual averaging for the first ``spec.hmc.adapt_iters`` iterations (capped
    at ``burnin``) and are frozen afterwards.
    """
    if total_iters < 0 or not 0 <= burnin <= total_iters or thin < 1:
        raise ConfigError("need 0 <= burnin <= total_iters and thin >= 1")
    rng = np.random.default_rng(seed)
    obs.training  # fail early on an empty training set
    state = init if init is not None else initial_state(spec, obs, rng)
    kind = spec.kind
    hp = spec.hp
    adapt_iters = min(spec.hmc.adapt_iters, burnin)
    cfgs = {b: replace(spec.hmc) for b in SVD_BLOCKS}
    adapters = {b: DualAveraging(spec.hmc.epsilon, spec.hmc.target_accept) for b in SVD_BLOCKS}
    accept_counts = {b: 0 for b in SVD_BLOCKS}
    n_reorth = n_diverged = n_kept = n_snap = 0
    sink.open({"model": spec.model, "rank": spec.rank, "seed": seed, "total_iters": total_iters,
               "burnin": burnin, "thin": thin, "layout": spec.block_layout(obs.m, obs.n)})
    t0 = time.perf_counter()
    try:
        for it in range(total_iters):
            if kind is None:
                state, rec = gibbs_sweep_ab(state, obs, hp, rng, iteration=it)
            else:
                state, rec = gibbs_sweep_svd(state, kind, obs, hp, cfgs["U"], cfgs["V"], cfgs["S"],
                                             rng, iteration=it)
                n_reorth += rec.n_reorth
                n_diverged += rec.n_diverged
                if it < adapt_iters:
                    for b in SVD_BLOCKS:
                        eps = adapters[b].update(rec.accept_prob[b])
                        cfgs[b].epsilon = adapters[b].final_epsilon if it == adapt_iters - 1 else eps
            if it >= burnin:
                for b, acc in rec.accepted.items():
                    accept_counts[b] += acc
                sink.record(rec)
                n_kept += 1
                if (it - burnin) % thin == 0:
                    sink.snapshot(it, _snapshot_arrays(state))
                    n_snap += 1
            if log_every and (it + 1) % log_every == 0:
                s_rng = "" if rec.s is None else f" s=[{rec.s.min():.3g}, {rec.s.max():.3g}]"
                acc = " ".join(f"{b}:{p:.2f}" for b, p in rec.accept_prob.items())
                logger.info("iter %d logpost=%.6g %s%s dt=%.2fms", it + 1, rec.log_posterior, acc,
                            s_rng, 1e3 * rec.wall_time)
    except BaseException as exc:
        sink.abort(exc)
        raise
    blocks = () if kind is None else SVD_BLOCKS
    summary = ChainSummary(
        n_iters=total_iters, burnin=burnin, thin=thin, n_kept=n_kept, n_snapshots=n_snap,
        empty=n_kept == 0,
        acceptance={b: accept_counts[b] / n_kept if n_kept else float("nan") for b in blocks},
        step_size={b: cfgs[b].epsilon for b in blocks},
        n_reorth=n_reorth, n_diverged=n_diverged,
        wall_time=time.perf_counter() - t0, final_state=state,
    )
    if summary.empty:
        logger.warning("burn-in consumed every iteration: no kept samples")
    sink.close(summary)
    return summary
