"""Hot loops over observed entries.

Every kernel exists twice: a numba ``@njit`` loop and a vectorised numpy
version.  The numba path is used when numba imports and the environment
variable ``STIEFEL_MC_DISABLE_NUMBA`` is unset (or ``0``); otherwise the
numpy path is selected at import time.  Both paths are always reachable
through :data:`numba_impl` / :data:`numpy_impl` for testing and benchmarks.

Summation order is fixed in both paths, so results are deterministic for a
given input.
"""

import os
import warnings
from types import SimpleNamespace

import numpy as np

_DISABLED = os.environ.get("STIEFEL_MC_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_gather_dot(X, idx, B):
    return np.einsum("ij,ij->i", X[idx], B)


def _np_scatter_rows(w, idx, B, nrows):
    out = np.zeros((nrows, B.shape[1]))
    if len(idx) == 0:
        return out
    # idx is assumed grouped (sorted); reduceat sums contiguous runs
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    out[idx[starts]] = np.add.reduceat(w[:, None] * B, starts, axis=0)
    return out


def _np_row_gaussian_sweep(ptr, other_idx, y, Other, gamma, tau, z):
    nrows, r = z.shape
    counts = np.diff(ptr)
    owner = np.repeat(np.arange(nrows), counts)
    Bo = Other[other_idx]
    prec = np.zeros((nrows, r, r))
    lin = np.zeros((nrows, r))
    if len(owner):
        np.add.at(prec, owner, gamma * Bo[:, :, None] * Bo[:, None, :])
        np.add.at(lin, owner, gamma * y[:, None] * Bo)
    prec += tau * np.eye(r)
    L = np.linalg.cholesky(prec)
    # x = L^{-T} (L^{-1} b + z)
    u = np.linalg.solve(L, lin[:, :, None])[:, :, 0] + z
    return np.linalg.solve(np.swapaxes(L, 1, 2), u[:, :, None])[:, :, 0]


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_gather_dot(X, idx, B):
        n_obs, r = B.shape
        out = np.empty(n_obs)
        for e in range(n_obs):
            i = idx[e]
            acc = 0.0
            for l in range(r):
                acc += X[i, l] * B[e, l]
            out[e] = acc
        return out

    @njit(cache=True)
    def _nb_scatter_rows(w, idx, B, nrows):
        n_obs, r = B.shape
        out = np.zeros((nrows, r))
        for e in range(n_obs):
            i = idx[e]
            we = w[e]
            for l in range(r):
                out[i, l] += we * B[e, l]
        return out

    @njit(cache=True)
    def _nb_row_gaussian_sweep(ptr, other_idx, y, Other, gamma, tau, z):
        nrows, r = z.shape
        out = np.empty((nrows, r))
        P = np.empty((r, r))
        L = np.zeros((r, r))
        b = np.empty(r)
        u = np.empty(r)
        for i in range(nrows):
            for a in range(r):
                b[a] = 0.0
                for c in range(r):
                    P[a, c] = 0.0
                P[a, a] = tau
            for e in range(ptr[i], ptr[i + 1]):
                j = other_idx[e]
                ye = y[e]
                for a in range(r):
                    ba = Other[j, a]
                    b[a] += gamma * ye * ba
                    for c in range(r):
                        P[a, c] += gamma * ba * Other[j, c]
            # Cholesky P = L L^T
            for a in range(r):
                for c in range(a + 1):
                    s = P[a, c]
                    for q in range(c):
                        s -= L[a, q] * L[c, q]
                    if a == c:
                        L[a, a] = np.sqrt(s)
                    else:
                        L[a, c] = s / L[c, c]
            # forward solve L u = b, then add noise
            for a in range(r):
                s = b[a]
                for q in range(a):
                    s -= L[a, q] * u[q]
                u[a] = s / L[a, a]
            for a in range(r):
                u[a] += z[i, a]
            # back solve L^T x = u
            for a in range(r - 1, -1, -1):
                s = u[a]
                for q in range(a + 1, r):
                    s -= L[q, a] * out[i, q]
                out[i, a] = s / L[a, a]
        return out


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def _py_fnv1a64(data, h):
    # Sequential by construction; no vectorised form exists.
    for byte in data.tobytes():
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_fnv1a64(data, h):
        prime = np.uint64(FNV_PRIME)
        for k in range(data.shape[0]):
            h = (h ^ np.uint64(data[k])) * prime
        return h


numpy_impl = SimpleNamespace(
    gather_dot=_np_gather_dot,
    scatter_rows=_np_scatter_rows,
    row_gaussian_sweep=_np_row_gaussian_sweep,
    fnv1a64=_py_fnv1a64,
)

if HAVE_NUMBA:
    numba_impl = SimpleNamespace(
        gather_dot=_nb_gather_dot,
        scatter_rows=_nb_scatter_rows,
        row_gaussian_sweep=_nb_row_gaussian_sweep,
        fnv1a64=lambda data, h: int(_nb_fnv1a64(data, np.uint64(h))),
    )
else:  # pragma: no cover
    numba_impl = None

_impl = numba_impl if USE_NUMBA else numpy_impl


def gather_dot(X, idx, B):
    """``out[e] = X[idx[e]] . B[e]`` for every observed entry ``e``."""
    return _impl.gather_dot(X, idx, B)


def scatter_rows(w, idx, B, nrows):
    """Accumulate ``w[e] * B[e]`` into row ``idx[e]`` of an ``nrows x r`` zero matrix.

    ``idx`` must be sorted (entries grouped by target row).
    """
    return _impl.scatter_rows(w, idx, B, nrows)


def row_gaussian_sweep(ptr, other_idx, y, Other, gamma, tau, z):
    """Draw every row of a factor from its Gaussian full conditional.

    Row ``i`` owns entries ``ptr[i]:ptr[i+1]``; entry ``e`` pairs it with row
    ``other_idx[e]`` of the fixed factor ``Other`` and observed value ``y[e]``.
    The conditional has precision ``tau*I + gamma*sum(b b^T)`` and linear term
    ``gamma*sum(y*b)``; ``z`` holds the standard-normal innovations.
    """
    return _impl.row_gaussian_sweep(ptr, other_idx, y, Other, float(gamma), float(tau), z)


def fnv1a64(data, h=FNV_OFFSET):
    """64-bit FNV-1a digest of a byte buffer, continuing from state ``h``."""
    arr = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data.view(np.uint8).ravel()
    return _impl.fnv1a64(arr, h)


def set_num_threads(n):
    """Cap numba's worker pool (no-op without numba)."""
    if HAVE_NUMBA and n:
        with warnings.catch_warnings():
            # numba reports unusable optional threading layers while initialising
            warnings.simplefilter("ignore", numba.NumbaWarning)
            numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
