"""Stiefel manifold V(n, r) = {X in R^{n x r} : X^T X = I_r}.

Points and tangent vectors are plain ``(n, r)`` float arrays.  The metric is
the embedding (trace) metric, so the tangent projection is orthogonal in the
Frobenius inner product and isotropic ambient Gaussians projected onto the
tangent space are the natural momenta.
"""

import math

import numpy as np

from .errors import DimensionError, DomainError, PreconditionError

ORTHO_TOL = 1e-10
TANGENT_RTOL = 1e-8
REORTH_TRIGGER = 1e-9

# Pade coefficients and 1-norm thresholds for scaling-and-squaring (Higham 2005).
_PADE = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
         16380.0, 182.0, 1.0),
}
_THETA = {
    3: 1.495585217958292e-2,
    5: 2.539398330063230e-1,
    7: 9.504178996162932e-1,
    9: 2.097847961257068e0,
    13: 5.371920351148152e0,
}


def expm(M):
    """Matrix exponential by scaling and squaring with a diagonal Pade approximant.

    The Pade degree (3, 5, 7, 9 or 13) is the smallest one whose backward
    error bound holds for ``||M||_1``; beyond the degree-13 threshold the
    matrix is scaled by ``2**-s`` and the result squared ``s`` times.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] < 1:
        raise DimensionError(f"expm needs a non-empty square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DomainError("expm: matrix has non-finite entries")
    d = M.shape[0]
    ident = np.eye(d)
    norm1 = np.abs(M).sum(axis=0).max()
    if norm1 == 0.0:
        return ident

    for deg in (3, 5, 7, 9):
        if norm1 <= _THETA[deg]:
            b = _PADE[deg]
            M2 = M @ M
            powers = [ident, M2]
            for _ in range(deg // 2 - 1):
                powers.append(powers[-1] @ M2)
            U = M @ sum(b[2 * k + 1] * P for k, P in enumerate(powers))
            V = sum(b[2 * k] * P for k, P in enumerate(powers))
            return np.linalg.solve(V - U, V + U)

    s = max(0, int(math.ceil(math.log2(norm1 / _THETA[13]))))
    A = M / 2.0**s
    b = _PADE[13]
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
             + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
         + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident)
    R = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        R = R @ R
    return R


def orthogonality_error(X):
    """``||X^T X - I||_F``."""
    return float(np.linalg.norm(X.T @ X - np.eye(X.shape[1])))


def tangency_error(X, V):
    """``||X^T V + V^T X||_F`` (zero iff ``V`` is tangent at ``X``)."""
    XtV = X.T @ V
    return float(np.linalg.norm(XtV + XtV.T))


def is_on_manifold(X, tol=ORTHO_TOL):
    X = np.asarray(X)
    return X.ndim == 2 and X.shape[0] >= X.shape[1] >= 1 and orthogonality_error(X) <= tol


def tangent_dim(n, r):
    """Dimension of V(n, r): ``nr - r(r+1)/2``."""
    return n * r - r * (r + 1) // 2


def _check_pair(X, Z):
    if X.ndim != 2 or Z.shape != X.shape:
        raise DimensionError(f"expected matrices of shape {X.shape}, got {Z.shape}")


def normal_component(X, Z):
    """Orthogonal projection of ``Z`` onto the normal space at ``X``."""
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    _check_pair(X, Z)
    XtZ = X.T @ Z
    return 0.5 * X @ (XtZ + XtZ.T)


def project_to_tangent(X, Z):
    """Orthogonal projection of an ambient ``n x r`` matrix onto ``T_X V(n, r)``."""
    Z = np.asarray(Z, dtype=float)
    return Z - normal_component(X, Z)


def geodesic_step(X, V, t, check=True):
    """Follow the geodesic through ``X`` with initial velocity ``V`` for time ``t``.

    Uses the closed form
    ``[X(t), V(t)] = [X, V] expm(t [[A, -S], [I, A]]) blockdiag(expm(-tA), expm(-tA))``
    with ``A = X^T V`` and ``S = V^T V``.  Returns ``(X(t), V(t))``.
    """
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    _check_pair(X, V)
    if t < 0:
        raise DomainError("geodesic_step: t must be non-negative")
    if check:
        vnorm = np.linalg.norm(V)
        if tangency_error(X, V) > TANGENT_RTOL * max(vnorm, 1.0):
            raise PreconditionError("geodesic_step: V is not tangent at X")
    if t == 0:
        return X.copy(), V.copy()
    r = X.shape[1]
    A = X.T @ V
    S = V.T @ V
    block = np.empty((2 * r, 2 * r))
    block[:r, :r] = A
    block[:r, r:] = -S
    block[r:, :r] = np.eye(r)
    block[r:, r:] = A
    E = expm(t * block)
    F = expm(-t * A)
    XV = np.hstack((X, V)) @ E
    return XV[:, :r] @ F, XV[:, r:] @ F


def reorthonormalize(X, V=None):
    """Map ``X`` back onto the manifold by a sign-fixed thin QR.

    If ``V`` is given it is re-projected onto the tangent space at the new
    point.  Returns ``(X, V)``.
    """
    Q, R = np.linalg.qr(X)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    Q = Q * signs
    if V is not None:
        V = project_to_tangent(Q, V)
    return Q, V


def uniform_stiefel_sample(n, r, rng):
    """Draw from the uniform (Hausdorff / Haar) law on V(n, r)."""
    if not (n >= r >= 1):
        raise DimensionError(f"need n >= r >= 1, got n={n}, r={r}")
    G = rng.standard_normal((n, r))
    Q, _ = reorthonormalize(G)
    return Q


def sample_tangent_momentum(X, rng):
    """Isotropic Gaussian in the tangent space at ``X`` (projected ambient normal)."""
    return project_to_tangent(X, rng.standard_normal(X.shape))
