"""Sparse weight solvers over a fixed dictionary.

A dictionary is an ``(n, d)`` array whose columns are atoms. Masks are
length-``n`` 0/1 vectors; a masked solve is carried out on the rows with
``m == 1`` only, which is the same program as ``diag(m)`` weighting.

The lasso objective throughout is the unscaled ``||Dw - x||^2 + lam*||w||_1``,
so the stationarity condition reads ``|2 D^T (x - Dw)|_j <= lam``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

# step lengths below this are treated as zero on the LARS path
_PATH_EPS = 1e-12
# Gram matrices of the active set with a worse condition number are singular
_COND_LIMIT = 1e12
OMP_RESIDUAL_TOL = 1e-10


@dataclass
class SparseCode:
    weights: np.ndarray
    support: np.ndarray
    objective: float


def unit_columns(D, tol=1e-9):
    norms = np.linalg.norm(D, axis=0)
    return bool(np.all(np.abs(norms - 1.0) <= tol))


def _masked(D, x, mask):
    D = np.asarray(D, dtype=float)
    x = np.asarray(x, dtype=float)
    if D.ndim != 2 or x.shape != (D.shape[0],):
        raise ValueError(f"dictionary {D.shape} and signal {x.shape} do not agree")
    if mask is None:
        return D, x
    keep = np.asarray(mask).astype(bool)
    if keep.shape != x.shape:
        raise ValueError(f"mask shape {keep.shape} does not match signal {x.shape}")
    return D[keep], x[keep]


def lasso_objective(D, x, w, lam, mask=None):
    Dm, xm = _masked(D, x, mask)
    r = Dm @ w - xm
    return float(r @ r + lam * np.abs(w).sum())


def lasso_lars(D, x, lam, mask=None, max_iter=None) -> SparseCode:
    """Lasso weights by the LARS homotopy, stopped at penalty ``lam``.

    Follows the lasso modification of least angle regression: atoms join the
    active set when their correlation with the residual reaches the common
    active level, and leave it when their weight crosses zero. The path is
    followed down to the correlation level ``lam / 2``.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    Dm, xm = _masked(D, x, mask)
    n, d = Dm.shape
    w = np.zeros(d)
    target = lam / 2.0

    excluded = np.einsum("ij,ij->j", Dm, Dm) <= 1e-24
    c = Dm.T @ xm
    free = np.where(excluded, 0.0, np.abs(c))
    if d == 0 or free.max(initial=0.0) <= target:
        return SparseCode(w, np.zeros(0, dtype=int), float(xm @ xm))

    active = [int(np.argmax(free))]
    in_active = np.zeros(d, dtype=bool)
    in_active[active[0]] = True
    if max_iter is None:
        max_iter = 8 * d + 100

    for _ in range(max_iter):
        A = np.asarray(active)
        C = float(np.abs(c[A]).max())
        s = np.sign(c[A])
        DA = Dm[:, A]
        G = DA.T @ DA
        if np.linalg.cond(G) > _COND_LIMIT:
            # the newest atom made the active set rank deficient
            j = active.pop()
            in_active[j] = False
            excluded[j] = True
            log.debug("lasso_lars: skipping atom %d (singular active set)", j)
            if not active:
                free = np.where(excluded, 0.0, np.abs(c))
                if free.max(initial=0.0) <= target:
                    break
                active = [int(np.argmax(free))]
                in_active[active[0]] = True
            continue
        u = np.linalg.solve(G, s)
        a = Dm.T @ (DA @ u)

        step = C - target
        event = ("target", -1)

        cand = ~in_active & ~excluded
        if cand.any():
            idx = np.flatnonzero(cand)
            ci, ai = c[idx], a[idx]
            with np.errstate(divide="ignore", invalid="ignore"):
                g1 = np.where(1.0 - ai > _PATH_EPS, (C - ci) / (1.0 - ai), np.inf)
                g2 = np.where(1.0 + ai > _PATH_EPS, (C + ci) / (1.0 + ai), np.inf)
            g = np.minimum(g1, g2)
            g[g <= _PATH_EPS] = np.inf
            k = int(np.argmin(g))
            if g[k] < step:
                step = float(g[k])
                event = ("join", int(idx[k]))

        with np.errstate(divide="ignore", invalid="ignore"):
            gd = np.where(u != 0, -w[A] / u, np.inf)
        gd[gd <= _PATH_EPS] = np.inf
        k = int(np.argmin(gd))
        if gd[k] < step:
            step = float(gd[k])
            event = ("drop", int(A[k]))

        w[A] += step * u
        if event[0] == "target":
            break
        # exact correlations each step keep KKT residuals from drifting
        c = Dm.T @ (xm - Dm @ w)
        if event[0] == "drop":
            j = event[1]
            w[j] = 0.0
            active.remove(j)
            in_active[j] = False
            if not active:
                free = np.where(excluded, 0.0, np.abs(c))
                if free.max(initial=0.0) <= target:
                    break
                active = [int(np.argmax(free))]
                in_active[active[0]] = True
        else:
            j = event[1]
            active.append(j)
            in_active[j] = True
    else:
        log.warning("lasso_lars: iteration cap %d reached", max_iter)

    support = np.flatnonzero(w)
    r = Dm @ w - xm
    return SparseCode(w, support, float(r @ r + lam * np.abs(w).sum()))


def omp(D, x, gamma, mask=None, tol=OMP_RESIDUAL_TOL, trace=None) -> SparseCode:
    """Orthogonal matching pursuit with at most ``gamma`` atoms.

    Each step picks the atom most correlated (in absolute value) with the
    current residual, lowest index on ties, and refits least squares on the
    whole support. An atom that would make the support rank deficient is
    skipped. If ``trace`` is a list, residual norms are appended to it after
    every step.
    """
    Dm, xm = _masked(D, x, mask)
    n, d = Dm.shape
    if not 1 <= gamma <= d:
        raise ValueError(f"gamma must lie in [1, {d}], got {gamma}")
    w = np.zeros(d)
    support: list[int] = []
    blocked = np.zeros(d, dtype=bool)
    coef = np.zeros(0)
    r = xm.copy()
    if trace is not None:
        trace.append(float(np.linalg.norm(r)))

    while len(support) < gamma and np.linalg.norm(r) >= tol:
        corr = np.abs(Dm.T @ r)
        corr[blocked] = -1.0
        j = int(np.argmax(corr))
        if corr[j] <= 0.0:
            break
        trial = support + [j]
        sub = Dm[:, trial]
        sol, _, rank, _ = np.linalg.lstsq(sub, xm, rcond=1e-10)
        if rank < len(trial):
            log.debug("omp: skipping atom %d (singular support)", j)
            blocked[j] = True
            continue
        support = trial
        blocked[j] = True
        coef = sol
        r = xm - sub @ coef
        if trace is not None:
            trace.append(float(np.linalg.norm(r)))

    if support:
        w[support] = coef
    return SparseCode(w, np.flatnonzero(w), float(r @ r))


def soft_threshold(D, x, tau) -> SparseCode:
    """Marginal shrinkage ``sign(D_j.x) * max(0, |D_j.x| - tau)``.

    ``x`` may also be an ``(N, n)`` batch, in which case the returned weights
    are ``(N, d)`` and support/objective refer to the flattened array.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    proj = np.asarray(x, dtype=float) @ np.asarray(D, dtype=float)
    if tau == 0:
        w = proj
    else:
        w = np.sign(proj) * np.maximum(0.0, np.abs(proj) - tau)
    return SparseCode(w, np.flatnonzero(w), float("nan"))


def kmeans_tri(centroids, x):
    """Triangle activation against unnormalized centroids (columns).

    ``f_j = max(0, mean(z) - z_j)`` with ``z_j = ||x - c_j||``. Accepts a
    single vector or an ``(N, n)`` batch.
    """
    C = np.asarray(centroids, dtype=float)
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    d2 = (np.einsum("ij,ij->i", X, X)[:, None] - 2.0 * (X @ C)
          + np.einsum("ij,ij->j", C, C)[None, :])
    z = np.sqrt(np.maximum(d2, 0.0))
    f = np.maximum(0.0, z.mean(axis=1, keepdims=True) - z)
    return f[0] if single else f


def polarity_split(w):
    """``[max(w, 0), max(-w, 0)]`` along the last axis."""
    w = np.asarray(w, dtype=float)
    return np.concatenate([np.maximum(w, 0.0), np.maximum(-w, 0.0)], axis=-1)
