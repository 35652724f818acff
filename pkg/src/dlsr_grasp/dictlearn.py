"""Dictionary learners: SC, OMP, GSVQ, NKM, RP and R.

All learners take an ``(N, n)`` array of (whitened) patch rows and return a
:class:`LearnedDictionary` whose ``atoms`` is ``(n, d)`` with unit columns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InsufficientPatches
from .sparse import lasso_lars, omp

log = logging.getLogger(__name__)

METHODS = ("SC", "OMP", "GSVQ", "NKM", "RP", "R")
SC_LAMBDA_GRID = (0.5, 1.0, 1.5, 2.0)
OMP_GAMMA_GRID = (1, 5, 10, 15)
DEFAULT_ATOMS = 300
SIZE_SWEEP = (50, 100, 200, 300, 400, 600)


@dataclass(frozen=True)
class DictLearnConfig:
    method: str = "NKM"
    d: int = DEFAULT_ATOMS
    lam: Optional[float] = None
    gamma: Optional[int] = None
    epochs: int = 10
    minibatch: int = 256
    seed: int = 0
    max_iter: int = 100       # GSVQ / NKM iteration cap
    strict_grid: bool = True

    def __post_init__(self):
        method = self.method.upper()
        object.__setattr__(self, "method", method)
        if method not in METHODS:
            raise ValueError(f"unknown dictionary method {self.method!r}; choose from {METHODS}")
        if self.d < 1:
            raise ValueError("need at least one atom")
        if method == "SC":
            if self.lam is None:
                object.__setattr__(self, "lam", 1.0)
            if self.strict_grid and self.lam not in SC_LAMBDA_GRID:
                raise ValueError(f"SC lambda must be one of {SC_LAMBDA_GRID}")
        if method == "OMP":
            if self.gamma is None:
                object.__setattr__(self, "gamma", 5)
            if self.strict_grid and self.gamma not in OMP_GAMMA_GRID:
                raise ValueError(f"OMP gamma must be one of {OMP_GAMMA_GRID}")

    @property
    def sparsity(self):
        return {"SC": self.lam, "OMP": self.gamma}.get(self.method)


@dataclass
class LearnedDictionary:
    atoms: np.ndarray                      # (n, d), unit columns
    centroids: Optional[np.ndarray] = None  # (n, d) raw KMeans centroids (NKM only)
    history: list = field(default_factory=list)

    @property
    def n(self):
        return self.atoms.shape[0]

    @property
    def d(self):
        return self.atoms.shape[1]


def normalize_columns(D):
    D = np.array(D, dtype=float)
    norms = np.linalg.norm(D, axis=0)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero atom")
    return D / norms


def learn_dictionary(X, cfg: DictLearnConfig, track_objective=False) -> LearnedDictionary:
    """Learn a dictionary from patch rows (or a PatchBatch) with ``cfg.method``."""
    X = np.asarray(getattr(X, "patches", X), dtype=float)
    m = cfg.method
    if m == "R":
        return random_dictionary(X.shape[1], cfg.d, cfg.seed)
    if len(X) == 0:
        raise InsufficientPatches("empty patch batch")
    if m == "RP":
        return random_patches(X, cfg.d, cfg.seed)
    if m == "NKM":
        return normalized_kmeans(X, cfg.d, cfg.seed, cfg.max_iter)
    if m == "GSVQ":
        return gsvq(X, cfg.d, cfg.seed, cfg.max_iter)
    return odl(X, cfg, track_objective)


def random_dictionary(n, d, seed) -> LearnedDictionary:
    """Columns drawn from U([0, 1]^n), normalized."""
    rng = np.random.default_rng(seed)
    return LearnedDictionary(normalize_columns(rng.uniform(0.0, 1.0, size=(d, n)).T))


def random_patches(X, d, seed) -> LearnedDictionary:
    """``d`` distinct nonzero patches sampled uniformly, normalized."""
    nz = np.flatnonzero(np.linalg.norm(X, axis=1) > 0)
    if len(nz) < d:
        raise InsufficientPatches(f"need {d} nonzero patches, have {len(nz)}")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(nz, size=d, replace=False))
    return LearnedDictionary(normalize_columns(X[pick].T))


def _sq_dists(X, C, xx=None):
    if xx is None:
        xx = np.einsum("ij,ij->i", X, X)
    return np.maximum(xx[:, None] - 2.0 * (X @ C.T) + np.einsum("ij,ij->i", C, C)[None, :], 0.0)


def kmeans_pp(X, k, rng):
    """k-means++ seeding; returns ``(k, n)`` initial centers."""
    N = len(X)
    xx = np.einsum("ij,ij->i", X, X)
    centers = [X[rng.integers(N)]]
    closest = _sq_dists(X, centers[0][None, :], xx)[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(N))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.uniform(0, total)))
            idx = min(idx, N - 1)
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dists(X, X[idx][None, :], xx)[:, 0])
    return np.array(centers)


def kmeans(X, k, seed, max_iter=100):
    """Lloyd's algorithm from k-means++ seeds.

    Returns ``(centers (k, n), labels, inertia_history)``. Empty clusters are
    moved onto the point currently worst served by its center.
    """
    N = len(X)
    if N < k:
        raise InsufficientPatches(f"need at least {k} patches for {k} clusters, have {N}")
    rng = np.random.default_rng(seed)
    C = kmeans_pp(X, k, rng)
    xx = np.einsum("ij,ij->i", X, X)
    labels = None
    history = []
    for it in range(max_iter):
        new = np.argmin(_sq_dists(X, C, xx), axis=1)
        diff = X - C[new]
        history.append(float(np.einsum("ij,ij->", diff, diff)))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        for j in np.flatnonzero(counts == 0):
            err = np.einsum("ij,ij->i", X - C[labels], X - C[labels])
            far = int(np.argmax(err))
            C[j] = X[far]
            labels[far] = j
            counts = np.bincount(labels, minlength=k)
            sums = np.zeros_like(C)
            np.add.at(sums, labels, X)
        live = counts > 0
        C[live] = sums[live] / counts[live, None]
    return C, labels, history


def normalized_kmeans(X, d, seed, max_iter=100) -> LearnedDictionary:
    """KMeans centroids as atoms; the raw centroids are kept for KMeans-Tri."""
    C, _, hist = kmeans(X, d, seed, max_iter)
    directions = C.copy()
    zero = np.linalg.norm(directions, axis=1) == 0
    if zero.any():
        # a centroid at the origin has no direction; borrow the largest patch
        directions[zero] = X[int(np.argmax(np.linalg.norm(X, axis=1)))]
    return LearnedDictionary(normalize_columns(directions.T), centroids=np.array(C.T), history=hist)


def gsvq_assign(D, X):
    """Index of the most correlated atom and its weight, per patch row."""
    proj = X @ D
    k = np.argmax(np.abs(proj), axis=1)
    return k, proj[np.arange(len(X)), k]


def gsvq_step(D, X):
    """One assignment + update sweep; returns ``(new D, error)``.

    Each atom becomes the dominant eigenvector of the scatter of the patches
    assigned to it, signed to agree with its previous direction. Atoms left
    without patches take the worst-reconstructed patch.
    """
    k, g = gsvq_assign(D, X)
    R = X - g[:, None] * D[:, k].T
    err_each = np.einsum("ij,ij->i", R, R)
    D_new = D.copy()
    used_for_dead = set()
    order = np.argsort(-err_each, kind="stable")
    for j in range(D.shape[1]):
        sel = np.flatnonzero(k == j)
        if len(sel) == 0 or not np.any(X[sel]):
            cand = next((i for i in order if i not in used_for_dead and err_each[i] > 0), None)
            if cand is None:
                continue
            used_for_dead.add(cand)
            D_new[:, j] = X[cand] / np.linalg.norm(X[cand])
            continue
        Xs = X[sel]
        S = Xs.T @ Xs
        _, evecs = np.linalg.eigh(S)
        v = evecs[:, -1]
        if v @ D[:, j] < 0:
            v = -v
        D_new[:, j] = v / np.linalg.norm(v)
    return D_new, float(err_each.sum())


def gsvq(X, d, seed, max_iter=100, tol=1e-10) -> LearnedDictionary:
    """Gain-shape vector quantization dictionary.

    Starts from ``d`` randomly chosen patches and alternates the one-atom
    assignment with per-atom direction updates until atoms stop moving.
    """
    start = random_patches(X, d, seed).atoms
    D = start
    history = []
    for _ in range(max_iter):
        D_new, err = gsvq_step(D, X)
        history.append(err)
        moved = float(np.abs(D_new - D).max())
        D = D_new
        if moved < tol:
            break
    return LearnedDictionary(D, history=history)


def _code(D, X, cfg):
    W = np.zeros((len(X), D.shape[1]))
    if cfg.method == "SC":
        for i, x in enumerate(X):
            W[i] = lasso_lars(D, x, cfg.lam).weights
    else:
        g = min(cfg.gamma, D.shape[1])
        for i, x in enumerate(X):
            W[i] = omp(D, x, g).weights
    return W


def sc_objective(D, X, W, lam):
    R = W @ D.T - X
    return float(np.einsum("ij,ij->", R, R) + lam * np.abs(W).sum())


def _update_dictionary(D, A, B, X_batch, W_batch, sweeps=1):
    """Block-coordinate update on the unit sphere.

    Minimizing ``tr(D^T D A) - 2 tr(D^T B)`` over column ``j`` with
    ``||d_j|| = 1`` has the closed form ``v / ||v||`` where
    ``v = b_j - D a_j + A_jj d_j``.
    """
    D = D.copy()
    d = D.shape[1]
    for _ in range(sweeps):
        for j in range(d):
            if A[j, j] <= 1e-12:
                continue
            v = B[:, j] - D @ A[:, j] + A[j, j] * D[:, j]
            nv = np.linalg.norm(v)
            if nv > 1e-12:
                D[:, j] = v / nv
    dead = np.flatnonzero(np.diag(A) <= 1e-12)
    if len(dead) and len(X_batch):
        R = X_batch - W_batch @ D.T
        order = np.argsort(-np.einsum("ij,ij->i", R, R), kind="stable")
        for j, i in zip(dead, order):
            if np.any(X_batch[i]):
                D[:, j] = X_batch[i] / np.linalg.norm(X_batch[i])
    return D


def odl(X, cfg: DictLearnConfig, track_objective=False) -> LearnedDictionary:
    """Online dictionary learning with sufficient statistics.

    Within an epoch the patches are visited in a seeded random order, in
    minibatches; after each minibatch the accumulated statistics
    ``A = sum w w^T`` and ``B = sum x w^T`` drive a block-coordinate pass
    over the atoms. Statistics restart every epoch. When the minibatch
    covers the whole batch this is exact alternating minimization, and the
    objective recorded in ``history`` cannot increase.
    """
    N, n = X.shape
    rng = np.random.default_rng(cfg.seed)
    D = random_patches(X, cfg.d, cfg.seed).atoms if N >= cfg.d else random_dictionary(n, cfg.d, cfg.seed).atoms
    mb = max(1, min(cfg.minibatch, N))
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(N) if mb < N else np.arange(N)
        A = np.zeros((cfg.d, cfg.d))
        B = np.zeros((n, cfg.d))
        for start in range(0, N, mb):
            idx = order[start:start + mb]
            Xb = X[idx]
            Wb = _code(D, Xb, cfg)
            A += Wb.T @ Wb
            B += Xb.T @ Wb
            D = _update_dictionary(D, A, B, Xb, Wb)
        if track_objective and cfg.method == "SC":
            W = _code(D, X, cfg)
            history.append(sc_objective(D, X, W, cfg.lam))
        log.debug("odl epoch %d done", epoch)
    return LearnedDictionary(D, history=history)


def natural_encoder_for(cfg: DictLearnConfig):
    """The encoder that solves for weights the way the learner did."""
    from .features import EncoderConfig

    return {
        "SC": lambda: EncoderConfig("SC", cfg.lam),
        "OMP": lambda: EncoderConfig("OMP", cfg.gamma),
        "GSVQ": lambda: EncoderConfig("OMP", 1),
        "NKM": lambda: EncoderConfig("KMeansTri"),
        "RP": lambda: EncoderConfig("ST", 0.0),
        "R": lambda: EncoderConfig("ST", 0.0),
    }[cfg.method]()
