"""Per-patch channel standardization and ZCA whitening.

Patch vectors are channel-major: entry ``c*36 + row*6 + col`` holds channel
``c`` of the 6x6 window, so each channel is a contiguous block of 36.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import N_CHANNELS, PATCH_DIM
from .errors import TooFewPatches

STANDARDIZE_STABILIZER = 10.0
DEFAULT_EPSILON = 0.1


def standardize(patches, masks):
    """Standardize every channel block of every patch over its valid entries.

    Works on a single patch of length 288 or on an ``(N, 288)`` batch. Each
    block is centered and divided by ``sqrt(var + 10)``; blocks with fewer
    than two valid entries come out as zeros, and masked entries stay zero.
    """
    X = np.asarray(patches, dtype=float)
    M = np.asarray(masks).astype(bool)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    M = np.atleast_2d(M)
    N, n = X.shape
    block = n // N_CHANNELS
    Xb = np.where(M, X, 0.0).reshape(N, N_CHANNELS, block)
    Mb = M.reshape(N, N_CHANNELS, block)
    cnt = Mb.sum(axis=2, keepdims=True)
    safe = np.maximum(cnt, 1)
    mean = Xb.sum(axis=2, keepdims=True) / safe
    dev = np.where(Mb, Xb - mean, 0.0)
    var = (dev * dev).sum(axis=2, keepdims=True) / safe
    out = dev / np.sqrt(var + STANDARDIZE_STABILIZER)
    out = np.where(cnt >= 2, out, 0.0).reshape(N, n)
    return out[0] if single else out


@dataclass(frozen=True)
class Whitener:
    mean: np.ndarray
    transform: np.ndarray
    epsilon: float
    n_fit: int

    @classmethod
    def identity(cls, n=PATCH_DIM):
        return cls(np.zeros(n), np.eye(n), 0.0, 0)

    @property
    def is_identity(self):
        return self.n_fit == 0 and not self.mean.any() and np.array_equal(self.transform, np.eye(len(self.mean)))

    def apply(self, patches):
        return apply_whitener(self, patches)


def fit_whitener(patches, epsilon=DEFAULT_EPSILON) -> Whitener:
    """ZCA transform ``(Cov + eps*I)^(-1/2)`` of a standardized patch batch.

    The covariance is the biased (1/N) estimate. With ``epsilon == 0`` the
    batch covariance must be positive definite.
    """
    X = np.asarray(patches, dtype=float)
    N, n = X.shape
    if N < n:
        raise TooFewPatches(f"need at least {n} patches to fit a {n}-dim whitener, got {N}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / N
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    shifted = evals + epsilon
    if shifted.min() <= 1e-12 * max(shifted.max(), 1.0):
        raise TooFewPatches(
            "covariance is singular; use epsilon > 0 or a full-rank batch "
            f"(smallest eigenvalue {evals.min():.3g})")
    transform = (evecs * (1.0 / np.sqrt(shifted))) @ evecs.T
    transform = 0.5 * (transform + transform.T)
    return Whitener(mean, transform, float(epsilon), N)


def apply_whitener(wh: Whitener, patches):
    """``transform @ (patch - mean)`` for a patch or a batch of row patches."""
    X = np.asarray(patches, dtype=float)
    return (X - wh.mean) @ wh.transform
