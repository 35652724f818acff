"""Crop encoding: stride-1 patches, whitening, sparse codes, quadrant sum pooling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import CROP_SIZE, PATCH_SIZE
from .patches import all_patches
from .sparse import OMP_RESIDUAL_TOL, kmeans_tri, lasso_lars, omp, polarity_split, soft_threshold
from .whitening import STANDARDIZE_STABILIZER, Whitener, apply_whitener, standardize

KINDS = ("SC", "mSC", "OMP", "mOMP", "ST", "KMeansTri")
DEFAULT_GRIDS = {
    "SC": (0.5, 1.0, 1.5, 2.0),
    "mSC": (1.0, 2.0, 3.0, 4.0),
    "OMP": (1, 5, 10, 15),
    "mOMP": (1, 5, 10, 15),
    "ST": (0.5, 1.0, 1.5, 2.0),
    "KMeansTri": (None,),
}
_ALIASES = {k.lower(): k for k in KINDS}
_ALIASES.update({"kmeans-tri": "KMeansTri", "kmeans_tri": "KMeansTri", "tri": "KMeansTri"})


def canonical_kind(kind):
    try:
        return _ALIASES[str(kind).lower()]
    except KeyError:
        raise ValueError(f"unknown encoder {kind!r}; choose from {KINDS}") from None


@dataclass(frozen=True)
class EncoderConfig:
    kind: str
    sparsity: Optional[float] = None

    def __post_init__(self):
        kind = canonical_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind == "KMeansTri":
            object.__setattr__(self, "sparsity", None)
        elif self.sparsity is None:
            raise ValueError(f"encoder {kind} needs a sparsity value")
        elif kind in ("OMP", "mOMP"):
            if int(self.sparsity) != self.sparsity or self.sparsity < 1:
                raise ValueError("OMP sparsity must be a positive integer")
            object.__setattr__(self, "sparsity", int(self.sparsity))
        else:
            object.__setattr__(self, "sparsity", float(self.sparsity))

    @property
    def polarity_split(self):
        return self.kind != "KMeansTri"

    @property
    def masked(self):
        return self.kind in ("mSC", "mOMP")

    def feature_dim(self, d):
        return 4 * (2 * d if self.polarity_split else d)

    def label(self):
        return self.kind if self.sparsity is None else f"{self.kind}({self.sparsity:g})"


def encode_patches(D, patches, masks, cfg: EncoderConfig, centroids=None):
    """Codes of whitened patch rows, polarity-split where the encoder calls for it.

    ``masks`` is the pre-whitening validity of each patch; it is only used by
    the masked encoders and to zero out fully masked patches.
    """
    D = np.asarray(D, dtype=float)
    X = np.atleast_2d(np.asarray(patches, dtype=float))
    M = np.atleast_2d(np.asarray(masks).astype(bool))
    N = len(X)
    d = D.shape[1]
    kind = cfg.kind
    if kind == "KMeansTri":
        if centroids is None:
            raise ValueError("KMeans-Tri coding needs the raw centroids")
        W = kmeans_tri(centroids, X)
    elif kind == "ST":
        W = soft_threshold(D, X, cfg.sparsity).weights
    elif kind == "OMP" and cfg.sparsity == 1:
        W = _omp1(D, X)
    else:
        W = np.zeros((N, d))
        live = np.flatnonzero(M.any(axis=1))
        for i in live:
            m = M[i] if cfg.masked else None
            if kind in ("SC", "mSC"):
                W[i] = lasso_lars(D, X[i], cfg.sparsity, mask=m).weights
            else:
                W[i] = omp(D, X[i], min(cfg.sparsity, d), mask=m).weights
    out = polarity_split(W) if cfg.polarity_split else W
    out[~M.any(axis=1)] = 0.0
    return out


def _omp1(D, X):
    """Vectorized single-atom OMP (unmasked)."""
    proj = X @ D
    k = np.argmax(np.abs(proj), axis=1)
    norms2 = np.einsum("ij,ij->j", D, D)
    W = np.zeros_like(proj)
    rows = np.arange(len(X))
    W[rows, k] = proj[rows, k] / norms2[k]
    tiny = np.linalg.norm(X, axis=1) < OMP_RESIDUAL_TOL
    W[tiny] = 0.0
    return W


def encode_patch(D, patch, mask, cfg: EncoderConfig, centroids=None):
    return encode_patches(D, patch[None, :], np.asarray(mask)[None, :], cfg, centroids)[0]


def quadrant_index(size=CROP_SIZE, patch=PATCH_SIZE):
    """Quadrant (0=TL, 1=TR, 2=BL, 3=BR) of every stride-1 patch, by its center."""
    g = size - patch + 1
    centers = np.arange(g) + (patch - 1) / 2.0
    top = centers < size / 2.0
    rows = np.where(top, 0, 2)[:, None]
    cols = np.where(centers < size / 2.0, 0, 1)[None, :]
    return (rows + cols).ravel()


class FeatureExtractor:
    """Maps 24x24x8 crops to pooled feature vectors for one dictionary/encoder."""

    def __init__(self, atoms, whitener: Optional[Whitener], cfg: EncoderConfig, centroids=None):
        self.atoms = np.asarray(atoms, dtype=float)
        self.whitener = whitener if whitener is not None else Whitener.identity(self.atoms.shape[0])
        self.cfg = cfg
        self.centroids = None if centroids is None else np.asarray(centroids, dtype=float)
        if cfg.kind == "KMeansTri" and self.centroids is None:
            raise ValueError("KMeans-Tri coding needs the raw centroids")
        self.quadrants = quadrant_index()
        # soft thresholding is linear up to the shrink, so whitening folds into the atoms
        self._st_atoms = self.whitener.transform @ self.atoms if cfg.kind == "ST" else None

    @property
    def dim(self):
        return self.cfg.feature_dim(self.atoms.shape[1])

    def patch_codes(self, data, mask):
        """Per-patch codes of a batch of crops, shape (B, 361, F/4)."""
        data = np.asarray(data, dtype=float)
        if data.ndim == 3:
            data = data[None]
            mask = np.asarray(mask)[None]
        mask = np.asarray(mask).astype(bool)
        B = len(data)
        if self.cfg.kind == "ST":
            proj, live = self._st_projection(data, mask)
            tau = self.cfg.sparsity
            W = proj if tau == 0 else np.sign(proj) * np.maximum(0.0, np.abs(proj) - tau)
            codes = polarity_split(W)
            codes[~live] = 0.0
            return codes
        P, M = all_patches(data, mask)
        P = P.reshape(-1, P.shape[-1])
        M = M.reshape(-1, M.shape[-1])
        Z = standardize(P, M)
        Xw = apply_whitener(self.whitener, Z)
        codes = encode_patches(self.atoms, Xw, M, self.cfg, self.centroids)
        return codes.reshape(B, -1, codes.shape[-1])

    def _st_projection(self, data, mask):
        """Whitened-patch projections ``(B, 361, d)`` without materializing standardized patches.

        Standardization is affine per channel block, so each block is scaled
        in place and the block means are subtracted through the column sums
        of the folded atoms; windows with partially valid blocks get the exact
        masked correction.
        """
        k = PATCH_SIZE
        A = self._st_atoms
        x = np.where(mask, data, 0.0)
        m = mask.astype(float)
        cnt0 = m.sum(axis=(1, 2), keepdims=True)
        # shift invariance: center per crop and channel to keep the variance well conditioned
        x = np.where(mask, x - x.sum(axis=(1, 2), keepdims=True) / np.maximum(cnt0, 1), 0.0)
        cnt = _box_sum(m, k)
        s1 = _box_sum(x, k)
        s2 = _box_sum(x * x, k)
        safe = np.maximum(cnt, 1.0)
        mean = s1 / safe
        var = np.maximum(s2 / safe - mean * mean, 0.0)
        inv_s = np.where(cnt >= 2, 1.0 / np.sqrt(var + STANDARDIZE_STABILIZER), 0.0)   # (B, g, g, 8)
        B, g = len(x), inv_s.shape[1]
        n_ch = x.shape[-1]
        xc = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
        win = sliding_window_view(xc, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)   # (B, g, g, 8, k, k)
        scaled = (win * inv_s[..., None, None]).reshape(B, g * g, n_ch * k * k)
        proj = scaled @ A
        shift = (inv_s * mean).reshape(B, g * g, n_ch)
        A_blocks = A.reshape(n_ch, k * k, -1)
        proj -= shift @ A_blocks.sum(axis=1)
        cnt = cnt.reshape(B, g * g, n_ch)
        partial = np.any((cnt > 1) & (cnt < k * k), axis=2)
        if partial.any():
            bi, pi = np.nonzero(partial)
            mw = sliding_window_view(m, (k, k), axis=(1, 2))[bi, pi // g, pi % g].reshape(len(bi), n_ch, k * k)
            # swap the all-valid column sums for the masked ones
            adj = ((mw - 1.0) * shift[bi, pi][..., None]).reshape(len(bi), -1)
            # one product per crop keeps results independent of batch composition
            for b in np.unique(bi):
                sel = bi == b
                proj[b, pi[sel]] -= adj[sel] @ A
        proj -= self.whitener.mean @ A
        return proj, cnt.sum(axis=2) > 0

    def pool(self, codes):
        """Quadrant sum pooling of (B, 361, F) codes into (B, 4F) features."""
        onehot = (self.quadrants[:, None] == np.arange(4)[None, :]).astype(float)
        return np.einsum("bpf,pq->bqf", codes, onehot).reshape(len(codes), -1)

    def _st_pooled(self, data, mask):
        proj, live = self._st_projection(data, mask)
        tau = self.cfg.sparsity
        mag = np.maximum(np.abs(proj) - tau, 0.0) * live[..., None]
        onehot = (self.quadrants[:, None] == np.arange(4)[None, :]).astype(float)
        pos = onehot.T @ np.where(proj > 0, mag, 0.0)       # (B, 4, d)
        neg = onehot.T @ np.where(proj < 0, mag, 0.0)
        return np.concatenate([pos, neg], axis=2).reshape(len(proj), -1)

    def transform(self, data, mask, chunk=64):
        data = np.asarray(data, dtype=float)
        mask = np.asarray(mask).astype(bool)
        if data.ndim == 3:
            return self.transform(data[None], mask[None], chunk)[0]
        step = self.pool if self.cfg.kind != "ST" else None
        out = np.empty((len(data), self.dim))
        for s in range(0, len(data), chunk):
            d, m = data[s:s + chunk], mask[s:s + chunk]
            out[s:s + chunk] = self._st_pooled(d, m) if step is None else step(self.patch_codes(d, m))
        return out

    def __call__(self, crop):
        return self.transform(crop.data, crop.mask)


def _box_sum(a, k):
    """Sums over every k x k window of the two image axes of ``(B, h, w, c)``."""
    c = np.cumsum(np.cumsum(a, axis=1), axis=2)
    c = np.pad(c, ((0, 0), (1, 0), (1, 0), (0, 0)))
    return c[:, k:, k:] - c[:, :-k, k:] - c[:, k:, :-k] + c[:, :-k, :-k]


def extract_features(crop, D, wh: Optional[Whitener], cfg: EncoderConfig, centroids=None):
    """Pooled feature vector of one crop: length 8d (split encoders) or 4d (KMeans-Tri)."""
    return FeatureExtractor(D, wh, cfg, centroids)(crop)
