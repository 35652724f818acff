"""Eight-channel image derivation, grasp-rectangle crops and object regions.

Channel order is K, R, G, B, D, Nx, Ny, Nz. Every image carries a per-entry
validity mask of the same shape as its data, and invalid entries hold 0.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from . import CROP_SIZE, N_CHANNELS
from .errors import DegenerateRect, NoForeground
from .geometry import GraspRect

LUMA = np.array([0.299, 0.587, 0.114])
NORMAL_WINDOW = 5
NORMAL_MIN_SUPPORT = 6
# bilinear corners carrying less weight than this are ignored
_CORNER_EPS = 1e-9


@dataclass
class MultiChannelImage:
    data: np.ndarray           # (H, W, 8) float
    mask: np.ndarray           # (H, W, 8) bool
    points: Optional[np.ndarray] = None   # (H, W, 3) point map, for background removal
    point_valid: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass
class RectCrop:
    data: np.ndarray   # (24, 24, 8)
    mask: np.ndarray   # (24, 24, 8) bool


def estimate_normals(points, valid, window=NORMAL_WINDOW, min_support=NORMAL_MIN_SUPPORT):
    """Per-pixel surface normals from a total-least-squares plane fit.

    For each valid pixel the valid points of the surrounding ``window`` x
    ``window`` neighbourhood are fitted by a plane; the normal is the
    eigenvector of the smallest covariance eigenvalue, oriented so that
    ``Nz <= 0`` (towards a camera looking down +z). Pixels with fewer than
    ``min_support`` valid neighbours are reported invalid.

    Returns ``(normals, normal_valid)`` with shapes (H, W, 3) and (H, W).
    """
    P = np.asarray(points, dtype=float)
    V = np.asarray(valid).astype(bool) & np.all(np.isfinite(P), axis=2)
    H, W = V.shape
    normals = np.zeros((H, W, 3))
    if not V.any():
        return normals, np.zeros((H, W), dtype=bool)

    # global centering keeps the second moments well conditioned
    origin = P[V].mean(axis=0)
    Q = np.where(V[..., None], P - origin, 0.0)
    kernel = np.ones((window, window))

    def box(a):
        return ndimage.correlate(a, kernel, mode="constant", cval=0.0)

    cnt = box(V.astype(float))
    s = np.stack([box(Q[..., i]) for i in range(3)], axis=-1)
    pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    ss = {p: box(Q[..., p[0]] * Q[..., p[1]]) for p in pairs}

    ok = V & (cnt >= min_support)
    if not ok.any():
        return normals, ok
    n = cnt[ok]
    mean = s[ok] / n[:, None]
    cov = np.empty((len(n), 3, 3))
    for a, b in pairs:
        v = ss[(a, b)][ok] / n - mean[:, a] * mean[:, b]
        cov[:, a, b] = v
        cov[:, b, a] = v
    _, evecs = np.linalg.eigh(cov)
    nv = evecs[:, :, 0]
    nv = nv / np.linalg.norm(nv, axis=1, keepdims=True)
    nv[nv[:, 2] > 0] *= -1.0
    normals[ok] = nv
    return normals, ok


def derive_channels(scene) -> MultiChannelImage:
    """Build the K, R, G, B, D, Nx, Ny, Nz image of a scene.

    Color channels stay valid wherever the RGB image exists, including under
    depth holes; D is the z coordinate of the point map.
    """
    rgb = np.asarray(scene.rgb, dtype=float)
    H, W = rgb.shape[:2]
    cloud = np.asarray(scene.cloud, dtype=float)
    cvalid = np.asarray(scene.valid).astype(bool) & np.all(np.isfinite(cloud), axis=2)

    data = np.zeros((H, W, N_CHANNELS))
    mask = np.zeros((H, W, N_CHANNELS), dtype=bool)
    data[..., 0] = rgb @ LUMA
    data[..., 1:4] = rgb
    mask[..., 0:4] = True
    data[..., 4] = np.where(cvalid, cloud[..., 2], 0.0)
    mask[..., 4] = cvalid
    normals, nvalid = estimate_normals(cloud, cvalid)
    data[..., 5:8] = normals
    mask[..., 5:8] = nvalid[..., None]
    data[~mask] = 0.0
    return MultiChannelImage(data, mask, points=np.where(cvalid[..., None], cloud, 0.0), point_valid=cvalid)


def _crop_geometry(params, size=CROP_SIZE):
    """Image sample coordinates and canvas-inside flags for ``(B, 5)`` rectangle parameters."""
    params = np.asarray(params, dtype=float).reshape(-1, 5)
    B = len(params)
    x, y, th, w, h = params.T
    if np.any(np.round(w) < 1) or np.any(np.round(h) < 1):
        raise DegenerateRect("rectangle extent rounds below one pixel")
    s = size / np.maximum(w, h)
    off = np.arange(size) + 0.5 - size / 2.0
    # canvas offsets in pixels, per crop: du along columns, dv along rows
    du = np.broadcast_to(off[None, None, :], (B, size, size))
    dv = np.broadcast_to(off[None, :, None], (B, size, size))
    inside = ((np.abs(du) <= (s * w / 2.0)[:, None, None] + 1e-9)
              & (np.abs(dv) <= (s * h / 2.0)[:, None, None] + 1e-9))
    a = du / s[:, None, None]
    b = dv / s[:, None, None]
    t = np.radians(th)[:, None, None]
    c, sn = np.cos(t), np.sin(t)
    X = x[:, None, None] + c * a - sn * b
    Y = y[:, None, None] + sn * a + c * b
    return X, Y, inside


def extract_rect_crops(img: MultiChannelImage, rects, size=CROP_SIZE):
    """Batched :func:`extract_rect_crop`; returns ``(data, mask)`` of shape (B, 24, 24, 8).

    ``rects`` is a sequence of :class:`GraspRect` or a raw ``(B, 5)`` array of
    ``(x, y, theta, w, h)`` rows.
    """
    H, W = img.shape
    if len(rects) and isinstance(rects[0], GraspRect):
        rects = [r.as_tuple() for r in rects]
    X, Y, inside = _crop_geometry(rects, size)
    px = X - 0.5
    py = Y - 0.5
    c0 = np.floor(px).astype(np.int64)
    r0 = np.floor(py).astype(np.int64)
    fx = px - c0
    fy = py - r0

    B = len(X)
    # one gather table: values then validity as 0/1, indexed by flat pixel
    table = np.concatenate([img.data, img.mask.astype(float)], axis=2).reshape(H * W, 2 * N_CHANNELS)
    data = np.zeros((B, size, size, N_CHANNELS))
    valid = np.broadcast_to(inside[..., None], data.shape).copy()
    for dr, dc, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        rr = r0 + dr
        cc = c0 + dc
        used = wgt > _CORNER_EPS
        in_img = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        idx = np.clip(rr, 0, H - 1) * W + np.clip(cc, 0, W - 1)
        got = table[idx]
        ok = (got[..., N_CHANNELS:] > 0.5) & in_img[..., None]
        valid &= ~used[..., None] | ok
        data += np.where(used, wgt, 0.0)[..., None] * got[..., :N_CHANNELS]
    data[~valid] = 0.0
    return data, valid


def extract_rect_crop(img: MultiChannelImage, r: GraspRect, size=CROP_SIZE) -> RectCrop:
    """Rotate ``r`` upright, scale its longer side to 24 px and pad to 24x24.

    Output pixel ``(i, j)`` is sampled bilinearly from the image point it maps
    to in the rectangle frame; a sample is valid only if every contributing
    source pixel is valid. The padding left by aspect-ratio preservation is
    masked out on all channels.
    """
    H, W = img.shape
    if not (0 <= r.x < W and 0 <= r.y < H):
        raise ValueError(f"rectangle center ({r.x}, {r.y}) lies outside the {W}x{H} image")
    data, mask = extract_rect_crops(img, [r], size)
    return RectCrop(data[0], mask[0])


def fit_plane_ransac(P, threshold, iterations, rng, max_score_points=50000):
    """RANSAC plane ``(normal, offset)`` with ``normal . p = offset``.

    Hypotheses are scored on a seeded subsample of at most
    ``max_score_points`` points and the winner is refitted on all its inliers.
    """
    N = len(P)
    score_idx = np.arange(N)
    if N > max_score_points:
        score_idx = np.sort(rng.choice(N, max_score_points, replace=False))
    S = P[score_idx]
    tri = np.array([rng.choice(N, 3, replace=False) for _ in range(iterations)])
    p0, p1, p2 = P[tri[:, 0]], P[tri[:, 1]], P[tri[:, 2]]
    nrm = np.cross(p1 - p0, p2 - p0)
    length = np.linalg.norm(nrm, axis=1)
    good = length > 1e-12
    nrm[good] /= length[good, None]
    off = np.einsum("ij,ij->i", nrm, p0)
    best, best_count = -1, -1
    for start in range(0, iterations, 50):
        sl = slice(start, min(start + 50, iterations))
        dist = np.abs(S @ nrm[sl].T - off[sl])
        counts = (dist < threshold).sum(axis=0)
        counts[~good[sl]] = -1
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best, best_count = start + k, int(counts[k])
    if best < 0 or best_count <= 0:
        raise NoForeground("could not fit a support plane")
    inl = np.abs(P @ nrm[best] - off[best]) < threshold
    Q = P[inl]
    centroid = Q.mean(axis=0)
    cov = (Q - centroid).T @ (Q - centroid)
    _, evecs = np.linalg.eigh(cov)
    n = evecs[:, 0]
    return n, float(n @ centroid)


def object_region(img: MultiChannelImage, seed=0, threshold=8.0, iterations=500,
                  dilation=20, min_component=100, min_valid_fraction=0.2):
    """Bounding box ``(x0, y0, x1, y1)`` (half-open, pixels) around the object.

    A dominant support plane is found by RANSAC over the valid 3-D points;
    points farther than ``threshold`` from it are foreground. The tight box
    of the largest 8-connected foreground component is grown by ``dilation``
    pixels and clipped to the image.
    """
    H, W = img.shape
    if img.points is not None:
        P = img.points
        V = img.point_valid if img.point_valid is not None else img.mask[..., 4]
    else:
        rows, cols = np.mgrid[0:H, 0:W]
        P = np.stack([cols, rows, img.data[..., 4]], axis=-1).astype(float)
        V = img.mask[..., 4]
    V = np.asarray(V).astype(bool)
    if V.mean() < min_valid_fraction:
        raise NoForeground(f"only {V.mean():.1%} of pixels carry depth; cannot remove the background")
    rng = np.random.default_rng(seed)
    pts = P[V].astype(float)
    n, off = fit_plane_ransac(pts, threshold, iterations, rng)
    dist = np.abs(P @ n - off)
    fg = V & (dist > threshold)
    labels, count = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        raise NoForeground("no pixel departs from the support plane")
    sizes = np.bincount(labels.ravel())[1:]
    k = int(np.argmax(sizes))
    if sizes[k] < min_component:
        raise NoForeground(f"largest foreground component has {sizes[k]} px (< {min_component})")
    rr, cc = np.nonzero(labels == k + 1)
    x0 = max(0, int(cc.min()) - dilation)
    y0 = max(0, int(rr.min()) - dilation)
    x1 = min(W, int(cc.max()) + 1 + dilation)
    y1 = min(H, int(rr.max()) + 1 + dilation)
    return (x0, y0, x1, y1)


def dump_crop(crop: RectCrop, out_dir, scene_id, rect_index):
    """Write the 8 channel planes and the joint mask of a crop as PNGs."""
    from PIL import Image

    from . import CHANNEL_NAMES

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for c, name in enumerate(CHANNEL_NAMES):
        plane = crop.data[..., c]
        m = crop.mask[..., c]
        out = np.zeros(plane.shape, dtype=np.uint8)
        if m.any():
            lo, hi = plane[m].min(), plane[m].max()
            scale = 255.0 / (hi - lo) if hi > lo else 0.0
            out[m] = np.clip((plane[m] - lo) * scale, 0, 255).astype(np.uint8)
        path = os.path.join(out_dir, f"{scene_id}_{rect_index}_{name}.png")
        Image.fromarray(out).save(path)
        paths.append(path)
    path = os.path.join(out_dir, f"{scene_id}_{rect_index}_mask.png")
    Image.fromarray((crop.mask.all(axis=2) * 255).astype(np.uint8)).save(path)
    paths.append(path)
    return paths

