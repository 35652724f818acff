"""Cornell-format scene ingestion, cross-validation splits and patch sampling.

A scene on disk is a group of files sharing a stem, e.g. for ``pcd0100``::

    pcd0100r.png       RGB image
    pcd0100.txt        point cloud, rows "x y z [...] index", index = row*W + col
    pcd0100cpos.txt    positive rectangles, 4 "x y" vertex lines each
    pcd0100cneg.txt    negative rectangles

Object labels come from a tab-separated ``objects.tsv`` (``stem<TAB>object_id``)
somewhere under the dataset root.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import PATCH_SIZE
from .errors import DimensionMismatch, NotARectangle, ParseError, TooFewObjects
from .geometry import GraspRect, polygon_to_rect
from .patches import flatten_windows

log = logging.getLogger(__name__)

OBJECT_MAP_NAME = "objects.tsv"
DATA_ROOT_ENV = "DLSR_DATA_ROOT"
_IMAGE_RE = re.compile(r"^(?P<stem>.+)r\.png$")


@dataclass
class Scene:
    id: str
    rgb: np.ndarray                 # (H, W, 3) uint8
    cloud: np.ndarray               # (H, W, 3) float
    valid: np.ndarray               # (H, W) bool
    pos_rects: List[GraspRect] = field(default_factory=list)
    neg_rects: List[GraspRect] = field(default_factory=list)
    object_id: int = 0
    dropped: int = 0

    def __post_init__(self):
        if self.rgb.shape[:2] != self.cloud.shape[:2] or self.valid.shape != self.rgb.shape[:2]:
            raise DimensionMismatch(
                f"scene {self.id}: rgb {self.rgb.shape[:2]} vs cloud {self.cloud.shape[:2]}")

    @property
    def shape(self):
        return self.rgb.shape[:2]


@dataclass
class SplitPlan:
    mode: str
    folds: List[List[str]]
    seed: int

    def train_test(self, i):
        test = list(self.folds[i])
        train = [s for j, f in enumerate(self.folds) if j != i for s in f]
        return sorted(train), sorted(test)


@dataclass
class PatchBatch:
    patches: np.ndarray   # (N, 288)
    masks: np.ndarray     # (N, 288) bool
    sources: np.ndarray   # (N,) str

    def __len__(self):
        return len(self.patches)


def read_rectangles(path, shape=None):
    """Parse a vertex file into rectangles.

    Returns ``(rects, dropped)``; rectangles with non-finite vertices, that
    are not rectangles within tolerance, or whose centers fall outside an
    image of ``shape`` are dropped and counted.
    """
    verts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ParseError(f"expected 'x y', got {line.strip()!r}", path, lineno)
            try:
                verts.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise ParseError(f"non-numeric vertex {line.strip()!r}", path, lineno) from None
    if len(verts) % 4:
        raise ParseError(f"{len(verts)} vertex lines is not a multiple of 4", path)
    rects, dropped = [], 0
    for i in range(0, len(verts), 4):
        quad = np.array(verts[i:i + 4])
        if not np.all(np.isfinite(quad)):
            dropped += 1
            continue
        try:
            r = polygon_to_rect(quad)
        except NotARectangle as exc:
            log.warning("%s: rectangle %d dropped (%s)", path, i // 4, exc)
            dropped += 1
            continue
        if shape is not None and not (0 <= r.x < shape[1] and 0 <= r.y < shape[0]):
            dropped += 1
            continue
        rects.append(r)
    return rects, dropped


def write_rectangles(path, rects):
    from .geometry import rect_to_polygon

    with open(path, "w") as fh:
        for r in rects:
            for x, y in rect_to_polygon(r):
                fh.write(f"{x:.6f} {y:.6f}\n")


def read_cloud(path, shape):
    """Point map ``(cloud, valid)`` from a text cloud file.

    Header lines (anything not starting with a number) are skipped. Each data
    row holds x, y, z first and the pixel index last; pixels not listed, or
    listed with non-finite coordinates, are invalid.
    """
    H, W = shape
    cloud = np.zeros((H, W, 3))
    valid = np.zeros(H * W, dtype=bool)
    flat = cloud.reshape(-1, 3)
    in_data = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if not in_data:
                head = parts[0]
                if head[0].isalpha() or head[0] == "#":
                    continue
                in_data = True
            if len(parts) < 4:
                raise ParseError(f"expected 'x y z ... index', got {line.strip()!r}", path, lineno)
            try:
                x, y, z = (float(v) for v in parts[:3])
                idx = int(float(parts[-1]))
            except ValueError:
                raise ParseError(f"malformed cloud row {line.strip()!r}", path, lineno) from None
            if not 0 <= idx < H * W:
                raise DimensionMismatch(f"{path}:{lineno}: pixel index {idx} outside a {W}x{H} image")
            if np.isfinite(x) and np.isfinite(y) and np.isfinite(z):
                flat[idx] = (x, y, z)
                valid[idx] = True
    return cloud, valid.reshape(H, W)


def write_cloud(path, cloud, valid):
    H, W = valid.shape
    with open(path, "w") as fh:
        fh.write("# x y z index\n")
        for idx in np.flatnonzero(valid.ravel()):
            x, y, z = cloud.reshape(-1, 3)[idx]
            fh.write(f"{x:.4f} {y:.4f} {z:.4f} {idx}\n")


def load_scene(image_path, cloud_path, pos_path=None, neg_path=None, object_id=0, scene_id=None) -> Scene:
    from PIL import Image

    with Image.open(image_path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    shape = rgb.shape[:2]
    cloud, valid = read_cloud(cloud_path, shape)
    pos, neg, dropped = [], [], 0
    if pos_path and os.path.exists(pos_path):
        pos, k = read_rectangles(pos_path, shape)
        dropped += k
    if neg_path and os.path.exists(neg_path):
        neg, k = read_rectangles(neg_path, shape)
        dropped += k
    if scene_id is None:
        scene_id = os.path.basename(image_path)[:-len("r.png")]
    if dropped:
        log.warning("scene %s: dropped %d unusable rectangles", scene_id, dropped)
    return Scene(scene_id, rgb, cloud, valid, pos, neg, int(object_id), dropped)


def read_object_map(path):
    mapping = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise ParseError("expected 'stem<TAB>object_id'", path, lineno)
            try:
                mapping[parts[0].strip()] = int(parts[1])
            except ValueError:
                raise ParseError(f"bad object id {parts[1]!r}", path, lineno) from None
    return mapping


def discover_scenes(root):
    """Scene file groups under ``root``, sorted by stem.

    Returns a list of dicts with keys ``id``, ``image``, ``cloud``, ``pos``,
    ``neg`` and ``object_id``. Scenes missing from the object map get their
    own object id.
    """
    found = []
    mapping = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        if OBJECT_MAP_NAME in filenames:
            mapping.update(read_object_map(os.path.join(dirpath, OBJECT_MAP_NAME)))
        for name in sorted(filenames):
            m = _IMAGE_RE.match(name)
            if not m:
                continue
            stem = m.group("stem")
            cloud = os.path.join(dirpath, stem + ".txt")
            if not os.path.exists(cloud):
                continue
            found.append({
                "id": stem,
                "image": os.path.join(dirpath, name),
                "cloud": cloud,
                "pos": os.path.join(dirpath, stem + "cpos.txt"),
                "neg": os.path.join(dirpath, stem + "cneg.txt"),
            })
    found.sort(key=lambda e: e["id"])
    next_id = max(mapping.values(), default=-1) + 1
    for e in found:
        if e["id"] in mapping:
            e["object_id"] = mapping[e["id"]]
        else:
            e["object_id"] = next_id
            next_id += 1
    return found


def load_dataset(root, jobs=1, limit=None) -> List[Scene]:
    entries = discover_scenes(root)
    if limit is not None:
        entries = entries[:limit]

    def load(e):
        return load_scene(e["image"], e["cloud"], e["pos"], e["neg"], e["object_id"], e["id"])

    if jobs > 1 and len(entries) > 1:
        from joblib import Parallel, delayed
        return Parallel(n_jobs=jobs)(delayed(load)(e) for e in entries)
    return [load(e) for e in entries]


def make_splits(scenes: Sequence, mode, k, seed) -> SplitPlan:
    """Partition scene ids into ``k`` folds, by image or by whole object."""
    if k < 2:
        raise ValueError("need at least two folds")
    ids = sorted(s.id for s in scenes)
    if len(set(ids)) != len(ids):
        raise ValueError("scene ids must be unique")
    rng = np.random.default_rng(seed)
    if mode == "image_wise":
        if len(ids) < k:
            raise ValueError(f"{len(ids)} scenes cannot fill {k} folds")
        order = rng.permutation(len(ids))
        folds = [sorted(ids[i] for i in chunk) for chunk in np.array_split(order, k)]
    elif mode == "object_wise":
        by_object = {}
        for s in scenes:
            by_object.setdefault(s.object_id, []).append(s.id)
        objects = sorted(by_object)
        if len(objects) < k:
            raise TooFewObjects(f"{len(objects)} distinct objects cannot fill {k} folds")
        order = rng.permutation(len(objects))
        folds = [sorted(sid for i in chunk for sid in by_object[objects[i]])
                 for chunk in np.array_split(order, k)]
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return SplitPlan(mode, folds, int(seed))


def sample_patches(images: Sequence, count, seed, aux_sources: Optional[Sequence] = None,
                   size=PATCH_SIZE, tag="main", aux_tag="aux") -> PatchBatch:
    """Draw random 6x6x8 patches from 8-channel images.

    ``images`` holds anything with ``data``/``mask`` arrays of shape
    (h, w, 8): whole images or rectangle crops. Each draw picks an image
    uniformly, then a top-left corner uniformly among the valid ones: the
    window fits and holds at least one unmasked entry. With ``aux_sources``
    an equal number of patches is drawn from them and appended.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    if not images:
        raise ValueError("no images to sample patches from")
    rng = np.random.default_rng(seed)
    P, M = _draw(images, count, rng, size)
    src = np.full(count, tag, dtype=object)
    if aux_sources:
        Pa, Ma = _draw(aux_sources, count, rng, size)
        P = np.concatenate([P, Pa])
        M = np.concatenate([M, Ma])
        src = np.concatenate([src, np.full(count, aux_tag, dtype=object)])
    return PatchBatch(P, M, src)


def valid_locations(mask, size=PATCH_SIZE):
    """Flat indices of top-left corners whose window holds any valid entry."""
    from numpy.lib.stride_tricks import sliding_window_view

    any_valid = np.asarray(mask).any(axis=2)
    if any_valid.shape[0] < size or any_valid.shape[1] < size:
        return np.zeros(0, dtype=int), any_valid.shape[1] - size + 1
    win = sliding_window_view(any_valid, (size, size)).any(axis=(-1, -2))
    return np.flatnonzero(win.ravel()), win.shape[1]


def _draw(images, count, rng, size):
    locs = [valid_locations(im.mask, size) for im in images]
    usable = np.array([i for i, (idx, _) in enumerate(locs) if len(idx)])
    if len(usable) == 0:
        raise ValueError("no image has a patch location with valid entries")
    which = usable[rng.integers(len(usable), size=count)]
    P = np.empty((count, size * size * 8))
    M = np.empty((count, size * size * 8), dtype=bool)
    for i in np.unique(which):
        sel = np.flatnonzero(which == i)
        data, mask = images[i].data, images[i].mask
        idx, gw = locs[i]
        pick = idx[rng.integers(len(idx), size=len(sel))]
        r, c = pick // gw, pick % gw
        rows = r[:, None, None] + np.arange(size)[None, :, None]
        cols = c[:, None, None] + np.arange(size)[None, None, :]
        win = data[rows, cols]
        wm = mask[rows, cols]
        P[sel] = flatten_windows(np.where(wm, win, 0.0))
        M[sel] = flatten_windows(wm)
    return P, M
