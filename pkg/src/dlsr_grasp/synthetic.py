"""Seeded synthetic table-top RGBD scenes with planted graspable objects.

A camera looks down +z at a slightly tilted table; objects are raised
prisms (bars or discs) with their own colour. Positive rectangles straddle
the object across a graspable edge pair; negatives are drawn from the same
distribution a grid search explores and kept only if they fail the
rectangle metric against every positive.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .dataset import OBJECT_MAP_NAME, Scene, write_cloud, write_rectangles
from .geometry import GraspRect, rectangle_metric

FOCAL = 200.0
SHAPES = ("bar", "disc")


def _pixel_grid(H, W):
    rows, cols = np.mgrid[0:H, 0:W]
    return cols + 0.5, rows + 0.5


# object extents per preset: bar length, bar thickness, disc radius, center jitter
PRESETS = {
    "standard": {"length": (36, 56), "thick": (9, 13), "radius": (8, 12), "jitter": (12, 10)},
    "compact": {"length": (26, 34), "thick": (7, 10), "radius": (8, 11), "jitter": (12, 10)},
    "desk": {"length": (18, 22), "thick": (7, 9), "radius": (6, 8), "jitter": (3, 3)},
}


def _object(rng, kind, H, W, preset="standard"):
    p = PRESETS[preset]
    ox = W / 2 + rng.uniform(-p["jitter"][0], p["jitter"][0])
    oy = H / 2 + rng.uniform(-p["jitter"][1], p["jitter"][1])
    if kind == "bar":
        length = rng.uniform(*p["length"])
        thick = rng.uniform(*p["thick"])
        phi = rng.uniform(0, 180)
        return {"kind": "bar", "x": ox, "y": oy, "phi": phi, "length": length, "thick": thick}
    radius = rng.uniform(*p["radius"])
    return {"kind": "disc", "x": ox, "y": oy, "radius": radius}


def _object_mask(obj, X, Y):
    dx, dy = X - obj["x"], Y - obj["y"]
    if obj["kind"] == "bar":
        t = math.radians(obj["phi"])
        u = dx * math.cos(t) + dy * math.sin(t)
        v = -dx * math.sin(t) + dy * math.cos(t)
        return (np.abs(u) <= obj["length"] / 2) & (np.abs(v) <= obj["thick"] / 2)
    return dx * dx + dy * dy <= obj["radius"] ** 2


def _positives(rng, obj, n):
    out = []
    if obj["kind"] == "bar":
        t = math.radians(obj["phi"])
        half = obj["length"] / 2 - 5
        for s in np.linspace(-half, half, n):
            w = obj["thick"] + rng.uniform(8, 14)
            h = rng.uniform(8, 11)
            out.append(GraspRect(obj["x"] + s * math.cos(t), obj["y"] + s * math.sin(t),
                                 obj["phi"] + 90.0 + rng.uniform(-5, 5), w, h))
    else:
        for theta in np.linspace(0, 180, n, endpoint=False) + rng.uniform(0, 180 / n):
            out.append(GraspRect(obj["x"] + rng.uniform(-1.5, 1.5), obj["y"] + rng.uniform(-1.5, 1.5),
                                 theta, 2 * obj["radius"] + rng.uniform(8, 14), rng.uniform(8, 11)))
    return out


def _negatives(rng, obj, pos, n, H, W, box):
    x0, y0, x1, y1 = box
    out = []
    tries = 0
    while len(out) < n and tries < 200 * n:
        tries += 1
        mode = rng.uniform()
        if mode < 0.45:
            # anywhere the detector would look, at any grid size/orientation
            r = GraspRect(rng.uniform(x0, x1), rng.uniform(y0, y1), rng.uniform(0, 180),
                          rng.uniform(10, 90), rng.uniform(10, 90))
        else:
            p = pos[rng.integers(len(pos))]
            kind = rng.integers(4)
            if kind == 0:      # turned away from the graspable direction
                r = GraspRect(p.x, p.y, p.theta + rng.uniform(40, 140), p.w, p.h)
            elif kind == 1:    # shifted off the object
                t = math.radians(p.theta)
                off = rng.choice([-1, 1]) * rng.uniform(0.6, 1.5) * p.w
                r = GraspRect(p.x + off * math.cos(t), p.y + off * math.sin(t), p.theta, p.w, p.h)
            elif kind == 2:    # far too large
                k = rng.uniform(2.2, 4.0)
                r = GraspRect(p.x, p.y, p.theta, min(90, p.w * k), min(90, p.h * k))
            else:              # opening narrower than the object
                r = GraspRect(p.x, p.y, p.theta, rng.uniform(4, 0.5 * p.w), p.h)
        if not (0 <= r.x < W and 0 <= r.y < H) or r.w < 2:
            continue
        if rectangle_metric(r, pos):
            continue
        out.append(r)
    return out


def make_scene(seed, scene_id="syn0000", kind="bar", object_id=0, shape=(120, 160),
               n_pos=6, n_neg=10, holes=True, preset="standard") -> Scene:
    """One seeded scene; ``scene.truth`` describes the planted object."""
    rng = np.random.default_rng(seed)
    H, W = shape
    X, Y = _pixel_grid(H, W)
    obj = _object(rng, kind, H, W, preset)

    z_table = 700.0 + rng.uniform(-20, 20)
    tilt_x, tilt_y = rng.uniform(-0.05, 0.05, size=2)
    z = z_table + tilt_x * (X - W / 2) + tilt_y * (Y - H / 2)
    inside = _object_mask(obj, X, Y)
    height = rng.uniform(25, 40)
    z = np.where(inside, z - height, z) + rng.normal(0, 0.4, size=(H, W))

    base = np.array([150.0, 140.0, 120.0]) + rng.uniform(-15, 15, size=3)
    rgb = base + rng.normal(0, 5, size=(H, W, 3))
    color = rng.uniform(20, 235, size=3)
    while np.abs(color - base).sum() < 120:
        color = rng.uniform(20, 235, size=3)
    rgb = np.where(inside[..., None], color + rng.normal(0, 5, size=(H, W, 3)), rgb)
    rgb = np.clip(np.round(rgb), 0, 255).astype(np.uint8)

    cx, cy = W / 2, H / 2
    cloud = np.stack([(X - cx) * z / FOCAL, (Y - cy) * z / FOCAL, z], axis=-1)
    valid = np.ones((H, W), dtype=bool)
    if holes:
        for _ in range(rng.integers(1, 4)):
            hx, hy = rng.uniform(0, W), rng.uniform(0, H)
            rx, ry = rng.uniform(1, 3) * max(1.0, W / 80), rng.uniform(1, 3) * max(1.0, H / 60)
            valid &= ((X - hx) / rx) ** 2 + ((Y - hy) / ry) ** 2 > 1
        # structured-light shadows along object borders
        from scipy import ndimage
        edge = ndimage.binary_dilation(inside) & ~inside
        valid &= ~(edge & (rng.uniform(size=(H, W)) < 0.3))

    pos = _positives(rng, obj, n_pos)
    ys, xs = np.nonzero(inside)
    box = (max(0, xs.min() - 20), max(0, ys.min() - 20), min(W, xs.max() + 21), min(H, ys.max() + 21))
    neg = _negatives(rng, obj, pos, n_neg, H, W, box)
    scene = Scene(scene_id, rgb, np.where(valid[..., None], cloud, 0.0), valid, pos, neg, int(object_id))
    scene.truth = obj
    return scene


def make_dataset(n_scenes, seed, kinds=SHAPES, views_per_object=1, **kwargs):
    """``n_scenes`` scenes cycling through ``kinds``; consecutive views share an object id."""
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(n_scenes)
    scenes = []
    for i in range(n_scenes):
        kind = kinds[i % len(kinds)]
        scenes.append(make_scene(int(seeds[i]), f"syn{i:04d}", kind, i // views_per_object, **kwargs))
    return scenes


def write_dataset(scenes, out_dir):
    """Write scenes in the on-disk Cornell layout plus an object map."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, OBJECT_MAP_NAME), "w") as fh:
        for s in scenes:
            fh.write(f"{s.id}\t{s.object_id}\n")
    for s in scenes:
        Image.fromarray(s.rgb).save(os.path.join(out_dir, f"{s.id}r.png"))
        write_cloud(os.path.join(out_dir, f"{s.id}.txt"), s.cloud, s.valid)
        write_rectangles(os.path.join(out_dir, f"{s.id}cpos.txt"), s.pos_rects)
        write_rectangles(os.path.join(out_dir, f"{s.id}cneg.txt"), s.neg_rects)
