"""``dlsr`` command line: preprocessing, dictionary learning, training and experiments.

Exit status is 0 on success, 1 for usage errors and 2 for data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import CHANNEL_NAMES, PATCH_SIZE, __version__
from .bundle import ArtifactBundle, canonical_json, load_bundle, save_bundle
from .dataset import DATA_ROOT_ENV, discover_scenes, load_dataset, load_scene
from .dictlearn import SIZE_SWEEP, DictLearnConfig, natural_encoder_for
from .errors import DLSRError
from .evaluation import (ExperimentConfig, GridSearchSpec, detect_best_grasp, fit_pipeline, fit_representation,
                         manifest, modal_hyperparams, prepare_scenes, recognition_cell, run_detection_eval,
                         run_recognition_cv, write_table)
from .features import DEFAULT_GRIDS, EncoderConfig, canonical_kind
from .geometry import rect_to_polygon
from .imageproc import derive_channels

log = logging.getLogger("dlsr_grasp")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers

def _data_root(args):
    root = args.data or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise UsageError(f"no dataset: pass --data or set {DATA_ROOT_ENV}")
    if not os.path.isdir(root):
        raise DLSRError(f"dataset directory {root!r} does not exist")
    return root


def _load(args, root=None):
    root = root or _data_root(args)
    scenes = load_dataset(root, jobs=args.jobs, limit=args.limit)
    if not scenes:
        raise DLSRError(f"no scenes found under {root!r}")
    return scenes


def _aux_images(args):
    """Derived images of the self-taught directory; ``None`` if unused or empty."""
    if not getattr(args, "self_taught", None):
        return None
    entries = discover_scenes(args.self_taught) if os.path.isdir(args.self_taught) else []
    if not entries:
        print(f"self-taught directory {args.self_taught!r} holds no scenes; running the standard protocol")
        return None
    aux = [derive_channels(load_scene(e["image"], e["cloud"], scene_id=e["id"])) for e in entries]
    print(f"self-taught: mixing patches from {len(aux)} auxiliary scenes")
    return aux


def _dict_cfg(args):
    lam = getattr(args, "lam", None)
    gamma = getattr(args, "gamma", None)
    try:
        return DictLearnConfig(args.dict, args.atoms, lam=lam, gamma=gamma, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _exp_cfg(args, encoder=None):
    enc = encoder if encoder is not None else args.encoder
    grid = None
    if getattr(args, "sparsity_grid", None):
        grid = tuple(float(v) for v in args.sparsity_grid.split(","))
    try:
        return ExperimentConfig(_dict_cfg(args), enc, grid, seed=args.seed, whitening=not args.no_whiten,
                                self_taught=bool(getattr(args, "self_taught", None)), n_patches=args.patches,
                                outer_folds=args.folds, inner_folds=args.folds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _encoder(kind, sparsity, dcfg):
    try:
        if kind == "natural":
            return natural_encoder_for(dcfg)
        kind = canonical_kind(kind)
        if sparsity is None:
            sparsity = DEFAULT_GRIDS[kind][0]
        return EncoderConfig(kind, sparsity)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ----------------------------------------------------------------- commands

def cmd_preprocess(args):
    scenes = _load(args)
    os.makedirs(args.out, exist_ok=True)
    for s in scenes:
        img = derive_channels(s)
        np.savez_compressed(os.path.join(args.out, f"{s.id}.npz"), data=img.data, mask=img.mask)
    print(f"preprocessed {len(scenes)} scenes into {args.out}")


def cmd_learn_dict(args):
    scenes = _load(args)
    cfg = _exp_cfg(args, encoder="natural")
    prepared = prepare_scenes(scenes, args.jobs)
    wh, D, _ = fit_representation(prepared, cfg, args.seed, _aux_images(args))
    b = ArtifactBundle(D, wh, natural_encoder_for(cfg.dict_cfg), None,
                       manifest("learn-dict", cfg, scenes))
    save_bundle(b, args.out)
    print(f"dictionary of {D.d} atoms ({cfg.dict_cfg.method}) written to {args.out}")


def cmd_train(args):
    scenes = _load(args)
    cfg = _exp_cfg(args, encoder="natural")
    enc = _encoder(args.encoder, args.sparsity, cfg.dict_cfg)
    prepared = prepare_scenes(scenes, args.jobs)
    pipe = fit_pipeline(prepared, cfg, enc, args.C, args.seed, _aux_images(args))
    b = ArtifactBundle(pipe.dictionary, pipe.whitener, enc, pipe.model,
                       manifest("train", cfg, scenes, encoder=enc.label(), C=float(args.C), hashes=pipe.hashes))
    save_bundle(b, args.out)
    print(f"model ({enc.label()}, C={args.C:g}) written to {args.out}")


def cmd_recognize_cv(args):
    scenes = _load(args)
    cfg = _exp_cfg(args)
    prepared = prepare_scenes(scenes, args.jobs)
    rep = run_recognition_cv(prepared, cfg, _aux_images(args))
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "recognition.json"), rep.to_dict())
    write_table(os.path.join(args.out, "recognition.tsv"), [rep.dict_method], [rep.encoder],
                {(rep.dict_method, rep.encoder): recognition_cell(rep)})
    sp, C = modal_hyperparams(rep)
    _write_json(os.path.join(args.out, "manifest.json"),
                manifest("recognize-cv", cfg, scenes, modal_sparsity=sp, modal_C=C))
    print(f"{rep.dict_method}/{rep.encoder}: {recognition_cell(rep)} (modal sparsity {sp}, C {C:g})")


def cmd_sweep(args):
    scenes = _load(args)
    prepared = prepare_scenes(scenes, args.jobs)
    sizes = [int(v) for v in args.sizes.split(",")]
    modes = {"on": [True], "off": [False], "both": [True, False]}[args.whitening]
    cells, rows = {}, []
    runs = []
    for d in sizes:
        rows.append(str(d))
        for w in modes:
            args.atoms, args.no_whiten = d, not w
            cfg = _exp_cfg(args)
            rep = run_recognition_cv(prepared, cfg)
            col = "whitened" if w else "unwhitened"
            cells[(str(d), col)] = recognition_cell(rep)
            runs.append(rep.to_dict())
            print(f"d={d} {col}: {recognition_cell(rep)}")
    os.makedirs(args.out, exist_ok=True)
    cols = ["whitened" if w else "unwhitened" for w in modes]
    write_table(os.path.join(args.out, "sweep.tsv"), rows, cols, cells)
    _write_json(os.path.join(args.out, "sweep.json"), runs)
    _write_json(os.path.join(args.out, "manifest.json"),
                manifest("sweep", None, scenes, sizes=sizes, whitening=args.whitening, dict=args.dict,
                         encoder=args.encoder, seed=args.seed, patches=args.patches, folds=args.folds))


def _find_scene(args):
    root = _data_root(args)
    for e in discover_scenes(root):
        if e["id"] == args.scene:
            return load_scene(e["image"], e["cloud"], e["pos"], e["neg"], e["object_id"], e["id"])
    raise DLSRError(f"scene {args.scene!r} not found under {root!r}")


def _draw_overlay(scene, rect, path):
    from PIL import Image, ImageDraw

    im = Image.fromarray(np.asarray(scene.rgb, dtype=np.uint8))
    draw = ImageDraw.Draw(im)
    pts = [tuple(p) for p in rect_to_polygon(rect)]
    for i in range(4):
        # plate edges (the short sides of the opening) in blue, the rest in red
        color = (0, 0, 255) if i % 2 else (255, 0, 0)
        draw.line([pts[i], pts[(i + 1) % 4]], fill=color, width=1)
    im.save(path)


def cmd_detect(args):
    b = load_bundle(args.model)
    if b.model is None:
        raise DLSRError(f"{args.model}: bundle has no trained model (run 'train' first)")
    scene = _find_scene(args)
    rect, score = detect_best_grasp(scene, b.model, b.extractor(), GridSearchSpec(), seed=args.seed, jobs=args.jobs)
    print("x\ty\ttheta\tw\th\tscore")
    print("\t".join(f"{v:g}" for v in rect.as_tuple()) + f"\t{score:.6g}")
    if args.overlay:
        _draw_overlay(scene, rect, args.overlay)


def cmd_detect_cv(args):
    scenes = _load(args)
    cfg = _exp_cfg(args)
    sparsity, C = args.sparsity, args.C
    if args.hyper_from:
        with open(args.hyper_from) as fh:
            sel = json.load(fh)["selections"]
        sparsity = sparsity if sparsity is not None else _mode_of([s for s, _ in sel])
        C = C if C is not None else _mode_of([c for _, c in sel])
    enc = _encoder(args.encoder, sparsity, cfg.dict_cfg)
    C = cfg.C_grid[0] if C is None else float(C)
    prepared = prepare_scenes(scenes, args.jobs)
    split = {"image": "image_wise", "object": "object_wise"}[args.split]
    aux = _aux_images(args)
    if aux is None and cfg.self_taught:
        cfg = ExperimentConfig(**{**cfg.__dict__, "self_taught": False})
    rep = run_detection_eval(prepared, cfg, split, enc, C, aux, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "detection.json"), rep.to_dict())
    col = "self-taught" if aux is not None else "standard"
    write_table(os.path.join(args.out, "detection.tsv"), [cfg.dict_cfg.method], [f"{enc.label()} {args.split}-wise {col}"],
                {(cfg.dict_cfg.method, f"{enc.label()} {args.split}-wise {col}"): f"{100 * rep.mean:.2f}"})
    _write_json(os.path.join(args.out, "manifest.json"),
                manifest("detect-cv", cfg, scenes, split=split, encoder_used=enc.label(), C=C,
                         self_taught_scenes=0 if aux is None else len(aux)))
    print(f"{cfg.dict_cfg.method}/{enc.label()} {split}: {100 * rep.mean:.2f}% "
          f"({rep.successes}/{len(rep.results)} scenes)")


def _mode_of(values):
    from .evaluation import modal_value
    return modal_value(values)


CHANNEL_GROUPS = {"K": [0], "RGB": [1, 2, 3], "D": [4], "N": [5, 6, 7]}


def atom_mosaic(atoms, channels, zoom=4, cols=None):
    """Tile atoms (columns of length 288) as 6x6 images of the given channels, uint8."""
    n, d = atoms.shape
    k = PATCH_SIZE
    cube = atoms.T.reshape(d, n // (k * k), k, k)[:, channels]        # (d, c, 6, 6)
    lo = cube.min(axis=(1, 2, 3), keepdims=True)
    hi = cube.max(axis=(1, 2, 3), keepdims=True)
    cube = (cube - lo) / np.where(hi > lo, hi - lo, 1.0)
    cols = cols or int(np.ceil(np.sqrt(d)))
    rows = int(np.ceil(d / cols))
    tile = k * zoom + 1
    out = np.zeros((rows * tile + 1, cols * tile + 1, len(channels)))
    for i in range(d):
        r, c = divmod(i, cols)
        img = np.kron(cube[i].transpose(1, 2, 0), np.ones((zoom, zoom, 1)))
        out[r * tile + 1:(r + 1) * tile, c * tile + 1:(c + 1) * tile] = img
    out = np.round(out * 255).astype(np.uint8)
    return out[..., 0] if len(channels) == 1 else out


def cmd_export_atoms(args):
    from PIL import Image

    b = load_bundle(args.model)
    os.makedirs(args.out, exist_ok=True)
    for name, chans in CHANNEL_GROUPS.items():
        path = os.path.join(args.out, f"atoms_{name}.png")
        Image.fromarray(atom_mosaic(b.dictionary.atoms, chans)).save(path)
    print(f"wrote {len(CHANNEL_GROUPS)} mosaics of {b.dictionary.d} atoms "
          f"({', '.join(CHANNEL_NAMES)}) to {args.out}")


def cmd_synth(args):
    from .synthetic import make_dataset, write_dataset

    kinds = tuple(args.kinds.split(","))
    shape = tuple(int(v) for v in args.shape.split("x"))[::-1]
    scenes = make_dataset(args.scenes, args.seed, kinds=kinds, views_per_object=args.views, shape=shape,
                          preset=args.preset, n_neg=args.negatives)
    write_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} synthetic scenes to {args.out}")


# ------------------------------------------------------------------- parser

def _common(p, data=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker cap for data-parallel stages")
    p.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        p.add_argument("--data", help=f"dataset root (default: ${DATA_ROOT_ENV})")
        p.add_argument("--limit", type=int, help="use only the first N scenes")


def _learning(p, encoder_default="natural"):
    p.add_argument("--dict", default="NKM", type=str.upper, help="SC, OMP, GSVQ, NKM, RP or R")
    p.add_argument("--atoms", type=int, default=300)
    p.add_argument("--lam", type=float, help="SC dictionary lambda")
    p.add_argument("--gamma", type=int, help="OMP dictionary gamma")
    p.add_argument("--encoder", default=encoder_default, help="natural, SC, mSC, OMP, mOMP, ST or KMeansTri")
    p.add_argument("--patches", type=int, default=100_000)
    p.add_argument("--no-whiten", action="store_true")
    p.add_argument("--folds", type=int, default=5)


def build_parser():
    ap = _Parser(prog="dlsr", description="Dictionary-learned sparse features for grasp recognition and detection")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("preprocess", help="derive 8-channel images and cache them")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("learn-dict", help="learn whitener and dictionary, write a bundle")
    _common(p)
    _learning(p)
    p.add_argument("--method", dest="dict", type=str.upper, help="alias of --dict")
    p.add_argument("--self-taught", help="directory of unlabeled scenes to mix patches from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_learn_dict)

    p = sub.add_parser("train", help="learn the representation and an SVM on all labeled rectangles")
    _common(p)
    _learning(p)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--self-taught")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recognize-cv", help="nested cross-validated recognition accuracy")
    _common(p)
    _learning(p)
    p.add_argument("--sparsity-grid", help="comma-separated override of the encoder grid")
    p.add_argument("--self-taught")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_recognize_cv)

    p = sub.add_parser("sweep", help="dictionary size / whitening ablation")
    _common(p)
    _learning(p)
    p.add_argument("--sizes", default=",".join(str(v) for v in SIZE_SWEEP))
    p.add_argument("--whitening", choices=("on", "off", "both"), default="both")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("detect", help="grid-search the best grasp in one scene")
    _common(p)
    p.add_argument("--scene", required=True, help="scene id (file stem)")
    p.add_argument("--model", required=True, help="trained bundle")
    p.add_argument("--overlay", help="write the RGB image with the detection drawn on it")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("detect-cv", help="cross-validated detection accuracy")
    _common(p)
    _learning(p, encoder_default="ST")
    p.add_argument("--split", choices=("image", "object"), default="image")
    p.add_argument("--sparsity", type=float)
    p.add_argument("--C", type=float)
    p.add_argument("--hyper-from", help="recognition.json whose modal selections fill unset --sparsity/--C")
    p.add_argument("--self-taught")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_detect_cv)

    p = sub.add_parser("export-atoms", help="write dictionary mosaics per channel group")
    _common(p, data=False)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_atoms)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset in the on-disk layout")
    _common(p, data=False)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=60)
    p.add_argument("--kinds", default="bar,disc")
    p.add_argument("--views", type=int, default=1, help="consecutive scenes per object id")
    p.add_argument("--shape", default="160x120", help="WxH")
    p.add_argument("--preset", choices=("standard", "compact", "desk"), default="standard")
    p.add_argument("--negatives", type=int, default=10)
    p.set_defaults(func=cmd_synth)
    return ap


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config`` so that explicit flags still win."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config) as fh:
            conf = json.load(fh)
    except (OSError, ValueError) as exc:
        raise DLSRError(f"cannot read config {args.config!r}: {exc}") from None
    if not isinstance(conf, dict):
        raise DLSRError(f"config {args.config!r} must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(k.replace("-", "_") for k in conf) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in conf.items()})
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dlsr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DLSRError, OSError) as exc:
        print(f"dlsr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
