"""Nested cross-validated recognition, grid-search detection and detection CV."""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from . import __version__
from .dataset import Scene, make_splits, sample_patches
from .dictlearn import DictLearnConfig, LearnedDictionary, learn_dictionary, natural_encoder_for
from .errors import NoCandidates, NoForeground
from .features import DEFAULT_GRIDS, EncoderConfig, FeatureExtractor, canonical_kind
from .geometry import GraspRect, rectangle_metric
from .imageproc import MultiChannelImage, RectCrop, derive_channels, extract_rect_crops, object_region
from .model import C_GRID, LinearModel, accuracy, decision_values, train_svm
from .whitening import DEFAULT_EPSILON, Whitener, apply_whitener, fit_whitener, standardize

log = logging.getLogger(__name__)

DEFAULT_PATCHES = 100_000
# small batches keep the per-candidate working set in cache
DETECT_BATCH = 16


def sub_seed(seed, *keys):
    """Deterministic child seed for a (seed, keys...) path."""
    return int(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]).generate_state(1)[0])


def digest(*parts):
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(str(p.dtype).encode())
            h.update(str(p.shape).encode())
            h.update(np.ascontiguousarray(p).tobytes())
        else:
            h.update(repr(p).encode())
    return h.hexdigest()


def dataset_hash(scenes: Sequence[Scene]):
    h = hashlib.sha256()
    for s in sorted(scenes, key=lambda s: s.id):
        h.update(s.id.encode())
        h.update(np.ascontiguousarray(s.rgb).tobytes())
        h.update(np.ascontiguousarray(s.cloud, dtype=float).tobytes())
        h.update(np.ascontiguousarray(s.valid).tobytes())
        for r in s.pos_rects + [None] + s.neg_rects:
            h.update(repr(None if r is None else r.as_tuple()).encode())
    return h.hexdigest()


@dataclass(frozen=True)
class ExperimentConfig:
    dict_cfg: DictLearnConfig = field(default_factory=DictLearnConfig)
    encoder: str = "natural"
    sparsity_grid: Optional[tuple] = None
    C_grid: tuple = C_GRID
    outer_folds: int = 5
    inner_folds: int = 5
    seed: int = 0
    whitening: bool = True
    self_taught: bool = False
    n_patches: int = DEFAULT_PATCHES
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.outer_folds < 2 or self.inner_folds < 2:
            raise ValueError("fold counts must be at least 2")
        if self.encoder != "natural":
            object.__setattr__(self, "encoder", canonical_kind(self.encoder))
        object.__setattr__(self, "C_grid", tuple(float(c) for c in self.C_grid))
        if self.sparsity_grid is not None:
            object.__setattr__(self, "sparsity_grid", tuple(self.sparsity_grid))

    def encoder_configs(self) -> List[EncoderConfig]:
        """Candidate encoders for the inner search, in ascending sparsity."""
        if self.encoder == "natural":
            return [natural_encoder_for(self.dict_cfg)]
        grid = self.sparsity_grid if self.sparsity_grid is not None else DEFAULT_GRIDS[self.encoder]
        return [EncoderConfig(self.encoder, s) for s in sorted(grid, key=lambda v: -1 if v is None else v)]

    def encoder_label(self):
        return "Natural" if self.encoder == "natural" else self.encoder

    def to_dict(self):
        d = asdict(self)
        d["dict_cfg"] = asdict(self.dict_cfg)
        return d


@dataclass(frozen=True)
class GridSearchSpec:
    stride: int = 10
    widths: tuple = tuple(range(10, 100, 10))
    heights: tuple = tuple(range(10, 100, 10))
    angles: tuple = tuple(range(0, 180, 15))

    @property
    def shapes_per_center(self):
        return len(self.widths) * len(self.heights) * len(self.angles)

    @property
    def min_extent(self):
        return min(min(self.widths), min(self.heights))

    def centers(self, roi):
        x0, y0, x1, y1 = roi
        xs = np.arange(x0, x1, self.stride, dtype=float)
        ys = np.arange(y0, y1, self.stride, dtype=float)
        return xs, ys

    def count(self, roi):
        xs, ys = self.centers(roi)
        return len(xs) * len(ys) * self.shapes_per_center


def enumerate_candidates(roi, spec: GridSearchSpec = GridSearchSpec()):
    """All ``(x, y, theta, w, h)`` candidates, row-major by center, then w, h, theta."""
    x0, y0, x1, y1 = roi
    if x1 - x0 < spec.min_extent or y1 - y0 < spec.min_extent:
        raise NoCandidates(f"region {roi} is smaller than the smallest {spec.min_extent} px rectangle")
    xs, ys = spec.centers(roi)
    w, h, t = np.meshgrid(spec.widths, spec.heights, spec.angles, indexing="ij")
    shapes = np.column_stack([t.ravel(), w.ravel(), h.ravel()]).astype(float)
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    centers = np.column_stack([cx.ravel(), cy.ravel()])
    out = np.empty((len(centers) * len(shapes), 5))
    out[:, :2] = np.repeat(centers, len(shapes), axis=0)
    out[:, 2:] = np.tile(shapes, (len(centers), 1))
    return out


@dataclass
class PreparedScene:
    scene: Scene
    image: MultiChannelImage
    crop_data: np.ndarray   # (R, 24, 24, 8)
    crop_mask: np.ndarray
    labels: np.ndarray      # (R,) +1 / -1

    @property
    def id(self):
        return self.scene.id

    @property
    def object_id(self):
        return self.scene.object_id

    def crops(self):
        return [RectCrop(d, m) for d, m in zip(self.crop_data, self.crop_mask)]


def prepare_scene(scene: Scene) -> PreparedScene:
    img = derive_channels(scene)
    rects = list(scene.pos_rects) + list(scene.neg_rects)
    labels = np.array([1] * len(scene.pos_rects) + [-1] * len(scene.neg_rects), dtype=float)
    if rects:
        data, mask = extract_rect_crops(img, rects)
    else:
        data = np.zeros((0, 24, 24, 8))
        mask = np.zeros((0, 24, 24, 8), dtype=bool)
    return PreparedScene(scene, img, data, mask, labels)


def prepare_scenes(scenes: Sequence[Scene], jobs=1) -> List[PreparedScene]:
    if jobs > 1:
        from joblib import Parallel, delayed
        return Parallel(n_jobs=jobs)(delayed(prepare_scene)(s) for s in scenes)
    return [prepare_scene(s) for s in scenes]


@dataclass
class Pipeline:
    """Everything needed to score a crop, plus what it was trained on."""
    whitener: Whitener
    dictionary: LearnedDictionary
    encoder: EncoderConfig
    model: Optional[LinearModel]
    train_ids: tuple
    hashes: dict

    @property
    def extractor(self) -> FeatureExtractor:
        return FeatureExtractor(self.dictionary.atoms, self.whitener, self.encoder, self.dictionary.centroids)


def fit_representation(train: Sequence[PreparedScene], cfg: ExperimentConfig, seed, aux_images=None):
    """Whitener and dictionary from patches of the training scenes' rectangle crops."""
    crops = [c for p in train for c in p.crops()]
    batch = sample_patches(crops, cfg.n_patches, seed, aux_sources=aux_images if cfg.self_taught else None)
    Z = standardize(batch.patches, batch.masks)
    wh = fit_whitener(Z, cfg.epsilon) if cfg.whitening else Whitener.identity(Z.shape[1])
    X = apply_whitener(wh, Z)
    dcfg = DictLearnConfig(**{**asdict(cfg.dict_cfg), "seed": seed})
    D = learn_dictionary(X, dcfg)
    patch_hash = digest(batch.patches, batch.masks)
    return wh, D, patch_hash


def _stack(prepared: Sequence[PreparedScene]):
    data = np.concatenate([p.crop_data for p in prepared])
    mask = np.concatenate([p.crop_mask for p in prepared])
    labels = np.concatenate([p.labels for p in prepared])
    return data, mask, labels


def fit_pipeline(train: Sequence[PreparedScene], cfg: ExperimentConfig, enc: EncoderConfig, C, seed,
                 aux_images=None) -> Pipeline:
    wh, D, patch_hash = fit_representation(train, cfg, seed, aux_images)
    fe = FeatureExtractor(D.atoms, wh, enc, D.centroids)
    data, mask, labels = _stack(train)
    F = fe.transform(data, mask)
    model = train_svm(F, labels, C)
    ids = tuple(sorted(p.id for p in train))
    hashes = {"whitener": patch_hash, "dictionary": patch_hash, "svm": digest(F, labels)}
    return Pipeline(wh, D, enc, model, ids, hashes)


# ---------------------------------------------------------------- recognition

@dataclass
class RecognitionReport:
    dict_method: str
    encoder: str
    fold_accuracies: List[float]
    selections: List[tuple]          # (sparsity, C) per outer fold
    train_ids: List[tuple]
    test_ids: List[tuple]
    hashes: List[dict]
    config: dict

    @property
    def mean(self):
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self):
        return float(np.std(self.fold_accuracies))

    def to_dict(self):
        return {
            "dict_method": self.dict_method,
            "encoder": self.encoder,
            "mean": self.mean,
            "std": self.std,
            "fold_accuracies": list(self.fold_accuracies),
            "selections": [list(s) for s in self.selections],
            "train_ids": [list(t) for t in self.train_ids],
            "test_ids": [list(t) for t in self.test_ids],
            "hashes": self.hashes,
            "config": self.config,
        }


def _selection_key(item):
    (enc, C), acc = item
    return (-acc, -1.0 if enc.sparsity is None else enc.sparsity, C)


def run_recognition_cv(prepared: Sequence[PreparedScene], cfg: ExperimentConfig, aux_images=None,
                       label_override=None) -> RecognitionReport:
    """Nested k-k cross-validation over scenes.

    The outer loop holds out whole scenes. Inside each outer-training part
    the whitener and dictionary are fit once, then an inner scene-grouped CV
    picks (sparsity, C) by mean accuracy, ties going to the smaller sparsity
    and then the smaller C. ``label_override`` maps scene id to a replacement
    label vector, for permutation checks.
    """
    prepared = sorted(prepared, key=lambda p: p.id)
    labels_of = {p.id: (p.labels if label_override is None else np.asarray(label_override[p.id], float))
                 for p in prepared}
    by_id = {p.id: p for p in prepared}
    outer = make_splits([p.scene for p in prepared], "image_wise", cfg.outer_folds, cfg.seed)
    encoders = cfg.encoder_configs()
    accs, selections, trains, tests, hashes = [], [], [], [], []
    for f in range(cfg.outer_folds):
        train_ids, test_ids = outer.train_test(f)
        fseed = sub_seed(cfg.seed, f)
        train = [by_id[i] for i in train_ids]
        wh, D, patch_hash = fit_representation(train, cfg, fseed, aux_images)

        feats = {}
        for enc in encoders:
            fe = FeatureExtractor(D.atoms, wh, enc, D.centroids)
            feats[enc] = {i: fe.transform(by_id[i].crop_data, by_id[i].crop_mask) for i in by_id}

        inner = make_splits([by_id[i].scene for i in train_ids], "image_wise", cfg.inner_folds, fseed)
        scores = {}
        for enc in encoders:
            for C in cfg.C_grid:
                fold_acc = []
                for g in range(cfg.inner_folds):
                    itr, ite = inner.train_test(g)
                    Ftr = np.concatenate([feats[enc][i] for i in itr])
                    ytr = np.concatenate([labels_of[i] for i in itr])
                    Fte = np.concatenate([feats[enc][i] for i in ite])
                    yte = np.concatenate([labels_of[i] for i in ite])
                    fold_acc.append(accuracy(train_svm(Ftr, ytr, C), Fte, yte))
                scores[(enc, C)] = float(np.mean(fold_acc))
        (best_enc, best_C), _ = min(scores.items(), key=_selection_key)

        Ftr = np.concatenate([feats[best_enc][i] for i in train_ids])
        ytr = np.concatenate([labels_of[i] for i in train_ids])
        Fte = np.concatenate([feats[best_enc][i] for i in test_ids])
        yte = np.concatenate([labels_of[i] for i in test_ids])
        model = train_svm(Ftr, ytr, best_C)
        accs.append(accuracy(model, Fte, yte))
        selections.append((best_enc.sparsity, best_C))
        trains.append(tuple(train_ids))
        tests.append(tuple(test_ids))
        hashes.append({"whitener": patch_hash, "dictionary": patch_hash, "svm": digest(Ftr, ytr),
                       "train_ids": digest(tuple(train_ids))})
        log.info("outer fold %d: accuracy %.4f with %s, C=%g", f, accs[-1], best_enc.label(), best_C)
    return RecognitionReport(cfg.dict_cfg.method, cfg.encoder_label(), accs, selections, trains, tests,
                             hashes, cfg.to_dict())


def modal_value(values):
    """Most frequent value; ties go to the smallest (``None`` sorts first)."""
    counts = Counter(values)
    top = max(counts.values())
    tied = [v for v, c in counts.items() if c == top]
    return min(tied, key=lambda v: (v is not None, v if v is not None else 0))


def modal_hyperparams(report: RecognitionReport):
    """Per-parameter mode of the outer-fold selections: ``(sparsity, C)``."""
    return (modal_value([s for s, _ in report.selections]), modal_value([c for _, c in report.selections]))


# ------------------------------------------------------------------ detection

def score_candidates(img: MultiChannelImage, cands, model: LinearModel, extractor: FeatureExtractor,
                     batch=DETECT_BATCH, jobs=1):
    """Decision value of every candidate row ``(x, y, theta, w, h)``."""
    starts = range(0, len(cands), batch)

    def run(s):
        d, m = extract_rect_crops(img, cands[s:s + batch])
        return decision_values(model, extractor.transform(d, m, chunk=batch))

    if jobs > 1:
        from joblib import Parallel, delayed
        parts = Parallel(n_jobs=jobs, prefer="threads")(delayed(run)(s) for s in starts)
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts) if parts else np.zeros(0)


def detect_best_grasp(scene: Union[Scene, MultiChannelImage], model: LinearModel, extractor: FeatureExtractor,
                      spec: GridSearchSpec = GridSearchSpec(), seed=0, jobs=1, batch=DETECT_BATCH):
    """Highest-scoring grid candidate inside the object region: ``(rect, score)``.

    Ties go to the first candidate in enumeration order.
    """
    img = scene if isinstance(scene, MultiChannelImage) else derive_channels(scene)
    roi = object_region(img, seed=seed)
    cands = enumerate_candidates(roi, spec)
    scores = score_candidates(img, cands, model, extractor, batch=batch, jobs=jobs)
    best = int(np.argmax(scores))
    x, y, t, w, h = cands[best]
    return GraspRect(x, y, t, w, h), float(scores[best])


Predictor = Callable[[PreparedScene, Optional[Pipeline]], GraspRect]


@dataclass
class DetectionReport:
    split: str
    fold_accuracies: List[float]
    results: List[dict]          # one per evaluated scene
    train_ids: List[tuple]
    test_ids: List[tuple]
    hashes: List[dict]
    config: dict

    @property
    def mean(self):
        return float(np.mean(self.fold_accuracies)) if self.fold_accuracies else float("nan")

    @property
    def successes(self):
        return sum(r["success"] for r in self.results)

    def to_dict(self):
        return {"split": self.split, "mean": self.mean, "fold_accuracies": list(self.fold_accuracies),
                "results": self.results, "train_ids": [list(t) for t in self.train_ids],
                "test_ids": [list(t) for t in self.test_ids], "hashes": self.hashes, "config": self.config}


def grid_predictor(spec: GridSearchSpec = GridSearchSpec(), jobs=1) -> Predictor:
    def predict(p: PreparedScene, pipe: Optional[Pipeline]):
        rect, _ = detect_best_grasp(p.image, pipe.model, pipe.extractor, spec, jobs=jobs)
        return rect
    return predict


def evaluate_detections(test: Sequence[PreparedScene], predict: Predictor, pipe: Optional[Pipeline]):
    """Rectangle-metric outcome per scene that has at least one positive."""
    out = []
    for p in test:
        if not p.scene.pos_rects:
            log.warning("scene %s has no positive rectangles; not scored", p.id)
            continue
        try:
            rect = predict(p, pipe)
        except (NoForeground, NoCandidates) as exc:
            log.warning("scene %s: %s", p.id, exc)
            out.append({"scene": p.id, "rect": None, "success": False, "error": type(exc).__name__})
            continue
        ok = rectangle_metric(rect, p.scene.pos_rects)
        out.append({"scene": p.id, "rect": list(rect.as_tuple()), "success": bool(ok)})
    return out


def run_detection_eval(prepared: Sequence[PreparedScene], cfg: ExperimentConfig, split_mode="image_wise",
                       enc: Optional[EncoderConfig] = None, C=None, aux_images=None,
                       spec: GridSearchSpec = GridSearchSpec(), predictor: Optional[Predictor] = None,
                       train_models=True, jobs=1) -> DetectionReport:
    """k-fold detection accuracy under an image- or object-wise split.

    For every fold a pipeline is trained on the training scenes (unless
    ``train_models`` is off, for injected predictors that need none) and each
    test scene with positives counts as a success when the predicted
    rectangle matches one of them.
    """
    prepared = sorted(prepared, key=lambda p: p.id)
    by_id = {p.id: p for p in prepared}
    plan = make_splits([p.scene for p in prepared], split_mode, cfg.outer_folds, cfg.seed)
    enc = enc if enc is not None else cfg.encoder_configs()[0]
    C = cfg.C_grid[0] if C is None else float(C)
    predict = predictor if predictor is not None else grid_predictor(spec, jobs)
    accs, results, trains, tests, hashes = [], [], [], [], []
    for f in range(cfg.outer_folds):
        train_ids, test_ids = plan.train_test(f)
        pipe = None
        if train_models:
            pipe = fit_pipeline([by_id[i] for i in train_ids], cfg, enc, C, sub_seed(cfg.seed, f), aux_images)
            hashes.append(dict(pipe.hashes, train_ids=digest(tuple(train_ids))))
        res = evaluate_detections([by_id[i] for i in test_ids], predict, pipe)
        for r in res:
            r["fold"] = f
        if res:
            accs.append(float(np.mean([r["success"] for r in res])))
        results.extend(res)
        trains.append(tuple(train_ids))
        tests.append(tuple(test_ids))
        log.info("detection fold %d (%s): %d/%d", f, split_mode, sum(r["success"] for r in res), len(res))
    conf = dict(cfg.to_dict(), encoder_used=enc.label(), C_used=C, spec=asdict(spec))
    return DetectionReport(split_mode, accs, results, trains, tests, hashes, conf)


# -------------------------------------------------------------------- reports

def write_table(path, rows, columns, cells):
    """Tab-separated table: first column the row label, then one column per entry of ``columns``."""
    with open(path, "w") as fh:
        fh.write("\t".join(["method"] + list(columns)) + "\n")
        for r in rows:
            fh.write("\t".join([r] + [cells.get((r, c), "") for c in columns]) + "\n")


def recognition_cell(report: RecognitionReport):
    return f"{100 * report.mean:.2f} +/- {100 * report.std:.2f}"


def manifest(command, cfg: Optional[ExperimentConfig], scenes: Sequence[Scene], **extra):
    """Everything needed to re-run an experiment: config, seed, grids, data and code identity."""
    m = {"command": command, "version": __version__, "dataset_hash": dataset_hash(scenes),
         "n_scenes": len(scenes)}
    if cfg is not None:
        m["config"] = cfg.to_dict()
        m["encoders"] = [e.label() for e in cfg.encoder_configs()]
    m.update(extra)
    return m
