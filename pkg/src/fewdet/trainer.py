"""Episodic two-phase training, prototype caching, and inference.

Base phase: episodes over base classes with supports drawn fresh from the
scene pool (query-scene instances excluded from supports). Finetune phase:
episodes over base+novel classes whose supports are the split's frozen K-shot
sets; queries come from those same shot scenes, so the vectors used at
finetune time are exactly the vectors cached for inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import (
    DetectorModel,
    backbone_stub,
    binary_pass,
    decode_detections,
    compute_losses,
    meta_forward,
    multiclass_pass,
    refine_supports,
    support_vectors,
)
from .errors import (
    ConfigError,
    ContractError,
    EmptyInputError,
    NumericsError,
    SamplingError,
    TrainingError,
)
from .evalkit import MetricReport, ap50
from .tensor import Tape, Tensor, backward, concat_rows
from .world import DatasetSplit, SceneSample, Shot, crop_support
from .aggregation import average_prototype

PHASES = ("base", "finetune")
EPISODE_STYLES = ("pairwise", "allway")
SAMPLE_TRIES = 50


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one training phase."""

    phase: str
    iterations: int
    k_train: int = 3
    k_eval: int = 5
    lr: float = 0.01
    episode_style: str = "pairwise"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.episode_style not in EPISODE_STYLES:
            raise ConfigError(f"episode_style must be one of {EPISODE_STYLES}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.k_train < 1 or self.k_eval < 1:
            raise ConfigError("shot counts must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class Episode:
    """One meta-learning unit: a query scene plus K-shot support sets."""

    query: SceneSample
    supports: dict
    positive_classes: list
    episode_classes: list

    def __post_init__(self):
        counts = {len(shots) for shots in self.supports.values()}
        if len(counts) > 1:
            raise ContractError(f"unbalanced support sets: sizes {sorted(counts)}")
        missing = set(self.positive_classes) - set(self.supports)
        if missing:
            raise ContractError(f"positive classes without supports: {sorted(missing)}")


def _pick(rng: np.random.Generator, items: list):
    return items[int(rng.integers(len(items)))]


def _draw_supports(split: DatasetSplit, class_id: int, k: int, exclude_scene, rng) -> list:
    """K support shots for a class from the base pool, skipping one scene."""
    entries = [
        (si, ii) for si, ii in split.pool_index[class_id] if split.base_pool[si] is not exclude_scene
    ]
    if len(entries) < k:
        raise SamplingError(
            f"class {class_id}: only {len(entries)} pool instances outside the query scene, need {k}"
        )
    picked = rng.choice(len(entries), size=k, replace=False)
    return [
        Shot(split.base_pool[si], split.base_pool[si].boxes[ii])
        for si, ii in (entries[int(i)] for i in picked)
    ]


def _frozen_supports(split: DatasetSplit, class_id: int, k: int) -> list:
    shots = split.shots[class_id]
    if len(shots) != k:
        raise ContractError(f"frozen set for class {class_id} has {len(shots)} shots, expected {k}")
    return list(shots)


def sample_episode_pairwise(split: DatasetSplit, phase: str, k: int, rng) -> Episode:
    """Query with class c1 plus K-shot supports for c1 and a foil class c2.

    c2 never appears in the query scene, so its pass is all-background. Base
    phase draws supports from the pool (query scene excluded); finetune phase
    uses the frozen shot sets and queries from those same scenes.
    """
    if phase == "base":
        classes = list(split.base_classes)
        if len(classes) < 2:
            raise SamplingError("pairwise episodes need at least two base classes")
        for _ in range(SAMPLE_TRIES):
            c1 = _pick(rng, classes)
            scene_idx, _ = _pick(rng, split.pool_index[c1])
            query = split.base_pool[scene_idx]
            foils = [c for c in classes if c != c1 and c not in query.labels]
            if not foils:
                continue
            c2 = _pick(rng, foils)
            supports = {
                c1: _draw_supports(split, c1, k, query, rng),
                c2: _draw_supports(split, c2, k, query, rng),
            }
            return Episode(query, supports, [c1], sorted((c1, c2)))
        raise SamplingError(f"no valid (c1, c2) pair found in {SAMPLE_TRIES} tries")

    classes = list(split.all_classes)
    c1 = _pick(rng, classes)
    query = _pick(rng, split.shots[c1]).scene
    c2 = _pick(rng, [c for c in classes if c != c1])
    supports = {c: _frozen_supports(split, c, k) for c in (c1, c2)}
    return Episode(query, supports, [c1], sorted((c1, c2)))


def sample_episode_allway(split: DatasetSplit, phase: str, k: int, rng) -> Episode:
    """Supports for every phase class; query from the phase's scene source."""
    if phase == "base":
        classes = sorted(split.base_classes)
        query = _pick(rng, list(split.base_pool))
        supports = {c: _draw_supports(split, c, k, query, rng) for c in classes}
    else:
        classes = sorted(split.all_classes)
        c = _pick(rng, classes)  # class-uniform query keeps the phase balanced
        query = _pick(rng, split.shots[c]).scene
        supports = {c: _frozen_supports(split, c, k) for c in classes}
    positives = sorted(c for c in set(query.labels) if c in supports)
    return Episode(query, supports, positives, classes)


def episode_losses(model: DetectorModel, episode: Episode, mode: str = "eval", rng=None):
    """Forward the episode through the detector; returns (total, breakdown)."""
    fm = backbone_stub(episode.query, model)
    classes = episode.episode_classes
    sups = {c: support_vectors(model, episode.supports[c]) for c in classes}
    refined_b = {c: refine_supports(model, "b", sups[c], mode=mode, rng=rng) for c in classes}
    meta_feats = concat_rows([refined_b[c] for c in classes]) if len(classes) > 1 else refined_b[classes[0]]
    meta_labels = [c for c in classes for _ in range(refined_b[c].shape[0])]
    meta_logits = meta_forward(model, meta_feats)

    if model.config.head_mode == "binary_match":
        passes = [
            binary_pass(
                model,
                fm,
                c,
                refine_supports(model, "a", sups[c], mode=mode, rng=rng),
                refined_b[c],
                episode.query.boxes,
                episode.query.labels,
                mode=mode,
                rng=rng,
            )
            for c in classes
        ]
    else:
        passes = [
            multiclass_pass(
                model, fm, refined_b, episode.query.boxes, episode.query.labels, mode=mode, rng=rng
            )
        ]
    return compute_losses(passes, meta_logits, meta_labels)


def _sampler(style: str):
    return sample_episode_pairwise if style == "pairwise" else sample_episode_allway


def train_phase(model: DetectorModel, split: DatasetSplit, cfg: TrainConfig, rng) -> list:
    """cfg.iterations SGD steps; returns the per-step loss trace.

    The model is updated in place. A non-finite loss or parameter update
    surfaces as TrainingError carrying the step index. iterations=0 leaves
    the parameters bit-identical and records no phase.
    """
    if cfg.phase == "finetune" and "base" not in model.trained_phases:
        raise ContractError("finetune requires a base-trained model")
    sample = _sampler(cfg.episode_style)
    k = cfg.k_train if cfg.phase == "base" else cfg.k_eval
    trace = []
    for step in range(cfg.iterations):
        try:
            episode = sample(split, cfg.phase, k, rng)
            with Tape() as tape:
                total, breakdown = episode_losses(model, episode, mode="train", rng=rng)
            grads = backward(total, tape)
        except NumericsError as err:
            raise TrainingError(str(err), step) from err
        for p in model.params.values():
            g = grads.get(p)
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingError("non-finite gradient", step)
            p.values -= cfg.lr * g
        trace.append(breakdown)
    if cfg.iterations > 0:
        model.trained_phases.append(cfg.phase)
    return trace


def finetune(model: DetectorModel, split: DatasetSplit, cfg: TrainConfig, rng) -> list:
    """Balanced K-shot adaptation over base+novel classes."""
    if cfg.phase != "finetune":
        raise ConfigError(f"finetune called with phase {cfg.phase!r}")
    return train_phase(model, split, cfg, rng)


# ---------------------------------------------------------------------------
# prototype cache and inference
# ---------------------------------------------------------------------------


@dataclass
class PrototypeCache:
    """Eval-mode refined support vectors per class for both aggregation points.

    per_sample mode keeps all K rows; averaged mode stores the single mean
    row (averaging again at fusion time is an exact identity, so cached and
    fresh inference agree bit for bit).
    """

    vectors_a: dict
    vectors_b: dict
    mode: str
    k: int
    seed: int

    def classes(self) -> list:
        return sorted(self.vectors_a)


def _cache_entry(model: DetectorModel, point: str, sup: Tensor) -> Tensor:
    refined = refine_supports(model, point, sup, mode="eval")
    if model.config.use_qsam:
        return refined
    return average_prototype(refined)


def build_prototype_cache(model: DetectorModel, split: DatasetSplit) -> PrototypeCache:
    """Backbone + refinement over the frozen shot sets, stored for reuse."""
    vectors_a, vectors_b = {}, {}
    for class_id in sorted(split.shots):
        shots = split.shots[class_id]
        if not shots:
            raise ContractError(f"class {class_id} has an empty frozen support set")
        sup = support_vectors(model, shots)
        vectors_a[class_id] = _cache_entry(model, "a", sup)
        vectors_b[class_id] = _cache_entry(model, "b", sup)
    mode = "per_sample" if model.config.use_qsam else "averaged"
    return PrototypeCache(vectors_a, vectors_b, mode, split.k, split.seed)


def infer(model: DetectorModel, scene: SceneSample, cache: PrototypeCache) -> list:
    """Detections for every cached class on one scene (eval mode, NMS'd)."""
    if not cache.vectors_a:
        raise ContractError("empty prototype cache")
    fm = backbone_stub(scene, model)
    if model.config.head_mode == "binary_match":
        detections = []
        for class_id in cache.classes():
            outs = binary_pass(
                model,
                fm,
                class_id,
                cache.vectors_a[class_id],
                cache.vectors_b[class_id],
                [],
                [],
                mode="eval",
            )
            detections.extend(decode_detections(model, outs, scene.height, scene.width))
        return detections
    outs = multiclass_pass(model, fm, cache.vectors_b, [], [], mode="eval")
    return decode_detections(model, outs, scene.height, scene.width)


def evaluate(model: DetectorModel, split: DatasetSplit, scenes: list, cache: PrototypeCache, seed: int, labels=None) -> MetricReport:
    """Novel-class AP50 over eval scenes.

    Novel classes with no ground-truth instance in the scene set are skipped
    (AP undefined), not counted as zero.
    """
    detections_by_scene = {i: infer(model, scene, cache) for i, scene in enumerate(scenes)}
    gts_by_scene = {
        i: [(box, label) for box, label in zip(scene.boxes, scene.labels)]
        for i, scene in enumerate(scenes)
    }
    ap = ap50(detections_by_scene, gts_by_scene)
    novel = {c: ap[c] for c in split.novel_classes if c in ap}
    return MetricReport.build(novel, seed=seed, k=split.k, labels=labels or {})


def support_feature_stages(model: DetectorModel, split: DatasetSplit, classes=None):
    """Frozen-set support vectors at the raw / pre-refinement / post-refinement
    stages, with aligned labels (for clustering metrics and export)."""
    classes = sorted(split.shots) if classes is None else sorted(classes)
    raw_rows, pre_rows, post_rows, labels = [], [], [], []
    for class_id in classes:
        shots = split.shots[class_id]
        if not shots:
            raise EmptyInputError(f"class {class_id} has no shots")
        raw_rows.extend(crop_support(shot.scene, shot.box).values[0] for shot in shots)
        sup = support_vectors(model, shots)
        post = refine_supports(model, "b", sup, mode="eval")
        pre_rows.extend(sup.values)
        post_rows.extend(post.values)
        labels.extend([class_id] * len(shots))
    return np.array(raw_rows), np.array(pre_rows), np.array(post_rows), labels
