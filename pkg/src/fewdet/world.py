"""Procedural feature-grid scenes with base/novel class splits.

Scenes are post-backbone feature grids, not images: each cell holds a
d-vector. A class is a set of M mode signatures on a common sphere; an
instance picks one mode, adds a per-instance appearance offset, and paints
that vector into its box cells over background noise (later instances
overwrite earlier ones). All generation is a pure function of (config, seed);
scene seeds are spawned from one SeedSequence in a fixed order, so two splits
that differ only in K share the same class assignment and base pool.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    BoundsError,
    ContractError,
    GenerationError,
    ParameterError,
    PlacementError,
)
from .tensor import Tensor

Box = tuple[int, int, int, int]  # (x1, y1, x2, y2), inclusive-exclusive


@dataclass(frozen=True)
class WorldConfig:
    """Scene-generation knobs; defaults give minute-scale runs."""

    height: int = 16
    width: int = 16
    dim: int = 16
    n_base: int = 6
    n_novel: int = 3
    modes_per_class: int = 3
    mode_spread: float = 0.25
    bg_noise: float = 0.3
    signature_scale: float = 3.0
    min_signature_dist: float = 2.0
    min_instances: int = 1
    max_instances: int = 3
    box_min: int = 2
    box_max: int = 4
    pool_scenes: int = 64

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.dim < 2:
            raise ParameterError("grid must be at least 1x1 with dim >= 2")
        if self.n_base < 2 or self.n_novel < 1:
            raise ParameterError("need n_base >= 2 and n_novel >= 1")
        if self.modes_per_class < 1:
            raise ParameterError("modes_per_class must be >= 1")
        if not (1 <= self.min_instances <= self.max_instances):
            raise ParameterError("instance count range invalid")
        if not (1 <= self.box_min <= self.box_max):
            raise ParameterError("box size range invalid")
        if self.box_max > min(self.height, self.width):
            raise PlacementError(
                f"box_max {self.box_max} cannot fit in {self.height}x{self.width} grid"
            )
        if self.mode_spread < 0 or self.bg_noise < 0:
            raise ParameterError("noise scales must be nonnegative")

    @property
    def n_classes(self) -> int:
        return self.n_base + self.n_novel


@dataclass
class ClassSpec:
    """One class: M mode signatures plus the within-mode noise scale."""

    class_id: int
    modes: np.ndarray  # [M, d]
    mode_spread: float


@dataclass
class SceneSample:
    """A feature grid with aligned ground-truth boxes and labels."""

    grid: np.ndarray  # [H, W, d]
    boxes: list[Box]
    labels: list[int]

    def __post_init__(self):
        h, w = self.grid.shape[0], self.grid.shape[1]
        if len(self.boxes) != len(self.labels):
            raise ContractError("boxes and labels must align")
        for box in self.boxes:
            x1, y1, x2, y2 = box
            if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
                raise BoundsError(f"box {box} outside {h}x{w} grid or degenerate")

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def dim(self) -> int:
        return self.grid.shape[2]


@dataclass
class Shot:
    """One frozen support instance: its scene and the instance box."""

    scene: SceneSample
    box: Box


@dataclass
class DatasetSplit:
    """Disjoint base/novel classes, a base scene pool, frozen K-shot sets."""

    specs: list[ClassSpec]
    base_classes: list[int]
    novel_classes: list[int]
    base_pool: list[SceneSample]
    pool_index: dict[int, list[tuple[int, int]]]  # class -> [(scene_idx, instance_idx)]
    shots: dict[int, list[Shot]]  # class -> K frozen shots (base and novel)
    k: int
    seed: int
    config: WorldConfig = field(repr=False, default=None)

    @property
    def all_classes(self) -> list[int]:
        return sorted(self.base_classes + self.novel_classes)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def generate_class_specs(
    n_classes: int,
    d: int,
    modes_per_class: int,
    seed,
    mode_spread: float = 0.25,
    signature_scale: float = 3.0,
    min_distance: float = 2.0,
    max_tries: int = 200,
) -> list[ClassSpec]:
    """Draw n_classes * modes_per_class signatures with a pairwise L2 floor.

    Signatures live on the radius-`signature_scale` sphere; each is
    rejection-resampled until it clears `min_distance` from all previous ones.
    """
    if n_classes < 2:
        raise ParameterError(f"n_classes must be >= 2, got {n_classes}")
    if d < 2:
        raise ParameterError(f"d must be >= 2, got {d}")
    if modes_per_class < 1:
        raise ParameterError(f"modes_per_class must be >= 1, got {modes_per_class}")
    rng = np.random.default_rng(seed)
    accepted: list[np.ndarray] = []
    for _ in range(n_classes * modes_per_class):
        for attempt in range(max_tries):
            v = rng.normal(size=d)
            norm = np.linalg.norm(v)
            if norm == 0.0:
                continue
            v = v * (signature_scale / norm)
            if all(np.linalg.norm(v - u) >= min_distance for u in accepted):
                accepted.append(v)
                break
        else:
            raise GenerationError(
                f"could not place signature {len(accepted)} with min distance "
                f"{min_distance} after {max_tries} tries (d={d})"
            )
    specs = []
    for c in range(n_classes):
        modes = np.stack(accepted[c * modes_per_class : (c + 1) * modes_per_class])
        specs.append(ClassSpec(class_id=c, modes=modes, mode_spread=mode_spread))
    return specs


def render_scene(
    specs: list[ClassSpec],
    instances_per_scene: int,
    height: int,
    width: int,
    noise: float,
    seed,
    classes: list[int] | None = None,
    box_min: int = 2,
    box_max: int = 4,
) -> SceneSample:
    """Paint instances over background noise, later instances overwriting.

    `classes`, when given, fixes the class of each instance in paint order;
    otherwise classes are drawn uniformly from `specs`.
    """
    if instances_per_scene < 1:
        raise ParameterError("instances_per_scene must be >= 1")
    if classes is not None and len(classes) != instances_per_scene:
        raise ParameterError("classes list must match instances_per_scene")
    if box_max > min(height, width):
        raise PlacementError(f"box_max {box_max} cannot fit in {height}x{width} grid")
    by_id = {s.class_id: s for s in specs}
    d = specs[0].modes.shape[1]
    rng = np.random.default_rng(seed)
    grid = rng.normal(0.0, 1.0, size=(height, width, d)) * noise
    boxes: list[Box] = []
    labels: list[int] = []
    for i in range(instances_per_scene):
        if classes is None:
            class_id = int(rng.choice(sorted(by_id)))
        else:
            class_id = classes[i]
            if class_id not in by_id:
                raise ParameterError(f"unknown class id {class_id}")
        spec = by_id[class_id]
        mode_idx = int(rng.integers(len(spec.modes)))
        bw = int(rng.integers(box_min, box_max + 1))
        bh = int(rng.integers(box_min, box_max + 1))
        x1 = int(rng.integers(0, width - bw + 1))
        y1 = int(rng.integers(0, height - bh + 1))
        vec = spec.modes[mode_idx] + rng.normal(0.0, 1.0, size=d) * spec.mode_spread
        grid[y1 : y1 + bh, x1 : x1 + bw, :] = vec
        boxes.append((x1, y1, x1 + bw, y1 + bh))
        labels.append(class_id)
    return SceneSample(grid=grid, boxes=boxes, labels=labels)


def crop_support(scene: SceneSample, box: Box) -> Tensor:
    """Mean of the grid cells inside the box, as a [1,d] tensor."""
    x1, y1, x2, y2 = box
    if not (0 <= x1 < x2 <= scene.width and 0 <= y1 < y2 <= scene.height):
        raise BoundsError(f"box {box} outside {scene.height}x{scene.width} grid")
    region = scene.grid[y1:y2, x1:x2, :].reshape(-1, scene.dim)
    # shifted mean: exact on constant regions (a constant crop must recover
    # the painted vector bit for bit), well conditioned otherwise
    anchor = region[0]
    return Tensor((anchor + (region - anchor).mean(axis=0))[None, :])


def make_split(specs: list[ClassSpec], n_base: int, n_novel: int, k: int, seed, config: WorldConfig) -> DatasetSplit:
    """Assign classes, build the base pool, freeze K-shot sets per class.

    Randomness is consumed in that fixed order from one SeedSequence, and the
    base-pool size depends on max(k, 10), so all splits with k <= 10 and equal
    seed share the class assignment and base pool exactly.
    """
    if n_base + n_novel > len(specs):
        raise ParameterError(
            f"n_base + n_novel = {n_base + n_novel} exceeds {len(specs)} classes"
        )
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss.spawn(1)[0])

    order = [int(c) for c in rng.permutation([s.class_id for s in specs])]
    base_classes = sorted(order[:n_base])
    novel_classes = sorted(order[n_base : n_base + n_novel])

    # base pool: scenes containing base-class instances only
    def draw_pool_scene(forced_class: int | None = None) -> SceneSample:
        n_inst = int(rng.integers(config.min_instances, config.max_instances + 1))
        chosen = [int(rng.choice(base_classes)) for _ in range(n_inst)]
        if forced_class is not None:
            chosen[0] = forced_class
        return render_scene(
            specs,
            n_inst,
            config.height,
            config.width,
            config.bg_noise,
            ss.spawn(1)[0],
            classes=chosen,
            box_min=config.box_min,
            box_max=config.box_max,
        )

    base_pool = [draw_pool_scene() for _ in range(config.pool_scenes)]

    # top up so base-phase support sampling (up to K_train=10, query scene
    # excluded) can never run dry for any base class
    floor = max(k, 10) + config.max_instances + 2

    def instance_count(class_id: int) -> int:
        return sum(scene.labels.count(class_id) for scene in base_pool)

    for class_id in base_classes:
        while instance_count(class_id) < floor:
            base_pool.append(draw_pool_scene(forced_class=class_id))

    pool_index: dict[int, list[tuple[int, int]]] = {c: [] for c in base_classes}
    for scene_idx, scene in enumerate(base_pool):
        for inst_idx, label in enumerate(scene.labels):
            pool_index[label].append((scene_idx, inst_idx))

    # frozen K-shot sets, one single-instance scene per shot, base and novel
    shots: dict[int, list[Shot]] = {}
    for class_id in sorted(base_classes + novel_classes):
        class_shots = []
        for _ in range(k):
            scene = render_scene(
                specs,
                1,
                config.height,
                config.width,
                config.bg_noise,
                ss.spawn(1)[0],
                classes=[class_id],
                box_min=config.box_min,
                box_max=config.box_max,
            )
            class_shots.append(Shot(scene=scene, box=scene.boxes[0]))
        shots[class_id] = class_shots

    return DatasetSplit(
        specs=specs,
        base_classes=base_classes,
        novel_classes=novel_classes,
        base_pool=base_pool,
        pool_index=pool_index,
        shots=shots,
        k=k,
        seed=seed if isinstance(seed, int) else -1,
        config=config,
    )


def make_eval_scenes(split: DatasetSplit, count: int, seed) -> list[SceneSample]:
    """Held-out scenes, each guaranteed at least one novel-class instance."""
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    config = split.config
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss.spawn(1)[0])
    all_classes = split.all_classes
    scenes = []
    for _ in range(count):
        n_inst = int(rng.integers(config.min_instances, config.max_instances + 1))
        chosen = [int(rng.choice(all_classes)) for _ in range(n_inst)]
        chosen[0] = int(rng.choice(split.novel_classes))
        scenes.append(
            render_scene(
                split.specs,
                n_inst,
                config.height,
                config.width,
                config.bg_noise,
                ss.spawn(1)[0],
                classes=chosen,
                box_min=config.box_min,
                box_max=config.box_max,
            )
        )
    return scenes


# ---------------------------------------------------------------------------
# JSON serialization (test fixtures, provenance)
# ---------------------------------------------------------------------------


def scene_to_json(scene: SceneSample) -> dict:
    return {
        "grid": scene.grid.tolist(),
        "boxes": [list(b) for b in scene.boxes],
        "labels": list(scene.labels),
    }


def scene_from_json(doc: dict) -> SceneSample:
    return SceneSample(
        grid=np.asarray(doc["grid"], dtype=np.float64),
        boxes=[tuple(b) for b in doc["boxes"]],
        labels=[int(l) for l in doc["labels"]],
    )


def split_to_json(split: DatasetSplit) -> dict:
    """Config + seed (pool is regenerable) plus the frozen shots inline."""
    return {
        "config": asdict(split.config),
        "seed": split.seed,
        "k": split.k,
        "base_classes": split.base_classes,
        "novel_classes": split.novel_classes,
        "shots": {
            str(c): [
                {"scene": scene_to_json(shot.scene), "box": list(shot.box)}
                for shot in class_shots
            ]
            for c, class_shots in split.shots.items()
        },
    }


def save_scene(scene: SceneSample, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_json(scene), fh, sort_keys=True)


def load_scene(path) -> SceneSample:
    with open(path) as fh:
        return scene_from_json(json.load(fh))
