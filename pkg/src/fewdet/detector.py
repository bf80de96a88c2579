"""Toy two-stage detector: backbone stub, anchor proposals, RoI head, losses.

The pipeline runs once per conditioning class. With the attention path the
query map is aggregated against that class's refined supports before the
proposal stage and again on pooled RoI vectors before the head; baseline
arms fuse a single averaged prototype instead (channel-wise product on the
map, configurable variant on RoIs). All pooling is expressed as constant
matrices so every stage stays on the gradient tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .aggregation import (
    BASELINE_VARIANTS,
    FeatureMap,
    PrototypeSet,
    RoIFeatures,
    StackPair,
    average_prototype,
    baseline_aggregate,
    query_roi_aggregation,
    query_spatial_aggregation,
)
from .attention import (
    AttentionConfig,
    init_decoder_stack,
    init_encoder_stack,
    isam_refine,
    replace_decoder_params,
    replace_encoder_params,
)
from .errors import (
    BoundsError,
    ConfigError,
    ContractError,
    EmptyInputError,
    ParameterError,
    ShapeError,
)
from .evalkit import iou
from .tensor import (
    Tensor,
    add,
    concat_cols,
    concat_rows,
    cross_entropy,
    load_snapshot,
    matmul,
    relu,
    save_params,
    smooth_l1,
    softmax_rows,
    take_rows,
)
from .world import Box, SceneSample, Shot

HEAD_MODES = ("binary_match", "multiclass")
ANCHOR_POS_IOU = 0.5
ANCHOR_NEG_IOU = 0.3
ROI_POS_IOU = 0.5


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture and inference knobs for one detector arm."""

    dim: int
    n_meta_classes: int
    head_mode: str = "binary_match"
    use_isam: bool = True
    use_qsam: bool = True
    baseline_variant: str = "mult_sub_id"
    attention: AttentionConfig | None = None
    anchor_sizes: tuple = (2, 4)
    top_k: int = 12
    conf_floor: float = 0.05
    nms_iou: float = 0.5
    offset_clamp: float = 4.0

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        if self.n_meta_classes < 2:
            raise ConfigError("n_meta_classes must be >= 2")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}")
        if self.baseline_variant not in BASELINE_VARIANTS:
            raise ConfigError(f"baseline_variant must be one of {BASELINE_VARIANTS}")
        sizes = tuple(sorted(set(self.anchor_sizes)))
        if not sizes or any(s < 1 for s in sizes):
            raise ConfigError("anchor_sizes must be positive integers")
        object.__setattr__(self, "anchor_sizes", sizes)
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if (self.use_isam or self.use_qsam) and self.attention is None:
            raise ConfigError("attention config required when ISAM or QSAM is enabled")
        if self.attention is not None and self.attention.model_dim != self.dim:
            raise ConfigError(
                f"attention model_dim {self.attention.model_dim} != detector dim {self.dim}"
            )
        if not 0.0 <= self.conf_floor < 1.0:
            raise ConfigError("conf_floor must be in [0, 1)")
        if self.offset_clamp <= 0:
            raise ConfigError("offset_clamp must be positive")

    @property
    def head_in(self) -> int:
        """Width of the detection-head input features."""
        if not self.use_qsam and self.baseline_variant == "mult_sub_id":
            return 3 * self.dim
        return self.dim


@dataclass(frozen=True)
class Proposal:
    box: Box
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ContractError(f"non-finite proposal score: {self.score}")


@dataclass(frozen=True)
class Detection:
    box: tuple
    class_id: int
    confidence: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ContractError(f"degenerate detection box: {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractError(f"confidence out of range: {self.confidence}")

    def to_json(self) -> dict:
        return {
            "box": [float(v) for v in self.box],
            "class_id": self.class_id,
            "confidence": self.confidence,
        }


@dataclass
class LossBreakdown:
    """The five loss terms of one step; total is their exact float sum."""

    rpn_loc: float
    rpn_cls: float
    det_loc: float
    det_cls: float
    meta: float
    total: float

    def __post_init__(self):
        parts = (self.rpn_loc, self.rpn_cls, self.det_loc, self.det_cls, self.meta)
        for name, v in zip(("rpn_loc", "rpn_cls", "det_loc", "det_cls", "meta"), parts):
            if v < 0.0 or not math.isfinite(v):
                raise ContractError(f"loss term {name} invalid: {v}")
        expected = self.rpn_loc
        for v in parts[1:]:
            expected = expected + v
        if self.total != expected:
            raise ContractError(f"total {self.total!r} != sum of parts {expected!r}")

    def to_json(self) -> dict:
        return {
            "rpn_loc": self.rpn_loc,
            "rpn_cls": self.rpn_cls,
            "det_loc": self.det_loc,
            "det_cls": self.det_cls,
            "meta": self.meta,
            "total": self.total,
        }


@dataclass
class DetectorModel:
    """Flat named parameters plus attention stacks sharing the same tensors.

    The stacks reference the exact Tensor objects stored in `params`, so
    in-place optimizer updates are visible everywhere.
    """

    config: DetectorConfig
    params: dict
    isam_a: object = None
    qsam_a: object = None
    isam_b: object = None
    qsam_b: object = None
    trained_phases: list = field(default_factory=list)

    def pair_a(self) -> StackPair:
        return StackPair(self.isam_a, self.qsam_a)

    def pair_b(self) -> StackPair:
        return StackPair(self.isam_b, self.qsam_b)


def _uniform(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    bound = 1.0 / math.sqrt(rows)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), grad_enabled=True)


def _zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)), grad_enabled=True)


def init_model(config: DetectorConfig, rng: np.random.Generator) -> DetectorModel:
    """Create all parameters in a fixed order (deterministic under seed)."""
    d = config.dim
    params = {
        "backbone.w": _uniform(rng, d, d),
        "backbone.b": _zeros(1, d),
        "rpn.w": _uniform(rng, d, 1),
        "rpn.b": _zeros(1, 1),
        "rpn.reg_w": _uniform(rng, d, 4),
        "rpn.reg_b": _zeros(1, 4),
        "head.hidden_w": _uniform(rng, config.head_in, d),
        "head.hidden_b": _zeros(1, d),
    }
    if config.head_mode == "binary_match":
        params["head.cls_w"] = _uniform(rng, d, 2)
        params["head.cls_b"] = _zeros(1, 2)
    else:
        params["head.score_w"] = _uniform(rng, d, 1)
        params["head.score_b"] = _zeros(1, 1)
        params["head.bg"] = _zeros(1, 1)
    params["head.box_w"] = _uniform(rng, d, 4)
    params["head.box_b"] = _zeros(1, 4)
    params["meta.w"] = _uniform(rng, d, config.n_meta_classes)
    params["meta.b"] = _zeros(1, config.n_meta_classes)

    model = DetectorModel(config=config, params=params)
    if config.use_isam:
        model.isam_a = init_encoder_stack(config.attention, rng)
        model.isam_b = init_encoder_stack(config.attention, rng)
        params.update(model.isam_a.named_params("agg_a.isam."))
        params.update(model.isam_b.named_params("agg_b.isam."))
    if config.use_qsam:
        model.qsam_a = init_decoder_stack(config.attention, rng)
        model.qsam_b = init_decoder_stack(config.attention, rng)
        params.update(model.qsam_a.named_params("agg_a.qsam."))
        params.update(model.qsam_b.named_params("agg_b.qsam."))
    return model


def bind_params(model: DetectorModel, mapping: dict) -> DetectorModel:
    """Same architecture over a replacement parameter dict (for probes/loads)."""
    missing = set(model.params) - set(mapping)
    if missing:
        raise ParameterError(f"mapping missing parameters: {sorted(missing)[:4]}...")
    bound = DetectorModel(
        config=model.config,
        params={name: mapping[name] for name in model.params},
        trained_phases=list(model.trained_phases),
    )
    if model.isam_a is not None:
        bound.isam_a = replace_encoder_params(model.isam_a, mapping, "agg_a.isam.")
        bound.isam_b = replace_encoder_params(model.isam_b, mapping, "agg_b.isam.")
    if model.qsam_a is not None:
        bound.qsam_a = replace_decoder_params(model.qsam_a, mapping, "agg_a.qsam.")
        bound.qsam_b = replace_decoder_params(model.qsam_b, mapping, "agg_b.qsam.")
    return bound


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def config_to_json(config: DetectorConfig) -> dict:
    doc = {
        "dim": config.dim,
        "n_meta_classes": config.n_meta_classes,
        "head_mode": config.head_mode,
        "use_isam": config.use_isam,
        "use_qsam": config.use_qsam,
        "baseline_variant": config.baseline_variant,
        "anchor_sizes": list(config.anchor_sizes),
        "top_k": config.top_k,
        "conf_floor": config.conf_floor,
        "nms_iou": config.nms_iou,
        "offset_clamp": config.offset_clamp,
        "attention": None,
    }
    if config.attention is not None:
        a = config.attention
        doc["attention"] = {
            "model_dim": a.model_dim,
            "heads": a.heads,
            "layers": a.layers,
            "mlp_hidden": a.mlp_hidden,
            "dropout_rate": a.dropout_rate,
            "decoder_self_attention": a.decoder_self_attention,
        }
    return doc


def config_from_json(doc: dict) -> DetectorConfig:
    attention = None
    if doc.get("attention") is not None:
        attention = AttentionConfig(**doc["attention"])
    fields_ = {k: v for k, v in doc.items() if k != "attention"}
    fields_["anchor_sizes"] = tuple(fields_["anchor_sizes"])
    return DetectorConfig(attention=attention, **fields_)


def save_model(model: DetectorModel, path, extra: dict | None = None) -> None:
    """Snapshot parameters with the architecture config echoed alongside."""
    payload = {
        "detector_config": config_to_json(model.config),
        "trained_phases": list(model.trained_phases),
    }
    payload.update(extra or {})
    save_params(model.params, path, extra=payload)


def load_model(path) -> tuple:
    """Rebuild a model from a snapshot; returns (model, extra keys)."""
    arrays, extra = load_snapshot(path)
    if "detector_config" not in extra:
        raise ContractError("snapshot carries no detector config")
    config = config_from_json(extra["detector_config"])
    template = init_model(config, np.random.default_rng(0))
    if set(template.params) != set(arrays):
        raise ContractError("snapshot parameter names do not match the config's architecture")
    mapping = {}
    for name, arr in arrays.items():
        if template.params[name].shape != arr.shape:
            raise ContractError(f"parameter {name!r} has shape {arr.shape}, expected {template.params[name].shape}")
        mapping[name] = Tensor(arr, grad_enabled=True)
    model = bind_params(template, mapping)
    model.trained_phases = list(extra.get("trained_phases", []))
    return model, {k: v for k, v in extra.items() if k not in ("detector_config", "trained_phases")}


# ---------------------------------------------------------------------------
# anchors and pooling
# ---------------------------------------------------------------------------

_ANCHOR_CACHE: dict = {}


def anchor_boxes(height: int, width: int, sizes) -> list:
    """Square anchors at every cell, ordered by (y1, x1, size)."""
    boxes = [
        (x, y, x + s, y + s)
        for y in range(height)
        for x in range(width)
        for s in sorted(sizes)
        if x + s <= width and y + s <= height
    ]
    if not boxes:
        raise ConfigError(f"no anchor of sizes {tuple(sizes)} fits a {height}x{width} map")
    return boxes


def _box_pool_matrix(height: int, width: int, boxes) -> np.ndarray:
    """Rows of 1/area over each box's cells; matmul against a flat map pools it."""
    mat = np.zeros((len(boxes), height * width))
    for i, (x1, y1, x2, y2) in enumerate(boxes):
        if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
            raise BoundsError(f"box {boxes[i]} outside {height}x{width} map")
        weight = 1.0 / ((x2 - x1) * (y2 - y1))
        for y in range(y1, y2):
            mat[i, y * width + x1 : y * width + x2] = weight
    return mat


def _anchor_pool(height: int, width: int, sizes) -> tuple:
    key = (height, width, tuple(sizes))
    if key not in _ANCHOR_CACHE:
        boxes = anchor_boxes(height, width, sizes)
        _ANCHOR_CACHE[key] = (boxes, _box_pool_matrix(height, width, boxes))
    return _ANCHOR_CACHE[key]


# ---------------------------------------------------------------------------
# offset parameterization
# ---------------------------------------------------------------------------


def encode_offsets(anchor: Box, gt: Box) -> tuple:
    """(dx, dy, dw, dh): center shift normalized by anchor size, log scales."""
    ax1, ay1, ax2, ay2 = anchor
    gx1, gy1, gx2, gy2 = gt
    aw, ah = ax2 - ax1, ay2 - ay1
    gw, gh = gx2 - gx1, gy2 - gy1
    dx = ((gx1 + gx2) / 2 - (ax1 + ax2) / 2) / aw
    dy = ((gy1 + gy2) / 2 - (ay1 + ay2) / 2) / ah
    return (dx, dy, math.log(gw / aw), math.log(gh / ah))


def decode_box(anchor: Box, offsets, clamp: float, height: int, width: int):
    """Apply predicted offsets to an anchor; None when clipped to nothing."""
    ax1, ay1, ax2, ay2 = anchor
    aw, ah = ax2 - ax1, ay2 - ay1
    dx, dy, dw, dh = (float(v) for v in offsets)
    cx = (ax1 + ax2) / 2 + dx * aw
    cy = (ay1 + ay2) / 2 + dy * ah
    w = aw * math.exp(min(max(dw, -clamp), clamp))
    h = ah * math.exp(min(max(dh, -clamp), clamp))
    x1 = min(max(cx - w / 2, 0.0), float(width))
    x2 = min(max(cx + w / 2, 0.0), float(width))
    y1 = min(max(cy - h / 2, 0.0), float(height))
    y2 = min(max(cy + h / 2, 0.0), float(height))
    if x2 - x1 <= 1e-9 or y2 - y1 <= 1e-9:
        return None
    return (x1, y1, x2, y2)


# ---------------------------------------------------------------------------
# forward stages
# ---------------------------------------------------------------------------


def backbone_stub(scene: SceneSample, model: DetectorModel) -> FeatureMap:
    """Learnable per-cell linear map + relu over the scene grid."""
    if scene.dim != model.config.dim:
        raise ShapeError(f"scene dim {scene.dim} != model dim {model.config.dim}")
    cells = Tensor(scene.grid.reshape(-1, scene.dim))
    p = model.params
    out = relu(add(matmul(cells, p["backbone.w"]), p["backbone.b"]))
    return FeatureMap(scene.height, scene.width, out)


def support_vectors(model: DetectorModel, shots: list) -> Tensor:
    """Backbone + box-mean pooling per shot, stacked to [K,d] (on tape)."""
    if not shots:
        raise EmptyInputError("no support shots")
    p = model.params
    rows = []
    for shot in shots:
        x1, y1, x2, y2 = shot.box
        region = shot.scene.grid[y1:y2, x1:x2, :].reshape(-1, shot.scene.dim)
        feats = relu(add(matmul(Tensor(region), p["backbone.w"]), p["backbone.b"]))
        pool = Tensor(np.full((1, region.shape[0]), 1.0 / region.shape[0]))
        rows.append(matmul(pool, feats))
    return concat_rows(rows) if len(rows) > 1 else rows[0]


def refine_supports(model: DetectorModel, point: str, supports: Tensor, mode: str = "eval", rng=None) -> Tensor:
    """ISAM refinement for aggregation point "a" or "b"; identity when off."""
    if not model.config.use_isam:
        return supports
    stack = {"a": model.isam_a, "b": model.isam_b}[point]
    return isam_refine(supports, stack, mode=mode, rng=rng)


@dataclass
class RpnOutputs:
    anchors: list
    pooled: Tensor
    scores: Tensor
    offsets: Tensor


def rpn_forward(model: DetectorModel, fm: FeatureMap) -> RpnOutputs:
    """Score and regress every anchor from its mean-pooled features."""
    boxes, pool = _anchor_pool(fm.height, fm.width, model.config.anchor_sizes)
    p = model.params
    pooled = matmul(Tensor(pool), fm.data)
    scores = add(matmul(pooled, p["rpn.w"]), p["rpn.b"])
    offsets = add(matmul(pooled, p["rpn.reg_w"]), p["rpn.reg_b"])
    return RpnOutputs(boxes, pooled, scores, offsets)


def select_proposals(rpn: RpnOutputs, top_k: int) -> list:
    """Indices of the top_k anchors by score; ties by (y1, x1, size)."""
    if top_k < 1:
        raise ParameterError("top_k must be >= 1")
    scores = rpn.scores.values[:, 0]
    order = sorted(
        range(len(rpn.anchors)),
        key=lambda i: (
            -scores[i],
            rpn.anchors[i][1],
            rpn.anchors[i][0],
            rpn.anchors[i][2] - rpn.anchors[i][0],
        ),
    )
    return order[: min(top_k, len(order))]


def propose(fm: FeatureMap, model: DetectorModel, top_k: int | None = None) -> list:
    """Top-scoring anchors as Proposal records."""
    rpn = rpn_forward(model, fm)
    picked = select_proposals(rpn, model.config.top_k if top_k is None else top_k)
    return [Proposal(rpn.anchors[i], float(rpn.scores.values[i, 0])) for i in picked]


def roi_extract(fm: FeatureMap, proposals) -> RoIFeatures:
    """Mean-pool the cells inside each proposal box (on tape)."""
    boxes = [p.box if isinstance(p, Proposal) else tuple(p) for p in proposals]
    if not boxes:
        raise EmptyInputError("no proposals to extract")
    pool = _box_pool_matrix(fm.height, fm.width, boxes)
    return RoIFeatures(boxes, matmul(Tensor(pool), fm.data))


def head_forward(model: DetectorModel, rois):
    """Detection head on aggregated RoI features.

    binary_match: rois is a Tensor [N, head_in]; returns ([N,2] logits, [N,4]
    offsets). multiclass: rois is a list of per-class Tensors in episode class
    order; returns ([N, C+1] logits with background first, list of per-class
    [N,4] offsets).
    """
    p = model.params
    cfg = model.config

    def one(features: Tensor):
        if features.shape[0] == 0:
            raise EmptyInputError("no RoI features")
        if features.shape[1] != cfg.head_in:
            raise ShapeError(f"head input width {features.shape[1]}, expected {cfg.head_in}")
        h = relu(add(matmul(features, p["head.hidden_w"]), p["head.hidden_b"]))
        offsets = add(matmul(h, p["head.box_w"]), p["head.box_b"])
        return h, offsets

    if cfg.head_mode == "binary_match":
        if not isinstance(rois, Tensor):
            raise ParameterError("binary_match head takes a single feature tensor")
        h, offsets = one(rois)
        logits = add(matmul(h, p["head.cls_w"]), p["head.cls_b"])
        return logits, offsets

    if not isinstance(rois, (list, tuple)) or not rois:
        raise EmptyInputError("multiclass head takes a nonempty list of per-class features")
    scores, offset_list = [], []
    n = rois[0].shape[0]
    for features in rois:
        if features.shape[0] != n:
            raise ShapeError("per-class feature row counts differ")
        h, offsets = one(features)
        scores.append(add(matmul(h, p["head.score_w"]), p["head.score_b"]))
        offset_list.append(offsets)
    background = matmul(Tensor(np.ones((n, 1))), p["head.bg"])
    logits = concat_cols([background] + scores)
    return logits, offset_list


# ---------------------------------------------------------------------------
# conditioning passes
# ---------------------------------------------------------------------------


@dataclass
class PassOutputs:
    """Everything one conditioning pass exposes to the loss."""

    anchors: list
    rpn_scores: Tensor
    rpn_offsets: Tensor
    roi_boxes: list
    det_logits: Tensor
    det_offsets: object  # Tensor (binary) or list of Tensors (multiclass)
    gt_boxes: list
    gt_labels: list
    target_class: int | None = None  # binary: the conditioned class
    class_order: list | None = None  # multiclass: logit column order


def _refined_protos(class_id: int, refined: Tensor) -> PrototypeSet:
    return PrototypeSet(class_id, refined, "per_sample", refined=True)


def binary_pass(
    model: DetectorModel,
    fm: FeatureMap,
    class_id: int,
    refined_a: Tensor,
    refined_b: Tensor,
    gt_boxes: list,
    gt_labels: list,
    mode: str = "eval",
    rng=None,
    top_k: int | None = None,
) -> PassOutputs:
    """One class-conditioned pipeline pass (match/no-match head)."""
    cfg = model.config
    if cfg.use_qsam:
        fm_a = query_spatial_aggregation(
            fm, _refined_protos(class_id, refined_a), model.pair_a(), mode=mode, rng=rng
        )
    else:
        proto = average_prototype(refined_a)
        fm_a = FeatureMap(fm.height, fm.width, baseline_aggregate(fm.data, proto, "mult"))
    rpn = rpn_forward(model, fm_a)
    picked = select_proposals(rpn, cfg.top_k if top_k is None else top_k)
    rois = roi_extract(fm_a, [rpn.anchors[i] for i in picked])
    if cfg.use_qsam:
        feats = query_roi_aggregation(
            rois, _refined_protos(class_id, refined_b), model.pair_b(), mode=mode, rng=rng
        ).data
    else:
        feats = baseline_aggregate(rois.data, average_prototype(refined_b), cfg.baseline_variant)
    logits, offsets = head_forward(model, feats)
    return PassOutputs(
        anchors=rpn.anchors,
        rpn_scores=rpn.scores,
        rpn_offsets=rpn.offsets,
        roi_boxes=rois.boxes,
        det_logits=logits,
        det_offsets=offsets,
        gt_boxes=list(gt_boxes),
        gt_labels=list(gt_labels),
        target_class=class_id,
    )


def multiclass_pass(
    model: DetectorModel,
    fm: FeatureMap,
    refined_b_by_class: dict,
    gt_boxes: list,
    gt_labels: list,
    mode: str = "eval",
    rng=None,
    top_k: int | None = None,
) -> PassOutputs:
    """One all-class pass: raw map feeds the proposal stage, fusion at RoIs."""
    cfg = model.config
    rpn = rpn_forward(model, fm)
    picked = select_proposals(rpn, cfg.top_k if top_k is None else top_k)
    rois = roi_extract(fm, [rpn.anchors[i] for i in picked])
    class_order = sorted(refined_b_by_class)
    feats = []
    for class_id in class_order:
        refined = refined_b_by_class[class_id]
        if cfg.use_qsam:
            feats.append(
                query_roi_aggregation(
                    rois, _refined_protos(class_id, refined), model.pair_b(), mode=mode, rng=rng
                ).data
            )
        else:
            feats.append(
                baseline_aggregate(rois.data, average_prototype(refined), cfg.baseline_variant)
            )
    logits, offsets = head_forward(model, feats)
    return PassOutputs(
        anchors=rpn.anchors,
        rpn_scores=rpn.scores,
        rpn_offsets=rpn.offsets,
        roi_boxes=rois.boxes,
        det_logits=logits,
        det_offsets=offsets,
        gt_boxes=list(gt_boxes),
        gt_labels=list(gt_labels),
        class_order=class_order,
    )


def meta_forward(model: DetectorModel, features: Tensor) -> Tensor:
    """Linear class logits over (refined) support vectors."""
    p = model.params
    return add(matmul(features, p["meta.w"]), p["meta.b"])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _best_match(box: Box, gt_boxes: list):
    """(gt index, iou) of the highest-IoU ground truth; first wins ties."""
    best, best_iou = None, 0.0
    for j, gt in enumerate(gt_boxes):
        v = iou(box, gt)
        if v > best_iou:
            best, best_iou = j, v
    return best, best_iou


def _anchor_assignment(anchors: list, gt_boxes: list):
    """Per anchor: 1 positive / 0 negative / -1 ignored, plus matched gt index."""
    labels, matched = [], []
    for anchor in anchors:
        j, v = _best_match(anchor, gt_boxes)
        if v >= ANCHOR_POS_IOU:
            labels.append(1)
            matched.append(j)
        elif v < ANCHOR_NEG_IOU:
            labels.append(0)
            matched.append(None)
        else:
            labels.append(-1)
            matched.append(None)
    return labels, matched


def _roi_assignment(roi_boxes: list, gt_boxes: list):
    """Per RoI: matched gt index at IoU >= 0.5, else None (background)."""
    return [
        j if v >= ROI_POS_IOU else None
        for j, v in (_best_match(box, gt_boxes) for box in roi_boxes)
    ]


def _zero() -> Tensor:
    return Tensor(0.0)


def _sum(parts: list) -> Tensor:
    if not parts:
        return _zero()
    total = parts[0]
    for part in parts[1:]:
        total = add(total, part)
    return total


def _objectness_loss(scores: Tensor, labeled: list, labels: list) -> Tensor:
    """Binary cross-entropy via 2-column logits [0, score] over labeled anchors."""
    picked = take_rows(scores, labeled)
    logits = concat_cols([Tensor(np.zeros((len(labeled), 1))), picked])
    return cross_entropy(logits, labels)


def compute_losses(passes: list, meta_logits: Tensor | None, meta_labels: list):
    """Five-term episode loss; returns (total tensor, LossBreakdown).

    rpn_cls: objectness cross-entropy over IoU-labeled anchors; rpn_loc /
    det_loc: smooth L1 on offsets of positive matches; det_cls: head
    cross-entropy (match/no-match or C+1-way); meta: support classification.
    Passes with no positive matches contribute 0 to the loc terms.
    """
    if not passes:
        raise EmptyInputError("no passes to score")
    rpn_loc_parts, rpn_cls_parts, det_loc_parts, det_cls_parts = [], [], [], []
    for ps in passes:
        binary = ps.target_class is not None
        if binary:
            gt = [b for b, l in zip(ps.gt_boxes, ps.gt_labels) if l == ps.target_class]
        else:
            if ps.class_order is None:
                raise ContractError("pass carries neither target_class nor class_order")
            unknown = set(ps.gt_labels) - set(ps.class_order)
            if unknown:
                raise ContractError(f"ground-truth labels outside episode classes: {sorted(unknown)}")
            gt = list(ps.gt_boxes)

        anchor_labels, anchor_match = _anchor_assignment(ps.anchors, gt)
        labeled = [i for i, l in enumerate(anchor_labels) if l != -1]
        if labeled:
            rpn_cls_parts.append(
                _objectness_loss(ps.rpn_scores, labeled, [anchor_labels[i] for i in labeled])
            )
        pos = [i for i, l in enumerate(anchor_labels) if l == 1]
        if pos:
            targets = np.array(
                [encode_offsets(ps.anchors[i], gt[anchor_match[i]]) for i in pos]
            )
            rpn_loc_parts.append(smooth_l1(take_rows(ps.rpn_offsets, pos), Tensor(targets)))

        roi_match = _roi_assignment(ps.roi_boxes, gt)
        if binary:
            det_labels = [0 if j is None else 1 for j in roi_match]
        else:
            column = {c: k + 1 for k, c in enumerate(ps.class_order)}
            gt_columns = [column[l] for l in ps.gt_labels]
            det_labels = [0 if j is None else gt_columns[j] for j in roi_match]
        det_cls_parts.append(cross_entropy(ps.det_logits, det_labels))

        pos_rois = [i for i, j in enumerate(roi_match) if j is not None]
        if pos_rois:
            targets = np.array(
                [encode_offsets(ps.roi_boxes[i], gt[roi_match[i]]) for i in pos_rois]
            )
            if binary:
                pred = take_rows(ps.det_offsets, pos_rois)
            else:
                pred = concat_rows(
                    [take_rows(ps.det_offsets[det_labels[i] - 1], [i]) for i in pos_rois]
                )
            det_loc_parts.append(smooth_l1(pred, Tensor(targets)))

    rpn_loc = _sum(rpn_loc_parts)
    rpn_cls = _sum(rpn_cls_parts)
    det_loc = _sum(det_loc_parts)
    det_cls = _sum(det_cls_parts)
    meta = cross_entropy(meta_logits, meta_labels) if meta_logits is not None else _zero()
    total = add(add(add(add(rpn_loc, rpn_cls), det_loc), det_cls), meta)
    breakdown = LossBreakdown(
        rpn_loc=float(rpn_loc),
        rpn_cls=float(rpn_cls),
        det_loc=float(det_loc),
        det_cls=float(det_cls),
        meta=float(meta),
        total=float(total),
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# inference post-processing
# ---------------------------------------------------------------------------


def nms(detections: list, iou_thresh: float) -> list:
    """Greedy suppression at IoU >= iou_thresh; candidates ranked by
    (-confidence, y1, x1, x2, y2)."""
    ranked = sorted(
        detections,
        key=lambda d: (-d.confidence, d.box[1], d.box[0], d.box[2], d.box[3]),
    )
    kept = []
    for det in ranked:
        if all(iou(det.box, k.box) < iou_thresh for k in kept):
            kept.append(det)
    return kept


def decode_detections(model: DetectorModel, outs: PassOutputs, height: int, width: int) -> list:
    """Detections from one pass: per-class softmax confidence, offset decode,
    confidence floor, per-class NMS. Deterministic."""
    cfg = model.config
    probs = softmax_rows(outs.det_logits).values
    results = []
    if outs.target_class is not None:
        columns = [(outs.target_class, 1, outs.det_offsets)]
    else:
        columns = [
            (class_id, k + 1, outs.det_offsets[k])
            for k, class_id in enumerate(outs.class_order)
        ]
    for class_id, col, offsets in columns:
        candidates = []
        for i, roi_box in enumerate(outs.roi_boxes):
            conf = float(probs[i, col])
            if conf < cfg.conf_floor:
                continue
            box = decode_box(roi_box, offsets.values[i], cfg.offset_clamp, height, width)
            if box is None:
                continue
            candidates.append(Detection(box, class_id, conf))
        results.extend(nms(candidates, cfg.nms_iou))
    return results
