"""Query/support aggregation: attention-based paths and averaged baselines.

Two attention aggregation points exist in the detector: over the flattened
query feature map before the proposal stage, and over pooled RoI vectors
before the detection head. Each point owns an independent stack pair
(support-refinement encoder + query-side decoder). The baselines collapse the
support set to one averaged prototype and fuse it by elementwise arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionConfig,
    DecoderStack,
    EncoderStack,
    init_decoder_stack,
    init_encoder_stack,
    isam_refine,
    qsam_aggregate,
)
from .errors import ContractError, EmptyInputError, ParameterError, ShapeError
from .tensor import Tensor, concat_cols, matmul, mul, sub

PROTO_MODES = ("per_sample", "averaged")
BASELINE_VARIANTS = ("mult", "mult_sub_id")


@dataclass
class FeatureMap:
    """Spatial feature grid flattened row-major to a [H*W, d] tensor."""

    height: int
    width: int
    data: Tensor

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ParameterError("feature map must be at least 1x1")
        if self.data.shape[0] != self.height * self.width:
            raise ShapeError(
                f"data has {self.data.shape[0]} rows, expected {self.height * self.width}"
            )

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def cell(self, y: int, x: int) -> np.ndarray:
        """Feature vector of cell (y, x), shape [d]."""
        return self.data.values[y * self.width + x]


@dataclass
class RoIFeatures:
    """Pooled per-proposal vectors [N,d] aligned with their source boxes."""

    boxes: list[tuple[int, int, int, int]]
    data: Tensor

    def __post_init__(self):
        if self.data.shape[0] != len(self.boxes):
            raise ShapeError(
                f"{self.data.shape[0]} feature rows for {len(self.boxes)} boxes"
            )

    @property
    def count(self) -> int:
        return len(self.boxes)


@dataclass
class PrototypeSet:
    """Support prototypes for one class: K per-sample rows or one averaged row.

    `refined` marks vectors that already went through support refinement, so
    aggregation must not refine them again (this is how cached inference stays
    bit-identical to the uncached path).
    """

    class_id: int
    vectors: Tensor
    mode: str
    refined: bool = False

    def __post_init__(self):
        if self.mode not in PROTO_MODES:
            raise ParameterError(f"mode must be one of {PROTO_MODES}, got {self.mode!r}")
        if self.vectors.shape[0] < 1:
            raise EmptyInputError("prototype set needs at least one vector")
        if self.mode == "averaged" and self.vectors.shape[0] != 1:
            raise ContractError("averaged mode carries exactly one vector")

    @property
    def k(self) -> int:
        return self.vectors.shape[0]


@dataclass
class StackPair:
    """One aggregation point's attention weights: support encoder + query decoder.

    Either member may be absent when the corresponding module is disabled;
    an operation that needs the missing member raises ContractError.
    """

    isam: EncoderStack | None
    qsam: DecoderStack | None

    def __post_init__(self):
        if self.isam is None and self.qsam is None:
            raise ContractError("stack pair needs at least one stack")

    @property
    def model_dim(self) -> int:
        stack = self.isam if self.isam is not None else self.qsam
        return stack.config.model_dim


def init_stack_pair(config: AttentionConfig, rng: np.random.Generator) -> StackPair:
    return StackPair(isam=init_encoder_stack(config, rng), qsam=init_decoder_stack(config, rng))


def refine_prototypes(protos: PrototypeSet, stacks: StackPair, mode: str = "eval", rng=None) -> PrototypeSet:
    """Run support refinement once; already-refined sets pass through."""
    if protos.refined:
        return protos
    if stacks.isam is None:
        raise ContractError("prototypes need refinement but the pair has no encoder")
    refined = isam_refine(protos.vectors, stacks.isam, mode=mode, rng=rng)
    return PrototypeSet(protos.class_id, refined, protos.mode, refined=True)


def _check_dims(query_dim: int, protos: PrototypeSet, stacks: StackPair):
    if protos.mode != "per_sample":
        raise ContractError("attention aggregation requires per-sample prototypes")
    if stacks.qsam is None:
        raise ContractError("query aggregation needs a decoder stack")
    d = stacks.model_dim
    if query_dim != d or protos.vectors.shape[1] != d:
        raise ShapeError(
            f"dim mismatch: query d={query_dim}, prototypes d={protos.vectors.shape[1]}, stacks d={d}"
        )


def query_spatial_aggregation(
    fm: FeatureMap, protos: PrototypeSet, stacks: StackPair, mode: str = "eval", rng=None
) -> FeatureMap:
    """Aggregate every map cell against refined supports; layout preserved."""
    _check_dims(fm.dim, protos, stacks)
    refined = refine_prototypes(protos, stacks, mode=mode, rng=rng)
    out = qsam_aggregate(fm.data, refined.vectors, stacks.qsam, mode=mode, rng=rng)
    return FeatureMap(fm.height, fm.width, out)


def query_roi_aggregation(
    rois: RoIFeatures, protos: PrototypeSet, stacks: StackPair, mode: str = "eval", rng=None
) -> RoIFeatures:
    """Aggregate each pooled RoI vector against refined supports; boxes unchanged."""
    if rois.count == 0:
        raise EmptyInputError("no RoIs to aggregate")
    _check_dims(rois.data.shape[1], protos, stacks)
    refined = refine_prototypes(protos, stacks, mode=mode, rng=rng)
    out = qsam_aggregate(rois.data, refined.vectors, stacks.qsam, mode=mode, rng=rng)
    return RoIFeatures(rois.boxes, out)


def average_prototype(supports: Tensor) -> Tensor:
    """Arithmetic mean over support rows, as a [1,d] tensor (differentiable)."""
    k = supports.shape[0]
    if k == 0:
        raise EmptyInputError("cannot average an empty support set")
    weights = Tensor(np.full((1, k), 1.0 / k))
    return matmul(weights, supports)


def baseline_aggregate(query: Tensor, proto: Tensor, variant: str) -> Tensor:
    """Fuse a broadcast single prototype into query rows.

    mult        -> [q,d]  elementwise product
    mult_sub_id -> [q,3d] columns [query*proto, query-proto, query]
    """
    if variant not in BASELINE_VARIANTS:
        raise ParameterError(f"variant must be one of {BASELINE_VARIANTS}, got {variant!r}")
    if proto.shape[0] != 1 or proto.shape[1] != query.shape[1]:
        raise ShapeError(f"prototype {proto.shape} does not broadcast over query {query.shape}")
    if variant == "mult":
        return mul(query, proto)
    return concat_cols([mul(query, proto), sub(query, proto), query])
