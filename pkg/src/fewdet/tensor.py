"""Dense float64 tensors with a record/replay reverse-mode tape.

Tensors wrap C-contiguous float64 numpy arrays. Ops are module-level
functions returning new tensors; an op records itself on the innermost
active ``Tape`` when any input has ``grad_enabled`` set. ``backward`` replays
the tape once, in reverse recording order, and returns a dict mapping each
grad-enabled leaf tensor (one not produced by an op on that tape) to the
gradient of the loss with respect to it.

Numerics policy: tensor construction rejects NaN/Inf, so every op output is
checked at the moment it is wrapped; ``backward`` additionally rejects a
non-finite loss. Callers may update ``Tensor.values`` in place between tapes
(optimizer steps) but must never mutate values participating in a live tape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels as K
from .errors import (
    ContractError,
    DeterminismError,
    NumericsError,
    ParameterError,
    ShapeError,
    TapeError,
)

LAYER_NORM_EPS = 1e-5

_TAPES: list["Tape"] = []


class Tensor:
    """Immutable-by-convention view of a float64 array plus a gradient flag."""

    __slots__ = ("values", "grad_enabled")

    def __init__(self, values, grad_enabled: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.size and not np.isfinite(arr).all():
            raise NumericsError("tensor values must be finite")
        self.values = arr
        self.grad_enabled = bool(grad_enabled)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad_enabled={self.grad_enabled})"


class Tape:
    """Ordered op record. Enter to activate; back-propagate at most once."""

    __slots__ = ("_records", "_consumed")

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def reset(self) -> None:
        """Drop all records and allow the tape to be used again."""
        self._records.clear()
        self._consumed = False


def _emit(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it if a live tape is tracking its parents."""
    tape = _TAPES[-1] if _TAPES else None
    track = tape is not None and any(p.grad_enabled for p in parents)
    if track and tape._consumed:
        raise TapeError("cannot record ops on a consumed tape; reset it or open a new one")
    out = Tensor(values, grad_enabled=track)
    if track:
        tape._records.append((out, parents, backward_fn))
    return out


def _needs(parents: tuple[Tensor, ...]) -> tuple[bool, ...]:
    return tuple(p.grad_enabled for p in parents)


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss for every grad-enabled leaf on the tape.

    Consumes the tape. Leaves that the loss does not depend on are omitted
    from the result (their gradient is identically zero).
    """
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward call")
    if loss.values.ndim != 0:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if not math.isfinite(float(loss.values)):
        raise NumericsError("loss is not finite")

    produced = {id(out) for out, _, _ in tape._records}
    if id(loss) not in produced:
        raise TapeError("loss was not recorded on this tape")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    leaves: dict[int, Tensor] = {}
    for out, parents, backward_fn in reversed(tape._records):
        gy = grads.pop(id(out), None)
        if gy is None:
            continue
        for parent, grad in zip(parents, backward_fn(gy)):
            if grad is None or not parent.grad_enabled:
                continue
            key = id(parent)
            held = grads.get(key)
            grads[key] = grad if held is None else held + grad
            if key not in produced:
                leaves[key] = parent
    return {tensor: np.ascontiguousarray(grads[key]) for key, tensor in leaves.items()}


# ---------------------------------------------------------------------------
# Elementwise ops and broadcasting
# ---------------------------------------------------------------------------


def _broadcast_kind(a: Tensor, b) -> str:
    """Classify the supported operand pairings for add/sub/mul."""
    if isinstance(b, (int, float)):
        return "scalar"
    if not isinstance(b, Tensor):
        raise ParameterError(f"second operand must be a Tensor or number, got {type(b).__name__}")
    if a.shape == b.shape:
        return "same"
    if a.values.ndim == 2:
        if b.values.ndim == 1 and b.shape[0] == a.shape[1]:
            return "vector"
        if b.values.ndim == 2 and b.shape == (1, a.shape[1]):
            return "row"
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, kind: str) -> np.ndarray:
    if kind == "vector":
        return grad.sum(axis=0)
    if kind == "row":
        return grad.sum(axis=0, keepdims=True)
    return grad


def add(a: Tensor, b) -> Tensor:
    """a + b; b may be a matching tensor, a last-axis vector/row, or a number."""
    kind = _broadcast_kind(a, b)
    if kind == "scalar":
        need_a, = _needs((a,))
        return _emit(a.values + b, (a,), lambda g: (g if need_a else None,))
    out = a.values + b.values
    needs = _needs((a, b))
    return _emit(
        out,
        (a, b),
        lambda g: (g if needs[0] else None, _reduce_to(g, kind) if needs[1] else None),
    )


def sub(a: Tensor, b) -> Tensor:
    """a - b with the same operand pairings as add."""
    kind = _broadcast_kind(a, b)
    if kind == "scalar":
        need_a, = _needs((a,))
        return _emit(a.values - b, (a,), lambda g: (g if need_a else None,))
    out = a.values - b.values
    needs = _needs((a, b))
    return _emit(
        out,
        (a, b),
        lambda g: (g if needs[0] else None, _reduce_to(-g, kind) if needs[1] else None),
    )


def mul(a: Tensor, b) -> Tensor:
    """a * b (elementwise) with the same operand pairings as add."""
    kind = _broadcast_kind(a, b)
    if kind == "scalar":
        need_a, = _needs((a,))
        return _emit(a.values * b, (a,), lambda g: (g * b if need_a else None,))
    av, bv = a.values, b.values
    out = av * bv
    needs = _needs((a, b))
    return _emit(
        out,
        (a, b),
        lambda g: (
            g * bv if needs[0] else None,
            _reduce_to(g * av, kind) if needs[1] else None,
        ),
    )


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the gradient at exactly 0 is 0 (dead unit)."""
    mask = x.values > 0.0
    need, = _needs((x,))
    return _emit(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask if need else None,))


def mean(x: Tensor) -> Tensor:
    """Mean over all elements, as a 0-d tensor."""
    if x.size == 0:
        raise ShapeError("mean of an empty tensor is undefined")
    n = x.size
    shape = x.shape
    need, = _needs((x,))
    return _emit(
        x.values.mean(),
        (x,),
        lambda g: (np.full(shape, float(g) / n) if need else None,),
    )


def sum_all(x: Tensor) -> Tensor:
    """Sum over all elements, as a 0-d tensor."""
    shape = x.shape
    need, = _needs((x,))
    return _emit(x.values.sum(), (x,), lambda g: (np.full(shape, float(g)) if need else None,))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """a @ b, or a @ b.T when transpose_b is set. Both operands rank 2."""
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    inner_b = bv.shape[1] if transpose_b else bv.shape[0]
    if av.shape[1] != inner_b:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape} (transpose_b={transpose_b})")
    needs = _needs((a, b))
    if transpose_b:
        out = K.matmul_nt(av, bv)

        def bwd_nt(g):
            da = K.matmul(g, bv) if needs[0] else None
            db = K.matmul_tn(g, av) if needs[1] else None
            return da, db

        return _emit(out, (a, b), bwd_nt)

    out = K.matmul(av, bv)

    def bwd(g):
        da = K.matmul_nt(g, bv) if needs[0] else None
        db = K.matmul_tn(av, g) if needs[1] else None
        return da, db

    return _emit(out, (a, b), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a rank-2 tensor; each output row sums to 1."""
    if x.values.ndim != 2:
        raise ShapeError(f"softmax_rows needs a rank-2 tensor, got {x.shape}")
    if x.shape[1] == 0:
        raise ShapeError("softmax_rows over an empty row dimension is undefined")
    y = K.softmax_rows(x.values)
    need, = _needs((x,))
    return _emit(y, (x,), lambda g: (K.softmax_rows_backward(y, np.ascontiguousarray(g)) if need else None,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row of x: [m,d] to zero mean / unit variance, then gamma*xhat + beta."""
    if x.values.ndim != 2:
        raise ShapeError(f"layer_norm needs a rank-2 tensor, got {x.shape}")
    d = x.shape[1]
    if d == 0:
        raise ShapeError("layer_norm over an empty feature dimension is undefined")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    if not eps > 0.0:
        raise ParameterError(f"eps must be positive, got {eps}")
    y, xhat, inv_std = K.layer_norm_forward(x.values, gamma.values, beta.values, eps)
    gv = gamma.values
    needs = _needs((x, gamma, beta))

    def bwd(g):
        dx, dgamma, dbeta = K.layer_norm_backward(xhat, inv_std, gv, np.ascontiguousarray(g))
        return (
            dx if needs[0] else None,
            dgamma if needs[1] else None,
            dbeta if needs[2] else None,
        )

    return _emit(y, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows of a rank-2 tensor; duplicate indices accumulate gradient."""
    if x.values.ndim != 2:
        raise ShapeError(f"take_rows needs a rank-2 tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"indices must be 1-d, got shape {idx.shape}")
    m = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError(f"row index out of range for {m} rows")
    shape = x.shape
    need, = _needs((x,))

    def bwd(g):
        if not need:
            return (None,)
        dx = np.zeros(shape)
        np.add.at(dx, idx, g)
        return (dx,)

    return _emit(x.values[idx], (x,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-2 tensors along rows; all must share the column count."""
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    cols = parts[0].shape[1] if parts[0].values.ndim == 2 else None
    for p in parts:
        if p.values.ndim != 2 or p.shape[1] != cols:
            raise ShapeError("concat_rows operands must be rank-2 with equal column counts")
    counts = [p.shape[0] for p in parts]
    offsets = np.cumsum(counts)[:-1]
    needs = _needs(tuple(parts))

    def bwd(g):
        pieces = np.split(g, offsets, axis=0)
        return tuple(piece if need else None for piece, need in zip(pieces, needs))

    return _emit(np.concatenate([p.values for p in parts], axis=0), tuple(parts), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-2 tensors along columns; all must share the row count."""
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0] if parts[0].values.ndim == 2 else None
    for p in parts:
        if p.values.ndim != 2 or p.shape[0] != rows:
            raise ShapeError("concat_cols operands must be rank-2 with equal row counts")
    counts = [p.shape[1] for p in parts]
    offsets = np.cumsum(counts)[:-1]
    needs = _needs(tuple(parts))

    def bwd(g):
        pieces = np.split(g, offsets, axis=1)
        return tuple(
            np.ascontiguousarray(piece) if need else None for piece, need in zip(pieces, needs)
        )

    return _emit(np.concatenate([p.values for p in parts], axis=1), tuple(parts), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a rank-2 tensor."""
    if x.values.ndim != 2:
        raise ShapeError(f"slice_cols needs a rank-2 tensor, got {x.shape}")
    if not (0 <= start <= stop <= x.shape[1]):
        raise IndexError(f"column slice [{start}, {stop}) out of range for {x.shape[1]} columns")
    shape = x.shape
    need, = _needs((x,))

    def bwd(g):
        if not need:
            return (None,)
        dx = np.zeros(shape)
        dx[:, start:stop] = g
        return (dx,)

    return _emit(np.ascontiguousarray(x.values[:, start:stop]), (x,), bwd)


# ---------------------------------------------------------------------------
# Stochastic and loss ops
# ---------------------------------------------------------------------------


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability `rate` and scale by 1/(1-rate).

    Eval mode is the identity (returns the input tensor unchanged). Train mode
    draws one uniform sample per element from `rng`, also when rate is 0.
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not (0.0 <= rate < 1.0):
        raise ParameterError(f"rate must be in [0, 1), got {rate}")
    if mode == "eval":
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    need, = _needs((x,))
    return _emit(x.values * keep, (x,), lambda g: (g * keep if need else None,))


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Huber loss at transition 1, averaged over all elements.

    Per element: 0.5*t^2 if |t| < 1 else |t| - 0.5, where t = pred - target.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred/target shapes differ: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ShapeError("smooth_l1 of empty tensors is undefined")
    t = pred.values - target.values
    at = np.abs(t)
    per_elt = np.where(at < 1.0, 0.5 * t * t, at - 0.5)
    n = pred.size
    needs = _needs((pred, target))

    def bwd(g):
        dpred = np.clip(t, -1.0, 1.0) * (float(g) / n)
        return dpred if needs[0] else None, -dpred if needs[1] else None

    return _emit(np.float64(per_elt.mean()), (pred, target), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under row-wise softmax."""
    if logits.values.ndim != 2:
        raise ShapeError(f"logits must be rank-2, got {logits.shape}")
    m, c = logits.shape
    if m == 0 or c == 0:
        raise ShapeError(f"cross_entropy needs nonempty logits, got {logits.shape}")
    lab = np.asarray(labels, dtype=np.intp)
    if lab.shape != (m,):
        raise ShapeError(f"labels must have shape ({m},), got {lab.shape}")
    if lab.min() < 0 or lab.max() >= c:
        raise IndexError(f"label out of range for {c} classes")
    probs = K.softmax_rows(logits.values)
    picked = probs[np.arange(m), lab]
    loss = np.float64(-np.log(picked).mean())
    need, = _needs((logits,))

    def bwd(g):
        if not need:
            return (None,)
        dl = probs.copy()
        dl[np.arange(m), lab] -= 1.0
        dl *= float(g) / m
        return (dl,)

    return _emit(loss, (logits,), bwd)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference check."""

    max_rel_error: float
    per_input: dict[str, float]
    eps: float
    tolerance: float
    passed: bool

    def to_json(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "per_input": dict(sorted(self.per_input.items())),
            "eps": self.eps,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def finite_diff_check(
    fn: Callable[[dict[str, Tensor]], Tensor],
    inputs: Mapping[str, Tensor],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of fn against central finite differences.

    fn must be a deterministic scalar-valued function of the passed dict (two
    evaluations must agree bitwise, or DeterminismError is raised). Relative
    error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    if not inputs:
        raise ParameterError("finite_diff_check needs at least one input tensor")
    if not eps > 0.0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if not tolerance > 0.0:
        raise ParameterError(f"tolerance must be positive, got {tolerance}")

    probe = {name: Tensor(t.values.copy(), grad_enabled=True) for name, t in inputs.items()}

    def evaluate() -> float:
        out = fn(probe)
        if out.values.ndim != 0:
            raise ShapeError(f"fn must return a scalar, got shape {out.shape}")
        return float(out.values)

    first, second = evaluate(), evaluate()
    if first != second:
        raise DeterminismError(f"fn is not deterministic: {first!r} != {second!r}")

    with Tape() as tape:
        loss = fn(probe)
    grads = backward(loss, tape)

    per_input: dict[str, float] = {}
    worst = 0.0
    for name in sorted(probe):
        t = probe[name]
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros(t.shape)
        flat = t.values.reshape(-1)
        worst_here = 0.0
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = evaluate()
            flat[i] = original - eps
            f_minus = evaluate()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            if not (math.isfinite(numeric) and math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericsError(f"non-finite finite-difference probe for input {name!r}")
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst_here = max(worst_here, rel)
        per_input[name] = worst_here
        worst = max(worst, worst_here)

    return GradCheckReport(
        max_rel_error=worst,
        per_input=per_input,
        eps=eps,
        tolerance=tolerance,
        passed=worst <= tolerance,
    )


# ---------------------------------------------------------------------------
# Parameter snapshots
# ---------------------------------------------------------------------------

SNAPSHOT_FORMAT = "fewdet-params-v1"


def save_params(params: Mapping[str, Tensor], path, extra: Mapping | None = None) -> None:
    """Write named parameters as JSON, ordered by name, floats round-trip exact."""
    entries = []
    for name in sorted(params):
        arr = params[name].values if isinstance(params[name], Tensor) else np.asarray(params[name])
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "values": [float(v) for v in arr.reshape(-1)],
            }
        )
    doc = {"format": SNAPSHOT_FORMAT, "params": entries}
    if extra:
        for key, value in extra.items():
            if key in doc:
                raise ContractError(f"extra key {key!r} collides with the snapshot layout")
            doc[key] = value
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path) -> dict[str, np.ndarray]:
    """Read a snapshot written by save_params; returns name -> float64 array."""
    return load_snapshot(path)[0]


def load_snapshot(path) -> tuple[dict[str, np.ndarray], dict]:
    """Like load_params, but also returns the extra top-level keys."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != SNAPSHOT_FORMAT:
        raise ContractError(f"unrecognized snapshot format {doc.get('format')!r}")
    out: dict[str, np.ndarray] = {}
    for entry in doc["params"]:
        name, shape, values = entry["name"], tuple(entry["shape"]), entry["values"]
        if name in out:
            raise ContractError(f"duplicate parameter name {name!r} in snapshot")
        count = int(np.prod(shape)) if shape else 1
        if len(values) != count:
            raise ContractError(f"parameter {name!r}: {len(values)} values for shape {shape}")
        out[name] = np.asarray(values, dtype=np.float64).reshape(shape)
    extra = {k: v for k, v in doc.items() if k not in ("format", "params")}
    return out, extra
