"""Tensor ops, tape backward, finite-difference checker, snapshots."""

import json
import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import fewdet._kernels as kernels
from fewdet.errors import (
    ContractError,
    DeterminismError,
    NumericsError,
    ParameterError,
    ShapeError,
    TapeError,
)
from fewdet.tensor import (
    GradCheckReport,
    Tape,
    Tensor,
    add,
    backward,
    concat_cols,
    concat_rows,
    cross_entropy,
    dropout,
    finite_diff_check,
    layer_norm,
    load_params,
    matmul,
    mean,
    mul,
    relu,
    save_params,
    slice_cols,
    smooth_l1,
    softmax_rows,
    sub,
    sum_all,
    take_rows,
)


def t(values, grad=False):
    return Tensor(values, grad_enabled=grad)


def numeric_grad(fn, arrays_by_name, name, eps=1e-6):
    """Independent central-difference gradient of a float-valued function."""
    base = {k: v.copy() for k, v in arrays_by_name.items()}
    out = np.zeros_like(base[name])
    flat = base[name].reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(base)
        flat[i] = orig - eps
        f_minus = fn(base)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * eps)
    return out


# ---------------------------------------------------------------------------
# Tensor basics
# ---------------------------------------------------------------------------


def test_tensor_stores_contiguous_float64():
    x = t(np.asfortranarray(np.arange(6.0).reshape(2, 3)))
    assert x.values.flags.c_contiguous
    assert x.values.dtype == np.float64
    assert x.shape == (2, 3)
    assert x.size == 6


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericsError):
        t([1.0, np.inf])
    with pytest.raises(NumericsError):
        t([[np.nan]])


def test_op_output_overflow_is_an_error():
    # finite inputs, non-finite result: flagged at the op, not propagated
    x = t([1e308])
    with np.errstate(over="ignore"):
        with pytest.raises(NumericsError):
            mul(x, 10.0)


def test_scalar_item():
    assert t(3.5).item() == 3.5
    with pytest.raises(ShapeError):
        t([1.0, 2.0]).item()


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    b = t([[3.0, 4.0], [5.0, 6.0]])
    npt.assert_array_equal(matmul(t(np.eye(2)), b).values, b.values)


def test_matmul_zero():
    b = t([[7.0, -1.0], [2.0, 9.0]])
    npt.assert_array_equal(matmul(t(np.zeros((2, 2))), b).values, np.zeros((2, 2)))


def test_matmul_hand_expansion():
    a = t([[1.0, 2.0], [3.0, 4.0]])
    b = t([[5.0, 6.0], [7.0, 8.0]])
    npt.assert_array_equal(matmul(a, b).values, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        matmul(t(np.ones(3)), t(np.ones((3, 2))))


def test_matmul_transpose_b_matches_plain():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(6, 5))
    npt.assert_allclose(matmul(t(a), t(b), transpose_b=True).values, a @ b.T, rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(
    a=arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
    b=arrays(np.float64, (4, 2), elements=st.floats(-3, 3)),
    c=arrays(np.float64, (2, 3), elements=st.floats(-3, 3)),
)
def test_matmul_associativity(a, b, c):
    left = matmul(matmul(t(a), t(b)), t(c)).values
    right = matmul(t(a), matmul(t(b), t(c))).values
    npt.assert_allclose(left, right, atol=1e-9)


# ---------------------------------------------------------------------------
# softmax_rows
# ---------------------------------------------------------------------------


def test_softmax_uniform_row():
    y = softmax_rows(t([[2.0, 2.0, 2.0, 2.0]])).values
    npt.assert_allclose(y, np.full((1, 4), 0.25), rtol=1e-15)


def test_softmax_two_entry_row():
    y = softmax_rows(t([[0.0, math.log(3.0)]])).values
    npt.assert_allclose(y, [[0.25, 0.75]], rtol=1e-12)


def test_softmax_large_logit_no_overflow():
    y = softmax_rows(t([[1000.0, 0.0]])).values
    assert np.isfinite(y).all()
    npt.assert_allclose(y, [[1.0, 0.0]], atol=1e-15)


def test_softmax_empty_row_dimension():
    with pytest.raises(ShapeError):
        softmax_rows(t(np.zeros((2, 0))))


@settings(max_examples=50, deadline=None)
@given(x=arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    y = softmax_rows(t(x)).values
    assert (y >= 0).all()
    npt.assert_allclose(y.sum(axis=1), np.ones(4), atol=1e-9)


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    x = t(np.full((1, 5), 4.2))
    y = layer_norm(x, t(np.ones(5)), t(np.zeros(5))).values
    npt.assert_allclose(y, np.zeros((1, 5)), atol=1e-12)


def test_layer_norm_unit_variance_row():
    # row [1,-1]: mean 0, variance 1, so tiny eps leaves it unchanged
    y = layer_norm(t([[1.0, -1.0]]), t(np.ones(2)), t(np.zeros(2)), eps=1e-14).values
    npt.assert_allclose(y, [[1.0, -1.0]], rtol=1e-7)


def test_layer_norm_zero_gamma_gives_beta():
    x = t(np.random.default_rng(0).normal(size=(3, 4)))
    y = layer_norm(x, t(np.zeros(4)), t(np.full(4, 2.5))).values
    npt.assert_array_equal(y, np.full((3, 4), 2.5))


def test_layer_norm_dim_mismatch():
    with pytest.raises(ShapeError):
        layer_norm(t(np.ones((2, 3))), t(np.ones(4)), t(np.zeros(4)))
    with pytest.raises(ParameterError):
        layer_norm(t(np.ones((2, 3))), t(np.ones(3)), t(np.zeros(3)), eps=0.0)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def test_relu_signs():
    npt.assert_array_equal(relu(t([-1.0, 0.0, 2.0])).values, [0.0, 0.0, 2.0])


def test_add_zero_identity():
    x = t([[1.5, -2.0], [0.0, 3.0]])
    npt.assert_array_equal(add(x, 0.0).values, x.values)


def test_mean_hand_value():
    assert mean(t([1.0, 2.0, 3.0, 6.0])).item() == 3.0


def test_vector_broadcast_add_and_mul():
    x = t([[1.0, 2.0], [3.0, 4.0]])
    v = t([10.0, 20.0])
    npt.assert_array_equal(add(x, v).values, [[11.0, 22.0], [13.0, 24.0]])
    row = t([[2.0, 0.5]])
    npt.assert_array_equal(mul(x, row).values, [[2.0, 1.0], [6.0, 2.0]])


def test_incompatible_broadcast():
    with pytest.raises(ShapeError):
        add(t(np.ones((2, 3))), t(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        sub(t(np.ones((2, 3))), t(np.ones(2)))


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def test_dropout_eval_is_identity_bitwise():
    x = t(np.random.default_rng(1).normal(size=(7, 7)))
    out = dropout(x, 0.9, "eval")
    assert out is x  # identity, not a copy


def test_dropout_rate_zero_train():
    x = t(np.random.default_rng(2).normal(size=(5, 5)))
    out = dropout(x, 0.0, "train", rng=np.random.default_rng(0))
    npt.assert_array_equal(out.values, x.values)


def test_dropout_monte_carlo():
    rng = np.random.default_rng(42)
    x = t(np.ones(10_000))
    out = dropout(x, 0.5, "train", rng=rng).values
    survived = np.count_nonzero(out) / out.size
    assert abs(survived - 0.5) < 0.02
    # inverted scaling keeps the expectation
    assert abs(out.mean() - 1.0) < 0.05


def test_dropout_parameter_errors():
    x = t([1.0])
    with pytest.raises(ParameterError):
        dropout(x, 1.0, "train", rng=np.random.default_rng(0))
    with pytest.raises(ParameterError):
        dropout(x, -0.1, "eval")
    with pytest.raises(ParameterError):
        dropout(x, 0.5, "test")
    with pytest.raises(ParameterError):
        dropout(x, 0.5, "train")  # rng required


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_smooth_l1_values():
    assert smooth_l1(t([[1.0, 2.0]]), t([[1.0, 2.0]])).item() == 0.0
    assert smooth_l1(t([[0.5]]), t([[0.0]])).item() == pytest.approx(0.125, abs=1e-15)
    assert smooth_l1(t([[2.0]]), t([[0.0]])).item() == pytest.approx(1.5, abs=1e-15)


def test_smooth_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        smooth_l1(t(np.ones((2, 4))), t(np.ones((2, 3))))


def test_cross_entropy_uniform():
    logits = t(np.zeros((1, 4)))
    assert cross_entropy(logits, [2]).item() == pytest.approx(math.log(4.0), rel=1e-12)


def test_cross_entropy_saturated():
    logits = t([[100.0, 0.0, 0.0]])
    assert cross_entropy(logits, [0]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_mixed_rows():
    # one near-perfect row and one uniform row over 2 classes: mean of 0 and ln 2
    logits = t([[200.0, 0.0], [0.0, 0.0]])
    expected = math.log(2.0) / 2.0
    assert cross_entropy(logits, [0, 1]).item() == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(t(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


def test_backward_quadratic():
    x = t([[1.0, -2.0, 3.0]], grad=True)
    with Tape() as tape:
        loss = sum_all(mul(x, x))
    grads = backward(loss, tape)
    npt.assert_allclose(grads[x], 2.0 * x.values, rtol=1e-15)


def test_backward_dead_relu_units():
    x = t([[-1.0, -0.5, 2.0]], grad=True)
    with Tape() as tape:
        loss = sum_all(relu(x))
    grads = backward(loss, tape)
    npt.assert_array_equal(grads[x], [[0.0, 0.0, 1.0]])


def test_backward_matmul_matches_finite_differences():
    rng = np.random.default_rng(7)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def f(arrs):
        return float((arrs["a"] @ arrs["b"]).sum())

    a, b = t(a0, grad=True), t(b0, grad=True)
    with Tape() as tape:
        loss = sum_all(matmul(a, b))
    grads = backward(loss, tape)
    for name, tensor in (("a", a), ("b", b)):
        num = numeric_grad(f, {"a": a0, "b": b0}, name)
        rel = np.abs(grads[tensor] - num) / np.maximum(np.abs(num), 1e-8)
        assert rel.max() < 1e-6


def test_backward_accumulates_shared_input():
    x = t([[2.0]], grad=True)
    with Tape() as tape:
        loss = sum_all(add(mul(x, 3.0), mul(x, x)))  # 3x + x^2, grad 3 + 2x = 7
    grads = backward(loss, tape)
    npt.assert_allclose(grads[x], [[7.0]], rtol=1e-15)


def test_backward_omits_unused_leaves():
    x = t([[1.0]], grad=True)
    unused = t([[5.0]], grad=True)
    with Tape() as tape:
        loss = sum_all(mul(x, 2.0))
    grads = backward(loss, tape)
    assert x in grads and unused not in grads


def test_backward_rejects_non_scalar_loss():
    x = t([[1.0, 2.0]], grad=True)
    with Tape() as tape:
        y = mul(x, 2.0)
    with pytest.raises(ShapeError):
        backward(y, tape)


def test_backward_rejects_detached_loss():
    x = t([[1.0]], grad=True)
    with Tape() as tape:
        pass
    loss = sum_all(mul(x, 2.0))  # recorded nowhere: tape not active
    with pytest.raises(TapeError):
        backward(loss, tape)


def test_tape_single_use_and_reset():
    x = t([[1.0]], grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    backward(loss, tape)
    with pytest.raises(TapeError):
        backward(loss, tape)
    with pytest.raises(TapeError):
        with tape:
            sum_all(x)  # recording on a consumed tape
    tape.reset()
    with tape:
        loss2 = sum_all(mul(x, 4.0))
    grads = backward(loss2, tape)
    npt.assert_array_equal(grads[x], [[4.0]])


def test_no_tape_means_no_tracking():
    x = t([[1.0]], grad=True)
    y = mul(x, 2.0)
    assert not y.grad_enabled


def test_structural_ops_backward():
    x0 = np.arange(12.0).reshape(4, 3)
    x = t(x0, grad=True)
    with Tape() as tape:
        picked = take_rows(x, [2, 0, 2])  # duplicate row accumulates
        loss = sum_all(picked)
    grads = backward(loss, tape)
    expected = np.zeros((4, 3))
    expected[2] = 2.0
    expected[0] = 1.0
    npt.assert_array_equal(grads[x], expected)

    a, b = t(np.ones((2, 2)), grad=True), t(np.ones((2, 3)), grad=True)
    with Tape() as tape:
        joined = concat_cols([a, b])
        loss = sum_all(slice_cols(joined, 1, 4))
    grads = backward(loss, tape)
    npt.assert_array_equal(grads[a], [[0.0, 1.0], [0.0, 1.0]])
    npt.assert_array_equal(grads[b], [[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]])

    c, d = t(np.ones((1, 2)), grad=True), t(np.ones((3, 2)), grad=True)
    with Tape() as tape:
        loss = sum_all(mul(concat_rows([c, d]), 2.0))
    grads = backward(loss, tape)
    npt.assert_array_equal(grads[c], np.full((1, 2), 2.0))
    npt.assert_array_equal(grads[d], np.full((3, 2), 2.0))


def test_take_rows_out_of_range():
    with pytest.raises(IndexError):
        take_rows(t(np.ones((2, 2))), [0, 2])


# ---------------------------------------------------------------------------
# per-op finite-difference sweep
# ---------------------------------------------------------------------------

OP_CASES = {
    "matmul": lambda p: sum_all(matmul(p["a"], p["b"])),
    "matmul_nt": lambda p: sum_all(matmul(p["a"], p["c"], transpose_b=True)),
    "softmax": lambda p: sum_all(mul(softmax_rows(p["a"]), p["w"])),
    "layer_norm": lambda p: sum_all(mul(layer_norm(p["a"], p["g"], p["be"]), p["w"])),
    "add_vec": lambda p: sum_all(mul(add(p["a"], p["v"]), p["w"])),
    "sub_row": lambda p: sum_all(mul(sub(p["a"], p["r"]), p["w"])),
    "mul_same": lambda p: sum_all(mul(mul(p["a"], p["a2"]), p["w"])),
    "relu": lambda p: sum_all(mul(relu(p["a"]), p["w"])),
    "mean": lambda p: mean(mul(p["a"], p["w"])),
    "smooth_l1": lambda p: smooth_l1(p["a"], p["a2"]),
    "cross_entropy": lambda p: cross_entropy(p["a"], [1, 0, 3]),
    "structural": lambda p: sum_all(
        mul(concat_cols([take_rows(p["a"], [1, 0]), take_rows(slice_cols(p["a2"], 1, 3), [0, 1])]), 1.5)
    ),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", [0, 1])
def test_op_gradients_against_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    # modest magnitudes keep relu/smooth_l1 kinks away from the probe points
    params = {
        "a": Tensor(rng.uniform(-3, 3, size=(3, 4))),
        "a2": Tensor(rng.uniform(-3, 3, size=(3, 4))),
        "b": Tensor(rng.uniform(-3, 3, size=(4, 2))),
        "c": Tensor(rng.uniform(-3, 3, size=(5, 4))),
        "v": Tensor(rng.uniform(-3, 3, size=4)),
        "r": Tensor(rng.uniform(-3, 3, size=(1, 4))),
        "g": Tensor(rng.uniform(0.5, 2.0, size=4)),
        "be": Tensor(rng.uniform(-1, 1, size=4)),
        "w": Tensor(rng.uniform(-2, 2, size=(3, 4))),
    }
    report = finite_diff_check(OP_CASES[name], params, eps=1e-5, tolerance=1e-4)
    assert report.passed, f"{name}: max rel error {report.max_rel_error}"


# ---------------------------------------------------------------------------
# finite_diff_check behavior
# ---------------------------------------------------------------------------


def test_finite_diff_linear_is_exact():
    w = Tensor(np.random.default_rng(0).normal(size=(3, 2)))

    def fn(p):
        return sum_all(matmul(p["x"], w))

    # a wide step is exact for a linear map and avoids cancellation noise
    report = finite_diff_check(fn, {"x": Tensor(np.ones((2, 3)))}, eps=0.5, tolerance=1e-10)
    assert report.passed
    assert report.max_rel_error <= 1e-10


def test_finite_diff_detects_corrupted_gradient(monkeypatch):
    import fewdet._kernels as K

    true_bwd = K.softmax_rows_backward
    monkeypatch.setattr(K, "softmax_rows_backward", lambda y, gy: 1.1 * true_bwd(y, gy))

    def fn(p):
        return sum_all(mul(softmax_rows(p["x"]), Tensor([[1.0, -2.0, 0.5]])))

    report = finite_diff_check(fn, {"x": Tensor([[0.3, -0.7, 1.1]])}, eps=1e-5, tolerance=1e-4)
    assert not report.passed


def test_finite_diff_rejects_nondeterministic_fn():
    rng = np.random.default_rng(0)

    def fn(p):
        return sum_all(dropout(p["x"], 0.5, "train", rng=rng))

    # distinct magnitudes so two different masks cannot sum to the same value
    x = np.arange(1.0, 17.0).reshape(4, 4)
    with pytest.raises(DeterminismError):
        finite_diff_check(fn, {"x": Tensor(x)})


def test_finite_diff_parameter_validation():
    fn = lambda p: sum_all(p["x"])
    with pytest.raises(ParameterError):
        finite_diff_check(fn, {}, eps=1e-5)
    with pytest.raises(ParameterError):
        finite_diff_check(fn, {"x": Tensor([1.0])}, eps=0.0)


def test_gradcheck_report_pass_iff_within_tolerance():
    report = GradCheckReport(max_rel_error=2e-4, per_input={}, eps=1e-5, tolerance=1e-4, passed=False)
    assert report.passed == (report.max_rel_error <= report.tolerance)


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def test_snapshot_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(5)
    params = {
        "b.weight": Tensor(rng.normal(size=(3, 4)) * 1e-7),
        "a.bias": Tensor(rng.normal(size=4)),
        "scalar": Tensor(np.float64(0.1)),
    }
    path = tmp_path / "snap.params"
    save_params(params, path)
    loaded = load_params(path)
    assert sorted(loaded) == sorted(params)
    for name, tensor in params.items():
        npt.assert_array_equal(loaded[name], tensor.values)  # bit-exact round trip

    doc = json.loads(path.read_text())
    names = [entry["name"] for entry in doc["params"]]
    assert names == sorted(names)


def test_snapshot_rejects_bad_format(tmp_path):
    path = tmp_path / "bad.params"
    path.write_text(json.dumps({"format": "something-else", "params": []}))
    with pytest.raises(ContractError):
        load_params(path)


def test_snapshot_extra_metadata(tmp_path):
    path = tmp_path / "snap.params"
    save_params({"w": Tensor([1.0])}, path, extra={"config": {"seed": 3}})
    doc = json.loads(path.read_text())
    assert doc["config"] == {"seed": 3}
    with pytest.raises(ContractError):
        save_params({"w": Tensor([1.0])}, path, extra={"params": []})


# ---------------------------------------------------------------------------
# backend parity spot check (full sweep lives in test_kernels.py)
# ---------------------------------------------------------------------------


def test_ops_agree_across_backends():
    if "compiled" not in kernels.available_backends():
        pytest.skip("compiled backend not built")
    rng = np.random.default_rng(11)
    x = rng.normal(size=(5, 6))
    outs = {}
    for name in kernels.available_backends():
        with kernels.use_backend(name):
            outs[name] = softmax_rows(t(x)).values
    npt.assert_allclose(outs["compiled"], outs["fallback"], atol=1e-15)
