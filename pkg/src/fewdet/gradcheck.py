"""Finite-difference audit of every differentiable operation.

One named check per op plus composite checks for attention blocks and the
full episode loss on a 4x4 fixture (both the attention arm and the averaged
baseline arm). Shared by the CLI `gradcheck` subcommand and the acceptance
suite. All checks run in eval mode: dropout is inactive, so the probed
functions are deterministic.
"""

from __future__ import annotations

import numpy as np

from .attention import (
    AttentionConfig,
    MultiHeadParams,
    init_decoder_stack,
    init_encoder_stack,
    init_multi_head,
    isam_refine,
    multi_head,
    qsam_aggregate,
    replace_decoder_params,
    replace_encoder_params,
    scaled_dot_attention,
)
from .detector import (
    DetectorConfig,
    backbone_stub,
    bind_params,
    binary_pass,
    compute_losses,
    init_model,
    meta_forward,
    refine_supports,
    support_vectors,
)
from .tensor import (
    GradCheckReport,
    Tensor,
    add,
    concat_cols,
    concat_rows,
    cross_entropy,
    dropout,
    finite_diff_check,
    layer_norm,
    matmul,
    mean,
    mul,
    relu,
    slice_cols,
    smooth_l1,
    softmax_rows,
    sub,
    sum_all,
    take_rows,
)
from .world import Shot, generate_class_specs, render_scene

EPS = 1e-5
TOLERANCE = 1e-4


def _rand(rng, *shape, lo=-1.0, hi=1.0, avoid_zero=0.0):
    """Uniform values; |x| >= avoid_zero keeps probes away from kinks."""
    x = rng.uniform(lo, hi, size=shape)
    if avoid_zero:
        x = np.where(np.abs(x) < avoid_zero, np.sign(x) * avoid_zero + x, x)
    return x


def _weighted(out: Tensor, weight: np.ndarray) -> Tensor:
    """Non-uniform linear readout: catches transposed/misrouted gradients
    that a plain mean would cancel out."""
    return sum_all(mul(out, Tensor(weight)))


def _op_checks(rng) -> list:
    a = Tensor(_rand(rng, 3, 4))
    b = Tensor(_rand(rng, 3, 4))
    row = Tensor(_rand(rng, 1, 4))
    w34 = _rand(rng, 3, 4)
    w33 = _rand(rng, 3, 3)
    w35 = _rand(rng, 3, 5)
    m45 = Tensor(_rand(rng, 4, 5))
    m35 = Tensor(_rand(rng, 3, 5))
    gamma = Tensor(_rand(rng, 4, lo=0.5, hi=1.5))
    beta = Tensor(_rand(rng, 4))
    # relu probes stay away from the kink at 0, smooth_l1 from |diff| = 1
    relu_in = Tensor(_rand(rng, 3, 4, avoid_zero=0.05))
    pred = Tensor(_rand(rng, 3, 4, lo=-0.4, hi=0.4))
    target = Tensor(_rand(rng, 3, 4, lo=-0.4, hi=0.4))
    far = Tensor(_rand(rng, 3, 4, lo=2.0, hi=3.0))
    logits = Tensor(_rand(rng, 4, 3))
    labels = [0, 2, 1, 2]

    return [
        ("add", lambda p: _weighted(add(p["a"], p["b"]), w34), {"a": a, "b": b}),
        ("add_broadcast_row", lambda p: _weighted(add(p["a"], p["r"]), w34), {"a": a, "r": row}),
        ("sub", lambda p: _weighted(sub(p["a"], p["b"]), w34), {"a": a, "b": b}),
        ("mul", lambda p: _weighted(mul(p["a"], p["b"]), w34), {"a": a, "b": b}),
        ("mul_broadcast_row", lambda p: _weighted(mul(p["a"], p["r"]), w34), {"a": a, "r": row}),
        ("relu", lambda p: _weighted(relu(p["x"]), w34), {"x": relu_in}),
        ("mean", lambda p: mean(p["x"]), {"x": a}),
        ("sum_all", lambda p: sum_all(p["x"]), {"x": a}),
        ("matmul", lambda p: _weighted(matmul(p["a"], p["b"]), w35), {"a": a, "b": m45}),
        (
            "matmul_transpose_b",
            lambda p: _weighted(matmul(p["a"], p["b"], transpose_b=True), w33),
            {"a": a, "b": b},
        ),
        ("softmax_rows", lambda p: _weighted(softmax_rows(p["x"]), w34), {"x": a}),
        (
            "layer_norm",
            lambda p: _weighted(layer_norm(p["x"], p["g"], p["be"]), w34),
            {"x": a, "g": gamma, "be": beta},
        ),
        (
            "take_rows_with_repeats",
            lambda p, w=_rand(rng, 4, 4): _weighted(take_rows(p["x"], [0, 2, 2, 1]), w),
            {"x": a},
        ),
        (
            "concat_rows",
            lambda p, w=_rand(rng, 6, 4): _weighted(concat_rows([p["a"], p["b"]]), w),
            {"a": a, "b": b},
        ),
        (
            "concat_cols",
            lambda p, w=_rand(rng, 3, 9): _weighted(concat_cols([p["a"], p["b"]]), w),
            {"a": a, "b": m35},
        ),
        (
            "slice_cols",
            lambda p, w=_rand(rng, 3, 2): _weighted(slice_cols(p["x"], 1, 3), w),
            {"x": a},
        ),
        (
            "smooth_l1_quadratic_zone",
            lambda p: smooth_l1(p["p"], p["t"]),
            {"p": pred, "t": target},
        ),
        ("smooth_l1_linear_zone", lambda p: smooth_l1(p["p"], p["t"]), {"p": far, "t": pred}),
        ("cross_entropy", lambda p: cross_entropy(p["l"], labels), {"l": logits}),
        (
            "dropout_eval_identity",
            lambda p: _weighted(dropout(p["x"], 0.5, "eval"), w34),
            {"x": a},
        ),
    ]


def _attention_checks(rng) -> list:
    d, k, n = 6, 3, 4
    cfg = AttentionConfig(model_dim=d, heads=2, layers=1, mlp_hidden=d, dropout_rate=0.1)
    q = Tensor(_rand(rng, n, d))
    kv = Tensor(_rand(rng, k, d))
    w_nd = _rand(rng, n, d)
    w_kd = _rand(rng, k, d)

    enc = init_encoder_stack(cfg, rng)
    enc_inputs = dict(enc.named_params("enc."))
    enc_inputs["supports"] = kv

    def enc_fn(p):
        stack = replace_encoder_params(enc, p, "enc.")
        return _weighted(isam_refine(p["supports"], stack, mode="eval"), w_kd)

    dec = init_decoder_stack(cfg, rng)
    dec_inputs = dict(dec.named_params("dec."))
    dec_inputs["queries"] = q
    dec_inputs["supports"] = kv

    def dec_fn(p):
        stack = replace_decoder_params(dec, p, "dec.")
        return _weighted(qsam_aggregate(p["queries"], p["supports"], stack, mode="eval"), w_nd)

    mha = init_multi_head(cfg, rng)
    mha_inputs = {"q": q, "kv": kv, "wo": mha.wo}
    for h in range(cfg.heads):
        mha_inputs[f"wq{h}"] = mha.wq[h]
        mha_inputs[f"wk{h}"] = mha.wk[h]
        mha_inputs[f"wv{h}"] = mha.wv[h]

    def mha_fn(p):
        params = MultiHeadParams(
            wq=[p[f"wq{h}"] for h in range(cfg.heads)],
            wk=[p[f"wk{h}"] for h in range(cfg.heads)],
            wv=[p[f"wv{h}"] for h in range(cfg.heads)],
            wo=p["wo"],
        )
        return _weighted(multi_head(p["q"], p["kv"], p["kv"], params, cfg), w_nd)

    return [
        (
            "scaled_dot_attention",
            lambda p: _weighted(scaled_dot_attention(p["q"], p["k"], p["v"]), w_nd),
            {"q": q, "k": kv, "v": kv},
        ),
        ("multi_head_attention", mha_fn, mha_inputs),
        ("encoder_stack", enc_fn, enc_inputs),
        ("decoder_stack", dec_fn, dec_inputs),
    ]


def episode_loss_fn(model, size: int = 4):
    """Scalar five-term loss of a fixed two-class episode on a size x size grid."""
    specs = generate_class_specs(2, model.config.dim, 1, seed=3)

    def scene(seed, class_id):
        return render_scene(specs, 1, size, size, noise=0.2, seed=seed, classes=[class_id])

    query = scene(41, 0)
    shots = {
        0: [Shot(s, s.boxes[0]) for s in (scene(42, 0), scene(43, 0))],
        1: [Shot(s, s.boxes[0]) for s in (scene(44, 1), scene(45, 1))],
    }

    def fn(params):
        m = bind_params(model, params)
        fm = backbone_stub(query, m)
        passes, feats = [], []
        for class_id in (0, 1):
            sup = support_vectors(m, shots[class_id])
            ra = refine_supports(m, "a", sup)
            rb = refine_supports(m, "b", sup)
            passes.append(binary_pass(m, fm, class_id, ra, rb, query.boxes, query.labels))
            feats.append(rb)
        logits = meta_forward(m, concat_rows(feats))
        total, _ = compute_losses(passes, logits, [0, 0, 1, 1])
        return total

    return fn


def _end_to_end_checks() -> list:
    d = 8
    attn = AttentionConfig(model_dim=d, heads=2, layers=1, mlp_hidden=d, dropout_rate=0.1)
    full = init_model(
        DetectorConfig(
            dim=d, n_meta_classes=2, attention=attn, anchor_sizes=(2,), top_k=12
        ),
        np.random.default_rng(20),
    )
    base = init_model(
        DetectorConfig(
            dim=d,
            n_meta_classes=2,
            use_isam=False,
            use_qsam=False,
            baseline_variant="mult_sub_id",
            anchor_sizes=(2,),
            top_k=12,
        ),
        np.random.default_rng(21),
    )
    return [
        ("episode_loss_attention_arm", episode_loss_fn(full), full.params),
        ("episode_loss_baseline_arm", episode_loss_fn(base), base.params),
    ]


def gradcheck_suite(eps: float = EPS, tolerance: float = TOLERANCE) -> list:
    """Run every check; returns [(name, GradCheckReport)] in a fixed order."""
    rng = np.random.default_rng(99)
    checks = _op_checks(rng) + _attention_checks(rng) + _end_to_end_checks()
    return [
        (name, finite_diff_check(fn, inputs, eps=eps, tolerance=tolerance))
        for name, fn, inputs in checks
    ]


def suite_passed(results: list) -> bool:
    return all(report.passed for _, report in results)
