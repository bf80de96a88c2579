"""CLI: config resolution, subcommand artifacts, determinism, exit codes."""

import json

import numpy as np
import numpy.testing as npt
import pytest

from fewdet.cli import (
    DEFAULTS,
    build_split,
    detector_config,
    format_config,
    main,
    parse_config_file,
    resolve_config,
)
from fewdet.detector import init_model
from fewdet.errors import ConfigError
from fewdet.evalkit import load_embeddings
from fewdet.tensor import GradCheckReport, load_snapshot

SMALL = [
    "--set", "world.height=8",
    "--set", "world.width=8",
    "--set", "world.dim=8",
    "--set", "world.n_base=3",
    "--set", "world.n_novel=2",
    "--set", "world.pool_scenes=12",
    "--set", "model.top_k=6",
    "--set", "train.base_iterations=5",
    "--set", "train.finetune_iterations=3",
    "--set", "eval.scenes=4",
]


def small_cfg(**over):
    cfg = resolve_config(None, [s for s in SMALL if s != "--set"])
    for key, value in over.items():
        cfg[key] = value
    return cfg


# ---------------------------------------------------------------------------
# config file and overrides
# ---------------------------------------------------------------------------


def test_parse_config_file_values_and_comments():
    text = """
    # world shape
    world.height = 12   # inline comment
    world.dim = 16

    model.use_qsam = false
    train.lr = 0.5
    model.anchor_sizes = 2,3
    """
    values = parse_config_file(text)
    assert values == {
        "world.height": 12,
        "world.dim": 16,
        "model.use_qsam": False,
        "train.lr": 0.5,
        "model.anchor_sizes": "2,3",
    }


def test_parse_config_file_rejects_unknown_key_by_name():
    with pytest.raises(ConfigError, match="world.depth"):
        parse_config_file("world.depth = 3")


def test_parse_config_file_rejects_malformed_line():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_file("world.height 12")


def test_coercion_failures_name_the_key():
    with pytest.raises(ConfigError, match="world.height"):
        parse_config_file("world.height = tall")
    with pytest.raises(ConfigError, match="model.use_isam"):
        parse_config_file("model.use_isam = yes")


def test_resolve_precedence_file_then_set(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("world.dim = 16\nrun.seed = 3\n")
    cfg = resolve_config(str(path), ["world.dim=20"])
    assert cfg["world.dim"] == 20  # flag wins over file
    assert cfg["run.seed"] == 3  # file wins over default
    assert cfg["world.height"] == DEFAULTS["world.height"]


def test_resolve_rejects_bad_values():
    with pytest.raises(ConfigError):
        resolve_config(None, ["train.lr=0"])
    with pytest.raises(ConfigError):
        resolve_config(None, ["model.anchor_sizes=two"])
    with pytest.raises(ConfigError):
        resolve_config(None, ["world.n_base=0"])
    with pytest.raises(ConfigError):
        resolve_config(None, ["no_such=1"])


def test_format_config_round_trips():
    cfg = resolve_config(None, ["model.use_qsam=false", "train.lr=0.25"])
    reparsed = parse_config_file(format_config(cfg))
    assert reparsed == cfg


def test_print_config_flag(capsys):
    assert main(["train", "--print-config", "--set", "world.dim=9"]) == 0
    out = capsys.readouterr().out
    assert parse_config_file(out)["world.dim"] == 9


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["train", "--bogus"])
    assert err.value.code == 2


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--set", "bogus.key=1", "--out", str(tmp_path)]) == 2
    assert main(["train"] + SMALL) == 2  # missing --out
    assert "config error" in capsys.readouterr().err


def test_gradcheck_failure_exits_1(monkeypatch, capsys):
    failing = GradCheckReport(
        max_rel_error=1.0, per_input={"x": 1.0}, eps=1e-5, tolerance=1e-4, passed=False
    )
    monkeypatch.setattr("fewdet.cli.gradcheck_suite", lambda eps, tolerance: [("stub", failing)])
    assert main(["gradcheck"]) == 1
    assert "FAIL stub" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# train / eval artifacts
# ---------------------------------------------------------------------------


def test_train_writes_snapshot_and_loss_trace(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out)] + SMALL) == 0
    params, extra = load_snapshot(out / "snapshot.params")
    assert extra["trained_phases"] == ["base", "finetune"]
    assert extra["run_config"]["world.dim"] == 8

    lines = [json.loads(l) for l in (out / "losses.jsonl").read_text().splitlines()]
    assert lines[0]["type"] == "config" and lines[0]["config"]["world.dim"] == 8
    losses = [l for l in lines if l["type"] == "loss"]
    assert [l["phase"] for l in losses] == ["base"] * 5 + ["finetune"] * 3
    for l in losses:
        parts = l["rpn_loc"] + l["rpn_cls"]
        parts = parts + l["det_loc"]
        parts = parts + l["det_cls"]
        parts = parts + l["meta"]
        assert l["total"] == parts  # exact left-fold sum, not approximate


def test_train_zero_iterations_snapshot_equals_init(tmp_path):
    out = tmp_path / "run"
    args = ["train", "--out", str(out)] + SMALL
    args += ["--set", "train.base_iterations=0", "--set", "train.finetune_iterations=0"]
    assert main(args) == 0
    params, extra = load_snapshot(out / "snapshot.params")
    assert extra["trained_phases"] == []

    cfg = small_cfg(**{"train.base_iterations": 0, "train.finetune_iterations": 0})
    fresh = init_model(detector_config(cfg), np.random.default_rng((0, 1)))
    assert set(params) == set(fresh.params)
    for name, arr in params.items():
        npt.assert_array_equal(arr, fresh.params[name].values, err_msg=name)


def test_eval_writes_metrics_with_config_echo(tmp_path):
    out = tmp_path / "run"
    main(["train", "--out", str(out)] + SMALL)
    ev = tmp_path / "eval"
    assert main(["eval", "--snapshot", str(out / "snapshot.params"), "--out", str(ev)]) == 0
    doc = json.loads((ev / "metrics.json").read_text())
    assert doc["config"]["world.dim"] == 8  # stored run config recovered
    assert doc["config"]["eval.scenes"] == 4
    assert 0.0 <= doc["mean_novel_ap50"] <= 1.0
    assert doc["k"] == doc["config"]["train.k_eval"]


def test_eval_rejects_mismatched_world(tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--out", str(out)] + SMALL)
    code = main(
        ["eval", "--snapshot", str(out / "snapshot.params"), "--out", str(tmp_path / "e")]
        + SMALL
        + ["--set", "world.dim=12"]
    )
    assert code == 2


def test_rerun_outputs_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        main(["train", "--out", str(out)] + SMALL)
        ev = tmp_path / f"{name}_eval"
        main(["eval", "--snapshot", str(out / "snapshot.params"), "--out", str(ev)])
        outs.append((out, ev))
    (out_a, ev_a), (out_b, ev_b) = outs
    assert (out_a / "snapshot.params").read_bytes() == (out_b / "snapshot.params").read_bytes()
    assert (out_a / "losses.jsonl").read_bytes() == (out_b / "losses.jsonl").read_bytes()
    assert (ev_a / "metrics.json").read_bytes() == (ev_b / "metrics.json").read_bytes()


# ---------------------------------------------------------------------------
# multi-seed harnesses
# ---------------------------------------------------------------------------


def test_compare_schema_and_parallel_determinism(tmp_path):
    fast = [s.replace("train.base_iterations=5", "train.base_iterations=3") for s in SMALL]
    serial, parallel = tmp_path / "serial", tmp_path / "parallel"
    for out, workers in ((serial, "1"), (parallel, "2")):
        code = main(
            ["compare", "--seeds", "2", "--workers", workers, "--out", str(out)] + fast
        )
        assert code == 0
    a = (serial / "metrics.json").read_bytes()
    b = (parallel / "metrics.json").read_bytes()
    assert a == b  # seed parallelism cannot change the payload

    doc = json.loads(a)
    assert set(doc["arms"]) == {"per_sample", "averaged"}
    for stats in doc["arms"].values():
        assert stats["runs"] == 2
        headline = stats["mean_novel_ap50"]
        assert set(headline) == {"mean", "std", "median"}
        assert set(stats["per_seed"]) == {"0", "1"}
    assert doc["config"]["world.dim"] == 8


def test_compare_k_flag_overrides_eval_shots(tmp_path):
    out = tmp_path / "cmp"
    code = main(["compare", "--seeds", "2", "--k", "2", "--workers", "1", "--out", str(out)] + SMALL)
    assert code == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["config"]["train.k_eval"] == 2


def test_ablate_covers_all_four_arms(tmp_path):
    out = tmp_path / "abl"
    code = main(["ablate", "--seeds", "2", "--workers", "2", "--out", str(out)] + SMALL)
    assert code == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert set(doc["arms"]) == {"baseline", "isam", "qsam", "full"}


def test_sweep_basek_keys_and_order(tmp_path):
    out = tmp_path / "swp"
    code = main(
        ["sweep-basek", "--k-values", "1,2", "--seeds", "2", "--workers", "2", "--out", str(out)]
        + SMALL
    )
    assert code == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["k_order"] == [1, 2]
    assert set(doc["k_values"]) == {"1", "2"}


def test_cluster_report_artifacts(tmp_path):
    out = tmp_path / "clu"
    code = main(["cluster-report", "--out", str(out)] + SMALL + ["--set", "cluster.k=4"])
    assert code == 0
    doc = json.loads((out / "cluster.json").read_text())
    for field in ("accuracy_raw", "accuracy_pre_isam", "accuracy_post_isam"):
        assert 0.0 <= doc[field] <= 1.0
    assert doc["config"]["cluster.k"] == 4

    cfg = small_cfg(**{"cluster.k": 4})
    split = build_split(cfg, cfg["run.seed"], k=4)
    assert doc["classes"] == split.novel_classes
    for stage in ("raw", "pre_isam", "post_isam"):
        values, labels, stages = load_embeddings(out / f"embeddings_{stage}.csv")
        assert values.shape == (4 * len(split.novel_classes), 8)
        assert set(stages) == {stage}
        assert sorted(set(labels)) == split.novel_classes


# ---------------------------------------------------------------------------
# gradcheck subcommand (full finite-difference audit)
# ---------------------------------------------------------------------------


def test_gradcheck_passes_and_writes_report(tmp_path, capsys):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "all checks passed" in printed
    doc = json.loads((out / "gradcheck.json").read_text())
    assert doc["passed"] is True
    assert doc["config"] == {"eps": 1e-5, "tolerance": 1e-4}
    assert len(doc["checks"]) >= 20
    assert all(check["passed"] for check in doc["checks"].values())
    assert "episode_loss_attention_arm" in doc["checks"]
    assert "episode_loss_baseline_arm" in doc["checks"]
