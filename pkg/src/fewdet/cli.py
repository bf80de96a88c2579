"""Command-line entry point binding the modules into reproducible experiments.

Subcommands: gradcheck, train, eval, ablate, compare, cluster-report,
sweep-basek. Configuration is a flat `key = value` file with dotted keys and
'#' comments; --set KEY=VALUE flags override file values; --print-config
emits the resolved configuration and exits. Every JSON artifact embeds the
resolved config. Exit codes: 0 success, 1 property or run failure, 2 usage
or configuration error.

Per run seed s the random streams are fixed: the class signatures come from
world.seed, the split from s, model init from (s, 1), base training from
(s, 2), finetuning from (s, 3), eval scenes from (s, 4). Reruns with equal
configs are byte-identical; multi-seed sweeps parallelize across seeds with
each seed single-threaded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from statistics import median

import numpy as np

from .attention import AttentionConfig
from .detector import DetectorConfig, init_model, load_model, save_model
from .errors import ConfigError, ContractError, FewdetError
from .evalkit import ClusterReport, centroid_accuracy, export_embeddings, mean_std, multi_run_stats
from .gradcheck import gradcheck_suite, suite_passed
from .trainer import (
    TrainConfig,
    build_prototype_cache,
    evaluate,
    finetune,
    support_feature_stages,
    train_phase,
)
from .world import WorldConfig, generate_class_specs, make_eval_scenes, make_split

DEFAULTS = {
    "world.height": 10,
    "world.width": 10,
    "world.dim": 12,
    "world.n_base": 5,
    "world.n_novel": 3,
    "world.modes_per_class": 3,
    "world.mode_spread": 0.25,
    "world.bg_noise": 0.3,
    "world.signature_scale": 3.0,
    "world.min_signature_dist": 2.0,
    "world.min_instances": 1,
    "world.max_instances": 2,
    "world.box_min": 2,
    "world.box_max": 4,
    "world.pool_scenes": 24,
    "world.seed": 0,
    "model.head_mode": "binary_match",
    "model.use_isam": True,
    "model.use_qsam": True,
    "model.baseline_variant": "mult_sub_id",
    "model.heads": 2,
    "model.layers": 1,
    "model.mlp_hidden": 0,  # 0 means: use world.dim
    "model.dropout": 0.1,
    "model.anchor_sizes": "2,4",
    "model.top_k": 8,
    "model.conf_floor": 0.05,
    "model.nms_iou": 0.5,
    "train.base_iterations": 200,
    "train.finetune_iterations": 80,
    "train.k_train": 3,
    "train.k_eval": 5,
    "train.lr": 0.01,
    "train.episode_style": "pairwise",
    "eval.scenes": 10,
    "cluster.k": 10,
    "cluster.classes": "novel",
    "run.seed": 0,
    "run.seeds": 10,
}


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def _coerce(key: str, raw: str):
    """Parse a raw string against the type of the key's default."""
    default = DEFAULTS[key]
    if isinstance(default, bool):
        lowered = raw.strip().lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def parse_config_file(text: str) -> dict:
    """`key = value` per line; '#' starts a comment; blank lines ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(config_path: str | None, sets: list) -> dict:
    """defaults <- file <- --set overrides, all validated."""
    cfg = dict(DEFAULTS)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {config_path}")
        cfg.update(parse_config_file(path.read_text()))
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, raw)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    positive = (
        "world.height", "world.width", "world.dim", "world.n_base", "world.n_novel",
        "world.modes_per_class", "world.pool_scenes", "model.heads", "model.layers",
        "model.top_k", "train.k_train", "train.k_eval", "eval.scenes", "cluster.k",
        "run.seeds",
    )
    for key in positive:
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1, got {cfg[key]}")
    for key in ("train.base_iterations", "train.finetune_iterations"):
        if cfg[key] < 0:
            raise ConfigError(f"{key} must be >= 0, got {cfg[key]}")
    if not cfg["train.lr"] > 0:
        raise ConfigError(f"train.lr must be positive, got {cfg['train.lr']}")
    if cfg["cluster.classes"] not in ("novel", "all"):
        raise ConfigError(f"cluster.classes must be novel or all, got {cfg['cluster.classes']!r}")
    _parse_sizes(cfg["model.anchor_sizes"])


def _parse_sizes(raw: str) -> tuple:
    try:
        sizes = tuple(int(part) for part in str(raw).split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"model.anchor_sizes: cannot parse {raw!r}") from None
    if not sizes or any(s < 1 for s in sizes):
        raise ConfigError(f"model.anchor_sizes must be positive integers, got {raw!r}")
    return sizes


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def world_config(cfg: dict) -> WorldConfig:
    return WorldConfig(
        height=cfg["world.height"],
        width=cfg["world.width"],
        dim=cfg["world.dim"],
        n_base=cfg["world.n_base"],
        n_novel=cfg["world.n_novel"],
        modes_per_class=cfg["world.modes_per_class"],
        mode_spread=cfg["world.mode_spread"],
        bg_noise=cfg["world.bg_noise"],
        signature_scale=cfg["world.signature_scale"],
        min_signature_dist=cfg["world.min_signature_dist"],
        min_instances=cfg["world.min_instances"],
        max_instances=cfg["world.max_instances"],
        box_min=cfg["world.box_min"],
        box_max=cfg["world.box_max"],
        pool_scenes=cfg["world.pool_scenes"],
    )


def build_split(cfg: dict, seed: int, k: int):
    wc = world_config(cfg)
    specs = generate_class_specs(
        wc.n_classes,
        wc.dim,
        wc.modes_per_class,
        seed=cfg["world.seed"],
        mode_spread=wc.mode_spread,
        signature_scale=wc.signature_scale,
        min_distance=wc.min_signature_dist,
    )
    return make_split(specs, wc.n_base, wc.n_novel, k=k, seed=seed, config=wc)


def detector_config(cfg: dict) -> DetectorConfig:
    attention = None
    if cfg["model.use_isam"] or cfg["model.use_qsam"]:
        attention = AttentionConfig(
            model_dim=cfg["world.dim"],
            heads=cfg["model.heads"],
            layers=cfg["model.layers"],
            mlp_hidden=cfg["model.mlp_hidden"] or cfg["world.dim"],
            dropout_rate=cfg["model.dropout"],
        )
    return DetectorConfig(
        dim=cfg["world.dim"],
        n_meta_classes=cfg["world.n_base"] + cfg["world.n_novel"],
        head_mode=cfg["model.head_mode"],
        use_isam=cfg["model.use_isam"],
        use_qsam=cfg["model.use_qsam"],
        baseline_variant=cfg["model.baseline_variant"],
        attention=attention,
        anchor_sizes=_parse_sizes(cfg["model.anchor_sizes"]),
        top_k=cfg["model.top_k"],
        conf_floor=cfg["model.conf_floor"],
        nms_iou=cfg["model.nms_iou"],
    )


def _train_config(cfg: dict, phase: str) -> TrainConfig:
    iterations = cfg["train.base_iterations"] if phase == "base" else cfg["train.finetune_iterations"]
    return TrainConfig(
        phase=phase,
        iterations=iterations,
        k_train=cfg["train.k_train"],
        k_eval=cfg["train.k_eval"],
        lr=cfg["train.lr"],
        episode_style=cfg["train.episode_style"],
    )


def train_and_eval(cfg: dict, seed: int, labels=None):
    """Full per-seed pipeline: split, init, base + finetune, cache, AP50."""
    split = build_split(cfg, seed, k=cfg["train.k_eval"])
    model = init_model(detector_config(cfg), np.random.default_rng((seed, 1)))
    base_trace = train_phase(model, split, _train_config(cfg, "base"), np.random.default_rng((seed, 2)))
    ft_trace = []
    if cfg["train.finetune_iterations"] > 0:
        ft_trace = finetune(model, split, _train_config(cfg, "finetune"), np.random.default_rng((seed, 3)))
    cache = build_prototype_cache(model, split)
    scenes = make_eval_scenes(split, cfg["eval.scenes"], seed=(seed, 4))
    report = evaluate(model, split, scenes, cache, seed=seed, labels=labels)
    return model, split, base_trace, ft_trace, report


def _seed_job(args):
    cfg, seed, labels = args
    return train_and_eval(cfg, seed, labels=labels)[4]


def run_seeds(cfg: dict, seeds: list, labels: dict, workers: int) -> list:
    jobs = [(cfg, seed, labels) for seed in seeds]
    if workers <= 1 or len(jobs) <= 1:
        return [_seed_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_seed_job, jobs))


def arm_stats(reports: list) -> dict:
    values = [r.mean_novel_ap50 for r in reports]
    if len(values) >= 2:
        m, s = mean_std(values)
    else:
        m, s = values[0], None
    stats = {
        "runs": len(reports),
        "mean_novel_ap50": {"mean": m, "std": s, "median": median(values)},
        "per_seed": {str(r.seed): r.mean_novel_ap50 for r in reports},
    }
    try:
        stats["per_class_ap50"] = multi_run_stats(reports)["per_class_ap50"]
    except ContractError:
        pass  # class coverage differs across seeds; the headline stats stand
    return stats


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out DIR is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed_list(cfg: dict, args) -> list:
    count = args.seeds if getattr(args, "seeds", None) else cfg["run.seeds"]
    if count < 1:
        raise ConfigError(f"--seeds must be >= 1, got {count}")
    return list(range(count))


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return args.workers
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gradcheck(args, cfg: dict) -> int:
    results = gradcheck_suite(eps=args.eps, tolerance=args.tolerance)
    for name, report in results:
        flag = "PASS" if report.passed else "FAIL"
        print(f"{flag} {name}: max_rel_error={report.max_rel_error:.3e}")
    ok = suite_passed(results)
    print(f"gradcheck: {'all checks passed' if ok else 'FAILURES detected'} ({len(results)} checks)")
    if args.out:
        payload = {
            "config": {"eps": args.eps, "tolerance": args.tolerance},
            "checks": {name: report.to_json() for name, report in results},
            "passed": ok,
        }
        write_json(_out_dir(args) / "gradcheck.json", payload)
    return 0 if ok else 1


def cmd_train(args, cfg: dict) -> int:
    out = _out_dir(args)
    model, _, base_trace, ft_trace, _ = train_and_eval(cfg, cfg["run.seed"])
    lines = [json.dumps({"type": "config", "config": cfg}, sort_keys=True)]
    for phase, trace in (("base", base_trace), ("finetune", ft_trace)):
        for step, breakdown in enumerate(trace):
            record = {"type": "loss", "phase": phase, "step": step}
            record.update(asdict(breakdown))
            lines.append(json.dumps(record, sort_keys=True))
    (out / "losses.jsonl").write_text("\n".join(lines) + "\n")
    save_model(model, out / "snapshot.params", extra={"run_config": cfg})
    print(f"trained {len(base_trace)} base + {len(ft_trace)} finetune steps -> {out / 'snapshot.params'}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    out = _out_dir(args)
    model, extra = load_model(args.snapshot)
    if args.config is None and not args.set and "run_config" in extra:
        stored = {k: v for k, v in extra["run_config"].items() if k in DEFAULTS}
        cfg = dict(DEFAULTS)
        cfg.update(stored)
        _validate(cfg)
    if model.config.dim != cfg["world.dim"]:
        raise ConfigError(
            f"snapshot dim {model.config.dim} does not match world.dim {cfg['world.dim']}"
        )
    seed = cfg["run.seed"]
    split = build_split(cfg, seed, k=cfg["train.k_eval"])
    cache = build_prototype_cache(model, split)
    scenes = make_eval_scenes(split, cfg["eval.scenes"], seed=(seed, 4))
    report = evaluate(model, split, scenes, cache, seed=seed)
    payload = {"config": cfg}
    payload.update(report.to_json())
    write_json(out / "metrics.json", payload)
    print(f"mean novel AP50 = {report.mean_novel_ap50:.4f} -> {out / 'metrics.json'}")
    return 0


ABLATION_ARMS = (
    ("baseline", {"model.use_isam": False, "model.use_qsam": False}),
    ("isam", {"model.use_isam": True, "model.use_qsam": False}),
    ("qsam", {"model.use_isam": False, "model.use_qsam": True}),
    ("full", {"model.use_isam": True, "model.use_qsam": True}),
)


def cmd_ablate(args, cfg: dict) -> int:
    out = _out_dir(args)
    seeds = _seed_list(cfg, args)
    arms = {}
    for name, overrides in ABLATION_ARMS:
        arm_cfg = dict(cfg)
        arm_cfg.update(overrides)
        reports = run_seeds(arm_cfg, seeds, {"arm": name}, _workers(args))
        arms[name] = arm_stats(reports)
        print(f"{name}: median novel AP50 = {arms[name]['mean_novel_ap50']['median']:.4f}")
    write_json(out / "metrics.json", {"config": cfg, "arms": arms})
    return 0


def cmd_compare(args, cfg: dict) -> int:
    out = _out_dir(args)
    if args.k:
        cfg = dict(cfg)
        cfg["train.k_eval"] = args.k
    seeds = _seed_list(cfg, args)
    arms = {}
    for name, use_qsam in (("per_sample", True), ("averaged", False)):
        arm_cfg = dict(cfg)
        arm_cfg["model.use_qsam"] = use_qsam
        reports = run_seeds(arm_cfg, seeds, {"arm": name}, _workers(args))
        arms[name] = arm_stats(reports)
        print(f"{name}: median novel AP50 = {arms[name]['mean_novel_ap50']['median']:.4f}")
    write_json(out / "metrics.json", {"config": cfg, "arms": arms})
    return 0


def cmd_cluster_report(args, cfg: dict) -> int:
    out = _out_dir(args)
    seed = cfg["run.seed"]
    if args.snapshot:
        model, _ = load_model(args.snapshot)
        if model.config.dim != cfg["world.dim"]:
            raise ConfigError(
                f"snapshot dim {model.config.dim} does not match world.dim {cfg['world.dim']}"
            )
    else:
        split = build_split(cfg, seed, k=cfg["train.k_eval"])
        model = init_model(detector_config(cfg), np.random.default_rng((seed, 1)))
        train_phase(model, split, _train_config(cfg, "base"), np.random.default_rng((seed, 2)))
    cluster_split = build_split(cfg, seed, k=cfg["cluster.k"])
    classes = (
        cluster_split.novel_classes if cfg["cluster.classes"] == "novel" else cluster_split.all_classes
    )
    raw, pre, post, labels = support_feature_stages(model, cluster_split, classes=classes)
    report = ClusterReport(
        accuracy_raw=centroid_accuracy(raw, labels),
        accuracy_pre_isam=centroid_accuracy(pre, labels),
        accuracy_post_isam=centroid_accuracy(post, labels),
    )
    payload = {"config": cfg, "classes": list(classes)}
    payload.update(report.to_json())
    write_json(out / "cluster.json", payload)
    for stage, features in (("raw", raw), ("pre_isam", pre), ("post_isam", post)):
        export_embeddings(features, labels, stage, out / f"embeddings_{stage}.csv")
    print(
        f"centroid accuracy raw={report.accuracy_raw:.3f} "
        f"pre={report.accuracy_pre_isam:.3f} post={report.accuracy_post_isam:.3f}"
    )
    return 0


def cmd_sweep_basek(args, cfg: dict) -> int:
    out = _out_dir(args)
    try:
        k_values = [int(part) for part in args.k_values.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--k-values expects comma-separated integers, got {args.k_values!r}") from None
    if not k_values or any(k < 1 for k in k_values):
        raise ConfigError(f"--k-values must be positive, got {args.k_values!r}")
    seeds = _seed_list(cfg, args)
    sweep = {}
    for k in k_values:
        arm_cfg = dict(cfg)
        arm_cfg["train.k_train"] = k
        reports = run_seeds(arm_cfg, seeds, {"base_k": str(k)}, _workers(args))
        sweep[str(k)] = arm_stats(reports)
        print(f"base K={k}: median novel AP50 = {sweep[str(k)]['mean_novel_ap50']['median']:.4f}")
    write_json(out / "metrics.json", {"config": cfg, "k_order": k_values, "k_values": sweep})
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewdet",
        description="Few-shot detection experiments on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file with dotted keys")
        sp.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config value (repeatable)",
        )
        sp.add_argument("--out", help="output directory for artifacts")
        sp.add_argument(
            "--print-config", action="store_true", help="print the resolved config and exit"
        )

    p = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    common(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("train", help="base + finetune run; writes snapshot and loss trace")
    common(p)

    p = sub.add_parser("eval", help="AP50 of a snapshot on freshly generated eval scenes")
    common(p)
    p.add_argument("--snapshot", required=True, help="model snapshot from `train`")

    p = sub.add_parser("ablate", help="2x2 attention-module ablation, multi-seed")
    common(p)
    p.add_argument("--seeds", type=int, help="number of seeds (default run.seeds)")
    p.add_argument("--workers", type=int, help="parallel seed workers (default: cpu count)")

    p = sub.add_parser("compare", help="per-sample vs averaged prototypes, multi-seed")
    common(p)
    p.add_argument("--seeds", type=int, help="number of seeds (default run.seeds)")
    p.add_argument("--k", type=int, help="override shot count at finetune/eval")
    p.add_argument("--workers", type=int, help="parallel seed workers (default: cpu count)")

    p = sub.add_parser("cluster-report", help="support clustering before/after refinement")
    common(p)
    p.add_argument("--snapshot", help="reuse a trained snapshot instead of base training")

    p = sub.add_parser("sweep-basek", help="sweep the base-training shot count")
    common(p)
    p.add_argument("--k-values", default="1,3,5", help="comma-separated base-training K values")
    p.add_argument("--seeds", type=int, help="number of seeds (default run.seeds)")
    p.add_argument("--workers", type=int, help="parallel seed workers (default: cpu count)")

    return parser


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
    "cluster-report": cmd_cluster_report,
    "sweep-basek": cmd_sweep_basek,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.set)
        if args.print_config:
            print(format_config(cfg))
            return 0
        return COMMANDS[args.command](args, cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except FewdetError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
