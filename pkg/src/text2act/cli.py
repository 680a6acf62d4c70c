"""Command-line surface: every pipeline stage plus the inference service.

All subcommands accept ``--config PATH`` and repeated ``--set key=value``
overrides; flags mirroring config keys are also generated directly, e.g.
``--dt-steps 5000``. The resolved config is echoed into the output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import evalharness, pipeline
from .config import ConfigError, ExperimentConfig, apply_overrides, from_dict, load_config

_TYPES = {"str": str, "int": int, "float": float, "bool": bool}


def _add_config_flags(parser: argparse.ArgumentParser, skip: tuple[str, ...] = ()) -> None:
    parser.add_argument("--config", help="config file (YAML or JSON)")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key; repeatable",
    )
    group = parser.add_argument_group("config keys")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in skip:
            continue
        group.add_argument(
            f"--{f.name.replace('_', '-')}", dest=f"cfgkey_{f.name}", default=None,
            type=_TYPES[f.type], help=f"config key {f.name} (default {f.default!r})",
        )


def _build_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    cfg = apply_overrides(cfg, args.overrides)
    direct = {}
    for key, value in vars(args).items():
        if key.startswith("cfgkey_") and value is not None:
            direct[key[len("cfgkey_") :]] = value
    if direct:
        cfg = from_dict({**cfg.to_dict(), **direct})
    return cfg


def _cmd_tasks(args) -> int:
    cfg = _build_config(args)
    tasks = pipeline.ensure_tasks(cfg)
    for task in tasks:
        print(f"{task.task_id}\t{task.split}\t{task.caption}")
    return 0


def _cmd_datagen(args) -> int:
    cfg = _build_config(args)
    manifest = pipeline.ensure_dataset(cfg)
    print(f"dataset ready: {manifest.manifest_path()} (scale {manifest.return_scale:.3f})")
    return 0


def _cmd_train_world(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")
    ckpt = pipeline.stage_world(cfg, pipeline.pretrain_manifest(cfg), out_dir, force=args.force)
    print(f"world model ready: {out_dir / 'world.pt'} (final loss {ckpt.meta.get('final_loss')})")
    return 0


def _cmd_train_align(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")
    manifest = pipeline.pretrain_manifest(cfg)
    wm = pipeline.stage_world(cfg, manifest, out_dir, force=False)
    pipeline.stage_align(cfg, manifest, wm, out_dir, force=args.force)
    print(f"alignment head ready: {out_dir / 'align.pt'}")
    return 0


def _cmd_train_policy(args) -> int:
    cfg = _build_config(args)
    if args.kind:
        cfg = from_dict({**cfg.to_dict(), "kind": args.kind})
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")
    manifest = pipeline.ensure_dataset(cfg)
    pre = pipeline.pretrain_manifest(cfg)
    wm = pipeline.stage_world(cfg, pre, out_dir, force=False)
    align = pipeline.stage_align(cfg, pre, wm, out_dir, force=False)
    pipeline.stage_policy(cfg, manifest, align, out_dir, force=args.force)
    print(f"policy ready: {out_dir / f'policy_{cfg.kind}.pt'}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(cfg.out_dir)
    path = out_dir / f"policy_{cfg.kind}.pt"
    if not path.exists():
        print(f"no policy checkpoint at {path}; run train-policy or pipeline first", file=sys.stderr)
        return 1
    from .policy_dd import DDPolicy
    from .policy_dt import DTPolicy

    policy = (DTPolicy if cfg.kind == "dt" else DDPolicy).load(path)
    tasks = pipeline.ensure_tasks(cfg)
    report = pipeline.stage_eval(cfg, policy, tasks, out_dir)
    print(json.dumps({"aggregate_mean": report.aggregate_mean,
                      "ci_half_width": report.ci_half_width(),
                      "per_task": report.per_task_means()}, indent=2))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _build_config(args)
    report = evalharness.run_ablation(args.variant, cfg)
    print(f"{args.variant}: mean test return {report.aggregate_mean:.3f}")
    return 0


def _cmd_export_embeddings(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(cfg.out_dir)
    from .textalign import AlignmentCheckpoint
    from .worldmodel import WorldModelCheckpoint

    wm = WorldModelCheckpoint.load(out_dir / "world.pt")
    align = AlignmentCheckpoint.load(out_dir / "align.pt")
    tasks = pipeline.ensure_tasks(cfg)
    manifest = pipeline.pretrain_manifest(cfg)
    export = evalharness.export_embeddings(align, wm, tasks, manifest=manifest)
    path = export.save(out_dir / f"embeddings_{cfg.family}.npz")
    print(f"embeddings exported: {path}")
    return 0


def _cmd_plot(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(cfg.out_dir)
    reports = []
    for report_path in sorted(out_dir.glob("**/eval_report.json")):
        payload = json.loads(report_path.read_text())
        report = evalharness.EvalReport(
            model=payload["model"], tier=payload["tier"], style=payload["style"],
            seeds=payload["seeds"],
            records=[evalharness.EpisodeRecord(**r) for r in payload["records"]],
        )
        reports.append(report)
    exports = [
        evalharness.load_embedding_export(p) for p in sorted(out_dir.glob("embeddings_*.npz"))
    ]
    if not reports and not exports:
        print(f"nothing to plot under {out_dir}", file=sys.stderr)
        return 1
    files = evalharness.emit_plots(reports, exports, out_dir / "plots")
    for f in files:
        print(f)
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _build_config(args)
    out = pipeline.run_pipeline(cfg, force=args.force)
    print(f"artifacts in {out}")
    return 0


def _cmd_serve(args) -> int:
    from . import service

    service.serve(dt_path=args.dt, dd_path=args.dd, host=args.host, port=args.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="text2act", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    specs = [
        ("tasks", _cmd_tasks, "sample and print the task split"),
        ("datagen", _cmd_datagen, "collect the offline dataset tier"),
        ("train-world", _cmd_train_world, "pre-train the trajectory encoder"),
        ("train-align", _cmd_train_align, "contrastively align the text encoder"),
        ("train-policy", _cmd_train_policy, "train the generalist policy"),
        ("eval", _cmd_eval, "zero-shot evaluation of a trained policy"),
        ("ablate", _cmd_ablate, "train and evaluate one ablation variant"),
        ("export-embeddings", _cmd_export_embeddings, "dump embeddings and 2D projections"),
        ("plot", _cmd_plot, "render return plots and embedding scatters"),
        ("pipeline", _cmd_pipeline, "run all stages in order"),
    ]
    for name, fn, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        skip: tuple[str, ...] = ()
        if name == "train-policy":
            skip = ("kind",)
        elif name == "ablate":
            skip = ("variant",)
        _add_config_flags(p, skip=skip)
        if name in ("train-world", "train-align", "train-policy", "pipeline"):
            p.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")
        if name == "train-policy":
            p.add_argument("--kind", choices=["dt", "dd"], help="policy architecture")
        if name == "ablate":
            p.add_argument("--variant", required=True, choices=list(evalharness.ABLATION_VARIANTS))
        p.set_defaults(fn=fn)

    serve_parser = sub.add_parser("serve", help="start the rollout inference service")
    serve_parser.add_argument("--dt", help="path to a dt policy checkpoint")
    serve_parser.add_argument("--dd", help="path to a dd policy checkpoint")
    serve_parser.add_argument("--host", default="127.0.0.1")
    serve_parser.add_argument("--port", type=int, default=8420)
    serve_parser.set_defaults(fn=_cmd_serve)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
