"""Staged experiment orchestration with resumable checkpoints.

Stage order: task sampling, dataset collection, world-model pre-training,
contrastive alignment, policy training, evaluation. A stage is skipped when
its artifact already exists (unless forced), so deleting one checkpoint and
re-running recomputes only that stage. One master seed derives per-stage seeds
by fixed offsets, recorded in the run manifest.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import datagen, envs, evalharness, policy_dd, policy_dt, textalign, worldmodel
from .config import ExperimentConfig
from .datagen import DatasetManifest
from .envs import TaskSpec
from .policy_dd import DDConfig, DDPolicy
from .policy_dt import DTConfig, DTPolicy
from .textalign import AlignmentCheckpoint, AlignmentConfig
from .worldmodel import WorldModelCheckpoint, WorldModelConfig

SEED_OFFSETS = {"tasks": 0, "datagen": 1000, "world": 2000, "align": 3000, "policy": 4000, "eval": 5000}


def stage_seed(config: ExperimentConfig, stage: str) -> int:
    return config.seed + SEED_OFFSETS[stage]


def _log(msg: str) -> None:
    print(f"[text2act] {msg}", flush=True)


def ensure_tasks(config: ExperimentConfig) -> list[TaskSpec]:
    """Sample (or reload) the train/test task split for this run."""
    path = Path(config.resolved_data_dir()) / f"tasks_{config.family}.json"
    if path.exists():
        payload = json.loads(path.read_text())
        return [TaskSpec(t["family"], t["params"], t["split"], t["task_id"]) for t in payload]
    tasks = envs.sample_tasks(
        config.family, config.n_train_tasks, config.n_test_tasks, stage_seed(config, "tasks")
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(
            [
                {"family": t.family, "params": list(t.params), "split": t.split,
                 "task_id": t.task_id, "caption": t.caption}
                for t in tasks
            ],
            indent=2,
        )
    )
    return tasks


def ensure_dataset(config: ExperimentConfig, tier: str | None = None) -> DatasetManifest:
    tier = tier or config.tier
    root = Path(config.resolved_data_dir()) / config.family
    manifest_path = root / f"manifest_{tier}.json"
    if manifest_path.exists():
        return DatasetManifest.load(manifest_path)
    tasks = ensure_tasks(config)
    _log(f"collecting {tier} dataset for {config.family} ({config.n_traj} trajectories/task)")
    return datagen.build_tier(tasks, tier, stage_seed(config, "datagen"), root, n_traj=config.n_traj)


def pretrain_manifest(config: ExperimentConfig) -> DatasetManifest:
    """Manifest used for world-model and alignment pre-training.

    The deterministic scripted expert makes every expert-tier episode of a task
    identical, which leaves no cross-trajectory pairs; those stages fall back
    to the mixed tier while the policy still trains on the configured tier.
    """
    if config.tier == "expert":
        return ensure_dataset(config, tier="mixed")
    return ensure_dataset(config)


def _wm_config(config: ExperimentConfig) -> WorldModelConfig:
    return WorldModelConfig(
        state_dim=envs.state_dim(config.family),
        action_dim=envs.action_dim(config.family),
        d_model=config.wm_dim,
        n_layers=config.wm_layers,
        n_heads=config.wm_heads,
        z_dim=config.z_dim,
        decoder_width=config.wm_decoder_width,
    )


def _align_config(config: ExperimentConfig) -> AlignmentConfig:
    return AlignmentConfig(
        z_dim=config.z_dim,
        text_dim=config.text_dim,
        joint_dim=config.joint_dim,
        text_layers=config.text_layers,
        text_heads=config.text_heads,
    )


def _dt_config(config: ExperimentConfig, use_prompt: bool = True) -> DTConfig:
    return DTConfig(
        state_dim=envs.state_dim(config.family),
        action_dim=envs.action_dim(config.family),
        d_model=config.dt_dim,
        n_layers=config.dt_layers,
        n_heads=config.dt_heads,
        horizon=config.dt_horizon,
        text_dim=config.text_dim,
        use_prompt=use_prompt,
    )


def _dd_config(config: ExperimentConfig, use_text: bool = True) -> DDConfig:
    return DDConfig(
        state_dim=envs.state_dim(config.family),
        action_dim=envs.action_dim(config.family),
        d_model=config.dd_dim,
        n_layers=config.dd_layers,
        n_heads=config.dd_heads,
        horizon=config.dd_horizon,
        text_dim=config.text_dim,
        diffusion_steps=config.diffusion_steps,
        use_text=use_text,
    )


def stage_world(
    config: ExperimentConfig, manifest: DatasetManifest, out_dir: Path, force: bool = False
) -> WorldModelCheckpoint:
    path = out_dir / "world.pt"
    if path.exists() and not force:
        return WorldModelCheckpoint.load(path)
    _log(f"training world model ({config.wm_steps} steps)")
    ckpt = worldmodel.train_world_model(
        manifest, _wm_config(config), steps=config.wm_steps, batch=config.wm_batch,
        lr=config.wm_lr, seed=stage_seed(config, "world"),
    )
    ckpt.save(path)
    return ckpt


def stage_align(
    config: ExperimentConfig,
    manifest: DatasetManifest,
    wm_ckpt: WorldModelCheckpoint,
    out_dir: Path,
    force: bool = False,
) -> AlignmentCheckpoint:
    path = out_dir / "align.pt"
    if path.exists() and not force:
        return AlignmentCheckpoint.load(path)
    _log(f"training alignment head ({config.align_steps} steps)")
    ckpt = textalign.train_alignment(
        manifest, wm_ckpt, _align_config(config), steps=config.align_steps,
        batch=config.align_batch, lr=config.align_lr, weight_decay=config.align_weight_decay,
        seed=stage_seed(config, "align"),
    )
    ckpt.save(path)
    return ckpt


def stage_policy(
    config: ExperimentConfig,
    manifest: DatasetManifest,
    align_ckpt: AlignmentCheckpoint | None,
    out_dir: Path,
    force: bool = False,
    use_text: bool = True,
):
    path = out_dir / f"policy_{config.kind}.pt"
    if path.exists() and not force:
        loader = DTPolicy if config.kind == "dt" else DDPolicy
        return loader.load(path)
    seed = stage_seed(config, "policy")
    if config.kind == "dt":
        _log(f"training causal-transformer policy ({config.dt_steps} steps)")
        policy = policy_dt.train_dt(
            manifest, align_ckpt, _dt_config(config, use_prompt=use_text),
            steps=config.dt_steps, batch=config.dt_batch, lr=config.dt_lr, seed=seed,
        )
    elif config.kind == "dd":
        _log(f"training diffusion policy ({config.dd_steps} steps)")
        policy = policy_dd.train_dd(
            manifest, align_ckpt, _dd_config(config, use_text=use_text),
            steps=config.dd_steps, batch=config.dd_batch, lr=config.dd_lr,
            p_drop=config.p_drop, seed=seed,
        )
    else:
        raise ValueError(f"unknown policy kind {config.kind!r}; expected 'dt' or 'dd'")
    policy.save(path)
    return policy


def eval_seeds(config: ExperimentConfig) -> list[int]:
    base = stage_seed(config, "eval")
    return [base + i for i in range(config.eval_seeds)]


def stage_eval(config: ExperimentConfig, policy, tasks: list[TaskSpec], out_dir: Path) -> evalharness.EvalReport:
    test_tasks = [t for t in tasks if t.split == "test"]
    _log(f"evaluating on {len(test_tasks)} test tasks x {config.eval_episodes} episodes x {config.eval_seeds} seeds")
    report = evalharness.evaluate_protocol(
        policy, test_tasks, episodes_per_task=config.eval_episodes, style=config.eval_style,
        seeds=eval_seeds(config), model_tag=f"{config.kind}-{config.variant}", tier=config.tier,
    )
    (out_dir / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    evalharness.write_results_table([report], out_dir / "results.csv")
    return report


def _dataset_hashes(manifest: DatasetManifest) -> dict[str, str]:
    hashes = {}
    for entry in manifest.train_entries():
        digest = hashlib.sha256((Path(manifest.root) / entry.path).read_bytes()).hexdigest()
        hashes[entry.path] = digest
    return hashes


def run_variant(
    config: ExperimentConfig, variant: str, out_dir: str | Path | None = None, force: bool = False
) -> evalharness.EvalReport:
    """Train one ablation variant end to end and evaluate it."""
    config = ExperimentConfig(**{**config.to_dict(), "variant": variant})
    out_dir = Path(out_dir) if out_dir else Path(config.out_dir) / variant
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.json")
    tasks = ensure_tasks(config)
    manifest = ensure_dataset(config)
    pre_manifest = pretrain_manifest(config)
    align_ckpt = None
    if variant == "full":
        wm_ckpt = stage_world(config, pre_manifest, out_dir, force=force)
        align_ckpt = stage_align(config, pre_manifest, wm_ckpt, out_dir, force=force)
    elif variant == "wo_world":
        path = out_dir / "align.pt"
        if path.exists() and not force:
            align_ckpt = AlignmentCheckpoint.load(path)
        else:
            _log(f"training joint (no world pre-training) alignment ({config.align_steps} steps)")
            align_ckpt, _ = textalign.train_alignment_joint(
                pre_manifest, _wm_config(config), _align_config(config),
                steps=config.align_steps, batch=config.align_batch, lr=config.align_lr,
                weight_decay=config.align_weight_decay, seed=stage_seed(config, "align"),
            )
            align_ckpt.save(path)
    elif variant == "wo_align":
        align_ckpt = untrained_alignment(config)
    policy = stage_policy(
        config, manifest, align_ckpt, out_dir, force=force, use_text=variant != "wo_text"
    )
    report = stage_eval(config, policy, tasks, out_dir)
    return report


def untrained_alignment(config: ExperimentConfig) -> AlignmentCheckpoint:
    """Alignment head frozen at initialization (no contrastive step)."""
    seed = stage_seed(config, "align")
    head = textalign.build_alignment_head(_align_config(config), seed)
    meta = {
        "config": asdict(_align_config(config)),
        "family": config.family,
        "tier": config.tier,
        "steps": 0,
        "seed": seed,
        "init_seed": seed,
        "joint_world_model": False,
        "loss_history": [],
    }
    return AlignmentCheckpoint(head=head, meta=meta)


def run_pipeline(config: ExperimentConfig, force: bool = False) -> Path:
    """All stages in order; returns the artifact directory."""
    t_start = time.time()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.json")
    tasks = ensure_tasks(config)
    manifest = ensure_dataset(config)
    pre_manifest = pretrain_manifest(config)
    timings = {}

    t0 = time.time()
    wm_ckpt = stage_world(config, pre_manifest, out_dir, force=force)
    timings["world"] = time.time() - t0
    t0 = time.time()
    align_ckpt = stage_align(config, pre_manifest, wm_ckpt, out_dir, force=force)
    timings["align"] = time.time() - t0
    t0 = time.time()
    policy = stage_policy(config, manifest, align_ckpt, out_dir, force=force)
    timings["policy"] = time.time() - t0
    t0 = time.time()
    report = stage_eval(config, policy, tasks, out_dir)
    timings["eval"] = time.time() - t0

    run_manifest = {
        "master_seed": config.seed,
        "stage_seeds": {stage: stage_seed(config, stage) for stage in SEED_OFFSETS},
        "eval_seeds": eval_seeds(config),
        "pretrain_tier": pre_manifest.tier,
        "dataset_hashes": _dataset_hashes(manifest),
        "timings_sec": {k: round(v, 2) for k, v in timings.items()},
        "total_sec": round(time.time() - t_start, 2),
        "aggregate_mean": report.aggregate_mean,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(run_manifest, indent=2))
    _log(f"pipeline finished in {run_manifest['total_sec']}s; mean test return {report.aggregate_mean:.2f}")
    return out_dir
