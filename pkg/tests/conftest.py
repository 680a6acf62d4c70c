"""Shared fixtures. The session-scoped workbench trains every artifact the
acceptance suite needs (datasets, world models, alignment heads, all policy
variants) exactly once, through the same pipeline stages the CLI uses."""
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch

torch.set_num_threads(max(1, os.cpu_count() or 1))


def _say(msg: str) -> None:
    print(f"\n[fixtures {time.strftime('%H:%M:%S')}] {msg}", file=sys.stderr, flush=True)


@dataclass
class Workbench:
    """Trained artifacts for the acceptance experiments (point-robot mixed)."""

    config: "object"
    tasks: list
    test_tasks: list
    manifest: "object"
    wm: "object"
    align: "object"
    dt_full: "object"
    dt_wo_world: "object"
    dt_wo_align: "object"
    dt_wo_text: "object"
    dd_full: "object"
    dd_wo_text: "object"
    out_dir: Path


@pytest.fixture(scope="session")
def workbench(tmp_path_factory) -> Workbench:
    from text2act import pipeline, policy_dd, policy_dt, textalign
    from text2act.config import ExperimentConfig

    out_dir = tmp_path_factory.mktemp("workbench")
    config = ExperimentConfig(out_dir=str(out_dir))
    config.save(out_dir / "config.json")

    _say("collecting point-robot mixed dataset (45 train / 5 test, 200 trajectories per task)")
    tasks = pipeline.ensure_tasks(config)
    manifest = pipeline.ensure_dataset(config)

    _say(f"pre-training world model ({config.wm_steps} steps)")
    wm = pipeline.stage_world(config, manifest, out_dir)

    _say(f"contrastive alignment ({config.align_steps} steps)")
    align = pipeline.stage_align(config, manifest, wm, out_dir)

    _say(f"training T2DA-style transformer policy, full ({config.dt_steps} steps)")
    dt_full = pipeline.stage_policy(config, manifest, align, out_dir)

    variants = {}
    for variant in ("wo_world", "wo_align", "wo_text"):
        _say(f"training transformer policy variant {variant} ({config.dt_steps} steps)")
        vdir = out_dir / variant
        vdir.mkdir(exist_ok=True)
        vcfg = ExperimentConfig(**{**config.to_dict(), "variant": variant})
        align_v = None
        if variant == "wo_world":
            align_v, _ = textalign.train_alignment_joint(
                manifest, pipeline._wm_config(vcfg), pipeline._align_config(vcfg),
                steps=vcfg.align_steps, batch=vcfg.align_batch, lr=vcfg.align_lr,
                weight_decay=vcfg.align_weight_decay, seed=pipeline.stage_seed(vcfg, "align"),
            )
            align_v.save(vdir / "align.pt")
        elif variant == "wo_align":
            align_v = pipeline.untrained_alignment(vcfg)
        variants[variant] = pipeline.stage_policy(
            vcfg, manifest, align_v, vdir, use_text=variant != "wo_text"
        )

    _say(f"training diffusion policy, full ({config.dd_steps} steps)")
    dd_config = ExperimentConfig(**{**config.to_dict(), "kind": "dd"})
    dd_full = pipeline.stage_policy(dd_config, manifest, align, out_dir)

    _say(f"training diffusion policy variant wo_text ({config.dd_steps} steps)")
    dd_nt_dir = out_dir / "dd_wo_text"
    dd_nt_dir.mkdir(exist_ok=True)
    dd_wo_text = pipeline.stage_policy(dd_config, manifest, None, dd_nt_dir, use_text=False)

    return Workbench(
        config=config,
        tasks=tasks,
        test_tasks=[t for t in tasks if t.split == "test"],
        manifest=manifest,
        wm=wm,
        align=align,
        dt_full=dt_full,
        dt_wo_world=variants["wo_world"],
        dt_wo_align=variants["wo_align"],
        dt_wo_text=variants["wo_text"],
        dd_full=dd_full,
        dd_wo_text=dd_wo_text,
        out_dir=out_dir,
    )


@dataclass
class FamilyBench:
    """World model + alignment for one auxiliary family (structure analyses)."""

    config: "object"
    tasks: list
    manifest: "object"
    wm: "object"
    align: "object"
    export: "object"


def _family_bench(tmp_path_factory, family: str) -> FamilyBench:
    from text2act import evalharness, pipeline
    from text2act.config import ExperimentConfig

    out_dir = tmp_path_factory.mktemp(f"bench_{family}")
    config = ExperimentConfig(family=family, out_dir=str(out_dir))
    _say(f"collecting {family} mixed dataset")
    tasks = pipeline.ensure_tasks(config)
    manifest = pipeline.ensure_dataset(config)
    _say(f"pre-training {family} world model ({config.wm_steps} steps)")
    wm = pipeline.stage_world(config, manifest, out_dir)
    _say(f"aligning {family} text encoder ({config.align_steps} steps)")
    align = pipeline.stage_align(config, manifest, wm, out_dir)
    export = evalharness.export_embeddings(align, wm, tasks, manifest=manifest)
    return FamilyBench(config=config, tasks=tasks, manifest=manifest, wm=wm, align=align, export=export)


@pytest.fixture(scope="session")
def line_vel_bench(tmp_path_factory) -> FamilyBench:
    return _family_bench(tmp_path_factory, "line-vel")


@pytest.fixture(scope="session")
def point_dir_bench(tmp_path_factory) -> FamilyBench:
    return _family_bench(tmp_path_factory, "point-dir")
