"""Zero-shot evaluation, ablations, embedding exports, and plot emission.

Reports pool per-episode returns over tasks and seeds; the aggregate is the
mean of per-task means and uncertainty comes from a within-task bootstrap.
Embedding exports materialize the structure analyses (projection to 2D plus
rank correlations against task parameters) without any interactive tooling.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import envs
from .datagen import DatasetManifest
from .envs import TaskSpec
from .textalign import AlignmentCheckpoint, AlignmentConfig, build_alignment_head
from .worldmodel import WorldModelCheckpoint

ABLATION_VARIANTS = ("full", "wo_world", "wo_align", "wo_text")


@dataclass
class EpisodeRecord:
    task_id: str
    seed: int
    episode: int
    ret: float


@dataclass
class EvalReport:
    model: str
    tier: str
    style: str
    seeds: list[int]
    records: list[EpisodeRecord] = field(default_factory=list)
    bootstrap_resamples: int = 1000

    def per_task_means(self) -> dict[str, float]:
        by_task: dict[str, list[float]] = {}
        for r in self.records:
            by_task.setdefault(r.task_id, []).append(r.ret)
        return {task: float(np.mean(rets)) for task, rets in sorted(by_task.items())}

    @property
    def aggregate_mean(self) -> float:
        means = self.per_task_means()
        return float(np.mean(list(means.values())))

    def ci_half_width(self, seed: int = 0) -> float:
        """95% bootstrap half-width of the aggregate, resampling episodes within tasks."""
        by_task: dict[str, np.ndarray] = {}
        for r in self.records:
            by_task.setdefault(r.task_id, []).append(r.ret)
        arrays = [np.array(v) for v in by_task.values()]
        rng = np.random.default_rng(seed)
        draws = np.empty(self.bootstrap_resamples)
        for b in range(self.bootstrap_resamples):
            draws[b] = np.mean([a[rng.integers(len(a), size=len(a))].mean() for a in arrays])
        lo, hi = np.percentile(draws, [2.5, 97.5])
        return float((hi - lo) / 2.0)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "tier": self.tier,
            "style": self.style,
            "seeds": self.seeds,
            "aggregate_mean": self.aggregate_mean,
            "ci_half_width": self.ci_half_width(),
            "per_task_means": self.per_task_means(),
            "records": [asdict(r) for r in self.records],
        }


def evaluate(
    policy,
    tasks: list[TaskSpec],
    episodes_per_task: int = 10,
    style: str = "standard",
    seed: int = 0,
    zero_shot: bool = True,
    model_tag: str | None = None,
    tier: str = "",
) -> EvalReport:
    """Roll the policy on each task; only captions cross to the policy side.

    With ``zero_shot`` the tasks must come from the test split and the policy
    object must expose a ``rollout(caption, task, ...)`` method whose action
    selection runs inside the policy zone. Oracle baselines (which legitimately
    read task parameters) must pass ``zero_shot=False``.
    """
    return evaluate_protocol(
        policy, tasks, episodes_per_task, style, [seed], zero_shot=zero_shot,
        model_tag=model_tag, tier=tier,
    )


def evaluate_protocol(
    policy,
    tasks: list[TaskSpec],
    episodes_per_task: int = 10,
    style: str = "standard",
    seeds: list[int] | None = None,
    zero_shot: bool = True,
    model_tag: str | None = None,
    tier: str = "",
) -> EvalReport:
    seeds = [0] if seeds is None else list(seeds)
    if zero_shot:
        bad = [t.task_id for t in tasks if t.split != "test"]
        if bad:
            raise ValueError(f"zero-shot evaluation requires test-split tasks; got {bad}")
    tag = model_tag or getattr(policy, "kind", policy.__class__.__name__)
    report = EvalReport(model=tag, tier=tier, style=style, seeds=seeds)
    for task in tasks:
        caption = envs.describe(task, style)
        for seed in seeds:
            if zero_shot:
                trajs = policy.rollout(caption, task, seed=seed, n_episodes=episodes_per_task)
            else:
                trajs = policy(task, seed=seed, n_episodes=episodes_per_task)
            for i, traj in enumerate(trajs):
                report.records.append(EpisodeRecord(task.task_id, seed, i, traj.total_return))
    return report


def run_ablation(variant: str, config, out_dir: str | Path | None = None) -> EvalReport:
    """Train and evaluate one pipeline variant end to end.

    full      - staged world-model, alignment, then policy training
    wo_world  - trajectory encoder learned jointly inside the contrastive stage
    wo_align  - text encoder frozen at initialization, no contrastive step
    wo_text   - policy trained and evaluated without any text condition
    """
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    from . import pipeline

    return pipeline.run_variant(config, variant, out_dir=out_dir)


@dataclass
class EmbeddingExport:
    """Per-task embeddings plus a deterministic 2D projection for plotting."""

    family: str
    task_ids: list[str]
    params: np.ndarray
    raw_text: np.ndarray
    aligned_text: np.ndarray
    decision: np.ndarray
    decision_valid: np.ndarray
    pca_aligned: np.ndarray

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            path,
            family=np.str_(self.family),
            task_ids=np.array(self.task_ids),
            params=self.params,
            raw_text=self.raw_text,
            aligned_text=self.aligned_text,
            decision=self.decision,
            decision_valid=self.decision_valid,
            pca_aligned=self.pca_aligned,
        )
        return path


def load_embedding_export(path: str | Path) -> EmbeddingExport:
    with np.load(Path(path)) as data:
        return EmbeddingExport(
            family=str(data["family"]),
            task_ids=[str(t) for t in data["task_ids"]],
            params=data["params"],
            raw_text=data["raw_text"],
            aligned_text=data["aligned_text"],
            decision=data["decision"],
            decision_valid=data["decision_valid"],
            pca_aligned=data["pca_aligned"],
        )


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Top-2 principal coordinates with a deterministic sign convention."""
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    for i in range(components.shape[0]):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    return centered @ components.T


def export_embeddings(
    align_checkpoint: AlignmentCheckpoint,
    wm_checkpoint: WorldModelCheckpoint,
    tasks: list[TaskSpec],
    manifest: DatasetManifest | None = None,
    trajectories_per_task: int = 5,
    seed: int = 0,
) -> EmbeddingExport:
    """Raw and aligned text embeddings for every task; decision embeddings for
    tasks that have stored trajectories."""
    captions = [t.caption for t in tasks]
    aligned = align_checkpoint.aligned_text(captions)
    raw_head = build_alignment_head(
        AlignmentConfig(**align_checkpoint.meta["config"]), align_checkpoint.meta["init_seed"]
    )
    raw_ckpt = AlignmentCheckpoint(head=raw_head, meta=align_checkpoint.meta)
    raw = raw_ckpt.encode_text(captions)
    rng = np.random.default_rng(seed)
    decision = np.zeros((len(tasks), wm_checkpoint.z_dim))
    valid = np.zeros(len(tasks), dtype=bool)
    if manifest is not None:
        for i, task in enumerate(tasks):
            try:
                entry = manifest.entry(task.task_id)
            except KeyError:
                continue
            if not entry.path:
                continue
            trajs = manifest.load_trajectories(task.task_id)
            picks = rng.integers(len(trajs), size=min(trajectories_per_task, len(trajs)))
            decision[i] = wm_checkpoint.encode([trajs[k] for k in picks]).mean(axis=0)
            valid[i] = True
    return EmbeddingExport(
        family=tasks[0].family,
        task_ids=[t.task_id for t in tasks],
        params=np.array([t.params for t in tasks]),
        raw_text=raw,
        aligned_text=aligned,
        decision=decision,
        decision_valid=valid,
        pca_aligned=pca_2d(aligned),
    )


def velocity_alignment_score(export: EmbeddingExport) -> float:
    """|Spearman| between the scalar task parameter and the first PCA coordinate."""
    rho = stats.spearmanr(export.params[:, 0], export.pca_aligned[:, 0]).statistic
    return float(abs(rho))


def direction_alignment_score(export: EmbeddingExport) -> float:
    """Spearman between wrapped angular distance and cosine distance over task pairs."""
    theta = export.params[:, 0]
    emb = export.aligned_text / np.linalg.norm(export.aligned_text, axis=1, keepdims=True)
    n = len(theta)
    angular, cosine = [], []
    for i in range(n):
        for j in range(i + 1, n):
            gap = abs(theta[i] - theta[j]) % (2 * np.pi)
            angular.append(min(gap, 2 * np.pi - gap))
            cosine.append(1.0 - float(emb[i] @ emb[j]))
    return float(stats.spearmanr(angular, cosine).statistic)


def write_results_table(reports: list[EvalReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["model", "tier", "task_id", "seed", "return"])
        for report in reports:
            for r in report.records:
                writer.writerow([report.model, report.tier, r.task_id, r.seed, repr(r.ret)])
    return path


def read_results_table(path: str | Path) -> list[dict]:
    with Path(path).open() as handle:
        rows = list(csv.DictReader(handle))
    for row in rows:
        row["seed"] = int(row["seed"])
        row["return"] = float(row["return"])
    return rows


def emit_plots(reports: list[EvalReport], exports: list[EmbeddingExport], out_dir: str | Path) -> list[Path]:
    """Static return plots per (model, tier), parameter-colored scatters per
    export, and the machine-readable results table."""
    if not reports and not exports:
        raise ValueError("nothing to plot: no reports and no exports")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ValueError(f"output directory {out_dir} is not writable: {exc}") from exc

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files: list[Path] = []
    for report in reports:
        means = report.per_task_means()
        fig, ax = plt.subplots(figsize=(6, 3.5))
        xs = np.arange(len(means))
        ax.bar(xs, list(means.values()), color="tab:blue")
        ax.axhline(report.aggregate_mean, color="tab:red", linestyle="--",
                   label=f"mean {report.aggregate_mean:.2f} ± {report.ci_half_width():.2f}")
        ax.set_xticks(xs)
        ax.set_xticklabels(list(means.keys()), rotation=45, ha="right", fontsize=7)
        ax.set_ylabel("return")
        ax.set_title(f"{report.model} on {report.tier or 'dataset'} ({report.style})")
        ax.legend(fontsize=8)
        fig.tight_layout()
        name = out_dir / f"curve_{report.model}_{report.tier or 'na'}.png"
        fig.savefig(name, dpi=120)
        plt.close(fig)
        files.append(name)
    for export in exports:
        fig, ax = plt.subplots(figsize=(4.5, 4))
        color = export.params[:, 0]
        sc = ax.scatter(export.pca_aligned[:, 0], export.pca_aligned[:, 1], c=color, cmap="rainbow", s=30)
        fig.colorbar(sc, ax=ax, label="task parameter")
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.set_title(f"aligned text embeddings: {export.family}")
        fig.tight_layout()
        name = out_dir / f"scatter_{export.family}.png"
        fig.savefig(name, dpi=120)
        plt.close(fig)
        files.append(name)
    if reports:
        files.append(write_results_table(reports, out_dir / "results.csv"))
    return files
