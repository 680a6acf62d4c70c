"""Conditional diffusion over short state-action plans with guidance.

Plans are H rows of concatenated (state, action), trained in a per-coordinate
normalized space. A DiT-style transformer denoiser is conditioned through
adaptive layer norm on the diffusion step, the normalized return target, and
the text embedding; a learned null token replaces the latter two for
classifier-free guidance. The first plan row's state is pinned to the observed
state at every diffusion step, so generated plans always start from reality.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import datagen, envs, nncore
from .datagen import DatasetManifest, Trajectory
from .envs import Environment, TaskSpec, policy_zone
from .textalign import AlignmentCheckpoint, AlignmentConfig, AlignmentHead

CHECKPOINT_TAG = "dd/v1"


@dataclass
class DDConfig:
    state_dim: int
    action_dim: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 8
    horizon: int = 10
    text_dim: int = 64
    diffusion_steps: int = 20
    use_text: bool = True


@dataclass
class NoiseSchedule:
    """Cosine beta schedule with cumulative products; index c runs 1..C."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray  # length C+1 with alpha_bars[0] == 1
    posterior_variance: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)


def cosine_schedule(steps: int, offset: float = 0.008) -> NoiseSchedule:
    c = np.arange(steps + 1, dtype=np.float64)
    f = np.cos((c / steps + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    alpha_bars_raw = f / f[0]
    betas = np.clip(1.0 - alpha_bars_raw[1:] / alpha_bars_raw[:-1], 1e-4, 0.999)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    posterior = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas
    return NoiseSchedule(betas, alphas, alpha_bars, posterior)


def q_sample(x0: torch.Tensor, c, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward-process closed form x_c = sqrt(abar_c) x0 + sqrt(1 - abar_c) noise."""
    c_arr = torch.as_tensor(c).reshape(-1)
    if bool((c_arr < 0).any()) or bool((c_arr > schedule.steps).any()):
        raise ValueError(f"diffusion step out of range [0, {schedule.steps}]")
    abar = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[c_arr]
    while abar.ndim < x0.ndim:
        abar = abar.unsqueeze(-1)
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * noise


class PlanNormalizer:
    """Per-coordinate affine map between env units and [-1, 1]."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        self.lo = np.asarray(lo, dtype=np.float64)
        span = np.asarray(hi, dtype=np.float64) - self.lo
        self.span = np.where(span > 0, span, 1.0)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "PlanNormalizer":
        lo, hi = None, None
        for entry in manifest.train_entries():
            for traj in manifest.load_trajectories(entry.task_id):
                rows = np.concatenate([traj.states[:-1], traj.actions], axis=1)
                cur_lo, cur_hi = rows.min(axis=0), rows.max(axis=0)
                lo = cur_lo if lo is None else np.minimum(lo, cur_lo)
                hi = cur_hi if hi is None else np.maximum(hi, cur_hi)
        return cls(lo, hi)

    def normalize(self, rows: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(rows, dtype=np.float64) - self.lo) / self.span - 1.0

    def denormalize(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) + 1.0) / 2.0 * self.span + self.lo

    def state_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": (self.lo + self.span).tolist()}


class _DiTBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = nncore.MultiHeadAttention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)

    def forward(self, x, cond):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(cond).unsqueeze(1).chunk(6, dim=-1)
        x = x + gate1 * self.attn(self.ln1(x) * (1 + scale1) + shift1)
        x = x + gate2 * self.mlp(self.ln2(x) * (1 + scale2) + shift2)
        return x


class PlanDenoiser(nn.Module):
    """Transformer noise model over plan rows with adaLN conditioning."""

    TIME_DIM = 64

    def __init__(self, cfg: DDConfig):
        super().__init__()
        self.cfg = cfg
        row_dim = cfg.state_dim + cfg.action_dim
        self.core_dim = 1 + (cfg.text_dim if cfg.use_text else 0)
        self.in_proj = nn.Linear(row_dim, cfg.d_model)
        self.register_buffer("pos", nncore.sinusoidal_positions(cfg.horizon, cfg.d_model))
        self.null_cond = nn.Parameter(torch.zeros(self.core_dim))
        self.cond_mlp = nn.Sequential(
            nn.Linear(self.TIME_DIM + self.core_dim, cfg.d_model),
            nn.SiLU(),
            nn.Linear(cfg.d_model, cfg.d_model),
        )
        self.blocks = nn.ModuleList(_DiTBlock(cfg.d_model, cfg.n_heads) for _ in range(cfg.n_layers))
        self.ln_out = nn.LayerNorm(cfg.d_model, elementwise_affine=False)
        self.out_modulation = nn.Sequential(nn.SiLU(), nn.Linear(cfg.d_model, 2 * cfg.d_model))
        self.out_proj = nn.Linear(cfg.d_model, row_dim)
        nn.init.zeros_(self.out_modulation[1].weight)
        nn.init.zeros_(self.out_modulation[1].bias)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x, c, rtg, text=None, uncond=None) -> torch.Tensor:
        """Predict the noise in plan batch x at diffusion steps c.

        ``uncond`` marks rows whose (return, text) condition is replaced by the
        learned null token; those rows see nothing task-specific.
        """
        bsz = x.shape[0]
        c = torch.as_tensor(c, dtype=torch.float32).reshape(-1).expand(bsz)
        time_feat = nncore.sinusoidal_positions(c, self.TIME_DIM).to(x.dtype)
        if self.cfg.use_text:
            if text is None:
                raise ValueError("denoiser was built with text conditioning but got none")
            core = torch.cat([rtg.reshape(bsz, 1).to(x.dtype), text.to(x.dtype)], dim=-1)
        else:
            core = rtg.reshape(bsz, 1).to(x.dtype)
        if uncond is not None:
            core = torch.where(uncond.reshape(bsz, 1), self.null_cond.to(x.dtype).expand(bsz, -1), core)
        cond = self.cond_mlp(torch.cat([time_feat, core], dim=-1))
        h = self.in_proj(x) + self.pos.to(x.dtype)
        for block in self.blocks:
            h = block(h, cond)
        shift, scale = self.out_modulation(cond).unsqueeze(1).chunk(2, dim=-1)
        return self.out_proj(self.ln_out(h) * (1 + scale) + shift)


def dd_train_step(
    model: PlanDenoiser,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    rtg: torch.Tensor,
    text: torch.Tensor | None,
    p_drop: float,
    gen: torch.Generator,
) -> torch.Tensor:
    """One denoising-regression step with first-state inpainting and condition drop.

    The inpainted coordinates (first row, state slice) are excluded from the
    loss because their noise is never recoverable.
    """
    bsz = x0.shape[0]
    sd = model.cfg.state_dim
    c = torch.randint(1, schedule.steps + 1, (bsz,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    x_c = q_sample(x0, c, eps, schedule)
    x_c[:, 0, :sd] = x0[:, 0, :sd]
    uncond = torch.rand(bsz, generator=gen) < p_drop
    eps_hat = model(x_c, c, rtg, text, uncond)
    mask = torch.ones_like(x0)
    mask[:, 0, :sd] = 0.0
    return ((eps - eps_hat) ** 2 * mask).sum() / mask.sum()


def guided_epsilon(model: PlanDenoiser, x_c, c, rtg, text, w: float) -> torch.Tensor:
    """Classifier-free combination: uncond + w * (cond - uncond)."""
    if w < 0:
        raise ValueError(f"guidance weight must be >= 0, got {w}")
    bsz = x_c.shape[0]
    doubled = torch.cat([x_c, x_c], dim=0)
    rtg2 = torch.cat([rtg, rtg], dim=0)
    text2 = None if text is None else torch.cat([text, text], dim=0)
    uncond = torch.cat([torch.ones(bsz, dtype=torch.bool), torch.zeros(bsz, dtype=torch.bool)])
    eps = model(doubled, torch.as_tensor(c).reshape(-1).expand(2 * bsz), rtg2, text2, uncond)
    eps_uncond, eps_cond = eps[:bsz], eps[bsz:]
    return torch.lerp(eps_uncond, eps_cond, float(w))


@dataclass
class DiffusionPlan:
    """Denoised H-step plan in env units; row t is (state_t, action_t)."""

    rows: np.ndarray
    step: int = 0


def _sample_plans(
    model: PlanDenoiser,
    schedule: NoiseSchedule,
    normalizer: PlanNormalizer,
    s_t: np.ndarray,
    rtg_norm: float,
    text: torch.Tensor | None,
    w: float,
    gen: torch.Generator,
    noise_scale: float,
    n_plans: int,
) -> np.ndarray:
    cfg = model.cfg
    sd = cfg.state_dim
    s_rows = np.atleast_2d(np.asarray(s_t, dtype=np.float64))
    if len(s_rows) == 1 and n_plans > 1:
        s_rows = np.repeat(s_rows, n_plans, axis=0)
    pad = np.zeros((len(s_rows), cfg.action_dim))
    s_norm = torch.as_tensor(
        normalizer.normalize(np.concatenate([s_rows, pad], axis=1))[:, :sd], dtype=torch.float32
    )
    rtg = torch.full((n_plans,), float(rtg_norm))
    x = torch.randn(n_plans, cfg.horizon, sd + cfg.action_dim, generator=gen) * math.sqrt(noise_scale)
    with torch.no_grad():
        for c in range(schedule.steps, 0, -1):
            x[:, 0, :sd] = s_norm
            eps_hat = guided_epsilon(model, x, c, rtg, text, w)
            if not bool(torch.isfinite(eps_hat).all()):
                raise ValueError(f"non-finite denoiser output at diffusion step {c}")
            beta, alpha = schedule.betas[c - 1], schedule.alphas[c - 1]
            abar = schedule.alpha_bars[c]
            mu = (x - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
            if c > 1:
                sigma = math.sqrt(noise_scale * schedule.posterior_variance[c - 1])
                x = mu + sigma * torch.randn(x.shape, generator=gen)
            else:
                x = mu
            if not bool(torch.isfinite(x).all()):
                raise ValueError(f"non-finite plan at diffusion step {c}")
    x[:, 0, :sd] = s_norm
    plans = normalizer.denormalize(x.numpy())
    plans[:, 0, :sd] = s_rows
    return plans


def dd_sample(
    model: PlanDenoiser,
    schedule: NoiseSchedule,
    normalizer: PlanNormalizer,
    s_t: np.ndarray,
    rtg_norm: float,
    text: torch.Tensor | None,
    w: float,
    seed: int = 0,
    noise_scale: float = 0.5,
) -> DiffusionPlan:
    """Sample one fully denoised plan whose first-row state equals s_t exactly."""
    if noise_scale <= 0:
        raise ValueError("sampling noise scale must be positive")
    gen = torch.Generator().manual_seed(seed)
    plans = _sample_plans(model, schedule, normalizer, s_t, rtg_norm, text, w, gen, noise_scale, 1)
    return DiffusionPlan(rows=plans[0], step=0)


class _WindowBank:
    """All H-step windows of the train split, normalized, with text prompts."""

    def __init__(self, manifest: DatasetManifest, align: AlignmentCheckpoint | None, horizon: int):
        windows, rtgs, task_idx = [], [], []
        tasks = manifest.train_entries()
        self.captions = []
        for k, entry in enumerate(tasks):
            task = entry.to_task()
            self.captions.append([envs.describe(task, s) for s in envs.STYLES])
            for traj in manifest.load_trajectories(entry.task_id):
                rows = np.concatenate([traj.states[:-1], traj.actions], axis=1)
                rtg = datagen.returns_to_go(traj)
                for t in range(len(traj) - horizon + 1):
                    windows.append(rows[t : t + horizon])
                    rtgs.append(rtg[t])
                    task_idx.append(k)
        self.normalizer = PlanNormalizer.from_manifest(manifest)
        self.x0 = torch.as_tensor(self.normalizer.normalize(np.stack(windows)), dtype=torch.float32)
        self.rtg = torch.as_tensor(np.array(rtgs) / manifest.return_scale, dtype=torch.float32)
        self.task_idx = np.array(task_idx)
        self.prompts = None
        if align is not None:
            flat = [c for styled in self.captions for c in styled]
            emb = align.encode_text(flat).reshape(len(tasks), len(envs.STYLES), -1)
            self.prompts = torch.as_tensor(emb, dtype=torch.float32)

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(len(self.x0), size=batch)
        text = None
        if self.prompts is not None:
            style = rng.integers(self.prompts.shape[1], size=batch)
            text = self.prompts[self.task_idx[idx], style]
        return self.x0[idx], self.rtg[idx], text


@dataclass
class DDPolicy:
    """Trained diffusion policy bundle with schedule and normalization stats."""

    model: PlanDenoiser
    align: AlignmentCheckpoint | None
    schedule: NoiseSchedule
    normalizer: PlanNormalizer
    meta: dict

    def __post_init__(self):
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @property
    def family(self) -> str:
        return self.meta["family"]

    @property
    def kind(self) -> str:
        return "dd"

    def save(self, path: str | Path) -> Path:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        if self.align is not None:
            tensors.update({f"text.{k}": v for k, v in self.align.head.state_dict().items()})
        return nncore.save_checkpoint(path, CHECKPOINT_TAG, tensors, self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "DDPolicy":
        _, tensors, meta = nncore.load_checkpoint(path, expected_tag=CHECKPOINT_TAG)
        model = PlanDenoiser(DDConfig(**meta["config"]))
        model.load_state_dict({k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")})
        align = None
        if meta["config"]["use_text"]:
            head = AlignmentHead(AlignmentConfig(**meta["align_config"]))
            head.load_state_dict({k[len("text.") :]: v for k, v in tensors.items() if k.startswith("text.")})
            align = AlignmentCheckpoint(head=head, meta={"config": meta["align_config"]})
        normalizer = PlanNormalizer(np.array(meta["normalizer"]["lo"]), np.array(meta["normalizer"]["hi"]))
        return cls(
            model=model,
            align=align,
            schedule=cosine_schedule(meta["config"]["diffusion_steps"]),
            normalizer=normalizer,
            meta=meta,
        )

    def rollout(
        self,
        caption: str,
        task: TaskSpec,
        target_return: float | None = None,
        w: float | None = None,
        seed: int = 0,
        n_episodes: int = 1,
    ) -> list[Trajectory]:
        return dd_rollout(
            self, caption, task, target_return=target_return, w=w, seed=seed, n_episodes=n_episodes
        )


def train_dd(
    manifest: DatasetManifest,
    align_checkpoint: AlignmentCheckpoint | None,
    cfg: DDConfig | None = None,
    steps: int = 6000,
    batch: int = 64,
    lr: float = 2e-4,
    p_drop: float = 0.25,
    seed: int = 0,
    log_every: int = 500,
    progress=None,
) -> DDPolicy:
    """Noise-regression training of the plan denoiser (condition dropped at p_drop)."""
    family = manifest.family
    if cfg is None:
        cfg = DDConfig(state_dim=envs.state_dim(family), action_dim=envs.action_dim(family))
    if not cfg.use_text:
        align_checkpoint = None
    if cfg.use_text and align_checkpoint is None:
        raise ValueError("text-conditioned diffuser needs an alignment checkpoint")
    bank = _WindowBank(manifest, align_checkpoint, cfg.horizon)
    schedule = cosine_schedule(cfg.diffusion_steps)
    torch.manual_seed(seed)
    model = PlanDenoiser(cfg)
    gen = torch.Generator().manual_seed(seed + 2)
    opt = nncore.AdamW(model.named_parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    history = []
    for step_idx in range(steps):
        x0, rtg, text = bank.sample(batch, rng)
        loss = dd_train_step(model, schedule, x0, rtg, text, p_drop, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step_idx % log_every == 0 or step_idx == steps - 1:
            history.append((step_idx, loss.item()))
            if progress:
                progress(step_idx, loss.item())
    meta = {
        "kind": "dd",
        "config": asdict(cfg),
        "align_config": None if align_checkpoint is None else align_checkpoint.meta["config"],
        "family": family,
        "tier": manifest.tier,
        "return_scale": manifest.return_scale,
        "target_return": manifest.target_return,
        "normalizer": bank.normalizer.state_dict(),
        "p_drop": p_drop,
        "steps": steps,
        "seed": seed,
        "loss_history": history,
    }
    return DDPolicy(model=model, align=align_checkpoint, schedule=schedule, normalizer=bank.normalizer, meta=meta)


def dd_rollout(
    policy: DDPolicy,
    caption: str,
    task: TaskSpec,
    target_return: float | None = None,
    w: float | None = None,
    seed: int = 0,
    n_episodes: int = 1,
    noise_scale: float = 0.5,
) -> list[Trajectory]:
    """Closed-loop planning: sample a plan, execute its first action, repeat.

    The return condition stays at the target each step; only the caption and
    the current observation reach the policy side.
    """
    cfg = policy.model.cfg
    w = 1.2 if w is None else w
    scale = policy.meta["return_scale"]
    goal = policy.meta["target_return"] if target_return is None else target_return
    rtg_norm = float(goal) / scale
    text = None
    if cfg.use_text:
        with policy_zone():
            emb = policy.align.encode_text([caption])
        text = torch.as_tensor(np.repeat(emb, n_episodes, axis=0), dtype=torch.float32)
    episodes = [Environment(task) for _ in range(n_episodes)]
    obs = np.stack([env.reset() for env in episodes])
    low, high = envs.action_bounds(task.family)
    gen = torch.Generator().manual_seed(seed)
    states = [[o] for o in obs]
    acts: list[list[np.ndarray]] = [[] for _ in range(n_episodes)]
    rewards: list[list[float]] = [[] for _ in range(n_episodes)]
    for _ in range(episodes[0].horizon):
        with policy_zone():
            plans = _sample_plans(
                policy.model, policy.schedule, policy.normalizer, obs, rtg_norm, text, w, gen,
                noise_scale, n_episodes,
            )
            chosen = np.clip(plans[:, 0, cfg.state_dim :], low, high)
        next_obs = []
        for i, env in enumerate(episodes):
            o, reward, _ = env.step(chosen[i])
            acts[i].append(chosen[i])
            rewards[i].append(reward)
            states[i].append(o)
            next_obs.append(o)
        obs = np.stack(next_obs)
    return [
        Trajectory(np.stack(states[i]), np.stack(acts[i]), np.array(rewards[i]), task.task_id)
        for i in range(n_episodes)
    ]
