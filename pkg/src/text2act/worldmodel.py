"""Trajectory encoder with reward/transition decoders over offline datasets.

The encoder tokenizes each transition's state, action, and reward with
element-specific dense maps, runs a bi-directional transformer over the
interleaved token sequence, and mean-pools into a fixed decision embedding.
Decoders predict one trajectory's rewards and next states from the embedding
of a *different* trajectory of the same task, which keeps the embedding from
shortcutting through its own targets.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import nncore
from .datagen import DatasetManifest, Trajectory

CHECKPOINT_TAG = "worldmodel/v1"


@dataclass
class WorldModelConfig:
    state_dim: int
    action_dim: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    z_dim: int = 64
    decoder_width: int = 256


class TrajectoryEncoder(nn.Module):
    """Bi-directional transformer over interleaved (state, action, reward) tokens."""

    def __init__(self, cfg: WorldModelConfig):
        super().__init__()
        self.cfg = cfg
        self.state_tok = nn.Linear(cfg.state_dim, cfg.d_model)
        self.action_tok = nn.Linear(cfg.action_dim, cfg.d_model)
        self.reward_tok = nn.Linear(1, cfg.d_model)
        self.stack = nncore.TransformerStack(cfg.n_layers, cfg.d_model, cfg.n_heads, activation="relu")
        self.proj = nn.Linear(cfg.d_model, cfg.z_dim)

    def tokenize(self, states, actions, rewards) -> torch.Tensor:
        """Interleave per-transition tokens as (s_0, a_0, r_0, ..., s_T-1, a_T-1, r_T-1)."""
        if states.shape[1] != actions.shape[1] or actions.shape[1] != rewards.shape[1]:
            raise ValueError(
                f"transition arrays disagree: {states.shape[1]} states, "
                f"{actions.shape[1]} actions, {rewards.shape[1]} rewards"
            )
        es = self.state_tok(states)
        ea = self.action_tok(actions)
        er = self.reward_tok(rewards.unsqueeze(-1))
        bsz, length, dim = es.shape
        return torch.stack([es, ea, er], dim=2).reshape(bsz, 3 * length, dim)

    def forward(self, states, actions, rewards) -> torch.Tensor:
        tokens = self.tokenize(states, actions, rewards)
        tokens = tokens + nncore.sinusoidal_positions(tokens.shape[1], self.cfg.d_model).to(tokens.dtype)
        hidden = self.stack(tokens)
        return self.proj(hidden.mean(dim=1))


def _mlp(in_dim: int, width: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, width), nn.ReLU(), nn.Linear(width, width), nn.ReLU(), nn.Linear(width, out_dim)
    )


class WorldModel(nn.Module):
    """Encoder plus decoders; the reward decoder sees (s, a, s'; z), the
    transition decoder sees (s, a, r; z)."""

    def __init__(self, cfg: WorldModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = TrajectoryEncoder(cfg)
        base = cfg.state_dim + cfg.action_dim + cfg.z_dim
        self.reward_decoder = _mlp(base + cfg.state_dim, cfg.decoder_width, 1)
        self.transition_decoder = _mlp(base + 1, cfg.decoder_width, cfg.state_dim)


def _as_transition_tensors(trajs: list[Trajectory], dtype=torch.float32):
    states = torch.as_tensor(np.stack([t.states for t in trajs]), dtype=dtype)
    actions = torch.as_tensor(np.stack([t.actions for t in trajs]), dtype=dtype)
    rewards = torch.as_tensor(np.stack([t.rewards for t in trajs]), dtype=dtype)
    return states, actions, rewards


def wm_loss(model: WorldModel, tau, tau_star) -> torch.Tensor:
    """Cross-trajectory prediction error, mean over batch and timesteps.

    ``tau`` and ``tau_star`` are (states, actions, rewards) tensor triples with
    states one step longer than actions. Pairs where both trajectories are
    identical are rejected.
    """
    s, a, r = tau
    s_star, a_star, r_star = tau_star
    same = (
        (s == s_star).flatten(1).all(dim=1)
        & (a == a_star).flatten(1).all(dim=1)
        & (r == r_star).flatten(1).all(dim=1)
    )
    if bool(same.any()):
        raise ValueError("cross-trajectory rule violated: a pair has tau == tau*")
    z = model.encoder(s[:, :-1], a, r)
    z_tiled = z.unsqueeze(1).expand(-1, a_star.shape[1], -1)
    cur, nxt = s_star[:, :-1], s_star[:, 1:]
    reward_in = torch.cat([cur, a_star, nxt, z_tiled], dim=-1)
    trans_in = torch.cat([cur, a_star, r_star.unsqueeze(-1), z_tiled], dim=-1)
    r_hat = model.reward_decoder(reward_in).squeeze(-1)
    s_hat = model.transition_decoder(trans_in)
    reward_term = (r_star - r_hat) ** 2
    trans_term = ((nxt - s_hat) ** 2).sum(dim=-1)
    return (reward_term + trans_term).mean()


class PairSampler:
    """Draws (tau, tau*) pairs from one task's dataset with tau != tau*.

    Trajectories are grouped by content first: a deterministic behavior policy
    can produce byte-identical episodes, and pairing those would defeat the
    cross-trajectory rule. Tasks without two distinct episodes are rejected.
    """

    def __init__(self, manifest: DatasetManifest):
        self.tasks = []
        self.data = []
        self.groups = []
        for entry in manifest.train_entries():
            trajs = manifest.load_trajectories(entry.task_id)
            by_content: dict[bytes, list[int]] = {}
            for i, traj in enumerate(trajs):
                key = traj.states.tobytes() + traj.actions.tobytes()
                by_content.setdefault(key, []).append(i)
            if len(by_content) < 2:
                raise ValueError(
                    f"task {entry.task_id!r} has no two distinct trajectories "
                    f"({len(trajs)} stored); cannot form cross-trajectory pairs"
                )
            self.tasks.append(entry.task_id)
            self.data.append(_as_transition_tensors(trajs))
            self.groups.append(list(by_content.values()))

    def sample(self, batch: int, rng: np.random.Generator):
        task_idx = rng.integers(len(self.data), size=batch)
        tau, star = [], []
        for k in task_idx:
            states, actions, rewards = self.data[k]
            groups = self.groups[k]
            ga = int(rng.integers(len(groups)))
            gb = int(rng.integers(len(groups) - 1))
            if gb >= ga:
                gb += 1
            i = groups[ga][int(rng.integers(len(groups[ga])))]
            j = groups[gb][int(rng.integers(len(groups[gb])))]
            tau.append((states[i], actions[i], rewards[i]))
            star.append((states[j], actions[j], rewards[j]))
        stack = lambda items: tuple(torch.stack(cols) for cols in zip(*items))
        return stack(tau), stack(star)


@dataclass
class WorldModelCheckpoint:
    """Frozen trained world model; downstream stages only read from it."""

    model: WorldModel
    meta: dict

    def __post_init__(self):
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @property
    def z_dim(self) -> int:
        return self.model.cfg.z_dim

    def param_hash(self) -> str:
        return nncore.param_hash(self.model)

    def encode(self, trajectories: list[Trajectory], chunk: int = 256) -> np.ndarray:
        """Decision embeddings for equally-long trajectories, row per input."""
        out = []
        with torch.no_grad():
            for start in range(0, len(trajectories), chunk):
                s, a, r = _as_transition_tensors(trajectories[start : start + chunk])
                out.append(self.model.encoder(s[:, :-1], a, r).numpy())
        return np.concatenate(out, axis=0)

    def encode_one(self, trajectory: Trajectory) -> np.ndarray:
        return self.encode([trajectory])[0]

    def save(self, path: str | Path) -> Path:
        return nncore.save_checkpoint(path, CHECKPOINT_TAG, dict(self.model.state_dict()), self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "WorldModelCheckpoint":
        _, tensors, meta = nncore.load_checkpoint(path, expected_tag=CHECKPOINT_TAG)
        model = WorldModel(WorldModelConfig(**meta["config"]))
        model.load_state_dict(tensors)
        return cls(model=model, meta=meta)


def build_world_model(cfg: WorldModelConfig, seed: int) -> WorldModel:
    torch.manual_seed(seed)
    model = WorldModel(cfg)
    nncore.init_dense_(model)
    return model


def train_world_model(
    manifest: DatasetManifest,
    cfg: WorldModelConfig,
    steps: int = 3000,
    batch: int = 32,
    lr: float = 3e-4,
    seed: int = 0,
    log_every: int = 500,
    progress=None,
) -> WorldModelCheckpoint:
    """Alg-style pre-training: sample task, sample a cross-trajectory pair, regress."""
    if len(manifest.train_entries()) < 2:
        raise ValueError("need at least 2 train tasks to pre-train the world model")
    sampler = PairSampler(manifest)
    model = build_world_model(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    opt = nncore.AdamW(model.named_parameters(), lr=lr)
    history = []
    for step_idx in range(steps):
        tau, star = sampler.sample(batch, rng)
        loss = wm_loss(model, tau, star)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step_idx % log_every == 0 or step_idx == steps - 1:
            history.append((step_idx, loss.item()))
            if progress:
                progress(step_idx, loss.item())
    meta = {
        "config": asdict(cfg),
        "family": manifest.family,
        "tier": manifest.tier,
        "steps": steps,
        "seed": seed,
        "loss_history": history,
        "final_loss": history[-1][1] if history else None,
    }
    return WorldModelCheckpoint(model=model, meta=meta)
