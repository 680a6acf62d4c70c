"""Prompt-augmented return-conditioned causal transformer policy.

One text token is prepended to the usual (return-to-go, state, action) stream;
action predictions are read at each state-token position under a causal mask,
so training on whole episodes supervises every prefix the rollout loop will
ever present. Timestep embeddings are window-relative, which makes predictions
depend only on the most recent context.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import datagen, envs, nncore
from .datagen import DatasetManifest, Trajectory
from .envs import Environment, TaskSpec, policy_zone
from .textalign import AlignmentCheckpoint, AlignmentConfig, AlignmentHead

CHECKPOINT_TAG = "dt/v1"


@dataclass
class DTConfig:
    state_dim: int
    action_dim: int
    d_model: int = 128
    n_layers: int = 3
    n_heads: int = 1
    horizon: int = 20
    text_dim: int = 64
    use_prompt: bool = True


class DecisionTransformer(nn.Module):
    def __init__(self, cfg: DTConfig):
        super().__init__()
        self.cfg = cfg
        self.embed_rtg = nn.Linear(1, cfg.d_model)
        self.embed_state = nn.Linear(cfg.state_dim, cfg.d_model)
        self.embed_action = nn.Linear(cfg.action_dim, cfg.d_model)
        self.embed_time = nn.Embedding(cfg.horizon, cfg.d_model)
        if cfg.use_prompt:
            self.embed_prompt = nn.Linear(cfg.text_dim, cfg.d_model)
        self.stack = nncore.TransformerStack(cfg.n_layers, cfg.d_model, cfg.n_heads)
        self.head = nn.Linear(cfg.d_model, cfg.action_dim)

    def forward(self, rtg, states, actions, timesteps, prompt=None) -> torch.Tensor:
        """Predict the action at every state-token position.

        rtg (B,K,1), states (B,K,sd), actions (B,K,ad), timesteps (B,K) long.
        The action at the final step may be a zero placeholder; causality keeps
        it invisible to its own prediction.
        """
        time = self.embed_time(timesteps)
        tokens = torch.stack(
            [self.embed_rtg(rtg) + time, self.embed_state(states) + time, self.embed_action(actions) + time],
            dim=2,
        ).reshape(states.shape[0], 3 * states.shape[1], self.cfg.d_model)
        offset = 0
        if self.cfg.use_prompt:
            if prompt is None:
                raise ValueError("model was built with a prompt token but none was given")
            tokens = torch.cat([self.embed_prompt(prompt).unsqueeze(1), tokens], dim=1)
            offset = 1
        mask = nncore.causal_mask(tokens.shape[1]).to(tokens.device)
        hidden = self.stack(tokens, attn_mask=mask)
        return self.head(hidden[:, offset + 1 :: 3])


@dataclass
class PromptedSequence:
    """Model-ready window: one optional prompt token plus K timestep triples."""

    prompt_embedding: np.ndarray | None
    returns: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray

    @property
    def token_count(self) -> int:
        base = 3 * len(self.returns)
        return base + (1 if self.prompt_embedding is not None else 0)


def build_sequence(text_embedding, history, t: int, horizon: int = 20) -> PromptedSequence:
    """Assemble the most recent window from a rollout history.

    ``history`` is a (returns, states, actions) triple of per-step lists where
    the final action slot is a zero placeholder at rollout time. Windows longer
    than ``horizon`` drop their earliest steps.
    """
    returns, states, actions = (np.asarray(x, dtype=np.float64) for x in history)
    if len(returns) == 0:
        raise ValueError(f"history is empty at timestep {t}")
    if not len(returns) == len(states) == len(actions):
        raise ValueError("history arrays must share one length per step")
    keep = min(len(returns), horizon)
    return PromptedSequence(
        prompt_embedding=None if text_embedding is None else np.asarray(text_embedding),
        returns=returns[-keep:],
        states=states[-keep:],
        actions=actions[-keep:],
        timesteps=np.arange(keep),
    )


def dt_forward(model: DecisionTransformer, seq: PromptedSequence) -> np.ndarray:
    """Per-timestep action predictions for a single sequence."""
    with torch.no_grad():
        prompt = None
        if seq.prompt_embedding is not None:
            prompt = torch.as_tensor(seq.prompt_embedding, dtype=torch.float32).unsqueeze(0)
        pred = model(
            torch.as_tensor(seq.returns, dtype=torch.float32).reshape(1, -1, 1),
            torch.as_tensor(seq.states, dtype=torch.float32).unsqueeze(0),
            torch.as_tensor(seq.actions, dtype=torch.float32).unsqueeze(0),
            torch.as_tensor(seq.timesteps, dtype=torch.long).unsqueeze(0),
            prompt=prompt,
        )
    return pred[0].numpy()


class _EpisodeBank:
    """All train-split episodes as flat tensors, with per-task text embeddings."""

    def __init__(self, manifest: DatasetManifest, align: AlignmentCheckpoint | None):
        states, actions, rtg, task_idx = [], [], [], []
        self.captions = []
        tasks = manifest.train_entries()
        for k, entry in enumerate(tasks):
            task = entry.to_task()
            self.captions.append([envs.describe(task, s) for s in envs.STYLES])
            for traj in manifest.load_trajectories(entry.task_id):
                states.append(traj.states[:-1])
                actions.append(traj.actions)
                rtg.append(datagen.returns_to_go(traj))
                task_idx.append(k)
        scale = manifest.return_scale
        self.states = torch.as_tensor(np.stack(states), dtype=torch.float32)
        self.actions = torch.as_tensor(np.stack(actions), dtype=torch.float32)
        self.rtg = torch.as_tensor(np.stack(rtg) / scale, dtype=torch.float32).unsqueeze(-1)
        self.task_idx = np.array(task_idx)
        self.prompts = None
        if align is not None:
            flat = [c for styled in self.captions for c in styled]
            emb = align.encode_text(flat).reshape(len(tasks), len(envs.STYLES), -1)
            self.prompts = torch.as_tensor(emb, dtype=torch.float32)

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(len(self.states), size=batch)
        prompt = None
        if self.prompts is not None:
            style = rng.integers(self.prompts.shape[1], size=batch)
            prompt = self.prompts[self.task_idx[idx], style]
        return self.states[idx], self.actions[idx], self.rtg[idx], prompt


@dataclass
class DTPolicy:
    """Trained policy bundle: transformer plus the frozen text encoder."""

    model: DecisionTransformer
    align: AlignmentCheckpoint | None
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
        return "dt"

    def save(self, path: str | Path) -> Path:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        if self.align is not None:
            tensors.update({f"text.{k}": v for k, v in self.align.head.state_dict().items()})
        return nncore.save_checkpoint(path, CHECKPOINT_TAG, tensors, self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "DTPolicy":
        _, tensors, meta = nncore.load_checkpoint(path, expected_tag=CHECKPOINT_TAG)
        model = DecisionTransformer(DTConfig(**meta["config"]))
        model.load_state_dict({k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")})
        align = None
        if meta["config"]["use_prompt"]:
            head = AlignmentHead(AlignmentConfig(**meta["align_config"]))
            head.load_state_dict({k[len("text.") :]: v for k, v in tensors.items() if k.startswith("text.")})
            align = AlignmentCheckpoint(head=head, meta={"config": meta["align_config"]})
        return cls(model=model, align=align, meta=meta)

    def rollout(
        self,
        caption: str,
        task: TaskSpec,
        target_return: float | None = None,
        seed: int = 0,
        n_episodes: int = 1,
    ) -> list[Trajectory]:
        return dt_rollout(self, caption, task, target_return=target_return, seed=seed, n_episodes=n_episodes)


def train_dt(
    manifest: DatasetManifest,
    align_checkpoint: AlignmentCheckpoint | None,
    cfg: DTConfig | None = None,
    steps: int = 4000,
    batch: int = 64,
    lr: float = 1e-4,
    seed: int = 0,
    log_every: int = 500,
    progress=None,
) -> DTPolicy:
    """Mean-squared action regression over prompt-augmented episodes."""
    family = manifest.family
    if cfg is None:
        cfg = DTConfig(state_dim=envs.state_dim(family), action_dim=envs.action_dim(family))
    if not cfg.use_prompt:
        align_checkpoint = None
    if cfg.use_prompt and align_checkpoint is None:
        raise ValueError("prompted policy needs an alignment checkpoint")
    bank = _EpisodeBank(manifest, align_checkpoint)
    torch.manual_seed(seed)
    model = DecisionTransformer(cfg)
    nncore.init_dense_(model)
    opt = nncore.AdamW(model.named_parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    timesteps = torch.arange(cfg.horizon).unsqueeze(0)
    history = []
    for step_idx in range(steps):
        states, actions, rtg, prompt = bank.sample(batch, rng)
        pred = model(rtg, states, actions, timesteps.expand(len(states), -1), prompt=prompt)
        loss = ((pred - actions) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step_idx % log_every == 0 or step_idx == steps - 1:
            history.append((step_idx, loss.item()))
            if progress:
                progress(step_idx, loss.item())
    meta = {
        "kind": "dt",
        "config": asdict(cfg),
        "align_config": None if align_checkpoint is None else align_checkpoint.meta["config"],
        "family": family,
        "tier": manifest.tier,
        "return_scale": manifest.return_scale,
        "target_return": manifest.target_return,
        "steps": steps,
        "seed": seed,
        "loss_history": history,
    }
    return DTPolicy(model=model, align=align_checkpoint, meta=meta)


def dt_rollout(
    policy: DTPolicy,
    caption: str,
    task: TaskSpec,
    target_return: float | None = None,
    seed: int = 0,
    n_episodes: int = 1,
) -> list[Trajectory]:
    """Closed-loop zero-shot evaluation; the policy sees only the caption.

    The desired return starts at the manifest's stored target and is decremented
    by each observed reward. Episodes are batched through the model.
    """
    del seed  # the policy and envs are deterministic; kept for interface parity
    cfg = policy.model.cfg
    scale = policy.meta["return_scale"]
    goal = policy.meta["target_return"] if target_return is None else target_return
    prompt = None
    if cfg.use_prompt:
        with policy_zone():
            emb = policy.align.encode_text([caption])
        prompt = torch.as_tensor(np.repeat(emb, n_episodes, axis=0), dtype=torch.float32)
    episodes = [Environment(task) for _ in range(n_episodes)]
    obs = np.stack([env.reset() for env in episodes])
    low, high = envs.action_bounds(task.family)
    rtg = [[float(goal)] for _ in range(n_episodes)]
    states = [[o] for o in obs]
    acts: list[list[np.ndarray]] = [[] for _ in range(n_episodes)]
    rewards: list[list[float]] = [[] for _ in range(n_episodes)]
    for t in range(episodes[0].horizon):
        with policy_zone():
            keep = min(t + 1, cfg.horizon)
            rtg_w = torch.as_tensor(
                np.array([r[-keep:] for r in rtg]) / scale, dtype=torch.float32
            ).unsqueeze(-1)
            states_w = torch.as_tensor(np.array([s[-keep:] for s in states]), dtype=torch.float32)
            actions_w = torch.zeros(n_episodes, keep, cfg.action_dim)
            if keep > 1:
                prev = np.array([a[-(keep - 1) :] for a in acts])
                actions_w[:, : keep - 1] = torch.as_tensor(prev, dtype=torch.float32)
            timesteps = torch.arange(keep).unsqueeze(0).expand(n_episodes, -1)
            with torch.no_grad():
                pred = policy.model(rtg_w, states_w, actions_w, timesteps, prompt=prompt)
            chosen = np.clip(pred[:, -1].numpy().astype(np.float64), low, high)
        for i, env in enumerate(episodes):
            next_obs, reward, _ = env.step(chosen[i])
            acts[i].append(chosen[i])
            rewards[i].append(reward)
            states[i].append(next_obs)
            rtg[i].append(rtg[i][-1] - reward)
    return [
        Trajectory(np.stack(states[i]), np.stack(acts[i]), np.array(rewards[i]), task.task_id)
        for i in range(n_episodes)
    ]
