"""Offline dataset construction at three quality tiers, with exact replay.

A behavior policy interpolates between the scripted expert and uniform noise.
The medium tier is calibrated per task so its mean return sits halfway between
the random-policy and expert returns; the calibration result is stored in the
manifest for reproducibility.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .envs import TaskSpec

TIERS = ("expert", "medium", "mixed")
MIXED_NOISE_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_TRAJECTORIES_PER_TASK = 200


@dataclass
class Trajectory:
    """Aligned episode arrays; states has one more row than actions/rewards."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    task_id: str = ""

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if len(self.states) != len(self.actions) + 1 or len(self.actions) != len(self.rewards):
            raise ValueError(
                "inconsistent trajectory arrays: "
                f"{len(self.states)} states, {len(self.actions)} actions, {len(self.rewards)} rewards"
            )

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


def returns_to_go(trajectory: Trajectory | np.ndarray) -> np.ndarray:
    """Undiscounted suffix sums of the reward sequence."""
    rewards = trajectory.rewards if isinstance(trajectory, Trajectory) else np.asarray(trajectory)
    if rewards.size == 0:
        raise ValueError("rewards array is empty")
    return np.flip(np.cumsum(np.flip(rewards.astype(np.float64))))


def rollout_policy(task: TaskSpec, policy_fn, seed: int | None = None) -> Trajectory:
    """Run one full-horizon episode with ``policy_fn(state, rng) -> action``."""
    rng = np.random.default_rng(seed)
    state = envs.initial_state(task.family)
    states = [state.observation.copy()]
    actions, rewards = [], []
    done = False
    while not done:
        action = policy_fn(state, rng)
        state, reward, done = envs.step(task, state, action)
        states.append(state.observation.copy())
        actions.append(np.asarray(action, dtype=np.float64).reshape(-1))
        rewards.append(reward)
    return Trajectory(np.stack(states), np.stack(actions), np.array(rewards), task.task_id)


def expert_rollout(task: TaskSpec) -> Trajectory:
    return rollout_policy(task, lambda s, rng: envs.optimal_action(task, s))


def random_policy_returns(task: TaskSpec, n: int, seed: int) -> np.ndarray:
    """Monte-Carlo oracle: returns of n uniform-random rollouts."""
    rng = np.random.default_rng(seed)
    out = np.empty(n)
    for i in range(n):
        traj = rollout_policy(
            task, lambda s, r: envs.random_action(task.family, r), seed=rng.integers(2**31)
        )
        out[i] = traj.total_return
    return out


def collect_dataset(task: TaskSpec, noise_level: float, n_traj: int, seed: int) -> list[Trajectory]:
    """Collect episodes with an epsilon-greedy expert; per-step noise decision."""
    if not 0.0 <= noise_level <= 1.0:
        raise ValueError(f"noise_level must lie in [0, 1], got {noise_level}")
    rng = np.random.default_rng(seed)
    trajectories = []
    for _ in range(n_traj):

        def behavior(state, _unused, _rng=rng):
            if _rng.random() < noise_level:
                return envs.random_action(task.family, _rng)
            return envs.optimal_action(task, state)

        trajectories.append(rollout_policy(task, behavior))
    return trajectories


def replay_consistent(task: TaskSpec, traj: Trajectory) -> bool:
    """Check every stored transition reproduces exactly through the env."""
    for t in range(len(traj)):
        state = envs.EnvState(traj.states[t], t)
        next_state, reward, _ = envs.step(task, state, traj.actions[t])
        if not np.array_equal(next_state.observation, traj.states[t + 1]):
            return False
        if reward != traj.rewards[t]:
            return False
    return True


def calibrate_medium_noise(task: TaskSpec, seed: int, n_probe: int = 16) -> dict:
    """Pick the noise level whose mean return is closest to half expert performance.

    Half performance is measured on the random-to-expert return scale:
    target = random_mean + 0.5 * (expert_return - random_mean).
    """
    expert = expert_rollout(task).total_return
    random_mean = float(np.mean(random_policy_returns(task, 2 * n_probe, seed)))
    target = random_mean + 0.5 * (expert - random_mean)
    best_noise, best_mean, best_gap = 0.5, None, np.inf
    for noise in np.arange(0.05, 1.0, 0.05):
        probes = collect_dataset(task, float(noise), n_probe, seed + int(noise * 100))
        mean = float(np.mean([t.total_return for t in probes]))
        if abs(mean - target) < best_gap:
            best_noise, best_mean, best_gap = float(noise), mean, abs(mean - target)
    return {
        "noise": best_noise,
        "target": target,
        "probe_mean": best_mean,
        "expert": expert,
        "random": random_mean,
    }


@dataclass
class TaskEntry:
    """Per-task slice of a dataset manifest; test-split tasks carry no data."""

    task_id: str
    family: str
    params: list[float]
    caption: str
    split: str
    path: str = ""
    n_traj: int = 0
    max_return: float | None = None
    mean_return: float | None = None
    min_return: float | None = None
    calibration: dict | None = None

    def to_task(self) -> TaskSpec:
        return TaskSpec(self.family, self.params, split=self.split, task_id=self.task_id)


@dataclass
class DatasetManifest:
    """Index of one (family, tier) dataset on disk."""

    family: str
    tier: str
    seed: int
    per_task_trajectories: int
    root: str
    tasks: list[TaskEntry] = field(default_factory=list)
    return_scale: float = 1.0
    target_return: float = 0.0

    def train_entries(self) -> list[TaskEntry]:
        return [t for t in self.tasks if t.split == "train"]

    def test_entries(self) -> list[TaskEntry]:
        return [t for t in self.tasks if t.split == "test"]

    def entry(self, task_id: str) -> TaskEntry:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def load_trajectories(self, task_id: str) -> list[Trajectory]:
        entry = self.entry(task_id)
        if not entry.path:
            raise ValueError(f"task {task_id!r} has no stored data (split={entry.split})")
        with np.load(Path(self.root) / entry.path) as data:
            states, actions, rewards = data["states"], data["actions"], data["rewards"]
        return [
            Trajectory(states[i], actions[i], rewards[i], task_id) for i in range(len(states))
        ]

    def manifest_path(self) -> Path:
        return Path(self.root) / f"manifest_{self.tier}.json"

    def save(self) -> Path:
        payload = {
            "family": self.family,
            "tier": self.tier,
            "seed": self.seed,
            "per_task_trajectories": self.per_task_trajectories,
            "return_scale": self.return_scale,
            "target_return": self.target_return,
            "tasks": [vars(t) for t in self.tasks],
        }
        path = self.manifest_path()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        payload = json.loads(path.read_text())
        manifest = cls(
            family=payload["family"],
            tier=payload["tier"],
            seed=payload["seed"],
            per_task_trajectories=payload["per_task_trajectories"],
            root=str(path.parent),
            tasks=[TaskEntry(**t) for t in payload["tasks"]],
            return_scale=payload["return_scale"],
            target_return=payload["target_return"],
        )
        for entry in manifest.tasks:
            if entry.path and not (Path(manifest.root) / entry.path).exists():
                raise FileNotFoundError(f"manifest lists missing file {entry.path}")
        return manifest


def _save_task_file(
    root: Path, task: TaskSpec, tier: str, seed: int, trajs: list[Trajectory], noise: np.ndarray
) -> str:
    rel = f"{tier}_{task.task_id.replace(':', '_')}.npz"
    np.savez_compressed(
        root / rel,
        states=np.stack([t.states for t in trajs]),
        actions=np.stack([t.actions for t in trajs]),
        rewards=np.stack([t.rewards for t in trajs]),
        noise_levels=noise,
        family=np.str_(task.family),
        params=np.asarray(task.params, dtype=np.float64),
        caption=np.str_(task.caption),
        tier=np.str_(tier),
        seed=np.int64(seed),
    )
    return rel


def build_tier(
    tasks: list[TaskSpec],
    tier: str,
    seed: int,
    root: str | Path,
    n_traj: int = DEFAULT_TRAJECTORIES_PER_TASK,
) -> DatasetManifest:
    """Collect and persist one tier for the train-split tasks in ``tasks``."""
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}; expected one of {TIERS}")
    if not tasks:
        raise ValueError("task list is empty")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    family = tasks[0].family
    manifest = DatasetManifest(
        family=family, tier=tier, seed=seed, per_task_trajectories=n_traj, root=str(root)
    )
    rng = np.random.default_rng(seed)
    for task in tasks:
        entry = TaskEntry(
            task_id=task.task_id,
            family=task.family,
            params=list(task.params),
            caption=task.caption,
            split=task.split,
        )
        if task.split == "train":
            task_seed = int(rng.integers(2**31))
            if tier == "expert":
                trajs = collect_dataset(task, 0.0, n_traj, task_seed)
                noise = np.zeros(n_traj)
            elif tier == "medium":
                entry.calibration = calibrate_medium_noise(task, task_seed)
                level = entry.calibration["noise"]
                trajs = collect_dataset(task, level, n_traj, task_seed)
                noise = np.full(n_traj, level)
            else:
                noise = np.array([MIXED_NOISE_LEVELS[i % len(MIXED_NOISE_LEVELS)] for i in range(n_traj)])
                trajs = []
                for j, level in enumerate(MIXED_NOISE_LEVELS):
                    count = int(np.sum(noise == level))
                    trajs.extend(collect_dataset(task, level, count, task_seed + j))
            returns = np.array([t.total_return for t in trajs])
            entry.path = _save_task_file(root, task, tier, seed, trajs, noise)
            entry.n_traj = n_traj
            entry.max_return = float(returns.max())
            entry.mean_return = float(returns.mean())
            entry.min_return = float(returns.min())
        manifest.tasks.append(entry)
    train = manifest.train_entries()
    if not train:
        raise ValueError("task list contains no train-split tasks")
    manifest.return_scale = float(
        max(max(abs(t.max_return), abs(t.min_return)) for t in train)
    )
    manifest.target_return = float(max(t.max_return for t in train))
    manifest.save()
    return manifest
