"""Analytic multi-task environments with text captions and scripted experts.

Three families share the same interface: a 2D goal-reaching navigator
(point-robot), a 2D direction-following navigator (point-dir), and a 1D
target-velocity tracker (line-vel). All dynamics are closed-form, so episode
transitions are exactly reproducible from stored arrays.
"""
from __future__ import annotations

import contextvars
import re
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

FAMILIES = ("point-robot", "point-dir", "line-vel")
STYLES = ("standard", "noisy", "conversational")

HORIZON = 20
_POS_RANGE = (-0.5, 0.5)
_VEL_RANGE = (0.0, 3.0)
_VEL_GOAL_RANGE = (0.075, 3.0)

_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")


class EnvError(ValueError):
    """Raised for invalid tasks, states, or actions."""


class ZeroShotViolation(RuntimeError):
    """Raised when task parameters are read from inside the policy zone."""


_POLICY_ZONE = contextvars.ContextVar("text2act_policy_zone", default=False)


@contextmanager
def policy_zone():
    """Mark a code region as policy-side: task parameters are unreadable inside.

    Rollout loops wrap action selection in this zone so that evaluation can
    assert the policy saw only the instruction text, never the simulator's
    task parameters.
    """
    token = _POLICY_ZONE.set(True)
    try:
        yield
    finally:
        _POLICY_ZONE.reset(token)


def in_policy_zone() -> bool:
    return _POLICY_ZONE.get()


class TaskSpec:
    """One task: an environment family, its parameters, and a text caption.

    ``params`` is guarded: reading it inside :func:`policy_zone` raises
    :class:`ZeroShotViolation`. Simulator-side code (``step``, ``describe``,
    ``optimal_action``) must therefore run outside the zone.
    """

    __slots__ = ("family", "_params", "caption", "split", "task_id")

    def __init__(self, family: str, params, split: str = "train", task_id: str = ""):
        if family not in FAMILIES:
            raise EnvError(f"unknown environment family {family!r}; expected one of {FAMILIES}")
        if split not in ("train", "test"):
            raise EnvError(f"unknown split {split!r}")
        values = tuple(float(p) for p in np.atleast_1d(np.asarray(params, dtype=np.float64)))
        _validate_params(family, values)
        self.family = family
        self._params = values
        self.caption = _describe_params(family, values, "standard")
        self.split = split
        self.task_id = task_id or f"{family}:{split}:{values}"

    @property
    def params(self) -> tuple[float, ...]:
        if _POLICY_ZONE.get():
            raise ZeroShotViolation(
                f"task parameters of {self.task_id!r} were read inside the policy zone"
            )
        return self._params

    def __repr__(self) -> str:
        return f"TaskSpec({self.family!r}, {self._params}, split={self.split!r})"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TaskSpec)
            and self.family == other.family
            and self._params == other._params
            and self.split == other.split
        )

    def __hash__(self) -> int:
        return hash((self.family, self._params, self.split))


def _validate_params(family: str, values: tuple[float, ...]) -> None:
    if family == "point-robot":
        if len(values) != 2 or not all(_POS_RANGE[0] <= v <= _POS_RANGE[1] for v in values):
            raise EnvError(f"point-robot goal must lie in [-0.5, 0.5]^2, got {values}")
    elif family == "point-dir":
        if len(values) != 1 or not 0.0 <= values[0] < 2.0 * np.pi:
            raise EnvError(f"point-dir angle must lie in [0, 2*pi), got {values}")
    else:
        if len(values) != 1 or not _VEL_GOAL_RANGE[0] <= values[0] <= _VEL_GOAL_RANGE[1]:
            raise EnvError(f"line-vel target must lie in [0.075, 3.0], got {values}")


@dataclass
class EnvState:
    """Observation plus step counter; immutable value semantics by convention."""

    observation: np.ndarray
    step_index: int


def state_dim(family: str) -> int:
    return 1 if family == "line-vel" else 2


def action_dim(family: str) -> int:
    return 1 if family == "line-vel" else 2


def action_bounds(family: str) -> tuple[np.ndarray, np.ndarray]:
    if family == "line-vel":
        return np.array([-1.0]), np.array([1.0])
    return np.full(2, -0.1), np.full(2, 0.1)


def observation_bounds(family: str) -> tuple[np.ndarray, np.ndarray]:
    if family == "line-vel":
        return np.array([_VEL_RANGE[0]]), np.array([_VEL_RANGE[1]])
    return np.full(2, _POS_RANGE[0]), np.full(2, _POS_RANGE[1])


def initial_state(family: str) -> EnvState:
    # Fixed start: origin for the navigators, zero velocity for line-vel.
    return EnvState(np.zeros(state_dim(family), dtype=np.float64), 0)


def clamp_action(family: str, action) -> np.ndarray:
    low, high = action_bounds(family)
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != low.shape:
        raise EnvError(f"{family} actions have dimension {low.size}, got shape {a.shape}")
    return np.clip(a, low, high)


def sample_tasks(family: str, n_train: int, n_test: int, seed: int) -> list[TaskSpec]:
    """Draw ``n_train + n_test`` tasks i.i.d. uniform over the family's box."""
    if family not in FAMILIES:
        raise EnvError(f"unknown environment family {family!r}; expected one of {FAMILIES}")
    if n_train < 1 or n_test < 0:
        raise EnvError("need n_train >= 1 and n_test >= 0")
    rng = np.random.default_rng(seed)
    total = n_train + n_test
    if family == "point-robot":
        draws = rng.uniform(_POS_RANGE[0], _POS_RANGE[1], size=(total, 2))
    elif family == "point-dir":
        draws = rng.uniform(0.0, 2.0 * np.pi, size=(total, 1))
    else:
        draws = rng.uniform(_VEL_GOAL_RANGE[0], _VEL_GOAL_RANGE[1], size=(total, 1))
    tasks = []
    for i, row in enumerate(draws):
        split = "train" if i < n_train else "test"
        idx = i if i < n_train else i - n_train
        tasks.append(TaskSpec(family, row, split=split, task_id=f"{family}:{split}:{idx:03d}"))
    return tasks


def step(task: TaskSpec, state: EnvState, action) -> tuple[EnvState, float, bool]:
    """Advance one step. Out-of-range actions are clamped, never rejected."""
    family = task.family
    if state.step_index >= HORIZON:
        raise EnvError(f"episode for {task.task_id!r} is already done at step {state.step_index}")
    a = clamp_action(family, action)
    params = np.asarray(task.params, dtype=np.float64)
    if family == "line-vel":
        v_next = float(np.clip(state.observation[0] + 0.1 * a[0], *_VEL_RANGE))
        reward = -abs(v_next - params[0]) - 0.05 * abs(a[0])
        obs = np.array([v_next], dtype=np.float64)
    else:
        # Positions live in the goal box; walls absorb excess displacement.
        obs = np.clip(state.observation + a, _POS_RANGE[0], _POS_RANGE[1])
        if family == "point-robot":
            reward = -float(np.linalg.norm(obs - params))
        else:
            delta = obs - state.observation
            reward = float(delta[0] * np.cos(params[0]) + delta[1] * np.sin(params[0]))
    next_state = EnvState(obs, state.step_index + 1)
    return next_state, float(reward), next_state.step_index >= HORIZON


def optimal_action(task: TaskSpec, state: EnvState) -> np.ndarray:
    """Scripted expert for data collection; greedy and closed-form."""
    family = task.family
    params = np.asarray(task.params, dtype=np.float64)
    if family == "point-robot":
        return np.clip(params - state.observation, -0.1, 0.1)
    if family == "point-dir":
        return np.array([0.1 * np.cos(params[0]), 0.1 * np.sin(params[0])])
    return np.clip((params - state.observation) / 0.1, -1.0, 1.0)


def random_action(family: str, rng: np.random.Generator) -> np.ndarray:
    low, high = action_bounds(family)
    return rng.uniform(low, high)


def _fmt(value: float) -> str:
    return str(round(float(value), 2))


_TEMPLATES = {
    "point-robot": {
        "standard": "Please navigate to the goal position of ({0}, {1})",
        "noisy": (
            "Um, there's this location I think... somewhere around {0}-ish "
            "in the x direction? And maybe {1} or so up?"
        ),
        "conversational": (
            "Could you move over to the spot that's roughly {0} units to "
            "the right and {1} units up? Thanks!"
        ),
    },
    "point-dir": {
        "standard": "Please walk toward the target direction of {0}",
        "noisy": "Um, try heading somewhere around {0}-ish radians, I think? That general direction?",
        "conversational": "Could you walk out along the direction of about {0} radians? Thanks!",
    },
    "line-vel": {
        "standard": "Please run at the target velocity of {0}",
        "noisy": "Um, keep the pace somewhere around {0}-ish, I think? More or less?",
        "conversational": "Could you cruise along at a speed of roughly {0}? Thanks!",
    },
}


def _describe_params(family: str, params: tuple[float, ...], style: str) -> str:
    if style not in STYLES:
        raise EnvError(f"unknown caption style {style!r}; expected one of {STYLES}")
    return _TEMPLATES[family][style].format(*[_fmt(p) for p in params])


def describe(task: TaskSpec, style: str = "standard") -> str:
    """Templated caption for a task; numeric parameters rounded to 2 decimals."""
    return _describe_params(task.family, task.params, style)


def parse_instruction(family: str, text: str) -> tuple[float, ...] | None:
    """Recover task parameters from an instruction using the caption grammar.

    Returns None when the text does not carry enough numbers. Parsed values
    are clipped into the family's sampling box, since captions round to two
    decimals and may land marginally outside it.
    """
    if family not in FAMILIES:
        raise EnvError(f"unknown environment family {family!r}; expected one of {FAMILIES}")
    numbers = [float(m) for m in _NUMBER_RE.findall(text)]
    if family == "point-robot":
        if len(numbers) < 2:
            return None
        lo, hi = _POS_RANGE
        return (min(max(numbers[0], lo), hi), min(max(numbers[1], lo), hi))
    if len(numbers) < 1:
        return None
    if family == "point-dir":
        theta = numbers[0] % (2.0 * np.pi)
        return (theta,)
    lo, hi = _VEL_GOAL_RANGE
    return (min(max(numbers[0], lo), hi),)


class Environment:
    """Stateful episode wrapper around the pure step function.

    One instance per rollout; exposes only observations, rewards, and
    family-level metadata to its caller.
    """

    def __init__(self, task: TaskSpec):
        self.task = task
        self.state = initial_state(task.family)

    @property
    def family(self) -> str:
        return self.task.family

    @property
    def horizon(self) -> int:
        return HORIZON

    @property
    def done(self) -> bool:
        return self.state.step_index >= HORIZON

    def reset(self) -> np.ndarray:
        self.state = initial_state(self.task.family)
        return self.state.observation.copy()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        next_state, reward, done = step(self.task, self.state, action)
        self.state = next_state
        return next_state.observation.copy(), reward, done

    def metadata(self) -> dict:
        obs_low, obs_high = observation_bounds(self.family)
        act_low, act_high = action_bounds(self.family)
        return {
            "family": self.family,
            "horizon": self.horizon,
            "observation_low": obs_low.tolist(),
            "observation_high": obs_high.tolist(),
            "action_low": act_low.tolist(),
            "action_high": act_high.tolist(),
        }
