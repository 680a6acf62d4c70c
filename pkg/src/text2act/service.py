"""Read-only HTTP inference service over trained policy checkpoints.

POST /rollout runs one zero-shot episode from a natural-language instruction.
The service parses task parameters out of the instruction (reverse of the
caption grammar) purely so the simulator can score the episode; the policy
side still receives only the text and the return target, and the response
labels which side consumed which inputs.
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field, field_validator

from . import envs
from .envs import EnvError, TaskSpec
from .policy_dd import DDPolicy
from .policy_dt import DTPolicy

POLICY_INPUTS = ["instruction", "target_return", "guidance_weight"]
SIMULATOR_INPUTS = ["task_params"]


class RolloutRequest(BaseModel):
    family: str = "point-robot"
    instruction: str = Field(min_length=1)
    model: Literal["dt", "dd"] = "dt"
    target_return: float | None = None
    guidance_weight: float | None = None
    seed: int = 0
    task_params: list[float] | None = None

    @field_validator("instruction")
    @classmethod
    def _instruction_not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("instruction must not be blank")
        return value


class EnvMeta(BaseModel):
    family: str
    horizon: int
    observation_low: list[float]
    observation_high: list[float]
    action_low: list[float]
    action_high: list[float]


class RolloutResponse(BaseModel):
    states: list[list[float]]
    actions: list[list[float]]
    rewards: list[float]
    total_return: float
    env: EnvMeta
    task_params: list[float]
    simulator_side_only: list[str] = SIMULATOR_INPUTS
    policy_inputs: list[str] = POLICY_INPUTS
    simulator_inputs: list[str] = SIMULATOR_INPUTS
    model: str
    seed: int
    target_return: float
    guidance_weight: float | None = None


class ModelInfo(BaseModel):
    kind: str
    tag: str
    family: str
    tier: str
    target_return: float


class PolicyRegistry:
    """Immutable set of loaded checkpoints served to all requests."""

    def __init__(self, dt: DTPolicy | None = None, dd: DDPolicy | None = None):
        self.policies: dict[str, object] = {}
        if dt is not None:
            self.policies["dt"] = dt
        if dd is not None:
            self.policies["dd"] = dd
        if not self.policies:
            raise ValueError("service needs at least one policy checkpoint")

    @classmethod
    def from_paths(cls, dt_path: str | None = None, dd_path: str | None = None) -> "PolicyRegistry":
        dt = DTPolicy.load(dt_path) if dt_path else None
        dd = DDPolicy.load(dd_path) if dd_path else None
        return cls(dt=dt, dd=dd)

    def get(self, kind: str):
        if kind not in self.policies:
            raise KeyError(kind)
        return self.policies[kind]

    def infos(self) -> list[ModelInfo]:
        tags = {"dt": "dt/v1", "dd": "dd/v1"}
        return [
            ModelInfo(
                kind=kind,
                tag=tags[kind],
                family=policy.meta["family"],
                tier=policy.meta.get("tier", ""),
                target_return=policy.meta["target_return"],
            )
            for kind, policy in sorted(self.policies.items())
        ]


def handle_rollout(registry: PolicyRegistry, request: RolloutRequest) -> RolloutResponse:
    try:
        policy = registry.get(request.model)
    except KeyError:
        raise HTTPException(status_code=404, detail=f"model {request.model!r} is not loaded")
    if policy.meta["family"] != request.family:
        raise HTTPException(
            status_code=422,
            detail=f"model {request.model!r} serves family {policy.meta['family']!r}, "
            f"request asked for {request.family!r}",
        )
    params = request.task_params
    if params is None:
        params = envs.parse_instruction(request.family, request.instruction)
        if params is None:
            raise HTTPException(
                status_code=422,
                detail=(
                    "could not parse task parameters out of the instruction; either phrase it "
                    "like a caption template (it must contain the numeric goal) or supply "
                    "explicit task_params so the simulator can score the episode"
                ),
            )
    try:
        task = TaskSpec(request.family, params, split="test", task_id="request")
    except EnvError as exc:
        raise HTTPException(status_code=422, detail=f"task_params invalid: {exc}")
    kwargs = {}
    if request.model == "dd" and request.guidance_weight is not None:
        kwargs["w"] = request.guidance_weight
    traj = policy.rollout(
        request.instruction, task, target_return=request.target_return, seed=request.seed,
        n_episodes=1, **kwargs,
    )[0]
    obs_low, obs_high = envs.observation_bounds(request.family)
    act_low, act_high = envs.action_bounds(request.family)
    used_target = (
        policy.meta["target_return"] if request.target_return is None else request.target_return
    )
    policy_inputs = ["instruction", "target_return"]
    if request.model == "dd":
        policy_inputs.append("guidance_weight")
    return RolloutResponse(
        states=[list(map(float, s)) for s in traj.states],
        actions=[list(map(float, a)) for a in traj.actions],
        rewards=[float(r) for r in traj.rewards],
        total_return=traj.total_return,
        env=EnvMeta(
            family=request.family,
            horizon=envs.HORIZON,
            observation_low=obs_low.tolist(),
            observation_high=obs_high.tolist(),
            action_low=act_low.tolist(),
            action_high=act_high.tolist(),
        ),
        task_params=[float(p) for p in params],
        policy_inputs=policy_inputs,
        model=request.model,
        seed=request.seed,
        target_return=float(used_target),
        guidance_weight=request.guidance_weight,
    )


def create_app(
    dt_path: str | Path | None = None,
    dd_path: str | Path | None = None,
    registry: PolicyRegistry | None = None,
) -> FastAPI:
    if registry is None:
        registry = PolicyRegistry.from_paths(dt_path, dd_path)
    app = FastAPI(title="text2act rollout service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.registry = registry

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "models": {info.kind: info.tag for info in registry.infos()},
        }

    @app.get("/models", response_model=list[ModelInfo])
    def models():
        return registry.infos()

    @app.post("/rollout", response_model=RolloutResponse)
    def rollout(request: RolloutRequest):
        return handle_rollout(registry, request)

    return app


def serve(
    dt_path: str | None = None,
    dd_path: str | None = None,
    host: str = "127.0.0.1",
    port: int = 8420,
):
    import uvicorn

    app = create_app(dt_path=dt_path, dd_path=dd_path)
    uvicorn.run(app, host=host, port=port)
