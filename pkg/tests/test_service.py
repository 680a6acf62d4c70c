import concurrent.futures

import numpy as np
import pytest
from fastapi.testclient import TestClient

from text2act import datagen, envs, policy_dd, policy_dt, textalign, worldmodel
from text2act.service import PolicyRegistry, RolloutRequest, create_app, handle_rollout


@pytest.fixture(scope="module")
def registry(tmp_path_factory):
    tasks = envs.sample_tasks("point-robot", 5, 1, seed=101)
    manifest = datagen.build_tier(tasks, "mixed", seed=102, root=tmp_path_factory.mktemp("svc"), n_traj=12)
    wm_cfg = worldmodel.WorldModelConfig(state_dim=2, action_dim=2, d_model=32, n_layers=1, n_heads=2, z_dim=16, decoder_width=32)
    wm = worldmodel.train_world_model(manifest, wm_cfg, steps=100, batch=8, seed=103, log_every=50)
    align = textalign.train_alignment(
        manifest, wm, textalign.AlignmentConfig(z_dim=16, text_dim=32, joint_dim=16),
        steps=80, batch=5, seed=104, log_every=40,
    )
    dt_cfg = policy_dt.DTConfig(state_dim=2, action_dim=2, d_model=32, n_layers=1, n_heads=1, text_dim=32)
    dt = policy_dt.train_dt(manifest, align, dt_cfg, steps=40, batch=8, seed=105)
    dd_cfg = policy_dd.DDConfig(state_dim=2, action_dim=2, d_model=32, n_layers=1, n_heads=2, horizon=6, text_dim=32, diffusion_steps=6)
    dd = policy_dd.train_dd(manifest, align, dd_cfg, steps=40, batch=8, seed=106)
    return PolicyRegistry(dt=dt, dd=dd)


@pytest.fixture(scope="module")
def client(registry):
    return TestClient(create_app(registry=registry))


INSTRUCTION = "Please navigate to the goal position of (0.3, -0.2)"


class TestHealthAndModels:
    def test_health_lists_checkpoint_tags(self, client):
        body = client.get("/health").json()
        assert body["status"] == "ok"
        assert body["models"] == {"dd": "dd/v1", "dt": "dt/v1"}

    def test_models_endpoint(self, client):
        body = client.get("/models").json()
        kinds = {m["kind"] for m in body}
        assert kinds == {"dt", "dd"}
        for m in body:
            assert m["family"] == "point-robot"

    def test_models_stable_across_requests(self, client):
        assert client.get("/models").content == client.get("/models").content


class TestRollout:
    def test_valid_instruction(self, client):
        resp = client.post("/rollout", json={"instruction": INSTRUCTION, "seed": 1})
        assert resp.status_code == 200
        body = resp.json()
        assert len(body["states"]) == envs.HORIZON + 1
        assert len(body["actions"]) == len(body["rewards"]) == envs.HORIZON
        assert body["total_return"] == pytest.approx(sum(body["rewards"]))
        assert body["task_params"] == [0.3, -0.2]
        assert "task_params" in body["simulator_side_only"]
        assert "instruction" in body["policy_inputs"]

    def test_response_replays_through_env(self, client):
        body = client.post("/rollout", json={"instruction": INSTRUCTION}).json()
        task = envs.TaskSpec("point-robot", body["task_params"], split="test")
        traj = datagen.Trajectory(
            np.array(body["states"]), np.array(body["actions"]), np.array(body["rewards"])
        )
        assert datagen.replay_consistent(task, traj)

    def test_empty_instruction_names_field(self, client):
        resp = client.post("/rollout", json={"instruction": ""})
        assert resp.status_code == 422
        assert "instruction" in resp.text

    def test_blank_instruction_rejected(self, client):
        resp = client.post("/rollout", json={"instruction": "   "})
        assert resp.status_code == 422

    def test_unparseable_instruction_gets_guidance(self, client):
        resp = client.post("/rollout", json={"instruction": "go to the nice place"})
        assert resp.status_code == 422
        assert "task_params" in resp.json()["detail"]

    def test_unparseable_with_explicit_params_ok(self, client):
        resp = client.post(
            "/rollout",
            json={"instruction": "go to the nice place", "task_params": [0.2, 0.1]},
        )
        assert resp.status_code == 200
        assert resp.json()["task_params"] == [0.2, 0.1]

    def test_out_of_box_params_rejected(self, client):
        resp = client.post("/rollout", json={"instruction": INSTRUCTION, "task_params": [2.0, 0.0]})
        assert resp.status_code == 422

    def test_family_mismatch_rejected(self, client):
        resp = client.post(
            "/rollout", json={"family": "line-vel", "instruction": "Please run at the target velocity of 1.5"}
        )
        assert resp.status_code == 422

    def test_identical_requests_byte_identical(self, client):
        payload = {"instruction": INSTRUCTION, "model": "dd", "seed": 7}
        a = client.post("/rollout", json=payload)
        b = client.post("/rollout", json=payload)
        assert a.content == b.content

    def test_default_target_return_echoed(self, client, registry):
        body = client.post("/rollout", json={"instruction": INSTRUCTION}).json()
        assert body["target_return"] == pytest.approx(registry.get("dt").meta["target_return"])

    def test_concurrent_identical_requests_consistent(self, client):
        payload = {"instruction": INSTRUCTION, "seed": 3}
        with concurrent.futures.ThreadPoolExecutor(max_workers=4) as pool:
            bodies = list(pool.map(lambda _: client.post("/rollout", json=payload).content, range(4)))
        assert len(set(bodies)) == 1

    def test_dd_guidance_weight_accepted(self, client):
        resp = client.post(
            "/rollout", json={"instruction": INSTRUCTION, "model": "dd", "guidance_weight": 0.0, "seed": 2}
        )
        assert resp.status_code == 200
        assert resp.json()["guidance_weight"] == 0.0


class TestRegistry:
    def test_missing_model_404(self, registry):
        dt_only = PolicyRegistry(dt=registry.get("dt"))
        app = create_app(registry=dt_only)
        with TestClient(app) as client:
            resp = client.post("/rollout", json={"instruction": INSTRUCTION, "model": "dd"})
            assert resp.status_code == 404

    def test_empty_registry_rejected(self):
        with pytest.raises(ValueError):
            PolicyRegistry()

    def test_handle_rollout_direct(self, registry):
        resp = handle_rollout(registry, RolloutRequest(instruction=INSTRUCTION))
        assert resp.total_return == pytest.approx(sum(resp.rewards))
