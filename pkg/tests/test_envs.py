import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from text2act import envs
from text2act.envs import EnvError, EnvState, TaskSpec, ZeroShotViolation


def make_task(family="point-robot", params=(0.3, 0.4), split="train"):
    return TaskSpec(family, params, split=split, task_id=f"{family}:t")


class TestSampleTasks:
    def test_split_sizes_and_box(self):
        tasks = envs.sample_tasks("point-robot", 45, 5, seed=7)
        assert len(tasks) == 50
        assert sum(t.split == "train" for t in tasks) == 45
        assert sum(t.split == "test" for t in tasks) == 5
        for t in tasks:
            assert all(-0.5 <= p <= 0.5 for p in t.params)

    def test_deterministic_under_seed(self):
        a = envs.sample_tasks("line-vel", 10, 2, seed=3)
        b = envs.sample_tasks("line-vel", 10, 2, seed=3)
        assert [t.params for t in a] == [t.params for t in b]

    def test_unknown_family_rejected(self):
        with pytest.raises(EnvError, match="maze"):
            envs.sample_tasks("maze", 1, 1, seed=0)

    def test_boundary_angle_caption(self):
        task = TaskSpec("point-dir", (0.0,))
        assert "0.0" in task.caption

    def test_family_boxes(self):
        for t in envs.sample_tasks("point-dir", 20, 0, seed=1):
            assert 0.0 <= t.params[0] < 2 * np.pi
        for t in envs.sample_tasks("line-vel", 20, 0, seed=1):
            assert 0.075 <= t.params[0] <= 3.0


class TestStep:
    def test_reach_goal_reward_zero(self):
        task = make_task(params=(0.1, 0.1))
        state = envs.initial_state("point-robot")
        nxt, reward, done = envs.step(task, state, (0.1, 0.1))
        assert np.allclose(nxt.observation, [0.1, 0.1])
        assert reward == 0.0
        assert not done

    def test_three_four_five_distance(self):
        task = make_task(params=(0.3, 0.4))
        _, reward, _ = envs.step(task, envs.initial_state("point-robot"), (0.0, 0.0))
        assert reward == pytest.approx(-0.5)

    def test_point_dir_projection(self):
        task = TaskSpec("point-dir", (0.0,))
        _, r_along, _ = envs.step(task, envs.initial_state("point-dir"), (0.1, 0.0))
        _, r_perp, _ = envs.step(task, envs.initial_state("point-dir"), (0.0, 0.1))
        assert r_along == pytest.approx(0.1)
        assert r_perp == pytest.approx(0.0)

    def test_line_vel_dynamics(self):
        task = TaskSpec("line-vel", (1.5,))
        nxt, reward, _ = envs.step(task, envs.initial_state("line-vel"), (1.0,))
        assert nxt.observation[0] == pytest.approx(0.1)
        assert reward == pytest.approx(-(1.5 - 0.1) - 0.05)

    def test_done_after_horizon_and_reject_extra_step(self):
        task = make_task()
        state = envs.initial_state("point-robot")
        for i in range(envs.HORIZON):
            state, _, done = envs.step(task, state, (0.0, 0.0))
        assert done
        with pytest.raises(EnvError, match="done"):
            envs.step(task, state, (0.0, 0.0))

    def test_determinism(self):
        task = make_task(params=(-0.2, 0.45))
        state = EnvState(np.array([0.05, -0.3]), 4)
        results = {envs.step(task, state, (0.07, -0.02))[1] for _ in range(5)}
        assert len(results) == 1

    @given(
        ax=st.floats(-0.5, 0.5), ay=st.floats(-0.5, 0.5),
        gx=st.floats(-0.5, 0.5), gy=st.floats(-0.5, 0.5),
    )
    @settings(max_examples=60, deadline=None)
    def test_clamping_idempotent_and_reward_bounds(self, ax, ay, gx, gy):
        task = make_task(params=(gx, gy))
        state = envs.initial_state("point-robot")
        raw = np.array([ax, ay])
        clamped = envs.clamp_action("point-robot", raw)
        out_raw = envs.step(task, state, raw)
        out_clamped = envs.step(task, state, clamped)
        assert np.array_equal(out_raw[0].observation, out_clamped[0].observation)
        assert out_raw[1] == out_clamped[1]
        assert -np.sqrt(2) <= out_raw[1] <= 0.0

    @given(a=st.floats(-3, 3), vg=st.floats(0.075, 3.0), v0=st.floats(0.0, 3.0))
    @settings(max_examples=60, deadline=None)
    def test_line_vel_reward_bounds(self, a, vg, v0):
        task = TaskSpec("line-vel", (vg,))
        _, reward, _ = envs.step(task, EnvState(np.array([v0]), 0), (a,))
        assert -(3.0 - 0.075) - 0.05 <= reward <= 0.0

    @given(theta=st.floats(0, 2 * np.pi - 1e-9), ax=st.floats(-0.2, 0.2), ay=st.floats(-0.2, 0.2))
    @settings(max_examples=60, deadline=None)
    def test_point_dir_reward_bounds(self, theta, ax, ay):
        task = TaskSpec("point-dir", (theta,))
        _, reward, _ = envs.step(task, envs.initial_state("point-dir"), (ax, ay))
        assert abs(reward) <= 0.1 * np.sqrt(2) + 1e-12


class TestDescribe:
    def test_standard_templates(self):
        assert (
            envs.describe(make_task(params=(0.30, -0.20)))
            == "Please navigate to the goal position of (0.3, -0.2)"
        )
        assert envs.describe(TaskSpec("line-vel", (1.50,))) == "Please run at the target velocity of 1.5"

    def test_conversational_mentions_numbers_and_keyword(self):
        text = envs.describe(make_task(params=(0.30, -0.20)), "conversational")
        assert "0.3" in text and "-0.2" in text
        assert "spot" in text or "move" in text

    def test_unknown_style_rejected(self):
        with pytest.raises(EnvError, match="style"):
            envs.describe(make_task(), "haiku")

    @given(gx=st.floats(-0.5, 0.5), gy=st.floats(-0.5, 0.5))
    @settings(max_examples=60, deadline=None)
    def test_caption_roundtrip(self, gx, gy):
        task = make_task(params=(gx, gy))
        parsed = envs.parse_instruction("point-robot", envs.describe(task, "standard"))
        assert parsed == (round(gx, 2), round(gy, 2))

    def test_parse_all_styles(self):
        task = make_task(params=(0.31, -0.42))
        for style in envs.STYLES:
            parsed = envs.parse_instruction("point-robot", envs.describe(task, style))
            assert parsed == (0.31, -0.42)

    def test_parse_insufficient_numbers(self):
        assert envs.parse_instruction("point-robot", "go somewhere nice") is None


class TestOptimalAction:
    def test_at_goal_zero_action(self):
        task = make_task(params=(0.2, -0.1))
        state = EnvState(np.array([0.2, -0.1]), 3)
        assert np.allclose(envs.optimal_action(task, state), [0.0, 0.0])

    def test_clamp_binds_both_axes(self):
        task = make_task(params=(0.5, 0.5))
        action = envs.optimal_action(task, EnvState(np.array([-0.5, -0.5]), 0))
        assert np.allclose(action, [0.1, 0.1])

    def test_expert_beats_random_rollouts(self):
        from text2act import datagen

        task = make_task(params=(0.41, -0.33))
        expert = datagen.expert_rollout(task).total_return
        random_returns = datagen.random_policy_returns(task, 1000, seed=5)
        assert expert >= random_returns.max()


class TestZeroShotGuard:
    def test_params_blocked_inside_policy_zone(self):
        task = make_task()
        with envs.policy_zone():
            with pytest.raises(ZeroShotViolation):
                _ = task.params

    def test_params_visible_outside(self):
        assert make_task().params == (0.3, 0.4)

    def test_environment_wrapper(self):
        env = envs.Environment(make_task(params=(0.1, 0.1)))
        obs = env.reset()
        assert obs.tolist() == [0.0, 0.0]
        obs, reward, done = env.step((0.1, 0.1))
        assert reward == 0.0
        meta = env.metadata()
        assert meta["horizon"] == 20 and meta["family"] == "point-robot"
