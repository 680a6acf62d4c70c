import math

import numpy as np
import pytest
import torch

from text2act import datagen, envs, nncore, textalign, worldmodel
from text2act.textalign import (
    AlignmentCheckpoint,
    AlignmentConfig,
    build_alignment_head,
    build_vocabulary,
    contrastive_loss,
    encode_text,
    retrieval_accuracy,
    similarity_matrix,
    tokenize_text,
    train_alignment,
)


@pytest.fixture(scope="module")
def head():
    return build_alignment_head(AlignmentConfig(z_dim=16, text_dim=32, joint_dim=16), seed=0)


@pytest.fixture(scope="module")
def trained_setup(tmp_path_factory):
    tasks = envs.sample_tasks("point-robot", 8, 0, seed=61)
    manifest = datagen.build_tier(tasks, "mixed", seed=62, root=tmp_path_factory.mktemp("align"), n_traj=24)
    wm_cfg = worldmodel.WorldModelConfig(state_dim=2, action_dim=2, d_model=32, n_layers=1, n_heads=2, z_dim=16, decoder_width=32)
    wm = worldmodel.train_world_model(manifest, wm_cfg, steps=400, batch=16, seed=63, log_every=200)
    return tasks, manifest, wm


class TestTokenizer:
    def test_numbers_split_from_suffixes(self):
        assert tokenize_text("around 0.3-ish and -0.2 or so") == ["around", "0.3", "ish", "and", "-0.2", "or", "so"]

    def test_vocabulary_covers_templates(self):
        vocab = build_vocabulary()
        task = envs.TaskSpec("point-robot", (0.11, 0.22))
        for style in envs.STYLES:
            for token in tokenize_text(envs.describe(task, style)):
                try:
                    float(token)
                except ValueError:
                    assert token in vocab


class TestEncodeText:
    def test_deterministic(self, head):
        a = encode_text(head, "Please navigate to the goal position of (0.3, -0.2)")
        b = encode_text(head, "Please navigate to the goal position of (0.3, -0.2)")
        assert np.array_equal(a, b)

    def test_fixed_dimension_any_length(self, head):
        short = encode_text(head, "Please run at the target velocity of 1.5")
        long = encode_text(
            head, "Um, there's this location I think... somewhere around 0.31-ish in the x direction? And maybe -0.42 or so up?"
        )
        assert short.shape == long.shape == (32,)

    def test_unknown_words_map_to_unk(self, head):
        ids, _ = head.text_encoder.tokens_to_ids("zorblat navigate")
        assert ids[0] == textalign.UNK

    def test_empty_caption_rejected(self, head):
        with pytest.raises(ValueError, match="empty"):
            head.text_encoder.encode(["..."])

    def test_number_buckets_at_resolution(self, head):
        ids, vals = head.text_encoder.tokens_to_ids("goal 0.314 and 0.31")
        assert ids[1] == ids[3] == textalign.NUM
        assert vals[1] == pytest.approx(0.31)
        assert vals[1] == vals[3]


class TestSimilarityMatrix:
    def test_identical_projected_vectors_alpha_zero(self, head):
        with torch.no_grad():
            head.log_temp.fill_(0.0)
        z = torch.randn(1, 16)
        text = torch.randn(1, 32)
        with torch.no_grad():
            d = head.project_decision(z)
            sim = head.temperature() * (d @ d.T)
        assert float(sim) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_gives_zero(self):
        plain = build_alignment_head(
            AlignmentConfig(z_dim=2, text_dim=2, joint_dim=2, text_heads=1), seed=1
        )
        with torch.no_grad():
            plain.w_decision.weight.copy_(torch.eye(2))
            plain.w_text.weight.copy_(torch.eye(2))
        sim = similarity_matrix(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]]), plain)
        assert float(sim) == pytest.approx(0.0, abs=1e-7)

    def test_temperature_scaling(self):
        head = build_alignment_head(
            AlignmentConfig(z_dim=2, text_dim=2, joint_dim=2, text_heads=1), seed=2
        )
        with torch.no_grad():
            head.w_decision.weight.copy_(torch.eye(2))
            head.w_text.weight.copy_(torch.eye(2))
            head.log_temp.fill_(math.log(100.0))
        d = torch.tensor([[1.0, 0.0]])
        t = torch.tensor([[0.5, math.sqrt(3) / 2]])  # cosine 0.5
        sim = similarity_matrix(d, t, head)
        assert float(sim) == pytest.approx(50.0, rel=1e-5)

    def test_temperature_clamped(self, head):
        with torch.no_grad():
            head.log_temp.fill_(20.0)
        assert float(head.temperature()) <= textalign.MAX_TEMPERATURE * (1 + 1e-5)

    def test_batch_size_mismatch_rejected(self, head):
        with pytest.raises(ValueError, match="batch"):
            similarity_matrix(torch.randn(3, 16), torch.randn(2, 32), head)

    def test_zero_norm_rejected(self, head):
        z = torch.zeros(2, 16)
        with pytest.raises(ValueError, match="zero-norm"):
            head.project_decision(z * 0.0) if False else textalign._normalize_rows(torch.zeros(1, 4))


class TestContrastiveLoss:
    def test_single_pair_zero(self):
        assert float(contrastive_loss(torch.tensor([[3.7]]))) == pytest.approx(0.0, abs=1e-7)

    def test_uniform_matrix_ln_n(self):
        loss = contrastive_loss(torch.full((4, 4), 2.0))
        assert float(loss) == pytest.approx(math.log(4), abs=1e-6)

    def test_diagonal_dominant_closed_form(self):
        sim = torch.zeros(2, 2, dtype=torch.float64)
        sim.fill_diagonal_(10.0)
        expected = -math.log(math.exp(10.0) / (math.exp(10.0) + 1.0))
        assert float(contrastive_loss(sim)) == pytest.approx(expected, rel=1e-6)

    def test_nonsquare_rejected(self):
        with pytest.raises(ValueError, match="square"):
            contrastive_loss(torch.zeros(2, 3))

    def test_symmetric_under_transpose(self):
        torch.manual_seed(0)
        sim = torch.randn(5, 5)
        assert float(contrastive_loss(sim)) == pytest.approx(float(contrastive_loss(sim.T)), rel=1e-6)

    def test_temperature_monotonicity(self):
        base = torch.eye(3) * 4.0
        losses = [float(contrastive_loss(base * scale)) for scale in (1.0, 2.0, 4.0)]
        assert losses[0] > losses[1] > losses[2]

    def test_gradients_match_finite_differences(self):
        head = build_alignment_head(AlignmentConfig(z_dim=8, text_dim=16, joint_dim=8), seed=3).double()
        z = torch.randn(5, 8, dtype=torch.float64)
        captions = [
            envs.TaskSpec("point-robot", (0.1 * i, -0.1 * i)).caption for i in range(1, 6)
        ]

        def loss_fn():
            text = head.text_encoder.encode(captions)
            return contrastive_loss(similarity_matrix(z, text, head))

        err = nncore.module_grad_check(head, loss_fn, max_coords=80)
        assert err < 1e-3


class TestRetrieval:
    def test_perfect_head_scores_one(self):
        head = build_alignment_head(AlignmentConfig(z_dim=4, text_dim=4, joint_dim=4), seed=4)
        with torch.no_grad():
            head.w_decision.weight.copy_(torch.eye(4))
            head.w_text.weight.copy_(torch.eye(4))
        z = torch.eye(4).numpy()

        class _Stub(torch.nn.Module):
            def encode(self, captions):
                return torch.as_tensor(z[: len(captions)])

        head.text_encoder = _Stub()
        assert retrieval_accuracy(head, z, ["a", "b", "c", "d"]) == 1.0

    def test_chance_level_before_training(self, trained_setup):
        tasks, manifest, wm = trained_setup
        head = build_alignment_head(AlignmentConfig(z_dim=16), seed=5)
        entries = manifest.train_entries()
        z = np.stack([wm.encode(manifest.load_trajectories(e.task_id)[:5]).mean(axis=0) for e in entries])
        acc = retrieval_accuracy(head, z, [e.caption for e in entries])
        n = len(entries)
        p = 1.0 / n
        assert acc <= p + 3.0 * math.sqrt(p * (1 - p) / n) + 1e-9

    def test_needs_two_pairs(self, head):
        with pytest.raises(ValueError, match="pairs"):
            retrieval_accuracy(head, np.zeros((1, 16)), ["x"])

    def test_scale_invariance_of_argmax(self, trained_setup):
        tasks, manifest, wm = trained_setup
        head = build_alignment_head(AlignmentConfig(z_dim=16), seed=6)
        entries = manifest.train_entries()
        z = np.stack([wm.encode(manifest.load_trajectories(e.task_id)[:3]).mean(axis=0) for e in entries])
        caps = [e.caption for e in entries]
        assert retrieval_accuracy(head, z, caps) == retrieval_accuracy(head, 7.3 * z, caps)


class TestTrainAlignment:
    def test_trajectory_encoder_untouched_and_retrieval_improves(self, trained_setup):
        tasks, manifest, wm = trained_setup
        hash_before = wm.param_hash()
        cfg = AlignmentConfig(z_dim=16, text_dim=32, joint_dim=16)
        entries = manifest.train_entries()
        rng = np.random.default_rng(8)
        z = np.stack(
            [wm.encode([manifest.load_trajectories(e.task_id)[i] for i in rng.integers(24, size=8)]).mean(axis=0) for e in entries]
        )
        caps = [e.caption for e in entries]
        init_head = build_alignment_head(cfg, seed=64)
        acc_before = retrieval_accuracy(init_head, z, caps)
        ckpt = train_alignment(manifest, wm, cfg, steps=250, batch=8, seed=64, log_every=100)
        assert wm.param_hash() == hash_before
        acc_after = retrieval_accuracy(ckpt, z, caps)
        assert acc_after > acc_before

    def test_duplicate_tasks_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            textalign._check_distinct_tasks(["a", "b", "a"])

    def test_checkpoint_roundtrip(self, trained_setup, tmp_path):
        tasks, manifest, wm = trained_setup
        cfg = AlignmentConfig(z_dim=16, text_dim=32, joint_dim=16)
        ckpt = train_alignment(manifest, wm, cfg, steps=30, batch=8, seed=65)
        path = ckpt.save(tmp_path / "align.pt")
        reloaded = AlignmentCheckpoint.load(path)
        caption = manifest.train_entries()[0].caption
        assert np.array_equal(ckpt.encode_text([caption]), reloaded.encode_text([caption]))
        assert reloaded.param_hash() == ckpt.param_hash()

    def test_z_dim_mismatch_rejected(self, trained_setup):
        tasks, manifest, wm = trained_setup
        with pytest.raises(ValueError, match="z_dim"):
            train_alignment(manifest, wm, AlignmentConfig(z_dim=99), steps=1, batch=4)
