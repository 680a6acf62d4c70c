"""From-scratch text encoder contrastively aligned to frozen decision embeddings.

The tokenizer is word-level over the caption template vocabulary; numbers are
bucketized to 0.01 resolution and embedded from their value through smooth
sinusoidal features rather than a lookup row. That keeps the vocabulary finite
while letting captions with numbers never seen in training land near their
neighbours, which is what zero-shot instructions require.

Alignment follows the CLIP recipe: learnable projections into a joint space,
cosine similarities scaled by a learnable temperature, and a symmetric
cross-entropy over the in-batch pairing matrix.
"""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import envs, nncore
from .datagen import DatasetManifest
from .worldmodel import WorldModelCheckpoint, WorldModelConfig, _as_transition_tensors, build_world_model

CHECKPOINT_TAG = "align/v1"

PAD, UNK, NUM = 0, 1, 2
_SPECIALS = ("<pad>", "<unk>", "<num>")
_TOKEN_RE = re.compile(r"-?\d+\.\d+|-?\d+|[a-z']+")
NUMBER_RESOLUTION = 0.01
MAX_TEMPERATURE = 200.0


def tokenize_text(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def build_vocabulary() -> list[str]:
    """Word list covering every caption template across families and styles."""
    words: set[str] = set()
    probe_params = {"point-robot": (0.12, -0.34), "point-dir": (1.23,), "line-vel": (1.5,)}
    for family, params in probe_params.items():
        task = envs.TaskSpec(family, params)
        for style in envs.STYLES:
            for token in tokenize_text(envs.describe(task, style)):
                if not _is_number(token):
                    words.add(token)
    return list(_SPECIALS) + sorted(words)


@dataclass
class TextEncoderConfig:
    vocab: list[str]
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_freqs: int = 8


class TextEncoder(nn.Module):
    """Small bi-directional transformer with mean pooling over tokens."""

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.word_to_id = {w: i for i, w in enumerate(cfg.vocab)}
        self.word_emb = nn.Embedding(len(cfg.vocab), cfg.d_model)
        self.num_proj = nn.Linear(2 * cfg.n_freqs + 1, cfg.d_model)
        self.stack = nncore.TransformerStack(cfg.n_layers, cfg.d_model, cfg.n_heads)
        freqs = (math.pi / 8.0) * 2.0 ** torch.arange(cfg.n_freqs, dtype=torch.float32)
        self.register_buffer("num_freqs", freqs)

    def tokens_to_ids(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        tokens = tokenize_text(text)
        if not tokens:
            raise ValueError(f"caption is empty after tokenization: {text!r}")
        ids, values = [], []
        for token in tokens:
            if _is_number(token):
                ids.append(NUM)
                values.append(round(float(token) / NUMBER_RESOLUTION) * NUMBER_RESOLUTION)
            else:
                ids.append(self.word_to_id.get(token, UNK))
                values.append(0.0)
        return np.array(ids, dtype=np.int64), np.array(values, dtype=np.float32)

    def _number_features(self, values: torch.Tensor) -> torch.Tensor:
        angles = values.unsqueeze(-1) * self.num_freqs
        return torch.cat([0.25 * values.unsqueeze(-1), torch.sin(angles), torch.cos(angles)], dim=-1)

    def forward(self, ids: torch.Tensor, values: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        emb = self.word_emb(ids)
        numeric = self._number_features(values).to(emb.dtype)
        emb = torch.where((ids == NUM).unsqueeze(-1), self.num_proj(numeric), emb)
        emb = emb + nncore.sinusoidal_positions(ids.shape[1], self.cfg.d_model).to(emb.dtype)
        hidden = self.stack(emb, key_valid=valid)
        counts = valid.sum(dim=1, keepdim=True).clamp(min=1)
        return (hidden * valid.unsqueeze(-1)).sum(dim=1) / counts.to(hidden.dtype)

    def encode(self, captions: list[str]) -> torch.Tensor:
        encoded = [self.tokens_to_ids(c) for c in captions]
        longest = max(len(ids) for ids, _ in encoded)
        ids = torch.full((len(captions), longest), PAD, dtype=torch.long)
        values = torch.zeros(len(captions), longest)
        valid = torch.zeros(len(captions), longest, dtype=torch.bool)
        for row, (tok_ids, tok_vals) in enumerate(encoded):
            ids[row, : len(tok_ids)] = torch.from_numpy(tok_ids)
            values[row, : len(tok_ids)] = torch.from_numpy(tok_vals)
            valid[row, : len(tok_ids)] = True
        return self(ids, values.to(next(self.parameters()).dtype), valid)


@dataclass
class AlignmentConfig:
    z_dim: int = 64
    text_dim: int = 64
    joint_dim: int = 64
    text_layers: int = 2
    text_heads: int = 4
    vocab: list[str] = field(default_factory=build_vocabulary)


class AlignmentHead(nn.Module):
    """Text encoder plus the projections and temperature of the joint space."""

    def __init__(self, cfg: AlignmentConfig):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = TextEncoder(
            TextEncoderConfig(
                vocab=cfg.vocab, d_model=cfg.text_dim, n_layers=cfg.text_layers, n_heads=cfg.text_heads
            )
        )
        self.w_decision = nn.Linear(cfg.z_dim, cfg.joint_dim, bias=False)
        self.w_text = nn.Linear(cfg.text_dim, cfg.joint_dim, bias=False)
        self.log_temp = nn.Parameter(torch.tensor(math.log(1.0 / 0.07)))

    def temperature(self) -> torch.Tensor:
        return self.log_temp.clamp(max=math.log(MAX_TEMPERATURE)).exp()

    def project_decision(self, z: torch.Tensor) -> torch.Tensor:
        return _normalize_rows(self.w_decision(z))

    def project_text(self, text_emb: torch.Tensor) -> torch.Tensor:
        return _normalize_rows(self.w_text(text_emb))


def _normalize_rows(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("cannot cosine-normalize a zero-norm projected vector")
    return x / norms


def similarity_matrix(decision_batch: torch.Tensor, text_batch: torch.Tensor, head: AlignmentHead) -> torch.Tensor:
    """Entry (i, j) is exp(temperature) scaled cosine of decision i and text j."""
    if decision_batch.shape[0] != text_batch.shape[0] or decision_batch.shape[0] < 1:
        raise ValueError(
            f"batch sizes disagree: {decision_batch.shape[0]} decisions, {text_batch.shape[0]} texts"
        )
    d = head.project_decision(decision_batch)
    t = head.project_text(text_batch)
    return head.temperature() * (d @ t.T)


def contrastive_loss(sim: torch.Tensor) -> torch.Tensor:
    """Symmetric cross-entropy over rows and columns with diagonal targets."""
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {tuple(sim.shape)}")
    labels = torch.arange(sim.shape[0])
    row_ce = torch.nn.functional.cross_entropy(sim, labels)
    col_ce = torch.nn.functional.cross_entropy(sim.T, labels)
    return 0.5 * (row_ce + col_ce)


def build_alignment_head(cfg: AlignmentConfig, seed: int) -> AlignmentHead:
    torch.manual_seed(seed)
    head = AlignmentHead(cfg)
    nncore.init_dense_(head)
    return head


@dataclass
class AlignmentCheckpoint:
    """Frozen alignment head; provides deterministic text embeddings."""

    head: AlignmentHead
    meta: dict

    def __post_init__(self):
        self.head.eval()
        for p in self.head.parameters():
            p.requires_grad_(False)

    def param_hash(self) -> str:
        return nncore.param_hash(self.head)

    def encode_text(self, captions: list[str]) -> np.ndarray:
        with torch.no_grad():
            return self.head.text_encoder.encode(captions).numpy()

    def aligned_text(self, captions: list[str]) -> np.ndarray:
        with torch.no_grad():
            emb = self.head.text_encoder.encode(captions)
            return self.head.project_text(emb).numpy()

    def aligned_decision(self, z: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.head.project_decision(torch.as_tensor(z, dtype=torch.float32)).numpy()

    def save(self, path: str | Path) -> Path:
        return nncore.save_checkpoint(path, CHECKPOINT_TAG, dict(self.head.state_dict()), self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "AlignmentCheckpoint":
        _, tensors, meta = nncore.load_checkpoint(path, expected_tag=CHECKPOINT_TAG)
        head = AlignmentHead(AlignmentConfig(**meta["config"]))
        head.load_state_dict(tensors)
        return cls(head=head, meta=meta)


def encode_text(source, caption: str) -> np.ndarray:
    """Deterministic embedding of one caption via a head or checkpoint."""
    if isinstance(source, AlignmentCheckpoint):
        return source.encode_text([caption])[0]
    with torch.no_grad():
        return source.text_encoder.encode([caption]).numpy()[0]


def retrieval_accuracy(head_or_ckpt, decision_embs: np.ndarray, captions: list[str]) -> float:
    """Fraction of argmax matches along both directions of the pairing matrix."""
    if len(captions) < 2 or len(captions) != len(decision_embs):
        raise ValueError("need >= 2 (decision, caption) pairs with matching lengths")
    head = head_or_ckpt.head if isinstance(head_or_ckpt, AlignmentCheckpoint) else head_or_ckpt
    with torch.no_grad():
        text = head.text_encoder.encode(list(captions))
        sim = similarity_matrix(torch.as_tensor(decision_embs, dtype=torch.float32), text, head)
        idx = torch.arange(sim.shape[0])
        d2t = (sim.argmax(dim=1) == idx).float().mean()
        t2d = (sim.argmax(dim=0) == idx).float().mean()
    return float(0.5 * (d2t + t2d))


class _TaskBank:
    """Per-task trajectory tensors, captions, and cached decision embeddings."""

    def __init__(self, manifest: DatasetManifest, wm_checkpoint: WorldModelCheckpoint | None):
        self.tasks = []
        self.tensors = []
        self.z_cache = []
        for entry in manifest.train_entries():
            trajs = manifest.load_trajectories(entry.task_id)
            self.tasks.append(entry.to_task())
            self.tensors.append(_as_transition_tensors(trajs))
            if wm_checkpoint is not None:
                self.z_cache.append(torch.as_tensor(wm_checkpoint.encode(trajs), dtype=torch.float32))

    def __len__(self) -> int:
        return len(self.tasks)

    def sample_batch(self, batch: int, rng: np.random.Generator, styles: tuple[str, ...]):
        """Distinct tasks, one (trajectory index, caption) pair per task."""
        picks = rng.choice(len(self.tasks), size=min(batch, len(self.tasks)), replace=False)
        captions = []
        traj_idx = []
        for k in picks:
            style = styles[int(rng.integers(len(styles)))]
            captions.append(envs.describe(self.tasks[k], style))
            traj_idx.append(int(rng.integers(len(self.tensors[k][0]))))
        return picks, traj_idx, captions


def _check_distinct_tasks(task_ids: list[str]) -> None:
    if len(set(task_ids)) != len(task_ids):
        raise ValueError("alignment batch contains duplicate tasks; captions would collide")


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / max(total, 1)))


def train_alignment(
    manifest: DatasetManifest,
    wm_checkpoint: WorldModelCheckpoint,
    cfg: AlignmentConfig | None = None,
    steps: int = 1500,
    batch: int = 32,
    lr: float = 3e-4,
    weight_decay: float = 1e-4,
    seed: int = 0,
    styles: tuple[str, ...] = envs.STYLES,
    lr_schedule: str = "cosine",
    log_every: int = 250,
    progress=None,
) -> AlignmentCheckpoint:
    """Contrastive pre-training against the frozen trajectory encoder.

    Caption styles are sampled uniformly per pair so the from-scratch encoder
    sees the full template variety it will face at evaluation time. The
    learning rate decays to zero by default: per-step targets are single
    sampled trajectories, and a constant rate never settles.
    """
    cfg = cfg or AlignmentConfig(z_dim=wm_checkpoint.z_dim)
    if cfg.z_dim != wm_checkpoint.z_dim:
        raise ValueError(f"alignment z_dim {cfg.z_dim} != world model z_dim {wm_checkpoint.z_dim}")
    bank = _TaskBank(manifest, wm_checkpoint)
    head = build_alignment_head(cfg, seed)
    head.set_decision_stats(torch.cat(bank.z_cache))
    opt = nncore.AdamW(head.named_parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed + 1)
    history = []
    for step_idx in range(steps):
        if lr_schedule == "cosine":
            opt.state.lr = cosine_lr(lr, step_idx, steps)
        picks, traj_idx, captions = bank.sample_batch(batch, rng, styles)
        _check_distinct_tasks([bank.tasks[k].task_id for k in picks])
        z = torch.stack([bank.z_cache[k][i] for k, i in zip(picks, traj_idx)])
        text = head.text_encoder.encode(captions)
        loss = contrastive_loss(similarity_matrix(z, text, head))
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
        "init_seed": seed,
        "joint_world_model": False,
        "loss_history": history,
    }
    return AlignmentCheckpoint(head=head, meta=meta)


def train_alignment_joint(
    manifest: DatasetManifest,
    wm_cfg: WorldModelConfig,
    cfg: AlignmentConfig | None = None,
    steps: int = 1500,
    batch: int = 32,
    lr: float = 3e-4,
    weight_decay: float = 1e-4,
    seed: int = 0,
    styles: tuple[str, ...] = envs.STYLES,
    lr_schedule: str = "cosine",
) -> tuple[AlignmentCheckpoint, WorldModelCheckpoint]:
    """Ablation variant: the trajectory encoder learns jointly from the
    contrastive loss instead of being pre-trained on dynamics prediction."""
    cfg = cfg or AlignmentConfig(z_dim=wm_cfg.z_dim)
    bank = _TaskBank(manifest, wm_checkpoint=None)
    world = build_world_model(wm_cfg, seed)
    head = build_alignment_head(cfg, seed)
    with torch.no_grad():
        sample = [
            world.encoder(s[:10, :-1], a[:10], r[:10]) for s, a, r in bank.tensors
        ]
    head.set_decision_stats(torch.cat(sample))
    named = [(f"encoder.{n}", p) for n, p in world.encoder.named_parameters()]
    named += list(head.named_parameters())
    opt = nncore.AdamW(named, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed + 1)
    for step_idx in range(steps):
        if lr_schedule == "cosine":
            opt.state.lr = cosine_lr(lr, step_idx, steps)
        picks, traj_idx, captions = bank.sample_batch(batch, rng, styles)
        _check_distinct_tasks([bank.tasks[k].task_id for k in picks])
        rows = [
            (bank.tensors[k][0][i], bank.tensors[k][1][i], bank.tensors[k][2][i])
            for k, i in zip(picks, traj_idx)
        ]
        s, a, r = (torch.stack(cols) for cols in zip(*rows))
        z = world.encoder(s[:, :-1], a, r)
        text = head.text_encoder.encode(captions)
        loss = contrastive_loss(similarity_matrix(z, text, head))
        opt.zero_grad()
        loss.backward()
        opt.step()
    meta = {
        "config": asdict(cfg),
        "family": manifest.family,
        "tier": manifest.tier,
        "steps": steps,
        "seed": seed,
        "init_seed": seed,
        "joint_world_model": True,
        "loss_history": [],
    }
    wm_meta = {
        "config": asdict(wm_cfg),
        "family": manifest.family,
        "tier": manifest.tier,
        "steps": steps,
        "seed": seed,
        "loss_history": [],
        "final_loss": None,
        "joint_contrastive": True,
    }
    from .worldmodel import WorldModelCheckpoint as WMC

    return AlignmentCheckpoint(head=head, meta=meta), WMC(model=world, meta=wm_meta)
