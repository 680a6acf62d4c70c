"""Minimal neural building blocks shared by every model in the package.

Thin layer over torch: hand-rolled multi-head attention (so tests can inspect
attention weights and masking exactly), pre-norm transformer blocks, sinusoidal
embeddings, a functional AdamW update, finite-difference gradient verification,
and a tagged checkpoint container.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn


def causal_mask(length: int) -> torch.Tensor:
    """Boolean (L, L) matrix; entry (i, j) is True iff position j may be attended from i."""
    if length < 1:
        raise ValueError(f"mask length must be >= 1, got {length}")
    return torch.tril(torch.ones(length, length, dtype=torch.bool))


def sinusoidal_positions(positions, dim: int) -> torch.Tensor:
    """Standard transformer sin/cos embedding for integer or real positions."""
    if isinstance(positions, int):
        positions = torch.arange(positions)
    pos = torch.as_tensor(positions, dtype=torch.float32).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    angles = pos * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if emb.shape[-1] < dim:
        emb = torch.cat([emb, torch.zeros(len(pos), dim - emb.shape[-1])], dim=-1)
    return emb


def init_dense_(module: nn.Module) -> None:
    """Fan-in scaled uniform weights, zero biases, for every Linear in the tree."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.weight.shape[1])
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class MultiHeadAttention(nn.Module):
    """Self-attention with an optional boolean mask (True = allowed).

    Disallowed positions receive exactly zero weight: scores are set to -inf
    before the softmax, so perturbing a masked-out input cannot change the
    output at any attending position.
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, attn_mask=None, key_valid=None, need_weights=False):
        bsz, length, _ = x.shape
        head_dim = self.dim // self.n_heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(bsz, length, self.n_heads, head_dim).transpose(1, 2)
        k = k.view(bsz, length, self.n_heads, head_dim).transpose(1, 2)
        v = v.view(bsz, length, self.n_heads, head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
        if attn_mask is not None:
            scores = scores.masked_fill(~attn_mask.view(1, 1, length, length), float("-inf"))
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid.view(bsz, 1, 1, length), float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(bsz, length, self.dim)
        if key_valid is not None:
            # Fully-masked (padding) query rows produce NaN; zero them out.
            out = torch.where(key_valid.view(bsz, length, 1), out, torch.zeros_like(out))
        out = self.proj(out)
        if need_weights:
            return out, weights
        return out


class TransformerBlock(nn.Module):
    """Pre-norm block: attention and MLP sublayers with residuals."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int = 4, activation: str = "gelu"):
        super().__init__()
        act = nn.GELU() if activation == "gelu" else nn.ReLU()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), act, nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x, attn_mask=None, key_valid=None):
        h = x + self.attn(self.ln1(x), attn_mask=attn_mask, key_valid=key_valid)
        h = h + self.mlp(self.ln2(h))
        if key_valid is not None:
            h = torch.where(key_valid.unsqueeze(-1), h, torch.zeros_like(h))
        return h


class TransformerStack(nn.Module):
    def __init__(self, n_layers: int, dim: int, n_heads: int, activation: str = "gelu"):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, n_heads, activation=activation) for _ in range(n_layers)
        )
        self.ln_out = nn.LayerNorm(dim)

    def forward(self, x, attn_mask=None, key_valid=None):
        for block in self.blocks:
            x = block(x, attn_mask=attn_mask, key_valid=key_valid)
        return self.ln_out(x)


@dataclass
class OptimState:
    """AdamW accumulators plus hyperparameters; shapes mirror the parameter set."""

    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_optim_state(params: dict[str, torch.Tensor], lr: float, **kwargs) -> OptimState:
    zeros = {name: torch.zeros_like(p) for name, p in params.items()}
    return OptimState(
        m=zeros, v={name: torch.zeros_like(p) for name, p in params.items()}, step=0, lr=lr, **kwargs
    )


def adamw_step(
    params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: OptimState
) -> tuple[dict[str, torch.Tensor], OptimState]:
    """One decoupled-weight-decay adaptive update; purely functional."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError("parameter, gradient, and state names do not match")
    for name in params:
        if params[name].shape != grads[name].shape:
            raise ValueError(f"shape mismatch for {name!r}: {tuple(params[name].shape)} vs {tuple(grads[name].shape)}")
    t = state.step + 1
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        new_params[name] = p - state.lr * (m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * p)
        new_m[name], new_v[name] = m, v
    return new_params, OptimState(
        m=new_m, v=new_v, step=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2,
        eps=state.eps, weight_decay=state.weight_decay,
    )


class AdamW:
    """Stateful wrapper applying :func:`adamw_step` to a module's parameters."""

    def __init__(self, named_parameters, lr: float, weight_decay: float = 0.0):
        self._params = dict(named_parameters)
        self.state = init_optim_state(
            {n: p.data for n, p in self._params.items()}, lr=lr, weight_decay=weight_decay
        )

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def step(self):
        params = {n: p.data for n, p in self._params.items()}
        grads = {
            n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in self._params.items()
        }
        new_params, self.state = adamw_step(params, grads, self.state)
        with torch.no_grad():
            for n, p in self._params.items():
                p.data.copy_(new_params[n])


def grad_check(
    scalar_fn,
    params: dict[str, torch.Tensor],
    perturbation: float = 1e-5,
    max_coords: int = 100,
    seed: int = 0,
) -> float:
    """Compare autograd gradients against central finite differences.

    ``scalar_fn(params)`` must rebuild its computation from the given tensors
    on every call. Runs in double precision; samples up to ``max_coords``
    coordinates. Returns the max relative error with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if perturbation <= 0:
        raise ValueError("perturbation must be positive")
    base = {n: torch.as_tensor(p).detach().to(torch.float64).clone() for n, p in params.items()}
    tracked = {n: p.clone().requires_grad_(True) for n, p in base.items()}
    loss = scalar_fn(tracked)
    if not torch.isfinite(loss):
        raise ValueError(f"loss is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, list(tracked.values()), allow_unused=True)
    analytic = {
        n: (g if g is not None else torch.zeros_like(base[n]))
        for n, g in zip(tracked.keys(), grads)
    }

    coords = [(n, i) for n, p in base.items() for i in range(p.numel())]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picks]

    def eval_at(name, idx, delta):
        shifted = {n: p.clone() for n, p in base.items()}
        shifted[name].view(-1)[idx] += delta
        return float(scalar_fn(shifted))

    max_err = 0.0
    for name, idx in coords:
        numeric = (eval_at(name, idx, perturbation) - eval_at(name, idx, -perturbation)) / (
            2.0 * perturbation
        )
        a = float(analytic[name].view(-1)[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        max_err = max(max_err, err)
    return max_err


class _LossWrapper(nn.Module):
    def __init__(self, inner: nn.Module, fn):
        super().__init__()
        self.inner = inner
        self._fn = fn

    def forward(self):
        return self._fn()


def module_grad_check(
    module: nn.Module, loss_fn, perturbation: float = 1e-5, max_coords: int = 100, seed: int = 0
) -> float:
    """Finite-difference check of a loss computed through a module.

    ``loss_fn()`` must evaluate the loss by calling ``module`` (it may close
    over a fixed batch). Parameters are swapped functionally per evaluation,
    so the module is left untouched. Convert the module and batch to double
    precision first for tight tolerances.
    """
    wrapper = _LossWrapper(module, loss_fn)
    params = {f"inner.{n}": p.detach() for n, p in module.named_parameters()}

    def scalar(p):
        return torch.func.functional_call(wrapper, p, ())

    return grad_check(scalar, params, perturbation=perturbation, max_coords=max_coords, seed=seed)


CHECKPOINT_FORMAT = 1


def save_checkpoint(path: str | Path, tag: str, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "tag": tag,
        "shapes": {n: list(t.shape) for n, t in tensors.items()},
        "tensors": {n: t.detach().cpu().contiguous() for n, t in tensors.items()},
        "meta": meta,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, expected_tag: str | None = None):
    payload = torch.load(Path(path), weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    tag = payload["tag"]
    if expected_tag is not None and tag != expected_tag:
        raise ValueError(f"checkpoint tag {tag!r} does not match expected {expected_tag!r}")
    tensors = payload["tensors"]
    for name, shape in payload["shapes"].items():
        if list(tensors[name].shape) != shape:
            raise ValueError(f"shape metadata mismatch for tensor {name!r}")
    return tag, tensors, payload["meta"]


def param_hash(source) -> str:
    """SHA-256 over named tensors; accepts a module or a name->tensor dict."""
    if isinstance(source, nn.Module):
        items = sorted((n, p.detach()) for n, p in source.state_dict().items())
    else:
        items = sorted((n, torch.as_tensor(p).detach()) for n, p in source.items())
    digest = hashlib.sha256()
    for name, tensor in items:
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
