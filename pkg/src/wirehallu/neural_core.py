"""Differentiable building blocks shared by the GAN and the diffusion denoiser.

Tensors are real ``float32``; complex channels enter as two (re, im) channels.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class TensorSpec:
    shape: tuple[int, ...]
    dtype: str = "float32"

    def __post_init__(self):
        if any(int(d) < 1 for d in self.shape):
            raise ValueError(f"all dims must be >= 1, got {self.shape}")


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    num_heads: int = 1

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be a positive multiple of num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    # None means one full pass over the data per epoch
    steps_per_epoch: int | None = None
    cosine_decay: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        object.__setattr__(self, "betas", tuple(self.betas))


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas)


def make_lr_schedule(opt: torch.optim.Optimizer, cfg: TrainConfig, total_steps: int):
    if not cfg.cosine_decay or total_steps <= 0:
        return None
    return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps, eta_min=cfg.learning_rate * 0.05)


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % 2**63)
    return g


# ---------------------------------------------------------------------------
# forward ops


def conv2d_forward(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """3x3 cross-correlation with zero same-padding and stride 1."""
    if x.dim() != 4 or kernel.dim() != 4:
        raise ValueError(f"expected 4-D input and kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}")
    if kernel.shape[2:] != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {tuple(kernel.shape[2:])}")
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"bias must have shape ({kernel.shape[0]},), got {tuple(bias.shape)}")
    return F.conv2d(x, kernel, bias, stride=1, padding=1)


def attention_forward(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_out: torch.Tensor,
    num_heads: int = 1,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scaled dot-product self-attention over the L positions of ``x`` [B, L, D].

    Projections multiply on the right (``x @ w_q``). No residual is added.
    ``bias`` [H, L, L] is added to the logits before the softmax; without it
    the layer is permutation-equivariant.
    """
    if x.dim() != 3:
        raise ValueError(f"expected [B, L, D] input, got {tuple(x.shape)}")
    b, n, d = x.shape
    for name, w in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v), ("w_out", w_out)):
        if w.shape != (d, d):
            raise ValueError(f"{name} must be ({d}, {d}), got {tuple(w.shape)}")
    cfg = AttentionConfig(d, num_heads)
    dh = cfg.head_dim

    def heads(t):
        return t.reshape(b, n, num_heads, dh).transpose(1, 2)

    if bias is not None and bias.shape != (num_heads, n, n):
        raise ValueError(f"bias must be ({num_heads}, {n}, {n}), got {tuple(bias.shape)}")
    q, k, v = heads(x @ w_q), heads(x @ w_k), heads(x @ w_v)
    # fused softmax(q k^T / sqrt(dh) + bias) v
    out = F.scaled_dot_product_attention(q, k, v, attn_mask=bias, scale=1.0 / math.sqrt(dh))
    return out.transpose(1, 2).reshape(b, n, d) @ w_out


class SelfAttention(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        scale = 1.0 / math.sqrt(d)
        self.w_q = nn.Parameter(torch.randn(d, d) * scale)
        self.w_k = nn.Parameter(torch.randn(d, d) * scale)
        self.w_v = nn.Parameter(torch.randn(d, d) * scale)
        self.w_out = nn.Parameter(torch.randn(d, d) * scale)

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
        return attention_forward(x, self.w_q, self.w_k, self.w_v, self.w_out, self.cfg.num_heads, bias)


class Conv3x3(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(c_out, c_in, 3, 3) * math.sqrt(2.0 / (9 * c_in)))
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return conv2d_forward(x, self.weight, self.bias)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Transformer-style embedding of integer steps ``t`` [B] -> [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(torch.get_default_dtype())


# ---------------------------------------------------------------------------
# complex <-> real channel layout


def complex_to_channels(h) -> torch.Tensor:
    """[..., A, S] complex -> [..., 2, A, S] real float32."""
    h = np.asarray(h)
    arr = np.stack([h.real, h.imag], axis=-3).astype(np.float32)
    return torch.from_numpy(arr)


def channels_to_complex(x: torch.Tensor) -> np.ndarray:
    x = x.detach().cpu().numpy()
    return (x[..., 0, :, :] + 1j * x[..., 1, :, :]).astype(np.complex64)


# ---------------------------------------------------------------------------
# gradient check


def gradient_check(
    model: nn.Module,
    loss_fn: Callable[[nn.Module], torch.Tensor],
    epsilon: float = 1e-4,
    n_params: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn(model)`` must return a scalar and close over its inputs. The
    check runs in float64 on the model as given, then restores the original
    dtype and values. Up to ``n_params`` scalar parameter entries are sampled.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    orig_dtype = params[0].dtype if params else torch.float32
    model.double()
    try:
        model.zero_grad(set_to_none=True)
        loss = loss_fn(model)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss.item()}")
        loss.backward()
        entries = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
        if not entries:
            return 0.0
        rng = np.random.default_rng(seed)
        if len(entries) > n_params:
            picks = rng.choice(len(entries), size=n_params, replace=False)
            entries = [entries[i] for i in sorted(picks)]
        worst = 0.0
        with torch.no_grad():
            for pi, j in entries:
                p = params[pi]
                flat = p.data.view(-1)
                analytic = 0.0 if p.grad is None else float(p.grad.view(-1)[j])
                orig = flat[j].item()
                flat[j] = orig + epsilon
                plus = float(loss_fn(model))
                flat[j] = orig - epsilon
                minus = float(loss_fn(model))
                flat[j] = orig
                if not (math.isfinite(plus) and math.isfinite(minus)):
                    raise FloatingPointError("non-finite loss during finite differences")
                numeric = (plus - minus) / (2 * epsilon)
                denom = max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic - numeric) / denom)
        return worst
    finally:
        model.zero_grad(set_to_none=True)
        model.to(orig_dtype)


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 version, u32 header length, JSON header, f32 payload

CHECKPOINT_MAGIC = b"WHCKPT\x00\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def checkpoint_bytes(state: nn.Module | dict, meta: dict[str, Any] | None = None) -> bytes:
    if isinstance(state, nn.Module):
        state = state.state_dict()
    layers = []
    payload = io.BytesIO()
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        layers.append({"name": name, "shape": list(arr.shape)})
        payload.write(arr.tobytes())
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "layers": layers, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + payload.getvalue()


def parse_checkpoint(raw: bytes) -> tuple["OrderedDict[str, torch.Tensor]", dict[str, Any]]:
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    body = raw[16 + hlen :]
    state: OrderedDict[str, torch.Tensor] = OrderedDict()
    offset = 0
    for layer in header["layers"]:
        n = int(np.prod(layer["shape"], dtype=np.int64))
        end = offset + 4 * n
        if end > len(body):
            raise CheckpointError(f"payload truncated in layer {layer['name']}")
        arr = np.frombuffer(body[offset:end], dtype="<f4").reshape(layer["shape"])
        state[layer["name"]] = torch.from_numpy(arr.copy())
        offset = end
    if offset != len(body):
        raise CheckpointError(f"{len(body) - offset} trailing payload bytes")
    return state, header["meta"]


def save_checkpoint(path: str | Path, state: nn.Module | dict, meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(state, meta))
    return path


def load_checkpoint(path: str | Path):
    return parse_checkpoint(Path(path).read_bytes())


def checkpoint_hash(state: nn.Module | dict, meta: dict[str, Any] | None = None) -> str:
    return hashlib.sha256(checkpoint_bytes(state, meta)).hexdigest()[:16]
