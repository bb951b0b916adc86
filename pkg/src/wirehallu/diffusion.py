"""Conditional DDPM channel estimator with an attention-enhanced conv denoiser.

Working space: the channel scaled by sqrt(2) so each real component has unit
variance. The denoiser predicts the injected noise from ``x_t`` stacked with
the conditioning planes (pilot mask, observed re/im, noise level).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import channel_data as cd
from .neural_core import (
    AttentionConfig,
    Conv3x3,
    SelfAttention,
    TrainConfig,
    channels_to_complex,
    complex_to_channels,
    load_checkpoint,
    make_lr_schedule,
    make_optimizer,
    save_checkpoint,
    seeded_generator,
    sinusoidal_embedding,
)

log = logging.getLogger(__name__)

SCALE = math.sqrt(2.0)
COND_CHANNELS = 6


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, last_good_state=None, losses=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.losses = losses or []


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray = field(repr=False)
    beta_1: float = 1e-4
    beta_T: float = 0.15

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at 1-based step ``t``; t=0 gives 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t):
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ValueError(f"diffusion step must lie in [1, {self.T}], got {t}")


def make_schedule(T: int = 60, beta_1: float = 1e-4, beta_T: float = 0.15) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    for b in (beta_1, beta_T):
        if not 0 < b < 1:
            raise ValueError(f"betas must lie in (0, 1), got {b}")
    if beta_1 > beta_T:
        raise ValueError(f"beta_1 {beta_1} > beta_T {beta_T}: schedule must be non-decreasing")
    betas = np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1])
    return NoiseSchedule(T, betas, beta_1, beta_T)


def q_sample(x0, t, epsilon, schedule: NoiseSchedule):
    """Forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` scalar or per-batch."""
    schedule._check_t(t)
    if isinstance(x0, torch.Tensor):
        ab = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[torch.as_tensor(t) - 1]
        if ab.dim() == 1:
            ab = ab.view(-1, *([1] * (x0.dim() - 1)))
        return ab.sqrt() * x0 + (1 - ab).sqrt() * epsilon
    ab = schedule.alpha_bars[np.asarray(t) - 1]
    if np.ndim(ab) == 1:
        ab = ab.reshape(-1, *([1] * (np.ndim(x0) - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * epsilon


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 32
    n_blocks: int = 3
    attention: bool = True
    num_heads: int = 1
    time_dim: int = 32
    # number of residual conv blocks before the attention layer
    attention_position: int = 0
    # "relative": learned bias per (antenna, subcarrier) offset; "absolute": learned table per
    # position; "none": content only
    positional: str = "relative"

    def __post_init__(self):
        if self.channels < 1 or self.n_blocks < 0 or self.time_dim < 2:
            raise ValueError(f"invalid denoiser config {self}")
        if not 0 <= self.attention_position <= self.n_blocks:
            raise ValueError(f"attention_position must lie in [0, {self.n_blocks}]")
        if self.positional not in ("relative", "absolute", "none"):
            raise ValueError(f"positional must be 'relative', 'absolute' or 'none', got {self.positional!r}")


def _groups(c: int) -> int:
    for g in (8, 4, 2):
        if c % g == 0:
            return g
    return 1


def _relative_index(rows: int, cols: int) -> torch.Tensor:
    """[L, L] index of the (row, col) offset between grid positions, L = rows * cols."""
    r, c = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
    r, c = r.flatten(), c.flatten()
    dr = r[:, None] - r[None, :] + rows - 1
    dc = c[:, None] - c[None, :] + cols - 1
    return dr * (2 * cols - 1) + dc


class Denoiser(nn.Module):
    """conv stem -> residual conv blocks with one optional self-attention layer -> conv head."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.stem = Conv3x3(2 + COND_CHANNELS, c)
        self.stem_norm = nn.GroupNorm(_groups(c), c)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, c), nn.SiLU(), nn.Linear(c, c))
        if cfg.attention:
            self.attn_norm = nn.LayerNorm(c)
            if cfg.positional == "absolute":
                self.pos = nn.Parameter(torch.randn(cd.N_ANT * cd.N_SC, c) * 0.1)
            elif cfg.positional == "relative":
                # shift-invariant over the grid, like the channel statistics
                self.rel_bias = nn.Parameter(torch.zeros(cfg.num_heads, (2 * cd.N_ANT - 1) * (2 * cd.N_SC - 1)))
                self.register_buffer("rel_index", _relative_index(cd.N_ANT, cd.N_SC), persistent=False)
            self.attn = SelfAttention(AttentionConfig(c, cfg.num_heads))
            # residual branch starts as identity
            nn.init.zeros_(self.attn.w_out)
        self.blocks = nn.ModuleList(Conv3x3(c, c) for _ in range(cfg.n_blocks))
        self.norms = nn.ModuleList(nn.GroupNorm(_groups(c), c) for _ in range(cfg.n_blocks))
        self.head = Conv3x3(c, 2)
        nn.init.zeros_(self.head.weight)

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        dtype = self.stem.weight.dtype
        h = torch.cat([x_t, cond], dim=1).to(dtype)
        h = F.silu(self.stem_norm(self.stem(h)))
        temb = self.time_mlp(sinusoidal_embedding(t, self.cfg.time_dim).to(dtype))
        h = h + temb[:, :, None, None]
        for k, (conv, norm) in enumerate(zip(self.blocks, self.norms)):
            if k == self.cfg.attention_position:
                h = self._attend(h)
            h = h + F.silu(norm(conv(h)))
        if self.cfg.attention_position == len(self.blocks):
            h = self._attend(h)
        return self.head(h)

    def _attend(self, h: torch.Tensor) -> torch.Tensor:
        if not self.cfg.attention:
            return h
        b, c, ha, wa = h.shape
        seq = h.flatten(2).transpose(1, 2)
        if self.cfg.positional == "absolute":
            seq = seq + self.attn(self.attn_norm(seq) + self.pos)
        elif self.cfg.positional == "relative":
            bias = self.rel_bias[:, self.rel_index].to(seq.dtype)
            seq = seq + self.attn(self.attn_norm(seq), bias)
        else:
            seq = seq + self.attn(self.attn_norm(seq))
        return seq.transpose(1, 2).reshape(b, c, ha, wa)


def noise_level_plane(snr_db: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return (snr_db.to(like.dtype) / 20.0).view(-1, 1, 1, 1).expand(-1, 1, *like.shape[-2:])


def interpolation_matrix(spacing: int, n_sc: int = cd.N_SC) -> torch.Tensor:
    """Circular linear interpolation from comb pilots to every subcarrier, as ``y @ M``."""
    m = torch.zeros(n_sc, n_sc)
    for s in range(n_sc):
        p0 = (s // spacing) * spacing
        f = (s - p0) / spacing
        m[p0, s] += 1 - f
        if f > 0:
            m[(p0 + spacing) % n_sc, s] += f
    return m


def conditioning(y_scaled: torch.Tensor, mask: torch.Tensor, snr_db: torch.Tensor, spacing: int) -> torch.Tensor:
    """Stack [mask, re y, im y, re/im interpolated y, noise level] -> [B, 6, A, S]."""
    m = mask.to(y_scaled.dtype).unsqueeze(1)
    interp = y_scaled @ interpolation_matrix(spacing).to(y_scaled.dtype)
    return torch.cat([m, y_scaled, interp, noise_level_plane(snr_db, y_scaled)], dim=1)


@dataclass
class DiffusionEstimator:
    schedule: NoiseSchedule
    denoiser: Denoiser
    coverage: tuple[str, ...] = ()
    data_consistency: bool = True
    pilot_spacing: int = 4

    @property
    def config(self) -> DenoiserConfig:
        return self.denoiser.cfg

    def meta(self) -> dict:
        return {
            "kind": "diffusion_estimator",
            "schedule": {"T": self.schedule.T, "beta_1": self.schedule.beta_1, "beta_T": self.schedule.beta_T},
            "denoiser": asdict(self.config),
            "coverage": list(self.coverage),
            "data_consistency": self.data_consistency,
            "pilot_spacing": self.pilot_spacing,
        }

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.denoiser, self.meta())

    @classmethod
    def load(cls, path: str | Path) -> "DiffusionEstimator":
        state, meta = load_checkpoint(path)
        if meta.get("kind") != "diffusion_estimator":
            raise ValueError(f"{path} is not a diffusion estimator checkpoint")
        sched = make_schedule(**meta["schedule"])
        net = Denoiser(DenoiserConfig(**meta["denoiser"]))
        net.load_state_dict(state)
        return cls(sched, net, tuple(meta["coverage"]), meta["data_consistency"], meta["pilot_spacing"])


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class PilotParams:
    spacing: int = 4
    snr_range_db: tuple[float, float] = (-12.0, 25.0)


def simulate_observations(h: torch.Tensor, spacing: int, snr_db: torch.Tensor, g: torch.Generator):
    """Batched pilot model in working units; ``h`` is [B, 2, A, S] at unit component variance."""
    mask = torch.as_tensor(cd.pilot_mask(spacing)).expand(h.shape[0], -1, -1)
    sigma2 = 10.0 ** (-snr_db / 10.0)
    noise = torch.randn(h.shape, generator=g) * sigma2.sqrt().view(-1, 1, 1, 1)
    y = (h + noise) * mask.unsqueeze(1)
    return y, mask


def _epoch_batches(n: int, cfg: TrainConfig, g: torch.Generator):
    steps = cfg.steps_per_epoch or max(1, math.ceil(n / cfg.batch_size))
    perm = torch.randperm(n, generator=g)
    pos = 0
    for _ in range(steps):
        if pos + cfg.batch_size > n and pos > 0:
            perm = torch.randperm(n, generator=g)
            pos = 0
        idx = perm[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        yield idx


def denoising_loss(net, schedule, x0, pilots: PilotParams, g) -> torch.Tensor:
    b = x0.shape[0]
    lo, hi = pilots.snr_range_db
    snr = lo + (hi - lo) * torch.rand(b, generator=g)
    y, mask = simulate_observations(x0, pilots.spacing, snr, g)
    t = torch.randint(1, schedule.T + 1, (b,), generator=g)
    eps = torch.randn(x0.shape, generator=g)
    x_t = q_sample(x0, t, eps, schedule)
    pred = net(x_t, conditioning(y, mask, snr, pilots.spacing), t)
    return F.mse_loss(pred, eps)


def train_denoiser(
    dataset: cd.ChannelDataset | np.ndarray,
    cfg: DenoiserConfig | None = None,
    train_cfg: TrainConfig | None = None,
    pilots: PilotParams | None = None,
    schedule: NoiseSchedule | None = None,
    coverage: Sequence[str] = (),
    data_consistency: bool = True,
) -> tuple[DiffusionEstimator, list[float]]:
    cfg = cfg or DenoiserConfig()
    train_cfg = train_cfg or TrainConfig()
    pilots = pilots or PilotParams()
    schedule = schedule or make_schedule()
    h = dataset.stack() if isinstance(dataset, cd.ChannelDataset) else np.asarray(dataset)
    if len(h) == 0:
        raise ValueError("cannot train on an empty dataset")
    x_all = complex_to_channels(h) * SCALE

    torch.manual_seed(train_cfg.seed)
    net = Denoiser(cfg)
    g = seeded_generator(train_cfg.seed)
    opt = make_optimizer(net.parameters(), train_cfg)
    steps = train_cfg.steps_per_epoch or max(1, math.ceil(len(x_all) / train_cfg.batch_size))
    lr_sched = make_lr_schedule(opt, train_cfg, steps * train_cfg.epochs)
    losses: list[float] = []
    last_good = {k: v.clone() for k, v in net.state_dict().items()}
    for epoch in range(train_cfg.epochs):
        total, count = 0.0, 0
        for idx in _epoch_batches(len(x_all), train_cfg, g):
            loss = denoising_loss(net, schedule, x_all[idx], pilots, g)
            if not torch.isfinite(loss):
                net.load_state_dict(last_good)
                raise TrainingDivergedError(
                    f"non-finite denoiser loss at epoch {epoch}", last_good, losses
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            if lr_sched is not None:
                lr_sched.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
        last_good = {k: v.clone() for k, v in net.state_dict().items()}
        log.debug("denoiser epoch %d loss %.5f", epoch, losses[-1])
    net.eval()
    est = DiffusionEstimator(schedule, net, tuple(coverage), data_consistency, pilots.spacing)
    return est, losses


# ---------------------------------------------------------------------------
# sampling


def _stack_observations(obs: Sequence[cd.PilotObservation]):
    y = np.stack([o.y for o in obs])
    mask = torch.as_tensor(np.stack([o.mask for o in obs]))
    snr = torch.tensor([o.snr_db for o in obs], dtype=torch.float32)
    sigma2 = torch.tensor([o.sigma2 for o in obs], dtype=torch.float32)
    return complex_to_channels(y) * SCALE, mask, snr, sigma2


@torch.no_grad()
def estimate_channels(
    obs: Sequence[cd.PilotObservation],
    model: DiffusionEstimator,
    seed: int | Sequence[int],
    batch_size: int = 256,
) -> np.ndarray:
    """Ancestral sampling for a batch of observations -> [B, A, S] complex64.

    ``seed`` is either one seed for the whole batch or one per observation.
    """
    if len(obs) == 0:
        return np.zeros((0, cd.N_ANT, cd.N_SC), dtype=np.complex64)
    for o in obs:
        if o.y.shape != (cd.N_ANT, cd.N_SC):
            raise ValueError(f"observation grid {o.y.shape} does not match model grid")
    seeds = [seed] * len(obs) if np.ndim(seed) == 0 else list(seed)
    if len(seeds) != len(obs):
        raise ValueError("need one seed per observation")
    out = []
    for start in range(0, len(obs), batch_size):
        chunk = obs[start : start + batch_size]
        out.append(_sample(chunk, model, seeds[start : start + batch_size]))
    return np.concatenate(out)


def _sample(obs, model: DiffusionEstimator, seeds) -> np.ndarray:
    sched = model.schedule
    net = model.denoiser
    y, mask, snr, sigma2 = _stack_observations(obs)
    cond = conditioning(y, mask, snr, model.pilot_spacing)
    m = mask.unsqueeze(1).to(y.dtype)
    gens = [seeded_generator(s) for s in seeds]

    def noise(shape):
        return torch.stack([torch.randn(shape, generator=g) for g in gens])

    betas = torch.as_tensor(sched.betas, dtype=torch.float32)
    abar = torch.as_tensor(sched.alpha_bars, dtype=torch.float32)
    x = noise(y.shape[1:])
    s2 = sigma2.view(-1, 1, 1, 1)
    for t in range(sched.T, 0, -1):
        tt = torch.full((len(obs),), t, dtype=torch.long)
        eps = net(x, cond, tt)
        ab_t = abar[t - 1]
        ab_prev = abar[t - 2] if t > 1 else torch.tensor(1.0)
        x0 = (x - (1 - ab_t).sqrt() * eps) / ab_t.sqrt()
        if model.data_consistency:
            # prior variance of x0 given x_t vs pilot noise variance
            w = (1 - ab_t) / (1 - ab_t + s2)
            x0 = x0 + m * w * (y - x0)
        beta = betas[t - 1]
        c0 = ab_prev.sqrt() * beta / (1 - ab_t)
        ct = (1 - beta).sqrt() * (1 - ab_prev) / (1 - ab_t)
        mean = c0 * x0 + ct * x
        if t > 1:
            var = beta * (1 - ab_prev) / (1 - ab_t)
            x = mean + var.sqrt() * noise(y.shape[1:])
        else:
            x = mean
    return channels_to_complex(x / SCALE)


def estimate_channel(obs: cd.PilotObservation, model: DiffusionEstimator, seed: int) -> np.ndarray:
    return estimate_channels([obs], model, [seed])[0]
