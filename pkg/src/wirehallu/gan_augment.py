"""Conditional GAN that synthesizes minority-class (NLoS) channels.

The discriminator doubles as a realism scorer for the fabricated-output
validator, so besides generator samples it also sees white-noise negatives.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import channel_data as cd
from .neural_core import (
    TrainConfig,
    channels_to_complex,
    checkpoint_hash,
    complex_to_channels,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    seeded_generator,
)

log = logging.getLogger(__name__)

NLOS_CLASSES = tuple(s.key for s in cd.ALL_SCENARIOS if s.environment is cd.Environment.NLOS)
MIN_TRAIN_SAMPLES = 256


class GanTrainingError(RuntimeError):
    pass


class ModeCollapseWarning(UserWarning):
    pass


class ScenarioMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 32
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            learning_rate=2e-4, batch_size=64, epochs=60, betas=(0.5, 0.999), cosine_decay=False
        )
    )
    width: int = 32
    classes: tuple[str, ...] = NLOS_CLASSES
    wasserstein: bool = False
    noise_negatives: bool = True
    diversity_floor: float = 0.3
    # weight of the mode-seeking term (0 disables it)
    mode_seeking: float = 0.1

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if not self.classes:
            raise ValueError("GAN needs at least one conditioning class")
        if self.mode_seeking < 0:
            raise ValueError("mode_seeking weight must be >= 0")


def to_angle_delay(x: torch.Tensor) -> torch.Tensor:
    """[B, 2, A, S] antenna-frequency response -> [B, 2, A, S] beam-delay taps.

    DFT across antennas, inverse DFT across subcarriers, both orthonormal.
    """
    z = torch.fft.ifft(torch.complex(x[:, 0], x[:, 1]), dim=-1, norm="ortho")
    z = torch.fft.fft(z, dim=-2, norm="ortho")
    return torch.stack([z.real, z.imag], dim=1)


def from_angle_delay(x: torch.Tensor) -> torch.Tensor:
    z = torch.fft.ifft(torch.complex(x[:, 0], x[:, 1]), dim=-2, norm="ortho")
    z = torch.fft.fft(z, dim=-1, norm="ortho")
    return torch.stack([z.real, z.imag], dim=1)


def unit_power(x: torch.Tensor) -> torch.Tensor:
    """Scale each [2, A, S] sample to mean complex power 1."""
    p = x.pow(2).sum(dim=1, keepdim=True).mean(dim=(2, 3), keepdim=True)
    return x / p.clamp_min(1e-12).sqrt()


class Generator(nn.Module):
    def __init__(self, latent_dim: int, classes: Sequence[str], width: int = 32):
        super().__init__()
        self.latent_dim = latent_dim
        self.classes = tuple(classes)
        self.width = width
        self.fc = nn.Linear(latent_dim + len(self.classes), width * 4 * 1 * 4)
        self.up = nn.Sequential(
            nn.ConvTranspose2d(width * 4, width * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(width * 2, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(width, 2, 4, stride=2, padding=1),
        )

    def one_hot(self, keys: Sequence[str]) -> torch.Tensor:
        idx = torch.tensor([self.classes.index(k) for k in keys])
        return F.one_hot(idx, len(self.classes)).float()

    def forward(self, z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.fc(torch.cat([z, labels], dim=1))).view(-1, self.width * 4, 1, 4)
        # the network emits beam-delay taps, where multipath channels are sparse
        return unit_power(from_angle_delay(self.up(h)))


class Discriminator(nn.Module):
    def __init__(self, width: int = 32):
        super().__init__()
        self.width = width
        self.body = nn.Sequential(
            nn.Conv2d(2, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(width * 4 * 1 * 4, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.body(to_angle_delay(x)).flatten(1)).squeeze(1)


@dataclass
class GanHistory:
    g_loss: list[float] = field(default_factory=list)
    d_loss: list[float] = field(default_factory=list)
    diversity: list[float] = field(default_factory=list)


def batch_diversity(x: torch.Tensor) -> float:
    """Mean pairwise RMS distance between samples of a [B, 2, A, S] batch."""
    flat = x.flatten(1)
    d = torch.cdist(flat, flat) / math.sqrt(flat.shape[1] / 2)
    n = len(flat)
    return float(d.sum() / max(n * (n - 1), 1))


def _noise_negatives(n: int, g: torch.Generator) -> torch.Tensor:
    amp = torch.rand(n, 1, 1, 1, generator=g)
    return unit_power(torch.randn(n, 2, cd.N_ANT, cd.N_SC, generator=g)) * amp


def _mode_seeking_penalty(gen, z, lab, out, g: torch.Generator) -> torch.Tensor:
    """Inverse ratio of output distance to latent distance for paired draws."""
    z2 = torch.randn(z.shape, generator=g)
    out2 = gen(z2, lab)
    ratio = (out - out2).abs().mean() / (z - z2).abs().mean()
    return 1.0 / (ratio + 1e-5)


def train_gan(
    nlos_samples: Sequence[cd.ChannelSample] | cd.ChannelDataset, cfg: GanConfig | None = None
) -> tuple[Generator, Discriminator, GanHistory]:
    cfg = cfg or GanConfig()
    samples = list(nlos_samples)
    if len(samples) < MIN_TRAIN_SAMPLES:
        raise ValueError(f"GAN training needs >= {MIN_TRAIN_SAMPLES} samples, got {len(samples)}")
    for s in samples:
        if s.scenario.key not in cfg.classes:
            raise ScenarioMismatchError(f"sample class {s.scenario.key} not in GAN classes {cfg.classes}")
    tc = cfg.train
    torch.manual_seed(tc.seed)
    gen, disc = Generator(cfg.latent_dim, cfg.classes, cfg.width), Discriminator(cfg.width)
    g = seeded_generator(tc.seed)

    x_real = complex_to_channels(np.stack([s.h for s in samples]))
    labels_real = gen.one_hot([s.scenario.key for s in samples])
    opt_g = make_optimizer(gen.parameters(), tc)
    opt_d = make_optimizer(disc.parameters(), tc)
    hist = GanHistory()
    n = len(samples)
    steps = tc.steps_per_epoch or max(1, n // tc.batch_size)

    for epoch in range(tc.epochs):
        g_tot = d_tot = 0.0
        perm = torch.randperm(n, generator=g)
        for step in range(steps):
            lo = (step * tc.batch_size) % n
            idx = perm[lo : lo + tc.batch_size]
            real = x_real[idx]
            b = len(idx)
            z = torch.randn(b, cfg.latent_dim, generator=g)
            lab = labels_real[idx]

            fake = gen(z, lab)
            d_real, d_fake = disc(real), disc(fake.detach())
            if cfg.wasserstein:
                d_loss = d_fake.mean() - d_real.mean()
            else:
                d_loss = F.binary_cross_entropy_with_logits(d_real, torch.ones_like(d_real))
                d_loss = d_loss + F.binary_cross_entropy_with_logits(d_fake, torch.zeros_like(d_fake))
            if cfg.noise_negatives:
                d_noise = disc(_noise_negatives(b, g))
                d_loss = d_loss + F.binary_cross_entropy_with_logits(d_noise, torch.zeros_like(d_noise))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            if cfg.wasserstein:
                with torch.no_grad():
                    for p in disc.parameters():
                        p.clamp_(-0.01, 0.01)

            out = gen(z, lab)
            d_gen = disc(out)
            if cfg.wasserstein:
                g_loss = -d_gen.mean()
            else:
                # non-saturating generator objective
                g_loss = F.binary_cross_entropy_with_logits(d_gen, torch.ones_like(d_gen))
            if cfg.mode_seeking > 0:
                g_loss = g_loss + cfg.mode_seeking * _mode_seeking_penalty(gen, z, lab, out, g)
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
                raise GanTrainingError(
                    f"non-finite GAN loss at epoch {epoch} step {step}: "
                    f"d={d_loss.item()} g={g_loss.item()}"
                )
            g_tot += g_loss.item()
            d_tot += d_loss.item()
        hist.g_loss.append(g_tot / steps)
        hist.d_loss.append(d_tot / steps)
        with torch.no_grad():
            gen.eval()
            div = batch_diversity(gen(torch.randn(64, cfg.latent_dim, generator=g), labels_real[:64]))
            gen.train()
        hist.diversity.append(div)
        if div < cfg.diversity_floor:
            warnings.warn(f"epoch {epoch}: generator diversity {div:.3f} below floor", ModeCollapseWarning)
        log.debug("gan epoch %d g=%.4f d=%.4f div=%.3f", epoch, hist.g_loss[-1], hist.d_loss[-1], div)
    gen.eval()
    disc.eval()
    return gen, disc, hist


def synthesize_nlos(generator: Generator, n: int, scenario: cd.ScenarioClass, seed: int) -> list[cd.ChannelSample]:
    if scenario.environment is not cd.Environment.NLOS:
        raise ScenarioMismatchError(f"synthesis is NLoS-only, got {scenario.key}")
    if scenario.key not in generator.classes:
        raise ScenarioMismatchError(f"generator was not trained on {scenario.key}")
    if n <= 0:
        return []
    seeds = np.random.SeedSequence([int(seed) % 2**64, scenario.index]).generate_state(n, dtype=np.uint64)
    z = torch.stack([torch.randn(generator.latent_dim, generator=seeded_generator(int(s))) for s in seeds])
    with torch.no_grad():
        x = generator(z, generator.one_hot([scenario.key] * n))
    h = channels_to_complex(x)
    tag = generator_hash(generator)
    return [
        cd.ChannelSample(cd.normalize_power(h[i]), scenario, int(seeds[i]), cd.Origin.GAN_SYNTHETIC, {"generator": tag})
        for i in range(n)
    ]


@dataclass(frozen=True)
class RealismScore:
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and 0.0 <= self.value <= 1.0):
            raise ValueError(f"realism score {self.value} outside [0, 1]")


@torch.no_grad()
def realism_scores(discriminator: Discriminator, h: np.ndarray) -> np.ndarray:
    """Discriminator sigmoid for a batch of complex channels [B, A, S]."""
    x = complex_to_channels(np.asarray(h))
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return torch.sigmoid(discriminator(x).double()).numpy()


def realism_score(discriminator: Discriminator, sample: cd.ChannelSample | np.ndarray) -> RealismScore:
    h = sample.h if isinstance(sample, cd.ChannelSample) else sample
    return RealismScore(float(realism_scores(discriminator, h[None])[0]))


def balance_dataset(ds: cd.ChannelDataset, generator: Generator, seed: int) -> cd.ChannelDataset:
    """Append GAN NLoS samples until the NLoS count equals the LoS count."""
    bad = [k for k in generator.classes if not k.startswith(cd.Environment.NLOS.value + "-")]
    if bad:
        raise ScenarioMismatchError(f"generator covers non-NLoS classes {bad}")
    env = ds.env_counts()
    deficit = max(0, env[cd.Environment.LOS] - env[cd.Environment.NLOS])
    if deficit == 0:
        return ds
    classes = [cd.ScenarioClass.from_key(k) for k in generator.classes]
    base, extra = divmod(deficit, len(classes))
    synthetic = []
    for i, sc in enumerate(classes):
        synthetic += synthesize_nlos(generator, base + (1 if i < extra else 0), sc, seed)
    return ds.extend(synthetic, balanced=True, synthetic=len(synthetic), generator=generator_hash(generator))


def generator_hash(generator: Generator) -> str:
    return checkpoint_hash(generator, {"classes": list(generator.classes)})


def save_gan(path: str | Path, generator: Generator, discriminator: Discriminator) -> tuple[Path, Path]:
    path = Path(path)
    meta = {
        "kind": "gan_generator",
        "latent_dim": generator.latent_dim,
        "classes": list(generator.classes),
        "width": generator.width,
    }
    gp = save_checkpoint(path.with_suffix(".gen.ckpt"), generator, meta)
    dp = save_checkpoint(
        path.with_suffix(".disc.ckpt"), discriminator, {"kind": "gan_discriminator", "width": discriminator.width}
    )
    return gp, dp


def load_generator(path: str | Path) -> Generator:
    state, meta = load_checkpoint(path)
    gen = Generator(meta["latent_dim"], meta["classes"], meta.get("width", 32))
    gen.load_state_dict(state)
    return gen.eval()


def load_discriminator(path: str | Path) -> Discriminator:
    state, meta = load_checkpoint(path)
    disc = Discriminator(meta.get("width", 32))
    disc.load_state_dict(state)
    return disc.eval()
