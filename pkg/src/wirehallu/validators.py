"""Post-generation hallucination checks for estimated channels.

Three independent checks, one per hallucination type: physical constraint
violations, fabricated (unrealistic) outputs, and context detachment
(delay-spread statistics inconsistent with the declared LoS/NLoS scenario).
Checks only observe; they never alter an estimate.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import channel_data as cd
from .gan_augment import Discriminator, realism_scores


class FlagType(str, enum.Enum):
    CONSTRAINT = "CONSTRAINT"
    FABRICATED = "FABRICATED"
    CONTEXT = "CONTEXT"


@dataclass(frozen=True)
class Flag:
    type: FlagType
    detail: str
    value: float


@dataclass(frozen=True)
class ValidationReport:
    flags: tuple[Flag, ...] = ()
    measured: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.flags

    def types(self) -> set[FlagType]:
        return {f.type for f in self.flags}


class MissingDiscriminatorError(ValueError):
    pass


@dataclass(frozen=True)
class ValidatorConfig:
    p_lo: float = 0.25
    p_hi: float = 4.0
    expected_power: float = 1.0
    magnitude_cap: float = 10.0
    realism_threshold: float | None = None
    delay_boundary_s: float | None = None

    def __post_init__(self):
        if not self.p_lo < 1 < self.p_hi:
            raise ValueError(f"need p_lo < 1 < p_hi, got [{self.p_lo}, {self.p_hi}]")
        if self.realism_threshold is not None and not 0 < self.realism_threshold < 1:
            raise ValueError(f"realism threshold {self.realism_threshold} outside (0, 1)")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ValidatorConfig":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# calibration


def calibrate_delay_boundary(train: Sequence[cd.ChannelSample]) -> float:
    """Geometric midpoint of the median LoS and median NLoS delay spreads."""
    spreads = {env: [] for env in cd.Environment}
    for s in train:
        spreads[s.scenario.environment].append(cd.rms_delay_spread(s.h))
    if not spreads[cd.Environment.LOS] or not spreads[cd.Environment.NLOS]:
        raise ValueError("delay boundary calibration needs both LoS and NLoS samples")
    med_los = np.median(spreads[cd.Environment.LOS])
    med_nlos = np.median(spreads[cd.Environment.NLOS])
    return float(np.exp(0.5 * (np.log(med_los) + np.log(med_nlos))))


def calibrate_realism_threshold(discriminator: Discriminator, heldout: Sequence[cd.ChannelSample], q: float = 5.0) -> float:
    scores = realism_scores(discriminator, np.stack([s.h for s in heldout]))
    thr = float(np.percentile(scores, q))
    return float(np.clip(thr, 1e-6, 1 - 1e-6))


def calibrate(
    train: Sequence[cd.ChannelSample],
    heldout: Sequence[cd.ChannelSample],
    discriminator: Discriminator | None,
    base: ValidatorConfig | None = None,
) -> ValidatorConfig:
    base = base or ValidatorConfig()
    thr = calibrate_realism_threshold(discriminator, heldout) if discriminator is not None else None
    return dataclasses.replace(base, realism_threshold=thr, delay_boundary_s=calibrate_delay_boundary(train))


# ---------------------------------------------------------------------------
# checks


def check_constraints(h_hat: np.ndarray, cfg: ValidatorConfig) -> list[Flag]:
    h = np.asarray(h_hat, dtype=np.complex128)
    flags = []
    bad = int(np.count_nonzero(~np.isfinite(h)))
    if bad:
        flags.append(Flag(FlagType.CONSTRAINT, f"{bad} non-finite entries", float(bad)))
        return flags
    total = float(np.sum(np.abs(h) ** 2))
    expected = cfg.expected_power * h.size
    if not cfg.p_lo * expected <= total <= cfg.p_hi * expected:
        flags.append(
            Flag(FlagType.CONSTRAINT, f"total power {total / expected:.3g}x expected", total / expected)
        )
    peak = float(np.max(np.abs(h))) if h.size else 0.0
    if peak > cfg.magnitude_cap:
        flags.append(Flag(FlagType.CONSTRAINT, f"entry magnitude {peak:.3g} above cap", peak))
    return flags


def _normalized_for_scoring(h: np.ndarray) -> np.ndarray | None:
    if not np.all(np.isfinite(h)):
        return None
    p = np.mean(np.abs(h) ** 2)
    return h / np.sqrt(p) if p > 0 else h


def fabricated_scores(h_batch: np.ndarray, discriminator: Discriminator) -> np.ndarray:
    """Realism scores of power-normalized estimates; NaN where not finite."""
    h_batch = np.asarray(h_batch, dtype=np.complex128)
    out = np.full(len(h_batch), np.nan)
    ok = [i for i, h in enumerate(h_batch) if np.all(np.isfinite(h))]
    if ok:
        normed = np.stack([_normalized_for_scoring(h_batch[i]) for i in ok])
        out[ok] = realism_scores(discriminator, normed.astype(np.complex64))
    return out


def check_fabricated(h_hat: np.ndarray, discriminator: Discriminator | None, cfg: ValidatorConfig) -> list[Flag]:
    if discriminator is None:
        raise MissingDiscriminatorError("fabricated-output check needs a trained discriminator")
    if cfg.realism_threshold is None:
        raise ValueError("realism threshold is not calibrated")
    score = fabricated_scores(np.asarray(h_hat)[None], discriminator)[0]
    return _fabricated_flags(score, cfg)


def _fabricated_flags(score: float, cfg: ValidatorConfig) -> list[Flag]:
    # non-finite estimates are the constraint check's business
    if math.isnan(score) or score >= cfg.realism_threshold:
        return []
    return [Flag(FlagType.FABRICATED, f"realism {score:.3g} below {cfg.realism_threshold:.3g}", float(score))]


def check_context(h_hat: np.ndarray, declared: cd.ScenarioClass, cfg: ValidatorConfig) -> list[Flag]:
    if cfg.delay_boundary_s is None:
        raise ValueError("delay-spread boundary is not calibrated")
    h = np.asarray(h_hat)
    if not np.all(np.isfinite(h)):
        return []
    spread = cd.rms_delay_spread(h)
    env = declared.environment
    if env is cd.Environment.LOS and spread > cfg.delay_boundary_s:
        return [Flag(FlagType.CONTEXT, f"LoS declared but delay spread {spread * 1e9:.1f} ns", spread)]
    if env is cd.Environment.NLOS and spread < cfg.delay_boundary_s:
        return [Flag(FlagType.CONTEXT, f"NLoS declared but delay spread {spread * 1e9:.1f} ns", spread)]
    return []


def validate(
    h_hat: np.ndarray, declared: cd.ScenarioClass, discriminator: Discriminator | None, cfg: ValidatorConfig
) -> ValidationReport:
    return validate_batch(np.asarray(h_hat)[None], [declared], discriminator, cfg)[0]


def validate_batch(
    h_batch: np.ndarray,
    contexts: Sequence[cd.ScenarioClass],
    discriminator: Discriminator | None,
    cfg: ValidatorConfig,
) -> list[ValidationReport]:
    h_batch = np.asarray(h_batch)
    if len(h_batch) != len(contexts):
        raise ValueError(f"{len(h_batch)} estimates but {len(contexts)} contexts")
    scores = fabricated_scores(h_batch, discriminator) if discriminator is not None else None
    reports = []
    for i, (h, ctx) in enumerate(zip(h_batch, contexts)):
        flags = check_constraints(h, cfg)
        if scores is not None:
            flags += _fabricated_flags(scores[i], cfg)
        flags += check_context(h, ctx, cfg)
        measured = {}
        hc = np.asarray(h, dtype=np.complex128)
        if np.all(np.isfinite(hc)):
            measured["power"] = float(np.mean(np.abs(hc) ** 2))
            measured["delay_spread_s"] = cd.rms_delay_spread(hc)
        if scores is not None and not math.isnan(scores[i]):
            measured["realism"] = float(scores[i])
        reports.append(ValidationReport(tuple(flags), measured))
    return reports


@dataclass(frozen=True)
class RateSummary:
    rate: float
    by_type: dict[FlagType, float]


def summarize(reports: Sequence[ValidationReport]) -> RateSummary:
    if not reports:
        raise ValueError("no reports to summarize")
    n = len(reports)
    rate = sum(not r.passed for r in reports) / n
    by_type = {t: sum(t in r.types() for r in reports) / n for t in FlagType}
    return RateSummary(rate, by_type)


def hallucination_rate(
    estimates: np.ndarray,
    contexts: Sequence[cd.ScenarioClass],
    discriminator: Discriminator | None,
    cfg: ValidatorConfig,
) -> RateSummary:
    estimates = np.asarray(estimates)
    if len(estimates) != len(contexts):
        raise ValueError(f"{len(estimates)} estimates but {len(contexts)} contexts")
    if len(estimates) == 0:
        raise ValueError("empty batch")
    return summarize(validate_batch(estimates, contexts, discriminator, cfg))


def write_report_log(path: str | Path, reports: Sequence[ValidationReport], ids: Sequence[str] | None = None) -> Path:
    """One JSON record per line: id, passed, flags, measured values."""
    path = Path(path)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(reports))]
    with path.open("w", encoding="utf-8") as fh:
        for sid, rep in zip(ids, reports):
            rec = {
                "id": sid,
                "passed": rep.passed,
                "flags": [{"type": f.type.value, "detail": f.detail, "value": f.value} for f in rep.flags],
                "measured": rep.measured,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_report_log(path: str | Path) -> list[tuple[str, ValidationReport]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        flags = tuple(Flag(FlagType(f["type"]), f["detail"], f["value"]) for f in rec["flags"])
        out.append((rec["id"], ValidationReport(flags, rec.get("measured", {}))))
    return out
