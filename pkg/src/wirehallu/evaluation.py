"""NMSE metric, strategy pipelines and the SNR sweep.

Every random draw in a run comes from a seed derived by name from the run
seed (``derive_seed``), so a strategy evaluated alone produces the same
numbers as inside a full sweep.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
import yaml

from . import channel_data as cd
from . import diffusion as dfn
from . import gan_augment as gan
from . import moe_gate as moe
from . import validators as val
from .neural_core import TrainConfig

log = logging.getLogger(__name__)

SNR_GRID_DB = (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0)
SINGLE_EXPERT = "all"


class StrategyId(str, enum.Enum):
    HALLUCINATION = "hallucination"
    NO_ATTENTION = "no_attention"
    NO_LLM = "no_llm"
    INTEGRATED = "integrated"

    @property
    def label(self) -> str:
        return {
            "hallucination": "Hallucination",
            "no_attention": "No attention",
            "no_llm": "No LLM",
            "integrated": "Integrated",
        }[self.value]


# ---------------------------------------------------------------------------
# metrics


def nmse(h_hat, h) -> float:
    """||h_hat - h||_F^2 / ||h||_F^2 in linear scale."""
    h_hat = np.asarray(h_hat, dtype=np.complex128)
    h = np.asarray(h, dtype=np.complex128)
    if h_hat.shape != h.shape:
        raise ValueError(f"shape mismatch {h_hat.shape} vs {h.shape}")
    ref = float(np.sum(np.abs(h) ** 2))
    if ref == 0.0:
        raise ZeroDivisionError("reference channel has zero norm")
    return float(np.sum(np.abs(h_hat - h) ** 2)) / ref


def batch_nmse(h_hat: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Per-sample NMSE over the trailing two axes."""
    h_hat = np.asarray(h_hat, dtype=np.complex128)
    h = np.asarray(h, dtype=np.complex128)
    if h_hat.shape != h.shape:
        raise ValueError(f"shape mismatch {h_hat.shape} vs {h.shape}")
    ref = np.sum(np.abs(h) ** 2, axis=(-2, -1))
    if np.any(ref == 0):
        raise ZeroDivisionError("reference channel has zero norm")
    return np.sum(np.abs(h_hat - h) ** 2, axis=(-2, -1)) / ref


def ls_baseline_nmse(snr_db: float, n_samples: int, seed: int = 0) -> float:
    """Monte-Carlo NMSE of the raw full-grid pilot estimate (h_hat = y)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    ss = np.random.SeedSequence([int(seed) % 2**64, 0x15])
    chan_seeds, obs_seeds = ss.spawn(2)
    cs = chan_seeds.generate_state(n_samples, dtype=np.uint64)
    os_ = obs_seeds.generate_state(n_samples, dtype=np.uint64)
    vals = []
    for i in range(n_samples):
        sc = cd.ALL_SCENARIOS[i % len(cd.ALL_SCENARIOS)]
        s = cd.generate_channel(sc, int(cs[i]))
        y = cd.make_pilot_observation(s, 1, snr_db, int(os_[i])).y
        vals.append(nmse(y, s.h))
    return float(np.mean(vals))


def derive_seed(seed: int, *names: Any) -> int:
    """Stable 63-bit seed from a run seed and a path of names."""
    words = [int(seed) % 2**64] + [zlib.crc32(str(n).encode("utf-8")) for n in names]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DiffusionParams:
    channels: int = 16
    n_blocks: int = 3
    num_heads: int = 1
    time_dim: int = 32
    # content-only attention; the relative bias costs ~1.7x training time on CPU
    positional: str = "none"
    steps: int = 1000
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 3e-3
    beta_1: float = 1e-4
    beta_T: float = 0.15
    T: int = 60

    def denoiser(self, attention: bool) -> dfn.DenoiserConfig:
        return dfn.DenoiserConfig(
            self.channels, self.n_blocks, attention, self.num_heads, self.time_dim, positional=self.positional
        )

    def train(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=seed,
            steps_per_epoch=max(1, self.steps // max(self.epochs, 1)),
        )

    def schedule(self) -> dfn.NoiseSchedule:
        return dfn.make_schedule(self.T, self.beta_1, self.beta_T)


@dataclass(frozen=True)
class GanParams:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 2e-4
    latent_dim: int = 32
    width: int = 32
    mode_seeking: float = 0.1

    def config(self, seed: int) -> gan.GanConfig:
        tc = TrainConfig(self.learning_rate, self.batch_size, self.epochs, seed, betas=(0.5, 0.999), cosine_decay=False)
        return gan.GanConfig(latent_dim=self.latent_dim, train=tc, width=self.width, mode_seeking=self.mode_seeking)


@dataclass(frozen=True)
class LlmParams:
    endpoint: str = ""
    timeout_ms: float = 2000.0


@dataclass(frozen=True)
class MitigationParams:
    # pilot data consistency for the unmitigated baseline
    baseline_data_consistency: bool = True
    resample_on_flag: bool = True


@dataclass(frozen=True)
class RunConfig:
    dataset: cd.GenerationConfig = field(default_factory=cd.GenerationConfig)
    pilot_spacing: int = 4
    diffusion: DiffusionParams = field(default_factory=DiffusionParams)
    gan: GanParams = field(default_factory=GanParams)
    llm: LlmParams = field(default_factory=LlmParams)
    mitigation: MitigationParams = field(default_factory=MitigationParams)
    strategies: tuple[StrategyId, ...] = tuple(StrategyId)
    seeds: tuple[int, ...] = (0, 1, 2)
    snr_db: tuple[float, ...] = SNR_GRID_DB
    n_test: int = 200
    n_calibration: int = 600
    out_dir: str = "runs/sweep"
    # optional saved dataset used instead of generating one per seed
    dataset_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(StrategyId(s) for s in self.strategies))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        if not self.seeds:
            raise ValueError("need at least one seed")
        if not self.snr_db:
            raise ValueError("need at least one SNR point")
        if self.n_test < 1 or self.n_calibration < 1:
            raise ValueError("n_test and n_calibration must be >= 1")
        if len(set(self.strategies)) != len(self.strategies):
            raise ValueError("duplicate strategy in config")
        if self.dataset_path is not None and not Path(self.dataset_path).exists():
            raise FileNotFoundError(f"dataset_path {self.dataset_path} does not exist")
        cd.pilot_mask(self.pilot_spacing)
        self.diffusion.denoiser(True)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["strategies"] = [s.value for s in self.strategies]
        d["seeds"] = list(self.seeds)
        d["snr_db"] = list(self.snr_db)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        d = dict(d or {})
        nested = {
            "dataset": cd.GenerationConfig,
            "diffusion": DiffusionParams,
            "gan": GanParams,
            "llm": LlmParams,
            "mitigation": MitigationParams,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in d:
                sub = d[key] or {}
                bad = set(sub) - {f.name for f in dataclasses.fields(typ)}
                if bad:
                    raise ValueError(f"unknown keys in {key}: {sorted(bad)}")
                d[key] = typ(**sub)
        for key in ("strategies", "seeds", "snr_db"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")
        return path


@dataclass(frozen=True)
class StrategySpec:
    """What each strategy switches on."""

    balanced: bool
    attention: bool
    experts: bool
    gate: str  # "single", "llm" or "random"
    data_consistency: bool
    resample: bool


def strategy_spec(strategy: StrategyId, cfg: RunConfig) -> StrategySpec:
    m = cfg.mitigation
    if strategy is StrategyId.HALLUCINATION:
        return StrategySpec(False, False, False, "single", m.baseline_data_consistency, False)
    if strategy is StrategyId.NO_ATTENTION:
        return StrategySpec(True, False, True, "llm", True, m.resample_on_flag)
    if strategy is StrategyId.NO_LLM:
        return StrategySpec(True, True, True, "random", True, m.resample_on_flag)
    return StrategySpec(True, True, True, "llm", True, m.resample_on_flag)


# ---------------------------------------------------------------------------
# per-seed shared artifacts


@dataclass
class SeedArtifacts:
    seed: int
    raw: cd.ChannelDataset
    balanced: cd.ChannelDataset
    generator: gan.Generator
    discriminator: gan.Discriminator
    gan_history: gan.GanHistory
    validator: val.ValidatorConfig
    test: list[cd.ChannelSample]
    models: dict[tuple, tuple[dfn.DiffusionEstimator, list[float]]] = field(default_factory=dict)
    # wall-clock seconds of the preparation stages
    seconds: dict[str, float] = field(default_factory=dict)


def heldout_samples(seed: int, n: int, tag: str) -> list[cd.ChannelSample]:
    """Real samples cycling over all classes, disjoint seed stream from training data."""
    return [
        cd.generate_channel(cd.ALL_SCENARIOS[i % len(cd.ALL_SCENARIOS)], derive_seed(seed, tag, i))
        for i in range(n)
    ]


def prepare_seed(cfg: RunConfig, seed: int) -> SeedArtifacts:
    t0 = time.perf_counter()
    if cfg.dataset_path is not None:
        raw = cd.load_dataset(cfg.dataset_path)
    else:
        raw = cd.build_dataset(cfg.dataset, seed=derive_seed(seed, "dataset"))
    nlos = [s for s in raw if s.scenario.environment is cd.Environment.NLOS]
    t_gan = time.perf_counter()
    gen, disc, hist = gan.train_gan(nlos, cfg.gan.config(derive_seed(seed, "gan")))
    t_gan = time.perf_counter() - t_gan
    balanced = gan.balance_dataset(raw, gen, derive_seed(seed, "balance"))
    calib = heldout_samples(seed, cfg.n_calibration, "calibration")
    vcfg = val.calibrate(raw.samples, calib, disc)
    test = heldout_samples(seed, cfg.n_test, "test")
    elapsed = time.perf_counter() - t0
    log.info("seed %d prepared in %.1fs", seed, elapsed)
    return SeedArtifacts(seed, raw, balanced, gen, disc, hist, vcfg, test, seconds={"prepare": elapsed, "gan": t_gan})


def _expert_models(art: SeedArtifacts, cfg: RunConfig, spec: StrategySpec) -> dict[str, tuple]:
    """Trained estimators keyed by expert id; cached on the artifacts."""
    data = art.balanced if spec.balanced else art.raw
    registry = moe.default_registry()
    groups = (
        {e.id: frozenset(s.key for s in e.coverage) for e in registry.experts}
        if spec.experts
        else {SINGLE_EXPERT: frozenset(s.key for s in cd.ALL_SCENARIOS)}
    )
    out = {}
    for eid, keys in groups.items():
        cache_key = (spec.balanced, spec.attention, spec.data_consistency, eid)
        if cache_key not in art.models:
            subset = data.filter(lambda s, keys=keys: s.scenario.key in keys)
            tseed = derive_seed(art.seed, "denoiser", spec.balanced, spec.attention, eid)
            t0 = time.perf_counter()
            art.models[cache_key] = dfn.train_denoiser(
                subset,
                cfg.diffusion.denoiser(spec.attention),
                cfg.diffusion.train(tseed),
                dfn.PilotParams(spacing=cfg.pilot_spacing),
                cfg.diffusion.schedule(),
                coverage=tuple(sorted(keys)),
                data_consistency=spec.data_consistency,
            )
            log.info("trained %s (%d samples) in %.1fs", cache_key, len(subset), time.perf_counter() - t0)
        out[eid] = art.models[cache_key]
    return out


# ---------------------------------------------------------------------------
# results


@dataclass
class StrategyResult:
    strategy: StrategyId
    seeds: list[int] = field(default_factory=list)
    # snr_db -> per-observation NMSE pooled over seeds
    nmse: dict[float, list[float]] = field(default_factory=dict)
    # snr_db -> per-seed mean NMSE
    seed_means: dict[float, list[float]] = field(default_factory=dict)
    loss: list[float] = field(default_factory=list)
    flag_counts: dict[str, int] = field(default_factory=dict)
    n_validated: int = 0
    n_resampled: int = 0
    gate_sources: dict[str, int] = field(default_factory=dict)

    def flag_rates(self) -> dict[str, float]:
        n = max(self.n_validated, 1)
        return {k: self.flag_counts.get(k, 0) / n for k in [t.value for t in val.FlagType] + ["ANY"]}

    def mean(self, snr: float) -> float:
        return float(np.mean(self.nmse[float(snr)]))

    def merge(self, other: "StrategyResult") -> None:
        self.seeds += other.seeds
        for snr, v in other.nmse.items():
            self.nmse.setdefault(snr, []).extend(v)
        for snr, v in other.seed_means.items():
            self.seed_means.setdefault(snr, []).extend(v)
        if other.loss:
            k = len(self.seeds) - len(other.seeds)
            if not self.loss:
                self.loss = list(other.loss)
            else:
                # running mean over seeds
                self.loss = [(a * k + b * len(other.seeds)) / len(self.seeds) for a, b in zip(self.loss, other.loss)]
        for key, c in other.flag_counts.items():
            self.flag_counts[key] = self.flag_counts.get(key, 0) + c
        for key, c in other.gate_sources.items():
            self.gate_sources[key] = self.gate_sources.get(key, 0) + c
        self.n_validated += other.n_validated
        self.n_resampled += other.n_resampled

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy.value,
            "seeds": self.seeds,
            "nmse": {repr(k): v for k, v in self.nmse.items()},
            "seed_means": {repr(k): v for k, v in self.seed_means.items()},
            "loss": self.loss,
            "flag_counts": self.flag_counts,
            "n_validated": self.n_validated,
            "n_resampled": self.n_resampled,
            "gate_sources": self.gate_sources,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "StrategyResult":
        return cls(
            StrategyId(d["strategy"]),
            list(d["seeds"]),
            {float(k): list(v) for k, v in d["nmse"].items()},
            {float(k): list(v) for k, v in d["seed_means"].items()},
            list(d["loss"]),
            dict(d["flag_counts"]),
            int(d["n_validated"]),
            int(d["n_resampled"]),
            dict(d.get("gate_sources", {})),
        )


@dataclass
class EvalResult:
    strategies: dict[StrategyId, StrategyResult] = field(default_factory=dict)
    snr_db: tuple[float, ...] = SNR_GRID_DB
    failures: list[str] = field(default_factory=list)

    def cells(self) -> list[tuple[StrategyId, float]]:
        return [(sid, snr) for sid, r in self.strategies.items() for snr in self.snr_db if r.nmse.get(snr)]

    @property
    def complete(self) -> bool:
        return not self.failures and len(self.cells()) == len(self.strategies) * len(self.snr_db)

    def summary(self, strategy: StrategyId | str, snr: float) -> tuple[float, float, int]:
        """(mean, std, n) of the pooled per-observation NMSE."""
        v = np.asarray(self.strategies[StrategyId(strategy)].nmse[float(snr)], dtype=np.float64)
        return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0, len(v)

    def to_json(self) -> str:
        return json.dumps(
            {
                "snr_db": list(self.snr_db),
                "failures": self.failures,
                "strategies": [r.to_dict() for r in self.strategies.values()],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalResult":
        d = json.loads(text)
        res = [StrategyResult.from_dict(r) for r in d["strategies"]]
        return cls({r.strategy: r for r in res}, tuple(d["snr_db"]), list(d["failures"]))


class StrategyError(RuntimeError):
    def __init__(self, strategy: StrategyId, seed: int, cause: BaseException):
        super().__init__(f"{strategy.value} (seed {seed}): {type(cause).__name__}: {cause}")
        self.strategy = strategy
        self.seed = seed


# ---------------------------------------------------------------------------
# evaluation


def _route(
    strategy: StrategyId, spec: StrategySpec, cfg: RunConfig, seed: int, snr_idx: int, test: Sequence[cd.ChannelSample]
) -> tuple[list[str], dict[str, int]]:
    if spec.gate == "single":
        return [SINGLE_EXPERT] * len(test), {"single": len(test)}
    registry = moe.default_registry()
    sources: dict[str, int] = {}
    choices = []
    if spec.gate == "random":
        for i, s in enumerate(test):
            d = moe.random_gate(moe.UserState.from_scenario(s.scenario), registry, derive_seed(seed, "gate", snr_idx, i))
            choices.append(d.expert_id)
            sources[d.source.value] = sources.get(d.source.value, 0) + 1
        return choices, sources
    client = moe.make_client(cfg.llm.endpoint, registry)
    memo: dict[str, moe.GateDecision] = {}
    for s in test:
        if s.scenario.key not in memo:
            state = moe.UserState.from_scenario(s.scenario)
            memo[s.scenario.key] = moe.llm_gate(state, registry, client, cfg.llm.timeout_ms)
        d = memo[s.scenario.key]
        choices.append(d.expert_id)
        sources[d.source.value] = sources.get(d.source.value, 0) + 1
    return choices, sources


def _estimate_routed(obs, choices, models, seeds) -> np.ndarray:
    out = np.zeros((len(obs), cd.N_ANT, cd.N_SC), dtype=np.complex64)
    for eid in sorted(set(choices)):
        idx = [i for i, c in enumerate(choices) if c == eid]
        est = models[eid][0]
        out[idx] = dfn.estimate_channels([obs[i] for i in idx], est, [seeds[i] for i in idx])
    return out


def evaluate_seed(strategy: StrategyId, cfg: RunConfig, art: SeedArtifacts) -> StrategyResult:
    spec = strategy_spec(strategy, cfg)
    models = _expert_models(art, cfg, spec)
    res = StrategyResult(strategy, seeds=[art.seed])
    curves = np.array([m[1] for m in models.values()], dtype=np.float64)
    res.loss = [float(x) for x in curves.mean(axis=0)] if curves.size else []
    h_true = np.stack([s.h for s in art.test])
    contexts = [s.scenario for s in art.test]
    for k, snr in enumerate(cfg.snr_db):
        obs = [
            cd.make_pilot_observation(s, cfg.pilot_spacing, snr, derive_seed(art.seed, "obs", k, i))
            for i, s in enumerate(art.test)
        ]
        choices, sources = _route(strategy, spec, cfg, art.seed, k, art.test)
        for key, c in sources.items():
            res.gate_sources[key] = res.gate_sources.get(key, 0) + c
        seeds = [derive_seed(art.seed, "sample", k, i) for i in range(len(obs))]
        h_hat = _estimate_routed(obs, choices, models, seeds)
        reports = val.validate_batch(h_hat, contexts, art.discriminator, art.validator)
        if spec.resample:
            bad = [i for i, r in enumerate(reports) if not r.passed]
            if bad:
                seeds2 = [derive_seed(art.seed, "resample", k, i) for i in bad]
                redo = _estimate_routed([obs[i] for i in bad], [choices[i] for i in bad], models, seeds2)
                redo_reports = val.validate_batch(redo, [contexts[i] for i in bad], art.discriminator, art.validator)
                # keep the second draw and its flags
                for j, i in enumerate(bad):
                    h_hat[i] = redo[j]
                    reports[i] = redo_reports[j]
                res.n_resampled += len(bad)
        for r in reports:
            for t in r.types():
                res.flag_counts[t.value] = res.flag_counts.get(t.value, 0) + 1
            if not r.passed:
                res.flag_counts["ANY"] = res.flag_counts.get("ANY", 0) + 1
        res.n_validated += len(reports)
        # non-finite estimates count as total failure rather than poisoning the mean
        finite = np.all(np.isfinite(h_hat), axis=(1, 2))
        vals = np.full(len(obs), np.inf)
        vals[finite] = batch_nmse(h_hat[finite], h_true[finite])
        res.nmse[float(snr)] = [float(v) for v in vals]
        res.seed_means[float(snr)] = [float(np.mean(vals))]
    return res


def run_strategy(
    strategy: StrategyId | str,
    cfg: RunConfig,
    artifacts: dict[int, SeedArtifacts] | None = None,
) -> StrategyResult:
    strategy = StrategyId(strategy)
    artifacts = artifacts if artifacts is not None else {}
    total = StrategyResult(strategy)
    for seed in cfg.seeds:
        try:
            if seed not in artifacts:
                artifacts[seed] = prepare_seed(cfg, seed)
            part = evaluate_seed(strategy, cfg, artifacts[seed])
        except Exception as exc:
            raise StrategyError(strategy, seed, exc) from exc
        total.merge(part)
    return total


def sweep(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    figures: bool = True,
    artifacts: dict[int, SeedArtifacts] | None = None,
) -> EvalResult:
    """Run every configured strategy; writes the report when ``out_dir`` is given.

    A failing strategy is recorded in ``failures`` and the remaining cells are
    still evaluated. ``artifacts`` caches per-seed data, GANs and experts and
    may be shared between sweeps with the same config.
    """
    torch.set_num_threads(1)
    result = EvalResult(snr_db=cfg.snr_db)
    artifacts = {} if artifacts is None else artifacts
    for sid in cfg.strategies:
        t0 = time.perf_counter()
        try:
            result.strategies[sid] = run_strategy(sid, cfg, artifacts)
        except StrategyError as exc:
            log.error("strategy failed: %s", exc)
            result.failures.append(str(exc))
        log.info("%s done in %.1fs", sid.value, time.perf_counter() - t0)
    if out_dir is not None:
        from .report import emit_report

        emit_report(result, out_dir, figures=figures)
    return result


def orderings(result: EvalResult, snr: float = 0.0) -> dict[str, bool]:
    """Pairwise mean-NMSE orderings across strategies at one SNR."""
    m = {sid: result.strategies[sid].mean(snr) for sid in result.strategies}
    S = StrategyId
    out = {}
    pairs = [(S.INTEGRATED, S.NO_ATTENTION), (S.NO_ATTENTION, S.HALLUCINATION), (S.INTEGRATED, S.NO_LLM)]
    for a, b in pairs:
        if a in m and b in m:
            out[f"{a.value}<={b.value}"] = m[a] <= m[b]
    return out


def iter_rows(result: EvalResult) -> Iterable[tuple[str, float, float, float, int]]:
    for sid, snr in result.cells():
        yield (sid.value, snr, *result.summary(sid, snr))
