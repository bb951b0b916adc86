"""Synthetic multipath channel dataset: generation, pilots, persistence, cleaning.

Channels live on a fixed 8 antenna x 32 subcarrier grid and are stored as
``complex64`` so that the on-disk float32 format round-trips bit-exactly.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

N_ANT = 8
N_SC = 32
SUBCARRIER_SPACING_HZ = 240e3
TAP_DURATION_S = 1.0 / (N_SC * SUBCARRIER_SPACING_HZ)
ANTENNA_SPACING_WL = 0.5
FORMAT_VERSION = 1
SAMPLE_BYTES = N_ANT * N_SC * 2 * 4

LOS_K_FACTOR_DB = 10.0
LOS_WEAK_PATHS = 4
LOS_MEAN_DELAY_S = 30e-9
NLOS_PATHS = 12
NLOS_MEAN_DELAY_S = 300e-9
HIGH_BAND_ANGLE_STD_DEG = 5.0
ANGLE_RANGE_DEG = 60.0


class Environment(str, enum.Enum):
    LOS = "los"
    NLOS = "nlos"


class CarrierBand(str, enum.Enum):
    LOW = "low"
    HIGH = "high"

    @property
    def carrier_ghz(self) -> float:
        return 2.6 if self is CarrierBand.LOW else 28.0


class Mobility(str, enum.Enum):
    STATIC = "static"
    URBAN = "urban"
    HIGHWAY = "highway"

    @property
    def speed_kmh(self) -> float:
        return {"static": 0.0, "urban": 30.0, "highway": 120.0}[self.value]

    @property
    def phase_jitter_rad(self) -> float:
        return {"static": 0.0, "urban": 0.1, "highway": 0.4}[self.value]


class Origin(str, enum.Enum):
    SIMULATED = "simulated"
    GAN_SYNTHETIC = "gan_synthetic"
    IMPORTED = "imported"


@dataclass(frozen=True, order=True)
class ScenarioClass:
    environment: Environment
    carrier_band: CarrierBand
    mobility: Mobility

    @property
    def key(self) -> str:
        return f"{self.environment.value}-{self.carrier_band.value}-{self.mobility.value}"

    @classmethod
    def from_key(cls, key: str) -> "ScenarioClass":
        try:
            env, band, mob = key.strip().lower().split("-")
            return cls(Environment(env), CarrierBand(band), Mobility(mob))
        except ValueError as exc:
            raise ValueError(f"invalid scenario key {key!r}") from exc

    @property
    def index(self) -> int:
        return ALL_SCENARIOS.index(self)

    def __str__(self) -> str:
        return self.key


ALL_SCENARIOS: tuple[ScenarioClass, ...] = tuple(
    ScenarioClass(e, b, m) for e in Environment for b in CarrierBand for m in Mobility
)


@dataclass(frozen=True)
class ChannelSample:
    h: np.ndarray
    scenario: ScenarioClass
    seed: int
    origin: Origin = Origin.SIMULATED
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        # private copy so freezing it never touches the caller's array
        h = np.array(self.h, dtype=np.complex64)
        if h.shape != (N_ANT, N_SC):
            raise ValueError(f"channel must have shape {(N_ANT, N_SC)}, got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ValueError("channel has non-finite entries")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @property
    def power(self) -> float:
        """Mean per-entry power."""
        return float(np.mean(np.abs(self.h.astype(np.complex128)) ** 2))


@dataclass(frozen=True)
class PilotObservation:
    y: np.ndarray
    mask: np.ndarray
    snr_db: float
    sigma2: float


def _seed_sequence(*entropy: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(e) % 2**64 for e in entropy])


def normalize_power(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.complex128)
    p = np.mean(np.abs(h) ** 2)
    if p <= 0 or not np.isfinite(p):
        raise ValueError("cannot normalize a zero or non-finite channel")
    return (h / np.sqrt(p)).astype(np.complex64)


def multipath_response(gains, delays_s, angles_rad, jitter=None) -> np.ndarray:
    """Sum of planar-wave paths over the antenna x subcarrier grid.

    ``jitter`` optionally holds per-path, per-antenna phase offsets of shape
    (n_paths, N_ANT).
    """
    gains = np.asarray(gains, dtype=np.complex128)
    a = np.arange(N_ANT)
    s = np.arange(N_SC)
    steer = np.exp(2j * np.pi * ANTENNA_SPACING_WL * np.outer(np.sin(angles_rad), a))
    if jitter is not None:
        steer = steer * np.exp(1j * jitter)
    freq = np.exp(-2j * np.pi * SUBCARRIER_SPACING_HZ * np.outer(delays_s, s))
    return np.einsum("p,pa,ps->as", gains, steer, freq)


def generate_channel(scenario: ScenarioClass, seed: int) -> ChannelSample:
    rng = np.random.default_rng(_seed_sequence(seed, scenario.index))
    centre = np.deg2rad(rng.uniform(-ANGLE_RANGE_DEG, ANGLE_RANGE_DEG))

    if scenario.environment is Environment.LOS:
        k = 10 ** (LOS_K_FACTOR_DB / 10)
        n_weak = LOS_WEAK_PATHS
        weak = (rng.standard_normal(n_weak) + 1j * rng.standard_normal(n_weak)) * np.sqrt(
            1.0 / (k + 1) / n_weak / 2
        )
        los = np.sqrt(k / (k + 1)) * np.exp(1j * rng.uniform(0, 2 * np.pi))
        gains = np.concatenate([[los], weak])
        delays = np.concatenate([[0.0], rng.exponential(LOS_MEAN_DELAY_S, n_weak)])
    else:
        n = NLOS_PATHS
        gains = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * np.sqrt(1.0 / n / 2)
        delays = rng.exponential(NLOS_MEAN_DELAY_S, n)
    n_paths = len(gains)

    if scenario.carrier_band is CarrierBand.HIGH:
        offsets = np.deg2rad(rng.normal(0.0, HIGH_BAND_ANGLE_STD_DEG, n_paths))
        angles = centre + offsets
    else:
        angles = np.deg2rad(rng.uniform(-ANGLE_RANGE_DEG, ANGLE_RANGE_DEG, n_paths))
    if scenario.environment is Environment.LOS:
        angles[0] = centre

    std = scenario.mobility.phase_jitter_rad
    jitter = rng.normal(0.0, std, (n_paths, N_ANT)) if std > 0 else None

    h = multipath_response(gains, delays, angles, jitter)
    return ChannelSample(normalize_power(h), scenario, int(seed), Origin.SIMULATED)


def pilot_mask(pilot_spacing: int) -> np.ndarray:
    if pilot_spacing <= 0:
        raise ValueError(f"pilot_spacing must be >= 1, got {pilot_spacing}")
    if N_SC % pilot_spacing:
        raise ValueError(f"pilot_spacing {pilot_spacing} does not divide {N_SC} subcarriers")
    mask = np.zeros((N_ANT, N_SC), dtype=bool)
    mask[:, ::pilot_spacing] = True
    return mask


def snr_to_sigma2(snr_db: float) -> float:
    return float(10.0 ** (-snr_db / 10.0))


def complex_noise(rng: np.random.Generator, shape, sigma2: float) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(sigma2 / 2)


def make_pilot_observation(
    sample: ChannelSample | np.ndarray, pilot_spacing: int, snr_db: float, seed: int
) -> PilotObservation:
    h = sample.h if isinstance(sample, ChannelSample) else np.asarray(sample)
    mask = pilot_mask(pilot_spacing)
    sigma2 = snr_to_sigma2(snr_db)
    rng = np.random.default_rng(_seed_sequence(seed))
    n = complex_noise(rng, h.shape, sigma2)
    y = np.where(mask, h.astype(np.complex128) + n, 0).astype(np.complex64)
    return PilotObservation(y=y, mask=mask, snr_db=float(snr_db), sigma2=sigma2)


def power_delay_profile(h: np.ndarray) -> np.ndarray:
    taps = np.fft.ifft(np.asarray(h, dtype=np.complex128), axis=-1)
    return np.mean(np.abs(taps) ** 2, axis=-2)


def rms_delay_spread(sample: ChannelSample | np.ndarray) -> float:
    """RMS delay spread in seconds from the antenna-averaged power-delay profile."""
    h = sample.h if isinstance(sample, ChannelSample) else np.asarray(sample)
    pdp = power_delay_profile(h)
    total = pdp.sum()
    if total <= 0:
        return 0.0
    # upper half of the IDFT grid is negative delay (leakage from tap 0 wraps to tap N-1)
    k = np.arange(pdp.size)
    k = np.where(k < pdp.size // 2, k, k - pdp.size)
    mean = np.dot(k, pdp) / total
    var = np.dot((k - mean) ** 2, pdp) / total
    return float(np.sqrt(max(var, 0.0)) * TAP_DURATION_S)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class GenerationConfig:
    total: int = 10_000
    nlos_ratio: int = 1
    los_ratio: int = 4

    def class_counts(self) -> dict[ScenarioClass, int]:
        if self.total <= 0:
            raise ValueError(f"dataset size must be positive, got {self.total}")
        if self.nlos_ratio < 0 or self.los_ratio < 0 or self.nlos_ratio + self.los_ratio <= 0:
            raise ValueError("imbalance ratio parts must be nonnegative and not both zero")
        n_nlos = round(self.total * self.nlos_ratio / (self.nlos_ratio + self.los_ratio))
        per_env = {Environment.NLOS: n_nlos, Environment.LOS: self.total - n_nlos}
        counts = {}
        for env, n_env in per_env.items():
            classes = [s for s in ALL_SCENARIOS if s.environment is env]
            base, extra = divmod(n_env, len(classes))
            for i, sc in enumerate(classes):
                counts[sc] = base + (1 if i < extra else 0)
        return counts


@dataclass(frozen=True)
class ChannelDataset:
    samples: tuple[ChannelSample, ...]
    params: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def counts(self) -> dict[str, int]:
        out = {s.key: 0 for s in ALL_SCENARIOS}
        for smp in self.samples:
            out[smp.scenario.key] += 1
        return out

    def env_counts(self) -> dict[Environment, int]:
        out = {e: 0 for e in Environment}
        for smp in self.samples:
            out[smp.scenario.environment] += 1
        return out

    @property
    def manifest(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "grid": [N_ANT, N_SC],
            "counts": self.counts,
            "n_samples": len(self.samples),
            "params": self.params,
            "samples": [
                {"scenario": s.scenario.key, "seed": s.seed, "origin": s.origin.value, "meta": s.meta}
                for s in self.samples
            ],
        }

    def stack(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, N_ANT, N_SC), dtype=np.complex64)
        return np.stack([s.h for s in self.samples])

    def filter(self, predicate) -> "ChannelDataset":
        return dataclasses.replace(self, samples=tuple(s for s in self.samples if predicate(s)))

    def extend(self, extra: Iterable[ChannelSample], **param_updates) -> "ChannelDataset":
        params = {**self.params, **param_updates}
        return dataclasses.replace(self, samples=self.samples + tuple(extra), params=params)


def build_dataset(config: GenerationConfig | None = None, seed: int = 0) -> ChannelDataset:
    config = config or GenerationConfig()
    counts = config.class_counts()
    ss = _seed_sequence(seed)
    per_sample = ss.generate_state(config.total, dtype=np.uint64)
    order = np.random.default_rng(ss.spawn(1)[0]).permutation(config.total)
    jobs = [sc for sc in ALL_SCENARIOS for _ in range(counts[sc])]
    samples = [generate_channel(jobs[i], int(per_sample[k])) for k, i in enumerate(order)]
    params = {
        "generator": "clustered-multipath",
        "total": config.total,
        "nlos_ratio": config.nlos_ratio,
        "los_ratio": config.los_ratio,
        "seed": int(seed),
        "subcarrier_spacing_hz": SUBCARRIER_SPACING_HZ,
    }
    return ChannelDataset(tuple(samples), params)


class DatasetFormatError(Exception):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


class DatasetTruncatedError(DatasetFormatError):
    pass


class DatasetCountMismatchError(DatasetFormatError):
    pass


def save_dataset(ds: ChannelDataset, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arr = ds.stack()
    payload = np.stack([arr.real, arr.imag], axis=-1).astype("<f4")
    (path / "samples.bin").write_bytes(payload.tobytes())
    (path / "manifest.json").write_text(json.dumps(ds.manifest, indent=1), encoding="utf-8")
    return path


def load_dataset(path: str | Path) -> ChannelDataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetVersionError(
            f"{path}: format version {manifest.get('version')!r}, expected {FORMAT_VERSION}"
        )
    if tuple(manifest.get("grid", ())) != (N_ANT, N_SC):
        raise DatasetVersionError(f"{path}: unsupported grid {manifest.get('grid')}")
    raw = (path / "samples.bin").read_bytes()
    if len(raw) % SAMPLE_BYTES:
        raise DatasetTruncatedError(
            f"{path / 'samples.bin'}: {len(raw)} bytes is not a whole number of "
            f"{SAMPLE_BYTES}-byte samples"
        )
    n_payload = len(raw) // SAMPLE_BYTES
    records = manifest.get("samples", [])
    declared = int(manifest.get("n_samples", len(records)))
    count_sum = sum(manifest.get("counts", {}).values())
    if not (n_payload == declared == len(records) == count_sum):
        raise DatasetCountMismatchError(
            f"{path}: manifest declares {declared} samples ({count_sum} by class, "
            f"{len(records)} records) but payload holds {n_payload}"
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape(n_payload, N_ANT, N_SC, 2)
    h = (arr[..., 0] + 1j * arr[..., 1]).astype(np.complex64)
    samples = []
    for i, rec in enumerate(records):
        samples.append(
            ChannelSample(
                h[i].copy(),
                ScenarioClass.from_key(rec["scenario"]),
                int(rec["seed"]),
                Origin(rec["origin"]),
                dict(rec.get("meta", {})),
            )
        )
    ds = ChannelDataset(tuple(samples), manifest.get("params", {}), manifest["version"])
    if ds.counts != {k: manifest["counts"].get(k, 0) for k in ds.counts}:
        raise DatasetCountMismatchError(f"{path}: per-class counts disagree with sample records")
    return ds


def import_tensors(h: np.ndarray, scenarios: Sequence[ScenarioClass], normalize: bool = True) -> ChannelDataset:
    """Wrap externally generated channel tensors of shape (n, 8, 32)."""
    h = np.asarray(h)
    if h.ndim != 3 or h.shape[1:] != (N_ANT, N_SC) or len(h) != len(scenarios):
        raise ValueError(f"expected ({len(scenarios)}, {N_ANT}, {N_SC}) tensor, got {h.shape}")
    samples = [
        ChannelSample(normalize_power(x) if normalize else x, sc, i, Origin.IMPORTED)
        for i, (x, sc) in enumerate(zip(h, scenarios))
    ]
    return ChannelDataset(tuple(samples), {"generator": "imported"})


# ---------------------------------------------------------------------------
# cleaning and classic augmentation


class CleanPolicy(str, enum.Enum):
    ZSCORE = "zscore"
    IQR = "iqr"
    HASH_DEDUP = "hash_dedup"


def payload_hash(h: np.ndarray) -> int:
    h = np.asarray(h, dtype=np.complex64)
    q = np.round(np.stack([h.real, h.imag], axis=-1).astype(np.float64), 6) + 0.0
    digest = hashlib.blake2b(q.tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def outlier_indices(values: np.ndarray, policy: CleanPolicy, threshold: float | None = None) -> list[int]:
    values = np.asarray(values, dtype=np.float64)
    if policy is CleanPolicy.ZSCORE:
        threshold = 3.0 if threshold is None else threshold
        std = values.std()
        if std == 0:
            return []
        z = (values - values.mean()) / std
        return np.flatnonzero(np.abs(z) > threshold).tolist()
    if policy is CleanPolicy.IQR:
        k = 1.5 if threshold is None else threshold
        q1, q3 = np.percentile(values, [25, 75], method="linear")
        iqr = q3 - q1
        return np.flatnonzero((values < q1 - k * iqr) | (values > q3 + k * iqr)).tolist()
    raise ValueError(f"{policy} is not a statistical policy")


def clean_dataset(
    ds: ChannelDataset, policy: CleanPolicy | str, threshold: float | None = None
) -> tuple[ChannelDataset, list[int]]:
    policy = CleanPolicy(policy)
    if len(ds) == 0:
        raise ValueError("cannot clean an empty dataset")
    if policy is CleanPolicy.HASH_DEDUP:
        seen: set[int] = set()
        removed = []
        for i, s in enumerate(ds.samples):
            key = payload_hash(s.h)
            if key in seen:
                removed.append(i)
            seen.add(key)
    else:
        powers = np.array([np.sum(np.abs(s.h.astype(np.complex128)) ** 2) for s in ds.samples])
        removed = outlier_indices(powers, policy, threshold)
    drop = set(removed)
    kept = tuple(s for i, s in enumerate(ds.samples) if i not in drop)
    return dataclasses.replace(ds, samples=kept), removed


class AugmentKind(str, enum.Enum):
    NOISE = "noise"
    TIME_SHIFT = "time_shift"
    FREQ_OFFSET = "freq_offset"


def augment_classic(sample: ChannelSample, kind: AugmentKind | str, param: float, seed: int = 0) -> ChannelSample:
    kind = AugmentKind(kind)
    h = sample.h.astype(np.complex128)
    if kind is AugmentKind.NOISE:
        if param < 0:
            raise ValueError("noise variance must be >= 0")
        if param > 0:
            rng = np.random.default_rng(_seed_sequence(seed))
            h = normalize_power(h + complex_noise(rng, h.shape, param))
    elif kind is AugmentKind.TIME_SHIFT:
        h = h * np.exp(-2j * np.pi * np.arange(N_SC) * param / N_SC)
    else:
        h = np.roll(h, int(param), axis=1)
    meta = {**sample.meta, "augmented": kind.value, "augment_param": float(param)}
    return dataclasses.replace(sample, h=h.astype(np.complex64), meta=meta)
