import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wirehallu import channel_data as cd
from wirehallu import validators as val
from wirehallu.gan_augment import Discriminator

LOS_SC = cd.ScenarioClass.from_key("los-low-static")
NLOS_SC = cd.ScenarioClass.from_key("nlos-low-static")
# one tap in nanoseconds, used to place hand-built paths
TAP_NS = cd.TAP_DURATION_S * 1e9


def binomial_bound(p: float, n: int) -> float:
    """p plus three binomial standard deviations."""
    return p + 3 * math.sqrt(p * (1 - p) / n)


def flat(value=1.0):
    return np.full((cd.N_ANT, cd.N_SC), value, dtype=np.complex64)


def two_taps(lag: int):
    """Equal-power taps at 0 and ``lag`` on every antenna."""
    k = np.arange(cd.N_SC)
    h = (1 + np.exp(-2j * np.pi * k * lag / cd.N_SC)) / np.sqrt(2)
    return np.tile(h, (cd.N_ANT, 1)).astype(np.complex64)


CFG = val.ValidatorConfig(realism_threshold=0.5, delay_boundary_s=100e-9)


# ---------------------------------------------------------------------------
# config


def test_config_invariants(tmp_path):
    with pytest.raises(ValueError):
        val.ValidatorConfig(p_lo=1.0)
    with pytest.raises(ValueError):
        val.ValidatorConfig(p_hi=0.9)
    with pytest.raises(ValueError):
        val.ValidatorConfig(realism_threshold=1.0)
    assert val.ValidatorConfig.load(CFG.save(tmp_path / "v.json")) == CFG


# ---------------------------------------------------------------------------
# constraint check


def test_unit_power_channel_passes():
    assert val.check_constraints(cd.generate_channel(NLOS_SC, 4).h, CFG) == []
    assert val.check_constraints(flat(), CFG) == []


def test_scaled_by_ten_is_power_flag():
    flags = val.check_constraints(10 * flat(), CFG)
    assert [f.type for f in flags] == [val.FlagType.CONSTRAINT]
    assert flags[0].value == pytest.approx(100.0)


@pytest.mark.parametrize("amp, flagged", [(0.49, True), (0.51, False), (1.99, False), (2.01, True)])
def test_power_bounds_edges(amp, flagged):
    # amplitude a gives power a^2 against bounds [0.25, 4]
    assert bool(val.check_constraints(flat(amp), CFG)) is flagged


def test_magnitude_cap():
    h = np.zeros((cd.N_ANT, cd.N_SC), np.complex64)
    h[0, 0] = 12.0  # total power 144 / 256 is inside the bounds
    flags = val.check_constraints(h, CFG)
    assert len(flags) == 1 and "cap" in flags[0].detail and flags[0].value == pytest.approx(12.0)


def test_nan_is_single_non_finite_flag():
    h = flat().copy()
    h[3, 7] = np.nan
    h[1, 1] = np.inf
    flags = val.check_constraints(h, CFG)
    assert len(flags) == 1 and flags[0].value == 2.0


@given(st.floats(0.3, 0.49), st.floats(2.0, 3.0))
def test_monotone_severity(amp_lo, widen):
    # amplitude just passing tight bounds passes any wider bounds
    tight = val.ValidatorConfig(p_lo=amp_lo**2 * 0.99, p_hi=4.0)
    wide = val.ValidatorConfig(p_lo=tight.p_lo / widen, p_hi=tight.p_hi * widen)
    h = flat(amp_lo)
    assert val.check_constraints(h, tight) == []
    assert val.check_constraints(h, wide) == []


# ---------------------------------------------------------------------------
# context check


def test_single_path_declared_los_passes():
    assert val.check_context(flat(), LOS_SC, CFG) == []
    assert [f.type for f in val.check_context(flat(), NLOS_SC, CFG)] == [val.FlagType.CONTEXT]


def test_wide_two_tap_channel_is_nlos_like():
    # taps at 0 and 8 are about 1.04 us apart, spread half that
    h = two_taps(8)
    assert cd.rms_delay_spread(h) == pytest.approx(4 * TAP_NS * 1e-9, rel=1e-5)
    assert val.check_context(h, NLOS_SC, CFG) == []
    assert [f.type for f in val.check_context(h, LOS_SC, CFG)] == [val.FlagType.CONTEXT]


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.sampled_from(cd.ALL_SCENARIOS))
def test_context_is_scale_invariant(seed, c, declared):
    h = cd.generate_channel(cd.ALL_SCENARIOS[seed % 12], seed).h
    a = [f.type for f in val.check_context(h, declared, CFG)]
    b = [f.type for f in val.check_context(h * np.float32(c), declared, CFG)]
    assert a == b


def test_context_needs_calibration():
    with pytest.raises(ValueError, match="calibrated"):
        val.check_context(flat(), LOS_SC, val.ValidatorConfig())


def test_delay_boundary_is_geometric_midpoint():
    train = [cd.ChannelSample(flat(), LOS_SC, 0), cd.ChannelSample(two_taps(2), LOS_SC, 1)]
    train += [cd.ChannelSample(two_taps(8), NLOS_SC, 2)]
    # LoS spreads {0, 1 tap} have median 0.5 tap; the NLoS spread is 4 taps
    expected = math.sqrt(0.5 * 4) * TAP_NS * 1e-9
    assert val.calibrate_delay_boundary(train) == pytest.approx(expected, rel=1e-5)
    with pytest.raises(ValueError):
        val.calibrate_delay_boundary(train[:2])


# ---------------------------------------------------------------------------
# fabricated check and aggregation (untrained discriminator)


@pytest.fixture(scope="module")
def disc():
    import torch

    torch.manual_seed(0)
    return Discriminator(width=4).eval()


def test_fabricated_needs_discriminator_and_threshold(disc):
    with pytest.raises(val.MissingDiscriminatorError):
        val.check_fabricated(flat(), None, CFG)
    with pytest.raises(ValueError, match="calibrated"):
        val.check_fabricated(flat(), disc, val.ValidatorConfig())


@given(st.integers(0, 10_000), st.floats(1e-2, 1e2))
def test_fabricated_score_ignores_scale(seed, c):
    import torch

    torch.manual_seed(0)
    d = Discriminator(width=4).eval()
    h = cd.generate_channel(cd.ALL_SCENARIOS[seed % 12], seed).h
    s = val.fabricated_scores(np.stack([h, h * np.float32(c)]), d)
    assert s[0] == pytest.approx(s[1], abs=1e-5)


def test_fabricated_is_deterministic_and_skips_nan(disc):
    h = cd.generate_channel(NLOS_SC, 9).h
    assert val.check_fabricated(h, disc, CFG) == val.check_fabricated(h, disc, CFG)
    bad = h.copy()
    bad[0, 0] = np.nan
    assert np.isnan(val.fabricated_scores(bad[None], disc)[0])
    assert val.check_fabricated(bad, disc, CFG) == []


@given(st.integers(0, 2**31 - 1))
def test_validate_never_mutates(seed):
    rng = np.random.default_rng(seed)
    h = (rng.standard_normal((2, cd.N_ANT, cd.N_SC)) + 1j * rng.standard_normal((2, cd.N_ANT, cd.N_SC))).astype(
        np.complex64
    )
    before = h.copy()
    val.validate_batch(h, [LOS_SC, NLOS_SC], None, CFG)
    np.testing.assert_array_equal(h, before)


def test_validate_without_discriminator_skips_fabricated():
    rep = val.validate(10 * flat(), NLOS_SC, None, CFG)
    assert rep.types() == {val.FlagType.CONSTRAINT, val.FlagType.CONTEXT}
    assert not rep.passed
    assert "realism" not in rep.measured


def test_hallucination_rate_examples(disc):
    h = np.stack([two_taps(8)] * 4)
    h[1, 2, 2] = np.nan
    summary = val.hallucination_rate(h, [NLOS_SC] * 4, None, CFG)
    assert summary.rate == 0.25
    assert summary.by_type[val.FlagType.CONSTRAINT] == 0.25
    assert summary.by_type[val.FlagType.CONTEXT] == 0.0
    all_nan = np.full((3, cd.N_ANT, cd.N_SC), np.nan, np.complex64)
    assert val.hallucination_rate(all_nan, [LOS_SC] * 3, disc, CFG).rate == 1.0
    with pytest.raises(ValueError):
        val.hallucination_rate(h, [NLOS_SC] * 3, None, CFG)
    with pytest.raises(ValueError):
        val.hallucination_rate(h[:0], [], None, CFG)


def test_report_log_round_trip(tmp_path):
    h = np.stack([flat(), 10 * flat(), two_taps(8)])
    reps = val.validate_batch(h, [LOS_SC, LOS_SC, LOS_SC], None, CFG)
    path = val.write_report_log(tmp_path / "log.jsonl", reps, ids=["a", "b", "c"])
    assert len(path.read_text().splitlines()) == 3
    back = val.read_report_log(path)
    assert [i for i, _ in back] == ["a", "b", "c"]
    assert [r for _, r in back] == reps


# ---------------------------------------------------------------------------
# calibrated against the seed-0 discriminator


def fresh_samples(n: int, offset: int) -> list[cd.ChannelSample]:
    return [cd.generate_channel(cd.ALL_SCENARIOS[i % 12], 500_000 + offset + i) for i in range(n)]


@pytest.mark.slow
def test_calibrated_false_positive_rates(seed0):
    clean = fresh_samples(500, 0)
    h = np.stack([s.h for s in clean])
    summary = val.hallucination_rate(h, [s.scenario for s in clean], seed0.discriminator, seed0.validator)
    bound = binomial_bound(0.05, 500)
    for kind in val.FlagType:
        assert summary.by_type[kind] <= bound, kind


@pytest.mark.slow
def test_uniform_random_matrix_is_fabricated(seed0, rng):
    u = (rng.uniform(-1, 1, (200, cd.N_ANT, cd.N_SC)) + 1j * rng.uniform(-1, 1, (200, cd.N_ANT, cd.N_SC))).astype(
        np.complex64
    )
    reps = val.validate_batch(u, [NLOS_SC] * 200, seed0.discriminator, seed0.validator)
    rate = np.mean([val.FlagType.FABRICATED in r.types() for r in reps])
    assert rate >= 0.9


@pytest.mark.slow
def test_nlos_declared_los_is_flagged(seed0):
    nlos = [s for s in fresh_samples(1200, 7) if s.scenario.environment is cd.Environment.NLOS]
    flagged = [bool(val.check_context(s.h, LOS_SC, seed0.validator)) for s in nlos]
    assert np.mean(flagged) >= 0.9
