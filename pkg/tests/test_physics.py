import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrtherm.constants import K_B
from rrtherm.physics import (
    LikelihoodModel,
    TrapConfig,
    lambert_w0,
    loading_tail,
    multi_atom_likelihood,
    outcome_distribution,
    outcome_table,
    recapture_curve,
    recapture_fraction,
    single_atom_likelihood,
)

DEEP_TRAP = TrapConfig(depth=K_B * 290e-6, waist=1.971e-6)


def bisect_lambert(x, tol=1e-14):
    """Independent root of w e^w = x by plain bisection."""
    if x == 0:
        return 0.0
    lo, hi = 0.0, 1.0
    while hi * math.exp(hi) < x:
        lo, hi = hi, hi * 2
    while hi - lo > tol * max(1.0, hi):
        mid = (lo + hi) / 2
        if mid * math.exp(mid) < x:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


class TestLambertW:
    def test_omega_constant(self):
        assert lambert_w0(1.0) == pytest.approx(0.5671432904097838, abs=1e-13)

    def test_zero(self):
        assert lambert_w0(0.0) == 0.0

    def test_against_bisection_oracle(self):
        xs = np.logspace(-9, 6, 200)
        ws = lambert_w0(xs)
        for x, w in zip(xs, ws):
            assert w == pytest.approx(bisect_lambert(x), rel=1e-9)

    def test_residual_bound(self):
        xs = np.concatenate([[0.0], np.logspace(-12, 6, 500)])
        ws = lambert_w0(xs)
        resid = np.abs(ws * np.exp(ws) - xs)
        assert np.all(resid <= 1e-12 * np.maximum(1.0, xs))

    def test_huge_argument_stays_finite(self):
        w = lambert_w0(1e300)
        assert math.isfinite(w)
        assert w * math.exp(w) == pytest.approx(1e300, rel=1e-10)

    def test_scalar_in_scalar_out(self):
        assert isinstance(lambert_w0(2.5), float)
        assert lambert_w0(np.array([2.5])).shape == (1,)

    def test_rejects_negative_and_nan(self):
        with pytest.raises(ValueError):
            lambert_w0(-0.5)
        with pytest.raises(ValueError):
            lambert_w0(float("nan"))


class TestRecaptureFraction:
    def test_zero_time_is_exactly_one(self):
        assert recapture_fraction(DEEP_TRAP, 40e-6, 0.0) == 1.0

    def test_long_release_loses_everything(self):
        # decay goes as W(s)/s, so it is slow but unbounded
        assert recapture_fraction(DEEP_TRAP, 40e-6, 10e-3) < 1e-3
        assert recapture_fraction(DEEP_TRAP, 40e-6, 1.0) < 1e-6

    def test_monotone_in_time(self):
        times = np.arange(0, 200e-6, 2e-6)
        fs = [recapture_fraction(DEEP_TRAP, 40e-6, t) for t in times]
        assert all(a >= b for a, b in zip(fs, fs[1:]))

    def test_monotone_in_temperature(self):
        temps = np.linspace(5e-6, 125e-6, 40)
        fs = recapture_curve(DEEP_TRAP, temps, 20e-6)
        assert np.all(np.diff(fs) < 0)

    @given(
        gamma=st.floats(0.1, 10.0),
        temp_uk=st.floats(1.0, 120.0),
        time_us=st.floats(0.5, 150.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_depth_temperature_scale_invariance(self, gamma, temp_uk, time_us):
        # f depends on (U0, T, t) only through U0/T and U0 t^2, so scaling
        # depth and temperature together while shrinking t by sqrt(gamma)
        # must leave it unchanged.
        base = recapture_fraction(DEEP_TRAP, temp_uk * 1e-6, time_us * 1e-6)
        scaled_trap = TrapConfig(
            depth=DEEP_TRAP.depth * gamma,
            waist=DEEP_TRAP.waist,
            mass=DEEP_TRAP.mass,
        )
        scaled = recapture_fraction(
            scaled_trap, gamma * temp_uk * 1e-6, time_us * 1e-6 / math.sqrt(gamma)
        )
        assert scaled == pytest.approx(base, rel=1e-12)

    def test_curve_matches_scalar_path(self):
        temps = np.array([10e-6, 40e-6, 90e-6])
        curve = recapture_curve(DEEP_TRAP, temps, 14e-6)
        for temp, val in zip(temps, curve):
            assert recapture_fraction(DEEP_TRAP, temp, 14e-6) == val

    def test_rejects_bad_domain(self):
        with pytest.raises(ValueError):
            recapture_fraction(DEEP_TRAP, -1e-6, 10e-6)
        with pytest.raises(ValueError):
            recapture_fraction(DEEP_TRAP, 40e-6, -1e-6)


class TestSingleAtomLikelihood:
    def test_outcomes_sum_to_one(self):
        total = sum(
            single_atom_likelihood(DEEP_TRAP, n, 40e-6, 14e-6) for n in (0, 1)
        )
        assert total == pytest.approx(1.0, abs=1e-15)

    def test_rejects_other_outcomes(self):
        with pytest.raises(ValueError):
            single_atom_likelihood(DEEP_TRAP, 2, 40e-6, 14e-6)


def truncated_double_sum(outcome, mean_loading, survival, max_loading=80):
    """Marginal P(n) summed explicitly over the hidden initial atom number."""
    total = 0.0
    for n0 in range(outcome, max_loading + 1):
        p_load = math.exp(-mean_loading) * mean_loading**n0 / math.factorial(n0)
        p_keep = (
            math.comb(n0, outcome)
            * survival**outcome
            * (1.0 - survival) ** (n0 - outcome)
        )
        total += p_load * p_keep
    return total


class TestMultiAtomLikelihood:
    def test_matches_double_sum_oracle(self):
        # Binomial thinning of a Poisson load collapses to Poisson(lambda f);
        # check the closed form against the explicit sum over loading numbers.
        lam, f = 1.65, 0.7
        temp, time = 40e-6, 14e-6
        f = recapture_fraction(DEEP_TRAP, temp, time)
        for n in range(8):
            expected = truncated_double_sum(n, lam, f)
            got = multi_atom_likelihood(DEEP_TRAP, n, temp, time, lam)
            assert got == pytest.approx(expected, abs=1e-10)

    @given(
        lam=st.floats(0.2, 3.0),
        temp_uk=st.floats(5.0, 120.0),
        time_us=st.floats(1.0, 100.0),
        n=st.integers(0, 6),
    )
    @settings(max_examples=40, deadline=None)
    def test_double_sum_property(self, lam, temp_uk, time_us, n):
        f = recapture_fraction(DEEP_TRAP, temp_uk * 1e-6, time_us * 1e-6)
        expected = truncated_double_sum(n, lam, f)
        got = multi_atom_likelihood(DEEP_TRAP, n, temp_uk * 1e-6, time_us * 1e-6, lam)
        assert got == pytest.approx(expected, abs=1e-10)

    def test_rejects_bad_outcome(self):
        with pytest.raises(ValueError):
            multi_atom_likelihood(DEEP_TRAP, -1, 40e-6, 14e-6, 1.65)


class TestLikelihoodModel:
    def test_single_atom_variant(self):
        model = LikelihoodModel(DEEP_TRAP)
        assert not model.multi_atom
        assert model.outcome_count == 2

    def test_multi_atom_defaults_cap(self):
        model = LikelihoodModel(DEEP_TRAP, mean_loading=1.65)
        assert model.atom_cap == 7
        assert model.outcome_count == 8

    def test_cap_on_single_atom_rejected(self):
        with pytest.raises(ValueError):
            LikelihoodModel(DEEP_TRAP, atom_cap=7)

    def test_heavy_loading_needs_larger_cap(self):
        with pytest.raises(ValueError):
            LikelihoodModel(DEEP_TRAP, mean_loading=4.0, atom_cap=7)
        LikelihoodModel(DEEP_TRAP, mean_loading=4.0, atom_cap=14)

    def test_loading_tail_values(self):
        assert loading_tail(1.65, 7) == pytest.approx(3.189e-4, rel=1e-3)
        assert loading_tail(1.88, 7) == pytest.approx(7.418e-4, rel=1e-3)


class TestOutcomeDistribution:
    def test_zero_time_poisson_mass(self):
        model = LikelihoodModel(DEEP_TRAP, mean_loading=1.65, atom_cap=7)
        dist = outcome_distribution(model, 40e-6, 0.0)
        for n, p in enumerate(dist):
            expected = math.exp(-1.65) * 1.65**n / math.factorial(n)
            assert p == pytest.approx(expected, abs=1e-12)
        assert dist.sum() > 0.999

    def test_truncation_never_renormalised(self):
        model = LikelihoodModel(DEEP_TRAP, mean_loading=1.65, atom_cap=7)
        dist = outcome_distribution(model, 40e-6, 5e-6)
        assert dist.sum() < 1.0
        assert dist.sum() > 0.999

    def test_single_atom_rows(self):
        model = LikelihoodModel(DEEP_TRAP)
        temps = np.array([20e-6, 60e-6])
        table = outcome_table(model, temps, 14e-6)
        assert table.shape == (2, 2)
        assert np.allclose(table.sum(axis=0), 1.0)
        assert np.allclose(table[1], recapture_curve(DEEP_TRAP, temps, 14e-6))
