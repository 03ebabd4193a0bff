"""Transducer physics: reflection coefficient maps and the impedance fit."""

import math

import numpy as np
import pytest

from dustlink.errors import ConfigurationError
from dustlink.piezo import (IdacSetting, PiezoModel, ResonanceMode,
                            gamma_from_code_value, gamma_from_idac,
                            gamma_from_termination, idac_clamps, impedance_at)


def brute_force_loop_gamma(v_source, z_th, current):
    """Independent oracle: solve the source/resistance loop directly.

    The DAC pulls `current` through the terminals, the terminal voltage
    drops by current * z_th, and the reflected fraction is the voltage
    pulled off the source normalized to the source.
    """
    v_pz = v_source - current * z_th
    return (v_source - v_pz) / v_source


class TestGammaFromTermination:
    def test_short_circuit_parallel(self):
        p = PiezoModel()
        assert gamma_from_termination(p, 0.0, ResonanceMode.PARALLEL) == 1.0

    def test_open_circuit_parallel(self):
        p = PiezoModel()
        assert gamma_from_termination(p, math.inf, ResonanceMode.PARALLEL) == 0.0

    def test_matched_termination_halves(self):
        p = PiezoModel()
        g = gamma_from_termination(p, p.z_thevenin_series, ResonanceMode.PARALLEL)
        assert g == pytest.approx(0.5)

    def test_series_mode_endpoints(self):
        p = PiezoModel()
        assert gamma_from_termination(p, 0.0, ResonanceMode.SERIES) == 0.0
        assert gamma_from_termination(p, math.inf, ResonanceMode.SERIES) == 1.0

    def test_negative_termination_rejected(self):
        with pytest.raises(ConfigurationError):
            gamma_from_termination(PiezoModel(), -1.0, ResonanceMode.PARALLEL)

    def test_monotonicity(self):
        # decreasing in z_e at parallel resonance, increasing at series
        p = PiezoModel()
        z = np.logspace(0, 7, 50)
        gp = [gamma_from_termination(p, zi, ResonanceMode.PARALLEL) for zi in z]
        gs = [gamma_from_termination(p, zi, ResonanceMode.SERIES) for zi in z]
        assert np.all(np.diff(gp) < 0)
        assert np.all(np.diff(gs) > 0)


class TestGammaFromIdac:
    def test_code_zero_is_zero(self):
        p = PiezoModel()
        assert gamma_from_idac(p, IdacSetting(10e-6, 0)) == 0.0

    def test_hand_evaluated_point(self):
        # 15 * 10 uA * 5 kOhm / 1.0 V = 0.75
        p = PiezoModel(z_thevenin_series=1e3, z_thevenin_parallel=5e3, v_source=1.0)
        g = gamma_from_idac(p, IdacSetting(10e-6, 15))
        assert g == pytest.approx(0.75)
        oracle = brute_force_loop_gamma(1.0, 5e3, 15 * 10e-6)
        assert g == pytest.approx(oracle)

    def test_linear_in_code(self):
        p = PiezoModel(v_source=2.0)
        gammas = [gamma_from_idac(p, IdacSetting(4e-6, c)) for c in range(16)]
        steps = np.diff(gammas)
        assert np.allclose(steps, steps[0])
        # affine with zero intercept: every point sits on code * step
        fit = np.array(gammas) - np.arange(16) * steps[0]
        assert np.max(np.abs(fit)) < 1e-15

    def test_clamps_at_one(self):
        p = PiezoModel()  # v_source 1.0: 15 * 4 uA * 20 kOhm = 1.2
        g = gamma_from_idac(p, IdacSetting(4e-6, 15))
        assert g == 1.0
        assert idac_clamps(p, 4e-6, 15)
        assert not idac_clamps(p, 4e-6, 10)

    def test_max_code_never_exceeds_one(self):
        p = PiezoModel()
        g = gamma_from_idac(p, IdacSetting(40e-6, 15))
        assert g <= 1.0

    def test_fractional_code_values(self):
        p = PiezoModel(v_source=1.6)
        g_half = gamma_from_code_value(p, 4e-6, 7.5)
        g_7 = gamma_from_code_value(p, 4e-6, 7.0)
        g_8 = gamma_from_code_value(p, 4e-6, 8.0)
        assert g_half == pytest.approx((g_7 + g_8) / 2)

    def test_setting_validation(self):
        with pytest.raises(ConfigurationError):
            IdacSetting(3e-6, 0)     # below 4 uA
        with pytest.raises(ConfigurationError):
            IdacSetting(50e-6, 0)    # above 40 uA
        with pytest.raises(ConfigurationError):
            IdacSetting(10e-6, 16)   # code too large


class TestImpedanceFit:
    def test_series_resonance_point(self):
        p = PiezoModel()
        z = impedance_at(p, p.f_series)
        assert abs(z) == pytest.approx(p.z_thevenin_series, rel=1e-9)
        assert abs(z.imag) < 1e-6 * abs(z)

    def test_parallel_resonance_point(self):
        p = PiezoModel()
        z = impedance_at(p, p.f_parallel)
        assert abs(z) == pytest.approx(p.z_thevenin_parallel, rel=1e-9)
        assert abs(z.imag) < 1e-6 * abs(z)

    def test_monotone_rise_between_resonances(self):
        # numeric sweep oracle: |Z| rises from f_s to f_p
        p = PiezoModel()
        f = np.linspace(p.f_series, p.f_parallel, 5001)
        mags = np.abs(impedance_at(p, f))
        assert np.all(np.diff(mags) > 0)

    def test_resonances_bound_the_interresonance_band(self):
        # adequacy criterion of the single-branch fit: the two pinned
        # resonance points are the extremes of the band between them
        p = PiezoModel()
        f = np.linspace(p.f_series, p.f_parallel, 40001)
        mags = np.abs(impedance_at(p, f))
        assert mags.min() == pytest.approx(p.z_thevenin_series, rel=1e-6)
        assert mags.max() == pytest.approx(p.z_thevenin_parallel, rel=1e-6)
        assert np.argmin(mags) == 0
        assert np.argmax(mags) == mags.size - 1

    def test_rejects_nonpositive_frequency(self):
        with pytest.raises(ConfigurationError):
            impedance_at(PiezoModel(), 0.0)

    def test_other_parameter_sets(self):
        p = PiezoModel(f_series=1.0e6, f_parallel=1.3e6,
                       z_thevenin_series=500.0, z_thevenin_parallel=80e3,
                       v_source=0.5)
        assert abs(impedance_at(p, p.f_series)) == pytest.approx(500.0, rel=1e-9)
        assert abs(impedance_at(p, p.f_parallel)) == pytest.approx(80e3, rel=1e-9)


class TestModelValidation:
    def test_resonance_order(self):
        with pytest.raises(ConfigurationError):
            PiezoModel(f_series=2.1e6, f_parallel=2.0e6)

    def test_resistance_order(self):
        with pytest.raises(ConfigurationError):
            PiezoModel(z_thevenin_series=30e3, z_thevenin_parallel=20e3)

    def test_positive_source(self):
        with pytest.raises(ConfigurationError):
            PiezoModel(v_source=0.0)
