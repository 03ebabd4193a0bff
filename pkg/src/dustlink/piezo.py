"""Implant transducer physics.

A small piezoceramic transducer shows two resonances: a low-impedance
series resonance and a high-impedance parallel resonance. At either
resonance the element is purely resistive and reduces to a Thevenin
source v_source behind a resistance, which is all the reflection math
needs. The acoustic reflection coefficient (gamma) is normalized to
[0, 1]: 1 at a short-circuited terminal pair under parallel-resonance
drive, 0 at open circuit. The receive chain applies a separate
backscatter-efficiency scalar, so only relative gamma matters here.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

# Programmable unit-current limits of the uplink modulator's current DAC.
IDAC_MIN_UNIT_A = 4e-6
IDAC_MAX_UNIT_A = 40e-6
IDAC_MAX_CODE = 15


class ResonanceMode(enum.Enum):
    SERIES = "series"
    PARALLEL = "parallel"


@dataclass(frozen=True)
class PiezoModel:
    """Two-resonance transducer model.

    f_series / f_parallel are the series and parallel resonant
    frequencies; z_thevenin_series / z_thevenin_parallel the purely
    resistive impedances there; v_source the open-circuit drive
    amplitude at the operating resonance.
    """

    f_series: float = 1.82e6
    f_parallel: float = 2.00e6
    z_thevenin_series: float = 2e3
    z_thevenin_parallel: float = 20e3
    v_source: float = 1.0

    def __post_init__(self):
        if not (self.f_series > 0 and self.f_parallel > 0):
            raise ConfigurationError("resonance frequencies must be positive")
        if not self.f_series < self.f_parallel:
            raise ConfigurationError(
                f"f_series ({self.f_series}) must be below f_parallel ({self.f_parallel})")
        if not (self.z_thevenin_series > 0 and self.z_thevenin_parallel > 0):
            raise ConfigurationError("Thevenin resistances must be positive")
        if not self.z_thevenin_series < self.z_thevenin_parallel:
            raise ConfigurationError(
                "series-resonance resistance must be below the parallel-resonance one")
        if not self.v_source > 0:
            raise ConfigurationError("v_source must be positive")


@dataclass(frozen=True)
class IdacSetting:
    """Current-DAC operating point: unit source current and enabled-source count."""

    unit_current: float
    code: int

    def __post_init__(self):
        if not IDAC_MIN_UNIT_A <= self.unit_current <= IDAC_MAX_UNIT_A:
            raise ConfigurationError(
                f"unit_current {self.unit_current} outside "
                f"[{IDAC_MIN_UNIT_A}, {IDAC_MAX_UNIT_A}] A")
        if not 0 <= int(self.code) <= IDAC_MAX_CODE:
            raise ConfigurationError(f"code {self.code} outside 0..{IDAC_MAX_CODE}")


def gamma_from_termination(piezo: PiezoModel, z_e: float, mode: ResonanceMode) -> float:
    """Reflection coefficient for a resistive termination z_e.

    Parallel-resonance drive divides the series-resonance resistance by
    (z_e + that resistance); series-resonance drive divides z_e by
    (z_e + the parallel-resonance resistance). z_e = inf marks an open
    circuit.
    """
    if z_e < 0:
        raise ConfigurationError(f"termination must be >= 0, got {z_e}")
    if mode is ResonanceMode.PARALLEL:
        if math.isinf(z_e):
            return 0.0
        return piezo.z_thevenin_series / (z_e + piezo.z_thevenin_series)
    if mode is ResonanceMode.SERIES:
        if math.isinf(z_e):
            return 1.0
        return z_e / (z_e + piezo.z_thevenin_parallel)
    raise TypeError(f"mode must be a ResonanceMode, got {mode!r}")


def gamma_from_code_value(piezo: PiezoModel, unit_current: float, code_value: float) -> float:
    """Linear gamma map for a (possibly fractional) I-DAC code level.

    The DAC pulls code*unit_current through the terminals; at parallel
    resonance the reflected fraction is proportional to the voltage
    pulled off the source, giving gamma = code*I*Z_p/V clamped to [0, 1].
    """
    if code_value < 0:
        raise ConfigurationError(f"code value must be >= 0, got {code_value}")
    raw = code_value * unit_current * piezo.z_thevenin_parallel / piezo.v_source
    return min(max(raw, 0.0), 1.0)


def gamma_from_idac(piezo: PiezoModel, setting: IdacSetting) -> float:
    """Reflection coefficient for an integer I-DAC code (parallel-resonance drive)."""
    return gamma_from_code_value(piezo, setting.unit_current, float(setting.code))


def idac_clamps(piezo: PiezoModel, unit_current: float, code_value: float) -> bool:
    """True when the linear gamma map saturates for this code."""
    return code_value * unit_current * piezo.z_thevenin_parallel / piezo.v_source > 1.0


def _equivalent_circuit(piezo: PiezoModel):
    """Fit a single-motional-branch equivalent circuit to the two resonances.

    Solves for (r_m, l_m, c_m, c_0) such that the input impedance is
    exactly real with the prescribed magnitude at both resonance
    frequencies. Closed form:

      c_0^2 = (z_p - z_s) / (z_s z_p (z_p w_p^2 - z_s w_s^2))
      r_m   = z_s / (1 + (w_s c_0 z_s)^2)
      x(w_s) = w_s c_0 r_m z_s,  x(w_p) = w_p c_0 r_m z_p
      l_m, c_m from the two linear reactance conditions.
    """
    ws = 2 * math.pi * piezo.f_series
    wp = 2 * math.pi * piezo.f_parallel
    zs = piezo.z_thevenin_series
    zp = piezo.z_thevenin_parallel
    c0 = math.sqrt((zp - zs) / (zs * zp * (zp * wp**2 - zs * ws**2)))
    rm = zs / (1 + (ws * c0 * zs) ** 2)
    xs = ws * c0 * rm * zs
    xp = wp * c0 * rm * zp
    # ws*l - (1/c)/ws = xs ; wp*l - (1/c)/wp = xp
    lm = (xp * wp - xs * ws) / (wp**2 - ws**2)
    inv_cm = ws * (ws * lm - xs)
    return rm, lm, 1.0 / inv_cm, c0


def impedance_at(piezo: PiezoModel, f) -> complex:
    """Terminal impedance of the fitted equivalent circuit at frequency f.

    Exactly resistive with magnitude z_thevenin_series at f_series and
    z_thevenin_parallel at f_parallel; |Z| rises monotonically between
    the two resonances. Accepts a scalar or an array of frequencies.
    """
    f_arr = np.asarray(f, dtype=np.float64)
    if np.any(f_arr <= 0):
        raise ConfigurationError("frequency must be > 0")
    rm, lm, cm, c0 = _equivalent_circuit(piezo)
    w = 2 * np.pi * f_arr
    z_motional = rm + 1j * (w * lm - 1.0 / (w * cm))
    y = 1j * w * c0 + 1.0 / z_motional
    z = 1.0 / y
    if np.isscalar(f) or f_arr.ndim == 0:
        return complex(z)
    return z
