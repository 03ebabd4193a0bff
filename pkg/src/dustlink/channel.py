"""Acoustic propagation between the external transducer and the implants.

Single-path model: carrier synthesis from a pulse description, one-way
delay + frequency-dependent attenuation, reflection against a
piecewise-constant gamma trace, superposition of concurrent echoes, and
receiver-side additive white Gaussian noise. No multipath (the measured
geometry uses an acoustic absorber), no beam pattern.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .waveform import Waveform

MIN_SAMPLES_PER_CYCLE = 16
DEFAULT_SAMPLES_PER_CYCLE = 64

# 8-tap windowed-sinc kernel for sub-sample delays.
_SINC_TAPS = 8


@dataclass(frozen=True)
class ChannelConfig:
    """Physical channel parameters.

    attenuation is one-way, in dB/cm/MHz (0.25 is the canola-oil /
    soft-tissue regime); backscatter_efficiency maps a unit reflection
    coefficient to received amplitude after the return trip.
    """

    depth: float = 0.090
    sound_speed: float = 1480.0
    attenuation: float = 0.25
    carrier_freq: float = 2.0e6
    noise_rms: float = 0.0
    backscatter_efficiency: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.depth > 0:
            raise ConfigurationError("depth must be > 0")
        if not self.sound_speed > 0:
            raise ConfigurationError("sound_speed must be > 0")
        if self.attenuation < 0:
            raise ConfigurationError("attenuation must be >= 0")
        if not self.carrier_freq > 0:
            raise ConfigurationError("carrier_freq must be > 0")
        if self.noise_rms < 0:
            raise ConfigurationError("noise_rms must be >= 0")

    @property
    def tof(self) -> float:
        """One-way time of flight."""
        return self.depth / self.sound_speed

    def one_way_amplitude_factor(self) -> float:
        loss_db = self.attenuation * (self.depth * 100.0) * (self.carrier_freq / 1e6)
        return 10.0 ** (-loss_db / 20.0)


@dataclass
class GammaTrace:
    """Piecewise-constant reflection coefficient over time.

    edges has n+1 ascending times; values[i] holds on [edges[i],
    edges[i+1]). Outside the span gamma is undefined (callers must
    build traces covering the incident wave). clamp_count records how
    many modulator codes saturated the linear gamma map.
    """

    edges: np.ndarray
    values: np.ndarray
    clamp_count: int = 0

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.edges.size != self.values.size + 1:
            raise ConfigurationError("gamma trace needs len(edges) == len(values)+1")
        if self.values.size and (np.min(self.values) < 0 or np.max(self.values) > 1):
            raise ConfigurationError("gamma values must lie in [0, 1]")
        if np.any(np.diff(self.edges) <= 0):
            raise ConfigurationError("gamma trace edges must be strictly increasing")

    @property
    def t_start(self) -> float:
        return float(self.edges[0])

    @property
    def t_end(self) -> float:
        return float(self.edges[-1])

    def is_zero(self) -> bool:
        return bool(np.all(self.values == 0.0))

    def sample(self, times: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.edges, times, side="right") - 1
        idx = np.clip(idx, 0, self.values.size - 1)
        out = self.values[idx]
        return np.where((times >= self.edges[0]) & (times <= self.edges[-1]), out, 0.0)


def constant_gamma(value: float, t_start: float, t_end: float) -> GammaTrace:
    return GammaTrace(np.array([t_start, t_end]), np.array([value]))


def synthesize_tx(pulse, cfg: ChannelConfig, sim_rate: float) -> Waveform:
    """Render a pulse description to a carrier waveform.

    The pulse supplies per-cycle amplitudes; the carrier is a sinusoid
    at cfg.carrier_freq whose phase restarts at the pulse t0. sim_rate
    must be an integer multiple (>= 16x) of the carrier so that segment
    boundaries land exactly on cycle boundaries.
    """
    spc = samples_per_cycle(cfg.carrier_freq, sim_rate)
    cycle_amps = pulse.cycle_amplitudes()
    n_cycles = cycle_amps.size
    if n_cycles == 0:
        return Waveform(np.zeros(0), sim_rate, pulse.t0)
    one_cycle = np.sin(2 * np.pi * np.arange(spc) / spc)
    carrier = np.tile(one_cycle, n_cycles)
    env = np.repeat(cycle_amps, spc)
    return Waveform(carrier * env, sim_rate, pulse.t0)


def samples_per_cycle(carrier_freq: float, sim_rate: float) -> int:
    """Validate and return the integer oversampling ratio."""
    if sim_rate < MIN_SAMPLES_PER_CYCLE * carrier_freq:
        raise ConfigurationError(
            f"sim_rate {sim_rate} below {MIN_SAMPLES_PER_CYCLE}x carrier "
            f"({carrier_freq}); envelopes would alias")
    spc = sim_rate / carrier_freq
    if abs(spc - round(spc)) > 1e-9:
        raise ConfigurationError(
            f"sim_rate must be an integer multiple of the carrier, got ratio {spc}")
    return int(round(spc))


def _fractional_delay_kernel(mu: float, taps: int = _SINC_TAPS) -> np.ndarray:
    """Hann-windowed sinc interpolation kernel for a delay of mu samples (0 <= mu < 1)."""
    half = taps // 2
    n = np.arange(-half + 1, half + 1, dtype=np.float64)  # taps points around 0
    x = n - mu
    kernel = np.sinc(x)
    window = 0.5 + 0.5 * np.cos(np.pi * x / half)
    kernel = kernel * np.where(np.abs(x) < half, window, 0.0)
    return kernel / np.sum(kernel)


def propagate(wave: Waveform, cfg: ChannelConfig) -> Waveform:
    """One-way trip through the channel: delay by ToF, scale by the path loss.

    The integer part of the delay moves t0 along the grid; the
    fractional remainder is applied with a windowed-sinc resampler so
    the output stays on the global sample grid.
    """
    scale = cfg.one_way_amplitude_factor()
    if len(wave) == 0:
        return Waveform(wave.samples.copy(), wave.sample_rate, wave.t0 + cfg.tof)
    delay_samples = cfg.tof * wave.sample_rate
    n_whole = int(np.floor(delay_samples))
    mu = delay_samples - n_whole
    if mu < 1e-12:
        out = wave.samples * scale
    else:
        # y[k] = x(k - mu): kernel[j] weights x[k - (j - half + 1)]
        kernel = _fractional_delay_kernel(mu)
        half = _SINC_TAPS // 2
        full = np.convolve(wave.samples, kernel, mode="full")
        out = full[half - 1: half + len(wave)] * scale
    return Waveform(out, wave.sample_rate, wave.t0 + n_whole / wave.sample_rate)


def backscatter(incident: Waveform, gamma_trace: GammaTrace,
                cfg: ChannelConfig) -> Waveform:
    """Reflected wave: incident times gamma(t) times the backscatter efficiency."""
    if len(incident) == 0:
        return Waveform(incident.samples.copy(), incident.sample_rate, incident.t0)
    t = incident.times()
    span_ok = (gamma_trace.t_start <= incident.t0 + 1e-12 and
               gamma_trace.t_end >= incident.t_end - incident.dt - 1e-12)
    if not span_ok:
        raise ConfigurationError(
            f"gamma trace [{gamma_trace.t_start}, {gamma_trace.t_end}] does not span "
            f"the incident wave [{incident.t0}, {incident.t_end}]")
    gamma = gamma_trace.sample(t)
    return Waveform(incident.samples * gamma * cfg.backscatter_efficiency,
                    incident.sample_rate, incident.t0)


def superpose(waves) -> Waveform:
    """Sample-aligned sum over the union time span, zero-padded outside each input."""
    waves = list(waves)
    if not waves:
        return Waveform(np.zeros(0), 1.0, 0.0)
    sr = waves[0].sample_rate
    for w in waves[1:]:
        if abs(w.sample_rate - sr) > 1e-9 * sr:
            raise ConfigurationError(
                f"superpose needs one sample rate, got {sr} and {w.sample_rate}")
    t0 = min(w.t0 for w in waves)
    offsets = []
    for w in waves:
        off = (w.t0 - t0) * sr
        if abs(off - round(off)) > 1e-6:
            raise ConfigurationError("waveform grids are not sample-aligned")
        offsets.append(int(round(off)))
    n = max(off + len(w) for off, w in zip(offsets, waves)) if waves else 0
    out = np.zeros(n)
    for off, w in zip(offsets, waves):
        out[off:off + len(w)] += w.samples
    return Waveform(out, sr, t0)


def add_noise(wave: Waveform, cfg: ChannelConfig, rng: np.random.Generator = None) -> Waveform:
    """Add zero-mean white Gaussian noise of RMS cfg.noise_rms.

    Deterministic: without an explicit generator the stream is seeded
    from cfg.rng_seed, so equal seeds give bit-identical output.
    """
    if cfg.noise_rms == 0.0:
        return Waveform(wave.samples.copy(), wave.sample_rate, wave.t0)
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    noise = rng.normal(0.0, cfg.noise_rms, len(wave))
    return Waveform(wave.samples + noise, wave.sample_rate, wave.t0)
