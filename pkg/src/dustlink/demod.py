"""Receive-side demodulation chain.

Recording -> per-pulse segments -> high-pass -> peak/valley envelopes
(cubic spline through per-cycle extrema) -> low-pass -> differential
combining -> end-of-symbol sampling -> k-means decision thresholds ->
level demapping -> BER against a golden reference.

All operations are pure over immutable inputs; per-pulse segments can
be processed independently and merged in pulse order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal as sp_signal
from scipy.interpolate import PchipInterpolator

from . import wire
from .errors import ConfigurationError
from .waveform import Waveform

log = logging.getLogger(__name__)

HPF_CORNER_HZ = 20e3
HPF_ORDER = 4
LPF_CORNER_HZ = 10e6
LPF_ORDER = 2
# Effective zero-phase stopband attenuation; half per pass since the
# filter runs forward and backward.
LPF_STOP_DB_EFFECTIVE = 40.0

KMEANS_MAX_ITER = 100
KMEANS_REL_TOL = 1e-9
SYNC_WINDOW_BITS = 32
SYNC_MIN_CORRELATION = 0.9


@dataclass
class EnvelopeTrace:
    positive: Waveform
    negative: Waveform
    differential: Waveform
    fallback_used: bool = False


@dataclass
class SymbolSchedule:
    """End times of the symbols expected inside one RX gate."""

    end_times: np.ndarray
    carrier_freq: float
    pulse_index: int = 0
    implant_slot: int = 0

    def __post_init__(self):
        self.end_times = np.asarray(self.end_times, dtype=np.float64)
        if np.any(np.diff(self.end_times) <= 0):
            raise ConfigurationError("symbol end times must be strictly increasing")


@dataclass
class SymbolFrame:
    echo_voltages: np.ndarray
    symbol_times: np.ndarray
    source_pulse_index: int = 0
    implant_slot: int = 0

    def __post_init__(self):
        self.echo_voltages = np.asarray(self.echo_voltages, dtype=np.float64)
        self.symbol_times = np.asarray(self.symbol_times, dtype=np.float64)
        if self.echo_voltages.size != self.symbol_times.size:
            raise ConfigurationError("voltages and times must have matching lengths")


@dataclass
class ClusterResult:
    centroids: np.ndarray
    thresholds: np.ndarray
    fallback_used: bool = False


@dataclass
class BERReport:
    bits_compared: int
    bit_errors: int
    ber_point: float
    ber_upper_bound: float
    per_level_confusion: np.ndarray = None
    sync_failed: bool = False
    sync_offset: int = 0

    def as_text(self) -> str:
        lines = [
            f"bits_compared={self.bits_compared}",
            f"bit_errors={self.bit_errors}",
            f"ber_point={self.ber_point!r}",
            f"ber_upper_bound={self.ber_upper_bound!r}",
            f"sync_failed={int(self.sync_failed)}",
            f"sync_offset={self.sync_offset}",
        ]
        if self.per_level_confusion is not None:
            rows = [",".join(str(int(c)) for c in row) for row in self.per_level_confusion]
            lines.append("confusion=" + ";".join(rows))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Segmentation and filtering
# ---------------------------------------------------------------------------

def segment_pulses(recording: Waveform, schedule, t_first_pulse: float = 0.0,
                   max_pulses: int = None):
    """Slice one time-aligned segment per RX gate out of a recording.

    Gates follow the schedule's pulse grid starting at t_first_pulse; a
    partial trailing pulse is discarded. Returns [] with a diagnostic
    when no gate contains any signal energy.
    """
    from .interrogator import rx_gate  # local import avoids a module cycle

    segments = []
    k = 0
    while max_pulses is None or k < max_pulses:
        pulse_start = t_first_pulse + k * schedule.pulse_period
        rx_open, rx_close = rx_gate(schedule, pulse_start)
        if rx_close > recording.t_end + 1e-12:
            break
        if rx_open < recording.t0 - 1e-12:
            k += 1
            continue
        segments.append(recording.slice_time(rx_open, rx_close))
        k += 1
    if segments and all(seg.energy() == 0.0 for seg in segments):
        log.warning("segment_pulses: no energy in any of %d gates; "
                    "schedule/recording mismatch", len(segments))
        return []
    return segments


@lru_cache(maxsize=32)
def _hpf_sos(sample_rate: float, corner: float, order: int):
    if corner >= sample_rate / 2:
        raise ConfigurationError(
            f"high-pass corner {corner} Hz at or above Nyquist ({sample_rate / 2} Hz)")
    return sp_signal.butter(order, corner, btype="highpass", fs=sample_rate, output="sos")


def highpass(segment: Waveform, corner: float = HPF_CORNER_HZ,
             order: int = HPF_ORDER) -> Waveform:
    """Zero-phase Butterworth high-pass; removes DC and low-frequency drift."""
    if segment.sample_rate <= 2 * corner:
        raise ConfigurationError(
            f"sample rate {segment.sample_rate} too low for a {corner} Hz high-pass")
    sos = _hpf_sos(segment.sample_rate, corner, order)
    out = sp_signal.sosfiltfilt(sos, segment.samples)
    return Waveform(out, segment.sample_rate, segment.t0)


@lru_cache(maxsize=32)
def _lpf_sos(sample_rate: float, corner: float, order: int, stop_db_effective: float):
    if corner >= sample_rate / 2:
        raise ConfigurationError(
            f"low-pass corner {corner} Hz at or above Nyquist ({sample_rate / 2} Hz)")
    return sp_signal.cheby2(order, stop_db_effective / 2, corner,
                            btype="lowpass", fs=sample_rate, output="sos")


def lowpass_envelope(envelope: Waveform, corner: float = LPF_CORNER_HZ,
                     order: int = LPF_ORDER,
                     stop_db_effective: float = LPF_STOP_DB_EFFECTIVE) -> Waveform:
    """Zero-phase inverse-Chebyshev low-pass over an extracted envelope."""
    if envelope.sample_rate <= 2 * corner:
        raise ConfigurationError(
            f"sample rate {envelope.sample_rate} must exceed {2 * corner} Hz "
            f"for the {corner} Hz envelope low-pass")
    sos = _lpf_sos(envelope.sample_rate, corner, order, stop_db_effective)
    out = sp_signal.sosfiltfilt(sos, envelope.samples)
    return Waveform(out, envelope.sample_rate, envelope.t0)


# ---------------------------------------------------------------------------
# Envelope extraction
# ---------------------------------------------------------------------------

def extract_envelope(segment: Waveform, carrier_freq: float):
    """Peak/valley envelopes via cubic splines through per-cycle extrema.

    The interpolant is a monotone (shape-preserving) cubic so that flat
    amplitude plateaus stay exactly flat and level steps do not ring
    into neighboring symbols. Returns (positive, negative,
    fallback_used). With fewer than 4 detected peaks the magnitude of
    the analytic signal is used for both sides instead, flagged in the
    third return value.
    """
    spc_f = segment.sample_rate / carrier_freq
    spc = int(round(spc_f))
    if abs(spc_f - spc) > 1e-6 or spc < 4:
        raise ConfigurationError(
            f"sample rate must be an integer multiple (>=4) of the carrier, "
            f"got ratio {spc_f}")
    n_cycles = len(segment) // spc
    if n_cycles < 4:
        return _analytic_fallback(segment)
    x = segment.samples[:n_cycles * spc].reshape(n_cycles, spc)
    imax = np.argmax(x, axis=1)
    imin = np.argmin(x, axis=1)
    rows = np.arange(n_cycles)
    t = segment.times()
    t_max = t[rows * spc + imax]
    v_max = x[rows, imax]
    t_min = t[rows * spc + imin]
    v_min = x[rows, imin]
    pos = PchipInterpolator(t_max, v_max)(t)
    neg = PchipInterpolator(t_min, v_min)(t)
    return (Waveform(pos, segment.sample_rate, segment.t0),
            Waveform(neg, segment.sample_rate, segment.t0),
            False)


def _analytic_fallback(segment: Waveform):
    mag = np.abs(sp_signal.hilbert(segment.samples)) if len(segment) else segment.samples
    return (Waveform(mag, segment.sample_rate, segment.t0),
            Waveform(-mag, segment.sample_rate, segment.t0),
            True)


def combine_differential(pos: Waveform, neg: Waveform) -> Waveform:
    """Positive minus negative envelope; common-mode offsets cancel exactly."""
    if len(pos) != len(neg):
        raise ConfigurationError(
            f"envelope length mismatch: {len(pos)} vs {len(neg)}")
    return Waveform(pos.samples - neg.samples, pos.sample_rate, pos.t0)


def make_envelope_trace(segment: Waveform, carrier_freq: float,
                        lpf_corner: float = LPF_CORNER_HZ) -> EnvelopeTrace:
    """Full envelope stage: extract, low-pass both sides, combine."""
    pos, neg, fallback = extract_envelope(segment, carrier_freq)
    pos = lowpass_envelope(pos, lpf_corner)
    neg = lowpass_envelope(neg, lpf_corner)
    diff = combine_differential(pos, neg)
    return EnvelopeTrace(pos, neg, diff, fallback)


# ---------------------------------------------------------------------------
# Symbol sampling, clustering, demapping
# ---------------------------------------------------------------------------

def sample_symbols(env: Waveform, schedule: SymbolSchedule,
                   settle_guard_cycles: float = 1.0) -> SymbolFrame:
    """One voltage per symbol, taken settle_guard cycles before the symbol end."""
    guard = settle_guard_cycles / schedule.carrier_freq
    t_sample = schedule.end_times - guard
    if t_sample[0] < env.t0 - 1e-12 or t_sample[-1] > env.t_end + 1e-12:
        bad = int(np.argmax((t_sample < env.t0) | (t_sample > env.t_end)))
        raise ConfigurationError(
            f"symbol {bad} sampling instant {t_sample[bad]:.9g}s is outside the "
            f"envelope span [{env.t0:.9g}, {env.t_end:.9g}]s")
    volts = np.interp(t_sample, env.times(), env.samples)
    return SymbolFrame(volts, t_sample, schedule.pulse_index, schedule.implant_slot)


def cluster_thresholds(voltages, n_levels: int) -> ClusterResult:
    """Deterministic 1-D k-means; thresholds at midpoints of sorted centroids.

    Centroids start equally spaced between the sample extremes. If a
    cluster empties, equally spaced thresholds over [min, max] are used
    instead and the result is flagged.
    """
    v = np.asarray(voltages, dtype=np.float64)
    if v.size < 4 * n_levels:
        raise ConfigurationError(
            f"need at least {4 * n_levels} samples to fit {n_levels} levels, got {v.size}")
    lo, hi = float(np.min(v)), float(np.max(v))
    centroids = np.linspace(lo, hi, n_levels)
    fallback = False
    for _ in range(KMEANS_MAX_ITER):
        mids = (centroids[:-1] + centroids[1:]) / 2
        assign = np.searchsorted(mids, v, side="left")
        new = np.empty_like(centroids)
        for k in range(n_levels):
            members = v[assign == k]
            if members.size == 0:
                fallback = True
                break
            new[k] = members.mean()
        if fallback:
            break
        move = float(np.max(np.abs(new - centroids)))
        scale = max(float(np.max(np.abs(new))), 1e-300)
        centroids = np.sort(new)
        if move / scale < KMEANS_REL_TOL:
            break
    if fallback:
        log.warning("cluster_thresholds: empty cluster with %d levels; "
                    "falling back to equally spaced thresholds", n_levels)
        centroids = np.linspace(lo, hi, n_levels)
        thresholds = np.linspace(lo, hi, n_levels + 1)[1:-1]
        return ClusterResult(centroids, thresholds, True)
    thresholds = (centroids[:-1] + centroids[1:]) / 2
    return ClusterResult(centroids, thresholds, False)


def demap_levels(voltages, thresholds) -> np.ndarray:
    """Threshold comparison, ties to the lower level; monotone in voltage."""
    return np.searchsorted(np.asarray(thresholds), np.asarray(voltages), side="left")


def levels_to_bits(levels, ask_levels: int) -> np.ndarray:
    """Natural-binary expansion, MSB-first, bits_per_symbol bits per level."""
    m = wire.bits_per_symbol(ask_levels)
    levels = np.asarray(levels, dtype=np.int64)
    shifts = np.arange(m - 1, -1, -1)
    return ((levels[:, None] >> shifts) & 1).reshape(-1).astype(np.uint8)


def demap(frame: SymbolFrame, thresholds, cfg) -> np.ndarray:
    """SymbolFrame voltages -> level indices -> MSB-first bit stream.

    cfg supplies ask_levels; groups reassemble MSB-first into the 8- or
    9-bit words downstream consumers expect.
    """
    levels = demap_levels(frame.echo_voltages, thresholds)
    return levels_to_bits(levels, cfg.ask_levels)


# ---------------------------------------------------------------------------
# BER
# ---------------------------------------------------------------------------

def align_to_reference(received, reference, window: int = SYNC_WINDOW_BITS,
                       min_corr: float = SYNC_MIN_CORRELATION,
                       max_windows: int = 16):
    """Sliding-correlation alignment; returns (offset, peak correlation).

    A 32-bit window of the received stream slides over the reference;
    the match must clear min_corr. If the first window is too corrupted
    to clear it, later windows (in 32-bit steps) are tried, each fixing
    the same global offset through its own position.
    """
    rx = np.asarray(received, dtype=np.float64) * 2 - 1
    ref = np.asarray(reference, dtype=np.float64) * 2 - 1
    if rx.size < window or ref.size < window:
        return None, 0.0
    best_peak = 0.0
    for w in range(max_windows):
        start = w * window
        if start + window > rx.size:
            break
        corr = np.correlate(ref, rx[start:start + window], mode="valid") / window
        pos = int(np.argmax(corr))
        peak = float(corr[pos])
        best_peak = max(best_peak, peak)
        offset = pos - start
        if peak >= min_corr and offset >= 0:
            return offset, peak
    return None, best_peak


def compute_ber(received_bits, reference_bits, rx_levels=None, ref_levels=None,
                n_levels: int = None) -> BERReport:
    """Compare a received stream against the golden reference.

    The streams are aligned with a 32-bit sliding correlation; a peak
    below 0.9 yields a sync-failure report (counted separately from bit
    errors). With zero errors the BER upper bound is 1/bits_compared.
    """
    rx = np.asarray(received_bits, dtype=np.uint8)
    ref = np.asarray(reference_bits, dtype=np.uint8)
    offset, peak = align_to_reference(rx, ref)
    if offset is None:
        return BERReport(bits_compared=0, bit_errors=0, ber_point=0.0,
                         ber_upper_bound=1.0, sync_failed=True)
    n = min(rx.size, ref.size - offset)
    errors = int(np.count_nonzero(rx[:n] != ref[offset:offset + n]))
    point = errors / n if n else 0.0
    bound = max(point, 1.0 / n) if n else 1.0
    confusion = None
    if rx_levels is not None and ref_levels is not None and n_levels:
        rx_l = np.asarray(rx_levels, dtype=np.int64)
        ref_l = np.asarray(ref_levels, dtype=np.int64)
        k = min(rx_l.size, ref_l.size)
        confusion = np.zeros((n_levels, n_levels), dtype=np.int64)
        np.add.at(confusion, (ref_l[:k], rx_l[:k]), 1)
    return BERReport(bits_compared=n, bit_errors=errors, ber_point=point,
                     ber_upper_bound=bound, per_level_confusion=confusion,
                     sync_offset=offset)
