"""One implant node: downlink receiver, TDMA uplink participant, data sources.

The downlink receiver is a behavioral model of the on-chip envelope
detector and FSM: rectified piezo voltage through a fast and a slow
one-pole low-pass filter, symbol decisions by comparing the two,
symbol-width estimation from the preamble, header alignment and
Manchester decoding into the configuration registers. The uplink side
counts pulses, checks its TDMA slot and drains its FIFO into I-DAC
codes. Data sources are a 16-bit maximal-length LFSR and a behavioral
amplifier + 12-bit ADC chain.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sp_signal

from . import wire
from .channel import GammaTrace
from .errors import ConfigurationError
from .piezo import PiezoModel, gamma_from_code_value, idac_clamps
from .waveform import Waveform

ADC_BITS = 12
FIFO_CAPACITY = 64
LFSR_TAPS = (16, 15, 13, 4)
LFSR_PERIOD = 65535

# Envelope-detector corners: the fast path follows individual symbols,
# the slow path averages >= 10 symbols at the slowest symbol rate.
ENV_FAST_CORNER_HZ = 200e3
ENV_AVG_CORNER_HZ = 2e3


class Mode(enum.Enum):
    CONFIG = "config"
    UPLINK = "uplink"


class AdcSlice(enum.Enum):
    """Which ADC output bits feed the FIFO; value = start bit (LSB side)."""

    S0_7 = 0
    S1_9 = 1
    S2_10 = 2
    S3_11 = 3

    @property
    def start(self) -> int:
        return self.value


class ManchesterViolation(ValueError):
    """A downlink symbol pair was 00 or 11."""


@dataclass
class LinkConfig:
    """Per-implant register file programmed over the downlink."""

    idac_unit_current: float = 4e-6
    samples_per_packet: int = 1
    ask_levels: int = 2
    n_implants: int = 1
    uplink_index: int = 1
    lfsr_enable: bool = False
    cycles_per_symbol: int = 8
    adc_slice: AdcSlice = AdcSlice.S0_7
    implant_id: int = 1  # hard-wired, not downlink-writable

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not wire.IDAC_BASE_A - 1e-12 <= self.idac_unit_current <= 40e-6 + 1e-12:
            raise ConfigurationError(
                f"idac_unit_current {self.idac_unit_current} outside 4-40 uA")
        if not 1 <= self.samples_per_packet <= 16:
            raise ConfigurationError("samples_per_packet outside 1..16")
        if self.ask_levels not in wire.ASK_LEVEL_CHOICES:
            raise ConfigurationError(f"ask_levels must be one of {wire.ASK_LEVEL_CHOICES}")
        if not 1 <= self.n_implants <= 8:
            raise ConfigurationError("n_implants outside 1..8")
        if not 1 <= self.uplink_index <= 8:
            raise ConfigurationError("uplink_index outside 1..8")
        if self.uplink_index > self.n_implants:
            raise ConfigurationError(
                f"uplink_index {self.uplink_index} exceeds n_implants {self.n_implants}")
        if self.cycles_per_symbol not in wire.CYCLES_PER_SYMBOL_CHOICES:
            raise ConfigurationError(
                f"cycles_per_symbol must be one of {wire.CYCLES_PER_SYMBOL_CHOICES}")
        if not isinstance(self.adc_slice, AdcSlice):
            raise ConfigurationError(f"adc_slice must be an AdcSlice, got {self.adc_slice!r}")
        if not 1 <= self.implant_id <= 0xFF:
            raise ConfigurationError("implant_id must be 1..255 (0 is reserved)")
        if self.adc_slice.start + self.word_width > ADC_BITS:
            raise ConfigurationError(
                f"slice start {self.adc_slice.start} with width {self.word_width} "
                f"exceeds bit {ADC_BITS - 1}")

    @property
    def word_width(self) -> int:
        return wire.word_width_for_levels(self.ask_levels)

    @property
    def bits_per_symbol(self) -> int:
        return wire.bits_per_symbol(self.ask_levels)

    @property
    def symbols_per_word(self) -> int:
        return self.word_width // self.bits_per_symbol

    @property
    def data_symbols_per_packet(self) -> int:
        return self.samples_per_packet * self.symbols_per_word


@dataclass(frozen=True)
class AfeModel:
    """Behavioral amplifier + SAR ADC chain.

    gain is the measured end-to-end gain (the design target is higher;
    the default reproduces the measured SNDR), full_scale the ADC input
    range, input_noise_rms the input-referred integrated noise over the
    Nyquist band. Chopping is modeled as ideal offset cancellation.
    """

    gain: float = 70.0
    full_scale: float = 2.0
    adc_bits: int = ADC_BITS
    sample_rate: float = 6250.0
    input_noise_rms: float = 9.8e-6
    chop_freq: float = 50e3

    def __post_init__(self):
        if not self.gain > 0:
            raise ConfigurationError("AFE gain must be > 0")
        if self.adc_bits != ADC_BITS:
            raise ConfigurationError(f"adc_bits is fixed at {ADC_BITS}")
        if abs(self.sample_rate - self.chop_freq / 8) > 1e-9 * self.sample_rate:
            raise ConfigurationError("sample_rate must equal chop_freq / 8")


@dataclass
class Diagnostics:
    lock_failures: int = 0
    rejected_payloads: int = 0
    manchester_violations: int = 0
    clamp_events: int = 0
    fifo_drops: int = 0


@dataclass
class ImplantState:
    config: LinkConfig
    mode: Mode = Mode.CONFIG
    pulse_count: int = 0
    estimated_symbol_width: int = 0
    fifo: deque = field(default_factory=deque)
    lfsr_state: int = 1
    fifo_capacity: int = FIFO_CAPACITY
    diagnostics: Diagnostics = field(default_factory=Diagnostics)


# ---------------------------------------------------------------------------
# LFSR / PRBS
# ---------------------------------------------------------------------------

def lfsr_seed_for_id(implant_id: int) -> int:
    """Zero-extended implant id with bit 0 forced to 1 (never zero)."""
    return (implant_id & 0xFF) | 1


def lfsr_step(state: int):
    """One Fibonacci shift with taps (16, 15, 13, 4); returns (state', out bit).

    The register shifts toward the MSB; bit 16 is emitted and the tap
    parity re-enters at bit 1. Maximal length: period 65535.
    """
    if state == 0:
        raise ValueError("LFSR state must never be zero")
    fb = ((state >> 15) ^ (state >> 14) ^ (state >> 12) ^ (state >> 3)) & 1
    out = (state >> 15) & 1
    return ((state << 1) | fb) & 0xFFFF, out


_SEQUENCE_CACHE: dict = {}


def lfsr_sequence(seed: int) -> np.ndarray:
    """Full-period output bit sequence (length 65535) starting from seed."""
    cached = _SEQUENCE_CACHE.get(seed)
    if cached is not None:
        return cached
    bits = np.empty(LFSR_PERIOD, dtype=np.uint8)
    state = seed
    for i in range(LFSR_PERIOD):
        state, bits[i] = lfsr_step(state)
    if state != seed:
        raise ValueError(f"LFSR did not return to seed after {LFSR_PERIOD} steps")
    _SEQUENCE_CACHE[seed] = bits
    return bits


def prbs_bits(seed: int, start: int, count: int) -> np.ndarray:
    """count PRBS bits beginning at stream offset start."""
    seq = lfsr_sequence(seed)
    idx = (start + np.arange(count)) % LFSR_PERIOD
    return seq[idx]


# ---------------------------------------------------------------------------
# Envelope detector primitives
# ---------------------------------------------------------------------------

def one_pole_lowpass(x: np.ndarray, corner_hz: float, sample_rate: float) -> np.ndarray:
    """First-order RC low-pass (matched-pole discretization), zero initial state."""
    beta = np.exp(-2 * np.pi * corner_hz / sample_rate)
    return sp_signal.lfilter([1 - beta], [1, -beta], x)


# Comparator hysteresis, as a fraction of the average-path level. The
# rectified carrier leaves ~3% ripple on the fast path at its 200 kHz
# corner; 10% keeps the edge detector from chattering through crossings.
COMPARATOR_HYSTERESIS = 0.10


def hysteresis_comparator(env_fast: np.ndarray, env_avg: np.ndarray,
                          hysteresis: float = COMPARATOR_HYSTERESIS) -> np.ndarray:
    """Edge-detector comparator state with hysteresis around the average path.

    Goes high above avg*(1+h), low below avg*(1-h), holds in between.
    """
    up = env_fast > env_avg * (1 + hysteresis)
    dn = env_fast < env_avg * (1 - hysteresis)
    drive = np.where(up, 1, np.where(dn, 0, -1))
    defined = drive >= 0
    idx = np.where(defined, np.arange(drive.size), -1)
    last = np.maximum.accumulate(idx)
    state = np.where(last >= 0, drive[np.maximum(last, 0)], 0)
    return state.astype(np.uint8)


def detect_envelope_symbol(env_fast: float, env_avg: float) -> int:
    """Symbol decision at a sampling instant: 1 if the fast path is above the average."""
    return 1 if env_fast > env_avg else 0


def estimate_symbol_width(preamble_transitions) -> int:
    """Mean of the cycle counts between preamble transitions, rounded to integer."""
    intervals = np.asarray(preamble_transitions, dtype=np.float64)
    if intervals.size < 2:
        raise ConfigurationError("need at least 2 transition intervals for width estimation")
    return int(round(float(np.mean(intervals))))


def manchester_decode(symbol_pairs) -> list:
    """Decode (first, second) symbol pairs; raises ManchesterViolation on 00/11."""
    bits = []
    for pair in symbol_pairs:
        pair = (int(pair[0]), int(pair[1]))
        if pair == wire.MANCHESTER_ONE:
            bits.append(1)
        elif pair == wire.MANCHESTER_ZERO:
            bits.append(0)
        else:
            raise ManchesterViolation(f"invalid Manchester pair {pair}")
    return bits


# ---------------------------------------------------------------------------
# AFE
# ---------------------------------------------------------------------------

def afe_sample(v_in_diff, afe: AfeModel, rng: np.random.Generator = None):
    """Amplify, add input-referred noise, clamp to the rails, quantize mid-rise.

    Accepts a scalar or array; rng=None disables the noise term.
    """
    v = np.asarray(v_in_diff, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("AFE input must be finite")
    if rng is not None and afe.input_noise_rms > 0:
        v = v + rng.normal(0.0, afe.input_noise_rms, v.shape)
    half = afe.full_scale / 2
    x = np.clip(afe.gain * v, -half, half)
    lsb = afe.full_scale / (1 << afe.adc_bits)
    code = np.floor((x + half) / lsb).astype(np.int64)
    code = np.clip(code, 0, (1 << afe.adc_bits) - 1)
    if np.isscalar(v_in_diff):
        return int(code)
    return code


def adc_code_to_voltage(code12: float, afe: AfeModel) -> float:
    """Inverse of the AFE transfer: mid-rise code back to differential input volts."""
    lsb = afe.full_scale / (1 << afe.adc_bits)
    return ((code12 + 0.5) * lsb - afe.full_scale / 2) / afe.gain


def slice_bits(code: int, cfg: LinkConfig) -> int:
    """Select the configured 8- or 9-bit window of a 12-bit FIFO word, LSB-first."""
    width = cfg.word_width
    start = cfg.adc_slice.start
    if start + width > ADC_BITS:
        raise ConfigurationError(
            f"slice start {start} + width {width} exceeds bit {ADC_BITS - 1}")
    return (int(code) >> start) & ((1 << width) - 1)


# ---------------------------------------------------------------------------
# Uplink packet assembly
# ---------------------------------------------------------------------------

def should_transmit(state: ImplantState) -> bool:
    """TDMA slot check against the running pulse count."""
    cfg = state.config
    return (state.pulse_count % cfg.n_implants) + 1 == cfg.uplink_index


def assemble_uplink_packet(state: ImplantState):
    """Drain the FIFO into I-DAC codes: "1010" header, 4-bit count, data groups.

    Words are split MSB-first into bits_per_symbol groups; each group
    maps to an equally spaced code across the 16-code range. On FIFO
    underrun the reduced count is encoded and the unused data-symbol
    slots stay at code 0. Returns (codes array, sample count).
    """
    cfg = state.config
    count = min(len(state.fifo), cfg.samples_per_packet)
    words = [slice_bits(state.fifo.popleft(), cfg) for _ in range(count)]
    m = cfg.bits_per_symbol
    codes = [15.0 if b else 0.0 for b in wire.UPLINK_HEADER]
    codes += [15.0 if b else 0.0 for b in wire.encode_count_field(count)]
    for word in words:
        word_bits = wire.int_to_bits(word, cfg.word_width)
        for g in range(cfg.symbols_per_word):
            group = wire.bits_to_int(word_bits[g * m:(g + 1) * m])
            codes.append(wire.code_for_group(group, cfg.ask_levels))
    # keep the data window at its scheduled length
    missing = (cfg.samples_per_packet - count) * cfg.symbols_per_word
    codes += [0.0] * missing
    return np.asarray(codes, dtype=np.float64), count


# ---------------------------------------------------------------------------
# The implant node
# ---------------------------------------------------------------------------

class Implant:
    """Sequential state machine for one node, driven by the pulse timeline."""

    def __init__(self, implant_id: int, piezo: PiezoModel, afe: AfeModel = None,
                 rng: np.random.Generator = None, input_signal=None,
                 fifo_capacity: int = FIFO_CAPACITY):
        self.piezo = piezo
        self.afe = afe if afe is not None else AfeModel()
        self.rng = rng
        # callable mapping seconds-since-uplink-entry -> differential volts
        self.input_signal = input_signal
        self.state = ImplantState(
            config=LinkConfig(implant_id=implant_id),
            lfsr_state=lfsr_seed_for_id(implant_id),
            fifo_capacity=fifo_capacity,
        )
        self._tick_origin = None   # uplink-entry time, seconds
        self._ticks_written = 0
        self._prbs_pos = 0
        self._tick_inputs = []     # sampled true input per tick (for reconstruction)

    @property
    def implant_id(self) -> int:
        return self.state.config.implant_id

    @property
    def mode(self) -> Mode:
        return self.state.mode

    def reset(self):
        """Power-on reset: back to Config Mode with default registers."""
        implant_id = self.implant_id
        self.state = ImplantState(
            config=LinkConfig(implant_id=implant_id),
            lfsr_state=lfsr_seed_for_id(implant_id),
            fifo_capacity=self.state.fifo_capacity,
        )
        self._tick_origin = None
        self._ticks_written = 0
        self._prbs_pos = 0
        self._tick_inputs = []

    def snapshot(self) -> str:
        """Structured text record of the externally visible state."""
        cfg = self.state.config
        lines = [
            f"implant_id={cfg.implant_id}",
            f"mode={self.state.mode.value}",
            f"pulse_count={self.state.pulse_count}",
            f"estimated_symbol_width={self.state.estimated_symbol_width}",
            f"fifo_depth={len(self.state.fifo)}",
            f"idac_unit_current={cfg.idac_unit_current!r}",
            f"samples_per_packet={cfg.samples_per_packet}",
            f"ask_levels={cfg.ask_levels}",
            f"n_implants={cfg.n_implants}",
            f"uplink_index={cfg.uplink_index}",
            f"lfsr_enable={int(cfg.lfsr_enable)}",
            f"cycles_per_symbol={cfg.cycles_per_symbol}",
            f"adc_slice={cfg.adc_slice.name}",
        ]
        return "\n".join(lines)

    # -- Config Mode ------------------------------------------------------

    def receive_config_pulse(self, incident: Waveform, carrier_freq: float):
        """Process one Config Mode pulse; returns an ack GammaTrace or None."""
        decoded = self._decode_downlink(incident, carrier_freq)
        if decoded is None:
            self.state.diagnostics.lock_failures += 1
            return None
        payload_bits, payload_end_time = decoded
        return self._apply_payload(payload_bits, payload_end_time, incident)

    def _decode_downlink(self, incident: Waveform, carrier_freq: float):
        """Envelope FSM: returns (48 payload bits, payload end time) or None."""
        sr = incident.sample_rate
        spc = sr / carrier_freq
        rect = np.abs(incident.samples)
        env_fast = one_pole_lowpass(rect, ENV_FAST_CORNER_HZ, sr)
        env_avg = one_pole_lowpass(rect, ENV_AVG_CORNER_HZ, sr)
        comp = hysteresis_comparator(env_fast, env_avg)
        edges = np.flatnonzero(np.diff(comp.astype(np.int8))) + 1
        if edges.size < 8:
            return None
        intervals = np.diff(edges) / spc
        # Rough symbol width: consecutive-interval pair sums are immune
        # to the comparator's rise/fall asymmetry while the slow path
        # settles. intervals[0] spans the charge-up section; skip it.
        inner = intervals[1:]
        pair_means = (inner[:-1] + inner[1:]) / 2
        w0 = float(np.median(pair_means))
        if w0 <= 0:
            return None
        anchor_idx = self._find_header_anchor(env_fast, env_avg, comp, edges,
                                              w0, spc)
        if anchor_idx is None:
            return None
        # Settled width estimate from the preamble intervals nearest the
        # header; integer rounding makes the 104-symbol grid drift-free.
        k = anchor_idx
        lo = max(1, k - 24)
        if k - lo < 2:
            return None
        counts = np.round(intervals[lo:k]).astype(int)
        try:
            width = estimate_symbol_width(counts)
        except ConfigurationError:
            return None
        if width < 1:
            return None
        anchor = edges[k]
        mid_idx = anchor + ((np.arange(104) + 0.5) * width * spc).astype(int)
        if mid_idx[-1] >= len(incident):
            return None
        symbols = [detect_envelope_symbol(env_fast[i], env_avg[i]) for i in mid_idx]
        if tuple(symbols[:8]) != wire.CONFIG_HEADER:
            return None
        pairs = [(symbols[8 + 2 * i], symbols[9 + 2 * i]) for i in range(48)]
        try:
            payload = manchester_decode(pairs)
        except ManchesterViolation:
            self.state.diagnostics.manchester_violations += 1
            self.state.diagnostics.rejected_payloads += 1
            return None
        self.state.estimated_symbol_width = width
        payload_end = incident.t0 + (anchor + 104 * width * spc) / sr
        return payload, payload_end

    @staticmethod
    def _find_header_anchor(env_fast, env_avg, comp, edges, w0, spc):
        """Index (into edges) of the transition that starts the header.

        Tests each low-to-high transition by sampling eight symbol
        midpoints against the header pattern; the alternating preamble
        can never produce the pattern, so the match is unambiguous.
        """
        n = env_fast.size
        offsets = ((np.arange(8) + 0.5) * w0 * spc)
        for i, edge in enumerate(edges):
            if comp[edge] != 1:
                continue
            idx = edge + offsets.astype(int)
            if idx[-1] >= n:
                break
            got = tuple(
                detect_envelope_symbol(env_fast[j], env_avg[j]) for j in idx)
            if got == wire.CONFIG_HEADER:
                return i
        return None

    def _apply_payload(self, payload_bits, payload_end_time: float, incident: Waveform):
        """Register update / mode switch / ack decision for a decoded payload."""
        target = wire.bits_to_int(payload_bits[:8])
        if target == 0:
            self._enter_uplink_mode(payload_end_time)
            return None
        if target != self.implant_id:
            return None
        try:
            _, fields = wire.unpack_config_payload(payload_bits)
            adc_slice = AdcSlice(fields.pop("adc_slice_value"))
            new_cfg = replace(self.state.config, adc_slice=adc_slice, **fields)
        except (ConfigurationError, ValueError):
            self.state.diagnostics.rejected_payloads += 1
            return None
        self.state.config = new_cfg
        return self._ack_trace(payload_end_time, incident)

    def _enter_uplink_mode(self, t_switch: float):
        self.state.mode = Mode.UPLINK
        self.state.pulse_count = 0
        self.state.fifo.clear()
        self.state.lfsr_state = lfsr_seed_for_id(self.implant_id)
        self._prbs_pos = 0
        self._ticks_written = 0
        self._tick_origin = t_switch
        self._tick_inputs = []

    def _ack_trace(self, t_start: float, incident: Waveform) -> GammaTrace:
        """"0101" + own id at 2-level ASK, using the just-applied registers."""
        bits = list(wire.ACK_HEADER) + wire.int_to_bits(self.implant_id, 8)
        codes = np.asarray([15.0 if b else 0.0 for b in bits])
        return self.trace_from_codes(codes, t_start, incident)

    # -- Uplink Mode ------------------------------------------------------

    def advance_sampling(self, t_until: float):
        """Run the 6.25 kS/s data source up to t_until, writing FIFO words.

        In LFSR mode each tick writes word_width consecutive PRBS bits,
        positioned at the configured ADC-slice offset so the uplink
        path extracts exactly those bits. In ADC mode each tick samples
        the input signal through the AFE.
        """
        if self.state.mode is not Mode.UPLINK or self._tick_origin is None:
            return
        cfg = self.state.config
        fs = self.afe.sample_rate
        n_ticks = int(np.floor((t_until - self._tick_origin) * fs + 1e-9))
        while self._ticks_written < n_ticks:
            t_tick = self._tick_origin + self._ticks_written / fs
            if len(self.state.fifo) >= self.state.fifo_capacity:
                self.state.diagnostics.fifo_drops += 1
            elif cfg.lfsr_enable:
                word = 0
                for _ in range(cfg.word_width):
                    self.state.lfsr_state, bit = lfsr_step(self.state.lfsr_state)
                    word = (word << 1) | bit
                self._prbs_pos += cfg.word_width
                self.state.fifo.append(word << cfg.adc_slice.start)
            else:
                rel_t = t_tick - self._tick_origin
                v_in = self.input_signal(rel_t) if self.input_signal is not None else 0.0
                code = afe_sample(v_in, self.afe, self.rng)
                self._tick_inputs.append((rel_t, float(v_in)))
                self.state.fifo.append(int(code))
            self._ticks_written += 1

    def on_uplink_pulse(self, t_arrival: float, charge_up_cycles: int,
                        carrier_freq: float, incident_span=None):
        """Count one Uplink Mode pulse; return a GammaTrace when it is our slot."""
        if self.state.mode is not Mode.UPLINK:
            return None
        transmit = should_transmit(self.state)
        self.state.pulse_count += 1
        if not transmit:
            return None
        codes, _count = assemble_uplink_packet(self.state)
        t_start = t_arrival + charge_up_cycles / carrier_freq
        return self.trace_from_codes(codes, t_start, incident_span, carrier_freq)

    def trace_from_codes(self, codes: np.ndarray, t_start: float,
                         incident=None, carrier_freq: float = None) -> GammaTrace:
        """Reflection trace for a code sequence at the current symbol width.

        Each code holds for cycles_per_symbol carrier cycles; the trace
        is zero-padded to span the incident wave when one is given.
        """
        cfg = self.state.config
        if carrier_freq is None:
            carrier_freq = self.piezo.f_parallel
        sym_dur = cfg.cycles_per_symbol / carrier_freq
        gammas = np.array([
            gamma_from_code_value(self.piezo, cfg.idac_unit_current, c) for c in codes])
        clamped = sum(
            1 for c in codes if idac_clamps(self.piezo, cfg.idac_unit_current, c))
        self.state.diagnostics.clamp_events += clamped
        edges = t_start + np.arange(codes.size + 1) * sym_dur
        if incident is not None:
            span0, span1 = _span_of(incident)
            pads_front = []
            pads_back = []
            if span0 < edges[0]:
                pads_front = [span0 - 1e-9]
                gammas = np.concatenate([[0.0], gammas])
            if span1 > edges[-1]:
                pads_back = [span1 + 1e-9]
                gammas = np.concatenate([gammas, [0.0]])
            edges = np.concatenate([pads_front, edges, pads_back])
        return GammaTrace(edges, gammas, clamp_count=clamped)


def _span_of(incident):
    if isinstance(incident, Waveform):
        return incident.t0, incident.t_end
    t0, t1 = incident
    return t0, t1
