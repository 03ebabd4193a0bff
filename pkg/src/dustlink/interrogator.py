"""External transducer controller: pulse construction and scheduling.

Builds Config Mode and Uplink Mode pulse descriptions, Manchester-encodes
downlink data, sizes the TX/RX switching windows around the time of
flight, and drives implant discovery. Descriptions are symbolic (per-
symbol amplitudes and cycle counts); the channel renders them.

Timing contract (half duplex): the echo of the implant's uplink window
reaches the interrogator one time of flight after the chip starts
transmitting, i.e. 2 ToF after the corresponding TX segment began, so
the uplink window must not exceed 2 ToF or reception would overlap TX.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import wire
from .errors import ConfigurationError, ScheduleError

DOWNLINK_HIGH = 1.0
DOWNLINK_LOW = 0.5   # keeps implants powered during "0" symbols

DEFAULT_CHARGE_UP_CYCLES = 100
MIN_CHARGE_UP_CYCLES = 16
MAX_CHARGE_UP_CYCLES = 100
MIN_SWITCH_TIME_S = 1e-6    # TX/RX switch settling
RX_GATE_GUARD_CYCLES = 2
ACK_WINDOW_PAD_CYCLES = 4
ACK_SYMBOLS = len(wire.ACK_HEADER) + 8


class PulseKind(enum.Enum):
    CONFIG = "config"
    UPLINK = "uplink"


@dataclass
class PulseSegment:
    label: str
    symbol_amplitudes: np.ndarray
    cycles_per_symbol: int

    def __post_init__(self):
        self.symbol_amplitudes = np.atleast_1d(
            np.asarray(self.symbol_amplitudes, dtype=np.float64))
        if self.cycles_per_symbol < 1:
            raise ConfigurationError("segment durations must be positive cycle counts")

    @property
    def cycles(self) -> int:
        return self.symbol_amplitudes.size * self.cycles_per_symbol


_CONFIG_SECTIONS = ("charge_up", "preamble", "downlink", "uplink_window")
_UPLINK_SECTIONS = ("charge_up", "header_window", "data_window")


@dataclass
class PulseDescriptor:
    """Symbolic description of one transmitted pulse."""

    kind: PulseKind
    segments: list
    carrier_freq: float
    t0: float = 0.0
    target_id: int = None      # Config pulses only
    payload_bits: list = None  # Config pulses only

    def __post_init__(self):
        if not self.segments:
            return  # degenerate empty pulse, allowed for channel tests
        labels = tuple(seg.label for seg in self.segments)
        expected = _CONFIG_SECTIONS if self.kind is PulseKind.CONFIG else _UPLINK_SECTIONS
        if labels != expected:
            raise ConfigurationError(
                f"{self.kind.value} pulse must have sections {expected}, got {labels}")

    @property
    def is_mode_switch(self) -> bool:
        return self.kind is PulseKind.CONFIG and self.target_id == 0

    def segment(self, label: str) -> PulseSegment:
        for seg in self.segments:
            if seg.label == label:
                return seg
        raise KeyError(label)

    def segment_start_cycle(self, label: str) -> int:
        start = 0
        for seg in self.segments:
            if seg.label == label:
                return start
            start += seg.cycles
        raise KeyError(label)

    @property
    def duration_cycles(self) -> int:
        return sum(seg.cycles for seg in self.segments)

    @property
    def duration(self) -> float:
        return self.duration_cycles / self.carrier_freq

    def cycle_amplitudes(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0)
        parts = [np.repeat(seg.symbol_amplitudes, seg.cycles_per_symbol)
                 for seg in self.segments]
        return np.concatenate(parts)

    def describe(self) -> str:
        """Structured text record of the pulse layout, for inspection."""
        lines = [f"kind={self.kind.value}",
                 f"carrier_freq={self.carrier_freq!r}",
                 f"t0={self.t0!r}",
                 f"duration_cycles={self.duration_cycles}"]
        if self.target_id is not None:
            lines.append(f"target_id={self.target_id}")
            lines.append(f"mode_switch={int(self.is_mode_switch)}")
        start = 0
        for seg in self.segments:
            lines.append(
                f"segment {seg.label}: start_cycle={start} cycles={seg.cycles} "
                f"symbols={seg.symbol_amplitudes.size} "
                f"cycles_per_symbol={seg.cycles_per_symbol}")
            start += seg.cycles
        return "\n".join(lines)


@dataclass(frozen=True)
class FrameSchedule:
    """Uplink-phase timing: one pulse per implant slot per frame.

    rx_gate_offset is the one-way time of flight; charge_up_cycles and
    window_cycles describe the shared uplink pulse structure so both
    link ends (and the receive gate) agree on where symbols sit.
    """

    pulse_period: float
    pulses_per_frame: int
    rx_gate_offset: float
    carrier_freq: float
    charge_up_cycles: int
    window_cycles: int

    def __post_init__(self):
        if self.rx_gate_offset <= 0:
            raise ConfigurationError("rx_gate_offset must be positive")
        if self.pulses_per_frame < 1:
            raise ConfigurationError("pulses_per_frame must be >= 1")
        if self.pulse_period <= 0:
            raise ConfigurationError("pulse_period must be positive")

    @property
    def frame_duration(self) -> float:
        return self.pulses_per_frame * self.pulse_period

    @property
    def charge_up_duration(self) -> float:
        return self.charge_up_cycles / self.carrier_freq

    @property
    def window_duration(self) -> float:
        return self.window_cycles / self.carrier_freq


def manchester_encode(bits) -> np.ndarray:
    """1 -> (1,0), 0 -> (0,1); output symbol count doubles the bit count."""
    out = []
    for b in bits:
        out.extend(wire.MANCHESTER_ONE if int(b) else wire.MANCHESTER_ZERO)
    return np.asarray(out, dtype=np.int64)


def _symbols_to_amplitudes(symbols) -> np.ndarray:
    symbols = np.asarray(symbols)
    return np.where(symbols > 0, DOWNLINK_HIGH, DOWNLINK_LOW)


def build_config_pulse(params, target_id: int, carrier_freq: float = 2.0e6,
                       downlink_cps: int = 8,
                       charge_up_cycles: int = DEFAULT_CHARGE_UP_CYCLES,
                       corrupt_symbol: int = None) -> PulseDescriptor:
    """Config Mode pulse: charge-up, preamble, header + payload, ack window.

    params is the LinkConfig to program (its cycles_per_symbol also
    sizes the ack window, since the implant acks with the just-applied
    registers). corrupt_symbol flips one downlink payload symbol, for
    exercising Manchester-violation rejection.
    """
    if not 0 <= target_id <= 0xFF:
        raise ConfigurationError(f"target id {target_id} is not an 8-bit value")
    if downlink_cps not in wire.CYCLES_PER_SYMBOL_CHOICES:
        raise ConfigurationError(
            f"downlink cycles/symbol must be one of {wire.CYCLES_PER_SYMBOL_CHOICES}")
    payload_bits = wire.pack_config_payload(target_id, params)
    payload_symbols = manchester_encode(payload_bits)
    if corrupt_symbol is not None:
        payload_symbols = payload_symbols.copy()
        payload_symbols[corrupt_symbol] ^= 1
    preamble = np.tile([1, 0], wire.PREAMBLE_REPEATS)
    downlink_symbols = np.concatenate([wire.CONFIG_HEADER, payload_symbols])
    ack_cycles = ACK_SYMBOLS * params.cycles_per_symbol + ACK_WINDOW_PAD_CYCLES
    segments = [
        PulseSegment("charge_up", [DOWNLINK_HIGH], charge_up_cycles),
        PulseSegment("preamble", _symbols_to_amplitudes(preamble), downlink_cps),
        PulseSegment("downlink", _symbols_to_amplitudes(downlink_symbols), downlink_cps),
        PulseSegment("uplink_window", [DOWNLINK_HIGH], ack_cycles),
    ]
    return PulseDescriptor(PulseKind.CONFIG, segments, carrier_freq=carrier_freq,
                           target_id=target_id, payload_bits=payload_bits)


def uplink_window_cycles(cfg) -> int:
    """Header (4 + 4 count symbols) plus the data window, in carrier cycles."""
    header_symbols = len(wire.UPLINK_HEADER) + wire.COUNT_FIELD_BITS
    return (header_symbols + cfg.data_symbols_per_packet) * cfg.cycles_per_symbol


def plan_uplink_timing(cfg, tof: float, carrier_freq: float,
                       pulse_period: float = None) -> FrameSchedule:
    """Size the shared uplink pulse structure and validate the budget.

    The charge-up segment takes the slack left after the uplink window
    and the 2 ToF echo guard. Raises ScheduleError naming the violating
    term when the arithmetic cannot close.
    """
    if tof <= MIN_SWITCH_TIME_S:
        raise ScheduleError(
            f"time of flight {tof:.3g}s must exceed the TX/RX switch time "
            f"{MIN_SWITCH_TIME_S:.3g}s (degenerate zero-depth geometry)")
    window_cycles = uplink_window_cycles(cfg)
    window_s = window_cycles / carrier_freq
    if window_s > 2 * tof - MIN_SWITCH_TIME_S:
        raise ScheduleError(
            f"uplink window {window_s * 1e6:.1f} us exceeds the 2*ToF echo budget "
            f"{2 * tof * 1e6:.1f} us; the echo would overlap TX")
    guard_s = RX_GATE_GUARD_CYCLES / carrier_freq
    min_period = ((MIN_CHARGE_UP_CYCLES + window_cycles) / carrier_freq
                  + 2 * tof + guard_s)
    if pulse_period is None:
        pulse_period = np.ceil(min_period * carrier_freq) / carrier_freq
    if pulse_period < min_period - 1e-12:
        raise ScheduleError(
            f"pulse_period {pulse_period * 1e6:.1f} us below the minimum "
            f"{min_period * 1e6:.1f} us (charge-up + window + 2*ToF + gate guard)")
    slack_cycles = int(np.floor(
        (pulse_period - window_s - 2 * tof - guard_s) * carrier_freq))
    charge_up_cycles = int(np.clip(slack_cycles, MIN_CHARGE_UP_CYCLES,
                                   MAX_CHARGE_UP_CYCLES))
    return FrameSchedule(
        pulse_period=pulse_period,
        pulses_per_frame=cfg.n_implants,
        rx_gate_offset=tof,
        carrier_freq=carrier_freq,
        charge_up_cycles=charge_up_cycles,
        window_cycles=window_cycles,
    )


def build_uplink_pulse(schedule: FrameSchedule, cfg) -> PulseDescriptor:
    """Uplink Mode pulse: constant-amplitude carrier feeding the backscatter.

    The header and data windows carry no TX modulation; they mark where
    the slot owner reflects. Window arithmetic is validated against the
    schedule, with the violating term identified.
    """
    window_cycles = uplink_window_cycles(cfg)
    if window_cycles != schedule.window_cycles:
        raise ScheduleError(
            f"link config needs a {window_cycles}-cycle uplink window but the "
            f"schedule reserves {schedule.window_cycles}")
    header_cycles = (len(wire.UPLINK_HEADER) + wire.COUNT_FIELD_BITS) * cfg.cycles_per_symbol
    data_cycles = cfg.data_symbols_per_packet * cfg.cycles_per_symbol
    total_s = (schedule.charge_up_cycles + window_cycles) / schedule.carrier_freq
    if total_s + 2 * schedule.rx_gate_offset > schedule.pulse_period + 1e-12:
        raise ScheduleError(
            f"pulse body {total_s * 1e6:.1f} us + echo guard "
            f"{2 * schedule.rx_gate_offset * 1e6:.1f} us exceeds the pulse period "
            f"{schedule.pulse_period * 1e6:.1f} us")
    segments = [
        PulseSegment("charge_up", [DOWNLINK_HIGH], schedule.charge_up_cycles),
        PulseSegment("header_window", [DOWNLINK_HIGH], header_cycles),
        PulseSegment("data_window", [DOWNLINK_HIGH], data_cycles),
    ]
    return PulseDescriptor(PulseKind.UPLINK, segments, carrier_freq=schedule.carrier_freq)


def rx_gate(schedule: FrameSchedule, pulse_start: float):
    """Receive window for one uplink pulse.

    Opens one ToF after the chip begins transmitting (charge-up plus
    2 ToF after the pulse start) and closes after the uplink window
    plus a small settling guard. Errors when the gate would overlap the
    next pulse's TX.
    """
    guard = RX_GATE_GUARD_CYCLES / schedule.carrier_freq
    rx_open = pulse_start + schedule.charge_up_duration + 2 * schedule.rx_gate_offset
    rx_close = rx_open + schedule.window_duration + guard
    if rx_close > pulse_start + schedule.pulse_period + 1e-12:
        raise ScheduleError(
            f"RX gate closing at {rx_close:.6g}s overlaps the next pulse TX at "
            f"{pulse_start + schedule.pulse_period:.6g}s")
    return rx_open, rx_close


def discover_implants(sim, candidate_ids=None) -> set:
    """Probe candidate ids with Config pulses; return the ids that acked.

    sim must provide send_config_probe(target_id) -> decoded ack id or
    None. Desk scale probes ids 1..8 unless a wider range is given.
    """
    if candidate_ids is None:
        candidate_ids = range(1, 9)
    found = set()
    for cid in candidate_ids:
        response = sim.send_config_probe(cid)
        if response == cid:
            found.add(cid)
    return found
