"""Scenario orchestration: configuration files, the pulse-level simulator,
and the experiment runners (throughput, BER sweeps, discovery, signal
reconstruction).

A run executes Config Mode for every implant, switches the population to
Uplink Mode with the reserved id-0 pulse, then interleaves TDMA uplink
pulses with receive-side demodulation. Everything is reproducible from
(scenario, seed): all randomness flows from one root seed through
spawned substreams (channel noise, one AFE stream per implant).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import demod as dm
from . import interrogator as ir
from . import wire
from .channel import (ChannelConfig, backscatter, propagate, superpose,
                      samples_per_cycle, synthesize_tx)
from .errors import ConfigurationError, ScheduleError
from .implant import (AdcSlice, AfeModel, Implant, LinkConfig, Mode,
                      adc_code_to_voltage, lfsr_seed_for_id, prbs_bits)
from .piezo import PiezoModel
from .waveform import Waveform, read_csv, read_dnwf

SCENARIO_VERSION = 1
AFE_SAMPLE_RATE = 6250.0
PREBUFFER_FRAMES = 1
CONFIG_GAP_CYCLES = 32
MAX_RECORDING_SAMPLES = 500_000_000
EYE_PULSES = 8
ACK_GATE_PAD_CYCLES = 2


@dataclass
class ImplantSpec:
    implant_id: int
    link: LinkConfig
    piezo: PiezoModel = field(default_factory=PiezoModel)
    afe: AfeModel = field(default_factory=AfeModel)
    input_signal: str = None


@dataclass
class Scenario:
    channel: ChannelConfig
    implants: list
    duration_frames: int = 1
    seed: int = 0
    samples_per_cycle: int = 64
    downlink_cps: int = 8
    pulse_period: float = None  # None -> minimum that fits

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.implants:
            raise ConfigurationError("scenario needs at least one implant")
        if len(self.implants) > 8:
            raise ConfigurationError("at most 8 implants are supported")
        ids = [s.implant_id for s in self.implants]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"implant ids must be unique, got {ids}")
        if any(i == 0 for i in ids):
            raise ConfigurationError("implant id 0 is reserved")
        for spec in self.implants:
            if spec.link.implant_id != spec.implant_id:
                raise ConfigurationError(
                    f"link config id {spec.link.implant_id} does not match "
                    f"implant id {spec.implant_id}")
        n_set = {s.link.n_implants for s in self.implants}
        if len(n_set) != 1:
            raise ConfigurationError(f"implants disagree on n_implants: {n_set}")
        n = n_set.pop()
        slots = sorted(s.link.uplink_index for s in self.implants)
        if slots != list(range(1, len(slots) + 1)):
            raise ConfigurationError(
                f"uplink indices must form a permutation of 1..{len(slots)}, got {slots}")
        if max(slots) > n:
            raise ConfigurationError("uplink indices exceed n_implants")
        if self.duration_frames < 0:
            raise ConfigurationError("duration_frames must be >= 0")
        if self.pulse_period is not None:
            cycles = self.pulse_period * self.channel.carrier_freq
            if abs(cycles - round(cycles)) > 1e-6:
                raise ConfigurationError(
                    "pulse_period must be an integer number of carrier cycles")
        if self.downlink_cps not in wire.CYCLES_PER_SYMBOL_CHOICES:
            raise ConfigurationError(
                f"downlink_cps must be one of {wire.CYCLES_PER_SYMBOL_CHOICES}")

    @property
    def sim_rate(self) -> float:
        return self.samples_per_cycle * self.channel.carrier_freq

    def slot_map(self) -> dict:
        return {s.link.uplink_index: s for s in self.implants}


@dataclass
class ImplantResult:
    implant_id: int
    slot: int
    config: LinkConfig
    data_voltages: np.ndarray = None
    header_voltages: np.ndarray = None
    used_voltages: np.ndarray = None
    centroids: np.ndarray = None
    thresholds: np.ndarray = None
    cluster_fallback: bool = False
    decoded_bits: np.ndarray = None
    decoded_levels: np.ndarray = None
    reference_levels: np.ndarray = None
    frame_counts: list = field(default_factory=list)
    header_errors: int = 0
    diagnostics: dict = None
    ber: dm.BERReport = None
    throughput_bps: float = 0.0
    eye: list = field(default_factory=list)
    reconstruction: dict = None
    snapshot: str = ""


@dataclass
class RunArtifacts:
    scenario_digest: str
    schedule: ir.FrameSchedule
    uplink_t0: float
    frames_run: int
    implants: dict
    transmitters_per_pulse: list
    aggregate_throughput_bps: float = 0.0
    spectral_efficiency_kbps_per_mhz: float = 0.0
    recording: Waveform = None
    config_acks: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    def validate_aggregate(self):
        total = sum(r.throughput_bps for r in self.implants.values())
        if abs(total - self.aggregate_throughput_bps) > 1e-6 * max(total, 1.0):
            raise ConfigurationError("aggregate throughput does not match the sum")


# ---------------------------------------------------------------------------
# Scenario files (strict JSON schema, version 1)
# ---------------------------------------------------------------------------

_CHANNEL_KEYS = {"depth_m", "sound_speed_m_s", "attenuation_db_cm_mhz",
                 "carrier_freq_hz", "noise_rms", "backscatter_efficiency"}
_PIEZO_KEYS = {"f_series_hz", "f_parallel_hz", "z_series_ohm", "z_parallel_ohm",
               "v_source_v"}
_AFE_KEYS = {"gain", "full_scale_v", "input_noise_rms_v", "chop_freq_hz"}
_IMPLANT_KEYS = {"implant_id", "uplink_index", "n_implants", "samples_per_packet",
                 "ask_levels", "cycles_per_symbol", "idac_unit_current_a",
                 "lfsr_enable", "adc_slice", "piezo", "afe", "input_signal"}
_TOP_KEYS = {"version", "seed", "samples_per_cycle", "downlink_cycles_per_symbol",
             "pulse_period_s", "duration_frames", "channel", "implants"}


def _check_keys(obj: dict, allowed: set, where: str):
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigurationError(f"unknown key(s) {sorted(unknown)} in {where}")


def scenario_from_dict(doc: dict) -> Scenario:
    _check_keys(doc, _TOP_KEYS, "scenario")
    if doc.get("version") != SCENARIO_VERSION:
        raise ConfigurationError(
            f"scenario version must be {SCENARIO_VERSION}, got {doc.get('version')}")
    ch_doc = dict(doc.get("channel", {}))
    _check_keys(ch_doc, _CHANNEL_KEYS, "channel")
    channel = ChannelConfig(
        depth=ch_doc.get("depth_m", 0.090),
        sound_speed=ch_doc.get("sound_speed_m_s", 1480.0),
        attenuation=ch_doc.get("attenuation_db_cm_mhz", 0.25),
        carrier_freq=ch_doc.get("carrier_freq_hz", 2.0e6),
        noise_rms=ch_doc.get("noise_rms", 0.0),
        backscatter_efficiency=ch_doc.get("backscatter_efficiency", 1.0),
        rng_seed=doc.get("seed", 0),
    )
    implants = []
    for i, im_doc in enumerate(doc.get("implants", [])):
        im_doc = dict(im_doc)
        _check_keys(im_doc, _IMPLANT_KEYS, f"implants[{i}]")
        pz_doc = dict(im_doc.get("piezo", {}))
        _check_keys(pz_doc, _PIEZO_KEYS, f"implants[{i}].piezo")
        piezo = PiezoModel(
            f_series=pz_doc.get("f_series_hz", 1.82e6),
            f_parallel=pz_doc.get("f_parallel_hz", 2.00e6),
            z_thevenin_series=pz_doc.get("z_series_ohm", 2e3),
            z_thevenin_parallel=pz_doc.get("z_parallel_ohm", 20e3),
            v_source=pz_doc.get("v_source_v", 1.0),
        )
        afe_doc = dict(im_doc.get("afe", {}))
        _check_keys(afe_doc, _AFE_KEYS, f"implants[{i}].afe")
        afe = AfeModel(
            gain=afe_doc.get("gain", 70.0),
            full_scale=afe_doc.get("full_scale_v", 2.0),
            input_noise_rms=afe_doc.get("input_noise_rms_v", 9.8e-6),
            chop_freq=afe_doc.get("chop_freq_hz", 50e3),
            sample_rate=afe_doc.get("chop_freq_hz", 50e3) / 8,
        )
        implant_id = im_doc["implant_id"]
        link = LinkConfig(
            implant_id=implant_id,
            uplink_index=im_doc.get("uplink_index", 1),
            n_implants=im_doc.get("n_implants", len(doc.get("implants", [1]))),
            samples_per_packet=im_doc.get("samples_per_packet", 12),
            ask_levels=im_doc.get("ask_levels", 16),
            cycles_per_symbol=im_doc.get("cycles_per_symbol", 6),
            idac_unit_current=im_doc.get("idac_unit_current_a", 4e-6),
            lfsr_enable=im_doc.get("lfsr_enable", True),
            adc_slice=AdcSlice[im_doc.get("adc_slice", "S0_7")],
        )
        implants.append(ImplantSpec(implant_id, link, piezo, afe,
                                    im_doc.get("input_signal")))
    return Scenario(
        channel=channel,
        implants=implants,
        duration_frames=doc.get("duration_frames", 1),
        seed=doc.get("seed", 0),
        samples_per_cycle=doc.get("samples_per_cycle", 64),
        downlink_cps=doc.get("downlink_cycles_per_symbol", 8),
        pulse_period=doc.get("pulse_period_s"),
    )


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "version": SCENARIO_VERSION,
        "seed": sc.seed,
        "samples_per_cycle": sc.samples_per_cycle,
        "downlink_cycles_per_symbol": sc.downlink_cps,
        "pulse_period_s": sc.pulse_period,
        "duration_frames": sc.duration_frames,
        "channel": {
            "depth_m": sc.channel.depth,
            "sound_speed_m_s": sc.channel.sound_speed,
            "attenuation_db_cm_mhz": sc.channel.attenuation,
            "carrier_freq_hz": sc.channel.carrier_freq,
            "noise_rms": sc.channel.noise_rms,
            "backscatter_efficiency": sc.channel.backscatter_efficiency,
        },
        "implants": [
            {
                "implant_id": s.implant_id,
                "uplink_index": s.link.uplink_index,
                "n_implants": s.link.n_implants,
                "samples_per_packet": s.link.samples_per_packet,
                "ask_levels": s.link.ask_levels,
                "cycles_per_symbol": s.link.cycles_per_symbol,
                "idac_unit_current_a": s.link.idac_unit_current,
                "lfsr_enable": s.link.lfsr_enable,
                "adc_slice": s.link.adc_slice.name,
                "piezo": {
                    "f_series_hz": s.piezo.f_series,
                    "f_parallel_hz": s.piezo.f_parallel,
                    "z_series_ohm": s.piezo.z_thevenin_series,
                    "z_parallel_ohm": s.piezo.z_thevenin_parallel,
                    "v_source_v": s.piezo.v_source,
                },
                "afe": {
                    "gain": s.afe.gain,
                    "full_scale_v": s.afe.full_scale,
                    "input_noise_rms_v": s.afe.input_noise_rms,
                    "chop_freq_hz": s.afe.chop_freq,
                },
                "input_signal": s.input_signal,
            }
            for s in sc.implants
        ],
    }


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


def save_scenario(sc: Scenario, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(sc), fh, indent=2)
        fh.write("\n")


def scenario_digest(sc: Scenario) -> str:
    """Configuration digest, independent of the seed."""
    doc = scenario_to_dict(sc)
    doc.pop("seed", None)
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_input_signal(path, base_dir=None):
    """DNWF or CSV input, resampled to the AFE rate with a windowed-sinc FIR.

    Returns a callable mapping seconds-since-uplink-entry to volts
    (held at the last sample beyond the end).
    """
    import os
    from fractions import Fraction

    from scipy.signal import resample_poly

    p = str(path)
    if base_dir is not None and not os.path.isabs(p):
        p = os.path.join(str(base_dir), p)
    wave = read_dnwf(p) if p.endswith(".dnwf") else read_csv(p)
    ratio = Fraction(AFE_SAMPLE_RATE / wave.sample_rate).limit_denominator(10000)
    if ratio == 1:
        resampled = wave.samples
    else:
        resampled = resample_poly(wave.samples, ratio.numerator, ratio.denominator)
    dt = 1.0 / AFE_SAMPLE_RATE

    def sample(rel_t: float) -> float:
        idx = min(max(int(round(rel_t / dt)), 0), resampled.size - 1)
        return float(resampled[idx])

    return sample


# ---------------------------------------------------------------------------
# The pulse-level simulator
# ---------------------------------------------------------------------------

class LinkSimulator:
    """Drives the interrogator, channel, and implant population pulse by pulse."""

    def __init__(self, scenario: Scenario, base_dir=None):
        self.sc = scenario
        ch = scenario.channel
        self.sim_rate = scenario.sim_rate
        self.spc = samples_per_cycle(ch.carrier_freq, self.sim_rate)
        ss = np.random.SeedSequence(scenario.seed)
        children = ss.spawn(1 + len(scenario.implants))
        self.channel_rng = np.random.default_rng(children[0])
        self.implants = []
        for spec, child in zip(scenario.implants, children[1:]):
            input_fn = (load_input_signal(spec.input_signal, base_dir)
                        if spec.input_signal else None)
            self.implants.append(Implant(
                spec.implant_id, spec.piezo, spec.afe,
                np.random.default_rng(child), input_fn))
        self.t = 0.0
        self.schedule = None
        self.uplink_t0 = None
        self.config_acks = {}
        self.transmitters_per_pulse = []
        self.fifo_depth_log = []
        self._pulse_index = 0

    # -- helpers -----------------------------------------------------------

    def _snap(self, t: float) -> float:
        return round(t * self.sim_rate) / self.sim_rate

    def _gate_segment(self, rx: Waveform, rx_open: float, rx_close: float) -> Waveform:
        """Receiver view of a gate: echo (if any) plus channel noise on the grid."""
        ch = self.sc.channel
        i0 = int(round((rx_open - 0.0) * self.sim_rate))
        i1 = int(round((rx_close - 0.0) * self.sim_rate))
        n = i1 - i0
        t0 = i0 / self.sim_rate
        out = np.zeros(n)
        if rx is not None and len(rx):
            j0 = int(round((rx.t0 - t0) * self.sim_rate))
            src0 = max(0, -j0)
            dst0 = max(0, j0)
            count = min(len(rx) - src0, n - dst0)
            if count > 0:
                out[dst0:dst0 + count] = rx.samples[src0:src0 + count]
        if ch.noise_rms > 0:
            out = out + self.channel_rng.normal(0.0, ch.noise_rms, n)
        return Waveform(out, self.sim_rate, t0)

    def _demod_window(self, segment: Waveform, end_times, pulse_index: int, slot: int):
        """Envelope chain + end-of-symbol sampling for one gate."""
        ch = self.sc.channel
        filtered = dm.highpass(segment)
        env = dm.make_envelope_trace(filtered, ch.carrier_freq)
        schedule = dm.SymbolSchedule(end_times, ch.carrier_freq, pulse_index, slot)
        frame = dm.sample_symbols(env.differential, schedule)
        return frame, env

    # -- Config Mode -------------------------------------------------------

    def send_config_pulse(self, target_id: int, params: LinkConfig,
                          corrupt_symbol: int = None, collect_ack: bool = True):
        """One Config Mode pulse; returns the demodulated ack id or None."""
        ch = self.sc.channel
        desc = ir.build_config_pulse(
            params, target_id, carrier_freq=ch.carrier_freq,
            downlink_cps=self.sc.downlink_cps, corrupt_symbol=corrupt_symbol)
        ack_window_s = desc.segment("uplink_window").cycles / ch.carrier_freq
        if ack_window_s > 2 * ch.tof - ir.MIN_SWITCH_TIME_S:
            raise ScheduleError(
                f"config ack window {ack_window_s * 1e6:.1f} us exceeds the 2*ToF "
                f"budget {2 * ch.tof * 1e6:.1f} us")
        desc.t0 = self._snap(self.t)
        tx = synthesize_tx(desc, ch, self.sim_rate)
        incident = propagate(tx, ch)
        echoes = []
        for imp in self.implants:
            trace = imp.receive_config_pulse(incident, ch.carrier_freq)
            if trace is not None and not trace.is_zero():
                echoes.append(propagate(backscatter(incident, trace, ch), ch))
        decoded = None
        if collect_ack:
            decoded = self._demod_ack(desc, params, echoes)
        self.t = self._snap(desc.t0 + desc.duration + 2 * ch.tof
                            + CONFIG_GAP_CYCLES / ch.carrier_freq)
        return decoded

    def _demod_ack(self, desc, params, echoes):
        """Demodulate the "0101"+id acknowledgement out of the ack window."""
        ch = self.sc.channel
        f = ch.carrier_freq
        cps = params.cycles_per_symbol
        ack_start = (desc.t0 + desc.segment_start_cycle("uplink_window") / f
                     + 2 * ch.tof)
        n_sym = ir.ACK_SYMBOLS
        pad = ACK_GATE_PAD_CYCLES / f
        rx = superpose(echoes) if echoes else None
        seg = self._gate_segment(rx, ack_start - pad, ack_start + n_sym * cps / f + pad)
        end_times = ack_start + (np.arange(n_sym) + 1) * cps / f
        try:
            frame, _ = self._demod_window(seg, end_times, self._pulse_index, 0)
            cluster = dm.cluster_thresholds(frame.echo_voltages, 2)
        except ConfigurationError:
            return None
        c0, c1 = cluster.centroids[0], cluster.centroids[-1]
        levels = dm.demap_levels(frame.echo_voltages, cluster.thresholds)
        spread = max(float(np.std(frame.echo_voltages[levels == k]))
                     for k in np.unique(levels))
        # separation guard: a silent or noise-only window must not ack
        if c1 - c0 < max(6 * spread, 1e-6):
            return None
        bits = levels.astype(int)
        if tuple(bits[:4]) != wire.ACK_HEADER:
            return None
        return wire.bits_to_int(bits[4:12])

    def send_config_probe(self, target_id: int):
        """Discovery probe: default link parameters, returns the acked id."""
        return self.send_config_pulse(target_id, LinkConfig(implant_id=1))

    def run_config_phase(self):
        """Program every implant with its scenario registers, then switch modes."""
        for spec in self.sc.implants:
            ack = self.send_config_pulse(spec.implant_id, spec.link)
            self.config_acks[spec.implant_id] = (ack == spec.implant_id)
        self.send_config_pulse(0, LinkConfig(implant_id=1), collect_ack=False)
        for imp in self.implants:
            if imp.mode is not Mode.UPLINK:
                raise ScheduleError(
                    f"implant {imp.implant_id} failed to enter Uplink Mode")
        self._build_schedule()

    def _build_schedule(self):
        ch = self.sc.channel
        widest = max(self.implants, key=lambda im: ir.uplink_window_cycles(im.state.config))
        self.schedule = ir.plan_uplink_timing(
            widest.state.config, ch.tof, ch.carrier_freq,
            pulse_period=self.sc.pulse_period)
        self.uplink_t0 = self._snap(self.t + PREBUFFER_FRAMES * self.schedule.frame_duration)

    # -- Uplink Mode -------------------------------------------------------

    def run_frames(self, n_frames: int, demodulate: bool = True,
                   keep_recording: bool = False):
        """Run TDMA frames; returns per-implant demod accumulators.

        With demodulate=False only the protocol layer advances (pulse
        counting, FIFO flow, gamma traces) -- used for timing and
        exclusivity studies.
        """
        ch = self.sc.channel
        f = ch.carrier_freq
        sched = self.schedule
        slot_map = {im.state.config.uplink_index: im for im in self.implants}
        widest = max(self.implants, key=lambda im: ir.uplink_window_cycles(im.state.config))
        desc = ir.build_uplink_pulse(sched, widest.state.config)
        acc = {im.implant_id: {"header": [], "data": [], "eye": []}
               for im in self.implants}
        recording = None
        if keep_recording:
            total = int(round(n_frames * sched.pulses_per_frame
                              * sched.pulse_period * self.sim_rate))
            if total > MAX_RECORDING_SAMPLES:
                raise ConfigurationError(
                    f"recording of {total} samples exceeds the "
                    f"{MAX_RECORDING_SAMPLES}-sample cap; shorten the run")
            recording = np.zeros(total)
        incident0 = None
        if demodulate or keep_recording:
            # the TX pulse is identical every slot; synthesize and
            # propagate once, then shift its grid per pulse
            desc.t0 = 0.0
            incident0 = propagate(synthesize_tx(desc, ch, self.sim_rate), ch)
        cu_s = sched.charge_up_cycles / f
        n_pulses = n_frames * sched.pulses_per_frame
        for j in range(n_pulses):
            t0p = self._snap(self.uplink_t0 + j * sched.pulse_period)
            slot = (j % sched.pulses_per_frame) + 1
            t_arrival = t0p + ch.tof
            incident = None
            if incident0 is not None:
                incident = Waveform(incident0.samples, self.sim_rate,
                                    self._snap(incident0.t0 + t0p))
            traces = []
            for im in self.implants:
                im.advance_sampling(t_arrival + cu_s)
                trace = im.on_uplink_pulse(
                    t_arrival, sched.charge_up_cycles, f,
                    incident_span=incident if incident is not None else None)
                if trace is not None and not trace.is_zero():
                    traces.append((im, trace))
            self.transmitters_per_pulse.append(len(traces))
            self.fifo_depth_log.append(
                tuple(len(im.state.fifo) for im in self.implants))
            self._pulse_index += 1
            if not (demodulate or keep_recording):
                continue
            echoes = [propagate(backscatter(incident, tr, ch), ch)
                      for _, tr in traces]
            rx = superpose(echoes) if echoes else None
            try:
                rx_open, rx_close = ir.rx_gate(sched, t0p)
            except ScheduleError as exc:
                raise ScheduleError(
                    f"frame {j // sched.pulses_per_frame}, pulse {j}: {exc}"
                ) from exc
            imp = slot_map.get(slot)
            if imp is None and rx is None and not keep_recording:
                continue
            seg = self._gate_segment(rx, rx_open, rx_close)
            if keep_recording:
                k0 = int(round((seg.t0 - self.uplink_t0) * self.sim_rate))
                if 0 <= k0 and k0 + len(seg) <= recording.size:
                    recording[k0:k0 + len(seg)] = seg.samples
            if imp is None or not demodulate:
                continue
            cfg = imp.state.config
            header_syms = len(wire.UPLINK_HEADER) + wire.COUNT_FIELD_BITS
            n_sym = header_syms + cfg.data_symbols_per_packet
            sym_end = (t0p + cu_s + 2 * ch.tof
                       + (np.arange(n_sym) + 1) * cfg.cycles_per_symbol / f)
            frame, env = self._demod_window(seg, sym_end, j, slot)
            acc[imp.implant_id]["header"].append(frame.echo_voltages[:header_syms])
            acc[imp.implant_id]["data"].append(frame.echo_voltages[header_syms:])
            if len(acc[imp.implant_id]["eye"]) < EYE_PULSES:
                acc[imp.implant_id]["eye"].append(
                    _eye_traces(env.differential, sym_end[header_syms - 1:]))
        self.t = self._snap(self.uplink_t0 + n_pulses * sched.pulse_period)
        rec_wave = None
        if keep_recording:
            rec_wave = Waveform(recording, self.sim_rate, self.uplink_t0)
        return acc, rec_wave


def _eye_traces(env: Waveform, boundaries):
    """(relative time, voltage) trajectories for symbols between boundaries."""
    out = []
    t = env.times()
    for k in range(len(boundaries) - 1):
        lo, hi = boundaries[k], boundaries[k + 1]
        sel = (t >= lo) & (t < hi)
        if np.any(sel):
            out.append((t[sel] - lo, env.samples[sel].copy()))
    return out


# ---------------------------------------------------------------------------
# Experiment runners
# ---------------------------------------------------------------------------

def run_scenario(scenario: Scenario, out_dir=None, keep_recording: bool = None,
                 base_dir=None) -> RunArtifacts:
    """Full protocol run: configure, switch, uplink frames, demodulate, report.

    With out_dir set, writes recording.dnwf, schedule.json, reports.json,
    the CSV artifacts and their rendered figures under that directory.
    """
    if keep_recording is None:
        keep_recording = out_dir is not None
    sim = LinkSimulator(scenario, base_dir=base_dir)
    sim.run_config_phase()
    acc, recording = sim.run_frames(scenario.duration_frames,
                                    keep_recording=keep_recording)
    artifacts = _finalize(sim, acc, recording)
    if out_dir is not None:
        from . import reports
        artifacts.files = reports.write_run_reports(artifacts, scenario, out_dir)
    return artifacts


def _finalize(sim: LinkSimulator, acc, recording) -> RunArtifacts:
    sc = sim.sc
    sched = sim.schedule
    results = {}
    total_time = sc.duration_frames * sched.frame_duration
    for im in sim.implants:
        cfg = im.state.config
        diag = im.state.diagnostics
        res = ImplantResult(im.implant_id, cfg.uplink_index, cfg,
                            snapshot=im.snapshot(),
                            diagnostics={
                                "lock_failures": diag.lock_failures,
                                "rejected_payloads": diag.rejected_payloads,
                                "manchester_violations": diag.manchester_violations,
                                "clamp_events": diag.clamp_events,
                                "fifo_drops": diag.fifo_drops,
                            })
        a = acc[im.implant_id]
        if a["data"]:
            res.header_voltages = np.concatenate(a["header"])
            res.data_voltages = np.concatenate(a["data"])
            res.eye = [tr for pulse in a["eye"] for tr in pulse]
            _demap_implant(res, cfg, a)
            if cfg.lfsr_enable and res.decoded_bits is not None and res.decoded_bits.size:
                seed = lfsr_seed_for_id(im.implant_id)
                ref = prbs_bits(seed, 0, res.decoded_bits.size)
                ref_levels = _bits_to_levels(ref, cfg)
                res.ber = dm.compute_ber(res.decoded_bits, ref,
                                         rx_levels=res.decoded_levels,
                                         ref_levels=ref_levels,
                                         n_levels=cfg.ask_levels)
            elif not cfg.lfsr_enable:
                res.reconstruction = _reconstruct(res, im, cfg)
            if total_time > 0 and res.decoded_bits is not None:
                res.throughput_bps = res.decoded_bits.size / total_time
        results[im.implant_id] = res
    aggregate = sum(r.throughput_bps for r in results.values())
    artifacts = RunArtifacts(
        scenario_digest=scenario_digest(sc),
        schedule=sched,
        uplink_t0=sim.uplink_t0,
        frames_run=sc.duration_frames,
        implants=results,
        transmitters_per_pulse=list(sim.transmitters_per_pulse),
        aggregate_throughput_bps=aggregate,
        spectral_efficiency_kbps_per_mhz=(
            aggregate / 1e3) / (sc.channel.carrier_freq / 1e6),
        recording=recording,
        config_acks=dict(sim.config_acks),
    )
    artifacts.validate_aggregate()
    return artifacts


def _demap_implant(res: ImplantResult, cfg: LinkConfig, acc):
    """Per-implant thresholds, then per-frame count decode and data demap.

    In LFSR characterization mode the link was configured by this same
    receiver, so every frame is demapped at the configured packet size:
    a corrupted header or count field is counted as a diagnostic but
    cannot desynchronize the golden-reference comparison. In ADC mode
    the decoded count field governs (it signals FIFO underruns).
    """
    header_cluster = dm.cluster_thresholds(res.header_voltages, 2)
    data_cluster = dm.cluster_thresholds(res.data_voltages, cfg.ask_levels)
    res.centroids = data_cluster.centroids
    res.thresholds = data_cluster.thresholds
    res.cluster_fallback = data_cluster.fallback_used
    if data_cluster.fallback_used:
        # data did not exercise the constellation (e.g. a near-constant
        # input); the header's code-0/code-15 symbols give the absolute
        # level scale instead
        c0, c15 = header_cluster.centroids[0], header_cluster.centroids[-1]
        levels = np.arange(cfg.ask_levels) / (cfg.ask_levels - 1)
        res.centroids = c0 + (c15 - c0) * levels
        res.thresholds = (res.centroids[:-1] + res.centroids[1:]) / 2
        data_cluster = dm.ClusterResult(res.centroids, res.thresholds, True)
    bits_chunks = []
    level_chunks = []
    volt_chunks = []
    spw = cfg.symbols_per_word
    for hdr_v, data_v in zip(acc["header"], acc["data"]):
        hdr_bits = dm.demap_levels(hdr_v, header_cluster.thresholds)
        header_ok = tuple(hdr_bits[:4]) == wire.UPLINK_HEADER
        if not header_ok:
            res.header_errors += 1
        count = wire.decode_count_field(hdr_bits[4:8], cfg.samples_per_packet)
        if cfg.lfsr_enable or not header_ok:
            count = cfg.samples_per_packet
        res.frame_counts.append(count)
        n_sym = count * spw
        levels = dm.demap_levels(data_v[:n_sym], data_cluster.thresholds)
        level_chunks.append(levels)
        volt_chunks.append(data_v[:n_sym])
        bits_chunks.append(dm.levels_to_bits(levels, cfg.ask_levels))
    res.decoded_bits = (np.concatenate(bits_chunks) if bits_chunks
                        else np.zeros(0, dtype=np.uint8))
    res.decoded_levels = (np.concatenate(level_chunks) if level_chunks
                          else np.zeros(0, dtype=np.int64))
    res.used_voltages = (np.concatenate(volt_chunks) if volt_chunks
                         else np.zeros(0))


def _bits_to_levels(bits: np.ndarray, cfg: LinkConfig) -> np.ndarray:
    m = cfg.bits_per_symbol
    usable = (bits.size // m) * m
    groups = bits[:usable].reshape(-1, m)
    weights = 1 << np.arange(m - 1, -1, -1)
    return groups @ weights


def _reconstruct(res: ImplantResult, im: Implant, cfg: LinkConfig):
    """Decoded words back to volts via the AFE inverse, with alignment metrics."""
    width = cfg.word_width
    usable = (res.decoded_bits.size // width) * width
    words = res.decoded_bits[:usable].reshape(-1, width)
    weights = 1 << np.arange(width - 1, -1, -1)
    word_vals = words @ weights
    start = cfg.adc_slice.start
    fill = (1 << (start - 1)) if start > 0 else 0
    codes12 = (word_vals.astype(np.int64) << start) + fill
    decoded_v = np.array([adc_code_to_voltage(c, im.afe) for c in codes12])
    ticks = im._tick_inputs[:decoded_v.size]
    input_v = np.array([v for _, v in ticks])
    n = min(decoded_v.size, input_v.size)
    out = {"decoded_volts": decoded_v[:n], "input_volts": input_v[:n],
           "tick_times": np.array([t for t, _ in ticks[:n]])}
    if n:
        err = decoded_v[:n] - input_v[:n]
        denom = float(np.std(input_v[:n] - np.mean(input_v[:n])))
        rmse = float(np.sqrt(np.mean(err**2)))
        out["rmse_volts"] = rmse
        out["nrmse"] = rmse / denom if denom > 0 else float("inf")
    return out


def reconstruct_signal(artifacts: RunArtifacts, implant_id: int):
    """Decoded sample stream plus alignment metrics for one implant."""
    res = artifacts.implants.get(implant_id)
    if res is None:
        raise ConfigurationError(f"no implant {implant_id} in this run")
    if res.reconstruction is None:
        raise ConfigurationError(
            f"implant {implant_id} ran without an input signal (LFSR mode?)")
    return res.reconstruction


def ber_sweep(base: Scenario, noise_levels, min_bits: int = 1000,
              ask_levels_list=(2, 4, 8, 16), out_dir=None):
    """One run per (ASK level, noise RMS); returns result rows.

    Each row carries the Monte Carlo BER plus the per-level voltage
    statistics an external error-rate model needs.
    """
    if min_bits < 1000:
        raise ConfigurationError("min_bits must be >= 1000")
    rows = []
    for levels in ask_levels_list:
        for noise in noise_levels:
            sc = derive_sweep_scenario(base, levels, float(noise), min_bits)
            art = run_scenario(sc, keep_recording=False)
            res = next(iter(art.implants.values()))
            stats = _level_stats(res)
            rows.append({
                "ask_levels": levels,
                "cycles_per_symbol": res.config.cycles_per_symbol,
                "noise_rms": float(noise),
                "bits": res.ber.bits_compared if res.ber else 0,
                "errors": res.ber.bit_errors if res.ber else 0,
                "ber": res.ber.ber_point if res.ber else float("nan"),
                "ber_bound": res.ber.ber_upper_bound if res.ber else float("nan"),
                "sync_failed": bool(res.ber.sync_failed) if res.ber else True,
                **stats,
            })
    if out_dir is not None:
        from . import reports
        reports.write_ber_reports(rows, out_dir)
    return rows


def _level_stats(res: ImplantResult):
    """Empirical per-level mean/std of the sampled echo voltages.

    Groups the demapped voltages by the *transmitted* level (known from
    the PRBS reference), so the statistics stay independent of the
    threshold decisions they will be checked against.
    """
    if res.ber is None or res.used_voltages is None:
        return {}
    cfg = res.config
    seed = lfsr_seed_for_id(res.implant_id)
    n_sym = res.used_voltages.size
    ref_bits = prbs_bits(seed, 0, n_sym * cfg.bits_per_symbol)
    ref_levels = _bits_to_levels(ref_bits, cfg)[:n_sym]
    volts = res.used_voltages
    mus, sigmas = [], []
    for k in range(cfg.ask_levels):
        sel = volts[ref_levels == k]
        mus.append(float(np.mean(sel)) if sel.size else float("nan"))
        sigmas.append(float(np.std(sel)) if sel.size else float("nan"))
    return {"level_means": mus, "level_stds": sigmas,
            "thresholds": [float(x) for x in res.thresholds]
            if res.thresholds is not None else []}


def discover(scenario: Scenario, candidate_ids=None) -> set:
    """Implant discovery on a fresh simulator for the scenario population."""
    sim = LinkSimulator(scenario)
    return ir.discover_implants(sim, candidate_ids)


def replay_demod(recording: Waveform, schedule_doc: dict):
    """Offline demodulation of a DNWF recording against a schedule file.

    schedule_doc is the schedule.json written by run_scenario. Returns
    one ImplantResult per described slot.
    """
    f = schedule_doc["carrier_freq_hz"]
    tof = schedule_doc["tof_s"]
    sched = ir.FrameSchedule(
        pulse_period=schedule_doc["pulse_period_s"],
        pulses_per_frame=schedule_doc["pulses_per_frame"],
        rx_gate_offset=tof,
        carrier_freq=f,
        charge_up_cycles=schedule_doc["charge_up_cycles"],
        window_cycles=schedule_doc["window_cycles"],
    )
    uplink_t0 = schedule_doc["uplink_t0_s"]
    n_pulses = schedule_doc["frames"] * sched.pulses_per_frame
    segments = dm.segment_pulses(recording, sched, t_first_pulse=uplink_t0,
                                 max_pulses=n_pulses)
    slots = {s["slot"]: s for s in schedule_doc["slots"]}
    acc = {s["implant_id"]: {"header": [], "data": [], "eye": []}
           for s in slots.values()}
    cu_s = sched.charge_up_duration
    header_syms = len(wire.UPLINK_HEADER) + wire.COUNT_FIELD_BITS
    for j, seg in enumerate(segments):
        slot = (j % sched.pulses_per_frame) + 1
        info = slots.get(slot)
        if info is None:
            continue
        t0p = uplink_t0 + j * sched.pulse_period
        cps = info["cycles_per_symbol"]
        spw = (wire.word_width_for_levels(info["ask_levels"])
               // wire.bits_per_symbol(info["ask_levels"]))
        n_sym = header_syms + info["samples_per_packet"] * spw
        sym_end = t0p + cu_s + 2 * tof + (np.arange(n_sym) + 1) * cps / f
        filtered = dm.highpass(seg)
        env = dm.make_envelope_trace(filtered, f)
        frame = dm.sample_symbols(
            env.differential, dm.SymbolSchedule(sym_end, f, j, slot))
        acc[info["implant_id"]]["header"].append(frame.echo_voltages[:header_syms])
        acc[info["implant_id"]]["data"].append(frame.echo_voltages[header_syms:])
    results = []
    for info in slots.values():
        cfg = LinkConfig(
            implant_id=info["implant_id"],
            uplink_index=info["slot"],
            n_implants=sched.pulses_per_frame,
            samples_per_packet=info["samples_per_packet"],
            ask_levels=info["ask_levels"],
            cycles_per_symbol=info["cycles_per_symbol"],
            lfsr_enable=info["lfsr_enable"],
        )
        res = ImplantResult(info["implant_id"], info["slot"], cfg)
        a = acc[info["implant_id"]]
        if a["data"]:
            res.header_voltages = np.concatenate(a["header"])
            res.data_voltages = np.concatenate(a["data"])
            _demap_implant(res, cfg, a)
            if cfg.lfsr_enable and res.decoded_bits.size:
                seed = lfsr_seed_for_id(info["implant_id"])
                ref = prbs_bits(seed, 0, res.decoded_bits.size)
                res.ber = dm.compute_ber(
                    res.decoded_bits, ref, rx_levels=res.decoded_levels,
                    ref_levels=_bits_to_levels(ref, cfg), n_levels=cfg.ask_levels)
        results.append(res)
    return results


# ---------------------------------------------------------------------------
# Scenario builders
# ---------------------------------------------------------------------------

def loopback_scenario(ask_levels: int, cycles_per_symbol: int,
                      samples_per_packet: int = 16, noise_rms: float = 0.0,
                      seed: int = 1, min_bits: int = 100_000,
                      samples_per_cycle: int = 64,
                      backscatter_efficiency: float = 1.0) -> Scenario:
    """Single-implant scenario sized so the uplink window fits the echo budget.

    Depth is chosen so 2*ToF covers the uplink (and ack) window; the
    pulse period is stretched so the 6.25 kS/s source fills a whole
    packet per pulse (no underruns).
    """
    carrier = 2.0e6
    link = LinkConfig(
        implant_id=1, uplink_index=1, n_implants=1,
        samples_per_packet=samples_per_packet, ask_levels=ask_levels,
        cycles_per_symbol=cycles_per_symbol, idac_unit_current=4e-6,
        lfsr_enable=True,
        adc_slice=AdcSlice.S3_11 if ask_levels == 8 else AdcSlice.S0_7)
    window_cycles = ir.uplink_window_cycles(link)
    ack_cycles = ir.ACK_SYMBOLS * cycles_per_symbol + ir.ACK_WINDOW_PAD_CYCLES
    budget_cycles = max(window_cycles, ack_cycles) + 8
    c = 1480.0
    depth = max(0.090, c * (budget_cycles / carrier + ir.MIN_SWITCH_TIME_S) / 2)
    tof = depth / c
    min_period = ((ir.MAX_CHARGE_UP_CYCLES + window_cycles
                   + ir.RX_GATE_GUARD_CYCLES) / carrier + 2 * tof)
    fill_cycles = samples_per_packet * carrier / AFE_SAMPLE_RATE
    period_cycles = max(int(math.ceil(min_period * carrier - 1e-6)),
                        int(math.ceil(fill_cycles - 1e-6)))
    bits_per_frame = samples_per_packet * link.word_width
    frames = int(math.ceil(min_bits / bits_per_frame))
    channel = ChannelConfig(
        depth=depth, sound_speed=c, attenuation=0.25, carrier_freq=carrier,
        noise_rms=noise_rms, backscatter_efficiency=backscatter_efficiency,
        rng_seed=seed)
    piezo = PiezoModel(v_source=1.6)
    return Scenario(
        channel=channel,
        implants=[ImplantSpec(1, link, piezo, AfeModel())],
        duration_frames=frames,
        seed=seed,
        samples_per_cycle=samples_per_cycle,
        pulse_period=period_cycles / carrier,
    )


def derive_sweep_scenario(base: Scenario, ask_levels: int, noise_rms: float,
                          min_bits: int) -> Scenario:
    """Clone a loopback-style scenario at a different ASK level and noise."""
    link0 = base.implants[0].link
    return loopback_scenario(
        ask_levels, link0.cycles_per_symbol, link0.samples_per_packet,
        noise_rms=noise_rms, seed=base.seed, min_bits=min_bits,
        samples_per_cycle=base.samples_per_cycle,
        backscatter_efficiency=base.channel.backscatter_efficiency)


def reference_scenario(n_present: int = 8, n_implants: int = 8,
                       duration_frames: int = 60, noise_rms: float = 0.0,
                       ask_levels: int = 16, seed: int = 7,
                       samples_per_packet: int = None) -> Scenario:
    """Multi-implant TDMA scenario at the reference timing.

    240 us pulses (one slot per implant, 1.92 ms frames at 8 implants),
    16-level ASK at 6 cycles/symbol, 90 mm in the oil-like channel.
    samples_per_packet defaults to the value that balances the
    6.25 kS/s data source against the frame period (12 at 8 implants:
    96 bits per implant per frame, 50 kb/s each, 400 kb/s aggregate).
    """
    if not 1 <= n_present <= n_implants <= 8:
        raise ConfigurationError("need 1 <= n_present <= n_implants <= 8")
    pulse_period = 240e-6
    if samples_per_packet is None:
        exact = AFE_SAMPLE_RATE * n_implants * pulse_period
        samples_per_packet = int(round(exact))
        if abs(exact - samples_per_packet) > 1e-6:
            raise ConfigurationError(
                f"no integer packet size balances {n_implants} slots at "
                f"{pulse_period * 1e6:.0f} us; pass samples_per_packet explicitly")
    channel = ChannelConfig(depth=0.090, sound_speed=1480.0, attenuation=0.25,
                            carrier_freq=2.0e6, noise_rms=noise_rms,
                            backscatter_efficiency=1.0, rng_seed=seed)
    cps = 6 if ask_levels != 8 else 4
    implants = []
    for k in range(n_present):
        link = LinkConfig(
            implant_id=k + 1, uplink_index=k + 1, n_implants=n_implants,
            samples_per_packet=samples_per_packet, ask_levels=ask_levels,
            cycles_per_symbol=cps, idac_unit_current=4e-6, lfsr_enable=True,
            adc_slice=AdcSlice.S3_11 if ask_levels == 8 else AdcSlice.S0_7)
        implants.append(ImplantSpec(k + 1, link, PiezoModel(v_source=1.6), AfeModel()))
    return Scenario(
        channel=channel,
        implants=implants,
        duration_frames=duration_frames,
        seed=seed,
        samples_per_cycle=64,
        pulse_period=pulse_period,
    )
