"""Ultrasonic backscatter multi-implant link simulator.

Discrete-time model of a pulse-echo ultrasound telemetry link: a TDMA
protocol across up to 8 implants, linear 16-level ASK backscatter
modulation through a current-DAC reflection model, Config/Uplink frame
formats, the full receive-side demodulation chain, and a BER and
throughput harness.
"""

from .channel import ChannelConfig, GammaTrace, add_noise, backscatter, propagate, superpose, synthesize_tx
from .demod import BERReport, EnvelopeTrace, SymbolFrame, SymbolSchedule, compute_ber
from .errors import ConfigurationError, ScheduleError
from .harness import (ImplantSpec, RunArtifacts, Scenario, ber_sweep, discover,
                      load_scenario, loopback_scenario, reference_scenario,
                      run_scenario, save_scenario)
from .implant import AdcSlice, AfeModel, Implant, LinkConfig
from .interrogator import FrameSchedule, PulseDescriptor, PulseKind
from .piezo import IdacSetting, PiezoModel, ResonanceMode, gamma_from_idac, gamma_from_termination, impedance_at
from .waveform import Waveform, read_dnwf, write_dnwf

__version__ = "0.1.0"

__all__ = [
    "AdcSlice", "AfeModel", "BERReport", "ChannelConfig", "ConfigurationError",
    "EnvelopeTrace", "FrameSchedule", "GammaTrace", "IdacSetting", "Implant",
    "ImplantSpec", "LinkConfig", "PiezoModel", "PulseDescriptor", "PulseKind",
    "ResonanceMode", "RunArtifacts", "Scenario", "ScheduleError", "SymbolFrame",
    "SymbolSchedule", "Waveform", "add_noise", "backscatter", "ber_sweep",
    "compute_ber", "discover", "gamma_from_idac", "gamma_from_termination",
    "impedance_at", "load_scenario", "loopback_scenario", "propagate",
    "read_dnwf", "reference_scenario", "run_scenario", "save_scenario",
    "superpose", "synthesize_tx", "write_dnwf",
]
