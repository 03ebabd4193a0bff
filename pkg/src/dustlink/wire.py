"""Bit-level wire conventions shared by the interrogator and the implants.

Downlink configuration payload, 48 bits, MSB-first on the air:

  [ 8] target implant id (0 = switch every implant to Uplink Mode)
  [ 4] I-DAC unit current step: current = 4 uA + step * 2.4 uA
  [ 4] samples per uplink packet, stored as count - 1 (1..16)
  [ 2] ASK level selector: 0..3 -> 2, 4, 8, 16 levels
  [ 3] total number of implants, stored as n - 1 (1..8)
  [ 3] uplink slot index, stored as index - 1 (1..8)
  [ 1] LFSR enable
  [ 3] cycles-per-symbol selector: index into (4, 6, 8, 10, 12, 14, 16)
  [ 2] ADC slice selector: 0..3 -> start bit 0, 1, 2, 3
  [18] reserved, transmitted as zero

Uplink packets open with a "1010" header and a 4-bit sample count
(count mod 16; 0 decodes as 16 when the configured packet size is 16),
both at 2-level ASK; config acknowledgements are "0101" followed by the
8-bit implant id.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError

# Manchester convention: one shared constant for both link ends.
MANCHESTER_ONE = (1, 0)
MANCHESTER_ZERO = (0, 1)

PREAMBLE_REPEATS = 32
CONFIG_HEADER = (1, 1, 0, 0, 1, 1, 0, 0)
UPLINK_HEADER = (1, 0, 1, 0)
ACK_HEADER = (0, 1, 0, 1)

CONFIG_PAYLOAD_BITS = 48
RESERVED_BITS = 18
COUNT_FIELD_BITS = 4

ASK_LEVEL_CHOICES = (2, 4, 8, 16)
CYCLES_PER_SYMBOL_CHOICES = (4, 6, 8, 10, 12, 14, 16)

IDAC_STEP_A = 2.4e-6
IDAC_BASE_A = 4e-6
MAX_IDAC_CODE = 15


def int_to_bits(value: int, width: int) -> list:
    """MSB-first bit expansion."""
    if not 0 <= value < (1 << width):
        raise ConfigurationError(f"value {value} does not fit in {width} bits")
    return [(value >> (width - 1 - i)) & 1 for i in range(width)]


def bits_to_int(bits) -> int:
    out = 0
    for b in bits:
        out = (out << 1) | (int(b) & 1)
    return out


def idac_step_for_current(current: float) -> int:
    step = round((current - IDAC_BASE_A) / IDAC_STEP_A)
    if not 0 <= step <= 15:
        raise ConfigurationError(f"I-DAC current {current} outside the 4-40 uA range")
    if abs(IDAC_BASE_A + step * IDAC_STEP_A - current) > 1e-9:
        raise ConfigurationError(
            f"I-DAC current {current} is not a programmable step (4 uA + k*2.4 uA)")
    return step


def current_for_idac_step(step: int) -> float:
    return IDAC_BASE_A + step * IDAC_STEP_A


def pack_config_payload(target_id: int, cfg) -> list:
    """48 downlink bits for a target id and a link configuration.

    cfg provides idac_unit_current, samples_per_packet, ask_levels,
    n_implants, uplink_index, lfsr_enable, cycles_per_symbol and an
    adc_slice with a .value selector.
    """
    if not 0 <= target_id <= 0xFF:
        raise ConfigurationError(f"target id {target_id} is not an 8-bit value")
    bits = int_to_bits(target_id, 8)
    bits += int_to_bits(idac_step_for_current(cfg.idac_unit_current), 4)
    if not 1 <= cfg.samples_per_packet <= 16:
        raise ConfigurationError("samples_per_packet outside 1..16")
    bits += int_to_bits(cfg.samples_per_packet - 1, 4)
    if cfg.ask_levels not in ASK_LEVEL_CHOICES:
        raise ConfigurationError(f"ask_levels {cfg.ask_levels} not in {ASK_LEVEL_CHOICES}")
    bits += int_to_bits(ASK_LEVEL_CHOICES.index(cfg.ask_levels), 2)
    if not 1 <= cfg.n_implants <= 8:
        raise ConfigurationError("n_implants outside 1..8")
    bits += int_to_bits(cfg.n_implants - 1, 3)
    if not 1 <= cfg.uplink_index <= 8:
        raise ConfigurationError("uplink_index outside 1..8")
    bits += int_to_bits(cfg.uplink_index - 1, 3)
    bits += [1 if cfg.lfsr_enable else 0]
    if cfg.cycles_per_symbol not in CYCLES_PER_SYMBOL_CHOICES:
        raise ConfigurationError(
            f"cycles_per_symbol {cfg.cycles_per_symbol} not in {CYCLES_PER_SYMBOL_CHOICES}")
    bits += int_to_bits(CYCLES_PER_SYMBOL_CHOICES.index(cfg.cycles_per_symbol), 3)
    bits += int_to_bits(int(cfg.adc_slice.value), 2)
    bits += [0] * RESERVED_BITS
    assert len(bits) == CONFIG_PAYLOAD_BITS
    return bits


def unpack_config_payload(bits):
    """Split 48 decoded downlink bits into (target_id, raw field dict).

    Range checks that depend on cross-field constraints happen at
    apply time; selector fields out of their enum range raise here.
    """
    bits = [int(b) & 1 for b in bits]
    if len(bits) != CONFIG_PAYLOAD_BITS:
        raise ConfigurationError(f"expected {CONFIG_PAYLOAD_BITS} payload bits, got {len(bits)}")
    target_id = bits_to_int(bits[0:8])
    cps_index = bits_to_int(bits[25:28])
    if cps_index >= len(CYCLES_PER_SYMBOL_CHOICES):
        raise ConfigurationError(f"cycles-per-symbol selector {cps_index} out of range")
    fields = {
        "idac_unit_current": current_for_idac_step(bits_to_int(bits[8:12])),
        "samples_per_packet": bits_to_int(bits[12:16]) + 1,
        "ask_levels": ASK_LEVEL_CHOICES[bits_to_int(bits[16:18])],
        "n_implants": bits_to_int(bits[18:21]) + 1,
        "uplink_index": bits_to_int(bits[21:24]) + 1,
        "lfsr_enable": bool(bits[24]),
        "cycles_per_symbol": CYCLES_PER_SYMBOL_CHOICES[cps_index],
        "adc_slice_value": bits_to_int(bits[28:30]),
    }
    return target_id, fields


def word_width_for_levels(ask_levels: int) -> int:
    """9 bits for 8-level ASK (3 symbols/word), 8 bits otherwise."""
    if ask_levels not in ASK_LEVEL_CHOICES:
        raise ConfigurationError(f"ask_levels {ask_levels} not in {ASK_LEVEL_CHOICES}")
    return 9 if ask_levels == 8 else 8


def bits_per_symbol(ask_levels: int) -> int:
    if ask_levels not in ASK_LEVEL_CHOICES:
        raise ConfigurationError(f"ask_levels {ask_levels} not in {ASK_LEVEL_CHOICES}")
    return int(np.log2(ask_levels))


def code_for_group(group: int, levels: int) -> float:
    """Equally spaced I-DAC level across the 16-code range (may be fractional)."""
    return group * (MAX_IDAC_CODE / (levels - 1))


def encode_count_field(count: int) -> list:
    if not 0 <= count <= 16:
        raise ConfigurationError(f"sample count {count} outside 0..16")
    return int_to_bits(count % 16, COUNT_FIELD_BITS)


def decode_count_field(bits, configured_count: int) -> int:
    value = bits_to_int(bits)
    if value == 0 and configured_count == 16:
        return 16
    return value
