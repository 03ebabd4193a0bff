"""Uniformly sampled real-valued waveforms and their file formats.

The Waveform type carries every signal in the simulator: transmitted
pulses, incident waves at the implants, backscattered echoes, gated
receiver recordings, and extracted envelopes.

Binary format "DNWF" (little-endian throughout):
  bytes 0-3   magic 'D','N','W','F'
  u16         format version (currently 1)
  f64         sample_rate [Hz]
  f64         t0 [s]
  u64         sample count
  f32 * n     samples
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DNWF_MAGIC = b"DNWF"
DNWF_VERSION = 1
_HEADER = struct.Struct("<4sHddQ")


@dataclass
class Waveform:
    """Real time series on a uniform grid starting at t0."""

    samples: np.ndarray
    sample_rate: float
    t0: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform samples must be 1-D")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be > 0, got {self.sample_rate}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform samples must be finite")

    def __len__(self):
        return self.samples.size

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def t_end(self) -> float:
        return self.t0 + self.duration

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.sample_rate

    def energy(self) -> float:
        return float(np.sum(self.samples**2))

    def slice_time(self, t_start: float, t_stop: float) -> "Waveform":
        """Return the sub-waveform covering [t_start, t_stop)."""
        i0 = max(0, int(np.ceil((t_start - self.t0) * self.sample_rate - 1e-9)))
        i1 = min(len(self), int(np.ceil((t_stop - self.t0) * self.sample_rate - 1e-9)))
        i1 = max(i0, i1)
        return Waveform(self.samples[i0:i1].copy(), self.sample_rate,
                        self.t0 + i0 / self.sample_rate)


def write_dnwf(wave: Waveform, path) -> None:
    data = np.asarray(wave.samples, dtype="<f4").tobytes()
    header = _HEADER.pack(DNWF_MAGIC, DNWF_VERSION, float(wave.sample_rate),
                          float(wave.t0), len(wave))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data)


def read_dnwf(path) -> Waveform:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"{path}: truncated DNWF header")
        magic, version, sample_rate, t0, count = _HEADER.unpack(header)
        if magic != DNWF_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != DNWF_VERSION:
            raise ValueError(f"{path}: unsupported DNWF version {version}")
        raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError(f"{path}: expected {count} samples, file truncated")
    samples = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return Waveform(samples, sample_rate, t0)


def write_csv(wave: Waveform, path) -> None:
    """CSV export (time,amplitude) for plotting."""
    with open(path, "w", newline="") as fh:
        fh.write("time,amplitude\n")
        for t, a in zip(wave.times(), wave.samples):
            fh.write(f"{float(t)!r},{float(a)!r}\n")


def read_csv(path) -> Waveform:
    """Read a (time,amplitude) CSV; the time column must be uniform."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    t = np.atleast_1d(data["time"])
    a = np.atleast_1d(data["amplitude"])
    if t.size < 2:
        raise ValueError(f"{path}: need at least 2 samples to infer the rate")
    steps = np.diff(t)
    dt = float(np.mean(steps))
    if np.max(np.abs(steps - dt)) > 1e-6 * dt:
        raise ValueError(f"{path}: time column is not uniformly sampled")
    return Waveform(a, 1.0 / dt, float(t[0]))
