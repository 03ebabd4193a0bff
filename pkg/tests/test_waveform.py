"""Waveform container and the DNWF / CSV file formats."""

import struct

import numpy as np
import pytest

from dustlink.waveform import (DNWF_MAGIC, DNWF_VERSION, Waveform, read_csv,
                               read_dnwf, write_csv, write_dnwf)


def test_basic_properties():
    w = Waveform(np.arange(10, dtype=float), 100.0, t0=0.5)
    assert len(w) == 10
    assert w.duration == pytest.approx(0.1)
    assert w.t_end == pytest.approx(0.6)
    assert w.times()[0] == 0.5
    assert w.energy() == pytest.approx(float(np.sum(np.arange(10.0) ** 2)))


def test_validation():
    with pytest.raises(ValueError):
        Waveform(np.zeros(4), 0.0)
    with pytest.raises(ValueError):
        Waveform(np.array([1.0, np.inf]), 10.0)
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 2)), 10.0)


def test_slice_time():
    w = Waveform(np.arange(100, dtype=float), 1000.0, t0=0.0)
    s = w.slice_time(0.010, 0.020)
    assert s.t0 == pytest.approx(0.010)
    assert len(s) == 10
    assert s.samples[0] == 10.0


def test_dnwf_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    w = Waveform(rng.normal(size=1000).astype(np.float32).astype(float),
                 12.8e7, t0=1.25e-3)
    path = tmp_path / "wave.dnwf"
    write_dnwf(w, path)
    back = read_dnwf(path)
    assert back.sample_rate == w.sample_rate
    assert back.t0 == w.t0
    assert np.array_equal(back.samples, w.samples)


def test_dnwf_binary_layout(tmp_path):
    # magic, u16 version, f64 rate, f64 t0, u64 count, f32 samples, all LE
    w = Waveform(np.array([1.0, -2.0, 0.5]), 250.0, t0=0.125)
    path = tmp_path / "wave.dnwf"
    write_dnwf(w, path)
    blob = path.read_bytes()
    assert blob[:4] == DNWF_MAGIC == b"DNWF"
    version, = struct.unpack_from("<H", blob, 4)
    assert version == DNWF_VERSION
    rate, t0 = struct.unpack_from("<dd", blob, 6)
    assert rate == 250.0 and t0 == 0.125
    count, = struct.unpack_from("<Q", blob, 22)
    assert count == 3
    samples = struct.unpack_from("<3f", blob, 30)
    assert samples == (1.0, -2.0, 0.5)
    assert len(blob) == 30 + 12


def test_dnwf_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.dnwf"
    path.write_bytes(b"XXXX" + b"\x00" * 26)
    with pytest.raises(ValueError):
        read_dnwf(path)


def test_dnwf_rejects_truncation(tmp_path):
    w = Waveform(np.zeros(100), 100.0)
    path = tmp_path / "wave.dnwf"
    write_dnwf(w, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ValueError):
        read_dnwf(path)


def test_csv_round_trip(tmp_path):
    w = Waveform(np.sin(np.arange(50) * 0.3), 5000.0, t0=0.01)
    path = tmp_path / "wave.csv"
    write_csv(w, path)
    header = path.read_text().splitlines()[0]
    assert header == "time,amplitude"
    back = read_csv(path)
    assert back.sample_rate == pytest.approx(5000.0, rel=1e-9)
    assert back.t0 == pytest.approx(0.01)
    assert np.allclose(back.samples, w.samples)
