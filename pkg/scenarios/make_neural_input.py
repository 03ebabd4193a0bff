#!/usr/bin/env python3
"""Generate a synthetic slowed neural-style input for the reconstruction demo.

Writes neural_input.dnwf next to this script: a few mV of slow local-field
drift with sparse spike-like transients, sampled at the AFE rate.
"""

import os

import numpy as np

from dustlink.waveform import Waveform, write_dnwf

FS = 6250.0
DURATION_S = 4.0


def main():
    rng = np.random.default_rng(12)
    n = int(DURATION_S * FS)
    t = np.arange(n) / FS
    lfp = (3.0e-3 * np.sin(2 * np.pi * 4.0 * t)
           + 1.5e-3 * np.sin(2 * np.pi * 11.0 * t + 1.0))
    spikes = np.zeros(n)
    for idx in rng.choice(n - 40, size=60, replace=False):
        width = rng.integers(4, 9)
        amp = rng.uniform(2e-3, 4e-3) * rng.choice([-1.0, 1.0])
        pulse = amp * np.hanning(2 * width)
        spikes[idx:idx + 2 * width] += pulse
    signal = lfp + spikes
    out = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                       "neural_input.dnwf")
    write_dnwf(Waveform(signal, FS, 0.0), out)
    print(f"wrote {out}: {n} samples at {FS:.0f} S/s, "
          f"{signal.min() * 1e3:.1f}..{signal.max() * 1e3:.1f} mV")


if __name__ == "__main__":
    main()
