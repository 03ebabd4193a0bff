"""Command-line interface.

Subcommands:
  run       simulate a scenario file and write all run artifacts
  ber       BER sweep over noise levels and ASK level counts
  discover  sweep candidate implant ids and report the responders
  demod     offline demodulation of a DNWF recording with a schedule file
  export    convert a DNWF waveform to CSV or JSON

Exit codes: 0 success, 1 configuration error, 2 runtime schedule violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import ConfigurationError, ScheduleError


def _parse_noise_range(text: str):
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigurationError(
            f"--noise must be start:stop:step, got {text!r}")
    start, stop, step = (float(p) for p in parts)
    if step <= 0:
        raise ConfigurationError("--noise step must be positive")
    return list(np.arange(start, stop + step / 2, step))


def _parse_levels(text: str):
    levels = [int(p) for p in text.split(",") if p]
    for lv in levels:
        if lv not in (2, 4, 8, 16):
            raise ConfigurationError(f"ASK level count {lv} not in 2,4,8,16")
    return levels


def cmd_run(args) -> int:
    from dataclasses import replace

    from .harness import load_scenario, run_scenario

    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
        scenario.channel = replace(scenario.channel, rng_seed=args.seed)
    artifacts = run_scenario(scenario, out_dir=args.out,
                             base_dir=os.path.dirname(os.path.abspath(args.scenario)))
    doc_path = os.path.join(args.out, "reports.json")
    print(f"run complete: {artifacts.frames_run} frames, "
          f"aggregate {artifacts.aggregate_throughput_bps / 1e3:.2f} kb/s; "
          f"reports in {doc_path}")
    for res in artifacts.implants.values():
        if res.ber is not None:
            print(f"  implant {res.implant_id}: {res.ber.bits_compared} bits, "
                  f"{res.ber.bit_errors} errors, BER bound "
                  f"{res.ber.ber_upper_bound:.3g}")
        if res.reconstruction:
            print(f"  implant {res.implant_id}: reconstruction NRMSE "
                  f"{res.reconstruction.get('nrmse', float('nan')):.4f}")
    return 0


def cmd_ber(args) -> int:
    from .harness import ber_sweep, load_scenario

    scenario = load_scenario(args.scenario)
    noise = _parse_noise_range(args.noise)
    levels = _parse_levels(args.levels)
    rows = ber_sweep(scenario, noise, min_bits=args.min_bits,
                     ask_levels_list=levels, out_dir=args.out)
    print(f"{len(rows)} sweep points written under {args.out}")
    for row in rows:
        ber = "sync-fail" if row["sync_failed"] else f"{row['ber']:.3e}"
        print(f"  ask{row['ask_levels']:>2} noise={row['noise_rms']:.4g}: "
              f"bits={row['bits']} errors={row['errors']} ber={ber}")
    return 0


def cmd_discover(args) -> int:
    from .harness import discover, load_scenario

    scenario = load_scenario(args.scenario)
    candidates = range(1, 256) if args.full_sweep else range(1, 9)
    found = discover(scenario, candidates)
    print("discovered implants:", sorted(found) if found else "none")
    return 0


def cmd_demod(args) -> int:
    from .harness import replay_demod
    from .waveform import read_dnwf

    with open(args.schedule) as fh:
        schedule_doc = json.load(fh)
    recording = read_dnwf(args.wave)
    results = replay_demod(recording, schedule_doc)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    from . import reports
    files = {}
    files["histogram_csv"] = os.path.join(out, "histogram.csv")
    reports.write_histogram_csv(results, files["histogram_csv"])
    files["eye_csv"] = os.path.join(out, "eye.csv")
    reports.write_eye_csv(results, files["eye_csv"])
    for res in results:
        if res.ber is not None:
            print(f"implant {res.implant_id}: {res.ber.bits_compared} bits, "
                  f"{res.ber.bit_errors} errors, bound {res.ber.ber_upper_bound:.3g}")
        else:
            print(f"implant {res.implant_id}: {res.decoded_bits.size} bits decoded")
    print(f"artifacts in {out}")
    return 0


def cmd_export(args) -> int:
    from .waveform import read_dnwf, write_csv

    wave = read_dnwf(args.wave)
    if args.format == "csv":
        write_csv(wave, args.out)
    else:
        doc = {
            "sample_rate": wave.sample_rate,
            "t0": wave.t0,
            "samples": [float(x) for x in wave.samples],
        }
        with open(args.out, "w") as fh:
            json.dump(doc, fh)
            fh.write("\n")
    print(f"wrote {args.out} ({len(wave)} samples)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dustlink",
        description="Ultrasonic backscatter TDMA link simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario and write artifacts")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("ber", help="BER sweep over noise and ASK levels")
    p.add_argument("--scenario", required=True)
    p.add_argument("--levels", default="2,4,8,16")
    p.add_argument("--noise", required=True, help="start:stop:step")
    p.add_argument("--min-bits", type=int, default=10000)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ber)

    p = sub.add_parser("discover", help="sweep implant ids and report acks")
    p.add_argument("--scenario", required=True)
    p.add_argument("--full-sweep", action="store_true",
                   help="probe ids 1..255 instead of the desk-scale 1..8")
    p.set_defaults(fn=cmd_discover)

    p = sub.add_parser("demod", help="demodulate a DNWF recording offline")
    p.add_argument("--wave", required=True)
    p.add_argument("--schedule", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_demod)

    p = sub.add_parser("export", help="export a DNWF waveform")
    p.add_argument("--wave", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except ScheduleError as exc:
        print(f"schedule violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
