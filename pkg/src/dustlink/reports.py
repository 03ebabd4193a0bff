"""Delimited report files and their rendered figures.

Every run emits machine-readable CSV/JSON artifacts; the same data is
rendered to PNG figures alongside (eye diagram, level histogram, BER
curve, reconstruction overlay). Figures are a convenience view; the
CSV/JSON files are the data contract.
"""

from __future__ import annotations

import json
import os

import numpy as np

HISTOGRAM_BINS = 200
EYE_MAX_TRACES = 256
EYE_DECIMATE = 8


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _agg_backend():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


# ---------------------------------------------------------------------------
# CSV writers
# ---------------------------------------------------------------------------

def write_eye_csv(results, path):
    """eye.csv: implant, symbol-relative time, voltage, level."""
    with open(path, "w", newline="") as fh:
        fh.write("implant_id,time_in_symbol,voltage,level\n")
        for res in results:
            if res.thresholds is None:
                continue
            for rel_t, volts in res.eye[:EYE_MAX_TRACES]:
                level = int(np.searchsorted(res.thresholds, volts[-1], side="left"))
                for t, v in zip(rel_t[::EYE_DECIMATE], volts[::EYE_DECIMATE]):
                    fh.write(f"{res.implant_id},{float(t)!r},{float(v)!r},{level}\n")


def write_histogram_csv(results, path):
    """histogram.csv: implant, voltage bin center, count, fitted centroid."""
    with open(path, "w", newline="") as fh:
        fh.write("implant_id,bin_center,count,centroid\n")
        for res in results:
            if res.data_voltages is None or res.data_voltages.size == 0:
                continue
            counts, edges = np.histogram(res.data_voltages, bins=HISTOGRAM_BINS)
            centers = (edges[:-1] + edges[1:]) / 2
            centroid_bins = {}
            if res.centroids is not None:
                for c in res.centroids:
                    k = int(np.clip(np.searchsorted(edges, c) - 1, 0, len(centers) - 1))
                    centroid_bins[k] = c
            for k, (center, count) in enumerate(zip(centers, counts)):
                cent = f"{float(centroid_bins[k])!r}" if k in centroid_bins else ""
                fh.write(f"{res.implant_id},{float(center)!r},{int(count)},{cent}\n")


def write_ber_csv(rows, path):
    """ber.csv: one row per (config, noise) sweep point."""
    with open(path, "w", newline="") as fh:
        fh.write("config,ask_levels,cycles_per_symbol,noise_rms,bits,errors,"
                 "ber,ber_upper_bound,sync_failed\n")
        for row in rows:
            config = f"ask{row['ask_levels']}/cps{row['cycles_per_symbol']}"
            fh.write(f"{config},{row['ask_levels']},{row['cycles_per_symbol']},"
                     f"{float(row['noise_rms'])!r},{row['bits']},{row['errors']},"
                     f"{float(row['ber'])!r},{float(row['ber_bound'])!r},"
                     f"{int(row['sync_failed'])}\n")


def write_reconstruction_csv(results, path):
    with open(path, "w", newline="") as fh:
        fh.write("implant_id,time,input_volts,decoded_volts\n")
        for res in results:
            rec = res.reconstruction
            if not rec:
                continue
            for t, vi, vd in zip(rec["tick_times"], rec["input_volts"],
                                 rec["decoded_volts"]):
                fh.write(f"{res.implant_id},{float(t)!r},{float(vi)!r},{float(vd)!r}\n")


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def render_eye(results, path):
    plt = _agg_backend()
    live = [r for r in results if r.eye]
    if not live:
        return False
    fig, axes = plt.subplots(1, len(live), figsize=(4 * len(live), 3.2),
                             squeeze=False, sharey=True)
    for ax, res in zip(axes[0], live):
        for rel_t, volts in res.eye[:EYE_MAX_TRACES]:
            ax.plot(rel_t * 1e6, volts, color="tab:red", alpha=0.25, lw=0.7)
        ax.set_title(f"implant {res.implant_id}")
        ax.set_xlabel("time in symbol [us]")
    axes[0][0].set_ylabel("differential envelope")
    fig.suptitle("Uplink eye diagrams")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return True


def render_histogram(results, path):
    plt = _agg_backend()
    live = [r for r in results
            if r.data_voltages is not None and r.data_voltages.size]
    if not live:
        return False
    fig, axes = plt.subplots(len(live), 1, figsize=(6.4, 2.2 * len(live)),
                             squeeze=False)
    for ax, res in zip(axes[:, 0], live):
        ax.hist(res.data_voltages, bins=HISTOGRAM_BINS, color="tab:blue")
        if res.centroids is not None:
            for c in res.centroids:
                ax.axvline(c, color="tab:orange", lw=0.8)
        ax.set_ylabel(f"implant {res.implant_id}")
    axes[-1, 0].set_xlabel("sampled echo voltage")
    fig.suptitle("Echo level histogram with fitted centroids")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return True


def render_ber(rows, path):
    plt = _agg_backend()
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    by_level = {}
    for row in rows:
        by_level.setdefault(row["ask_levels"], []).append(row)
    for levels, level_rows in sorted(by_level.items()):
        level_rows = sorted(level_rows, key=lambda r: r["noise_rms"])
        x = [r["noise_rms"] for r in level_rows]
        y = [max(r["ber"], 0.5 / max(r["bits"], 1)) if not r["sync_failed"]
             else np.nan for r in level_rows]
        ax.semilogy(x, y, marker="o", label=f"{levels}-level")
    ax.set_xlabel("channel noise RMS")
    ax.set_ylabel("bit error rate")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return True


def render_reconstruction(results, path):
    plt = _agg_backend()
    live = [r for r in results if r.reconstruction]
    if not live:
        return False
    fig, axes = plt.subplots(len(live), 1, figsize=(7.0, 2.4 * len(live)),
                             squeeze=False)
    for ax, res in zip(axes[:, 0], live):
        rec = res.reconstruction
        ax.plot(rec["tick_times"], rec["input_volts"] * 1e3, color="tab:blue",
                label="input")
        ax.plot(rec["tick_times"], rec["decoded_volts"] * 1e3, color="tab:red",
                lw=0.9, label="demodulated")
        ax.set_ylabel(f"implant {res.implant_id} [mV]")
        ax.legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("time [s]")
    fig.suptitle("Input vs demodulated waveform")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return True


# ---------------------------------------------------------------------------
# Run-level entry points
# ---------------------------------------------------------------------------

def write_run_reports(artifacts, scenario, out_dir) -> dict:
    """All artifacts for one run; returns {name: path}."""
    from .waveform import write_dnwf

    _ensure_dir(out_dir)
    files = {}
    results = list(artifacts.implants.values())
    if artifacts.recording is not None:
        p = os.path.join(out_dir, "recording.dnwf")
        write_dnwf(artifacts.recording, p)
        files["recording"] = p
    p = os.path.join(out_dir, "schedule.json")
    with open(p, "w") as fh:
        json.dump(run_schedule_doc(artifacts, scenario), fh, indent=2)
        fh.write("\n")
    files["schedule"] = p
    p = os.path.join(out_dir, "reports.json")
    with open(p, "w") as fh:
        json.dump(run_report_doc(artifacts), fh, indent=2)
        fh.write("\n")
    files["reports"] = p
    p = os.path.join(out_dir, "eye.csv")
    write_eye_csv(results, p)
    files["eye_csv"] = p
    p = os.path.join(out_dir, "histogram.csv")
    write_histogram_csv(results, p)
    files["histogram_csv"] = p
    rows = [{
        "ask_levels": r.config.ask_levels,
        "cycles_per_symbol": r.config.cycles_per_symbol,
        "noise_rms": scenario.channel.noise_rms,
        "bits": r.ber.bits_compared if r.ber else 0,
        "errors": r.ber.bit_errors if r.ber else 0,
        "ber": r.ber.ber_point if r.ber else float("nan"),
        "ber_bound": r.ber.ber_upper_bound if r.ber else float("nan"),
        "sync_failed": r.ber.sync_failed if r.ber else True,
    } for r in results if r.ber is not None]
    if rows:
        p = os.path.join(out_dir, "ber.csv")
        write_ber_csv(rows, p)
        files["ber_csv"] = p
    if any(r.reconstruction for r in results):
        p = os.path.join(out_dir, "reconstruction.csv")
        write_reconstruction_csv(results, p)
        files["reconstruction_csv"] = p
        if render_reconstruction(results, os.path.join(out_dir, "reconstruction.png")):
            files["reconstruction_png"] = os.path.join(out_dir, "reconstruction.png")
    if render_eye(results, os.path.join(out_dir, "eye.png")):
        files["eye_png"] = os.path.join(out_dir, "eye.png")
    if render_histogram(results, os.path.join(out_dir, "histogram.png")):
        files["histogram_png"] = os.path.join(out_dir, "histogram.png")
    return files


def write_ber_reports(rows, out_dir) -> dict:
    _ensure_dir(out_dir)
    files = {}
    p = os.path.join(out_dir, "ber.csv")
    write_ber_csv(rows, p)
    files["ber_csv"] = p
    if render_ber(rows, os.path.join(out_dir, "ber.png")):
        files["ber_png"] = os.path.join(out_dir, "ber.png")
    return files


def run_schedule_doc(artifacts, scenario) -> dict:
    """Replayable description of the uplink timing and per-slot layout."""
    sched = artifacts.schedule
    return {
        "version": 1,
        "sim_rate_hz": scenario.sim_rate,
        "carrier_freq_hz": scenario.channel.carrier_freq,
        "tof_s": scenario.channel.tof,
        "pulse_period_s": sched.pulse_period,
        "pulses_per_frame": sched.pulses_per_frame,
        "charge_up_cycles": sched.charge_up_cycles,
        "window_cycles": sched.window_cycles,
        "uplink_t0_s": artifacts.uplink_t0,
        "frames": artifacts.frames_run,
        "slots": [{
            "slot": r.slot,
            "implant_id": r.implant_id,
            "ask_levels": r.config.ask_levels,
            "cycles_per_symbol": r.config.cycles_per_symbol,
            "samples_per_packet": r.config.samples_per_packet,
            "lfsr_enable": r.config.lfsr_enable,
        } for r in artifacts.implants.values()],
    }


def run_report_doc(artifacts) -> dict:
    doc = {
        "scenario_digest": artifacts.scenario_digest,
        "frames": artifacts.frames_run,
        "aggregate_throughput_bps": artifacts.aggregate_throughput_bps,
        "spectral_efficiency_kbps_per_mhz": artifacts.spectral_efficiency_kbps_per_mhz,
        "config_acks": {str(k): bool(v) for k, v in artifacts.config_acks.items()},
        "max_transmitters_per_pulse": max(artifacts.transmitters_per_pulse, default=0),
        "implants": {},
    }
    for res in artifacts.implants.values():
        entry = {
            "slot": res.slot,
            "throughput_bps": res.throughput_bps,
            "header_errors": res.header_errors,
            "cluster_fallback": bool(res.cluster_fallback),
            "diagnostics": dict(res.diagnostics or {}),
            "state": res.snapshot,
        }
        if res.ber is not None:
            entry["ber"] = {
                "bits_compared": res.ber.bits_compared,
                "bit_errors": res.ber.bit_errors,
                "ber_point": res.ber.ber_point,
                "ber_upper_bound": res.ber.ber_upper_bound,
                "sync_failed": res.ber.sync_failed,
            }
            entry["ber_text"] = res.ber.as_text()
        if res.reconstruction:
            entry["reconstruction_nrmse"] = res.reconstruction.get("nrmse")
        doc["implants"][str(res.implant_id)] = entry
    return doc
