"""Scenario files, the protocol simulator, experiment runners, and the CLI."""

import json
import os

import numpy as np
import pytest

from dustlink import cli
from dustlink.errors import ConfigurationError
from dustlink.harness import (LinkSimulator, Scenario, load_scenario,
                              loopback_scenario, reconstruct_signal,
                              reference_scenario, replay_demod, run_scenario,
                              save_scenario, scenario_digest,
                              scenario_from_dict, scenario_to_dict)
from dustlink.implant import AdcSlice, LinkConfig, Mode
from dustlink.waveform import Waveform, read_dnwf, write_dnwf


class TestScenarioFiles:
    def test_round_trip(self, tmp_path):
        sc = reference_scenario(n_present=2, n_implants=4, duration_frames=3)
        path = tmp_path / "scenario.json"
        save_scenario(sc, path)
        back = load_scenario(path)
        assert scenario_to_dict(back) == scenario_to_dict(sc)

    def test_unknown_top_level_key_rejected(self):
        doc = scenario_to_dict(reference_scenario(1, 8, 1))
        doc["attenutation"] = 0.3  # typo must not pass silently
        with pytest.raises(ConfigurationError, match="attenutation"):
            scenario_from_dict(doc)

    def test_unknown_channel_key_rejected(self):
        doc = scenario_to_dict(reference_scenario(1, 8, 1))
        doc["channel"]["depht_m"] = 0.1
        with pytest.raises(ConfigurationError, match="depht_m"):
            scenario_from_dict(doc)

    def test_unknown_implant_key_rejected(self):
        doc = scenario_to_dict(reference_scenario(1, 8, 1))
        doc["implants"][0]["lfsr"] = True
        with pytest.raises(ConfigurationError, match="lfsr"):
            scenario_from_dict(doc)

    def test_version_checked(self):
        doc = scenario_to_dict(reference_scenario(1, 8, 1))
        doc["version"] = 2
        with pytest.raises(ConfigurationError, match="version"):
            scenario_from_dict(doc)

    def test_digest_ignores_seed(self):
        a = reference_scenario(2, 8, 3, seed=1)
        b = reference_scenario(2, 8, 3, seed=999)
        assert scenario_digest(a) == scenario_digest(b)
        c = reference_scenario(2, 8, 4, seed=1)
        assert scenario_digest(a) != scenario_digest(c)

    def test_duplicate_ids_rejected(self):
        sc = reference_scenario(2, 8, 1)
        sc.implants[1].implant_id = sc.implants[0].implant_id
        sc.implants[1].link.implant_id = sc.implants[0].implant_id
        with pytest.raises(ConfigurationError, match="unique"):
            sc.validate()

    def test_slot_permutation_enforced(self):
        sc = reference_scenario(2, 8, 1)
        sc.implants[1].link.uplink_index = 1
        with pytest.raises(ConfigurationError, match="permutation"):
            sc.validate()


class TestConfigPhase:
    def test_all_implants_configured_and_switched(self):
        sc = reference_scenario(n_present=3, n_implants=4, duration_frames=1)
        sim = LinkSimulator(sc)
        sim.run_config_phase()
        assert all(sim.config_acks.values())
        for imp, spec in zip(sim.implants, sc.implants):
            assert imp.mode is Mode.UPLINK
            assert imp.state.config.uplink_index == spec.link.uplink_index

    def test_mode_switch_same_pulse(self):
        sc = reference_scenario(n_present=4, n_implants=4, duration_frames=1)
        sim = LinkSimulator(sc)
        for spec in sc.implants:
            sim.send_config_pulse(spec.implant_id, spec.link)
        assert all(im.mode is Mode.CONFIG for im in sim.implants)
        sim.send_config_pulse(0, LinkConfig(implant_id=1), collect_ack=False)
        assert all(im.mode is Mode.UPLINK for im in sim.implants)

    def test_corrupt_payload_leaves_registers(self):
        sc = reference_scenario(n_present=1, n_implants=8, duration_frames=1)
        sim = LinkSimulator(sc)
        before = sim.implants[0].state.config
        ack = sim.send_config_pulse(1, sc.implants[0].link, corrupt_symbol=20)
        assert ack is None
        assert sim.implants[0].state.config == before
        assert sim.implants[0].state.diagnostics.rejected_payloads == 1


class TestDiscovery:
    def test_population_found_exactly(self):
        from dustlink.harness import discover
        sc = reference_scenario(n_present=4, n_implants=4, duration_frames=1)
        found = discover(sc, range(1, 9))
        assert found == {1, 2, 3, 4}

    def test_empty_population_quiet(self):
        from dustlink.interrogator import discover_implants
        sc = reference_scenario(n_present=1, n_implants=8, duration_frames=1)
        sim = LinkSimulator(sc)
        sim.implants = []  # nobody home
        assert discover_implants(sim) == set()

    def test_heavy_noise_never_crashes(self):
        from dustlink.harness import discover
        sc = reference_scenario(n_present=1, n_implants=8, duration_frames=1,
                                noise_rms=0.3)
        sc.implants[0].implant_id = 5
        sc.implants[0].link.implant_id = 5
        found = discover(sc, range(1, 9))
        assert found <= {5}


class TestRunScenario:
    def test_lfsr_loopback_end_to_end(self):
        sc = loopback_scenario(16, 6, min_bits=4000, seed=21)
        art = run_scenario(sc, keep_recording=False)
        res = art.implants[1]
        assert res.ber.bit_errors == 0
        assert not res.ber.sync_failed
        assert res.ber.bits_compared >= 4000
        art.validate_aggregate()

    def test_four_of_eight_slots(self):
        sc = reference_scenario(n_present=4, n_implants=8, duration_frames=6)
        art = run_scenario(sc, keep_recording=False)
        assert max(art.transmitters_per_pulse) == 1
        # every present implant moves 96 bits per 1.92 ms frame
        for res in art.implants.values():
            assert res.throughput_bps == pytest.approx(50e3, rel=1e-6)
            assert res.ber.bit_errors == 0

    def test_aggregate_scales_with_population(self):
        rates = {}
        for n_present in (2, 4, 8):
            sc = reference_scenario(n_present=n_present, n_implants=8,
                                    duration_frames=4)
            art = run_scenario(sc, keep_recording=False)
            rates[n_present] = art.aggregate_throughput_bps
        assert rates[4] == pytest.approx(2 * rates[2], rel=0.01)
        assert rates[8] == pytest.approx(4 * rates[2], rel=0.01)

    def test_seed_changes_errors_not_digest(self):
        noisy = dict(n_present=1, n_implants=8, duration_frames=40,
                     noise_rms=0.0105)
        a = run_scenario(reference_scenario(seed=1, **noisy), keep_recording=False)
        b = run_scenario(reference_scenario(seed=2, **noisy), keep_recording=False)
        assert a.scenario_digest == b.scenario_digest
        ra, rb = a.implants[1], b.implants[1]
        assert ra.ber.bit_errors > 0
        assert rb.ber.bit_errors > 0
        assert not np.array_equal(ra.decoded_bits, rb.decoded_bits)

    def test_fifo_depth_logged_steady(self):
        sc = reference_scenario(n_present=2, n_implants=8, duration_frames=12)
        sim = LinkSimulator(sc)
        sim.run_config_phase()
        sim.run_frames(12, demodulate=False)
        depths = np.array(sim.fifo_depth_log)
        spread = depths.max(axis=0) - depths.min(axis=0)
        assert np.all(spread <= 12)  # one packet of slack around the mean


class TestReconstruction:
    def adc_scenario(self, tmp_path, wave, afe_noise=9.8e-6):
        from dustlink.implant import AfeModel
        path = tmp_path / "input.dnwf"
        write_dnwf(wave, path)
        sc = reference_scenario(n_present=1, n_implants=8, duration_frames=60,
                                ask_levels=8)
        sc.implants[0].link.lfsr_enable = False
        sc.implants[0].link.adc_slice = AdcSlice.S3_11
        sc.implants[0].input_signal = str(path)
        sc.implants[0].afe = AfeModel(input_noise_rms=afe_noise)
        return sc

    def test_dc_input_constant_mid_code(self, tmp_path):
        wave = Waveform(np.zeros(2000), 6250.0, 0.0)
        sc = self.adc_scenario(tmp_path, wave, afe_noise=0.0)
        art = run_scenario(sc, keep_recording=False)
        rec = reconstruct_signal(art, 1)
        assert np.allclose(rec["decoded_volts"], rec["decoded_volts"][0])
        assert abs(rec["decoded_volts"][0]) < 1e-3

    def test_sine_reconstruction_nrmse(self, tmp_path):
        t = np.arange(4000) / 6250.0
        wave = Waveform(0.008 * np.sin(2 * np.pi * 40.0 * t), 6250.0, 0.0)
        sc = self.adc_scenario(tmp_path, wave)
        art = run_scenario(sc, keep_recording=False)
        rec = reconstruct_signal(art, 1)
        assert rec["nrmse"] < 0.02

    def test_missing_input_rejected(self):
        sc = loopback_scenario(16, 6, min_bits=2000, seed=3)
        art = run_scenario(sc, keep_recording=False)
        with pytest.raises(ConfigurationError, match="input"):
            reconstruct_signal(art, 1)


class TestArtifactsAndReplay:
    def test_artifact_files_written(self, tmp_path):
        sc = reference_scenario(n_present=2, n_implants=4, duration_frames=6)
        out = tmp_path / "run"
        art = run_scenario(sc, out_dir=str(out))
        names = set(os.listdir(out))
        assert {"recording.dnwf", "schedule.json", "reports.json",
                "eye.csv", "histogram.csv", "ber.csv",
                "eye.png", "histogram.png"} <= names
        doc = json.loads((out / "reports.json").read_text())
        assert doc["implants"]["1"]["ber"]["bit_errors"] == 0

    def test_offline_replay_matches_live(self, tmp_path):
        sc = reference_scenario(n_present=2, n_implants=4, duration_frames=6)
        out = tmp_path / "run"
        art = run_scenario(sc, out_dir=str(out))
        rec = read_dnwf(out / "recording.dnwf")
        sched_doc = json.loads((out / "schedule.json").read_text())
        results = replay_demod(rec, sched_doc)
        by_id = {r.implant_id: r for r in results}
        for iid, live in art.implants.items():
            assert by_id[iid].ber.bit_errors == 0
            assert by_id[iid].ber.bits_compared == live.ber.bits_compared


class TestCli:
    def write_scenario(self, tmp_path, sc):
        path = tmp_path / "scenario.json"
        save_scenario(sc, path)
        return str(path)

    def test_run_and_demod_and_export(self, tmp_path):
        sc = reference_scenario(n_present=1, n_implants=4, duration_frames=6)
        scenario_path = self.write_scenario(tmp_path, sc)
        out = str(tmp_path / "out")
        assert cli.main(["run", "--scenario", scenario_path,
                         "--seed", "7", "--out", out]) == 0
        assert cli.main(["demod", "--wave", os.path.join(out, "recording.dnwf"),
                         "--schedule", os.path.join(out, "schedule.json"),
                         "--out", str(tmp_path / "replay")]) == 0
        csv_out = str(tmp_path / "wave.csv")
        assert cli.main(["export", "--wave", os.path.join(out, "recording.dnwf"),
                         "--format", "csv", "--out", csv_out]) == 0
        assert open(csv_out).readline().strip() == "time,amplitude"

    def test_discover_command(self, tmp_path, capsys):
        sc = reference_scenario(n_present=2, n_implants=2, duration_frames=1)
        scenario_path = self.write_scenario(tmp_path, sc)
        assert cli.main(["discover", "--scenario", scenario_path]) == 0
        assert "[1, 2]" in capsys.readouterr().out

    def test_ber_command(self, tmp_path):
        sc = loopback_scenario(16, 4, min_bits=1000, seed=5)
        scenario_path = self.write_scenario(tmp_path, sc)
        out = str(tmp_path / "ber")
        code = cli.main(["ber", "--scenario", scenario_path, "--levels", "16",
                         "--noise", "0:0.004:0.004", "--min-bits", "1000",
                         "--out", out])
        assert code == 0
        lines = open(os.path.join(out, "ber.csv")).read().splitlines()
        assert len(lines) == 3  # header + 2 noise points
        assert os.path.exists(os.path.join(out, "ber.png"))

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        doc = scenario_to_dict(reference_scenario(1, 8, 1))
        doc["implants"][0]["samples_per_packer"] = 4
        bad.write_text(json.dumps(doc))
        assert cli.main(["run", "--scenario", str(bad),
                         "--out", str(tmp_path / "x")]) == 1

    def test_schedule_error_exit_code(self, tmp_path):
        sc = reference_scenario(n_present=1, n_implants=8, duration_frames=1)
        doc = scenario_to_dict(sc)
        doc["implants"][0]["cycles_per_symbol"] = 16  # window > 2 ToF at 90 mm
        doc["implants"][0]["ask_levels"] = 2
        doc["implants"][0]["samples_per_packet"] = 16
        bad = tmp_path / "tight.json"
        bad.write_text(json.dumps(doc))
        assert cli.main(["run", "--scenario", str(bad),
                         "--out", str(tmp_path / "y")]) == 2
