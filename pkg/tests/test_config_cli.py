"""Config round-trip, CLI surface, sweeps, verify exit codes."""

import json
import subprocess
import sys

import pytest

from ringbench.bench import (cmd_scaling_trace, cmd_sweep_callback,
                             cmd_sweep_qd, consumer_rate_oracle)
from ringbench.cli import main
from ringbench.config import (ConfigInvalid, ExperimentConfig, defaults,
                              from_dict, parse, serialize, to_dict)

MS = 1_000_000


def small_config(**overrides) -> ExperimentConfig:
    data = to_dict(defaults())
    data["workload"]["op_count"] = 3000
    data["architecture"]["kind"] = "shared_nothing"
    data["architecture"]["n_workers"] = 1
    data["device"]["jitter_frac"] = 0.0
    for key, value in overrides.items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return from_dict(data)


def zero_costs(data: dict) -> dict:
    # measurement-loop costs zeroed: Little's-law checks measure the device,
    # not the harness
    data["architecture"]["costs"] = {
        "submit_cost_ns": 0, "reap_cost_ns": 0, "poll_cost_ns": 0,
        "resume_cost_ns": 0, "lock_hold_ns": 0, "inbox_push_cost_ns": 0}
    return data


class TestConfig:
    def test_round_trip_identity(self):
        cfg = defaults()
        assert parse(serialize(cfg)) == cfg

    def test_round_trip_with_phases(self):
        cfg = small_config(**{"workload.kind": "arrivals",
                              "workload.phases": [[50 * MS, 5000],
                                                  [50 * MS, 100000]],
                              "architecture.kind": "dynamic_pool"})
        assert parse(serialize(cfg)) == cfg

    def test_unknown_field_has_path(self):
        with pytest.raises(ConfigInvalid) as exc:
            from_dict({"device": {"warp_speed": 9}})
        assert "device.warp_speed" in str(exc.value)

    def test_invalid_values_have_paths(self):
        for key, value, fragment in (
                ("architecture.kind", "ring0", "architecture.kind"),
                ("workload.op_kind", "?", "workload.op_kind"),
                ("architecture.ring.sq_capacity", 100,
                 "architecture.ring.sq_capacity"),
                ("workload.queue_depth", 0, "workload.queue_depth")):
            with pytest.raises(ConfigInvalid) as exc:
                small_config(**{key: value})
            assert fragment in str(exc.value)

    def test_cq_smaller_than_sq_rejected(self):
        with pytest.raises(ConfigInvalid) as exc:
            small_config(**{"architecture.ring.cq_capacity": 128,
                            "architecture.ring.sq_capacity": 256})
        assert "cq_capacity" in str(exc.value)

    def test_native_requires_path(self):
        with pytest.raises(ConfigInvalid) as exc:
            small_config(backend="native")
        assert "native.path" in str(exc.value)


class TestSweepQd:
    def test_prediction_column_and_monotonicity(self, tmp_path):
        cfg = from_dict(zero_costs(to_dict(small_config())))
        path = cmd_sweep_qd(cfg, [1, 4, 16, 64], tmp_path)
        import csv
        rows = list(csv.DictReader(open(path)))
        assert [int(r["qd"]) for r in rows] == [1, 4, 16, 64]
        for r in rows:
            got = float(r["iops"])
            want = float(r["little_law_iops"])
            assert abs(got - want) / want < 0.01
        iops = [float(r["iops"]) for r in rows]
        assert iops == sorted(iops)

    def test_preconditioning_run_excluded(self, tmp_path):
        cfg = small_config()
        data = to_dict(cfg)
        data["runs"] = 3
        cfg = from_dict(data)
        path = cmd_sweep_qd(cfg, [4], tmp_path)
        import csv
        rows = list(csv.DictReader(open(path)))
        assert [int(r["run"]) for r in rows] == [1, 2, 3]  # run 0 discarded

    def test_rejects_bad_qd(self, tmp_path):
        with pytest.raises(ConfigInvalid):
            cmd_sweep_qd(small_config(), [0], tmp_path)


class TestSweepCallback:
    def test_modes_and_oracle_column(self, tmp_path):
        cfg = small_config(**{"architecture.kind": "static_pool",
                              "architecture.n_workers": 8,
                              "architecture.k_instances": 1,
                              "workload.queue_depth": 16,
                              "workload.op_count": 3000})
        path = cmd_sweep_callback(cfg, [0, 100_000], tmp_path)
        import csv
        rows = list(csv.DictReader(open(path)))
        modes = {r["exec_mode"] for r in rows}
        assert modes == {"inline_callbacks", "io_threads"}
        by = {(r["exec_mode"], int(r["callback_cost_ns"])): float(r["iops"])
              for r in rows}
        # zero cost: both modes equal within 5%
        assert by[("inline_callbacks", 0)] == pytest.approx(
            by[("io_threads", 0)], rel=0.05)
        # large cost collapses inline mode toward the oracle
        oracle = float(next(r["oracle_iops"] for r in rows
                            if r["exec_mode"] == "inline_callbacks"
                            and int(r["callback_cost_ns"]) == 100_000))
        assert by[("inline_callbacks", 100_000)] <= oracle * 1.10
        assert by[("inline_callbacks", 100_000)] == pytest.approx(oracle,
                                                                  rel=0.10)

    def test_requires_pool_architecture(self, tmp_path):
        with pytest.raises(ConfigInvalid):
            cmd_sweep_callback(small_config(), [0], tmp_path)


class TestScalingTrace:
    def trace_config(self):
        return small_config(**{
            "architecture.kind": "dynamic_pool",
            "architecture.k_instances": 4,
            "architecture.ring.sq_capacity": 16,
            "architecture.ring.cq_capacity": 32,
            "architecture.controller.window_ns": 5 * MS,
            "device.submission_cpu_cost_ns": 20_000,
            "workload.kind": "arrivals",
            "workload.phases": [[50 * MS, 5000], [50 * MS, 100_000],
                                [50 * MS, 5000], [50 * MS, 100_000]]})

    def test_square_wave_outputs(self, tmp_path):
        summary, timeline, dyn, stat = cmd_scaling_trace(self.trace_config(),
                                                         tmp_path)
        counts = [n for _, n in dyn.active_instance_timeline]
        assert min(counts) == 1 and max(counts) >= 3  # shrink and regrow
        assert dyn.poll_busy_ns_total() < stat.poll_busy_ns_total()
        lines = open(timeline).read().splitlines()
        assert lines[0] == "time_ns,active_count"
        assert len(lines) > 2

    def test_requires_dynamic_pool(self, tmp_path):
        with pytest.raises(ConfigInvalid):
            cmd_scaling_trace(small_config(), tmp_path)

    def test_constant_full_load_flat_timeline(self, tmp_path):
        cfg = self.trace_config()
        data = to_dict(cfg)
        data["workload"]["phases"] = [[100 * MS, 100_000]]
        summary, timeline, dyn, stat = cmd_scaling_trace(from_dict(data),
                                                         tmp_path)
        counts = [n for _, n in dyn.active_instance_timeline]
        # ramps up and then never scales down under saturating load
        assert counts[-1] == max(counts)
        peak_at = counts.index(max(counts))
        assert all(n == counts[-1] for n in counts[peak_at:])


class TestCli:
    def test_dump_defaults_round_trips(self, capsys):
        assert main(["--dump-defaults"]) == 0
        out = capsys.readouterr().out
        assert parse(out) == defaults()

    def test_no_command_is_config_error(self, capsys):
        assert main([]) == 2

    def test_sweep_qd_end_to_end(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(serialize(small_config()))
        rc = main(["sweep-qd", "--config", str(cfg_path), "--qd-list", "1,4",
                   "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "sweep_qd.csv").exists()

    def test_seed_override_changes_output(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        base = small_config()
        data = to_dict(base)
        data["device"]["jitter_frac"] = 0.2
        cfg_path.write_text(json.dumps(data))
        a, b, c = (tmp_path / x for x in ("a", "b", "c"))
        for out, seed in ((a, "1"), (b, "1"), (c, "2")):
            out.mkdir()
            rc = main(["sweep-qd", "--config", str(cfg_path), "--seed", seed,
                       "--qd-list", "4", "--out", str(out)])
            assert rc == 0
        assert (a / "sweep_qd.csv").read_bytes() == \
            (b / "sweep_qd.csv").read_bytes()
        assert (a / "sweep_qd.csv").read_bytes() != \
            (c / "sweep_qd.csv").read_bytes()

    def test_bad_config_file_is_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"architecture": {"kind": "nope"}}')
        rc = main(["sweep-qd", "--config", str(bad), "--out", str(tmp_path)])
        assert rc == 2

    def test_native_backend_unavailable_is_exit_2(self, tmp_path, capsys):
        from ringbench.native import native_available
        if native_available():
            pytest.skip("native backend present on this host")
        cfg_path = tmp_path / "cfg.json"
        data = to_dict(small_config())
        data["backend"] = "native"
        data["native"]["path"] = str(tmp_path / "target.bin")
        cfg_path.write_text(json.dumps(data))
        rc = main(["sweep-qd", "--config", str(cfg_path), "--out",
                   str(tmp_path)])
        assert rc == 2

    def test_verify_passes_on_defaults(self, capsys):
        rc = main(["verify"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "VERIFY PASS" in out
        assert all(" FAIL" not in line for line in out.splitlines())

    def test_verify_fails_on_seeded_ring_violation(self, tmp_path, capsys):
        # cq smaller than sq violates the completion-loss invariant
        data = to_dict(defaults())
        data["architecture"]["ring"]["sq_capacity"] = 256
        data["architecture"]["ring"]["cq_capacity"] = 128
        cfg_path = tmp_path / "bad_ring.json"
        cfg_path.write_text(json.dumps(data))
        rc = main(["verify", "--config", str(cfg_path)])
        out = capsys.readouterr().out
        assert rc == 1
        assert "FAIL" in out


class TestOracle:
    def test_consumer_rate_oracle_caps_at_device(self):
        cfg = small_config(**{"architecture.kind": "static_pool"})
        assert consumer_rate_oracle(cfg, 0) == pytest.approx(
            min(32, cfg.device.parallelism) * 1e9 / cfg.device.service_time_ns)
        slow = consumer_rate_oracle(cfg, 1_000_000)
        assert slow == pytest.approx(
            cfg.architecture.k_instances * 1e9
            / (1_000_000 + cfg.architecture.costs.reap_cost_ns
               + cfg.architecture.costs.submit_cost_ns))


class TestConsoleScript:
    def test_module_invocation(self):
        proc = subprocess.run([sys.executable, "-m", "ringbench.cli",
                               "--dump-defaults"], capture_output=True,
                              text=True, timeout=60)
        assert proc.returncode == 0
        assert '"backend": "sim"' in proc.stdout
