"""Shared-nothing and direct-access architecture behavior."""

import pytest

from ringbench.arch import (RequestWorkload, RingConfig, TaskWorkload,
                            WorkloadNotPartitionable, run_direct_access,
                            run_shared_nothing, run_static_pool)
from ringbench.device import DeviceConfig
from ringbench.tasks import Geometry, generate_corpus, interpret_task

US = 1_000
MS = 1_000_000

FAST_DEV = DeviceConfig(service_time_ns=2 * US, jitter_frac=0.0,
                        parallelism=64)


def oracle_states(specs, dcfg):
    geo = Geometry(dcfg.block_size, dcfg.capacity_bytes)
    return {s.task_id: interpret_task(s, geo) for s in specs}


class TestSharedNothing:
    def test_single_thread_equals_baseline(self):
        wl = RequestWorkload(op_count=5000, op_kind="seq_read", queue_depth=8)
        a = run_shared_nothing(wl, 1, device_cfg=FAST_DEV, seed=1)
        b = run_shared_nothing(wl, 1, device_cfg=FAST_DEV, seed=1)
        assert a.iops == b.iops
        assert a.conservation_holds()

    def test_four_threads_scale_within_5_percent(self):
        # P=64 >= 4x single-thread demand; per-thread qd fixed at 8
        dcfg = DeviceConfig(service_time_ns=100 * US, jitter_frac=0.0,
                            parallelism=64)
        base = run_shared_nothing(
            RequestWorkload(op_count=20_000, queue_depth=8), 1,
            device_cfg=dcfg, seed=2)
        four = run_shared_nothing(
            RequestWorkload(op_count=80_000, queue_depth=8), 4,
            device_cfg=dcfg, seed=2)
        assert four.iops == pytest.approx(4 * base.iops, rel=0.05)

    def test_zero_cross_thread_messages(self):
        wl = RequestWorkload(op_count=10_000, queue_depth=16)
        r = run_shared_nothing(wl, 4, device_cfg=FAST_DEV, seed=3)
        assert r.cross_thread_msgs == 0
        specs = generate_corpus(5, 30)
        r2 = run_shared_nothing(TaskWorkload(specs=specs), 4,
                                device_cfg=FAST_DEV, seed=3)
        assert r2.cross_thread_msgs == 0

    def test_cross_shard_dependency_rejected(self):
        specs = generate_corpus(5, 8)
        wl = TaskWorkload(specs=specs, dependencies=[(0, 1)])
        with pytest.raises(WorkloadNotPartitionable):
            run_shared_nothing(wl, 2, device_cfg=FAST_DEV)

    def test_same_shard_dependency_allowed_and_ordered(self):
        specs = generate_corpus(6, 8)
        # 0 and 2 share a shard under 2 workers
        wl = TaskWorkload(specs=specs, dependencies=[(0, 2)])
        results = {}
        run_shared_nothing(wl, 2, device_cfg=FAST_DEV, seed=1,
                           results_out=results)
        assert len(results) == 8

    def test_spsc_audit_clean(self):
        wl = RequestWorkload(op_count=4000, queue_depth=8)
        run_shared_nothing(wl, 3, device_cfg=FAST_DEV, seed=4, audit=True)

    def test_single_task_throughput_bounded_by_single_instance_max(self):
        # a sequential task cannot beat the measured qd=1 rate of one instance
        from ringbench.tasks import IoStep, TaskSpec
        dcfg = DeviceConfig(service_time_ns=50 * US, jitter_frac=0.0,
                            parallelism=64)
        qd1 = run_shared_nothing(
            RequestWorkload(op_count=2000, queue_depth=1), 1,
            device_cfg=dcfg, seed=5)
        single_instance_max = qd1.iops
        spec = TaskSpec(task_id=0, steps=tuple(IoStep("read", 1, "stride")
                                               for _ in range(500)))
        r = run_shared_nothing(TaskWorkload(specs=[spec]), 1,
                               device_cfg=dcfg, seed=5)
        task_io_rate = r.completed_ok * 1e9 / r.elapsed_ns
        assert task_io_rate <= single_instance_max * 1.02

    def test_wall_mode_conserves(self):
        wl = RequestWorkload(op_count=1200, op_kind="nop", queue_depth=8)
        r = run_shared_nothing(wl, 2, device_cfg=FAST_DEV, mode="wall",
                               seed=6)
        assert r.conservation_holds()
        assert r.completed_ok == 1200
        assert r.cross_thread_msgs == 0


class TestDirectAccess:
    def test_n1_m1_equals_shared_nothing_no_contention(self):
        wl = RequestWorkload(op_count=3000, queue_depth=8)
        r = run_direct_access(wl, 1, 1, device_cfg=FAST_DEV, seed=1)
        assert r.contention_events == 0
        assert r.conservation_holds()

    def test_contention_with_shared_instance(self):
        wl = RequestWorkload(op_count=20_000, queue_depth=32)
        r = run_direct_access(wl, 8, 1, device_cfg=FAST_DEV, seed=2)
        assert r.contention_events > 0

    def test_iops_not_above_static_pool_on_identical_workload(self):
        # consumer-bound configuration, identical seed: A/B comparison
        wl = RequestWorkload(op_count=30_000, queue_depth=32)
        da = run_direct_access(wl, 8, 1, device_cfg=FAST_DEV, seed=7)
        sp = run_static_pool(wl, 8, 1, device_cfg=FAST_DEV, seed=7)
        assert da.contention_events > 0
        assert da.iops <= sp.iops * 1.02

    def test_full_sq_bounces_to_caller_with_retry_count(self):
        # tiny rings and a slow device force bouncing
        slow = DeviceConfig(service_time_ns=5 * MS, jitter_frac=0.0,
                            parallelism=1)
        ring = RingConfig(sq_capacity=4, cq_capacity=8)
        wl = RequestWorkload(op_count=64, queue_depth=64)
        r = run_direct_access(wl, 2, 1, device_cfg=slow, ring=ring, seed=3)
        assert r.sq_full_retries > 0
        assert r.conservation_holds()

    def test_task_schemes_match_oracle(self):
        specs = generate_corpus(8, 30)
        expect = oracle_states(specs, FAST_DEV)
        for scheme in ("full", "callback", "coroutine"):
            results = {}
            r = run_direct_access(TaskWorkload(specs=list(specs)), 3, 2,
                                  scheme=scheme, device_cfg=FAST_DEV, seed=4,
                                  results_out=results)
            assert results == expect, scheme
            assert r.conservation_holds()

    def test_wall_mode_conserves(self):
        wl = RequestWorkload(op_count=1000, op_kind="nop", queue_depth=8)
        r = run_direct_access(wl, 3, 2, device_cfg=FAST_DEV, mode="wall",
                              seed=5)
        assert r.conservation_holds()
        assert r.completed_ok == 1000


class TestPlacementInstrumentation:
    """Tasklet atomicity and the callback-placement rule, via exec tracing."""

    def _run_traced(self, fn, args, scheme, extra=None):
        events = []
        specs = generate_corpus(77, 20)
        fn(TaskWorkload(specs=specs), *args, scheme=scheme,
           device_cfg=FAST_DEV, seed=9, trace_exec=lambda *e: events.append(e),
           **(extra or {}))
        return events

    @pytest.mark.parametrize("scheme", ("full", "callback", "coroutine"))
    def test_tasklet_starts_and_ends_on_one_executor(self, scheme):
        events = self._run_traced(run_static_pool, (3, 2), scheme)
        stack = {}
        for phase, executor, item in events:
            key = id(item)
            if phase == "begin":
                stack[key] = executor
            else:
                assert stack.pop(key) == executor, \
                    "tasklet migrated executors mid-run"
        assert not stack

    def test_callback_fused_units_run_on_reaping_executor(self):
        # in a pool, completions are reaped by io-instance actors; under
        # callback partitioning the fused unit must execute right there
        events = self._run_traced(run_static_pool, (3, 2), "callback")
        fused = [e for e in events if e[2][0] == "fused" and e[0] == "begin"]
        assert fused, "callback scheme must produce fused executions"
        assert all(str(executor).startswith("io-")
                   for _, executor, _ in fused)

    def test_full_scheme_polls_stay_on_workers(self):
        events = self._run_traced(run_static_pool, (3, 2), "full")
        units = [e for e in events if e[2][0] == "unit" and e[0] == "begin"]
        assert units
        assert all(str(executor).startswith("worker-")
                   for _, executor, _ in units)


class TestSchemeEquivalence:
    @pytest.mark.parametrize("arch,extra", [
        ("shared_nothing", (2,)), ("static_pool", (2, 2))])
    def test_final_states_bit_identical_across_schemes(self, arch, extra):
        specs = generate_corpus(31, 40)
        expect = oracle_states(specs, FAST_DEV)
        fn = run_shared_nothing if arch == "shared_nothing" else run_static_pool
        outcomes = []
        for scheme in ("full", "callback", "coroutine"):
            results = {}
            fn(TaskWorkload(specs=list(specs)), *extra, scheme=scheme,
               device_cfg=FAST_DEV, seed=11, results_out=results)
            outcomes.append(results)
        assert outcomes[0] == outcomes[1] == outcomes[2] == expect

    def test_interleave_jitter_does_not_change_states(self):
        specs = generate_corpus(32, 25)
        expect = oracle_states(specs, FAST_DEV)
        for jitter_seed in (1, 2, 3):
            results = {}
            run_static_pool(TaskWorkload(specs=list(specs)), 2, 2,
                            scheme="full", device_cfg=FAST_DEV,
                            seed=jitter_seed, sched_jitter_ns=400,
                            results_out=results)
            assert results == expect
