"""Static and dynamic I/O thread pools.

Workers submit to a dispatch layer and poll the handle they get back; each
I/O instance is a dedicated actor (or submit/reap actor pair) exclusively
owning one ring instance. The dynamic variant adds a scaling controller
that widens or narrows the active prefix of instances by at most one per
window; starved instances drain, their poll threads time out, and the
actors park.
"""

from __future__ import annotations

import itertools
import threading
from collections import deque
from dataclasses import dataclass

from ..device import SimDevice, WallDeviceThread, effective_config
from ..metrics import MetricsCollector
from ..ring import PushResult
from ..runtime import Runtime
from ..tasks import Geometry
from .common import (ArrivalWorkload, ExecContext, ExecCosts, HandleFactory,
                     PoolShutdown, RequestWorkload, RingConfig, TaskWorkload,
                     TimeoutExceeded, Worker, deliver_completion, deps_map,
                     request_stream, request_worker_loop, shard_specs,
                     task_worker_loop)
from .driver import drive, finalize_report

UNIT_RUNNING = "running"
UNIT_DRAINING = "draining"
UNIT_ASLEEP = "asleep"

EXEC_IO_THREADS = "io_threads"
EXEC_INLINE_CALLBACKS = "inline_callbacks"

POLICY_ROUND_ROBIN = "round_robin"
POLICY_LEAST_LOADED = "least_loaded"

THREADING_SINGLE = "single_thread"
THREADING_PAIR = "submit_reap_pair"


@dataclass
class ControllerConfig:
    """Dual-watermark load controller; one admissible instantiation of
    "scale to the current I/O load". All constants are deliberately exposed."""

    window_ns: int = 5_000_000
    high_water: float = 0.75   # of sq_capacity, per active instance
    low_water: float = 0.25    # projected onto (active - 1) instances
    min_active: int = 1


class LoadMeter:
    """Time-weighted mean of in-flight (dispatched, not completed) requests."""

    __slots__ = ("level", "_last_t", "_integral", "_window_start",
                 "_window_integral", "_lock")

    def __init__(self, locked: bool):
        self.level = 0
        self._last_t = 0
        self._integral = 0
        self._window_start = 0
        self._window_integral = 0
        self._lock = threading.Lock() if locked else None

    def change(self, delta: int, now: int) -> None:
        lock = self._lock
        if lock:
            lock.acquire()
        self._integral += self.level * (now - self._last_t)
        self._last_t = now
        self.level += delta
        if lock:
            lock.release()

    def window_mean(self, now: int) -> float:
        lock = self._lock
        if lock:
            lock.acquire()
        self._integral += self.level * (now - self._last_t)
        self._last_t = now
        span = now - self._window_start
        mean = ((self._integral - self._window_integral) / span
                if span > 0 else float(self.level))
        self._window_start = now
        self._window_integral = self._integral
        if lock:
            lock.release()
        return mean


class IoInstanceUnit:
    __slots__ = ("index", "inst", "inbox", "inbox_capacity", "inbox_peak",
                 "signal", "reap_signal", "state", "pending_sub")

    def __init__(self, index, inst, inbox_capacity, rt):
        self.index = index
        self.inst = inst
        self.inbox = None  # deque, set by the pool
        self.inbox_capacity = inbox_capacity
        self.inbox_peak = 0
        self.signal = rt.signal()
        self.reap_signal = None  # separate signal in pair threading
        self.state = UNIT_RUNNING
        self.pending_sub = None  # request popped from inbox, SQ was full


class IoPool:
    """Dispatch layer plus k I/O instances over one device."""

    def __init__(self, rt, device: SimDevice, k_instances: int,
                 ring: RingConfig, costs: ExecCosts,
                 exec_mode: str = EXEC_IO_THREADS,
                 policy: str = POLICY_ROUND_ROBIN,
                 inbox_capacity: int = 1024,
                 controller: ControllerConfig = None,
                 threading_mode: str = THREADING_SINGLE,
                 cooperative: bool = False,
                 run_id: str = "pool"):
        if exec_mode not in (EXEC_IO_THREADS, EXEC_INLINE_CALLBACKS):
            raise ValueError(f"unknown exec mode {exec_mode!r}")
        if policy not in (POLICY_ROUND_ROBIN, POLICY_LEAST_LOADED):
            raise ValueError(f"unknown dispatch policy {policy!r}")
        self.rt = rt
        self.device = device
        self.k = k_instances
        self.ring_cfg = ring
        self.costs = costs
        self.exec_mode = exec_mode
        self.policy = policy
        self.controller_cfg = controller
        self.threading_mode = threading_mode
        self.cooperative = cooperative
        self.run_id = run_id
        self.stopping = False
        self.active_count = k_instances
        self.timeline = [(rt.now(), k_instances)]
        self.overflow = deque()
        self.handle_table = {}
        self.handle_factory = HandleFactory()
        self.pending = LoadMeter(locked=(rt.mode == "wall"))
        self.skip_violations = 0
        self._rr = itertools.count()
        self.instances = []
        self.io_collectors = []
        self._io_ectx = {}
        for i in range(k_instances):
            unit = IoInstanceUnit(i, ring.build(), inbox_capacity, rt)
            unit.inbox = deque()
            if threading_mode == THREADING_PAIR:
                unit.reap_signal = rt.signal()
            device.attach(unit.inst,
                          reaper_signal=unit.reap_signal or unit.signal,
                          space_signal=unit.signal)
            self.instances.append(unit)

    # -- dispatch layer --------------------------------------------------------

    def _pick(self) -> int:
        active = self.active_count
        if self.policy == POLICY_ROUND_ROBIN:
            return next(self._rr) % active
        return min(range(active), key=lambda i: len(self.instances[i].inbox))

    def _deliver_to_inbox(self, unit: IoInstanceUnit, entry) -> None:
        if unit.index >= self.active_count:
            self.skip_violations += 1  # must never happen; counted, asserted
        unit.inbox.append(entry)
        depth = len(unit.inbox)
        if depth > unit.inbox_peak:
            unit.inbox_peak = depth
        unit.signal.notify()

    def _dispatch(self, req, handle) -> None:
        req.user_data = handle.handle_id
        self.handle_table[handle.handle_id] = handle
        self.pending.change(1, self.rt.now())
        if self.overflow:
            # earlier parked requests go first
            self.overflow.append((req, handle))
            self._drain_overflow()
            return
        unit = self.instances[self._pick()]
        if len(unit.inbox) >= unit.inbox_capacity:
            self.overflow.append((req, handle))
            return
        self._deliver_to_inbox(unit, (req, handle))

    def _drain_overflow(self) -> None:
        while self.overflow:
            unit = self.instances[self._pick()]
            if len(unit.inbox) >= unit.inbox_capacity:
                return
            self._deliver_to_inbox(unit, self.overflow.popleft())

    def submitter_for(self, collector: MetricsCollector):
        """Generator-style submit hook bound to the executor's collector."""
        costs = self.costs

        def submit(req, handle):
            if self.stopping:
                raise PoolShutdown("pool is draining")
            if costs.inbox_push_cost_ns:
                yield costs.inbox_push_cost_ns
            collector.cross_thread_msgs += 1
            self._dispatch(req, handle)
            return True

        return submit

    def pool_submit(self, req, handle=None, inline_cost_ns: int = 0):
        """Immediate-return submission (the non-actor API surface)."""
        if self.stopping:
            raise PoolShutdown("pool is draining")
        if handle is None:
            handle = self.handle_factory(None)
        handle.inline_cost_ns = inline_cost_ns
        self._dispatch(req, handle)
        collector = getattr(self, "dev_collector", None)
        if collector is not None:
            collector.on_submit()
        return handle

    # -- instance execution ------------------------------------------------------

    def _make_io_ectx(self, geometry, results):
        collector = MetricsCollector(self.run_id)
        self.io_collectors.append(collector)
        ectx = ExecContext(self.rt, self.costs, collector,
                           self.submitter_for(collector), geometry, results,
                           worker=None)
        ectx.trace_exec = getattr(self, "trace_exec", None)
        return ectx

    def _submit_pass(self, unit: IoInstanceUnit):
        """Move inbox entries into the SQ; generator returning progress."""
        costs = self.costs
        rt = self.rt
        progressed = False
        while True:
            if unit.pending_sub is None:
                if not unit.inbox:
                    break
                unit.pending_sub = unit.inbox.popleft()
            req, handle = unit.pending_sub
            if costs.submit_cost_ns:
                yield costs.submit_cost_ns
            if unit.inst.sq_push(req, rt.now()) != PushResult.ACCEPTED:
                break  # backpressure: wait for completions to free headroom
            handle.mark_submitted()
            unit.pending_sub = None
            progressed = True
        return progressed

    def _reap_pass(self, unit: IoInstanceUnit, ectx: ExecContext):
        costs = self.costs
        comps = unit.inst.cq_reap(64)
        if not comps:
            return False
        if costs.reap_cost_ns:
            yield costs.reap_cost_ns * len(comps)
        table = self.handle_table
        meter = self.pending
        now = self.rt.now
        for c in comps:
            handle = table.pop(c.user_data)
            meter.change(-1, now())
            yield from deliver_completion(handle, c, ectx,
                                          self.handle_factory)
            if handle.inline_cost_ns and (unit.inbox or unit.pending_sub):
                # a long inline callback must not starve the SQ: refill
                # between callbacks like any sane event loop
                yield from self._submit_pass(unit)
        return True

    def _unit_drained(self, unit: IoInstanceUnit) -> bool:
        return (not unit.inbox and unit.pending_sub is None
                and unit.inst.pending_completion_count() == 0
                and not len(unit.inst.cq))

    def _io_actor_single(self, unit: IoInstanceUnit, ectx: ExecContext):
        while True:
            sig_version = unit.signal.version  # park guard: see Signal docs
            active = unit.index < self.active_count
            submitted = yield from self._submit_pass(unit)
            reaped = yield from self._reap_pass(unit, ectx)
            if active and self.overflow and not unit.inbox:
                self._drain_overflow()
            progressed = submitted or reaped
            if not self._unit_drained(unit):
                unit.state = UNIT_RUNNING if active else UNIT_DRAINING
            else:
                unit.state = UNIT_RUNNING if active else UNIT_ASLEEP
            if not progressed:
                if self.stopping and self._unit_drained(unit) and (
                        not self.overflow or unit.index >= self.active_count):
                    return
                if unit.signal.version == sig_version:
                    yield unit.signal

    def _io_actor_submit(self, unit: IoInstanceUnit):
        while True:
            sig_version = unit.signal.version
            submitted = yield from self._submit_pass(unit)
            if unit.index < self.active_count and self.overflow \
                    and not unit.inbox:
                self._drain_overflow()
                continue
            if not submitted:
                if self.stopping and not unit.inbox \
                        and unit.pending_sub is None and (
                            not self.overflow
                            or unit.index >= self.active_count):
                    return
                if unit.signal.version == sig_version:
                    yield unit.signal

    def _io_actor_reap(self, unit: IoInstanceUnit, ectx: ExecContext):
        while True:
            sig_version = unit.reap_signal.version
            reaped = yield from self._reap_pass(unit, ectx)
            if not reaped:
                if self.stopping \
                        and unit.inst.pending_completion_count() == 0 \
                        and not len(unit.inst.cq) and not unit.inbox \
                        and unit.pending_sub is None:
                    return
                if unit.reap_signal.version == sig_version:
                    yield unit.reap_signal

    def spawn_instance_actors(self, geometry, results) -> None:
        assert not self.cooperative
        for unit in self.instances:
            ectx = self._make_io_ectx(geometry, results)
            self._io_ectx[unit.index] = ectx
            if self.threading_mode == THREADING_PAIR:
                self.rt.spawn(self._io_actor_submit(unit),
                              f"io-{unit.index}-submit")
                self.rt.spawn(self._io_actor_reap(unit, ectx),
                              f"io-{unit.index}-reap")
            else:
                self.rt.spawn(self._io_actor_single(unit, ectx),
                              f"io-{unit.index}")

    def tick(self, index: int, geometry=None, results=None):
        """Cooperative mode: one submit+reap cycle on the caller. Generator."""
        unit = self.instances[index]
        ectx = self._io_ectx.get(index)
        if ectx is None:
            ectx = self._make_io_ectx(geometry or Geometry(4096, 1 << 30),
                                      results if results is not None else {})
            self._io_ectx[index] = ectx
        yield from self._submit_pass(unit)
        yield from self._reap_pass(unit, ectx)
        if self.overflow and unit.index < self.active_count:
            self._drain_overflow()

    # -- scaling controller ---------------------------------------------------------

    def set_active(self, n: int) -> None:
        assert abs(n - self.active_count) <= 1, "hysteresis: one step per window"
        assert self.controller_cfg is None or n >= self.controller_cfg.min_active
        assert 1 <= n <= self.k
        self.active_count = n
        self.timeline.append((self.rt.now(), n))
        self._drain_overflow()
        for unit in self.instances:
            unit.signal.notify()

    def controller_actor(self):
        cfg = self.controller_cfg
        sq_cap = self.ring_cfg.sq_capacity
        hi = cfg.high_water * sq_cap
        lo = cfg.low_water * sq_cap
        while not self.stopping:
            yield cfg.window_ns
            if self.stopping:
                return
            mean = self.pending.window_mean(self.rt.now())
            active = self.active_count
            if mean / active > hi and active < self.k:
                self.set_active(active + 1)
            elif active > cfg.min_active and mean / (active - 1) < lo:
                self.set_active(active - 1)

    # -- shutdown ---------------------------------------------------------------------

    def drained(self) -> bool:
        if self.overflow or self.pending.level != 0:
            return False
        return all(self._unit_drained(u) for u in self.instances)

    def abandoned_count(self) -> int:
        return self.pending.level

    def request_stop(self) -> None:
        self.stopping = True
        for unit in self.instances:
            unit.signal.notify()
            if unit.reap_signal is not None:
                unit.reap_signal.notify()

    def drain_and_shutdown(self, deadline_ns=None):
        """Outside-the-engine API: refuse new work, finish what is in flight.

        Returns the final MetricsReport when the pool was opened standalone
        (``open_pool``); raises TimeoutExceeded with the abandoned count when
        the deadline passes first. Virtual mode drives the calendar directly,
        so this must not be called from inside an actor.
        """
        self.request_stop()
        rt = self.rt
        if rt.mode == "virtual":
            start = rt.now()
            clock = rt.clock
            while not self.drained():
                if deadline_ns is not None and rt.now() - start >= deadline_ns:
                    raise TimeoutExceeded(self.abandoned_count())
                if not clock.step():
                    raise TimeoutExceeded(self.abandoned_count())
            rt.workload_done_ns = rt.now()
            clock.run_until_idle()
        else:
            import time
            t0 = time.monotonic()
            while not self.drained():
                if deadline_ns is not None \
                        and (time.monotonic() - t0) * 1e9 >= deadline_ns:
                    raise TimeoutExceeded(self.abandoned_count())
                time.sleep(0.0002)
            rt.workload_done_ns = rt.now()
        return self._standalone_report()

    def _standalone_report(self):
        if getattr(self, "dev_collector", None) is None:
            return None
        if getattr(self, "_dev_thread", None) is not None:
            self._dev_thread.stop()
            self._dev_thread = None
        for c in self.io_collectors:
            self.dev_collector.absorb(c)
        self.io_collectors = []
        return finalize_report(
            self.dev_collector, self.rt, self.device,
            inbox_peaks=[u.inbox_peak for u in self.instances],
            timeline=self.timeline)


def open_pool(k_instances: int, *, device_cfg=None, ring: RingConfig = None,
              costs: ExecCosts = None, exec_mode: str = EXEC_IO_THREADS,
              policy: str = POLICY_ROUND_ROBIN, inbox_capacity: int = 1024,
              controller: ControllerConfig = None,
              threading_mode: str = THREADING_SINGLE, mode: str = "virtual",
              seed: int = 0, run_id: str = None,
              cooperative: bool = False) -> IoPool:
    """Stand up a live pool for direct pool_submit/handle use.

    Callers submit with ``pool.pool_submit`` and finish with
    ``pool.drain_and_shutdown()``, which returns the final report.
    """
    from ..device import DeviceConfig
    device_cfg = device_cfg or DeviceConfig()
    ring = ring or RingConfig()
    costs = costs or ExecCosts()
    run_id = run_id or f"pool-{seed}"
    rt = Runtime(mode, seed)
    device = SimDevice(device_cfg, rt.clock, seed=seed)
    collector = MetricsCollector(run_id)
    device.completion_listener = collector.on_completion
    pool = IoPool(rt, device, k_instances, ring, costs, exec_mode, policy,
                  inbox_capacity, controller, threading_mode,
                  cooperative=cooperative, run_id=run_id)
    pool.dev_collector = collector
    geometry = Geometry(device_cfg.block_size, device_cfg.capacity_bytes)
    pool._dev_thread = None
    if not cooperative:
        pool.spawn_instance_actors(geometry, {})
        if controller is not None:
            rt.spawn(pool.controller_actor(), "controller")
    if mode == "wall":
        pool._dev_thread = WallDeviceThread(device).start()
    return pool


class _PoolHooks:
    has_reap = False  # I/O-instance actors reap; workers only poll handles

    def __init__(self, pool: IoPool, worker: Worker, inline_cb: int):
        self.pool = pool
        self.worker = worker
        self.new_handle = pool.handle_factory
        self.inline_cb_cost = inline_cb
        self.submit = pool.submitter_for(worker.collector)

    def reap_phase(self):
        return False
        yield  # pragma: no cover - uniform generator protocol


def _run_pool(workload, n_workers, k_instances, scheme, exec_mode, *,
              controller, device_cfg, ring, costs, policy, inbox_capacity,
              threading_mode, mode, seed, run_id, sched_jitter_ns,
              results_out, keep_completion_times, trace_exec=None):
    from ..device import DeviceConfig
    device_cfg = device_cfg or DeviceConfig()
    ring = ring or RingConfig()
    costs = costs or ExecCosts()
    is_tasks = isinstance(workload, TaskWorkload)
    is_arrival = isinstance(workload, ArrivalWorkload)
    dcfg = device_cfg if is_tasks else effective_config(device_cfg,
                                                        workload.op_kind)
    geometry = Geometry(dcfg.block_size, dcfg.capacity_bytes)

    rt = Runtime(mode, seed, sched_jitter_ns)
    device = SimDevice(dcfg, rt.clock, seed=seed)
    dev_collector = MetricsCollector(run_id,
                                     keep_completion_times=keep_completion_times)
    device.completion_listener = dev_collector.on_completion
    results = results_out if results_out is not None else {}

    pool = IoPool(rt, device, k_instances, ring, costs, exec_mode, policy,
                  inbox_capacity, controller, threading_mode, run_id=run_id)
    pool.trace_exec = trace_exec
    pool.spawn_instance_actors(geometry, results)
    if controller is not None:
        pool.active_count = controller.min_active if is_arrival else k_instances
        pool.timeline[0] = (rt.now(), pool.active_count)
        rt.spawn(pool.controller_actor(), "controller")

    worker_collectors = []
    worker_actors = []
    if is_arrival:
        collector = MetricsCollector(run_id)
        worker_collectors.append(collector)
        inline = workload_inline_cost(workload, exec_mode)
        gen = _arrival_actor(pool, workload, collector, geometry, seed,
                             inline, costs)
        worker_actors.append(rt.spawn(gen, "arrivals"))
    else:
        inline = workload_inline_cost(workload, exec_mode)
        worker_cb = 0
        if isinstance(workload, RequestWorkload) \
                and exec_mode == EXEC_IO_THREADS:
            worker_cb = workload.callback_cost_ns
        for i in range(n_workers):
            collector = MetricsCollector(run_id)
            worker = Worker(i, rt, collector)
            hooks = _PoolHooks(pool, worker, inline)
            worker_collectors.append(collector)
            if is_tasks:
                ectx = ExecContext(rt, costs, collector, hooks.submit,
                                   geometry, results, worker)
                ectx.trace_exec = trace_exec
                shards = shard_specs(workload, n_workers)
                gen = task_worker_loop(worker, hooks, shards[i], scheme,
                                       workload, ectx, deps_map(workload))
            else:
                shard_ops = workload.op_count // n_workers + (
                    1 if i < workload.op_count % n_workers else 0)
                qd = max(1, workload.queue_depth // n_workers)
                gen = request_worker_loop(
                    worker, hooks, shard_ops, qd,
                    request_stream(workload, geometry, seed, i),
                    worker_cb, costs)
            worker_actors.append(rt.spawn(gen, worker.name))

    dev_thread = None
    if mode == "wall":
        dev_thread = WallDeviceThread(device).start()

    def workers_done():
        if pool.pending.level != 0:  # cheap guard on the per-event hot path
            return False
        return all(a.done for a in worker_actors) and pool.drained()

    drive(rt, workers_done, on_done=pool.request_stop)
    if dev_thread is not None:
        dev_thread.stop()

    assert pool.skip_violations == 0, \
        "dispatch delivered to an inactive instance"
    for c in worker_collectors + pool.io_collectors:
        dev_collector.absorb(c)
    return finalize_report(
        dev_collector, rt, device,
        inbox_peaks=[u.inbox_peak for u in pool.instances],
        timeline=pool.timeline,
        keep_completion_times=keep_completion_times)


def workload_inline_cost(workload, exec_mode: str) -> int:
    if exec_mode != EXEC_INLINE_CALLBACKS:
        return 0
    if isinstance(workload, (RequestWorkload, ArrivalWorkload)):
        return getattr(workload, "callback_cost_ns", 0)
    return 0


def _arrival_actor(pool: IoPool, workload: ArrivalWorkload, collector,
                   geometry, seed, inline_cost, costs: ExecCosts):
    next_req = request_stream(workload, geometry, seed, 0)
    submit = pool.submitter_for(collector)
    rt = pool.rt
    next_t = rt.now()
    for duration_ns, rate in workload.phases:
        phase_end = next_t + duration_ns
        if rate <= 0:
            delay = phase_end - rt.now()
            if delay > 0:
                yield delay
            next_t = phase_end
            continue
        gap = int(round(1e9 / rate))
        while next_t < phase_end:
            delay = next_t - rt.now()
            if delay > 0:
                yield delay
            handle = pool.handle_factory(None)
            handle.inline_cost_ns = inline_cost
            yield from submit(next_req(), handle)
            collector.on_submit()
            next_t += gap
        next_t = phase_end


def run_static_pool(workload, n_workers: int, k_instances: int,
                    scheme: str = "full", exec_mode: str = EXEC_IO_THREADS, *,
                    device_cfg=None, ring: RingConfig = None,
                    costs: ExecCosts = None, policy: str = POLICY_ROUND_ROBIN,
                    inbox_capacity: int = 1024,
                    threading_mode: str = THREADING_SINGLE,
                    mode: str = "virtual", seed: int = 0, run_id: str = None,
                    sched_jitter_ns: int = 0, results_out: dict = None,
                    keep_completion_times: bool = False, trace_exec=None):
    return _run_pool(workload, n_workers, k_instances, scheme, exec_mode,
                     controller=None, device_cfg=device_cfg, ring=ring,
                     costs=costs, policy=policy,
                     inbox_capacity=inbox_capacity,
                     threading_mode=threading_mode, mode=mode, seed=seed,
                     run_id=run_id or f"static_pool-{seed}",
                     sched_jitter_ns=sched_jitter_ns, results_out=results_out,
                     keep_completion_times=keep_completion_times,
                     trace_exec=trace_exec)


def run_dynamic_pool(workload, n_workers: int, k_instances: int,
                     controller: ControllerConfig = None,
                     scheme: str = "full",
                     exec_mode: str = EXEC_IO_THREADS, *,
                     device_cfg=None, ring: RingConfig = None,
                     costs: ExecCosts = None,
                     policy: str = POLICY_ROUND_ROBIN,
                     inbox_capacity: int = 1024,
                     threading_mode: str = THREADING_SINGLE,
                     mode: str = "virtual", seed: int = 0, run_id: str = None,
                     sched_jitter_ns: int = 0, results_out: dict = None,
                     keep_completion_times: bool = False):
    return _run_pool(workload, n_workers, k_instances, scheme, exec_mode,
                     controller=controller or ControllerConfig(),
                     device_cfg=device_cfg, ring=ring, costs=costs,
                     policy=policy, inbox_capacity=inbox_capacity,
                     threading_mode=threading_mode, mode=mode, seed=seed,
                     run_id=run_id or f"dynamic_pool-{seed}",
                     sched_jitter_ns=sched_jitter_ns, results_out=results_out,
                     keep_completion_times=keep_completion_times)
