"""Machinery shared by the four execution architectures.

Two workload drivers exist: a lean closed-loop request driver (queue-depth
benchmarks) and a task engine that executes partitioned TaskSpecs under any
scheme. Both are written as actor generators against arch-specific hooks,
so each architecture supplies only its submission path, its reaping path
and its parking signal.

Placement rules the engine enforces:

* full partitioning: poll tasklets run on the owning worker; a miss costs
  poll_cost_ns and re-enqueues at the back of the ready queue.
* callback partitioning: the fused poll+compute unit executes on whatever
  executor reaped the completion (worker in shared-nothing/direct access,
  I/O-instance thread in pools); only a blocked follow-up submission is
  handed back to the owner.
* coroutines: the owner resumes the frame; a resume that polls
  unsuccessfully costs resume+poll and leaves the frame suspended.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from ..metrics import InstanceStats, MetricsCollector
from ..ring import (ApiInstance, Completion, IoRequest, OpKind)
from ..tasks import (Geometry, KIND_COMPUTE, KIND_POLL, KIND_POLL_FUSED,
                     TaskSpec, apply_io_result, io_request_for,
                     make_coroutine, partition_callback, partition_full,
                     resume, run_compute, Done)


class WorkloadNotPartitionable(Exception):
    """The workload declares dependencies that cross static shards."""


class PoolShutdown(Exception):
    """Submission refused because the pool is draining or stopped."""


class TimeoutExceeded(Exception):
    """Drain deadline passed with work still in flight."""

    def __init__(self, abandoned: int):
        super().__init__(f"drain deadline exceeded with {abandoned} "
                         f"requests abandoned")
        self.abandoned = abandoned


@dataclass
class ExecCosts:
    """CPU charged on the executing thread per engine action (ns)."""

    submit_cost_ns: int = 150
    reap_cost_ns: int = 150
    poll_cost_ns: int = 100
    resume_cost_ns: int = 300
    lock_hold_ns: int = 250        # direct access critical sections
    inbox_push_cost_ns: int = 100  # dispatch-layer handoff


@dataclass
class RingConfig:
    sq_capacity: int = 256
    cq_capacity: int = 512
    sq_poll: bool = True
    idle_timeout_ns: int = 1_000_000

    def build(self) -> ApiInstance:
        return ApiInstance(self.sq_capacity, self.cq_capacity,
                           self.sq_poll, self.idle_timeout_ns)


@dataclass
class RequestWorkload:
    """Closed-loop request stream: keep queue_depth in flight."""

    op_count: int = 100_000
    op_kind: str = "seq_read"      # seq_read | rand_read | write_mix | nop
    block_size: int = 4096
    queue_depth: int = 32
    callback_cost_ns: int = 0


@dataclass
class TaskWorkload:
    """A corpus of TaskSpecs; dependencies gate task start order."""

    specs: list
    dependencies: list = field(default_factory=list)  # (before_id, after_id)
    max_live_per_worker: int = 8


@dataclass
class ArrivalWorkload:
    """Open-loop arrivals: (duration_ns, ops_per_sec) phases, played once."""

    phases: list
    op_kind: str = "rand_read"
    block_size: int = 4096

    def total_ops(self) -> int:
        return sum(int(round(dur * rate / 1e9)) for dur, rate in self.phases)


def request_stream(workload, geometry: Geometry, seed: int, shard: int):
    """Deterministic per-shard request factory for request workloads."""
    bs = workload.block_size
    nblocks = max(1, geometry.capacity_bytes // bs)
    rng = random.Random((seed << 8) ^ shard)
    kind = workload.op_kind
    seq_block = (shard * 7919) % nblocks
    counter = 0

    def next_request() -> IoRequest:
        nonlocal seq_block, counter
        counter += 1
        if kind == "seq_read":
            block = seq_block
            seq_block = (seq_block + 1) % nblocks
            return IoRequest(OpKind.READ, offset=block * bs, length=bs)
        if kind == "rand_read":
            return IoRequest(OpKind.READ, offset=rng.randrange(nblocks) * bs,
                             length=bs)
        if kind == "write_mix":
            op = OpKind.WRITE if counter % 4 == 0 else OpKind.READ
            return IoRequest(op, offset=rng.randrange(nblocks) * bs,
                             length=bs)
        if kind == "nop":
            return IoRequest(OpKind.NOP)
        raise ValueError(f"unknown op kind {kind!r}")

    return next_request


# -- request handles ------------------------------------------------------------

HANDLE_QUEUED = 0
HANDLE_SUBMITTED = 1
HANDLE_DONE = 2


class RequestHandle:
    """Pollable status object; the completion slot is written exactly once."""

    __slots__ = ("handle_id", "status", "completion", "owner", "inline_cont",
                 "inline_cost_ns", "queue_on_done")

    def __init__(self, handle_id: int, owner=None):
        self.handle_id = handle_id
        self.status = HANDLE_QUEUED
        self.completion: Optional[Completion] = None
        self.owner = owner              # worker awaiting this handle
        self.inline_cont = None         # (task, unit_index) for fused units
        self.inline_cost_ns = 0         # request-workload inline callback
        self.queue_on_done = False      # request driver consumes done queue

    def mark_submitted(self) -> None:
        if self.status == HANDLE_QUEUED:
            self.status = HANDLE_SUBMITTED

    def complete(self, comp: Completion) -> None:
        assert self.status != HANDLE_DONE, "completion slot written twice"
        self.completion = comp
        self.status = HANDLE_DONE

    def poll(self) -> int:
        return self.status


def handle_poll(handle: RequestHandle) -> int:
    """Non-blocking status read."""
    return handle.status


def handle_await_spin(handle: RequestHandle) -> Completion:
    """Spin with bounded backoff until Done; wall-clock contexts only."""
    import time
    backoff = 0.0
    while handle.status != HANDLE_DONE:
        time.sleep(backoff)
        backoff = min(0.001, backoff + 0.00005)
    return handle.completion


# -- per-worker state --------------------------------------------------------------


class LiveTask:
    __slots__ = ("spec", "units", "state", "pending_handle", "owner",
                 "frame", "done", "final_state")

    def __init__(self, spec: TaskSpec, units, state: int, owner):
        self.spec = spec
        self.units = units
        self.state = state
        self.pending_handle = None
        self.owner = owner
        self.frame = None
        self.done = False
        self.final_state = None


class Worker:
    """Execution state of one worker thread/actor."""

    __slots__ = ("index", "name", "signal", "collector", "ready", "blocked",
                 "handoff", "done_handles", "live", "foreign_done")

    def __init__(self, index: int, rt, collector: MetricsCollector):
        self.index = index
        self.name = f"worker-{index}"
        self.signal = rt.signal()
        self.collector = collector
        self.ready = deque()         # runnable items, FIFO (fair respawn)
        self.blocked = deque()       # submissions that bounced off a full SQ
        self.handoff = deque()       # cross-executor item handoffs (MPSC)
        self.done_handles = deque()  # request-driver completions (MPSC)
        self.live = {}               # task_id -> LiveTask
        self.foreign_done = 0        # tasks finished off-owner, not yet pruned


class ExecContext:
    """What executing a tasklet needs from the executor running it.

    ``submit`` is a generator: ``ok = yield from ectx.submit(req, handle)``.
    ``trace_exec``, when set, is called as (phase, executor_id, item) at the
    begin and end of every unit execution: the instrumentation behind the
    tasklet-atomicity and callback-placement checks.
    """

    __slots__ = ("rt", "costs", "collector", "submit", "geometry",
                 "results", "worker", "dep_broadcast", "trace_exec")

    def __init__(self, rt, costs, collector, submit, geometry, results,
                 worker=None, dep_broadcast=()):
        self.rt = rt
        self.costs = costs
        self.collector = collector
        self.submit = submit
        self.geometry = geometry
        self.results = results        # shared task_id -> final_state
        self.worker = worker          # None on I/O-instance executors
        self.dep_broadcast = dep_broadcast  # signals to poke on task finish
        self.trace_exec = None


# -- task engine --------------------------------------------------------------------


def start_task(spec: TaskSpec, scheme: str, owner: Worker,
               geometry: Geometry) -> tuple:
    """Create the LiveTask and its entry item for the given scheme."""
    if scheme == "coroutine":
        task = LiveTask(spec, None, spec.initial_state, owner)
        task.frame = make_coroutine(spec, geometry)
        return task, ("frame", task)
    if scheme == "full":
        units = partition_full(spec)
    elif scheme == "callback":
        units = partition_callback(spec)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    task = LiveTask(spec, units, spec.initial_state, owner)
    return task, ("unit", task, 0)


def _finish_task(task: LiveTask, ectx: ExecContext) -> None:
    task.final_state = task.state
    ectx.results[task.spec.task_id] = task.state
    task.done = True
    owner = task.owner
    if ectx.worker is not owner:
        ectx.collector.cross_thread_msgs += 1
        owner.foreign_done += 1
        owner.signal.notify()
    else:
        owner.live.pop(task.spec.task_id, None)
    for sig in ectx.dep_broadcast:
        sig.notify()


def _hand_to_owner(owner: Worker, item, ectx: ExecContext) -> None:
    if ectx.worker is owner:
        (owner.blocked if item[0] == "submit" else owner.ready).append(item)
    else:
        owner.handoff.append(item)
        ectx.collector.cross_thread_msgs += 1
        owner.signal.notify()


def _submit_unit_io(task: LiveTask, unit, ectx: ExecContext, make_handle):
    """Build and submit a unit's trailing I/O. Generator."""
    req = io_request_for(task.spec, unit.submit_io, unit.submit_index,
                         task.state, ectx.geometry)
    handle = make_handle(task.owner)
    nxt = unit.next_index
    follow_up = None
    if nxt is not None and task.units[nxt].kind == KIND_POLL_FUSED:
        handle.inline_cont = (task, nxt)
    else:
        assert nxt is not None, "submission without a poll successor"
        follow_up = ("unit", task, nxt)
    task.pending_handle = handle
    ok = yield from ectx.submit(req, handle)
    if not ok:
        ectx.collector.sq_full_retries += 1
        _hand_to_owner(task.owner, ("submit", task, req, handle, follow_up),
                       ectx)
        return
    ectx.collector.on_submit()
    if follow_up is not None:
        _hand_to_owner(task.owner, follow_up, ectx)


def execute_item(item, ectx: ExecContext, make_handle):
    """Run one schedulable item; generator yielding CPU costs.

    Returns True on progress, False for a poll miss (the caller re-enqueues
    at the back, which is the respawn rule).
    """
    trace = ectx.trace_exec
    if trace is not None:
        trace("begin", ectx.rt.executor_id(), item)
        result = yield from _execute_item(item, ectx, make_handle)
        trace("end", ectx.rt.executor_id(), item)
        return result
    result = yield from _execute_item(item, ectx, make_handle)
    return result


def _execute_item(item, ectx: ExecContext, make_handle):
    kind = item[0]
    costs = ectx.costs

    if kind == "unit":
        _, task, idx = item
        unit = task.units[idx]
        if unit.kind == KIND_COMPUTE:
            cost = unit.compute_cost()
            if cost:
                yield cost
            task.state = run_compute(task.state, unit.compute)
            if unit.submit_io is not None:
                yield from _submit_unit_io(task, unit, ectx, make_handle)
            elif unit.next_index is not None:
                _hand_to_owner(task.owner, ("unit", task, unit.next_index),
                               ectx)
            else:
                _finish_task(task, ectx)
            return True
        assert unit.kind == KIND_POLL, f"owner cannot run {unit.kind}"
        if costs.poll_cost_ns:
            yield costs.poll_cost_ns
        handle = task.pending_handle
        if handle.status != HANDLE_DONE:
            ectx.collector.tasklet_respawns += 1
            return False
        comp = handle.completion
        task.pending_handle = None
        task.state = apply_io_result(task.state, unit.awaits_index,
                                     int(comp.status), comp.value)
        if unit.next_index is not None:
            _hand_to_owner(task.owner, ("unit", task, unit.next_index), ectx)
        else:
            _finish_task(task, ectx)
        return True

    if kind == "fused":
        # runs on the reaping executor; completion already in hand
        _, task, idx, comp = item
        unit = task.units[idx]
        task.pending_handle = None
        task.state = apply_io_result(task.state, unit.awaits_index,
                                     int(comp.status), comp.value)
        cost = unit.compute_cost()
        if cost:
            yield cost
        task.state = run_compute(task.state, unit.compute)
        if unit.submit_io is not None:
            yield from _submit_unit_io(task, unit, ectx, make_handle)
        elif unit.next_index is not None:
            _hand_to_owner(task.owner, ("unit", task, unit.next_index), ectx)
        else:
            _finish_task(task, ectx)
        return True

    if kind == "frame":
        _, task = item
        frame = task.frame
        handle = task.pending_handle
        comp = None
        if handle is not None:
            if handle.status != HANDLE_DONE:
                cost = costs.resume_cost_ns + costs.poll_cost_ns
                if cost:
                    yield cost
                resume(frame)  # unsuccessful poll: re-suspends unchanged
                ectx.collector.coroutine_resumes += 1
                ectx.collector.tasklet_respawns += 1
                return False
            comp = handle.completion
            task.pending_handle = None
        cost = costs.resume_cost_ns + frame.upcoming_compute_cost()
        if cost:
            yield cost
        out = resume(frame, comp)
        ectx.collector.coroutine_resumes += 1
        if ectx.collector.frame_bytes_peak < frame.frame_bytes:
            ectx.collector.frame_bytes_peak = frame.frame_bytes
        if isinstance(out, Done):
            task.state = out.final_state
            _finish_task(task, ectx)
            return True
        handle = make_handle(task.owner)
        task.pending_handle = handle
        ok = yield from ectx.submit(out.request, handle)
        if not ok:
            ectx.collector.sq_full_retries += 1
            _hand_to_owner(task.owner,
                           ("submit", task, out.request, handle,
                            ("frame", task)), ectx)
            return True
        ectx.collector.on_submit()
        ectx.worker.ready.append(("frame", task))
        return True

    if kind == "submit":
        _, task, req, handle, follow_up = item
        ok = yield from ectx.submit(req, handle)
        if not ok:
            ectx.collector.sq_full_retries += 1
            ectx.worker.blocked.append(item)
            return False
        ectx.collector.on_submit()
        if follow_up is not None:
            ectx.worker.ready.append(follow_up)
        return True

    raise AssertionError(f"unknown item kind {kind}")


def deliver_completion(handle: RequestHandle, comp: Completion,
                       ectx: ExecContext, make_handle):
    """Reaper-side routing; runs fused continuations inline. Generator."""
    handle.complete(comp)
    if handle.inline_cost_ns:
        yield handle.inline_cost_ns
    cont = handle.inline_cont
    if cont is not None:
        task, idx = cont
        yield from execute_item(("fused", task, idx, comp), ectx, make_handle)
        return
    owner = handle.owner
    if owner is not None:
        if ectx.worker is not owner:
            ectx.collector.cross_thread_msgs += 1
        if handle.queue_on_done:
            owner.done_handles.append(handle)
        owner.signal.notify()


# -- worker loops ----------------------------------------------------------------------


def request_worker_loop(worker: Worker, hooks, shard_ops: int, qd: int,
                        next_request, worker_cb_cost: int, costs: ExecCosts):
    """Closed-loop request driver: keep qd in flight until shard_ops done."""
    inflight = 0
    submitted = 0
    done = 0
    pending_req = None
    pending_handle = None
    has_reap = getattr(hooks, "has_reap", True)
    while done < shard_ops:
        sig_version = worker.signal.version  # park guard: see Signal docs
        progressed = False
        dq = worker.done_handles
        n = len(dq)
        if n:
            for _ in range(n):
                dq.popleft()
            done += n
            inflight -= n
            progressed = True
        if has_reap:
            reaped = yield from hooks.reap_phase()
            progressed = progressed or reaped
        while inflight < qd and submitted < shard_ops:
            if pending_req is None:
                pending_req = next_request()
                pending_handle = hooks.new_handle(worker)
                pending_handle.queue_on_done = True
                pending_handle.inline_cost_ns = hooks.inline_cb_cost
            ok = yield from hooks.submit(pending_req, pending_handle)
            if not ok:
                worker.collector.sq_full_retries += 1
                break
            worker.collector.on_submit()
            pending_req = None
            pending_handle = None
            submitted += 1
            inflight += 1
            progressed = True
        if n and worker_cb_cost:
            # callbacks run after replenishment so they overlap fresh I/O
            yield worker_cb_cost * n
        if not progressed and done < shard_ops \
                and worker.signal.version == sig_version:
            yield worker.signal


def task_worker_loop(worker: Worker, hooks, shard_specs, scheme: str,
                     workload: TaskWorkload, ectx: ExecContext,
                     deps_by_task: dict):
    """Scheme-aware task driver; see module docstring for placement rules."""
    spec_iter = iter(shard_specs)
    deferred = deque()
    exhausted = False
    max_live = workload.max_live_per_worker
    miss_streak = 0
    results = ectx.results
    gated = bool(deps_by_task)
    has_reap = getattr(hooks, "has_reap", True)
    while True:
        sig_version = worker.signal.version  # park guard: see Signal docs
        progressed = False
        # cross-executor handoffs first: they represent completed work
        hq = worker.handoff
        while hq:
            item = hq.popleft()
            (worker.blocked if item[0] == "submit"
             else worker.ready).append(item)
            progressed = True
        if has_reap:
            reaped = yield from hooks.reap_phase()
            progressed = progressed or reaped
        # retry bounced submissions once per pass
        for _ in range(len(worker.blocked)):
            item = worker.blocked.popleft()
            ok = yield from execute_item(item, ectx, hooks.new_handle)
            progressed = progressed or ok
        # prune tasks finished on other executors, start new ones
        if worker.foreign_done:
            worker.foreign_done = 0
            for tid in [t for t, lt in worker.live.items() if lt.done]:
                del worker.live[tid]
                progressed = True
        while len(worker.live) < max_live and not (exhausted and not deferred):
            spec = None
            if gated:
                for _ in range(len(deferred)):
                    cand = deferred.popleft()
                    if all(d in results
                           for d in deps_by_task.get(cand.task_id, ())):
                        spec = cand
                        break
                    deferred.append(cand)
            if spec is None:
                nxt = next(spec_iter, None)
                if nxt is None:
                    exhausted = True
                    break  # deferred tasks are rescanned next pass
                if not gated or all(d in results for d in
                                    deps_by_task.get(nxt.task_id, ())):
                    spec = nxt
                else:
                    deferred.append(nxt)
                    continue
            task, entry = start_task(spec, scheme, worker, ectx.geometry)
            worker.live[spec.task_id] = task
            worker.ready.append(entry)
            progressed = True
        # run up to one full rotation of the ready queue per pass; polls
        # whose handle is still pending take a fast miss path that charges
        # the same costs and counters without the generator machinery
        costs = ectx.costs
        collector = ectx.collector
        ready = worker.ready
        for _ in range(len(ready)):
            item = ready.popleft()
            kind = item[0]
            if kind == "unit":
                task = item[1]
                unit = task.units[item[2]]
                if unit.kind == KIND_POLL \
                        and task.pending_handle.status != HANDLE_DONE:
                    if costs.poll_cost_ns:
                        yield costs.poll_cost_ns
                    collector.tasklet_respawns += 1
                    ready.append(item)
                    miss_streak += 1
                    continue
            elif kind == "frame":
                task = item[1]
                handle = task.pending_handle
                if handle is not None and handle.status != HANDLE_DONE:
                    cost = costs.resume_cost_ns + costs.poll_cost_ns
                    if cost:
                        yield cost
                    # an unsuccessful poll-resume leaves the frame unchanged
                    task.frame.resume_count += 1
                    collector.coroutine_resumes += 1
                    collector.tasklet_respawns += 1
                    ready.append(item)
                    miss_streak += 1
                    continue
            ok = yield from execute_item(item, ectx, hooks.new_handle)
            if ok:
                progressed = True
                miss_streak = 0
            else:
                ready.append(item)
                miss_streak += 1
        if (exhausted and not deferred and not worker.live
                and not worker.ready and not worker.blocked
                and not worker.handoff):
            return
        if not progressed and miss_streak >= len(worker.ready) \
                and worker.signal.version == sig_version:
            yield worker.signal
            miss_streak = 0


def shard_specs(workload: TaskWorkload, n_workers: int):
    """task_id modulo n_workers; the static sharding rule used everywhere."""
    shards = [[] for _ in range(n_workers)]
    for spec in workload.specs:
        shards[spec.task_id % n_workers].append(spec)
    return shards


def check_partitionable(workload: TaskWorkload, n_workers: int) -> None:
    for before, after in workload.dependencies:
        if before % n_workers != after % n_workers:
            raise WorkloadNotPartitionable(
                f"dependency {before}->{after} crosses shards under "
                f"{n_workers} static shards")


def deps_map(workload: TaskWorkload) -> dict:
    out = {}
    for before, after in workload.dependencies:
        out.setdefault(after, []).append(before)
    return out


def per_instance_stats(device, elapsed: int, inbox_peaks=None) -> list:
    device.finalize(device.clock.now)
    utils = device.utilization(elapsed)
    polls = device.poll_busy_ns()
    out = []
    for i in range(len(device.instances)):
        peak = inbox_peaks[i] if inbox_peaks else 0
        out.append(InstanceStats(i, utils[i], polls[i], peak))
    return out


class HandleFactory:
    """Allocates handles; one per run, callable as make_handle(owner)."""

    __slots__ = ("_next",)

    def __init__(self):
        self._next = 0

    def __call__(self, owner=None) -> RequestHandle:
        self._next += 1
        return RequestHandle(self._next, owner)
