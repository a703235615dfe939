"""Deterministic discrete-event storage device behind the ring interface.

The device is an event calendar plus a small amount of per-instance state:
a bounded set of in-service slots (internal parallelism), a fixed service
time with optional seeded jitter, chain gating for linked requests, fault
injection, and an accounting model of the per-instance submission-poll
thread (the steep upkeep cost of ring instances).

The same device logic runs in two modes:

* virtual time: events execute on a ``VirtualClock`` driven by the caller;
  identical (config, seed) gives bit-identical traces.
* wall clock: events execute on a dedicated thread draining the same
  calendar against ``time.monotonic_ns()``; used by the real-thread test
  paths where timing is approximate but conservation must hold.

In both modes the device thread/engine is the sole consumer of every
attached SQ and the sole producer of every attached CQ, preserving the
rings' SPSC contract.
"""

from __future__ import annotations

import heapq
import random
import threading
import time
from dataclasses import dataclass, field, replace

from .ring import ApiInstance, Completion, CompletionStatus

POLL_ACTIVE = 0
POLL_ASLEEP = 1


class VirtualClock:
    """Time-ordered event calendar; ties fire in insertion order."""

    __slots__ = ("now", "_heap", "_seq")

    def __init__(self):
        self.now = 0
        self._heap = []
        self._seq = 0

    def at(self, t: int, fn) -> None:
        assert t >= self.now, "cannot schedule into the past"
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, fn))

    def after(self, delay: int, fn) -> None:
        self.at(self.now + delay, fn)

    def step(self) -> bool:
        if not self._heap:
            return False
        t, _, fn = heapq.heappop(self._heap)
        self.now = t
        fn()
        return True

    def run_until_idle(self, max_events: int = 500_000_000) -> int:
        n = 0
        while self.step():
            n += 1
            if n >= max_events:
                raise RuntimeError(f"event budget exhausted after {n} events")
        return n

    def run_until(self, t: int) -> None:
        heap = self._heap
        while heap and heap[0][0] <= t:
            self.step()
        if self.now < t:
            self.now = t

    def pending(self) -> int:
        return len(self._heap)


class WallClock:
    """Same calendar interface against the OS monotonic clock.

    Scheduling is thread-safe; ``drain_loop`` is run by exactly one thread
    (the device engine thread), which executes callbacks as their deadlines
    pass.
    """

    def __init__(self):
        self._origin = time.monotonic_ns()
        self._heap = []
        self._seq = 0
        self._cond = threading.Condition()
        self._stop = False

    @property
    def now(self) -> int:
        return time.monotonic_ns() - self._origin

    def at(self, t: int, fn) -> None:
        with self._cond:
            self._seq += 1
            heapq.heappush(self._heap, (t, self._seq, fn))
            self._cond.notify()

    def after(self, delay: int, fn) -> None:
        self.at(self.now + delay, fn)

    def request_stop(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify()

    def drain_loop(self) -> None:
        while True:
            fn = None
            with self._cond:
                if self._stop:
                    return
                if self._heap:
                    t0 = self._heap[0][0]
                    now = self.now
                    if t0 <= now:
                        _, _, fn = heapq.heappop(self._heap)
                    else:
                        self._cond.wait(min((t0 - now) / 1e9, 0.001))
                else:
                    self._cond.wait(0.001)
            if fn is not None:
                fn()


@dataclass
class PollConfig:
    idle_timeout_ns: int = 1_000_000  # ms-granularity timeout
    wakeup_cost_ns: int = 5_000       # syscall-scale; tunable, not ground truth


@dataclass
class DeviceConfig:
    """Parameterized device model; defaults are the ``desk-nvme`` preset.

    ``random_read_multiplier`` is applied by experiment builders when the
    workload is random reads (the device itself treats offsets uniformly).
    """

    service_time_ns: int = 100_000
    jitter_frac: float = 0.1
    parallelism: int = 64
    capacity_bytes: int = 1 << 30
    block_size: int = 4096
    submission_cpu_cost_ns: int = 0
    random_read_multiplier: float = 1.0
    poll: PollConfig = field(default_factory=PollConfig)

    def validate(self) -> None:
        if self.service_time_ns <= 0:
            raise ValueError("service_time_ns must be > 0")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if not 0.0 <= self.jitter_frac < 1.0:
            raise ValueError("jitter_frac must be in [0, 1)")
        if self.block_size < 1 or self.capacity_bytes < self.block_size:
            raise ValueError("capacity must hold at least one block")


def desk_nvme(jitter: bool = True) -> DeviceConfig:
    cfg = DeviceConfig()
    return cfg if jitter else replace(cfg, jitter_frac=0.0)


def effective_config(cfg: DeviceConfig, op_kind: str) -> DeviceConfig:
    """Apply the random-read service multiplier for rand_read workloads."""
    if op_kind == "rand_read" and cfg.random_read_multiplier != 1.0:
        return replace(cfg, service_time_ns=int(
            cfg.service_time_ns * cfg.random_read_multiplier))
    return cfg


def steady_state_iops(cfg: DeviceConfig, queue_depth: int) -> float:
    """Little's-law prediction the simulator must converge to (zero jitter)."""
    if queue_depth < 1:
        raise ValueError("queue_depth must be >= 1")
    return min(queue_depth, cfg.parallelism) * 1e9 / cfg.service_time_ns


def device_step(device: "SimDevice", clock: VirtualClock) -> int:
    """Advance the calendar by one event; 0 when nothing is pending."""
    assert device.clock is clock
    return 1 if clock.step() else 0


class PollThread:
    """Activity model of one instance's submission-polling kernel thread.

    Active -> Asleep exactly when now - last_submission_seen reaches the
    idle timeout; waking charges wakeup_cost. busy_ns accumulates wall time
    over Active periods (a polling thread burns CPU whether or not entries
    arrive), which is what makes low-rate submission streams expensive.
    """

    __slots__ = ("state", "last_submission_seen", "idle_timeout",
                 "wakeup_cost", "busy_ns", "active_since", "wakeups",
                 "sleeps", "_wake_pending", "_check_pending", "_wake_at")

    def __init__(self, cfg: PollConfig, now: int = 0):
        self.state = POLL_ACTIVE
        self.last_submission_seen = now
        self.idle_timeout = cfg.idle_timeout_ns
        self.wakeup_cost = cfg.wakeup_cost_ns
        self.busy_ns = 0
        self.active_since = now
        self.wakeups = 0
        self.sleeps = 0
        self._wake_pending = False
        self._check_pending = False
        self._wake_at = None

    def tick(self, now: int, submissions_seen: int) -> int:
        """Advance the model outside the event calendar (direct use/tests)."""
        if self._wake_at is not None and now >= self._wake_at:
            self.wake(self._wake_at)
            self._wake_at = None
        if submissions_seen > 0:
            if self.state == POLL_ASLEEP:
                if self._wake_at is None:
                    self._wake_at = now + self.wakeup_cost
            else:
                self.last_submission_seen = now
        elif (self.state == POLL_ACTIVE
              and now - self.last_submission_seen >= self.idle_timeout):
            self.sleep(self.last_submission_seen + self.idle_timeout)
        return self.state

    def wake(self, now: int) -> None:
        assert self.state == POLL_ASLEEP
        self.state = POLL_ACTIVE
        self.active_since = now
        self.last_submission_seen = now
        self.busy_ns += self.wakeup_cost  # charged at the activation instant
        self.wakeups += 1

    def sleep(self, now: int) -> None:
        assert self.state == POLL_ACTIVE
        self.busy_ns += now - self.active_since
        self.state = POLL_ASLEEP
        self.sleeps += 1

    def finalize(self, now: int) -> None:
        if self.state == POLL_ACTIVE:
            self.busy_ns += now - self.active_since
            self.active_since = now


class _InstState:
    __slots__ = ("inst", "poll", "chain_block", "chain_cancel",
                 "consumer_free_at", "sweep_pending", "reaper_signal",
                 "space_signal", "in_service", "busy_since", "busy_ns",
                 "consumed")

    def __init__(self, inst: ApiInstance, poll):
        self.inst = inst
        self.poll = poll
        self.chain_block = None   # request_id gating a linked chain
        self.chain_cancel = False  # cancelling the tail of a failed chain
        self.consumer_free_at = 0
        self.sweep_pending = False
        self.reaper_signal = None
        self.space_signal = None
        self.in_service = 0
        self.busy_since = 0
        self.busy_ns = 0
        self.consumed = 0


class SimDevice:
    """Shared device multiplexing any number of attached instances.

    Service slots (internal parallelism) are global; consumption from each
    SQ is gated by free slots, the instance's poll-thread state, linked
    chains, and the per-entry submission CPU cost.
    """

    def __init__(self, cfg: DeviceConfig, clock, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.clock = clock
        self.rng = random.Random(seed ^ 0x5DEECE66D)
        self.instances: list[_InstState] = []
        self.in_service = 0
        self.fault_plan: dict[tuple[int, int], int] = {}
        self.completion_listener = None  # fn(instance_id, comp, submit_time)
        self.trace = None                # fn(time, kind, instance_id, req_id)
        self.completed_total = 0
        self.canceled_total = 0
        self.errored_total = 0
        self._jitter = cfg.jitter_frac != 0.0

    # -- wiring ---------------------------------------------------------------

    def attach(self, inst: ApiInstance, reaper_signal=None,
               space_signal=None) -> int:
        poll = None
        if inst.sq_poll_enabled:
            poll = PollThread(replace(self.cfg.poll,
                                      idle_timeout_ns=inst.sq_poll_idle_timeout),
                              self.clock.now)
        st = _InstState(inst, poll)
        st.reaper_signal = reaper_signal
        st.space_signal = space_signal
        inst.instance_id = len(self.instances)
        self.instances.append(st)
        inst.on_submit = self._on_submit_hook
        if poll is not None:
            self._arm_poll_check(st)
        return inst.instance_id

    def inject_fault(self, instance_id: int, request_id: int,
                     code: int = 5) -> None:
        self.fault_plan[(instance_id, request_id)] = code

    # -- submission side (runs on producer context) -----------------------------

    def _on_submit_hook(self, inst: ApiInstance) -> None:
        st = self.instances[inst.instance_id]
        now = self.clock.now
        if self.trace is not None:
            self.trace(now, "submit", inst.instance_id, -1)
        poll = st.poll
        if poll is not None:
            if poll.state == POLL_ASLEEP:
                if not poll._wake_pending:
                    poll._wake_pending = True
                    self.clock.at(now + poll.wakeup_cost,
                                  lambda: self._wake_poll(st))
                return  # the wake event performs the first sweep
            poll.last_submission_seen = now
        self._schedule_sweep(st, now)

    # -- poll thread events ------------------------------------------------------

    def _wake_poll(self, st: _InstState) -> None:
        poll = st.poll
        now = self.clock.now
        poll._wake_pending = False
        poll.wake(now)
        if self.trace is not None:
            self.trace(now, "poll_wake", st.inst.instance_id, -1)
        self._arm_poll_check(st)
        self._sweep(st)

    def _arm_poll_check(self, st: _InstState) -> None:
        poll = st.poll
        if poll._check_pending or poll.state != POLL_ACTIVE:
            return
        poll._check_pending = True
        self.clock.at(poll.last_submission_seen + poll.idle_timeout,
                      lambda: self._poll_check(st))

    def _poll_check(self, st: _InstState) -> None:
        poll = st.poll
        poll._check_pending = False
        if poll.state != POLL_ACTIVE:
            return
        now = self.clock.now
        idle_deadline = poll.last_submission_seen + poll.idle_timeout
        if now >= idle_deadline:
            poll.sleep(idle_deadline)
            if self.trace is not None:
                self.trace(idle_deadline, "poll_sleep",
                           st.inst.instance_id, -1)
        else:
            self._arm_poll_check(st)

    # -- consumption --------------------------------------------------------------

    def _schedule_sweep(self, st: _InstState, at: int) -> None:
        if st.sweep_pending:
            return
        st.sweep_pending = True
        self.clock.at(at, lambda: self._run_sweep(st))

    def _run_sweep(self, st: _InstState) -> None:
        st.sweep_pending = False
        self._sweep(st)

    def _service_ns(self) -> int:
        base = self.cfg.service_time_ns
        if not self._jitter:
            return base
        j = self.cfg.jitter_frac
        return max(1, int(base * (1.0 + self.rng.uniform(-j, j))))

    def _sweep(self, st: _InstState) -> None:
        cfg = self.cfg
        clock = self.clock
        inst = st.inst
        sq = inst.sq
        popped = 0
        while True:
            if st.chain_block is not None:
                break
            poll = st.poll
            if poll is not None and poll.state != POLL_ACTIVE:
                break
            req = sq.peek()
            if req is None:
                break
            now = clock.now
            cost = cfg.submission_cpu_cost_ns
            if st.chain_cancel:
                if cost:
                    if now < st.consumer_free_at:
                        self._schedule_sweep(st, st.consumer_free_at)
                        break
                    st.consumer_free_at = now + cost
                sq.try_pop()
                popped += 1
                st.consumed += 1
                self._deliver(st, req, CompletionStatus.CANCELED, 0,
                              now + cost)
                if not req.link_flag:
                    st.chain_cancel = False
                continue
            if self.in_service >= cfg.parallelism:
                break
            if cost:
                if now < st.consumer_free_at:
                    self._schedule_sweep(st, st.consumer_free_at)
                    break
                st.consumer_free_at = now + cost
            sq.try_pop()
            popped += 1
            st.consumed += 1
            if poll is not None:
                # consuming counts as seen traffic; a draining thread is busy
                poll.last_submission_seen = now
            if st.in_service == 0:
                st.busy_since = now
            st.in_service += 1
            self.in_service += 1
            if self.trace is not None:
                self.trace(now, "consume", inst.instance_id, req.request_id)
            fault = self.fault_plan.get((inst.instance_id, req.request_id))
            if fault is not None:
                status, value = CompletionStatus.ERROR, fault
            else:
                status, value = CompletionStatus.OK, req.length
            done_at = now + cost + self._service_ns()
            clock.at(done_at,
                     self._completion_fn(st, req, status, value, done_at))
            if req.link_flag:
                st.chain_block = req.request_id
        if popped and st.space_signal is not None:
            st.space_signal.notify()

    def _completion_fn(self, st, req, status, value, done_at):
        return lambda: self._complete(st, req, status, value, done_at)

    def _complete(self, st: _InstState, req, status, value, t: int) -> None:
        self.in_service -= 1
        st.in_service -= 1
        if st.in_service == 0:
            st.busy_ns += t - st.busy_since
        self._deliver(st, req, status, value, t)
        if st.chain_block == req.request_id:
            st.chain_block = None
            if status != CompletionStatus.OK:
                st.chain_cancel = True
        # a slot freed: give every backlogged instance a chance, self first
        if len(st.inst.sq) or st.chain_cancel:
            self._ensure_awake_and_sweep(st, t)
        for other in self.instances:
            if other is not st and len(other.inst.sq):
                self._ensure_awake_and_sweep(other, t)

    def _ensure_awake_and_sweep(self, st: _InstState, t: int) -> None:
        # A poll thread that slept over a saturation stall leaves SQ entries
        # stranded; the producer-side NEED_WAKEUP check is modeled here.
        poll = st.poll
        if poll is not None and poll.state == POLL_ASLEEP:
            if not poll._wake_pending:
                poll._wake_pending = True
                self.clock.at(t + poll.wakeup_cost,
                              lambda: self._wake_poll(st))
            return
        self._schedule_sweep(st, t)

    def _deliver(self, st: _InstState, req, status, value, t: int) -> None:
        inst = st.inst
        comp = Completion(req.request_id, req.user_data, status, value, t)
        submit_time = inst.submit_time_of(req.request_id)
        inst.deliver_completion(comp)
        self.completed_total += 1
        if status == CompletionStatus.CANCELED:
            self.canceled_total += 1
        elif status == CompletionStatus.ERROR:
            self.errored_total += 1
        if self.trace is not None:
            kind = "cancel" if status == CompletionStatus.CANCELED else "complete"
            self.trace(t, kind, inst.instance_id, req.request_id)
        listener = self.completion_listener
        if listener is not None:
            listener(inst.instance_id, comp, submit_time)
        if st.reaper_signal is not None:
            st.reaper_signal.notify()

    # -- reporting ------------------------------------------------------------------

    def finalize(self, now: int) -> None:
        for st in self.instances:
            if st.poll is not None:
                st.poll.finalize(now)
            if st.in_service > 0:
                st.busy_ns += now - st.busy_since
                st.busy_since = now

    def poll_busy_ns(self) -> list[int]:
        return [st.poll.busy_ns if st.poll else 0 for st in self.instances]

    def utilization(self, elapsed: int) -> list[float]:
        if elapsed <= 0:
            return [0.0 for _ in self.instances]
        return [min(1.0, st.busy_ns / elapsed) for st in self.instances]


class TraceWriter:
    """CSV event-trace sink (debug flag): time_ns,event_kind,instance_id,request_id."""

    HEADER = "time_ns,event_kind,instance_id,request_id\n"

    def __init__(self, fh):
        self._fh = fh
        fh.write(self.HEADER)

    def __call__(self, t, kind, instance_id, request_id):
        self._fh.write(f"{t},{kind},{instance_id},{request_id}\n")


class WallDeviceThread:
    """Drives a SimDevice built on a WallClock from a dedicated thread."""

    def __init__(self, device: SimDevice):
        assert isinstance(device.clock, WallClock)
        self.device = device
        self._thread = threading.Thread(target=device.clock.drain_loop,
                                        name="ringbench-device", daemon=True)

    def start(self):
        self._thread.start()
        return self

    def stop(self, timeout: float = 10.0) -> None:
        self.device.clock.request_stop()
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise RuntimeError("device thread failed to stop")
