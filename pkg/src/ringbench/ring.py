"""Request/completion data model and the SPSC ring pair they travel through.

The concurrency contract mirrors ring-based async I/O APIs: a submission
queue with exactly one producer thread, a completion queue with exactly one
consumer thread, and no locks on either hot path. Under CPython the GIL
makes the int head/tail stores atomic and program-ordered, which is the
acquire/release discipline these rings need: the slot is always written
before the counter that publishes it.

Cross-side counters are strictly single-writer (the producer owns
accepted_total, the backend owns completed_total, the reaper owns
reaped_total); derived quantities are computed from them so no counter is
ever read-modify-written by two threads.
"""

from __future__ import annotations

import enum
from typing import NamedTuple, Optional


class OpKind(enum.IntEnum):
    READ = 0
    WRITE = 1
    FSYNC = 2
    NOP = 3


class CompletionStatus(enum.IntEnum):
    OK = 0
    ERROR = 1
    CANCELED = 2


class PushResult(enum.IntEnum):
    # QUEUE_FULL is routine backpressure, not an error: the layer above owns
    # the buffer-or-retry decision.
    ACCEPTED = 0
    QUEUE_FULL = 1


class IoRequest:
    """One I/O operation. request_id is assigned at submission when None."""

    __slots__ = ("request_id", "op", "offset", "length", "buffer_id",
                 "link_flag", "user_data")

    def __init__(self, op: OpKind, offset: int = 0, length: int = 0,
                 buffer_id: int = 0, link_flag: bool = False,
                 user_data: int = 0, request_id: Optional[int] = None):
        self.request_id = request_id
        self.op = op
        self.offset = offset
        self.length = length
        self.buffer_id = buffer_id
        self.link_flag = link_flag
        self.user_data = user_data

    def __repr__(self):
        return (f"IoRequest(id={self.request_id}, op={OpKind(self.op).name}, "
                f"off={self.offset}, len={self.length}, link={self.link_flag})")


class Completion:
    """Result notification for one accepted request; delivered exactly once.

    ``value`` is bytes transferred for OK, an error code for ERROR, 0 for
    CANCELED. ``complete_time`` is ns on the clock of the run (virtual or
    wall).
    """

    __slots__ = ("request_id", "user_data", "status", "value", "complete_time")

    def __init__(self, request_id: int, user_data: int,
                 status: CompletionStatus, value: int, complete_time: int):
        self.request_id = request_id
        self.user_data = user_data
        self.status = status
        self.value = value
        self.complete_time = complete_time

    def __repr__(self):
        return (f"Completion(id={self.request_id}, "
                f"{CompletionStatus(self.status).name}, value={self.value}, "
                f"t={self.complete_time})")


def validate_request(req: IoRequest, block_size: int, capacity: int) -> None:
    """Raise ValueError when a request violates the data-model invariants."""
    if req.op in (OpKind.READ, OpKind.WRITE):
        if req.length <= 0 or req.length % block_size:
            raise ValueError(f"length {req.length} not a positive multiple "
                             f"of block size {block_size}")
        if req.offset % block_size:
            raise ValueError(f"offset {req.offset} not block aligned")
        if req.offset + req.length > capacity:
            raise ValueError(f"range [{req.offset}, {req.offset + req.length})"
                             f" exceeds capacity {capacity}")
    else:
        if req.length != 0:
            raise ValueError(f"{OpKind(req.op).name} must carry length 0")


class RingQueue:
    """Fixed-capacity single-producer/single-consumer FIFO.

    head and tail are monotonically increasing; the slot index is
    ``counter & mask``. Only the producer writes tail, only the consumer
    writes head, so each side reads one foreign counter that can only move
    in the direction that creates more room: a stale read is always safe.
    """

    __slots__ = ("capacity", "_mask", "_slots", "head", "tail")

    def __init__(self, capacity: int):
        if capacity < 1 or capacity & (capacity - 1):
            raise ValueError(f"capacity must be a power of two, got {capacity}")
        self.capacity = capacity
        self._mask = capacity - 1
        self._slots = [None] * capacity
        self.head = 0  # consumer counter
        self.tail = 0  # producer counter

    def __len__(self) -> int:
        # Third-party snapshot; can be momentarily stale under real threads.
        return self.tail - self.head

    def try_push(self, item) -> bool:
        tail = self.tail
        depth = tail - self.head
        assert 0 <= depth <= self.capacity
        if depth == self.capacity:
            return False
        self._slots[tail & self._mask] = item
        self.tail = tail + 1  # publish after the slot write
        return True

    def try_push_many(self, items) -> int:
        """Push at batch speed; returns how many were accepted."""
        tail = self.tail
        n = min(len(items), self.capacity - (tail - self.head))
        if n <= 0:
            return 0
        slots, mask = self._slots, self._mask
        for k in range(n):
            slots[(tail + k) & mask] = items[k]
        self.tail = tail + n
        return n

    def try_pop(self):
        """Return the oldest item, or None when empty."""
        head = self.head
        avail = self.tail - head
        assert 0 <= avail <= self.capacity
        if avail == 0:
            return None
        i = head & self._mask
        item = self._slots[i]
        self._slots[i] = None
        self.head = head + 1
        return item

    def try_pop_many(self, max_items: int) -> list:
        head = self.head
        n = self.tail - head
        if n > max_items:
            n = max_items
        if n <= 0:
            return []
        slots, mask = self._slots, self._mask
        out = []
        for k in range(n):
            i = (head + k) & mask
            out.append(slots[i])
            slots[i] = None
        self.head = head + n
        return out

    def peek(self):
        """Consumer-side: oldest item without consuming it, or None."""
        head = self.head
        if self.tail == head:
            return None
        return self._slots[head & self._mask]


class InstanceDepths(NamedTuple):
    sq_depth: int
    cq_depth: int
    inflight: int


class SpscAudit:
    """Record which executor touches each ring side; tests assert |set|<=1.

    ``executor_id`` defaults to the OS thread id; the virtual-time runtime
    swaps in its actor identity so single-OS-thread simulations still audit
    the logical contract.
    """

    __slots__ = ("executor_id", "push_executors", "reap_executors")

    def __init__(self, executor_id=None):
        import threading
        self.executor_id = executor_id or threading.get_ident
        self.push_executors = set()
        self.reap_executors = set()

    def record_push(self):
        self.push_executors.add(self.executor_id())

    def record_reap(self):
        self.reap_executors.add(self.executor_id())


class ApiInstance:
    """One SQ+CQ pair plus in-flight bookkeeping.

    The CQ can never overflow: submission is refused unless the CQ could
    absorb every not-yet-completed request plus this one, so the backend's
    completion write is guaranteed a slot.
    """

    __slots__ = ("sq", "cq", "sq_poll_enabled", "sq_poll_idle_timeout",
                 "inflight", "instance_id",
                 "accepted_total", "completed_total", "reaped_total",
                 "on_submit", "audit", "_next_request_id")

    def __init__(self, sq_capacity: int = 256, cq_capacity: int = 512,
                 sq_poll_enabled: bool = True,
                 sq_poll_idle_timeout: int = 1_000_000):
        if cq_capacity < sq_capacity:
            raise ValueError(f"cq capacity {cq_capacity} must be >= sq "
                             f"capacity {sq_capacity}")
        self.sq = RingQueue(sq_capacity)
        self.cq = RingQueue(cq_capacity)
        self.sq_poll_enabled = sq_poll_enabled
        self.sq_poll_idle_timeout = sq_poll_idle_timeout
        self.inflight: dict[int, int] = {}  # request_id -> submit_time (ns)
        self.instance_id = -1  # assigned by the backend on attach
        self.accepted_total = 0   # written by the producer only
        self.completed_total = 0  # written by the backend only
        self.reaped_total = 0     # written by the reaper only
        self.on_submit = None  # backend hook: fn(instance)
        self.audit: Optional[SpscAudit] = None
        self._next_request_id = 0

    # -- producer side -------------------------------------------------------

    def pending_completion_count(self) -> int:
        """Requests accepted whose completion has not been written yet."""
        # completed_total is foreign here; a stale (low) read only makes the
        # estimate conservative.
        return self.accepted_total - self.completed_total

    def _completion_headroom(self) -> int:
        return self.cq.capacity - len(self.cq) - self.pending_completion_count()

    def sq_push(self, req: IoRequest, now: int = 0) -> PushResult:
        sq = self.sq
        if sq.tail - sq.head == sq.capacity:
            return PushResult.QUEUE_FULL
        if self._completion_headroom() < 1:
            return PushResult.QUEUE_FULL
        if req.request_id is None:
            req.request_id = self._next_request_id
            self._next_request_id += 1
        assert req.request_id not in self.inflight, "duplicate in-flight id"
        # Bookkeeping goes in before the tail publish so the backend never
        # observes a submitted request it cannot look up.
        self.inflight[req.request_id] = now
        self.accepted_total += 1
        pushed = sq.try_push(req)
        assert pushed  # single producer + the checks above make full impossible
        if self.audit is not None:
            self.audit.record_push()
        hook = self.on_submit
        if hook is not None:
            hook(self)
        return PushResult.ACCEPTED

    def submit_linked(self, reqs, now: int = 0) -> PushResult:
        """All-or-nothing enqueue of an ordered chain.

        Every request but the last must carry link_flag; the backend starts
        link k+1 only after link k completed OK, and cancels the rest of the
        chain after a failure.
        """
        n = len(reqs)
        if n == 0:
            return PushResult.ACCEPTED
        if n > self.sq.capacity:
            raise ValueError("chain longer than the submission queue")
        for r in reqs[:-1]:
            if not r.link_flag:
                raise ValueError("non-terminal chain member missing link_flag")
        if reqs[-1].link_flag:
            raise ValueError("terminal chain member must not set link_flag")
        sq = self.sq
        if sq.capacity - (sq.tail - sq.head) < n:
            return PushResult.QUEUE_FULL
        if self._completion_headroom() < n:
            return PushResult.QUEUE_FULL
        for req in reqs:
            if req.request_id is None:
                req.request_id = self._next_request_id
                self._next_request_id += 1
            assert req.request_id not in self.inflight
            self.inflight[req.request_id] = now
            self.accepted_total += 1
            pushed = sq.try_push(req)
            assert pushed
        if self.audit is not None:
            self.audit.record_push()
        hook = self.on_submit
        if hook is not None:
            hook(self)
        return PushResult.ACCEPTED

    # -- consumer side -------------------------------------------------------

    def cq_reap(self, max_completions: int) -> list[Completion]:
        """Return 0..max completions in device order; empty means poll miss."""
        if max_completions < 1:
            raise ValueError("max_completions must be >= 1")
        out = self.cq.try_pop_many(max_completions)
        if out:
            if self.audit is not None:
                self.audit.record_reap()
            inflight = self.inflight
            for c in out:
                del inflight[c.request_id]
            self.reaped_total += len(out)
        return out

    # -- backend side --------------------------------------------------------

    def submit_time_of(self, request_id: int) -> int:
        return self.inflight[request_id]

    def deliver_completion(self, comp: Completion) -> None:
        """Write one completion; callable only by the backend's CQ producer."""
        if not self.cq.try_push(comp):
            raise RuntimeError("CQ overflow despite inflight bounding")
        # Increment after the push: a racing producer then double-counts this
        # completion (once in cq depth, once in pending) and stays conservative.
        self.completed_total += 1

    # -- observers -------------------------------------------------------------

    def depths(self) -> InstanceDepths:
        return InstanceDepths(len(self.sq), len(self.cq),
                              self.pending_completion_count())

    def quiescent_conservation_holds(self) -> bool:
        return (self.accepted_total ==
                self.completed_total + self.pending_completion_count())


def link_chain(reqs) -> list[IoRequest]:
    """Set link flags so ``reqs`` forms one ordered chain."""
    for r in reqs[:-1]:
        r.link_flag = True
    if reqs:
        reqs[-1].link_flag = False
    return list(reqs)
