"""Ring, request/completion model, and ApiInstance contract tests."""

import random
import threading

import pytest

from ringbench.device import DeviceConfig, SimDevice, VirtualClock
from ringbench.ring import (ApiInstance, Completion, CompletionStatus,
                            IoRequest, OpKind, PushResult, RingQueue,
                            link_chain, validate_request)


def nop():
    return IoRequest(OpKind.NOP)


class TestRingQueue:
    def test_capacity_must_be_power_of_two(self):
        for bad in (0, 3, 6, 100):
            with pytest.raises(ValueError):
                RingQueue(bad)
        for ok in (1, 2, 8, 256):
            RingQueue(ok)

    def test_fifo_single_threaded(self):
        q = RingQueue(8)
        for i in range(8):
            assert q.try_push(i)
        assert not q.try_push(99)
        assert [q.try_pop() for _ in range(8)] == list(range(8))
        assert q.try_pop() is None

    def test_wraparound_preserves_order(self):
        rng = random.Random(5)
        q = RingQueue(4)
        out = []
        for i in range(1000):
            while not q.try_push(i):
                out.append(q.try_pop())
            while len(q) and rng.random() < 0.4:
                out.append(q.try_pop())
        out.extend(iter(q.try_pop, None))
        assert out == sorted(out) == list(range(1000))

    def test_batch_ops(self):
        q = RingQueue(16)
        assert q.try_push_many(list(range(20))) == 16
        assert q.try_pop_many(6) == list(range(6))
        assert q.try_push_many(list(range(100, 110))) == 6
        rest = q.try_pop_many(64)
        assert rest == list(range(6, 16)) + list(range(100, 106))

    def test_peek_does_not_consume(self):
        q = RingQueue(2)
        assert q.peek() is None
        q.try_push("a")
        assert q.peek() == "a"
        assert len(q) == 1
        assert q.try_pop() == "a"


@pytest.fixture
def fast_thread_switching():
    # spin loops between two threads starve each other at the default 5 ms
    # switch interval; stress tests run with a tighter one
    import sys
    prev = sys.getswitchinterval()
    sys.setswitchinterval(5e-5)
    yield
    sys.setswitchinterval(prev)


def spsc_stress(seed: int, n: int):
    """Push 0..n-1 through a ring against a concurrent consumer."""
    import time
    rng = random.Random(seed)
    capacity = 2 ** rng.randint(2, 10)
    q = RingQueue(capacity)
    consumed = []
    max_batch = rng.randint(1, 512)

    def producer():
        i = 0
        items = list(range(n))
        while i < n:
            pushed = q.try_push_many(items[i:i + 256])
            i += pushed
            if not pushed:
                time.sleep(0)  # full: hand the GIL to the consumer

    def consumer():
        got = 0
        while got < n:
            batch = q.try_pop_many(max_batch)
            if batch:
                consumed.append(batch)
                got += len(batch)
            else:
                time.sleep(0)

    t1 = threading.Thread(target=producer)
    t2 = threading.Thread(target=consumer)
    t1.start(); t2.start()
    t1.join(60); t2.join(60)
    assert not t1.is_alive() and not t2.is_alive()
    flat = [x for b in consumed for x in b]
    return flat


class TestSpscThreads:
    """The produced sequence must equal the consumed sequence exactly."""

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_concurrent_fifo_no_loss_no_dup(self, seed,
                                            fast_thread_switching):
        n = 30_000
        assert spsc_stress(seed, n) == list(range(n))


class TestSqPush:
    def test_empty_queue_accept(self):
        inst = ApiInstance(sq_capacity=8, cq_capacity=8)
        assert inst.sq_push(nop()) == PushResult.ACCEPTED
        assert inst.depths() == (1, 0, 1)

    def test_full_queue_rejected_state_unchanged(self):
        inst = ApiInstance(sq_capacity=8, cq_capacity=16)
        for _ in range(8):
            assert inst.sq_push(nop()) == PushResult.ACCEPTED
        before = inst.depths()
        assert inst.sq_push(nop()) == PushResult.QUEUE_FULL
        assert inst.depths() == before == (8, 0, 8)

    def test_request_ids_assigned_monotonically(self):
        inst = ApiInstance(sq_capacity=8, cq_capacity=8)
        reqs = [nop() for _ in range(4)]
        for r in reqs:
            inst.sq_push(r)
        assert [r.request_id for r in reqs] == [0, 1, 2, 3]

    def test_stress_against_concurrent_consumer(self, fast_thread_switching):
        # capacity 8, 1000 pushes with retries; consumer sees push order
        inst = ApiInstance(sq_capacity=8, cq_capacity=8)
        seen = []

        def consumer():
            import time
            while len(seen) < 1000:
                req = inst.sq.try_pop()
                if req is not None:
                    seen.append(req.request_id)
                    # emulate the backend so inflight bounding frees up
                    inst.deliver_completion(Completion(
                        req.request_id, 0, CompletionStatus.OK, 0, 0))
                    inst.cq_reap(8)
                else:
                    time.sleep(0)

        import time
        t = threading.Thread(target=consumer)
        t.start()
        accepted = 0
        while accepted < 1000:
            if inst.sq_push(nop()) == PushResult.ACCEPTED:
                accepted += 1
            else:
                time.sleep(0)
        t.join(30)
        assert not t.is_alive()
        assert seen == list(range(1000))

    def test_headroom_blocks_when_cq_backed_up(self):
        # cq full of unreaped completions must stall submission
        inst = ApiInstance(sq_capacity=8, cq_capacity=8)
        for _ in range(8):
            inst.sq_push(nop())
        for _ in range(8):
            req = inst.sq.try_pop()
            inst.deliver_completion(Completion(
                req.request_id, 0, CompletionStatus.OK, 0, 0))
        # 8 completions sit unreaped: zero headroom even though SQ is empty
        assert inst.sq_push(nop()) == PushResult.QUEUE_FULL
        inst.cq_reap(8)
        assert inst.sq_push(nop()) == PushResult.ACCEPTED


class TestCqReap:
    def _completed_instance(self, n):
        inst = ApiInstance(sq_capacity=8, cq_capacity=8)
        for _ in range(n):
            inst.sq_push(nop())
        for _ in range(n):
            req = inst.sq.try_pop()
            inst.deliver_completion(Completion(
                req.request_id, 0, CompletionStatus.OK, 0, 0))
        return inst

    def test_nothing_ready_is_empty_list(self):
        inst = ApiInstance()
        assert inst.cq_reap(4) == []

    def test_max_truncates(self):
        inst = self._completed_instance(3)
        first = inst.cq_reap(2)
        assert [c.request_id for c in first] == [0, 1]
        second = inst.cq_reap(2)
        assert [c.request_id for c in second] == [2]

    def test_max_must_be_positive(self):
        with pytest.raises(ValueError):
            ApiInstance().cq_reap(0)

    def test_reap_removes_from_inflight_map(self):
        inst = self._completed_instance(2)
        assert len(inst.inflight) == 2
        inst.cq_reap(8)
        assert len(inst.inflight) == 0

    def test_bulk_id_conservation_through_device(self):
        # every submitted id comes back exactly once, in a multiset sense
        clock = VirtualClock()
        dev = SimDevice(DeviceConfig(service_time_ns=1_000, jitter_frac=0.0,
                                     parallelism=8), clock, seed=7)
        inst = ApiInstance(sq_capacity=256, cq_capacity=512)
        dev.attach(inst)
        total = 20_000
        reaped = []
        submitted = 0
        queued = 0

        def pump():
            nonlocal submitted, queued
            while submitted < total and queued < 200:
                if inst.sq_push(nop(), clock.now) != PushResult.ACCEPTED:
                    break
                submitted += 1
                queued += 1

        pump()
        while len(reaped) < total:
            if not clock.step():
                break
            for c in inst.cq_reap(64):
                reaped.append(c.request_id)
                queued -= 1
            pump()
        assert len(reaped) == total
        assert len(set(reaped)) == total
        assert sorted(reaped) == list(range(total))


class TestLinkedChains:
    def _device(self, jitter, seed=0, parallelism=16):
        clock = VirtualClock()
        cfg = DeviceConfig(service_time_ns=100_000,
                           jitter_frac=jitter, parallelism=parallelism)
        dev = SimDevice(cfg, clock, seed=seed)
        inst = ApiInstance(sq_capacity=64, cq_capacity=128)
        dev.attach(inst)
        return clock, dev, inst

    @pytest.mark.parametrize("seed", range(100))
    def test_fsync_never_completes_before_linked_write(self, seed):
        clock, dev, inst = self._device(jitter=0.3, seed=seed)
        write = IoRequest(OpKind.WRITE, offset=0, length=4096)
        fsync = IoRequest(OpKind.FSYNC)
        # unlinked noise ops keep the device busy around the chain
        for _ in range(8):
            inst.sq_push(nop(), clock.now)
        assert inst.submit_linked(link_chain([write, fsync]),
                                  clock.now) == PushResult.ACCEPTED
        clock.run_until_idle()
        comps = {c.request_id: c for c in inst.cq_reap(64)}
        assert comps[fsync.request_id].complete_time >= \
            comps[write.request_id].complete_time
        assert comps[write.request_id].status == CompletionStatus.OK

    def test_chain_of_one_behaves_like_sq_push(self):
        clock, dev, inst = self._device(jitter=0.0)
        single = IoRequest(OpKind.NOP)
        assert inst.submit_linked([single], clock.now) == PushResult.ACCEPTED
        clock.run_until_idle()
        (comp,) = inst.cq_reap(8)
        assert comp.request_id == single.request_id
        assert comp.status == CompletionStatus.OK

    def test_failure_cancels_chain_tail(self):
        clock, dev, inst = self._device(jitter=0.0)
        read = IoRequest(OpKind.READ, offset=0, length=4096)
        write = IoRequest(OpKind.WRITE, offset=4096, length=4096)
        chain = link_chain([read, write])
        assert inst.submit_linked(chain, clock.now) == PushResult.ACCEPTED
        dev.inject_fault(inst.instance_id, read.request_id, code=5)
        clock.run_until_idle()
        comps = {c.request_id: c for c in inst.cq_reap(8)}
        assert comps[read.request_id].status == CompletionStatus.ERROR
        assert comps[read.request_id].value == 5
        assert comps[write.request_id].status == CompletionStatus.CANCELED

    def test_cancel_cascade_stops_at_chain_end(self):
        clock, dev, inst = self._device(jitter=0.0)
        chain = link_chain([IoRequest(OpKind.NOP) for _ in range(3)])
        independent = IoRequest(OpKind.NOP)
        inst.submit_linked(chain, clock.now)
        inst.sq_push(independent, clock.now)
        dev.inject_fault(inst.instance_id, chain[0].request_id)
        clock.run_until_idle()
        comps = {c.request_id: c for c in inst.cq_reap(8)}
        assert comps[chain[1].request_id].status == CompletionStatus.CANCELED
        assert comps[chain[2].request_id].status == CompletionStatus.CANCELED
        assert comps[independent.request_id].status == CompletionStatus.OK

    def test_atomic_rejection_when_chain_does_not_fit(self):
        inst = ApiInstance(sq_capacity=8, cq_capacity=8)
        for _ in range(6):
            inst.sq_push(nop())
        chain = link_chain([IoRequest(OpKind.NOP) for _ in range(3)])
        assert inst.submit_linked(chain) == PushResult.QUEUE_FULL
        assert inst.depths().sq_depth == 6  # nothing partially enqueued

    def test_chain_timestamps_monotone(self):
        clock, dev, inst = self._device(jitter=0.25, seed=11)
        chain = link_chain([IoRequest(OpKind.NOP) for _ in range(6)])
        inst.submit_linked(chain, clock.now)
        clock.run_until_idle()
        comps = inst.cq_reap(16)
        order = {c.request_id: c.complete_time for c in comps}
        times = [order[r.request_id] for r in chain]
        assert times == sorted(times)


class TestInstanceDepth:
    def test_fresh_instance(self):
        assert ApiInstance().depths() == (0, 0, 0)

    def test_counts_after_pushes(self):
        inst = ApiInstance(sq_capacity=8, cq_capacity=8)
        for _ in range(4):
            inst.sq_push(nop())
        assert inst.depths() == (4, 0, 4)

    def test_counts_after_partial_completion(self):
        # device consumes all four (parallelism >= 4), completes two
        clock = VirtualClock()
        dev = SimDevice(DeviceConfig(service_time_ns=100_000, jitter_frac=0.0,
                                     parallelism=2), clock)
        inst = ApiInstance(sq_capacity=8, cq_capacity=8)
        dev.attach(inst)
        for _ in range(4):
            inst.sq_push(nop(), clock.now)
        clock.run_until(100_000)  # first two ops complete, next two consumed
        sq_depth, cq_depth, inflight = inst.depths()
        assert cq_depth == 2
        assert inflight == 2
        assert sq_depth == 0  # device consumed the remaining pair into slots

    def test_conservation_at_quiescence(self):
        clock = VirtualClock()
        dev = SimDevice(DeviceConfig(service_time_ns=1_000, jitter_frac=0.0),
                        clock)
        inst = ApiInstance()
        dev.attach(inst)
        for _ in range(100):
            inst.sq_push(nop(), clock.now)
        clock.run_until_idle()
        assert inst.quiescent_conservation_holds()
        inst.cq_reap(512)
        assert inst.quiescent_conservation_holds()


class TestValidation:
    def test_read_write_invariants(self):
        validate_request(IoRequest(OpKind.READ, 0, 4096), 4096, 1 << 20)
        with pytest.raises(ValueError):
            validate_request(IoRequest(OpKind.READ, 0, 0), 4096, 1 << 20)
        with pytest.raises(ValueError):
            validate_request(IoRequest(OpKind.READ, 100, 4096), 4096, 1 << 20)
        with pytest.raises(ValueError):
            validate_request(IoRequest(OpKind.WRITE, 0, 1 << 21), 4096, 1 << 20)

    def test_fsync_nop_zero_length(self):
        validate_request(IoRequest(OpKind.FSYNC), 4096, 1 << 20)
        with pytest.raises(ValueError):
            validate_request(IoRequest(OpKind.FSYNC, 0, 4096), 4096, 1 << 20)

    def test_cq_must_cover_sq(self):
        with pytest.raises(ValueError):
            ApiInstance(sq_capacity=16, cq_capacity=8)
