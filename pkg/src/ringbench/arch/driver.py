"""Run-loop helpers shared by the architecture entry points."""

from __future__ import annotations

import time

from .common import per_instance_stats


def drive(rt, done_pred, on_done=None, max_events: int = 500_000_000,
          wall_timeout: float = 300.0) -> None:
    """Drive a run to quiescence.

    Virtual: steps the calendar, firing ``on_done`` once when ``done_pred``
    first holds (typically a stop broadcast that lets service actors exit),
    then drains the remaining events. An idle calendar with the predicate
    still false is a deadlock and raises with that diagnosis.

    Wall: polls the predicate, fires ``on_done``, then joins every actor.
    """
    fired = False
    if rt.mode == "virtual":
        clock = rt.clock
        step = clock.step
        n = 0
        while True:
            if not fired and done_pred():
                fired = True
                rt.workload_done_ns = rt.now()
                if on_done is not None:
                    on_done()
            if not step():
                if fired or done_pred():
                    if not fired:
                        fired = True
                        rt.workload_done_ns = rt.now()
                        if on_done is not None:
                            on_done()
                            continue
                    break
                raise RuntimeError(
                    "virtual run deadlocked: calendar idle before completion")
            n += 1
            if n >= max_events:
                raise RuntimeError(f"event budget exhausted after {n} events")
        return
    deadline = time.monotonic() + wall_timeout
    while not done_pred():
        if time.monotonic() > deadline:
            raise RuntimeError("wall run timed out before completion")
        time.sleep(0.0005)
    rt.workload_done_ns = rt.now()
    if on_done is not None:
        on_done()
    for actor in rt.actors:
        actor.thread.join(max(0.0, deadline - time.monotonic()))
        if actor.thread.is_alive():
            raise RuntimeError(f"actor {actor.name} failed to finish")
    for actor in rt.actors:
        if actor.error is not None:
            raise actor.error


def finalize_report(collector, rt, device, inbox_peaks=None, timeline=(),
                    keep_completion_times: bool = False):
    # the measurement window ends at the last completion, not when the last
    # service actor tore down
    elapsed = (collector.last_completion_ns
               or getattr(rt, "workload_done_ns", None) or rt.now())
    per_instance = per_instance_stats(device, elapsed, inbox_peaks)
    report = collector.finalize(elapsed, per_instance, timeline)
    if keep_completion_times:
        report.completion_times = collector.completion_times
    return report
