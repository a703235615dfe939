"""Uniform accounting across simulated and wall-clock runs.

Latency is kept in a fixed log-bucket histogram (1 us .. 10 s, 5% bucket
width) rather than raw samples: runs reach millions of ops and the claims
being checked are order-of-magnitude shaped. Quantile error is bounded by
the bucket width; the maximum is tracked exactly on the side.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass, field

from .ring import CompletionStatus


class IncompatibleWindows(Exception):
    """Reports from different runs/windows cannot be merged."""


_BUCKET_RATIO = 1.05
_LAT_LO = 1_000            # 1 us
_LAT_HI = 10_000_000_000   # 10 s


def _make_bounds():
    bounds = []
    b = float(_LAT_LO)
    while b < _LAT_HI:
        bounds.append(int(b))
        b *= _BUCKET_RATIO
    bounds.append(_LAT_HI)
    return tuple(bounds)


_BOUNDS = _make_bounds()
_NBUCKETS = len(_BOUNDS)


class LatencyHistogram:
    __slots__ = ("counts", "total", "max_ns")

    def __init__(self):
        self.counts = [0] * _NBUCKETS
        self.total = 0
        self.max_ns = 0

    def add(self, ns: int) -> None:
        i = bisect_left(_BOUNDS, ns)
        if i >= _NBUCKETS:
            i = _NBUCKETS - 1
        self.counts[i] += 1
        self.total += 1
        if ns > self.max_ns:
            self.max_ns = ns

    def merge(self, other: "LatencyHistogram") -> None:
        counts = self.counts
        for i, c in enumerate(other.counts):
            counts[i] += c
        self.total += other.total
        if other.max_ns > self.max_ns:
            self.max_ns = other.max_ns

    def quantile(self, q: float) -> int:
        """Representative ns value at quantile q (0 when empty)."""
        if self.total == 0:
            return 0
        rank = max(1, math.ceil(q * self.total))
        seen = 0
        for i, c in enumerate(self.counts):
            seen += c
            if seen >= rank:
                lo = _BOUNDS[i - 1] if i else _LAT_LO / _BUCKET_RATIO
                return int(math.sqrt(lo * _BOUNDS[i]))
        return self.max_ns


@dataclass
class InstanceStats:
    instance_id: int
    utilization: float      # fraction of elapsed with >=1 op in service
    poll_busy_ns: int
    inbox_peak: int


@dataclass
class MetricsReport:
    run_id: str
    elapsed_ns: int
    submitted: int
    completed_ok: int
    errored: int
    canceled: int
    iops: float
    lat_p50_ns: int
    lat_p99_ns: int
    lat_max_ns: int
    contention_events: int
    cross_thread_msgs: int
    sq_full_retries: int
    tasklet_respawns: int
    coroutine_resumes: int
    frame_bytes_peak: int
    per_instance: list = field(default_factory=list)
    active_instance_timeline: list = field(default_factory=list)
    histogram: LatencyHistogram = field(default_factory=LatencyHistogram,
                                        repr=False, compare=False)
    completion_times: list = field(default=None, repr=False, compare=False)

    def conservation_holds(self) -> bool:
        return self.submitted == self.completed_ok + self.errored + self.canceled

    def poll_busy_ns_total(self) -> int:
        return sum(s.poll_busy_ns for s in self.per_instance)

    # stable CSV surface -------------------------------------------------------

    COLUMNS = ("run_id", "elapsed_ns", "submitted", "completed_ok", "errored",
               "canceled", "iops", "lat_p50_ns", "lat_p99_ns", "lat_max_ns",
               "contention_events", "cross_thread_msgs", "sq_full_retries",
               "tasklet_respawns", "coroutine_resumes", "frame_bytes_peak",
               "poll_busy_ns_total", "utilization_mean", "inbox_peak_max",
               "instances")

    def to_row(self) -> list:
        per = self.per_instance
        util_mean = (sum(s.utilization for s in per) / len(per)) if per else 0.0
        inbox_peak = max((s.inbox_peak for s in per), default=0)
        return [self.run_id, self.elapsed_ns, self.submitted,
                self.completed_ok, self.errored, self.canceled,
                repr(self.iops), self.lat_p50_ns, self.lat_p99_ns,
                self.lat_max_ns, self.contention_events,
                self.cross_thread_msgs, self.sq_full_retries,
                self.tasklet_respawns, self.coroutine_resumes,
                self.frame_bytes_peak, self.poll_busy_ns_total(),
                repr(util_mean), inbox_peak, len(per)]


def merge(reports) -> MetricsReport:
    """Combine shard reports from one run; counts sum, histograms merge."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to merge")
    first = reports[0]
    if len(reports) == 1:
        return first
    run_id = first.run_id
    for r in reports[1:]:
        if r.run_id != run_id:
            raise IncompatibleWindows(
                f"run id {r.run_id!r} does not match {run_id!r}")
    hist = LatencyHistogram()
    timeline = []
    per_instance = []
    submitted = ok = err = canc = cont = xmsg = retries = resp = resumes = 0
    frame_peak = 0
    elapsed = 0
    for r in reports:
        hist.merge(r.histogram)
        submitted += r.submitted
        ok += r.completed_ok
        err += r.errored
        canc += r.canceled
        cont += r.contention_events
        xmsg += r.cross_thread_msgs
        retries += r.sq_full_retries
        resp += r.tasklet_respawns
        resumes += r.coroutine_resumes
        frame_peak = max(frame_peak, r.frame_bytes_peak)
        elapsed = max(elapsed, r.elapsed_ns)
        per_instance.extend(r.per_instance)
        timeline.extend(r.active_instance_timeline)
    timeline.sort(key=lambda e: e[0])
    iops = ok * 1e9 / elapsed if elapsed else 0.0
    return MetricsReport(
        run_id=run_id, elapsed_ns=elapsed, submitted=submitted,
        completed_ok=ok, errored=err, canceled=canc, iops=iops,
        lat_p50_ns=hist.quantile(0.50), lat_p99_ns=hist.quantile(0.99),
        lat_max_ns=hist.max_ns, contention_events=cont,
        cross_thread_msgs=xmsg, sq_full_retries=retries,
        tasklet_respawns=resp, coroutine_resumes=resumes,
        frame_bytes_peak=frame_peak, per_instance=per_instance,
        active_instance_timeline=timeline, histogram=hist)


class MetricsCollector:
    """Per-executor accumulation; no shared mutable state during a run."""

    __slots__ = ("run_id", "submitted", "errored", "canceled", "completed_ok",
                 "contention_events", "cross_thread_msgs", "sq_full_retries",
                 "tasklet_respawns", "coroutine_resumes", "frame_bytes_peak",
                 "hist", "completion_times", "last_completion_ns")

    def __init__(self, run_id: str, keep_completion_times: bool = False):
        self.run_id = run_id
        self.submitted = 0
        self.completed_ok = 0
        self.errored = 0
        self.canceled = 0
        self.contention_events = 0
        self.cross_thread_msgs = 0
        self.sq_full_retries = 0
        self.tasklet_respawns = 0
        self.coroutine_resumes = 0
        self.frame_bytes_peak = 0
        self.hist = LatencyHistogram()
        self.completion_times = [] if keep_completion_times else None
        self.last_completion_ns = 0

    def on_submit(self, n: int = 1) -> None:
        self.submitted += n

    def on_completion(self, instance_id, comp, submit_time) -> None:
        status = comp.status
        if status == CompletionStatus.OK:
            self.completed_ok += 1
        elif status == CompletionStatus.ERROR:
            self.errored += 1
        else:
            self.canceled += 1
        self.hist.add(comp.complete_time - submit_time)
        if comp.complete_time > self.last_completion_ns:
            self.last_completion_ns = comp.complete_time
        if self.completion_times is not None:
            self.completion_times.append(comp.complete_time)

    def absorb(self, other: "MetricsCollector") -> None:
        if other.run_id != self.run_id:
            raise IncompatibleWindows(
                f"collector {other.run_id!r} does not match {self.run_id!r}")
        self.submitted += other.submitted
        self.completed_ok += other.completed_ok
        self.errored += other.errored
        self.canceled += other.canceled
        self.contention_events += other.contention_events
        self.cross_thread_msgs += other.cross_thread_msgs
        self.sq_full_retries += other.sq_full_retries
        self.tasklet_respawns += other.tasklet_respawns
        self.coroutine_resumes += other.coroutine_resumes
        self.frame_bytes_peak = max(self.frame_bytes_peak,
                                    other.frame_bytes_peak)
        self.hist.merge(other.hist)
        if other.last_completion_ns > self.last_completion_ns:
            self.last_completion_ns = other.last_completion_ns
        if self.completion_times is not None and other.completion_times:
            self.completion_times.extend(other.completion_times)

    def finalize(self, elapsed_ns: int, per_instance=(),
                 timeline=()) -> MetricsReport:
        iops = self.completed_ok * 1e9 / elapsed_ns if elapsed_ns else 0.0
        return MetricsReport(
            run_id=self.run_id, elapsed_ns=elapsed_ns,
            submitted=self.submitted, completed_ok=self.completed_ok,
            errored=self.errored, canceled=self.canceled, iops=iops,
            lat_p50_ns=self.hist.quantile(0.50),
            lat_p99_ns=self.hist.quantile(0.99),
            lat_max_ns=self.hist.max_ns,
            contention_events=self.contention_events,
            cross_thread_msgs=self.cross_thread_msgs,
            sq_full_retries=self.sq_full_retries,
            tasklet_respawns=self.tasklet_respawns,
            coroutine_resumes=self.coroutine_resumes,
            frame_bytes_peak=self.frame_bytes_peak,
            per_instance=list(per_instance),
            active_instance_timeline=list(timeline), histogram=self.hist)


def write_summary_csv(path, reports, extra_columns=(), extra_values=None):
    """Emit one row per report with the stable header; byte-deterministic."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        header = list(extra_columns) + list(MetricsReport.COLUMNS)
        fh.write(",".join(header) + "\n")
        for i, report in enumerate(reports):
            prefix = list(extra_values[i]) if extra_values else []
            row = [str(v) for v in prefix + report.to_row()]
            fh.write(",".join(row) + "\n")
