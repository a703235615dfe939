"""Experiment execution: config in, reports and CSV rows out.

Sweeps mirror the benchmark methodology: each point runs ``runs`` measured
repetitions preceded by one preconditioning run whose results are discarded
(kept for config parity with real-device runs, where preconditioning is not
optional). Points run sequentially so CPU attribution stays clean.
"""

from __future__ import annotations

import os
from dataclasses import replace

from .arch import (ArrivalWorkload, RequestWorkload, TaskWorkload,
                   run_direct_access, run_dynamic_pool, run_shared_nothing,
                   run_static_pool)
from .config import ConfigInvalid, ExperimentConfig
from .device import effective_config, steady_state_iops
from .metrics import MetricsReport, write_summary_csv
from .tasks import generate_corpus, read_corpus


def build_workload(cfg: ExperimentConfig, seed: int):
    w = cfg.workload
    if w.kind == "requests":
        return RequestWorkload(op_count=w.op_count, op_kind=w.op_kind,
                               block_size=w.block_size,
                               queue_depth=w.queue_depth,
                               callback_cost_ns=w.callback_cost_ns)
    if w.kind == "tasks":
        if w.corpus_path:
            specs = read_corpus(w.corpus_path)
        else:
            specs = generate_corpus(seed, w.task_count,
                                    max_steps=w.task_max_steps)
        return TaskWorkload(specs=specs)
    if w.kind == "arrivals":
        return ArrivalWorkload(phases=[tuple(p) for p in w.phases],
                               op_kind=w.op_kind, block_size=w.block_size)
    raise ConfigInvalid("workload.kind", f"unknown kind {w.kind!r}")


def run_experiment(cfg: ExperimentConfig, *, seed: int = None,
                   workload=None, run_id: str = None,
                   keep_completion_times: bool = False) -> MetricsReport:
    if cfg.backend == "native":
        from . import native
        raise ConfigInvalid(
            "backend", "the architecture runners use the sim backend; "
            "native hardware runs go through the CLI's native sweep path "
            f"(native available: {native.native_available()})")
    seed = cfg.seed if seed is None else seed
    workload = workload if workload is not None else build_workload(cfg, seed)
    a = cfg.architecture
    common = dict(device_cfg=cfg.device, ring=a.ring, costs=a.costs,
                  mode=cfg.mode, seed=seed, run_id=run_id)
    if a.kind == "shared_nothing":
        return run_shared_nothing(workload, a.n_workers, cfg.scheme, **common)
    if a.kind == "direct_access":
        return run_direct_access(workload, a.n_workers, a.m_instances,
                                 cfg.scheme, **common)
    if a.kind == "static_pool":
        return run_static_pool(workload, a.n_workers, a.k_instances,
                               cfg.scheme, a.exec_mode,
                               policy=a.dispatch_policy,
                               inbox_capacity=a.inbox_capacity,
                               threading_mode=a.instance_threading,
                               keep_completion_times=keep_completion_times,
                               **common)
    if a.kind == "dynamic_pool":
        return run_dynamic_pool(workload, a.n_workers, a.k_instances,
                                a.controller, cfg.scheme, a.exec_mode,
                                policy=a.dispatch_policy,
                                inbox_capacity=a.inbox_capacity,
                                threading_mode=a.instance_threading,
                                keep_completion_times=keep_completion_times,
                                **common)
    raise ConfigInvalid("architecture.kind", f"unknown kind {a.kind!r}")


def _point_seed(base: int, a: int, b: int) -> int:
    return (base * 1_000_003 + a * 101 + b) & 0x7FFFFFFF


def cmd_sweep_qd(cfg: ExperimentConfig, qd_list, out_dir,
                 plot: bool = False) -> str:
    """One row per (qd, measured run); prediction column in sim mode."""
    if cfg.workload.kind != "requests":
        raise ConfigInvalid("workload.kind", "sweep-qd needs a request "
                            "workload")
    reports, extra = [], []
    for qd in qd_list:
        if qd < 1:
            raise ConfigInvalid("qd_list", f"queue depth {qd} must be >= 1")
        dev_eff = effective_config(cfg.device, cfg.workload.op_kind)
        prediction = steady_state_iops(dev_eff, qd)
        for run in range(cfg.runs + 1):
            point = replace_workload_qd(cfg, qd)
            report = run_experiment(point, seed=_point_seed(cfg.seed, qd, run),
                                    run_id=f"qd{qd}-run{run}")
            if run == 0:
                continue  # preconditioning run, excluded from statistics
            reports.append(report)
            extra.append((qd, run, repr(prediction)))
    path = os.path.join(out_dir, "sweep_qd.csv")
    write_summary_csv(path, reports,
                      extra_columns=("qd", "run", "little_law_iops"),
                      extra_values=extra)
    if plot:
        _plot_qd(path, out_dir)
    return path


def replace_workload_qd(cfg: ExperimentConfig, qd: int) -> ExperimentConfig:
    w = replace(cfg.workload, queue_depth=qd)
    return replace(cfg, workload=w)


def cmd_sweep_callback(cfg: ExperimentConfig, cost_list, out_dir,
                       plot: bool = False) -> str:
    """Rows for {inline_callbacks, io_threads} x cost; random reads."""
    a = cfg.architecture
    if a.kind not in ("static_pool", "dynamic_pool"):
        raise ConfigInvalid("architecture.kind",
                            "sweep-callback needs a pool architecture "
                            "(both exec modes must exist)")
    if cfg.workload.kind != "requests":
        raise ConfigInvalid("workload.kind", "sweep-callback needs a "
                            "request workload")
    reports, extra = [], []
    for exec_mode in ("inline_callbacks", "io_threads"):
        for cost in cost_list:
            if cost < 0:
                raise ConfigInvalid("cost_list", "costs must be >= 0 ns")
            for run in range(cfg.runs + 1):
                w = replace(cfg.workload, op_kind="rand_read",
                            callback_cost_ns=cost)
                point = replace(cfg, workload=w,
                                architecture=replace(a, exec_mode=exec_mode))
                report = run_experiment(
                    point, seed=_point_seed(cfg.seed, cost, run),
                    run_id=f"{exec_mode}-c{cost}-run{run}")
                if run == 0:
                    continue
                reports.append(report)
                oracle = consumer_rate_oracle(point, cost)
                extra.append((exec_mode, cost, run, repr(oracle)))
    path = os.path.join(out_dir, "sweep_callback.csv")
    write_summary_csv(path, reports,
                      extra_columns=("exec_mode", "callback_cost_ns", "run",
                                     "oracle_iops"),
                      extra_values=extra)
    if plot:
        _plot_callback(path, out_dir)
    return path


def consumer_rate_oracle(cfg: ExperimentConfig, cost_ns: int) -> float:
    """Closed-form ceiling for inline execution: the reaping thread pays
    callback + reap + submit per op, across k instances, capped by the
    device."""
    a = cfg.architecture
    dev = effective_config(cfg.device, "rand_read")
    per_op = cost_ns + a.costs.reap_cost_ns + a.costs.submit_cost_ns
    device_rate = steady_state_iops(dev, cfg.workload.queue_depth)
    if per_op <= 0:
        return device_rate
    consumer_rate = a.k_instances * 1e9 / per_op
    return min(device_rate, consumer_rate)


def cmd_scaling_trace(cfg: ExperimentConfig, out_dir,
                      plot: bool = False) -> tuple:
    """Dynamic vs static A/B on the same load profile and seed."""
    if cfg.architecture.kind != "dynamic_pool":
        raise ConfigInvalid("architecture.kind",
                            "scaling-trace needs the dynamic_pool "
                            "architecture")
    if cfg.workload.kind != "arrivals":
        raise ConfigInvalid("workload.kind", "scaling-trace needs an "
                            "arrivals workload (phases of [ns, rate])")
    dyn = run_experiment(cfg, run_id="dynamic", keep_completion_times=True)
    static_cfg = replace(cfg, architecture=replace(cfg.architecture,
                                                   kind="static_pool"))
    stat = run_experiment(static_cfg, run_id="static",
                          keep_completion_times=True)

    phases = [tuple(p) for p in cfg.workload.phases]
    summary = os.path.join(out_dir, "scaling_trace.csv")
    rows = []
    for name, rep in (("dynamic", dyn), ("static", stat)):
        for i, (count, dur) in enumerate(zip(phase_counts(rep, phases),
                                             (p[0] for p in phases))):
            rows.append((name, i, phases[i][1], count,
                         repr(count * 1e9 / dur),
                         rep.poll_busy_ns_total()))
    with open(summary, "w", encoding="utf-8", newline="") as fh:
        fh.write("variant,phase,offered_rate,completions,iops,"
                 "poll_busy_ns_total\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    timeline_path = os.path.join(out_dir, "scaling_timeline.csv")
    with open(timeline_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("time_ns,active_count\n")
        for t, n in dyn.active_instance_timeline:
            fh.write(f"{t},{n}\n")
    if plot:
        _plot_timeline(timeline_path, out_dir)
    return summary, timeline_path, dyn, stat


def phase_counts(report: MetricsReport, phases) -> list:
    bounds = []
    t = 0
    for dur, _ in phases:
        t += dur
        bounds.append(t)
    counts = [0] * len(bounds)
    for ct in report.completion_times or ():
        for i, b in enumerate(bounds):
            if ct <= b:
                counts[i] += 1
                break
    return counts


def _matplotlib():
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        return plt
    except ImportError:
        raise ConfigInvalid("plot", "matplotlib is not installed; install "
                            "the 'plot' extra or drop --plot") from None


def _read_csv(path):
    import csv
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _plot_qd(csv_path, out_dir):
    plt = _matplotlib()
    rows = _read_csv(csv_path)
    qds = sorted({int(r["qd"]) for r in rows})
    meas = [sum(float(r["iops"]) for r in rows if int(r["qd"]) == q)
            / max(1, sum(1 for r in rows if int(r["qd"]) == q)) for q in qds]
    pred = [float(next(r["little_law_iops"] for r in rows
                       if int(r["qd"]) == q)) for q in qds]
    fig, ax = plt.subplots()
    ax.plot(qds, meas, marker="o", label="measured")
    ax.plot(qds, pred, linestyle="--", label="min(qd, P)/S")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("queue depth")
    ax.set_ylabel("IOPS")
    ax.legend()
    fig.savefig(os.path.join(out_dir, "sweep_qd.png"), dpi=120)
    plt.close(fig)


def _plot_callback(csv_path, out_dir):
    plt = _matplotlib()
    rows = _read_csv(csv_path)
    fig, ax = plt.subplots()
    for mode in ("inline_callbacks", "io_threads"):
        pts = sorted({int(r["callback_cost_ns"]) for r in rows
                      if r["exec_mode"] == mode})
        ys = [sum(float(r["iops"]) for r in rows
                  if r["exec_mode"] == mode
                  and int(r["callback_cost_ns"]) == c)
              / max(1, sum(1 for r in rows if r["exec_mode"] == mode
                           and int(r["callback_cost_ns"]) == c))
              for c in pts]
        ax.plot(pts, ys, marker="o", label=mode)
    ax.set_xlabel("post-I/O callback cost (ns)")
    ax.set_ylabel("IOPS")
    ax.set_yscale("log")
    ax.legend()
    fig.savefig(os.path.join(out_dir, "sweep_callback.png"), dpi=120)
    plt.close(fig)


def _plot_timeline(csv_path, out_dir):
    plt = _matplotlib()
    rows = _read_csv(csv_path)
    ts = [int(r["time_ns"]) / 1e6 for r in rows]
    ns = [int(r["active_count"]) for r in rows]
    fig, ax = plt.subplots()
    ax.step(ts, ns, where="post")
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("active instances")
    fig.savefig(os.path.join(out_dir, "scaling_timeline.png"), dpi=120)
    plt.close(fig)
