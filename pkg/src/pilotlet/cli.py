"""Operator command line: run workloads, manage standalone mini-clusters,
inspect pilot state, and drive the benchmarks.

Exit codes: 0 success, 1 domain error, 2 usage error.  Every subcommand is a
thin adapter over the programmatic API; there is no CLI-only logic.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import subprocess
import sys
import time
from dataclasses import replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from .core import ClusterFlavor, PilotState, UnitState, load_workload
from .errors import BootFailed, PilotletError, WaitTimeout
from .statestore import open_store

STORE_ENV_VAR = "PILOTLET_STORE"
DEFAULT_STORE = ".pilotlet/store"


class Command(str, Enum):
    PILOT_RUN = "pilot.run"
    UNITS_SUBMIT = "units.submit"
    CLUSTER_UP = "cluster.up"
    CLUSTER_DOWN = "cluster.down"
    BENCH_KMEANS = "bench.kmeans"
    BENCH_STARTUP = "bench.startup"
    STATUS = "status"


def _store_path(args) -> str:
    return args.store or os.environ.get(STORE_ENV_VAR) or DEFAULT_STORE


def _build_manager(args, description):
    from .pilotmgr import PilotManager
    from .saga import LocalAdaptor, SimBatchAdaptor

    store = open_store(_store_path(args))
    sim_cores = args.sim_cores_per_node or max(1, -(-description.cores // args.sim_nodes))
    adaptors = {
        "local": LocalAdaptor(memory_mb_per_node=description.memory_mb_per_node),
        "simbatch": SimBatchAdaptor(
            node_count=args.sim_nodes,
            cores_per_node=sim_cores,
            memory_mb_per_node=description.memory_mb_per_node,
            queue_wait_s=args.sim_queue_wait_s,
        ),
    }
    return PilotManager(store, adaptors, agent_poll_s=args.agent_poll_s), store


def _print_unit_summary(states) -> None:
    counts: dict = {}
    for state in states.values():
        counts[state.value] = counts.get(state.value, 0) + 1
    print("units:", ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))


def cmd_pilot_run(args) -> int:
    description, units = load_workload(args.workload)
    if args.adaptor:
        description = replace(description, resource_name=args.adaptor)
    manager, _ = _build_manager(args, description)
    handle = manager.submit_pilot(description)
    print(f"pilot {handle.pilot_id} submitted via {description.resource_name}")
    try:
        state = handle.wait_state(
            {PilotState.ACTIVE, PilotState.FAILED, PilotState.CANCELED}, timeout_s=120
        )
        if state != PilotState.ACTIVE:
            print(f"pilot ended {state.value} before serving", file=sys.stderr)
            return 1
        endpoint = handle.record.cluster_endpoint
        if endpoint:
            print(f"cluster endpoint: {endpoint}")
        unit_handles = manager.submit_units(handle, units)
        print(f"{len(unit_handles)} units submitted")
        states = manager.wait_units(unit_handles, timeout_s=description.runtime_s)
        _print_unit_summary(states)
        return 0 if all(s == UnitState.DONE for s in states.values()) else 1
    except (KeyboardInterrupt, WaitTimeout) as exc:
        print(f"interrupted ({type(exc).__name__}); canceling pilot", file=sys.stderr)
        manager.cancel_pilot(handle)
        return 1
    finally:
        if not args.keep_pilot:
            try:
                manager.cancel_pilot(handle)
            except PilotletError:
                pass
        manager.close()


def cmd_units_submit(args) -> int:
    from .pilotmgr import PilotManager, PilotHandle

    _, units = load_workload(args.workload)
    store = open_store(_store_path(args))
    manager = PilotManager(store, {})
    handle = PilotHandle(manager, args.pilot_id, job=None)
    try:
        unit_handles = manager.submit_units(handle, units)
        print(f"{len(unit_handles)} units submitted to {args.pilot_id}")
        if args.wait_s > 0:
            states = manager.wait_units(unit_handles, timeout_s=args.wait_s)
            _print_unit_summary(states)
            return 0 if all(s == UnitState.DONE for s in states.values()) else 1
        return 0
    finally:
        manager.close()


def cmd_cluster_up(args) -> int:
    from .minicluster import NodeSpec, RMClient, generate_configs

    rundir = Path(args.dir)
    rundir.mkdir(parents=True, exist_ok=True)
    flavor = ClusterFlavor(args.flavor)
    nodes = [NodeSpec(f"n{i}", "localhost", args.cores_per_node, args.memory_mb)
             for i in range(args.nodes)]
    files = generate_configs(nodes, rundir, flavor=flavor, rm_port=args.port)
    endpoint_file = rundir / "rm.endpoint"
    if endpoint_file.exists():
        endpoint_file.unlink()
    proc = subprocess.Popen(
        [
            sys.executable, "-m", "pilotlet.minicluster", "rm",
            "--config", str(files["conf"]),
            "--scratch", str(rundir / "scratch"),
            "--endpoint-file", str(endpoint_file),
        ],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
        start_new_session=True,
    )
    (rundir / "rm.pid").write_text(str(proc.pid), encoding="ascii")
    deadline = time.monotonic() + 30
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            raise BootFailed(f"cluster daemon exited with {proc.returncode}")
        if endpoint_file.exists():
            endpoint = endpoint_file.read_text(encoding="ascii").strip()
            try:
                RMClient(endpoint, timeout_s=1.0).health()
                print(endpoint)
                return 0
            except PilotletError:
                pass
        time.sleep(0.1)
    proc.terminate()
    raise BootFailed("cluster did not become healthy within 30s")


def cmd_cluster_down(args) -> int:
    from .errors import Unreachable
    from .minicluster import RMClient

    rundir = Path(args.dir)
    endpoint_file = rundir / "rm.endpoint"
    pid_file = rundir / "rm.pid"
    if not endpoint_file.exists() and not pid_file.exists():
        print("no cluster running here")
        return 0
    if endpoint_file.exists():
        endpoint = endpoint_file.read_text(encoding="ascii").strip()
        try:
            RMClient(endpoint, timeout_s=2.0).shutdown()
        except Unreachable:
            pass
    if pid_file.exists():
        pid = int(pid_file.read_text(encoding="ascii").strip())
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            try:
                os.kill(pid, 0)
            except ProcessLookupError:
                break
            time.sleep(0.1)
        else:
            try:
                os.kill(pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
        pid_file.unlink(missing_ok=True)
    endpoint_file.unlink(missing_ok=True)
    print("cluster stopped")
    return 0


def cmd_status(args) -> int:
    store = open_store(_store_path(args))
    pilot = store.get_pilot(args.pilot_id)
    units = store.list_units(args.pilot_id)
    counts: dict = {}
    for rec in units:
        counts[rec.state.value] = counts.get(rec.state.value, 0) + 1
    events = store.watch(args.pilot_id, since=0)[-10:]
    if args.format == "json":
        doc = {
            "pilot_id": pilot.pilot_id,
            "state": pilot.state.value,
            "cluster_endpoint": pilot.cluster_endpoint,
            "unit_counts": counts,
            "units_total": len(units),
            "last_events": [
                {"index": e.index, "timestamp": e.wall_iso, "entity_id": e.entity_id,
                 "old_state": e.old_state, "new_state": e.new_state}
                for e in events
            ],
        }
        print(json.dumps(doc, indent=2, sort_keys=True))
        return 0
    print(f"pilot {pilot.pilot_id}: {pilot.state.value}")
    if pilot.cluster_endpoint:
        print(f"cluster endpoint: {pilot.cluster_endpoint}")
    print(f"units ({len(units)} total):", ", ".join(f"{k}={v}" for k, v in sorted(counts.items())) or "none")
    for e in events:
        print(f"  [{e.index}] {e.entity_id}: {e.old_state} -> {e.new_state}")
    return 0


def cmd_bench_kmeans(args) -> int:
    from .bench import run_kmeans_benchmark
    from .kmeans import KMeansScenario

    scenarios = [
        KMeansScenario(n_points=args.n_points, k_clusters=args.k_clusters,
                       n_tasks=t, seed=args.seed)
        for t in args.n_tasks
    ]
    flavors = [ClusterFlavor(f) for f in args.flavors]
    results = run_kmeans_benchmark(
        scenarios, flavors, args.workdir, reps=args.reps,
        cores=args.cores, memory_mb=args.memory_mb, out_csv=args.out,
    )
    for row in results:
        s = row["scenario"]
        print(f"{s.name} tasks={s.n_tasks} flavor={row['flavor'].value} rep={row['rep']}: "
              f"runtime={row['runtime_s']:.2f}s boot={row['boot_s']:.2f}s "
              f"dist={row['dist_computations']}")
    print(f"csv: {args.out}")
    return 0


def cmd_bench_startup(args) -> int:
    from .bench import run_startup_benchmark

    reports = run_startup_benchmark(
        args.workdir, modes=args.modes, reps=args.reps,
        boot_delay_s=args.boot_delay_s, out_csv=args.out,
    )
    for mode, report in reports.items():
        print(f"{mode}: median agent_start->first_unit_exec = {report.median_startup():.3f}s "
              f"over {len(report.agent_start_to_first_exec)} reps")
    print(f"csv: {args.out}")
    return 0


def _csv_ints(text: str):
    return [int(v) for v in text.split(",") if v]


def _csv_strs(text: str):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pilotlet",
        description="pilot-job resource management with embedded mini-clusters",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_store_arg(p):
        p.add_argument("--store", default=None,
                       help=f"store directory (default ${STORE_ENV_VAR} or {DEFAULT_STORE})")

    pilot = sub.add_parser("pilot", help="pilot lifecycle commands")
    pilot_sub = pilot.add_subparsers(dest="pilot_command", required=True)
    run = pilot_sub.add_parser("run", help="run a workload file to completion")
    run.add_argument("--workload", required=True)
    run.add_argument("--adaptor", choices=["local", "simbatch"], default=None,
                     help="override the workload's resource_name")
    run.add_argument("--keep-pilot", action="store_true",
                     help="leave the pilot running after the units finish")
    run.add_argument("--agent-poll-s", type=float, default=0.2)
    run.add_argument("--sim-nodes", type=int, default=2)
    run.add_argument("--sim-cores-per-node", type=int, default=None)
    run.add_argument("--sim-queue-wait-s", type=float, default=0.0)
    add_store_arg(run)
    run.set_defaults(func=cmd_pilot_run, cmd=Command.PILOT_RUN)

    units = sub.add_parser("units", help="unit commands")
    units_sub = units.add_subparsers(dest="units_command", required=True)
    usubmit = units_sub.add_parser("submit", help="submit a workload's units to a running pilot")
    usubmit.add_argument("--workload", required=True)
    usubmit.add_argument("--pilot-id", required=True)
    usubmit.add_argument("--wait-s", type=float, default=0.0,
                         help="wait up to this long for the units to finish")
    add_store_arg(usubmit)
    usubmit.set_defaults(func=cmd_units_submit, cmd=Command.UNITS_SUBMIT)

    cluster = sub.add_parser("cluster", help="standalone mini-cluster lifecycle")
    cluster_sub = cluster.add_subparsers(dest="cluster_command", required=True)
    up = cluster_sub.add_parser("up", help="start a detached mini-cluster")
    up.add_argument("--flavor", choices=["yarn", "spark"], required=True)
    up.add_argument("--nodes", type=int, default=2)
    up.add_argument("--cores-per-node", type=int, default=8)
    up.add_argument("--memory-mb", type=int, default=8192)
    up.add_argument("--port", type=int, default=0)
    up.add_argument("--dir", required=True, help="runtime directory (pid, endpoint, configs)")
    up.set_defaults(func=cmd_cluster_up, cmd=Command.CLUSTER_UP)
    down = cluster_sub.add_parser("down", help="stop a detached mini-cluster")
    down.add_argument("--dir", required=True)
    down.set_defaults(func=cmd_cluster_down, cmd=Command.CLUSTER_DOWN)

    bench = sub.add_parser("bench", help="benchmark harnesses")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)
    bk = bench_sub.add_parser("kmeans", help="distributed k-means benchmark")
    bk.add_argument("--n-points", type=int, required=True)
    bk.add_argument("--k-clusters", type=int, required=True)
    bk.add_argument("--n-tasks", type=_csv_ints, default=[1, 2, 4])
    bk.add_argument("--flavors", type=_csv_strs, default=["none"])
    bk.add_argument("--reps", type=int, default=5)
    bk.add_argument("--seed", type=int, default=42)
    bk.add_argument("--cores", type=int, default=8)
    bk.add_argument("--memory-mb", type=int, default=16384)
    bk.add_argument("--workdir", default=".pilotlet/bench-kmeans")
    bk.add_argument("--out", default="kmeans.csv")
    bk.set_defaults(func=cmd_bench_kmeans, cmd=Command.BENCH_KMEANS)
    bs = bench_sub.add_parser("startup", help="pilot startup decomposition benchmark")
    bs.add_argument("--modes", type=_csv_strs, default=["plain", "spawn", "connect"])
    bs.add_argument("--reps", type=int, default=5)
    bs.add_argument("--boot-delay-s", type=float, default=0.0)
    bs.add_argument("--workdir", default=".pilotlet/bench-startup")
    bs.add_argument("--out", default="startup.csv")
    bs.set_defaults(func=cmd_bench_startup, cmd=Command.BENCH_STARTUP)

    status = sub.add_parser("status", help="pilot and unit state summary")
    status.add_argument("--pilot-id", required=True)
    status.add_argument("--format", choices=["text", "json"], default="text")
    add_store_arg(status)
    status.set_defaults(func=cmd_status, cmd=Command.STATUS)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except PilotletError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
