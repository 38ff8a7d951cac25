"""Benchmark harness: startup-overhead decomposition and the MapReduce-style
K-Means workload, both driven through the regular pilot stack at desk scale.

Startup timing works off the timestamp trail every run leaves in the store:
pilot_submit -> agent_start -> cluster_ready -> first_unit_exec, plus each
unit's cu_submit -> cu_exec_start latency.  The K-Means harness submits map
units (one per partition) and one reduce unit per iteration; all data between
phases moves through staged files in the pilot sandbox.

Results land in CSV files with fixed headers.
"""

from __future__ import annotations

import logging
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .core import (
    ClusterFlavor,
    ClusterMode,
    ComputeUnitDescription,
    LaunchMethod,
    PilotDescription,
    PilotState,
    StagingDirection,
    StagingDirective,
    UnitState,
)
from .errors import PilotletError, WaitTimeout
from .kmeans import KMeansScenario, generate_dataset
from .pilotmgr import PilotManager, PilotHandle, UnitHandle
from .saga import LocalAdaptor
from .statestore import FileStore

logger = logging.getLogger(__name__)

KMEANS_CSV_HEADER = "scenario,n_points,k,n_tasks,flavor,mode,rep,boot_s,runtime_s,dist_computations"
STARTUP_CSV_HEADER = (
    "mode,rep,submit_to_agent_start_s,agent_start_to_cluster_ready_s,"
    "cluster_ready_to_first_unit_exec_s,agent_start_to_first_unit_exec_s"
)
CU_LATENCY_CSV_HEADER = "method,rep,submit_to_exec_s"

STARTUP_MODES = ("plain", "spawn", "connect")


class BenchRunFailed(PilotletError):
    code = "BENCH_RUN_FAILED"


def _append_csv(path, header: str, rows: Sequence[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8") as fh:
        if fresh:
            fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


@dataclass
class StartupReport:
    """Interval decomposition for one startup mode across repetitions."""

    mode: str
    submit_to_agent_start: List[float] = field(default_factory=list)
    agent_start_to_cluster_ready: List[float] = field(default_factory=list)
    cluster_ready_to_first_exec: List[float] = field(default_factory=list)
    agent_start_to_first_exec: List[float] = field(default_factory=list)
    cu_latencies: List[float] = field(default_factory=list)

    def median_startup(self) -> float:
        return statistics.median(self.agent_start_to_first_exec)


def _interval(record, start_event: str, end_event: str) -> Optional[float]:
    start = record.timing(start_event)
    end = record.timing(end_event)
    if start is None or end is None:
        return None
    return end.monotonic - start.monotonic


def _unit_latency(unit: UnitHandle) -> Optional[float]:
    rec = unit.record
    return _interval(rec, "cu_submit", "cu_exec_start")


def _wait_active(handle: PilotHandle, timeout_s: float = 60.0) -> None:
    state = handle.wait_state({PilotState.ACTIVE, PilotState.FAILED, PilotState.CANCELED}, timeout_s)
    if state != PilotState.ACTIVE:
        raise BenchRunFailed(f"pilot {handle.pilot_id} reached {state.value} instead of ACTIVE")


def _mode_description(mode: str, sandbox_root: str, cores: int, memory_mb: int,
                      connect_url: Optional[str]) -> PilotDescription:
    if mode == "plain":
        return PilotDescription(
            resource_name="local", cores=cores, memory_mb_per_node=memory_mb,
            runtime_s=300, sandbox_root=sandbox_root,
        )
    if mode == "spawn":
        return PilotDescription(
            resource_name="local", cores=cores, memory_mb_per_node=memory_mb,
            runtime_s=300, sandbox_root=sandbox_root,
            cluster_flavor=ClusterFlavor.YARN_LIKE, cluster_mode=ClusterMode.SPAWN,
        )
    if mode == "connect":
        return PilotDescription(
            resource_name="local", cores=cores, memory_mb_per_node=memory_mb,
            runtime_s=300, sandbox_root=sandbox_root,
            cluster_flavor=ClusterFlavor.YARN_LIKE, cluster_mode=ClusterMode.CONNECT,
            connect_url=connect_url,
        )
    raise BenchRunFailed(f"unknown startup mode {mode!r}")


def run_startup_benchmark(
    workdir,
    modes: Sequence[str] = STARTUP_MODES,
    reps: int = 5,
    boot_delay_s: float = 0.0,
    cores: int = 4,
    memory_mb: int = 8192,
    out_csv=None,
) -> Dict[str, StartupReport]:
    """One trivial forked unit per repetition per mode; report the interval trail.

    ``connect`` mode adopts a cluster started up-front, so its boot interval
    collapses while ``spawn`` pays boot_delay_s plus daemon startup.
    """
    from .minicluster import MiniCluster, NodeSpec

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    external = None
    reports: Dict[str, StartupReport] = {}
    rows = []
    try:
        if "connect" in modes:
            external = MiniCluster(
                ClusterFlavor.YARN_LIKE,
                [NodeSpec("n0", "localhost", cores, memory_mb)],
                workdir / "external-cluster",
                spawn_node_managers=False,
            )
            external.start()
        for mode in modes:
            report = StartupReport(mode=mode)
            reports[mode] = report
            store = FileStore(workdir / f"store-{mode}")
            manager = PilotManager(
                store,
                LocalAdaptor(memory_mb_per_node=memory_mb),
                agent_poll_s=0.1,
                agent_boot_delay_s=boot_delay_s if mode == "spawn" else 0.0,
            )
            try:
                for rep in range(reps):
                    description = _mode_description(
                        mode, str(workdir / f"sb-{mode}-{rep}"), cores, memory_mb,
                        external.endpoint if external else None,
                    )
                    handle = manager.submit_pilot(description)
                    _wait_active(handle)
                    (trivial,) = manager.submit_units(
                        handle,
                        [ComputeUnitDescription(executable="/bin/true",
                                                launch_method_hint=LaunchMethod.FORK)],
                    )
                    manager.wait_units([trivial], timeout_s=60)
                    record = handle.record
                    intervals = {
                        "submit": _interval(record, "pilot_submit", "agent_start"),
                        "boot": _interval(record, "agent_start", "cluster_ready"),
                        "sched": _interval(record, "cluster_ready", "first_unit_exec"),
                        "total": _interval(record, "agent_start", "first_unit_exec"),
                    }
                    manager.cancel_pilot(handle)
                    if any(v is None for v in intervals.values()):
                        raise BenchRunFailed(f"incomplete timing trail for pilot {handle.pilot_id}")
                    report.submit_to_agent_start.append(intervals["submit"])
                    report.agent_start_to_cluster_ready.append(intervals["boot"])
                    report.cluster_ready_to_first_exec.append(intervals["sched"])
                    report.agent_start_to_first_exec.append(intervals["total"])
                    latency = _unit_latency(trivial)
                    if latency is not None:
                        report.cu_latencies.append(latency)
                    rows.append((mode, rep, f"{intervals['submit']:.6f}", f"{intervals['boot']:.6f}",
                                 f"{intervals['sched']:.6f}", f"{intervals['total']:.6f}"))
            finally:
                manager.close()
    finally:
        if external is not None:
            external.stop()
    if out_csv:
        _append_csv(out_csv, STARTUP_CSV_HEADER, rows)
    return reports


def run_cu_latency_probe(
    workdir,
    reps: int = 5,
    cores: int = 4,
    memory_mb: int = 8192,
    out_csv=None,
) -> Dict[str, list]:
    """Submit trivial units under FORK and under the two-phase container path
    on the same pilot; return per-method submit->exec latencies and state traces.
    """
    from .minicluster import MiniCluster, NodeSpec

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    external = MiniCluster(
        ClusterFlavor.YARN_LIKE,
        [NodeSpec("n0", "localhost", cores, memory_mb)],
        workdir / "cluster",
        spawn_node_managers=False,
    )
    external.start()
    store = FileStore(workdir / "store")
    manager = PilotManager(store, LocalAdaptor(memory_mb_per_node=memory_mb), agent_poll_s=0.1)
    result = {"fork": [], "yarn": [], "fork_traces": [], "yarn_traces": []}
    rows = []
    try:
        handle = manager.submit_pilot(
            PilotDescription(
                resource_name="local", cores=cores, memory_mb_per_node=memory_mb,
                runtime_s=600, sandbox_root=str(workdir / "sb"),
                cluster_flavor=ClusterFlavor.YARN_LIKE, cluster_mode=ClusterMode.CONNECT,
                connect_url=external.endpoint,
            )
        )
        _wait_active(handle)
        for method, key in ((LaunchMethod.FORK, "fork"), (LaunchMethod.YARN, "yarn")):
            for rep in range(reps):
                (unit,) = manager.submit_units(
                    handle,
                    [ComputeUnitDescription(executable="/bin/true", memory_mb=128,
                                            launch_method_hint=method)],
                )
                states = manager.wait_units([unit], timeout_s=60)
                if states[unit.unit_id] != UnitState.DONE:
                    raise BenchRunFailed(f"probe unit ended {states[unit.unit_id].value}")
                latency = _unit_latency(unit)
                result[key].append(latency)
                trace = [e.new_state for e in store.watch(handle.pilot_id, 0)
                         if e.entity_id == unit.unit_id]
                result[f"{key}_traces"].append(trace)
                rows.append((key, rep, f"{latency:.6f}"))
        manager.cancel_pilot(handle)
    finally:
        manager.close()
        external.stop()
    if out_csv:
        _append_csv(out_csv, CU_LATENCY_CSV_HEADER, rows)
    return result


# --------------------------------------------------------------------------
# K-Means through the pilot stack
# --------------------------------------------------------------------------

def _ensure_dataset(scenario: KMeansScenario, datadir) -> dict:
    datadir = Path(datadir)
    datadir.mkdir(parents=True, exist_ok=True)
    points = datadir / f"points-{scenario.name}-s{scenario.seed}.dat"
    centroids = datadir / f"centroids-{scenario.name}-s{scenario.seed}.dat"
    if not points.exists() or not centroids.exists():
        generate_dataset(scenario, points, centroids)
    return {"points": points, "centroids": centroids}


def _parse_dist_count(stdout_tail: Optional[str]) -> int:
    for line in (stdout_tail or "").splitlines():
        if line.startswith("dist_computations "):
            return int(line.split(" ", 1)[1])
    raise BenchRunFailed("map unit reported no dist_computations line")


@dataclass
class KMeansRunResult:
    scenario: KMeansScenario
    flavor: ClusterFlavor
    boot_s: float
    runtime_s: float
    dist_computations: int
    final_centroids: Path
    assignments: List[int]


def run_kmeans_once(
    scenario: KMeansScenario,
    flavor: ClusterFlavor,
    workdir,
    cores: int = 8,
    memory_mb: int = 16384,
    agent_poll_s: float = 0.1,
) -> KMeansRunResult:
    """Drive one full K-Means run (all iterations) through a fresh pilot."""
    scenario.validate()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    data = _ensure_dataset(scenario, workdir / "data")

    store = FileStore(workdir / "store")
    manager = PilotManager(store, LocalAdaptor(memory_mb_per_node=memory_mb),
                           agent_poll_s=agent_poll_s)
    mode = ClusterMode.SPAWN
    description = PilotDescription(
        resource_name="local", cores=cores, memory_mb_per_node=memory_mb,
        runtime_s=900, sandbox_root=str(workdir / "sb"),
        cluster_flavor=flavor, cluster_mode=mode,
    )
    dist_total = 0
    try:
        handle = manager.submit_pilot(description)
        _wait_active(handle, timeout_s=90)
        shuffle = Path(description.sandbox_root) / handle.pilot_id / "shuffle"
        shuffle.mkdir(parents=True, exist_ok=True)

        centroid_files = [data["centroids"]]
        assign_files: List[Path] = []
        last_records = []
        for iteration in range(1, scenario.iterations + 1):
            final_iter = iteration == scenario.iterations
            iter_dir = shuffle / f"iter-{iteration:02d}"
            iter_dir.mkdir(parents=True, exist_ok=True)
            map_units = []
            for p, (start, end) in enumerate(scenario.partitions()):
                args = [
                    "-m", "pilotlet.kmeans", "map",
                    "--points", "points.dat",
                    "--centroids", "centroids.dat",
                    "--out", f"part-{p:05d}.psum",
                    "--row-start", str(start),
                    "--row-end", str(end),
                ]
                out_staging = [
                    StagingDirective(str(iter_dir / f"part-{p:05d}.psum"),
                                     f"part-{p:05d}.psum", StagingDirection.OUT)
                ]
                if final_iter:
                    args += ["--assign-out", f"assign-{p:05d}.txt"]
                    out_staging.append(
                        StagingDirective(str(iter_dir / f"assign-{p:05d}.txt"),
                                         f"assign-{p:05d}.txt", StagingDirection.OUT)
                    )
                map_units.append(
                    ComputeUnitDescription(
                        executable=sys.executable,
                        arguments=tuple(args),
                        cores=1,
                        memory_mb=256,
                        input_staging=[
                            StagingDirective(str(data["points"]), "points.dat", StagingDirection.IN),
                            StagingDirective(str(centroid_files[-1]), "centroids.dat", StagingDirection.IN),
                        ],
                        output_staging=out_staging,
                    )
                )
            handles = manager.submit_units(handle, map_units)
            states = manager.wait_units(handles, timeout_s=600)
            bad = {u: s for u, s in states.items() if s != UnitState.DONE}
            if bad:
                raise BenchRunFailed(f"map units failed in iteration {iteration}: {bad}")
            for h in handles:
                dist_total += _parse_dist_count(h.stdout_tail)
            if final_iter:
                assign_files = [iter_dir / f"assign-{p:05d}.txt"
                                for p in range(scenario.n_tasks)]

            new_centroids = shuffle / f"centroids-{iteration:02d}.dat"
            partial_names = [f"part-{p:05d}.psum" for p in range(scenario.n_tasks)]
            reduce_unit = ComputeUnitDescription(
                executable=sys.executable,
                arguments=tuple(
                    ["-m", "pilotlet.kmeans", "reduce", "--centroids", "centroids.dat",
                     "--out", "new_centroids.dat", *partial_names]
                ),
                cores=1,
                memory_mb=256,
                input_staging=[
                    StagingDirective(str(centroid_files[-1]), "centroids.dat", StagingDirection.IN),
                    *[StagingDirective(str(iter_dir / name), name, StagingDirection.IN)
                      for name in partial_names],
                ],
                output_staging=[
                    StagingDirective(str(new_centroids), "new_centroids.dat", StagingDirection.OUT)
                ],
            )
            (reduce_handle,) = manager.submit_units(handle, [reduce_unit])
            states = manager.wait_units([reduce_handle], timeout_s=600)
            if states[reduce_handle.unit_id] != UnitState.DONE:
                raise BenchRunFailed(f"reduce unit ended {states[reduce_handle.unit_id].value}")
            centroid_files.append(new_centroids)
            last_records = [h.record for h in (*handles, reduce_handle)]

        pilot_record = handle.record
        submit_timing = pilot_record.timing("pilot_submit")
        end_monotonic = max(rec.timings[-1].monotonic for rec in last_records)
        runtime_s = end_monotonic - submit_timing.monotonic
        boot = _interval(pilot_record, "cluster_boot_start", "cluster_boot_end") or 0.0

        assignments: List[int] = []
        for path in assign_files:
            assignments.extend(int(line) for line in path.read_text().split())

        manager.cancel_pilot(handle)
        return KMeansRunResult(
            scenario=scenario,
            flavor=flavor,
            boot_s=boot,
            runtime_s=runtime_s,
            dist_computations=dist_total,
            final_centroids=centroid_files[-1],
            assignments=assignments,
        )
    finally:
        manager.close()


def run_kmeans_benchmark(
    scenarios: Sequence[KMeansScenario],
    flavors: Sequence[ClusterFlavor],
    workdir,
    reps: int = 5,
    cores: int = 8,
    memory_mb: int = 16384,
    out_csv=None,
) -> List[dict]:
    """Spec of runs -> one CSV row per (scenario, n_tasks, flavor, repetition)."""
    workdir = Path(workdir)
    rows = []
    results = []
    run_index = 0
    try:
        for scenario in scenarios:
            for flavor in flavors:
                for rep in range(reps):
                    run_index += 1
                    result = run_kmeans_once(
                        scenario, flavor, workdir / f"run-{run_index:03d}",
                        cores=cores, memory_mb=memory_mb,
                    )
                    mode = "spawn" if flavor != ClusterFlavor.NONE else "none"
                    rows.append((
                        scenario.name, scenario.n_points, scenario.k_clusters,
                        scenario.n_tasks, flavor.value, mode, rep,
                        f"{result.boot_s:.6f}", f"{result.runtime_s:.6f}",
                        result.dist_computations,
                    ))
                    results.append({
                        "scenario": scenario, "flavor": flavor, "rep": rep,
                        "boot_s": result.boot_s, "runtime_s": result.runtime_s,
                        "dist_computations": result.dist_computations,
                    })
    except BenchRunFailed:
        if out_csv:
            _append_csv(out_csv, KMEANS_CSV_HEADER, rows)
            with open(out_csv, "a", encoding="utf-8") as fh:
                fh.write("# ABORTED: run failed; rows above are the completed subset\n")
        raise
    if out_csv:
        _append_csv(out_csv, KMEANS_CSV_HEADER, rows)
    return results
