"""The resource-side agent: discovers its allocation, optionally boots or
adopts a mini-cluster, pulls units from the shared store, schedules them onto
cores (or negotiates containers), spawns and monitors executions, and streams
results back.

Concurrency layout: a unit puller, a core scheduler, a cluster scheduler
(when a flavor is active) and one spawner/monitor thread per running unit,
all communicating over internal queues.  The slot inventory lives behind one
condition variable and every store write goes through one serialized writer,
so the store's event journal stays a total order.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import signal
import socket
import subprocess
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .core import (
    ClusterFlavor,
    ClusterMode,
    ComputeUnitDescription,
    LaunchMethod,
    PilotState,
    TimingRecord,
    UnitState,
    resolve_launch_method,
)
from .errors import (
    BootFailed,
    ConnectFailed,
    IllegalTransition,
    ImpossibleRequest,
    MalformedNodefile,
    MetricsUnavailable,
    MissingEnv,
    NeverFits,
    PilotletError,
    SpawnFailed,
    StagingFailed,
    Unreachable,
    ValidationError,
)
from .minicluster import (
    DEFAULT_AM_MEMORY_MB,
    DEFAULT_AM_VCORES,
    NodeSpec,
    RMClient,
    generate_configs,
    parse_exit_code,
)
from .saga import CORES_VAR, MEM_VAR, NODEFILE_VAR
from .statestore import BaseStore, open_store

logger = logging.getLogger(__name__)

CLAIM_BATCH = 32
HEARTBEAT_INTERVAL_S = 2.0
MONITOR_POLL_S = 0.2
DEFER_TICK_S = 1.0
BOOT_HEALTH_TIMEOUT_S = 30.0
# The agent's node hosts the master daemons; reserve headroom for them.
DAEMON_RESERVE_VCORES = 1
DAEMON_RESERVE_MEMORY_MB = 1024


# --------------------------------------------------------------------------
# Resource detection (the LRM's environment contract)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NodeResource:
    hostname: str
    cores: int
    memory_mb: int


@dataclass(frozen=True)
class ClusterInfo:
    nodes: tuple
    total_cores: int
    total_memory_mb: int
    flavor_endpoint: Optional[str] = None

    @classmethod
    def from_nodes(cls, nodes: Sequence[NodeResource], flavor_endpoint: Optional[str] = None) -> "ClusterInfo":
        nodes = tuple(nodes)
        return cls(
            nodes=nodes,
            total_cores=sum(n.cores for n in nodes),
            total_memory_mb=sum(n.memory_mb for n in nodes),
            flavor_endpoint=flavor_endpoint,
        )


def detect_resources(env: Optional[Mapping[str, str]] = None) -> ClusterInfo:
    """Build the node inventory from the submission layer's env contract.

    The nodefile is authoritative: a hostname listed k times owns k cores.
    Duplicate hostnames aggregate in first-appearance order.
    """
    env = os.environ if env is None else env
    missing = [v for v in (NODEFILE_VAR, CORES_VAR, MEM_VAR) if v not in env]
    if missing:
        raise MissingEnv(f"missing environment variables: {', '.join(missing)}")
    try:
        memory_mb = int(env[MEM_VAR])
        int(env[CORES_VAR])
    except ValueError as exc:
        raise MissingEnv(f"non-integer resource variables: {exc}") from exc

    path = env[NODEFILE_VAR]
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as exc:
        raise MalformedNodefile(f"cannot read nodefile {path}: {exc}") from exc

    counts: dict = {}
    order: list = []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line:
            continue
        if " " in line or "\t" in line:
            raise MalformedNodefile(f"{path}:{lineno}: expected one hostname per line, got {raw!r}")
        if line not in counts:
            counts[line] = 0
            order.append(line)
        counts[line] += 1
    if not order:
        raise MalformedNodefile(f"nodefile {path} lists no hosts")
    nodes = [NodeResource(host, counts[host], memory_mb) for host in order]
    return ClusterInfo.from_nodes(nodes)


# --------------------------------------------------------------------------
# Scheduling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Slot:
    """A core reservation on one node."""

    node_index: int
    core_indices: tuple
    memory_mb: int = 0


def schedule_fork(
    cu: ComputeUnitDescription,
    free_cores: Sequence[Sequence[int]],
    node_capacities: Sequence[int],
) -> Optional[Slot]:
    """First-fit placement over nodes in index order, lowest free cores first.

    Returns None to defer when nothing currently fits; memory is ignored for
    forked units.  A pure function of its inputs.
    """
    if cu.cores > max(node_capacities):
        raise NeverFits(f"unit needs {cu.cores} cores but the largest node has {max(node_capacities)}")
    for idx, free in enumerate(free_cores):
        if len(free) >= cu.cores:
            return Slot(node_index=idx, core_indices=tuple(sorted(free)[: cu.cores]))
    return None


def schedule_yarn(
    cu: ComputeUnitDescription,
    metrics: Mapping,
    am_vcores: int = DEFAULT_AM_VCORES,
    am_memory_mb: int = DEFAULT_AM_MEMORY_MB,
) -> bool:
    """Approve iff cores and memory remain for the task *and* its master container."""
    return (
        metrics["availableVirtualCores"] >= cu.cores + am_vcores
        and metrics["availableMemoryMB"] >= cu.memory_mb + am_memory_mb
    )


def schedule_spark(cu: ComputeUnitDescription, metrics: Mapping) -> bool:
    return (
        metrics["availableVirtualCores"] >= cu.cores
        and metrics["availableMemoryMB"] >= cu.memory_mb
    )


class SlotInventory:
    """Free-core bookkeeping for forked units; one lock domain."""

    def __init__(self, info: ClusterInfo):
        self.cond = threading.Condition()
        self._capacities = [n.cores for n in info.nodes]
        self._free = [set(range(n.cores)) for n in info.nodes]

    @property
    def total_cores(self) -> int:
        return sum(self._capacities)

    def free_view(self) -> list:
        with self.cond:
            return [sorted(s) for s in self._free]

    def free_count(self) -> int:
        with self.cond:
            return sum(len(s) for s in self._free)

    def capacities(self) -> list:
        return list(self._capacities)

    def allocate(self, slot: Slot) -> None:
        with self.cond:
            missing = set(slot.core_indices) - self._free[slot.node_index]
            if missing:
                raise ValidationError([f"cores {sorted(missing)} are not free on node {slot.node_index}"])
            self._free[slot.node_index] -= set(slot.core_indices)

    def release(self, slot: Slot) -> None:
        with self.cond:
            self._free[slot.node_index] |= set(slot.core_indices)
            self.cond.notify_all()


# --------------------------------------------------------------------------
# Cluster bootstrap (the LRM's Mode I / Mode II paths)
# --------------------------------------------------------------------------

def bootstrap_cluster(
    info: ClusterInfo,
    flavor: ClusterFlavor,
    mode: ClusterMode,
    *,
    pilot_id: str,
    scratch,
    connect_url: Optional[str] = None,
    boot_delay_s: float = 0.0,
    am_vcores: int = DEFAULT_AM_VCORES,
    am_memory_mb: int = DEFAULT_AM_MEMORY_MB,
) -> tuple:
    """Spawn or adopt a mini-cluster; returns (info-with-endpoint, timings, rm_proc).

    ``rm_proc`` is None in connect mode (the cluster is not ours to stop).
    A cluster_boot_start/cluster_boot_end timing pair is always emitted.
    """
    if flavor == ClusterFlavor.NONE:
        raise ValidationError(["bootstrap requires a cluster flavor"])
    timings = [TimingRecord.now(pilot_id, "cluster_boot_start")]

    if mode == ClusterMode.CONNECT:
        if not connect_url:
            raise ConnectFailed("connect mode requires a connect URL")
        client = RMClient(connect_url, timeout_s=2.0)
        last = None
        for _ in range(3):
            try:
                health = client.health()
                if health.get("flavor") != flavor.value:
                    raise ConnectFailed(
                        f"cluster at {connect_url} is {health.get('flavor')}, expected {flavor.value}"
                    )
                timings.append(TimingRecord.now(pilot_id, "cluster_boot_end"))
                return replace(info, flavor_endpoint=connect_url), timings, None
            except Unreachable as exc:
                last = exc
                time.sleep(0.3)
        raise ConnectFailed(f"cluster at {connect_url} did not answer: {last}")

    # Spawn mode: the agent's own node hosts the master daemons.
    specs = []
    for i, node in enumerate(info.nodes):
        vcores, memory = node.cores, node.memory_mb
        if i == 0:
            vcores -= DAEMON_RESERVE_VCORES
            memory -= DAEMON_RESERVE_MEMORY_MB
        specs.append(NodeSpec(f"n{i}", node.hostname, max(vcores, 0), max(memory, 0)))
    if sum(s.vcores for s in specs) < 1:
        raise BootFailed("no cores left for containers after the daemon reserve")

    scratch = Path(scratch)
    if boot_delay_s > 0:
        # Emulates the download/extract/start cost of a real distribution.
        time.sleep(boot_delay_s)
    files = generate_configs(specs, scratch, flavor=flavor)
    endpoint_file = scratch / "rm.endpoint"
    proc = subprocess.Popen(
        [
            sys.executable, "-m", "pilotlet.minicluster", "rm",
            "--config", str(files["conf"]),
            "--scratch", str(scratch / "rm"),
            "--endpoint-file", str(endpoint_file),
            "--am-vcores", str(am_vcores),
            "--am-memory-mb", str(am_memory_mb),
        ],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
        start_new_session=True,
    )
    deadline = time.monotonic() + BOOT_HEALTH_TIMEOUT_S
    endpoint = None
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            raise BootFailed(f"cluster daemon exited with {proc.returncode} during boot")
        if endpoint_file.exists():
            endpoint = endpoint_file.read_text(encoding="ascii").strip()
            try:
                RMClient(endpoint, timeout_s=1.0).health()
                break
            except Unreachable:
                endpoint = None
        time.sleep(0.1)
    if endpoint is None:
        proc.terminate()
        raise BootFailed(f"cluster did not answer its health check within {BOOT_HEALTH_TIMEOUT_S:.0f}s")
    timings.append(TimingRecord.now(pilot_id, "cluster_boot_end"))
    return replace(info, flavor_endpoint=endpoint), timings, proc


# --------------------------------------------------------------------------
# Staging
# --------------------------------------------------------------------------

def _copy_path(src: Path, dst: Path) -> None:
    dst.parent.mkdir(parents=True, exist_ok=True)
    if src.is_dir():
        shutil.copytree(src, dst, dirs_exist_ok=True)
    else:
        shutil.copy2(src, dst)


def stage_in(directives, work_dir) -> None:
    work = Path(work_dir)
    for d in directives:
        src = Path(d.source)
        if not src.exists():
            raise StagingFailed(f"input {src} does not exist")
        try:
            _copy_path(src, work / d.target)
        except OSError as exc:
            raise StagingFailed(f"staging in {src} -> {d.target}: {exc}") from exc


def stage_out(directives, work_dir) -> None:
    work = Path(work_dir)
    for d in directives:
        src = work / d.target
        if not src.exists():
            raise StagingFailed(f"output {d.target} was not produced")
        try:
            _copy_path(src, Path(d.source))
        except OSError as exc:
            raise StagingFailed(f"staging out {d.target} -> {d.source}: {exc}") from exc


def _read_tail(path, limit: int = 64 * 1024) -> Optional[str]:
    try:
        with open(path, "rb") as fh:
            fh.seek(0, os.SEEK_END)
            size = fh.tell()
            fh.seek(max(0, size - limit))
            return fh.read().decode("utf-8", errors="replace")
    except OSError:
        return None


# --------------------------------------------------------------------------
# The agent proper
# --------------------------------------------------------------------------

class _SerializedWriter:
    """Funnels every store write through one mutual-exclusion domain."""

    def __init__(self, store: BaseStore):
        self._store = store
        self._lock = threading.Lock()

    def update_unit(self, unit_id, new_state=None, patch=None):
        with self._lock:
            return self._store.update_unit(unit_id, new_state, patch)

    def update_pilot(self, pilot_id, new_state=None, patch=None, timing_event=None):
        with self._lock:
            return self._store.update_pilot(pilot_id, new_state, patch, timing_event)


class Agent:
    def __init__(
        self,
        pilot_id: str,
        store: BaseStore,
        flavor: ClusterFlavor = ClusterFlavor.NONE,
        mode: ClusterMode = ClusterMode.SPAWN,
        connect_url: Optional[str] = None,
        sandbox_root: str = ".",
        boot_delay_s: float = 0.0,
        poll_s: float = 0.5,
        am_vcores: int = DEFAULT_AM_VCORES,
        am_memory_mb: int = DEFAULT_AM_MEMORY_MB,
        env: Optional[Mapping[str, str]] = None,
    ):
        self.pilot_id = pilot_id
        self.agent_id = f"agent-{socket.gethostname()}-{os.getpid()}"
        self.store = store
        self.flavor = flavor
        self.mode = mode
        self.connect_url = connect_url
        self.sandbox_root = Path(sandbox_root)
        self.boot_delay_s = boot_delay_s
        self.poll_s = poll_s
        self.am_vcores = am_vcores
        self.am_memory_mb = am_memory_mb
        self.env = env

        self.writer = _SerializedWriter(store)
        self.info: Optional[ClusterInfo] = None
        self.inventory: Optional[SlotInventory] = None
        self.client: Optional[RMClient] = None
        self._rm_proc: Optional[subprocess.Popen] = None

        self._stop = threading.Event()
        self._stop_reason = "done"
        self._fork_queue: deque = deque()
        self._cluster_queue: deque = deque()
        self._queue_cond = threading.Condition()
        self._reserved_vcores = 0
        self._reserved_memory = 0
        self._unit_threads: list = []
        self._cancel_events: dict = {}
        self._first_exec_lock = threading.Lock()
        self._first_exec_done = False
        self._deadline: Optional[float] = None

    # -- store write helpers ----------------------------------------------

    def _safe_unit_update(self, unit_id, new_state=None, patch=None) -> bool:
        try:
            self.writer.update_unit(unit_id, new_state, patch)
        except (IllegalTransition, PilotletError) as exc:
            logger.debug("unit %s update to %s skipped: %s", unit_id, new_state, exc)
            return False
        if new_state == UnitState.EXECUTING:
            self._note_first_exec()
        return True

    def _note_first_exec(self):
        with self._first_exec_lock:
            if self._first_exec_done:
                return
            self._first_exec_done = True
        try:
            self.writer.update_pilot(self.pilot_id, timing_event="first_unit_exec")
        except PilotletError as exc:
            logger.warning("cannot record first_unit_exec: %s", exc)

    def _fail_unit(self, unit, message: str, exit_code: Optional[int] = None):
        logger.warning("unit %s failed: %s", unit.unit_id, message)
        patch = {"stderr_tail": message}
        if exit_code is not None:
            patch["exit_code"] = exit_code
        self._safe_unit_update(unit.unit_id, UnitState.FAILED, patch)

    # -- lifecycle ----------------------------------------------------------

    def request_stop(self, reason: str = "canceled"):
        self._stop_reason = reason
        self._stop.set()
        with self._queue_cond:
            self._queue_cond.notify_all()
        if self.inventory is not None:
            with self.inventory.cond:
                self.inventory.cond.notify_all()

    def run(self) -> int:
        pilot = self.store.get_pilot(self.pilot_id)
        self._deadline = time.monotonic() + pilot.description.runtime_s
        endpoint = f"proc://{socket.gethostname()}/{os.getpid()}"
        self.writer.update_pilot(self.pilot_id, patch={"agent_endpoint": endpoint},
                                 timing_event="agent_start")
        try:
            self.info = detect_resources(self.env)
            if self.flavor != ClusterFlavor.NONE:
                self.info, boot_timings, self._rm_proc = bootstrap_cluster(
                    self.info,
                    self.flavor,
                    self.mode,
                    pilot_id=self.pilot_id,
                    scratch=self.sandbox_root / self.pilot_id / "cluster",
                    connect_url=self.connect_url,
                    boot_delay_s=self.boot_delay_s,
                    am_vcores=self.am_vcores,
                    am_memory_mb=self.am_memory_mb,
                )
                self.client = RMClient(self.info.flavor_endpoint)
                for t in boot_timings:
                    self.writer.update_pilot(self.pilot_id, timing_event=t.event_name)
                self.writer.update_pilot(self.pilot_id,
                                         patch={"cluster_endpoint": self.info.flavor_endpoint})
        except PilotletError as exc:
            logger.error("agent bootstrap failed: %s", exc)
            self._try_pilot_state(PilotState.FAILED)
            return 1

        self.inventory = SlotInventory(self.info)
        self.writer.update_pilot(self.pilot_id, PilotState.ACTIVE, timing_event="cluster_ready")

        threads = [
            threading.Thread(target=self._puller_loop, name="agent-puller", daemon=True),
            threading.Thread(target=self._fork_scheduler_loop, name="agent-fork-sched", daemon=True),
            threading.Thread(target=self._heartbeat_loop, name="agent-heartbeat", daemon=True),
        ]
        if self.flavor != ClusterFlavor.NONE:
            threads.append(
                threading.Thread(target=self._cluster_scheduler_loop, name="agent-cluster-sched", daemon=True)
            )
        for t in threads:
            t.start()

        while not self._stop.is_set():
            if time.monotonic() >= self._deadline:
                self.request_stop("deadline")
                break
            self._stop.wait(0.2)

        for t in threads:
            t.join(timeout=5)
        self._shutdown()
        return 0

    def _try_pilot_state(self, state: PilotState):
        try:
            self.writer.update_pilot(self.pilot_id, state)
        except (IllegalTransition, PilotletError) as exc:
            logger.debug("pilot state %s skipped: %s", state, exc)

    def _shutdown(self):
        # Drain queued-but-unstarted units.
        with self._queue_cond:
            leftovers = list(self._fork_queue) + [u for u, _ in self._cluster_queue]
            self._fork_queue.clear()
            self._cluster_queue.clear()
        for unit in leftovers:
            self._safe_unit_update(unit.unit_id, UnitState.CANCELED)
        # Ask running executions to wind down, then wait for them.
        for ev in list(self._cancel_events.values()):
            ev.set()
        for t in list(self._unit_threads):
            t.join(timeout=10)
        # Unclaimed work dies with the pilot.
        try:
            for rec in self.store.list_units(self.pilot_id):
                if rec.state in (UnitState.PENDING, UnitState.SCHEDULED):
                    self._safe_unit_update(rec.unit_id, UnitState.CANCELED)
        except PilotletError as exc:
            logger.warning("final unit sweep failed: %s", exc)
        # Stop a spawned cluster; an adopted one is not ours to stop.
        if self._rm_proc is not None:
            try:
                if self.client is not None:
                    self.client.shutdown()
            except Unreachable:
                pass
            try:
                self._rm_proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._rm_proc.kill()
        final = PilotState.CANCELED if self._stop_reason == "canceled" else PilotState.DONE
        self._try_pilot_state(final)

    # -- loops ---------------------------------------------------------------

    def _puller_loop(self):
        consecutive_errors = 0
        while not self._stop.is_set():
            try:
                pilot = self.store.get_pilot(self.pilot_id)
                if pilot.state in (PilotState.CANCELED, PilotState.FAILED, PilotState.DONE):
                    self.request_stop("canceled")
                    return
                claimed = self.store.claim_units(self.agent_id, self.pilot_id, CLAIM_BATCH)
                consecutive_errors = 0
            except PilotletError as exc:
                consecutive_errors += 1
                logger.warning("store poll failed (%d): %s", consecutive_errors, exc)
                if consecutive_errors >= 5:
                    self._try_pilot_state(PilotState.FAILED)
                    self.request_stop("failed")
                    return
                claimed = []
            if claimed:
                with self._queue_cond:
                    for rec in claimed:
                        method = resolve_launch_method(rec.description.launch_method_hint, self.flavor)
                        if method == LaunchMethod.FORK:
                            self._fork_queue.append(rec)
                        else:
                            self._cluster_queue.append((rec, method))
                    self._queue_cond.notify_all()
                with self.inventory.cond:
                    self.inventory.cond.notify_all()
            self._stop.wait(self.poll_s)

    def _fork_scheduler_loop(self):
        while not self._stop.is_set():
            scheduled_any = False
            with self._queue_cond:
                pending = list(self._fork_queue)
            for unit in pending:
                if self._stop.is_set():
                    return
                placement = None
                try:
                    if unit.description.cores > self.inventory.total_cores:
                        raise NeverFits(
                            f"unit needs {unit.description.cores} cores, pilot has {self.inventory.total_cores}"
                        )
                    placement = schedule_fork(
                        unit.description, self.inventory.free_view(), self.inventory.capacities()
                    )
                except NeverFits as exc:
                    with self._queue_cond:
                        if unit in self._fork_queue:
                            self._fork_queue.remove(unit)
                    self._fail_unit(unit, str(exc))
                    continue
                if placement is None:
                    continue  # defer; retried on release or tick
                self.inventory.allocate(placement)
                with self._queue_cond:
                    if unit in self._fork_queue:
                        self._fork_queue.remove(unit)
                    else:  # raced with shutdown drain
                        self.inventory.release(placement)
                        continue
                self._start_unit_thread(self._run_fork_unit, unit, placement)
                scheduled_any = True
            if not scheduled_any:
                with self.inventory.cond:
                    self.inventory.cond.wait(timeout=DEFER_TICK_S)

    def _cluster_scheduler_loop(self):
        while not self._stop.is_set():
            with self._queue_cond:
                head = self._cluster_queue[0] if self._cluster_queue else None
            if head is None:
                with self._queue_cond:
                    self._queue_cond.wait(timeout=0.2)
                continue
            unit, method = head
            metrics = None
            for attempt in range(3):
                try:
                    metrics = self.client.metrics()
                    break
                except Unreachable:
                    time.sleep(0.3)
            if metrics is None:
                with self._queue_cond:
                    if self._cluster_queue and self._cluster_queue[0][0] is unit:
                        self._cluster_queue.popleft()
                self._fail_unit(unit, MetricsUnavailable("cluster metrics endpoint unreachable").message)
                continue
            with self._queue_cond:
                effective = dict(metrics)
                effective["availableVirtualCores"] -= self._reserved_vcores
                effective["availableMemoryMB"] -= self._reserved_memory
                if method == LaunchMethod.YARN:
                    ok = schedule_yarn(unit.description, effective, self.am_vcores, self.am_memory_mb)
                    need_v = unit.description.cores + self.am_vcores
                    need_m = unit.description.memory_mb + self.am_memory_mb
                else:
                    ok = schedule_spark(unit.description, effective)
                    need_v = unit.description.cores
                    need_m = unit.description.memory_mb
                if ok:
                    if self._cluster_queue and self._cluster_queue[0][0] is unit:
                        self._cluster_queue.popleft()
                    else:
                        continue
                    self._reserved_vcores += need_v
                    self._reserved_memory += need_m
                else:
                    impossible = (
                        need_v > metrics["totalVirtualCores"] or need_m > metrics["totalMemoryMB"]
                    )
                    if impossible:
                        self._cluster_queue.popleft()
                        self._fail_unit(
                            unit, f"request {need_v}c/{need_m}MB exceeds cluster capacity"
                        )
                        continue
                    self._queue_cond.wait(timeout=0.2)
                    continue
            self._start_unit_thread(self._run_cluster_unit, unit, method, need_v, need_m)

    def _heartbeat_loop(self):
        while not self._stop.is_set():
            try:
                self.writer.update_pilot(
                    self.pilot_id,
                    patch={"meta": {"heartbeat_monotonic": time.monotonic(),
                                    "heartbeat_wall": time.time()}},
                )
            except PilotletError as exc:
                logger.debug("heartbeat write failed: %s", exc)
            self._stop.wait(HEARTBEAT_INTERVAL_S)

    # -- executions ------------------------------------------------------------

    def _start_unit_thread(self, target, unit, *args):
        cancel = threading.Event()
        self._cancel_events[unit.unit_id] = cancel
        t = threading.Thread(target=target, args=(unit, *args, cancel),
                             name=f"unit-{unit.unit_id}", daemon=True)
        self._unit_threads.append(t)
        t.start()

    def _unit_sandbox(self, unit) -> dict:
        base = self.sandbox_root / self.pilot_id / unit.unit_id
        work = base / "work"
        work.mkdir(parents=True, exist_ok=True)
        (base / "unit.json").write_text(
            json.dumps(unit.description.to_dict(), indent=2), encoding="utf-8"
        )
        return {"base": base, "work": work, "stdout": base / "stdout", "stderr": base / "stderr"}

    def _unit_canceled_in_store(self, unit_id) -> bool:
        try:
            return self.store.get_unit(unit_id).state == UnitState.CANCELED
        except PilotletError:
            return False

    def _run_fork_unit(self, unit, slot: Slot, cancel: threading.Event):
        try:
            self._execute_fork(unit, slot, cancel)
        finally:
            self.inventory.release(slot)
            self._cancel_events.pop(unit.unit_id, None)

    def _execute_fork(self, unit, slot: Slot, cancel: threading.Event):
        try:
            paths = self._unit_sandbox(unit)
            stage_in(unit.description.input_staging, paths["work"])
        except (StagingFailed, OSError) as exc:
            self._fail_unit(unit, f"input staging failed: {exc}")
            return
        if not self._safe_unit_update(
            unit.unit_id, UnitState.EXECUTING, {"sandbox_path": str(paths["base"])}
        ):
            return  # canceled under us before start

        node = self.info.nodes[slot.node_index]
        env = dict(os.environ)
        env.update(unit.description.environment)
        env["PILOTLET_UNIT_ID"] = unit.unit_id
        env["PILOTLET_NODE"] = node.hostname
        # Advisory pinning: accounting only, not OS-enforced.
        env["PILOTLET_CORE_IDS"] = ",".join(str(c) for c in slot.core_indices)
        try:
            with open(paths["stdout"], "ab") as out_fh, open(paths["stderr"], "ab") as err_fh:
                proc = subprocess.Popen(
                    [unit.description.executable, *unit.description.arguments],
                    cwd=paths["work"],
                    env=env,
                    stdout=out_fh,
                    stderr=err_fh,
                    start_new_session=True,
                )
        except OSError as exc:
            self._fail_unit(unit, SpawnFailed(f"cannot start {unit.description.executable}: {exc}").message)
            return

        while True:
            rc = proc.poll()
            if rc is not None:
                break
            if cancel.is_set() or self._unit_canceled_in_store(unit.unit_id):
                self._kill_group(proc)
                self._safe_unit_update(unit.unit_id, UnitState.CANCELED)
                return
            cancel.wait(MONITOR_POLL_S)
        self._collect(unit, rc, paths)

    def _run_cluster_unit(self, unit, method, reserved_v, reserved_m, cancel: threading.Event):
        reserved = True
        try:
            reserved = self._execute_cluster(unit, method, cancel, reserved_v, reserved_m)
        finally:
            if reserved:
                self._unreserve(reserved_v, reserved_m)
            self._cancel_events.pop(unit.unit_id, None)

    def _unreserve(self, vcores, memory):
        with self._queue_cond:
            self._reserved_vcores -= vcores
            self._reserved_memory -= memory
            self._queue_cond.notify_all()

    def _execute_cluster(self, unit, method, cancel, reserved_v, reserved_m) -> bool:
        """Returns True if the reservation is still held (caller releases)."""
        try:
            paths = self._unit_sandbox(unit)
            stage_in(unit.description.input_staging, paths["work"])
        except (StagingFailed, OSError) as exc:
            self._fail_unit(unit, f"input staging failed: {exc}")
            return True
        if method == LaunchMethod.YARN:
            if not self._safe_unit_update(
                unit.unit_id, UnitState.ALLOCATING, {"sandbox_path": str(paths["base"])}
            ):
                return True
        else:
            self._safe_unit_update(unit.unit_id, None, {"sandbox_path": str(paths["base"])})

        spec = {
            "name": unit.unit_id,
            "task_spec": {
                "vcores": unit.description.cores,
                "memory_mb": unit.description.memory_mb,
                "command": [unit.description.executable, *unit.description.arguments],
                "cwd": str(paths["work"]),
                "env": {
                    **unit.description.environment,
                    "PILOTLET_UNIT_ID": unit.unit_id,
                },
                "stdout_path": str(paths["stdout"]),
                "stderr_path": str(paths["stderr"]),
            },
        }
        if method == LaunchMethod.YARN:
            spec["am_spec"] = {"vcores": self.am_vcores, "memory_mb": self.am_memory_mb}
        app_id = None
        for attempt in range(3):
            try:
                app_id = self.client.submit_app(spec)
                break
            except (ImpossibleRequest, ValidationError) as exc:
                self._fail_unit(unit, str(exc))
                return True
            except Unreachable:
                time.sleep(0.3)
        if app_id is None:
            self._fail_unit(unit, "cluster submit endpoint unreachable")
            return True

        reserved = True
        app = None
        while True:
            try:
                app = self.client.get_app(app_id)
            except Unreachable:
                cancel.wait(MONITOR_POLL_S)
                continue
            except PilotletError as exc:
                self._fail_unit(unit, f"lost track of application {app_id}: {exc}")
                return reserved
            state = app["state"]
            if state == "RUNNING" and reserved:
                # The ledger now carries the containers; drop our shadow hold.
                self._unreserve(reserved_v, reserved_m)
                reserved = False
                self._safe_unit_update(unit.unit_id, UnitState.EXECUTING)
            if state in ("FINISHED", "FAILED", "KILLED"):
                break
            if cancel.is_set() or self._unit_canceled_in_store(unit.unit_id):
                try:
                    self.client.kill_app(app_id)
                except PilotletError:
                    pass
                self._safe_unit_update(unit.unit_id, UnitState.CANCELED)
                return reserved
            cancel.wait(MONITOR_POLL_S)

        if app["state"] == "KILLED":
            self._safe_unit_update(unit.unit_id, UnitState.CANCELED)
            return reserved
        # Exit status comes from the application log, not the API state alone.
        exit_code = parse_exit_code(app["logPath"])
        try:
            current = self.store.get_unit(unit.unit_id).state
        except PilotletError:
            current = None
        if current in (UnitState.SCHEDULED, UnitState.ALLOCATING):
            # App finished before we ever observed it RUNNING (short tasks).
            if reserved:
                self._unreserve(reserved_v, reserved_m)
                reserved = False
            self._safe_unit_update(unit.unit_id, UnitState.EXECUTING)
        self._collect(unit, exit_code, self._paths_for(unit))
        return reserved

    def _paths_for(self, unit) -> dict:
        base = self.sandbox_root / self.pilot_id / unit.unit_id
        return {"base": base, "work": base / "work", "stdout": base / "stdout", "stderr": base / "stderr"}

    def _collect(self, unit, exit_code, paths):
        """EXECUTING -> STAGING_OUT -> DONE/FAILED with artifacts."""
        if not self._safe_unit_update(unit.unit_id, UnitState.STAGING_OUT):
            return
        patch = {
            "exit_code": exit_code,
            "stdout_tail": _read_tail(paths["stdout"]),
            "stderr_tail": _read_tail(paths["stderr"]),
        }
        staging_error = None
        if exit_code == 0:
            try:
                stage_out(unit.description.output_staging, paths["work"])
            except StagingFailed as exc:
                staging_error = str(exc)
        if exit_code == 0 and staging_error is None:
            self._safe_unit_update(unit.unit_id, UnitState.DONE, patch)
        else:
            if staging_error:
                patch["stderr_tail"] = ((patch.get("stderr_tail") or "") + f"\n{staging_error}").strip()
            if patch["exit_code"] is None:
                patch["exit_code"] = 1
            self._safe_unit_update(unit.unit_id, UnitState.FAILED, patch)

    @staticmethod
    def _kill_group(proc: subprocess.Popen):
        try:
            pgid = os.getpgid(proc.pid)
            os.killpg(pgid, signal.SIGTERM)
        except (ProcessLookupError, PermissionError):
            return
        deadline = time.monotonic() + 2.0
        while time.monotonic() < deadline and proc.poll() is None:
            time.sleep(0.05)
        if proc.poll() is None:
            try:
                os.killpg(pgid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="pilotlet-agent")
    parser.add_argument("--pilot-id", required=True)
    parser.add_argument("--store", required=True, help="store path or mem:// URL")
    parser.add_argument("--flavor", choices=[f.value for f in ClusterFlavor], default="none")
    parser.add_argument("--mode", choices=[m.value for m in ClusterMode], default="spawn")
    parser.add_argument("--connect-url", default=None)
    parser.add_argument("--sandbox", default=".")
    parser.add_argument("--boot-delay-s", type=float, default=0.0)
    parser.add_argument("--poll-s", type=float, default=0.5)
    parser.add_argument("--am-memory-mb", type=int, default=DEFAULT_AM_MEMORY_MB)
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=os.environ.get("PILOTLET_LOG", "INFO"),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    agent = Agent(
        pilot_id=args.pilot_id,
        store=open_store(args.store),
        flavor=ClusterFlavor(args.flavor),
        mode=ClusterMode(args.mode),
        connect_url=args.connect_url,
        sandbox_root=args.sandbox,
        boot_delay_s=args.boot_delay_s,
        poll_s=args.poll_s,
        am_memory_mb=args.am_memory_mb,
    )

    def _sig(_signum, _frame):
        agent.request_stop("canceled")

    signal.signal(signal.SIGTERM, _sig)
    signal.signal(signal.SIGINT, _sig)
    return agent.run()


if __name__ == "__main__":
    sys.exit(main())
