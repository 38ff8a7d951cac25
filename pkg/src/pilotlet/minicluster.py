"""Embedded cluster frameworks: a YARN-semantics resource manager with
two-phase container negotiation and REST metrics, and a Spark-standalone-style
master with single-phase slot allocation.

The resource manager is one process serving HTTP+JSON on paths modeled on
YARN's (``/ws/v1/cluster/metrics``, ``/ws/v1/cluster/apps``, ...).  Node
managers are lightweight subprocesses supervised by it; container processes
are spawned by the manager itself and attributed to nodes in the allocation
ledger (single-host emulation).  Semantics, not Hadoop wire compatibility,
is the contract.

Scheduling is FIFO with first-fit by node index.  There is no preemption:
single-tenant desk scale never triggers the high-load situations that would
need it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import signal
import subprocess
import sys
import threading
import time
import urllib.error
import urllib.request
from collections import deque
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .core import ClusterFlavor
from .errors import (
    BootFailed,
    ImpossibleRequest,
    IoFailed,
    UnknownApp,
    Unreachable,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_AM_VCORES = 1
DEFAULT_AM_MEMORY_MB = 512
_PORT_RETRIES = 10


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    hostname: str
    vcores: int
    memory_mb: int


# --------------------------------------------------------------------------
# Config file generation (the bootstrap artifacts the LRM writes before
# starting daemons).
# --------------------------------------------------------------------------

def generate_configs(nodes: Sequence[NodeSpec], out_dir, flavor: ClusterFlavor = ClusterFlavor.YARN_LIKE,
                     rm_port: int = 0) -> dict:
    """Write ``master``, ``slaves`` and ``cluster.conf`` into ``out_dir``.

    master: first node's hostname.  slaves: remaining hostnames, one per
    line (empty for a single-node cluster).  cluster.conf: key=value lines
    with flavor, rm_port and per-node vcores/memory.
    """
    if not nodes:
        raise ValidationError(["at least one node is required"])
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        master = out / "master"
        slaves = out / "slaves"
        conf = out / "cluster.conf"
        master.write_text(nodes[0].hostname + "\n", encoding="ascii")
        slaves.write_text("".join(n.hostname + "\n" for n in nodes[1:]), encoding="ascii")
        lines = [
            "# pilotlet mini-cluster configuration",
            f"flavor={flavor.value}",
            f"rm_port={rm_port}",
        ]
        for i, n in enumerate(nodes):
            lines.append(f"node.{i}.hostname={n.hostname}")
            lines.append(f"node.{i}.vcores={n.vcores}")
            lines.append(f"node.{i}.memory_mb={n.memory_mb}")
        conf.write_text("".join(line + "\n" for line in lines), encoding="ascii")
    except OSError as exc:
        raise IoFailed(f"cannot write cluster configs to {out}: {exc}") from exc
    return {"master": master, "slaves": slaves, "conf": conf}


def parse_cluster_conf(path) -> dict:
    """Parse cluster.conf back into flavor, rm_port and a NodeSpec list."""
    kv = {}
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as exc:
        raise IoFailed(f"cannot read {path}: {exc}") from exc
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    nodes = []
    i = 0
    while f"node.{i}.hostname" in kv:
        nodes.append(
            NodeSpec(
                node_id=f"n{i}",
                hostname=kv[f"node.{i}.hostname"],
                vcores=int(kv[f"node.{i}.vcores"]),
                memory_mb=int(kv[f"node.{i}.memory_mb"]),
            )
        )
        i += 1
    if not nodes:
        raise ValidationError([f"no nodes found in {path}"])
    return {
        "flavor": ClusterFlavor(kv.get("flavor", "yarn")),
        "rm_port": int(kv.get("rm_port", "0")),
        "nodes": nodes,
    }


# --------------------------------------------------------------------------
# Ledger entities
# --------------------------------------------------------------------------

class _Container:
    __slots__ = ("container_id", "node_index", "vcores", "memory_mb", "role", "state")

    def __init__(self, container_id, node_index, vcores, memory_mb, role):
        self.container_id = container_id
        self.node_index = node_index
        self.vcores = vcores
        self.memory_mb = memory_mb
        self.role = role  # "AM" | "TASK"
        self.state = "ALLOCATED"

    def to_dict(self, nodes):
        return {
            "containerId": self.container_id,
            "nodeId": nodes[self.node_index].node_id,
            "vcores": self.vcores,
            "memoryMb": self.memory_mb,
            "role": self.role,
            "state": self.state,
        }


class _App:
    def __init__(self, app_id, name, am_spec, task_spec, log_path):
        self.app_id = app_id
        self.name = name
        self.am_spec = am_spec  # None for spark flavor
        self.task_spec = task_spec
        self.state = "SUBMITTED"
        self.am_container: Optional[_Container] = None
        self.task_containers: list = []
        self.am_proc: Optional[subprocess.Popen] = None
        self.task_proc: Optional[subprocess.Popen] = None
        self.task_exit: Optional[int] = None
        self.log_path = log_path
        self.stdout_fh = None
        self.stderr_fh = None
        self.task_requested = False

    def to_dict(self, nodes):
        return {
            "appId": self.app_id,
            "name": self.name,
            "state": self.state,
            "exitCode": self.task_exit,
            "logPath": str(self.log_path),
            "amContainer": self.am_container.to_dict(nodes) if self.am_container else None,
            "taskContainers": [c.to_dict(nodes) for c in self.task_containers],
        }

    def close_streams(self):
        for fh in (self.stdout_fh, self.stderr_fh):
            if fh is not None:
                try:
                    fh.close()
                except OSError:
                    pass
        self.stdout_fh = self.stderr_fh = None


def _kill_proc(proc: Optional[subprocess.Popen], grace_s: float = 0.5) -> None:
    if proc is None or proc.poll() is not None:
        return
    try:
        pgid = os.getpgid(proc.pid)
    except (ProcessLookupError, PermissionError):
        return
    try:
        os.killpg(pgid, signal.SIGTERM)
    except (ProcessLookupError, PermissionError):
        return
    deadline = time.monotonic() + grace_s
    while time.monotonic() < deadline and proc.poll() is None:
        time.sleep(0.02)
    if proc.poll() is None:
        try:
            os.killpg(pgid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass


# --------------------------------------------------------------------------
# The resource manager / standalone master
# --------------------------------------------------------------------------

class MiniCluster:
    """Allocation ledger plus HTTP surface for one emulated cluster.

    All ledger mutations are serialized under one condition variable, giving a
    linearizable journal; the HTTP layer handles requests concurrently.
    """

    def __init__(
        self,
        flavor: ClusterFlavor,
        nodes: Sequence[NodeSpec],
        scratch,
        port: int = 0,
        host: str = "127.0.0.1",
        am_vcores: int = DEFAULT_AM_VCORES,
        am_memory_mb: int = DEFAULT_AM_MEMORY_MB,
        spawn_node_managers: bool = True,
    ):
        if flavor == ClusterFlavor.NONE:
            raise ValidationError(["mini-cluster flavor must be yarn or spark"])
        self.flavor = flavor
        self.nodes = list(nodes)
        self.scratch = Path(scratch)
        self.host = host
        self.requested_port = port
        self.am_vcores = am_vcores
        self.am_memory_mb = am_memory_mb
        self.spawn_node_managers = spawn_node_managers

        self._cond = threading.Condition()
        self._alloc_vcores = [0] * len(self.nodes)
        self._alloc_memory = [0] * len(self.nodes)
        self._apps: dict = {}
        self._pending_apps: deque = deque()
        # Apps whose AM is up but whose task container is still owed, in
        # submission order: task grants must not overtake earlier apps.
        self._task_order: deque = deque()
        self._version = 0
        self._journal: list = []
        self._app_seq = 0
        self._container_seq = 0
        self._stopping = False
        self._nm_procs: list = []
        self._server: Optional[ThreadingHTTPServer] = None
        self._threads: list = []
        self.endpoint: Optional[str] = None

    # -- lifecycle --------------------------------------------------------

    def start(self) -> str:
        self.scratch.mkdir(parents=True, exist_ok=True)
        (self.scratch / "apps").mkdir(exist_ok=True)
        self._bind()
        if self.spawn_node_managers:
            nm_dir = self.scratch / "nm"
            nm_dir.mkdir(exist_ok=True)
            for node in self.nodes:
                self._nm_procs.append(
                    subprocess.Popen(
                        [sys.executable, "-m", "pilotlet.minicluster", "nm",
                         "--node-id", node.node_id, "--scratch", str(nm_dir)],
                        stdout=subprocess.DEVNULL,
                        stderr=subprocess.DEVNULL,
                        start_new_session=True,
                    )
                )
        for target, name in ((self._serve, "rm-http"), (self._allocator_loop, "rm-alloc"),
                             (self._monitor_loop, "rm-monitor")):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        return self.endpoint

    def _bind(self):
        handler = _make_handler(self)
        last_exc = None
        candidates = [self.requested_port] if self.requested_port == 0 else [
            self.requested_port + i for i in range(_PORT_RETRIES)
        ]
        for candidate in candidates:
            try:
                self._server = ThreadingHTTPServer((self.host, candidate), handler)
                break
            except OSError as exc:
                last_exc = exc
        if self._server is None:
            raise BootFailed(f"cannot bind a port near {self.requested_port}: {last_exc}")
        self.endpoint = f"http://{self.host}:{self._server.server_address[1]}"

    def _serve(self):
        self._server.serve_forever(poll_interval=0.05)

    def stop(self) -> None:
        """Terminate every container and daemon, close the endpoint, remove scratch."""
        with self._cond:
            if self._stopping:
                return
            self._stopping = True
            apps = list(self._apps.values())
            self._cond.notify_all()
        for app in apps:
            _kill_proc(app.task_proc)
            _kill_proc(app.am_proc)
            app.close_streams()
        for proc in self._nm_procs:
            _kill_proc(proc)
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        for t in self._threads:
            t.join(timeout=2)
        shutil.rmtree(self.scratch, ignore_errors=True)

    def live_node_managers(self) -> int:
        if not self.spawn_node_managers:
            return len(self.nodes)
        return sum(1 for p in self._nm_procs if p.poll() is None)

    # -- journal ----------------------------------------------------------

    def _record(self, event: str, app: Optional[_App] = None, container: Optional[_Container] = None):
        self._version += 1
        entry = {
            "version": self._version,
            "event": event,
            "appId": app.app_id if app else None,
            "allocatedVcores": sum(self._alloc_vcores),
            "allocatedMemoryMb": sum(self._alloc_memory),
        }
        if container is not None:
            entry.update(
                containerId=container.container_id,
                role=container.role,
                nodeId=self.nodes[container.node_index].node_id,
                vcores=container.vcores,
                memoryMb=container.memory_mb,
            )
        self._journal.append(entry)

    def _log(self, app: _App, line: str) -> None:
        try:
            with open(app.log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        except OSError as exc:  # scratch gone during shutdown
            logger.debug("cannot write app log for %s: %s", app.app_id, exc)

    # -- public ledger operations (called from HTTP handlers) -------------

    def metrics(self) -> dict:
        with self._cond:
            total_v = sum(n.vcores for n in self.nodes)
            total_m = sum(n.memory_mb for n in self.nodes)
            alloc_v = sum(self._alloc_vcores)
            alloc_m = sum(self._alloc_memory)
            by_state: dict = {}
            for app in self._apps.values():
                by_state[app.state] = by_state.get(app.state, 0) + 1
            return {
                "totalVirtualCores": total_v,
                "availableVirtualCores": total_v - alloc_v,
                "totalMemoryMB": total_m,
                "availableMemoryMB": total_m - alloc_m,
                "appsByState": by_state,
                "nodeCount": self.live_node_managers(),
                "ledgerVersion": self._version,
            }

    def journal_entries(self) -> list:
        with self._cond:
            return list(self._journal)

    def submit_app(self, spec: Mapping) -> str:
        name = spec.get("name", "app")
        task = dict(spec.get("task_spec") or {})
        am = dict(spec.get("am_spec") or {})
        task.setdefault("vcores", 1)
        task.setdefault("memory_mb", 256)
        if not task.get("command"):
            raise ValidationError(["task_spec.command is required"])
        am.setdefault("vcores", self.am_vcores)
        am.setdefault("memory_mb", self.am_memory_mb)

        max_v = max(n.vcores for n in self.nodes)
        max_m = max(n.memory_mb for n in self.nodes)
        total_v = sum(n.vcores for n in self.nodes)
        total_m = sum(n.memory_mb for n in self.nodes)
        if self.flavor == ClusterFlavor.YARN_LIKE:
            # A container must fit on a single node.
            if task["vcores"] > max_v or task["memory_mb"] > max_m:
                raise ImpossibleRequest(
                    f"task container {task['vcores']}c/{task['memory_mb']}MB exceeds the largest node"
                )
            if am["vcores"] > max_v or am["memory_mb"] > max_m:
                raise ImpossibleRequest("AM container exceeds the largest node")
        else:
            if task["vcores"] > total_v or task["memory_mb"] > total_m:
                raise ImpossibleRequest(
                    f"request {task['vcores']}c/{task['memory_mb']}MB exceeds cluster capacity"
                )

        with self._cond:
            self._app_seq += 1
            app_id = f"app-{self._app_seq:04d}"
            app_dir = self.scratch / "apps" / app_id
            app_dir.mkdir(parents=True, exist_ok=True)
            app = _App(app_id, name, am if self.flavor == ClusterFlavor.YARN_LIKE else None,
                       task, app_dir / "app.log")
            self._apps[app_id] = app
            self._pending_apps.append(app_id)
            self._record("APP_SUBMIT", app)
            self._cond.notify_all()
        self._log(app, f"SUBMIT {app_id} {name}")
        return app_id

    def get_app(self, app_id: str) -> dict:
        with self._cond:
            app = self._apps.get(app_id)
            if app is None:
                raise UnknownApp(app_id)
            return app.to_dict(self.nodes)

    def list_apps(self) -> list:
        with self._cond:
            return [a.to_dict(self.nodes) for a in self._apps.values()]

    def request_task_container(self, app_id: str) -> None:
        """Phase two: the application master asks for its task container."""
        with self._cond:
            app = self._apps.get(app_id)
            if app is None:
                raise UnknownApp(app_id)
            if app.state in ("FINISHED", "FAILED", "KILLED"):
                return
            app.task_requested = True
            self._cond.notify_all()

    def kill_app(self, app_id: str) -> str:
        with self._cond:
            app = self._apps.get(app_id)
            if app is None:
                raise UnknownApp(app_id)
            if app.state in ("FINISHED", "FAILED", "KILLED"):
                return app.state
            if app_id in self._pending_apps:
                self._pending_apps.remove(app_id)
            if app_id in self._task_order:
                self._task_order.remove(app_id)
            task_proc, am_proc = app.task_proc, app.am_proc
        _kill_proc(task_proc, grace_s=0.2)
        _kill_proc(am_proc, grace_s=0.2)
        with self._cond:
            self._release_all(app)
            app.state = "KILLED"
            app.close_streams()
            self._record("APP_STATE", app)
            self._cond.notify_all()
        self._log(app, "KILLED")
        return "KILLED"

    # -- allocation internals (call with cond held) ------------------------

    def _free_on(self, idx: int) -> tuple:
        node = self.nodes[idx]
        return node.vcores - self._alloc_vcores[idx], node.memory_mb - self._alloc_memory[idx]

    def _allocate(self, app: _App, role: str, vcores: int, memory_mb: int, node_index: int) -> _Container:
        self._container_seq += 1
        c = _Container(f"c-{self._container_seq:05d}", node_index, vcores, memory_mb, role)
        self._alloc_vcores[node_index] += vcores
        self._alloc_memory[node_index] += memory_mb
        if role == "AM":
            app.am_container = c
        else:
            app.task_containers.append(c)
        self._record("CONTAINER_ALLOCATE", app, c)
        return c

    def _release(self, app: _App, c: _Container) -> None:
        if c.state == "RELEASED":
            return
        c.state = "RELEASED"
        self._alloc_vcores[c.node_index] -= c.vcores
        self._alloc_memory[c.node_index] -= c.memory_mb
        self._record("CONTAINER_RELEASE", app, c)

    def _release_all(self, app: _App) -> None:
        for c in app.task_containers:
            self._release(app, c)
        if app.am_container is not None:
            self._release(app, app.am_container)

    def _first_fit(self, vcores: int, memory_mb: int) -> Optional[int]:
        for idx in range(len(self.nodes)):
            free_v, free_m = self._free_on(idx)
            if free_v >= vcores and free_m >= memory_mb:
                return idx
        return None

    def _spread_round_robin(self, vcores: int, memory_mb: int) -> Optional[dict]:
        """Spark-style binding: one core per pass over workers with free cores."""
        free = [self._free_on(i)[0] for i in range(len(self.nodes))]
        bindings: dict = {}
        remaining = vcores
        while remaining > 0:
            progressed = False
            for idx in range(len(self.nodes)):
                if remaining == 0:
                    break
                if free[idx] - bindings.get(idx, 0) > 0:
                    bindings[idx] = bindings.get(idx, 0) + 1
                    remaining -= 1
                    progressed = True
            if not progressed:
                return None
        # Memory is reserved proportionally to the core share on each worker.
        mem = {}
        for idx, cores in bindings.items():
            mem[idx] = -(-memory_mb * cores // vcores)  # ceil
            free_v, free_m = self._free_on(idx)
            if mem[idx] > free_m:
                return None
        return {idx: (cores, mem[idx]) for idx, cores in bindings.items()}

    # -- allocator / monitor loops -----------------------------------------

    def _allocator_loop(self):
        while True:
            with self._cond:
                if self._stopping:
                    return
                progressed = self._allocate_pending()
                if not progressed:
                    self._cond.wait(timeout=0.05)

    def _allocate_pending(self) -> bool:
        """Grant the head of each FIFO queue if it fits.  Cond must be held."""
        progressed = False
        if self._pending_apps:
            app = self._apps[self._pending_apps[0]]
            if self.flavor == ClusterFlavor.YARN_LIKE:
                idx = self._first_fit(app.am_spec["vcores"], app.am_spec["memory_mb"])
                if idx is not None:
                    c = self._allocate(app, "AM", app.am_spec["vcores"], app.am_spec["memory_mb"], idx)
                    self._pending_apps.popleft()
                    self._task_order.append(app.app_id)
                    app.state = "AM_ALLOCATED"
                    self._record("APP_STATE", app)
                    self._log(app, f"ALLOCATE {c.container_id} AM node={self.nodes[idx].node_id} "
                                   f"vcores={c.vcores} memory_mb={c.memory_mb}")
                    self._start_am(app)
                    progressed = True
            else:
                plan = self._spread_round_robin(app.task_spec["vcores"], app.task_spec["memory_mb"])
                if plan is not None:
                    for idx, (cores, mem) in sorted(plan.items()):
                        c = self._allocate(app, "TASK", cores, mem, idx)
                        self._log(app, f"ALLOCATE {c.container_id} TASK node={self.nodes[idx].node_id} "
                                       f"vcores={cores} memory_mb={mem}")
                    self._pending_apps.popleft()
                    self._start_task(app)
                    progressed = True
        while self._task_order and self._apps[self._task_order[0]].state not in ("AM_ALLOCATED",):
            # Killed or failed before the task phase; drop from the order.
            self._task_order.popleft()
            progressed = True
        if self._task_order:
            app = self._apps[self._task_order[0]]
            if app.task_requested:
                task = app.task_spec
                idx = self._first_fit(task["vcores"], task["memory_mb"])
                if idx is not None:
                    c = self._allocate(app, "TASK", task["vcores"], task["memory_mb"], idx)
                    self._task_order.popleft()
                    self._log(app, f"ALLOCATE {c.container_id} TASK node={self.nodes[idx].node_id} "
                                   f"vcores={c.vcores} memory_mb={c.memory_mb}")
                    self._start_task(app)
                    progressed = True
        return progressed

    def _start_am(self, app: _App) -> None:
        try:
            app.am_proc = subprocess.Popen(
                [sys.executable, "-m", "pilotlet.minicluster", "am",
                 "--rm-url", self.endpoint, "--app-id", app.app_id],
                stdout=subprocess.DEVNULL,
                stderr=subprocess.DEVNULL,
                start_new_session=True,
            )
        except OSError as exc:
            logger.error("cannot start AM for %s: %s", app.app_id, exc)
            self._release_all(app)
            app.state = "FAILED"
            self._record("APP_STATE", app)

    def _start_task(self, app: _App) -> None:
        task = app.task_spec
        env = dict(os.environ)
        env.update(task.get("env") or {})
        cwd = task.get("cwd") or str(self.scratch / "apps" / app.app_id)
        Path(cwd).mkdir(parents=True, exist_ok=True)
        try:
            if task.get("stdout_path"):
                app.stdout_fh = open(task["stdout_path"], "ab")
            if task.get("stderr_path"):
                app.stderr_fh = open(task["stderr_path"], "ab")
            app.task_proc = subprocess.Popen(
                list(task["command"]),
                cwd=cwd,
                env=env,
                stdout=app.stdout_fh or subprocess.DEVNULL,
                stderr=app.stderr_fh or subprocess.DEVNULL,
                start_new_session=True,
            )
            app.state = "RUNNING"
            self._record("APP_STATE", app)
        except OSError as exc:
            logger.warning("task spawn failed for %s: %s", app.app_id, exc)
            app.task_exit = 127
            app.close_streams()
            self._finalize(app)

    def _finalize(self, app: _App) -> None:
        """Release whatever is still held, then write the final log line. Cond held."""
        self._release_all(app)
        for c in app.task_containers:
            self._log(app, f"RELEASE {c.container_id} TASK")
        if app.am_container is not None:
            self._log(app, f"RELEASE {app.am_container.container_id} AM")
        code = app.task_exit if app.task_exit is not None else 1
        self._log(app, f"EXIT {code}")
        app.state = "FINISHED" if code == 0 else "FAILED"
        self._record("APP_STATE", app)
        self._cond.notify_all()

    def _monitor_loop(self):
        while True:
            with self._cond:
                if self._stopping:
                    return
                for app in list(self._apps.values()):
                    if app.state in ("FINISHED", "FAILED", "KILLED"):
                        continue
                    if app.task_proc is not None and app.task_proc.poll() is not None and app.task_exit is None:
                        app.task_exit = app.task_proc.returncode
                        app.close_streams()
                        _kill_proc(app.am_proc, grace_s=0.2)
                        self._finalize(app)
                        continue
                    if (
                        app.am_proc is not None
                        and app.am_proc.poll() is not None
                        and app.task_proc is None
                    ):
                        # AM died before ever getting its task container.
                        app.task_exit = 1
                        if app.app_id in self._task_order:
                            self._task_order.remove(app.app_id)
                        self._finalize(app)
            time.sleep(0.05)


# --------------------------------------------------------------------------
# HTTP plumbing
# --------------------------------------------------------------------------

def _make_handler(cluster: MiniCluster):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            pass

        def _reply(self, code: int, payload: dict):
            body = json.dumps(payload).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            return json.loads(self.rfile.read(length).decode("utf-8"))

        def _route(self, method: str):
            parts = [p for p in self.path.split("/") if p]
            try:
                if method == "GET" and parts == ["health"]:
                    self._reply(200, {"status": "ok", "flavor": cluster.flavor.value,
                                      "nodeManagers": cluster.live_node_managers()})
                elif method == "GET" and parts == ["ws", "v1", "cluster", "metrics"]:
                    self._reply(200, cluster.metrics())
                elif method == "GET" and parts == ["ws", "v1", "cluster", "journal"]:
                    self._reply(200, {"journal": cluster.journal_entries()})
                elif method == "GET" and parts == ["ws", "v1", "cluster", "apps"]:
                    self._reply(200, {"apps": cluster.list_apps()})
                elif method == "POST" and parts == ["ws", "v1", "cluster", "apps"]:
                    app_id = cluster.submit_app(self._body())
                    self._reply(201, {"appId": app_id})
                elif method == "GET" and len(parts) == 5 and parts[:4] == ["ws", "v1", "cluster", "apps"]:
                    self._reply(200, cluster.get_app(parts[4]))
                elif method == "PUT" and len(parts) == 6 and parts[5] == "state":
                    body = self._body()
                    if body.get("state") != "KILLED":
                        self._reply(400, {"error": "VALIDATION", "message": "only state=KILLED is supported"})
                        return
                    self._reply(200, {"state": cluster.kill_app(parts[4])})
                elif method == "POST" and len(parts) == 6 and parts[5] == "allocate":
                    cluster.request_task_container(parts[4])
                    self._reply(200, {"ok": True})
                elif method == "POST" and parts == ["shutdown"]:
                    self._reply(200, {"ok": True})
                    threading.Thread(target=cluster.stop, daemon=True).start()
                else:
                    self._reply(404, {"error": "NOT_FOUND", "message": self.path})
            except UnknownApp as exc:
                self._reply(404, {"error": exc.code, "message": str(exc)})
            except (ImpossibleRequest, ValidationError) as exc:
                self._reply(400, {"error": exc.code, "message": str(exc)})
            except Exception as exc:  # noqa: BLE001 - surface as 500, keep serving
                logger.exception("handler error")
                self._reply(500, {"error": "INTERNAL", "message": str(exc)})

        def do_GET(self):
            self._route("GET")

        def do_POST(self):
            self._route("POST")

        def do_PUT(self):
            self._route("PUT")

    return Handler


class RMClient:
    """Thin JSON-over-HTTP client for the mini-cluster endpoint."""

    def __init__(self, base_url: str, timeout_s: float = 5.0):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s

    def _request(self, method: str, path: str, payload: Optional[dict] = None) -> dict:
        data = json.dumps(payload).encode("utf-8") if payload is not None else None
        req = urllib.request.Request(self.base_url + path, data=data, method=method)
        if data is not None:
            req.add_header("Content-Type", "application/json")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            try:
                doc = json.loads(exc.read().decode("utf-8"))
            except Exception:  # noqa: BLE001
                doc = {}
            code = doc.get("error", "")
            message = doc.get("message", str(exc))
            if code == "UNKNOWN_APP":
                raise UnknownApp(message) from exc
            if code == "IMPOSSIBLE_REQUEST":
                raise ImpossibleRequest(message) from exc
            if code == "VALIDATION":
                raise ValidationError([message]) from exc
            raise Unreachable(f"{method} {path}: {message}") from exc
        except (urllib.error.URLError, ConnectionError, TimeoutError, OSError) as exc:
            raise Unreachable(f"{method} {self.base_url}{path}: {exc}") from exc

    def health(self) -> dict:
        return self._request("GET", "/health")

    def metrics(self) -> dict:
        return self._request("GET", "/ws/v1/cluster/metrics")

    def journal(self) -> list:
        return self._request("GET", "/ws/v1/cluster/journal")["journal"]

    def list_apps(self) -> list:
        return self._request("GET", "/ws/v1/cluster/apps")["apps"]

    def submit_app(self, spec: Mapping) -> str:
        return self._request("POST", "/ws/v1/cluster/apps", dict(spec))["appId"]

    def get_app(self, app_id: str) -> dict:
        return self._request("GET", f"/ws/v1/cluster/apps/{app_id}")

    def allocate_task(self, app_id: str) -> None:
        self._request("POST", f"/ws/v1/cluster/apps/{app_id}/allocate")

    def kill_app(self, app_id: str) -> str:
        return self._request("PUT", f"/ws/v1/cluster/apps/{app_id}/state", {"state": "KILLED"})["state"]

    def shutdown(self) -> None:
        self._request("POST", "/shutdown")

    def wait_app(self, app_id: str, timeout_s: float = 60.0, poll_s: float = 0.05) -> dict:
        deadline = time.monotonic() + timeout_s
        while True:
            app = self.get_app(app_id)
            if app["state"] in ("FINISHED", "FAILED", "KILLED"):
                return app
            if time.monotonic() >= deadline:
                return app
            time.sleep(poll_s)


def parse_exit_code(log_path) -> Optional[int]:
    """Exit code from the final ``EXIT <code>`` line of an application log."""
    try:
        text = Path(log_path).read_text(encoding="utf-8")
    except OSError:
        return None
    for line in reversed(text.splitlines()):
        if line.startswith("EXIT "):
            try:
                return int(line.split(" ", 1)[1])
            except ValueError:
                return None
    return None


# --------------------------------------------------------------------------
# Subprocess entry points: rm / nm / am
# --------------------------------------------------------------------------

def _run_rm(args) -> int:
    conf = parse_cluster_conf(args.config)
    cluster = MiniCluster(
        flavor=conf["flavor"],
        nodes=conf["nodes"],
        scratch=args.scratch,
        port=args.port if args.port is not None else conf["rm_port"],
        am_vcores=args.am_vcores,
        am_memory_mb=args.am_memory_mb,
    )
    endpoint = cluster.start()
    endpoint_file = Path(args.endpoint_file or (Path(args.scratch) / "rm.endpoint"))
    endpoint_file.parent.mkdir(parents=True, exist_ok=True)
    endpoint_file.write_text(endpoint + "\n", encoding="ascii")

    stop_event = threading.Event()

    def _sig(_signum, _frame):
        stop_event.set()

    signal.signal(signal.SIGTERM, _sig)
    signal.signal(signal.SIGINT, _sig)
    while not stop_event.is_set() and not cluster._stopping:
        stop_event.wait(0.2)
    cluster.stop()
    return 0


def _run_nm(args) -> int:
    hb = Path(args.scratch) / f"{args.node_id}.hb"
    stop_event = threading.Event()

    def _sig(_signum, _frame):
        stop_event.set()

    signal.signal(signal.SIGTERM, _sig)
    signal.signal(signal.SIGINT, _sig)
    while not stop_event.is_set():
        try:
            hb.write_text(str(time.time()), encoding="ascii")
        except OSError:
            pass
        stop_event.wait(0.5)
    return 0


def _run_am(args) -> int:
    client = RMClient(args.rm_url, timeout_s=5.0)
    for attempt in range(3):
        try:
            client.allocate_task(args.app_id)
            break
        except Unreachable:
            if attempt == 2:
                return 1
            time.sleep(0.2)
    # Stay resident until the resource manager reaps us.
    stop_event = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop_event.set())
    while not stop_event.is_set():
        stop_event.wait(0.2)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="pilotlet-minicluster")
    sub = parser.add_subparsers(dest="role", required=True)

    rm = sub.add_parser("rm", help="run the resource manager / master daemon")
    rm.add_argument("--config", required=True)
    rm.add_argument("--scratch", required=True)
    rm.add_argument("--port", type=int, default=None)
    rm.add_argument("--endpoint-file", default=None)
    rm.add_argument("--am-vcores", type=int, default=DEFAULT_AM_VCORES)
    rm.add_argument("--am-memory-mb", type=int, default=DEFAULT_AM_MEMORY_MB)

    nm = sub.add_parser("nm", help="run one node manager daemon")
    nm.add_argument("--node-id", required=True)
    nm.add_argument("--scratch", required=True)

    am = sub.add_parser("am", help="run one application master")
    am.add_argument("--rm-url", required=True)
    am.add_argument("--app-id", required=True)

    args = parser.parse_args(argv)
    if args.role == "rm":
        return _run_rm(args)
    if args.role == "nm":
        return _run_nm(args)
    return _run_am(args)


if __name__ == "__main__":
    sys.exit(main())
