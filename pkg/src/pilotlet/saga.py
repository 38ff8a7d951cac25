"""Uniform job submission over heterogeneous resource managers.

Two adaptors ship: ``local`` runs the job as a direct child process of the
current host, ``simbatch`` emulates a batch system with a configurable node
inventory and queue wait.  Both honor one node-discovery contract: a nodefile
(one hostname per line, repeated per granted core) plus the env vars
PILOTLET_NODEFILE, PILOTLET_CORES_PER_NODE and PILOTLET_MEM_MB_PER_NODE.
Real SLURM/PBS/SGE adaptors would slot in behind the same interface.
"""

from __future__ import annotations

import logging
import os
import random
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .core import TimingRecord
from .errors import AlreadyTerminal, SubmitFailed, UnknownJob, ValidationError

logger = logging.getLogger(__name__)

NODEFILE_VAR = "PILOTLET_NODEFILE"
CORES_VAR = "PILOTLET_CORES_PER_NODE"
MEM_VAR = "PILOTLET_MEM_MB_PER_NODE"

_TERM_GRACE_S = 3.0


class JobState(str, Enum):
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


JOB_TERMINAL = frozenset({JobState.DONE, JobState.FAILED, JobState.CANCELED})


@dataclass(frozen=True)
class JobDescription:
    executable: str
    arguments: tuple = ()
    environment: Mapping[str, str] = field(default_factory=dict)
    working_directory: Optional[str] = None
    total_cores: int = 1
    wall_time_s: int = 3600
    queue: Optional[str] = None
    stdout_path: Optional[str] = None
    stderr_path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "arguments", tuple(str(a) for a in self.arguments))
        object.__setattr__(self, "environment", dict(self.environment))

    def violations(self) -> list:
        out = []
        if not self.executable:
            out.append("executable must be non-empty")
        if self.total_cores < 1:
            out.append(f"total_cores must be >= 1 (got {self.total_cores})")
        if self.wall_time_s < 1:
            out.append(f"wall_time_s must be >= 1 (got {self.wall_time_s})")
        return out


@dataclass(frozen=True)
class JobHandle:
    job_id: str
    adaptor_name: str
    submit_time: TimingRecord


class _Job:
    """Adaptor-internal bookkeeping for one submitted job."""

    def __init__(self, job_id: str, desc: JobDescription):
        self.job_id = job_id
        self.desc = desc
        self.state = JobState.QUEUED
        self.proc: Optional[subprocess.Popen] = None
        self.started_monotonic: Optional[float] = None
        self.ready_monotonic = 0.0
        self.allocated: list = []  # (node_index, cores) grants, simbatch only
        self.stdout_fh = None
        self.stderr_fh = None

    def close_streams(self):
        for fh in (self.stdout_fh, self.stderr_fh):
            if fh is not None:
                try:
                    fh.close()
                except OSError:
                    pass
        self.stdout_fh = self.stderr_fh = None


def _advance(job: _Job, new: JobState) -> None:
    # States only move forward along QUEUED < RUNNING < terminal.
    order = {JobState.QUEUED: 0, JobState.RUNNING: 1}
    if job.state in JOB_TERMINAL:
        return
    if new in JOB_TERMINAL or order[new] >= order[job.state]:
        job.state = new


def _terminate_process(proc: subprocess.Popen) -> None:
    """SIGTERM the job's process group, escalating to SIGKILL after a grace period."""
    try:
        pgid = os.getpgid(proc.pid)
    except (ProcessLookupError, PermissionError):
        return

    def _kill():
        try:
            os.killpg(pgid, signal.SIGTERM)
        except (ProcessLookupError, PermissionError):
            return
        deadline = time.monotonic() + _TERM_GRACE_S
        while time.monotonic() < deadline:
            if proc.poll() is not None:
                return
            time.sleep(0.05)
        try:
            os.killpg(pgid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass

    threading.Thread(target=_kill, daemon=True).start()


class Adaptor:
    """Interface every job-submission backend implements."""

    name = "abstract"

    def submit(self, desc: JobDescription) -> JobHandle:
        raise NotImplementedError

    def state(self, handle: JobHandle) -> JobState:
        raise NotImplementedError

    def cancel(self, handle: JobHandle) -> JobState:
        raise NotImplementedError

    def wait(self, handle: JobHandle, timeout_s: Optional[float] = None) -> JobState:
        deadline = None if timeout_s is None else time.monotonic() + timeout_s
        while True:
            st = self.state(handle)
            if st in JOB_TERMINAL:
                return st
            if deadline is not None and time.monotonic() >= deadline:
                return st
            time.sleep(0.05)


def _spawn(job: _Job, hostnames: Sequence[str], cores_per_node: int, memory_mb: int, scratch: Path) -> None:
    """Write the nodefile, inject discovery env, and start the child process."""
    d = job.desc
    nodefile = scratch / f"nodefile.{job.job_id}"
    nodefile.write_text("".join(f"{h}\n" for h in hostnames), encoding="ascii")

    env = dict(os.environ)
    env.update(d.environment)
    # Caller-supplied values win over adaptor defaults, but values inherited
    # from the adaptor's own environment never leak through.
    for var, value in ((NODEFILE_VAR, str(nodefile)), (CORES_VAR, str(cores_per_node)), (MEM_VAR, str(memory_mb))):
        if var not in d.environment:
            env[var] = value

    cwd = d.working_directory or str(scratch)
    Path(cwd).mkdir(parents=True, exist_ok=True)
    if d.stdout_path:
        Path(d.stdout_path).parent.mkdir(parents=True, exist_ok=True)
        job.stdout_fh = open(d.stdout_path, "ab")
    if d.stderr_path:
        Path(d.stderr_path).parent.mkdir(parents=True, exist_ok=True)
        job.stderr_fh = open(d.stderr_path, "ab")
    try:
        job.proc = subprocess.Popen(
            [d.executable, *d.arguments],
            cwd=cwd,
            env=env,
            stdout=job.stdout_fh or subprocess.DEVNULL,
            stderr=job.stderr_fh or subprocess.DEVNULL,
            start_new_session=True,
        )
    except OSError as exc:
        logger.warning("job %s failed to start: %s", job.job_id, exc)
        job.close_streams()
        _advance(job, JobState.FAILED)
        return
    job.started_monotonic = time.monotonic()
    _advance(job, JobState.RUNNING)


def _reap(job: _Job) -> None:
    """Fold a finished or overtime process into the job state."""
    if job.proc is None or job.state in JOB_TERMINAL:
        return
    rc = job.proc.poll()
    if rc is not None:
        job.close_streams()
        _advance(job, JobState.DONE if rc == 0 else JobState.FAILED)
        return
    if job.started_monotonic is not None and time.monotonic() - job.started_monotonic > job.desc.wall_time_s:
        logger.warning("job %s exceeded wall time %ss, killing", job.job_id, job.desc.wall_time_s)
        _terminate_process(job.proc)
        _advance(job, JobState.FAILED)
        job.close_streams()


class LocalAdaptor(Adaptor):
    """Run jobs as immediate child processes of this host."""

    name = "local"

    def __init__(self, memory_mb_per_node: int = 32768, hostname: str = "localhost"):
        self.memory_mb_per_node = memory_mb_per_node
        self.hostname = hostname
        self._jobs: dict = {}
        self._lock = threading.RLock()
        self._seq = 0
        self._scratch = Path(tempfile.mkdtemp(prefix="pilotlet-local-"))

    def submit(self, desc: JobDescription) -> JobHandle:
        violations = desc.violations()
        if violations:
            raise SubmitFailed("; ".join(violations))
        with self._lock:
            self._seq += 1
            job = _Job(f"local-{self._seq:05d}", desc)
            self._jobs[job.job_id] = job
            # Single local node exposing all requested cores.
            _spawn(job, [self.hostname] * desc.total_cores, desc.total_cores,
                   self.memory_mb_per_node, self._scratch)
        return JobHandle(job.job_id, self.name, TimingRecord.now(job.job_id, "job_submit"))

    def _get(self, handle: JobHandle) -> _Job:
        job = self._jobs.get(handle.job_id)
        if job is None:
            raise UnknownJob(handle.job_id)
        return job

    def state(self, handle: JobHandle) -> JobState:
        with self._lock:
            job = self._get(handle)
            _reap(job)
            return job.state

    def cancel(self, handle: JobHandle) -> JobState:
        with self._lock:
            job = self._get(handle)
            _reap(job)
            if job.state == JobState.CANCELED:
                return job.state
            if job.state in JOB_TERMINAL:
                raise AlreadyTerminal(f"job {job.job_id} is {job.state.value}")
            if job.proc is not None:
                _terminate_process(job.proc)
            job.close_streams()
            _advance(job, JobState.CANCELED)
            return job.state


class SimBatchAdaptor(Adaptor):
    """In-process batch system: N nodes x C cores, FIFO queue, sampled queue wait.

    Nodes are directories plus env labels on the local host; hostnames are
    ``n0`` .. ``n{N-1}``.
    """

    name = "simbatch"

    def __init__(
        self,
        node_count: int = 2,
        cores_per_node: int = 8,
        memory_mb_per_node: int = 16384,
        queue_wait_s=0.0,
        seed: Optional[int] = None,
    ):
        if node_count < 1 or cores_per_node < 1:
            raise ValidationError(["simbatch inventory must have >= 1 node and >= 1 core per node"])
        self.node_count = node_count
        self.cores_per_node = cores_per_node
        self.memory_mb_per_node = memory_mb_per_node
        self.queue_wait_s = queue_wait_s
        self._rng = random.Random(seed)
        self._jobs: dict = {}
        self._queue: list = []
        self._free = [cores_per_node] * node_count
        self._lock = threading.RLock()
        self._seq = 0
        self._scratch = Path(tempfile.mkdtemp(prefix="pilotlet-simbatch-"))
        for i in range(node_count):
            (self._scratch / "nodes" / f"n{i}").mkdir(parents=True, exist_ok=True)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="simbatch-sched", daemon=True)
        self._thread.start()

    def close(self):
        self._stop.set()
        self._thread.join(timeout=2)

    def _sample_wait(self) -> float:
        if isinstance(self.queue_wait_s, (tuple, list)):
            lo, hi = self.queue_wait_s
            return self._rng.uniform(lo, hi)
        return float(self.queue_wait_s)

    def submit(self, desc: JobDescription) -> JobHandle:
        violations = desc.violations()
        if desc.total_cores > self.node_count * self.cores_per_node:
            violations.append(
                f"total_cores {desc.total_cores} exceeds inventory "
                f"{self.node_count}x{self.cores_per_node}"
            )
        exe = desc.executable
        if violations:
            raise SubmitFailed("; ".join(violations))
        if not (os.path.isabs(exe) and os.access(exe, os.X_OK)) and shutil.which(exe) is None:
            raise SubmitFailed(f"executable not found: {exe}")
        with self._lock:
            self._seq += 1
            job = _Job(f"simbatch-{self._seq:05d}", desc)
            job.ready_monotonic = time.monotonic() + self._sample_wait()
            self._jobs[job.job_id] = job
            self._queue.append(job)
        return JobHandle(job.job_id, self.name, TimingRecord.now(job.job_id, "job_submit"))

    def _try_start(self, job: _Job) -> bool:
        need = job.desc.total_cores
        grants = []
        for idx in range(self.node_count):
            if need <= 0:
                break
            take = min(self._free[idx], need)
            if take > 0:
                grants.append((idx, take))
                need -= take
        if need > 0:
            return False
        hostnames = []
        for idx, take in grants:
            self._free[idx] -= take
            hostnames.extend([f"n{idx}"] * take)
        job.allocated = grants
        _spawn(job, hostnames, self.cores_per_node, self.memory_mb_per_node, self._scratch)
        if job.state == JobState.FAILED:  # start failed; give the cores back
            self._release(job)
        return True

    def _release(self, job: _Job) -> None:
        for idx, take in job.allocated:
            self._free[idx] += take
        job.allocated = []

    def _loop(self):
        while not self._stop.is_set():
            with self._lock:
                now = time.monotonic()
                for job in list(self._queue):
                    if job.state != JobState.QUEUED:
                        self._queue.remove(job)
                        continue
                    if job.ready_monotonic > now:
                        continue
                    if self._try_start(job):
                        self._queue.remove(job)
                for job in self._jobs.values():
                    if job.state == JobState.RUNNING:
                        _reap(job)
                        if job.state in JOB_TERMINAL:
                            self._release(job)
            self._stop.wait(0.05)

    def _get(self, handle: JobHandle) -> _Job:
        job = self._jobs.get(handle.job_id)
        if job is None:
            raise UnknownJob(handle.job_id)
        return job

    def state(self, handle: JobHandle) -> JobState:
        with self._lock:
            return self._get(handle).state

    def cancel(self, handle: JobHandle) -> JobState:
        with self._lock:
            job = self._get(handle)
            if job.state == JobState.CANCELED:
                return job.state
            if job.state in JOB_TERMINAL:
                raise AlreadyTerminal(f"job {job.job_id} is {job.state.value}")
            if job.state == JobState.QUEUED:
                if job in self._queue:
                    self._queue.remove(job)
                _advance(job, JobState.CANCELED)
                return job.state
            if job.proc is not None:
                _terminate_process(job.proc)
            self._release(job)
            job.close_streams()
            _advance(job, JobState.CANCELED)
            return job.state
