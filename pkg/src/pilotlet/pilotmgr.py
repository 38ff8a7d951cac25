"""Client-side managers: submit pilots (placeholder jobs wrapping the agent),
dispatch compute units to live pilots, wait on results, cancel cascades.

The manager never talks to a mini-cluster directly; everything cluster-side
is the agent's business.  Communication happens exclusively through the
shared store and the job-submission layer.
"""

from __future__ import annotations

import logging
import sys
import threading
import time
import uuid
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

from .core import (
    ComputeUnitDescription,
    PilotDescription,
    PilotState,
    UnitState,
    validate_pilot_description,
    validate_unit_description,
)
from .errors import (
    AlreadyTerminal,
    IllegalTransition,
    NoActivePilot,
    PilotletError,
    SubmitFailed,
    ValidationError,
    WaitTimeout,
)
from .saga import Adaptor, JobDescription, JobHandle, JobState, JOB_TERMINAL
from .statestore import BaseStore, MemoryStore, PilotRecord, UnitRecord

logger = logging.getLogger(__name__)

HEARTBEAT_STALE_S = 10.0  # five missed 2s heartbeats
_CANCEL_GRACE_S = 4.0


def _new_id(prefix: str) -> str:
    return f"{prefix}-{uuid.uuid4().hex[:10]}"


class UnitHandle:
    """Read-only view of one unit's record in the store."""

    def __init__(self, store: BaseStore, unit_id: str):
        self._store = store
        self.unit_id = unit_id

    @property
    def record(self) -> UnitRecord:
        return self._store.get_unit(self.unit_id)

    @property
    def state(self) -> UnitState:
        return self.record.state

    @property
    def exit_code(self) -> Optional[int]:
        return self.record.exit_code

    @property
    def stdout_tail(self) -> Optional[str]:
        return self.record.stdout_tail

    @property
    def stderr_tail(self) -> Optional[str]:
        return self.record.stderr_tail


class PilotHandle:
    def __init__(self, manager: "PilotManager", pilot_id: str, job: JobHandle):
        self._manager = manager
        self.pilot_id = pilot_id
        self.job = job

    @property
    def record(self) -> PilotRecord:
        return self._manager.store.get_pilot(self.pilot_id)

    @property
    def state(self) -> PilotState:
        return self.record.state

    def wait_state(self, states: Iterable[PilotState], timeout_s: float = 30.0) -> PilotState:
        wanted = set(states)
        deadline = time.monotonic() + timeout_s
        while True:
            current = self.state
            if current in wanted:
                return current
            if time.monotonic() >= deadline:
                raise WaitTimeout({self.pilot_id: current.value},
                                  f"pilot {self.pilot_id} still {current.value} after {timeout_s}s")
            time.sleep(0.1)


class PilotManager:
    """Owns pilot lifecycles and unit dispatch for one store."""

    def __init__(self, store: BaseStore, adaptors: Union[Adaptor, Dict[str, Adaptor]],
                 agent_poll_s: float = 0.5, agent_boot_delay_s: float = 0.0):
        self.store = store
        if isinstance(adaptors, Adaptor):
            adaptors = {adaptors.name: adaptors}
        self.adaptors = dict(adaptors)
        self.agent_poll_s = agent_poll_s
        self.agent_boot_delay_s = agent_boot_delay_s
        self._pilots: Dict[str, PilotHandle] = {}
        self._lock = threading.Lock()
        self._watcher: Optional[threading.Thread] = None
        self._stop = threading.Event()

    # -- pilots -----------------------------------------------------------

    def submit_pilot(self, description: PilotDescription) -> PilotHandle:
        validate_pilot_description(description)
        adaptor = self.adaptors.get(description.resource_name)
        if adaptor is None:
            raise SubmitFailed(
                f"no adaptor named {description.resource_name!r} "
                f"(have: {', '.join(sorted(self.adaptors)) or 'none'})"
            )
        if isinstance(self.store, MemoryStore):
            raise SubmitFailed("agent processes cannot share an in-memory store; use a file store")

        pilot_id = _new_id("p")
        sandbox = Path(description.sandbox_root).absolute()
        description = replace(description, sandbox_root=str(sandbox))
        self.store.register_pilot(PilotRecord(pilot_id=pilot_id, description=description))
        self.store.update_pilot(pilot_id, PilotState.PENDING_LAUNCH, timing_event="pilot_submit")

        agent_args = [
            "-m", "pilotlet.agent",
            "--pilot-id", pilot_id,
            "--store", self.store.url,
            "--flavor", description.cluster_flavor.value,
            "--mode", description.cluster_mode.value,
            "--sandbox", str(sandbox),
            "--poll-s", str(self.agent_poll_s),
        ]
        if description.connect_url:
            agent_args += ["--connect-url", description.connect_url]
        if self.agent_boot_delay_s > 0:
            agent_args += ["--boot-delay-s", str(self.agent_boot_delay_s)]
        pilot_dir = sandbox / pilot_id
        job_desc = JobDescription(
            executable=sys.executable,
            arguments=tuple(agent_args),
            environment={"PILOTLET_MEM_MB_PER_NODE": str(description.memory_mb_per_node)},
            working_directory=str(pilot_dir),
            total_cores=description.cores,
            wall_time_s=description.runtime_s + 30,  # grace for agent shutdown
            queue=description.queue,
            stdout_path=str(pilot_dir / "agent.out"),
            stderr_path=str(pilot_dir / "agent.err"),
        )
        self.store.update_pilot(pilot_id, PilotState.LAUNCHING)
        try:
            job = adaptor.submit(job_desc)
        except SubmitFailed:
            self.store.update_pilot(pilot_id, PilotState.FAILED)
            raise
        handle = PilotHandle(self, pilot_id, job)
        with self._lock:
            self._pilots[pilot_id] = handle
            if self._watcher is None:
                self._watcher = threading.Thread(target=self._watch_loop, name="pilotmgr-watch", daemon=True)
                self._watcher.start()
        return handle

    def _watch_loop(self):
        """Mirror saga job failures and stale heartbeats into pilot state."""
        while not self._stop.is_set():
            with self._lock:
                handles = list(self._pilots.values())
            for handle in handles:
                try:
                    record = handle.record
                    if record.state in (PilotState.DONE, PilotState.FAILED, PilotState.CANCELED):
                        continue
                    adaptor = self.adaptors.get(record.description.resource_name)
                    job_state = adaptor.state(handle.job) if adaptor else None
                    if job_state == JobState.FAILED:
                        self.store.update_pilot(handle.pilot_id, PilotState.FAILED)
                        continue
                    if job_state == JobState.DONE and record.state != PilotState.ACTIVE:
                        # Agent exited before or without serving; DONE only makes
                        # sense from ACTIVE, otherwise treat as failure to serve.
                        self.store.update_pilot(handle.pilot_id, PilotState.FAILED)
                        continue
                    hb = record.meta.get("heartbeat_monotonic")
                    if record.state == PilotState.ACTIVE and hb is not None:
                        if time.monotonic() - hb > HEARTBEAT_STALE_S:
                            logger.warning("pilot %s heartbeat stale, marking FAILED", handle.pilot_id)
                            self.store.update_pilot(handle.pilot_id, PilotState.FAILED)
                except (IllegalTransition, PilotletError) as exc:
                    logger.debug("watch pass on %s: %s", handle.pilot_id, exc)
            self._stop.wait(0.5)

    # -- units ------------------------------------------------------------

    def submit_units(
        self,
        pilots: Union[PilotHandle, Sequence[PilotHandle]],
        descriptions: Sequence[ComputeUnitDescription],
    ) -> List[UnitHandle]:
        if isinstance(pilots, PilotHandle):
            pilots = [pilots]
        pilots = list(pilots)
        if not pilots:
            raise NoActivePilot("no pilots given")

        targets = []
        for handle in pilots:
            record = handle.record
            if record.state not in (PilotState.DONE, PilotState.FAILED, PilotState.CANCELED):
                targets.append((handle, record))
        if not targets:
            raise NoActivePilot("all targeted pilots are terminal")

        # All-or-nothing validation, including the can-it-ever-fit check.
        problems: list = []
        for i, desc in enumerate(descriptions):
            try:
                validate_unit_description(desc)
            except ValidationError as exc:
                problems.extend(f"unit[{i}]: {v}" for v in exc.violations)
                continue
            _, record = targets[i % len(targets)]
            if desc.cores > record.description.cores:
                problems.append(
                    f"unit[{i}]: needs {desc.cores} cores but pilot "
                    f"{record.pilot_id} has only {record.description.cores}"
                )
        if problems:
            raise ValidationError(problems)

        per_pilot: Dict[str, list] = {}
        ordered_ids: List[str] = []
        for i, desc in enumerate(descriptions):
            handle, _ = targets[i % len(targets)]
            unit_id = _new_id("u")
            ordered_ids.append(unit_id)
            per_pilot.setdefault(handle.pilot_id, []).append(
                UnitRecord(unit_id=unit_id, pilot_id=handle.pilot_id, description=desc)
            )
        for pilot_id, records in per_pilot.items():
            self.store.enqueue_units(pilot_id, records)
        return [UnitHandle(self.store, uid) for uid in ordered_ids]

    def wait_units(
        self,
        handles: Sequence[UnitHandle],
        timeout_s: Optional[float] = None,
    ) -> Dict[str, UnitState]:
        deadline = None if timeout_s is None else time.monotonic() + timeout_s
        terminal = {UnitState.DONE, UnitState.FAILED, UnitState.CANCELED}
        while True:
            states = {h.unit_id: h.state for h in handles}
            if all(s in terminal for s in states.values()):
                return states
            if deadline is not None and time.monotonic() >= deadline:
                raise WaitTimeout({k: v.value for k, v in states.items()})
            time.sleep(0.1)

    # -- cancellation -------------------------------------------------------

    def cancel_pilot(self, handle: PilotHandle) -> PilotState:
        """Cancel the pilot and cascade to its units and any spawned cluster.

        Idempotent: canceling a terminal pilot only re-runs the unit sweep.
        """
        try:
            record = handle.record
        except PilotletError:
            raise
        if record.state not in (PilotState.DONE, PilotState.FAILED, PilotState.CANCELED):
            try:
                self.store.update_pilot(handle.pilot_id, PilotState.CANCELED)
            except IllegalTransition:
                pass
        self._cancel_pending_units(handle.pilot_id)

        # Give the agent a moment to notice and wind down by itself before the
        # submission layer terminates it.
        adaptor = self.adaptors.get(record.description.resource_name)
        if adaptor is not None:
            deadline = time.monotonic() + _CANCEL_GRACE_S
            while time.monotonic() < deadline:
                if adaptor.state(handle.job) in JOB_TERMINAL:
                    break
                time.sleep(0.1)
            else:
                try:
                    adaptor.cancel(handle.job)
                except AlreadyTerminal:
                    pass
                adaptor.wait(handle.job, timeout_s=5.0)

        self._cancel_pending_units(handle.pilot_id, include_running=True)
        return self.store.get_pilot(handle.pilot_id).state

    def _cancel_pending_units(self, pilot_id: str, include_running: bool = False):
        try:
            units = self.store.list_units(pilot_id)
        except PilotletError:
            return
        terminal = {UnitState.DONE, UnitState.FAILED, UnitState.CANCELED}
        for rec in units:
            if rec.state in terminal:
                continue
            if not include_running and rec.state not in (UnitState.PENDING,):
                continue
            try:
                self.store.update_unit(rec.unit_id, UnitState.CANCELED)
            except (IllegalTransition, PilotletError):
                pass

    def close(self):
        self._stop.set()
        if self._watcher is not None:
            self._watcher.join(timeout=2)
