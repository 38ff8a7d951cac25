"""Shared coordination store between the client managers and resource agents.

Two backends with identical observable behavior:

* ``MemoryStore`` — process-local, for tests and single-process runs.
* ``FileStore``  — a directory of records plus an append-only journal with
  advisory file locking, so client and agent can be separate OS processes
  sharing a filesystem.

Every mutation is atomic and appends state changes to a totally ordered
journal; ``watch`` replays that journal from a cursor so pollers never skip
or duplicate an event.
"""

from __future__ import annotations

import fcntl
import json
import os
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from .core import (
    ClusterFlavor,
    ComputeUnitDescription,
    PilotDescription,
    PilotState,
    TimingRecord,
    UnitState,
    resolve_launch_method,
    transition,
)
from .errors import (
    DuplicateId,
    UnknownPilot,
    UnknownUnit,
    ValidationError,
)

TAIL_LIMIT_BYTES = 64 * 1024

# Patch fields the two record kinds accept via update_*().
_UNIT_PATCH_FIELDS = {"exit_code", "stdout_tail", "stderr_tail", "sandbox_path", "claimed_by"}
_PILOT_PATCH_FIELDS = {"agent_endpoint", "cluster_endpoint", "meta"}


def clip_tail(text: Optional[str]) -> Optional[str]:
    """Keep only the last TAIL_LIMIT_BYTES of captured output."""
    if text is None:
        return None
    raw = text.encode("utf-8", errors="replace")
    if len(raw) <= TAIL_LIMIT_BYTES:
        return text
    return raw[-TAIL_LIMIT_BYTES:].decode("utf-8", errors="replace")


@dataclass
class PilotRecord:
    pilot_id: str
    description: PilotDescription
    state: PilotState = PilotState.NEW
    agent_endpoint: Optional[str] = None
    cluster_endpoint: Optional[str] = None
    timings: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pilot_id": self.pilot_id,
            "description": self.description.to_dict(),
            "state": self.state.value,
            "agent_endpoint": self.agent_endpoint,
            "cluster_endpoint": self.cluster_endpoint,
            "timings": [t.to_dict() for t in self.timings],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PilotRecord":
        return cls(
            pilot_id=d["pilot_id"],
            description=PilotDescription.from_dict(d["description"]),
            state=PilotState(d["state"]),
            agent_endpoint=d.get("agent_endpoint"),
            cluster_endpoint=d.get("cluster_endpoint"),
            timings=[TimingRecord.from_dict(t) for t in d.get("timings", [])],
            meta=dict(d.get("meta", {})),
        )

    def timing(self, event_name: str) -> Optional[TimingRecord]:
        for t in self.timings:
            if t.event_name == event_name:
                return t
        return None


@dataclass
class UnitRecord:
    unit_id: str
    pilot_id: str
    description: ComputeUnitDescription
    state: UnitState = UnitState.NEW
    claimed_by: Optional[str] = None
    exit_code: Optional[int] = None
    stdout_tail: Optional[str] = None
    stderr_tail: Optional[str] = None
    timings: list = field(default_factory=list)
    sandbox_path: Optional[str] = None
    enqueue_seq: int = 0

    def to_dict(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "pilot_id": self.pilot_id,
            "description": self.description.to_dict(),
            "state": self.state.value,
            "claimed_by": self.claimed_by,
            "exit_code": self.exit_code,
            "stdout_tail": self.stdout_tail,
            "stderr_tail": self.stderr_tail,
            "timings": [t.to_dict() for t in self.timings],
            "sandbox_path": self.sandbox_path,
            "enqueue_seq": self.enqueue_seq,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "UnitRecord":
        return cls(
            unit_id=d["unit_id"],
            pilot_id=d["pilot_id"],
            description=ComputeUnitDescription.from_dict(d["description"]),
            state=UnitState(d["state"]),
            claimed_by=d.get("claimed_by"),
            exit_code=d.get("exit_code"),
            stdout_tail=d.get("stdout_tail"),
            stderr_tail=d.get("stderr_tail"),
            timings=[TimingRecord.from_dict(t) for t in d.get("timings", [])],
            sandbox_path=d.get("sandbox_path"),
            enqueue_seq=d.get("enqueue_seq", 0),
        )

    def timing(self, event_name: str) -> Optional[TimingRecord]:
        for t in self.timings:
            if t.event_name == event_name:
                return t
        return None


@dataclass(frozen=True)
class StoreEvent:
    """One committed state change, totally ordered by ``index``."""

    index: int
    wall_iso: str
    entity_id: str
    old_state: str
    new_state: str

    def line(self) -> str:
        return f"{self.index} {self.wall_iso} {self.entity_id} {self.old_state} {self.new_state}"

    @classmethod
    def from_line(cls, line: str) -> "StoreEvent":
        idx, ts, entity, old, new = line.rstrip("\n").split(" ")
        return cls(int(idx), ts, entity, old, new)


def _timing_name_for(state) -> str:
    # Two events keep the names interval arithmetic looks for; the rest are
    # generic state markers.
    if state is UnitState.EXECUTING:
        return "cu_exec_start"
    return f"state_{state.value.lower()}"


class BaseStore:
    """Shared record logic; subclasses provide locking and persistence."""

    url: str

    # -- internal persistence hooks -------------------------------------
    @contextmanager
    def _locked(self, write: bool = True):  # pragma: no cover - interface
        raise NotImplementedError

    def _load_pilot(self, pilot_id: str) -> Optional[PilotRecord]:
        raise NotImplementedError

    def _load_unit(self, unit_id: str) -> Optional[UnitRecord]:
        raise NotImplementedError

    def _store_pilot(self, rec: PilotRecord) -> None:
        raise NotImplementedError

    def _store_unit(self, rec: UnitRecord) -> None:
        raise NotImplementedError

    def _unit_ids(self) -> list:
        raise NotImplementedError

    def _append_event(self, entity_id: str, old_state: str, new_state: str) -> StoreEvent:
        raise NotImplementedError

    def _events_after(self, cursor: int) -> list:
        raise NotImplementedError

    # -- public API ------------------------------------------------------
    def register_pilot(self, rec: PilotRecord) -> str:
        with self._locked():
            if self._load_pilot(rec.pilot_id) is not None:
                raise DuplicateId(f"pilot {rec.pilot_id} already registered")
            rec.state = PilotState.NEW
            rec.timings = list(rec.timings)
            self._store_pilot(rec)
            return rec.pilot_id

    def get_pilot(self, pilot_id: str) -> PilotRecord:
        with self._locked(write=False):
            rec = self._load_pilot(pilot_id)
        if rec is None:
            raise UnknownPilot(pilot_id)
        return rec

    def update_pilot(
        self,
        pilot_id: str,
        new_state: Optional[PilotState] = None,
        patch: Optional[Mapping[str, Any]] = None,
        timing_event: Optional[str] = None,
    ) -> PilotRecord:
        with self._locked():
            rec = self._load_pilot(pilot_id)
            if rec is None:
                raise UnknownPilot(pilot_id)
            old = rec.state
            if new_state is not None:
                rec.state = transition(rec.state, new_state)
            if patch:
                unknown = set(patch) - _PILOT_PATCH_FIELDS
                if unknown:
                    raise ValidationError([f"unknown pilot patch field {k!r}" for k in sorted(unknown)])
                if patch.get("cluster_endpoint") and rec.description.cluster_flavor == ClusterFlavor.NONE:
                    raise ValidationError(["cluster_endpoint requires a cluster flavor"])
                for k, v in patch.items():
                    if k == "meta":
                        rec.meta.update(v)
                    else:
                        setattr(rec, k, v)
            if new_state is not None:
                rec.timings.append(TimingRecord.now(pilot_id, _timing_name_for(rec.state)))
            if timing_event:
                rec.timings.append(TimingRecord.now(pilot_id, timing_event))
            self._store_pilot(rec)
            if new_state is not None:
                self._append_event(pilot_id, old.value, rec.state.value)
            return rec

    def enqueue_units(self, pilot_id: str, records: Iterable[UnitRecord]) -> list:
        records = list(records)
        with self._locked():
            pilot = self._load_pilot(pilot_id)
            if pilot is None:
                raise UnknownPilot(pilot_id)
            ids = []
            for rec in records:
                if self._load_unit(rec.unit_id) is not None:
                    raise DuplicateId(f"unit {rec.unit_id} already enqueued")
            for rec in records:
                rec.pilot_id = pilot_id
                rec.state = transition(UnitState.NEW, UnitState.PENDING)
                rec.timings = list(rec.timings)
                rec.timings.append(TimingRecord.now(rec.unit_id, "cu_submit"))
                event = self._append_event(rec.unit_id, UnitState.NEW.value, UnitState.PENDING.value)
                rec.enqueue_seq = event.index
                self._store_unit(rec)
                ids.append(rec.unit_id)
            return ids

    def get_unit(self, unit_id: str) -> UnitRecord:
        with self._locked(write=False):
            rec = self._load_unit(unit_id)
        if rec is None:
            raise UnknownUnit(unit_id)
        return rec

    def list_units(self, pilot_id: str) -> list:
        with self._locked(write=False):
            if self._load_pilot(pilot_id) is None:
                raise UnknownPilot(pilot_id)
            recs = [r for r in (self._load_unit(u) for u in self._unit_ids()) if r and r.pilot_id == pilot_id]
        recs.sort(key=lambda r: r.enqueue_seq)
        return recs

    def claim_units(self, agent_id: str, pilot_id: str, max_n: int) -> list:
        """Atomically move up to max_n PENDING units to SCHEDULED, oldest first."""
        if max_n < 1:
            raise ValidationError(["max_n must be >= 1"])
        claimed = []
        with self._locked():
            if self._load_pilot(pilot_id) is None:
                raise UnknownPilot(pilot_id)
            pending = [
                r
                for r in (self._load_unit(u) for u in self._unit_ids())
                if r and r.pilot_id == pilot_id and r.state == UnitState.PENDING
            ]
            pending.sort(key=lambda r: r.enqueue_seq)
            for rec in pending[:max_n]:
                rec.state = transition(rec.state, UnitState.SCHEDULED)
                rec.claimed_by = agent_id
                rec.timings.append(TimingRecord.now(rec.unit_id, _timing_name_for(rec.state)))
                self._store_unit(rec)
                self._append_event(rec.unit_id, UnitState.PENDING.value, UnitState.SCHEDULED.value)
                claimed.append(rec)
        return claimed

    def update_unit(
        self,
        unit_id: str,
        new_state: Optional[UnitState] = None,
        patch: Optional[Mapping[str, Any]] = None,
    ) -> UnitRecord:
        with self._locked():
            rec = self._load_unit(unit_id)
            if rec is None:
                raise UnknownUnit(unit_id)
            old = rec.state
            if new_state is not None:
                method = None
                if new_state == UnitState.ALLOCATING:
                    pilot = self._load_pilot(rec.pilot_id)
                    flavor = pilot.description.cluster_flavor if pilot else ClusterFlavor.NONE
                    method = resolve_launch_method(rec.description.launch_method_hint, flavor)
                rec.state = transition(rec.state, new_state, launch_method=method)
            if patch:
                unknown = set(patch) - _UNIT_PATCH_FIELDS
                if unknown:
                    raise ValidationError([f"unknown unit patch field {k!r}" for k in sorted(unknown)])
                merged = dict(patch)
                if "stdout_tail" in merged:
                    merged["stdout_tail"] = clip_tail(merged["stdout_tail"])
                if "stderr_tail" in merged:
                    merged["stderr_tail"] = clip_tail(merged["stderr_tail"])
                if merged.get("exit_code") is not None:
                    end_state = rec.state
                    if end_state not in (UnitState.DONE, UnitState.FAILED):
                        raise ValidationError(
                            [f"exit_code may only be set on DONE/FAILED units (state {end_state.value})"]
                        )
                for k, v in merged.items():
                    setattr(rec, k, v)
            if new_state is not None:
                rec.timings.append(TimingRecord.now(unit_id, _timing_name_for(rec.state)))
            self._store_unit(rec)
            if new_state is not None:
                self._append_event(unit_id, old.value, rec.state.value)
            return rec

    def watch(self, pilot_id: str, since: int = 0) -> list:
        """All state-change events for the pilot and its units after ``since``."""
        with self._locked(write=False):
            if self._load_pilot(pilot_id) is None:
                raise UnknownPilot(pilot_id)
            events = self._events_after(since)
            scoped = []
            for ev in events:
                if ev.entity_id == pilot_id:
                    scoped.append(ev)
                    continue
                unit = self._load_unit(ev.entity_id)
                if unit is not None and unit.pilot_id == pilot_id:
                    scoped.append(ev)
        return scoped

    def journal(self) -> list:
        with self._locked(write=False):
            return self._events_after(0)


class MemoryStore(BaseStore):
    """Thread-safe in-process backend."""

    _registry: dict = {}
    _registry_lock = threading.Lock()

    def __init__(self, name: str = "default"):
        self.name = name
        self.url = f"mem://{name}"
        self._lock = threading.RLock()
        self._pilots: dict = {}
        self._units: dict = {}
        self._events: list = []

    @classmethod
    def named(cls, name: str) -> "MemoryStore":
        with cls._registry_lock:
            store = cls._registry.get(name)
            if store is None:
                store = cls(name)
                cls._registry[name] = store
            return store

    @contextmanager
    def _locked(self, write: bool = True):
        with self._lock:
            yield

    def _load_pilot(self, pilot_id):
        rec = self._pilots.get(pilot_id)
        return PilotRecord.from_dict(rec) if rec else None

    def _load_unit(self, unit_id):
        rec = self._units.get(unit_id)
        return UnitRecord.from_dict(rec) if rec else None

    def _store_pilot(self, rec):
        self._pilots[rec.pilot_id] = rec.to_dict()

    def _store_unit(self, rec):
        self._units[rec.unit_id] = rec.to_dict()

    def _unit_ids(self):
        return list(self._units)

    def _append_event(self, entity_id, old_state, new_state):
        ev = StoreEvent(
            index=len(self._events) + 1,
            wall_iso=datetime.now(timezone.utc).isoformat(),
            entity_id=entity_id,
            old_state=old_state,
            new_state=new_state,
        )
        self._events.append(ev)
        return ev

    def _events_after(self, cursor):
        return [ev for ev in self._events if ev.index > cursor]


class FileStore(BaseStore):
    """Cross-process backend: one record file per entity plus a journal.

    Layout under ``root``::

        pilots/<id>.rec   units/<id>.rec   journal.log   .lock

    All mutating operations hold an exclusive flock on ``.lock``; reads take a
    shared one.  Each operation opens a fresh lock fd so exclusion also works
    between threads of one process.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.url = str(self.root)
        (self.root / "pilots").mkdir(parents=True, exist_ok=True)
        (self.root / "units").mkdir(parents=True, exist_ok=True)
        self._lock_path = self.root / ".lock"
        self._journal_path = self.root / "journal.log"
        self._lock_path.touch(exist_ok=True)
        self._journal_path.touch(exist_ok=True)
        self._pilot_of_unit: dict = {}

    @contextmanager
    def _locked(self, write: bool = True):
        fd = os.open(self._lock_path, os.O_RDWR)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX if write else fcntl.LOCK_SH)
            yield
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
            os.close(fd)

    def _pilot_path(self, pilot_id):
        return self.root / "pilots" / f"{pilot_id}.rec"

    def _unit_path(self, unit_id):
        return self.root / "units" / f"{unit_id}.rec"

    @staticmethod
    def _read_json(path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None

    @staticmethod
    def _write_json(path, payload):
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def _load_pilot(self, pilot_id):
        d = self._read_json(self._pilot_path(pilot_id))
        return PilotRecord.from_dict(d) if d else None

    def _load_unit(self, unit_id):
        d = self._read_json(self._unit_path(unit_id))
        return UnitRecord.from_dict(d) if d else None

    def _store_pilot(self, rec):
        self._write_json(self._pilot_path(rec.pilot_id), rec.to_dict())

    def _store_unit(self, rec):
        self._write_json(self._unit_path(rec.unit_id), rec.to_dict())
        self._pilot_of_unit[rec.unit_id] = rec.pilot_id

    def _unit_ids(self):
        return [p.stem for p in (self.root / "units").glob("*.rec")]

    def _next_index(self):
        last = 0
        with open(self._journal_path, "rb") as fh:
            try:
                fh.seek(-4096, os.SEEK_END)
            except OSError:
                fh.seek(0)
            tail = fh.read().decode("utf-8", errors="replace").strip().splitlines()
        if tail:
            last = int(tail[-1].split(" ", 1)[0])
        return last + 1

    def _append_event(self, entity_id, old_state, new_state):
        ev = StoreEvent(
            index=self._next_index(),
            wall_iso=datetime.now(timezone.utc).isoformat(),
            entity_id=entity_id,
            old_state=old_state,
            new_state=new_state,
        )
        with open(self._journal_path, "a", encoding="utf-8") as fh:
            fh.write(ev.line() + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        return ev

    def _events_after(self, cursor):
        events = []
        with open(self._journal_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                ev = StoreEvent.from_line(line)
                if ev.index > cursor:
                    events.append(ev)
        return events


def open_store(spec: str) -> BaseStore:
    """Open a store from a path or URL: ``mem://name`` or a directory path."""
    if spec.startswith("mem://"):
        return MemoryStore.named(spec[len("mem://"):] or "default")
    return FileStore(spec)


def replay_states(events: Iterable[StoreEvent]) -> dict:
    """Final per-entity state implied by an event sequence (journal replay)."""
    final: dict = {}
    for ev in events:
        final[ev.entity_id] = ev.new_state
    return final
