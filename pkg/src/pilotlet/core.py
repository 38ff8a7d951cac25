"""Domain types, lifecycle state machines, and validation.

Everything here is an immutable value; the state machines are pure functions.
All other modules share these types so the whole system agrees on one
canonical lifecycle for pilots and compute units.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import PurePosixPath
from typing import Any, Iterable, Mapping, Optional, Sequence

from .errors import ValidationError, IllegalTransition, MalformedInput


class ClusterFlavor(str, Enum):
    """Which embedded cluster framework (if any) a pilot hosts."""

    NONE = "none"
    YARN_LIKE = "yarn"
    SPARK_LIKE = "spark"


class ClusterMode(str, Enum):
    """SPAWN boots a fresh cluster on the allocation; CONNECT adopts a running one."""

    SPAWN = "spawn"
    CONNECT = "connect"


class LaunchMethod(str, Enum):
    """How a unit's executable is started on the resource."""

    AUTO = "auto"
    FORK = "fork"
    YARN = "yarn"
    SPARK = "spark"


class StagingDirection(str, Enum):
    IN = "in"
    OUT = "out"


class PilotState(str, Enum):
    NEW = "NEW"
    PENDING_LAUNCH = "PENDING_LAUNCH"
    LAUNCHING = "LAUNCHING"
    ACTIVE = "ACTIVE"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


class UnitState(str, Enum):
    NEW = "NEW"
    PENDING = "PENDING"
    SCHEDULED = "SCHEDULED"
    ALLOCATING = "ALLOCATING"
    EXECUTING = "EXECUTING"
    STAGING_OUT = "STAGING_OUT"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


PILOT_TERMINAL = frozenset({PilotState.DONE, PilotState.FAILED, PilotState.CANCELED})
UNIT_TERMINAL = frozenset({UnitState.DONE, UnitState.FAILED, UnitState.CANCELED})

# Forward edges of the happy path; FAILED/CANCELED are reachable from any
# non-terminal state and handled in transition().
_PILOT_EDGES = {
    PilotState.NEW: {PilotState.PENDING_LAUNCH},
    PilotState.PENDING_LAUNCH: {PilotState.LAUNCHING},
    PilotState.LAUNCHING: {PilotState.ACTIVE},
    PilotState.ACTIVE: {PilotState.DONE},
}

_UNIT_EDGES = {
    UnitState.NEW: {UnitState.PENDING},
    UnitState.PENDING: {UnitState.SCHEDULED},
    UnitState.SCHEDULED: {UnitState.ALLOCATING, UnitState.EXECUTING},
    UnitState.ALLOCATING: {UnitState.EXECUTING},
    UnitState.EXECUTING: {UnitState.STAGING_OUT},
    UnitState.STAGING_OUT: {UnitState.DONE},
}


def resolve_launch_method(hint: LaunchMethod, flavor: ClusterFlavor) -> LaunchMethod:
    """Resolve an AUTO hint to the concrete method the pilot's flavor implies."""
    if hint != LaunchMethod.AUTO:
        return hint
    if flavor == ClusterFlavor.YARN_LIKE:
        return LaunchMethod.YARN
    if flavor == ClusterFlavor.SPARK_LIKE:
        return LaunchMethod.SPARK
    return LaunchMethod.FORK


def transition(current, new, *, launch_method: Optional[LaunchMethod] = None):
    """Validate a lifecycle step and return the new state.

    This is the only sanctioned way a record's state changes.  ALLOCATING is a
    YARN-only stop: pass the unit's resolved launch method when validating
    unit transitions so the guard can apply.

    Raises IllegalTransition for anything outside the declared edge set,
    including any move out of a terminal state.
    """
    if type(current) is not type(new):
        raise IllegalTransition(current, new, "state kinds differ")
    if isinstance(current, PilotState):
        edges, terminal = _PILOT_EDGES, PILOT_TERMINAL
        fail, cancel = PilotState.FAILED, PilotState.CANCELED
    elif isinstance(current, UnitState):
        edges, terminal = _UNIT_EDGES, UNIT_TERMINAL
        fail, cancel = UnitState.FAILED, UnitState.CANCELED
    else:
        raise IllegalTransition(current, new, "unknown state kind")

    if current in terminal:
        raise IllegalTransition(current, new, "terminal state absorbs")
    if new in (fail, cancel):
        return new
    if new not in edges.get(current, ()):
        raise IllegalTransition(current, new)
    if new is UnitState.ALLOCATING and launch_method is not None:
        if launch_method != LaunchMethod.YARN:
            raise IllegalTransition(current, new, f"launch method {launch_method.value}")
    return new


@dataclass(frozen=True)
class TimingRecord:
    """One timestamped event on an entity's trail.

    ``monotonic`` drives all interval arithmetic (CLOCK_MONOTONIC, shared by
    every process on the host); ``wall`` is annotation for humans and logs.
    """

    entity_id: str
    event_name: str
    monotonic: float
    wall: float

    @classmethod
    def now(cls, entity_id: str, event_name: str) -> "TimingRecord":
        return cls(entity_id, event_name, time.monotonic(), time.time())

    def to_dict(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "event_name": self.event_name,
            "monotonic": self.monotonic,
            "wall": self.wall,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TimingRecord":
        return cls(d["entity_id"], d["event_name"], d["monotonic"], d["wall"])


@dataclass(frozen=True)
class StagingDirective:
    """Copy ``source`` (external path) to/from ``target`` (sandbox-relative)."""

    source: str
    target: str
    direction: StagingDirection

    def violations(self) -> list:
        out = []
        if not self.target:
            out.append("staging target must be non-empty")
            return out
        p = PurePosixPath(self.target)
        if p.is_absolute() or ".." in p.parts:
            out.append(f"staging target escapes the sandbox: {self.target!r}")
        return out

    def to_dict(self) -> dict:
        return {"source": self.source, "target": self.target, "direction": self.direction.value}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StagingDirective":
        _check_keys(d, {"source", "target", "direction"}, "staging directive")
        return cls(str(d["source"]), str(d["target"]), StagingDirection(d["direction"]))


@dataclass(frozen=True)
class PilotDescription:
    """Resource request for one pilot: where to run, how big, for how long."""

    resource_name: str
    cores: int
    memory_mb_per_node: int
    runtime_s: int
    queue: Optional[str] = None
    cluster_flavor: ClusterFlavor = ClusterFlavor.NONE
    cluster_mode: ClusterMode = ClusterMode.SPAWN
    connect_url: Optional[str] = None
    sandbox_root: str = "."

    def violations(self) -> list:
        out = []
        if not self.resource_name:
            out.append("resource_name must be non-empty")
        if self.cores < 1:
            out.append(f"cores must be >= 1 (got {self.cores})")
        if self.memory_mb_per_node < 1:
            out.append(f"memory_mb_per_node must be >= 1 (got {self.memory_mb_per_node})")
        if self.runtime_s < 1:
            out.append(f"runtime_s must be >= 1 (got {self.runtime_s})")
        if self.cluster_mode == ClusterMode.CONNECT:
            if not self.connect_url:
                out.append("connect_url is required when cluster_mode is connect")
            if self.cluster_flavor == ClusterFlavor.NONE:
                out.append("cluster_flavor must not be none when cluster_mode is connect")
        return out

    def to_dict(self) -> dict:
        return {
            "resource_name": self.resource_name,
            "cores": self.cores,
            "memory_mb_per_node": self.memory_mb_per_node,
            "runtime_s": self.runtime_s,
            "queue": self.queue,
            "cluster_flavor": self.cluster_flavor.value,
            "cluster_mode": self.cluster_mode.value,
            "connect_url": self.connect_url,
            "sandbox_root": self.sandbox_root,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PilotDescription":
        _check_keys(
            d,
            {
                "resource_name",
                "cores",
                "memory_mb_per_node",
                "runtime_s",
                "queue",
                "cluster_flavor",
                "cluster_mode",
                "connect_url",
                "sandbox_root",
            },
            "pilot description",
        )
        kwargs = dict(d)
        if "cluster_flavor" in kwargs:
            kwargs["cluster_flavor"] = ClusterFlavor(kwargs["cluster_flavor"])
        if "cluster_mode" in kwargs:
            kwargs["cluster_mode"] = ClusterMode(kwargs["cluster_mode"])
        return cls(**kwargs)


@dataclass(frozen=True)
class ComputeUnitDescription:
    """One self-contained work item: executable, arguments, resources, staging."""

    executable: str
    arguments: tuple = ()
    environment: Mapping[str, str] = field(default_factory=dict)
    cores: int = 1
    memory_mb: int = 256
    launch_method_hint: LaunchMethod = LaunchMethod.AUTO
    input_staging: tuple = ()
    output_staging: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "arguments", tuple(str(a) for a in self.arguments))
        object.__setattr__(self, "environment", dict(self.environment))
        object.__setattr__(self, "input_staging", tuple(self.input_staging))
        object.__setattr__(self, "output_staging", tuple(self.output_staging))

    def violations(self) -> list:
        out = []
        if not self.executable:
            out.append("executable must be non-empty")
        if self.cores < 1:
            out.append(f"cores must be >= 1 (got {self.cores})")
        if self.memory_mb < 1:
            out.append(f"memory_mb must be >= 1 (got {self.memory_mb})")
        for d in (*self.input_staging, *self.output_staging):
            out.extend(d.violations())
        for d in self.input_staging:
            if d.direction != StagingDirection.IN:
                out.append(f"input_staging entry has direction {d.direction.value}")
        for d in self.output_staging:
            if d.direction != StagingDirection.OUT:
                out.append(f"output_staging entry has direction {d.direction.value}")
        return out

    def to_dict(self) -> dict:
        return {
            "executable": self.executable,
            "arguments": list(self.arguments),
            "environment": dict(self.environment),
            "cores": self.cores,
            "memory_mb": self.memory_mb,
            "launch_method_hint": self.launch_method_hint.value,
            "input_staging": [d.to_dict() for d in self.input_staging],
            "output_staging": [d.to_dict() for d in self.output_staging],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ComputeUnitDescription":
        _check_keys(
            d,
            {
                "executable",
                "arguments",
                "environment",
                "cores",
                "memory_mb",
                "launch_method_hint",
                "input_staging",
                "output_staging",
            },
            "unit description",
        )
        kwargs = dict(d)
        if "launch_method_hint" in kwargs:
            kwargs["launch_method_hint"] = LaunchMethod(kwargs["launch_method_hint"])
        for key in ("input_staging", "output_staging"):
            if key in kwargs:
                kwargs[key] = tuple(StagingDirective.from_dict(s) for s in kwargs[key])
        return cls(**kwargs)


def validate_pilot_description(d: PilotDescription) -> PilotDescription:
    """Return ``d`` unchanged iff every invariant holds.

    Collects all violations before raising so callers see the full list.
    """
    violations = d.violations()
    if violations:
        raise ValidationError(violations)
    return d


def validate_unit_description(d: ComputeUnitDescription) -> ComputeUnitDescription:
    violations = d.violations()
    if violations:
        raise ValidationError(violations)
    return d


def _check_keys(d: Mapping[str, Any], allowed: set, what: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ValidationError([f"unknown key in {what}: {k!r}" for k in unknown])


def load_workload(path) -> tuple:
    """Parse a workload file: {"pilot": {...}, "units": [{...}, ...]}.

    Returns (PilotDescription, list of ComputeUnitDescription), both validated.
    Unknown keys anywhere are validation errors.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedInput(f"cannot read workload file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(["workload document must be a JSON object"])
    _check_keys(doc, {"pilot", "units"}, "workload document")
    if "pilot" not in doc or "units" not in doc:
        raise ValidationError(["workload document requires 'pilot' and 'units' keys"])
    pilot = validate_pilot_description(PilotDescription.from_dict(doc["pilot"]))
    units = [validate_unit_description(ComputeUnitDescription.from_dict(u)) for u in doc["units"]]
    return pilot, units


def dump_workload(pilot: PilotDescription, units: Iterable[ComputeUnitDescription]) -> str:
    return json.dumps({"pilot": pilot.to_dict(), "units": [u.to_dict() for u in units]}, indent=2)


def with_field(obj, **changes):
    """replace() passthrough so callers do not import dataclasses everywhere."""
    return replace(obj, **changes)
