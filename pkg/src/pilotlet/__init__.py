"""pilotlet: pilot-job resource management with embedded mini-clusters.

A pilot is a placeholder job that, once running on a resource, pulls and
executes application work items itself.  This package ships the client-side
managers, a shared state store, a uniform job-submission layer, the
resource-side agent (which can boot or adopt a YARN-like or Spark-like
mini-cluster), and a benchmark harness.
"""

from .core import (
    ClusterFlavor,
    ClusterMode,
    ComputeUnitDescription,
    LaunchMethod,
    PilotDescription,
    PilotState,
    StagingDirection,
    StagingDirective,
    TimingRecord,
    UnitState,
    load_workload,
    transition,
    validate_pilot_description,
    validate_unit_description,
)
from .errors import PilotletError, ValidationError
from .pilotmgr import PilotManager, PilotHandle, UnitHandle
from .saga import JobDescription, JobState, LocalAdaptor, SimBatchAdaptor
from .statestore import FileStore, MemoryStore, PilotRecord, UnitRecord, open_store

__version__ = "0.1.0"

__all__ = [
    "ClusterFlavor",
    "ClusterMode",
    "ComputeUnitDescription",
    "FileStore",
    "JobDescription",
    "JobState",
    "LaunchMethod",
    "LocalAdaptor",
    "MemoryStore",
    "PilotDescription",
    "PilotHandle",
    "PilotManager",
    "PilotRecord",
    "PilotState",
    "PilotletError",
    "SimBatchAdaptor",
    "StagingDirection",
    "StagingDirective",
    "TimingRecord",
    "UnitHandle",
    "UnitRecord",
    "UnitState",
    "ValidationError",
    "load_workload",
    "open_store",
    "transition",
    "validate_pilot_description",
    "validate_unit_description",
]
