"""Deterministic simulator of heterogeneous vehicular networks.

Mixed fleets of manually driven, autonomous and platooned vehicles move
on highway and intersection road nets, talk over vehicle-to-vehicle,
vehicle-to-fog and vehicle-to-base-station links scheduled on three
shared subbands, and cooperate on lane changes, overtakes and crossing
priority. Runs are reproducible: one seed, one byte-identical trace.

The usual entry points are load_config/build to materialize a scenario,
run_simulation to execute it, and report_from_trace to recompute a
metrics report offline. The `hetvnet` command wraps the same calls.
"""

from .core import (
    ActionFootprint,
    AtmAction,
    BehaviorMode,
    Intersection,
    LightPhase,
    MessageClass,
    PlatoonDescriptor,
    RoadNetwork,
    RoadSegment,
    Turn,
    VehicleKind,
    VehicleState,
    validate_world,
)
from .radio import (
    LinkKind,
    LinkModel,
    SubbandConfig,
    analytic_collision_probability,
    assign_subband,
)
from .engine import (
    EngineInvariantError,
    EngineParams,
    RunResult,
    Script,
    SimulationEngine,
    SpawnEvent,
    VehicleRuntime,
    World,
    run_simulation,
)
from .scenarios import (
    ConfigError,
    ScenarioBundle,
    apply_overrides,
    build,
    bundled_config_path,
    load_config,
)
from .metrics import Counters, report_from_trace
from .trace import (
    HashSink,
    JsonlSink,
    MemorySink,
    TraceRecord,
    TraceWriter,
    read_trace,
)

__version__ = "0.1.0"

__all__ = [
    "ActionFootprint",
    "AtmAction",
    "BehaviorMode",
    "ConfigError",
    "Counters",
    "EngineInvariantError",
    "EngineParams",
    "HashSink",
    "Intersection",
    "JsonlSink",
    "LightPhase",
    "LinkKind",
    "LinkModel",
    "MemorySink",
    "MessageClass",
    "PlatoonDescriptor",
    "RoadNetwork",
    "RoadSegment",
    "RunResult",
    "ScenarioBundle",
    "Script",
    "SimulationEngine",
    "SpawnEvent",
    "SubbandConfig",
    "TraceRecord",
    "TraceWriter",
    "Turn",
    "VehicleKind",
    "VehicleRuntime",
    "VehicleState",
    "World",
    "analytic_collision_probability",
    "apply_overrides",
    "assign_subband",
    "build",
    "bundled_config_path",
    "load_config",
    "read_trace",
    "report_from_trace",
    "run_simulation",
    "validate_world",
]
