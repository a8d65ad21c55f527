"""Planner, cost model, and deterministic simulator for sharded MoE training.

Experts live fully sharded (one owner per expert); hot experts gain ephemeral
replicas each iteration through a sparse gather whose cost hides under
attention, and fold their gradients back through the mirrored sparse
reduce-scatter.  This package plans those placements, prices the collectives,
and replays load traces against competing placement policies.
"""

from .costmodel import (
    SparsityReport,
    TrafficMatrix,
    allreduce_dp_volume,
    collective_latency,
    overlap_degree,
    spag_traffic,
    sprs_traffic,
)
from .dispatch import DispatchPlan, build_dispatch, dispatch_traffic
from .engine import (
    IterationTimeline,
    LayerRecord,
    MemoryBreakdown,
    ModelConfig,
    Policy,
    PolicyKind,
    RunReport,
    make_policy_state,
    memory_report,
    simulate_iteration,
    simulate_run,
)
from .errors import (
    ConfigError,
    DataError,
    DimensionMismatchError,
    EmptyHistoryError,
    InfeasibleSlotsError,
    InternalError,
    InvalidPairError,
    MoesimError,
    OrphanExpertError,
    ParseError,
    TraceMismatchError,
)
from .placement import (
    ChunkPlacement,
    ShardPlan,
    Verdict,
    make_even_partition,
    validate_spag_pair,
    validate_sprs_pair,
)
from .planner import (
    CalibrationOutcome,
    GlobalLoadProfile,
    MaterializationPlan,
    calibrate,
    estimate_loads,
    estimate_moe_latency,
    heterogeneous_sharding,
    sparse_materialization,
)
from .topology import ClusterTopology
from .traces import (
    Trace,
    TraceMeta,
    gen_synthetic_trace,
    largest_remainder,
    load_trace,
    save_trace,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationOutcome",
    "ChunkPlacement",
    "ClusterTopology",
    "ConfigError",
    "DataError",
    "DimensionMismatchError",
    "DispatchPlan",
    "EmptyHistoryError",
    "GlobalLoadProfile",
    "InfeasibleSlotsError",
    "InternalError",
    "InvalidPairError",
    "IterationTimeline",
    "LayerRecord",
    "MaterializationPlan",
    "MemoryBreakdown",
    "ModelConfig",
    "MoesimError",
    "OrphanExpertError",
    "ParseError",
    "Policy",
    "PolicyKind",
    "RunReport",
    "ShardPlan",
    "SparsityReport",
    "Trace",
    "TraceMeta",
    "TraceMismatchError",
    "TrafficMatrix",
    "Verdict",
    "allreduce_dp_volume",
    "build_dispatch",
    "calibrate",
    "collective_latency",
    "dispatch_traffic",
    "estimate_loads",
    "estimate_moe_latency",
    "gen_synthetic_trace",
    "heterogeneous_sharding",
    "largest_remainder",
    "load_trace",
    "make_even_partition",
    "make_policy_state",
    "memory_report",
    "overlap_degree",
    "save_trace",
    "simulate_iteration",
    "simulate_run",
    "spag_traffic",
    "sprs_traffic",
    "validate_spag_pair",
    "validate_sprs_pair",
]
