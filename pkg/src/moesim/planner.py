"""Placement planning: load estimation, ephemeral replication, calibration,
and load-aware sharding.

Two placement decisions are planned here.  The per-iteration one picks which
experts to temporarily replicate so that their fetch hides under non-expert
compute (`sparse_materialization`, refined after the gate by `calibrate`).
The slow-timescale one re-partitions expert ownership across devices so that
persistent hot experts stop colliding on the same nodes
(`heterogeneous_sharding`).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import floor
from typing import Optional, Sequence

import numpy as np

from .costmodel import (
    TrafficMatrix,
    collective_latency,
    overlap_degree,
    spag_traffic,
)
from .dispatch import build_dispatch, dispatch_traffic
from .errors import EmptyHistoryError, InfeasibleSlotsError, InternalError
from .placement import ChunkPlacement, ShardPlan
from .topology import ClusterTopology


def estimate_loads(history: Sequence[np.ndarray], window: int = 5) -> np.ndarray:
    """Mean of the last `window` observed (devices x experts) token matrices.

    Fractional means are kept as-is; rounding is the consumer's business.
    """
    if len(history) == 0:
        raise EmptyHistoryError("cannot estimate loads from an empty history")
    if window <= 0:
        raise EmptyHistoryError(f"window must be positive, got {window}")
    recent = list(history)[-window:]
    return np.mean(np.stack([np.asarray(m, dtype=np.float64) for m in recent]), axis=0)


@dataclass(frozen=True)
class MaterializationPlan:
    """Replication target on top of a sharded base placement."""

    source: ChunkPlacement
    target: ChunkPlacement
    added_per_device: tuple[int, ...]

    @property
    def is_identity(self) -> bool:
        return self.target.entries == self.source.entries

    def to_json_obj(self) -> dict:
        return {
            "source": self.source.to_json_obj(),
            "target": self.target.to_json_obj(),
            "added_per_device": list(self.added_per_device),
        }


def _per_expert_loads(loads) -> np.ndarray:
    arr = np.asarray(loads, dtype=np.float64)
    if arr.ndim == 2:
        return arr.sum(axis=0)
    if arr.ndim == 1:
        return arr
    raise InternalError(f"loads must be 1-D or 2-D, got shape {arr.shape}")


def _descending(order_keys: np.ndarray) -> list[int]:
    """Indices sorted by value descending, lowest index first on ties."""
    return sorted(range(len(order_keys)), key=lambda e: (-order_keys[e], e))


def _extend_placement(
    base: ChunkPlacement,
    per_expert: np.ndarray,
    t: int,
    m: int,
    topology: ClusterTopology,
) -> ChunkPlacement:
    """Core replication rule shared by planning and calibration.

    After clamping (t to the expert count, m to t), either every one of the
    top-t experts fits on every device (t <= m) and is replicated everywhere,
    or a global budget of devices*m replica slots is shared out proportionally
    to load: expert e gets max(1, floor(slots * load_e / top_load_sum)) slots,
    capped at the devices it does not already occupy, walking experts in
    descending load order; slots left at the end go one at a time to the
    highest-load experts still below their cap.  Individual replicas land on
    nodes that do not hold the expert yet, preferring nodes (then devices)
    with the most free slots, skipping devices that already hold it.
    """
    experts = base.num_chunks
    devices = base.num_devices
    t = min(t, experts)
    m = min(m, t)
    if t <= 0 or m <= 0:
        return base

    order = _descending(per_expert)
    top = order[:t]
    if t <= m:
        extra = [
            (e, d) for e in top for d in range(devices) if d not in base.devices_of(e)
        ]
        return base.union(extra)

    total_slots = devices * m
    avail = [m] * devices
    holders: dict[int, set[int]] = {e: set(base.devices_of(e)) for e in top}
    added: list[tuple[int, int]] = []

    def place_one(expert: int) -> bool:
        # choose a node: ones without the expert first, then most free slots,
        # then lowest index; inside the node the freest (then lowest) device.
        best_key = None
        best_dev = None
        for node in range(topology.nodes):
            node_devs = [
                d
                for d in topology.devices_in_node(node)
                if avail[d] > 0 and d not in holders[expert]
            ]
            if not node_devs:
                continue
            node_free = sum(avail[d] for d in topology.devices_in_node(node))
            node_has = any(d in holders[expert] for d in topology.devices_in_node(node))
            key = (node_has, -node_free, node)
            if best_key is None or key < best_key:
                best_key = key
                best_dev = min(node_devs, key=lambda d: (-avail[d], d))
        if best_dev is None:
            return False
        added.append((expert, best_dev))
        holders[expert].add(best_dev)
        avail[best_dev] -= 1
        return True

    top_sum = float(sum(per_expert[e] for e in top))
    remaining = total_slots
    for e in top:
        if top_sum > 0:
            share = max(1, floor(total_slots * float(per_expert[e]) / top_sum))
        else:
            share = max(1, total_slots // t)
        cap = devices - len(holders[e])
        want = min(share, cap, remaining)
        placed = 0
        while placed < want and place_one(e):
            placed += 1
        remaining -= placed

    progress = True
    while remaining > 0 and progress:
        progress = False
        for e in top:
            if remaining == 0:
                break
            if len(holders[e]) < devices and place_one(e):
                remaining -= 1
                progress = True

    return base.union(added)


def sparse_materialization(
    shards: ChunkPlacement,
    loads,
    t: int,
    m: int,
    topology: ClusterTopology,
) -> MaterializationPlan:
    """Plan which experts to replicate, and where, for one layer's iteration.

    `shards` is the layer's single-owner partition; `loads` the (devices x
    experts) predicted token counts (a 1-D per-expert vector also works);
    `t` the number of experts whose fetch the overlap budget can hide; `m`
    the per-device replica capacity in experts.
    """
    if not shards.is_partition():
        raise InternalError("materialization must start from a partition")
    per_expert = _per_expert_loads(loads)
    if len(per_expert) != shards.num_chunks:
        raise InternalError(
            f"got {len(per_expert)} expert loads for {shards.num_chunks} chunks"
        )
    target = _extend_placement(shards, per_expert, t, m, topology)
    added = [
        len(target.chunks_on(d)) - len(shards.chunks_on(d))
        for d in range(shards.num_devices)
    ]
    return MaterializationPlan(source=shards, target=target, added_per_device=tuple(added))


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def estimate_moe_latency(
    placement: ChunkPlacement,
    tokens,
    topology: ClusterTopology,
    token_bytes: int,
    per_token_expert_time: float,
) -> float:
    """Cheap MoE-block estimate: expert-compute bottleneck + dispatch all-to-all."""
    plan = build_dispatch(tokens, placement, topology)
    compute = plan.max_device_tokens() * per_token_expert_time
    a2a = collective_latency(dispatch_traffic(plan, token_bytes), topology)
    return compute + a2a


@dataclass(frozen=True)
class CalibrationOutcome:
    accepted: bool
    plan: MaterializationPlan
    extra_seconds: float
    estimate_before: float
    estimate_after: float


def calibrate(
    plan: MaterializationPlan,
    actual,
    remaining_m: int,
    t_remaining: float,
    topology: ClusterTopology,
    chunk_bytes: int,
    token_bytes: int,
    per_token_expert_time: float,
) -> CalibrationOutcome:
    """Decide whether post-gate loads justify materializing more replicas.

    Re-runs the replication rule on the actual loads with the remaining
    per-device capacity (the leftover overlappable seconds are converted to a
    replica budget with the same bandwidth floor as planning).  The extension
    is accepted only if the estimated MoE latency under the extended placement
    plus the extension's full fetch latency — it runs after the gate, entirely
    on the critical path — strictly beats the estimate under the original plan.
    """
    actual_arr = np.asarray(actual, dtype=np.float64)
    base_est = estimate_moe_latency(
        plan.target, actual_arr, topology, token_bytes, per_token_expert_time
    )
    t_cal = overlap_degree(t_remaining, topology, chunk_bytes)
    if remaining_m <= 0 or t_cal <= 0:
        return CalibrationOutcome(False, plan, 0.0, base_est, base_est)

    extended = _extend_placement(
        plan.target, _per_expert_loads(actual_arr), t_cal, remaining_m, topology
    )
    if extended.entries == plan.target.entries:
        return CalibrationOutcome(False, plan, 0.0, base_est, base_est)

    traffic, _ = spag_traffic(plan.source, extended, chunk_bytes)
    orig_traffic, _ = spag_traffic(plan.source, plan.target, chunk_bytes)
    extra_seconds = collective_latency(
        TrafficMatrix(traffic.data - orig_traffic.data), topology
    )
    ext_est = estimate_moe_latency(
        extended, actual_arr, topology, token_bytes, per_token_expert_time
    )
    if ext_est + extra_seconds < base_est:
        added = [
            len(extended.chunks_on(d)) - len(plan.source.chunks_on(d))
            for d in range(plan.source.num_devices)
        ]
        new_plan = MaterializationPlan(plan.source, extended, tuple(added))
        return CalibrationOutcome(True, new_plan, extra_seconds, base_est, ext_est)
    return CalibrationOutcome(False, plan, 0.0, base_est, ext_est)


# ---------------------------------------------------------------------------
# load-aware sharding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GlobalLoadProfile:
    """Per-layer, per-expert load totals driving the slow re-sharding decision."""

    per_layer: np.ndarray  # (layers, experts) float64

    def __post_init__(self) -> None:
        arr = np.asarray(self.per_layer, dtype=np.float64)
        if arr.ndim != 2:
            raise InternalError(f"profile must be (layers, experts), got {arr.shape}")
        object.__setattr__(self, "per_layer", arr)

    @classmethod
    def from_step(cls, step: Sequence[np.ndarray]) -> "GlobalLoadProfile":
        """Collapse one iteration's per-layer (devices x experts) matrices."""
        return cls(np.stack([_per_expert_loads(m) for m in step]))


def heterogeneous_sharding(
    profile: GlobalLoadProfile, t: int, topology: ClusterTopology
) -> ShardPlan:
    """Re-partition expert ownership so persistent heavy experts spread out.

    The top-t experts of each layer are set aside (their load is expected to
    be smoothed by per-iteration replication) and the rest are placed
    greedily: layers in descending order of their heaviest remaining expert,
    experts within a layer in descending load order, each onto the
    least-loaded node and then the least-loaded device, preferring fewer free
    slots on ties (then the lowest index).  The set-aside experts then fill
    whatever slots remain, round-robin in layer-major order.  Every device
    ends with exactly its slot target.
    """
    layers, experts = profile.per_layer.shape
    devices = topology.num_devices
    total = layers * experts
    base, extra = divmod(total, devices)
    avail = [base + (1 if d < extra else 0) for d in range(devices)]

    t = max(0, min(t, experts))
    reserved: list[list[int]] = []
    rest: list[list[int]] = []
    for layer in range(layers):
        order = _descending(profile.per_layer[layer])
        reserved.append(sorted(order[:t]))
        rest.append(order[t:])  # already descending by load

    node_load = [0.0] * topology.nodes
    dev_load = [0.0] * devices
    owner: list[dict[int, int]] = [dict() for _ in range(layers)]

    def pick_device(load: float) -> int:
        best_node = None
        best_key = None
        for node in range(topology.nodes):
            free = [d for d in topology.devices_in_node(node) if avail[d] > 0]
            if not free:
                continue
            node_free = sum(avail[d] for d in topology.devices_in_node(node))
            key = (node_load[node], node_free, node)
            if best_key is None or key < best_key:
                best_key = key
                best_node = node
        if best_node is None:
            raise InfeasibleSlotsError("no device slot left while placing experts")
        dev = min(
            (d for d in topology.devices_in_node(best_node) if avail[d] > 0),
            key=lambda d: (dev_load[d], avail[d], d),
        )
        avail[dev] -= 1
        dev_load[dev] += load
        node_load[best_node] += load
        return dev

    heaviest = [
        max((float(profile.per_layer[l][e]) for e in rest[l]), default=float("-inf"))
        for l in range(layers)
    ]
    layer_order = sorted(range(layers), key=lambda l: (-heaviest[l], l))
    for layer in layer_order:
        for e in rest[layer]:
            owner[layer][e] = pick_device(float(profile.per_layer[layer][e]))

    cursor = 0
    for layer in range(layers):
        for e in reserved[layer]:
            scanned = 0
            while avail[cursor] == 0:
                cursor = (cursor + 1) % devices
                scanned += 1
                if scanned > devices:
                    raise InfeasibleSlotsError("slot accounting exhausted during fill")
            owner[layer][e] = cursor
            avail[cursor] -= 1
            cursor = (cursor + 1) % devices

    placements = tuple(
        ChunkPlacement.from_pairs(
            experts, devices, ((e, d) for e, d in owner[layer].items())
        )
        for layer in range(layers)
    )
    return ShardPlan(placements, total // devices)
