"""Topology-aware token routing from gate decisions to expert replicas.

Routing rule, per (source device, expert) cell of the token-count matrix:

1. if the expert is materialized on the source device, all tokens stay local;
2. otherwise, if any replica lives inside the source's node, split the tokens
   evenly among those intra-node replicas;
3. otherwise split evenly among all replicas cluster-wide.

"Evenly" is integral: counts differ by at most one, and the remainder tokens
go one each to the currently least-loaded candidate devices (lowest index on
ties), where load counts every token this dispatch has already assigned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costmodel import TrafficMatrix
from .errors import DimensionError, OrphanExpertError
from .placement import ChunkPlacement
from .topology import ClusterTopology


@dataclass(eq=False)
class DispatchPlan:
    """Routing tensor: route[s, e, d] tokens of expert e travel from s to d."""

    route: np.ndarray  # (devices, experts, devices) int64

    @property
    def num_devices(self) -> int:
        return self.route.shape[0]

    @property
    def num_experts(self) -> int:
        return self.route.shape[1]

    def tokens_to_device(self) -> np.ndarray:
        """Total tokens each device must run through its experts."""
        return self.route.sum(axis=(0, 1))

    def max_device_tokens(self) -> int:
        return int(self.tokens_to_device().max())


def build_dispatch(
    tokens, placement: ChunkPlacement, topology: ClusterTopology
) -> DispatchPlan:
    """Route an integral (devices x experts) token-count matrix onto `placement`."""
    counts = np.asarray(tokens)
    if counts.ndim != 2:
        raise DimensionError(f"token matrix must be 2-D, got shape {counts.shape}")
    devices, experts = counts.shape
    if devices != placement.num_devices or experts != placement.num_chunks:
        raise DimensionError(
            f"token matrix {counts.shape} does not match placement "
            f"{placement.num_devices} devices x {placement.num_chunks} experts"
        )
    if devices != topology.num_devices:
        raise DimensionError("token matrix and topology disagree on device count")
    if np.any(counts < 0):
        raise DimensionError("token counts must be non-negative")
    if not np.all(np.equal(np.mod(counts, 1), 0)):
        raise DimensionError("token counts must be integral")
    counts = counts.astype(np.int64)

    route = np.zeros((devices, experts, devices), dtype=np.int64)
    assigned = np.zeros(devices, dtype=np.int64)  # running per-destination load
    for src in range(devices):
        node = topology.node_of(src)
        for expert in range(experts):
            n = int(counts[src, expert])
            if n == 0:
                continue
            holders = placement.devices_of(expert)
            if not holders:
                raise OrphanExpertError(
                    f"expert {expert} has tokens but is materialized nowhere"
                )
            if src in holders:
                route[src, expert, src] += n
                assigned[src] += n
                continue
            local = sorted(d for d in holders if topology.node_of(d) == node)
            targets = local if local else sorted(holders)
            base, remainder = divmod(n, len(targets))
            share = {d: base for d in targets}
            if remainder:
                for d in sorted(targets, key=lambda d: (assigned[d], d))[:remainder]:
                    share[d] += 1
            for d, k in share.items():
                route[src, expert, d] += k
                assigned[d] += k
    return DispatchPlan(route)


def dispatch_traffic(plan: DispatchPlan, token_bytes: int) -> TrafficMatrix:
    """Inter-device byte flow of the dispatch all-to-all (local tokens are free)."""
    moved = plan.route.sum(axis=1).astype(np.float64) * token_bytes
    np.fill_diagonal(moved, 0.0)
    return TrafficMatrix(moved)
