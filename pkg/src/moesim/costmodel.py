"""Traffic and latency accounting for sparse collectives on a two-tier cluster.

Volumes are exact byte counts derived from placement pairs; latency follows an
alpha + bytes/bandwidth model where the charged time is the worst over all
constrained resources (each device's intra-node send and receive volume, and
each node's aggregated cross-node send and receive volume), all full duplex.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import floor

import numpy as np

from .errors import DimensionMismatchError, InvalidPairError
from .placement import ChunkPlacement, validate_spag_pair, validate_sprs_pair
from .topology import ClusterTopology


@dataclass(eq=False)
class TrafficMatrix:
    """Device-to-device byte counts; entry [s, r] is bytes sent from s to r."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise DimensionMismatchError(f"traffic matrix must be square, got {self.data.shape}")
        if np.any(self.data < 0):
            raise DimensionMismatchError("traffic matrix entries must be non-negative")
        if np.any(np.diag(self.data) != 0):
            raise DimensionMismatchError("traffic matrix diagonal must be zero (local moves are free)")

    @classmethod
    def zeros(cls, num_devices: int) -> "TrafficMatrix":
        return cls(np.zeros((num_devices, num_devices)))

    @property
    def num_devices(self) -> int:
        return self.data.shape[0]

    def total(self) -> float:
        return float(self.data.sum())

    def inbound(self) -> np.ndarray:
        return self.data.sum(axis=0)

    def outbound(self) -> np.ndarray:
        return self.data.sum(axis=1)

    def transpose(self) -> "TrafficMatrix":
        return TrafficMatrix(self.data.T.copy())

    def is_zero(self) -> bool:
        return not np.any(self.data)


@dataclass(frozen=True)
class SparsityReport:
    """Summary of one sparse collective's traffic.

    sparsity is the fraction of chunks that move between devices at all; the
    bottleneck device is the one with the largest per-direction volume
    (max of inbound and outbound, lowest index on ties).
    """

    sparsity: float
    total_interdevice_bytes: float
    bottleneck_device: int
    bottleneck_bytes: float


def _report(traffic: TrafficMatrix, touched_chunks: int, num_chunks: int) -> SparsityReport:
    per_device = np.maximum(traffic.inbound(), traffic.outbound())
    bottleneck = int(np.argmax(per_device))
    sparsity = touched_chunks / num_chunks if num_chunks else 0.0
    return SparsityReport(
        sparsity=sparsity,
        total_interdevice_bytes=traffic.total(),
        bottleneck_device=bottleneck,
        bottleneck_bytes=float(per_device[bottleneck]),
    )


def spag_traffic(
    pre: ChunkPlacement, post: ChunkPlacement, chunk_bytes: int
) -> tuple[TrafficMatrix, SparsityReport]:
    """Byte flow of a sparse all-gather from `pre` (a partition) to `post`.

    Each chunk's owner unicasts one full copy to every device that appears in
    post but not in pre; there are no relay trees.
    """
    verdict = validate_spag_pair(pre, post)
    if not verdict.ok:
        raise InvalidPairError(f"invalid all-gather pair: {verdict.describe()}")
    matrix = np.zeros((pre.num_devices, pre.num_devices))
    touched = 0
    for chunk in range(pre.num_chunks):
        owner = pre.owner(chunk)
        added = post.devices_of(chunk) - pre.devices_of(chunk)
        if added:
            touched += 1
            for dest in added:
                matrix[owner, dest] += chunk_bytes
    traffic = TrafficMatrix(matrix)
    return traffic, _report(traffic, touched, pre.num_chunks)


def sprs_traffic(
    pre: ChunkPlacement, post: ChunkPlacement, chunk_bytes: int
) -> tuple[TrafficMatrix, SparsityReport]:
    """Byte flow of a sparse reduce-scatter from `pre` down to `post` (a partition).

    Every non-final replica sends its chunk-sized contribution to the chunk's
    final owner, where the reduction lands.
    """
    verdict = validate_sprs_pair(pre, post)
    if not verdict.ok:
        raise InvalidPairError(f"invalid reduce-scatter pair: {verdict.describe()}")
    matrix = np.zeros((pre.num_devices, pre.num_devices))
    touched = 0
    for chunk in range(pre.num_chunks):
        final = post.owner(chunk)
        senders = pre.devices_of(chunk) - {final}
        if senders:
            touched += 1
            for src in senders:
                matrix[src, final] += chunk_bytes
    traffic = TrafficMatrix(matrix)
    return traffic, _report(traffic, touched, pre.num_chunks)


def allreduce_dp_volume(post: ChunkPlacement, chunk_bytes: int) -> float:
    """Gradient-sync volume if every replica group ran a ring all-reduce instead.

    Each chunk replicated on n > 1 devices contributes 2*(n-1)/n * chunk_bytes;
    unreplicated chunks need no synchronization.
    """
    volume = 0.0
    for holders in (post.devices_of(c) for c in range(post.num_chunks)):
        n = len(holders)
        if n > 1:
            volume += 2.0 * (n - 1) * chunk_bytes / n
    return volume


def collective_latency(traffic: TrafficMatrix, topology: ClusterTopology) -> float:
    """Alpha plus the worst per-resource transfer time for one traffic matrix.

    Intra-node transfers charge each endpoint device's intra-node send/receive
    capacity; cross-node transfers charge the aggregated per-node network
    send/receive capacity.  All directions are full duplex.  An all-zero
    matrix costs nothing (the collective is skipped entirely).
    """
    if traffic.num_devices != topology.num_devices:
        raise DimensionMismatchError(
            f"traffic is {traffic.num_devices} devices, topology has {topology.num_devices}"
        )
    if traffic.is_zero():
        return 0.0
    dev = topology.num_devices
    dev_in = np.zeros(dev)
    dev_out = np.zeros(dev)
    node_in = np.zeros(topology.nodes)
    node_out = np.zeros(topology.nodes)
    rows, cols = np.nonzero(traffic.data)
    for s, r in zip(rows.tolist(), cols.tolist()):
        volume = traffic.data[s, r]
        ns, nr = topology.node_of(s), topology.node_of(r)
        if ns == nr:
            dev_out[s] += volume
            dev_in[r] += volume
        else:
            node_out[ns] += volume
            node_in[nr] += volume
    worst = max(
        max(dev_in.max(), dev_out.max()) / topology.intra_bw,
        max(node_in.max(), node_out.max()) / topology.inter_bw,
    )
    return topology.alpha + worst


def overlap_degree(t_nonmoe: float, topology: ClusterTopology, expert_bytes: int) -> int:
    """How many experts can be fetched for free under `t_nonmoe` seconds of compute.

    Uses the slower tier when bandwidths differ (cross-node transfers dominate
    mixed fetches) and the uniform bandwidth otherwise; the result floors.
    """
    if t_nonmoe <= 0 or expert_bytes <= 0:
        return 0
    bw = topology.inter_bw if topology.inter_bw < topology.intra_bw else topology.intra_bw
    return int(floor(t_nonmoe * bw / expert_bytes))
