"""Chunk placements and the validity rules of the two sparse collectives.

A placement records which devices hold which parameter chunks (one chunk per
expert, one entry per replica).  The sparse all-gather materializes extra
replicas on top of a single-owner partition; the sparse reduce-scatter folds
replicas back down to single owners.  Both are described by (pre, post)
placement pairs and validated here:

* all-gather valid  <=>  pre is a partition and pre is a subset of post,
* reduce-scatter valid  <=>  post is a partition and post is a subset of pre.

The two rules are mirror images: a valid gather pair read backwards is a valid
reduce pair, and vice versa.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional

from .errors import DimensionError, DimensionMismatchError, InternalError
from .topology import ClusterTopology

# Verdict reasons
MISSING_CHUNK = "missing_chunk"
DUPLICATE_OWNER = "duplicate_owner"
DROPPED_ENTRY = "dropped_entry"


@dataclass(frozen=True)
class Verdict:
    """Outcome of a placement-pair check; carries the first violation found."""

    ok: bool
    reason: Optional[str] = None
    chunk: Optional[int] = None
    device: Optional[int] = None

    def describe(self) -> str:
        if self.ok:
            return "valid"
        parts = [self.reason or "invalid"]
        if self.chunk is not None:
            parts.append(f"chunk={self.chunk}")
        if self.device is not None:
            parts.append(f"device={self.device}")
        return " ".join(parts)


_VALID = Verdict(ok=True)


@dataclass(frozen=True)
class ChunkPlacement:
    """A set of (chunk, device) replica entries over fixed chunk/device counts."""

    num_chunks: int
    num_devices: int
    entries: frozenset[tuple[int, int]]

    def __post_init__(self) -> None:
        if self.num_chunks < 0 or self.num_devices <= 0:
            raise DimensionError(
                f"placement needs num_chunks >= 0 and num_devices > 0, got "
                f"{self.num_chunks}/{self.num_devices}"
            )
        if not isinstance(self.entries, frozenset):
            object.__setattr__(self, "entries", frozenset(self.entries))
        for chunk, device in self.entries:
            if not (0 <= chunk < self.num_chunks):
                raise DimensionError(f"chunk {chunk} out of range [0, {self.num_chunks})")
            if not (0 <= device < self.num_devices):
                raise DimensionError(f"device {device} out of range [0, {self.num_devices})")

    # -- construction ------------------------------------------------------

    @classmethod
    def from_pairs(
        cls, num_chunks: int, num_devices: int, pairs: Iterable[tuple[int, int]]
    ) -> "ChunkPlacement":
        return cls(num_chunks, num_devices, frozenset((int(c), int(d)) for c, d in pairs))

    def union(self, extra: Iterable[tuple[int, int]]) -> "ChunkPlacement":
        """Placement with additional replica entries (same dimensions)."""
        return ChunkPlacement(
            self.num_chunks, self.num_devices, self.entries | frozenset(extra)
        )

    # -- cached lookup tables ----------------------------------------------

    @cached_property
    def _by_chunk(self) -> tuple[frozenset[int], ...]:
        buckets: list[set[int]] = [set() for _ in range(self.num_chunks)]
        for chunk, device in self.entries:
            buckets[chunk].add(device)
        return tuple(frozenset(b) for b in buckets)

    @cached_property
    def _by_device(self) -> tuple[frozenset[int], ...]:
        buckets: list[set[int]] = [set() for _ in range(self.num_devices)]
        for chunk, device in self.entries:
            buckets[device].add(chunk)
        return tuple(frozenset(b) for b in buckets)

    # -- queries -------------------------------------------------------------

    def devices_of(self, chunk: int) -> frozenset[int]:
        return self._by_chunk[chunk]

    def chunks_on(self, device: int) -> frozenset[int]:
        return self._by_device[device]

    def owner(self, chunk: int) -> int:
        """Sole holder of `chunk`; only meaningful on partitions."""
        holders = self._by_chunk[chunk]
        if len(holders) != 1:
            raise InternalError(f"chunk {chunk} has {len(holders)} holders, expected 1")
        return next(iter(holders))

    def replica_counts(self) -> list[int]:
        return [len(h) for h in self._by_chunk]

    def counts_per_device(self) -> list[int]:
        return [len(c) for c in self._by_device]

    def is_partition(self) -> bool:
        return all(len(h) == 1 for h in self._by_chunk)

    def issubset(self, other: "ChunkPlacement") -> bool:
        return self.entries <= other.entries

    # -- serialization -------------------------------------------------------

    def sorted_pairs(self) -> list[list[int]]:
        return [[c, d] for c, d in sorted(self.entries)]

    def to_json_obj(self) -> dict:
        return {
            "num_chunks": self.num_chunks,
            "num_devices": self.num_devices,
            "entries": self.sorted_pairs(),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ChunkPlacement":
        try:
            return cls.from_pairs(
                int(obj["num_chunks"]), int(obj["num_devices"]), obj["entries"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DimensionError(f"malformed placement object: {exc}") from exc


def make_even_partition(num_chunks: int, topology: ClusterTopology) -> ChunkPlacement:
    """Contiguous one-owner-per-chunk partition, balanced to within one chunk.

    Device d owns a contiguous run of chunks; when the device count does not
    divide num_chunks, the lowest-index devices take the one-chunk remainders.
    """
    devices = topology.num_devices
    base, extra = divmod(num_chunks, devices)
    pairs = []
    chunk = 0
    for d in range(devices):
        count = base + (1 if d < extra else 0)
        for _ in range(count):
            pairs.append((chunk, d))
            chunk += 1
    return ChunkPlacement.from_pairs(num_chunks, devices, pairs)


def _check_dims(pre: ChunkPlacement, post: ChunkPlacement) -> None:
    if pre.num_chunks != post.num_chunks or pre.num_devices != post.num_devices:
        raise DimensionMismatchError(
            f"placement pair dimensions differ: "
            f"{pre.num_chunks}x{pre.num_devices} vs {post.num_chunks}x{post.num_devices}"
        )


def _check_partition(placement: ChunkPlacement) -> Optional[Verdict]:
    for chunk in range(placement.num_chunks):
        holders = placement.devices_of(chunk)
        if not holders:
            return Verdict(ok=False, reason=MISSING_CHUNK, chunk=chunk)
        if len(holders) > 1:
            # report the second-lowest holder as the offending duplicate
            dup = sorted(holders)[1]
            return Verdict(ok=False, reason=DUPLICATE_OWNER, chunk=chunk, device=dup)
    return None


def _check_subset(small: ChunkPlacement, big: ChunkPlacement) -> Optional[Verdict]:
    for chunk, device in sorted(small.entries):
        if (chunk, device) not in big.entries:
            return Verdict(ok=False, reason=DROPPED_ENTRY, chunk=chunk, device=device)
    return None


def validate_spag_pair(pre: ChunkPlacement, post: ChunkPlacement) -> Verdict:
    """Check a sparse all-gather pair: pre must be a partition contained in post."""
    _check_dims(pre, post)
    bad = _check_partition(pre) or _check_subset(pre, post)
    return bad if bad is not None else _VALID


def validate_sprs_pair(pre: ChunkPlacement, post: ChunkPlacement) -> Verdict:
    """Check a sparse reduce-scatter pair: post must be a partition contained in pre."""
    _check_dims(pre, post)
    bad = _check_partition(post) or _check_subset(post, pre)
    return bad if bad is not None else _VALID


@dataclass(frozen=True)
class ShardPlan:
    """Per-layer single-owner placements with exact per-device slot accounting.

    Every layer's placement is a partition of that layer's chunks, and the
    total number of chunks a device owns across all layers equals its slot
    target (layers*experts // devices, with any remainder going to the
    lowest-index devices).
    """

    per_layer: tuple[ChunkPlacement, ...]
    slots_per_device: int

    def __post_init__(self) -> None:
        if not self.per_layer:
            raise DimensionError("shard plan needs at least one layer")
        if not isinstance(self.per_layer, tuple):
            object.__setattr__(self, "per_layer", tuple(self.per_layer))
        devices = self.per_layer[0].num_devices
        total = 0
        for i, placement in enumerate(self.per_layer):
            if placement.num_devices != devices:
                raise DimensionError(f"layer {i} has a different device count")
            if not placement.is_partition():
                raise InternalError(f"layer {i} placement is not a partition")
            total += placement.num_chunks
        base, extra = divmod(total, devices)
        counts = [0] * devices
        for placement in self.per_layer:
            for d, n in enumerate(placement.counts_per_device()):
                counts[d] += n
        for d in range(devices):
            target = base + (1 if d < extra else 0)
            if counts[d] != target:
                raise InternalError(
                    f"device {d} owns {counts[d]} chunks, slot target is {target}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.per_layer)

    @property
    def num_devices(self) -> int:
        return self.per_layer[0].num_devices

    @classmethod
    def even(cls, layers: int, experts: int, topology: ClusterTopology) -> "ShardPlan":
        """Homogeneous starting plan: a contiguous partition in every layer.

        When experts % devices != 0 the window of devices owning one extra
        chunk rotates from layer to layer, so the across-layer totals still
        meet the balanced slot targets.
        """
        devices = topology.num_devices
        base, extra = divmod(experts, devices)
        placements = []
        cursor = 0
        for _ in range(layers):
            counts = [base] * devices
            for j in range(extra):
                counts[(cursor + j) % devices] += 1
            cursor = (cursor + extra) % devices
            pairs = []
            chunk = 0
            for d in range(devices):
                for _ in range(counts[d]):
                    pairs.append((chunk, d))
                    chunk += 1
            placements.append(ChunkPlacement.from_pairs(experts, devices, pairs))
        return cls(tuple(placements), (layers * experts) // devices)

    def to_json_obj(self) -> dict:
        return {
            "slots_per_device": self.slots_per_device,
            "layers": [p.to_json_obj() for p in self.per_layer],
        }
