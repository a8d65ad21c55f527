"""Deterministic per-iteration simulation of MoE training placement policies.

Timeline contract, per layer of one iteration:

* forward: the replica gather runs under the same layer's attention forward
  and only its excess lands on the critical path; an accepted calibration
  fetch is charged in full (it runs after the gate); then dispatch all-to-all,
  expert forward (bottleneck device tokens x per-token time), gather
  all-to-all.
* backward: attention backward costs twice the forward; the gradient
  reduce-scatter — plus the second gather when re-materialization is on —
  hides under it, excess exposed; expert backward costs twice the forward;
  the two all-to-alls are priced like the forward pair (gradients retrace the
  token routes with transposed traffic).
* policy actions (replication, expert moves, re-sharding) are charged fully
  exposed; re-sharding lands at the iteration boundary.

Everything is a pure function of (config, topology, policy, trace): there is
no randomness anywhere in the engine, so equal inputs give bit-equal reports.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .costmodel import (
    TrafficMatrix,
    collective_latency,
    overlap_degree,
    spag_traffic,
    sprs_traffic,
)
from .dispatch import build_dispatch, dispatch_traffic
from .errors import ConfigError, TraceMismatchError
from .placement import ChunkPlacement, ShardPlan
from .planner import (
    GlobalLoadProfile,
    MaterializationPlan,
    calibrate,
    estimate_loads,
    estimate_moe_latency,
    heterogeneous_sharding,
    sparse_materialization,
)
from .topology import ClusterTopology
from .traces import Trace


@dataclass(frozen=True)
class ModelConfig:
    """Static model-side quantities the simulator needs."""

    layers: int
    experts_per_layer: int
    expert_bytes: int
    token_bytes: int
    attn_fwd_time: float
    per_token_expert_time: float
    optimizer_multiplier: float = 6.0

    def __post_init__(self) -> None:
        if self.layers <= 0 or self.experts_per_layer <= 0:
            raise ConfigError("layers and experts_per_layer must be positive")
        if self.expert_bytes <= 0 or self.token_bytes <= 0:
            raise ConfigError("expert_bytes and token_bytes must be positive")
        if self.attn_fwd_time < 0 or self.per_token_expert_time < 0:
            raise ConfigError("times must be non-negative")
        if self.optimizer_multiplier < 6:
            raise ConfigError(
                "optimizer_multiplier must be at least 6 (params + moments in "
                "full precision plus a full-precision master copy)"
            )


class PolicyKind(str, Enum):
    EP = "ep"
    FSSDP = "fssdp"
    REPLICATE_ALL = "replicate_all"
    SWAP_BALANCE = "swap_balance"
    FLEX_REARRANGE = "flex_rearrange"


@dataclass(frozen=True)
class Policy:
    """A placement policy plus its knobs; irrelevant knobs are ignored."""

    kind: PolicyKind
    window: int = 5
    calibration: bool = True
    rematerialize: bool = False
    reshard_interval: int = 100
    interval: int = 25
    reserved_slots: int = 0
    replicate_top_k: int = 1
    free_bytes_per_device: Optional[int] = None
    overlap_override: Optional[int] = None
    capacity_override: Optional[int] = None

    def label(self) -> str:
        return self.kind.value

    def to_json_obj(self) -> dict:
        obj = {
            "kind": self.kind.value,
            "window": self.window,
            "calibration": self.calibration,
            "rematerialize": self.rematerialize,
            "reshard_interval": self.reshard_interval,
            "interval": self.interval,
            "reserved_slots": self.reserved_slots,
            "replicate_top_k": self.replicate_top_k,
            "free_bytes_per_device": self.free_bytes_per_device,
            "overlap_override": self.overlap_override,
            "capacity_override": self.capacity_override,
        }
        return obj


@dataclass(frozen=True)
class LayerRecord:
    """Critical-path segments of one layer in one iteration (seconds).

    spag_time / sprs_time / spag_remat_time are the full collective latencies;
    only their exposed_* excesses count toward the total.
    """

    attn_fwd: float
    attn_bwd: float
    spag_time: float
    sprs_time: float
    spag_remat_time: float
    exposed_spag: float
    exposed_sprs: float
    calib_time: float
    a2a_time: float
    expert_fwd: float
    expert_bwd: float
    rearrange_time: float

    def total(self) -> float:
        return (
            self.attn_fwd
            + self.attn_bwd
            + self.exposed_spag
            + self.exposed_sprs
            + self.calib_time
            + self.a2a_time
            + self.expert_fwd
            + self.expert_bwd
            + self.rearrange_time
        )


@dataclass(eq=False)
class MemoryBreakdown:
    """Per-device byte accounting for one iteration."""

    param_bytes: np.ndarray
    grad_bytes: np.ndarray
    optimizer_bytes: np.ndarray
    materialized_bytes: np.ndarray

    def total_per_device(self) -> np.ndarray:
        return (
            self.param_bytes
            + self.grad_bytes
            + self.optimizer_bytes
            + self.materialized_bytes
        )

    def optimizer_total(self) -> float:
        return float(self.optimizer_bytes.sum())


@dataclass(frozen=True)
class IterationTimeline:
    layers: tuple[LayerRecord, ...]
    reshard_time: float
    memory: MemoryBreakdown
    total_latency: float


def memory_report(
    plan: ShardPlan,
    materializations: Optional[Sequence[Optional[MaterializationPlan]]],
    config: ModelConfig,
    mode: str = "retain",
) -> MemoryBreakdown:
    """Per-device expert memory under a shard plan and per-layer replications.

    mode "retain" keeps every layer's replicas live for the whole iteration
    (materialized = sum over layers); "rematerialize" re-fetches during
    backward so only the widest layer is ever resident (materialized = max).
    Gradients peak at params plus the materialized replicas; optimizer state
    exists only for owned shards, exactly once cluster-wide.
    """
    if mode not in ("retain", "rematerialize"):
        raise ConfigError(f"unknown memory mode {mode!r}")
    devices = plan.num_devices
    owned = np.zeros(devices, dtype=np.float64)
    for placement in plan.per_layer:
        owned += np.asarray(placement.counts_per_device(), dtype=np.float64)
    param = owned * config.expert_bytes

    added = np.zeros((plan.num_layers, devices), dtype=np.float64)
    if materializations is not None:
        for l, mat in enumerate(materializations):
            if mat is not None:
                added[l] = np.asarray(mat.added_per_device, dtype=np.float64)
    added_bytes = added * config.expert_bytes
    if mode == "retain":
        materialized = added_bytes.sum(axis=0)
    else:
        materialized = added_bytes.max(axis=0) if plan.num_layers else np.zeros(devices)

    return MemoryBreakdown(
        param_bytes=param,
        grad_bytes=param + materialized,
        optimizer_bytes=param * config.optimizer_multiplier,
        materialized_bytes=materialized,
    )


# ---------------------------------------------------------------------------
# policy engines
# ---------------------------------------------------------------------------

_MOVE_MULTIPLIER = 7  # parameters plus 6x optimizer state travel with an expert


def _ring_sync_latency(
    placement: ChunkPlacement, nbytes: int, topology: ClusterTopology
) -> float:
    """Ring all-reduce gradient sync across each chunk's replica group.

    Charged as the worst per-device ring volume over the slower tier when any
    group spans nodes.  This is a deliberately coarse model for the baseline
    policies that keep persistent replicas.
    """
    per_dev = np.zeros(placement.num_devices)
    spans = False
    for chunk in range(placement.num_chunks):
        holders = placement.devices_of(chunk)
        n = len(holders)
        if n > 1:
            share = 2.0 * (n - 1) * nbytes / n
            for d in holders:
                per_dev[d] += share
            if len({topology.node_of(d) for d in holders}) > 1:
                spans = True
    worst = float(per_dev.max())
    if worst == 0.0:
        return 0.0
    bw = topology.inter_bw if spans else topology.intra_bw
    return topology.alpha + worst / bw


def _move_latency(
    pairs: Sequence[tuple[int, int]],
    nbytes: int,
    topology: ClusterTopology,
) -> float:
    """Latency of relocating expert-sized payloads along (src, dst) pairs."""
    if not pairs:
        return 0.0
    matrix = np.zeros((topology.num_devices, topology.num_devices))
    for src, dst in pairs:
        if src != dst:
            matrix[src, dst] += nbytes
    traffic = TrafficMatrix(matrix)
    return collective_latency(traffic, topology)


class _PolicyState:
    """Mutable per-run state shared by every policy engine."""

    def __init__(
        self, config: ModelConfig, topology: ClusterTopology, policy: Policy
    ) -> None:
        self.config = config
        self.topo = topology
        self.policy = policy
        self.iteration = 0
        self.history: list[deque] = [
            deque(maxlen=max(1, policy.window)) for _ in range(config.layers)
        ]
        self.shards = ShardPlan.even(config.layers, config.experts_per_layer, topology)

    # -- hooks ---------------------------------------------------------------

    def run_iteration(self, step: Sequence[np.ndarray]) -> IterationTimeline:
        raise NotImplementedError

    # -- shared helpers --------------------------------------------------------

    def _estimate(self, layer: int) -> Optional[np.ndarray]:
        if not self.history[layer]:
            return None
        return estimate_loads(self.history[layer], self.policy.window)

    @staticmethod
    def _est_tokens(est: np.ndarray) -> np.ndarray:
        # gates route the *estimate*; the dispatcher wants integers
        return np.clip(np.rint(est), 0, None).astype(np.int64)

    def _moe_estimate(self, placement: ChunkPlacement, tokens: np.ndarray) -> float:
        return estimate_moe_latency(
            placement,
            tokens,
            self.topo,
            self.config.token_bytes,
            self.config.per_token_expert_time,
        )

    def _layer_record(
        self,
        actual: np.ndarray,
        placement: ChunkPlacement,
        *,
        spag: float = 0.0,
        sprs: float = 0.0,
        spag_remat: float = 0.0,
        calib: float = 0.0,
        rearrange: float = 0.0,
    ) -> LayerRecord:
        plan = build_dispatch(actual, placement, self.topo)
        traffic = dispatch_traffic(plan, self.config.token_bytes)
        one_way = collective_latency(traffic, self.topo) + collective_latency(
            traffic.transpose(), self.topo
        )
        compute = plan.max_device_tokens() * self.config.per_token_expert_time
        attn = self.config.attn_fwd_time
        return LayerRecord(
            attn_fwd=attn,
            attn_bwd=2.0 * attn,
            spag_time=spag,
            sprs_time=sprs,
            spag_remat_time=spag_remat,
            exposed_spag=max(0.0, spag - attn),
            exposed_sprs=max(0.0, spag_remat + sprs - 2.0 * attn),
            calib_time=calib,
            a2a_time=2.0 * one_way,
            expert_fwd=compute,
            expert_bwd=2.0 * compute,
            rearrange_time=rearrange,
        )

    def _push_history(self, step: Sequence[np.ndarray]) -> None:
        for l, counts in enumerate(step):
            self.history[l].append(np.asarray(counts, dtype=np.int64))

    def _finish(
        self,
        records: list[LayerRecord],
        reshard_time: float,
        memory: MemoryBreakdown,
    ) -> IterationTimeline:
        self.iteration += 1
        total = sum(r.total() for r in records) + reshard_time
        return IterationTimeline(
            layers=tuple(records),
            reshard_time=reshard_time,
            memory=memory,
            total_latency=total,
        )


class EPState(_PolicyState):
    """Static expert parallelism: the even partition, nothing else."""

    def run_iteration(self, step: Sequence[np.ndarray]) -> IterationTimeline:
        records = [
            self._layer_record(actual, self.shards.per_layer[l])
            for l, actual in enumerate(step)
        ]
        memory = memory_report(self.shards, None, self.config, "retain")
        self._push_history(step)
        return self._finish(records, 0.0, memory)


class FssdpState(_PolicyState):
    """Sharded base placement with per-iteration sparse replica materialization."""

    def __init__(
        self, config: ModelConfig, topology: ClusterTopology, policy: Policy
    ) -> None:
        super().__init__(config, topology, policy)
        if policy.overlap_override is not None:
            self.t = policy.overlap_override
        else:
            self.t = overlap_degree(config.attn_fwd_time, topology, config.expert_bytes)
        if policy.capacity_override is not None:
            self.m = policy.capacity_override
        elif policy.free_bytes_per_device is not None:
            self.m = policy.free_bytes_per_device // config.expert_bytes
        else:
            self.m = config.experts_per_layer

    # -- adoption gates -------------------------------------------------------

    def _adopt_materialization(
        self, cand: MaterializationPlan, est: np.ndarray
    ) -> bool:
        """Adopt a planned replication only if the estimate says it pays.

        The fetch and fold-back collectives are priced in full, exactly like
        the calibration acceptance rule, even though the schedule may hide
        them: replica bandwidth is not free, and pricing it keeps the policy
        from replicating for marginal all-to-all savings on already-balanced
        loads (where it must match plain expert parallelism bit for bit).
        """
        tokens = self._est_tokens(est)
        before = self._moe_estimate(cand.source, tokens)
        after = self._moe_estimate(cand.target, tokens)
        spag_lat = collective_latency(
            spag_traffic(cand.source, cand.target, self.config.expert_bytes)[0],
            self.topo,
        )
        sprs_lat = collective_latency(
            sprs_traffic(cand.target, cand.source, self.config.expert_bytes)[0],
            self.topo,
        )
        remat = spag_lat if self.policy.rematerialize else 0.0
        return after + spag_lat + sprs_lat + remat < before

    def _shard_score(
        self, plan: ShardPlan, profile: GlobalLoadProfile
    ) -> tuple[float, float]:
        dev_load = np.zeros(self.topo.num_devices)
        for l, placement in enumerate(plan.per_layer):
            for e in range(placement.num_chunks):
                dev_load[placement.owner(e)] += profile.per_layer[l][e]
        node_load = [
            dev_load[list(self.topo.devices_in_node(n))].sum()
            for n in range(self.topo.nodes)
        ]
        return (float(max(node_load)), float(dev_load.max()))

    def _reshard_cost(self, candidate: ShardPlan) -> float:
        moves = []
        for old, new in zip(self.shards.per_layer, candidate.per_layer):
            for e in range(old.num_chunks):
                src, dst = old.owner(e), new.owner(e)
                if src != dst:
                    moves.append((src, dst))
        return _move_latency(
            moves, _MOVE_MULTIPLIER * self.config.expert_bytes, self.topo
        )

    # -- main loop -------------------------------------------------------------

    def run_iteration(self, step: Sequence[np.ndarray]) -> IterationTimeline:
        cfg = self.config
        if self.t <= 0 or self.m <= 0:
            # nothing can be fetched inside the overlap window: the policy
            # degenerates to plain expert parallelism, re-sharding included
            records = [
                self._layer_record(actual, self.shards.per_layer[l])
                for l, actual in enumerate(step)
            ]
            memory = memory_report(self.shards, None, cfg, "retain")
            self._push_history(step)
            return self._finish(records, 0.0, memory)

        reshard_time = 0.0
        if (
            self.iteration > 0
            and self.policy.reshard_interval > 0
            and self.iteration % self.policy.reshard_interval == 0
            and all(self.history)
        ):
            profile = GlobalLoadProfile(
                np.stack(
                    [self._estimate(l).sum(axis=0) for l in range(cfg.layers)]
                )
            )
            candidate = heterogeneous_sharding(profile, self.t, self.topo)
            if self._shard_score(candidate, profile) < self._shard_score(
                self.shards, profile
            ):
                reshard_time = self._reshard_cost(candidate)
                self.shards = candidate

        records: list[LayerRecord] = []
        mats: list[MaterializationPlan] = []
        for l, actual in enumerate(step):
            base = self.shards.per_layer[l]
            identity = MaterializationPlan(
                base, base, tuple([0] * self.topo.num_devices)
            )
            plan = identity
            est = self._estimate(l)
            if est is not None:
                cand = sparse_materialization(base, est, self.t, self.m, self.topo)
                if not cand.is_identity and self._adopt_materialization(cand, est):
                    plan = cand
            spag_lat = 0.0
            if not plan.is_identity:
                spag_lat = collective_latency(
                    spag_traffic(base, plan.target, cfg.expert_bytes)[0], self.topo
                )
            calib_time = 0.0
            if self.policy.calibration:
                added_max = max(plan.added_per_device) if plan.added_per_device else 0
                outcome = calibrate(
                    plan,
                    actual,
                    self.m - added_max,
                    max(0.0, cfg.attn_fwd_time - spag_lat),
                    self.topo,
                    cfg.expert_bytes,
                    cfg.token_bytes,
                    cfg.per_token_expert_time,
                )
                if outcome.accepted:
                    plan = outcome.plan
                    calib_time = outcome.extra_seconds
                if not plan.is_identity:
                    # fall back to the bare shards when the observed loads say
                    # the in-flight replication does not pay: replicas are
                    # dropped unused (no gradients to fold back), only the
                    # already-issued fetch remains on the books
                    actual_tokens = np.asarray(actual, dtype=np.int64)
                    kept = self._moe_estimate(plan.target, actual_tokens) + calib_time
                    if kept >= self._moe_estimate(base, actual_tokens):
                        plan = identity
                        calib_time = 0.0
            sprs_lat = 0.0
            remat_lat = 0.0
            if not plan.is_identity:
                sprs_lat = collective_latency(
                    sprs_traffic(plan.target, base, cfg.expert_bytes)[0], self.topo
                )
                if self.policy.rematerialize:
                    remat_lat = collective_latency(
                        spag_traffic(base, plan.target, cfg.expert_bytes)[0], self.topo
                    )
            records.append(
                self._layer_record(
                    actual,
                    plan.target,
                    spag=spag_lat,
                    sprs=sprs_lat,
                    spag_remat=remat_lat,
                    calib=calib_time,
                )
            )
            mats.append(plan)
        mode = "rematerialize" if self.policy.rematerialize else "retain"
        memory = memory_report(self.shards, mats, cfg, mode)
        self._push_history(step)
        return self._finish(records, reshard_time, memory)


class ReplicateAllState(_PolicyState):
    """Replicate the top-k overloaded experts everywhere, each iteration.

    Replication and ring gradient sync are charged fully exposed — this mirrors
    systems that clone hot experts cluster-wide and all-reduce their gradients.
    An expert counts as overloaded only when its load strictly exceeds the
    layer mean, so a balanced gate triggers nothing.
    """

    def run_iteration(self, step: Sequence[np.ndarray]) -> IterationTimeline:
        cfg = self.config
        records = []
        mats: list[Optional[MaterializationPlan]] = []
        for l, actual in enumerate(step):
            base = self.shards.per_layer[l]
            per_expert = np.asarray(actual).sum(axis=0)
            mean = per_expert.mean()
            overloaded = [e for e in range(cfg.experts_per_layer) if per_expert[e] > mean]
            top = sorted(overloaded, key=lambda e: (-per_expert[e], e))
            top = top[: max(0, self.policy.replicate_top_k)]
            rearrange = 0.0
            target = base
            if top:
                extra = [
                    (e, d)
                    for e in top
                    for d in range(self.topo.num_devices)
                    if d not in base.devices_of(e)
                ]
                target = base.union(extra)
                rearrange = collective_latency(
                    spag_traffic(base, target, cfg.expert_bytes)[0], self.topo
                ) + _ring_sync_latency(target, cfg.expert_bytes, self.topo)
            added = [
                len(target.chunks_on(d)) - len(base.chunks_on(d))
                for d in range(self.topo.num_devices)
            ]
            mats.append(MaterializationPlan(base, target, tuple(added)))
            records.append(self._layer_record(actual, target, rearrange=rearrange))
        memory = memory_report(self.shards, mats, cfg, "retain")
        self._push_history(step)
        return self._finish(records, 0.0, memory)


def _snake_partition(per_expert: np.ndarray, placement_template: ChunkPlacement) -> ChunkPlacement:
    """Heavy-light pairing: deal experts in descending load order boustrophedon.

    The heaviest and lightest experts of each pass share a device, which is
    the classic greedy fix for per-device load spread.  Each device keeps
    exactly the expert count it has in the template, so swaps never change
    slot usage.
    """
    experts = placement_template.num_chunks
    devices = placement_template.num_devices
    target = [len(placement_template.chunks_on(d)) for d in range(devices)]
    order = sorted(range(experts), key=lambda e: (-per_expert[e], e))
    seq: list[int] = []
    forward = True
    while len(seq) < experts:
        rng = range(devices) if forward else range(devices - 1, -1, -1)
        for d in rng:
            if target[d] > 0 and len(seq) < experts:
                seq.append(d)
                target[d] -= 1
        forward = not forward
    return ChunkPlacement.from_pairs(
        experts, devices, ((e, seq[i]) for i, e in enumerate(order))
    )


class SwapBalanceState(_PolicyState):
    """Periodically permute expert ownership to pair heavy and light experts.

    Moves cost the expert plus its optimizer state and are only made when the
    estimated MoE latency strictly improves, so a balanced gate stays put.
    """

    def __init__(self, config, topology, policy) -> None:
        super().__init__(config, topology, policy)
        self.current: list[ChunkPlacement] = list(self.shards.per_layer)

    def run_iteration(self, step: Sequence[np.ndarray]) -> IterationTimeline:
        cfg = self.config
        records = []
        for l, actual in enumerate(step):
            rearrange = 0.0
            if self.policy.interval > 0 and self.iteration % self.policy.interval == 0:
                est = self._estimate(l)
                if est is not None:
                    proposed = _snake_partition(est.sum(axis=0), self.current[l])
                    if proposed.entries != self.current[l].entries:
                        tokens = self._est_tokens(est)
                        if self._moe_estimate(proposed, tokens) < self._moe_estimate(
                            self.current[l], tokens
                        ):
                            moves = [
                                (self.current[l].owner(e), proposed.owner(e))
                                for e in range(cfg.experts_per_layer)
                                if self.current[l].owner(e) != proposed.owner(e)
                            ]
                            rearrange = _move_latency(
                                moves, _MOVE_MULTIPLIER * cfg.expert_bytes, self.topo
                            )
                            self.current[l] = proposed
            records.append(self._layer_record(actual, self.current[l], rearrange=rearrange))
        plan = ShardPlan(tuple(self.current), self.shards.slots_per_device)
        memory = memory_report(plan, None, cfg, "retain")
        self._push_history(step)
        return self._finish(records, 0.0, memory)


class FlexRearrangeState(_PolicyState):
    """Keep a few reserved replica slots per device and re-point them periodically.

    Replicas persist across iterations (their gradients ring-sync every
    iteration, charged exposed) and carry optimizer state with them; adding a
    replica pays the expert+optimizer move cost.  With zero reserved slots the
    policy degenerates to plain expert parallelism.
    """

    def __init__(self, config, topology, policy) -> None:
        super().__init__(config, topology, policy)
        self.current: list[ChunkPlacement] = list(self.shards.per_layer)

    def run_iteration(self, step: Sequence[np.ndarray]) -> IterationTimeline:
        cfg = self.config
        records = []
        for l, actual in enumerate(step):
            base = self.shards.per_layer[l]
            rearrange = 0.0
            if (
                self.policy.interval > 0
                and self.iteration % self.policy.interval == 0
                and self.policy.reserved_slots > 0
            ):
                est = self._estimate(l)
                if est is not None:
                    proposed = sparse_materialization(
                        base,
                        est,
                        cfg.experts_per_layer,
                        self.policy.reserved_slots,
                        self.topo,
                    ).target
                    if proposed.entries != self.current[l].entries:
                        tokens = self._est_tokens(est)
                        cur_score = self._moe_estimate(
                            self.current[l], tokens
                        ) + _ring_sync_latency(self.current[l], cfg.expert_bytes, self.topo)
                        new_score = self._moe_estimate(
                            proposed, tokens
                        ) + _ring_sync_latency(proposed, cfg.expert_bytes, self.topo)
                        if new_score < cur_score:
                            fresh = proposed.entries - self.current[l].entries
                            moves = [(base.owner(e), d) for e, d in sorted(fresh)]
                            rearrange = _move_latency(
                                moves, _MOVE_MULTIPLIER * cfg.expert_bytes, self.topo
                            )
                            self.current[l] = proposed
            rearrange += _ring_sync_latency(self.current[l], cfg.expert_bytes, self.topo)
            records.append(self._layer_record(actual, self.current[l], rearrange=rearrange))

        devices = self.topo.num_devices
        owned = np.zeros(devices)
        extras = np.zeros(devices)
        for l in range(cfg.layers):
            owned += np.asarray(self.shards.per_layer[l].counts_per_device(), dtype=np.float64)
            extras += np.asarray(self.current[l].counts_per_device(), dtype=np.float64) - np.asarray(
                self.shards.per_layer[l].counts_per_device(), dtype=np.float64
            )
        param = owned * cfg.expert_bytes
        replicas = extras * cfg.expert_bytes
        memory = MemoryBreakdown(
            param_bytes=param,
            grad_bytes=param + replicas,
            optimizer_bytes=(param + replicas) * cfg.optimizer_multiplier,
            materialized_bytes=replicas,
        )
        self._push_history(step)
        return self._finish(records, 0.0, memory)


_POLICY_STATES = {
    PolicyKind.EP: EPState,
    PolicyKind.FSSDP: FssdpState,
    PolicyKind.REPLICATE_ALL: ReplicateAllState,
    PolicyKind.SWAP_BALANCE: SwapBalanceState,
    PolicyKind.FLEX_REARRANGE: FlexRearrangeState,
}


def make_policy_state(
    config: ModelConfig, topology: ClusterTopology, policy: Policy
) -> _PolicyState:
    try:
        cls = _POLICY_STATES[policy.kind]
    except KeyError:
        raise ConfigError(f"unknown policy kind {policy.kind!r}") from None
    return cls(config, topology, policy)


def simulate_iteration(
    config: ModelConfig,
    topology: ClusterTopology,
    state: _PolicyState,
    step_loads: Sequence[np.ndarray],
) -> IterationTimeline:
    """Advance one policy state by one iteration of gate decisions."""
    if state.config != config or state.topo != topology:
        raise ConfigError("state was built for a different config/topology")
    if len(step_loads) != config.layers:
        raise TraceMismatchError(
            f"step has {len(step_loads)} layers, config declares {config.layers}"
        )
    return state.run_iteration(step_loads)


# ---------------------------------------------------------------------------
# whole-run driver and report
# ---------------------------------------------------------------------------

CSV_COLUMNS = [
    "policy",
    "iteration",
    "layer",
    "attn_fwd",
    "attn_bwd",
    "spag_time",
    "spag_remat_time",
    "sprs_time",
    "exposed_spag",
    "exposed_sprs",
    "calib_time",
    "a2a_time",
    "expert_fwd",
    "expert_bwd",
    "rearrange_time",
    "reshard_time",
    "layer_total",
]


@dataclass(eq=False)
class RunReport:
    """Everything one policy did over one trace."""

    policy: Policy
    total_latency: float
    timelines: list[IterationTimeline]

    def label(self) -> str:
        return self.policy.label()

    def iteration_latencies(self) -> list[float]:
        return [t.total_latency for t in self.timelines]

    def per_layer_mean(self) -> list[float]:
        layers = len(self.timelines[0].layers)
        means = []
        for l in range(layers):
            means.append(
                float(np.mean([t.layers[l].total() for t in self.timelines]))
            )
        return means

    def breakdown(self) -> dict[str, float]:
        keys = {
            "attention": lambda r: r.attn_fwd + r.attn_bwd,
            "all_to_all": lambda r: r.a2a_time,
            "expert_compute": lambda r: r.expert_fwd + r.expert_bwd,
            "exposed_gather": lambda r: r.exposed_spag,
            "exposed_reduce": lambda r: r.exposed_sprs,
            "calibration": lambda r: r.calib_time,
            "rearrange": lambda r: r.rearrange_time,
        }
        out = {name: 0.0 for name in keys}
        for timeline in self.timelines:
            for record in timeline.layers:
                for name, fn in keys.items():
                    out[name] += fn(record)
        out["reshard"] = float(sum(t.reshard_time for t in self.timelines))
        return out

    def memory_peaks(self) -> dict[str, float]:
        cats = {
            "param_bytes": [],
            "grad_bytes": [],
            "optimizer_bytes": [],
            "materialized_bytes": [],
        }
        device_totals = []
        optimizer_totals = []
        for timeline in self.timelines:
            mem = timeline.memory
            for name in cats:
                cats[name].append(float(getattr(mem, name).max()))
            device_totals.append(float(mem.total_per_device().max()))
            optimizer_totals.append(mem.optimizer_total())
        peaks = {name: max(vals) for name, vals in cats.items()}
        peaks["device_total"] = max(device_totals)
        peaks["optimizer_global"] = max(optimizer_totals)
        return peaks

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.to_json_obj(),
            "total_latency": float(self.total_latency),
            "iteration_latencies": [float(x) for x in self.iteration_latencies()],
            "per_layer_mean_latency": [float(x) for x in self.per_layer_mean()],
            "breakdown": {k: float(v) for k, v in self.breakdown().items()},
            "memory_peaks": {k: float(v) for k, v in self.memory_peaks().items()},
        }

    def csv_rows(self) -> list[list]:
        rows = []
        for i, timeline in enumerate(self.timelines):
            for l, r in enumerate(timeline.layers):
                rows.append(
                    [
                        self.label(),
                        i,
                        l,
                        r.attn_fwd,
                        r.attn_bwd,
                        r.spag_time,
                        r.spag_remat_time,
                        r.sprs_time,
                        r.exposed_spag,
                        r.exposed_sprs,
                        r.calib_time,
                        r.a2a_time,
                        r.expert_fwd,
                        r.expert_bwd,
                        r.rearrange_time,
                        timeline.reshard_time if l == 0 else 0.0,
                        r.total() + (timeline.reshard_time if l == 0 else 0.0),
                    ]
                )
        return rows


def simulate_run(
    config: ModelConfig,
    topology: ClusterTopology,
    policy: Policy,
    trace: Trace,
) -> RunReport:
    """Drive one policy over a whole trace, deterministically."""
    meta = trace.meta
    if meta.layers != config.layers:
        raise TraceMismatchError(
            f"trace has {meta.layers} layers, config declares {config.layers}"
        )
    if meta.experts != config.experts_per_layer:
        raise TraceMismatchError(
            f"trace has {meta.experts} experts, config declares {config.experts_per_layer}"
        )
    if meta.devices != topology.num_devices:
        raise TraceMismatchError(
            f"trace has {meta.devices} devices, topology has {topology.num_devices}"
        )
    state = make_policy_state(config, topology, policy)
    timelines = [
        simulate_iteration(config, topology, state, step) for step in trace.steps
    ]
    total = float(sum(t.total_latency for t in timelines))
    return RunReport(policy=policy, total_latency=total, timelines=timelines)
