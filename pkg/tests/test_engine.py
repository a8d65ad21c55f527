"""Iteration timelines, policy engines, memory accounting, and run reports."""

import numpy as np
import pytest

from moesim import (
    ClusterTopology,
    ConfigError,
    MaterializationPlan,
    ModelConfig,
    Policy,
    PolicyKind,
    RunReport,
    ShardPlan,
    Trace,
    TraceMeta,
    TraceMismatchError,
    gen_synthetic_trace,
    make_even_partition,
    make_policy_state,
    memory_report,
    simulate_iteration,
    simulate_run,
)
from moesim.engine import CSV_COLUMNS, _snake_partition

MB = 1_000_000


def topo4():
    return ClusterTopology(nodes=2, devices_per_node=2, intra_bw=150e9, inter_bw=25e9)


def config(**overrides):
    values = dict(
        layers=2,
        experts_per_layer=8,
        expert_bytes=MB,
        token_bytes=512,
        attn_fwd_time=0.001,
        per_token_expert_time=1e-6,
    )
    values.update(overrides)
    return ModelConfig(**values)


def meta(**overrides):
    values = dict(iterations=10, layers=2, experts=8, devices=4, tokens_per_device=128)
    values.update(overrides)
    return TraceMeta(**values)


def uniform_trace():
    return gen_synthetic_trace(meta(), skew=1e9, drift=0.0, seed=1)


def skewed_trace():
    return gen_synthetic_trace(meta(), skew=0.25, drift=0.02, seed=3)


ALL_KINDS = [
    PolicyKind.EP,
    PolicyKind.FSSDP,
    PolicyKind.REPLICATE_ALL,
    PolicyKind.SWAP_BALANCE,
    PolicyKind.FLEX_REARRANGE,
]


# ---------------------------------------------------------------------------
# configuration validation
# ---------------------------------------------------------------------------


def test_model_config_validation():
    with pytest.raises(ConfigError):
        config(layers=0)
    with pytest.raises(ConfigError):
        config(expert_bytes=0)
    with pytest.raises(ConfigError):
        config(attn_fwd_time=-1.0)
    with pytest.raises(ConfigError):
        config(optimizer_multiplier=4.0)  # moments + master copy need >= 6x


def test_policy_labels_and_json():
    p = Policy(kind=PolicyKind.FSSDP, reshard_interval=10)
    assert p.label() == "fssdp"
    obj = p.to_json_obj()
    assert obj["kind"] == "fssdp" and obj["reshard_interval"] == 10
    assert make_policy_state(config(), topo4(), p).__class__.__name__ == "FssdpState"


# ---------------------------------------------------------------------------
# degeneracy: balanced gates leave every policy at plain expert parallelism
# ---------------------------------------------------------------------------


def test_uniform_trace_makes_all_policies_equal_ep():
    cfg, t, trace = config(), topo4(), uniform_trace()
    ep = simulate_run(cfg, t, Policy(kind=PolicyKind.EP), trace)
    for kind in ALL_KINDS:
        policy = Policy(kind=kind, interval=1, reserved_slots=2)
        report = simulate_run(cfg, t, policy, trace)
        assert report.total_latency == ep.total_latency
        for ours, theirs in zip(report.timelines, ep.timelines):
            assert ours.layers == theirs.layers
            assert ours.reshard_time == 0.0


def test_oversized_experts_degenerate_to_ep():
    # nothing fits in the overlap window, so the policy must not touch anything
    cfg = config(expert_bytes=10**12)
    t, trace = topo4(), skewed_trace()
    ep = simulate_run(cfg, t, Policy(kind=PolicyKind.EP), trace)
    fssdp = simulate_run(cfg, t, Policy(kind=PolicyKind.FSSDP), trace)
    assert fssdp.total_latency == ep.total_latency
    for ours, theirs in zip(fssdp.timelines, ep.timelines):
        assert ours.layers == theirs.layers


def test_explicit_zero_overlap_degenerates_to_ep():
    cfg, t, trace = config(), topo4(), skewed_trace()
    ep = simulate_run(cfg, t, Policy(kind=PolicyKind.EP), trace)
    fssdp = simulate_run(cfg, t, Policy(kind=PolicyKind.FSSDP, overlap_override=0), trace)
    assert fssdp.total_latency == ep.total_latency


# ---------------------------------------------------------------------------
# skewed gates: replication pays
# ---------------------------------------------------------------------------


def test_fssdp_beats_ep_on_skewed_trace():
    cfg, t, trace = config(), topo4(), skewed_trace()
    ep = simulate_run(cfg, t, Policy(kind=PolicyKind.EP), trace)
    fssdp = simulate_run(cfg, t, Policy(kind=PolicyKind.FSSDP), trace)
    assert fssdp.total_latency < ep.total_latency
    # replication actually happened: the fold-back collective is on the books
    assert any(r.sprs_time > 0 for tl in fssdp.timelines for r in tl.layers)
    assert any(r.calib_time > 0 for tl in fssdp.timelines for r in tl.layers)


def test_calibration_is_what_wins_on_mild_skew():
    # with the strict up-front gate, mild imbalance only pays after the gate
    # observes the real loads; disabling calibration falls back to the shards
    cfg, t, trace = config(), topo4(), skewed_trace()
    ep = simulate_run(cfg, t, Policy(kind=PolicyKind.EP), trace)
    off = simulate_run(cfg, t, Policy(kind=PolicyKind.FSSDP, calibration=False), trace)
    assert off.total_latency == ep.total_latency


def test_fssdp_records_keep_exposed_arithmetic():
    cfg, t, trace = config(), topo4(), skewed_trace()
    report = simulate_run(cfg, t, Policy(kind=PolicyKind.FSSDP, rematerialize=True), trace)
    for tl in report.timelines:
        for r in tl.layers:
            assert r.exposed_spag == max(0.0, r.spag_time - r.attn_fwd)
            assert r.exposed_sprs == max(
                0.0, r.spag_remat_time + r.sprs_time - 2.0 * r.attn_fwd
            )
            assert r.attn_bwd == 2.0 * r.attn_fwd
            assert r.expert_bwd == 2.0 * r.expert_fwd


def test_timeline_totals_add_up():
    cfg, t, trace = config(), topo4(), skewed_trace()
    for kind in ALL_KINDS:
        report = simulate_run(cfg, t, Policy(kind=kind, interval=1), trace)
        for tl in report.timelines:
            assert tl.total_latency == sum(r.total() for r in tl.layers) + tl.reshard_time
        assert report.total_latency == sum(tl.total_latency for tl in report.timelines)


def test_reshard_fires_and_is_charged():
    t = topo4()
    cfg = ModelConfig(
        layers=1,
        experts_per_layer=8,
        expert_bytes=5 * MB,
        token_bytes=1024,
        attn_fwd_time=0.0002,
        per_token_expert_time=1e-6,
    )
    trace = gen_synthetic_trace(
        meta(iterations=60, layers=1, tokens_per_device=512), skew=0.5, drift=0.1, seed=11
    )
    report = simulate_run(cfg, t, Policy(kind=PolicyKind.FSSDP, reshard_interval=5), trace)
    fired = [i for i, tl in enumerate(report.timelines) if tl.reshard_time > 0]
    assert fired and fired[0] == 5
    assert all(i % 5 == 0 for i in fired)


# ---------------------------------------------------------------------------
# baseline policies
# ---------------------------------------------------------------------------


def test_replicate_all_charges_exposed_rearrangement():
    t = ClusterTopology(nodes=4, devices_per_node=1, intra_bw=100e9, inter_bw=12.5e9)
    cfg = ModelConfig(
        layers=1,
        experts_per_layer=4,
        expert_bytes=25 * MB,
        token_bytes=1024,
        attn_fwd_time=0.001,
        per_token_expert_time=1e-6,
    )
    state = make_policy_state(cfg, t, Policy(kind=PolicyKind.REPLICATE_ALL))
    step = [np.tile([40, 2, 2, 2], (4, 1))]
    tl = simulate_iteration(cfg, t, state, step)
    # 75 MB fan-out over the node links plus a ring sync for the clone group
    assert tl.layers[0].rearrange_time == pytest.approx(9.02e-3)
    assert tl.layers[0].rearrange_time >= 6e-3


def test_replicate_all_ignores_balanced_layers():
    t = topo4()
    cfg = config(layers=1)
    state = make_policy_state(cfg, t, Policy(kind=PolicyKind.REPLICATE_ALL))
    tl = simulate_iteration(cfg, t, state, [np.full((4, 8), 16)])
    assert tl.layers[0].rearrange_time == 0.0


def test_snake_partition_pairs_heavy_with_light():
    template = make_even_partition(8, topo4())
    loads = np.array([80.0, 70, 60, 50, 40, 30, 20, 10])
    snake = _snake_partition(loads, template)
    assert snake.counts_per_device() == [2, 2, 2, 2]
    per_dev = [sum(loads[e] for e in snake.chunks_on(d)) for d in range(4)]
    assert per_dev == [90.0, 90.0, 90.0, 90.0]


def test_swap_balance_moves_once_and_wins():
    t = topo4()
    cfg = ModelConfig(
        layers=1,
        experts_per_layer=8,
        expert_bytes=MB,
        token_bytes=16,
        attn_fwd_time=0.0005,
        per_token_expert_time=1e-5,
    )
    row = np.array([400, 400, 40, 40, 40, 40, 40, 24])  # both hot experts on device 0
    steps = [[np.tile(row, (4, 1))] for _ in range(6)]
    trace = Trace(
        meta=meta(iterations=6, layers=1, tokens_per_device=1024), steps=steps
    )
    ep = simulate_run(cfg, t, Policy(kind=PolicyKind.EP), trace)
    swap = simulate_run(cfg, t, Policy(kind=PolicyKind.SWAP_BALANCE, interval=1), trace)
    moved = [
        i for i, tl in enumerate(swap.timelines) if any(r.rearrange_time > 0 for r in tl.layers)
    ]
    assert moved == [1]  # first iteration with history, then the layout stays put
    assert swap.total_latency < ep.total_latency


def test_flex_rearrange_zero_slots_is_plain_ep():
    cfg, t, trace = config(), topo4(), skewed_trace()
    ep = simulate_run(cfg, t, Policy(kind=PolicyKind.EP), trace)
    flex = simulate_run(
        cfg, t, Policy(kind=PolicyKind.FLEX_REARRANGE, reserved_slots=0, interval=1), trace
    )
    assert flex.total_latency == ep.total_latency
    for ours, theirs in zip(flex.timelines, ep.timelines):
        assert ours.layers == theirs.layers


def test_flex_rearrange_replicas_carry_optimizer_state():
    cfg, t, trace = config(), topo4(), skewed_trace()
    flex = simulate_run(
        cfg, t, Policy(kind=PolicyKind.FLEX_REARRANGE, reserved_slots=2, interval=1), trace
    )
    peaks = flex.memory_peaks()
    assert peaks["materialized_bytes"] > 0
    last = flex.timelines[-1].memory
    assert np.array_equal(
        last.optimizer_bytes,
        (last.param_bytes + last.materialized_bytes) * cfg.optimizer_multiplier,
    )


# ---------------------------------------------------------------------------
# memory accounting
# ---------------------------------------------------------------------------


def test_memory_retain_vs_rematerialize_ratio():
    t = topo4()
    cfg = config(layers=12, expert_bytes=25 * MB)
    plan = ShardPlan.even(12, 8, t)
    mats = []
    for l in range(12):
        base = plan.per_layer[l]
        extra = [(e, 0) for e in range(8) if 0 not in base.devices_of(e)][:2]
        target = base.union(extra)
        added = tuple(
            len(target.chunks_on(d)) - len(base.chunks_on(d)) for d in range(4)
        )
        mats.append(MaterializationPlan(base, target, added))
    retain = memory_report(plan, mats, cfg, "retain")
    remat = memory_report(plan, mats, cfg, "rematerialize")
    assert retain.materialized_bytes[0] == 600 * MB
    assert remat.materialized_bytes[0] == 50 * MB
    assert retain.materialized_bytes[0] / remat.materialized_bytes[0] == 12.0
    # optimizer state exists exactly once cluster-wide, replicas excluded
    assert retain.optimizer_total() == 12 * 8 * 25 * MB * 6.0
    assert remat.optimizer_total() == retain.optimizer_total()
    assert np.array_equal(retain.grad_bytes, retain.param_bytes + retain.materialized_bytes)


def test_memory_report_rejects_unknown_mode():
    plan = ShardPlan.even(2, 8, topo4())
    with pytest.raises(ConfigError):
        memory_report(plan, None, config(), "sticky")


# ---------------------------------------------------------------------------
# run driver and report
# ---------------------------------------------------------------------------


def test_simulate_run_rejects_mismatched_traces():
    cfg, t = config(), topo4()
    policy = Policy(kind=PolicyKind.EP)
    with pytest.raises(TraceMismatchError):
        simulate_run(cfg, t, policy, gen_synthetic_trace(meta(layers=3), seed=0))
    with pytest.raises(TraceMismatchError):
        simulate_run(cfg, t, policy, gen_synthetic_trace(meta(experts=4), seed=0))
    with pytest.raises(TraceMismatchError):
        simulate_run(cfg, t, policy, gen_synthetic_trace(meta(devices=2), seed=0))


def test_simulate_iteration_rejects_foreign_state():
    cfg, t = config(), topo4()
    state = make_policy_state(cfg, t, Policy(kind=PolicyKind.EP))
    with pytest.raises(ConfigError):
        simulate_iteration(config(layers=3), t, state, [np.full((4, 8), 16)] * 3)
    with pytest.raises(TraceMismatchError):
        simulate_iteration(cfg, t, state, [np.full((4, 8), 16)])  # one layer short


def test_run_report_shape_and_determinism():
    cfg, t, trace = config(), topo4(), skewed_trace()
    a = simulate_run(cfg, t, Policy(kind=PolicyKind.FSSDP), trace)
    b = simulate_run(cfg, t, Policy(kind=PolicyKind.FSSDP), trace)
    assert a.to_dict() == b.to_dict()
    rows = a.csv_rows()
    assert len(rows) == 10 * 2
    assert len(rows[0]) == len(CSV_COLUMNS)
    # reshard is only booked on a layer-0 row
    layer_col = CSV_COLUMNS.index("layer")
    reshard_col = CSV_COLUMNS.index("reshard_time")
    assert all(row[reshard_col] == 0.0 for row in rows if row[layer_col] != 0)
    d = a.to_dict()
    assert d["policy"]["kind"] == "fssdp"
    assert len(d["iteration_latencies"]) == 10
    assert len(d["per_layer_mean_latency"]) == 2
    assert sum(d["breakdown"].values()) == pytest.approx(a.total_latency)


def test_breakdown_components_cover_the_timeline():
    cfg, t, trace = config(), topo4(), skewed_trace()
    for kind in ALL_KINDS:
        report = simulate_run(cfg, t, Policy(kind=kind, interval=1, reserved_slots=2), trace)
        assert sum(report.breakdown().values()) == pytest.approx(report.total_latency)
