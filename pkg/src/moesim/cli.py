"""Command-line front end: simulate | plan | validate | gen-trace | compare.

One JSON config document drives everything; flags override config values.
Every command is deterministic given config + seed, and report files are
byte-identical across repeated runs.  Exit codes: 0 ok, 1 config error,
2 data error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys

import numpy as np

from .engine import (
    CSV_COLUMNS,
    ModelConfig,
    Policy,
    PolicyKind,
    RunReport,
    simulate_run,
)
from .errors import ConfigError, DataError, InternalError, MoesimError
from .placement import (
    ChunkPlacement,
    ShardPlan,
    make_even_partition,
    validate_spag_pair,
    validate_sprs_pair,
)
from .planner import (
    GlobalLoadProfile,
    heterogeneous_sharding,
    sparse_materialization,
)
from .topology import ClusterTopology
from .traces import Trace, TraceMeta, gen_synthetic_trace, load_trace, save_trace

SCHEMA_VERSION = 1

_POLICY_FIELDS = {f.name: f for f in dataclasses.fields(Policy) if f.name != "kind"}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as config errors (exit 1)."""

    def error(self, message):  # noqa: A002 - argparse API
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def _load_json(path: str, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {what} file {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} file {path} is not valid JSON: {exc}") from exc


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return obj[key]


def load_config(path: str) -> dict:
    cfg = _load_json(path, "config")
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"config schema_version {version} unsupported (expected {SCHEMA_VERSION})"
        )
    return cfg


def build_topology(cfg: dict) -> ClusterTopology:
    section = _require(cfg, "topology", "config")
    return ClusterTopology(
        nodes=int(_require(section, "nodes", "topology")),
        devices_per_node=int(_require(section, "devices_per_node", "topology")),
        intra_bw=float(_require(section, "intra_bw", "topology")),
        inter_bw=float(_require(section, "inter_bw", "topology")),
        alpha=float(section.get("alpha", 10e-6)),
    )


def build_model(cfg: dict) -> ModelConfig:
    section = _require(cfg, "model", "config")
    return ModelConfig(
        layers=int(_require(section, "layers", "model")),
        experts_per_layer=int(_require(section, "experts_per_layer", "model")),
        expert_bytes=int(_require(section, "expert_bytes", "model")),
        token_bytes=int(_require(section, "token_bytes", "model")),
        attn_fwd_time=float(_require(section, "attn_fwd_time", "model")),
        per_token_expert_time=float(
            _require(section, "per_token_expert_time", "model")
        ),
        optimizer_multiplier=float(section.get("optimizer_multiplier", 6.0)),
    )


def build_policy(section: dict) -> Policy:
    if not isinstance(section, dict):
        raise ConfigError("each policy must be a JSON object")
    kind_name = _require(section, "kind", "policy")
    try:
        kind = PolicyKind(kind_name)
    except ValueError:
        valid = ", ".join(k.value for k in PolicyKind)
        raise ConfigError(f"unknown policy kind {kind_name!r} (expected one of {valid})")
    kwargs = {}
    for key, value in section.items():
        if key == "kind":
            continue
        if key not in _POLICY_FIELDS:
            raise ConfigError(f"unknown policy option {key!r}")
        kwargs[key] = value
    return Policy(kind=kind, **kwargs)


def build_policies(cfg: dict) -> list[Policy]:
    section = _require(cfg, "policies", "config")
    if not isinstance(section, list) or not section:
        raise ConfigError("config 'policies' must be a non-empty list")
    return [build_policy(p) for p in section]


def resolve_trace(
    cfg: dict,
    model: ModelConfig,
    topo: ClusterTopology,
    trace_flag: str | None,
    seed_flag: int | None,
) -> tuple[Trace, dict]:
    """Return (trace, echo) where echo describes where the trace came from."""
    section = cfg.get("trace", {})
    if trace_flag is not None:
        return load_trace(trace_flag), {"path": trace_flag}
    if "path" in section:
        return load_trace(section["path"]), {"path": section["path"]}
    if "synthetic" in section:
        syn = section["synthetic"]
        seed = seed_flag if seed_flag is not None else int(syn.get("seed", 0))
        meta = TraceMeta(
            iterations=int(_require(syn, "iterations", "trace.synthetic")),
            layers=model.layers,
            experts=model.experts_per_layer,
            devices=topo.num_devices,
            tokens_per_device=int(
                _require(syn, "tokens_per_device", "trace.synthetic")
            ),
        )
        skew = float(syn.get("skew", 1.0))
        drift = float(syn.get("drift", 0.05))
        trace = gen_synthetic_trace(meta, skew=skew, drift=drift, seed=seed)
        echo = {"synthetic": {"iterations": meta.iterations,
                              "tokens_per_device": meta.tokens_per_device,
                              "skew": skew, "drift": drift, "seed": seed}}
        return trace, echo
    raise ConfigError("config has no trace source: set trace.path or trace.synthetic")


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def dumps_report(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def rows_to_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _config_echo(cfg: dict, trace_echo: dict, seed_flag: int | None) -> dict:
    echo = {k: cfg[k] for k in ("topology", "model") if k in cfg}
    echo["trace"] = trace_echo
    if seed_flag is not None:
        echo["seed_flag"] = seed_flag
    return echo


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _summary_rows(reports: list[RunReport]) -> list[dict]:
    ep_total = None
    for r in reports:
        if r.policy.kind is PolicyKind.EP:
            ep_total = r.total_latency
            break
    rows = []
    for r in reports:
        speedup = (
            ep_total / r.total_latency if ep_total and r.total_latency > 0 else None
        )
        rows.append(
            {
                "policy": r.label(),
                "total_latency": r.total_latency,
                "speedup_vs_ep": speedup,
                "peak_device_bytes": r.memory_peaks()["device_total"],
            }
        )
    return rows


def _print_summary(rows: list[dict]) -> None:
    print(f"{'policy':<16} {'total (ms)':>12} {'vs ep':>8} {'peak dev (MiB)':>15}")
    for row in rows:
        speed = f"{row['speedup_vs_ep']:.2f}x" if row["speedup_vs_ep"] else "-"
        print(
            f"{row['policy']:<16} {row['total_latency'] * 1e3:>12.3f} "
            f"{speed:>8} {row['peak_device_bytes'] / 2**20:>15.1f}"
        )


def _emit_reports(
    reports: list[RunReport],
    cfg: dict,
    trace_echo: dict,
    args,
    name: str,
    extra: dict | None = None,
) -> None:
    os.makedirs(args.out, exist_ok=True)
    rows = _summary_rows(reports)
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": _config_echo(cfg, trace_echo, args.seed),
        "runs": [r.to_dict() for r in reports],
        "summary": rows,
    }
    if extra:
        report.update(extra)
    if args.format in ("json", "both"):
        path = os.path.join(args.out, f"{name}.json")
        _write_text(path, dumps_report(report))
        print(f"wrote {path}")
    if args.format in ("csv", "both"):
        all_rows = [row for r in reports for row in r.csv_rows()]
        path = os.path.join(args.out, f"{name}.csv")
        _write_text(path, rows_to_csv(CSV_COLUMNS, all_rows))
        print(f"wrote {path}")
    if args.figures:
        from . import figures

        paths = [
            figures.latency_curves(reports, os.path.join(args.out, "latency.png")),
            figures.breakdown_bars(reports, os.path.join(args.out, "breakdown.png")),
            figures.memory_bars(reports, os.path.join(args.out, "memory.png")),
        ]
        for p in paths:
            print(f"wrote {p}")
    _print_summary(rows)


def cmd_simulate(args) -> int:
    if args.config is None:
        raise ConfigError("simulate requires --config")
    cfg = load_config(args.config)
    topo = build_topology(cfg)
    model = build_model(cfg)
    policies = build_policies(cfg)
    trace, trace_echo = resolve_trace(cfg, model, topo, args.trace, args.seed)
    reports = [simulate_run(model, topo, policy, trace) for policy in policies]
    _emit_reports(reports, cfg, trace_echo, args, "report")
    return 0


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------


def _load_loads(path: str) -> np.ndarray:
    obj = _load_json(path, "loads")
    if isinstance(obj, dict):
        obj = obj.get("per_layer", obj.get("per_expert"))
        if obj is None:
            raise DataError(
                f"loads file {path} must hold a list or a per_layer/per_expert key"
            )
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim not in (1, 2) or arr.size == 0:
        raise DataError(f"loads file {path} must hold a 1-D or 2-D numeric array")
    if (arr < 0).any():
        raise DataError(f"loads file {path} contains negative loads")
    return arr


def cmd_plan(args) -> int:
    if args.config is None:
        raise ConfigError("plan requires --config")
    cfg = load_config(args.config)
    topo = build_topology(cfg)
    model = build_model(cfg)
    loads = _load_loads(args.loads)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "plan.json")

    if args.mode == "materialize":
        if args.t is None or args.m is None:
            raise ConfigError("plan --mode materialize requires --t and --m")
        if loads.ndim == 2:
            if not 0 <= args.layer < loads.shape[0]:
                raise ConfigError(
                    f"--layer {args.layer} out of range for {loads.shape[0]} layers"
                )
            loads = loads[args.layer]
        if loads.shape[0] != model.experts_per_layer:
            raise DataError(
                f"loads have {loads.shape[0]} experts, model declares "
                f"{model.experts_per_layer}"
            )
        base = make_even_partition(model.experts_per_layer, topo)
        plan = sparse_materialization(base, loads, args.t, args.m, topo)
        obj = {
            "schema_version": SCHEMA_VERSION,
            "mode": "materialize",
            "t": args.t,
            "m": args.m,
            "config": {k: cfg[k] for k in ("topology", "model") if k in cfg},
            "plan": plan.to_json_obj(),
        }
        summary = (
            f"materialize t={args.t} m={args.m}: "
            f"{sum(plan.added_per_device)} replicas added"
        )
    else:
        if loads.ndim == 1:
            loads = loads[None, :]
        if loads.shape != (model.layers, model.experts_per_layer):
            raise DataError(
                f"loads shape {loads.shape} does not match model "
                f"({model.layers} layers x {model.experts_per_layer} experts)"
            )
        t = args.t if args.t is not None else 0
        profile = GlobalLoadProfile(loads)
        shard_plan = heterogeneous_sharding(profile, t, topo)
        obj = {
            "schema_version": SCHEMA_VERSION,
            "mode": "shard",
            "t": t,
            "config": {k: cfg[k] for k in ("topology", "model") if k in cfg},
            "plan": shard_plan.to_json_obj(),
        }
        summary = (
            f"shard t={t}: {shard_plan.num_layers} layers over "
            f"{topo.num_devices} devices, {shard_plan.slots_per_device} slots/device"
        )
    _write_text(out_path, dumps_report(obj))
    print(f"wrote {out_path}")
    print(summary)
    return 0


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def _placement_from_obj(obj, num_chunks: int, num_devices: int, what: str) -> ChunkPlacement:
    if not isinstance(obj, list):
        raise DataError(f"{what} must be a list of [chunk, device] pairs")
    pairs = []
    for item in obj:
        if not isinstance(item, (list, tuple)) or len(item) != 2:
            raise DataError(f"{what} entries must be [chunk, device] pairs")
        pairs.append((int(item[0]), int(item[1])))
    return ChunkPlacement.from_pairs(num_chunks, num_devices, pairs)


def cmd_validate(args) -> int:
    obj = _load_json(args.pair, "pair")
    num_chunks = int(_require(obj, "num_chunks", "pair file"))
    num_devices = int(_require(obj, "num_devices", "pair file"))
    pre = _placement_from_obj(_require(obj, "pre", "pair file"), num_chunks, num_devices, "pre")
    post = _placement_from_obj(_require(obj, "post", "pair file"), num_chunks, num_devices, "post")
    checks = []
    if args.direction in ("gather", "both"):
        checks.append(("gather", validate_spag_pair(pre, post)))
    if args.direction in ("reduce", "both"):
        checks.append(("reduce", validate_sprs_pair(pre, post)))
    ok = True
    for name, verdict in checks:
        print(f"{name}: {verdict.describe()}")
        ok = ok and verdict.ok
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# gen-trace
# ---------------------------------------------------------------------------


def cmd_gen_trace(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    syn = cfg.get("trace", {}).get("synthetic", {})

    def pick(flag, key, default, cast):
        if flag is not None:
            return cast(flag)
        if key in syn:
            return cast(syn[key])
        if default is None:
            raise ConfigError(f"gen-trace requires --{key.replace('_', '-')}")
        return cast(default)

    model = cfg.get("model", {})
    topo = cfg.get("topology", {})
    devices_default = None
    if "nodes" in topo and "devices_per_node" in topo:
        devices_default = int(topo["nodes"]) * int(topo["devices_per_node"])
    meta = TraceMeta(
        iterations=pick(args.iterations, "iterations", None, int),
        layers=pick(args.layers, "layers", model.get("layers"), int),
        experts=pick(args.experts, "experts", model.get("experts_per_layer"), int),
        devices=pick(args.devices, "devices", devices_default, int),
        tokens_per_device=pick(args.tokens_per_device, "tokens_per_device", None, int),
    )
    skew = pick(args.skew, "skew", 1.0, float)
    drift = pick(args.drift, "drift", 0.05, float)
    seed = args.seed if args.seed is not None else int(syn.get("seed", 0))
    trace = gen_synthetic_trace(meta, skew=skew, drift=drift, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    path = args.trace_out or os.path.join(args.out, "trace.jsonl")
    save_trace(trace, path)
    first = trace.steps[0]
    per_expert = np.stack([m.sum(axis=0) for m in first])
    ratio = float(per_expert.max() / per_expert.mean()) if per_expert.mean() else 0.0
    print(f"wrote {path}")
    print(
        f"{meta.iterations} iterations x {meta.layers} layers x {meta.experts} experts "
        f"on {meta.devices} devices, {meta.tokens_per_device} tokens/device "
        f"(skew={skew}, drift={drift}, seed={seed})"
    )
    print(f"first-iteration max/mean expert load: {ratio:.2f}")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

COMPARE_COLUMNS = [
    "label",
    "parameter",
    "value",
    "total_latency",
    "mean_iteration_latency",
    "peak_device_bytes",
]


def cmd_compare(args) -> int:
    if args.config is None:
        raise ConfigError("compare requires --config")
    cfg = load_config(args.config)
    topo = build_topology(cfg)
    model = build_model(cfg)
    trace, trace_echo = resolve_trace(cfg, model, topo, args.trace, args.seed)

    sweep = cfg.get("sweep")
    runs: list[tuple[str, str, object, Policy]] = []
    if sweep is not None:
        base = build_policy(_require(sweep, "policy", "sweep"))
        param = _require(sweep, "parameter", "sweep")
        if param not in _POLICY_FIELDS:
            raise ConfigError(f"sweep parameter {param!r} is not a policy option")
        values = _require(sweep, "values", "sweep")
        if not isinstance(values, list) or not values:
            raise ConfigError("sweep 'values' must be a non-empty list")
        for value in values:
            policy = dataclasses.replace(base, **{param: value})
            runs.append((f"{base.kind.value}[{param}={value}]", param, value, policy))
    else:
        for policy in build_policies(cfg):
            runs.append((policy.label(), "", "", policy))

    os.makedirs(args.out, exist_ok=True)
    results = []
    for label, param, value, policy in runs:
        report = simulate_run(model, topo, policy, trace)
        results.append((label, param, value, report))

    rows = []
    for label, param, value, report in results:
        lat = report.iteration_latencies()
        rows.append(
            [
                label,
                param,
                value,
                report.total_latency,
                float(np.mean(lat)),
                report.memory_peaks()["device_total"],
            ]
        )
    if args.format in ("csv", "both"):
        path = os.path.join(args.out, "compare.csv")
        _write_text(path, rows_to_csv(COMPARE_COLUMNS, rows))
        print(f"wrote {path}")
    if args.format in ("json", "both"):
        obj = {
            "schema_version": SCHEMA_VERSION,
            "config": _config_echo(cfg, trace_echo, args.seed),
            "results": [
                {
                    "label": label,
                    "parameter": param,
                    "value": value,
                    "report": report.to_dict(),
                }
                for label, param, value, report in results
            ],
        }
        path = os.path.join(args.out, "compare.json")
        _write_text(path, dumps_report(obj))
        print(f"wrote {path}")
    if args.figures:
        from . import figures

        if sweep is not None:
            path = figures.interval_curve(
                [row[2] for row in rows],
                [row[3] for row in rows],
                os.path.join(args.out, "sweep.png"),
            )
        else:
            path = figures.latency_curves(
                [r for _, _, _, r in results], os.path.join(args.out, "latency.png")
            )
        print(f"wrote {path}")
    print(f"{'label':<28} {'total (ms)':>12} {'mean iter (ms)':>15}")
    for row in rows:
        print(f"{row[0]:<28} {row[3] * 1e3:>12.3f} {row[4] * 1e3:>15.3f}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="experiment config JSON")
    sub.add_argument("--seed", type=int, default=None, help="override trace seed")
    sub.add_argument("--out", default=".", help="output directory")
    sub.add_argument(
        "--format", choices=("json", "csv", "both"), default="both",
        help="report format(s) to write",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moesim", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p_sim = subs.add_parser("simulate", help="run configured policies over a trace")
    _add_common(p_sim)
    p_sim.add_argument("--trace", help="trace JSONL path (overrides config)")
    p_sim.add_argument(
        "--no-figures", dest="figures", action="store_false", default=True,
        help="skip PNG rendering",
    )

    p_plan = subs.add_parser("plan", help="emit a replication or sharding plan")
    _add_common(p_plan)
    p_plan.add_argument("--loads", required=True, help="JSON file of expert loads")
    p_plan.add_argument(
        "--mode", choices=("materialize", "shard"), default="materialize"
    )
    p_plan.add_argument("--t", type=int, default=None, help="overlap replica budget")
    p_plan.add_argument("--m", type=int, default=None, help="per-device replica slots")
    p_plan.add_argument(
        "--layer", type=int, default=0, help="layer row to plan for (materialize mode)"
    )

    p_val = subs.add_parser("validate", help="check a placement pair")
    _add_common(p_val)
    p_val.add_argument("--pair", required=True, help="JSON file with pre/post placements")
    p_val.add_argument(
        "--direction", choices=("gather", "reduce", "both"), default="both"
    )

    p_gen = subs.add_parser("gen-trace", help="generate a synthetic load trace")
    _add_common(p_gen)
    p_gen.add_argument("--iterations", type=int)
    p_gen.add_argument("--layers", type=int)
    p_gen.add_argument("--experts", type=int)
    p_gen.add_argument("--devices", type=int)
    p_gen.add_argument("--tokens-per-device", type=int)
    p_gen.add_argument("--skew", type=float)
    p_gen.add_argument("--drift", type=float)
    p_gen.add_argument("--trace-out", help="explicit output file path")

    p_cmp = subs.add_parser("compare", help="sweep policies and emit a combined CSV")
    _add_common(p_cmp)
    p_cmp.add_argument("--trace", help="trace JSONL path (overrides config)")
    p_cmp.add_argument(
        "--no-figures", dest="figures", action="store_false", default=True,
        help="skip PNG rendering",
    )

    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "plan": cmd_plan,
    "validate": cmd_validate,
    "gen-trace": cmd_gen_trace,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (InternalError, MoesimError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
