"""Gate-decision traces: the JSONL on-disk format and a synthetic generator.

A trace is a header line followed by one record per (iteration, layer):

    {"iterations": 10, "layers": 2, "experts": 8, "devices": 4, "tokens_per_device": 1024}
    {"iter": 0, "layer": 0, "counts": [[...experts ints...], ...devices rows...]}
    ...

counts[d][e] is how many of device d's tokens the gate sent to expert e; every
row sums to exactly tokens_per_device.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DimensionError, ParseError

_META_FIELDS = ("iterations", "layers", "experts", "devices", "tokens_per_device")


@dataclass(frozen=True)
class TraceMeta:
    iterations: int
    layers: int
    experts: int
    devices: int
    tokens_per_device: int

    def __post_init__(self) -> None:
        for name in _META_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ParseError(f"trace meta field '{name}' must be a positive integer, got {value!r}")

    def to_json_obj(self) -> dict:
        return {name: getattr(self, name) for name in _META_FIELDS}


@dataclass(eq=False)
class Trace:
    """In-memory trace: steps[i][l] is the (devices x experts) count matrix."""

    meta: TraceMeta
    steps: list[list[np.ndarray]]

    def __post_init__(self) -> None:
        if len(self.steps) != self.meta.iterations:
            raise DimensionError(
                f"trace declares {self.meta.iterations} iterations but has {len(self.steps)}"
            )
        for i, layers in enumerate(self.steps):
            if len(layers) != self.meta.layers:
                raise DimensionError(f"iteration {i} has {len(layers)} layers, expected {self.meta.layers}")
            for l, counts in enumerate(layers):
                arr = np.asarray(counts)
                if arr.shape != (self.meta.devices, self.meta.experts):
                    raise DimensionError(
                        f"counts at iter {i} layer {l} have shape {arr.shape}, expected "
                        f"({self.meta.devices}, {self.meta.experts})"
                    )
                if np.any(arr < 0):
                    bad = np.argwhere(arr < 0)[0]
                    raise ParseError(
                        f"negative count at iter {i} layer {l} counts[{bad[0]}][{bad[1]}]"
                    )
                row_sums = arr.sum(axis=1)
                if np.any(row_sums != self.meta.tokens_per_device):
                    d = int(np.argwhere(row_sums != self.meta.tokens_per_device)[0][0])
                    raise DimensionError(
                        f"iter {i} layer {l} device {d} row sums to {int(row_sums[d])}, "
                        f"expected tokens_per_device={self.meta.tokens_per_device}"
                    )
                layers[l] = arr.astype(np.int64)


def save_trace(trace: Trace, path: str | Path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps(trace.meta.to_json_obj(), sort_keys=True) + "\n")
        for i, layers in enumerate(trace.steps):
            for l, counts in enumerate(layers):
                record = {"iter": i, "layer": l, "counts": counts.tolist()}
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _parse_line(line: str, lineno: int) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {lineno}: not valid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ParseError(f"line {lineno}: expected an object")
    return obj


def load_trace(path: str | Path) -> Trace:
    path = Path(path)
    try:
        with path.open() as fh:
            lines = [line for line in fh if line.strip()]
    except OSError as exc:
        raise ParseError(f"cannot read trace file {path}: {exc.strerror}") from exc
    if not lines:
        raise ParseError(f"{path}: empty trace file")
    header = _parse_line(lines[0], 1)
    missing = [f for f in _META_FIELDS if f not in header]
    if missing:
        raise ParseError(f"line 1: missing meta field(s) {', '.join(missing)}")
    try:
        meta = TraceMeta(**{f: int(header[f]) for f in _META_FIELDS})
    except (TypeError, ValueError) as exc:
        raise ParseError(f"line 1: bad meta value ({exc})") from exc

    expected = meta.iterations * meta.layers
    if len(lines) - 1 != expected:
        raise DimensionError(
            f"{path}: expected {expected} step records, found {len(lines) - 1}"
        )
    steps: list[list[np.ndarray | None]] = [
        [None] * meta.layers for _ in range(meta.iterations)
    ]
    for lineno, line in enumerate(lines[1:], start=2):
        obj = _parse_line(line, lineno)
        for field in ("iter", "layer", "counts"):
            if field not in obj:
                raise ParseError(f"line {lineno}: missing field '{field}'")
        i, l = obj["iter"], obj["layer"]
        if not isinstance(i, int) or not (0 <= i < meta.iterations):
            raise ParseError(f"line {lineno}: field 'iter'={i!r} out of range")
        if not isinstance(l, int) or not (0 <= l < meta.layers):
            raise ParseError(f"line {lineno}: field 'layer'={l!r} out of range")
        try:
            counts = np.asarray(obj["counts"], dtype=np.int64)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"line {lineno}: field 'counts' is not an integer grid") from exc
        if steps[i][l] is not None:
            raise ParseError(f"line {lineno}: duplicate record for iter {i} layer {l}")
        steps[i][l] = counts
    for i in range(meta.iterations):
        for l in range(meta.layers):
            if steps[i][l] is None:
                raise DimensionError(f"{path}: missing record for iter {i} layer {l}")
    return Trace(meta=meta, steps=[list(layers) for layers in steps])


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def largest_remainder(total: int, probs: np.ndarray) -> np.ndarray:
    """Round total*probs to integers that sum to exactly `total`.

    Floors first, then hands the leftover tokens to the largest fractional
    remainders (lowest index on ties).
    """
    raw = probs * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        remainders = raw - counts
        order = sorted(range(len(probs)), key=lambda e: (-remainders[e], e))
        for e in order[:short]:
            counts[e] += 1
    return counts


def gen_synthetic_trace(
    meta: TraceMeta, skew: float = 1.0, drift: float = 0.05, seed: int = 0
) -> Trace:
    """Seeded gate-decision trace with tunable imbalance and temporal drift.

    Per layer, expert logits start from a normal draw with scale 1/skew (large
    skew -> logits near zero -> near-uniform loads) and take a bounded random
    walk with per-iteration step scale `drift`, clipped to +-4/skew.  Each
    iteration, every device's tokens are split by largest-remainder rounding
    of the softmax distribution, so row sums are exact by construction.
    """
    if skew <= 0:
        raise ParseError(f"skew must be positive, got {skew}")
    if drift < 0:
        raise ParseError(f"drift must be non-negative, got {drift}")
    rng = np.random.default_rng(seed)
    sigma = 1.0 / skew
    bound = 4.0 / skew
    logits = rng.normal(0.0, sigma, size=(meta.layers, meta.experts))
    steps: list[list[np.ndarray]] = []
    for _ in range(meta.iterations):
        layers = []
        for l in range(meta.layers):
            z = logits[l] - logits[l].max()
            probs = np.exp(z)
            probs /= probs.sum()
            row = largest_remainder(meta.tokens_per_device, probs)
            layers.append(np.tile(row, (meta.devices, 1)))
        steps.append(layers)
        if drift > 0:
            logits = np.clip(
                logits + rng.normal(0.0, drift, size=logits.shape), -bound, bound
            )
    return Trace(meta=meta, steps=steps)


def iter_step_matrices(trace: Trace) -> Iterator[tuple[int, int, np.ndarray]]:
    for i, layers in enumerate(trace.steps):
        for l, counts in enumerate(layers):
            yield i, l, counts
