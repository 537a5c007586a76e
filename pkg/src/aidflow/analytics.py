"""Aggregations over captured alpha and attention-norm traces.

Everything here is a pure function of its inputs; CSV outputs use a fixed
column order and ``repr`` floats so re-running on the same traces gives
byte-identical files.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import AttentionNormSample
from .errors import CheckpointError, ContractError
from .persistence import TraceWriter, read_csv, read_trace, write_csv
from .sampler import AlphaRecord, Trajectory

AXES = ("block", "token", "timestep")
ZERO_THRESHOLD = 0.01
QUANTILES = (Fraction(1, 20), Fraction(1, 4), Fraction(1, 2), Fraction(3, 4), Fraction(19, 20))
ABSENT = "absent"

DISTRIBUTION_COLUMNS = ["count", "mean", "mean_abs", "q05", "q25", "q50", "q75", "q95", "zero_fraction"]
HEATMAP_COLUMNS = ["block", "step", "t", "mean_abs_alpha"]
ATTN_COLUMNS = ["block", "t", "text_norm", "image_norm", "count"]
ALPHA_TRACE_COLUMNS = ["run_id", "block", "step", "t", "token", "sample", "value"]
ATTN_TRACE_COLUMNS = ["block", "step", "t", "sample", "text_norm", "image_norm"]


# ---------------------------------------------------------------------------
# distributions


@dataclass(frozen=True)
class BucketSummary:
    key: float | int
    count: int
    mean: float
    mean_abs: float
    quantiles: tuple[float, ...]
    zero_fraction: float

    def row(self) -> list:
        return [self.key, self.count, self.mean, self.mean_abs, *self.quantiles, self.zero_fraction]


def quantile(sorted_values: Sequence[float], q: Fraction) -> float:
    """Inverse-CDF quantile: the smallest value whose empirical CDF reaches ``q``."""
    n = len(sorted_values)
    idx = max(0, -(-q.numerator * n // q.denominator) - 1)
    return sorted_values[min(idx, n - 1)]


def summarize(key, values: Sequence[float]) -> BucketSummary:
    n = len(values)
    if n == 0:
        raise ContractError(f"bucket {key!r} is empty")
    srt = sorted(values)
    return BucketSummary(
        key,
        n,
        math.fsum(values) / n,
        math.fsum(abs(v) for v in values) / n,
        tuple(quantile(srt, q) for q in QUANTILES),
        sum(1 for v in values if abs(v) < ZERO_THRESHOLD) / n,
    )


def _axis_key(rec: AlphaRecord, axis: str):
    if axis == "block":
        return rec.block_index
    if axis == "token":
        return rec.token_index
    if axis == "timestep":
        return rec.t
    raise ContractError(f"axis must be one of {AXES}, got {axis!r}")


def distribution_by(records: Iterable[AlphaRecord], axis: str) -> list[BucketSummary]:
    """Per-bucket statistics of alpha, buckets sorted by axis value (timesteps descending)."""
    if axis not in AXES:
        raise ContractError(f"axis must be one of {AXES}, got {axis!r}")
    buckets: dict = defaultdict(list)
    for rec in records:
        buckets[_axis_key(rec, axis)].append(rec.value)
    keys = sorted(buckets, reverse=(axis == "timestep"))
    return [summarize(k, buckets[k]) for k in keys]


def write_distribution(path: str | Path, axis: str, summaries: list[BucketSummary]) -> None:
    write_csv(path, [axis] + DISTRIBUTION_COLUMNS, [s.row() for s in summaries])


def token_group_means(records: Iterable[AlphaRecord], num_attribute_tokens: int) -> dict[str, float]:
    """Mean |alpha| of attribute-token positions versus PAD positions."""
    attr, pad = [], []
    for r in records:
        (attr if r.token_index < num_attribute_tokens else pad).append(abs(r.value))
    return {
        "attribute_mean_abs": math.fsum(attr) / len(attr) if attr else float("nan"),
        "pad_mean_abs": math.fsum(pad) / len(pad) if pad else float("nan"),
    }


# ---------------------------------------------------------------------------
# block x timestep heatmap


@dataclass
class HeatmapTable:
    """Mean |alpha| per (block, sampler step); NaN marks a cell with no captured data."""

    blocks: list[int]
    steps: list[int]
    ts: list[float]
    cells: np.ndarray  # (len(blocks), len(steps))

    @property
    def num_cells(self) -> int:
        return int(self.cells.size)

    def absent(self) -> list[tuple[int, int]]:
        return [(self.blocks[i], self.steps[j]) for i, j in zip(*np.nonzero(np.isnan(self.cells)))]

    def rows(self) -> list[list]:
        out = []
        for i, l in enumerate(self.blocks):
            for j, k in enumerate(self.steps):
                v = self.cells[i, j]
                out.append([l, k, self.ts[j], ABSENT if np.isnan(v) else float(v)])
        return out

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, HEATMAP_COLUMNS, self.rows())

    def __eq__(self, other) -> bool:
        if not isinstance(other, HeatmapTable):
            return NotImplemented
        return (
            self.blocks == other.blocks
            and self.steps == other.steps
            and self.ts == other.ts
            and self.cells.shape == other.cells.shape
            and bool(np.array_equal(self.cells, other.cells, equal_nan=True))
        )


def block_timestep_heatmap(
    records: Iterable[AlphaRecord],
    num_blocks: int | None = None,
    ts: Sequence[float] | None = None,
) -> HeatmapTable:
    """Grid of mean |alpha| over tokens and samples.

    ``ts`` lists the sampler's evaluation times by step (``len(ts) = T``);
    when omitted the steps seen in ``records`` are used.  Cells without any
    record are NaN and serialize as ``absent``.
    """
    sums: dict = defaultdict(list)
    step_t: dict[int, float] = {}
    seen_blocks = set()
    for r in records:
        sums[(r.block_index, r.step)].append(abs(r.value))
        step_t[r.step] = r.t
        seen_blocks.add(r.block_index)
    blocks = list(range(num_blocks)) if num_blocks is not None else sorted(seen_blocks)
    if ts is not None:
        steps = list(range(len(ts)))
        tvals = [float(t) for t in ts]
    else:
        steps = sorted(step_t)
        tvals = [step_t[k] for k in steps]
    cells = np.full((len(blocks), len(steps)), np.nan)
    for i, l in enumerate(blocks):
        for j, k in enumerate(steps):
            vals = sums.get((l, k))
            if vals:
                cells[i, j] = math.fsum(vals) / len(vals)
    return HeatmapTable(blocks, steps, tvals, cells)


def read_heatmap_csv(path: str | Path) -> HeatmapTable:
    header, rows = read_csv(path)
    if header != HEATMAP_COLUMNS:
        raise CheckpointError(f"{path}: unexpected heatmap header {header}")
    blocks = sorted({int(r[0]) for r in rows})
    step_t = {int(r[1]): float(r[2]) for r in rows}
    steps = sorted(step_t)
    cells = np.full((len(blocks), len(steps)), np.nan)
    bi = {l: i for i, l in enumerate(blocks)}
    si = {k: j for j, k in enumerate(steps)}
    for l, k, _, v in rows:
        cells[bi[int(l)], si[int(k)]] = np.nan if v == ABSENT else float(v)
    return HeatmapTable(blocks, steps, [step_t[k] for k in steps], cells)


# ---------------------------------------------------------------------------
# block selection


def block_means(records: Iterable[AlphaRecord]) -> dict[int, float]:
    return {s.key: s.mean_abs for s in distribution_by(records, "block")}


def select_enhancement_blocks(records, k: int, num_blocks: int | None = None) -> set[int]:
    """The ``k`` blocks with the largest mean |alpha|; ties go to the lower index."""
    means = block_means(records)
    if num_blocks is not None:
        for l in range(num_blocks):
            means.setdefault(l, 0.0)
    if not 0 <= k <= len(means):
        raise ContractError(f"k = {k} outside [0, {len(means)}]")
    ranked = sorted(means, key=lambda l: (-means[l], l))
    return set(ranked[:k])


# ---------------------------------------------------------------------------
# attention norms


@dataclass(frozen=True)
class AttentionPoint:
    t: float
    text_norm: float
    image_norm: float
    count: int


def attention_norm_curve(samples: Iterable[AttentionNormSample]) -> dict[int, list[AttentionPoint]]:
    """Per block, norms averaged over samples that share a timestep; t descending."""
    groups: dict = defaultdict(list)
    for s in samples:
        groups[(s.block_index, s.t)].append(s)
    out: dict[int, list[AttentionPoint]] = defaultdict(list)
    for (l, t), ss in groups.items():
        out[l].append(
            AttentionPoint(
                t,
                math.fsum(s.text_norm for s in ss) / len(ss),
                math.fsum(s.image_norm for s in ss) / len(ss),
                len(ss),
            )
        )
    return {l: sorted(pts, key=lambda p: -p.t) for l, pts in sorted(out.items())}


def attention_rows(curve: dict[int, list[AttentionPoint]]) -> list[list]:
    return [[l, p.t, p.text_norm, p.image_norm, p.count] for l, pts in curve.items() for p in pts]


def write_attention_curve(path: str | Path, curve) -> None:
    write_csv(path, ATTN_COLUMNS, attention_rows(curve))


def norms_from_raw(raw: np.ndarray, image_len: int) -> tuple[float, float]:
    """(text, image) Frobenius norms of one attention-output dump ``(tokens, d)``."""
    raw = np.asarray(raw, dtype=np.float64)
    return float(np.linalg.norm(raw[image_len:])), float(np.linalg.norm(raw[:image_len]))


# ---------------------------------------------------------------------------
# trace files


def write_alpha_trace(path: str | Path, records: Iterable[AlphaRecord], header: dict | None = None) -> int:
    with TraceWriter(path, "alpha", ALPHA_TRACE_COLUMNS, header) as w:
        for r in records:
            w.append([r.run_id, r.block_index, r.step, r.t, r.token_index, r.sample, r.value])
        return w.count


def read_alpha_trace(path: str | Path) -> tuple[dict, list[AlphaRecord]]:
    kind, header, rows = read_trace(path)
    if kind != "alpha":
        raise CheckpointError(f"{path}: expected an alpha trace, found '{kind}'")
    recs = [AlphaRecord(r[0], int(r[1]), float(r[3]), int(r[4]), float(r[6]), int(r[2]), int(r[5])) for r in rows]
    return header, recs


def write_attention_trace(path: str | Path, samples: Iterable[AttentionNormSample], header: dict | None = None) -> int:
    with TraceWriter(path, "attention_norm", ATTN_TRACE_COLUMNS, header) as w:
        for s in samples:
            w.append([s.block_index, s.step, s.t, s.sample, s.text_norm, s.image_norm])
        return w.count


def read_attention_trace(path: str | Path) -> tuple[dict, list[AttentionNormSample]]:
    kind, header, rows = read_trace(path)
    if kind != "attention_norm":
        raise CheckpointError(f"{path}: expected an attention-norm trace, found '{kind}'")
    out = [AttentionNormSample(int(r[0]), float(r[2]), float(r[4]), float(r[5]), int(r[1]), int(r[3])) for r in rows]
    return header, out


def write_raw_attention(path: str | Path, raw, ts: Sequence[float], header: dict | None = None) -> int:
    """Dump raw attention outputs, one flattened ``(tokens, d)`` array per row."""
    cols = ["block", "step", "t", "sample", "image_len", "rows", "cols", "values"]
    with TraceWriter(path, "attention_raw", cols, header) as w:
        for l, k, b, arr, m in raw:
            w.append([l, k, ts[k], b, m, arr.shape[0], arr.shape[1], " ".join(repr(float(v)) for v in arr.reshape(-1))])
        return w.count


def read_raw_attention(path: str | Path) -> list[tuple[int, float, int, np.ndarray]]:
    kind, _, rows = read_trace(path)
    if kind != "attention_raw":
        raise CheckpointError(f"{path}: expected a raw attention dump, found '{kind}'")
    out = []
    for l, k, t, _, m, nr, nc, vals in rows:
        arr = np.array([float(v) for v in vals.split()], dtype=np.float64).reshape(int(nr), int(nc))
        out.append((int(l), float(t), int(m), arr))
    return out


def analyze(alpha_records: list[AlphaRecord], attention: list[AttentionNormSample], out_dir: str | Path, num_blocks: int, ts=None) -> dict:
    """Write every analytics CSV into ``out_dir`` and return summary numbers."""
    out_dir = Path(out_dir)
    summary: dict = {}
    if alpha_records:
        for axis in AXES:
            write_distribution(out_dir / f"alpha_by_{axis}.csv", axis, distribution_by(alpha_records, axis))
        heat = block_timestep_heatmap(alpha_records, num_blocks, ts)
        heat.to_csv(out_dir / "alpha_heatmap.csv")
        summary["heatmap_cells"] = heat.num_cells
        summary["heatmap_absent"] = len(heat.absent())
        summary["block_mean_abs"] = {str(k): v for k, v in block_means(alpha_records).items()}
        summary.update(token_group_means(alpha_records, 2))
    if attention:
        write_attention_curve(out_dir / "attn_norm.csv", attention_norm_curve(attention))
    return summary


def trajectory_records(traj: Trajectory, run_id: str = "run") -> list[AlphaRecord]:
    return traj.alpha_records(run_id)
