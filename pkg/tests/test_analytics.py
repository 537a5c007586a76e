import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aidflow import analytics as A
from aidflow.backbone import AttentionNormSample, MMDiT
from aidflow.config import SamplerConfig
from aidflow.errors import CheckpointError, ContractError
from aidflow.sampler import AlphaRecord, sample

from conftest import SMALL


def rec(block, t, token, value, step=0, sample_=0):
    return AlphaRecord("r", block, t, token, value, step, sample_)


def random_records(seed, blocks=3, steps=4, tokens=5, samples=2):
    r = np.random.default_rng(seed)
    ts = [(steps - k) / steps for k in range(steps)]
    return [
        rec(l, ts[k], i, float(np.tanh(r.normal(0, 0.5))), k, b)
        for l in range(blocks)
        for k in range(steps)
        for b in range(samples)
        for i in range(tokens)
    ]


def test_block_ranking_example():
    records = [rec(0, 0.5, i, 0.3) for i in range(4)] + [rec(1, 0.5, i, 0.0) for i in range(4)]
    summ = A.distribution_by(records, "block")
    assert [s.key for s in sorted(summ, key=lambda s: -s.mean_abs)] == [0, 1]
    assert summ[1].zero_fraction == 1.0


def test_all_zero_records_are_fully_sparse():
    records = [rec(l, t, i, 0.0) for l in range(2) for t in (1.0, 0.5) for i in range(3)]
    for axis in A.AXES:
        assert all(s.zero_fraction == 1.0 for s in A.distribution_by(records, axis))


def test_zero_threshold_is_strict():
    s = A.summarize("k", [0.00999, 0.01, -0.02, -0.005])
    assert s.zero_fraction == 0.5


def test_quantile_is_inverse_cdf():
    vals = list(range(1, 21))
    qs = A.summarize("k", vals).quantiles
    assert qs == (1, 5, 10, 15, 19)
    assert A.summarize("k", [7.0]).quantiles == (7.0,) * 5


@pytest.mark.parametrize("axis", A.AXES)
@pytest.mark.parametrize("seed", [0, 1])
def test_distribution_matches_naive_loop(axis, seed):
    records = random_records(seed)
    field = {"block": "block_index", "token": "token_index", "timestep": "t"}[axis]
    buckets = defaultdict(list)
    for r in records:
        buckets[getattr(r, field)].append(r.value)
    keys = sorted(buckets, reverse=axis == "timestep")
    got = A.distribution_by(records, axis)
    assert [s.key for s in got] == keys
    for s, k in zip(got, keys):
        vals = buckets[k]
        srt = sorted(vals)
        n = len(vals)
        assert s.count == n
        assert s.mean == math.fsum(vals) / n
        assert s.mean_abs == math.fsum(map(abs, vals)) / n
        assert s.zero_fraction == sum(abs(v) < 0.01 for v in vals) / n
        for q, got_q in zip((0.05, 0.25, 0.5, 0.75, 0.95), s.quantiles):
            # smallest value with empirical CDF >= q
            assert got_q == next(v for j, v in enumerate(srt, 1) if j / n >= q - 1e-12)


def test_distribution_rejects_unknown_axis():
    with pytest.raises(ContractError):
        A.distribution_by([rec(0, 0.5, 0, 0.1)], "head")


def test_heatmap_constant_table():
    records = [rec(l, (3 - k) / 3, i, 0.5, k) for l in range(2) for k in range(3) for i in range(4)]
    h = A.block_timestep_heatmap(records, num_blocks=2, ts=[1.0, 2 / 3, 1 / 3])
    assert h.num_cells == 6 and h.cells.shape == (2, 3)
    np.testing.assert_array_equal(h.cells, 0.5)
    assert h.absent() == []


def test_heatmap_flags_missing_cell_and_round_trips(tmp_path):
    records = [r for r in random_records(3) if not (r.block_index == 1 and r.step == 2)]
    h = A.block_timestep_heatmap(records, num_blocks=3, ts=[1.0, 0.75, 0.5, 0.25])
    assert h.absent() == [(1, 2)]
    assert np.all(h.cells[~np.isnan(h.cells)] >= 0)
    path = tmp_path / "alpha_heatmap.csv"
    h.to_csv(path)
    assert A.ABSENT in path.read_text()
    assert A.read_heatmap_csv(path) == h


def test_heatmap_header_checked(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(CheckpointError):
        A.read_heatmap_csv(p)


def test_selection_examples():
    records = [rec(l, 0.5, 0, v) for l, v in enumerate([0.1, 0.4, 0.2, 0.3])]
    assert A.select_enhancement_blocks(records, 2) == {1, 3}
    equal = [rec(l, 0.5, 0, 0.2) for l in range(5)]
    assert A.select_enhancement_blocks(equal, 3) == {0, 1, 2}
    assert A.select_enhancement_blocks(equal, 0) == set()
    with pytest.raises(ContractError):
        A.select_enhancement_blocks(equal, 6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-0.99, 0.99), min_size=1, max_size=12), st.integers(0, 12))
def test_selection_is_top_k_by_mean_abs(values, k):
    k = min(k, len(values))
    records = [rec(l, 0.5, 0, v) for l, v in enumerate(values)]
    chosen = A.select_enhancement_blocks(records, k)
    assert len(chosen) == k
    if 0 < k < len(values):
        assert min(abs(values[l]) for l in chosen) >= max(abs(values[l]) for l in set(range(len(values))) - chosen)


def test_attention_curve_single_point_and_order():
    s = AttentionNormSample(0, 0.5, 1.0, 2.0)
    assert A.attention_norm_curve([s]) == {0: [A.AttentionPoint(0.5, 1.0, 2.0, 1)]}
    many = [AttentionNormSample(0, t, 1.0, 3.0, k, b) for k, t in enumerate([1.0, 0.5, 0.0]) for b in range(2)]
    curve = A.attention_norm_curve(many)
    assert [p.t for p in curve[0]] == [1.0, 0.5, 0.0] and all(p.count == 2 for p in curve[0])


def test_attention_curve_recomputes_from_raw_dump(tmp_path):
    m = MMDiT(SMALL)
    tok = np.array([[2, 7] + [0] * 6, [3, 9] + [0] * 6])
    traj = sample(m, tok, SamplerConfig(num_steps=3, cfg_scale=1.0, capture_attention_norm=True), keep_raw_attention=True)
    path = tmp_path / "raw.txt"
    A.write_raw_attention(path, traj.raw_attention, traj.ts)
    rebuilt = [
        AttentionNormSample(l, t, *A.norms_from_raw(arr, mlen))
        for l, t, mlen, arr in A.read_raw_attention(path)
    ]
    got = A.attention_norm_curve(traj.attention)
    want = A.attention_norm_curve(rebuilt)
    assert got.keys() == want.keys()
    for l in got:
        for p, q in zip(got[l], want[l]):
            assert p.t == q.t and p.count == q.count
            assert abs(p.text_norm - q.text_norm) <= 1e-6 * max(1.0, q.text_norm)
            assert abs(p.image_norm - q.image_norm) <= 1e-6 * max(1.0, q.image_norm)
            assert p.text_norm >= 0 and p.image_norm >= 0


def test_alpha_trace_round_trip(tmp_path):
    records = random_records(5)
    p = tmp_path / "alpha.txt"
    assert A.write_alpha_trace(p, records, {"note": "x"}) == len(records)
    header, back = A.read_alpha_trace(p)
    assert back == records and header["note"] == "x"
    with pytest.raises(CheckpointError):
        A.read_attention_trace(p)


def test_analyze_is_byte_identical_on_rerun(tmp_path):
    records = random_records(7)
    attn = [AttentionNormSample(l, t, 1.0 + l, 2.0 * t, k) for l in range(3) for k, t in enumerate([1.0, 0.5])]
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        A.analyze(records, attn, d, 3, ts=[1.0, 0.75, 0.5, 0.25])
        outs.append({f.name: f.read_bytes() for f in sorted(d.iterdir())})
    assert outs[0] == outs[1]
    assert set(outs[0]) == {"alpha_by_block.csv", "alpha_by_token.csv", "alpha_by_timestep.csv", "alpha_heatmap.csv", "attn_norm.csv"}


def test_token_group_means_split_attribute_and_padding():
    records = [rec(0, 0.5, 0, 0.4), rec(0, 0.5, 1, -0.2), rec(0, 0.5, 5, 0.1)]
    g = A.token_group_means(records, 2)
    assert g["attribute_mean_abs"] == pytest.approx(0.3) and g["pad_mean_abs"] == pytest.approx(0.1)
