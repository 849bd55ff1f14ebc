import numpy as np
import pytest

from ratelab.traces import (BandwidthTrace, SyntheticSpec, TraceError,
                            filter_corpus, format_trace_csv, gen_synthetic_trace,
                            parse_trace_csv, split_corpus, trace_stats)


def test_parse_two_samples():
    tr = parse_trace_csv("0,1000\n1000,2000")
    assert len(tr.samples) == 2
    assert tr.duration_ms == 2000
    assert tr.capacity_at(0) == 1000
    assert tr.capacity_at(1500) == 2000


def test_parse_comments_and_blank_lines():
    tr = parse_trace_csv("# header\n\n0,500\n# mid\n2000,800\n")
    assert tr.samples == ((0, 500.0), (2000, 800.0))


def test_parse_single_sample_duration():
    assert parse_trace_csv("0,750").duration_ms == 1000


def test_parse_rejects_nonpositive_capacity():
    with pytest.raises(TraceError, match="line 1"):
        parse_trace_csv("0,0")


def test_parse_rejects_nonmonotonic_time():
    with pytest.raises(TraceError, match="line 2"):
        parse_trace_csv("0,500\n0,600")


def test_parse_rejects_garbage_line():
    with pytest.raises(TraceError, match="line 2"):
        parse_trace_csv("0,500\nnot,a,sample")


def test_csv_round_trip():
    tr = gen_synthetic_trace(SyntheticSpec("random_walk", 200, 4000), seed=9)
    again = parse_trace_csv(format_trace_csv(tr), trace_id=tr.id)
    assert again.samples == tr.samples


def test_constant_trace_single_sample():
    tr = gen_synthetic_trace(SyntheticSpec("constant", 1000, 1000, duration_ms=60_000), seed=1)
    assert tr.samples == ((0, 1000.0),)
    assert tr.duration_ms == 60_000


def test_step_trace_alternates():
    tr = gen_synthetic_trace(
        SyntheticSpec("step", 500, 2500, period_ms=10_000, duration_ms=60_000), seed=7)
    assert len(tr.samples) == 6
    caps = [c for _, c in tr.samples]
    assert caps[::2] == [2500.0] * 3 and caps[1::2] == [500.0] * 3


def test_generator_determinism():
    spec = SyntheticSpec("random_walk", 200, 6000, period_ms=3000, duration_ms=30_000)
    assert gen_synthetic_trace(spec, seed=1) == gen_synthetic_trace(spec, seed=1)
    assert gen_synthetic_trace(spec, seed=1) != gen_synthetic_trace(spec, seed=2)


def test_dip_trace_has_one_low_period():
    tr = gen_synthetic_trace(
        SyntheticSpec("dip", 300, 2000, period_ms=10_000, duration_ms=60_000), seed=3)
    lows = [t for t, c in tr.samples if c == 300.0]
    assert len(lows) == 1


def test_stats_constant():
    tr = gen_synthetic_trace(SyntheticSpec("constant", 1000, 1000, duration_ms=30_000), seed=0)
    st = trace_stats(tr)
    assert st.mean_kbps == 1000.0
    assert st.dynamism_kbps == 0.0


def test_stats_equal_halves_mean():
    tr = BandwidthTrace(id="h", samples=((0, 500.0), (30_000, 2500.0)), duration_ms=60_000)
    assert trace_stats(tr).mean_kbps == pytest.approx(1500.0)


def test_stats_dynamism_hand_case():
    # 30 one-second chunks at 500 plus 30 at 2500: population std-dev is 1000
    tr = BandwidthTrace(id="h", samples=((0, 500.0), (30_000, 2500.0)), duration_ms=60_000)
    assert trace_stats(tr).dynamism_kbps == pytest.approx(1000.0)


def test_stats_rejects_short_trace():
    tr = BandwidthTrace(id="s", samples=((0, 100.0),), duration_ms=500)
    with pytest.raises(TraceError):
        trace_stats(tr)


def _flat(mean_kbps, ident):
    return BandwidthTrace(id=ident, samples=((0, float(mean_kbps)),), duration_ms=10_000)


def test_filter_thresholds():
    traces = [_flat(100, "a"), _flat(1000, "b"), _flat(7000, "c")]
    assert [t.id for t in filter_corpus(traces)] == ["b"]


def test_filter_boundaries_inclusive():
    traces = [_flat(200, "lo"), _flat(6000, "hi")]
    assert len(filter_corpus(traces)) == 2


def test_filter_empty():
    assert filter_corpus([]) == []


def test_split_sizes():
    traces = [_flat(500 + i, f"t{i}") for i in range(10)]
    tr, va, te = split_corpus(traces, seed=3)
    assert (len(tr), len(va), len(te)) == (6, 2, 2)


def test_split_partition_property():
    traces = [_flat(500 + i, f"t{i}") for i in range(23)]
    tr, va, te = split_corpus(traces, seed=1)
    ids = sorted(t.id for t in tr + va + te)
    assert ids == sorted(t.id for t in traces)
    assert len(set(ids)) == len(traces)


def test_split_single_trace():
    tr, va, te = split_corpus([_flat(900, "only")])
    assert (len(tr), len(va), len(te)) == (1, 0, 0)


def test_split_deterministic():
    traces = [_flat(500 + i, f"t{i}") for i in range(17)]
    a = split_corpus(traces, seed=11)
    b = split_corpus(traces, seed=11)
    assert [[t.id for t in g] for g in a] == [[t.id for t in g] for g in b]


def test_split_rejects_bad_ratios():
    with pytest.raises(TraceError):
        split_corpus([_flat(500, "x")], ratios=(0.5, 0.2, 0.2))
