import numpy as np
import pytest

from ratelab.evalkit import (CorpusSummary, EvalError, compare, nearest_rank, qoe,
                             read_report, summarize, write_report)
from ratelab.sim import FrameEvent, SessionLog, SimConfig, TickRecord


def _log(frames, n_ticks=1200, trace_id="t"):
    return SessionLog(config=SimConfig(), trace_id=trace_id,
                      ticks=[TickRecord() for _ in range(n_ticks)], frames=frames)


def _periodic_frames(n, size_bytes=10_000, delay=40, start=0, period=33):
    # arrivals span the whole session so no trailing-tail freeze appears
    return [FrameEvent(i, start + i * period, start + i * period + delay, size_bytes)
            for i in range(n)]


def test_qoe_periodic_delivery():
    frames = _periodic_frames(1815)
    log = _log(frames)
    r = qoe(log)
    assert r.avg_video_bitrate_kbps == pytest.approx(10_000 * 8 * 1815 / 60_000, rel=1e-6)
    assert r.freeze_rate == 0.0
    assert r.frame_rate_fps == pytest.approx(1815 / 60.0)
    assert r.mean_frame_delay_ms == pytest.approx(40.0)


def test_qoe_no_frames():
    r = qoe(_log([]))
    assert r.freeze_rate == 1.0
    assert r.frame_rate_fps == 0.0
    assert r.avg_video_bitrate_kbps == 0.0
    assert r.mean_frame_delay_ms == 0.0


def test_qoe_gap_freeze_fraction():
    # 30 frames at 33 ms then a 500 ms gap, then steady delivery to the end
    arr = [i * 33 for i in range(30)]
    arr += [arr[-1] + 500 + i * 33 for i in range(1776)]
    frames = [FrameEvent(i, 0, a, 5000) for i, a in enumerate(arr)]
    r = qoe(_log(frames))
    assert r.freeze_rate == pytest.approx((500 - 33) / 60_000, rel=0.05)


def test_qoe_undelivered_frames_excluded():
    frames = [FrameEvent(i, i * 33, (i * 33 + 40) if i % 2 == 0 else None, 9000)
              for i in range(1815)]
    r = qoe(_log(frames))
    assert r.frame_rate_fps == pytest.approx(908 / 60.0, rel=1e-6)
    assert r.avg_video_bitrate_kbps == pytest.approx(9000 * 8 * 908 / 60_000, rel=1e-6)


def test_nearest_rank_hand_case():
    values = [100 * k for k in range(1, 11)]
    assert nearest_rank(values, 50) == 500.0
    assert nearest_rank(values, 10) == 100.0
    assert nearest_rank(values, 90) == 900.0
    assert nearest_rank(values, 95) == 1000.0


def test_summarize_identical_reports():
    frames = _periodic_frames(1815, size_bytes=8000, delay=50)
    reports = [qoe(_log(frames, trace_id=f"t{i}")) for i in range(5)]
    s = summarize(reports)
    for metric, pcts in s.percentiles.items():
        assert len(set(pcts.values())) == 1


def test_summarize_percentiles_monotone(gcc_logs):
    reports = [qoe(log) for log in gcc_logs]
    s = summarize(reports)
    for metric, pcts in s.percentiles.items():
        vals = [pcts[f"P{p}"] for p in (10, 25, 50, 75, 90)]
        assert vals == sorted(vals)


def test_summarize_subsets_partition(gcc_logs):
    reports = []
    for i, log in enumerate(gcc_logs):
        reports.append(qoe(log, labels={"rtt_ms": (40, 100, 160)[i % 3]}))
    s = summarize(reports, subset_keys=("rtt_ms",))
    total = sum(sub.n_sessions for sub in s.subsets["rtt_ms"].values())
    assert total == len(reports)


def test_summarize_empty_rejected():
    with pytest.raises(EvalError):
        summarize([])


def _summary_with(bitrates):
    reports = []
    for i, b in enumerate(bitrates):
        frames = _periodic_frames(1815, size_bytes=int(b * 60_000 / 8 / 1815))
        reports.append(qoe(_log(frames, trace_id=f"t{i}")))
    return summarize(reports)


def test_compare_identity_is_zero():
    s = _summary_with([500, 800, 1200])
    delta = compare(s, s)
    for metric, pcts in delta.items():
        for p, cell in pcts.items():
            assert cell.get("delta_pct", 0.0) == pytest.approx(0.0)
            assert cell.get("delta_abs", 0.0) == pytest.approx(0.0)


def test_compare_percent_delta():
    a = _summary_with([1150] * 5)
    b = _summary_with([1000] * 5)
    cell = compare(a, b)["avg_video_bitrate_kbps"]["P50"]
    assert cell["delta_pct"] == pytest.approx(15.0, abs=0.2)


def test_compare_zero_baseline_falls_back_to_absolute():
    a = _summary_with([1000] * 3)
    b = _summary_with([1000] * 3)
    # freeze rates are zero in both: the guard must report absolute deltas
    cell = compare(a, b)["freeze_rate"]["P50"]
    assert cell.get("baseline_zero") is True
    assert cell["delta_abs"] == 0.0


def test_report_round_trip(tmp_path, gcc_logs):
    reports = [qoe(log, labels={"rtt_ms": 100}) for log in gcc_logs[:4]]
    s = summarize(reports, subset_keys=("rtt_ms",))
    path = tmp_path / "r.json"
    write_report(reports, s, path, meta={"controller": "gcc"})
    again, summary_dict = read_report(path)
    assert [r.trace_id for r in again] == [r.trace_id for r in reports]
    assert summary_dict["percentiles"] == s.to_dict()["percentiles"]
