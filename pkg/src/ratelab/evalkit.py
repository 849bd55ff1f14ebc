"""QoE metrics per session, corpus aggregation, and A/B comparison reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .sim import SessionLog, detect_freezes

PERCENTILES = (10, 25, 50, 75, 90)


class EvalError(ValueError):
    """Invalid aggregation input."""


@dataclass(frozen=True)
class QoEReport:
    trace_id: str
    avg_video_bitrate_kbps: float
    freeze_rate: float
    frame_rate_fps: float
    mean_frame_delay_ms: float
    labels: dict = field(default_factory=dict, hash=False, compare=False)


def qoe(log: SessionLog, labels: dict | None = None) -> QoEReport:
    """Receiver-side quality metrics of one session (delivered frames only)."""
    duration_ms = log.duration_ms
    delivered = [f for f in log.frames if f.arrival_ts_ms is not None]
    spans = detect_freezes([f.arrival_ts_ms for f in delivered], duration_ms)
    frozen_ms = sum(s.duration_ms for s in spans)
    if delivered:
        bitrate = sum(f.size_bytes for f in delivered) * 8.0 / duration_ms  # kbps
        delay = float(np.mean([f.arrival_ts_ms - f.capture_ts_ms for f in delivered]))
    else:
        bitrate = 0.0
        delay = 0.0
    return QoEReport(
        trace_id=log.trace_id,
        avg_video_bitrate_kbps=bitrate,
        freeze_rate=min(frozen_ms / duration_ms, 1.0),
        frame_rate_fps=len(delivered) / (duration_ms / 1000.0),
        mean_frame_delay_ms=delay,
        labels=labels or {},
    )


METRICS = ("avg_video_bitrate_kbps", "freeze_rate", "frame_rate_fps", "mean_frame_delay_ms")


def nearest_rank(values, pct: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    vs = sorted(values)
    if not vs:
        raise EvalError("empty percentile input")
    rank = max(int(np.ceil(pct / 100.0 * len(vs))), 1)
    return float(vs[rank - 1])


@dataclass
class CorpusSummary:
    n_sessions: int
    percentiles: dict[str, dict[str, float]]          # metric -> {"P50": ...}
    subsets: dict[str, dict[str, "CorpusSummary"]]    # label key -> value -> summary

    def to_dict(self) -> dict:
        return {
            "n_sessions": self.n_sessions,
            "percentiles": self.percentiles,
            "subsets": {k: {v: s.to_dict() for v, s in sub.items()}
                        for k, sub in self.subsets.items()},
        }


def summarize(reports: list[QoEReport], subset_keys: tuple[str, ...] = ()) -> CorpusSummary:
    """Nearest-rank percentiles per metric, plus per-label-value breakdowns."""
    if not reports:
        raise EvalError("no reports to summarize")
    pcts = {
        m: {f"P{p}": nearest_rank([getattr(r, m) for r in reports], p) for p in PERCENTILES}
        for m in METRICS
    }
    subsets: dict[str, dict[str, CorpusSummary]] = {}
    for key in subset_keys:
        values = sorted({str(r.labels.get(key)) for r in reports if key in r.labels})
        subsets[key] = {}
        for v in values:
            group = [r for r in reports if str(r.labels.get(key)) == v]
            if group:
                subsets[key][v] = summarize(group)
    return CorpusSummary(n_sessions=len(reports), percentiles=pcts, subsets=subsets)


def compare(summary_a: CorpusSummary, summary_b: CorpusSummary) -> dict:
    """Per-metric deltas of a vs b at each percentile.

    delta_pct = (a - b) / b * 100 when b != 0; else the absolute delta is
    reported with a flag.
    """
    out: dict[str, dict[str, dict]] = {}
    for m in METRICS:
        out[m] = {}
        for p, a_val in summary_a.percentiles[m].items():
            b_val = summary_b.percentiles[m][p]
            if b_val != 0.0:
                out[m][p] = {"delta_pct": (a_val - b_val) / b_val * 100.0,
                             "a": a_val, "b": b_val}
            else:
                out[m][p] = {"delta_abs": a_val - b_val, "a": a_val, "b": b_val,
                             "baseline_zero": True}
    return out


def write_report(reports: list[QoEReport], summary: CorpusSummary,
                 path: str | Path, meta: dict | None = None) -> None:
    payload = {
        "format_version": 1,
        "kind": "qoe_report",
        "meta": meta or {},
        "summary": summary.to_dict(),
        "sessions": [asdict(r) for r in reports],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def read_report(path: str | Path) -> tuple[list[QoEReport], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("kind") != "qoe_report":
        raise EvalError(f"{path}: not a QoE report")
    reports = [QoEReport(**r) for r in payload["sessions"]]
    return reports, payload["summary"]
