"""Deterministic discrete-time simulator of a one-way video call.

The sender encodes frames against a commanded target bitrate, packetizes them,
and pushes packets through a trace-driven bottleneck (token-bucket service,
drop-tail FIFO queue of fixed packet capacity, fixed one-way propagation).
The receiver batches transport feedback every feedback interval and loss
reports every loss-report interval; both travel back over a lossless path
with one-way propagation delay. Every 50 ms the sender folds the feedback
stream into a telemetry tick record and asks the controller for a new target.

Everything is driven by a single simulated clock in integer milliseconds and
a single seeded RNG, so identical inputs give byte-identical session logs.
"""
from __future__ import annotations

import gzip
import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .traces import BandwidthTrace

RATE_FLOOR_KBPS = 50.0
RATE_CEIL_KBPS = 6000.0
DECISION_INTERVAL_MS = 50
MIN_SESSION_MS = 10_000

LOG_FORMAT_VERSION = 1


class SimError(ValueError):
    """Invalid simulator configuration or input."""


@dataclass(frozen=True)
class SimConfig:
    tick_ms: int = 5
    rtt_ms: int = 100  # one-way propagation is rtt_ms // 2 each way
    queue_capacity_pkts: int = 50
    mtu_bytes: int = 1200
    fps: int = 30
    feedback_interval_ms: int = 50
    loss_report_interval_ms: int = 1000
    codec_noise_sigma: float = 0.15
    keyframe_interval_frames: int = 300
    keyframe_size_multiplier: float = 3.0
    codec_lag_ms: int = 100
    random_loss_prob: float = 0.0
    initial_target_kbps: float = 800.0
    session_seed: int = 0

    def __post_init__(self):
        for f_name, conv in _SIMCONFIG_FIELD_TYPES:
            object.__setattr__(self, f_name, conv(getattr(self, f_name)))
        if self.tick_ms <= 0 or self.feedback_interval_ms % self.tick_ms != 0:
            raise SimError("tick_ms must be positive and divide feedback_interval_ms")
        if DECISION_INTERVAL_MS % self.tick_ms != 0:
            raise SimError("tick_ms must divide the 50 ms decision interval")
        if self.queue_capacity_pkts <= 0:
            raise SimError("queue_capacity_pkts must be positive")
        if self.rtt_ms < 2 or self.mtu_bytes <= 0 or self.fps <= 0:
            raise SimError("invalid rtt/mtu/fps")
        if not (0.0 <= self.random_loss_prob < 1.0):
            raise SimError("random_loss_prob must be in [0, 1)")

    @property
    def propagation_ms(self) -> int:
        return self.rtt_ms // 2

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


_SIMCONFIG_FIELD_TYPES = (
    ("tick_ms", int), ("rtt_ms", int), ("queue_capacity_pkts", int),
    ("mtu_bytes", int), ("fps", int), ("feedback_interval_ms", int),
    ("loss_report_interval_ms", int), ("codec_noise_sigma", float),
    ("keyframe_interval_frames", int), ("keyframe_size_multiplier", float),
    ("codec_lag_ms", int), ("random_loss_prob", float),
    ("initial_target_kbps", float), ("session_seed", int),
)


@dataclass
class TickRecord:
    """Sender-side telemetry for one 50 ms decision interval.

    Transport stats cover the interval ending at the decision instant;
    action_kbps is the target chosen at that instant (it governs the
    following interval). ticks_since_* counters are in 50 ms units.
    """
    sent_kbps: float = 0.0
    acked_kbps: float = 0.0
    action_kbps: float = 0.0
    owd_ms: float = 0.0
    owd_jitter_ms: float = 0.0
    interarrival_var_ms2: float = 0.0
    rtt_ms: float = 0.0
    min_rtt_ms: float = 0.0
    ticks_since_feedback: float = 20.0
    loss_fraction: float = 0.0
    ticks_since_loss_report: float = 20.0


@dataclass(frozen=True)
class FrameEvent:
    frame_id: int
    capture_ts_ms: int
    arrival_ts_ms: int | None  # completion time of the last packet, None if never delivered
    size_bytes: int


@dataclass(frozen=True)
class FeedbackReport:
    gen_ts_ms: int
    packets: tuple[tuple[int, int], ...]  # (seq, arrive_ts_ms), contiguous arrivals since last report
    received_bitrate_kbps: float
    rtt_sample_ms: float
    loss_fraction: float | None  # populated only on loss-report boundaries


@dataclass(frozen=True)
class FreezeSpan:
    start_ms: float
    end_ms: float

    @property
    def duration_ms(self) -> float:
        return self.end_ms - self.start_ms


@dataclass
class SessionAudit:
    """Per-tick byte accounting and per-packet ground truth for property tests."""
    tick_times_ms: np.ndarray
    sent_bytes_cum: np.ndarray
    dequeued_bytes_cum: np.ndarray
    dropped_bytes_cum: np.ndarray
    queue_bytes: np.ndarray
    queue_pkts: np.ndarray
    capacity_bytes_cum: np.ndarray
    pkt_send_ts: np.ndarray
    pkt_arrive_ts: np.ndarray  # -1 where dropped / undelivered
    pkt_size: np.ndarray
    pkt_frame_id: np.ndarray


@dataclass
class SessionLog:
    config: SimConfig
    trace_id: str
    ticks: list[TickRecord]
    frames: list[FrameEvent]
    clamp_warnings: int = 0
    audit: SessionAudit | None = None  # in-memory only, never serialized

    @property
    def duration_ms(self) -> int:
        return len(self.ticks) * DECISION_INTERVAL_MS

    def to_jsonl(self) -> str:
        header = {
            "format_version": LOG_FORMAT_VERSION,
            "kind": "session_log",
            "trace_id": self.trace_id,
            "config": asdict(self.config),
            "config_digest": self.config.digest(),
            "n_ticks": len(self.ticks),
            "clamp_warnings": self.clamp_warnings,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for rec in self.ticks:
            lines.append(json.dumps([
                rec.sent_kbps, rec.acked_kbps, rec.action_kbps, rec.owd_ms,
                rec.owd_jitter_ms, rec.interarrival_var_ms2, rec.rtt_ms,
                rec.min_rtt_ms, rec.ticks_since_feedback, rec.loss_fraction,
                rec.ticks_since_loss_report,
            ]))
        frames = [[f.frame_id, f.capture_ts_ms, f.arrival_ts_ms, f.size_bytes] for f in self.frames]
        lines.append(json.dumps({"frames": frames}))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        path = Path(path)
        data = self.to_jsonl().encode()
        if path.suffix == ".gz":
            path.write_bytes(gzip.compress(data, mtime=0))
        else:
            path.write_bytes(data)


def read_session_log(path: str | Path) -> SessionLog:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    lines = raw.decode().splitlines()
    header = json.loads(lines[0])
    if header.get("format_version") != LOG_FORMAT_VERSION or header.get("kind") != "session_log":
        raise SimError(f"{path}: not a version-{LOG_FORMAT_VERSION} session log")
    n = header["n_ticks"]
    if len(lines) != n + 2:
        raise SimError(f"{path}: truncated log ({len(lines) - 2}/{n} tick lines)")
    ticks = []
    for line in lines[1 : 1 + n]:
        v = json.loads(line)
        ticks.append(TickRecord(*v))
    frames_block = json.loads(lines[1 + n])["frames"]
    frames = [FrameEvent(f[0], f[1], f[2], f[3]) for f in frames_block]
    return SessionLog(
        config=SimConfig(**header["config"]),
        trace_id=header["trace_id"],
        ticks=ticks,
        frames=frames,
        clamp_warnings=header.get("clamp_warnings", 0),
    )


@runtime_checkable
class RateController(Protocol):
    def on_feedback(self, report: FeedbackReport) -> None: ...

    def decide(self, now_ms: int) -> float: ...


class ConstantController:
    """Always asks for the same target; handy baseline and test double."""

    def __init__(self, target_kbps: float):
        self.target_kbps = target_kbps

    def on_feedback(self, report: FeedbackReport) -> None:
        pass

    def decide(self, now_ms: int) -> float:
        return self.target_kbps


class Codec:
    """Frame-size model: first-order lag toward the commanded target plus
    mean-one lognormal noise, with periodic keyframes."""

    def __init__(self, config: SimConfig):
        self.cfg = config
        self.effective_kbps: float | None = None
        self.last_frame_ts: int | None = None

    def frame_bytes(self, target_kbps: float, frame_index: int, now_ms: int,
                    rng: np.random.Generator) -> int:
        cfg = self.cfg
        if self.effective_kbps is None or cfg.codec_lag_ms <= 0:
            self.effective_kbps = target_kbps
        else:
            dt = now_ms - (self.last_frame_ts if self.last_frame_ts is not None else now_ms)
            blend = 1.0 - math.exp(-dt / cfg.codec_lag_ms)
            self.effective_kbps += (target_kbps - self.effective_kbps) * blend
        self.last_frame_ts = now_ms
        base = self.effective_kbps * 1000.0 / cfg.fps / 8.0  # bytes per frame
        sigma = cfg.codec_noise_sigma
        if sigma > 0:
            base *= math.exp(rng.normal(0.0, sigma) - 0.5 * sigma * sigma)
        if cfg.keyframe_interval_frames > 0 and frame_index % cfg.keyframe_interval_frames == 0:
            base *= cfg.keyframe_size_multiplier
        return max(int(round(base)), 1)


def codec_tick(target_kbps: float, frame_index: int, rng: np.random.Generator,
               config: SimConfig | None = None) -> int:
    """One-shot frame size at the commanded target (no lag state carried)."""
    cfg = config or SimConfig()
    codec = Codec(cfg)
    return codec.frame_bytes(target_kbps, frame_index, 0, rng)


def detect_freezes(arrival_ts_ms: list[float], session_duration_ms: float) -> list[FreezeSpan]:
    """WebRTC-style freeze rule over rendered frame arrival times.

    A gap g after a rendered frame is frozen when
    g > max(3 * avg_dur, avg_dur + 150) with avg_dur the mean of up to the
    previous 30 rendered durations; the frozen portion is g - avg_dur. The
    never-rendered tail after the last frame is judged the same way. With
    fewer than two delivered frames the whole session is one span.
    """
    arr = sorted(arrival_ts_ms)
    if len(arr) < 2:
        return [FreezeSpan(0.0, float(session_duration_ms))]
    durations: deque[float] = deque(maxlen=30)
    spans: list[FreezeSpan] = []
    for prev, cur in zip(arr, arr[1:]):
        gap = cur - prev
        if durations:
            avg = sum(durations) / len(durations)
            if gap > max(3.0 * avg, avg + 150.0):
                spans.append(FreezeSpan(prev + avg, cur))
        durations.append(gap)
    tail = session_duration_ms - arr[-1]
    avg = sum(durations) / len(durations)
    if tail > max(3.0 * avg, avg + 150.0):
        spans.append(FreezeSpan(arr[-1] + avg, float(session_duration_ms)))
    return spans


class _SenderTelemetry:
    """Folds the feedback stream into per-decision-interval tick stats."""

    def __init__(self):
        self.min_owd_raw = math.inf
        self.min_rtt = 0.0
        self._have_rtt = False
        self.last_rtt = 0.0
        self.last_owd = 0.0
        self.last_loss = 0.0
        self.last_feedback_ms = None
        self.last_loss_report_ms = None
        # per-window accumulators
        self.w_acked_bytes = 0
        self.w_owds: list[float] = []
        self.w_arrivals: list[int] = []

    def on_report(self, report: FeedbackReport, send_ts_of, size_of) -> None:
        for seq, arrive_ts in report.packets:
            raw = arrive_ts - send_ts_of(seq)
            self.min_owd_raw = min(self.min_owd_raw, raw)
            self.w_owds.append(raw)
            self.w_arrivals.append(arrive_ts)
            self.w_acked_bytes += size_of(seq)
        if report.packets:
            self.last_rtt = report.rtt_sample_ms
            if not self._have_rtt or report.rtt_sample_ms < self.min_rtt:
                self.min_rtt = report.rtt_sample_ms
                self._have_rtt = True
            self.last_feedback_ms = report.gen_ts_ms
        if report.loss_fraction is not None:
            self.last_loss = report.loss_fraction
            self.last_loss_report_ms = report.gen_ts_ms

    def fold_window(self, now_ms: int, sent_bytes: int) -> TickRecord:
        interval_s = DECISION_INTERVAL_MS / 1000.0
        rec = TickRecord()
        rec.sent_kbps = sent_bytes * 8.0 / interval_s / 1000.0
        rec.acked_kbps = self.w_acked_bytes * 8.0 / interval_s / 1000.0
        if self.w_owds:
            owds = [raw - self.min_owd_raw for raw in self.w_owds]
            rec.owd_ms = sum(owds) / len(owds)
            if len(owds) > 1:
                rec.owd_jitter_ms = sum(
                    abs(b - a) for a, b in zip(owds, owds[1:])
                ) / (len(owds) - 1)
            gaps = [b - a for a, b in zip(self.w_arrivals, self.w_arrivals[1:])]
            if gaps:
                mean_gap = sum(gaps) / len(gaps)
                rec.interarrival_var_ms2 = sum((g - mean_gap) ** 2 for g in gaps) / len(gaps)
            self.last_owd = rec.owd_ms
        else:
            rec.owd_ms = self.last_owd  # stale carry; staleness shows in the counter
        rec.rtt_ms = self.last_rtt
        rec.min_rtt_ms = self.min_rtt
        rec.loss_fraction = self.last_loss
        rec.ticks_since_feedback = _staleness_ticks(now_ms, self.last_feedback_ms)
        rec.ticks_since_loss_report = _staleness_ticks(now_ms, self.last_loss_report_ms)
        self.w_acked_bytes = 0
        self.w_owds = []
        self.w_arrivals = []
        return rec


def _staleness_ticks(now_ms: int, last_ms: int | None) -> float:
    if last_ms is None:
        return 20.0
    return float(min((now_ms - last_ms) // DECISION_INTERVAL_MS, 20))


def run_session(trace: BandwidthTrace, controller: RateController,
                config: SimConfig) -> SessionLog:
    """Simulate one call over the full trace; returns the telemetry log."""
    if trace.duration_ms < MIN_SESSION_MS:
        raise SimError(f"trace {trace.id!r}: shorter than {MIN_SESSION_MS} ms")
    cfg = config
    rng = np.random.default_rng(cfg.session_seed)
    prop = cfg.propagation_ms
    duration = (trace.duration_ms // DECISION_INTERVAL_MS) * DECISION_INTERVAL_MS
    n_ticks = duration // cfg.tick_ms

    # trace cursor for exact capacity integration
    bp_ts, bp_cap = trace.breakpoints()
    bp_ts = list(bp_ts) + [math.inf]
    bp_cap = list(bp_cap)

    codec = Codec(cfg)
    queue: deque[int] = deque()  # packet seqs
    queue_bytes = 0
    budget = 0.0

    pkt_send_ts: list[int] = []
    pkt_size: list[int] = []
    pkt_frame: list[int] = []
    pkt_arrive: list[int] = []  # -1 until delivered

    frames_capture: list[int] = []
    frames_size: list[int] = []
    frames_last_seq: list[int] = []
    frames_arrival: list[int | None] = []

    arrivals: list[tuple[int, int]] = []  # (arrive_ts, seq) in arrival order
    pending_reports: deque[tuple[int, FeedbackReport]] = deque()  # (sender_arrival_ts, report)

    telemetry = _SenderTelemetry()
    ticks: list[TickRecord] = []
    clamp_warnings = 0

    # receiver bookkeeping
    arr_consumed = 0  # arrivals already folded into a report
    next_report_ms = cfg.feedback_interval_ms
    last_loss_max_seq = -1
    recv_count_window = 0
    last_rtt_sample = float(cfg.rtt_ms)

    # audit accumulators
    n_link_ticks = n_ticks
    a_sent = np.zeros(n_link_ticks, dtype=np.int64)
    a_deq = np.zeros(n_link_ticks, dtype=np.int64)
    a_drop = np.zeros(n_link_ticks, dtype=np.int64)
    a_qbytes = np.zeros(n_link_ticks, dtype=np.int64)
    a_qpkts = np.zeros(n_link_ticks, dtype=np.int64)
    a_cap = np.zeros(n_link_ticks, dtype=np.float64)
    sent_cum = deq_cum = drop_cum = 0
    cap_cum = 0.0

    seg_idx = 0
    frame_period = 1000.0 / cfg.fps
    next_frame_idx = 0
    window_sent_bytes = 0
    current_target = float(cfg.initial_target_kbps)

    has_on_sent = hasattr(controller, "on_packet_sent")
    has_on_tick = hasattr(controller, "on_tick")

    for tick in range(n_ticks):
        t0 = tick * cfg.tick_ms
        t1 = t0 + cfg.tick_ms

        # 1. decision boundary: fold stats for the window ending at t0, pick action
        if t0 % DECISION_INTERVAL_MS == 0:
            rec = telemetry.fold_window(t0, window_sent_bytes)
            window_sent_bytes = 0
            if has_on_tick:
                controller.on_tick(rec)
            target = controller.decide(t0)
            try:
                target = float(target)
            except (TypeError, ValueError):
                target = math.nan
            if not math.isfinite(target) or target <= 0:
                clamp_warnings += 1
                target = RATE_FLOOR_KBPS
            elif not (RATE_FLOOR_KBPS <= target <= RATE_CEIL_KBPS):
                clamp_warnings += 1
                target = min(max(target, RATE_FLOOR_KBPS), RATE_CEIL_KBPS)
            current_target = target
            rec.action_kbps = current_target
            ticks.append(rec)

        # 2. deliver feedback reports reaching the sender inside [t0, t1)
        while pending_reports and pending_reports[0][0] < t1:
            _, report = pending_reports.popleft()
            telemetry.on_report(report, pkt_send_ts.__getitem__, pkt_size.__getitem__)
            controller.on_feedback(report)

        # 3. capture/encode/packetize frames falling inside [t0, t1)
        while True:
            cap_ts = int(round(next_frame_idx * frame_period))
            if cap_ts >= t1 or cap_ts >= duration:
                break
            if cap_ts >= t0:
                fbytes = codec.frame_bytes(current_target, next_frame_idx, cap_ts, rng)
                frames_capture.append(cap_ts)
                frames_size.append(fbytes)
                frames_arrival.append(None)
                n_pkts = (fbytes + cfg.mtu_bytes - 1) // cfg.mtu_bytes
                remaining = fbytes
                for _ in range(n_pkts):
                    size = min(cfg.mtu_bytes, remaining)
                    remaining -= size
                    seq = len(pkt_send_ts)
                    pkt_send_ts.append(cap_ts)
                    pkt_size.append(size)
                    pkt_frame.append(next_frame_idx)
                    pkt_arrive.append(-1)
                    sent_cum += size
                    window_sent_bytes += size
                    if has_on_sent:
                        controller.on_packet_sent(seq, cap_ts, size)
                    dropped = len(queue) >= cfg.queue_capacity_pkts
                    if not dropped and cfg.random_loss_prob > 0:
                        dropped = rng.random() < cfg.random_loss_prob
                    if dropped:
                        drop_cum += size
                    else:
                        queue.append(seq)
                        queue_bytes += size
                frames_last_seq.append(len(pkt_send_ts) - 1)
            next_frame_idx += 1

        # 4. link service over [t0, t1): integrate capacity, drain FIFO
        t = t0
        while t < t1:
            while bp_ts[seg_idx + 1] <= t:
                seg_idx += 1
            seg_end = min(bp_ts[seg_idx + 1], t1)
            budget += bp_cap[seg_idx] * (seg_end - t) / 8.0  # kbps * ms / 8 = bytes
            cap_cum += bp_cap[seg_idx] * (seg_end - t) / 8.0
            t = seg_end
        while queue and budget >= pkt_size[queue[0]]:
            seq = queue.popleft()
            size = pkt_size[seq]
            budget -= size
            queue_bytes -= size
            deq_cum += size
            arrive_ts = t1 + prop
            pkt_arrive[seq] = arrive_ts
            arrivals.append((arrive_ts, seq))
        if budget > cfg.mtu_bytes:
            budget = float(cfg.mtu_bytes)

        a_sent[tick] = sent_cum
        a_deq[tick] = deq_cum
        a_drop[tick] = drop_cum
        a_qbytes[tick] = queue_bytes
        a_qpkts[tick] = len(queue)
        a_cap[tick] = cap_cum

        # 5. receiver: emit reports for boundaries g <= t1 (arrivals at g are
        # known because every arrival carries >= one propagation of latency)
        while next_report_ms <= t1:
            g = next_report_ms
            batch: list[tuple[int, int]] = []
            bytes_in = 0
            while arr_consumed < len(arrivals) and arrivals[arr_consumed][0] <= g:
                ats, seq = arrivals[arr_consumed]
                batch.append((seq, ats))
                bytes_in += pkt_size[seq]
                arr_consumed += 1
            is_loss_boundary = g % cfg.loss_report_interval_ms == 0
            recv_count_window += len(batch)
            loss_val = None
            if is_loss_boundary:
                # expected = seq-number advance since the last loss boundary
                # (delivery is in seq order, so the last arrival has the top seq)
                hi = arrivals[arr_consumed - 1][1] if arr_consumed > 0 else -1
                expected = hi - last_loss_max_seq
                if expected > 0:
                    loss_val = min(max(1.0 - recv_count_window / expected, 0.0), 1.0)
                else:
                    loss_val = 0.0
                last_loss_max_seq = max(hi, last_loss_max_seq)
                recv_count_window = 0
            if batch or is_loss_boundary:
                if batch:
                    last_seq, last_arr = batch[-1]
                    rtt_sample = (last_arr - pkt_send_ts[last_seq]) + prop
                    last_rtt_sample = rtt_sample
                else:
                    rtt_sample = last_rtt_sample
                report = FeedbackReport(
                    gen_ts_ms=g,
                    packets=tuple(batch),
                    received_bitrate_kbps=bytes_in * 8.0 / cfg.feedback_interval_ms,
                    rtt_sample_ms=float(rtt_sample),
                    loss_fraction=loss_val,
                )
                pending_reports.append((g + prop, report))
            next_report_ms += cfg.feedback_interval_ms

    # frame completion: a frame renders when its last packet arrives within the
    # session; any dropped or late packet leaves the frame undecodable
    for i, last_seq in enumerate(frames_last_seq):
        first_seq = frames_last_seq[i - 1] + 1 if i > 0 else 0
        ok = all(0 <= pkt_arrive[s] <= duration for s in range(first_seq, last_seq + 1))
        frames_arrival[i] = pkt_arrive[last_seq] if ok else None

    frames = [
        FrameEvent(frame_id=i, capture_ts_ms=frames_capture[i],
                   arrival_ts_ms=frames_arrival[i], size_bytes=frames_size[i])
        for i in range(len(frames_capture))
    ]
    audit = SessionAudit(
        tick_times_ms=np.arange(1, n_link_ticks + 1) * cfg.tick_ms,
        sent_bytes_cum=a_sent,
        dequeued_bytes_cum=a_deq,
        dropped_bytes_cum=a_drop,
        queue_bytes=a_qbytes,
        queue_pkts=a_qpkts,
        capacity_bytes_cum=a_cap,
        pkt_send_ts=np.array(pkt_send_ts, dtype=np.int64),
        pkt_arrive_ts=np.array(pkt_arrive, dtype=np.int64),
        pkt_size=np.array(pkt_size, dtype=np.int64),
        pkt_frame_id=np.array(pkt_frame, dtype=np.int64),
    )
    return SessionLog(
        config=cfg,
        trace_id=trace.id,
        ticks=ticks,
        frames=frames,
        clamp_warnings=clamp_warnings,
        audit=audit,
    )
