"""GCC-style heuristic rate controller.

A faithful-in-spirit reduction of WebRTC's send-side bandwidth estimation:
packets are grouped into short send bursts, per-group one-way-delay deltas
feed a least-squares trendline slope, an adaptive threshold classifies the
link as NORMAL / OVERUSE / UNDERUSE, and an AIMD rate machine reacts (5%/s
multiplicative increase, 0.85x-of-acked decrease, loss-based cuts above 10%).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .sim import DECISION_INTERVAL_MS, FeedbackReport, RATE_FLOOR_KBPS, RATE_CEIL_KBPS

NORMAL = "NORMAL"
OVERUSE = "OVERUSE"
UNDERUSE = "UNDERUSE"

INCREASE = "INCREASE"
HOLD = "HOLD"
DECREASE = "DECREASE"


@dataclass(frozen=True)
class GccConfig:
    burst_interval_ms: int = 5
    trendline_window: int = 20
    slope_gain: float = 4.0
    max_deltas: int = 60
    initial_threshold: float = 12.5
    threshold_gain_up: float = 0.01        # per ms, toward larger |slope|
    threshold_gain_down: float = 0.00018   # per ms, toward smaller |slope|
    threshold_bounds: tuple[float, float] = (6.0, 600.0)
    overuse_time_ms: float = 10.0
    increase_per_second: float = 1.05
    decrease_factor: float = 0.85
    acked_smoothing: float = 0.1           # EWMA weight per feedback report
    loss_smoothing: float = 0.5            # EWMA weight per loss report
    loss_hold_low: float = 0.02
    loss_cut_high: float = 0.10
    acked_cap_factor: float = 1.5
    initial_target_kbps: float = 800.0


class TrendlineEstimator:
    """Least-squares slope of accumulated delay vs arrival time over a window."""

    def __init__(self, window: int = 20):
        self.window = window
        self.points: list[tuple[float, float]] = []

    def add(self, arrival_ms: float, acc_delay_ms: float) -> None:
        self.points.append((arrival_ms, acc_delay_ms))
        if len(self.points) > self.window:
            self.points.pop(0)

    @property
    def slope(self) -> float | None:
        if len(self.points) < 2:
            return None
        n = len(self.points)
        mx = sum(p[0] for p in self.points) / n
        my = sum(p[1] for p in self.points) / n
        num = sum((x - mx) * (y - my) for x, y in self.points)
        den = sum((x - mx) ** 2 for x, _ in self.points)
        if den == 0:
            return 0.0
        return num / den


class GccController:
    """Sender-side GCC controller; one instance per session."""

    def __init__(self, config: GccConfig | None = None):
        self.cfg = config or GccConfig()
        self.target_kbps = self.cfg.initial_target_kbps
        self.detector_state = NORMAL
        self.rate_state = HOLD
        self.smoothed_acked_kbps = 0.0
        self.loss_ewma = 0.0
        self._fresh_loss = False
        self.last_decrease_ms: float = -math.inf

        self.trendline = TrendlineEstimator(self.cfg.trendline_window)
        self.threshold = self.cfg.initial_threshold
        self._send_ts: dict[int, int] = {}
        self._group: tuple[int, int] | None = None  # (first_send, last_send) of open group
        self._group_arrive: int | None = None
        self._prev_group: tuple[int, int] | None = None  # (send_last, arrive_last) of closed group
        self._acc_delay = 0.0
        self._num_deltas = 0
        self._overusing_ms = 0.0
        self._overuse_count = 0
        self._prev_slope = 0.0
        self._threshold_update_ms: float | None = None
        self._rtt_est_ms = 100.0

    # --- sender-side hooks -------------------------------------------------
    def on_packet_sent(self, seq: int, send_ts_ms: int, size_bytes: int) -> None:
        self._send_ts[seq] = send_ts_ms

    def on_feedback(self, report: FeedbackReport) -> None:
        if report.packets:
            self.smoothed_acked_kbps = self._ewma(
                self.smoothed_acked_kbps, report.received_bitrate_kbps,
                self.cfg.acked_smoothing)
            self._rtt_est_ms = report.rtt_sample_ms
            for seq, arrive_ts in report.packets:
                send_ts = self._send_ts.pop(seq, None)
                if send_ts is not None:
                    self._ingest_packet(send_ts, arrive_ts)
        if report.loss_fraction is not None:
            self.loss_ewma = self._ewma(self.loss_ewma, report.loss_fraction,
                                        self.cfg.loss_smoothing)
            self._fresh_loss = True

    def _ewma(self, prev: float, value: float, weight: float) -> float:
        if prev == 0.0:
            return value
        return (1.0 - weight) * prev + weight * value

    def _ingest_packet(self, send_ts: int, arrive_ts: int) -> None:
        # burst grouping on send timestamps
        if self._group is None:
            self._group = (send_ts, send_ts)
            self._group_arrive = arrive_ts
            return
        first, last = self._group
        if send_ts - first <= self.cfg.burst_interval_ms:
            self._group = (first, max(last, send_ts))
            self._group_arrive = max(self._group_arrive, arrive_ts)
            return
        self._close_group()
        self._group = (send_ts, send_ts)
        self._group_arrive = arrive_ts

    def _close_group(self) -> None:
        send_last = self._group[1]
        arrive_last = self._group_arrive
        if self._prev_group is not None:
            prev_send, prev_arrive = self._prev_group
            delta = (arrive_last - prev_arrive) - (send_last - prev_send)
            inter_arrival = max(arrive_last - prev_arrive, 0)
            self._acc_delay += delta
            self._num_deltas += 1
            self.trendline.add(float(arrive_last), self._acc_delay)
            slope = self.trendline.slope
            if slope is not None:
                self._detect(slope, float(inter_arrival), float(arrive_last))
        self._prev_group = (send_last, arrive_last)

    def _detect(self, slope: float, inter_arrival_ms: float, now_ms: float) -> None:
        cfg = self.cfg
        modified = slope * min(self._num_deltas, cfg.max_deltas) * cfg.slope_gain
        if modified > self.threshold:
            self._overusing_ms = (inter_arrival_ms / 2.0 if self._overuse_count == 0
                                  else self._overusing_ms + inter_arrival_ms)
            self._overuse_count += 1
            if (self._overusing_ms > cfg.overuse_time_ms and self._overuse_count > 1
                    and slope >= self._prev_slope):
                self._overusing_ms = 0.0
                self._overuse_count = 0
                self.detector_state = OVERUSE
        elif modified < -self.threshold:
            self._overusing_ms = 0.0
            self._overuse_count = 0
            self.detector_state = UNDERUSE
        else:
            self._overusing_ms = 0.0
            self._overuse_count = 0
            self.detector_state = NORMAL
        self._prev_slope = slope
        self._adapt_threshold(modified, now_ms)

    def _adapt_threshold(self, modified: float, now_ms: float) -> None:
        cfg = self.cfg
        if self._threshold_update_ms is None:
            self._threshold_update_ms = now_ms
        if abs(modified) > self.threshold + 15.0:
            self._threshold_update_ms = now_ms
            return  # ignore spikes far above threshold
        gain = cfg.threshold_gain_up if abs(modified) > self.threshold else cfg.threshold_gain_down
        dt = min(now_ms - self._threshold_update_ms, 100.0)
        self.threshold += gain * (abs(modified) - self.threshold) * dt
        lo, hi = cfg.threshold_bounds
        self.threshold = min(max(self.threshold, lo), hi)
        self._threshold_update_ms = now_ms

    # --- decision ----------------------------------------------------------
    def decide(self, now_ms: int) -> float:
        cfg = self.cfg
        can_decrease = now_ms - self.last_decrease_ms >= self._rtt_est_ms
        loss = self.loss_ewma

        if loss > cfg.loss_cut_high and self._fresh_loss and can_decrease:
            self.target_kbps *= 1.0 - 0.5 * loss
            self.last_decrease_ms = now_ms
            self._fresh_loss = False
            self.rate_state = HOLD
        elif cfg.loss_hold_low <= loss <= cfg.loss_cut_high:
            pass  # hold band
        else:
            self._update_rate_state()
            if self.rate_state == DECREASE:
                if can_decrease and self.smoothed_acked_kbps > 0:
                    self.target_kbps = min(
                        self.target_kbps,
                        cfg.decrease_factor * self.smoothed_acked_kbps)
                    self.last_decrease_ms = now_ms
                self.rate_state = HOLD
            elif self.rate_state == INCREASE:
                self.target_kbps *= cfg.increase_per_second ** (
                    0.001 * DECISION_INTERVAL_MS)

        cap = RATE_CEIL_KBPS
        if self.smoothed_acked_kbps > 0:
            cap = min(cap, cfg.acked_cap_factor * self.smoothed_acked_kbps)
        self.target_kbps = min(max(self.target_kbps, RATE_FLOOR_KBPS), cap)
        return self.target_kbps

    def _update_rate_state(self) -> None:
        if self.detector_state == OVERUSE:
            self.rate_state = DECREASE
        elif self.detector_state == UNDERUSE:
            self.rate_state = HOLD
        else:  # NORMAL
            if self.rate_state == HOLD:
                self.rate_state = INCREASE
