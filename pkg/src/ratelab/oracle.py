"""Approximate oracle controller: ground-truth future capacity, logged actions only.

Each decision picks the largest action (from a reference session's action set)
that fits under safety_factor times the minimum capacity over the lookahead
horizon. It upper-bounds what rearranging the logged actions could achieve.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .sim import SessionLog
from .traces import BandwidthTrace


class OracleError(ValueError):
    """Invalid oracle configuration."""


@dataclass(frozen=True)
class OracleConfig:
    action_set: tuple[float, ...]  # sorted unique kbps values from a reference log
    horizon_ms: int = 1000
    safety_factor: float = 0.95

    def __post_init__(self):
        if not self.action_set:
            raise OracleError("empty action set")
        if not (0.0 < self.safety_factor <= 1.0):
            raise OracleError("safety_factor must be in (0, 1]")
        if self.horizon_ms <= 0:
            raise OracleError("horizon_ms must be positive")
        if list(self.action_set) != sorted(set(self.action_set)):
            raise OracleError("action_set must be sorted and unique")


def action_set_from_log(log: SessionLog) -> tuple[float, ...]:
    return tuple(sorted({t.action_kbps for t in log.ticks}))


def oracle_decide(trace: BandwidthTrace, now_ms: int, config: OracleConfig,
                  _per_ms: np.ndarray | None = None) -> float:
    """Largest action under safety_factor * min future capacity, else the smallest."""
    per_ms = trace.per_ms_capacity() if _per_ms is None else _per_ms
    lo = min(max(now_ms, 0), len(per_ms) - 1)
    hi = min(now_ms + config.horizon_ms, len(per_ms))
    min_cap = float(per_ms[lo:hi].min()) if hi > lo else float(per_ms[lo])
    budget = config.safety_factor * min_cap
    idx = bisect.bisect_right(config.action_set, budget) - 1
    if idx < 0:
        return config.action_set[0]
    return config.action_set[idx]


class OracleController:
    """RateController facade over oracle_decide for one trace."""

    def __init__(self, trace: BandwidthTrace, config: OracleConfig):
        self.trace = trace
        self.config = config
        self._per_ms = trace.per_ms_capacity()

    def on_feedback(self, report) -> None:
        pass

    def decide(self, now_ms: int) -> float:
        return oracle_decide(self.trace, now_ms, self.config, _per_ms=self._per_ms)
