"""Session logs -> learning-ready transitions, rewards, datasets, drift.

Feature layout (fixed order, one row per 50 ms tick, all values in [0, 1]):
  0 sent_bitrate   1 acked_bitrate   2 prev_action   3 owd   4 owd_jitter
  5 interarrival_var   6 rtt   7 min_rtt   8 ticks_since_feedback
  9 loss   10 ticks_since_loss_report
Bitrates normalize by /6000 kbps, delays by /1000 ms, the inter-arrival
variance by /1000 ms^2, tick counters by /20; everything clamps to [0, 1].
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sim import DECISION_INTERVAL_MS, SessionLog, TickRecord

W_WINDOW = 20
N_FEATURES = 11
REWARD_HORIZON_TICKS = 20

BITRATE_NORM_KBPS = 6000.0
DELAY_NORM_MS = 1000.0
VAR_NORM_MS2 = 1000.0
COUNTER_NORM_TICKS = 20.0

ACTION_MIN_KBPS = 50.0
ACTION_MAX_KBPS = 6000.0

FEATURE_NAMES = (
    "sent_bitrate", "acked_bitrate", "prev_action", "owd", "owd_jitter",
    "interarrival_var", "rtt", "min_rtt", "ticks_since_feedback", "loss",
    "ticks_since_loss_report",
)

# pre-session rows: bitrates/delays 0, staleness counters saturated, loss 0
PAD_ROW = np.array([0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 1], dtype=np.float32)

DATASET_FORMAT_VERSION = 1
_RECORD_FLOATS = 2 * W_WINDOW * N_FEATURES + 3  # state, action, reward, next_state, done


class TelemetryError(ValueError):
    """Malformed dataset file or invalid extraction input."""


@dataclass(frozen=True)
class RewardParams:
    alpha: float = 2.0
    beta: float = 1.0
    gamma: float = 1.0
    throughput_norm_kbps: float = BITRATE_NORM_KBPS
    delay_norm_ms: float = DELAY_NORM_MS


@dataclass
class Transition:
    state: np.ndarray  # (W, 11) float32
    action_kbps: float
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Dataset:
    states: np.ndarray       # (K, W, 11) float32
    actions: np.ndarray      # (K,) float32, kbps
    rewards: np.ndarray      # (K,) float32
    next_states: np.ndarray  # (K, W, 11) float32
    dones: np.ndarray        # (K,) float32 (0/1)
    provenance: list[tuple[str, str]] = field(default_factory=list)  # (trace_id, config digest)
    normalization: dict[str, float] = field(default_factory=lambda: default_normalization())
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.actions)


def default_normalization() -> dict[str, float]:
    return {
        "bitrate_norm_kbps": BITRATE_NORM_KBPS,
        "delay_norm_ms": DELAY_NORM_MS,
        "var_norm_ms2": VAR_NORM_MS2,
        "counter_norm_ticks": COUNTER_NORM_TICKS,
        "action_min_kbps": ACTION_MIN_KBPS,
        "action_max_kbps": ACTION_MAX_KBPS,
    }


def tick_features(rec: TickRecord, prev_action_kbps: float) -> np.ndarray:
    """Normalized 11-feature row for one tick; prev_action is the previous tick's action."""
    row = np.array([
        rec.sent_kbps / BITRATE_NORM_KBPS,
        rec.acked_kbps / BITRATE_NORM_KBPS,
        prev_action_kbps / BITRATE_NORM_KBPS,
        rec.owd_ms / DELAY_NORM_MS,
        rec.owd_jitter_ms / DELAY_NORM_MS,
        rec.interarrival_var_ms2 / VAR_NORM_MS2,
        rec.rtt_ms / DELAY_NORM_MS,
        rec.min_rtt_ms / DELAY_NORM_MS,
        rec.ticks_since_feedback / COUNTER_NORM_TICKS,
        rec.loss_fraction,
        rec.ticks_since_loss_report / COUNTER_NORM_TICKS,
    ], dtype=np.float32)
    return np.clip(row, 0.0, 1.0)


def feature_matrix(log: SessionLog) -> np.ndarray:
    """All tick rows of a session, shape (n_ticks, 11)."""
    n = len(log.ticks)
    out = np.empty((n, N_FEATURES), dtype=np.float32)
    prev_action = 0.0
    for i, rec in enumerate(log.ticks):
        out[i] = tick_features(rec, prev_action)
        prev_action = rec.action_kbps
    return out


def build_state(log: SessionLog, t: int) -> np.ndarray:
    """Window of ticks t-19..t as a (W, 11) matrix, padded before session start."""
    n = len(log.ticks)
    if t < 0 or t >= n:
        raise TelemetryError(f"tick index {t} outside log of {n} ticks")
    feats = feature_matrix(log)
    return _window(feats, t)


def _window(feats: np.ndarray, t: int) -> np.ndarray:
    lo = t - (W_WINDOW - 1)
    if lo >= 0:
        return feats[lo : t + 1].copy()
    pad = np.tile(PAD_ROW, (-lo, 1))
    return np.concatenate([pad, feats[: t + 1]], axis=0)


def compute_reward(window: list[TickRecord], params: RewardParams = RewardParams()) -> float:
    """Scalar reward over the 1 s of ticks following an action."""
    if not window:
        raise TelemetryError("empty reward window")
    acked = float(np.mean([r.acked_kbps for r in window]))
    rtt = float(np.mean([r.rtt_ms for r in window]))
    loss = float(np.mean([r.loss_fraction for r in window]))
    throughput = min(max(acked / params.throughput_norm_kbps, 0.0), 1.0)
    delay = min(max(rtt / params.delay_norm_ms, 0.0), 1.0)
    loss = min(max(loss, 0.0), 1.0)
    return params.alpha * throughput - params.beta * delay - params.gamma * loss


def extract_transitions(log: SessionLog, params: RewardParams = RewardParams()) -> list[Transition]:
    """One transition per decision tick t in [W-1, n-1-horizon]."""
    n = len(log.ticks)
    if n < W_WINDOW + REWARD_HORIZON_TICKS:
        return []
    feats = feature_matrix(log)
    out = []
    last_t = n - 1 - REWARD_HORIZON_TICKS
    for t in range(W_WINDOW - 1, last_t + 1):
        reward = compute_reward(log.ticks[t + 1 : t + 1 + REWARD_HORIZON_TICKS], params)
        out.append(Transition(
            state=_window(feats, t),
            action_kbps=float(log.ticks[t].action_kbps),
            reward=reward,
            next_state=_window(feats, t + 1),
            done=t == last_t,
        ))
    return out


def dataset_from_logs(logs: list[SessionLog], params: RewardParams = RewardParams()) -> Dataset:
    """Vectorized transition extraction across sessions."""
    states, actions, rewards, next_states, dones, prov = [], [], [], [], [], []
    for log in logs:
        n = len(log.ticks)
        if n < W_WINDOW + REWARD_HORIZON_TICKS:
            continue
        feats = feature_matrix(log)
        acts = np.array([r.action_kbps for r in log.ticks], dtype=np.float64)
        acked = np.array([r.acked_kbps for r in log.ticks], dtype=np.float64)
        rtt = np.array([r.rtt_ms for r in log.ticks], dtype=np.float64)
        loss = np.array([r.loss_fraction for r in log.ticks], dtype=np.float64)
        h = REWARD_HORIZON_TICKS
        win_mean = lambda x: np.convolve(x, np.ones(h) / h, mode="valid")  # noqa: E731
        # reward of tick t averages raw stats over ticks t+1..t+h, then clamps
        thr = np.clip(win_mean(acked) / params.throughput_norm_kbps, 0.0, 1.0)
        dly = np.clip(win_mean(rtt) / params.delay_norm_ms, 0.0, 1.0)
        lss = np.clip(win_mean(loss), 0.0, 1.0)
        r_all = params.alpha * thr - params.beta * dly - params.gamma * lss
        last_t = n - 1 - h
        ts = np.arange(W_WINDOW - 1, last_t + 1)
        windows = np.lib.stride_tricks.sliding_window_view(feats, (W_WINDOW, N_FEATURES))
        windows = windows[:, 0]  # (n - W + 1, W, 11)
        states.append(windows[ts - (W_WINDOW - 1)])
        next_states.append(windows[ts - (W_WINDOW - 1) + 1])
        actions.append(acts[ts])
        rewards.append(r_all[ts + 1])
        d = np.zeros(len(ts), dtype=np.float32)
        d[-1] = 1.0
        dones.append(d)
        prov.append((log.trace_id, log.config.digest()))
    if not states:
        return Dataset(
            states=np.zeros((0, W_WINDOW, N_FEATURES), np.float32),
            actions=np.zeros(0, np.float32), rewards=np.zeros(0, np.float32),
            next_states=np.zeros((0, W_WINDOW, N_FEATURES), np.float32),
            dones=np.zeros(0, np.float32), provenance=prov)
    return Dataset(
        states=np.ascontiguousarray(np.concatenate(states), dtype=np.float32),
        actions=np.concatenate(actions).astype(np.float32),
        rewards=np.concatenate(rewards).astype(np.float32),
        next_states=np.ascontiguousarray(np.concatenate(next_states), dtype=np.float32),
        dones=np.concatenate(dones).astype(np.float32),
        provenance=prov,
    )


def write_dataset(ds: Dataset, path: str | Path) -> None:
    """JSON header line + fixed-width float32 records (little-endian)."""
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "transition_dataset",
        "n_transitions": len(ds),
        "window": W_WINDOW,
        "n_features": N_FEATURES,
        "record_floats": _RECORD_FLOATS,
        "normalization": ds.normalization,
        "provenance": [list(p) for p in ds.provenance],
        "feature_names": list(FEATURE_NAMES),
        "meta": ds.meta,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for lo in range(0, len(ds), 4096):
            hi = min(lo + 4096, len(ds))
            block = np.concatenate([
                ds.states[lo:hi].reshape(hi - lo, -1),
                ds.actions[lo:hi, None],
                ds.rewards[lo:hi, None],
                ds.next_states[lo:hi].reshape(hi - lo, -1),
                ds.dones[lo:hi, None],
            ], axis=1).astype("<f4")
            f.write(block.tobytes())


def read_dataset(path: str | Path) -> Dataset:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError:
            raise TelemetryError(f"{path}: unreadable dataset header") from None
        if header.get("format_version") != DATASET_FORMAT_VERSION or \
                header.get("kind") != "transition_dataset":
            raise TelemetryError(f"{path}: unsupported dataset format")
        k = header["n_transitions"]
        rec = header["record_floats"]
        raw = f.read()
    want = k * rec * 4
    if len(raw) != want:
        got_records = len(raw) // (rec * 4)
        raise TelemetryError(
            f"{path}: truncated dataset (complete records: {got_records}/{k})")
    flat = np.frombuffer(raw, dtype="<f4").reshape(k, rec)
    sw = W_WINDOW * N_FEATURES
    return Dataset(
        states=flat[:, :sw].reshape(k, W_WINDOW, N_FEATURES).copy(),
        actions=flat[:, sw].copy(),
        rewards=flat[:, sw + 1].copy(),
        next_states=flat[:, sw + 2 : sw + 2 + sw].reshape(k, W_WINDOW, N_FEATURES).copy(),
        dones=flat[:, -1].copy(),
        provenance=[tuple(p) for p in header.get("provenance", [])],
        normalization=header.get("normalization", default_normalization()),
        meta=header.get("meta", {}),
    )


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic: sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise TelemetryError("KS statistic needs non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.abs(fa - fb).max())


@dataclass(frozen=True)
class DriftReport:
    per_feature: dict[str, float]
    max_statistic: float
    threshold: float
    retrain: bool


def drift_score(ds_a: Dataset, ds_b: Dataset, threshold: float = 0.2) -> DriftReport:
    """Per-feature KS over the current-tick (last-row) feature marginals."""
    if len(ds_a) == 0 or len(ds_b) == 0:
        raise TelemetryError("drift_score needs non-empty datasets")
    per = {}
    for j, name in enumerate(FEATURE_NAMES):
        per[name] = ks_statistic(ds_a.states[:, -1, j], ds_b.states[:, -1, j])
    mx = max(per.values())
    return DriftReport(per_feature=per, max_statistic=mx, threshold=threshold,
                       retrain=mx > threshold)
