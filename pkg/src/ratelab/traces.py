"""Bandwidth traces: CSV parsing, synthetic generation, stats, filtering, splits.

A trace is piecewise-constant capacity over time: each sample (t_ms, kbps)
holds until the next sample, and the last sample holds until duration_ms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MEAN_KBPS_MIN = 200.0
MEAN_KBPS_MAX = 6000.0

SYNTHETIC_KINDS = ("constant", "step", "dip", "random_walk", "sawtooth")


class TraceError(ValueError):
    """Malformed trace data or invalid trace operation."""


@dataclass(frozen=True)
class BandwidthTrace:
    id: str
    samples: tuple[tuple[int, float], ...]  # (t_ms, capacity_kbps), t strictly increasing from 0
    duration_ms: int

    def __post_init__(self):
        if not self.samples:
            raise TraceError(f"trace {self.id!r}: no samples")
        if self.samples[0][0] != 0:
            raise TraceError(f"trace {self.id!r}: first sample must be at t=0")
        prev_t = -1
        for t, cap in self.samples:
            if t <= prev_t:
                raise TraceError(f"trace {self.id!r}: non-monotonic time at t={t}")
            if not np.isfinite(cap) or cap <= 0:
                raise TraceError(f"trace {self.id!r}: non-positive capacity at t={t}")
            prev_t = t
        if self.duration_ms < self.samples[-1][0]:
            raise TraceError(f"trace {self.id!r}: duration before last sample")

    def breakpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Sample times and capacities as arrays (capacity holds until next time)."""
        ts = np.array([t for t, _ in self.samples], dtype=np.int64)
        caps = np.array([c for _, c in self.samples], dtype=np.float64)
        return ts, caps

    def capacity_at(self, t_ms: float) -> float:
        ts, caps = self.breakpoints()
        idx = int(np.searchsorted(ts, t_ms, side="right")) - 1
        return float(caps[max(idx, 0)])

    def per_ms_capacity(self) -> np.ndarray:
        """Capacity sampled at every millisecond of the trace, shape (duration_ms,)."""
        ts, caps = self.breakpoints()
        out = np.empty(self.duration_ms, dtype=np.float64)
        for i, (t, cap) in enumerate(zip(ts, caps)):
            end = ts[i + 1] if i + 1 < len(ts) else self.duration_ms
            out[t:end] = cap
        return out


@dataclass(frozen=True)
class TraceStats:
    mean_kbps: float
    dynamism_kbps: float  # std-dev across 1-second mean-capacity chunks


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str
    low_kbps: float
    high_kbps: float
    period_ms: int = 10_000
    duration_ms: int = 60_000

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise TraceError(f"unknown synthetic kind {self.kind!r}")
        if not (0 < self.low_kbps <= self.high_kbps):
            raise TraceError("need 0 < low_kbps <= high_kbps")
        if self.period_ms <= 0:
            raise TraceError("period_ms must be positive")
        if self.duration_ms <= 0:
            raise TraceError("duration_ms must be positive")


def parse_trace_csv(text: str, trace_id: str = "csv") -> BandwidthTrace:
    """Parse `t_ms,capacity_kbps` lines (# comments and blank lines allowed).

    A `# duration_ms=N` comment pins the duration explicitly; otherwise it is
    inferred as last t plus the last inter-sample gap (plus 1000 ms when the
    trace has a single sample).
    """
    samples: list[tuple[int, float]] = []
    explicit_duration: int | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            directive = line.lstrip("#").strip()
            if directive.startswith("duration_ms="):
                try:
                    explicit_duration = int(directive.split("=", 1)[1])
                except ValueError:
                    raise TraceError(f"line {lineno}: bad duration directive") from None
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise TraceError(f"line {lineno}: expected 't_ms,capacity_kbps', got {raw!r}")
        try:
            t = int(parts[0].strip())
            cap = float(parts[1].strip())
        except ValueError as exc:
            raise TraceError(f"line {lineno}: {exc}") from None
        if samples and t <= samples[-1][0]:
            raise TraceError(f"line {lineno}: non-monotonic time {t}")
        if t < 0:
            raise TraceError(f"line {lineno}: negative time {t}")
        if not np.isfinite(cap) or cap <= 0:
            raise TraceError(f"line {lineno}: non-positive capacity {cap}")
        samples.append((t, cap))
    if not samples:
        raise TraceError("no samples in trace text")
    if samples[0][0] != 0:
        raise TraceError("first sample must be at t=0")
    if explicit_duration is not None:
        duration = explicit_duration
    elif len(samples) == 1:
        duration = samples[0][0] + 1000
    else:
        last_gap = samples[-1][0] - samples[-2][0]
        duration = samples[-1][0] + last_gap
    return BandwidthTrace(id=trace_id, samples=tuple(samples), duration_ms=duration)


def format_trace_csv(trace: BandwidthTrace) -> str:
    lines = [f"# duration_ms={trace.duration_ms}"]
    lines += [f"{t},{cap!r}" for t, cap in trace.samples]  # repr round-trips exactly
    return "\n".join(lines) + "\n"


def gen_synthetic_trace(spec: SyntheticSpec, seed: int) -> BandwidthTrace:
    """Deterministic synthetic trace for the given spec and seed."""
    rng = np.random.default_rng(seed)
    lo, hi, period, dur = spec.low_kbps, spec.high_kbps, spec.period_ms, spec.duration_ms
    trace_id = f"{spec.kind}-{seed}"
    samples: list[tuple[int, float]]
    if spec.kind == "constant":
        samples = [(0, lo)]
    elif spec.kind == "step":
        # alternate high/low every period, starting high
        samples = []
        level_high = True
        for t in range(0, dur, period):
            samples.append((t, hi if level_high else lo))
            level_high = not level_high
    elif spec.kind == "dip":
        n_periods = max(dur // period, 1)
        dip_idx = int(rng.integers(1, max(n_periods - 1, 2))) if n_periods > 2 else 0
        samples = []
        for i, t in enumerate(range(0, dur, period)):
            samples.append((t, lo if i == dip_idx else hi))
    elif spec.kind == "random_walk":
        # log-space walk, bounded to [lo, hi], one step per period
        log_lo, log_hi = np.log(lo), np.log(hi)
        level = 0.5 * (log_lo + log_hi)
        samples = []
        for t in range(0, dur, period):
            samples.append((t, float(np.exp(level))))
            level = float(np.clip(level + rng.uniform(-0.4, 0.4), log_lo, log_hi))
    else:  # sawtooth: ramp low->high across each period, 1 s sub-samples
        sub = min(1000, period)
        samples = []
        for t in range(0, dur, sub):
            frac = (t % period) / period
            samples.append((t, lo + (hi - lo) * frac))
    # collapse consecutive equal capacities
    dedup: list[tuple[int, float]] = []
    for t, cap in samples:
        if dedup and dedup[-1][1] == cap:
            continue
        dedup.append((t, cap))
    return BandwidthTrace(id=trace_id, samples=tuple(dedup), duration_ms=dur)


def trace_stats(trace: BandwidthTrace) -> TraceStats:
    """Time-weighted mean plus the std-dev of non-overlapping 1 s chunk means."""
    if trace.duration_ms < 1000:
        raise TraceError(f"trace {trace.id!r}: shorter than 1 s")
    per_ms = trace.per_ms_capacity()
    mean = float(per_ms.mean())
    n_chunks = trace.duration_ms // 1000
    chunks = per_ms[: n_chunks * 1000].reshape(n_chunks, 1000).mean(axis=1)
    dynamism = float(chunks.std())  # population std-dev
    return TraceStats(mean_kbps=mean, dynamism_kbps=dynamism)


def filter_corpus(traces: list[BandwidthTrace]) -> list[BandwidthTrace]:
    """Keep traces whose mean capacity lies in [0.2, 6] Mbps (inclusive)."""
    kept = []
    for tr in traces:
        mean = trace_stats(tr).mean_kbps
        if MEAN_KBPS_MIN <= mean <= MEAN_KBPS_MAX:
            kept.append(tr)
    return kept


def split_corpus(
    traces: list[BandwidthTrace],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> tuple[list[BandwidthTrace], list[BandwidthTrace], list[BandwidthTrace]]:
    """Deterministic shuffled partition into (train, val, test)."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise TraceError(f"split ratios must sum to 1, got {ratios}")
    n = len(traces)
    sizes = [int(np.floor(r * n)) for r in ratios]
    # distribute the remainder by descending fractional part, ties by position
    fracs = [(r * n - np.floor(r * n), -i) for i, r in enumerate(ratios)]
    order = sorted(range(len(ratios)), key=lambda i: fracs[i], reverse=True)
    for i in range(n - sum(sizes)):
        sizes[order[i % len(ratios)]] += 1
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [traces[i] for i in perm]
    out, at = [], 0
    for s in sizes:
        out.append(shuffled[at : at + s])
        at += s
    return out[0], out[1], out[2]


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    rtt_ms: int
    seed: int


def write_manifest(entries: list[ManifestEntry], path: str | Path) -> None:
    data = [{"path": e.path, "rtt_ms": e.rtt_ms, "seed": e.seed} for e in entries]
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise TraceError(f"manifest {path}: expected a JSON list")
    return [ManifestEntry(path=d["path"], rtt_ms=int(d["rtt_ms"]), seed=int(d["seed"])) for d in data]


def load_trace_file(path: str | Path) -> BandwidthTrace:
    p = Path(path)
    return parse_trace_csv(p.read_text(), trace_id=p.stem)
