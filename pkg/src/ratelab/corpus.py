"""Seeded synthetic corpus construction for experiments and acceptance runs."""
from __future__ import annotations

import numpy as np

from .traces import BandwidthTrace, SyntheticSpec, gen_synthetic_trace, trace_stats

RTT_CHOICES = (40, 100, 160)

# mix tuned so that a meaningful share of traces has the capacity swings where
# the heuristic's slow ramps and late backoffs show up
KIND_WEIGHTS = (
    ("step", 0.30),
    ("dip", 0.20),
    ("random_walk", 0.35),
    ("sawtooth", 0.10),
    ("constant", 0.05),
)


def build_corpus(n: int, seed: int = 0, duration_ms: int = 60_000,
                 ) -> list[tuple[BandwidthTrace, int]]:
    """n (trace, rtt_ms) pairs; deterministic in seed, means inside 0.2-6 Mbps.

    Level swings drop into the 150-700 kbps range where a 50-packet queue
    drains slowly, so late backoffs genuinely stall the video.
    """
    rng = np.random.default_rng(seed)
    kinds = [k for k, _ in KIND_WEIGHTS]
    probs = np.array([w for _, w in KIND_WEIGHTS])
    out: list[tuple[BandwidthTrace, int]] = []
    i = 0
    while len(out) < n:
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        low = float(np.exp(rng.uniform(np.log(150.0), np.log(700.0))))
        ratio = float(rng.uniform(2.5, 8.0))
        high = min(low * ratio, 6000.0)
        if kind == "constant":
            low = float(np.exp(rng.uniform(np.log(250.0), np.log(3000.0))))
            high = low
        if kind == "random_walk":
            period = int(rng.integers(2_000, 6_000))
        else:
            period = int(rng.integers(8_000, 25_000))
        spec = SyntheticSpec(kind, low_kbps=low, high_kbps=high,
                             period_ms=period, duration_ms=duration_ms)
        trace = gen_synthetic_trace(spec, seed=int(rng.integers(0, 2**31)))
        trace = BandwidthTrace(id=f"{kind}-{seed}-{i:04d}", samples=trace.samples,
                               duration_ms=trace.duration_ms)
        i += 1
        mean = trace_stats(trace).mean_kbps
        if not (200.0 <= mean <= 6000.0):
            continue
        rtt = RTT_CHOICES[len(out) % len(RTT_CHOICES)]
        out.append((trace, rtt))
    return out
