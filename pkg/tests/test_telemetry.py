import numpy as np
import pytest

from ratelab.sim import SimConfig, TickRecord
from ratelab.telemetry import (Dataset, RewardParams, TelemetryError, W_WINDOW,
                               build_state, compute_reward, dataset_from_logs,
                               drift_score, extract_transitions, ks_statistic,
                               read_dataset, tick_features, write_dataset)


def _tick(**kw):
    return TickRecord(**kw)


def test_feature_normalizers():
    rec = _tick(sent_kbps=3000, acked_kbps=9000, action_kbps=0, owd_ms=500,
                owd_jitter_ms=100, interarrival_var_ms2=2000, rtt_ms=250,
                min_rtt_ms=40, ticks_since_feedback=2, loss_fraction=0.3,
                ticks_since_loss_report=30)
    row = tick_features(rec, prev_action_kbps=1200)
    assert row[0] == pytest.approx(0.5)         # sent / 6000
    assert row[1] == 1.0                        # acked clamped
    assert row[2] == pytest.approx(0.2)         # prev action / 6000
    assert row[3] == pytest.approx(0.5)         # owd / 1000
    assert row[5] == 1.0                        # variance clamped
    assert row[6] == pytest.approx(0.25)
    assert row[8] == pytest.approx(0.1)         # ticks / 20
    assert row[9] == pytest.approx(0.3)
    assert row[10] == 1.0                       # 30/20 clamped
    assert row.min() >= 0.0 and row.max() <= 1.0


def test_build_state_padding(gcc_logs):
    log = gcc_logs[0]
    s = build_state(log, 0)
    assert s.shape == (W_WINDOW, 11)
    # 19 pad rows + 1 real row; pad rows have saturated staleness counters
    assert (s[:19, 8] == 1.0).all() and (s[:19, 0] == 0.0).all()


def test_build_state_causal(gcc_logs):
    log = gcc_logs[0]
    # mutating ticks after t must not change build_state(t)
    t = 50
    before = build_state(log, t).copy()
    saved = log.ticks[t + 1]
    log.ticks[t + 1] = _tick(sent_kbps=9999)
    after = build_state(log, t)
    log.ticks[t + 1] = saved
    assert np.array_equal(before, after)


def test_build_state_rejects_out_of_range(gcc_logs):
    with pytest.raises(TelemetryError):
        build_state(gcc_logs[0], len(gcc_logs[0].ticks))


def test_reward_hand_cases():
    mk = lambda a, r, l: [_tick(acked_kbps=a, rtt_ms=r, loss_fraction=l)]
    assert compute_reward(mk(6000, 0, 0)) == pytest.approx(2.0)
    assert compute_reward(mk(3000, 200, 0.05)) == pytest.approx(0.75)
    assert compute_reward(mk(0, 1000, 1)) == pytest.approx(-2.0)


def test_reward_bounds_and_monotonicity():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, r, l = rng.uniform(0, 9000), rng.uniform(0, 2000), rng.uniform(0, 1)
        base = compute_reward([_tick(acked_kbps=a, rtt_ms=r, loss_fraction=l)])
        assert -2.0 <= base <= 2.0
        up = compute_reward([_tick(acked_kbps=a + 100, rtt_ms=r, loss_fraction=l)])
        worse_rtt = compute_reward([_tick(acked_kbps=a, rtt_ms=r + 100, loss_fraction=l)])
        assert up >= base - 1e-12
        assert worse_rtt <= base + 1e-12


def test_reward_empty_window_rejected():
    with pytest.raises(TelemetryError):
        compute_reward([])


def test_transition_count(gcc_logs):
    log = gcc_logs[0]
    n = len(log.ticks)
    ts = extract_transitions(log)
    assert n == 1200
    assert len(ts) == 1161  # n - (W-1) - horizon
    assert ts[-1].done and not any(t.done for t in ts[:-1])


def test_transition_reward_is_forward_looking(gcc_logs):
    log = gcc_logs[0]
    ts = extract_transitions(log)
    t0 = W_WINDOW - 1
    expect = compute_reward(log.ticks[t0 + 1 : t0 + 21])
    assert ts[0].reward == pytest.approx(expect)


def test_vectorized_extraction_matches_naive(gcc_logs):
    log = gcc_logs[1]
    naive = extract_transitions(log)
    ds = dataset_from_logs([log])
    assert len(ds) == len(naive)
    for k in (0, 7, len(naive) // 2, len(naive) - 1):
        assert np.allclose(ds.states[k], naive[k].state, atol=1e-7)
        assert np.allclose(ds.next_states[k], naive[k].next_state, atol=1e-7)
        assert ds.actions[k] == pytest.approx(naive[k].action_kbps, rel=1e-6)
        assert ds.rewards[k] == pytest.approx(naive[k].reward, abs=1e-5)
        assert bool(ds.dones[k]) == naive[k].done


def test_short_log_yields_no_transitions(gcc_logs):
    log = gcc_logs[0]
    short = type(log)(config=log.config, trace_id="short", ticks=log.ticks[:30],
                      frames=[])
    assert extract_transitions(short) == []


def test_dataset_round_trip(tmp_path, gcc_logs):
    ds = dataset_from_logs(gcc_logs[:2])
    path = tmp_path / "d.rld"
    write_dataset(ds, path)
    again = read_dataset(path)
    assert np.array_equal(again.states, ds.states)
    assert np.array_equal(again.actions, ds.actions)
    assert np.array_equal(again.rewards, ds.rewards)
    assert np.array_equal(again.next_states, ds.next_states)
    assert np.array_equal(again.dones, ds.dones)
    assert again.provenance == ds.provenance
    assert again.normalization == ds.normalization


def test_dataset_truncation_detected(tmp_path, gcc_logs):
    ds = dataset_from_logs(gcc_logs[:1])
    path = tmp_path / "d.rld"
    write_dataset(ds, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(TelemetryError, match="complete records"):
        read_dataset(path)


def test_empty_dataset_round_trip(tmp_path):
    ds = dataset_from_logs([])
    path = tmp_path / "empty.rld"
    write_dataset(ds, path)
    assert len(read_dataset(path)) == 0


def test_ks_statistic_basics():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, 5000)
    assert ks_statistic(a, a) == 0.0
    b = rng.uniform(2, 3, 5000)
    assert ks_statistic(a, b) == 1.0


def test_ks_adjacent_uniforms():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.0, 0.5, 10_000)
    b = rng.uniform(0.5, 1.0, 10_000)
    assert ks_statistic(a, b) == pytest.approx(1.0, abs=0.01)


def test_drift_identical_zero(gcc_logs):
    ds = dataset_from_logs(gcc_logs[:2])
    rep = drift_score(ds, ds)
    assert rep.max_statistic == 0.0
    assert not rep.retrain
    assert set(rep.per_feature) == set(
        ("sent_bitrate", "acked_bitrate", "prev_action", "owd", "owd_jitter",
         "interarrival_var", "rtt", "min_rtt", "ticks_since_feedback", "loss",
         "ticks_since_loss_report"))


def test_drift_disjoint_supports_triggers(gcc_logs):
    ds = dataset_from_logs(gcc_logs[:2])
    shifted = Dataset(states=np.clip(ds.states + 0.73, 0, 2), actions=ds.actions,
                      rewards=ds.rewards, next_states=ds.next_states, dones=ds.dones)
    rep = drift_score(ds, shifted)
    assert rep.max_statistic > 0.9
    assert rep.retrain
