"""Offline training of the conservative distributional actor-critic.

One shared GRU encoder (updated by the critic loss), a deterministic actor
head squashed into the action range, and a quantile critic trained with the
quantile Huber loss plus a conservative penalty that depresses the value of
policy actions relative to logged actions. Behavior cloning reuses the same
encoder/actor shapes with a plain regression loss.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .nets import GRU, MLP, Adam, sigmoid, polyak_update, clone_params, param_count
from .nets import grad_check, numeric_grads, max_rel_error  # re-exported for callers
from . import telemetry
from .telemetry import ACTION_MIN_KBPS, ACTION_MAX_KBPS, Dataset, W_WINDOW, N_FEATURES

MODEL_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries step diagnostics."""


@dataclass(frozen=True)
class TrainHyper:
    cql_alpha: float = 0.01
    n_quantiles: int = 128
    discount_gamma: float = 0.99
    batch_size: int = 256
    actor_lr: float = 1e-4
    critic_lr: float = 3e-4
    polyak_tau: float = 0.005
    huber_kappa: float = 1.0
    grad_steps: int = 50_000
    eval_every: int = 2_500
    seed: int = 0
    gru_hidden: int = 32
    mlp_hidden: int = 256
    standardize_action_input: bool = True  # z-score the critic's action column
    # width of the unit-action smear that turns the conservative penalty's
    # policy expectation into a one-sample Monte-Carlo estimate; without it a
    # deterministic actor is chased by a point penalty dug exactly under it
    cql_action_noise: float = 0.05

    def __post_init__(self):
        if self.cql_alpha < 0:
            raise ValueError("cql_alpha must be >= 0")
        if not (0.0 < self.discount_gamma < 1.0):
            raise ValueError("discount_gamma must be in (0, 1)")
        if self.n_quantiles < 1 or self.batch_size < 1:
            raise ValueError("n_quantiles and batch_size must be positive")


def make_taus(n: int, dtype=np.float64) -> np.ndarray:
    """Quantile midpoints (2i - 1) / (2N), i = 1..N."""
    return ((2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)).astype(dtype)


def _to_unit_action(kbps):
    return (np.asarray(kbps, dtype=np.float64) - ACTION_MIN_KBPS) / (ACTION_MAX_KBPS - ACTION_MIN_KBPS)


def _from_unit_action(a01):
    return ACTION_MIN_KBPS + (ACTION_MAX_KBPS - ACTION_MIN_KBPS) * np.asarray(a01, dtype=np.float64)


def quantile_huber_loss(pred: np.ndarray, target: np.ndarray, kappa: float = 1.0,
                        taus: np.ndarray | None = None) -> float:
    """Quantile Huber loss between one quantile vector and one target sample set.

    L = (1/(N*M)) sum_ij |tau_i - 1[u_ij < 0]| * Huber_kappa(u_ij) / kappa
    with u_ij = target_j - pred_i.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(1, -1)
    target = np.asarray(target, dtype=np.float64).reshape(1, -1)
    if taus is None:
        taus = make_taus(pred.shape[1])
    loss, _ = _qh_batch(pred, target, kappa, taus)
    return float(loss)


def _qh_batch(pred: np.ndarray, target: np.ndarray, kappa: float,
              taus: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean quantile Huber loss and gradient w.r.t. pred.

    Exact O(B*N*log M) evaluation: targets are sorted per row, each (pred, kappa)
    boundary is located by binary search, and segment sums come from prefix sums.
    The four segments per pred quantile p are
      t <= p-k (linear, weight 1-tau), p-k < t < p (quadratic, 1-tau),
      p <= t < p+k (quadratic, tau),   t >= p+k (linear, tau).
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    B, N = pred.shape
    M = target.shape[1]
    work = np.float32 if pred.dtype == np.float32 and target.dtype == np.float32 else np.float64
    # center rows so the expanded quadratic terms stay cancellation-safe
    mu = target.mean(axis=1, keepdims=True)
    P = (pred - mu).astype(work)
    T = np.sort((target - mu).astype(work), axis=1)
    kappa = work(kappa)
    s1 = np.zeros((B, M + 1), dtype=work)
    np.cumsum(T, axis=1, out=s1[:, 1:])
    s2 = np.zeros((B, M + 1), dtype=work)
    np.cumsum(T * T, axis=1, out=s2[:, 1:])

    lo = min(float(T.min()), float(P.min()) - float(kappa))
    hi = max(float(T.max()), float(P.max()) + float(kappa))
    span = work(hi - lo + 1.0)
    offs = (np.arange(B, dtype=work)[:, None] * span)
    t_flat = (T + offs).ravel()
    base = (np.arange(B)[:, None] * M)

    def counts(queries: np.ndarray, side: str) -> np.ndarray:
        flat = (queries + offs).ravel()
        return (np.searchsorted(t_flat, flat, side=side).reshape(B, N) - base)

    c1 = np.clip(counts(P - kappa, "right"), 0, M)   # t <= p - kappa
    c2 = np.clip(counts(P, "left"), 0, M)            # t < p
    c3 = np.clip(counts(P + kappa, "left"), 0, M)    # t < p + kappa

    take = lambda s, c: np.take_along_axis(s, c, axis=1)  # noqa: E731
    s1_1, s1_2, s1_3 = take(s1, c1), take(s1, c2), take(s1, c3)
    s2_1, s2_2, s2_3 = take(s2, c1), take(s2, c2), take(s2, c3)
    s1_m = s1[:, -1:]

    nA = c1.astype(work)
    nB = (c2 - c1).astype(work)
    nC = (c3 - c2).astype(work)
    nD = (M - c3).astype(work)
    sB = s1_2 - s1_1
    qB = s2_2 - s2_1
    sC = s1_3 - s1_2
    qC = s2_3 - s2_2
    sD = s1_m - s1_3

    w_lo = (1.0 - taus).astype(work)[None, :]
    w_hi = taus.astype(work)[None, :]
    half_k = work(0.5) * kappa
    L = (w_lo * (nA * (P - half_k) - s1_1)
         + (w_lo / (2.0 * kappa)) * (qB - 2.0 * P * sB + nB * P * P)
         + (w_hi / (2.0 * kappa)) * (qC - 2.0 * P * sC + nC * P * P)
         + w_hi * (sD - nD * (P + half_k)))
    G = (w_lo * nA
         + (w_lo / kappa) * (nB * P - sB)
         + (w_hi / kappa) * (nC * P - sC)
         - w_hi * nD)
    norm = 1.0 / (B * N * M)
    return float(L.sum(dtype=np.float64) * norm), (G * work(norm)).astype(np.float64)


@dataclass
class ModelBundle:
    """Encoder + actor (the deployable policy) plus critics during training."""
    gru: GRU
    actor: MLP
    critic: MLP | None
    target_critic: MLP | None
    hyper: TrainHyper
    normalization: dict[str, float]
    train_curve: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)  # persisted verbatim in the container

    @classmethod
    def create(cls, hyper: TrainHyper, dtype=np.float32,
               normalization: dict[str, float] | None = None,
               with_critic: bool = True) -> "ModelBundle":
        rng = np.random.default_rng(hyper.seed)
        gru = GRU(N_FEATURES, hyper.gru_hidden, rng, dtype)
        actor = MLP([hyper.gru_hidden, hyper.mlp_hidden, hyper.mlp_hidden, 1], rng, dtype)
        critic = target = None
        if with_critic:
            critic = MLP([hyper.gru_hidden + 1, hyper.mlp_hidden, hyper.mlp_hidden,
                          hyper.n_quantiles], rng, dtype)
            target = MLP(critic.sizes, rng, dtype)
            for k in target.params:
                target.params[k][:] = critic.params[k]
        return cls(gru=gru, actor=actor, critic=critic, target_critic=target,
                   hyper=hyper,
                   normalization=normalization or telemetry.default_normalization())

    @property
    def dtype(self):
        return self.gru.dtype

    def policy_param_count(self) -> int:
        return param_count(self.gru) + param_count(self.actor)

    def action_input(self, a01: np.ndarray) -> np.ndarray:
        """Critic's view of a unit action; z-scored when the stats are set.

        The logged actions occupy a narrow band of [0, 1], so standardizing
        restores the critic's resolution along the action axis.
        """
        mu = self.normalization.get("action_input_mu")
        sd = self.normalization.get("action_input_sd")
        if mu is None or sd is None:
            return a01
        return (a01 - mu) / sd

    def embed(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=self.dtype)
        single = states.ndim == 2
        if single:
            states = states[None]
        e = self.gru.forward(states)
        return e[0] if single else e

    def act(self, state: np.ndarray) -> float:
        """Target bitrate (kbps) for one state window."""
        e = self.embed(state)[None] if np.asarray(state).ndim == 2 else self.embed(state)
        a01 = sigmoid(self.actor.forward(np.atleast_2d(e)))
        kbps = _from_unit_action(a01[:, 0])
        return float(kbps[0]) if kbps.shape[0] == 1 else kbps

    def act_batch(self, states: np.ndarray) -> np.ndarray:
        e = self.embed(states)
        a01 = sigmoid(self.actor.forward(e))
        return _from_unit_action(a01[:, 0])

    def snapshot_policy(self) -> dict[str, np.ndarray]:
        return {**{f"gru.{k}": v.copy() for k, v in self.gru.params.items()},
                **{f"actor.{k}": v.copy() for k, v in self.actor.params.items()}}

    def restore_policy(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            scope, name = k.split(".", 1)
            net = self.gru if scope == "gru" else self.actor
            net.params[name][:] = v


def embed(gru: GRU, state: np.ndarray) -> np.ndarray:
    """Final GRU hidden state for one (W, F) window."""
    state = np.asarray(state, dtype=gru.dtype)
    return gru.forward(state[None])[0]


def _batch_from(dataset: Dataset, idx: np.ndarray, dtype):
    return (dataset.states[idx].astype(dtype, copy=False),
            dataset.actions[idx].astype(np.float64),
            dataset.rewards[idx].astype(np.float64),
            dataset.next_states[idx].astype(dtype, copy=False),
            dataset.dones[idx].astype(np.float64))


def critic_targets(batch, bundle: ModelBundle, hyper: TrainHyper) -> np.ndarray:
    """y_i = r + gamma * (1 - done) * target_quantile_i(s', pi(s')); no gradients."""
    s, _, r, s2, done = batch
    e2 = bundle.gru.forward(np.asarray(s2, dtype=bundle.dtype))
    a2 = bundle.action_input(sigmoid(bundle.actor.forward(e2)))
    q2 = bundle.target_critic.forward(np.concatenate([e2, a2], axis=1)).astype(np.float64)
    return r[:, None] + hyper.discount_gamma * (1.0 - done)[:, None] * q2


def cql_penalty(batch, bundle: ModelBundle) -> float:
    """mean_b [ Qbar(s, pi(s)) - Qbar(s, a_data) ] with Qbar = mean critic quantile."""
    s, a_kbps, _, _, _ = batch
    e = bundle.gru.forward(np.asarray(s, dtype=bundle.dtype))
    a_pi = bundle.action_input(sigmoid(bundle.actor.forward(e)))
    a_data = bundle.action_input(_to_unit_action(a_kbps)[:, None]).astype(bundle.dtype)
    q_pi = bundle.critic.forward(np.concatenate([e, a_pi], axis=1))
    q_data = bundle.critic.forward(np.concatenate([e, a_data], axis=1))
    return float(q_pi.mean() - q_data.mean())


@dataclass
class _OptState:
    critic_enc: Adam
    actor: Adam
    params_ce: dict[str, np.ndarray]
    grads_ce: dict[str, np.ndarray]


def _make_opt(bundle: ModelBundle, hyper: TrainHyper) -> _OptState:
    params_ce = {**{f"critic.{k}": v for k, v in bundle.critic.params.items()},
                 **{f"gru.{k}": v for k, v in bundle.gru.params.items()}}
    grads_ce = {**{f"critic.{k}": v for k, v in bundle.critic.grads.items()},
                **{f"gru.{k}": v for k, v in bundle.gru.grads.items()}}
    return _OptState(critic_enc=Adam(params_ce, hyper.critic_lr),
                     actor=Adam(bundle.actor.params, hyper.actor_lr),
                     params_ce=params_ce, grads_ce=grads_ce)


def train_step(batch, bundle: ModelBundle, hyper: TrainHyper,
               opt: _OptState, taus: np.ndarray,
               rng: np.random.Generator | None = None) -> dict[str, float]:
    """One critic+encoder update, one actor update, one Polyak update."""
    gru, actor, critic, tgt = bundle.gru, bundle.actor, bundle.critic, bundle.target_critic
    dt = bundle.dtype
    s, a_kbps, r, s2, done = batch
    B = s.shape[0]
    N = hyper.n_quantiles
    H = hyper.gru_hidden

    # targets bootstrap through the frozen target critic and current actor
    y = critic_targets(batch, bundle, hyper)
    if not np.isfinite(y).all():
        raise TrainingDiverged(
            f"non-finite critic targets (rewards finite: {bool(np.isfinite(r).all())})")

    # critic + encoder step: quantile regression on logged actions plus the
    # conservative gap between policy-action and logged-action values
    e, gcache = gru.forward(np.asarray(s, dtype=dt), want_cache=True)
    a_pi01 = sigmoid(actor.forward(e))  # constant in the critic step
    if hyper.cql_action_noise > 0 and rng is not None:
        a_pi01 = np.clip(a_pi01 + rng.normal(0.0, hyper.cql_action_noise,
                                             size=a_pi01.shape), 0.0, 1.0)
    a_pi = bundle.action_input(a_pi01)
    a_data = bundle.action_input(_to_unit_action(a_kbps)[:, None]).astype(dt)
    zin = np.concatenate([
        np.concatenate([e, a_data], axis=1),
        np.concatenate([e, a_pi.astype(dt)], axis=1),
    ], axis=0)
    z, ccache = critic.forward(zin, want_cache=True)
    z_data, z_pi = z[:B], z[B:]
    qh_loss, dz_data = _qh_batch(z_data, y.astype(dt), hyper.huber_kappa, taus)
    cql_term = float(z_pi.mean() - z_data.mean())
    critic_loss = qh_loss + hyper.cql_alpha * cql_term
    unit = hyper.cql_alpha / (B * N)
    dz = np.concatenate([dz_data - unit, np.full((B, N), unit)], axis=0).astype(dt)
    critic.zero_grads()
    gru.zero_grads()
    din = critic.backward(dz, ccache)
    gru.backward(din[:B, :H] + din[B:, :H], gcache)
    opt.critic_enc.step(opt.params_ce, opt.grads_ce)

    # actor step against the refreshed critic; the embedding is a constant input
    # here (reused from the critic pass, one encoder update stale)
    za, acache = actor.forward(e, want_cache=True)
    a01 = sigmoid(za)
    a_in = bundle.action_input(a01).astype(dt)
    q, ccache2 = critic.forward(np.concatenate([e, a_in], axis=1), want_cache=True)
    actor_loss = -float(q.mean())
    dq = np.full((B, N), -1.0 / (B * N), dtype=dt)
    din2 = critic.backward(dq, ccache2, param_grads=False)
    act_sd = bundle.normalization.get("action_input_sd") or 1.0
    dza = (din2[:, H:] / act_sd * a01 * (1.0 - a01)).astype(dt)
    actor.zero_grads()
    actor.backward(dza, acache)
    opt.actor.step(actor.params, actor.grads)

    polyak_update(tgt.params, critic.params, hyper.polyak_tau)

    metrics = {"critic_loss": critic_loss, "cql_term": cql_term, "actor_loss": actor_loss}
    if not all(math.isfinite(v) for v in metrics.values()):
        raise TrainingDiverged(f"non-finite loss: {metrics}")
    return metrics


def session_reward(log) -> float:
    """Mean per-tick Eq-style reward of a session; the model-selection metric."""
    acked = np.array([t.acked_kbps for t in log.ticks])
    rtt = np.array([t.rtt_ms for t in log.ticks])
    loss = np.array([t.loss_fraction for t in log.ticks])
    thr = np.clip(acked / telemetry.BITRATE_NORM_KBPS, 0.0, 1.0)
    dly = np.clip(rtt / telemetry.DELAY_NORM_MS, 0.0, 1.0)
    lss = np.clip(loss, 0.0, 1.0)
    return float((2.0 * thr - dly - lss).mean())


def evaluate_policy(bundle: ModelBundle, sessions) -> float:
    """Median session reward of the bundle's policy over (trace, config) pairs."""
    from .sim import run_session

    rewards = []
    for trace, config in sessions:
        log = run_session(trace, PolicyController(bundle), config)
        rewards.append(session_reward(log))
    return float(np.median(rewards))


def train(dataset: Dataset, hyper: TrainHyper, val_sessions=(),
          progress=None) -> ModelBundle:
    """Offline actor-critic training; returns the best-on-validation bundle.

    Every eval_every steps the current policy is rolled out on the validation
    sessions; the checkpoint with the best median reward wins (ties -> earlier).
    Without validation sessions the final weights are returned.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    norm = dict(dataset.normalization)
    if hyper.standardize_action_input:
        a01 = _to_unit_action(dataset.actions)
        norm["action_input_mu"] = float(a01.mean())
        norm["action_input_sd"] = float(max(a01.std(), 1e-3))
    bundle = ModelBundle.create(hyper, normalization=norm)
    opt = _make_opt(bundle, hyper)
    taus = make_taus(hyper.n_quantiles)
    rng = np.random.default_rng(hyper.seed)
    best_score = -math.inf
    best_snap = bundle.snapshot_policy()
    curve: list[dict] = []

    # matmuls here are too small for BLAS threading to pay off, and a single
    # thread keeps batch math bit-deterministic regardless of the host config
    with threadpool_limits(limits=1):
        for step in range(1, hyper.grad_steps + 1):
            idx = rng.integers(0, len(dataset), size=hyper.batch_size)
            batch = _batch_from(dataset, idx, bundle.dtype)
            try:
                metrics = train_step(batch, bundle, hyper, opt, taus, rng=rng)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"step {step}: {exc}") from None
            if step % hyper.eval_every == 0 or step == hyper.grad_steps:
                point = {"step": step, **metrics}
                if val_sessions:
                    score = evaluate_policy(bundle, val_sessions)
                    point["val_median_reward"] = score
                    if score > best_score:
                        best_score = score
                        best_snap = bundle.snapshot_policy()
                curve.append(point)
                if progress is not None:
                    progress(point)

    if val_sessions and hyper.grad_steps > 0:
        bundle.restore_policy(best_snap)
    bundle.train_curve = curve
    return bundle


def bc_train(dataset: Dataset, hyper: TrainHyper, progress=None) -> ModelBundle:
    """Behavior cloning: regress the squashed actor output onto logged actions."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    bundle = ModelBundle.create(hyper, normalization=dataset.normalization,
                                with_critic=False)
    gru, actor = bundle.gru, bundle.actor
    dt = bundle.dtype
    opt_actor = Adam(actor.params, hyper.actor_lr)
    opt_gru = Adam(gru.params, hyper.actor_lr)
    rng = np.random.default_rng(hyper.seed)
    curve: list[dict] = []
    with threadpool_limits(limits=1):
        for step in range(1, hyper.grad_steps + 1):
            idx = rng.integers(0, len(dataset), size=hyper.batch_size)
            s = dataset.states[idx].astype(dt, copy=False)
            a01 = _to_unit_action(dataset.actions[idx])[:, None]
            e, gcache = gru.forward(s, want_cache=True)
            za, acache = actor.forward(e, want_cache=True)
            pred = sigmoid(za)
            err = pred - a01.astype(dt)
            loss = float((err * err).mean())
            if not math.isfinite(loss):
                raise TrainingDiverged(f"step {step}: non-finite BC loss")
            dza = (2.0 / err.size) * err * pred * (1.0 - pred)
            actor.zero_grads()
            gru.zero_grads()
            de = actor.backward(dza.astype(dt), acache)
            gru.backward(de, gcache)
            opt_actor.step(actor.params, actor.grads)
            opt_gru.step(gru.params, gru.grads)
            if step % hyper.eval_every == 0 or step == hyper.grad_steps:
                point = {"step": step, "bc_loss": loss}
                curve.append(point)
                if progress is not None:
                    progress(point)
    bundle.train_curve = curve
    return bundle


# --- persistence -------------------------------------------------------------

def _named_tensors(bundle: ModelBundle, include_critic: bool):
    groups = [("gru", bundle.gru), ("actor", bundle.actor)]
    if include_critic:
        groups += [("critic", bundle.critic), ("target_critic", bundle.target_critic)]
    for scope, net in groups:
        for k, v in net.params.items():
            yield f"{scope}.{k}", v


def save_model(bundle: ModelBundle, path: str | Path, include_critic: bool = False) -> None:
    """JSON header line + little-endian float32 blocks, one per named tensor."""
    if include_critic and bundle.critic is None:
        raise ValueError("bundle has no critic to save")
    tensors = list(_named_tensors(bundle, include_critic))
    header = {
        "format": "ratelab-model",
        "format_version": MODEL_FORMAT_VERSION,
        "dtype": "<f4",
        "tensors": [[name, list(v.shape)] for name, v in tensors],
        "hyper": asdict(bundle.hyper),
        "normalization": bundle.normalization,
        "policy_param_count": bundle.policy_param_count(),
        "includes_critic": include_critic,
        "meta": bundle.meta,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, v in tensors:
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_model(path: str | Path) -> ModelBundle:
    with open(path, "rb") as f:
        try:
            header = json.loads(f.readline())
        except json.JSONDecodeError:
            raise ValueError(f"{path}: corrupt model header") from None
        if header.get("format") != "ratelab-model" or \
                header.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model format")
        hyper = TrainHyper(**header["hyper"])
        bundle = ModelBundle.create(hyper, normalization=header["normalization"],
                                    with_critic=header["includes_critic"])
        expected = dict(_named_tensors(bundle, header["includes_critic"]))
        for name, shape in header["tensors"]:
            if name not in expected:
                raise ValueError(f"{path}: unexpected tensor {name!r}")
            dest = expected[name]
            if list(dest.shape) != shape:
                raise ValueError(f"{path}: shape mismatch for {name}: "
                                 f"{shape} vs {list(dest.shape)}")
            raw = f.read(dest.size * 4)
            if len(raw) != dest.size * 4:
                raise ValueError(f"{path}: truncated tensor {name!r}")
            dest[:] = np.frombuffer(raw, dtype="<f4").reshape(dest.shape)
    if not header["includes_critic"]:
        bundle.critic = None
        bundle.target_critic = None
    bundle.meta = header.get("meta", {})
    return bundle


class PolicyController:
    """Drives a session from a trained bundle via the telemetry tick stream."""

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle
        self._rows = [telemetry.PAD_ROW.copy() for _ in range(W_WINDOW)]
        self._last_action = 0.0

    def on_feedback(self, report) -> None:
        pass

    def on_tick(self, record) -> None:
        row = telemetry.tick_features(record, self._last_action)
        self._rows.pop(0)
        self._rows.append(row)

    def decide(self, now_ms: int) -> float:
        state = np.stack(self._rows)
        action = float(self.bundle.act(state))
        self._last_action = action
        return action
