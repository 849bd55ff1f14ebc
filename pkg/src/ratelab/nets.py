"""Dense and recurrent building blocks with hand-written backprop.

Parameters live in plain dicts of numpy arrays so they can be serialized,
Polyak-averaged, and finite-difference checked without framework machinery.
Forward passes optionally return a cache consumed by the matching backward;
gradients accumulate into `.grads` (callers zero them per step).
"""
from __future__ import annotations

import math

import numpy as np


def sigmoid(x: np.ndarray) -> np.ndarray:
    # clamp keeps exp() in range; sigmoid is saturated flat out there anyway
    z = np.maximum(x, -40.0)
    np.minimum(z, 40.0, out=z)
    np.negative(z, out=z)
    np.exp(z, out=z)
    z += 1.0
    np.reciprocal(z, out=z)
    return z


def _fan_in_uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _GruCache:
    __slots__ = ("x", "hs", "z", "r", "rh", "c")

    def __init__(self, T: int, B: int, H: int, dtype):
        self.x = None
        self.hs = np.empty((T, B, H), dtype=dtype)
        self.z = np.empty((T, B, H), dtype=dtype)
        self.r = np.empty((T, B, H), dtype=dtype)
        self.rh = np.empty((T, B, H), dtype=dtype)
        self.c = np.empty((T, B, H), dtype=dtype)


class MLP:
    """Fully connected net, ReLU hidden layers, linear output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator,
                 dtype=np.float32):
        self.sizes = list(sizes)
        self.dtype = dtype
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            self.params[f"W{i}"] = _fan_in_uniform(rng, n_in, (n_in, n_out), dtype)
            self.params[f"b{i}"] = _fan_in_uniform(rng, n_in, (n_out,), dtype)
        self.grads = {}
        self.zero_grads()

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def zero_grads(self) -> None:
        if not self.grads:
            self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        else:  # zero in place so optimizer references stay valid
            for g in self.grads.values():
                g.fill(0)

    def forward(self, x: np.ndarray, want_cache: bool = False):
        cache = [] if want_cache else None
        h = x
        for i in range(self.n_layers):
            a = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                mask = a > 0
                if want_cache:
                    cache.append((h, mask))
                h = a * mask
            else:
                if want_cache:
                    cache.append((h, None))
                h = a
        return (h, cache) if want_cache else h

    def backward(self, dout: np.ndarray, cache, param_grads: bool = True) -> np.ndarray:
        d = dout
        for i in range(self.n_layers - 1, -1, -1):
            h_in, _ = cache[i]
            if param_grads:
                self.grads[f"W{i}"] += h_in.T @ d
                self.grads[f"b{i}"] += d.sum(axis=0)
            d = d @ self.params[f"W{i}"].T
            if i > 0:
                d = d * cache[i - 1][1]
        return d


class GRU:
    """Single-layer GRU; forward over a (B, T, D) window returns the final hidden state."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.dtype = dtype
        self.params: dict[str, np.ndarray] = {}
        for gate in ("z", "r", "h"):
            self.params[f"W_{gate}"] = _fan_in_uniform(rng, input_size,
                                                       (input_size, hidden_size), dtype)
            self.params[f"U_{gate}"] = _fan_in_uniform(rng, hidden_size,
                                                       (hidden_size, hidden_size), dtype)
            self.params[f"b_{gate}"] = _fan_in_uniform(rng, hidden_size,
                                                       (hidden_size,), dtype)
        self.grads: dict[str, np.ndarray] = {}
        self._cache_pool: dict[tuple[int, int], _GruCache] = {}
        self._scratch_pool: dict[tuple[int, int], tuple] = {}
        self.zero_grads()

    def zero_grads(self) -> None:
        if not self.grads:
            self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        else:
            for g in self.grads.values():
                g.fill(0)

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """x: (B, T, D) -> final hidden (B, H).

        All input projections run as one (B*T, D) @ (D, 3H) matmul up front;
        the sequential loop only does the three hidden-state matmuls.
        """
        p = self.params
        B, T, _ = x.shape
        H = self.hidden_size
        h = np.zeros((B, H), dtype=self.dtype)
        w_in = np.concatenate([p["W_z"], p["W_r"], p["W_h"]], axis=1)
        proj = (x.reshape(B * T, -1) @ w_in).reshape(B, T, 3 * H)
        cache = None
        if want_cache:
            # caches are pooled per shape and overwritten next call; consume
            # them (backward) before running another cached forward
            key = (T, B)
            cache = self._cache_pool.get(key)
            if cache is None or cache.z.dtype != self.dtype:
                cache = _GruCache(T, B, H, self.dtype)
                self._cache_pool[key] = cache
            cache.x = x
        for t in range(T):
            pt = proj[:, t, :]
            z = sigmoid(pt[:, :H] + h @ p["U_z"] + p["b_z"])
            r = sigmoid(pt[:, H:2 * H] + h @ p["U_r"] + p["b_r"])
            rh = r * h
            c = np.tanh(pt[:, 2 * H:] + rh @ p["U_h"] + p["b_h"])
            if want_cache:
                cache.hs[t] = h
                cache.z[t] = z
                cache.r[t] = r
                cache.rh[t] = rh
                cache.c[t] = c
            h = (1.0 - z) * c + z * h
        return (h, cache) if want_cache else h

    def backward(self, dh: np.ndarray, cache, param_grads: bool = True) -> None:
        """Backprop through time; parameter gradients batch over all steps."""
        p, g = self.params, self.grads
        T, B, H = cache.z.shape
        dh = dh.astype(self.dtype, copy=True)
        key = (T, B)
        scratch = self._scratch_pool.get(key)
        if scratch is None or scratch[0].dtype != self.dtype:
            scratch = tuple(np.empty((T, B, H), dtype=self.dtype) for _ in range(3))
            self._scratch_pool[key] = scratch
        da_z, da_r, da_c = scratch
        for t in range(T - 1, -1, -1):
            h_prev, z, r, rh, c = cache.hs[t], cache.z[t], cache.r[t], cache.rh[t], cache.c[t]
            dc = dh * (1.0 - z)
            ac = dc * (1.0 - c * c)
            da_c[t] = ac
            drh = ac @ p["U_h"].T
            ar = (drh * h_prev) * r * (1.0 - r)
            da_r[t] = ar
            az = (dh * (h_prev - c)) * z * (1.0 - z)
            da_z[t] = az
            dh = dh * z + drh * r + ar @ p["U_r"].T + az @ p["U_z"].T
        if param_grads:
            x_flat = cache.x.transpose(1, 0, 2).reshape(T * B, -1)  # (T*B, D)
            hs_flat = cache.hs.reshape(T * B, H)
            rh_flat = cache.rh.reshape(T * B, H)
            for name, da in (("z", da_z), ("r", da_r), ("h", da_c)):
                da_flat = da.reshape(T * B, H)
                g[f"W_{name}"] += x_flat.T @ da_flat
                g[f"U_{name}"] += (rh_flat if name == "h" else hs_flat).T @ da_flat
                g[f"b_{name}"] += da_flat.sum(axis=0)


class Adam:
    """Adam update rule over a parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            gk = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * gk
            v *= self.beta2
            v += (1.0 - self.beta2) * gk * gk
            p -= (self.lr / b1c) * m / (np.sqrt(v / b2c) + self.eps)


def polyak_update(target: dict[str, np.ndarray], online: dict[str, np.ndarray],
                  tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, in place."""
    for k in target:
        target[k] *= 1.0 - tau
        target[k] += tau * online[k]


def param_count(net) -> int:
    return sum(int(v.size) for v in net.params.values())


def clone_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def numeric_grads(params: dict[str, np.ndarray], loss_fn, eps: float = 1e-5) -> dict:
    """Central finite differences of loss_fn() w.r.t. every parameter entry."""
    out = {}
    for k, p in params.items():
        gk = np.zeros_like(p, dtype=np.float64)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + eps
            lp = loss_fn()
            p[idx] = orig - eps
            lm = loss_fn()
            p[idx] = orig
            gk[idx] = (lp - lm) / (2.0 * eps)
            it.iternext()
        out[k] = gk
    return out


def max_rel_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> float:
    worst = 0.0
    for k in analytic:
        a = np.asarray(analytic[k], dtype=np.float64).ravel()
        n = np.asarray(numeric[k], dtype=np.float64).ravel()
        scale = np.maximum(np.abs(a), np.abs(n))
        err = np.abs(a - n) / np.maximum(scale, 1e-6)
        err[scale < 1e-10] = 0.0
        worst = max(worst, float(err.max()))
    return worst


def grad_check(net, x: np.ndarray, eps: float = 1e-5, seed: int = 0) -> float:
    """Finite-difference check of a net's parameter gradients.

    Uses a fixed random projection of the output as the scalar loss; the net
    must be in float64 for the tolerance to be meaningful.
    """
    rng = np.random.default_rng(seed)
    out = net.forward(x)
    proj = rng.standard_normal(out.shape)

    def loss_fn() -> float:
        return float((net.forward(x) * proj).sum())

    net.zero_grads()
    if isinstance(net, GRU):
        _, cache = net.forward(x, want_cache=True)
        net.backward(proj.astype(net.dtype), cache)
    else:
        _, cache = net.forward(x, want_cache=True)
        net.backward(proj.astype(net.dtype), cache)
    numeric = numeric_grads(net.params, loss_fn, eps)
    return max_rel_error(net.grads, numeric)
