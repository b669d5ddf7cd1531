"""Dense linear-algebra helpers, Adam, and a platform-stable seeded RNG.

Everything here is double precision and pure: the only mutable objects are
AdamState and Rng, each owned by a single run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """SplitMix64 output mixing function (scalar)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _mix64_np(z: np.ndarray) -> np.ndarray:
    """SplitMix64 output mixing function, vectorized over uint64 arrays."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def stream_key(*parts) -> int:
    """Fold ints/strings into a 64-bit stream id, order-sensitive."""
    acc = 0x243F6A8885A308D3
    for p in parts:
        if isinstance(p, str):
            for b in p.encode("utf-8"):
                acc = _mix64(acc + _GAMMA * (b + 1))
        else:
            acc = _mix64(acc + _GAMMA * ((int(p) & _MASK64) + 1))
    return acc


class Rng:
    """Deterministic generator: xoshiro256** scalar stream, seeded by SplitMix64.

    Bulk draws expand a single xoshiro output through a counter-mode
    SplitMix64 stream so they vectorize; both paths are exact integer
    arithmetic and therefore identical on every platform.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        sm = _mix64(self.seed + _GAMMA * (self.stream_id + 1))
        s = []
        for _ in range(4):
            sm = (sm + _GAMMA) & _MASK64
            s.append(_mix64(sm))
        if not any(s):
            s[0] = _GAMMA
        self._s = s

    @staticmethod
    def _rotl(x: int, k: int) -> int:
        return ((x << k) | (x >> (64 - k))) & _MASK64

    def next_u64(self) -> int:
        s = self._s
        result = (self._rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = self._rotl(s[3], 45)
        return result

    def split(self, *parts) -> "Rng":
        """Derived generator keyed by (seed, this stream, parts); call-order free."""
        return Rng(self.seed, stream_key(self.stream_id, *parts))

    def u64(self, n: int) -> np.ndarray:
        base = np.uint64(self.next_u64())
        ctr = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        return _mix64_np(base + ctr)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)) * (2.0**-53)

    def normal(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller."""
        n = int(np.prod(shape)) if not isinstance(shape, int) else shape
        m = (n + 1) // 2
        u1 = ((self.u64(m) >> np.uint64(11)) + np.uint64(1)) * (2.0**-53)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return out.reshape(shape) if not isinstance(shape, int) else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.u64(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices out of range(n)."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct indices from {n}")
        return self.permutation(n)[:k]


class ShapeError(ValueError):
    pass


class NumericError(ValueError):
    pass


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NumericError("softmax_rows: non-finite input")
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt((m * m).sum(axis=1, keepdims=True))
    if np.any(norms <= 1e-12):
        raise NumericError("l2_normalize_rows: zero-norm row")
    return m / norms


@dataclass
class AdamState:
    """Adam moments for a named parameter set."""

    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init_like(cls, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
            step_count=0,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns fresh params and state."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if set(params) != set(grads):
        raise ShapeError(f"param/grad key mismatch: {set(params) ^ set(grads)}")
    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {k}")
        m = b1 * state.first_moment[k] + (1 - b1) * g
        v = b2 * state.second_moment[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k] = m
        new_v[k] = v
    new_state = AdamState(new_m, new_v, t, b1, b2, eps)
    return new_p, new_state


def finite_diff_grad(loss_fn, params: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, coordinate by coordinate."""
    if h <= 0:
        raise ValueError("h must be > 0")
    grads = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            f_plus = loss_fn(params)
            flat_p[i] = orig - h
            f_minus = loss_fn(params)
            flat_p[i] = orig
            flat_g[i] = (f_plus - f_minus) / (2 * h)
        grads[k] = g
    return grads
