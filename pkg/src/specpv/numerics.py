"""Dense numeric kernels shared by the model, drafter and cache code.

Everything here works on numpy arrays. Storage is float32; reductions and
matrix products are carried out in float64 and rounded back to float32 so the
same inputs give the same bits regardless of how rows are batched.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

F32 = np.float32
F64 = np.float64

_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# elementwise / row kernels
# ---------------------------------------------------------------------------


def softmax(v, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``, computed in float64."""
    x = np.asarray(v, dtype=F64)
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("empty logits")
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def rmsnorm(x, weight, eps: float = 1e-6) -> np.ndarray:
    """RMS-normalise the last axis of ``x`` and scale by ``weight``."""
    x = np.asarray(x, dtype=F32)
    w = np.asarray(weight)
    if x.shape[-1] != w.shape[-1]:
        raise ValueError(f"rmsnorm length mismatch: {x.shape[-1]} vs {w.shape[-1]}")
    if x.ndim == 1:
        return rms_rows(x[None], w, eps)[0]
    return rms_rows(x, w, eps)


def rms_rows(x: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    """Unchecked row-wise RMSNorm of a 2-D float32 array."""
    x64 = x.astype(F64)
    ms = np.einsum("ij,ij->i", x64, x64) / x.shape[1]
    return (x64 * (1.0 / np.sqrt(ms + eps))[:, None] * w).astype(F32)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------

SCALING_MODES = ("none", "linear", "yarn-like")


@dataclass(frozen=True)
class RopeConfig:
    """Rotary embedding settings.

    ``yarn-like`` is NTK-by-parts interpolation: frequencies whose wavelength
    fits fewer than ``low_freq_cutoff`` times into ``original_max_position``
    are divided by ``scaling_factor``; those fitting more than
    ``high_freq_cutoff`` times are left alone; the band in between is blended
    linearly.
    """

    head_dim: int
    theta_base: float = 10000.0
    scaling_mode: str = "none"
    scaling_factor: float = 1.0
    low_freq_cutoff: float = 1.0
    high_freq_cutoff: float = 32.0
    original_max_position: int = 2048

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even number, got {self.head_dim}")
        if self.theta_base <= 0:
            raise ValueError("theta_base must be positive")
        if self.scaling_mode not in SCALING_MODES:
            raise ValueError(f"unknown scaling_mode {self.scaling_mode!r}")
        if self.scaling_factor < 1.0:
            raise ValueError("scaling_factor must be >= 1.0")
        if self.scaling_mode == "none" and self.scaling_factor != 1.0:
            raise ValueError("scaling_factor must be 1.0 when scaling_mode is 'none'")
        if self.high_freq_cutoff <= self.low_freq_cutoff:
            raise ValueError("high_freq_cutoff must exceed low_freq_cutoff")


@functools.lru_cache(maxsize=64)
def rope_frequencies(cfg: RopeConfig) -> np.ndarray:
    """Per-pair angular frequencies (float64, length head_dim/2)."""
    d = np.arange(cfg.head_dim // 2, dtype=F64)
    inv_freq = cfg.theta_base ** (-2.0 * d / cfg.head_dim)
    if cfg.scaling_mode == "yarn-like":
        wavelength = 2.0 * math.pi / inv_freq
        ratio = cfg.original_max_position / wavelength
        ramp = np.clip(
            (ratio - cfg.low_freq_cutoff) / (cfg.high_freq_cutoff - cfg.low_freq_cutoff), 0.0, 1.0
        )
        inv_freq = (1.0 - ramp) * inv_freq / cfg.scaling_factor + ramp * inv_freq
    inv_freq.setflags(write=False)
    return inv_freq


def rope_phasors(positions, cfg: RopeConfig) -> np.ndarray:
    """``exp(i * angle)`` per (position, pair), complex128 ``[n, head_dim/2]``."""
    pos = np.asarray(positions, dtype=F64)
    if cfg.scaling_mode == "linear":
        pos = pos / cfg.scaling_factor
    return np.exp(1j * (pos[:, None] * rope_frequencies(cfg)[None, :]))


def rotate_pairs(x: np.ndarray, phasors: np.ndarray) -> np.ndarray:
    """Unchecked rotation of ``x[..., n, hd]``; pair ``(2j, 2j+1)`` is treated
    as the complex number ``x[2j] + i x[2j+1]``. float32 out."""
    z = np.ascontiguousarray(x, dtype=F64).view(np.complex128)
    return (z * phasors).view(F64).astype(F32)


def rope_rotate(x: np.ndarray, positions, cfg: RopeConfig) -> np.ndarray:
    """Rotate ``x[..., n, head_dim]`` with one position per row ``n``.

    Dimension pairs are interleaved: (0, 1), (2, 3), ...
    """
    if x.shape[-1] != cfg.head_dim:
        raise ValueError(f"expected last dim {cfg.head_dim}, got {x.shape[-1]}")
    return rotate_pairs(np.asarray(x, dtype=F32), rope_phasors(positions, cfg))


def rope_apply(vec, position: float, cfg: RopeConfig) -> np.ndarray:
    """Rotate a single head vector to ``position``."""
    v = np.asarray(vec, dtype=F32)
    if v.shape != (cfg.head_dim,):
        raise ValueError(f"expected a vector of length {cfg.head_dim}, got shape {v.shape}")
    return rope_rotate(v[None, :], [position], cfg)[0]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def masked_attention(Q, K, V, mask=None, scale: float | None = None) -> np.ndarray:
    """``softmax(Q K^T * scale, masked to -inf) V`` over the last two axes.

    Leading axes (e.g. heads) broadcast. ``mask`` is boolean ``[n_q, n_k]``
    with True meaning "may attend".
    """
    q = np.asarray(Q, dtype=F32)
    k = np.asarray(K, dtype=F32)
    v = np.asarray(V, dtype=F32)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("Q and K must share the feature dimension")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("K and V must have the same number of rows")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    bias = None
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != (q.shape[-2], k.shape[-2]):
            raise ValueError(f"mask shape {m.shape} does not match ({q.shape[-2]}, {k.shape[-2]})")
        if not m.any(axis=-1).all():
            raise ValueError("isolated query")
        bias = mask_bias(m)
    lead = np.broadcast_shapes(q.shape[:-2], k.shape[:-2], v.shape[:-2])
    q3 = np.broadcast_to(q, lead + q.shape[-2:]).reshape((-1,) + q.shape[-2:])
    k3 = np.broadcast_to(k, lead + k.shape[-2:]).reshape((-1,) + k.shape[-2:])
    v3 = np.broadcast_to(v, lead + v.shape[-2:]).reshape((-1,) + v.shape[-2:])
    return attend(q3, k3, v3, bias, scale).reshape(lead + (q.shape[-2], v.shape[-1]))


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias: np.ndarray | None, scale: float) -> np.ndarray:
    """Unchecked attention. ``bias`` is 0 where attending is allowed and -inf
    elsewhere (see :func:`mask_bias`)."""
    s = np.matmul(q.astype(F64), k.transpose(0, 2, 1))
    s *= scale
    if bias is not None:
        s += bias
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return np.matmul(s, v).astype(F32)


def mask_bias(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, -np.inf)


# ---------------------------------------------------------------------------
# deterministic RNG
# ---------------------------------------------------------------------------

SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_M1 = 0xBF58476D1CE4E5B9
SPLITMIX_M2 = 0x94D049BB133111EB


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (new_state, output)."""
    state = (state + SPLITMIX_GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * SPLITMIX_M1) & _MASK64
    z = ((z ^ (z >> 27)) * SPLITMIX_M2) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class SeededRNG:
    """xoshiro256** seeded through splitmix64.

    Bulk draws (``uniform_array``) take one word from the main stream as a key
    and expand it with vectorised counter-mode splitmix64. See
    ``docs/determinism.md``.
    """

    def __init__(self, seed: int):
        sm = int(seed) & _MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return min(int(self.uniform() * n), n - 1)

    def categorical(self, probs: Sequence[float]) -> int:
        p = np.asarray(probs, dtype=F64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("categorical needs a nonempty 1-D weight vector")
        if (p < 0).any() or not np.isfinite(p).all():
            raise ValueError("categorical weights must be finite and nonnegative")
        cum = np.cumsum(p)
        total = cum[-1]
        if total <= 0:
            raise ValueError("categorical weights sum to zero")
        u = self.uniform() * total
        idx = int(np.searchsorted(cum, u, side="right"))
        if idx >= p.size:
            idx = int(np.flatnonzero(p > 0)[-1])
        return idx

    def uniform_array(self, n: int) -> np.ndarray:
        key = np.uint64(self.next_u64())
        with np.errstate(over="ignore"):
            z = key + (np.arange(1, n + 1, dtype=np.uint64) * np.uint64(SPLITMIX_GAMMA))
            z = (z ^ (z >> np.uint64(30))) * np.uint64(SPLITMIX_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(SPLITMIX_M2)
            z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(F64) * (1.0 / (1 << 53))


def seeded_rng(seed: int) -> SeededRNG:
    return SeededRNG(seed)
