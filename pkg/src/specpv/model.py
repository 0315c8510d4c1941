"""Tiny decoder-only transformer used as the target model.

Pre-norm blocks (RMSNorm, rotary self-attention, SiLU-gated FFN). Hidden
states after selected layers are returned as "taps" so the drafter can reuse
them. Forward passes attend to whatever context a cache view supplies plus the
tokens being fed, and hand the new K/V back to that view.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .numerics import (
    F32,
    F64,
    SCALING_MODES,
    RopeConfig,
    attend,
    mask_bias,
    rms_rows,
    rope_phasors,
    rotate_pairs,
    seeded_rng,
    silu,
)

CHECKPOINT_MAGIC = b"SPCV"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 256
    rope: RopeConfig = field(default_factory=lambda: RopeConfig(head_dim=16))
    feature_tap_layers: tuple[int, ...] = (0, 1, 3)
    max_position: int = 16384
    norm_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "feature_tap_layers", tuple(int(t) for t in self.feature_tap_layers))
        for name in ("vocab_size", "dim", "n_layers", "n_heads", "head_dim", "ffn_dim", "max_position"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dim != self.n_heads * self.head_dim:
            raise ValueError(f"dim {self.dim} != n_heads {self.n_heads} x head_dim {self.head_dim}")
        if self.rope.head_dim != self.head_dim:
            raise ValueError("rope.head_dim must equal head_dim")
        taps = self.feature_tap_layers
        if not taps:
            raise ValueError("feature_tap_layers must not be empty")
        if list(taps) != sorted(set(taps)):
            raise ValueError("feature_tap_layers must be sorted and unique")
        if taps[-1] >= self.n_layers or taps[0] < 0:
            raise ValueError("feature_tap_layers out of range")

    @property
    def tap_dim(self) -> int:
        return len(self.feature_tap_layers) * self.dim


@dataclass
class FeatureBundle:
    """Tapped hidden states for a run of tokens, one row per token.

    Row ``i`` of ``taps`` is the concatenation of the hidden states of the
    token at ``positions[i]`` after each tap layer.
    """

    taps: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    def select(self, idx) -> "FeatureBundle":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureBundle(self.taps[idx], self.positions[idx])

    @staticmethod
    def concat(parts: Sequence["FeatureBundle"]) -> "FeatureBundle":
        return FeatureBundle(
            np.concatenate([p.taps for p in parts], axis=0),
            np.concatenate([p.positions for p in parts]),
        )


class KVView(Protocol):
    """What a forward pass needs from a cache."""

    @property
    def context_len(self) -> int: ...

    def context(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """K, V of the attended context, each ``[n_heads, context_len, head_dim]``."""

    def write(self, layer: int, q: np.ndarray, k: np.ndarray, v: np.ndarray, positions: np.ndarray) -> None:
        """Receive the new tokens' post-RoPE q/k and v, each ``[n_heads, n, head_dim]``."""


class LayerWeights:
    """One decoder block. Keeps float64 copies of the matrices for the kernels."""

    NAMES = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = tensors
        self.attn_norm = tensors["attn_norm"][0]
        self.ffn_norm = tensors["ffn_norm"][0]
        self.wqkv = np.concatenate([tensors["wq"], tensors["wk"], tensors["wv"]], axis=1).astype(F64)
        self.wo = tensors["wo"].astype(F64)
        self.w_gate_up = np.concatenate([tensors["w_gate"], tensors["w_up"]], axis=1).astype(F64)
        self.w_down = tensors["w_down"].astype(F64)

    @staticmethod
    def shapes(dim: int, ffn_dim: int) -> dict[str, tuple[int, int]]:
        return {
            "attn_norm": (1, dim),
            "wq": (dim, dim),
            "wk": (dim, dim),
            "wv": (dim, dim),
            "wo": (dim, dim),
            "ffn_norm": (1, dim),
            "w_gate": (dim, ffn_dim),
            "w_up": (dim, ffn_dim),
            "w_down": (ffn_dim, dim),
        }


def causal_mask(context_len: int, n: int) -> np.ndarray:
    mask = np.ones((n, context_len + n), dtype=bool)
    mask[:, context_len:] = np.tril(np.ones((n, n), dtype=bool))
    return mask


def decoder_layer(
    lw: LayerWeights,
    x: np.ndarray,
    rot: np.ndarray,
    n_heads: int,
    head_dim: int,
    eps: float,
    kv_view: KVView,
    layer: int,
    bias: np.ndarray | None,
    positions: np.ndarray,
) -> np.ndarray:
    """One pre-norm block. ``rot`` holds the rotary phasors for ``positions``
    and ``bias`` the additive attention mask (None: attend to everything)."""
    n, dim = x.shape
    h = rms_rows(x, lw.attn_norm, eps)
    qkv = (h @ lw.wqkv).astype(F32).reshape(n, 3, n_heads, head_dim).transpose(1, 2, 0, 3)
    qk = rotate_pairs(qkv[:2], rot)
    q, k = qk[0], qk[1]
    v = np.ascontiguousarray(qkv[2])
    k_ctx, v_ctx = kv_view.context(layer)
    if k_ctx.shape[1]:
        k_all = np.concatenate([k_ctx, k], axis=1)
        v_all = np.concatenate([v_ctx, v], axis=1)
    else:
        k_all, v_all = k, v
    attn = attend(q, k_all, v_all, bias, 1.0 / math.sqrt(head_dim))
    kv_view.write(layer, q, k, v, positions)
    o = attn.transpose(1, 0, 2).reshape(n, dim)
    x = x + (o @ lw.wo).astype(F32)
    h = rms_rows(x, lw.ffn_norm, eps)
    gu = h @ lw.w_gate_up
    f = gu.shape[1] // 2
    act = (silu(gu[:, :f]) * gu[:, f:]).astype(F32)
    return x + (act @ lw.w_down).astype(F32)


class TinyTransformer:
    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        expected = expected_shapes(config)
        missing = set(expected) - set(tensors)
        if missing:
            raise ValueError(f"missing tensors: {sorted(missing)}")
        extra = set(tensors) - set(expected)
        if extra:
            raise ValueError(f"unknown tensor name(s): {sorted(extra)}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
        self.tensors = {k: np.ascontiguousarray(v, dtype=F32) for k, v in tensors.items()}
        for arr in self.tensors.values():
            arr.setflags(write=False)
        self.embed = self.tensors["embed"]
        self.final_norm = self.tensors["final_norm"][0]
        self.lm_head = self.tensors["lm_head"].astype(F64)
        self.layers = [
            LayerWeights({n: self.tensors[f"layers.{i}.{n}"] for n in LayerWeights.NAMES})
            for i in range(config.n_layers)
        ]

    def n_params(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def weight_bytes(self) -> int:
        return 4 * self.n_params()

    def head(self, hidden: np.ndarray) -> np.ndarray:
        """Final norm and output projection."""
        h = rms_rows(np.atleast_2d(hidden), self.final_norm, self.config.norm_eps)
        out = (h @ self.lm_head).astype(F32)
        return out if np.ndim(hidden) == 2 else out[0]


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    shapes = {"embed": (cfg.vocab_size, cfg.dim)}
    for i in range(cfg.n_layers):
        for n, s in LayerWeights.shapes(cfg.dim, cfg.ffn_dim).items():
            shapes[f"layers.{i}.{n}"] = s
    shapes["final_norm"] = (1, cfg.dim)
    shapes["lm_head"] = (cfg.dim, cfg.vocab_size)
    return shapes


def random_tensors(shapes: dict[str, tuple[int, int]], rng) -> dict[str, np.ndarray]:
    """Norm weights are ones; everything else is U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    fan_in is the row count of the matrix, except the embedding which uses its
    width. Tensors are drawn in the order of ``shapes``.
    """
    out = {}
    for name, (rows, cols) in shapes.items():
        if name.endswith("norm"):
            out[name] = np.ones((rows, cols), dtype=F32)
            continue
        fan_in = cols if name == "embed" else rows
        u = rng.uniform_array(rows * cols).reshape(rows, cols)
        out[name] = ((2.0 * u - 1.0) / math.sqrt(fan_in)).astype(F32)
    return out


def init_random(cfg: ModelConfig, seed: int) -> TinyTransformer:
    return TinyTransformer(cfg, random_tensors(expected_shapes(cfg), seeded_rng(seed)))


def forward_step(
    model: TinyTransformer,
    tokens: Sequence[int],
    positions: Sequence[int],
    kv_view: KVView,
    tree_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, FeatureBundle]:
    """Run ``tokens`` through the model against ``kv_view``'s context.

    Without ``tree_mask`` the new tokens are causal among themselves and see
    the whole context. Returns logits ``[n, vocab]`` for every input token and
    the tapped hidden states.
    """
    cfg = model.config
    tok = np.asarray(tokens, dtype=np.int64)
    pos = np.asarray(positions, dtype=np.int64)
    n = len(tok)
    if n == 0:
        raise ValueError("no tokens to forward")
    if len(pos) != n:
        raise ValueError("tokens and positions differ in length")
    if pos.min() < 0 or pos.max() >= cfg.max_position:
        raise ValueError(f"position overflow: max_position is {cfg.max_position}")
    if tok.min() < 0 or tok.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary")
    ctx = kv_view.context_len
    if tree_mask is None:
        bias = mask_bias(causal_mask(ctx, n)) if n > 1 else None
    else:
        mask = np.asarray(tree_mask, dtype=bool)
        if mask.shape != (n, ctx + n):
            raise ValueError(f"mask shape {mask.shape} does not match ({n}, {ctx + n})")
        if not mask.any(axis=1).all():
            raise ValueError("isolated query")
        bias = mask_bias(mask)
    rot = rope_phasors(pos, cfg.rope)
    x = model.embed[tok]
    taps = []
    tap_set = cfg.feature_tap_layers
    for i, lw in enumerate(model.layers):
        x = decoder_layer(lw, x, rot, cfg.n_heads, cfg.head_dim, cfg.norm_eps, kv_view, i, bias, pos)
        if i in tap_set:
            taps.append(x)
    return model.head(x), FeatureBundle(np.concatenate(taps, axis=1), pos.copy())


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

_CFG_HEAD = struct.Struct("<8I")
_ROPE = struct.Struct("<I4dI")


class CheckpointError(ValueError):
    pass


def _pack_config(cfg: ModelConfig) -> bytes:
    taps = cfg.feature_tap_layers
    r = cfg.rope
    return (
        _CFG_HEAD.pack(
            cfg.vocab_size, cfg.dim, cfg.n_layers, cfg.n_heads, cfg.head_dim, cfg.ffn_dim, cfg.max_position, len(taps)
        )
        + struct.pack(f"<{len(taps)}I", *taps)
        + _ROPE.pack(
            SCALING_MODES.index(r.scaling_mode),
            r.theta_base,
            r.scaling_factor,
            r.low_freq_cutoff,
            r.high_freq_cutoff,
            r.original_max_position,
        )
        + struct.pack("<d", cfg.norm_eps)
    )


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, st: struct.Struct | str, what: str):
        st = struct.Struct(st) if isinstance(st, str) else st
        return st.unpack(self.take(st.size, what))


def save_checkpoint(model: TinyTransformer, path) -> None:
    cfg = model.config
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_config(cfg)]
    names = list(expected_shapes(cfg))
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        t = model.tensors[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *t.shape))
        parts.append(t.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> TinyTransformer:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    vocab, dim, n_layers, n_heads, head_dim, ffn_dim, max_pos, n_taps = r.unpack(_CFG_HEAD, "config")
    taps = r.unpack(f"<{n_taps}I", "config")
    mode, theta, factor, low, high, orig = r.unpack(_ROPE, "config")
    (eps,) = r.unpack("<d", "config")
    try:
        rope = RopeConfig(head_dim, theta, SCALING_MODES[mode], factor, low, high, orig)
        cfg = ModelConfig(vocab, dim, n_layers, n_heads, head_dim, ffn_dim, rope, tuple(taps), max_pos, eps)
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc
    expected = expected_shapes(cfg)
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name")
        name = r.take(nlen, "tensor name").decode("utf-8")
        if name not in expected:
            raise CheckpointError(f"unknown tensor name {name!r}")
        rows, cols = r.unpack("<II", f"tensor {name}")
        payload = r.take(4 * rows * cols, f"tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(F32)
    if r.off != len(r.data):
        raise CheckpointError("trailing bytes after last tensor")
    try:
        return TinyTransformer(cfg, tensors)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
