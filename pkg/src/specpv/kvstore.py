"""KV storage: block-paged full cache, the four-segment partial cache, and an
offload cost model.

Layouts are ``[n_heads, tokens, head_dim]`` per layer throughout. The partial
view holds its own copies of the selected K/V (it stands in for the on-device
cache while the full cache is considered offloaded).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import F32, F64

# K/V rows are float32-rounded values held in float64 arrays, so the attention
# products never mix precisions (mixed batched matmuls fall off the BLAS path).
KV_DTYPE = F64

SCORE_VARIANTS = ("as-written", "elementwise")
REDUCTIONS = ("max", "mean", "last")


def _grow(arr: np.ndarray, needed: int) -> np.ndarray:
    cap = arr.shape[1]
    if needed <= cap:
        return arr
    new_cap = max(needed, 2 * cap, 64)
    out = np.zeros((arr.shape[0], new_cap, arr.shape[2]), dtype=arr.dtype)
    out[:, :cap] = arr
    return out


class SequenceKV:
    """Append-only per-layer K/V rows with free-form positions.

    Used for the draft cache, where candidate rows of a tree share positions.
    Acts as a ``KVView``: the context is every stored row.
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int):
        self.n_layers, self.n_heads, self.head_dim = n_layers, n_heads, head_dim
        self.k = [np.zeros((n_heads, 0, head_dim), KV_DTYPE) for _ in range(n_layers)]
        self.v = [np.zeros((n_heads, 0, head_dim), KV_DTYPE) for _ in range(n_layers)]
        self.pos = [np.zeros(0, np.int64) for _ in range(n_layers)]
        self.lengths = [0] * n_layers

    def __len__(self) -> int:
        return self.lengths[0]

    @property
    def context_len(self) -> int:
        return self.lengths[0]

    def positions(self, layer: int = 0) -> np.ndarray:
        return self.pos[layer][: self.lengths[layer]]

    def context(self, layer: int):
        n = self.lengths[layer]
        return self.k[layer][:, :n], self.v[layer][:, :n]

    def write(self, layer, q, k, v, positions):
        n0 = self.lengths[layer]
        n1 = n0 + k.shape[1]
        self.k[layer] = _grow(self.k[layer], n1)
        self.v[layer] = _grow(self.v[layer], n1)
        if len(self.pos[layer]) < self.k[layer].shape[1]:
            p = np.zeros(self.k[layer].shape[1], np.int64)
            p[:n0] = self.pos[layer][:n0]
            self.pos[layer] = p
        self.k[layer][:, n0:n1] = k
        self.v[layer][:, n0:n1] = v
        self.pos[layer][n0:n1] = positions
        self.lengths[layer] = n1

    def truncate_rows(self, n: int) -> None:
        self.lengths = [min(x, n) for x in self.lengths]

    def truncate_from_position(self, position: int) -> None:
        """Drop the first row at ``position`` or later and everything after it."""
        for layer in range(self.n_layers):
            p = self.positions(layer)
            hit = np.flatnonzero(p >= position)
            if len(hit):
                self.lengths[layer] = int(hit[0])


# ---------------------------------------------------------------------------
# full cache
# ---------------------------------------------------------------------------


@dataclass
class BlockSummary:
    k_max: np.ndarray
    k_min: np.ndarray


@dataclass
class KVBlock:
    block_id: int
    layer: int
    capacity: int
    filled: int
    k: np.ndarray
    v: np.ndarray

    @property
    def positions(self) -> np.ndarray:
        start = self.block_id * self.capacity
        return np.arange(start, start + self.filled)


def append_kv(cache: "PagedKVCache", layer: int, k_rows, v_rows, positions) -> "PagedKVCache":
    """Append rows ``[n_heads, n, head_dim]`` at the next positions of ``layer``."""
    cache.append(layer, np.asarray(k_rows), np.asarray(v_rows), positions)
    return cache


def summarize_block(k_rows) -> BlockSummary:
    """Element-wise max/min over the token axis (second to last)."""
    k = np.asarray(k_rows)
    if k.ndim < 2 or k.shape[-2] == 0:
        raise ValueError("cannot summarise an empty block")
    return BlockSummary(k.max(axis=-2), k.min(axis=-2))


class PagedKVCache:
    """Full KV cache organised in fixed-size blocks of ``block_size`` tokens.

    Tokens live contiguously per layer; block ``i`` covers positions
    ``[i*B, (i+1)*B)``. Per-block key summaries are kept current on append and
    truncate.
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int, block_size: int = 16):
        if block_size <= 0:
            raise ValueError("block_size must be positive")
        self.n_layers, self.n_heads, self.head_dim = n_layers, n_heads, head_dim
        self.block_size = block_size
        self.k = [np.zeros((n_heads, 0, head_dim), KV_DTYPE) for _ in range(n_layers)]
        self.v = [np.zeros((n_heads, 0, head_dim), KV_DTYPE) for _ in range(n_layers)]
        self.k_max = [np.zeros((0, n_heads, head_dim), KV_DTYPE) for _ in range(n_layers)]
        self.k_min = [np.zeros((0, n_heads, head_dim), KV_DTYPE) for _ in range(n_layers)]
        self.lengths = [0] * n_layers

    @property
    def length(self) -> int:
        return self.lengths[0]

    def __len__(self) -> int:
        return self.lengths[0]

    def n_blocks(self, layer: int = 0) -> int:
        return -(-self.lengths[layer] // self.block_size)

    def bytes_per_token(self) -> int:
        return self.n_layers * 2 * self.n_heads * self.head_dim * 4

    def nbytes(self) -> int:
        return self.length * self.bytes_per_token()

    # KVView protocol
    @property
    def context_len(self) -> int:
        return self.lengths[0]

    def context(self, layer: int):
        n = self.lengths[layer]
        return self.k[layer][:, :n], self.v[layer][:, :n]

    def write(self, layer, q, k, v, positions):
        self.append(layer, k, v, positions)

    def append(self, layer: int, k, v, positions) -> None:
        pos = np.asarray(positions, dtype=np.int64)
        n0 = self.lengths[layer]
        n = len(pos)
        if k.shape != (self.n_heads, n, self.head_dim) or v.shape != k.shape:
            raise ValueError(f"expected K/V of shape {(self.n_heads, n, self.head_dim)}, got {k.shape}, {v.shape}")
        if n == 0:
            return
        if not np.array_equal(pos, np.arange(n0, n0 + n)):
            raise ValueError(f"non-contiguous positions: cache holds {n0} tokens, got {pos[:4].tolist()}...")
        n1 = n0 + n
        self.k[layer] = _grow(self.k[layer], n1)
        self.v[layer] = _grow(self.v[layer], n1)
        self.k[layer][:, n0:n1] = k
        self.v[layer][:, n0:n1] = v
        self.lengths[layer] = n1
        self._resummarize(layer, n0 // self.block_size)

    def _resummarize(self, layer: int, first_block: int) -> None:
        """Recompute summaries from ``first_block`` on; earlier ones are untouched."""
        B = self.block_size
        nb = self.n_blocks(layer)
        keep = min(first_block, nb)
        kmax, kmin = self.k_max[layer][:keep], self.k_min[layer][:keep]
        if nb > keep:
            rows = self.k[layer][:, keep * B : self.lengths[layer]]
            starts = np.arange(0, rows.shape[1], B)
            new_max = np.maximum.reduceat(rows, starts, axis=1).transpose(1, 0, 2)
            new_min = np.minimum.reduceat(rows, starts, axis=1).transpose(1, 0, 2)
            kmax = np.concatenate([kmax, new_max])
            kmin = np.concatenate([kmin, new_min])
        self.k_max[layer], self.k_min[layer] = kmax, kmin

    def truncate(self, length: int) -> None:
        """Keep only positions ``< length`` and fix up the trailing summary."""
        B = self.block_size
        for layer in range(self.n_layers):
            if length >= self.lengths[layer]:
                continue
            self.lengths[layer] = max(0, length)
            self._resummarize(layer, self.lengths[layer] // B)

    def block(self, layer: int, block_id: int) -> KVBlock:
        B = self.block_size
        n = self.lengths[layer]
        if not 0 <= block_id < self.n_blocks(layer):
            raise IndexError(f"block {block_id} out of range")
        lo, hi = block_id * B, min((block_id + 1) * B, n)
        return KVBlock(block_id, layer, B, hi - lo, self.k[layer][:, lo:hi], self.v[layer][:, lo:hi])

    def summary(self, layer: int, block_id: int) -> BlockSummary:
        return BlockSummary(self.k_max[layer][block_id], self.k_min[layer][block_id])

    def gather(self, layer: int, positions: np.ndarray):
        return (
            np.ascontiguousarray(self.k[layer][:, positions]),
            np.ascontiguousarray(self.v[layer][:, positions]),
        )


# ---------------------------------------------------------------------------
# block scoring and selection
# ---------------------------------------------------------------------------


def _check_choice(value, choices, what):
    if value not in choices:
        raise ValueError(f"unknown {what} {value!r}; expected one of {choices}")


def per_query_scores(queries, k_max, k_min, variant: str = "as-written") -> np.ndarray:
    """Block-by-query relevance, summed over heads.

    ``queries``: ``[H, M, hd]``; ``k_max``/``k_min``: ``[nb, H, hd]``.
    Returns ``[nb, M]`` float64.
    """
    _check_choice(variant, SCORE_VARIANTS, "score variant")
    q = np.asarray(queries, dtype=F64)
    kmax = np.asarray(k_max, dtype=F64)
    kmin = np.asarray(k_min, dtype=F64)
    if q.shape[-1] != kmax.shape[-1] or q.shape[0] != kmax.shape[1]:
        raise ValueError(f"query shape {q.shape} does not match summary shape {kmax.shape}")
    if variant == "as-written":
        a = np.einsum("hmd,bhd->bhm", q, kmax)
        b = np.einsum("hmd,bhd->bhm", q, kmin)
        s = np.maximum(a, b)
    else:
        s = np.einsum("hmd,bhd->bhm", np.maximum(q, 0.0), kmax) + np.einsum(
            "hmd,bhd->bhm", np.minimum(q, 0.0), kmin
        )
    return s.sum(axis=1)


def reduce_scores(per_query: np.ndarray, reduction: str = "mean") -> np.ndarray:
    """Collapse the last (query) axis. ``last`` is the most recently verified query."""
    _check_choice(reduction, REDUCTIONS, "reduction")
    if per_query.shape[-1] == 0:
        raise ValueError("need at least one query")
    if reduction == "max":
        return per_query.max(axis=-1)
    if reduction == "mean":
        return per_query.mean(axis=-1)
    return per_query[..., -1]


def _as_heads(x) -> np.ndarray:
    a = np.asarray(x, dtype=F64)
    return a[None] if a.ndim < 3 else a


def score_block(queries, summary: BlockSummary, score_variant="as-written", reduction="mean") -> float:
    """Score one block against queries ``[M, d]`` or ``[H, M, hd]``."""
    q = np.asarray(queries, dtype=F64)
    if q.ndim == 1:
        q = q[None]
    q = _as_heads(q)
    kmax = np.asarray(summary.k_max, dtype=F64)
    kmin = np.asarray(summary.k_min, dtype=F64)
    if kmax.ndim == 1:
        kmax, kmin = kmax[None], kmin[None]
    s = per_query_scores(q, kmax[None], kmin[None], score_variant)
    return float(reduce_scores(s, reduction)[0])


def select_blocks(
    k_max,
    k_min,
    n_blocks: int,
    queries,
    budget: int,
    block_size: int,
    n_sink: int,
    n_local: int,
    variant: str = "as-written",
    reduction: str = "mean",
) -> tuple[list[int], list[int], list[int]]:
    """Pick (sink, retrieval, local) block ids for one layer."""
    if budget < (n_sink + n_local) * block_size:
        raise ValueError(
            f"budget {budget} is smaller than sink+local ({(n_sink + n_local) * block_size} tokens)"
        )
    sink = list(range(min(n_sink, n_blocks)))
    local_start = max(len(sink), n_blocks - n_local)
    local = list(range(local_start, n_blocks))
    middle = np.arange(len(sink), local_start)
    slots = (budget - (n_sink + n_local) * block_size) // block_size
    if len(middle) <= slots:
        return sink, middle.tolist(), local
    if slots == 0:
        return sink, [], local
    s = reduce_scores(per_query_scores(queries, k_max[middle], k_min[middle], variant), reduction)
    order = np.lexsort((middle, -s))
    return sink, sorted(middle[order[:slots]].tolist()), local


@dataclass
class PartialCacheView:
    """Sink | retrieval | local segments copied from the full cache, plus a buffer.

    The buffer holds K/V for tokens verified against this view only; they are
    recomputed against the full cache on the next refresh.
    """

    budget: int
    n_sink: int
    n_local: int
    block_size: int
    buffer_cap: int
    score_variant: str
    reduction: str
    sink_blocks: list[int]
    retrieval_blocks: list[list[int]]
    local_blocks: list[int]
    seg_k: list[np.ndarray]
    seg_v: list[np.ndarray]
    seg_pos: list[np.ndarray]
    buf_k: list[np.ndarray] = field(default_factory=list)
    buf_v: list[np.ndarray] = field(default_factory=list)
    buf_pos: list[np.ndarray] = field(default_factory=list)
    buf_len: list[int] = field(default_factory=list)
    source_len: int = 0

    def __post_init__(self):
        n_layers = len(self.seg_k)
        if not self.buf_k:
            H, _, hd = self.seg_k[0].shape
            self.buf_k = [np.zeros((H, self.buffer_cap, hd), KV_DTYPE) for _ in range(n_layers)]
            self.buf_v = [np.zeros((H, self.buffer_cap, hd), KV_DTYPE) for _ in range(n_layers)]
            self.buf_pos = [np.zeros(self.buffer_cap, np.int64) for _ in range(n_layers)]
            self.buf_len = [0] * n_layers

    @property
    def n_layers(self) -> int:
        return len(self.seg_k)

    @property
    def buffer_occupancy(self) -> int:
        return self.buf_len[0]

    def buffer_positions(self, layer: int = 0) -> np.ndarray:
        return self.buf_pos[layer][: self.buf_len[layer]]

    def segment_tokens(self, layer: int = 0) -> int:
        return len(self.seg_pos[layer])

    def retrieval_tokens(self, layer: int = 0) -> int:
        sel = set(self.retrieval_blocks[layer])
        B = self.block_size
        return int(sum(1 for p in self.seg_pos[layer] if p // B in sel))

    def positions(self, layer: int = 0) -> np.ndarray:
        return np.concatenate([self.seg_pos[layer], self.buffer_positions(layer)])

    def end_position(self) -> int:
        """One past the last position this view covers."""
        p = self.positions(0)
        return int(p[-1]) + 1 if len(p) else 0

    def check_contiguity(self) -> None:
        for layer in range(self.n_layers):
            p = self.positions(layer)
            if len(p) > 1 and not (np.diff(p) > 0).all():
                raise ValueError(f"partial view positions not strictly increasing in layer {layer}")

    def nbytes(self) -> int:
        H, _, hd = self.seg_k[0].shape
        toks = sum(self.segment_tokens(l) + self.buf_len[l] for l in range(self.n_layers))
        return toks * 2 * H * hd * 4

    # KVView protocol
    @property
    def context_len(self) -> int:
        return len(self.seg_pos[0]) + self.buf_len[0]

    def context(self, layer: int):
        n = self.buf_len[layer]
        if n == 0:
            return self.seg_k[layer], self.seg_v[layer]
        return (
            np.concatenate([self.seg_k[layer], self.buf_k[layer][:, :n]], axis=1),
            np.concatenate([self.seg_v[layer], self.buf_v[layer][:, :n]], axis=1),
        )

    def write(self, layer, q, k, v, positions):
        n0 = self.buf_len[layer]
        n1 = n0 + k.shape[1]
        if n1 > self.buffer_cap:
            raise OverflowError(f"partial buffer overflow: {n1} > {self.buffer_cap}")
        self.buf_k[layer][:, n0:n1] = k
        self.buf_v[layer][:, n0:n1] = v
        self.buf_pos[layer][n0:n1] = positions
        self.buf_len[layer] = n1

    def truncate_from_position(self, position: int) -> None:
        for layer in range(self.n_layers):
            p = self.buffer_positions(layer)
            hit = np.flatnonzero(p >= position)
            if len(hit):
                self.buf_len[layer] = int(hit[0])


def select_partial(
    cache: PagedKVCache,
    queries: Sequence[np.ndarray],
    budget_tokens: int,
    n_sink: int = 2,
    n_local: int = 4,
    variant: str = "as-written",
    reduction: str = "mean",
    buffer_cap: int = 0,
) -> PartialCacheView:
    """Build a partial view with an empty buffer.

    ``queries[layer]`` is ``[H, M, hd]`` (post-RoPE, verification order).
    """
    _check_choice(variant, SCORE_VARIANTS, "score variant")
    _check_choice(reduction, REDUCTIONS, "reduction")
    if len(queries) != cache.n_layers:
        raise ValueError("need one query set per layer")
    B = cache.block_size
    sink = local = None
    retrieval, seg_k, seg_v, seg_pos = [], [], [], []
    for layer in range(cache.n_layers):
        s, r, l = select_blocks(
            cache.k_max[layer],
            cache.k_min[layer],
            cache.n_blocks(layer),
            queries[layer],
            budget_tokens,
            B,
            n_sink,
            n_local,
            variant,
            reduction,
        )
        sink, local = s, l
        retrieval.append(r)
        n = cache.lengths[layer]
        blocks = s + r + l
        pos = (
            np.concatenate([np.arange(b * B, min((b + 1) * B, n)) for b in blocks])
            if blocks
            else np.zeros(0, np.int64)
        )
        k, v = cache.gather(layer, pos)
        seg_k.append(k)
        seg_v.append(v)
        seg_pos.append(pos)
    return PartialCacheView(
        budget=budget_tokens,
        n_sink=n_sink,
        n_local=n_local,
        block_size=B,
        buffer_cap=buffer_cap,
        score_variant=variant,
        reduction=reduction,
        sink_blocks=sink,
        retrieval_blocks=retrieval,
        local_blocks=local,
        seg_k=seg_k,
        seg_v=seg_v,
        seg_pos=seg_pos,
        source_len=cache.length,
    )


def refresh_partial(cache: PagedKVCache, view: PartialCacheView, queries) -> PartialCacheView:
    """Reselect every segment from an up-to-date full cache; the buffer is emptied."""
    if view.end_position() > cache.length:
        raise ValueError(
            f"full cache lags the partial view ({cache.length} < {view.end_position()}); "
            "commit buffered tokens before refreshing"
        )
    return select_partial(
        cache,
        queries,
        view.budget,
        view.n_sink,
        view.n_local,
        view.score_variant,
        view.reduction,
        view.buffer_cap,
    )


def evict_rejected(cache, view, draft_cache, first_invalid_position: int, commit_point: int = 0) -> None:
    """Remove every entry at ``first_invalid_position`` or later from each store.

    Any of the stores may be None. ``commit_point`` is the first position that
    is allowed to be removed.
    """
    if first_invalid_position < commit_point:
        raise ValueError(
            f"refusing to evict committed tokens: {first_invalid_position} < commit point {commit_point}"
        )
    if cache is not None:
        cache.truncate(first_invalid_position)
    if view is not None:
        view.truncate_from_position(first_invalid_position)
    if draft_cache is not None:
        draft_cache.truncate_from_position(first_invalid_position)


# ---------------------------------------------------------------------------
# offload cost model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OffloadCostModel:
    """Host<->device transfer costs plus a memory-bound compute estimate.

    ``device_bytes_per_s`` converts on-device bytes read (weights and
    resident caches) into compute time.
    """

    bandwidth_bytes_per_s: float = 16e9
    per_transfer_latency_s: float = 10e-6
    device_bytes_per_s: float = 1e12
    full_on_device: bool = False
    partial_on_device: bool = True
    draft_on_device: bool = True

    def __post_init__(self):
        if self.bandwidth_bytes_per_s <= 0 or self.per_transfer_latency_s < 0 or self.device_bytes_per_s <= 0:
            raise ValueError("cost model parameters must be positive")

    def on_device(self, cache_name: str) -> bool:
        return {"full": self.full_on_device, "partial": self.partial_on_device, "draft": self.draft_on_device}[
            cache_name
        ]


@dataclass
class StepCost:
    mode: str
    tokens_in_step: int
    cache_bytes_touched: dict[str, int]
    n_layers: int


def modeled_compute_time(cost: OffloadCostModel, weight_bytes: int, cache_bytes_touched: dict[str, int]) -> float:
    return (weight_bytes + sum(cache_bytes_touched.values())) / cost.device_bytes_per_s


def modeled_step_time(step: StepCost, cost: OffloadCostModel, compute_time_s: float) -> float:
    t = compute_time_s
    for name, nbytes in step.cache_bytes_touched.items():
        if nbytes > 0 and not cost.on_device(name):
            t += nbytes / cost.bandwidth_bytes_per_s + cost.per_transfer_latency_s * step.n_layers
    return t


# ---------------------------------------------------------------------------
# debug dump
# ---------------------------------------------------------------------------

DUMP_MAGIC = b"SPKV"
DUMP_VERSION = 1


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    rows, cols = arr.shape
    return struct.pack("<H", len(raw)) + raw + struct.pack("<II", rows, cols) + arr.astype("<f4").tobytes()


def dump_cache(cache: PagedKVCache, path) -> None:
    """Write every block of every layer; see docs/cache-dump.md."""
    H, hd = cache.n_heads, cache.head_dim
    parts = [
        DUMP_MAGIC,
        struct.pack("<6I", DUMP_VERSION, cache.n_layers, H, hd, cache.block_size, cache.length),
    ]
    for layer in range(cache.n_layers):
        nb = cache.n_blocks(layer)
        parts.append(struct.pack("<I", nb))
        for b in range(nb):
            blk = cache.block(layer, b)
            parts.append(struct.pack("<II", b, blk.filled))
            parts.append(blk.positions.astype("<u4").tobytes())
            parts.append(_tensor_record(f"k.{layer}.{b}", blk.k.transpose(1, 0, 2).reshape(blk.filled, H * hd)))
            parts.append(_tensor_record(f"v.{layer}.{b}", blk.v.transpose(1, 0, 2).reshape(blk.filled, H * hd)))
    Path(path).write_bytes(b"".join(parts))


def load_cache_dump(path) -> PagedKVCache:
    data = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise ValueError("truncated cache dump")
        out = data[off : off + n]
        off += n
        return out

    if take(4) != DUMP_MAGIC:
        raise ValueError("bad magic")
    version, n_layers, H, hd, B, _length = struct.unpack("<6I", take(24))
    if version != DUMP_VERSION:
        raise ValueError(f"unsupported dump version {version}")
    cache = PagedKVCache(n_layers, H, hd, B)
    for layer in range(n_layers):
        (nb,) = struct.unpack("<I", take(4))
        for _ in range(nb):
            _bid, filled = struct.unpack("<II", take(8))
            pos = np.frombuffer(take(4 * filled), dtype="<u4").astype(np.int64)
            kv = []
            for _ in range(2):
                (nlen,) = struct.unpack("<H", take(2))
                take(nlen)
                rows, cols = struct.unpack("<II", take(8))
                arr = np.frombuffer(take(4 * rows * cols), dtype="<f4").reshape(rows, H, hd)
                kv.append(arr.transpose(1, 0, 2).astype(KV_DTYPE))
            cache.append(layer, kv[0], kv[1], pos)
    return cache
