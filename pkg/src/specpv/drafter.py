"""Draft side of self-speculative decoding.

A drafter keeps a per-session :class:`DraftState` whose cache holds one entry
per committed token. Entry ``i`` is built from the target's tapped features
of token ``i-1`` plus the embedding of token ``i``, and its output predicts
token ``i+1``. Candidate trees are expanded level by level from the last
committed entry; candidate rows are written to the draft cache and removed
again by the engine once verification is done.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kvstore import SequenceKV
from .model import (
    FeatureBundle,
    LayerWeights,
    TinyTransformer,
    causal_mask,
    decoder_layer,
    forward_step,
    random_tensors,
)
from .numerics import F32, F64, RopeConfig, mask_bias, rms_rows, rope_phasors, seeded_rng, softmax

# ---------------------------------------------------------------------------
# tree templates
# ---------------------------------------------------------------------------

ROOT = -1


@dataclass(frozen=True)
class TreeTemplate:
    """Candidate tree shape as a parent list; ``-1`` is the last committed token.

    Children of a node are ranked by their order in ``parents``: the first
    child takes the parent's top-ranked token, the second the next, and so on.
    """

    parents: tuple[int, ...]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        if not self.parents:
            raise ValueError("a tree template needs at least one node")
        for i, p in enumerate(self.parents):
            if p != ROOT and not 0 <= p < i:
                raise ValueError(f"node {i} has parent {p}: parents must precede children")

    @property
    def n_nodes(self) -> int:
        return len(self.parents)

    @property
    def depths(self) -> tuple[int, ...]:
        d = []
        for p in self.parents:
            d.append(0 if p == ROOT else d[p] + 1)
        return tuple(d)

    @property
    def depth(self) -> int:
        return max(self.depths) + 1

    @property
    def is_chain(self) -> bool:
        return all(p == i - 1 for i, p in enumerate(self.parents))

    def children(self, node: int) -> list[int]:
        return [i for i, p in enumerate(self.parents) if p == node]

    def levels(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.depth)]
        for i, d in enumerate(self.depths):
            out[d].append(i)
        return out

    def sibling_rank(self, node: int) -> int:
        return self.children(self.parents[node]).index(node)

    def ancestors(self, node: int) -> list[int]:
        out = []
        p = self.parents[node]
        while p != ROOT:
            out.append(p)
            p = self.parents[p]
        return out[::-1]


def chain(depth: int) -> TreeTemplate:
    if depth < 1:
        raise ValueError("chain depth must be >= 1")
    return TreeTemplate(tuple(range(-1, depth - 1)), name=f"chain({depth})")


def binary(depth: int) -> TreeTemplate:
    parents = [ROOT, ROOT]
    frontier = [0, 1]
    for _ in range(depth - 1):
        nxt = []
        for node in frontier:
            for _ in range(2):
                parents.append(node)
                nxt.append(len(parents) - 1)
        frontier = nxt
    return TreeTemplate(tuple(parents), name=f"binary({depth})")


def eagle_like() -> TreeTemplate:
    """Depth 4, 10 nodes; the top-ranked path branches 3, 2, 2, 1."""
    return TreeTemplate((-1, -1, -1, 0, 0, 1, 3, 3, 4, 6), name="eagle-like")


def template_from_spec(spec) -> TreeTemplate:
    """Accept a name ("chain(4)", "binary(2)", "eagle-like") or a parent list."""
    if isinstance(spec, TreeTemplate):
        return spec
    if isinstance(spec, (list, tuple)):
        return TreeTemplate(tuple(spec))
    s = str(spec).strip()
    if s == "eagle-like":
        return eagle_like()
    for prefix, fn in (("chain(", chain), ("binary(", binary)):
        if s.startswith(prefix) and s.endswith(")"):
            return fn(int(s[len(prefix) : -1]))
    raise ValueError(f"unknown tree template {spec!r}")


def build_tree_mask(template: TreeTemplate, context_len: int) -> np.ndarray:
    """``[N, context_len + N]``: every context column, plus ancestors and self."""
    n = template.n_nodes
    mask = np.zeros((n, context_len + n), dtype=bool)
    mask[:, :context_len] = True
    for i in range(n):
        mask[i, context_len + i] = True
        for a in template.ancestors(i):
            mask[i, context_len + a] = True
    return mask


# ---------------------------------------------------------------------------
# candidate trees and draft state
# ---------------------------------------------------------------------------


@dataclass
class CandidateTree:
    template: TreeTemplate
    tokens: np.ndarray
    positions: np.ndarray
    probs: np.ndarray
    dists: np.ndarray | None = None  # [N, vocab] proposal distributions when sampling

    @property
    def parents(self) -> tuple[int, ...]:
        return self.template.parents

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class DraftState:
    """Per-session draft cache plus the output of the last committed entry."""

    kv: SequenceKV | None
    length: int = 0
    last_hidden: np.ndarray | None = None
    last_logits: np.ndarray | None = None
    scratch: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.length

    def truncate_from_position(self, position: int) -> None:
        if self.kv is not None:
            self.kv.truncate_from_position(position)
        self.length = min(self.length, position)

    def nbytes(self) -> int:
        if self.kv is None:
            return 0
        kv = self.kv
        return len(kv) * kv.n_layers * 2 * kv.n_heads * kv.head_dim * 4


def _ranked(logits: np.ndarray) -> np.ndarray:
    return np.argsort(-np.asarray(logits, dtype=F64), kind="stable")


class Drafter:
    """Common tree expansion. Subclasses supply ``commit`` and ``_expand``."""

    kind = "abstract"

    def __init__(self, vocab_size: int, max_position: int):
        self.vocab_size = vocab_size
        self.max_position = max_position

    def new_state(self) -> DraftState:
        return DraftState(kv=None)

    def weight_bytes(self) -> int:
        return 0

    def commit(self, state: DraftState, features: FeatureBundle | None, tokens: Sequence[int]) -> None:
        """Append committed tokens. ``features`` row i belongs to the token before ``tokens[i]``."""
        raise NotImplementedError

    def _expand(self, state, template, li, node_hidden, tokens, positions, node_rows, level):
        """Forward one level of candidates; returns (logits, hidden) rows for those nodes."""
        raise NotImplementedError

    def _choose(self, state, logits, n_children, temperature, rng):
        """Pick child tokens given a parent's draft logits. Returns (tokens, probs, dist)."""
        if temperature > 0:
            dist = softmax(np.asarray(logits, dtype=F64) / temperature)
            toks = [rng.categorical(dist) for _ in range(n_children)]
            return toks, [float(dist[t]) for t in toks], dist
        ranked = _ranked(logits)[:n_children]
        p = softmax(logits)
        return ranked.tolist(), [float(p[t]) for t in ranked], None

    def draft(self, state: DraftState, template: TreeTemplate, temperature: float = 0.0, rng=None) -> CandidateTree:
        if state.last_logits is None:
            raise ValueError("draft state has no committed tokens")
        if temperature > 0 and not template.is_chain:
            raise ValueError("stochastic drafting supports chain templates only")
        base = state.length
        if base + template.depth - 1 >= self.max_position:
            raise ValueError(
                f"template depth {template.depth} exceeds the remaining length budget at position {base}"
            )
        n = template.n_nodes
        tokens = np.zeros(n, np.int64)
        probs = np.zeros(n, F64)
        dists = np.zeros((n, self.vocab_size), F64) if temperature > 0 else None
        depths = template.depths
        positions = np.array([base + d for d in depths], np.int64)
        node_logits: dict[int, np.ndarray] = {ROOT: state.last_logits}
        node_hidden: dict[int, np.ndarray | None] = {ROOT: state.last_hidden}
        node_rows: dict[int, int] = {}
        levels = template.levels()
        has_children = {p for p in template.parents if p != ROOT}
        for li, level in enumerate(levels):
            by_parent: dict[int, list[int]] = {}
            for node in level:
                by_parent.setdefault(template.parents[node], []).append(node)
            for parent, kids in by_parent.items():
                toks, ps, dist = self._choose(state, node_logits[parent], len(kids), temperature, rng)
                for node, t, p in zip(kids, toks, ps):
                    tokens[node], probs[node] = t, p
                    if dist is not None:
                        dists[node] = dist
            # leaves need no forward pass
            inner = [node for node in level if node in has_children]
            if not inner:
                break
            logits, hidden = self._expand(state, template, li, node_hidden, tokens, positions, node_rows, inner)
            for j, node in enumerate(inner):
                node_logits[node] = logits[j]
                node_hidden[node] = None if hidden is None else hidden[j]
        return CandidateTree(template, tokens, positions, probs, dists)


def _draft_tree_mask(state: DraftState, template: TreeTemplate, level: list[int], node_rows: dict[int, int]):
    """Mask for one level: committed rows, ancestor candidate rows, and self."""
    ctx = len(state.kv)
    n = len(level)
    mask = np.zeros((n, ctx + n), dtype=bool)
    mask[:, : state.length] = True
    for j, node in enumerate(level):
        for a in template.ancestors(node):
            mask[j, node_rows[a]] = True
        mask[j, ctx + j] = True
    return mask


def tree_draft(drafter: Drafter, state: DraftState, template: TreeTemplate, temperature: float = 0.0, rng=None):
    """Propose a candidate tree rooted after the last committed token."""
    return drafter.draft(state, template, temperature, rng)


# ---------------------------------------------------------------------------
# EAGLE-style draft module
# ---------------------------------------------------------------------------


def fuse_features(taps, token_embedding, w_fuse) -> np.ndarray:
    """Project concatenated taps to model width and add the token embedding."""
    t = np.atleast_2d(np.asarray(taps, dtype=F32))
    e = np.atleast_2d(np.asarray(token_embedding, dtype=F32))
    w = np.asarray(w_fuse)
    if t.shape[1] != w.shape[0]:
        raise ValueError(f"expected {w.shape[0]} tapped features, got {t.shape[1]}")
    return ((t.astype(F64) @ w.astype(F64)).astype(F32) + e).astype(F32)


class DraftModule(Drafter):
    """Fusion projection, one decoder layer, and the target's output head."""

    kind = "eagle-like"

    def __init__(self, target: TinyTransformer, tensors: dict[str, np.ndarray], rope: RopeConfig | None = None):
        cfg = target.config
        super().__init__(cfg.vocab_size, cfg.max_position)
        self.target = target
        self.dim = cfg.dim
        self.n_heads, self.head_dim, self.eps = cfg.n_heads, cfg.head_dim, cfg.norm_eps
        self.rope = rope or cfg.rope
        self.tensors = tensors
        self.w_fuse = tensors["fuse"]
        self.layer = LayerWeights({n: tensors[f"layer.{n}"] for n in LayerWeights.NAMES})
        self.norm = tensors["norm"][0]

    @staticmethod
    def shapes(target: TinyTransformer) -> dict[str, tuple[int, int]]:
        cfg = target.config
        out = {"fuse": (cfg.tap_dim, cfg.dim)}
        for n, s in LayerWeights.shapes(cfg.dim, cfg.ffn_dim).items():
            out[f"layer.{n}"] = s
        out["norm"] = (1, cfg.dim)
        return out

    def weight_bytes(self) -> int:
        own = sum(int(t.size) for t in self.tensors.values())
        return 4 * (own + self.target.tensors["lm_head"].size)

    def new_state(self) -> DraftState:
        return DraftState(kv=SequenceKV(1, self.n_heads, self.head_dim))

    def _run(self, state, x, positions, mask):
        if mask is None and len(x) > 1:
            mask = causal_mask(len(state.kv), len(x))
        bias = None if mask is None else mask_bias(mask)
        rot = rope_phasors(positions, self.rope)
        h = decoder_layer(self.layer, x, rot, self.n_heads, self.head_dim, self.eps, state.kv, 0, bias, positions)
        logits = self.target.head(rms_rows(h, self.norm, self.eps))
        return logits, h

    def commit(self, state, features, tokens):
        tokens = np.asarray(tokens, np.int64)
        n = len(tokens)
        if n == 0:
            return
        taps = np.zeros((n, self.w_fuse.shape[0]), F32) if features is None else features.taps
        if len(taps) != n:
            raise ValueError("one feature row per committed token is required")
        if len(state.kv) != state.length:
            raise ValueError("draft cache still holds candidate rows; evict before committing")
        x = fuse_features(taps, self.target.embed[tokens], self.w_fuse)
        positions = np.arange(state.length, state.length + n)
        logits, h = self._run(state, x, positions, None)
        state.length += n
        state.last_logits, state.last_hidden = logits[-1], h[-1]

    def _expand(self, state, template, li, node_hidden, tokens, positions, node_rows, level):
        mask = _draft_tree_mask(state, template, level, node_rows)
        rows0 = len(state.kv)
        parents_h = np.stack([node_hidden[template.parents[n]] for n in level])
        x = (parents_h + self.target.embed[tokens[level]]).astype(F32)
        logits, h = self._run(state, x, positions[level], mask)
        for j, node in enumerate(level):
            node_rows[node] = rows0 + j
        return logits, h


def init_draft_module(target: TinyTransformer, seed: int, rope: RopeConfig | None = None) -> DraftModule:
    return DraftModule(target, random_tensors(DraftModule.shapes(target), seeded_rng(seed)), rope)


# ---------------------------------------------------------------------------
# mock drafters
# ---------------------------------------------------------------------------


class MockIdentical(Drafter):
    """Drafts with the target model itself (own full-size cache)."""

    kind = "mock-identical"

    def __init__(self, target: TinyTransformer):
        cfg = target.config
        super().__init__(cfg.vocab_size, cfg.max_position)
        self.target = target

    def weight_bytes(self) -> int:
        return self.target.weight_bytes()

    def new_state(self) -> DraftState:
        cfg = self.target.config
        return DraftState(kv=SequenceKV(cfg.n_layers, cfg.n_heads, cfg.head_dim))

    def commit(self, state, features, tokens):
        tokens = np.asarray(tokens, np.int64)
        if len(tokens) == 0:
            return
        if len(state.kv) != state.length:
            raise ValueError("draft cache still holds candidate rows; evict before committing")
        positions = np.arange(state.length, state.length + len(tokens))
        logits, _ = forward_step(self.target, tokens, positions, state.kv)
        state.length += len(tokens)
        state.last_logits = logits[-1]

    def _expand(self, state, template, li, node_hidden, tokens, positions, node_rows, level):
        mask = _draft_tree_mask(state, template, level, node_rows)
        rows0 = len(state.kv)
        logits, _ = forward_step(self.target, tokens[level], positions[level], state.kv, mask)
        for j, node in enumerate(level):
            node_rows[node] = rows0 + j
        return logits, None


class MockNoisy(MockIdentical):
    """Copies the target's choice with probability ``p``.

    Greedy: otherwise a uniform draw over the other ``vocab-1`` tokens, so a
    chain node matches the target's argmax with probability exactly ``p``.
    Sampling: otherwise a uniform draw over the whole vocabulary.
    """

    kind = "mock-noisy"

    def __init__(self, target: TinyTransformer, p: float, seed: int = 0):
        super().__init__(target)
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        self.p = p
        self.seed = seed

    def new_state(self) -> DraftState:
        st = super().new_state()
        st.scratch["rng"] = seeded_rng(self.seed)
        return st

    def _choose(self, state, logits, n_children, temperature, rng):
        V = self.vocab_size
        r = state.scratch["rng"]
        if temperature > 0:
            pt = softmax(np.asarray(logits, dtype=F64) / temperature)
            dist = self.p * pt + (1.0 - self.p) / V
            toks = []
            for _ in range(n_children):
                toks.append(r.categorical(pt) if r.uniform() < self.p else r.integer(V))
            return toks, [float(dist[t]) for t in toks], dist
        ranked = _ranked(logits)[:n_children].tolist()
        toks = []
        for want in ranked:
            if r.uniform() < self.p:
                toks.append(want)
            else:
                t = r.integer(V - 1)
                toks.append(t + 1 if t >= want else t)
        return toks, [self.p if t == w else (1.0 - self.p) / (V - 1) for t, w in zip(toks, ranked)], None


class MockRandom(Drafter):
    """Uniform random tokens, independent of the context."""

    kind = "mock-random"

    def __init__(self, vocab_size: int, max_position: int = 1 << 30, seed: int = 0):
        super().__init__(vocab_size, max_position)
        self.seed = seed

    def new_state(self) -> DraftState:
        st = DraftState(kv=None)
        st.scratch["rng"] = seeded_rng(self.seed)
        return st

    def commit(self, state, features, tokens):
        state.length += len(tokens)
        state.last_logits = np.zeros(self.vocab_size, F32)

    def _choose(self, state, logits, n_children, temperature, rng):
        V = self.vocab_size
        toks = [state.scratch["rng"].integer(V) for _ in range(n_children)]
        dist = np.full(V, 1.0 / V) if temperature > 0 else None
        return toks, [1.0 / V] * n_children, dist

    def _expand(self, state, template, li, node_hidden, tokens, positions, node_rows, level):
        return np.zeros((len(level), self.vocab_size), F32), None


def make_drafter(kind: str, target: TinyTransformer, seed: int = 0, p: float = 0.5, rope=None) -> Drafter:
    """Build a drafter by name: eagle-like, mock-identical, mock-noisy, mock-random."""
    if kind == "eagle-like":
        return init_draft_module(target, seed, rope)
    if kind == "mock-identical":
        return MockIdentical(target)
    if kind == "mock-noisy":
        return MockNoisy(target, p, seed)
    if kind == "mock-random":
        return MockRandom(target.config.vocab_size, target.config.max_position, seed)
    raise ValueError(f"unknown drafter kind {kind!r}")
