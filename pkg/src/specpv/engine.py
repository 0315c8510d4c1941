"""Speculative generation with partial verification.

Sequence bookkeeping: ``y`` is every committed token. The last one (the bonus
token of the previous step, or the prefill token) has not been forwarded yet,
so the target caches hold ``len(y) - 1`` tokens: the full cache holds a
prefix of them and the partial buffer the rest. Each step forwards that last
token together with the candidate tree (and, on a refresh, the buffered
tokens), accepts a path, and commits the surviving rows.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .drafter import ROOT, CandidateTree, Drafter, DraftState, TreeTemplate, build_tree_mask, chain, eagle_like
from .kvstore import (
    OffloadCostModel,
    PagedKVCache,
    PartialCacheView,
    StepCost,
    evict_rejected,
    modeled_compute_time,
    modeled_step_time,
    refresh_partial,
    select_partial,
)
from .model import FeatureBundle, TinyTransformer, forward_step
from .numerics import F64, SeededRNG, seeded_rng, softmax

DEFAULT_BUFFER_MARGIN = 20


class VerifyMode(str, enum.Enum):
    FULL = "Full"
    PARTIAL = "Partial"
    REFRESH = "Refresh"


@dataclass
class CacheConfig:
    budget: int | None = None  # None disables partial verification
    n_sink: int = 2
    n_local: int = 4
    buffer_cap: int | None = None
    block_size: int = 16
    score_variant: str = "as-written"
    reduction: str = "mean"
    margin: int = DEFAULT_BUFFER_MARGIN


@dataclass
class GenerationConfig:
    max_length: int = 4096
    max_new_tokens: int = 256
    temperature: float = 0.0
    seed: int = 0
    cache: CacheConfig = field(default_factory=CacheConfig)
    template: TreeTemplate | None = None
    chunk_size: int = 64
    eos_token: int | None = None
    cost: OffloadCostModel = field(default_factory=OffloadCostModel)

    def __post_init__(self):
        if self.template is None:
            self.template = chain(4) if self.temperature > 0 else eagle_like()
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.temperature > 0 and not self.template.is_chain:
            raise ValueError("lossless sampling is implemented for chain templates only")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        c = self.cache
        if c.budget is not None and c.budget < (c.n_sink + c.n_local) * c.block_size:
            raise ValueError("budget must cover the sink and local blocks")
        if self.buffer_cap < self.step_tokens:
            raise ValueError(f"buffer_cap {self.buffer_cap} cannot hold one step ({self.step_tokens} tokens)")

    @property
    def step_tokens(self) -> int:
        """Tokens forwarded in a non-refresh step: the pending token plus every candidate."""
        return self.template.n_nodes + 1

    @property
    def buffer_cap(self) -> int:
        if self.cache.buffer_cap is not None:
            return self.cache.buffer_cap
        return self.step_tokens + self.cache.margin


@dataclass
class StepRecord:
    mode: str
    drafted: int
    accepted: int
    emitted: int
    draft_time_s: float
    verify_time_s: float
    modeled_draft_s: float
    modeled_verify_s: float
    cumulative_length: int
    tokens_in_step: int = 0
    full_cache_len: int = 0
    buffer_occupancy: int = 0

    @property
    def wall_time_s(self) -> float:
        return self.draft_time_s + self.verify_time_s

    @property
    def modeled_time_s(self) -> float:
        return self.modeled_draft_s + self.modeled_verify_s


def select_mode(
    seq_len: int,
    budget: int | None,
    buffer_occupancy: int,
    incoming_nodes: int,
    buffer_cap: int,
    partial_initialized: bool,
) -> VerifyMode:
    if budget is None or seq_len < budget:
        return VerifyMode.FULL
    if not partial_initialized or buffer_occupancy + incoming_nodes > buffer_cap:
        return VerifyMode.REFRESH
    return VerifyMode.PARTIAL


# ---------------------------------------------------------------------------
# acceptance
# ---------------------------------------------------------------------------


@dataclass
class Acceptance:
    path: list[int]  # accepted node indices, root to leaf
    tokens: list[int]  # tokens of those nodes
    bonus: int

    @property
    def accepted(self) -> int:
        return len(self.path)


def _argmax(row) -> int:
    return int(np.argmax(np.asarray(row, dtype=F64)))


def post_evaluate(candidates: CandidateTree, logits: np.ndarray, temperature: float = 0.0, rng=None) -> Acceptance:
    """Accept a path through the candidate tree.

    ``logits`` row 0 belongs to the last committed token (the parent of the
    root nodes); row ``1 + i`` belongs to candidate node ``i``.
    """
    tpl = candidates.template
    if len(logits) != tpl.n_nodes + 1:
        raise ValueError(f"expected {tpl.n_nodes + 1} logits rows, got {len(logits)}")
    path: list[int] = []
    if temperature <= 0:
        cur, row = ROOT, 0
        while True:
            want = _argmax(logits[row])
            match = next((c for c in tpl.children(cur) if candidates.tokens[c] == want), None)
            if match is None:
                return Acceptance(path, [int(candidates.tokens[n]) for n in path], want)
            path.append(match)
            cur, row = match, 1 + match
    if not tpl.is_chain:
        raise ValueError("stochastic acceptance supports chain templates only")
    if candidates.dists is None:
        raise ValueError("sampling acceptance needs the draft distributions")
    row = 0
    for node in range(tpl.n_nodes):
        p = softmax(np.asarray(logits[row], dtype=F64) / temperature)
        q = candidates.dists[node]
        t = int(candidates.tokens[node])
        if rng.uniform() < min(1.0, p[t] / q[t]):
            path.append(node)
            row = 1 + node
            continue
        resid = np.maximum(p - q, 0.0)
        total = resid.sum()
        emit = rng.categorical(resid / total if total > 0 else p)
        return Acceptance(path, [int(candidates.tokens[n]) for n in path], emit)
    p = softmax(np.asarray(logits[row], dtype=F64) / temperature)
    return Acceptance(path, [int(candidates.tokens[n]) for n in path], rng.categorical(p))


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


class StagedView:
    """Forwards against ``base`` but holds the new rows until ``commit``."""

    def __init__(self, base):
        self.base = base
        self.q: dict[int, np.ndarray] = {}
        self.k: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}
        self.pos: np.ndarray | None = None

    @property
    def context_len(self) -> int:
        return self.base.context_len

    def context(self, layer):
        return self.base.context(layer)

    def write(self, layer, q, k, v, positions):
        self.q[layer], self.k[layer], self.v[layer] = q, k, v
        self.pos = np.asarray(positions)

    def queries(self, rows) -> list[np.ndarray]:
        return [self.q[l][:, rows] for l in sorted(self.q)]

    def commit(self, rows) -> None:
        rows = np.asarray(rows, dtype=np.int64)
        for layer in sorted(self.k):
            self.base.write(
                layer,
                self.q[layer][:, rows],
                np.ascontiguousarray(self.k[layer][:, rows]),
                np.ascontiguousarray(self.v[layer][:, rows]),
                self.pos[rows],
            )


@dataclass
class VerifyOutput:
    mode: VerifyMode
    logits: np.ndarray  # rows: pending token, then candidate nodes
    features: FeatureBundle  # same rows as logits
    stage: StagedView
    n_prefix: int  # rows forwarded before the candidates
    context_tokens: int


def verify_mask(context_len: int, n_prefix: int, template: TreeTemplate) -> np.ndarray:
    """Prefix tokens are causal; candidates see context, all prefix rows, ancestors, self."""
    n = template.n_nodes
    total = context_len + n_prefix + n
    mask = np.zeros((n_prefix + n, total), dtype=bool)
    mask[:n_prefix, :context_len] = True
    mask[:n_prefix, context_len : context_len + n_prefix] = np.tril(np.ones((n_prefix, n_prefix), dtype=bool))
    mask[n_prefix:] = build_tree_mask(template, context_len + n_prefix)
    return mask


# ---------------------------------------------------------------------------
# session
# ---------------------------------------------------------------------------


@dataclass
class PrefillResult:
    features: FeatureBundle
    token: int
    logits: np.ndarray


def _pick(logits_row, temperature: float, rng) -> int:
    if temperature <= 0:
        return _argmax(logits_row)
    return rng.categorical(softmax(np.asarray(logits_row, dtype=F64) / temperature))


def chunk_prefill(
    model: TinyTransformer,
    drafter: Drafter | None,
    prompt: Sequence[int],
    chunk_size: int,
    full: PagedKVCache,
    draft_state: DraftState | None,
    max_length: int | None = None,
    temperature: float = 0.0,
    rng=None,
) -> PrefillResult:
    """Fill the full and draft caches with the prompt; pick the first new token."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("empty prompt")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if max_length is not None and len(prompt) > max_length:
        raise ValueError(f"prompt of {len(prompt)} tokens exceeds max length {max_length}")
    prev_taps = np.zeros((1, model.config.tap_dim), dtype=np.float32)
    logits = feats = None
    for start in range(0, len(prompt), chunk_size):
        toks = prompt[start : start + chunk_size]
        pos = np.arange(start, start + len(toks))
        logits, feats = forward_step(model, toks, pos, full)
        if drafter is not None:
            shifted = np.concatenate([prev_taps, feats.taps[:-1]], axis=0)
            drafter.commit(draft_state, FeatureBundle(shifted, pos - 1), toks)
        prev_taps = feats.taps[-1:]
    x = _pick(logits[-1], temperature, rng)
    last = feats.select([len(feats) - 1])
    if drafter is not None:
        drafter.commit(draft_state, last, [x])
    return PrefillResult(last, x, logits[-1])


class Session:
    """One generation: caches, committed tokens, and per-step records."""

    def __init__(self, model: TinyTransformer, drafter: Drafter | None, cfg: GenerationConfig):
        self.model, self.drafter, self.cfg = model, drafter, cfg
        mc = model.config
        self.full = PagedKVCache(mc.n_layers, mc.n_heads, mc.head_dim, cfg.cache.block_size)
        self.view: PartialCacheView | None = None
        self.draft = drafter.new_state() if drafter is not None else None
        self.rng: SeededRNG = seeded_rng(cfg.seed)
        self.y: list[int] = []
        self.prompt_len = 0
        self.records: list[StepRecord] = []

    # -- state queries ----------------------------------------------------

    @property
    def cached_len(self) -> int:
        """Tokens whose K/V the target holds (full cache + partial buffer)."""
        return len(self.y) - 1

    @property
    def buffer_occupancy(self) -> int:
        return self.view.buffer_occupancy if self.view is not None else 0

    @property
    def new_tokens(self) -> int:
        return len(self.y) - self.prompt_len

    def prefill(self, prompt: Sequence[int]) -> PrefillResult:
        cfg = self.cfg
        depth = cfg.template.depth if self.drafter is not None else 0
        need = len(prompt) + cfg.max_new_tokens + depth
        if len(prompt) > cfg.max_length:
            raise ValueError(f"prompt of {len(prompt)} tokens exceeds max length {cfg.max_length}")
        if need > min(cfg.max_length, self.model.config.max_position):
            raise ValueError(
                f"prompt ({len(prompt)}) + max_new_tokens + draft depth exceeds max length "
                f"{min(cfg.max_length, self.model.config.max_position)}"
            )
        res = chunk_prefill(
            self.model, self.drafter, prompt, cfg.chunk_size, self.full, self.draft, cfg.max_length,
            cfg.temperature, self.rng,
        )
        self.prompt_len = len(prompt)
        self.y = list(int(t) for t in prompt) + [res.token]
        return res

    # -- modeled costs ----------------------------------------------------

    def _modeled(self, mode: str, tokens: int, touched: dict[str, int], weight_bytes: int, passes: int = 1) -> float:
        cost = self.cfg.cost
        compute = passes * modeled_compute_time(cost, weight_bytes, touched)
        step = StepCost(mode, tokens, {k: v * passes for k, v in touched.items()}, self.model.config.n_layers)
        return modeled_step_time(step, cost, compute)

    # -- one speculative step ----------------------------------------------

    def select_mode(self) -> VerifyMode:
        c = self.cfg.cache
        return select_mode(
            len(self.y), c.budget, self.buffer_occupancy, self.cfg.step_tokens, self.cfg.buffer_cap,
            self.view is not None,
        )

    def verify(self, candidates: CandidateTree, mode: VerifyMode) -> VerifyOutput:
        """Forward the pending token (plus buffer on refresh) and the candidates."""
        seq_len = len(self.y)
        if mode is VerifyMode.PARTIAL:
            if self.view is None:
                raise ValueError("partial verification before the partial cache was initialised")
            self.view.check_contiguity()
            if self.view.buffer_occupancy + 1 + len(candidates) > self.view.buffer_cap:
                raise OverflowError("partial buffer overflow; this step should have been a refresh")
            base = self.view
        else:
            base = self.full
        start = self.full.length if mode is VerifyMode.REFRESH else seq_len - 1
        if mode is VerifyMode.FULL and self.full.length != seq_len - 1:
            raise ValueError("full verification with tokens still in the partial buffer")
        prefix = self.y[start:seq_len]
        n_prefix = len(prefix)
        tokens = np.concatenate([np.asarray(prefix, np.int64), candidates.tokens])
        positions = np.concatenate([np.arange(start, seq_len), candidates.positions])
        stage = StagedView(base)
        mask = verify_mask(base.context_len, n_prefix, candidates.template)
        logits, feats = forward_step(self.model, tokens, positions, stage, mask)
        return VerifyOutput(mode, logits, feats, stage, n_prefix, base.context_len)

    def step(self) -> StepRecord:
        cfg = self.cfg
        seq_len = len(self.y)
        tpl = cfg.template
        t0 = time.perf_counter()
        cand = self.drafter.draft(self.draft, tpl, cfg.temperature, self.rng)
        t1 = time.perf_counter()
        mode = self.select_mode()
        out = self.verify(cand, mode)
        rows = out.logits[out.n_prefix - 1 :]
        acc = post_evaluate(cand, rows, cfg.temperature, self.rng)
        keep = list(range(out.n_prefix)) + [out.n_prefix + n for n in acc.path]
        out.stage.commit(keep)
        if mode is VerifyMode.REFRESH:
            queries = out.stage.queries(keep)
            if self.view is None:
                c = cfg.cache
                self.view = select_partial(
                    self.full, queries, c.budget, c.n_sink, c.n_local, c.score_variant, c.reduction, cfg.buffer_cap
                )
            else:
                self.view = refresh_partial(self.full, self.view, queries)
        new_cached = seq_len + acc.accepted
        evict_rejected(self.full, self.view, None, new_cached, commit_point=new_cached)
        evict_rejected(None, None, self.draft, seq_len, commit_point=seq_len)
        t2 = time.perf_counter()
        feat_rows = [out.n_prefix - 1] + [out.n_prefix + n for n in acc.path]
        emitted = acc.tokens + [acc.bonus]
        self.drafter.commit(self.draft, out.features.select(feat_rows), emitted)
        t3 = time.perf_counter()
        self.y.extend(emitted)

        bpt = self.full.bytes_per_token()
        if mode is VerifyMode.PARTIAL:
            touched = {"partial": out.context_tokens * bpt}
        else:
            touched = {"full": out.context_tokens * bpt}
        n_in = out.n_prefix + len(cand)
        rec = StepRecord(
            mode=mode.value,
            drafted=len(cand),
            accepted=acc.accepted,
            emitted=len(emitted),
            draft_time_s=(t1 - t0) + (t3 - t2),
            verify_time_s=t2 - t1,
            modeled_draft_s=self._modeled(
                "draft", len(cand), {"draft": self.draft.nbytes()}, self.drafter.weight_bytes(), passes=tpl.depth
            ),
            modeled_verify_s=self._modeled(mode.value, n_in, touched, self.model.weight_bytes()),
            cumulative_length=len(self.y),
            tokens_in_step=n_in,
            full_cache_len=self.full.length,
            buffer_occupancy=self.buffer_occupancy,
        )
        self.records.append(rec)
        return rec

    def ar_step(self) -> StepRecord:
        """Plain decoding: forward the pending token against the full cache."""
        cfg = self.cfg
        pos = len(self.y) - 1
        ctx = self.full.length
        t0 = time.perf_counter()
        logits, _ = forward_step(self.model, [self.y[-1]], [pos], self.full)
        tok = _pick(logits[-1], cfg.temperature, self.rng)
        t1 = time.perf_counter()
        self.y.append(tok)
        rec = StepRecord(
            mode=VerifyMode.FULL.value,
            drafted=0,
            accepted=0,
            emitted=1,
            draft_time_s=0.0,
            verify_time_s=t1 - t0,
            modeled_draft_s=0.0,
            modeled_verify_s=self._modeled(
                "ar", 1, {"full": ctx * self.full.bytes_per_token()}, self.model.weight_bytes()
            ),
            cumulative_length=len(self.y),
            tokens_in_step=1,
            full_cache_len=self.full.length,
        )
        self.records.append(rec)
        return rec

    def finished(self) -> bool:
        if self.new_tokens >= self.cfg.max_new_tokens:
            return True
        eos = self.cfg.eos_token
        return eos is not None and eos in self.y[self.prompt_len :]

    def output(self) -> list[int]:
        """Prompt plus at most max_new_tokens new tokens, cut after the first EOS."""
        new = self.y[self.prompt_len :][: self.cfg.max_new_tokens]
        eos = self.cfg.eos_token
        if eos is not None and eos in new:
            new = new[: new.index(eos) + 1]
        return self.y[: self.prompt_len] + new


@dataclass
class GenerationResult:
    tokens: list[int]
    records: list[StepRecord]
    prompt_len: int
    raw_length: int  # len(y) before truncation to max_new_tokens

    @property
    def new_tokens(self) -> list[int]:
        return self.tokens[self.prompt_len :]


def generate(
    model: TinyTransformer,
    drafter: Drafter,
    prompt: Sequence[int],
    cfg: GenerationConfig,
    observer: Callable[[Session, StepRecord], None] | None = None,
) -> GenerationResult:
    """Draft, pick a mode, verify, accept, evict; until N new tokens or EOS."""
    s = Session(model, drafter, cfg)
    s.prefill(prompt)
    while not s.finished():
        rec = s.step()
        if observer is not None:
            observer(s, rec)
    return GenerationResult(s.output(), s.records, s.prompt_len, len(s.y))


def autoregressive_generate(model: TinyTransformer, prompt: Sequence[int], cfg: GenerationConfig) -> GenerationResult:
    s = Session(model, None, cfg)
    s.prefill(prompt)
    while not s.finished():
        s.ar_step()
    return GenerationResult(s.output(), s.records, s.prompt_len, len(s.y))
