"""Self-speculative decoding with a budgeted partial KV cache.

The target model verifies drafted token trees either against its full KV
cache or against a partial view (sink, retrieval, local and buffer segments),
and periodically refreshes the partial view with a full verification.
"""

from .drafter import (
    CandidateTree,
    DraftModule,
    MockIdentical,
    MockNoisy,
    MockRandom,
    TreeTemplate,
    build_tree_mask,
    chain,
    eagle_like,
    make_drafter,
    template_from_spec,
    tree_draft,
)
from .engine import (
    CacheConfig,
    GenerationConfig,
    GenerationResult,
    Session,
    StepRecord,
    VerifyMode,
    autoregressive_generate,
    chunk_prefill,
    generate,
    post_evaluate,
    select_mode,
)
from .kvstore import (
    OffloadCostModel,
    PagedKVCache,
    PartialCacheView,
    append_kv,
    evict_rejected,
    modeled_step_time,
    refresh_partial,
    score_block,
    select_partial,
    summarize_block,
)
from .model import ModelConfig, TinyTransformer, forward_step, init_random, load_checkpoint, save_checkpoint
from .numerics import RopeConfig, seeded_rng

__version__ = "0.1.0"

__all__ = [
    "CacheConfig",
    "CandidateTree",
    "DraftModule",
    "GenerationConfig",
    "GenerationResult",
    "MockIdentical",
    "MockNoisy",
    "MockRandom",
    "ModelConfig",
    "OffloadCostModel",
    "PagedKVCache",
    "PartialCacheView",
    "RopeConfig",
    "Session",
    "StepRecord",
    "TinyTransformer",
    "TreeTemplate",
    "VerifyMode",
    "append_kv",
    "autoregressive_generate",
    "build_tree_mask",
    "chain",
    "chunk_prefill",
    "eagle_like",
    "evict_rejected",
    "forward_step",
    "generate",
    "init_random",
    "load_checkpoint",
    "make_drafter",
    "modeled_step_time",
    "post_evaluate",
    "refresh_partial",
    "save_checkpoint",
    "score_block",
    "seeded_rng",
    "select_mode",
    "select_partial",
    "summarize_block",
    "template_from_spec",
    "tree_draft",
]
