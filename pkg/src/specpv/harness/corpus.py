"""Synthetic token corpus with planted long-range repeats.

Background tokens are uniform. ``n_motifs`` fixed motifs are planted every
``period`` tokens, motif ``m`` at offset ``m * period // n_motifs`` inside
each period, so a motif at position ``p`` recurs at ``p + period``. This gives
block retrieval something to find at long range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import seeded_rng


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 256
    period: int = 192
    motif_len: int = 12
    n_motifs: int = 3

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.period < 1 or self.motif_len < 1 or self.n_motifs < 1:
            raise ValueError("period, motif_len and n_motifs must be positive")
        if self.n_motifs * self.motif_len > self.period:
            raise ValueError("motifs do not fit in one period")


def motif_positions(n_tokens: int, cfg: CorpusConfig) -> list[tuple[int, int]]:
    """(motif index, start) of every fully planted motif, in position order."""
    out = []
    stride = cfg.period // cfg.n_motifs
    for base in range(0, n_tokens, cfg.period):
        for m in range(cfg.n_motifs):
            start = base + m * stride
            if start + cfg.motif_len <= n_tokens:
                out.append((m, start))
    return out


def gen_corpus(seed: int, n_tokens: int, vocab: int = 256, cfg: CorpusConfig | None = None) -> list[int]:
    """Deterministic token stream of exactly ``n_tokens`` ids in ``[0, vocab)``."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    cfg = cfg or CorpusConfig(vocab_size=vocab)
    if cfg.vocab_size != vocab:
        cfg = CorpusConfig(vocab, cfg.period, cfg.motif_len, cfg.n_motifs)
    rng = seeded_rng(seed)
    motifs = (rng.uniform_array(cfg.n_motifs * cfg.motif_len) * vocab).astype(np.int64)
    motifs = np.minimum(motifs, vocab - 1).reshape(cfg.n_motifs, cfg.motif_len)
    toks = np.minimum((rng.uniform_array(n_tokens) * vocab).astype(np.int64), vocab - 1)
    for m, start in motif_positions(n_tokens, cfg):
        toks[start : start + cfg.motif_len] = motifs[m]
    return toks.tolist()
