"""Small shared helpers for the tests."""

from specpv.model import ModelConfig
from specpv.numerics import RopeConfig


def small_config(**kw) -> ModelConfig:
    """Two layers, width 32: quick enough for brute-force oracles."""
    base = dict(
        vocab_size=48, dim=32, n_layers=2, n_heads=2, head_dim=16, ffn_dim=64,
        rope=RopeConfig(head_dim=16), feature_tap_layers=(0, 1), max_position=4096,
    )
    base.update(kw)
    return ModelConfig(**base)
