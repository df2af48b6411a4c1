"""Shared small fixtures for the engine tests.

Suites are cached per argument tuple because encoder init and synthetic
generation are deterministic; reusing them keeps the suite fast.
"""

from functools import lru_cache

from labelalign.encoders import ModelConfig
from labelalign.harness import build_synthetic_suite


@lru_cache(maxsize=None)
def small_config(d_model=16, d_feat=16, seed=0):
    return ModelConfig(
        d_model=d_model, d_feat=d_feat, n_layers=2, n_heads=4,
        max_seq_len=16, seed=seed,
    )


@lru_cache(maxsize=None)
def small_suite(n_classes=3, per_class=8, align="matched", seed=1, sigma=0.25,
                d_model=16, d_feat=16, enc_seed=0):
    return build_synthetic_suite(
        n_classes=n_classes,
        items_per_class=per_class,
        model_config=small_config(d_model, d_feat, enc_seed),
        seed=seed,
        sigma=sigma,
        align=align,
    )
