"""Tiny configurations and builders shared across test modules."""

import numpy as np
import torch

from scenario_flow.denoiser import NetConfig, build_velocity_net
from scenario_flow.objective import LossBatch
from scenario_flow.text_encoding import TextEmbedding

# Smallest network that still has two levels and one attention block.
TINY_NET = NetConfig(
    length=16,
    base_channels=8,
    channel_multipliers=(1, 2),
    groups=4,
    d_llm=16,
    d_k=8,
    attention_levels=(1,),
)

# Same shape family with live residual branches, for conditioning tests.
TINY_NET_LIVE = NetConfig(
    length=16,
    base_channels=8,
    channel_multipliers=(1, 2),
    groups=4,
    d_llm=16,
    d_k=8,
    attention_levels=(0, 1),
    zero_init_residual=False,
)

# Under the finite-difference parameter budget, run in float64.
GRAD_CHECK_NET = NetConfig(
    length=8,
    base_channels=4,
    channel_multipliers=(1, 2),
    groups=2,
    d_llm=8,
    d_k=4,
    attention_levels=(1,),
    zero_init_residual=False,
)


def random_embedding(m: int, d: int, seed: int = 0) -> TextEmbedding:
    rng = np.random.default_rng(seed)
    return TextEmbedding.from_rows(rng.standard_normal((m, d)), "reference")


def loss_batch(cfg: NetConfig, batch: int = 2, m: int = 3, seed: int = 0,
               dtype: torch.dtype = torch.float64) -> LossBatch:
    g = torch.Generator().manual_seed(seed)
    return LossBatch(
        x_t=torch.randn(batch, cfg.length, generator=g, dtype=dtype),
        t=torch.rand(batch, generator=g, dtype=dtype),
        text=torch.randn(batch, m, cfg.d_llm, generator=g, dtype=dtype),
        mask=torch.ones(batch, m, dtype=torch.bool),
        v_t=torch.randn(batch, cfg.length, generator=g, dtype=dtype),
    )


def tiny_net(cfg: NetConfig = TINY_NET, seed: int = 0, dtype: torch.dtype = torch.float32):
    return build_velocity_net(cfg, seed=seed, dtype=dtype)
