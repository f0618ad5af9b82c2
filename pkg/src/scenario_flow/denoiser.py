"""Velocity network: a 1D U-Net with timestep modulation and text cross-attention.

Layout for ``levels = len(channel_multipliers)`` resolutions::

    stem conv ─► [res block ─► stride-2 conv] × (levels-1)      (encoder)
              ─► res block (+ cross-attention)                   (bottleneck)
              ─► [transposed conv ─► concat skip ─► res block
                  (+ cross-attention)] × (levels-1)               (decoder)
              ─► GroupNorm ─► SiLU ─► conv to 1 channel

Every residual block gets its own linear projection of the sinusoidal
timestep embedding, added channel-wise before the second normalisation.
Cross-attention uses the feature map as queries and the text embedding
rows as keys and values, with a pre-norm feed-forward block after it.
"""

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn
from typing_extensions import Self, TypeAlias

from .common import ConfigError, DomainError, ShapeError

__all__ = [
    "TIME_SCALE",
    "TimeEmbedding",
    "NetConfig",
    "time_embed",
    "ResidualBlock",
    "CrossAttentionBlock",
    "VelocityNet",
    "build_velocity_net",
    "parameter_count",
]


TIME_SCALE = 100.0
FREQUENCY_BASE = 10000.0

# Interleaved [sin, cos] pairs, shape [..., d].
TimeEmbedding: TypeAlias = torch.Tensor


@dataclass(frozen=True)
class NetConfig:
    """Hyperparameters that fully determine the network's parameter shapes."""

    length: int = 64
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    groups: int = 8
    d_llm: int = 64
    d_k: int = 32
    # None means the default placement: bottleneck plus the two coarsest
    # decoder levels.
    attention_levels: tuple[int, ...] | None = None
    zero_init_residual: bool = True

    def __post_init__(self):
        # JSON hands us lists; keep the config hashable and comparable.
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        if self.attention_levels is not None:
            object.__setattr__(
                self, "attention_levels", tuple(sorted(set(self.attention_levels)))
            )

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    def resolved_attention_levels(self) -> frozenset[int]:
        if self.attention_levels is not None:
            return frozenset(self.attention_levels)
        bottom = self.levels - 1
        return frozenset(level for level in (bottom, bottom - 1, bottom - 2) if level >= 0)

    def validate(self) -> None:
        """Raise ConfigError if this config cannot be built."""
        if self.levels < 1:
            raise ConfigError("channel_multipliers must not be empty")
        if any(m < 1 for m in self.channel_multipliers):
            raise ConfigError(f"channel multipliers must be positive: {self.channel_multipliers}")
        if self.base_channels < 1 or self.groups < 1:
            raise ConfigError("base_channels and groups must be positive")
        if self.base_channels % self.groups:
            raise ConfigError(
                f"base_channels ({self.base_channels}) must be divisible by groups ({self.groups})"
            )
        factor = 2 ** (self.levels - 1)
        if self.length < factor or self.length % factor:
            raise ConfigError(
                f"length {self.length} must be a positive multiple of 2^(levels-1) = {factor}"
            )
        if self.d_llm < 1 or self.d_k < 1:
            raise ConfigError("d_llm and d_k must be positive")
        bad = [lvl for lvl in self.resolved_attention_levels() if not 0 <= lvl < self.levels]
        if bad:
            raise ConfigError(f"attention levels out of range 0..{self.levels - 1}: {bad}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["channel_multipliers"] = list(self.channel_multipliers)
        if self.attention_levels is not None:
            data["attention_levels"] = list(self.attention_levels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        data = dict(data)
        for key in ("channel_multipliers", "attention_levels"):
            if isinstance(data.get(key), list):
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid network config: {e}") from e


# --- Timestep embedding ----------------------------------------------------------


def time_embed(t, d: int) -> TimeEmbedding:
    """Sinusoidal embedding of flow time.

    Entry pairs are ``[sin(s*t/w_i), cos(s*t/w_i)]`` with ``s = 100`` and
    ``w_i = 10000^(2i/d)``. A scalar ``t`` gives shape ``[d]``; a tensor
    of shape ``[B]`` gives ``[B, d]``.
    """
    if d < 2 or d % 2:
        raise ValueError(f"embedding width must be even and >= 2, got {d}")
    if isinstance(t, torch.Tensor):
        t_tensor = t if t.is_floating_point() else t.to(torch.float64)
    else:
        t_tensor = torch.tensor(float(t), dtype=torch.float64)
    if bool(((t_tensor < 0) | (t_tensor > 1)).any()):
        raise DomainError("flow time must lie in [0, 1]")
    i = torch.arange(d // 2, dtype=t_tensor.dtype)
    omega = FREQUENCY_BASE ** (2.0 * i / d)
    angles = TIME_SCALE * t_tensor.unsqueeze(-1) / omega
    return torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).flatten(-2)


# --- Blocks ----------------------------------------------------------------------


class ResidualBlock(nn.Module):
    """Two-conv residual block with an additive timestep bias.

    ``out = H_res + H_mod`` where ``H_res = Conv(H)`` and ``H_mod`` is the
    modulation path. With ``zero_init`` the last modulation conv starts at
    zero, so the block is exactly ``H_res`` at initialisation.
    """

    def __init__(self, in_channels: int, out_channels: int, time_dim: int, groups: int,
                 zero_init: bool = True):
        super().__init__()
        self.conv_res = nn.Conv1d(in_channels, out_channels, 3, padding=1)
        self.norm_mid = nn.GroupNorm(groups, out_channels)
        self.conv_mid = nn.Conv1d(out_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm_mod = nn.GroupNorm(groups, out_channels)
        self.conv_mod = nn.Conv1d(out_channels, out_channels, 3, padding=1)
        if zero_init:
            nn.init.zeros_(self.conv_mod.weight)
            nn.init.zeros_(self.conv_mod.bias)

    def forward(self, h: torch.Tensor, t_emb: TimeEmbedding) -> torch.Tensor:
        if h.shape[1] != self.conv_res.in_channels:
            raise ShapeError(
                f"residual block expects {self.conv_res.in_channels} channels, got {h.shape[1]}"
            )
        h_res = self.conv_res(h)
        h_mid = self.conv_mid(F.silu(self.norm_mid(h_res)))
        t_bias = self.time_proj(t_emb).unsqueeze(-1)
        h_mod = self.conv_mod(F.silu(self.norm_mod(h_mid + t_bias)))
        return h_res + h_mod


class CrossAttentionBlock(nn.Module):
    """Single-head cross-attention from feature positions to text tokens."""

    def __init__(self, channels: int, d_llm: int, d_k: int, zero_init: bool = True):
        super().__init__()
        self.d_k = d_k
        self.norm_attn = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, d_k, bias=False)
        self.to_k = nn.Linear(d_llm, d_k, bias=False)
        self.to_v = nn.Linear(d_llm, d_k, bias=False)
        self.to_out = nn.Linear(d_k, channels)
        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, 4 * channels),
            nn.SiLU(),
            nn.Linear(4 * channels, channels),
        )
        if zero_init:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def attention_weights(
        self, h: torch.Tensor, text: torch.Tensor, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Softmax weights of shape ``[B, Lc, M]``; masked tokens get zero weight."""
        q = self.to_q(self.norm_attn(h.transpose(1, 2)))
        k = self.to_k(text)
        logits = q @ k.transpose(1, 2) / math.sqrt(self.d_k)
        if mask is not None:
            logits = logits.masked_fill(~mask.unsqueeze(1), float("-inf"))
        return torch.softmax(logits, dim=-1)

    def forward(
        self, h: torch.Tensor, text: torch.Tensor, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        if text.shape[-1] != self.to_k.in_features:
            raise ShapeError(
                f"text embedding width {text.shape[-1]} != expected {self.to_k.in_features}"
            )
        weights = self.attention_weights(h, text, mask)
        h_att = self.to_out(weights @ self.to_v(text))
        h_attout = h_att + h.transpose(1, 2)
        out = self.ffn(self.norm_ffn(h_attout)) + h_attout
        return out.transpose(1, 2)


# --- Network ---------------------------------------------------------------------


class VelocityNet(nn.Module):
    """Predicts the flow velocity for a batch of states, times and text embeddings."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        chans = cfg.channels
        zero_init = cfg.zero_init_residual
        attention = cfg.resolved_attention_levels()

        def block(c_in: int, c_out: int) -> ResidualBlock:
            return ResidualBlock(c_in, c_out, cfg.time_dim, cfg.groups, zero_init)

        self.stem = nn.Conv1d(1, chans[0], 3, padding=1)
        self.encoder = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for level in range(cfg.levels - 1):
            self.encoder.append(block(chans[level], chans[level]))
            self.downsample.append(
                nn.Conv1d(chans[level], chans[level + 1], 3, stride=2, padding=1)
            )

        self.bottleneck = block(chans[-1], chans[-1])

        self.upsample = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in reversed(range(cfg.levels - 1)):
            self.upsample.append(
                nn.ConvTranspose1d(chans[level + 1], chans[level], 4, stride=2, padding=1)
            )
            self.decoder.append(block(2 * chans[level], chans[level]))

        self.attention = nn.ModuleDict(
            {
                f"level{level}": CrossAttentionBlock(chans[level], cfg.d_llm, cfg.d_k, zero_init)
                for level in sorted(attention)
            }
        )

        self.out_norm = nn.GroupNorm(cfg.groups, chans[0])
        self.out_conv = nn.Conv1d(chans[0], 1, 3, padding=1)

        # Ablation switch: decoder levels whose skip is replaced by zeros.
        self.dropped_skips: set[int] = set()

    def _attend(self, level: int, h, text, mask):
        key = f"level{level}"
        if key in self.attention:
            return self.attention[key](h, text, mask)
        return h

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor | float,
        text: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Map ``x_t [B, L]``, ``t [B]``, ``text [B, M, D]`` to velocities ``[B, L]``."""
        if x_t.dim() == 1:
            return self.forward(x_t.unsqueeze(0), t, text, mask).squeeze(0)
        if x_t.dim() != 2 or x_t.shape[-1] != self.cfg.length:
            raise ShapeError(f"expected x_t of shape [B, {self.cfg.length}], got {tuple(x_t.shape)}")
        batch = x_t.shape[0]

        if not isinstance(t, torch.Tensor):
            t = torch.tensor(float(t), dtype=x_t.dtype)
        t = t.to(x_t.dtype).reshape(-1).expand(batch) if t.numel() == 1 else t.to(x_t.dtype)
        if t.shape != (batch,):
            raise ShapeError(f"expected t of shape [{batch}], got {tuple(t.shape)}")

        text = text.to(x_t.dtype)
        if text.dim() == 2:
            text = text.unsqueeze(0).expand(batch, -1, -1)
        if text.dim() != 3 or text.shape[0] != batch:
            raise ShapeError(f"expected text of shape [{batch}, M, D], got {tuple(text.shape)}")
        if mask is not None:
            if mask.dim() == 1:
                mask = mask.unsqueeze(0).expand(batch, -1)
            mask = mask.to(torch.bool)
            if not bool(mask.any(dim=-1).all()):
                raise ValueError("every text embedding needs at least one unmasked token")

        t_emb = time_embed(t, self.cfg.time_dim)

        h = self.stem(x_t.unsqueeze(1))
        skips = []
        for block, down in zip(self.encoder, self.downsample, strict=True):
            h = block(h, t_emb)
            skips.append(h)
            h = down(h)

        h = self.bottleneck(h, t_emb)
        h = self._attend(self.cfg.levels - 1, h, text, mask)

        for level, up, block in zip(
            reversed(range(self.cfg.levels - 1)), self.upsample, self.decoder, strict=True
        ):
            h = up(h)
            skip = skips[level]
            if level in self.dropped_skips:
                skip = torch.zeros_like(skip)
            h = block(torch.cat([h, skip], dim=1), t_emb)
            h = self._attend(level, h, text, mask)

        return self.out_conv(F.silu(self.out_norm(h))).squeeze(1)


def build_velocity_net(
    cfg: NetConfig, seed: int = 0, dtype: torch.dtype = torch.float32
) -> VelocityNet:
    """Construct a network with seeded initialisation, leaving the global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = VelocityNet(cfg)
    return net.to(dtype)


def parameter_count(cfg: NetConfig) -> int:
    """Number of trainable scalars for ``cfg``, computed without allocating weights."""
    with torch.device("meta"):
        net = VelocityNet(cfg)
    return sum(p.numel() for p in net.parameters())
