"""Multi-stream denoising U-Net with shared/independent feature splitting.

Three encoders process the noisy target, the low-res condition, and the
auxiliary contrast separately. At the bottleneck each stream is split into
a shared and an independent block; the shared blocks are fused by a
learned convex combination, channel-attention modules reweight the four
surviving blocks, and a single decoder maps their concatenation back to
a noise prediction, plus a variance-interpolation channel when
configured. Decoder skip connections come from all three encoders by
default (``condition_skips``), or from the noisy stream alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 96
    num_res_blocks: int = 2
    attention_resolutions: tuple[int, ...] = (28, 14, 7)
    channel_multipliers: tuple[int, ...] = (1, 1, 2, 2, 4, 4)
    learn_variance: bool = True
    in_resolution: int = 224
    # Feed the decoder skip connections from all three encoders (the
    # conditioning streams included), not just the noisy stream. With
    # bottleneck-only conditioning, short training runs learn to ignore
    # the conditions outright.
    condition_skips: bool = True

    def __post_init__(self):
        if self.base_channels % 2 != 0 or self.base_channels < 2:
            raise ValueError("base_channels must be a positive even number")
        if self.num_res_blocks < 1:
            raise ValueError("num_res_blocks must be >= 1")
        levels = len(self.channel_multipliers)
        if levels < 1:
            raise ValueError("need at least one channel multiplier")
        if self.in_resolution % 2 ** (levels - 1) != 0:
            raise ValueError(
                f"in_resolution {self.in_resolution} not divisible by"
                f" 2^{levels - 1} for {levels} levels"
            )
        reachable = {self.in_resolution // 2**i for i in range(levels)}
        extra = set(self.attention_resolutions) - reachable
        if extra:
            raise ValueError(
                f"attention resolutions {sorted(extra)} unreachable from"
                f" in_resolution {self.in_resolution}"
            )
        if (self.base_channels * self.channel_multipliers[-1]) % 2 != 0:
            raise ValueError("bottleneck channel count must be even")

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def bottleneck_resolution(self) -> int:
        return self.in_resolution // 2 ** (len(self.channel_multipliers) - 1)

    @staticmethod
    def desk(in_resolution: int = 32, base_channels: int = 16) -> "ModelConfig":
        """Small configuration for laptop-scale runs and tests."""
        return ModelConfig(
            base_channels=base_channels,
            num_res_blocks=2,
            attention_resolutions=(in_resolution // 4,),
            channel_multipliers=(1, 2, 2),
            learn_variance=True,
            in_resolution=in_resolution,
        )


@dataclass
class Representations:
    """Bottleneck feature blocks of one forward pass.

    The six raw blocks feed the disentanglement loss; the reweighted blocks
    are what the decoder consumes.
    """

    shared_noisy: torch.Tensor
    indep_noisy: torch.Tensor
    shared_lowres: torch.Tensor
    indep_lowres: torch.Tensor
    shared_aux: torch.Tensor
    indep_aux: torch.Tensor
    shared_weighted: torch.Tensor
    indep_noisy_weighted: torch.Tensor
    indep_lowres_weighted: torch.Tensor
    indep_aux_weighted: torch.Tensor


@dataclass
class ModelOutput:
    eps_pred: torch.Tensor
    v_pred: torch.Tensor | None
    reps: Representations


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(device=t.device)
    args = t[:, None].double() * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def fuse_shared(blocks, weights) -> torch.Tensor:
    """Convex combination of the three shared blocks. Tensor weights keep
    their gradient path; values are only read for validation."""
    if len(blocks) != 3 or len(weights) != 3:
        raise ValueError("expected exactly three blocks and three weights")
    shapes = {tuple(b.shape) for b in blocks}
    if len(shapes) != 1:
        raise ValueError(f"shared blocks disagree in shape: {shapes}")
    vals = [
        float(x.detach() if isinstance(x, torch.Tensor) else x) for x in weights
    ]
    if any(x < 0.0 for x in vals) or abs(sum(vals) - 1.0) > 1e-6:
        raise ValueError(f"weights must be nonnegative and sum to 1, got {vals}")
    return weights[0] * blocks[0] + weights[1] * blocks[1] + weights[2] * blocks[2]


def _norm(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


def _zero_init(module: nn.Module) -> nn.Module:
    nn.init.zeros_(module.weight)
    if module.bias is not None:
        nn.init.zeros_(module.bias)
    return module


class SqueezeExcite(nn.Module):
    """Channel reweighting from globally pooled descriptors: two fully
    connected layers (SiLU, then Sigmoid) produce one weight per channel."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(4, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def channel_weights(self, x: torch.Tensor) -> torch.Tensor:
        d = x.mean(dim=(-2, -1))
        return torch.sigmoid(self.fc2(F.silu(self.fc1(d))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.channel_weights(x)
        return x * s[..., None, None]


class SharedIndependentSplit(nn.Module):
    """Two 3x3 convolution heads mapping stream features of 2C channels to
    a shared block and an independent block of C channels each."""

    def __init__(self, channels: int):
        super().__init__()
        if channels % 2 != 0:
            raise ValueError(f"stream channel count must be even, got {channels}")
        half = channels // 2
        self.shared_head = nn.Conv2d(channels, half, 3, padding=1)
        self.indep_head = nn.Conv2d(channels, half, 3, padding=1)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.shared_head(z), self.indep_head(z)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_channels)
        self.norm2 = _norm(out_channels)
        self.conv2 = _zero_init(nn.Conv2d(out_channels, out_channels, 3, padding=1))
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention2d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = _zero_init(nn.Conv2d(channels, channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class StreamEncoder(nn.Module):
    """Per-stream encoder: input conv, res blocks with optional attention
    per level, downsampling between levels, and a bottleneck middle block.
    Records the skip stack (consumed only for the noisy stream)."""

    def __init__(self, config: ModelConfig, temb_dim: int):
        super().__init__()
        chans = config.level_channels
        self.conv_in = nn.Conv2d(1, chans[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.skip_channels = [chans[0]]
        ch = chans[0]
        res = config.in_resolution
        for level, ch_out in enumerate(chans):
            for _ in range(config.num_res_blocks):
                group = nn.ModuleList([ResidualBlock(ch, ch_out, temb_dim)])
                if res in config.attention_resolutions:
                    group.append(SelfAttention2d(ch_out))
                self.blocks.append(group)
                self.skip_channels.append(ch_out)
                ch = ch_out
            if level < len(chans) - 1:
                self.blocks.append(nn.ModuleList([Downsample(ch)]))
                self.skip_channels.append(ch)
                res //= 2
        self.mid1 = ResidualBlock(ch, ch, temb_dim)
        self.mid_attn = (
            SelfAttention2d(ch) if res in config.attention_resolutions else None
        )
        self.mid2 = ResidualBlock(ch, ch, temb_dim)

    def forward(self, x: torch.Tensor, temb: torch.Tensor):
        h = self.conv_in(x)
        skips = [h]
        for group in self.blocks:
            for layer in group:
                h = layer(h, temb) if isinstance(layer, ResidualBlock) else layer(h)
            skips.append(h)
        h = self.mid1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid2(h, temb)
        return h, skips


class Decoder(nn.Module):
    """Single decoder consuming the fused bottleneck plus the encoder
    skip stack, mirroring the encoder's level structure."""

    def __init__(self, config: ModelConfig, temb_dim: int, skip_channels: list[int]):
        super().__init__()
        chans = config.level_channels
        skip_stack = list(skip_channels)
        self.levels = nn.ModuleList()
        ch = chans[-1]
        res = config.bottleneck_resolution
        for level in reversed(range(len(chans))):
            ch_out = chans[level]
            blocks = nn.ModuleList()
            for _ in range(config.num_res_blocks + 1):
                group = nn.ModuleList(
                    [ResidualBlock(ch + skip_stack.pop(), ch_out, temb_dim)]
                )
                if res in config.attention_resolutions:
                    group.append(SelfAttention2d(ch_out))
                blocks.append(group)
                ch = ch_out
            upsample = Upsample(ch) if level > 0 else None
            self.levels.append(nn.ModuleList([blocks, upsample]))
            if level > 0:
                res *= 2
        assert not skip_stack
        out_channels = 2 if config.learn_variance else 1
        self.norm_out = _norm(ch)
        self.conv_out = _zero_init(nn.Conv2d(ch, out_channels, 3, padding=1))

    def forward(self, h: torch.Tensor, skips: list[torch.Tensor], temb: torch.Tensor):
        stack = list(skips)
        for blocks, upsample in self.levels:
            for group in blocks:
                h = torch.cat([h, stack.pop()], dim=1)
                for layer in group:
                    h = layer(h, temb) if isinstance(layer, ResidualBlock) else layer(h)
            if upsample is not None:
                h = upsample(h)
        assert not stack
        return self.conv_out(F.silu(self.norm_out(h)))


class DisentangledUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        temb_dim = config.base_channels * 4
        self.temb_mlp = nn.Sequential(
            nn.Linear(config.base_channels, temb_dim),
            nn.SiLU(),
            nn.Linear(temb_dim, temb_dim),
        )
        self.encoder_noisy = StreamEncoder(config, temb_dim)
        self.encoder_lowres = StreamEncoder(config, temb_dim)
        self.encoder_aux = StreamEncoder(config, temb_dim)

        bottleneck = config.level_channels[-1]
        half = bottleneck // 2
        self.split_noisy = SharedIndependentSplit(bottleneck)
        self.split_lowres = SharedIndependentSplit(bottleneck)
        self.split_aux = SharedIndependentSplit(bottleneck)
        # Learned fusion weights; softmax of zeros starts at (1/3, 1/3, 1/3).
        self.fuse_logits = nn.Parameter(torch.zeros(3))
        self.se_shared = SqueezeExcite(half)
        self.se_noisy = SqueezeExcite(half)
        self.se_lowres = SqueezeExcite(half)
        self.se_aux = SqueezeExcite(half)
        self.bottleneck_conv = nn.Conv2d(2 * bottleneck, bottleneck, 3, padding=1)
        skip_channels = self.encoder_noisy.skip_channels
        if config.condition_skips:
            skip_channels = [3 * c for c in skip_channels]
        self.decoder = Decoder(config, temb_dim, skip_channels)

    def fusion_weights(self) -> torch.Tensor:
        return torch.softmax(self.fuse_logits, dim=0)

    def forward(self, x_t: torch.Tensor, lowres: torch.Tensor, aux: torch.Tensor, t) -> ModelOutput:
        for name, grid in (("x_t", x_t), ("lowres", lowres), ("aux", aux)):
            if grid.shape[-1] != self.config.in_resolution or grid.shape[-2] != self.config.in_resolution:
                raise ValueError(
                    f"{name} resolution {tuple(grid.shape[-2:])} does not match"
                    f" configured {self.config.in_resolution}"
                )
        if isinstance(t, torch.Tensor):
            tt = t.to(device=x_t.device)
        elif isinstance(t, (int, np.integer)):
            tt = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
        else:
            tt = torch.as_tensor(t, dtype=torch.long, device=x_t.device)
        if tt.ndim == 0:
            tt = tt[None].expand(x_t.shape[0])
        temb = self.temb_mlp(
            timestep_embedding(tt, self.config.base_channels).to(x_t.dtype)
        )

        z_noisy, skips = self.encoder_noisy(x_t, temb)
        z_lowres, skips_lowres = self.encoder_lowres(lowres, temb)
        z_aux, skips_aux = self.encoder_aux(aux, temb)
        if self.config.condition_skips:
            skips = [
                torch.cat(blocks, dim=1)
                for blocks in zip(skips, skips_lowres, skips_aux)
            ]

        shared_noisy, indep_noisy = self.split_noisy(z_noisy)
        shared_lowres, indep_lowres = self.split_lowres(z_lowres)
        shared_aux, indep_aux = self.split_aux(z_aux)

        w = self.fusion_weights()
        shared = fuse_shared((shared_noisy, shared_lowres, shared_aux), w)
        reps = Representations(
            shared_noisy=shared_noisy,
            indep_noisy=indep_noisy,
            shared_lowres=shared_lowres,
            indep_lowres=indep_lowres,
            shared_aux=shared_aux,
            indep_aux=indep_aux,
            shared_weighted=self.se_shared(shared),
            indep_noisy_weighted=self.se_noisy(indep_noisy),
            indep_lowres_weighted=self.se_lowres(indep_lowres),
            indep_aux_weighted=self.se_aux(indep_aux),
        )

        h = self.bottleneck_conv(
            torch.cat(
                [
                    reps.indep_noisy_weighted,
                    reps.indep_lowres_weighted,
                    reps.indep_aux_weighted,
                    reps.shared_weighted,
                ],
                dim=1,
            )
        )
        out = self.decoder(h, skips, temb)
        if self.config.learn_variance:
            eps_pred, v_raw = out[:, :1], out[:, 1:]
            return ModelOutput(eps_pred=eps_pred, v_pred=torch.sigmoid(v_raw), reps=reps)
        return ModelOutput(eps_pred=out, v_pred=None, reps=reps)
