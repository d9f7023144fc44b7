"""Encoder, decoder and consistency UNet operating on ``[B, 2, F, T]`` spectrograms.

Layout conventions: 2-D feature maps are ``[B, C, F, T]`` (frequency before
time), 1-D bottleneck features are ``[B, C, T]``.  Levels are indexed from 0
(full resolution) to ``len(channel_mults) - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .schedule import ScheduleConfig, consistency_scalings


@dataclass(frozen=True)
class ModelConfig:
    d_lat: int = 64
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 4, 4, 4)
    res_blocks_unet: int = 2
    res_blocks_enc_dec: int = 1
    attn_levels: tuple[int, ...] = (2, 3, 4)
    attn_heads: int = 4
    embed_channels: int = 256
    channels_1d: int = 512
    res_blocks_1d: int = 4
    freq_bins: int = 1024
    time_frames: int = 64
    # levels entered through a transition that also halves time
    time_downsample_levels: tuple[int, ...] = (2, 3, 4)
    freq_attention: bool = True
    freq_scaling: bool = True
    # also inject decoder features into the UNet's downsampling branch
    cross_down: bool = False
    # upper bound on group-norm groups; narrow models need several channels
    # per group or the per-channel noise bias is normalized away
    norm_groups: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        object.__setattr__(self, "attn_levels", tuple(self.attn_levels))
        object.__setattr__(self, "time_downsample_levels", tuple(self.time_downsample_levels))
        n = len(self.channel_mults)
        if n != 5:
            raise ValueError(f"channel_mults must have 5 entries, got {n}")
        if self.d_lat < 1:
            raise ValueError("d_lat must be >= 1")
        if any(not 0 < lvl < n for lvl in self.time_downsample_levels):
            raise ValueError("time_downsample_levels must index levels 1..4")
        if self.freq_bins % 2 ** (n - 1):
            raise ValueError(f"freq_bins must be divisible by {2 ** (n - 1)}")
        if self.time_frames % self.frames_per_latent:
            raise ValueError(f"time_frames must be divisible by {self.frames_per_latent}")
        for lvl in self.attn_levels:
            if not 0 <= lvl < n:
                raise ValueError(f"attention level {lvl} out of range")
            if self.freq_at(lvl) > 256:
                raise ValueError(f"attention at level {lvl} would span {self.freq_at(lvl)} > 256 bins")
        if self.norm_groups < 1:
            raise ValueError("norm_groups must be >= 1")
        for c in self.channels + (self.channels_1d,):
            if c % _groups(c, self.norm_groups):
                raise ValueError(f"channel count {c} incompatible with group norm")
        if self.freq_attention and any(self.channels[lvl] % self.attn_heads for lvl in self.attn_levels):
            raise ValueError("attention channels must be divisible by attn_heads")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def n_levels(self) -> int:
        return len(self.channel_mults)

    @property
    def frames_per_latent(self) -> int:
        return 2 ** len(self.time_downsample_levels)

    @property
    def latent_frames(self) -> int:
        return self.time_frames // self.frames_per_latent

    def freq_at(self, level: int) -> int:
        return self.freq_bins // 2**level

    def time_stride(self, level: int) -> int:
        """Time stride of the transition into ``level``."""
        return 2 if level in self.time_downsample_levels else 1

    def uses_attention(self, level: int) -> bool:
        return self.freq_attention and level in self.attn_levels


def _groups(channels: int, max_groups: int = 32) -> int:
    return min(max_groups, channels)


def group_norm(channels: int, max_groups: int = 32) -> nn.GroupNorm:
    return nn.GroupNorm(_groups(channels, max_groups), channels, eps=1e-6)


def sinusoidal_embedding(x: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    args = x[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def noise_embedding_input(sigma: torch.Tensor) -> torch.Tensor:
    if torch.any(sigma <= 0):
        raise ValueError("noise level must be positive")
    return torch.log(sigma) / 4.0


class NoiseEmbedding(nn.Module):
    """Sinusoidal embedding of log(sigma)/4 followed by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def sinusoid(self, sigma: torch.Tensor) -> torch.Tensor:
        return sinusoidal_embedding(noise_embedding_input(sigma), self.dim)

    def forward(self, sigma: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.sinusoid(sigma))


class FrequencyScaling(nn.Module):
    """Per-frequency-bin multipliers predicted from the noise level.

    The last layer starts at zero so the scale is exactly 1 at initialization.
    """

    def __init__(self, embed_dim: int, n_freq: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(embed_dim, embed_dim), nn.SiLU(), nn.Linear(embed_dim, n_freq))
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, sinusoid: torch.Tensor) -> torch.Tensor:
        return 1.0 + self.mlp(sinusoid)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int | None = None, dims: int = 2, groups: int = 32):
        super().__init__()
        conv = nn.Conv2d if dims == 2 else nn.Conv1d
        self.dims = dims
        self.norm1 = group_norm(cin, groups)
        self.conv1 = conv(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout) if emb_dim else None
        self.norm2 = group_norm(cout, groups)
        self.conv2 = conv(cout, cout, 3, padding=1)
        self.skip = conv(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            e = self.emb(F.silu(emb))
            h = h + e.reshape(e.shape + (1,) * self.dims)
        h = self.conv2(F.silu(self.norm2(h)))
        return (self.skip(x) + h) / math.sqrt(2.0)


def frequency_attention(q, k, v):
    """Scaled dot-product attention over frequency, independently per timestep.

    Args:
        q, k, v: ``[B, heads, d, F, T]``.

    Returns:
        ``(out, weights)`` with ``out`` shaped like ``v`` and ``weights`` of
        shape ``[B, T, heads, F, F]`` (rows sum to one).
    """
    d = q.shape[2]
    q, k, v = (t.permute(0, 4, 1, 3, 2) for t in (q, k, v))  # [B, T, heads, F, d]
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    out = (weights @ v).permute(0, 2, 4, 3, 1)
    return out, weights


class FreqAttention(nn.Module):
    """Residual multi-head self-attention across frequency bins.

    Normalization statistics are taken per timestep, so no information
    crosses the time axis.
    """

    def __init__(self, channels: int, heads: int, groups: int = 32):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm = group_norm(channels, groups)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def _qkv(self, x):
        b, c, f, t = x.shape
        h = x.permute(0, 3, 1, 2).reshape(b * t, c, f)
        h = self.norm(h).reshape(b, t, c, f).permute(0, 2, 3, 1)
        q, k, v = self.qkv(h).chunk(3, dim=1)
        shape = (b, self.heads, c // self.heads, f, t)
        return q.reshape(shape), k.reshape(shape), v.reshape(shape)

    def attention_weights(self, x):
        return frequency_attention(*self._qkv(x))[1]

    def forward(self, x):
        out, _ = frequency_attention(*self._qkv(x))
        return x + self.out(out.reshape(x.shape))


class Downsample(nn.Module):
    """Parameter-free 2x frequency (and optionally time) average pooling."""

    def __init__(self, channels: int, time_stride: int):
        super().__init__()
        self.kernel = (2, time_stride)

    def forward(self, x):
        return F.avg_pool2d(x, self.kernel)


class Upsample(nn.Module):
    """Nearest-neighbour upsampling; a 1x1 projection handles channel changes."""

    def __init__(self, cin: int, cout: int, time_stride: int):
        super().__init__()
        self.scale = (2, time_stride)
        self.proj = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        return self.proj(F.interpolate(x, scale_factor=self.scale, mode="nearest"))


class Stage(nn.Module):
    """Residual blocks at one resolution, each optionally followed by attention."""

    def __init__(self, cin, cout, n_blocks, emb_dim, attention, heads, groups=32):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.attns = nn.ModuleList()
        for i in range(n_blocks):
            self.blocks.append(ResBlock(cin if i == 0 else cout, cout, emb_dim, groups=groups))
            self.attns.append(FreqAttention(cout, heads, groups) if attention else nn.Identity())

    def forward(self, x, emb=None):
        for block, attn in zip(self.blocks, self.attns):
            x = attn(block(x, emb))
        return x


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.conv_in = nn.Conv2d(2, ch[0], 3, padding=1)
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        cin = ch[0]
        for lvl in range(cfg.n_levels):
            self.stages.append(Stage(cin, ch[lvl], cfg.res_blocks_enc_dec, None, cfg.uses_attention(lvl), cfg.attn_heads, cfg.norm_groups))
            cin = ch[lvl]
            if lvl < cfg.n_levels - 1:
                self.downs.append(Downsample(cin, cfg.time_stride(lvl + 1)))
        flat = ch[-1] * cfg.freq_at(cfg.n_levels - 1)
        self.proj_in = nn.Conv1d(flat, cfg.channels_1d, 1)
        self.blocks_1d = nn.ModuleList(ResBlock(cfg.channels_1d, cfg.channels_1d, dims=1, groups=cfg.norm_groups) for _ in range(cfg.res_blocks_1d))
        self.norm_out = group_norm(cfg.channels_1d, cfg.norm_groups)
        self.proj_out = nn.Conv1d(cfg.channels_1d, cfg.d_lat, 1)

    def forward(self, x):
        h = self.conv_in(x)
        for lvl, stage in enumerate(self.stages):
            h = stage(h)
            if lvl < len(self.downs):
                h = self.downs[lvl](h)
        b, c, f, t = h.shape
        h = self.proj_in(h.reshape(b, c * f, t))
        for block in self.blocks_1d:
            h = block(h)
        return torch.tanh(self.proj_out(F.silu(self.norm_out(h))))


class Decoder(nn.Module):
    """Mirror of the encoder; returns one feature map per level (index = level)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        top = cfg.n_levels - 1
        self.proj_in = nn.Conv1d(cfg.d_lat, cfg.channels_1d, 1)
        self.blocks_1d = nn.ModuleList(ResBlock(cfg.channels_1d, cfg.channels_1d, dims=1, groups=cfg.norm_groups) for _ in range(cfg.res_blocks_1d))
        self.norm_out = group_norm(cfg.channels_1d, cfg.norm_groups)
        self.proj_out = nn.Conv1d(cfg.channels_1d, ch[top] * cfg.freq_at(top), 1)
        self.stages = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        for lvl in range(top, -1, -1):
            self.stages[str(lvl)] = Stage(ch[lvl], ch[lvl], cfg.res_blocks_enc_dec, None, cfg.uses_attention(lvl), cfg.attn_heads, cfg.norm_groups)
            if lvl > 0:
                self.ups[str(lvl)] = Upsample(ch[lvl], ch[lvl - 1], cfg.time_stride(lvl))

    def forward(self, lat):
        cfg = self.cfg
        top = cfg.n_levels - 1
        h = self.proj_in(lat)
        for block in self.blocks_1d:
            h = block(h)
        h = self.proj_out(F.silu(self.norm_out(h)))
        b, _, t = h.shape
        h = h.reshape(b, cfg.channels[top], cfg.freq_at(top), t)
        feats = [None] * cfg.n_levels
        for lvl in range(top, -1, -1):
            h = self.stages[str(lvl)](h)
            feats[lvl] = h
            if lvl > 0:
                h = self.ups[str(lvl)](h)
        return feats


class UNet(nn.Module):
    """Noise-conditioned UNet with additive skips and additive decoder cross connections."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        emb = cfg.embed_channels
        top = cfg.n_levels - 1
        self.noise_emb = NoiseEmbedding(emb)
        if cfg.freq_scaling:
            self.scale_in = FrequencyScaling(emb, cfg.freq_bins)
            self.scale_out = FrequencyScaling(emb, cfg.freq_bins)
        self.conv_in = nn.Conv2d(2, ch[0], 3, padding=1)

        self.down_stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        cin = ch[0]
        for lvl in range(cfg.n_levels):
            self.down_stages.append(Stage(cin, ch[lvl], cfg.res_blocks_unet, emb, cfg.uses_attention(lvl), cfg.attn_heads, cfg.norm_groups))
            cin = ch[lvl]
            if lvl < top:
                self.downs.append(Downsample(cin, cfg.time_stride(lvl + 1)))

        self.mid1 = ResBlock(ch[top], ch[top], emb, groups=cfg.norm_groups)
        self.mid_attn = FreqAttention(ch[top], cfg.attn_heads, cfg.norm_groups) if cfg.uses_attention(top) else nn.Identity()
        self.mid2 = ResBlock(ch[top], ch[top], emb, groups=cfg.norm_groups)

        self.up_stages = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        self.cross = nn.ModuleDict()
        for lvl in range(top, -1, -1):
            if lvl < top:
                self.ups[str(lvl)] = Upsample(ch[lvl + 1], ch[lvl], cfg.time_stride(lvl + 1))
            self.cross[str(lvl)] = nn.Conv2d(ch[lvl], ch[lvl], 1)
            self.up_stages[str(lvl)] = Stage(ch[lvl], ch[lvl], cfg.res_blocks_unet, emb, cfg.uses_attention(lvl), cfg.attn_heads, cfg.norm_groups)
        if cfg.cross_down:
            self.cross_down = nn.ModuleList(nn.Conv2d(c, c, 1) for c in ch)

        self.norm_out = group_norm(ch[0], cfg.norm_groups)
        self.conv_out = nn.Conv2d(ch[0], 2, 3, padding=1)

    def frequency_scales(self, sigma: torch.Tensor):
        """Return ``(s_in, s_out)``, each ``[B, F]``; ones when scaling is disabled."""
        if not self.cfg.freq_scaling:
            ones = torch.ones(sigma.shape[0], self.cfg.freq_bins, dtype=sigma.dtype, device=sigma.device)
            return ones, ones
        s = self.noise_emb.sinusoid(sigma)
        return self.scale_in(s), self.scale_out(s)

    def forward(self, x, sigma, c_in, feats):
        cfg = self.cfg
        if feats is None or len(feats) != cfg.n_levels:
            raise TypeError(f"expected {cfg.n_levels} decoder feature maps")
        s_in, s_out = self.frequency_scales(sigma)
        emb = self.noise_emb(sigma)
        h = self.conv_in(x * s_in[:, None, :, None] * c_in.reshape(-1, 1, 1, 1))

        skips = []
        for lvl, stage in enumerate(self.down_stages):
            h = stage(h, emb)
            if cfg.cross_down:
                h = h + self.cross_down[lvl](feats[lvl])
            skips.append(h)
            if lvl < len(self.downs):
                h = self.downs[lvl](h)

        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)

        for lvl in range(cfg.n_levels - 1, -1, -1):
            if lvl < cfg.n_levels - 1:
                h = self.ups[str(lvl)](h)
            h = h + skips[lvl] + self.cross[str(lvl)](feats[lvl])
            h = self.up_stages[str(lvl)](h, emb)

        out = self.conv_out(F.silu(self.norm_out(h)))
        return out * s_out[:, None, :, None]


class ConsistencyAutoencoder(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), schedule: ScheduleConfig = ScheduleConfig()):
        super().__init__()
        self.cfg = cfg
        self.schedule = schedule
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.unet = UNet(cfg)

    def _check_spec(self, x):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != 2 or x.shape[2] != cfg.freq_bins or x.shape[3] % cfg.frames_per_latent:
            raise ValueError(
                f"expected spectrogram [B, 2, {cfg.freq_bins}, T] with T divisible by "
                f"{cfg.frames_per_latent}, got {tuple(x.shape)}"
            )

    def encode(self, x):
        """``[B, 2, F, T]`` compressed spectrogram -> ``[B, d_lat, T / frames_per_latent]`` in (-1, 1)."""
        self._check_spec(x)
        return self.encoder(x)

    def decode_features(self, lat):
        if lat.ndim != 3 or lat.shape[1] != self.cfg.d_lat or lat.shape[2] == 0:
            raise ValueError(f"expected latents [B, {self.cfg.d_lat}, L>0], got {tuple(lat.shape)}")
        return self.decoder(lat)

    def _sigma(self, sigma, x):
        sigma = torch.as_tensor(sigma, dtype=x.dtype, device=x.device)
        return sigma.reshape(-1).expand(x.shape[0]) if sigma.numel() == 1 else sigma.reshape(-1)

    def unet_forward(self, x_sigma, sigma, feats):
        self._check_spec(x_sigma)
        sigma = self._sigma(sigma, x_sigma)
        _, _, c_in = consistency_scalings(sigma, self.schedule)
        return self.unet(x_sigma, sigma, c_in, feats)

    def consistency_fn(self, x_sigma, sigma, feats):
        """``c_skip(sigma) * x_sigma + c_out(sigma) * F(x_sigma, sigma, feats)``."""
        self._check_spec(x_sigma)
        sigma = self._sigma(sigma, x_sigma)
        c_skip, c_out, c_in = consistency_scalings(sigma, self.schedule)
        out = self.unet(x_sigma, sigma, c_in, feats)
        return c_skip.reshape(-1, 1, 1, 1) * x_sigma + c_out.reshape(-1, 1, 1, 1) * out

    def forward(self, x_sigma, sigma, x_clean):
        return self.consistency_fn(x_sigma, sigma, self.decode_features(self.encode(x_clean)))


def count_parameters(cfg: ModelConfig) -> int:
    with torch.device("meta"):
        model = ConsistencyAutoencoder(cfg)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


TOY_MODEL = ModelConfig(
    d_lat=8,
    base_channels=16,
    channel_mults=(1, 2, 2, 2, 2),
    res_blocks_unet=1,
    res_blocks_enc_dec=1,
    attn_levels=(2, 3, 4),
    attn_heads=4,
    embed_channels=64,
    channels_1d=64,
    res_blocks_1d=4,
    freq_bins=64,
    time_frames=16,
    norm_groups=4,
)
