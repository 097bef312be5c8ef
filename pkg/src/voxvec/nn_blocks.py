"""Neural building blocks with exact shape contracts.

Conventions: batched tensors are (B, T, C) for sequences and (B, n) for
waveforms; validity masks are bool tensors (B, T) with True marking real
frames. All blocks are deterministic given their parameters and inputs, and
smooth (GELU/tanh/softmax only) so analytic gradients can be checked against
finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class FeatureSequence:
    """Time-major matrix of frame features."""

    data: np.ndarray
    frame_rate: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise InvalidArgumentError(f"feature sequence must be 2-D, got shape {data.shape}")
        if data.size and not np.all(np.isfinite(data)):
            raise InvalidArgumentError("feature sequence contains non-finite entries")
        if self.frame_rate <= 0:
            raise InvalidArgumentError(f"frame_rate must be positive, got {self.frame_rate}")
        object.__setattr__(self, "data", data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class EmbeddingVector:
    """Fixed-dimension speaker descriptor."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise InvalidArgumentError(f"embedding must be 1-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("embedding contains non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyperparameters shared by all networks."""

    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 8
    d_spk: int = 32
    d_v: int = 16
    d_f: int = 32
    audio_downsample_factor: int = 256
    ffn_mult: int = 2
    max_cond_vectors: int = 8
    sample_rate: int = 16000
    visual_fps: int = 25
    scale: str = "toy"

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_spk", "d_v", "d_f",
                     "audio_downsample_factor", "ffn_mult", "max_cond_vectors"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise InvalidArgumentError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        _downsample_strides(self.audio_downsample_factor)  # validates

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        params = dict(d_model=768, n_layers=3, n_heads=8, d_spk=192, d_v=512, d_f=128,
                      audio_downsample_factor=256, scale="paper")
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _downsample_strides(factor: int) -> list[int]:
    strides = []
    rest = factor
    while rest % 4 == 0:
        strides.append(4)
        rest //= 4
    while rest % 2 == 0:
        strides.append(2)
        rest //= 2
    if rest != 1:
        raise InvalidArgumentError(
            f"audio_downsample_factor must factor into 2s and 4s, got {factor}"
        )
    return strides


def sinusoidal_positions(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sine/cosine position table, shaped (n, d)."""
    position = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: (d - d // 2)])
    return table.to(dtype)


def _zero_bias(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d, nn.Linear)) and m.bias is not None:
            nn.init.zeros_(m.bias)


class AudioEncoder(nn.Module):
    """Strided 1-D CNN over raw waveforms.

    Output has ceil(n / audio_downsample_factor) frames of d_model channels.
    Also returns per-stage features for U-Net skip connections.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        strides = _downsample_strides(cfg.audio_downsample_factor)
        n_stages = len(strides)
        channels = [max(8, cfg.d_model >> (n_stages - 1 - i)) for i in range(n_stages)]
        channels = [min(c, cfg.d_model) for c in channels]
        self.strides = strides
        self.channels = channels
        self.stem = nn.Conv1d(1, channels[0], kernel_size=7, padding=3)
        self.stages = nn.ModuleList()
        in_ch = channels[0]
        for stride, out_ch in zip(strides, channels):
            self.stages.append(
                nn.Conv1d(in_ch, out_ch, kernel_size=2 * stride, stride=stride, padding=stride // 2)
            )
            in_ch = out_ch
        self.norms = nn.ModuleList(nn.GroupNorm(1, c) for c in channels)
        self.head = nn.Conv1d(in_ch, cfg.d_model, kernel_size=1)
        _zero_bias(self)

    @property
    def factor(self) -> int:
        return self.cfg.audio_downsample_factor

    def forward(self, wav: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        # wav: (B, n) -> latent (B, F, d_model), skips outermost-first
        if wav.ndim != 2 or wav.shape[1] == 0:
            raise InvalidArgumentError(f"expected non-empty (B, n) waveform batch, got {tuple(wav.shape)}")
        n = wav.shape[1]
        pad = (-n) % self.factor
        if pad:
            wav = torch.nn.functional.pad(wav, (0, pad))
        x = torch.nn.functional.gelu(self.stem(wav.unsqueeze(1)))
        skips = []
        for stage, norm in zip(self.stages, self.norms):
            skips.append(x)
            x = norm(torch.nn.functional.gelu(stage(x)))
        latent = self.head(x).transpose(1, 2)
        return latent, skips


class AudioDecoder(nn.Module):
    """Mirrored transposed-conv stack; skip features are added stage by stage."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        strides = _downsample_strides(cfg.audio_downsample_factor)
        n_stages = len(strides)
        channels = [max(8, cfg.d_model >> (n_stages - 1 - i)) for i in range(n_stages)]
        channels = [min(c, cfg.d_model) for c in channels]
        self.strides = strides
        self.channels = channels
        self.head = nn.Conv1d(cfg.d_model, channels[-1], kernel_size=1)
        self.stages = nn.ModuleList()
        in_chs = channels[::-1]                    # deepest first
        out_chs = channels[-2::-1] + [channels[0]]
        for stride, in_ch, out_ch in zip(strides[::-1], in_chs, out_chs):
            self.stages.append(
                nn.ConvTranspose1d(in_ch, out_ch, kernel_size=2 * stride, stride=stride,
                                   padding=stride // 2)
            )
        self.norms = nn.ModuleList(nn.GroupNorm(1, c) for c in out_chs)
        self.out = nn.Conv1d(channels[0], 1, kernel_size=7, padding=3)
        _zero_bias(self)

    def forward(self, latent: torch.Tensor, skips: list[torch.Tensor], n_samples: int) -> torch.Tensor:
        # latent: (B, F, d_model); skips as produced by AudioEncoder.
        if len(skips) != len(self.stages):
            raise InvalidArgumentError(
                f"expected {len(self.stages)} skip tensors, got {len(skips)}"
            )
        x = self.head(latent.transpose(1, 2))
        for i, (stage, norm) in enumerate(zip(self.stages, self.norms)):
            x = stage(x)
            skip = skips[len(skips) - 1 - i]
            if skip.shape != x.shape:
                raise InvalidArgumentError(
                    f"skip shape mismatch at stage {i}: skip {tuple(skip.shape)} vs "
                    f"decoder {tuple(x.shape)}"
                )
            x = norm(torch.nn.functional.gelu(x + skip))
        wav = self.out(x).squeeze(1)
        if wav.shape[1] < n_samples:
            raise InvalidArgumentError(
                f"decoder produced {wav.shape[1]} samples, fewer than requested {n_samples}"
            )
        return wav[:, :n_samples]


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None,
                return_attention: bool = False):
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (b, t, self.n_heads, self.d_head)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.d_head)
        if valid is not None:
            bad = ~valid[:, None, None, :]                      # mask keys
            scores = scores.masked_fill(bad, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        out = self.proj(out)
        if return_attention:
            return out, attn
        return out


class TransformerEncoder(nn.Module):
    """Pre-LN transformer; masked frames neither attend nor are attended to."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.attn_layers = nn.ModuleList(
            MultiHeadSelfAttention(cfg.d_model, cfg.n_heads) for _ in range(cfg.n_layers)
        )
        self.attn_norms = nn.ModuleList(nn.LayerNorm(cfg.d_model) for _ in range(cfg.n_layers))
        self.ffn_norms = nn.ModuleList(nn.LayerNorm(cfg.d_model) for _ in range(cfg.n_layers))
        self.ffns = nn.ModuleList(
            nn.Sequential(
                nn.Linear(cfg.d_model, cfg.ffn_mult * cfg.d_model),
                nn.GELU(),
                nn.Linear(cfg.ffn_mult * cfg.d_model, cfg.d_model),
            )
            for _ in range(cfg.n_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.d_model)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None,
                return_attention: bool = False):
        if x.ndim != 3 or x.shape[2] != self.cfg.d_model:
            raise InvalidArgumentError(
                f"expected (B, T, {self.cfg.d_model}) input, got {tuple(x.shape)}"
            )
        if valid is not None and valid.shape != x.shape[:2]:
            raise InvalidArgumentError("mask shape must be (B, T)")
        maps = []
        for attn, ln_a, ffn, ln_f in zip(self.attn_layers, self.attn_norms,
                                         self.ffns, self.ffn_norms):
            if return_attention:
                delta, amap = attn(ln_a(x), valid, return_attention=True)
                maps.append(amap)
            else:
                delta = attn(ln_a(x), valid)
            x = x + delta
            x = x + ffn(ln_f(x))
        x = self.final_norm(x)
        if valid is not None:
            x = x * valid.unsqueeze(-1).to(x.dtype)
        if return_attention:
            return x, maps
        return x


class _ResidualDilatedBlock(nn.Module):
    """x + conv branch; the branch's last conv is zero-initialised so the
    block starts as identity (keeps pooling order-insensitive at init).

    The norm is per-position over channels and padded positions are re-zeroed
    around every conv, so extra padding never leaks into valid frames.
    """

    def __init__(self, channels: int, dilation: int):
        super().__init__()
        pad = dilation
        self.conv1 = nn.Conv1d(channels, channels, kernel_size=3, padding=pad, dilation=dilation)
        self.norm = nn.LayerNorm(channels)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size=3, padding=pad, dilation=dilation)
        nn.init.zeros_(self.conv2.weight)
        _zero_bias(self)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # x: (B, C, T); mask: (B, 1, T) with zeros at padded positions.
        h = torch.nn.functional.gelu(self.conv1(x)) * mask
        h = self.norm(h.transpose(1, 2)).transpose(1, 2) * mask
        return (x + self.conv2(h)) * mask


class SpeakerExtractor(nn.Module):
    """Dilated residual convs + channel-attentive statistics pooling.

    Pooling concatenates the attention-weighted mean and standard deviation
    over frames; the attention score head is zero-initialised (uniform
    weights at init).
    """

    def __init__(self, cfg: ModelConfig, dilations: tuple[int, ...] = (1, 2, 3)):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(_ResidualDilatedBlock(cfg.d_model, d) for d in dilations)
        att_dim = max(16, cfg.d_model // 2)
        self.att_hidden = nn.Linear(cfg.d_model, att_dim)
        self.att_score = nn.Linear(att_dim, cfg.d_model)
        nn.init.zeros_(self.att_score.weight)
        nn.init.zeros_(self.att_score.bias)
        self.proj = nn.Linear(2 * cfg.d_model, cfg.d_spk)

    def pooled_stats(self, x: torch.Tensor, valid: torch.Tensor | None = None):
        """Attention-weighted (mean, std) over frames, each (B, d_model)."""
        if x.ndim != 3 or x.shape[2] != self.cfg.d_model:
            raise InvalidArgumentError(
                f"expected (B, T, {self.cfg.d_model}) input, got {tuple(x.shape)}"
            )
        if valid is None:
            valid = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
        n_valid = valid.sum(dim=1)
        if int(n_valid.min()) < 2:
            raise InvalidArgumentError("speaker extraction needs at least 2 valid frames")
        mask = valid.unsqueeze(-1).to(x.dtype)
        conv_mask = mask.transpose(1, 2)                         # (B, 1, T)
        h = (x * mask).transpose(1, 2)
        for block in self.blocks:
            h = block(h, conv_mask)
        h = h.transpose(1, 2)                                    # (B, T, C)
        scores = self.att_score(torch.tanh(self.att_hidden(h)))
        scores = scores.masked_fill(~valid.unsqueeze(-1), float("-inf"))
        alpha = torch.softmax(scores, dim=1)                     # per-channel over time
        mean = (alpha * h).sum(dim=1)
        var = (alpha * (h - mean.unsqueeze(1)) ** 2).sum(dim=1)
        std = torch.sqrt(torch.clamp(var, min=1e-10))
        return mean, std

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        # x: (B, T, d_model) -> (B, d_spk)
        mean, std = self.pooled_stats(x, valid)
        return self.proj(torch.cat([mean, std], dim=-1))


class ModalityProjector(nn.Module):
    """Per-modality linear map onto the shared channel width."""

    def __init__(self, in_dim: int, d_model: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, T, in_dim) or (B, in_dim); vectors become 1-frame sequences.
        if x.ndim == 2:
            x = x.unsqueeze(1)
        return self.linear(x)
