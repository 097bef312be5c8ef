"""Waveform-to-waveform target-speaker separator.

A U-Net audio encoder/decoder around a transformer bottleneck that attends
jointly over audio frames and enrolment tokens. Each enrolment vector is
projected to the model width and summed with a shared role embedding (one
for positives, one for negatives) inside a single attention mechanism;
conditioning tokens carry no positional encoding, so the output is invariant
to ordering within each role. Only the audio-frame positions of the
bottleneck output are decoded; conditioning-token outputs are discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .audio_core import Waveform
from .errors import InvalidArgumentError
from .nn_blocks import (
    AudioDecoder,
    AudioEncoder,
    EmbeddingVector,
    ModelConfig,
    TransformerEncoder,
    sinusoidal_positions,
)


@dataclass(frozen=True)
class ConditioningSet:
    """Positive and negative enrolment vectors steering the separation."""

    positives: tuple[EmbeddingVector, ...]
    negatives: tuple[EmbeddingVector, ...] = ()

    def __post_init__(self):
        dims = {v.dim for v in self.positives} | {v.dim for v in self.negatives}
        if len(dims) > 1:
            raise InvalidArgumentError(f"mixed embedding dimensions in conditioning set: {dims}")


@dataclass(frozen=True)
class SeparationOutput:
    waveform: Waveform


def separation_loss(predicted, target):
    """Mean absolute sample difference (torch or numpy/Waveform)."""
    if isinstance(predicted, torch.Tensor) and isinstance(target, torch.Tensor):
        if predicted.shape != target.shape:
            raise InvalidArgumentError(
                f"length mismatch: {tuple(predicted.shape)} vs {tuple(target.shape)}"
            )
        return (predicted - target).abs().mean()
    p = predicted.samples if isinstance(predicted, Waveform) else np.asarray(predicted)
    t = target.samples if isinstance(target, Waveform) else np.asarray(target)
    if p.shape != t.shape:
        raise InvalidArgumentError(f"length mismatch: {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t)))


class Separator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = AudioEncoder(cfg)
        self.decoder = AudioDecoder(cfg)
        self.bottleneck = TransformerEncoder(cfg)
        self.cond_proj = nn.Linear(cfg.d_spk, cfg.d_model)
        self.role_embed = nn.Parameter(0.02 * torch.randn(2, cfg.d_model))  # 0=pos, 1=neg

    def forward(self, mix: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor,
                pos_valid: torch.Tensor | None = None,
                neg_valid: torch.Tensor | None = None,
                return_info: bool = False):
        """mix: (B, n); positives: (B, P, d_spk); negatives: (B, N, d_spk).

        pos_valid/neg_valid mark real conditioning vectors when lists are
        padded to a common count within the batch.
        """
        b, n = mix.shape
        if positives.shape[1] == 0:
            raise InvalidArgumentError("at least one positive enrolment vector is required")
        if positives.shape[2] != self.cfg.d_spk:
            raise InvalidArgumentError(
                f"conditioning dimension {positives.shape[2]} != d_spk {self.cfg.d_spk}"
            )
        latent, skips = self.encoder(mix)
        frames = latent.shape[1]
        dtype = latent.dtype
        audio_tokens = latent + sinusoidal_positions(frames, self.cfg.d_model, dtype).to(latent.device)

        pos_tokens = self.cond_proj(positives) + self.role_embed[0]
        tokens = [audio_tokens, pos_tokens]
        valid_parts = [
            torch.ones(b, frames, dtype=torch.bool, device=mix.device),
            pos_valid if pos_valid is not None
            else torch.ones(b, positives.shape[1], dtype=torch.bool, device=mix.device),
        ]
        if negatives.shape[1] > 0:
            if negatives.shape[2] != self.cfg.d_spk:
                raise InvalidArgumentError(
                    f"conditioning dimension {negatives.shape[2]} != d_spk {self.cfg.d_spk}"
                )
            tokens.append(self.cond_proj(negatives) + self.role_embed[1])
            valid_parts.append(
                neg_valid if neg_valid is not None
                else torch.ones(b, negatives.shape[1], dtype=torch.bool, device=mix.device)
            )
        stacked = torch.cat(tokens, dim=1)
        valid = torch.cat(valid_parts, dim=1)
        encoded = self.bottleneck(stacked, valid)
        out = self.decoder(encoded[:, :frames], skips, n)
        if return_info:
            return out, {"frames": frames, "n_tokens": stacked.shape[1]}
        return out


def separate(separator: Separator, a_m: Waveform, cond: ConditioningSet,
             return_info: bool = False):
    """Single-mixture inference wrapper over Separator.forward."""
    if len(cond.positives) < 1:
        raise InvalidArgumentError("at least one positive enrolment vector is required")
    for vec in (*cond.positives, *cond.negatives):
        if vec.dim != separator.cfg.d_spk:
            raise InvalidArgumentError(
                f"enrolment dimension {vec.dim} != model d_spk {separator.cfg.d_spk}"
            )
    if len(cond.positives) > separator.cfg.max_cond_vectors or \
            len(cond.negatives) > separator.cfg.max_cond_vectors:
        raise InvalidArgumentError(
            f"conditioning lists exceed the configured maximum "
            f"{separator.cfg.max_cond_vectors}"
        )
    mix = torch.as_tensor(a_m.samples, dtype=torch.float32).unsqueeze(0)
    pos = torch.as_tensor(
        np.stack([v.values for v in cond.positives]), dtype=torch.float32
    ).unsqueeze(0)
    if cond.negatives:
        neg = torch.as_tensor(
            np.stack([v.values for v in cond.negatives]), dtype=torch.float32
        ).unsqueeze(0)
    else:
        neg = torch.zeros(1, 0, separator.cfg.d_spk)
    with torch.no_grad():
        if return_info:
            out, info = separator(mix, pos, neg, return_info=True)
        else:
            out = separator(mix, pos, neg)
    result = SeparationOutput(Waveform(out[0].double().numpy(), a_m.sample_rate))
    if return_info:
        return result, info
    return result
