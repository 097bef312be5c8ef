"""Enrolment-vector networks.

The teacher consumes clean audio as log-magnitude spectrogram frames and
produces a speaker embedding. The student accepts any declared combination
of noisy/clean audio, visual feature tracks, and a static face feature;
present modalities are encoded, projected to the shared width, concatenated
along the frame axis (audio, visual, face), run through the transformer,
and pooled by the speaker extractor. Teacher and student embeddings share
one dimension so the student can be trained by L1 distillation against
teacher targets from a different recording of the same speaker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ._seeding import rng_for, stable_seed
from .audio_core import StftConfig, Waveform, log_magnitude, mix_at_snr, stft
from .dataset_forge import EnrolmentEntry, ProceduralNoise
from .errors import InvalidArgumentError, StageError
from .nn_blocks import (
    AudioEncoder,
    EmbeddingVector,
    FeatureSequence,
    ModalityProjector,
    ModelConfig,
    SpeakerExtractor,
    TransformerEncoder,
    sinusoidal_positions,
)

# Which fields each modality plan requires: (audio, visual, face).
PLAN_FIELDS = {
    "clean_audio": (True, False, False),
    "clean_audio+visual": (True, True, False),
    "noisy_audio_only": (True, False, False),
    "noisy_audio+visual": (True, True, False),
    "visual_only": (False, True, False),
    "visual+face": (False, True, True),
    "face_only": (False, False, True),
}

_NOISY_PLANS = {"noisy_audio_only", "noisy_audio+visual"}
_ENROL_NOISE_SNR_RANGE = (0.0, 10.0)


@dataclass(frozen=True)
class EnrolmentInput:
    """One enrolment observation; present fields must match the declared tag."""

    modality_tag: str
    audio: Waveform | None = None
    visual: FeatureSequence | None = None
    face: EmbeddingVector | None = None

    def __post_init__(self):
        if self.modality_tag not in PLAN_FIELDS:
            raise InvalidArgumentError(f"unknown modality tag {self.modality_tag!r}")
        need_audio, need_visual, need_face = PLAN_FIELDS[self.modality_tag]
        have = (self.audio is not None, self.visual is not None, self.face is not None)
        if not any(have):
            raise InvalidArgumentError("enrolment input needs at least one modality")
        if have != (need_audio, need_visual, need_face):
            raise InvalidArgumentError(
                f"fields {have} inconsistent with tag {self.modality_tag!r}"
            )


@dataclass(frozen=True)
class EnrolmentVector:
    embedding: EmbeddingVector
    role: str  # "positive" | "negative"; assigned by the consumer
    source_modality: str

    def __post_init__(self):
        if self.role not in ("positive", "negative"):
            raise InvalidArgumentError(f"role must be positive|negative, got {self.role!r}")


def enrolment_loss(predicted, target):
    """Mean absolute difference between two embeddings (torch or numpy)."""
    if isinstance(predicted, torch.Tensor) and isinstance(target, torch.Tensor):
        if predicted.shape != target.shape:
            raise InvalidArgumentError(
                f"dimension mismatch: {tuple(predicted.shape)} vs {tuple(target.shape)}"
            )
        return (predicted - target).abs().mean()
    p = predicted.values if isinstance(predicted, EmbeddingVector) else np.asarray(predicted)
    t = target.values if isinstance(target, EmbeddingVector) else np.asarray(target)
    if p.shape != t.shape:
        raise InvalidArgumentError(f"dimension mismatch: {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t)))


class TeacherNet(nn.Module):
    """Clean-audio enrolment: log-magnitude STFT frames projected to the model
    width, then the speaker extractor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stft_config = StftConfig(fft_size=512, hop=256)
        self.input_proj = nn.Linear(self.stft_config.freq_bins, cfg.d_model)
        self.extractor = SpeakerExtractor(cfg)

    def frames_from_waveform(self, w: Waveform) -> torch.Tensor:
        feats = log_magnitude(stft(w, self.stft_config))
        return torch.from_numpy(feats).to(torch.float32)

    def forward(self, frames: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        # frames: (B, T, freq_bins) -> (B, d_spk)
        return self.extractor(self.input_proj(frames), valid)

    @torch.no_grad()
    def embed(self, w: Waveform) -> EmbeddingVector:
        if w.duration_s < 1.0:
            raise InvalidArgumentError(
                f"teacher needs at least 1 s of clean audio, got {w.duration_s:.3f} s"
            )
        frames = self.frames_from_waveform(w).unsqueeze(0)
        return EmbeddingVector(self(frames)[0].double().numpy())


def teacher_embed(teacher: TeacherNet, clean_audio: Waveform) -> EmbeddingVector:
    return teacher.embed(clean_audio)


class StudentNet(nn.Module):
    """Multi-modal enrolment network trained by distillation.

    Segments are concatenated in a fixed order (audio frames, visual frames,
    face frame). Time-varying segments get sinusoidal positions; every
    segment gets a learned modality-type embedding; the face frame carries
    its modality embedding only.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.audio_encoder = AudioEncoder(cfg)
        self.visual_proj = ModalityProjector(cfg.d_v, cfg.d_model)
        self.face_proj = ModalityProjector(cfg.d_f, cfg.d_model)
        self.modality_embed = nn.Parameter(0.02 * torch.randn(3, cfg.d_model))
        self.transformer = TransformerEncoder(cfg)
        self.extractor = SpeakerExtractor(cfg)

    def init_from_teacher(self, teacher: TeacherNet) -> None:
        self.extractor.load_state_dict(teacher.extractor.state_dict())

    def assemble(self, inputs: list[EnrolmentInput]):
        """Build the padded token batch: returns (tokens, valid, lengths)."""
        if not inputs:
            raise InvalidArgumentError("empty enrolment batch")
        device = self.modality_embed.device
        dtype = self.modality_embed.dtype

        # Encode audio grouped by equal length: the encoder's norms take
        # whole-sequence statistics, so only equal-length batching matches
        # the single-example result exactly.
        audio_frames: dict[int, torch.Tensor] = {}
        by_length: dict[int, list[int]] = {}
        for i, x in enumerate(inputs):
            if x.audio is not None:
                by_length.setdefault(len(x.audio), []).append(i)
        for length, idxs in by_length.items():
            wavs = torch.stack(
                [torch.as_tensor(inputs[i].audio.samples, dtype=dtype, device=device)
                 for i in idxs]
            )
            latent, _ = self.audio_encoder(wavs)
            for row, i in enumerate(idxs):
                audio_frames[i] = latent[row]

        sequences = []
        for i, item in enumerate(inputs):
            parts = []
            if item.audio is not None:
                seg = audio_frames[i]
                seg = seg + sinusoidal_positions(seg.shape[0], self.cfg.d_model, dtype).to(device)
                parts.append(seg + self.modality_embed[0])
            if item.visual is not None:
                vis = torch.as_tensor(item.visual.data, dtype=dtype, device=device)
                seg = self.visual_proj(vis.unsqueeze(0))[0]
                seg = seg + sinusoidal_positions(seg.shape[0], self.cfg.d_model, dtype).to(device)
                parts.append(seg + self.modality_embed[1])
            if item.face is not None:
                fac = torch.as_tensor(item.face.values, dtype=dtype, device=device)
                seg = self.face_proj(fac.unsqueeze(0))[0]
                parts.append(seg + self.modality_embed[2])
            seq = torch.cat(parts, dim=0)
            if seq.shape[0] == 1:
                # Face-only input: pooled statistics need two frames, so the
                # single face token is duplicated (its std is exactly zero).
                seq = seq.repeat(2, 1)
            sequences.append(seq)

        lengths = [s.shape[0] for s in sequences]
        max_tokens = max(lengths)
        tokens = torch.zeros(len(inputs), max_tokens, self.cfg.d_model, dtype=dtype, device=device)
        valid = torch.zeros(len(inputs), max_tokens, dtype=torch.bool, device=device)
        for i, seq in enumerate(sequences):
            tokens[i, : seq.shape[0]] = seq
            valid[i, : seq.shape[0]] = True
        return tokens, valid, lengths

    def forward(self, inputs: list[EnrolmentInput]) -> torch.Tensor:
        tokens, valid, _ = self.assemble(inputs)
        encoded = self.transformer(tokens, valid)
        return self.extractor(encoded, valid)

    @torch.no_grad()
    def embed(self, x: EnrolmentInput) -> EmbeddingVector:
        return EmbeddingVector(self([x])[0].double().numpy())


def student_embed(student: StudentNet, x: EnrolmentInput) -> EmbeddingVector:
    return student.embed(x)


def noise_enrolment_audio(wav: Waveform, seed: int,
                          noise_source: ProceduralNoise | None = None) -> Waveform:
    """Deterministic synthetic noising of a student enrolment recording."""
    noise_source = noise_source or ProceduralNoise()
    rng = rng_for("enrol-noise", seed)
    kind = "pink" if rng.random() < 0.5 else "bursts"
    track = noise_source.track(f"{kind}/{int(rng.integers(0, 10000)):04d}")
    start = int(rng.integers(0, max(1, len(track) - len(wav) + 1)))
    noise = Waveform(track.samples[start : start + len(wav)], wav.sample_rate)
    snr_db = float(rng.uniform(*_ENROL_NOISE_SNR_RANGE))
    return mix_at_snr(wav, noise, snr_db).mixture


def make_enrolment_input(corpus, entry: EnrolmentEntry, plan: str | None = None,
                         noise_salt: int = 0,
                         noise_source: ProceduralNoise | None = None) -> EnrolmentInput:
    """Resolve a manifest enrolment entry into concrete network inputs."""
    plan = plan or entry.modality_plan
    if plan not in PLAN_FIELDS:
        raise InvalidArgumentError(f"unknown modality plan {plan!r}")
    need_audio, need_visual, need_face = PLAN_FIELDS[plan]
    utt = corpus.utterance(entry.speaker_id, entry.recording_id)
    audio = None
    if need_audio:
        audio = utt.audio
        if plan in _NOISY_PLANS:
            seed = stable_seed("enrol", entry.speaker_id, entry.recording_id, noise_salt)
            audio = noise_enrolment_audio(audio, seed, noise_source)
    visual = utt.visual if need_visual else None
    face = corpus.face(entry.speaker_id) if need_face else None
    return EnrolmentInput(modality_tag=plan, audio=audio, visual=visual, face=face)


class EnrolmentEmbedder:
    """Uniform entry -> embedding interface over a teacher or student network."""

    def __init__(self, net, kind: str):
        if kind not in ("teacher", "student"):
            raise InvalidArgumentError(f"kind must be teacher|student, got {kind!r}")
        self.net = net
        self.kind = kind

    def __call__(self, corpus, entry: EnrolmentEntry, plan_override: str | None = None) -> np.ndarray:
        plan = plan_override or entry.modality_plan
        if self.kind == "teacher":
            if plan != "clean_audio":
                raise StageError(
                    f"teacher checkpoints only embed clean_audio enrolments, got {plan!r}"
                )
            utt = corpus.utterance(entry.speaker_id, entry.recording_id)
            return self.net.embed(utt.audio).values
        x = make_enrolment_input(corpus, entry, plan)
        return self.net.embed(x).values
