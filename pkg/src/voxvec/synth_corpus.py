"""Procedural multi-speaker corpus.

Each speaker is a seeded bundle of voice-source parameters (fundamental,
formants, vibrato, timbre). Utterances are harmonic stacks shaped by the
speaker's formant envelope and modulated by a random syllabic envelope;
the synchronised visual track carries that envelope, its derivative, and
constant speaker-signature channels. Everything regenerates bit-identically
from (speaker, duration, seed).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._seeding import rng_for, stable_seed
from .audio_core import Waveform, read_wav, write_wav
from .errors import InvalidArgumentError, ManifestError, NotFoundError
from .nn_blocks import EmbeddingVector, FeatureSequence

SAMPLE_RATE = 16000
VISUAL_FPS = 25

_F0_RANGE = (90.0, 300.0)
_FORMANT_BASES = ((450.0, 900.0), (1200.0, 2200.0), (2400.0, 3400.0))
_VVFT_MAGIC = b"VVFT"


@dataclass(frozen=True)
class ProceduralSpeaker:
    speaker_id: str
    f0: float
    formants: tuple[tuple[float, float], ...]  # (center_hz, bandwidth_hz) x3
    vibrato_rate: float
    vibrato_depth: float  # cents
    timbre_seed: int

    def __post_init__(self):
        if self.f0 <= 0:
            raise InvalidArgumentError("f0 must be positive")
        centers = [c for c, _ in self.formants]
        if sorted(centers) != centers or len(set(centers)) != len(centers):
            raise InvalidArgumentError("formant centers must be strictly increasing")


@dataclass(frozen=True)
class Utterance:
    speaker_id: str
    recording_id: str
    audio: Waveform
    visual: FeatureSequence
    duration_s: float


def _min_f0_gap(n: int) -> float:
    span = _F0_RANGE[1] - _F0_RANGE[0]
    return min(8.0, 0.6 * span / max(n, 1))


def make_speakers(n: int, seed: int) -> list[ProceduralSpeaker]:
    """Draw n speakers, rejection-sampling fundamentals so voices stay separable."""
    if n < 1:
        raise InvalidArgumentError(f"need at least one speaker, got {n}")
    rng = rng_for("speakers", seed)
    gap = _min_f0_gap(n)
    f0s: list[float] = []
    speakers: list[ProceduralSpeaker] = []
    attempts = 0
    while len(speakers) < n:
        attempts += 1
        if attempts > 20000:
            raise InvalidArgumentError(f"could not place {n} speakers with f0 gap {gap:.2f} Hz")
        f0 = float(rng.uniform(*_F0_RANGE))
        if any(abs(f0 - other) < gap for other in f0s):
            continue
        formants = []
        prev = 0.0
        for lo, hi in _FORMANT_BASES:
            center = float(rng.uniform(max(lo, prev + 150.0), hi))
            bandwidth = float(rng.uniform(60.0, 140.0))
            formants.append((center, bandwidth))
            prev = center
        speakers.append(
            ProceduralSpeaker(
                speaker_id=f"spk{len(speakers):03d}",
                f0=f0,
                formants=tuple(formants),
                # Depth stays small so the FFT peak remains on the carrier
                # harmonic (modulation index < 1) rather than a vibrato sideband.
                vibrato_rate=float(rng.uniform(4.0, 7.0)),
                vibrato_depth=float(rng.uniform(3.0, 8.0)),
                timbre_seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
        f0s.append(f0)
    return speakers


def _formant_envelope(freqs: np.ndarray, speaker: ProceduralSpeaker) -> np.ndarray:
    env = np.full_like(freqs, 0.03)
    for center, bandwidth in speaker.formants:
        env = env + bandwidth**2 / ((freqs - center) ** 2 + bandwidth**2)
    return env


def _syllabic_envelope(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random 3-6 Hz syllable pulses over a sustained voicing floor.

    The floor keeps phonation going between stressed syllables, so no frame
    of a normal utterance is truly silent.
    """
    rate = float(rng.uniform(3.0, 6.0))
    duration = n / SAMPLE_RATE
    t = np.arange(n) / SAMPLE_RATE
    env = np.zeros(n)
    n_syllables = max(1, int(np.ceil(duration * rate)))
    for j in range(n_syllables):
        onset = (j + float(rng.uniform(0.05, 0.3))) / rate
        width = float(rng.uniform(0.5, 0.9)) / rate
        amp = float(rng.uniform(0.4, 1.0))
        phase = (t - onset) / width
        pulse = np.where((phase >= 0) & (phase <= 1), 0.5 - 0.5 * np.cos(2 * np.pi * phase), 0.0)
        env += amp * pulse
    return 0.15 + 0.85 * np.clip(env, 0.0, 1.5) / 1.5


def generate_utterance(speaker: ProceduralSpeaker, duration_s: float, seed: int,
                       d_v: int = 16) -> Utterance:
    """Render one utterance plus its synchronised 25 fps visual-feature track."""
    if not (1.0 <= duration_s <= 30.0):
        raise InvalidArgumentError(f"duration {duration_s}s outside [1, 30]")
    if d_v < 2:
        raise InvalidArgumentError("visual feature dimension must be >= 2")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = rng_for("utterance", speaker.speaker_id, seed)
    timbre_rng = rng_for("timbre", speaker.timbre_seed)

    t = np.arange(n) / SAMPLE_RATE
    vib = 2.0 ** (
        (speaker.vibrato_depth / 1200.0)
        * np.sin(2 * np.pi * speaker.vibrato_rate * t + rng.uniform(0, 2 * np.pi))
    )
    inst_freq = speaker.f0 * vib
    phase = 2 * np.pi * np.cumsum(inst_freq) / SAMPLE_RATE

    n_harmonics = int(min(30, np.floor(7000.0 / speaker.f0)))
    k = np.arange(1, n_harmonics + 1)
    amps = _formant_envelope(k * speaker.f0, speaker) / k
    harmonic_phases = timbre_rng.uniform(0, 2 * np.pi, size=n_harmonics)

    voiced = np.zeros(n)
    for kk, amp, ph in zip(k, amps, harmonic_phases):
        voiced += amp * np.cos(kk * phase + ph)

    env = _syllabic_envelope(n, rng)
    breath = 0.01 * rng.standard_normal(n)
    audio = (voiced + breath) * env
    rms = np.sqrt(np.mean(audio**2))
    if rms > 0:
        audio = audio * (0.1 / rms)

    frames = int(round(VISUAL_FPS * duration_s))
    centers = np.minimum(((np.arange(frames) + 0.5) / VISUAL_FPS * SAMPLE_RATE).astype(np.int64), n - 1)
    env_frames = env[centers]
    denv = np.gradient(env_frames) if frames > 1 else np.zeros(frames)
    n_signature = min(8, d_v - 2)
    signature = timbre_rng.uniform(-1.0, 1.0, size=n_signature)
    visual = np.zeros((frames, d_v))
    visual[:, 0] = env_frames
    visual[:, 1] = denv
    visual[:, 2 : 2 + n_signature] = signature[None, :]
    n_noise = d_v - 2 - n_signature
    if n_noise > 0:
        visual[:, 2 + n_signature :] = 0.05 * rng.standard_normal((frames, n_noise))

    return Utterance(
        speaker_id=speaker.speaker_id,
        recording_id="",
        audio=Waveform(audio, SAMPLE_RATE),
        visual=FeatureSequence(visual, VISUAL_FPS),
        duration_s=duration_s,
    )


def face_feature(speaker: ProceduralSpeaker, d_f: int = 32) -> EmbeddingVector:
    """Deterministic per-speaker face descriptor (stand-in for an image encoder)."""
    rng = rng_for("face", speaker.timbre_seed)
    vec = rng.standard_normal(d_f)
    return EmbeddingVector(vec / np.linalg.norm(vec))


class ProceduralCorpus:
    """Lazy, seeded corpus: recordings regenerate on demand and are cached."""

    def __init__(self, n_speakers: int, utterances_per_speaker: int, seed: int,
                 duration_s: float = 4.0, d_v: int = 16, d_f: int = 32):
        if utterances_per_speaker < 1:
            raise InvalidArgumentError("need at least one utterance per speaker")
        self.seed = seed
        self.duration_s = duration_s
        self.d_v = d_v
        self.d_f = d_f
        self.sample_rate = SAMPLE_RATE
        self.fps = VISUAL_FPS
        self._speakers = {s.speaker_id: s for s in make_speakers(n_speakers, seed)}
        self._recording_ids = [f"u{j:03d}" for j in range(utterances_per_speaker)]
        self._cache: dict[tuple[str, str], Utterance] = {}

    @property
    def speaker_ids(self) -> list[str]:
        return list(self._speakers)

    def speaker(self, speaker_id: str) -> ProceduralSpeaker:
        if speaker_id not in self._speakers:
            raise NotFoundError(f"unknown speaker {speaker_id!r}")
        return self._speakers[speaker_id]

    def recording_ids(self, speaker_id: str) -> list[str]:
        self.speaker(speaker_id)
        return list(self._recording_ids)

    def utterance(self, speaker_id: str, recording_id: str) -> Utterance:
        key = (speaker_id, recording_id)
        if key in self._cache:
            return self._cache[key]
        speaker = self.speaker(speaker_id)
        if recording_id not in self._recording_ids:
            raise NotFoundError(f"unknown recording {recording_id!r} for {speaker_id}")
        utt = generate_utterance(
            speaker,
            self.duration_s,
            stable_seed(self.seed, speaker_id, recording_id),
            d_v=self.d_v,
        )
        utt = Utterance(speaker_id, recording_id, utt.audio, utt.visual, utt.duration_s)
        if len(self._cache) > 512:
            self._cache.clear()
        self._cache[key] = utt
        return utt

    def face(self, speaker_id: str) -> EmbeddingVector:
        return face_feature(self.speaker(speaker_id), d_f=self.d_f)


def write_vvft(path, data: np.ndarray) -> None:
    """Binary little-endian float32 matrix with a VVFT header."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise InvalidArgumentError(f"VVFT payload must be 2-D, got shape {data.shape}")
    with open(path, "wb") as fh:
        fh.write(_VVFT_MAGIC)
        fh.write(struct.pack("<II", data.shape[0], data.shape[1]))
        fh.write(data.tobytes(order="C"))


def read_vvft(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _VVFT_MAGIC:
            raise ManifestError(f"{path}: bad magic {magic!r}, expected {_VVFT_MAGIC!r}")
        frames, dims = struct.unpack("<II", fh.read(8))
        payload = fh.read(4 * frames * dims)
        if len(payload) != 4 * frames * dims:
            raise ManifestError(f"{path}: truncated VVFT payload")
        return np.frombuffer(payload, dtype="<f4").reshape(frames, dims).astype(np.float64)


def write_corpus(corpus: ProceduralCorpus, out_dir) -> Path:
    """Materialise the corpus: WAV + VVFT per recording, face VVFT per speaker,
    and a corpus index JSON. Deterministic in the corpus parameters."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {
        "version": 1,
        "kind": "corpus",
        "sample_rate": corpus.sample_rate,
        "fps": corpus.fps,
        "d_v": corpus.d_v,
        "d_f": corpus.d_f,
        "seed": corpus.seed,
        "speakers": [],
    }
    for speaker_id in corpus.speaker_ids:
        spk_dir = out_dir / speaker_id
        spk_dir.mkdir(exist_ok=True)
        face_rel = f"{speaker_id}/face.vvft"
        write_vvft(out_dir / face_rel, corpus.face(speaker_id).values[None, :])
        entry = {"speaker_id": speaker_id, "face": face_rel, "recordings": []}
        for recording_id in corpus.recording_ids(speaker_id):
            utt = corpus.utterance(speaker_id, recording_id)
            wav_rel = f"{speaker_id}/{recording_id}.wav"
            vis_rel = f"{speaker_id}/{recording_id}.vvft"
            write_wav(out_dir / wav_rel, utt.audio)
            write_vvft(out_dir / vis_rel, utt.visual.data)
            entry["recordings"].append(
                {
                    "recording_id": recording_id,
                    "wav": wav_rel,
                    "visual": vis_rel,
                    "duration_s": utt.duration_s,
                }
            )
        index["speakers"].append(entry)
    index_path = out_dir / "corpus.json"
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index_path


class DiskCorpus:
    """Corpus backed by files written with write_corpus."""

    def __init__(self, root):
        self.root = Path(root)
        index_path = self.root / "corpus.json"
        if not index_path.exists():
            raise NotFoundError(f"no corpus.json under {self.root}")
        index = json.loads(index_path.read_text())
        if index.get("kind") != "corpus":
            raise ManifestError(f"{index_path}: not a corpus index", field="kind")
        self.sample_rate = index["sample_rate"]
        self.fps = index["fps"]
        self.d_v = index["d_v"]
        self.d_f = index["d_f"]
        self.seed = index.get("seed")
        self._speakers = {e["speaker_id"]: e for e in index["speakers"]}

    @property
    def speaker_ids(self) -> list[str]:
        return list(self._speakers)

    def _entry(self, speaker_id: str) -> dict:
        if speaker_id not in self._speakers:
            raise NotFoundError(f"unknown speaker {speaker_id!r}")
        return self._speakers[speaker_id]

    def recording_ids(self, speaker_id: str) -> list[str]:
        return [r["recording_id"] for r in self._entry(speaker_id)["recordings"]]

    def utterance(self, speaker_id: str, recording_id: str) -> Utterance:
        entry = self._entry(speaker_id)
        for rec in entry["recordings"]:
            if rec["recording_id"] == recording_id:
                audio = read_wav(self.root / rec["wav"])
                visual = FeatureSequence(read_vvft(self.root / rec["visual"]), self.fps)
                return Utterance(speaker_id, recording_id, audio, visual, rec["duration_s"])
        raise NotFoundError(f"unknown recording {recording_id!r} for {speaker_id}")

    def face(self, speaker_id: str) -> EmbeddingVector:
        entry = self._entry(speaker_id)
        return EmbeddingVector(read_vvft(self.root / entry["face"])[0])
