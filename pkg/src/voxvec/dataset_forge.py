"""Mixture synthesis and enrolment sourcing plans.

Owns the manifest format: a JSON document pairing each MixtureSpec (how one
noisy example is synthesised) with an EnrolmentSpec (which recordings source
the positive and negative enrolment vectors). Everything is declarative and
seed-deterministic so a manifest plus a corpus reproduces byte-identical
training data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._seeding import rng_for, stable_seed
from .audio_core import (
    Waveform,
    apply_gain_db,
    crop_or_pad,
    read_wav,
    resample,
    speed_perturb,
)
from .errors import (
    DegenerateInputError,
    InvalidArgumentError,
    ManifestError,
    NotFoundError,
)
from .synth_corpus import SAMPLE_RATE

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")

MODALITY_PLANS = (
    "clean_audio",
    "clean_audio+visual",
    "noisy_audio_only",
    "noisy_audio+visual",
    "visual_only",
    "visual+face",
    "face_only",
)

# The source material gives no mixing ranges; these are the desk defaults.
SPEAKER_SNR_RANGE = (-5.0, 5.0)
NOISE_SNR_RANGE = (5.0, 20.0)
GAIN_RANGE_DB = (-3.0, 3.0)
SPEED_RANGE = (0.97, 1.03)


@dataclass(frozen=True)
class StemRef:
    speaker_id: str
    recording_id: str
    crop_offset: int = 0


@dataclass(frozen=True)
class Augmentation:
    gain_db: float = 0.0
    speed_factor: float = 1.0


@dataclass(frozen=True)
class NoiseRef:
    recording_id: str
    crop_offset: int
    snr_db: float  # relative to the target stem


@dataclass(frozen=True)
class MixtureSpec:
    target: StemRef
    interferer: StemRef
    speaker_snr_db: float
    noise: NoiseRef | None = None
    target_aug: Augmentation = field(default_factory=Augmentation)
    interferer_aug: Augmentation = field(default_factory=Augmentation)
    duration_s: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.target.speaker_id == self.interferer.speaker_id:
            raise InvalidArgumentError(
                f"target and interferer must be different speakers, both are "
                f"{self.target.speaker_id!r}"
            )
        if self.duration_s <= 0:
            raise InvalidArgumentError("duration_s must be positive")


@dataclass(frozen=True)
class EnrolmentEntry:
    speaker_id: str
    recording_id: str
    crop_offset: int = 0
    modality_plan: str = "noisy_audio+visual"

    def __post_init__(self):
        if self.modality_plan not in MODALITY_PLANS:
            raise InvalidArgumentError(
                f"unknown modality plan {self.modality_plan!r}; expected one of {MODALITY_PLANS}"
            )


@dataclass(frozen=True)
class EnrolmentSpec:
    positives: tuple[EnrolmentEntry, ...]
    negatives: tuple[EnrolmentEntry, ...]


@dataclass(frozen=True)
class ManifestEntry:
    mixture: MixtureSpec
    enrolment: EnrolmentSpec

    def __post_init__(self):
        mix = self.mixture
        for entry in self.enrolment.positives:
            if entry.speaker_id != mix.target.speaker_id:
                raise InvalidArgumentError(
                    f"positive enrolment speaker {entry.speaker_id!r} is not the "
                    f"mixture target {mix.target.speaker_id!r}"
                )
            if entry.recording_id == mix.target.recording_id:
                raise InvalidArgumentError(
                    f"positive enrolment reuses the mixture's target recording "
                    f"{entry.recording_id!r}"
                )
        for entry in self.enrolment.negatives:
            if entry.speaker_id != mix.interferer.speaker_id:
                raise InvalidArgumentError(
                    f"negative enrolment speaker {entry.speaker_id!r} is not the "
                    f"mixture interferer {mix.interferer.speaker_id!r}"
                )
            if entry.recording_id == mix.interferer.recording_id:
                raise InvalidArgumentError(
                    f"negative enrolment reuses the mixture's interferer recording "
                    f"{entry.recording_id!r}"
                )


@dataclass(frozen=True)
class Manifest:
    version: int
    corpus_root: str
    split: str
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidArgumentError(f"split must be one of {SPLITS}, got {self.split!r}")

    def speaker_ids(self) -> set[str]:
        ids: set[str] = set()
        for entry in self.entries:
            ids.add(entry.mixture.target.speaker_id)
            ids.add(entry.mixture.interferer.speaker_id)
        return ids


class ProceduralNoise:
    """Seeded stand-ins for environmental noise: pink noise and AM bursts.

    Recording ids look like "pink/0003" or "bursts/0007"; each id maps to a
    fixed 8-second track.
    """

    TRACK_SECONDS = 8.0

    def __init__(self, seed: int = 0):
        self.seed = seed

    def track(self, recording_id: str) -> Waveform:
        kind, _, tag = recording_id.partition("/")
        if kind not in ("pink", "bursts") or not tag:
            raise NotFoundError(f"unknown noise recording {recording_id!r}")
        rng = rng_for("noise", self.seed, recording_id)
        n = int(self.TRACK_SECONDS * SAMPLE_RATE)
        white = rng.standard_normal(n)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
        shaping = 1.0 / np.sqrt(np.maximum(freqs, 20.0))
        pink = np.fft.irfft(spectrum * shaping, n=n)
        if kind == "bursts":
            envelope = np.full(n, 0.1)
            t = np.arange(n) / SAMPLE_RATE
            for _ in range(int(rng.integers(6, 14))):
                onset = rng.uniform(0.0, self.TRACK_SECONDS - 0.5)
                width = rng.uniform(0.2, 1.2)
                phase = (t - onset) / width
                envelope += np.where(
                    (phase >= 0) & (phase <= 1), 0.5 - 0.5 * np.cos(2 * np.pi * phase), 0.0
                )
            pink = pink * envelope
        rms = np.sqrt(np.mean(pink**2))
        return Waveform(pink * (0.1 / rms), SAMPLE_RATE)

    def random_ref(self, rng: np.random.Generator, snr_db: float, n_samples: int) -> NoiseRef:
        kind = "pink" if rng.random() < 0.5 else "bursts"
        recording_id = f"{kind}/{int(rng.integers(0, 10000)):04d}"
        max_offset = int(self.TRACK_SECONDS * SAMPLE_RATE) - n_samples
        offset = int(rng.integers(0, max(1, max_offset + 1)))
        return NoiseRef(recording_id, offset, snr_db)


class DirNoise:
    """Noise recordings read from a directory of WAV files (ids are relative paths)."""

    def __init__(self, root):
        self.root = Path(root)

    def track(self, recording_id: str) -> Waveform:
        path = self.root / recording_id
        if not path.exists():
            raise NotFoundError(f"noise file not found: {path}")
        wav = read_wav(path)
        if wav.sample_rate != SAMPLE_RATE:
            wav = resample(wav, SAMPLE_RATE)
        return wav


def _prepare_stem(corpus, ref: StemRef, aug: Augmentation, n_samples: int) -> Waveform:
    utt = corpus.utterance(ref.speaker_id, ref.recording_id)
    wav = utt.audio
    if aug.speed_factor != 1.0:
        wav = speed_perturb(wav, aug.speed_factor)
    if aug.gain_db != 0.0:
        wav = apply_gain_db(wav, aug.gain_db)
    if len(wav) - ref.crop_offset < n_samples:
        raise DegenerateInputError(
            f"stem {ref.speaker_id}/{ref.recording_id} too short: "
            f"{len(wav)} samples, need {n_samples} from offset {ref.crop_offset}"
        )
    cropped, _ = crop_or_pad(wav, n_samples, ref.crop_offset)
    return cropped


def build_mixture(spec: MixtureSpec, corpus, noise_source=None):
    """Synthesise one mixture. Returns (a_m, a_t, metadata).

    a_t is the augmented, cropped target stem exactly as it appears inside
    a_m (any peak rescale applies to every component identically).
    """
    noise_source = noise_source or ProceduralNoise()
    n = int(round(spec.duration_s * SAMPLE_RATE))
    target = _prepare_stem(corpus, spec.target, spec.target_aug, n)
    interferer = _prepare_stem(corpus, spec.interferer, spec.interferer_aug, n)

    rms_t = target.rms()
    rms_i = interferer.rms()
    if rms_t <= 0 or rms_i <= 0:
        raise DegenerateInputError("silent stem in mixture")
    i_scale = (rms_t / rms_i) * 10.0 ** (-spec.speaker_snr_db / 20.0)

    t = target.samples
    i = interferer.samples * i_scale
    mix = t + i

    noise_samples = None
    if spec.noise is not None:
        track = noise_source.track(spec.noise.recording_id)
        if len(track) - spec.noise.crop_offset < n:
            raise DegenerateInputError(
                f"noise track {spec.noise.recording_id!r} too short for crop"
            )
        noise_wav, _ = crop_or_pad(track, n, spec.noise.crop_offset)
        rms_n = noise_wav.rms()
        if rms_n <= 0:
            raise DegenerateInputError(f"silent noise track {spec.noise.recording_id!r}")
        n_scale = (rms_t / rms_n) * 10.0 ** (-spec.noise.snr_db / 20.0)
        noise_samples = noise_wav.samples * n_scale
        mix = mix + noise_samples

    rescale = 1.0
    peak = float(np.max(np.abs(mix))) if mix.size else 0.0
    if peak > 1.0:
        rescale = 0.99 / peak
        t = t * rescale
        i = i * rescale
        mix = mix * rescale
        if noise_samples is not None:
            noise_samples = noise_samples * rescale

    metadata = {
        "duration_s": spec.duration_s,
        "n_samples": n,
        "speaker_snr_db": 20.0 * float(np.log10(np.sqrt(np.mean(t**2)) / np.sqrt(np.mean(i**2)))),
        "noise_snr_db": (
            None
            if noise_samples is None
            else 20.0 * float(np.log10(np.sqrt(np.mean(t**2)) / np.sqrt(np.mean(noise_samples**2))))
        ),
        "peak_rescale": rescale,
        "target": {"speaker_id": spec.target.speaker_id, "recording_id": spec.target.recording_id},
        "interferer": {
            "speaker_id": spec.interferer.speaker_id,
            "recording_id": spec.interferer.recording_id,
        },
    }
    return Waveform(mix, SAMPLE_RATE), Waveform(t, SAMPLE_RATE), metadata


def sample_enrolment_spec(mix: MixtureSpec, corpus, n_pos: int, n_neg: int,
                          modality_plan: str, rng: np.random.Generator) -> EnrolmentSpec:
    """Draw enrolment recordings disjoint from the mixture's own recordings."""
    if n_pos < 1:
        raise InvalidArgumentError("at least one positive enrolment vector is required")
    if n_neg < 0:
        raise InvalidArgumentError("negative count must be >= 0")
    if modality_plan not in MODALITY_PLANS:
        raise InvalidArgumentError(f"unknown modality plan {modality_plan!r}")

    def draw(speaker_id: str, exclude: str, count: int) -> list[EnrolmentEntry]:
        pool = [r for r in corpus.recording_ids(speaker_id) if r != exclude]
        if len(pool) < count:
            raise InvalidArgumentError(
                f"speaker {speaker_id!r} has only {len(pool)} recordings distinct from "
                f"the mixture; need {count}"
            )
        picks = rng.choice(len(pool), size=count, replace=False)
        return [
            EnrolmentEntry(speaker_id, pool[int(p)], 0, modality_plan) for p in picks
        ]

    positives = draw(mix.target.speaker_id, mix.target.recording_id, n_pos)
    negatives = draw(mix.interferer.speaker_id, mix.interferer.recording_id, n_neg) if n_neg else []
    return EnrolmentSpec(tuple(positives), tuple(negatives))


# --- manifest (de)serialisation -------------------------------------------

def _check_keys(obj: dict, allowed: set[str], context: str):
    for key in obj:
        if key not in allowed:
            raise ManifestError("unknown field", field=f"{context}.{key}")


def _stem_to_dict(ref: StemRef) -> dict:
    return {
        "speaker_id": ref.speaker_id,
        "recording_id": ref.recording_id,
        "crop_offset": ref.crop_offset,
    }


def _stem_from_dict(d: dict, context: str) -> StemRef:
    _check_keys(d, {"speaker_id", "recording_id", "crop_offset"}, context)
    try:
        return StemRef(str(d["speaker_id"]), str(d["recording_id"]), int(d.get("crop_offset", 0)))
    except KeyError as exc:
        raise ManifestError("missing field", field=f"{context}.{exc.args[0]}") from None


def manifest_to_dict(manifest: Manifest) -> dict:
    entries = []
    for entry in manifest.entries:
        mix = entry.mixture
        mix_d = {
            "target": _stem_to_dict(mix.target),
            "interferer": _stem_to_dict(mix.interferer),
            "speaker_snr_db": mix.speaker_snr_db,
            "noise": (
                None
                if mix.noise is None
                else {
                    "recording_id": mix.noise.recording_id,
                    "crop_offset": mix.noise.crop_offset,
                    "snr_db": mix.noise.snr_db,
                }
            ),
            "target_aug": {"gain_db": mix.target_aug.gain_db,
                           "speed_factor": mix.target_aug.speed_factor},
            "interferer_aug": {"gain_db": mix.interferer_aug.gain_db,
                               "speed_factor": mix.interferer_aug.speed_factor},
            "duration_s": mix.duration_s,
            "seed": mix.seed,
        }
        enrol_d = {
            "positives": [
                {
                    "speaker_id": e.speaker_id,
                    "recording_id": e.recording_id,
                    "crop_offset": e.crop_offset,
                    "modality_plan": e.modality_plan,
                }
                for e in entry.enrolment.positives
            ],
            "negatives": [
                {
                    "speaker_id": e.speaker_id,
                    "recording_id": e.recording_id,
                    "crop_offset": e.crop_offset,
                    "modality_plan": e.modality_plan,
                }
                for e in entry.enrolment.negatives
            ],
        }
        entries.append({"mixture": mix_d, "enrolment": enrol_d})
    return {
        "version": manifest.version,
        "kind": "mixtures",
        "corpus_root": manifest.corpus_root,
        "split": manifest.split,
        "entries": entries,
    }


def _aug_from_dict(d: dict, context: str) -> Augmentation:
    _check_keys(d, {"gain_db", "speed_factor"}, context)
    return Augmentation(float(d.get("gain_db", 0.0)), float(d.get("speed_factor", 1.0)))


def _enrol_entry_from_dict(d: dict, context: str) -> EnrolmentEntry:
    _check_keys(d, {"speaker_id", "recording_id", "crop_offset", "modality_plan"}, context)
    try:
        return EnrolmentEntry(
            str(d["speaker_id"]),
            str(d["recording_id"]),
            int(d.get("crop_offset", 0)),
            str(d.get("modality_plan", "noisy_audio+visual")),
        )
    except KeyError as exc:
        raise ManifestError("missing field", field=f"{context}.{exc.args[0]}") from None
    except InvalidArgumentError as exc:
        raise ManifestError(str(exc), field=f"{context}.modality_plan") from None


def manifest_from_dict(doc: dict) -> Manifest:
    _check_keys(doc, {"version", "kind", "corpus_root", "split", "entries"}, "manifest")
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestError(
            f"unsupported manifest version {version!r}, expected {MANIFEST_VERSION}",
            field="manifest.version",
        )
    if doc.get("kind", "mixtures") != "mixtures":
        raise ManifestError(f"not a mixture manifest: kind={doc.get('kind')!r}",
                            field="manifest.kind")
    split = doc.get("split")
    if split not in SPLITS:
        raise ManifestError(f"split must be one of {SPLITS}, got {split!r}",
                            field="manifest.split")
    entries = []
    for idx, entry_d in enumerate(doc.get("entries", [])):
        context = f"entries[{idx}]"
        _check_keys(entry_d, {"mixture", "enrolment"}, context)
        mix_d = entry_d.get("mixture", {})
        _check_keys(
            mix_d,
            {"target", "interferer", "speaker_snr_db", "noise", "target_aug",
             "interferer_aug", "duration_s", "seed"},
            f"{context}.mixture",
        )
        noise_d = mix_d.get("noise")
        noise = None
        if noise_d is not None:
            _check_keys(noise_d, {"recording_id", "crop_offset", "snr_db"},
                        f"{context}.mixture.noise")
            noise = NoiseRef(
                str(noise_d["recording_id"]),
                int(noise_d.get("crop_offset", 0)),
                float(noise_d["snr_db"]),
            )
        try:
            mixture = MixtureSpec(
                target=_stem_from_dict(mix_d["target"], f"{context}.mixture.target"),
                interferer=_stem_from_dict(mix_d["interferer"], f"{context}.mixture.interferer"),
                speaker_snr_db=float(mix_d["speaker_snr_db"]),
                noise=noise,
                target_aug=_aug_from_dict(mix_d.get("target_aug", {}),
                                          f"{context}.mixture.target_aug"),
                interferer_aug=_aug_from_dict(mix_d.get("interferer_aug", {}),
                                              f"{context}.mixture.interferer_aug"),
                duration_s=float(mix_d.get("duration_s", 4.0)),
                seed=int(mix_d.get("seed", 0)),
            )
        except KeyError as exc:
            raise ManifestError("missing field", field=f"{context}.mixture.{exc.args[0]}") from None
        except InvalidArgumentError as exc:
            raise ManifestError(str(exc), field=f"{context}.mixture") from None
        enrol_d = entry_d.get("enrolment", {})
        _check_keys(enrol_d, {"positives", "negatives"}, f"{context}.enrolment")
        positives = tuple(
            _enrol_entry_from_dict(e, f"{context}.enrolment.positives[{j}]")
            for j, e in enumerate(enrol_d.get("positives", []))
        )
        negatives = tuple(
            _enrol_entry_from_dict(e, f"{context}.enrolment.negatives[{j}]")
            for j, e in enumerate(enrol_d.get("negatives", []))
        )
        try:
            entries.append(ManifestEntry(mixture, EnrolmentSpec(positives, negatives)))
        except InvalidArgumentError as exc:
            raise ManifestError(str(exc), field=context) from None
    return Manifest(MANIFEST_VERSION, str(doc.get("corpus_root", "")), split, tuple(entries))


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return manifest_from_dict(doc)


def ensure_disjoint_speakers(train: Manifest, test: Manifest) -> None:
    """Test-split speakers must never appear in the train split."""
    overlap = train.speaker_ids() & test.speaker_ids()
    if overlap:
        raise ManifestError(
            f"train/test speaker overlap: {sorted(overlap)}", field="entries"
        )


def plan_manifests(
    corpus,
    corpus_root: str,
    seed: int,
    n_train: int,
    n_val: int,
    n_test: int,
    duration_s: float = 4.0,
    noise_prob: float = 0.5,
    augment: bool = True,
    n_pos: int = 3,
    n_neg: int = 3,
    modality_plan: str = "noisy_audio+visual",
    test_speaker_fraction: float = 0.2,
) -> dict[str, Manifest]:
    """Partition speakers into train/test pools (val shares the train pool but
    uses fresh mixtures) and sample manifest entries for each split."""
    speaker_ids = list(corpus.speaker_ids)
    if len(speaker_ids) < 4:
        raise InvalidArgumentError("need at least 4 speakers to plan manifests")
    rng = rng_for("plan", seed)
    order = list(rng.permutation(len(speaker_ids)))
    n_test_speakers = max(2, int(round(test_speaker_fraction * len(speaker_ids))))
    test_pool = [speaker_ids[i] for i in order[:n_test_speakers]]
    train_pool = [speaker_ids[i] for i in order[n_test_speakers:]]
    noise_source = ProceduralNoise()
    n_samples = int(round(duration_s * SAMPLE_RATE))

    def sample_entry(pool: list[str], entry_seed: int) -> ManifestEntry:
        entry_rng = rng_for("entry", seed, entry_seed)
        ti = entry_rng.choice(len(pool), size=2, replace=False)
        t_spk, i_spk = pool[int(ti[0])], pool[int(ti[1])]

        def stem(speaker_id: str) -> tuple[StemRef, Augmentation]:
            recs = corpus.recording_ids(speaker_id)
            rec = recs[int(entry_rng.integers(0, len(recs)))]
            utt_len = len(corpus.utterance(speaker_id, rec).audio)
            if augment:
                max_speed = min(SPEED_RANGE[1], utt_len / n_samples)
                speed = float(entry_rng.uniform(SPEED_RANGE[0], max(SPEED_RANGE[0], max_speed)))
                gain = float(entry_rng.uniform(*GAIN_RANGE_DB))
            else:
                speed, gain = 1.0, 0.0
            aug_len = int(round(utt_len / speed))
            max_offset = aug_len - n_samples
            if max_offset < 0:
                raise DegenerateInputError(
                    f"recording {speaker_id}/{rec} shorter than mixture duration"
                )
            offset = int(entry_rng.integers(0, max_offset + 1))
            return StemRef(speaker_id, rec, offset), Augmentation(gain, speed)

        t_ref, t_aug = stem(t_spk)
        i_ref, i_aug = stem(i_spk)
        noise = None
        if entry_rng.random() < noise_prob:
            snr = float(entry_rng.uniform(*NOISE_SNR_RANGE))
            noise = noise_source.random_ref(entry_rng, snr, n_samples)
        mixture = MixtureSpec(
            target=t_ref,
            interferer=i_ref,
            speaker_snr_db=float(entry_rng.uniform(*SPEAKER_SNR_RANGE)),
            noise=noise,
            target_aug=t_aug,
            interferer_aug=i_aug,
            duration_s=duration_s,
            seed=stable_seed(seed, entry_seed),
        )
        enrolment = sample_enrolment_spec(mixture, corpus, n_pos, n_neg, modality_plan, entry_rng)
        return ManifestEntry(mixture, enrolment)

    manifests = {}
    for split, pool, count, base in (
        ("train", train_pool, n_train, 0),
        ("val", train_pool, n_val, 1_000_000),
        ("test", test_pool, n_test, 2_000_000),
    ):
        entries = tuple(sample_entry(pool, base + j) for j in range(count))
        manifests[split] = Manifest(MANIFEST_VERSION, corpus_root, split, entries)
    ensure_disjoint_speakers(manifests["train"], manifests["test"])
    return manifests
