"""Staged training: teacher, distillation, separation, end-to-end fine-tune.

Every stage is seed-deterministic (bitwise under VV_DETERMINISTIC=1, which
also pins torch to one thread), checkpoints to a directory holding
``params.bin`` (length-prefixed named little-endian float32 tensors) plus a
``meta.json`` sidecar, and aborts with the last good checkpoint on NaN loss.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ._seeding import rng_for, stable_seed
from .dataset_forge import MODALITY_PLANS, Manifest, build_mixture
from .enrolment_net import (
    EnrolmentEmbedder,
    EnrolmentInput,
    StudentNet,
    TeacherNet,
    enrolment_loss,
    make_enrolment_input,
    noise_enrolment_audio,
)
from .errors import DivergenceError, InvalidArgumentError, StageError
from .metrics import si_sdr
from .nn_blocks import ModelConfig
from .separation_net import Separator, separation_loss

STAGES = ("teacher", "distill", "separate", "finetune")

# Training-loss sanity: mean loss over consecutive windows of this size must
# not grow by more than the tolerance, else the run counts as diverged.
_LOSS_WINDOW = 500
_LOSS_TOLERANCE = 1.05


def deterministic_mode() -> bool:
    return os.environ.get("VV_DETERMINISTIC", "") == "1"


def configure_determinism() -> None:
    """Under VV_DETERMINISTIC=1, pin torch to deterministic single-thread kernels."""
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


@dataclass
class TrainConfig:
    stage: str
    steps: int
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: str = "cosine"  # "cosine" | "none"
    seed: int = 0
    pos_counts: tuple[int, ...] = (1, 2, 3)
    neg_counts: tuple[int, ...] = (0, 1, 2, 3)
    modality_mix: dict[str, float] | None = None
    checkpoint_every: int = 0  # 0: final checkpoint only
    init_from_teacher: bool = True
    crop_seconds: float | None = None
    val_fraction: float = 0.2
    val_entries: int = 16

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvalidArgumentError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps <= 0:
            raise InvalidArgumentError("steps must be positive")
        if self.batch_size <= 0:
            raise InvalidArgumentError("batch_size must be positive")
        if not self.pos_counts or min(self.pos_counts) < 1:
            raise InvalidArgumentError("positive-count sampler must never yield 0")
        if self.neg_counts and min(self.neg_counts) < 0:
            raise InvalidArgumentError("negative counts must be >= 0")
        if self.modality_mix is not None:
            unknown = set(self.modality_mix) - set(MODALITY_PLANS)
            if unknown:
                raise InvalidArgumentError(f"unknown modality plans in mix: {unknown}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    stage: str
    step: int
    config: ModelConfig
    state: dict[str, np.ndarray]
    meta: dict

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.state.items()}


def _config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig | None) -> str:
    doc = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict() if train_cfg else None}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def param_state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(out_dir, stage: str, step: int, model_cfg: ModelConfig,
                    module: nn.Module, meta: dict) -> Path:
    if stage not in STAGES:
        raise InvalidArgumentError(f"unknown stage {stage!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "params.bin", "wb") as fh:
        for name, tensor in sorted(module.state_dict().items()):
            arr = tensor.detach().cpu().numpy().astype("<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    doc = {"stage": stage, "step": step, "model_config": model_cfg.to_dict(), "meta": meta}
    (out_dir / "meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_checkpoint(ckpt_dir) -> Checkpoint:
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "meta.json"
    params_path = ckpt_dir / "params.bin"
    if not meta_path.exists() or not params_path.exists():
        raise InvalidArgumentError(f"not a checkpoint directory: {ckpt_dir}")
    doc = json.loads(meta_path.read_text())
    state: dict[str, np.ndarray] = {}
    raw = params_path.read_bytes()
    offset = 0
    while offset < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        state[name] = arr.copy()
    return Checkpoint(
        stage=doc["stage"],
        step=doc["step"],
        config=ModelConfig.from_dict(doc["model_config"]),
        state=state,
        meta=doc.get("meta", {}),
    )


def teacher_from_checkpoint(ckpt: Checkpoint) -> TeacherNet:
    if ckpt.stage != "teacher":
        raise StageError(f"expected a teacher checkpoint, got stage {ckpt.stage!r}")
    net = TeacherNet(ckpt.config)
    net.load_state_dict(ckpt.state_tensors())
    net.eval()
    return net


def student_from_checkpoint(ckpt: Checkpoint) -> StudentNet:
    if ckpt.stage not in ("distill", "finetune"):
        raise StageError(f"expected a distill/finetune checkpoint, got stage {ckpt.stage!r}")
    net = StudentNet(ckpt.config)
    net.load_state_dict(ckpt.state_tensors())
    net.eval()
    return net


def separator_from_checkpoint(ckpt: Checkpoint) -> Separator:
    if ckpt.stage not in ("separate", "finetune"):
        raise StageError(f"expected a separate/finetune checkpoint, got stage {ckpt.stage!r}")
    net = Separator(ckpt.config)
    net.load_state_dict(ckpt.state_tensors())
    net.eval()
    return net


def embedder_from_checkpoint(ckpt: Checkpoint) -> EnrolmentEmbedder:
    if ckpt.stage == "teacher":
        return EnrolmentEmbedder(teacher_from_checkpoint(ckpt), "teacher")
    return EnrolmentEmbedder(student_from_checkpoint(ckpt), "student")


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_decay == "none":
        return cfg.lr
    progress = step / max(1, cfg.steps)
    return cfg.lr * (0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * progress)))


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_loss_history(history: list[float], context: str) -> None:
    """NaN anywhere, or window-mean growth beyond tolerance, is divergence."""
    if any(not np.isfinite(x) for x in history):
        raise DivergenceError(f"{context}: non-finite training loss")
    window = _LOSS_WINDOW
    means = [
        float(np.mean(history[i : i + window]))
        for i in range(0, max(1, len(history) - window + 1), window)
    ]
    for prev, cur in zip(means, means[1:]):
        if cur > prev * _LOSS_TOLERANCE:
            raise DivergenceError(
                f"{context}: smoothed loss rose from {prev:.4g} to {cur:.4g} "
                f"over a {window}-step window"
            )


def _guard_step(loss: torch.Tensor, context: str, out_dir, stage, step, model_cfg,
                module, meta) -> float:
    value = float(loss.detach())
    if not np.isfinite(value):
        last_good = None
        if out_dir is not None and (Path(out_dir) / "meta.json").exists():
            last_good = Path(out_dir)
        raise DivergenceError(f"{context}: loss became {value} at step {step}",
                              last_good=last_good)
    return value


def _cadence_checkpoint(cfg: TrainConfig, step: int, out_dir, stage: str,
                        model_cfg: ModelConfig, module: nn.Module,
                        history: list[float]) -> None:
    if cfg.checkpoint_every and out_dir is not None and \
            (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
        save_checkpoint(out_dir, stage, step + 1, model_cfg, module,
                        {"partial": True, "seed": cfg.seed,
                         "loss_history": list(history)})


def _split_recordings(corpus, speaker_ids, val_fraction: float):
    """Per-speaker recording split: (train_recs, val_recs) dictionaries."""
    train, val = {}, {}
    for sid in speaker_ids:
        recs = corpus.recording_ids(sid)
        n_val = max(1, int(round(val_fraction * len(recs)))) if len(recs) > 1 else 0
        train[sid] = recs[: len(recs) - n_val] if n_val else list(recs)
        val[sid] = recs[len(recs) - n_val :] if n_val else []
    return train, val


def _random_crop(samples: np.ndarray, n: int, rng) -> np.ndarray:
    if len(samples) <= n:
        out = np.zeros(n, dtype=samples.dtype)
        out[: len(samples)] = samples
        return out
    start = int(rng.integers(0, len(samples) - n + 1))
    return samples[start : start + n]


def train_teacher(corpus, cfg: TrainConfig, out_dir, speaker_ids=None,
                  model_cfg: ModelConfig | None = None) -> Path:
    """Stage 1: speaker-classification pretraining of the clean-audio teacher.

    The cross-entropy head is discarded; the checkpoint holds the embedding
    network only, with held-out nearest-centroid accuracy in the metadata.
    """
    if cfg.stage != "teacher":
        raise InvalidArgumentError(f"config stage {cfg.stage!r} != teacher")
    configure_determinism()
    speaker_ids = list(speaker_ids if speaker_ids is not None else corpus.speaker_ids)
    if len(speaker_ids) < 2:
        raise InvalidArgumentError("teacher training needs at least 2 speakers")
    torch.manual_seed(cfg.seed)
    model_cfg = model_cfg or ModelConfig(d_v=corpus.d_v, d_f=corpus.d_f)
    teacher = TeacherNet(model_cfg)
    head = nn.Linear(model_cfg.d_spk, len(speaker_ids))
    params = list(teacher.parameters()) + list(head.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr)

    train_recs, val_recs = _split_recordings(corpus, speaker_ids, cfg.val_fraction)
    crop_s = cfg.crop_seconds or 1.5
    n_crop = int(crop_s * corpus.sample_rate)
    rng = rng_for("teacher", cfg.seed)
    label_of = {sid: i for i, sid in enumerate(speaker_ids)}

    spec_cache: dict[tuple[str, str], np.ndarray] = {}

    def frames_for(sid: str, rid: str) -> np.ndarray:
        key = (sid, rid)
        if key not in spec_cache:
            if len(spec_cache) > 256:
                spec_cache.clear()
            wav = corpus.utterance(sid, rid).audio
            spec_cache[key] = teacher.frames_from_waveform(wav).numpy()
        return spec_cache[key]

    frames_per_crop = 1 + (n_crop - teacher.stft_config.fft_size) // teacher.stft_config.hop
    history: list[float] = []
    loss_fn = nn.CrossEntropyLoss()
    for step in range(cfg.steps):
        batch_frames = []
        labels = []
        for _ in range(cfg.batch_size):
            sid = speaker_ids[int(rng.integers(0, len(speaker_ids)))]
            recs = train_recs[sid]
            rid = recs[int(rng.integers(0, len(recs)))]
            full = frames_for(sid, rid)
            start = int(rng.integers(0, max(1, full.shape[0] - frames_per_crop + 1)))
            batch_frames.append(full[start : start + frames_per_crop])
            labels.append(label_of[sid])
        x = torch.from_numpy(np.stack(batch_frames))
        y = torch.tensor(labels)
        logits = head(teacher(x))
        loss = loss_fn(logits, y)
        optimizer.zero_grad()
        loss.backward()
        _set_lr(optimizer, _lr_at(cfg, step))
        optimizer.step()
        history.append(_guard_step(loss, "train_teacher", out_dir, "teacher", step,
                                   model_cfg, teacher, {}))
        _cadence_checkpoint(cfg, step, out_dir, "teacher", model_cfg, teacher, history)
    _check_loss_history(history, "train_teacher")

    teacher.eval()
    accuracy = _nearest_centroid_accuracy(teacher, corpus, train_recs, val_recs)
    meta = {
        "seed": cfg.seed,
        "config_hash": _config_hash(model_cfg, cfg),
        "train_config": cfg.to_dict(),
        "loss_history": history,
        "held_out_centroid_accuracy": accuracy,
        "speaker_ids": speaker_ids,
    }
    return save_checkpoint(out_dir, "teacher", cfg.steps, model_cfg, teacher, meta)


@torch.no_grad()
def _nearest_centroid_accuracy(teacher: TeacherNet, corpus, train_recs, val_recs) -> float | None:
    centroids = {}
    for sid, recs in train_recs.items():
        embs = [teacher.embed(corpus.utterance(sid, r).audio).values for r in recs]
        centroids[sid] = np.mean(embs, axis=0)
    total = correct = 0
    for sid, recs in val_recs.items():
        for rid in recs:
            emb = teacher.embed(corpus.utterance(sid, rid).audio).values
            best = min(centroids, key=lambda s: np.linalg.norm(emb - centroids[s]))
            correct += best == sid
            total += 1
    return correct / total if total else None


def _default_modality_mix() -> dict[str, float]:
    return {plan: 1.0 / len(MODALITY_PLANS) for plan in MODALITY_PLANS}


def _choose_plan(rng, mix: dict[str, float]) -> str:
    plans = sorted(mix)
    probs = np.array([mix[p] for p in plans], dtype=np.float64)
    probs = probs / probs.sum()
    return plans[int(rng.choice(len(plans), p=probs))]


def _student_input_for(corpus, sid: str, rid: str, plan: str, noise_seed: int,
                       crop_s: float | None, rng) -> EnrolmentInput:
    from .audio_core import Waveform
    from .enrolment_net import PLAN_FIELDS
    from .nn_blocks import FeatureSequence

    utt = corpus.utterance(sid, rid)
    need_audio, need_visual, need_face = PLAN_FIELDS[plan]
    t0 = 0.0
    if crop_s is not None and crop_s < utt.duration_s:
        t0 = float(rng.uniform(0.0, utt.duration_s - crop_s))
    audio = visual = face = None
    if need_audio:
        wav = utt.audio
        if plan.startswith("noisy"):
            wav = noise_enrolment_audio(wav, noise_seed)
        if crop_s is not None:
            start = int(round(t0 * wav.sample_rate))
            n = int(crop_s * wav.sample_rate)
            wav = Waveform(wav.samples[start : start + n], wav.sample_rate)
        audio = wav
    if need_visual:
        vis = utt.visual
        if crop_s is not None:
            f0 = int(round(t0 * vis.frame_rate))
            f1 = f0 + int(round(crop_s * vis.frame_rate))
            vis = FeatureSequence(vis.data[f0:f1], vis.frame_rate)
        visual = vis
    if need_face:
        face = corpus.face(sid)
    return EnrolmentInput(modality_tag=plan, audio=audio, visual=visual, face=face)


def train_distill(corpus, teacher_ckpt: Checkpoint, cfg: TrainConfig, out_dir,
                  speaker_ids=None) -> Path:
    """Stage 2: distill the multi-modal student onto teacher embeddings.

    Every pair uses a teacher recording distinct from the student recording
    of the same speaker; the modality combination is sampled per example.
    """
    if cfg.stage != "distill":
        raise InvalidArgumentError(f"config stage {cfg.stage!r} != distill")
    if teacher_ckpt.stage != "teacher":
        raise StageError(f"distillation needs a teacher checkpoint, got {teacher_ckpt.stage!r}")
    configure_determinism()
    torch.manual_seed(cfg.seed)
    model_cfg = teacher_ckpt.config
    teacher = teacher_from_checkpoint(teacher_ckpt)
    student = StudentNet(model_cfg)
    if cfg.init_from_teacher:
        student.init_from_teacher(teacher)
    optimizer = torch.optim.Adam(student.parameters(), lr=cfg.lr)

    speaker_ids = list(speaker_ids if speaker_ids is not None else corpus.speaker_ids)
    train_recs, val_recs = _split_recordings(corpus, speaker_ids, cfg.val_fraction)
    mix = cfg.modality_mix or _default_modality_mix()
    rng = rng_for("distill", cfg.seed)
    crop_s = cfg.crop_seconds

    def teacher_target(sid: str, rid: str) -> torch.Tensor:
        with torch.no_grad():
            frames = teacher.frames_from_waveform(corpus.utterance(sid, rid).audio)
            return teacher(frames.unsqueeze(0))[0]

    # Fixed validation pairs per plan, from held-out recordings where possible.
    val_pairs: dict[str, list[tuple[str, str, str, int]]] = {plan: [] for plan in mix}
    val_rng = rng_for("distill-val", cfg.seed)
    for plan in sorted(mix):
        for _ in range(6):
            sid = speaker_ids[int(val_rng.integers(0, len(speaker_ids)))]
            pool = val_recs[sid] or train_recs[sid]
            rid_s = pool[int(val_rng.integers(0, len(pool)))]
            others = [r for r in corpus.recording_ids(sid) if r != rid_s]
            rid_t = others[int(val_rng.integers(0, len(others)))]
            val_pairs[plan].append((sid, rid_s, rid_t, int(val_rng.integers(0, 2**31))))

    @torch.no_grad()
    def validation_l1() -> dict[str, float]:
        student.eval()
        out = {}
        for plan, pairs in val_pairs.items():
            losses = []
            for sid, rid_s, rid_t, salt in pairs:
                x = _student_input_for(corpus, sid, rid_s, plan, salt, None, val_rng)
                pred = student([x])[0]
                losses.append(float(enrolment_loss(pred, teacher_target(sid, rid_t))))
            out[plan] = float(np.mean(losses))
        student.train()
        return out

    val_init = validation_l1()
    history: list[float] = []
    pair_violations = 0
    for step in range(cfg.steps):
        inputs = []
        targets = []
        for i in range(cfg.batch_size):
            sid = speaker_ids[int(rng.integers(0, len(speaker_ids)))]
            recs = train_recs[sid]
            rid_s = recs[int(rng.integers(0, len(recs)))]
            others = [r for r in corpus.recording_ids(sid) if r != rid_s]
            rid_t = others[int(rng.integers(0, len(others)))]
            if rid_t == rid_s:
                pair_violations += 1
                continue
            plan = _choose_plan(rng, mix)
            noise_seed = stable_seed(cfg.seed, step, i)
            inputs.append(_student_input_for(corpus, sid, rid_s, plan, noise_seed, crop_s, rng))
            targets.append(teacher_target(sid, rid_t))
        preds = student(inputs)
        loss = enrolment_loss(preds, torch.stack(targets))
        optimizer.zero_grad()
        loss.backward()
        _set_lr(optimizer, _lr_at(cfg, step))
        optimizer.step()
        history.append(_guard_step(loss, "train_distill", out_dir, "distill", step,
                                   model_cfg, student, {}))
        _cadence_checkpoint(cfg, step, out_dir, "distill", model_cfg, student, history)
    _check_loss_history(history, "train_distill")
    if pair_violations:
        raise DivergenceError(f"teacher/student recording collisions: {pair_violations}")

    val_final = validation_l1()
    meta = {
        "seed": cfg.seed,
        "config_hash": _config_hash(model_cfg, cfg),
        "train_config": cfg.to_dict(),
        "loss_history": history,
        "val_l1_init": val_init,
        "val_l1_final": val_final,
        "init_from_teacher": cfg.init_from_teacher,
        "teacher_hash": _config_hash(teacher_ckpt.config, None),
    }
    return save_checkpoint(out_dir, "distill", cfg.steps, model_cfg, student, meta)


class _EntryBank:
    """Precomputed mixtures and (frozen) enrolment embeddings for a manifest."""

    def __init__(self, manifest: Manifest, corpus, embedder: EnrolmentEmbedder,
                 plan_override: str | None = None):
        self.mixes: list[torch.Tensor] = []
        self.targets: list[torch.Tensor] = []
        self.pos: list[np.ndarray] = []
        self.neg: list[np.ndarray] = []
        for entry in manifest.entries:
            a_m, a_t, _ = build_mixture(entry.mixture, corpus)
            self.mixes.append(torch.as_tensor(a_m.samples, dtype=torch.float32))
            self.targets.append(torch.as_tensor(a_t.samples, dtype=torch.float32))
            self.pos.append(
                np.stack([
                    embedder(corpus, e, plan_override=plan_override)
                    for e in entry.enrolment.positives
                ])
            )
            neg_entries = entry.enrolment.negatives
            if neg_entries:
                self.neg.append(
                    np.stack([
                        embedder(corpus, e, plan_override=plan_override)
                        for e in neg_entries
                    ])
                )
            else:
                self.neg.append(np.zeros((0, self.pos[-1].shape[1])))

    def __len__(self) -> int:
        return len(self.mixes)


def _conditioning_batch(bank: _EntryBank, idxs, pos_n, neg_n, d_spk, rng):
    """Assemble padded conditioning tensors with validity masks."""
    b = len(idxs)
    max_p = max(pos_n)
    max_n = max(max(neg_n), 1) if any(neg_n) else 0
    pos = torch.zeros(b, max_p, d_spk)
    pos_valid = torch.zeros(b, max_p, dtype=torch.bool)
    neg = torch.zeros(b, max_n, d_spk) if max_n else torch.zeros(b, 0, d_spk)
    neg_valid = torch.zeros(b, max_n, dtype=torch.bool) if max_n else torch.zeros(b, 0, dtype=torch.bool)
    for row, (idx, np_, nn_) in enumerate(zip(idxs, pos_n, neg_n)):
        cand_p = bank.pos[idx]
        picks = rng.choice(cand_p.shape[0], size=np_, replace=False)
        pos[row, :np_] = torch.as_tensor(cand_p[picks], dtype=torch.float32)
        pos_valid[row, :np_] = True
        if nn_ > 0:
            cand_n = bank.neg[idx]
            picks = rng.choice(cand_n.shape[0], size=nn_, replace=False)
            neg[row, :nn_] = torch.as_tensor(cand_n[picks], dtype=torch.float32)
            neg_valid[row, :nn_] = True
    return pos, pos_valid, neg, neg_valid


@torch.no_grad()
def _validate_separation(separator: Separator, bank: _EntryBank, max_entries: int) -> float:
    """Median SI-SDR improvement with one positive vector over val entries."""
    separator.eval()
    improvements = []
    for idx in range(min(len(bank), max_entries)):
        mix = bank.mixes[idx].unsqueeze(0)
        pos = torch.as_tensor(bank.pos[idx][:1], dtype=torch.float32).unsqueeze(0)
        neg = torch.zeros(1, 0, pos.shape[2])
        est = separator(mix, pos, neg)[0].double().numpy()
        ref = bank.targets[idx].double().numpy()
        mixture = bank.mixes[idx].double().numpy()
        improvements.append(si_sdr(ref, est) - si_sdr(ref, mixture))
    separator.train()
    return float(np.median(improvements))


def train_separation(manifest: Manifest, corpus, enrol_ckpt: Checkpoint,
                     cfg: TrainConfig, out_dir, val_manifest: Manifest | None = None,
                     enrol_mode: str = "distilled") -> Path:
    """Stage 3: train the separator against frozen enrolment embeddings."""
    if cfg.stage != "separate":
        raise InvalidArgumentError(f"config stage {cfg.stage!r} != separate")
    if enrol_mode not in ("distilled", "clean-audio"):
        raise InvalidArgumentError(f"enrol_mode must be distilled|clean-audio, got {enrol_mode!r}")
    if enrol_mode == "clean-audio":
        if enrol_ckpt.stage != "teacher":
            raise StageError(
                f"clean-audio enrolment requires a teacher checkpoint, got {enrol_ckpt.stage!r}"
            )
    elif enrol_ckpt.stage not in ("distill", "finetune"):
        raise StageError(
            f"separation training requires a distill-stage enrolment checkpoint, got "
            f"{enrol_ckpt.stage!r} (use enrol_mode='clean-audio' for a teacher)"
        )
    configure_determinism()
    torch.manual_seed(cfg.seed)
    model_cfg = enrol_ckpt.config
    embedder = embedder_from_checkpoint(enrol_ckpt)
    frozen_hash_before = param_state_hash(embedder.net)
    plan_override = "clean_audio" if enrol_mode == "clean-audio" else None

    bank = _EntryBank(manifest, corpus, embedder, plan_override)
    val_bank = _EntryBank(val_manifest, corpus, embedder, plan_override) if val_manifest else None

    separator = Separator(model_cfg)
    optimizer = torch.optim.Adam(separator.parameters(), lr=cfg.lr)
    rng = rng_for("separate", cfg.seed)

    history: list[float] = []
    pos_hist: list[int] = []
    val_history: list[tuple[int, float]] = []
    for step in range(cfg.steps):
        idxs = [int(i) for i in rng.integers(0, len(bank), size=cfg.batch_size)]
        pos_n = [int(rng.choice(cfg.pos_counts)) for _ in idxs]
        neg_n = [int(rng.choice(cfg.neg_counts)) for _ in idxs]
        pos_hist.extend(pos_n)
        mix = torch.stack([bank.mixes[i] for i in idxs])
        target = torch.stack([bank.targets[i] for i in idxs])
        pos, pos_valid, neg, neg_valid = _conditioning_batch(
            bank, idxs, pos_n, neg_n, model_cfg.d_spk, rng
        )
        est = separator(mix, pos, neg, pos_valid, neg_valid)
        loss = separation_loss(est, target)
        optimizer.zero_grad()
        loss.backward()
        _set_lr(optimizer, _lr_at(cfg, step))
        optimizer.step()
        history.append(_guard_step(loss, "train_separation", out_dir, "separate", step,
                                   model_cfg, separator, {}))
        if val_bank is not None and cfg.checkpoint_every and \
                (step + 1) % cfg.checkpoint_every == 0:
            val_history.append((step + 1, _validate_separation(separator, val_bank,
                                                               cfg.val_entries)))
        _cadence_checkpoint(cfg, step, out_dir, "separate", model_cfg, separator, history)
    _check_loss_history(history, "train_separation")

    frozen_hash_after = param_state_hash(embedder.net)
    if frozen_hash_before != frozen_hash_after:
        raise DivergenceError("frozen enrolment parameters changed during separation training")

    val_final = (
        _validate_separation(separator, val_bank, cfg.val_entries)
        if val_bank is not None else None
    )
    meta = {
        "seed": cfg.seed,
        "config_hash": _config_hash(model_cfg, cfg),
        "train_config": cfg.to_dict(),
        "loss_history": history,
        "pos_count_histogram": {str(k): int(v) for k, v in
                                zip(*np.unique(pos_hist, return_counts=True))},
        "frozen_enrol_hash": frozen_hash_before,
        "enrol_mode": enrol_mode,
        "val_si_sdri_history": val_history,
        "val_si_sdri_final": val_final,
    }
    return save_checkpoint(out_dir, "separate", cfg.steps, model_cfg, separator, meta)


def finetune_end_to_end(manifest: Manifest, corpus, enrol_ckpt: Checkpoint,
                        sep_ckpt: Checkpoint, cfg: TrainConfig, out_dir,
                        val_manifest: Manifest | None = None) -> tuple[Path, Path]:
    """Stage 4: joint fine-tuning; gradients flow through the enrolment vectors.

    Validation SI-SDRi is tracked (start, cadence, end) and the best state is
    kept, so the returned pair never regresses below the pre-finetune value.
    """
    if cfg.stage != "finetune":
        raise InvalidArgumentError(f"config stage {cfg.stage!r} != finetune")
    if enrol_ckpt.stage not in ("distill", "finetune"):
        raise StageError(f"finetune needs a distilled enrolment network, got {enrol_ckpt.stage!r}")
    if sep_ckpt.stage not in ("separate", "finetune"):
        raise StageError(f"finetune needs a separation checkpoint, got {sep_ckpt.stage!r}")
    configure_determinism()
    torch.manual_seed(cfg.seed)
    model_cfg = sep_ckpt.config
    student = student_from_checkpoint(enrol_ckpt)
    separator = separator_from_checkpoint(sep_ckpt)
    student.train()
    separator.train()
    optimizer = torch.optim.Adam(
        list(student.parameters()) + list(separator.parameters()), lr=cfg.lr
    )
    rng = rng_for("separate", cfg.seed)  # same stream layout as train_separation

    frozen_embedder = EnrolmentEmbedder(student, "student")
    val_bank = (
        _EntryBank(val_manifest, corpus, frozen_embedder) if val_manifest is not None else None
    )

    entries = list(manifest.entries)

    def entry_inputs(entry, n_pos: int, n_neg: int, pick_rng):
        pos_entries = list(entry.enrolment.positives)
        neg_entries = list(entry.enrolment.negatives)
        picks_p = pick_rng.choice(len(pos_entries), size=n_pos, replace=False)
        chosen_p = [pos_entries[int(i)] for i in picks_p]
        chosen_n = []
        if n_neg > 0 and neg_entries:
            picks_n = pick_rng.choice(len(neg_entries), size=min(n_neg, len(neg_entries)),
                                      replace=False)
            chosen_n = [neg_entries[int(i)] for i in picks_n]
        return chosen_p, chosen_n

    mix_cache = {}

    def mixture_of(idx: int):
        if idx not in mix_cache:
            a_m, a_t, _ = build_mixture(entries[idx].mixture, corpus)
            mix_cache[idx] = (
                torch.as_tensor(a_m.samples, dtype=torch.float32),
                torch.as_tensor(a_t.samples, dtype=torch.float32),
            )
        return mix_cache[idx]

    best = {
        "val": -np.inf,
        "step": 0,
        "student": {k: v.clone() for k, v in student.state_dict().items()},
        "separator": {k: v.clone() for k, v in separator.state_dict().items()},
    }

    def consider(step: int):
        if val_bank is None:
            return
        val_bank_now = _EntryBank(val_manifest, corpus, EnrolmentEmbedder(student, "student"))
        score = _validate_separation(separator, val_bank_now, cfg.val_entries)
        val_history.append((step, score))
        if score > best["val"]:
            best.update(
                val=score, step=step,
                student={k: v.clone() for k, v in student.state_dict().items()},
                separator={k: v.clone() for k, v in separator.state_dict().items()},
            )

    val_history: list[tuple[int, float]] = []
    consider(0)
    pre_finetune_val = best["val"] if val_bank is not None else None

    history: list[float] = []
    for step in range(cfg.steps):
        idxs = [int(i) for i in rng.integers(0, len(entries), size=cfg.batch_size)]
        pos_n = [int(rng.choice(cfg.pos_counts)) for _ in idxs]
        neg_n = [int(rng.choice(cfg.neg_counts)) for _ in idxs]

        all_inputs: list[EnrolmentInput] = []
        slots: list[tuple[int, int, bool]] = []  # (row, slot, is_positive)
        for row, (idx, np_, nn_) in enumerate(zip(idxs, pos_n, neg_n)):
            chosen_p, chosen_n = entry_inputs(entries[idx], np_, nn_, rng)
            for j, e in enumerate(chosen_p):
                all_inputs.append(make_enrolment_input(corpus, e))
                slots.append((row, j, True))
            for j, e in enumerate(chosen_n):
                all_inputs.append(make_enrolment_input(corpus, e))
                slots.append((row, j, False))
        embeddings = student(all_inputs)

        b = len(idxs)
        max_p = max(pos_n)
        max_n = max(neg_n)
        pos = torch.zeros(b, max_p, model_cfg.d_spk)
        pos_valid = torch.zeros(b, max_p, dtype=torch.bool)
        neg = torch.zeros(b, max_n, model_cfg.d_spk)
        neg_valid = torch.zeros(b, max_n, dtype=torch.bool)
        # in-place index writes keep autograd through the student embeddings
        for (row, slot, is_pos), emb in zip(slots, embeddings):
            if is_pos:
                pos[row, slot] = emb
                pos_valid[row, slot] = True
            else:
                neg[row, slot] = emb
                neg_valid[row, slot] = True

        mix = torch.stack([mixture_of(i)[0] for i in idxs])
        target = torch.stack([mixture_of(i)[1] for i in idxs])
        est = separator(mix, pos, neg, pos_valid, neg_valid if max_n else None)
        loss = separation_loss(est, target)
        optimizer.zero_grad()
        loss.backward()
        _set_lr(optimizer, _lr_at(cfg, step))
        optimizer.step()
        history.append(_guard_step(loss, "finetune", out_dir, "finetune", step,
                                   model_cfg, separator, {}))
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            consider(step + 1)
    _check_loss_history(history, "finetune")
    consider(cfg.steps)

    if val_bank is not None:
        student.load_state_dict(best["student"])
        separator.load_state_dict(best["separator"])

    meta_common = {
        "seed": cfg.seed,
        "config_hash": _config_hash(model_cfg, cfg),
        "train_config": cfg.to_dict(),
        "loss_history": history,
        "first_step_loss": history[0] if history else None,
        "val_si_sdri_history": val_history,
        "pre_finetune_val_si_sdri": pre_finetune_val,
        "best_val_si_sdri": None if val_bank is None else best["val"],
        "best_step": best["step"],
    }
    out_dir = Path(out_dir)
    enrol_path = save_checkpoint(out_dir / "enrol", "finetune", cfg.steps, model_cfg,
                                 student, meta_common)
    sep_path = save_checkpoint(out_dir / "sep", "finetune", cfg.steps, model_cfg,
                               separator, meta_common)
    return enrol_path, sep_path
