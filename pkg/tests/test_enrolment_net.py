import numpy as np
import pytest
import torch

from fdutil import fd_check
from voxvec.audio_core import Waveform
from voxvec.dataset_forge import EnrolmentEntry
from voxvec.enrolment_net import (
    EnrolmentInput,
    EnrolmentVector,
    StudentNet,
    TeacherNet,
    enrolment_loss,
    make_enrolment_input,
    noise_enrolment_audio,
    student_embed,
    teacher_embed,
)
from voxvec.errors import InvalidArgumentError, StageError
from voxvec.nn_blocks import EmbeddingVector, ModelConfig
from voxvec.synth_corpus import ProceduralCorpus


@pytest.fixture(scope="module")
def cfg():
    return ModelConfig()


@pytest.fixture(scope="module")
def corpus():
    return ProceduralCorpus(n_speakers=4, utterances_per_speaker=3, seed=7, duration_s=4.0)


@pytest.fixture(scope="module")
def teacher(cfg):
    torch.manual_seed(11)
    return TeacherNet(cfg)


@pytest.fixture(scope="module")
def student(cfg):
    torch.manual_seed(12)
    return StudentNet(cfg)


class TestTeacher:
    def test_deterministic_and_dimension(self, teacher, corpus, cfg):
        utt = corpus.utterance(corpus.speaker_ids[0], "u000")
        a = teacher_embed(teacher, utt.audio)
        b = teacher_embed(teacher, utt.audio)
        assert np.array_equal(a.values, b.values)
        assert a.dim == cfg.d_spk

    def test_paper_scale_dimension(self, corpus):
        torch.manual_seed(1)
        paper = TeacherNet(ModelConfig.paper_scale())
        utt = corpus.utterance(corpus.speaker_ids[0], "u000")
        assert teacher_embed(paper, utt.audio).dim == 192

    def test_short_audio_rejected(self, teacher):
        w = Waveform(np.zeros(8000), 16000)
        with pytest.raises(InvalidArgumentError):
            teacher_embed(teacher, w)


class TestEnrolmentInput:
    def test_tag_consistency_enforced(self, corpus):
        utt = corpus.utterance(corpus.speaker_ids[0], "u000")
        with pytest.raises(InvalidArgumentError):
            EnrolmentInput(modality_tag="visual_only", audio=utt.audio)
        with pytest.raises(InvalidArgumentError):
            EnrolmentInput(modality_tag="noisy_audio+visual", audio=utt.audio)
        with pytest.raises(InvalidArgumentError):
            EnrolmentInput(modality_tag="face_only")

    def test_role_validation(self):
        vec = EmbeddingVector(np.zeros(8))
        EnrolmentVector(vec, "positive", "visual_only")
        with pytest.raises(InvalidArgumentError):
            EnrolmentVector(vec, "sideways", "visual_only")

    def test_make_input_plans(self, corpus):
        sid = corpus.speaker_ids[0]
        entry = EnrolmentEntry(sid, "u001", 0, "visual+face")
        x = make_enrolment_input(corpus, entry)
        assert x.audio is None and x.visual is not None and x.face is not None
        clean = make_enrolment_input(corpus, entry, plan="clean_audio")
        noisy = make_enrolment_input(corpus, entry, plan="noisy_audio_only")
        assert np.array_equal(
            clean.audio.samples, corpus.utterance(sid, "u001").audio.samples
        )
        assert not np.array_equal(clean.audio.samples, noisy.audio.samples)

    def test_noising_deterministic(self, corpus):
        utt = corpus.utterance(corpus.speaker_ids[0], "u000")
        a = noise_enrolment_audio(utt.audio, seed=3)
        b = noise_enrolment_audio(utt.audio, seed=3)
        c = noise_enrolment_audio(utt.audio, seed=4)
        assert np.array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)


class TestStudent:
    def test_concat_length_all_modalities(self, student, corpus):
        sid = corpus.speaker_ids[0]
        utt = corpus.utterance(sid, "u000")
        x = EnrolmentInput(
            modality_tag="noisy_audio+visual", audio=utt.audio, visual=utt.visual
        )
        _, _, lengths = student.assemble([x])
        assert lengths == [250 + 100]
        # with the face frame the sum is t_a' + t_v + 1
        y = make_enrolment_input(corpus, EnrolmentEntry(sid, "u000", 0, "visual+face"))
        full = EnrolmentInput(
            modality_tag="clean_audio+visual", audio=utt.audio, visual=utt.visual
        )
        _, _, l2 = student.assemble([full, y])
        assert l2[0] == 350 and l2[1] == 101

    def test_visual_only_valid_output(self, student, corpus, cfg):
        sid = corpus.speaker_ids[1]
        x = make_enrolment_input(corpus, EnrolmentEntry(sid, "u000", 0, "visual_only"))
        _, _, lengths = student.assemble([x])
        assert lengths == [100]
        emb = student_embed(student, x)
        assert emb.dim == cfg.d_spk
        assert np.all(np.isfinite(emb.values))

    def test_padding_invariance(self, student, corpus):
        sid = corpus.speaker_ids[0]
        x = make_enrolment_input(corpus, EnrolmentEntry(sid, "u000", 0, "noisy_audio+visual"))
        solo = student_embed(student, x)
        partner = make_enrolment_input(
            corpus, EnrolmentEntry(corpus.speaker_ids[1], "u001", 0, "clean_audio+visual")
        )
        with torch.no_grad():
            batched = student([x, partner])
        assert np.max(np.abs(batched[0].double().numpy() - solo.values)) <= 1e-6

    def test_face_only_input(self, student, corpus, cfg):
        x = make_enrolment_input(
            corpus, EnrolmentEntry(corpus.speaker_ids[2], "u000", 0, "face_only")
        )
        # the lone face token is doubled so pooled statistics stay defined
        _, _, lengths = student.assemble([x])
        assert lengths == [2]
        assert student_embed(student, x).dim == cfg.d_spk

    def test_empty_batch_rejected(self, student):
        with pytest.raises(InvalidArgumentError):
            student([])

    def test_teacher_student_dimensions_match(self, teacher, student, corpus):
        utt = corpus.utterance(corpus.speaker_ids[0], "u000")
        t = teacher_embed(teacher, utt.audio)
        s = student_embed(
            student,
            EnrolmentInput(modality_tag="clean_audio", audio=utt.audio),
        )
        assert t.dim == s.dim

    def test_init_from_teacher_copies_extractor(self, cfg, teacher):
        torch.manual_seed(5)
        fresh = StudentNet(cfg)
        fresh.init_from_teacher(teacher)
        for key, value in teacher.extractor.state_dict().items():
            assert torch.equal(fresh.extractor.state_dict()[key], value)


class TestEnrolmentLoss:
    def test_identical_vectors(self):
        v = EmbeddingVector(np.linspace(-1, 1, 16))
        assert enrolment_loss(v, v) == 0.0

    def test_constant_offset(self):
        a = np.linspace(-1, 1, 16)
        assert enrolment_loss(a + 1.0, a) == pytest.approx(1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            enrolment_loss(np.zeros(4), np.zeros(5))

    def test_gradient_matches_finite_differences(self):
        # Keep coordinates away from the |.| kink.
        for seed in range(5):
            rng = np.random.default_rng(seed)
            base = rng.uniform(0.2, 1.0, 24) * rng.choice([-1.0, 1.0], 24)
            pred = torch.tensor(base + 0.5, dtype=torch.float64, requires_grad=True)
            target = torch.tensor(base - 0.5, dtype=torch.float64)

            def fn(p):
                return enrolment_loss(p, target)

            fd_check(fn, [pred], n_coords=10, rtol=1e-6, seed=seed)
