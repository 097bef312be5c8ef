import numpy as np
import pytest

from voxvec.errors import InvalidArgumentError, ManifestError, NotFoundError
from voxvec.synth_corpus import (
    DiskCorpus,
    ProceduralCorpus,
    face_feature,
    generate_utterance,
    make_speakers,
    read_vvft,
    write_corpus,
    write_vvft,
)


def nearest_centroid_accuracy(train_feats, train_labels, test_feats, test_labels):
    labels = sorted(set(train_labels))
    centroids = {
        lab: np.mean([f for f, l in zip(train_feats, train_labels) if l == lab], axis=0)
        for lab in labels
    }
    correct = 0
    for feat, lab in zip(test_feats, test_labels):
        best = min(labels, key=lambda l: np.linalg.norm(feat - centroids[l]))
        correct += best == lab
    return correct / len(test_labels)


def log_band_energies(wave, n_bands=24):
    spec = np.abs(np.fft.rfft(wave.samples)) ** 2
    edges = np.linspace(0, len(spec), n_bands + 1).astype(int)
    return np.log(np.array([spec[a:b].sum() for a, b in zip(edges[:-1], edges[1:])]) + 1e-12)


class TestMakeSpeakers:
    def test_deterministic(self):
        a = make_speakers(1, seed=7)[0]
        b = make_speakers(1, seed=7)[0]
        assert a == b

    def test_twenty_speakers_separable(self):
        speakers = make_speakers(20, seed=1)
        assert len({s.speaker_id for s in speakers}) == 20
        f0s = sorted(s.f0 for s in speakers)
        min_gap = min(b - a for a, b in zip(f0s, f0s[1:]))
        assert min_gap >= 5.0

    def test_zero_rejected(self):
        with pytest.raises(InvalidArgumentError):
            make_speakers(0, seed=1)

    def test_formants_increasing(self):
        for spk in make_speakers(10, seed=3):
            centers = [c for c, _ in spk.formants]
            assert centers == sorted(centers)
            assert 90.0 <= spk.f0 <= 300.0


class TestGenerateUtterance:
    def test_bit_identical_regeneration(self):
        spk = make_speakers(1, seed=2)[0]
        a = generate_utterance(spk, 2.0, seed=5)
        b = generate_utterance(spk, 2.0, seed=5)
        assert np.array_equal(a.audio.samples, b.audio.samples)
        assert np.array_equal(a.visual.data, b.visual.data)

    def test_four_second_lengths(self):
        spk = make_speakers(1, seed=2)[0]
        utt = generate_utterance(spk, 4.0, seed=1)
        assert len(utt.audio) == 64000
        assert utt.visual.frames == 100
        assert utt.audio.sample_rate == 16000
        assert utt.visual.frame_rate == 25

    def test_spectral_peak_on_harmonic(self):
        for i, spk in enumerate(make_speakers(5, seed=9)):
            utt = generate_utterance(spk, 4.0, seed=100 + i)
            spec = np.abs(np.fft.rfft(utt.audio.samples))
            peak_hz = np.argmax(spec) * 16000 / len(utt.audio)
            harmonic = round(peak_hz / spk.f0)
            assert harmonic >= 1
            assert abs(peak_hz - harmonic * spk.f0) <= 3.0, (spk.f0, peak_hz)

    def test_rms_normalised(self):
        spk = make_speakers(1, seed=4)[0]
        utt = generate_utterance(spk, 3.0, seed=0)
        assert utt.audio.rms() == pytest.approx(0.1, rel=1e-6)

    def test_duration_out_of_range(self):
        spk = make_speakers(1, seed=2)[0]
        for bad in (0.5, 31.0):
            with pytest.raises(InvalidArgumentError):
                generate_utterance(spk, bad, seed=0)


class TestFaceFeature:
    def test_deterministic_and_dimension(self):
        spk = make_speakers(1, seed=11)[0]
        a = face_feature(spk, d_f=32)
        b = face_feature(spk, d_f=32)
        assert np.array_equal(a.values, b.values)
        assert a.dim == 32
        assert face_feature(spk, d_f=128).dim == 128

    def test_pairwise_cosine_bounded(self):
        speakers = make_speakers(20, seed=12)
        vecs = [face_feature(s).values for s in speakers]
        worst = 0.0
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                cos = float(
                    np.dot(vecs[i], vecs[j])
                    / (np.linalg.norm(vecs[i]) * np.linalg.norm(vecs[j]))
                )
                worst = max(worst, cos)
        assert worst < 0.95


@pytest.fixture(scope="module")
def corpus():
    return ProceduralCorpus(n_speakers=20, utterances_per_speaker=10, seed=21, duration_s=2.0)


class TestIdentityInformation:
    """Nearest-centroid checks licensing the audio and video-only pathways."""

    def test_visual_features_identify_speaker(self, corpus):
        train_f, train_l, test_f, test_l = [], [], [], []
        for sid in corpus.speaker_ids:
            for k, rid in enumerate(corpus.recording_ids(sid)):
                feat = corpus.utterance(sid, rid).visual.data.mean(axis=0)
                if k < 7:
                    train_f.append(feat)
                    train_l.append(sid)
                else:
                    test_f.append(feat)
                    test_l.append(sid)
        assert nearest_centroid_accuracy(train_f, train_l, test_f, test_l) >= 0.90

    def test_audio_band_energies_identify_speaker(self, corpus):
        train_f, train_l, test_f, test_l = [], [], [], []
        for sid in corpus.speaker_ids:
            for k, rid in enumerate(corpus.recording_ids(sid)):
                feat = log_band_energies(corpus.utterance(sid, rid).audio)
                if k < 7:
                    train_f.append(feat)
                    train_l.append(sid)
                else:
                    test_f.append(feat)
                    test_l.append(sid)
        assert nearest_centroid_accuracy(train_f, train_l, test_f, test_l) >= 0.90


class TestCorpusIo:
    def test_vvft_round_trip(self, tmp_path):
        data = np.random.default_rng(0).standard_normal((7, 5)).astype(np.float32)
        path = tmp_path / "x.vvft"
        write_vvft(path, data)
        back = read_vvft(path)
        assert back.shape == (7, 5)
        assert np.array_equal(back.astype(np.float32), data)

    def test_vvft_bad_magic(self, tmp_path):
        path = tmp_path / "x.vvft"
        path.write_bytes(b"JUNKxxxxxxxx")
        with pytest.raises(ManifestError):
            read_vvft(path)

    def test_disk_corpus_round_trip(self, tmp_path):
        corpus = ProceduralCorpus(3, 2, seed=5, duration_s=1.5)
        write_corpus(corpus, tmp_path / "c")
        disk = DiskCorpus(tmp_path / "c")
        assert disk.speaker_ids == corpus.speaker_ids
        sid = corpus.speaker_ids[0]
        rid = corpus.recording_ids(sid)[0]
        mem = corpus.utterance(sid, rid)
        loaded = disk.utterance(sid, rid)
        assert np.max(np.abs(mem.audio.samples - loaded.audio.samples)) <= 1e-6
        assert np.max(np.abs(mem.visual.data - loaded.visual.data)) <= 1e-6
        assert np.max(np.abs(corpus.face(sid).values - disk.face(sid).values)) <= 1e-7

    def test_unknown_ids_raise(self):
        corpus = ProceduralCorpus(2, 2, seed=5, duration_s=1.0)
        with pytest.raises(NotFoundError):
            corpus.utterance("spk999", "u000")
        with pytest.raises(NotFoundError):
            corpus.utterance(corpus.speaker_ids[0], "u999")
