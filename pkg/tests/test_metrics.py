import json

import numpy as np
import pytest

from voxvec.audio_core import Waveform
from voxvec.errors import DegenerateInputError, InvalidArgumentError
from voxvec.metrics import (
    MetricReport,
    grid_tag,
    parse_grid,
    render_table,
    run_pesq_cmd,
    sdr,
    si_sdr,
    si_sdr_improvement,
    stoi,
)
from voxvec.synth_corpus import make_speakers, generate_utterance


@pytest.fixture(scope="module")
def speech():
    spk = make_speakers(1, seed=33)[0]
    return generate_utterance(spk, 4.0, seed=1).audio


def orthogonal_noise(ref: np.ndarray, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(ref.shape[0])
    raw -= np.dot(raw, ref) / np.dot(ref, ref) * ref
    raw *= np.linalg.norm(ref) / np.linalg.norm(raw)
    assert abs(np.dot(raw, ref)) <= 1e-6 * np.dot(ref, ref)  # inner-product oracle
    return raw


class TestSdr:
    def test_perfect_estimate_caps(self, speech):
        assert sdr(speech, speech) == 60.0

    def test_orthogonal_equal_power_noise_is_zero(self, speech):
        ref = speech.samples
        est = ref + orthogonal_noise(ref, seed=2)
        assert abs(sdr(ref, est)) <= 0.01

    def test_zero_estimate_is_zero_db(self, speech):
        assert sdr(speech.samples, np.zeros(len(speech))) == pytest.approx(0.0, abs=1e-12)

    def test_silent_reference_rejected(self):
        with pytest.raises(DegenerateInputError):
            sdr(np.zeros(100), np.ones(100))

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            sdr(np.ones(10), np.ones(11))


class TestSiSdr:
    def test_scaled_estimate_caps(self, speech):
        assert si_sdr(speech.samples, 2.0 * speech.samples) == 60.0

    def test_scale_invariance(self, speech):
        ref = speech.samples
        est = ref + 0.3 * orthogonal_noise(ref, seed=3)
        base = si_sdr(ref, est)
        rng = np.random.default_rng(4)
        for _ in range(50):
            c = float(rng.uniform(-4, 4))
            if abs(c) < 1e-3:
                continue
            assert abs(si_sdr(ref, c * est) - base) <= 1e-9

    def test_optimal_scale_identity(self, speech):
        # si_sdr(ref, alpha* . est) == si_sdr(ref, est) where alpha* is optimal.
        ref = speech.samples
        est = 0.7 * ref + 0.2 * orthogonal_noise(ref, seed=5)
        alpha = np.dot(est, ref) / np.dot(ref, ref)
        assert abs(si_sdr(ref, alpha * est) - si_sdr(ref, est)) <= 1e-9

    def test_improvement_definition(self, speech):
        ref = speech.samples
        mix = ref + orthogonal_noise(ref, seed=6)
        est = ref + 0.5 * orthogonal_noise(ref, seed=6)
        assert si_sdr_improvement(ref, est, mix) == pytest.approx(
            si_sdr(ref, est) - si_sdr(ref, mix)
        )


class TestStoi:
    def test_identity_is_one(self, speech):
        assert stoi(speech, speech) == pytest.approx(1.0, abs=1e-6)

    def test_independent_noise_scores_near_zero(self, speech):
        values = []
        for trial in range(10):
            rng = np.random.default_rng(100 + trial)
            est = Waveform(0.1 * rng.standard_normal(len(speech)), speech.sample_rate)
            values.append(stoi(speech, est))
        assert all(abs(v) < 0.1 for v in values), values

    def test_monotone_under_noise_sweep(self, speech):
        rng = np.random.default_rng(9)
        noise = rng.standard_normal(len(speech))
        noise /= np.sqrt(np.mean(noise**2))
        scores = []
        for snr_db in (20.0, 10.0, 0.0, -10.0):
            scale = speech.rms() * 10.0 ** (-snr_db / 20.0)
            est = Waveform(speech.samples + scale * noise, speech.sample_rate)
            scores.append(stoi(speech, est))
        assert scores == sorted(scores, reverse=True), scores

    def test_silent_frames_are_removed(self, speech):
        # Appending true silence to both signals must not change the score much.
        rng = np.random.default_rng(15)
        noise = rng.standard_normal(len(speech)) * speech.rms() * 0.2
        est = Waveform(speech.samples + noise, speech.sample_rate)
        base = stoi(speech, est)
        pad = np.zeros(16000)
        ref_p = Waveform(np.concatenate([speech.samples, pad]), speech.sample_rate)
        est_p = Waveform(np.concatenate([est.samples, pad]), speech.sample_rate)
        assert stoi(ref_p, est_p) == pytest.approx(base, abs=0.02)

    def test_too_short_rejected(self):
        w = Waveform(np.random.default_rng(0).standard_normal(1600) * 0.1, 16000)
        with pytest.raises(InvalidArgumentError):
            stoi(w, w)

    def test_length_mismatch_rejected(self, speech):
        other = Waveform(speech.samples[:-1], speech.sample_rate)
        with pytest.raises(InvalidArgumentError):
            stoi(speech, other)


class TestReport:
    def make_report(self):
        report = MetricReport(tag=grid_tag(3, 2))
        report.add(example=0, sdr_db=10.0, si_sdr_db=9.0, si_sdri_db=4.0, stoi=0.9, pesq=None)
        report.add(example=1, sdr_db=12.0, si_sdr_db=11.0, si_sdri_db=6.0, stoi=0.8, pesq=None)
        return report

    def test_tag_format(self):
        assert grid_tag(3, 2) == "3pos|2neg"

    def test_aggregates_recompute_from_rows(self):
        report = self.make_report()
        agg = report.aggregate("median")
        assert agg["sdr_db"] == 11.0
        assert agg["si_sdri_db"] == 5.0
        assert agg["pesq"] is None
        mean = report.aggregate("mean")
        assert mean["stoi"] == pytest.approx(0.85)

    def test_jsonl_round_trip(self):
        report = self.make_report()
        lines = report.to_jsonl().strip().split("\n")
        rows = [json.loads(line) for line in lines]
        assert rows == report.rows

    def test_render_table_has_tags_and_x100(self):
        text = render_table([self.make_report()])
        assert "3pos|2neg" in text
        assert "STOI x100" in text
        assert "85" in text  # 0.85 * 100 rendered for the x100 row

    def test_parse_grid(self):
        assert parse_grid("1:0,1:1,3:2,3:3") == [(1, 0), (1, 1), (3, 2), (3, 3)]
        with pytest.raises(InvalidArgumentError):
            parse_grid("0:1")
        with pytest.raises(InvalidArgumentError):
            parse_grid("1-2")


class TestPesqHook:
    def test_external_scorer_invoked(self, tmp_path, speech):
        script = tmp_path / "fake_pesq.sh"
        script.write_text("#!/bin/sh\necho 3.14\n")
        script.chmod(0o755)
        value = run_pesq_cmd(str(script), speech, speech)
        assert value == pytest.approx(3.14)

    def test_missing_scorer_returns_none(self, speech):
        assert run_pesq_cmd("/nonexistent/pesq-binary", speech, speech) is None
