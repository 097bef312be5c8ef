import numpy as np
import pytest
import torch

from fdutil import fd_check, scalar_probe
from voxvec.errors import InvalidArgumentError
from voxvec.nn_blocks import (
    AudioDecoder,
    AudioEncoder,
    EmbeddingVector,
    FeatureSequence,
    ModalityProjector,
    ModelConfig,
    SpeakerExtractor,
    TransformerEncoder,
    sinusoidal_positions,
)


@pytest.fixture(scope="module")
def cfg():
    return ModelConfig()


def make(module_cls, cfg, seed=0, **kwargs):
    torch.manual_seed(seed)
    return module_cls(cfg, **kwargs)


class TestModelConfig:
    def test_defaults(self, cfg):
        assert cfg.d_model == 64 and cfg.n_layers == 3 and cfg.n_heads == 8
        assert cfg.audio_downsample_factor == 256

    def test_paper_scale(self):
        paper = ModelConfig.paper_scale()
        assert paper.d_model == 768 and paper.d_spk == 192
        assert paper.d_v == 512 and paper.d_f == 128

    def test_head_divisibility_enforced(self):
        with pytest.raises(InvalidArgumentError):
            ModelConfig(d_model=30, n_heads=8)

    def test_round_trip_dict(self, cfg):
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestFeatureTypes:
    def test_feature_sequence_validation(self):
        with pytest.raises(InvalidArgumentError):
            FeatureSequence(np.zeros((2, 2, 2)), 25)
        with pytest.raises(InvalidArgumentError):
            FeatureSequence(np.array([[np.inf, 0.0]]), 25)
        seq = FeatureSequence(np.zeros((10, 4)), 25)
        assert seq.frames == 10 and seq.channels == 4

    def test_embedding_validation(self):
        with pytest.raises(InvalidArgumentError):
            EmbeddingVector(np.zeros((2, 2)))
        assert EmbeddingVector(np.zeros(32)).dim == 32


class TestAudioEncoder:
    def test_frame_arithmetic(self, cfg):
        enc = make(AudioEncoder, cfg)
        for n, expected in [(64000, 250), (64001, 251), (16000, 63), (256, 1), (255, 1)]:
            latent, _ = enc(torch.zeros(1, n))
            assert latent.shape == (1, expected, cfg.d_model), n

    def test_doubling_length_doubles_frames(self, cfg):
        enc = make(AudioEncoder, cfg)
        torch.manual_seed(1)
        for n in (10000, 30000):
            f1 = enc(torch.randn(1, n))[0].shape[1]
            f2 = enc(torch.randn(1, 2 * n))[0].shape[1]
            assert abs(f2 - 2 * f1) <= 1

    def test_zero_waveform_finite(self, cfg):
        enc = make(AudioEncoder, cfg)
        latent, skips = enc(torch.zeros(2, 4096))
        assert torch.isfinite(latent).all()
        assert all(torch.isfinite(s).all() for s in skips)

    def test_empty_rejected(self, cfg):
        enc = make(AudioEncoder, cfg)
        with pytest.raises(InvalidArgumentError):
            enc(torch.zeros(1, 0))

    def test_deterministic(self, cfg):
        enc = make(AudioEncoder, cfg, seed=3)
        x = torch.randn(1, 5000, generator=torch.Generator().manual_seed(4))
        a, _ = enc(x)
        b, _ = enc(x)
        assert torch.equal(a, b)


class TestAudioDecoder:
    def test_round_shape(self, cfg):
        enc = make(AudioEncoder, cfg)
        dec = make(AudioDecoder, cfg, seed=1)
        for n in (16000, 64000, 64001, 999):
            latent, skips = enc(torch.randn(1, n))
            out = dec(latent, skips, n)
            assert out.shape == (1, n)

    def test_zero_bottleneck_and_skips_give_zero(self, cfg):
        enc = make(AudioEncoder, cfg)
        dec = make(AudioDecoder, cfg, seed=1)
        latent, skips = enc(torch.zeros(1, 8192))
        out = dec(torch.zeros_like(latent), [torch.zeros_like(s) for s in skips], 8192)
        assert out.abs().max().item() <= 1e-7

    def test_skip_mismatch_names_stage(self, cfg):
        enc = make(AudioEncoder, cfg)
        dec = make(AudioDecoder, cfg, seed=1)
        latent, skips = enc(torch.randn(1, 4096))
        bad = list(skips)
        bad[-1] = bad[-1][:, :, :-8]
        with pytest.raises(InvalidArgumentError, match="stage 0"):
            dec(latent, bad, 4096)
        with pytest.raises(InvalidArgumentError, match="skip tensors"):
            dec(latent, skips[:-1], 4096)


class TestTransformer:
    def test_shape_preserved(self, cfg):
        tr = make(TransformerEncoder, cfg)
        x = torch.randn(2, 17, cfg.d_model)
        assert tr(x).shape == x.shape

    def test_channel_mismatch_rejected(self, cfg):
        tr = make(TransformerEncoder, cfg)
        with pytest.raises(InvalidArgumentError):
            tr(torch.randn(1, 5, cfg.d_model + 1))

    def test_attention_rows_sum_to_one(self, cfg):
        tr = make(TransformerEncoder, cfg)
        x = torch.randn(2, 9, cfg.d_model)
        valid = torch.ones(2, 9, dtype=torch.bool)
        valid[1, 6:] = False
        _, maps = tr(x, valid, return_attention=True)
        for amap in maps:
            sums = amap.sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_masked_frame_permutation_invariance(self, cfg):
        tr = make(TransformerEncoder, cfg, seed=5)
        torch.manual_seed(6)
        x = torch.randn(1, 12, cfg.d_model)
        valid = torch.ones(1, 12, dtype=torch.bool)
        valid[0, 8:] = False
        base = tr(x, valid)
        # permute (and even rewrite) the padded frames
        perm = x.clone()
        perm[0, 8:] = x[0, torch.tensor([10, 11, 8, 9])]
        out = tr(perm, valid)
        assert (out[0, :8] - base[0, :8]).abs().max().item() <= 1e-6
        junk = x.clone()
        junk[0, 8:] = 1e3
        out_junk = tr(junk, valid)
        assert (out_junk[0, :8] - base[0, :8]).abs().max().item() <= 1e-6

    def test_permutation_equivariance_without_positions(self, cfg):
        # No positional encodings are applied inside the block, so outputs
        # must permute with inputs.
        torch.manual_seed(7)
        tr = TransformerEncoder(cfg).double()
        x = torch.randn(1, 10, cfg.d_model, dtype=torch.float64)
        perm = torch.randperm(10, generator=torch.Generator().manual_seed(8))
        out_then_perm = tr(x)[:, perm]
        perm_then_out = tr(x[:, perm])
        assert (out_then_perm - perm_then_out).abs().max().item() <= 1e-6

    def test_sinusoidal_table_shape(self, cfg):
        table = sinusoidal_positions(50, cfg.d_model)
        assert table.shape == (50, cfg.d_model)
        assert torch.isfinite(table).all()


class TestSpeakerExtractor:
    def test_output_dimension(self, cfg):
        se = make(SpeakerExtractor, cfg)
        out = se(torch.randn(3, 25, cfg.d_model))
        assert out.shape == (3, cfg.d_spk)
        paper = ModelConfig.paper_scale()
        torch.manual_seed(0)
        assert SpeakerExtractor(paper)(torch.randn(1, 10, paper.d_model)).shape == (1, 192)

    def test_constant_input_has_zero_std(self, cfg):
        se = make(SpeakerExtractor, cfg)
        x = torch.randn(1, 1, cfg.d_model).repeat(1, 20, 1)
        _, std = se.pooled_stats(x)
        assert std.abs().max().item() <= 1e-3

    def test_time_reversal_insensitive_at_init(self, cfg):
        # Residual branches and attention scores are zero-initialised, so the
        # pooling is order-insensitive until training breaks the symmetry.
        se = make(SpeakerExtractor, cfg, seed=9)
        torch.manual_seed(10)
        x = torch.randn(1, 30, cfg.d_model)
        fwd = se(x)
        rev = se(torch.flip(x, dims=[1]))
        assert (fwd - rev).abs().max().item() <= 1e-5

    def test_too_few_frames_rejected(self, cfg):
        se = make(SpeakerExtractor, cfg)
        with pytest.raises(InvalidArgumentError):
            se(torch.randn(1, 1, cfg.d_model))


class TestModalityProjector:
    def test_face_vector_becomes_one_frame(self, cfg):
        proj = ModalityProjector(cfg.d_f, cfg.d_model)
        out = proj(torch.randn(2, cfg.d_f))
        assert out.shape == (2, 1, cfg.d_model)

    def test_visual_sequence_channels(self, cfg):
        proj = ModalityProjector(cfg.d_v, cfg.d_model)
        out = proj(torch.randn(2, 100, cfg.d_v))
        assert out.shape == (2, 100, cfg.d_model)

    def test_frame_count_preserved_for_d_model_input(self, cfg):
        proj = ModalityProjector(cfg.d_model, cfg.d_model)
        out = proj(torch.randn(1, 37, cfg.d_model))
        assert out.shape == (1, 37, cfg.d_model)


class TestGradients:
    """Analytic gradients vs central finite differences (float64, step 1e-5)."""

    def test_audio_encoder_grad(self, cfg):
        for seed in range(5):
            torch.manual_seed(seed)
            enc = AudioEncoder(cfg).double()
            x = torch.randn(1, 700, dtype=torch.float64, requires_grad=True)

            def fn(inp):
                latent, _ = enc(inp)
                return scalar_probe(latent, seed=seed)

            fd_check(fn, [x], n_coords=6, seed=seed)

    def test_audio_decoder_grad_wrt_skip(self, cfg):
        for seed in range(5):
            torch.manual_seed(seed)
            enc = AudioEncoder(cfg).double()
            dec = AudioDecoder(cfg).double()
            x = torch.randn(1, 600, dtype=torch.float64)
            latent, skips = enc(x)
            latent = latent.detach().requires_grad_(True)
            skip0 = skips[0].detach().requires_grad_(True)
            rest = [s.detach() for s in skips[1:]]

            def fn(lat, sk):
                return scalar_probe(dec(lat, [sk, *rest], 600), seed=seed)

            fd_check(fn, [latent, skip0], n_coords=6, seed=seed)

    def test_transformer_grad(self, cfg):
        for seed in range(5):
            torch.manual_seed(seed)
            tr = TransformerEncoder(cfg).double()
            x = torch.randn(1, 6, cfg.d_model, dtype=torch.float64, requires_grad=True)

            def fn(inp):
                return scalar_probe(tr(inp), seed=seed)

            fd_check(fn, [x], n_coords=8, seed=seed)

    def test_speaker_extractor_grad(self, cfg):
        for seed in range(5):
            torch.manual_seed(seed + 20)
            se = SpeakerExtractor(cfg).double()
            # Break the zero-init symmetry so gradients exercise every path.
            with torch.no_grad():
                for p in se.parameters():
                    p.add_(0.05 * torch.randn_like(p))
            x = torch.randn(1, 8, cfg.d_model, dtype=torch.float64, requires_grad=True)

            def fn(inp):
                return scalar_probe(se(inp), seed=seed)

            fd_check(fn, [x], n_coords=8, seed=seed)

    def test_projector_grad(self, cfg):
        for seed in range(5):
            torch.manual_seed(seed)
            proj = ModalityProjector(cfg.d_v, cfg.d_model).double()
            x = torch.randn(1, 4, cfg.d_v, dtype=torch.float64, requires_grad=True)

            def fn(inp):
                return scalar_probe(proj(inp), seed=seed)

            fd_check(fn, [x], n_coords=8, seed=seed)
