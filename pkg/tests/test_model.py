"""Full-architecture contracts: encoders, latent projection, the batch
alignment loss, fusion, teacher-forced decoding, generation, and the
checkpoint format."""

import math
from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from crosscap import model as M
from crosscap import tensor as T
from crosscap.model import CaptionModel, ModelConfig
from crosscap.tensor import Tensor

BOS, EOS = 1, 2


def tiny_config(**overrides):
    base = dict(n_feat=4, d_m=8, d_t=8, d_z=8, d_k=8, d_ff=16, heads=2,
                n_music_layers=1, n_lyric_layers=1, n_decoder_layers=1,
                conv_layers=((2, 2),), vocab_size=32, max_len=16, tau=0.07)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_batch(rng, cfg, n=2, l_raw=8, l_lyr=5, l_cap=6):
    batch = []
    for _ in range(n):
        words = rng.integers(4, cfg.vocab_size, l_cap - 2).tolist()
        batch.append(SimpleNamespace(
            music=rng.standard_normal((l_raw, cfg.n_feat)),
            lyrics=[BOS] + rng.integers(4, cfg.vocab_size,
                                        l_lyr).tolist() + [EOS],
            caption=[BOS] + words + [EOS],
        ))
    return batch


class TestEncoders:
    rng = np.random.default_rng(21)

    def test_music_stride_arithmetic(self):
        cfg = ModelConfig(conv_layers=((4, 2), (4, 2)))
        model = CaptionModel(cfg, seed=0)
        h = model.encode_music(self.rng.standard_normal((64, cfg.n_feat)))
        assert h.shape == (16, cfg.d_m)

    def test_music_too_short_raises(self):
        model = CaptionModel(tiny_config(), seed=0)
        with pytest.raises(ValueError, match="shorter"):
            model.encode_music(self.rng.standard_normal((1, 4)))

    def test_zero_input_gives_positional_response(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=3)
        enc = model.music_encoder
        for conv in enc.convs:
            conv.bias.data[:] = 0.0
        out = model.encode_music(np.zeros((8, cfg.n_feat))).data
        # reference: the transformer applied to the positional rows alone
        h = T.gather_rows(enc.position_table, np.arange(4))
        for layer in enc.layers:
            h = layer(h)
        ref = enc.final_norm(h).data
        assert np.array_equal(out, ref)

    def test_lyrics_shapes_and_bounds(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=0)
        h = model.encode_lyrics([BOS, 5, 6, EOS])
        assert h.shape == (4, cfg.d_t)
        with pytest.raises(ValueError):
            model.encode_lyrics([])
        with pytest.raises(IndexError):
            model.encode_lyrics(list(range(4, 4 + cfg.max_len + 1)))


class TestLatents:
    rng = np.random.default_rng(22)

    def test_constant_rows_match_direct_projection(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=1)
        c = self.rng.standard_normal(cfg.d_m)
        h = Tensor(np.tile(c, (5, 1)))
        z = model.alignment.music_latent(h).data
        raw = c @ model.alignment.project_music.weight.data
        assert_allclose(z, raw / np.linalg.norm(raw), atol=1e-12)

    def test_unit_norm(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=1)
        for _ in range(5):
            h_m = Tensor(self.rng.standard_normal((6, cfg.d_m)))
            h_t = Tensor(self.rng.standard_normal((4, cfg.d_t)))
            code = model.project_latents(h_m, h_t)
            assert abs(np.linalg.norm(code.z_m.data) - 1.0) < 1e-10
            assert abs(np.linalg.norm(code.z_t.data) - 1.0) < 1e-10

    def test_gradients_through_projection(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=1)
        h = Tensor(self.rng.standard_normal((3, cfg.d_m)),
                   requires_grad=True)
        probe = Tensor(self.rng.standard_normal(cfg.d_z))

        def f():
            return T.sum_all(T.mul(model.alignment.music_latent(h), probe))

        report = T.finite_diff_check(
            f, [h, model.alignment.project_music.weight], h=1e-5)
        assert report.max_rel_error < 1e-4, report.per_param


class TestContrastiveLoss:
    rng = np.random.default_rng(23)

    def unit_rows(self, n, d):
        z = self.rng.standard_normal((n, d))
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    def test_single_pair_is_exactly_zero(self):
        z = Tensor(self.unit_rows(1, 8))
        loss = M.contrastive_loss(z, z, tau=0.07)
        assert loss.data == 0.0

    def test_uniform_logits_give_ln_n(self):
        n, d = 5, 8
        z = Tensor(np.tile(self.unit_rows(1, d), (n, 1)))
        loss = M.contrastive_loss(z, z, tau=0.5)
        assert abs(float(loss.data) - math.log(n)) < 1e-12

    def test_two_pair_hand_case(self):
        eye = Tensor(np.eye(2))
        loss = M.contrastive_loss(eye, eye, tau=1.0)
        assert abs(float(loss.data) - math.log(1.0 + math.exp(-1.0))) < 1e-12

    def test_rotation_invariance(self):
        n, d = 6, 8
        Z_m = self.unit_rows(n, d)
        Z_t = self.unit_rows(n, d)
        q, _ = np.linalg.qr(self.rng.standard_normal((d, d)))
        base = float(M.contrastive_loss(Tensor(Z_m), Tensor(Z_t),
                                        tau=0.07).data)
        rotated = float(M.contrastive_loss(Tensor(Z_m @ q), Tensor(Z_t @ q),
                                           tau=0.07).data)
        assert abs(base - rotated) < 1e-10

    def test_positive_for_finite_logits(self):
        z = Tensor(self.unit_rows(4, 8))
        w = Tensor(self.unit_rows(4, 8))
        assert float(M.contrastive_loss(z, w, tau=0.07).data) > 0.0

    def test_symmetric_averages_directions(self):
        Z_m = Tensor(self.unit_rows(3, 8))
        Z_t = Tensor(self.unit_rows(3, 8))
        fwd = float(M.contrastive_loss(Z_m, Z_t, tau=0.1).data)
        rev = float(M.contrastive_loss(Z_t, Z_m, tau=0.1).data)
        both = float(M.contrastive_loss(Z_m, Z_t, tau=0.1,
                                        symmetric=True).data)
        assert_allclose(both, 0.5 * (fwd + rev), atol=1e-12)

    def test_bad_temperature(self):
        z = Tensor(self.unit_rows(2, 4))
        with pytest.raises(ValueError, match="temperature"):
            M.contrastive_loss(z, z, tau=0.0)

    def test_batch_size_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            M.contrastive_loss(Tensor(self.unit_rows(2, 4)),
                               Tensor(self.unit_rows(3, 4)), tau=1.0)

    def test_gradients(self):
        Z_m = Tensor(self.unit_rows(3, 6), requires_grad=True)
        Z_t = Tensor(self.unit_rows(3, 6), requires_grad=True)

        def f():
            return M.contrastive_loss(Z_m, Z_t, tau=0.3, symmetric=True)

        report = T.finite_diff_check(f, [Z_m, Z_t], h=1e-5)
        assert report.max_rel_error < 1e-4


class TestFusion:
    rng = np.random.default_rng(24)

    def test_single_music_frame_gives_unit_column(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=2)
        h_t = Tensor(self.rng.standard_normal((3, cfg.d_t)))
        h_m = Tensor(self.rng.standard_normal((1, cfg.d_m)))
        _, attn = model.fuse(h_t, h_m)
        assert_allclose(attn.data, np.ones((3, 1)))

    def test_identical_music_rows_give_uniform_attention(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=2)
        h_t = Tensor(self.rng.standard_normal((2, cfg.d_t)))
        h_m = Tensor(np.tile(self.rng.standard_normal(cfg.d_m), (5, 1)))
        h_f, attn = model.fuse(h_t, h_m)
        assert_allclose(attn.data, np.full((2, 5), 0.2), atol=1e-12)
        assert h_f.shape == (2, cfg.d_t)

    def test_residual_keeps_lyrics_when_values_zeroed(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=2)
        model.fusion.W_O.data[:] = 0.0
        h_t = Tensor(self.rng.standard_normal((3, cfg.d_t)))
        h_m = Tensor(self.rng.standard_normal((4, cfg.d_m)))
        h_f, _ = model.fuse(h_t, h_m)
        assert np.array_equal(h_f.data, h_t.data)


class TestCaptionLoss:
    rng = np.random.default_rng(25)

    def make(self, seed=4):
        cfg = tiny_config()
        return cfg, CaptionModel(cfg, seed=seed)

    def fused(self, model, cfg):
        h_m = model.encode_music(self.rng.standard_normal((8, cfg.n_feat)))
        h_t = model.encode_lyrics([BOS, 5, 7, EOS])
        h_f, _ = model.fuse(h_t, h_m)
        return h_f

    def test_untrained_loss_near_ln_vocab(self):
        cfg, model = self.make()
        h_f = self.fused(model, cfg)
        loss = model.caption_loss(h_f, [BOS, 9, 12, 4, EOS])
        assert abs(float(loss.data) - math.log(cfg.vocab_size)) < 0.5

    def test_single_step_target(self):
        cfg, model = self.make()
        h_f = self.fused(model, cfg)
        loss = model.caption_loss(h_f, [BOS, EOS])
        assert loss.data.shape == ()

    def test_padding_is_ignored(self):
        cfg, model = self.make()
        h_f = self.fused(model, cfg)
        bare = model.caption_loss(h_f, [BOS, 9, 12, EOS])
        padded = model.caption_loss(h_f, [BOS, 9, 12, EOS, 0, 0])
        assert_allclose(padded.data, bare.data, atol=1e-12)

    def test_target_validation(self):
        cfg, model = self.make()
        h_f = self.fused(model, cfg)
        with pytest.raises(ValueError, match="BOS"):
            model.caption_loss(h_f, [5, 6, EOS])
        with pytest.raises(ValueError, match="EOS"):
            model.caption_loss(h_f, [BOS, 5, 6])
        with pytest.raises(ValueError, match="at least"):
            model.caption_loss(h_f, [BOS])
        with pytest.raises(ValueError, match="exceeds"):
            model.caption_loss(h_f, [BOS] + [5] * 20 + [EOS])


class TestTotalLoss:
    rng = np.random.default_rng(26)

    def test_alpha_zero_is_caption_loss_bitwise(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=5)
        batch = tiny_batch(self.rng, cfg)
        out = model.total_loss(batch, alpha=0.0)
        caps = [float(model.instance_caption_loss(inst).data)
                for inst in batch]
        assert float(out.total.data) == np.mean(caps)

    def test_alpha_zero_independent_of_alignment_head(self):
        cfg = tiny_config()
        batch = tiny_batch(self.rng, cfg)
        model = CaptionModel(cfg, seed=5)
        before = float(model.total_loss(batch, alpha=0.0).total.data)
        model.alignment.project_music.weight.data[:] += 100.0
        model.alignment.project_lyrics.weight.data[:] -= 3.0
        after = float(model.total_loss(batch, alpha=0.0).total.data)
        assert before == after

    def test_alpha_one_additivity(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=5)
        batch = tiny_batch(self.rng, cfg)
        out = model.total_loss(batch, alpha=1.0)
        assert abs(float(out.total.data)
                   - (out.caption + out.contrastive)) < 1e-15

    def test_negative_alpha_rejected(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=5)
        with pytest.raises(ValueError, match="nonnegative"):
            model.total_loss(tiny_batch(self.rng, cfg), alpha=-0.1)

    def test_full_model_gradients_toy_dims(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=6)
        batch = tiny_batch(self.rng, cfg, n=2, l_raw=8, l_lyr=3, l_cap=4)

        def f():
            return model.total_loss(batch, alpha=0.02).total

        report = T.finite_diff_check(f, model.parameters(), h=1e-5)
        assert report.max_rel_error < 1e-4, {
            k: v for k, v in report.per_param.items() if v > 1e-5}


class TestGeneration:
    rng = np.random.default_rng(27)

    def test_deterministic(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=7)
        music = self.rng.standard_normal((8, cfg.n_feat))
        lyr = [BOS, 4, 9, EOS]
        assert model.generate(music, lyr) == model.generate(music, lyr)

    def test_max_len_one(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=7)
        out = model.generate(self.rng.standard_normal((8, cfg.n_feat)),
                             [BOS, 4, EOS], max_len=1)
        assert len(out) == 1

    def test_unknown_strategy(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=7)
        with pytest.raises(ValueError, match="strategy"):
            model.generate(self.rng.standard_normal((8, cfg.n_feat)),
                           [BOS, EOS], strategy="beam")

    def test_export_attention_contract(self):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=7)
        export = model.export_attention(
            self.rng.standard_normal((8, cfg.n_feat)), [BOS, 4, 9, EOS])
        assert export.attn.shape == (4, 4)
        assert_allclose(export.attn.sum(axis=1), np.ones(4), atol=1e-10)
        assert math.isfinite(export.mean_row_entropy())
        assert export.lyric_tokens == [BOS, 4, 9, EOS]
        assert export.music_frames == [0, 1, 2, 3]


class TestCheckpoint:
    rng = np.random.default_rng(28)

    def test_round_trip_bit_exact(self, tmp_path):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=8)
        path = tmp_path / "model.ckpt"
        M.save_checkpoint(model, path)
        loaded = M.load_checkpoint(path)
        assert loaded.config == cfg
        orig = dict(model.named_parameters())
        for name, t in loaded.named_parameters():
            assert np.array_equal(t.data, orig[name].data), name

    def test_round_trip_reproduces_loss_bitwise(self, tmp_path):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=8)
        batch = tiny_batch(self.rng, cfg)
        path = tmp_path / "model.ckpt"
        M.save_checkpoint(model, path)
        loaded = M.load_checkpoint(path)
        a = float(model.total_loss(batch, alpha=0.02).total.data)
        b = float(loaded.total_loss(batch, alpha=0.02).total.data)
        assert a == b

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            M.load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        import struct
        path = tmp_path / "bad.ckpt"
        path.write_bytes(M.CHECKPOINT_MAGIC + struct.pack("<I", 99)
                         + b"\x00" * 32)
        with pytest.raises(ValueError, match="version"):
            M.load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        cfg = tiny_config()
        model = CaptionModel(cfg, seed=8)
        path = tmp_path / "model.ckpt"
        M.save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 16])
        with pytest.raises(ValueError, match="checkpoint"):
            M.load_checkpoint(path)

    def test_config_json_round_trip(self):
        cfg = ModelConfig(conv_layers=[[4, 2], [3, 1]])
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({"bogus": 1})
