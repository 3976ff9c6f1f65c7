import struct

import numpy as np
import pytest

from convemo import autograd as ag
from convemo.autograd import Tensor
from convemo.corpus import CapacityError
from convemo.model import (
    CheckpointChecksumError, CheckpointConfigError, CheckpointError, CheckpointTruncatedError,
    CheckpointVersionError, EmotionTagger, ModelConfig, checkpoint_bytes, load_checkpoint, predict_labels,
    save_checkpoint,
)
from convemo.verify import tiny_model_case


def small(**kw):
    base = dict(input_dim=6, num_layers=2, num_heads=2, hidden_dim=8, ffn_dim=16, max_positions=64,
                dropout=0.0, conv_channels=8, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def feats(L=20, F=6, seed=0, B=None):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(L, F) if B is None else (B, L, F)).astype(np.float32)


class TestConfig:
    def test_heads_divide_hidden(self):
        with pytest.raises(ValueError, match="divisible"):
            small(hidden_dim=10, num_heads=3).validate()

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            small(conv_kernels=[4]).validate()

    def test_paper_preset(self):
        cfg = ModelConfig.paper()
        assert (cfg.num_layers, cfg.hidden_dim, cfg.max_positions) == (12, 768, 2048)

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="wat"):
            ModelConfig.from_dict({"wat": 1})


class TestShapes:
    @pytest.mark.parametrize("conv", [False, True])
    def test_logits_shape(self, conv):
        m = EmotionTagger(small(use_conv_front_end=conv))
        out = m.forward(feats(20))
        assert out.shape == (20, 5) and np.isfinite(out.data).all()

    def test_batch(self):
        assert EmotionTagger(small()).forward(feats(12, B=3)).shape == (3, 12, 5)

    def test_long_sequence(self):
        m = EmotionTagger(small(max_positions=2048, num_layers=1))
        out = m.forward(feats(2048))
        assert out.shape == (2048, 5) and np.isfinite(out.data).all()

    def test_position_overflow(self):
        with pytest.raises(CapacityError):
            EmotionTagger(small(max_positions=8)).forward(feats(9))


class TestConvFrontEnd:
    def test_length_preserved(self):
        m = EmotionTagger(small(use_conv_front_end=True, conv_kernels=[5, 5, 5]))
        out = m.conv_front_end(Tensor(feats(64, B=1)))
        assert out.shape == (1, 64, 8)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_receptive_field(self, k):
        m = EmotionTagger(small(use_conv_front_end=True, conv_kernels=[5] * k), dtype=np.float64)
        x = feats(40, seed=k).astype(np.float64)[None]
        base = m.conv_front_end(Tensor(x)).data
        t = 20
        x2 = x.copy()
        x2[0, t] += 1.0
        changed = np.abs(m.conv_front_end(Tensor(x2)).data - base).max(axis=-1)[0] > 0
        idx = np.flatnonzero(changed)
        assert idx.min() == t - 2 * k and idx.max() == t + 2 * k
        assert len(idx) == 4 * k + 1

    def test_zero_final_block_is_residual_identity(self):
        m = EmotionTagger(small(use_conv_front_end=True, conv_kernels=[3, 3]))
        for name in ("weight", "bias", "ln_gamma", "ln_beta"):
            m.params[f"conv.1.{name}"].data[...] = 0
        trace = []
        out = m.conv_front_end(Tensor(feats(16, B=1)), trace=trace)
        np.testing.assert_array_equal(out.data, trace[0].data)

    def test_zero_input_with_zero_final_block(self):
        m = EmotionTagger(small(use_conv_front_end=True, conv_kernels=[3, 3]))
        for name in ("weight", "bias", "ln_gamma", "ln_beta"):
            m.params[f"conv.1.{name}"].data[...] = 0
        trace = []
        out = m.conv_front_end(Tensor(np.zeros((1, 10, 6), np.float32)), trace=trace)
        np.testing.assert_array_equal(out.data, trace[0].data)

    def test_pad_frames_zeroed(self):
        m = EmotionTagger(small(use_conv_front_end=True))
        real = np.ones((1, 12), bool)
        real[0, 8:] = False
        out = m.conv_front_end(Tensor(feats(12, B=1)), real)
        assert not out.data[0, 8:].any()


class TestEmbeddings:
    def test_gating(self):
        m = EmotionTagger(small(use_interlocutor=False))
        x = feats(10)
        a = m.forward(x, speaker_indices=np.zeros(10, int)).data
        b = m.forward(x, speaker_indices=np.array([0, 1, 2, 3, -1] * 2)).data
        assert a.tobytes() == b.tobytes()

    def test_unattributed_zero_row(self):
        m = EmotionTagger(small(use_interlocutor=True))
        h = Tensor(np.zeros((1, 5, 8), np.float32))
        pos = np.zeros((1, 5), int)
        with_none = m.embed_inputs(h, pos, np.full((1, 5), -1)).data
        without = m.embed_inputs(h, pos, None).data
        np.testing.assert_array_equal(with_none, without)

    def test_additive_composition(self):
        m = EmotionTagger(small(use_interlocutor=True), dtype=np.float64)
        h = Tensor(np.ones((1, 2, 8)))
        out = m.embed_inputs(h, np.array([[3, 3]]), np.array([[0, 1]])).data
        spk = m.params["spk_emb"].data
        np.testing.assert_allclose(out[0, 0] - out[0, 1], spk[0] - spk[1], atol=1e-12)

    def test_speaker_overflow(self):
        m = EmotionTagger(small(use_interlocutor=True, max_speakers=2))
        with pytest.raises(CapacityError):
            m.forward(feats(4), speaker_indices=np.array([0, 1, 2, 0]))


class TestAttention:
    def test_rows_sum_to_one_and_padding_masked(self):
        m = EmotionTagger(small())
        real = np.ones((2, 15), bool)
        real[1, 10:] = False
        diag = {}
        m.forward(feats(15, B=2), real=real, diag=diag)
        assert len(diag["attention"]) == 2
        for w in diag["attention"]:
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
            assert not w[1, :, :10, 10:].any()

    def test_identity_projection_matches_unprojected(self):
        cfg = small(num_heads=1, num_layers=1)
        m = EmotionTagger(cfg, dtype=np.float64)
        m.params["layers.0.wq"].data = np.eye(8)
        m.params["layers.0.wk"].data = np.eye(8)
        m.params["layers.0.bq"].data[...] = 0
        diag = {}
        m.forward(feats(12).astype(np.float64), diag=diag)
        x = diag["attention_inputs"][0][0]
        expected = ag.attention_unprojected(Tensor(x)).weights.data
        np.testing.assert_allclose(diag["attention"][0][0, 0], expected, atol=1e-12)

    def test_permutation_equivariance_without_position_tables(self):
        m = EmotionTagger(small(), dtype=np.float64)
        m.params["pos_emb"].data[...] = 0
        x = feats(10).astype(np.float64)
        perm = np.random.default_rng(0).permutation(10)
        np.testing.assert_allclose(m.forward(x[perm]).data, m.forward(x).data[perm], atol=1e-10)

    def test_positions_break_equivariance(self):
        m = EmotionTagger(small(), dtype=np.float64)
        x = feats(10).astype(np.float64)
        perm = np.arange(10)[::-1]
        assert not np.allclose(m.forward(x[perm]).data, m.forward(x).data[perm])


class TestHead:
    def test_zero_weights_give_bias(self):
        m = EmotionTagger(small())
        m.params["cls.weight"].data[...] = 0
        m.params["cls.bias"].data[...] = np.arange(5)
        np.testing.assert_array_equal(m.forward(feats(7)).data, np.tile(np.arange(5, dtype=np.float32), (7, 1)))

    def test_tie_breaks_low(self):
        assert predict_labels(np.zeros((3, 5))).tolist() == [0, 0, 0]
        assert predict_labels(np.array([[0, 2, 2, 1, 0]])).tolist() == [1]


class TestGradients:
    @pytest.mark.parametrize("seed,conv,spk", [(0, True, True), (1, False, False), (2, True, False),
                                               (3, False, True), (4, True, True)])
    def test_tiny_model_gradcheck(self, seed, conv, spk):
        f, params = tiny_model_case(seed, conv=conv, interlocutor=spk)
        assert ag.grad_check(f, params, 1e-5) < 1e-4

    def test_dropout_needs_rng(self):
        with pytest.raises(ValueError):
            EmotionTagger(small(dropout=0.1)).forward(feats(4), training=True)


class TestCheckpoint:
    def _model(self):
        m = EmotionTagger(small(use_conv_front_end=True, use_interlocutor=True))
        rng = np.random.default_rng(9)
        for p in m.parameters():
            p.data = (p.data + rng.normal(scale=0.1, size=p.shape)).astype(np.float32)
        return m

    def test_round_trip_bit_exact(self, tmp_path):
        m = self._model()
        save_checkpoint(tmp_path / "m.cerc", m)
        back = load_checkpoint(tmp_path / "m.cerc")
        assert back.config == m.config
        for k, v in m.state_dict().items():
            assert back.params[k].data.tobytes() == v.tobytes()
        x = feats(16)
        spk = np.array([0, 1] * 8)
        assert back.forward(x, spk).data.tobytes() == m.forward(x, spk).data.tobytes()

    def test_layout_header(self):
        raw = checkpoint_bytes(self._model())
        assert raw[:4] == b"CERC"
        version, cfg_len = struct.unpack_from("<II", raw, 4)
        assert version == 1
        cfg = raw[12 : 12 + cfg_len].decode()
        assert cfg == self._model().config.to_json() and '"hidden_dim":8' in cfg

    def test_version_mismatch(self, tmp_path):
        raw = bytearray(checkpoint_bytes(self._model()))
        raw[4:8] = struct.pack("<I", 99)
        (tmp_path / "v.cerc").write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(tmp_path / "v.cerc")

    def test_checksum_mismatch(self, tmp_path):
        raw = bytearray(checkpoint_bytes(self._model()))
        raw[-20] ^= 0xFF
        (tmp_path / "c.cerc").write_bytes(bytes(raw))
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(tmp_path / "c.cerc")

    def test_truncated_names_tensor(self, tmp_path):
        m = self._model()
        raw = checkpoint_bytes(m)
        # cls.bias is the last tensor (5 floats); remove 12 of its 20 data bytes
        cut = raw[:-20] + raw[-8:]
        (tmp_path / "t.cerc").write_bytes(cut)
        with pytest.raises(CheckpointTruncatedError, match="cls.bias"):
            load_checkpoint(tmp_path / "t.cerc")

    def test_config_override_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "m.cerc", self._model())
        with pytest.raises(CheckpointConfigError, match="num_classes"):
            load_checkpoint(tmp_path / "m.cerc", expect={"num_classes": 7})

    def test_distinct_error_types(self):
        kinds = {CheckpointVersionError, CheckpointChecksumError, CheckpointTruncatedError, CheckpointConfigError}
        assert all(issubclass(k, CheckpointError) for k in kinds) and len(kinds) == 4
