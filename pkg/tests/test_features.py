import struct

import numpy as np
import pytest
import scipy.fft
import scipy.signal
from hypothesis import given, settings
from hypothesis import strategies as st

from convemo.features import (
    AudioTooShortError, FeatureFileError, FeatureMatrix, MfccConfig, WavAudio, WavFormatError, dct_basis,
    frame_count, mel_filter_edges, mel_filterbank, mfcc, read_features, read_wav, write_features, write_wav,
)


def _wav_bytes(data: bytes, fmt_tag=1, channels=1, rate=16000, bits=16) -> bytes:
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


class TestWav:
    def test_silence(self, tmp_path):
        write_wav(tmp_path / "s.wav", WavAudio(16000, np.zeros(16000)))
        audio = read_wav(tmp_path / "s.wav")
        assert audio.sample_rate == 16000
        assert audio.samples.shape == (16000,) and not audio.samples.any()

    def test_stereo_antiphase_mixes_to_zero(self, tmp_path):
        v = (np.random.default_rng(0).integers(-30000, 30000, 500)).astype("<i2")
        inter = np.stack([v, -v], axis=1).astype("<i2").tobytes()
        (tmp_path / "st.wav").write_bytes(_wav_bytes(inter, channels=2))
        assert not read_wav(tmp_path / "st.wav").samples.any()

    def test_square_wave_scaling(self, tmp_path):
        pcm = np.tile(np.array([32767, -32767], dtype="<i2"), 50)
        (tmp_path / "sq.wav").write_bytes(_wav_bytes(pcm.tobytes()))
        s = read_wav(tmp_path / "sq.wav").samples
        assert set(np.unique(s)) == {32767 / 32768, -32767 / 32768}

    def test_float32(self, tmp_path):
        x = np.array([0.5, -0.25, 1.0], dtype="<f4")
        (tmp_path / "f.wav").write_bytes(_wav_bytes(x.tobytes(), fmt_tag=3, bits=32))
        np.testing.assert_array_equal(read_wav(tmp_path / "f.wav").samples, x)

    def test_unsupported_encoding_named(self, tmp_path):
        (tmp_path / "a.wav").write_bytes(_wav_bytes(b"\x00" * 8, fmt_tag=7, bits=8))
        with pytest.raises(WavFormatError, match="format tag 7"):
            read_wav(tmp_path / "a.wav")

    def test_truncated_reports_offset(self, tmp_path):
        raw = _wav_bytes(np.zeros(100, "<i2").tobytes())
        (tmp_path / "t.wav").write_bytes(raw[:-50])
        with pytest.raises(WavFormatError, match="byte offset 36"):
            read_wav(tmp_path / "t.wav")

    def test_round_trip_pcm(self, tmp_path):
        x = np.round(np.random.default_rng(1).uniform(-1, 1, 1000) * 32767) / 32768
        write_wav(tmp_path / "r.wav", WavAudio(8000, x))
        np.testing.assert_array_equal(read_wav(tmp_path / "r.wav").samples, x)


class TestFrameCount:
    def test_one_second(self):
        assert frame_count(16000, 400, 160) == 98

    def test_mfcc_frames_one_second(self):
        assert mfcc(WavAudio(16000, np.random.default_rng(0).normal(size=16000) * 0.1)).num_frames == 98

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4000), st.integers(1, 400), st.integers(1, 400), st.integers(0, 2**31))
    def test_formula_matches_enumeration(self, extra, flen, shift, seed):
        shift = min(shift, flen)
        n = flen + extra - 1
        # count window starts whose frame fits entirely inside the signal
        brute = sum(1 for start in range(0, n, shift) if start + flen <= n)
        assert frame_count(n, flen, shift) == brute

    def test_too_short(self):
        with pytest.raises(AudioTooShortError, match="too short"):
            mfcc(WavAudio(16000, np.zeros(399)))


class TestMfcc:
    def test_silence_constant(self):
        out = mfcc(WavAudio(16000, np.zeros(8000))).values
        assert np.all(out == out[0])
        logmel = mfcc(WavAudio(16000, np.zeros(8000)), log_mel=True).values
        np.testing.assert_allclose(logmel, np.log(1e-10), rtol=1e-6)

    def test_deterministic(self):
        x = WavAudio(16000, np.random.default_rng(2).normal(size=5000) * 0.1)
        assert mfcc(x).values.tobytes() == mfcc(x).values.tobytes()

    def test_dct_orthonormal_against_scipy(self):
        b = dct_basis(26, 26)
        np.testing.assert_allclose(b @ b.T, np.eye(26), atol=1e-10)
        v = np.random.default_rng(3).normal(size=26)
        np.testing.assert_allclose(dct_basis(13, 26) @ v, scipy.fft.dct(v, type=2, norm="ortho")[:13], atol=1e-12)

    def test_matches_loop_reference(self):
        """Straight-line pipeline using scipy primitives, one frame at a time."""
        rng = np.random.default_rng(4)
        x = rng.normal(size=4000) * 0.2
        got = mfcc(WavAudio(16000, x)).values
        emph = np.append(x[0], x[1:] - 0.97 * x[:-1])
        win = scipy.signal.get_window("hamming", 400, fftbins=False)
        fb = mel_filterbank(26, 512, 16000)
        rows = []
        for t in range(frame_count(len(x), 400, 160)):
            spec = np.abs(scipy.fft.rfft(emph[t * 160 : t * 160 + 400] * win, 512)) ** 2 / 512
            rows.append(scipy.fft.dct(np.log(np.maximum(fb @ spec, 1e-10)), norm="ortho")[:13])
        np.testing.assert_allclose(got, np.array(rows), rtol=1e-4, atol=1e-4)

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            MfccConfig(frame_length_ms=10, frame_shift_ms=20)
        with pytest.raises(ValueError):
            MfccConfig(num_ceps=30, num_mel_filters=26)


class TestFilterbank:
    def test_sine_localizes_to_each_interior_filter(self):
        sr, cfg = 16000, MfccConfig()
        edges = mel_filter_edges(26, sr)
        t = np.arange(sr // 2) / sr
        for k in range(1, 25):
            tone = 0.5 * np.sin(2 * np.pi * edges[k + 1] * t)
            energies = mfcc(WavAudio(sr, tone), cfg, log_mel=True).values
            assert np.argmax(energies.mean(axis=0)) == k, k

    def test_coverage(self):
        fb = mel_filterbank(26, 512, 16000)
        edges = mel_filter_edges(26, 16000)
        bins = np.arange(257) * 16000 / 512
        inside = (bins > edges[0]) & (bins < edges[-1])
        total = fb[:, inside].sum(axis=0)
        assert np.all(total > 0) and np.all(total <= 1.0001)

    def test_unit_peaks(self):
        # filter peaks sit on mel centers; a bin landing exactly there would read 1
        fb = mel_filterbank(26, 1 << 16, 16000)
        assert np.all(fb.max(axis=1) > 0.99) and fb.max() <= 1.0


class TestFmx:
    def test_round_trip_bit_exact(self, tmp_path):
        m = FeatureMatrix(np.random.default_rng(5).normal(size=(98, 13)).astype(np.float32))
        write_features(tmp_path / "a.fmx", m)
        back = read_features(tmp_path / "a.fmx")
        assert back.values.tobytes() == m.values.tobytes() and back.frame_shift_ms == 10

    def test_layout(self, tmp_path):
        write_features(tmp_path / "a.fmx", FeatureMatrix(np.array([[1.5, -2.0]], np.float32), frame_shift_ms=20))
        raw = (tmp_path / "a.fmx").read_bytes()
        assert raw == b"FMX1" + struct.pack("<III", 1, 2, 20) + struct.pack("<2f", 1.5, -2.0)

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(FeatureFileError):
            write_features(tmp_path / "e.fmx", FeatureMatrix(np.zeros((0, 13))))

    def test_nan_rejected(self, tmp_path):
        with pytest.raises(FeatureFileError):
            write_features(tmp_path / "n.fmx", FeatureMatrix(np.array([[np.nan]])))

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "b.fmx").write_bytes(b"XXXX" + struct.pack("<III", 1, 1, 10) + b"\0" * 4)
        with pytest.raises(FeatureFileError, match="expected 'FMX1'"):
            read_features(tmp_path / "b.fmx")

    def test_truncated_payload_offset(self, tmp_path):
        (tmp_path / "c.fmx").write_bytes(b"FMX1" + struct.pack("<III", 2, 2, 10) + b"\0" * 12)
        with pytest.raises(FeatureFileError, match="offset 28"):
            read_features(tmp_path / "c.fmx")

    def test_overflow(self, tmp_path):
        (tmp_path / "d.fmx").write_bytes(b"FMX1" + struct.pack("<III", 2**31, 2, 10))
        with pytest.raises(FeatureFileError, match="overflow"):
            read_features(tmp_path / "d.fmx")

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "e.fmx").write_bytes(b"FMX1" + struct.pack("<III", 1, 1, 10) + b"\0" * 5)
        with pytest.raises(FeatureFileError, match="trailing"):
            read_features(tmp_path / "e.fmx")
