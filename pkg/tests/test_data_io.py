import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mibminet.data_io import (FormatError, SynthSpec, TrialDataset, decode_container, decode_trials,
                              encode_container, encode_trials, load_checkpoint, read_trials, save_checkpoint,
                              synth, write_trials)
from mibminet.model import ModelConfig, build, forward

HEADER_BYTES = 22  # magic 4, version 2, n_trials 4, n_ch 2, n_samples 4, rate 4, n_classes 2


def _ds(n=5, ch=3, t=16, k=2, subjects=False, seed=0):
    rng = np.random.default_rng(seed)
    return TrialDataset(rng.standard_normal((n, ch, t)).astype(np.float32), np.arange(n) % k,
                        [f"E{i}" for i in range(ch)], 160.0, k, np.arange(n) // 2 if subjects else None)


class TestTrialFormat:
    @pytest.mark.parametrize("subjects", [False, True])
    def test_round_trip(self, tmp_path, subjects):
        ds = _ds(subjects=subjects)
        write_trials(tmp_path / "d.mibt", ds)
        back = read_trials(tmp_path / "d.mibt")
        np.testing.assert_array_equal(back.data, ds.data)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.channel_names == ds.channel_names and back.sample_rate == 160.0
        assert (back.subjects is None) == (not subjects)

    def test_size_arithmetic(self):
        ds = _ds(4, 3, 10)
        names = sum(1 + len(n) for n in ds.channel_names)
        assert len(encode_trials(ds)) == HEADER_BYTES + names + 2 * 4 + 4 * 4 * 3 * 10

    def test_bci_payload_size(self):
        # 288 trials of 22 x 750 float32 samples
        assert 288 * 22 * 750 * 4 == 19_008_000

    def test_header_fields(self):
        buf = encode_trials(_ds(5, 3, 16))
        assert struct.unpack_from("<4sHIHIfH", buf) == (b"MIBT", 1, 5, 3, 16, 160.0, 2)

    @pytest.mark.parametrize("cut", [0, 10, 22, 30, -1])
    def test_truncation(self, cut):
        buf = encode_trials(_ds())
        with pytest.raises(FormatError, match="truncated"):
            decode_trials(buf[:cut])

    def test_bad_magic(self):
        buf = bytearray(encode_trials(_ds()))
        buf[:4] = b"XXXX"
        with pytest.raises(FormatError, match="magic"):
            decode_trials(bytes(buf))

    def test_bad_version(self):
        buf = bytearray(encode_trials(_ds()))
        buf[4:6] = struct.pack("<H", 9)
        with pytest.raises(FormatError, match="version"):
            decode_trials(bytes(buf))

    def test_label_out_of_range(self):
        ds = _ds()
        buf = bytearray(encode_trials(ds))
        pos = HEADER_BYTES + sum(1 + len(n) for n in ds.channel_names)
        buf[pos:pos + 2] = struct.pack("<H", 7)
        with pytest.raises(FormatError, match="label"):
            decode_trials(bytes(buf))

    def test_trailing_bytes(self):
        with pytest.raises(FormatError):
            decode_trials(encode_trials(_ds()) + b"\0")

    def test_non_finite_rejected(self):
        x = np.zeros((1, 1, 4), np.float32)
        x[0, 0, 1] = np.nan
        with pytest.raises(FormatError):
            TrialDataset(x, [0], ["A"], 1.0, 1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 6), st.integers(1, 4), st.integers(1, 9), st.integers(1, 5))
    def test_round_trip_property(self, n, ch, t, k):
        ds = _ds(n, ch, t, k)
        back = decode_trials(encode_trials(ds))
        assert encode_trials(back) == encode_trials(ds)


class TestSynth:
    def test_deterministic(self):
        a, b = synth(SynthSpec(), 20, seed=4), synth(SynthSpec(), 20, seed=4)
        assert encode_trials(a) == encode_trials(b)
        assert encode_trials(a) != encode_trials(synth(SynthSpec(), 20, seed=5))

    def test_balanced(self):
        ds = synth(SynthSpec(), 30, seed=0)
        assert np.bincount(ds.labels).tolist() == [30, 30]

    def test_noise_channel_statistics(self):
        # channel 0 carries only unit white noise: mean within 3 sigma / sqrt(N) of zero
        ds = synth(SynthSpec(), 50, seed=1)
        x = ds.data[:, 0, :].astype(np.float64).ravel()
        assert abs(x.mean()) < 3 / np.sqrt(x.size)
        assert x.var() == pytest.approx(1.0, rel=0.05)

    def test_informative_channels_have_more_power(self):
        ds = synth(SynthSpec(), 50, seed=1)
        power = ds.data.astype(np.float64).var(axis=(0, 2))
        noise = np.delete(power, [2, 5])
        assert min(power[2], power[5]) > noise.max()

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SynthSpec(informative=((9,), (2,)))


class TestContainers:
    def test_round_trip(self):
        arrays = {"a": np.arange(6, dtype=np.int8).reshape(2, 3), "b": np.array([1.5], np.float64)}
        meta, back = decode_container(encode_container(b"TEST", {"k": 1}, arrays), b"TEST")
        assert meta == {"k": 1}
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])
            assert back[k].dtype == arrays[k].dtype

    def test_errors(self):
        buf = encode_container(b"TEST", {}, {"a": np.zeros(4)})
        with pytest.raises(FormatError, match="magic"):
            decode_container(buf, b"NOPE")
        with pytest.raises(FormatError):
            decode_container(buf[:-1], b"TEST")
        with pytest.raises(FormatError, match="version"):
            decode_container(encode_container(b"TEST", {}, {}, version=2), b"TEST")

    def test_checkpoint_round_trip(self, tmp_path):
        net = build(ModelConfig(3, 64, 2, 5, 2), 3)
        net.layer("bn1").bn.running_mean[:] = [0.5, -0.5]
        save_checkpoint(tmp_path / "c.mibc", net, {"seed": 3})
        ck = load_checkpoint(tmp_path / "c.mibc")
        x = np.random.default_rng(0).standard_normal((2, 3, 64)).astype(np.float32)
        np.testing.assert_array_equal(forward(ck.network, x), forward(net, x))
        assert ck.metadata["seed"] == 3

    def test_checkpoint_is_deterministic(self, tmp_path):
        net = build(ModelConfig(3, 64, 2, 5, 2), 3)
        save_checkpoint(tmp_path / "a", net)
        save_checkpoint(tmp_path / "b", net)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_checkpoint_wrong_magic(self, tmp_path):
        write_trials(tmp_path / "d", _ds())
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "d")
