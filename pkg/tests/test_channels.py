import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from table_oracle import headset_rows
from mibminet.channels import (BCI_IV2A_22, HEADSET_PRESETS, PHYSIONET_64, PRESETS, ChannelError,
                               channel_norms, load_preset_file, preset, preset_indices, rank_channels,
                               reduce_and_retrain, select_top)
from mibminet.data_io import SynthSpec, TrialDataset, synth
from mibminet.trainer import TrainHyper

weights = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 10)),
                 elements=st.floats(-10, 10, allow_nan=False))


class TestRanking:
    def test_hand_example(self):
        r = rank_channels(np.array([[3.0, 0.0, 4.0], [0.0, 0.0, 0.0]]))
        assert r.order == [2, 0, 1]
        np.testing.assert_allclose(r.norms_by_channel(), [3.0, 0.0, 4.0])

    def test_ties_by_index(self):
        assert rank_channels(np.ones((2, 4))).order == [0, 1, 2, 3]

    def test_names_and_json(self):
        r = rank_channels(np.array([[1.0, 2.0]]), ["C3", "C4"])
        assert r.names == ["C4", "C3"]
        assert json.loads(r.to_json())[0] == {"index": 1, "name": "C4", "norm": 2.0}

    def test_averaging(self):
        a = np.array([[1.0, 0.0, 0.5]])
        b = np.array([[0.0, 1.0, 0.6]])
        r = rank_channels([a, b])
        np.testing.assert_allclose(r.norms_by_channel(), [0.5, 0.5, 0.55])
        assert r.order == [2, 0, 1]

    def test_errors(self):
        with pytest.raises(ChannelError):
            channel_norms(np.zeros(3))
        with pytest.raises(ChannelError):
            rank_channels(np.ones((1, 2)), ["A"])
        with pytest.raises(ChannelError):
            select_top(rank_channels(np.ones((1, 2))), 3)

    @settings(max_examples=60)
    @given(weights, st.floats(1e-3, 1e3))
    def test_scale_equivariance(self, w, c):
        a, b = rank_channels(w), rank_channels(w * c)
        np.testing.assert_allclose(b.norms_by_channel(), c * a.norms_by_channel(), rtol=1e-12)
        # exact ties may resolve by index once scaled, so compare on distinct norms
        na = a.norms_by_channel()
        if np.unique(np.round(na, 9)).size == na.size:
            assert a.order == b.order

    @settings(max_examples=60)
    @given(weights)
    def test_is_permutation(self, w):
        assert sorted(rank_channels(w).order) == list(range(w.shape[1]))

    @settings(max_examples=60)
    @given(weights, st.data())
    def test_select_top_nested(self, w, data):
        r = rank_channels(w)
        a = data.draw(st.integers(1, w.shape[1]))
        b = data.draw(st.integers(a, w.shape[1]))
        assert set(select_top(r, a)) <= set(select_top(r, b))


class TestPresets:
    def test_examples(self):
        assert preset("Central-3").electrodes == ("C3", "CZ", "C4")
        assert preset("central-11").electrodes == tuple("T9 T7 C5 C3 C1 CZ C2 C4 C6 T8 T10".split())

    @pytest.mark.parametrize("name", HEADSET_PRESETS)
    def test_matches_published_table(self, name):
        assert PRESETS[name].electrodes == headset_rows()[name]

    @pytest.mark.parametrize("name", list(PRESETS))
    def test_cardinality_matches_name(self, name):
        p = PRESETS[name]
        assert len(p) == int(name.rsplit("-", 1)[1]) == len(set(p.electrodes))

    def test_eighteen_headset_rows(self):
        assert len(HEADSET_PRESETS) == 18

    @pytest.mark.parametrize("name", ["Central-8", "nope", "Distributed-38"])
    def test_unknown(self, name):
        with pytest.raises(ChannelError):
            preset(name)

    def test_headset_rows_exist_in_physionet_montage(self):
        for name in HEADSET_PRESETS:
            idx = preset_indices(PRESETS[name], PHYSIONET_64)
            assert [PHYSIONET_64[i] for i in idx] == list(PRESETS[name].electrodes)

    def test_missing_electrode(self):
        with pytest.raises(ChannelError, match="T7"):
            preset_indices(preset("Central-9"), BCI_IV2A_22)

    def test_preset_files(self, tmp_path):
        (tmp_path / "a.json").write_text(json.dumps({"name": "mine", "electrodes": ["c3", " Cz "]}))
        (tmp_path / "b.txt").write_text("# comment\nC3\nC4\n")
        assert load_preset_file(tmp_path / "a.json").electrodes == ("C3", "CZ")
        assert load_preset_file(tmp_path / "b.txt").electrodes == ("C3", "C4")
        (tmp_path / "c.txt").write_text("C3\nc3\n")
        with pytest.raises(ChannelError):
            load_preset_file(tmp_path / "c.txt")


class TestReduceAndRetrain:
    def _planted(self):
        rng = np.random.default_rng(0)
        y = np.arange(60) % 2
        x = rng.standard_normal((60, 4, 64)).astype(np.float32)
        x[:, 1, :] += 3 * (2 * y - 1)[:, None]
        return TrialDataset(x, y, ["A", "B", "C", "D"], 128.0, 2)

    def test_keeps_planted_channels(self):
        tr, te = synth(SynthSpec(), 200, seed=0), synth(SynthSpec(), 100, seed=1)
        res = reduce_and_retrain(tr, 2, TrainHyper(epochs=30, batch_size=32, lr_schedule=((0, 1e-2),)),
                                 n_k=8, n_f=32, test=te)
        assert {2, 5} <= set(res.ranking.order[:3])
        assert res.config.n_ch == 2
        assert res.reduced_accuracy >= 0.9 * res.full_accuracy

    def test_full_width_is_identity_selection(self):
        ds = self._planted()
        res = reduce_and_retrain(ds, 4, TrainHyper(epochs=1, batch_size=12), n_k=2, n_f=5)
        assert sorted(res.selected) == [0, 1, 2, 3]

    def test_repeats(self):
        res = reduce_and_retrain(self._planted(), 2, TrainHyper(epochs=1, batch_size=12), n_k=2, n_f=5,
                                 repeats=2)
        assert len(res.selected) == 2

    def test_bad_n_bar(self):
        with pytest.raises(ChannelError):
            reduce_and_retrain(self._planted(), 5, TrainHyper(epochs=1), n_k=2, n_f=5)
