import json

import numpy as np
import pytest

from speechstate.dataio import SynthConfig, generate_synthetic_session
from speechstate.errors import ConfigurationError, UnsupportedOperationError, ValidationError
from speechstate.models import (
    decision_scores, fit_model, load_model, penultimate_features, predict, predict_proba, read_params,
    save_model, write_params,
)
from speechstate.preprocess import WindowPipeline, extract_labeled_windows, filtered_windows, split


@pytest.fixture(scope="module")
def data():
    rec, ev = generate_synthetic_session(SynthConfig(n_trials_per_class=12, seed=21))
    ws = filtered_windows(rec, ev, WindowPipeline())
    sp = split(len(ws), 0.2, seed=4)
    return ws.subset(sp.train_idx), ws.subset(sp.test_idx), rec, ev


@pytest.fixture(scope="module")
def eegnet(data):
    return fit_model("eegnet", data[0], seed=5, epochs=6)


@pytest.fixture(scope="module")
def linear(data):
    return {k: fit_model(k, data[0], seed=5, svm_epochs=10) for k in ("csp-lda", "csp-svm")}


def class_mean_gap(model, ws):
    f = penultimate_features(model, ws)
    return np.linalg.norm(f[ws.y == 1].mean(0) - f[ws.y == 0].mean(0))


class TestPrediction:
    @pytest.mark.parametrize("kind", ["eegnet", "csp-lda", "csp-svm"])
    def test_rows_sum_to_one(self, kind, eegnet, linear, data):
        model = eegnet if kind == "eegnet" else linear[kind]
        p = predict_proba(model, data[1])
        assert p.shape == (len(data[1]), 2)
        assert np.abs(p.sum(axis=1) - 1).max() < 1e-6
        assert np.array_equal(p[:, 1] > 0.5, predict(model, data[1])[0] == 1)

    def test_duplicate_rows(self, eegnet, data):
        p = predict_proba(eegnet, data[1].subset([3, 3, 7, 3]))
        assert np.array_equal(p[0], p[1]) and np.array_equal(p[0], p[3])

    @pytest.mark.parametrize("kind", ["eegnet", "csp-svm"])
    def test_batch_partition(self, kind, eegnet, linear, data):
        model = eegnet if kind == "eegnet" else linear[kind]
        test = data[1]
        full = decision_scores(model, test)
        single = np.array([decision_scores(model, test.subset([i]))[0] for i in range(len(test))])
        assert np.array_equal(full, single)

    def test_raw_filtered_and_recording_inputs_agree(self, eegnet, data):
        _, _, rec, ev = data
        raw = extract_labeled_windows(rec, ev)
        filt = filtered_windows(rec, ev, eegnet.pipeline)
        np.testing.assert_array_equal(decision_scores(eegnet, raw)[:20], decision_scores(eegnet, filt)[:20])
        np.testing.assert_array_equal(decision_scores(eegnet, raw.x[:5]), decision_scores(eegnet, raw)[:5])

    def test_learns_task(self, eegnet, linear, data):
        test = data[1]
        assert (predict(linear["csp-lda"], test)[0] == test.y).mean() > 0.8
        assert (predict(eegnet, test)[0] == test.y).mean() > 0.7

    def test_unknown_kind(self, data):
        with pytest.raises(ConfigurationError):
            fit_model("rnn", data[0])


class TestFeatures:
    def test_size_and_determinism(self, eegnet, data):
        f = penultimate_features(eegnet, data[1])
        assert f.shape == (len(data[1]), 48)
        assert np.array_equal(f, penultimate_features(eegnet, data[1]))

    def test_training_separates_classes(self, eegnet, data):
        untrained = fit_model("eegnet", data[0], seed=5, epochs=0)
        assert class_mean_gap(eegnet, data[1]) >= 2 * class_mean_gap(untrained, data[1])

    def test_linear_has_none(self, linear, data):
        with pytest.raises(UnsupportedOperationError):
            penultimate_features(linear["csp-lda"], data[1])


class TestArtifact:
    @pytest.mark.parametrize("kind", ["eegnet", "shallow", "deep", "csp-lda", "csp-svm"])
    def test_round_trip_bit_exact(self, kind, eegnet, linear, data, tmp_path):
        if kind == "eegnet":
            model = eegnet
        elif kind in linear:
            model = linear[kind]
        else:
            model = fit_model(kind, data[0], seed=1, epochs=0)
        save_model(tmp_path / kind, model)
        back = load_model(tmp_path / kind)
        assert back.kind == kind
        assert np.array_equal(decision_scores(back, data[1]), decision_scores(model, data[1]))
        if model.is_deep:
            for (n1, a), (n2, b) in zip(model.network.named_parameters(), back.network.named_parameters()):
                assert n1 == n2 and np.array_equal(a.data, b.data)
        save_model(tmp_path / "again", back)
        assert (tmp_path / "again" / "params.bin").read_bytes() == (tmp_path / kind / "params.bin").read_bytes()

    def test_blob_layout(self, tmp_path):
        write_params(tmp_path / "p.bin", [("a", np.array([[1.0, 2.0]]))])
        raw = (tmp_path / "p.bin").read_bytes()
        assert raw[:4] == b"SSPB"
        assert len(raw) == 4 + 8 + 2 + 1 + 1 + 8 + 8
        np.testing.assert_array_equal(read_params(tmp_path / "p.bin")["a"], [[1.0, 2.0]])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "p.bin").write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(ValidationError):
            read_params(tmp_path / "p.bin")

    def test_truncated_blob(self, tmp_path):
        write_params(tmp_path / "p.bin", [("a", np.ones((4, 4)))])
        (tmp_path / "p.bin").write_bytes((tmp_path / "p.bin").read_bytes()[:-8])
        with pytest.raises(ValidationError):
            read_params(tmp_path / "p.bin")

    def test_missing_tensor(self, linear, tmp_path):
        save_model(tmp_path, linear["csp-lda"])
        write_params(tmp_path / "params.bin", [("csp.W", linear["csp-lda"].bank.W)])
        with pytest.raises(ValidationError) as err:
            load_model(tmp_path)
        assert "csp.eigenvalues" in str(err.value)

    def test_bad_kind_in_manifest(self, linear, tmp_path):
        save_model(tmp_path, linear["csp-lda"])
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["kind"] = "forest"
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ValidationError) as err:
            load_model(tmp_path)
        assert err.value.field == "kind"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ValidationError):
            load_model(tmp_path)
