import json

import numpy as np
import pytest
from scipy import signal

from speechstate.dataio import (
    Event, EventList, Recording, SynthConfig, generate_synthetic_session, load_session, read_events,
    save_session, target_channels,
)
from speechstate.errors import ConfigurationError, ValidationError
from speechstate.preprocess import extract_labeled_windows


@pytest.fixture(scope="module")
def bandpower():
    return generate_synthetic_session(SynthConfig(n_trials_per_class=10, seed=3))


@pytest.fixture(scope="module")
def waveshape():
    return generate_synthetic_session(SynthConfig(n_trials_per_class=20, mode="waveshape", seed=3))


class TestRecordingAndEvents:
    def test_channel_name_count_must_match(self):
        with pytest.raises(ValidationError) as exc:
            Recording(np.zeros((2, 4)), 1000.0, ("a",))
        assert exc.value.field == "channel_names"

    def test_sampling_rate_positive(self):
        with pytest.raises(ValidationError):
            Recording(np.zeros((1, 4)), 0.0, ("a",))

    def test_samples_are_read_only(self):
        rec = Recording(np.zeros((1, 4)), 1000.0, ("a",))
        with pytest.raises(ValueError):
            rec.samples[0, 0] = 1.0

    def test_overlapping_labelled_intervals_rejected(self):
        with pytest.raises(ValidationError):
            EventList((Event(0, 1000, "speech", 1), Event(500, 1000, "idle")))

    def test_decreasing_onsets_rejected(self):
        with pytest.raises(ValidationError):
            EventList((Event(1000, 100, "cue"), Event(0, 100, "cue")))

    def test_word_id_only_on_speech(self):
        with pytest.raises(ValidationError):
            EventList((Event(0, 100, "idle", 3),))
        with pytest.raises(ValidationError):
            EventList((Event(0, 100, "speech", 13),))

    def test_non_positive_duration_rejected(self):
        with pytest.raises(ValidationError):
            EventList((Event(0, 0, "rest"),))


class TestSynthetic:
    def test_timeline_counts(self, bandpower):
        _, ev = bandpower
        speech, idle = ev.of("speech"), ev.of("idle")
        assert len(speech) == 10 and all(e.duration_ms == 2000 for e in speech)
        assert len(idle) >= 10
        assert all(1 <= e.word_id <= 12 for e in speech)

    def test_labelled_intervals_never_overlap(self, bandpower):
        _, ev = bandpower
        lab = [e for e in ev if e.label in ("speech", "idle")]
        assert all(b.onset_ms >= a.end_ms for a, b in zip(lab, lab[1:]))

    def test_recording_covers_timeline(self, bandpower):
        rec, ev = bandpower
        assert rec.duration_ms == pytest.approx(max(e.end_ms for e in ev))
        assert rec.samples.shape == (16, rec.n_samples)

    def test_deterministic_per_seed(self):
        cfg = SynthConfig(n_trials_per_class=3, seed=11)
        a, b = generate_synthetic_session(cfg), generate_synthetic_session(cfg)
        assert np.array_equal(a[0].samples, b[0].samples) and a[1] == b[1]
        c = generate_synthetic_session(SynthConfig(n_trials_per_class=3, seed=12))
        assert not np.array_equal(a[0].samples, c[0].samples)

    def test_short_trial_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic_session(SynthConfig(trial_ms=400))

    def test_bandpower_ten_hz_ratio(self, bandpower):
        rec, ev = bandpower
        fs = rec.sampling_rate_hz

        def power_at_10(label):
            ps = []
            for e in ev.of(label):
                a = int(e.onset_ms * fs / 1000)
                seg = rec.samples[target_channels(16), a:a + int(2000 * fs / 1000)]
                f, p = signal.welch(seg, fs=fs, nperseg=1000, axis=-1)
                ps.append(p[:, np.argmin(np.abs(f - 10))].mean())
            return np.mean(ps)

        assert power_at_10("speech") >= 3 * power_at_10("idle")

    def test_waveshape_window_variance_matched(self, waveshape):
        rec, ev = waveshape
        ws = extract_labeled_windows(rec, ev)
        v = ws.x.var(axis=2).sum(axis=1)
        ratio = v[ws.y == 1].mean() / v[ws.y == 0].mean()
        assert abs(ratio - 1) < 0.05

    def test_waveshape_spatial_covariance_matched(self, waveshape):
        rec, ev = waveshape
        ws = extract_labeled_windows(rec, ev)

        def cov(x):
            c = np.einsum("nct,ndt->cd", x - x.mean(axis=2, keepdims=True), x - x.mean(axis=2, keepdims=True))
            return c / np.trace(c)

        c1, c0 = cov(ws.x[ws.y == 1]), cov(ws.x[ws.y == 0])
        assert np.abs(c1 - c0).max() < 0.1 * np.abs(c0).max()


class TestFiles:
    def test_round_trip(self, tmp_path, bandpower):
        rec, ev = bandpower
        save_session(tmp_path, rec, ev)
        rec2, ev2 = load_session(tmp_path)
        assert ev2 == ev
        np.testing.assert_allclose(rec2.samples, rec.samples, rtol=1e-5, atol=1e-5 * np.abs(rec.samples).max())
        np.testing.assert_array_equal(rec2.samples, rec.samples.astype(np.float32))
        assert rec2.channel_names == rec.channel_names

    def test_manifest_keys(self, tmp_path, bandpower):
        save_session(tmp_path, *bandpower)
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["format_version"] == 1 and m["dtype"] == "f32le"
        for key in ("sampling_rate_hz", "n_channels", "channel_names", "samples_file", "events_file"):
            assert key in m

    def test_sample_file_size_and_layout(self, tmp_path):
        rec = Recording(np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]]), 1000.0, ("a", "b"))
        save_session(tmp_path, rec, EventList(()))
        raw = (tmp_path / "samples.f32").read_bytes()
        assert len(raw) == 32
        assert np.frombuffer(raw, "<f4").tolist() == [1, 2, 3, 4, 5, 6, 7, 8]

    def test_events_csv_line(self, tmp_path):
        p = tmp_path / "events.csv"
        p.write_text("onset_ms,duration_ms,label,word_id\n0,2000,speech,3\n")
        assert read_events(p).events == (Event(0.0, 2000.0, "speech", 3),)
        rec = Recording(np.zeros((1, 2000)), 1000.0, ("a",))
        save_session(tmp_path / "s", rec, read_events(p))
        assert (tmp_path / "s" / "events.csv").read_text().splitlines()[1] == "0,2000,speech,3"

    def test_truncated_samples(self, tmp_path, bandpower):
        save_session(tmp_path, *bandpower)
        f = tmp_path / "samples.f32"
        f.write_bytes(f.read_bytes()[:-16 * 4])
        with pytest.raises(ValidationError) as exc:
            load_session(tmp_path)
        assert exc.value.field == "n_samples"

    def test_channel_name_mismatch(self, tmp_path, bandpower):
        save_session(tmp_path, *bandpower)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["n_channels"] = 64
        m["channel_names"] = m["channel_names"] + ["X"] * 47
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ValidationError) as exc:
            load_session(tmp_path)
        assert exc.value.field == "channel_names"

    @pytest.mark.parametrize("key,value,field", [
        ("format_version", 2, "format_version"),
        ("dtype", "f64le", "dtype"),
    ])
    def test_bad_manifest_fields(self, tmp_path, bandpower, key, value, field):
        save_session(tmp_path, *bandpower)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m[key] = value
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ValidationError) as exc:
            load_session(tmp_path)
        assert exc.value.field == field

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ValidationError) as exc:
            load_session(tmp_path)
        assert exc.value.field == "manifest"

    def test_malformed_event_row(self, tmp_path, bandpower):
        save_session(tmp_path, *bandpower)
        with open(tmp_path / "events.csv", "a") as fh:
            fh.write("abc,1,idle,\n")
        with pytest.raises(ValidationError) as exc:
            load_session(tmp_path)
        assert exc.value.field == "events_row"
