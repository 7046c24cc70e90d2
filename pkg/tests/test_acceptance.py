"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (printed in the terminal summary)
and then asserts, so a failing criterion also fails the run.
"""

import math
import subprocess
import sys

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from gradutil import check_gradients
from speechstate.autodiff import BatchNormState, Tensor, batchnorm, conv2d
from speechstate.csp import fit_csp
from speechstate.dataio import Event, EventList, SynthConfig, generate_synthetic_session
from speechstate.evaluation import (
    confusion, evaluate_model, f1_score, metrics_from_confusion, stream_replay,
)
from speechstate.models import fit_model, predict
from speechstate.preprocess import (
    WindowPipeline, extract_labeled_windows, filtered_windows, plan_windows, split, weights_from_counts,
    windows_in_interval,
)
from speechstate.tsne import perplexity_affinities, tsne_optimize
from test_autodiff import GRAD_CASES, _proj
from test_tsne import entropy_bits, silhouette, two_clusters

EPOCHS = 3  # the networks converge well inside the 50-epoch budget on these tasks


def record(n, ok, detail):
    ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[n])
    assert ok, detail


def trial_split(ws):
    sp = split(len(ws), 0.2, 2024, ws.groups)
    return ws.subset(sp.train_idx), ws.subset(sp.test_idx)


def synthetic(mode):
    rec, ev = generate_synthetic_session(
        SynthConfig(n_channels=16, n_trials_per_class=200, snr_db=6.0, seed=7, mode=mode))
    return rec, ev, trial_split(filtered_windows(rec, ev, WindowPipeline()))


@pytest.fixture(scope="module")
def bandpower():
    rec, ev, (train, test) = synthetic("bandpower")
    return {"rec": rec, "ev": ev, "train": train, "test": test}


@pytest.fixture(scope="module")
def bandpower_eegnet(bandpower):
    return fit_model("eegnet", bandpower["train"], bandpower["test"], seed=2024, epochs=EPOCHS)


def test_criterion_01_printed_f1_arithmetic():
    rows = {  # method: precision, recall, printed F1
        "CSP-SVM": (0.5256, 0.5391, 0.5323),
        "CSP-LDA": (0.5367, 0.5186, 0.5275),
        "ShallowConvNet": (0.6531, 0.6467, 0.6499),
        "DeepConvNet": (0.6254, 0.6172, 0.6231),
        "EEGNet": (0.6757, 0.6679, 0.6718),
    }
    bad = []
    for name, (p, r, printed) in rows.items():
        f = f1_score(p, r)
        if abs(f - printed) > 0.0005:
            bad.append(f"{name} {f:.5f} vs {printed}")
    record(1, not bad, "all five rows within 0.0005" if not bad else "mismatch: " + "; ".join(bad))


def test_criterion_02_class_weights_and_constant_predictor():
    w = weights_from_counts(n_speech=53293, n_idle=25580)
    y = np.r_[np.ones(13325, dtype=np.int64), np.zeros(10492, dtype=np.int64)]
    acc = metrics_from_confusion(confusion(y, np.zeros_like(y))).accuracy
    ok = abs(w.w_speech - 0.7400) <= 1e-4 and abs(w.w_idle - 1.5417) <= 1e-4 and abs(acc - 0.4405) <= 1e-4
    record(2, ok, f"weights speech {w.w_speech:.5f} idle {w.w_idle:.5f}; constant-idle accuracy {acc:.5f}")


def test_criterion_03_windowing_law():
    rng = np.random.default_rng(3)
    lengths = rng.integers(500, 5001, 300)
    bad = []
    for length in lengths:
        ev = EventList((Event(0.0, float(length), "speech"), Event(float(length), 700.0, "idle")))
        got = int(np.count_nonzero(plan_windows(ev).labels == 1))
        if got != (length - 500) // 50 + 1 or got != windows_in_interval(float(length)):
            bad.append(int(length))
    n2000 = windows_in_interval(2000.0)
    record(3, not bad and n2000 == 31, f"2000 ms -> {n2000}; {len(lengths)} random lengths, {len(bad)} wrong")


def test_criterion_04_gradient_checks():
    cases = dict(GRAD_CASES)
    cases["batchnorm_eval"] = (
        lambda x, g, b: _proj(batchnorm(x, g, b, BatchNormState(np.full(3, 0.2), np.full(3, 1.5), 0.1, 1e-5),
                                        "eval")), [(4, 3, 2, 3), (3,), (3,)])
    cases["conv2d_wide_temporal"] = (lambda x, k: _proj(conv2d(x, k, padding=(0, 15))), [(1, 1, 2, 40), (2, 1, 1, 32)])
    worst = {}
    for name, (build, shapes) in cases.items():
        errs = []
        for inst in range(20):
            rng = np.random.default_rng(1000 + inst)
            errs.append(check_gradients(build, [rng.uniform(-1, 1, s) for s in shapes], h=1e-6))
        worst[name] = max(errs)
    name = max(worst, key=worst.get)
    record(4, worst[name] < 1e-4, f"{len(cases)} ops x 20 instances; worst {name} rel err {worst[name]:.2e}")


def test_criterion_05_csp():
    worst_id = worst_diag = worst_mix = 0.0
    for inst in range(50):
        rng = np.random.default_rng(inst)
        a1, a0 = rng.standard_normal((8, 24)), rng.standard_normal((8, 24))
        c1, c0 = a1 @ a1.T / 24 + 0.05 * np.eye(8), a0 @ a0.T / 24 + 0.05 * np.eye(8)
        bank = fit_csp(c1, c0, 3)
        w = bank.W
        worst_id = max(worst_id, np.abs(w.T @ (c1 + c0) @ w - np.eye(6)).max())
        for c in (c1, c0):
            p = w.T @ c @ w
            worst_diag = max(worst_diag, np.abs(p - np.diag(np.diag(p))).max())
        mix = rng.standard_normal((8, 8)) + 3 * np.eye(8)
        mixed = fit_csp(mix @ c1 @ mix.T, mix @ c0 @ mix.T, 3)
        worst_mix = max(worst_mix, np.abs(mixed.retained_eigenvalues - bank.retained_eigenvalues).max())
    ok = worst_id < 1e-8 and worst_diag < 1e-8 and worst_mix < 1e-6
    record(5, ok, f"identity err {worst_id:.1e}, off-diagonal {worst_diag:.1e}, mixing {worst_mix:.1e}")


def test_criterion_06_classical_bandpower(bandpower):
    acc = {k: evaluate_model(fit_model(k, bandpower["train"], seed=2024), bandpower["test"]).accuracy
           for k in ("csp-lda", "csp-svm")}
    record(6, min(acc.values()) >= 0.90, f"csp-lda {acc['csp-lda']:.4f}, csp-svm {acc['csp-svm']:.4f} (need >= 0.90)")


def test_criterion_07_eegnet_bandpower(bandpower, bandpower_eegnet):
    acc = evaluate_model(bandpower_eegnet, bandpower["test"]).accuracy
    record(7, acc >= 0.85, f"eegnet {acc:.4f} after {EPOCHS} epochs (need >= 0.85)")


def test_criterion_08_waveshape_ordering():
    _, _, (train, test) = synthetic("waveshape")
    acc = {k: evaluate_model(fit_model(k, train, seed=2024), test).accuracy for k in ("csp-lda", "csp-svm")}
    acc["eegnet"] = evaluate_model(fit_model("eegnet", train, test, seed=2024, epochs=EPOCHS), test).accuracy
    ok = acc["csp-lda"] <= 0.65 and acc["csp-svm"] <= 0.65 and acc["eegnet"] >= 0.80
    record(8, ok, ", ".join(f"{k} {v:.4f}" for k, v in acc.items()) + " (csp <= 0.65, eegnet >= 0.80)")


CLI_CONFIG = """\
seed=2024
models=csp-svm,csp-lda,eegnet,shallow,deep
synth.trials=6
synth.channels=8
train.epochs=2
svm.epochs=10
"""


def test_criterion_09_cli_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CLI_CONFIG)
    outputs = []
    for run in ("first", "second"):
        out = tmp_path / run
        for cmd in ("synth", "preprocess", "train", "evaluate"):
            proc = subprocess.run([sys.executable, "-m", "speechstate", cmd, "--config", str(cfg), "--out", str(out)],
                                  capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
        outputs.append((out / "metrics.csv").read_bytes())
    n_rows = outputs[0].decode().count("\n") - 3
    record(9, outputs[0] == outputs[1] and n_rows == 5,
           f"two runs, {n_rows} model rows, metrics.csv byte-identical: {outputs[0] == outputs[1]}")


def test_criterion_10_tsne():
    rng = np.random.default_rng(10)
    aff = perplexity_affinities(rng.standard_normal((300, 10)), perplexity=30)
    ent_err = float(np.abs(entropy_bits(aff.conditional) - math.log2(30)).max())
    x, lab = two_clusters(rng, n=150)
    res = tsne_optimize(perplexity_affinities(x, perplexity=30), iters=1000, seed=2024)
    sil = silhouette(res.Y, lab)
    trail = np.convolve(res.kl_history[250:], np.ones(50) / 50, mode="valid")
    rise = float(np.diff(trail).max())
    ok = ent_err <= 1e-5 and sil >= 0.5 and rise <= 0.0
    record(10, ok, f"entropy err {ent_err:.1e}, silhouette {sil:.3f}, largest trailing-KL rise {rise:.1e}")


def test_criterion_11_stream_equals_offline(bandpower, bandpower_eegnet):
    model = bandpower_eegnet
    rec = bandpower["rec"]
    rec = rec.replace(rec.samples[:, :30000])
    ev = EventList(tuple(e for e in bandpower["ev"] if e.end_ms <= 30000))
    tl = stream_replay(model, rec, ev)
    raw = extract_labeled_windows(rec, ev)
    labels, scores = predict(model, raw)
    pos = np.searchsorted(tl.onsets_ms, raw.onsets_ms)
    same = bool(np.array_equal(tl.onsets_ms[pos], raw.onsets_ms) and np.array_equal(tl.labels[pos], labels)
                and np.array_equal(tl.scores[pos], scores))
    fs_model = model.pipeline.output_rate_hz
    ok = same and tl.mean_compute_ms < 50.0 and fs_model == 250.0 and model.n_channels == 16
    record(11, ok, f"{len(raw)} windows identical: {same}; {tl.mean_compute_ms:.2f} ms per hop, "
                   f"real-time factor {tl.real_time_factor:.1f} (model at {fs_model:g} Hz, C={model.n_channels})")
