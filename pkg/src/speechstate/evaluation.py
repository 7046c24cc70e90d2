"""Confusion-matrix metrics, report files, and causal streaming replay."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .dataio import EventList, Recording
from .errors import ConfigurationError, DimensionError, EmptyInputError, LabelError, ValidationError
from .models import TrainedModel, predict
from .preprocess import windows_in_interval, window_samples

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("model", "accuracy", "precision", "recall", "f1", "tp", "fp", "fn", "tn", "seed")
SCOPES = ("pooled", "per-subject")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with speech (label 1) as the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValidationError("confusion counts must be non-negative", "counts")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def flipped(self) -> "ConfusionMatrix":
        """The same outcomes with idle treated as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


def _labels(a, name):
    a = np.asarray(a)
    if a.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {a.shape}")
    if a.size and not np.all((a == 0) | (a == 1)):
        raise LabelError(f"{name} must contain only 0 and 1")
    return a.astype(np.int64)


def confusion(y_true, y_pred) -> ConfusionMatrix:
    t = _labels(y_true, "y_true")
    p = _labels(y_pred, "y_pred")
    if t.shape != p.shape:
        raise DimensionError(f"{t.size} true labels but {p.size} predictions")
    # code 2*t + p: 0 tn, 1 fp, 2 fn, 3 tp
    tn, fp, fn, tp = np.bincount(2 * t + p, minlength=4).tolist()
    return ConfusionMatrix(tp, fp, fn, tn)


def _ratio(num, den):
    return (num / den, False) if den > 0 else (0.0, True)


def _f1(p, r):
    return (2.0 * p * r / (p + r), False) if p + r > 0 else (0.0, True)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: ConfusionMatrix
    model: str = ""
    seed: int = 2024
    config_hash: str = ""
    scope: str = "pooled"
    degenerate: tuple[str, ...] = ()
    macro: dict = field(default_factory=dict)

    @property
    def error_rate(self) -> float:
        cm = self.confusion
        return (cm.fp + cm.fn) / cm.total

    def row(self) -> dict:
        cm = self.confusion
        return {"model": self.model, "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn,
                "seed": self.seed}


def metrics_from_confusion(cm: ConfusionMatrix, model: str = "", seed: int = 2024, config_hash: str = "",
                           scope: str = "pooled") -> MetricsReport:
    """Positive-class accuracy, precision, recall and F1.

    A metric whose denominator is zero is reported as 0 and named in
    ``degenerate``. Macro averages over both classes go in ``macro``.
    """
    if cm.total == 0:
        raise EmptyInputError("confusion matrix is empty")
    acc = (cm.tp + cm.tn) / cm.total
    p, dp = _ratio(cm.tp, cm.tp + cm.fp)
    r, dr = _ratio(cm.tp, cm.tp + cm.fn)
    f, df = _f1(p, r)
    bad = tuple(name for name, flag in (("precision", dp), ("recall", dr), ("f1", df)) if flag)
    if bad:
        log.warning("%s: undefined %s reported as 0", model or "model", ", ".join(bad))
    neg = cm.flipped()
    pn, _ = _ratio(neg.tp, neg.tp + neg.fp)
    rn, _ = _ratio(neg.tp, neg.tp + neg.fn)
    fn_, _ = _f1(pn, rn)
    macro = {"precision": (p + pn) / 2, "recall": (r + rn) / 2, "f1": (f + fn_) / 2}
    return MetricsReport(acc, p, r, f, cm, model, seed, config_hash, scope, bad, macro)


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean, the same formula ``metrics_from_confusion`` applies."""
    return _f1(precision, recall)[0]


def evaluate_model(model: TrainedModel, ws, name: str | None = None, scope: str = "pooled") -> MetricsReport:
    """Predict every window of ``ws`` and score against its labels."""
    if len(ws) == 0:
        raise EmptyInputError("no windows to evaluate")
    labels, _ = predict(model, ws)
    return metrics_from_confusion(confusion(ws.y, labels), name or model.kind, model.seed,
                                  model.config_hash, scope)


# --- report files -------------------------------------------------------------

def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def metrics_csv(reports, config_hash: str = "", scope: str = "pooled") -> str:
    """CSV text: two ``#`` header lines (config hash, scope), then one row per report."""
    if scope not in SCOPES:
        raise ConfigurationError(f"scope must be one of {SCOPES}")
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n# scope={scope}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for rep in reports:
        row = rep.row()
        w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics_csv(text: str) -> tuple[dict, list[dict]]:
    """Header fields and typed rows from ``metrics_csv`` output."""
    header, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key.strip()] = value.strip()
        else:
            body.append(line)
    rows = list(csv.DictReader(body))
    if rows and set(rows[0]) != set(METRIC_COLUMNS):
        raise ValidationError(f"metrics columns {sorted(rows[0])} do not match {METRIC_COLUMNS}", "columns")
    for r in rows:
        for c in ("accuracy", "precision", "recall", "f1"):
            r[c] = float(r[c])
        for c in ("tp", "fp", "fn", "tn", "seed"):
            r[c] = int(r[c])
    return header, rows


def metrics_table(rows) -> str:
    """Aligned text table: one line per method with accuracy, precision, recall, F1."""
    rows = [r.row() if isinstance(r, MetricsReport) else r for r in rows]
    head = ("Method", "Accuracy", "Precision", "Recall", "F1-score")
    body = [(r["model"], f"{r['accuracy']:.4f}", f"{r['precision']:.4f}", f"{r['recall']:.4f}", f"{r['f1']:.4f}")
            for r in rows]
    widths = [max(len(x[i]) for x in [head, *body]) for i in range(len(head))]
    lines = ["  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(line))
             for line in [head, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# --- streaming replay -----------------------------------------------------------

@dataclass
class StreamTimeline:
    onsets_ms: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    compute_us: np.ndarray
    true_labels: np.ndarray
    shift_ms: float
    window_ms: float

    @property
    def n_decisions(self) -> int:
        return int(self.onsets_ms.size)

    @property
    def mean_compute_ms(self) -> float:
        return float(np.mean(self.compute_us)) / 1000.0 if self.n_decisions else 0.0

    @property
    def real_time_factor(self) -> float:
        m = self.mean_compute_ms
        return self.shift_ms / m if m > 0 else float("inf")

    @property
    def decisions_per_second(self) -> float:
        m = self.mean_compute_ms
        return 1000.0 / m if m > 0 else float("inf")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["onset_ms", "label", "score", "true_label", "compute_us"])
        for row in zip(self.onsets_ms, self.labels, self.scores, self.true_labels, self.compute_us):
            w.writerow([f"{row[0]:g}", int(row[1]), repr(float(row[2])), int(row[3]), f"{row[4]:.1f}"])
        return buf.getvalue()


def _true_labels(ev: EventList | None, onsets, window_ms) -> np.ndarray:
    """Label of the interval containing each window, -1 when none contains it."""
    out = np.full(onsets.size, -1, dtype=np.int64)
    if ev is None:
        return out
    for e in ev.events:
        if e.label not in ("speech", "idle"):
            continue
        inside = (onsets >= e.onset_ms - 1e-9) & (onsets + window_ms <= e.onset_ms + e.duration_ms + 1e-9)
        out[inside] = 1 if e.label == "speech" else 0
    return out


def stream_replay(model: TrainedModel, rec: Recording, ev: EventList | None = None,
                  window_ms: float | None = None, shift_ms: float | None = None) -> StreamTimeline:
    """Slide over ``rec`` one hop at a time, decoding each window as soon as it ends.

    Each decision uses only the raw samples of its own window and runs the
    model's whole pipeline (filter, decimate, standardize, classify), timed
    per hop.
    """
    pipe = model.pipeline
    window_ms = pipe.window_ms if window_ms is None else float(window_ms)
    shift_ms = pipe.shift_ms if shift_ms is None else float(shift_ms)
    if abs(window_ms - pipe.window_ms) > 1e-9:
        raise ConfigurationError(f"model was trained on {pipe.window_ms} ms windows, not {window_ms} ms")
    if shift_ms <= 0:
        raise ConfigurationError("shift must be positive")
    if abs(rec.sampling_rate_hz - pipe.input_rate_hz) > 1e-9:
        raise ConfigurationError(
            f"recording is at {rec.sampling_rate_hz} Hz, model expects {pipe.input_rate_hz} Hz")
    if rec.n_channels != model.n_channels:
        raise ConfigurationError(f"recording has {rec.n_channels} channels, model expects {model.n_channels}")
    fs = rec.sampling_rate_hz
    duration_ms = rec.n_samples * 1000.0 / fs
    n_hops = windows_in_interval(duration_ms, window_ms, shift_ms)
    if n_hops == 0:
        raise EmptyInputError(f"recording of {duration_ms} ms is shorter than one {window_ms} ms window")
    w = window_samples(window_ms, fs)
    onsets = np.arange(n_hops) * shift_ms
    labels = np.empty(n_hops, dtype=np.int64)
    scores = np.empty(n_hops)
    spent = np.empty(n_hops)
    for i, onset in enumerate(onsets):
        a = int(np.rint(onset * fs / 1000.0))
        raw = rec.samples[None, :, a:a + w]
        t0 = time.perf_counter_ns()
        lab, sc = predict(model, raw)
        spent[i] = (time.perf_counter_ns() - t0) / 1000.0
        labels[i], scores[i] = lab[0], sc[0]
    tl = StreamTimeline(onsets, labels, scores, spent, _true_labels(ev, onsets, window_ms), shift_ms, window_ms)
    log.info("stream: %d decisions, mean %.2f ms per hop, real-time factor %.1f", tl.n_decisions,
             tl.mean_compute_ms, tl.real_time_factor)
    return tl
