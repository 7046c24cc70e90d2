"""Filtering, decimation, labelled windowing, standardization, splitting and
class weighting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal

from .dataio import EventList, Recording
from .errors import ConfigurationError, DegenerateLabelError, DimensionError, LabelError
from .rng import SplitMix64

log = logging.getLogger(__name__)

LABEL_OF = {"speech": 1, "idle": 0}
STD_FLOOR = 1e-8


@dataclass
class WindowSet:
    """Stack of equal-length labelled windows.

    ``x`` is [n, C, T]; ``y`` is 1 for speech and 0 for idle. ``groups``
    identifies the source interval of each window (used by trial-level
    splits) and ``onsets_ms`` its onset within the session.
    """

    x: np.ndarray
    y: np.ndarray
    window_ms: float = 500.0
    shift_ms: float = 50.0
    sampling_rate_hz: float = 1000.0
    groups: np.ndarray | None = None
    onsets_ms: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 3:
            raise DimensionError(f"window stack must be [n, C, T], got {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise DimensionError(f"{self.x.shape[0]} windows but {self.y.shape[0]} labels")
        if self.y.size and not np.all((self.y == 0) | (self.y == 1)):
            raise LabelError("window labels must be 0 or 1")

    def __len__(self):
        return self.x.shape[0]

    @property
    def n_channels(self) -> int:
        return self.x.shape[1]

    @property
    def n_times(self) -> int:
        return self.x.shape[2]

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self, x=self.x[idx], y=self.y[idx],
            groups=None if self.groups is None else self.groups[idx],
            onsets_ms=None if self.onsets_ms is None else self.onsets_ms[idx],
            provenance=dict(self.provenance),
        )


@dataclass(frozen=True)
class SplitIndices:
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int = 2024
    test_fraction: float = 0.2


@dataclass(frozen=True)
class ClassWeights:
    w_idle: float
    w_speech: float

    def as_tuple(self) -> tuple[float, float]:
        """Ordered by label value: (idle=0, speech=1)."""
        return (self.w_idle, self.w_speech)


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray


# --- filtering -----------------------------------------------------------------

def _check_band(fs, low, high):
    nyq = fs / 2.0
    if not 0 < low < high < nyq:
        raise ConfigurationError(f"band {low}-{high} Hz must satisfy 0 < low < high < Nyquist ({nyq} Hz)")


def bandpass_array(x: np.ndarray, fs: float, low: float, high: float, order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth band-pass along the last axis."""
    _check_band(fs, low, high)
    sos = signal.butter(order, [low, high], btype="bandpass", fs=fs, output="sos")
    return signal.sosfiltfilt(sos, x, axis=-1)


def bandpass(rec: Recording, low_hz: float = 0.5, high_hz: float = 45.0, order: int = 4) -> Recording:
    return rec.replace(bandpass_array(rec.samples, rec.sampling_rate_hz, low_hz, high_hz, order))


def decimate_array(x: np.ndarray, fs: float, factor: int) -> np.ndarray:
    """Anti-alias low-pass at 0.4 of the new rate, then keep every ``factor``-th sample."""
    factor = int(factor)
    if factor < 1:
        raise ConfigurationError(f"decimation factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    cutoff = 0.4 * fs / factor
    sos = signal.butter(4, cutoff, btype="lowpass", fs=fs, output="sos")
    y = signal.sosfiltfilt(sos, x, axis=-1)
    n = x.shape[-1] // factor
    return np.ascontiguousarray(y[..., ::factor][..., :n])


def decimate(rec: Recording, factor: int) -> Recording:
    if int(factor) == 1:
        return rec
    return rec.replace(decimate_array(rec.samples, rec.sampling_rate_hz, factor),
                       rec.sampling_rate_hz / int(factor))


# --- windowing -----------------------------------------------------------------

def windows_in_interval(length_ms: float, window_ms: float = 500.0, shift_ms: float = 50.0) -> int:
    """Number of windows that fit fully inside an interval."""
    if length_ms < window_ms:
        return 0
    return int(math.floor((length_ms - window_ms) / shift_ms + 1e-9)) + 1


def window_samples(window_ms: float, fs: float) -> int:
    t = window_ms * fs / 1000.0
    if abs(t - round(t)) > 1e-9:
        raise ConfigurationError(f"{window_ms} ms at {fs} Hz is not a whole number of samples")
    return int(round(t))


@dataclass(frozen=True)
class WindowPlan:
    """Where each labelled window starts, without materializing the data."""

    onsets_ms: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    skipped: int


def plan_windows(events: EventList, window_ms: float = 500.0, shift_ms: float = 50.0) -> WindowPlan:
    onsets, labels, groups = [], [], []
    skipped = 0
    for gi, e in enumerate(events):
        if e.label not in LABEL_OF:
            continue
        k = windows_in_interval(e.duration_ms, window_ms, shift_ms)
        if k == 0:
            skipped += 1
            continue
        onsets.extend(e.onset_ms + shift_ms * np.arange(k))
        labels.extend([LABEL_OF[e.label]] * k)
        groups.extend([gi] * k)
    if skipped:
        log.warning("skipped %d labelled intervals shorter than %g ms", skipped, window_ms)
    return WindowPlan(np.asarray(onsets, dtype=np.float64), np.asarray(labels, dtype=np.int64),
                      np.asarray(groups, dtype=np.int64), skipped)


def slice_windows(rec: Recording, onsets_ms: np.ndarray, window_ms: float) -> np.ndarray:
    """Copy raw windows starting at ``onsets_ms`` into an [n, C, T] array."""
    fs = rec.sampling_rate_hz
    t = window_samples(window_ms, fs)
    starts = np.rint(np.asarray(onsets_ms) * fs / 1000.0).astype(np.int64)
    if starts.size and (starts.min() < 0 or starts.max() + t > rec.n_samples):
        raise DimensionError("a window extends beyond the recording")
    view = np.lib.stride_tricks.sliding_window_view(rec.samples, t, axis=1)
    return np.ascontiguousarray(view[:, starts].transpose(1, 0, 2))


def extract_labeled_windows(rec: Recording, events: EventList, window_ms: float = 500.0,
                            shift_ms: float = 50.0) -> WindowSet:
    """Cut every speech/idle interval into overlapping windows labelled by the interval.

    Windows never cross an interval boundary; cue and rest intervals give
    nothing. Intervals shorter than the window are skipped and counted in
    ``provenance["skipped_intervals"]``.
    """
    plan = plan_windows(events, window_ms, shift_ms)
    x = slice_windows(rec, plan.onsets_ms, window_ms)
    return WindowSet(
        x, plan.labels, window_ms, shift_ms, rec.sampling_rate_hz, plan.groups, plan.onsets_ms,
        {"skipped_intervals": plan.skipped, "filtered": False, "standardized": False},
    )


# --- standardization, split, weights --------------------------------------------

def compute_stats(x: np.ndarray) -> StandardizationStats:
    mean = x.mean(axis=(0, 2))
    std = np.maximum(x.std(axis=(0, 2)), STD_FLOOR)
    return StandardizationStats(mean, std)


def apply_stats(x: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    if stats.mean.shape != (x.shape[1],):
        raise DimensionError(f"standardization stats cover {stats.mean.shape[0]} channels, data has {x.shape[1]}")
    return (x - stats.mean[None, :, None]) / stats.std[None, :, None]


def standardize(ws: WindowSet, stats: StandardizationStats | None = None) -> tuple[WindowSet, StandardizationStats]:
    """Per-channel z-scoring; stats are computed from ``ws`` when not supplied."""
    if stats is None:
        stats = compute_stats(ws.x)
    out = replace(ws, x=apply_stats(ws.x, stats), provenance={**ws.provenance, "standardized": True})
    return out, stats


def split(n: int, test_fraction: float = 0.2, seed: int = 2024, groups=None) -> SplitIndices:
    """Seeded shuffle split.

    Without ``groups`` individual windows are shuffled and the first
    ``round(n * test_fraction)`` of the permutation form the test set. With
    ``groups`` whole groups (trials) are assigned instead, so overlapping
    windows of one trial never straddle the split.
    """
    if n < 2:
        raise ConfigurationError(f"cannot split {n} samples")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = SplitMix64(seed)
    if groups is None:
        perm = rng.permutation(n)
        n_test = int(round(n * test_fraction))
        test = np.sort(perm[:n_test])
        train = np.sort(perm[n_test:])
    else:
        groups = np.asarray(groups)
        if groups.shape != (n,):
            raise DimensionError("groups must have one entry per sample")
        uniq = np.unique(groups)
        perm = rng.permutation(uniq.size)
        n_test = int(round(uniq.size * test_fraction))
        test_groups = uniq[perm[:n_test]]
        mask = np.isin(groups, test_groups)
        test = np.flatnonzero(mask)
        train = np.flatnonzero(~mask)
    return SplitIndices(train, test, seed, test_fraction)


def class_weights(y) -> ClassWeights:
    """Inverse-frequency weights ``n_total / (2 n_c)``."""
    y = np.asarray(y)
    if y.size and not np.all((y == 0) | (y == 1)):
        raise LabelError("labels must be 0 or 1")
    n1 = int(np.count_nonzero(y == 1))
    n0 = int(y.size - n1)
    if n0 == 0 or n1 == 0:
        raise DegenerateLabelError("class weights need both idle and speech samples")
    return weights_from_counts(n_speech=n1, n_idle=n0)


def weights_from_counts(n_speech: int, n_idle: int) -> ClassWeights:
    if n_speech <= 0 or n_idle <= 0:
        raise DegenerateLabelError("class weights need both idle and speech samples")
    total = n_speech + n_idle
    return ClassWeights(w_idle=total / (2.0 * n_idle), w_speech=total / (2.0 * n_speech))


# --- the per-window pipeline carried by trained models ----------------------------

@dataclass
class WindowPipeline:
    """Preprocessing applied to each raw window independently.

    Filtering a window on its own (instead of the continuous recording)
    keeps every step causal: a window ending at ``t`` only ever sees samples
    up to ``t``, so offline and streaming decoding are the same function.
    """

    input_rate_hz: float = 1000.0
    band: tuple[float, float] = (0.5, 45.0)
    order: int = 4
    decimation: int = 4
    window_ms: float = 500.0
    shift_ms: float = 50.0
    stats: StandardizationStats | None = None

    @property
    def output_rate_hz(self) -> float:
        return self.input_rate_hz / self.decimation

    def filter(self, raw: np.ndarray) -> np.ndarray:
        """Band-pass and decimate raw windows [n, C, T_raw]."""
        x = bandpass_array(raw, self.input_rate_hz, self.band[0], self.band[1], self.order)
        return decimate_array(x, self.input_rate_hz, self.decimation)

    def finish(self, filtered: np.ndarray) -> np.ndarray:
        if self.stats is None:
            raise ConfigurationError("pipeline has no standardization statistics yet")
        return apply_stats(filtered, self.stats)

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return self.finish(self.filter(raw))

    def prepare(self, ws: WindowSet) -> np.ndarray:
        """Bring a window set to model-input form, applying only the missing steps."""
        prov = ws.provenance
        if prov.get("standardized"):
            return ws.x
        if prov.get("filtered"):
            if abs(ws.sampling_rate_hz - self.output_rate_hz) > 1e-9:
                raise ConfigurationError(
                    f"windows are at {ws.sampling_rate_hz} Hz, model expects {self.output_rate_hz} Hz")
            return self.finish(ws.x)
        if abs(ws.sampling_rate_hz - self.input_rate_hz) > 1e-9:
            raise ConfigurationError(
                f"raw windows are at {ws.sampling_rate_hz} Hz, model expects {self.input_rate_hz} Hz")
        return self.apply(ws.x)

    def to_dict(self) -> dict:
        d = {"input_rate_hz": self.input_rate_hz, "band": list(self.band), "order": self.order,
             "decimation": self.decimation, "window_ms": self.window_ms, "shift_ms": self.shift_ms}
        if self.stats is not None:
            d["stats_mean"] = [float(v) for v in self.stats.mean]
            d["stats_std"] = [float(v) for v in self.stats.std]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WindowPipeline":
        stats = None
        if "stats_mean" in d:
            stats = StandardizationStats(np.asarray(d["stats_mean"], dtype=np.float64),
                                         np.asarray(d["stats_std"], dtype=np.float64))
        return cls(float(d["input_rate_hz"]), tuple(d["band"]), int(d["order"]), int(d["decimation"]),
                   float(d["window_ms"]), float(d["shift_ms"]), stats)


def filtered_windows(rec: Recording, events: EventList, pipeline: WindowPipeline,
                     chunk: int = 512) -> WindowSet:
    """Labelled windows passed through ``pipeline.filter`` in memory-bounded chunks."""
    if abs(rec.sampling_rate_hz - pipeline.input_rate_hz) > 1e-9:
        raise ConfigurationError(
            f"recording is at {rec.sampling_rate_hz} Hz, pipeline expects {pipeline.input_rate_hz} Hz")
    plan = plan_windows(events, pipeline.window_ms, pipeline.shift_ms)
    t_out = window_samples(pipeline.window_ms, rec.sampling_rate_hz) // pipeline.decimation
    x = np.empty((plan.onsets_ms.size, rec.n_channels, t_out))
    for a in range(0, plan.onsets_ms.size, chunk):
        raw = slice_windows(rec, plan.onsets_ms[a:a + chunk], pipeline.window_ms)
        x[a:a + chunk] = pipeline.filter(raw)
    prov = {"skipped_intervals": plan.skipped, "filtered": True, "standardized": False,
            "band": list(pipeline.band), "order": pipeline.order, "decimation": pipeline.decimation}
    return WindowSet(x, plan.labels, pipeline.window_ms, pipeline.shift_ms, pipeline.output_rate_hz,
                     plan.groups, plan.onsets_ms, prov)
