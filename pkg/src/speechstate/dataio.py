"""Session storage and the synthetic EEG surrogate.

A session directory holds three files::

    manifest.json   format_version, sampling_rate_hz, n_channels, n_samples,
                    channel_names, dtype ("f32le"), samples_file, events_file
    samples.f32     raw float32 little-endian, channel-major (all of channel 0,
                    then channel 1, ...)
    events.csv      header ``onset_ms,duration_ms,label,word_id``
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ValidationError
from .rng import SplitMix64

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LABELS = ("speech", "idle", "cue", "rest")
N_WORDS = 12


@dataclass(frozen=True)
class Recording:
    """Continuous multichannel EEG, channels x time, microvolts."""

    samples: np.ndarray
    sampling_rate_hz: float
    channel_names: tuple[str, ...]

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 2:
            raise ValidationError(f"samples must be channels x time, got shape {x.shape}", "samples")
        if x.shape[0] != len(self.channel_names):
            raise ValidationError(
                f"{x.shape[0]} channels but {len(self.channel_names)} channel names", "channel_names")
        if not self.sampling_rate_hz > 0:
            raise ValidationError("sampling rate must be positive", "sampling_rate_hz")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_ms(self) -> float:
        return self.n_samples * 1000.0 / self.sampling_rate_hz

    def replace(self, samples, sampling_rate_hz=None) -> "Recording":
        fs = self.sampling_rate_hz if sampling_rate_hz is None else sampling_rate_hz
        return Recording(samples, fs, self.channel_names)


@dataclass(frozen=True)
class Event:
    onset_ms: float
    duration_ms: float
    label: str
    word_id: int | None = None

    @property
    def end_ms(self) -> float:
        return self.onset_ms + self.duration_ms


@dataclass(frozen=True)
class EventList:
    events: tuple[Event, ...] = field(default_factory=tuple)

    def __post_init__(self):
        evs = tuple(self.events)
        object.__setattr__(self, "events", evs)
        last = -np.inf
        labelled = []
        for i, e in enumerate(evs):
            if e.label not in LABELS:
                raise ValidationError(f"event {i}: unknown label {e.label!r}", "label")
            if not e.duration_ms > 0:
                raise ValidationError(f"event {i}: duration must be positive", "duration_ms")
            if e.onset_ms < last:
                raise ValidationError(f"event {i}: onsets must be non-decreasing", "onset_ms")
            if e.word_id is not None and not (e.label == "speech" and 1 <= e.word_id <= N_WORDS):
                raise ValidationError(f"event {i}: word_id only allowed on speech events (1..{N_WORDS})", "word_id")
            last = e.onset_ms
            if e.label in ("speech", "idle"):
                labelled.append(e)
        for a, b in zip(labelled, labelled[1:]):
            if b.onset_ms < a.end_ms:
                raise ValidationError(f"labelled intervals overlap at {b.onset_ms} ms", "onset_ms")

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def of(self, label: str) -> list[Event]:
        return [e for e in self.events if e.label == label]


@dataclass(frozen=True)
class SynthConfig:
    n_channels: int = 16
    sampling_rate_hz: float = 1000.0
    n_trials_per_class: int = 50
    trial_ms: float = 2000.0
    rest_ms: float = 2000.0
    cue_ms: float = 500.0
    mode: str = "bandpower"
    snr_db: float = 6.0
    seed: int = 2024
    amplitude_uv: float = 10.0

    def validate(self):
        if not 1 <= self.n_channels <= 64:
            raise ConfigurationError("n_channels must lie in 1..64")
        if self.sampling_rate_hz <= 0:
            raise ConfigurationError("sampling_rate_hz must be positive")
        if self.n_trials_per_class < 1:
            raise ConfigurationError("n_trials_per_class must be at least 1")
        if self.trial_ms < 500:
            raise ConfigurationError(f"trial_ms={self.trial_ms} is shorter than one 500 ms window")
        if self.rest_ms <= 0 or self.cue_ms < 0:
            raise ConfigurationError("rest_ms must be positive and cue_ms non-negative")
        if self.mode not in ("bandpower", "waveshape"):
            raise ConfigurationError(f"unknown synthesis mode {self.mode!r}")


# 10-20 style labels; enough for the 64-channel cap
CHANNEL_NAMES = (
    "Fp1 Fp2 AF7 AF3 AFz AF4 AF8 F7 F5 F3 F1 Fz F2 F4 F6 F8 FT9 FT7 FC5 FC3 FC1 FC2 FC4 FC6 FT8 FT10 "
    "T7 C5 C3 C1 Cz C2 C4 C6 T8 TP9 TP7 CP5 CP3 CP1 CPz CP2 CP4 CP6 TP8 TP10 P7 P5 P3 P1 Pz P2 P4 P6 "
    "P8 PO7 PO3 POz PO4 PO8 O1 Oz O2 Iz"
).split()

SIGNAL_HZ = 10.0
MATCH_BLOCK_MS = 500.0


def target_channels(n_channels: int) -> np.ndarray:
    """Channels carrying the bandpower-mode speech rhythm: the first quarter."""
    return np.arange(max(1, n_channels // 4))


def _pink_noise(rng: SplitMix64, n_channels: int, n: int, fs: float, knee_hz: float = 1.0) -> np.ndarray:
    """Unit-variance noise with 1/f power above ``knee_hz`` and flat below."""
    white = rng.normal((n_channels, n))
    spec = np.fft.rfft(white, axis=1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec *= 1.0 / np.sqrt(np.maximum(f, knee_hz))
    x = np.fft.irfft(spec, n=n, axis=1)
    x -= x.mean(axis=1, keepdims=True)
    return x / x.std(axis=1, keepdims=True)


def _mixing_matrix(rng: SplitMix64, c: int) -> np.ndarray:
    m = np.eye(c) + 0.3 * rng.normal((c, c)) / np.sqrt(c)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _biphasic_train(rng: SplitMix64, n: int, fs: float, rate_hz: float = 8.0, width_ms: float = 15.0) -> np.ndarray:
    """Fixed-polarity derivative-of-Gaussian pulses at jittered ~8 Hz spacing."""
    sig = width_ms * fs / 1000.0
    half = int(np.ceil(4 * sig))
    t = np.arange(-half, half + 1)
    pulse = -t / sig * np.exp(-0.5 * (t / sig) ** 2)
    period = fs / rate_hz
    k_max = int(np.ceil(n / (0.75 * period))) + 1
    u = rng.uniform(k_max + 1)
    pos = u[0] * period + np.concatenate([[0.0], np.cumsum(period * (0.75 + 0.5 * u[1:]))])
    out = np.zeros(n + 2 * half)
    for p in pos[pos < n]:
        k = int(p) + half
        out[k - half:k + half + 1] += pulse
    return out[half:half + n]


def generate_synthetic_session(cfg: SynthConfig) -> tuple[Recording, EventList]:
    """Surrogate imagined-speech session.

    Each trial is a cue, an imagined-speech interval of ``trial_ms`` and an
    idle (rest/fixation) interval of ``rest_ms``. Background is spatially
    mixed 1/f noise. In ``bandpower`` mode speech intervals add a 10 Hz
    sinusoid on :func:`target_channels` with power ``snr_db`` above the
    channel's background. In ``waveshape`` mode speech intervals swap part
    of every source's noise for a biphasic pulse train of equal power, so
    the spatial covariance and the total variance of speech and idle
    segments agree while their waveforms differ.
    """
    cfg.validate()
    fs = float(cfg.sampling_rate_hz)
    rng = SplitMix64(cfg.seed)
    noise_rng, mix_rng, word_rng, sig_rng = rng.spawn(), rng.spawn(), rng.spawn(), rng.spawn()

    events: list[Event] = []
    t = 0.0
    words = word_rng.integers(1, N_WORDS + 1, cfg.n_trials_per_class)
    for i in range(cfg.n_trials_per_class):
        if cfg.cue_ms > 0:
            events.append(Event(t, cfg.cue_ms, "cue"))
            t += cfg.cue_ms
        events.append(Event(t, cfg.trial_ms, "speech", int(words[i])))
        t += cfg.trial_ms
        events.append(Event(t, cfg.rest_ms, "idle"))
        t += cfg.rest_ms
    n = int(round(t * fs / 1000.0))
    c = cfg.n_channels

    sources = _pink_noise(noise_rng, c, n, fs)
    ratio = 10.0 ** (cfg.snr_db / 10.0)
    if cfg.mode == "waveshape":
        frac = ratio / (1.0 + ratio)
        block = max(2, int(round(MATCH_BLOCK_MS * fs / 1000.0)))
        for e in events:
            if e.label != "speech":
                continue
            a, b = _span(e, fs)
            for ch in range(c):
                seg = sources[ch, a:b]
                wave = _biphasic_train(sig_rng, b - a, fs)
                wave *= np.sqrt(frac * _block_var(seg, block) / _block_var(wave, block))
                sources[ch, a:b] = np.sqrt(1.0 - frac) * seg + wave
    x = _mixing_matrix(mix_rng, c) @ sources
    if cfg.mode == "bandpower":
        chans = target_channels(c)
        amp = np.sqrt(2.0 * ratio) * x[chans].std(axis=1)
        for e in events:
            if e.label != "speech":
                continue
            a, b = _span(e, fs)
            tt = np.arange(b - a) / fs
            phase = 2 * np.pi * sig_rng.uniform(len(chans))
            x[chans, a:b] += amp[:, None] * np.sin(2 * np.pi * SIGNAL_HZ * tt[None, :] + phase[:, None])
    x *= cfg.amplitude_uv
    names = CHANNEL_NAMES[:c]
    return Recording(x, fs, names), EventList(tuple(events))


def _block_var(x: np.ndarray, block: int) -> float:
    """Mean variance over consecutive blocks, i.e. the power a short window sees."""
    k = max(1, x.size // block)
    return float(x[:k * block].reshape(k, -1).var(axis=1).mean())


def _span(e: Event, fs: float) -> tuple[int, int]:
    a = int(round(e.onset_ms * fs / 1000.0))
    return a, a + int(round(e.duration_ms * fs / 1000.0))


def _fmt_number(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def save_session(path, rec: Recording, events: EventList) -> None:
    """Write manifest, float32 channel-major samples and events CSV."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        samples_file, events_file = "samples.f32", "events.csv"
        rec.samples.astype("<f4").tofile(path / samples_file)
        with open(path / events_file, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["onset_ms", "duration_ms", "label", "word_id"])
            for e in events:
                w.writerow([_fmt_number(e.onset_ms), _fmt_number(e.duration_ms), e.label,
                            "" if e.word_id is None else str(e.word_id)])
        manifest = {
            "format_version": FORMAT_VERSION,
            "sampling_rate_hz": rec.sampling_rate_hz,
            "n_channels": rec.n_channels,
            "n_samples": rec.n_samples,
            "channel_names": list(rec.channel_names),
            "dtype": "f32le",
            "samples_file": samples_file,
            "events_file": events_file,
        }
        tmp = path / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2) + "\n")
        os.replace(tmp, path / "manifest.json")
    except OSError as exc:
        raise OSError(f"failed writing session to {path}: {exc}") from exc


def _require(manifest: dict, key: str, kind):
    if key not in manifest:
        raise ValidationError(f"manifest is missing {key!r}", key)
    val = manifest[key]
    if not isinstance(val, kind) or isinstance(val, bool):
        raise ValidationError(f"manifest field {key!r} has wrong type", key)
    return val


def read_events(path) -> EventList:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"events file not found: {path}", "events_file")
    events = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["onset_ms", "duration_ms", "label", "word_id"]:
            raise ValidationError(f"{path}: bad events header {header}", "events_header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValidationError(f"{path}:{lineno}: expected 4 fields, got {len(row)}", "events_row")
            try:
                onset, dur = float(row[0]), float(row[1])
                word = int(row[3]) if row[3] else None
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed number ({exc})", "events_row") from exc
            events.append(Event(onset, dur, row[2], word))
    return EventList(tuple(events))


def load_session(path) -> tuple[Recording, EventList]:
    """Inverse of :func:`save_session` with field-level validation."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ValidationError(f"manifest not found: {mpath}", "manifest")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{mpath}: invalid JSON ({exc})", "manifest") from exc
    version = _require(manifest, "format_version", int)
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {version}", "format_version")
    fs = _require(manifest, "sampling_rate_hz", (int, float))
    n_ch = _require(manifest, "n_channels", int)
    names = _require(manifest, "channel_names", list)
    if len(names) != n_ch:
        raise ValidationError(f"n_channels={n_ch} but {len(names)} channel names", "channel_names")
    if _require(manifest, "dtype", str) != "f32le":
        raise ValidationError(f"unsupported dtype {manifest['dtype']!r}", "dtype")
    spath = path / _require(manifest, "samples_file", str)
    epath = path / _require(manifest, "events_file", str)
    if not spath.exists():
        raise ValidationError(f"samples file not found: {spath}", "samples_file")
    raw = np.fromfile(spath, dtype="<f4")
    if n_ch == 0 or raw.size % n_ch:
        raise ValidationError(f"{spath}: {raw.size} values do not split into {n_ch} channels", "n_samples")
    n = raw.size // n_ch
    expected = manifest.get("n_samples")
    if expected is not None and expected != n:
        raise ValidationError(f"{spath}: holds {n} samples per channel, manifest says {expected}", "n_samples")
    rec = Recording(raw.reshape(n_ch, n).astype(np.float64), float(fs), tuple(names))
    events = read_events(epath)
    if events.events and max(e.end_ms for e in events) > rec.duration_ms + 1e-9:
        raise ValidationError("events extend past the end of the recording", "n_samples")
    return rec, events
