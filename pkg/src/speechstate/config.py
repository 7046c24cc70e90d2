"""Flat ``section.key=value`` pipeline configuration.

One setting per line, ``#`` starts a comment, keys are sorted on output so
parse -> serialize is idempotent. The config hash covers every key except
the ``paths.*`` section, so moving output directories does not change it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ValidationError

MODEL_CHOICES = ("csp-svm", "csp-lda", "eegnet", "shallow", "deep")


@dataclass
class PipelineConfig:
    seed: int = 2024
    models: tuple[str, ...] = MODEL_CHOICES
    # paths
    sessions: tuple[str, ...] = ()
    out: str = "out"
    # synthetic data
    synth_mode: str = "bandpower"
    synth_trials: int = 50
    synth_subjects: int = 1
    synth_channels: int = 16
    synth_snr_db: float = 6.0
    synth_sampling_rate_hz: float = 1000.0
    # preprocessing
    band_low_hz: float = 0.5
    band_high_hz: float = 45.0
    filter_order: int = 4
    decimation: int = 4
    window_ms: float = 500.0
    shift_ms: float = 50.0
    # split
    split_fraction: float = 0.2
    split_seed: int = 2024
    split_level: str = "window"
    scope: str = "pooled"
    # training
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    class_weighting: bool = True
    m_pairs: int = 3
    lda_shrinkage: float = 0.1
    svm_lambda: float = 1e-3
    svm_epochs: int = 50
    # embedding
    tsne_model: str = "eegnet"
    tsne_perplexity: float = 30.0
    tsne_iters: int = 1000
    tsne_max_points: int = 500

    def validate(self) -> "PipelineConfig":
        if not self.models:
            raise ValidationError("model list is empty", "models")
        bad = [m for m in self.models if m not in MODEL_CHOICES]
        if bad:
            raise ValidationError(f"unknown models {bad}; choose from {MODEL_CHOICES}", "models")
        if self.synth_mode not in ("bandpower", "waveshape"):
            raise ValidationError(f"unknown synth mode {self.synth_mode!r}", "synth.mode")
        if self.split_level not in ("window", "trial"):
            raise ValidationError(f"split level must be window or trial, got {self.split_level!r}", "split.level")
        if self.scope not in ("pooled", "per-subject"):
            raise ValidationError(f"scope must be pooled or per-subject, got {self.scope!r}", "eval.scope")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValidationError("split fraction must lie in (0, 1)", "split.fraction")
        if self.tsne_model not in MODEL_CHOICES[2:]:
            raise ValidationError("t-SNE features need a deep model", "tsne.model")
        for name in ("epochs", "svm_epochs", "tsne_iters"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative", name)
        for name in ("batch_size", "decimation", "synth_trials", "synth_subjects", "synth_channels",
                     "tsne_max_points"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive", name)
        return self


# attribute <-> dotted key
KEYS = {
    "seed": "seed",
    "models": "models",
    "sessions": "paths.sessions",
    "out": "paths.out",
    "synth_mode": "synth.mode",
    "synth_trials": "synth.trials",
    "synth_subjects": "synth.subjects",
    "synth_channels": "synth.channels",
    "synth_snr_db": "synth.snr_db",
    "synth_sampling_rate_hz": "synth.sampling_rate_hz",
    "band_low_hz": "preprocess.band_low_hz",
    "band_high_hz": "preprocess.band_high_hz",
    "filter_order": "preprocess.order",
    "decimation": "preprocess.decimation",
    "window_ms": "preprocess.window_ms",
    "shift_ms": "preprocess.shift_ms",
    "split_fraction": "split.fraction",
    "split_seed": "split.seed",
    "split_level": "split.level",
    "scope": "eval.scope",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "class_weighting": "train.class_weighting",
    "m_pairs": "csp.m_pairs",
    "lda_shrinkage": "lda.shrinkage",
    "svm_lambda": "svm.lambda",
    "svm_epochs": "svm.epochs",
    "tsne_model": "tsne.model",
    "tsne_perplexity": "tsne.perplexity",
    "tsne_iters": "tsne.iters",
    "tsne_max_points": "tsne.max_points",
}
ATTRS = {v: k for k, v in KEYS.items()}
_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(attr: str, text: str):
    kind = _TYPES[attr]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind.startswith("tuple"):
            return tuple(p.strip() for p in text.split(",") if p.strip())
        return text
    except ValueError as exc:
        raise ValidationError(f"{KEYS[attr]}: cannot read {text!r} as {kind}", KEYS[attr]) from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_value(cfg: PipelineConfig, key: str, text: str) -> None:
    if key not in ATTRS:
        raise ValidationError(f"unknown config key {key!r}", key)
    attr = ATTRS[key]
    setattr(cfg, attr, _parse_value(attr, text))


def parse_config(text: str) -> PipelineConfig:
    cfg = PipelineConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key=value, got {raw!r}", f"line {lineno}")
        key, _, value = line.partition("=")
        set_value(cfg, key.strip(), value)
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise ValidationError(f"config file {path} not found", "config") from exc
    return parse_config(text)


def serialize_config(cfg: PipelineConfig, include_paths: bool = True) -> str:
    items = sorted((KEYS[a], _format_value(getattr(cfg, a))) for a in KEYS)
    return "".join(f"{k}={v}\n" for k, v in items if include_paths or not k.startswith("paths."))


def config_hash(cfg: PipelineConfig) -> str:
    """First 16 hex digits of SHA-256 over the canonical text, ``paths.*`` excluded."""
    return hashlib.sha256(serialize_config(cfg, include_paths=False).encode()).hexdigest()[:16]
