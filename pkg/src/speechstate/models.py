"""Trained models of every kind behind one interface, and their on-disk artifact.

An artifact is a directory holding ``manifest.json`` (kind, architecture,
preprocessing provenance, training history) and ``params.bin`` (named
tensors, 32-bit little-endian). Parameters are rounded to 32-bit at the end
of fitting, so a saved and reloaded model predicts bit-identically.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .csp import SpatialFilterBank, class_covariances, fit_csp, transform_logvar
from .deepnets import (
    ARCHITECTURES, ArchitectureSpec, Network, TrainHistory, build_architecture, features, logits,
    train_network,
)
from .errors import ConfigurationError, DimensionError, UnsupportedOperationError, ValidationError
from .linear import LdaModel, SvmModel, fit_lda, fit_svm, predict_linear
from .preprocess import WindowPipeline, WindowSet, class_weights, compute_stats

log = logging.getLogger(__name__)

LINEAR_KINDS = ("csp-lda", "csp-svm")
MODEL_KINDS = LINEAR_KINDS + ARCHITECTURES
ARTIFACT_VERSION = 1
PARAMS_MAGIC = b"SSPB"


@dataclass
class TrainedModel:
    """Tagged union over the five model kinds plus the preprocessing that feeds them."""

    kind: str
    pipeline: WindowPipeline
    network: Network | None = None
    bank: SpatialFilterBank | None = None
    linear: LdaModel | SvmModel | None = None
    history: TrainHistory | None = None
    seed: int = 2024
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def is_deep(self) -> bool:
        return self.kind in ARCHITECTURES

    @property
    def n_channels(self) -> int:
        if self.is_deep:
            return self.network.spec.n_channels
        return self.bank.n_channels


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype("<f4").astype(np.float64)


def _round_network(net: Network) -> None:
    for _, t in net.named_parameters():
        t.assign(_f32(t.data))
    for _, st in net.batchnorm_states():
        st.running_mean = _f32(st.running_mean)
        st.running_var = _f32(st.running_var)


def fit_model(kind: str, train: WindowSet, val: WindowSet | None = None, *,
              pipeline: WindowPipeline | None = None, weighted: bool = True, seed: int = 2024,
              epochs: int = 50, batch_size: int = 64, lr: float = 1e-3, m_pairs: int = 3,
              shrinkage: float = 0.1, svm_lambda: float = 1e-3, svm_epochs: int = 50,
              progress=None, config_hash: str = "") -> TrainedModel:
    """Fit one model on filtered training windows.

    Standardization statistics come from ``train`` and are stored in the
    model's pipeline, so later inputs may be raw, filtered or finished.
    """
    if kind not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    pipeline = WindowPipeline() if pipeline is None else WindowPipeline.from_dict(pipeline.to_dict())
    if train.provenance.get("standardized"):
        raise ConfigurationError("training windows must not be standardized yet")
    if not train.provenance.get("filtered"):
        train = _filter_set(train, pipeline)
    if val is not None and not val.provenance.get("filtered"):
        val = _filter_set(val, pipeline)
    pipeline.stats = compute_stats(train.x)
    x_tr = pipeline.finish(train.x)
    cw = class_weights(train.y).as_tuple() if weighted else (1.0, 1.0)
    model = TrainedModel(kind, pipeline, seed=seed, config_hash=config_hash,
                         meta={"class_weights": list(cw), "n_train": len(train)})
    if kind in ARCHITECTURES:
        spec = ArchitectureSpec(kind, train.n_channels, train.n_times, pipeline.output_rate_hz)
        net = build_architecture(spec, seed)
        x_val = pipeline.finish(val.x) if val is not None else None
        y_val = val.y if val is not None else None
        model.history = train_network(net, x_tr, train.y, x_val, y_val, cw, epochs=epochs,
                                      batch_size=batch_size, seed=seed, lr=lr, progress=progress)
        _round_network(net)
        model.network = net
        return model
    c1, c0 = class_covariances(WindowSet(x_tr, train.y))
    bank = fit_csp(c1, c0, m_pairs)
    bank = SpatialFilterBank(_f32(bank.W), _f32(bank.eigenvalues), bank.m_pairs)
    feats = transform_logvar(bank, x_tr)
    if kind == "csp-lda":
        lin = fit_lda(feats, train.y, shrinkage)
    else:
        lin = fit_svm(feats, train.y, svm_lambda, svm_epochs, cw, seed)
    lin.w = _f32(lin.w)
    lin.b = float(_f32(lin.b))
    model.bank, model.linear = bank, lin
    return model


def _filter_set(ws: WindowSet, pipeline: WindowPipeline) -> WindowSet:
    if abs(ws.sampling_rate_hz - pipeline.input_rate_hz) > 1e-9:
        raise ConfigurationError(
            f"raw windows are at {ws.sampling_rate_hz} Hz, pipeline expects {pipeline.input_rate_hz} Hz")
    return WindowSet(pipeline.filter(ws.x), ws.y, ws.window_ms, ws.shift_ms, pipeline.output_rate_hz,
                     ws.groups, ws.onsets_ms, {**ws.provenance, "filtered": True})


def model_input(model: TrainedModel, ws: WindowSet | np.ndarray) -> np.ndarray:
    """Model-ready windows; a bare array is taken to be raw windows."""
    if isinstance(ws, WindowSet):
        x = model.pipeline.prepare(ws)
    else:
        x = model.pipeline.apply(np.asarray(ws, dtype=np.float64))
    if x.shape[1] != model.n_channels:
        raise DimensionError(f"model expects {model.n_channels} channels, got {x.shape[1]}")
    return x


def decision_scores(model: TrainedModel, ws) -> np.ndarray:
    """Signed score per window; positive means speech."""
    x = model_input(model, ws)
    if model.is_deep:
        z = logits(model.network, x)
        return z[:, 1] - z[:, 0]
    return predict_linear(model.linear, transform_logvar(model.bank, x))[1]


def predict(model: TrainedModel, ws) -> tuple[np.ndarray, np.ndarray]:
    """Labels (1 iff score > 0) and scores."""
    s = decision_scores(model, ws)
    return (s > 0).astype(np.int64), s


def predict_proba(model: TrainedModel, ws) -> np.ndarray:
    """Class probabilities [n, 2], columns ordered (idle, speech)."""
    x = model_input(model, ws)
    if model.is_deep:
        z = logits(model.network, x)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    s = predict_linear(model.linear, transform_logvar(model.bank, x))[1]
    p1 = 0.5 * (1.0 + np.tanh(0.5 * s))
    return np.column_stack([1.0 - p1, p1])


def penultimate_features(model: TrainedModel, ws) -> np.ndarray:
    """Input of the final dense layer, one row per window."""
    if not model.is_deep:
        raise UnsupportedOperationError(f"{model.kind} has no penultimate layer")
    return features(model.network, model_input(model, ws))


# --- artifact ---------------------------------------------------------------------

def _tensors(model: TrainedModel) -> list[tuple[str, np.ndarray]]:
    if model.is_deep:
        out = [(name, t.data) for name, t in model.network.named_parameters()]
        for name, st in model.network.batchnorm_states():
            out += [(f"{name}.running_mean", st.running_mean), (f"{name}.running_var", st.running_var)]
        return out
    return [("csp.W", model.bank.W), ("csp.eigenvalues", model.bank.eigenvalues),
            ("linear.w", model.linear.w), ("linear.b", np.array([model.linear.b]))]


def write_params(path, tensors) -> None:
    """Blob layout: magic, u32 version, u32 count, then per tensor
    u16 name length, name (utf-8), u8 ndim, u32 dims, f32le values."""
    parts = [PARAMS_MAGIC, struct.pack("<II", ARTIFACT_VERSION, len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_params(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != PARAMS_MAGIC:
        raise ValidationError(f"{path} is not a parameter blob", "params.bin")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != ARTIFACT_VERSION:
        raise ValidationError(f"unsupported parameter blob version {version}", "params.bin")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            dims = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise ValidationError(f"tensor {name} runs past the end of the blob", "params.bin")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).astype(np.float64).reshape(dims)
            pos += 4 * size
    except struct.error as exc:
        raise ValidationError(f"truncated parameter blob: {exc}", "params.bin") from exc
    return out


def model_manifest(model: TrainedModel) -> dict:
    m = {"format_version": ARTIFACT_VERSION, "kind": model.kind, "seed": model.seed,
         "config_hash": model.config_hash, "pipeline": model.pipeline.to_dict(), "meta": model.meta}
    if model.is_deep:
        m["architecture"] = model.network.spec.to_dict()
        m["batchnorm"] = {name: {"momentum": st.momentum, "epsilon": st.epsilon}
                          for name, st in model.network.batchnorm_states()}
    else:
        m["m_pairs"] = model.bank.m_pairs
        lin = model.linear
        if isinstance(lin, LdaModel):
            m["linear"] = {"shrinkage": lin.shrinkage}
        else:
            m["linear"] = {"lam": lin.lam, "epochs": lin.epochs, "class_weights": list(lin.class_weights),
                           "objective_history": lin.objective_history}
    if model.history is not None:
        m["history"] = model.history.to_dict()
    return m


def save_model(path, model: TrainedModel) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_params(path / "params.bin", _tensors(model))
    (path / "manifest.json").write_text(json.dumps(model_manifest(model), indent=2) + "\n")


def load_model(path) -> TrainedModel:
    path = Path(path)
    try:
        m = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"no model manifest in {path}", "manifest.json") from exc
    if m.get("format_version") != ARTIFACT_VERSION:
        raise ValidationError(f"unsupported model format {m.get('format_version')!r}", "format_version")
    kind = m.get("kind")
    if kind not in MODEL_KINDS:
        raise ValidationError(f"unknown model kind {kind!r}", "kind")
    params = read_params(path / "params.bin")
    model = TrainedModel(kind, WindowPipeline.from_dict(m["pipeline"]), seed=int(m["seed"]),
                         config_hash=m.get("config_hash", ""), meta=m.get("meta", {}))
    if "history" in m:
        model.history = TrainHistory.from_dict(m["history"])
    try:
        if kind in ARCHITECTURES:
            net = build_architecture(ArchitectureSpec.from_dict(m["architecture"]), model.seed)
            for name, t in net.named_parameters():
                t.assign(params[name])
            for name, st in net.batchnorm_states():
                st.running_mean = params[f"{name}.running_mean"]
                st.running_var = params[f"{name}.running_var"]
                st.momentum = m["batchnorm"][name]["momentum"]
                st.epsilon = m["batchnorm"][name]["epsilon"]
            model.network = net
        else:
            model.bank = SpatialFilterBank(params["csp.W"], params["csp.eigenvalues"], int(m["m_pairs"]))
            w, b = params["linear.w"], float(params["linear.b"][0])
            lin = m["linear"]
            if kind == "csp-lda":
                model.linear = LdaModel(w, b, float(lin["shrinkage"]))
            else:
                model.linear = SvmModel(w, b, float(lin["lam"]), int(lin["epochs"]),
                                        tuple(lin["class_weights"]), list(lin["objective_history"]))
    except KeyError as exc:
        raise ValidationError(f"artifact is missing {exc.args[0]}", str(exc.args[0])) from exc
    return model
