"""EEGNet, ShallowConvNet and DeepConvNet on the autodiff core, plus training.

Kernel and pooling lengths are given at 250 Hz (the rate the original
architectures were tuned for) or 1000 Hz and rescaled to the actual input
rate with half-up rounding. Temporal "same" padding is ``(k - 1) // 2`` on
both sides, so even kernels shorten the sequence by one sample.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    BatchNormState, OptimizerState, Tape, Tensor, activate, adam_step, backward, batchnorm,
    conv2d, dense, dropout, flatten, pool2d, weighted_cross_entropy,
)
from .errors import ArchitectureError, ConfigurationError, DegenerateLabelError, TrainingError
from .rng import SplitMix64

log = logging.getLogger(__name__)

ARCHITECTURES = ("eegnet", "shallow", "deep")


def _half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def default_hyperparameters(name: str, fs: float) -> dict:
    if name == "eegnet":
        return {"F1": 8, "D": 2, "F2": 16, "kern1": _half_up(fs / 2), "kern2": _half_up(fs / 16),
                "pool1": 4, "pool2": 8, "dropout": 0.25}
    if name == "shallow":
        return {"n_filters": 40, "kern": max(13, _half_up(25 * fs / 250)),
                "pool": max(15, _half_up(75 * fs / 250)), "stride": max(3, _half_up(15 * fs / 250)),
                "dropout": 0.5}
    if name == "deep":
        return {"filters": [25, 50, 100, 200], "kern": max(5, _half_up(10 * fs / 1000)), "pool": 2,
                "dropout": 0.5}
    raise ConfigurationError(f"unknown architecture {name!r}; choose from {ARCHITECTURES}")


@dataclass
class ArchitectureSpec:
    name: str
    n_channels: int
    n_times: int
    fs: float
    hyper: dict = field(default_factory=dict)
    n_classes: int = 2

    def __post_init__(self):
        merged = default_hyperparameters(self.name, self.fs)
        merged.update(self.hyper)
        self.hyper = merged

    def to_dict(self) -> dict:
        return {"name": self.name, "n_channels": self.n_channels, "n_times": self.n_times,
                "fs": self.fs, "hyper": self.hyper, "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(d["name"], int(d["n_channels"]), int(d["n_times"]), float(d["fs"]),
                   dict(d.get("hyper", {})), int(d.get("n_classes", 2)))


# --- layers ----------------------------------------------------------------------

class Layer:
    params: dict[str, Tensor] = {}

    def out_shape(self, shape):
        return shape

    def forward(self, x, mode, rng):
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, cin, cout, kh, kw, groups=1, padding=(0, 0), bias=False):
        self.cin, self.cout, self.kh, self.kw = cin, cout, kh, kw
        self.groups, self.padding, self.has_bias = groups, padding, bias
        self.params = {"kernel": Tensor(np.zeros((cout, cin // groups, kh, kw)), requires_grad=True)}
        if bias:
            self.params["bias"] = Tensor(np.zeros(cout), requires_grad=True)

    @property
    def fan_in(self):
        return (self.cin // self.groups) * self.kh * self.kw

    def out_shape(self, shape):
        c, h, w = shape
        ph, pw = self.padding
        return (self.cout, h + 2 * ph - self.kh + 1, w + 2 * pw - self.kw + 1)

    def forward(self, x, mode, rng):
        return conv2d(x, self.params["kernel"], self.params.get("bias"), self.groups, self.padding)


class BatchNorm(Layer):
    def __init__(self, c):
        self.params = {"gamma": Tensor(np.ones(c), requires_grad=True),
                       "beta": Tensor(np.zeros(c), requires_grad=True)}
        self.state = BatchNormState.fresh(c)

    def forward(self, x, mode, rng):
        return batchnorm(x, self.params["gamma"], self.params["beta"], self.state, mode)


class Act(Layer):
    def __init__(self, kind):
        self.kind = kind
        self.params = {}

    def forward(self, x, mode, rng):
        return activate(x, self.kind)


class Pool(Layer):
    def __init__(self, kind, kh, kw, sh=None, sw=None):
        self.kind, self.kh, self.kw = kind, kh, kw
        self.sh, self.sw = sh or kh, sw or kw
        self.params = {}

    def out_shape(self, shape):
        c, h, w = shape
        if self.kh > h or self.kw > w:
            return (c, 0, 0)
        return (c, (h - self.kh) // self.sh + 1, (w - self.kw) // self.sw + 1)

    def forward(self, x, mode, rng):
        return pool2d(x, self.kind, self.kh, self.kw, self.sh, self.sw)


class Drop(Layer):
    def __init__(self, p):
        self.p = p
        self.params = {}

    def forward(self, x, mode, rng):
        return dropout(x, self.p, mode, rng)


class Flatten(Layer):
    params = {}

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, mode, rng):
        return flatten(x)


class Dense(Layer):
    def __init__(self, fin, fout):
        self.fin = fin
        self.params = {"weight": Tensor(np.zeros((fin, fout)), requires_grad=True),
                       "bias": Tensor(np.zeros(fout), requires_grad=True)}

    @property
    def fan_in(self):
        return self.fin

    def out_shape(self, shape):
        return (self.params["weight"].shape[1],)

    def forward(self, x, mode, rng):
        return dense(x, self.params["weight"], self.params["bias"])


# --- network ---------------------------------------------------------------------

class Network:
    """Sequential stack mapping [N, 1, C, T] to two-class logits.

    ``shapes`` holds the per-layer output shape (without batch axis) derived
    at build time. The input of the final dense layer is the penultimate
    feature vector.
    """

    def __init__(self, spec: ArchitectureSpec, layers: list[tuple[str, Layer]]):
        self.spec = spec
        self.layers = layers
        self.shapes = self._validate()

    def _validate(self):
        shape = (1, self.spec.n_channels, self.spec.n_times)
        shapes = []
        for name, layer in self.layers:
            if isinstance(layer, (Conv, Pool)):
                c, h, w = shape
                kh, kw = layer.kh, layer.kw
                pad = layer.padding if isinstance(layer, Conv) else (0, 0)
                if kh > h + 2 * pad[0] or kw > w + 2 * pad[1]:
                    raise ArchitectureError(
                        f"{self.spec.name}: layer {name} kernel ({kh},{kw}) does not fit input {shape[1:]}", name)
            if isinstance(layer, Dense):
                if shape != (layer.fin,):
                    raise ArchitectureError(f"{self.spec.name}: layer {name} expects {layer.fin} features, gets {shape}", name)
            shape = layer.out_shape(shape)
            if min(shape) < 1:
                raise ArchitectureError(f"{self.spec.name}: layer {name} output shape {shape} is empty", name)
            shapes.append(shape)
        return shapes

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{lname}.{pname}", t) for lname, layer in self.layers for pname, t in layer.params.items()]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def batchnorm_states(self) -> list[tuple[str, BatchNormState]]:
        return [(name, layer.state) for name, layer in self.layers if isinstance(layer, BatchNorm)]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    @property
    def penultimate_size(self) -> int:
        return self.shapes[-2][0]

    def init_weights(self, seed: int) -> None:
        """Uniform in ``±1/sqrt(fan_in)`` for kernels and dense weights; zero biases."""
        rng = SplitMix64(seed)
        for _, layer in self.layers:
            if isinstance(layer, (Conv, Dense)):
                key = "kernel" if isinstance(layer, Conv) else "weight"
                t = layer.params[key]
                bound = 1.0 / math.sqrt(layer.fan_in)
                t.assign((2.0 * rng.uniform(t.shape) - 1.0) * bound)

    def forward(self, x, mode: str = "eval", rng: SplitMix64 | None = None, features: bool = False):
        h = x if isinstance(x, Tensor) else Tensor(x)
        last = len(self.layers) - 1
        for i, (_, layer) in enumerate(self.layers):
            if features and i == last:
                return h
            h = layer.forward(h, mode, rng)
        return h


def build_architecture(spec: ArchitectureSpec, seed: int = 2024) -> Network:
    """Construct and initialize one of the three networks for input [N, 1, C, T]."""
    hp = spec.hyper
    c, t = spec.n_channels, spec.n_times
    layers: list[tuple[str, Layer]] = []
    if spec.name == "eegnet":
        f1, d, f2 = hp["F1"], hp["D"], hp["F2"]
        k1, k2 = hp["kern1"], hp["kern2"]
        layers += [
            ("temporal", Conv(1, f1, 1, k1, padding=(0, (k1 - 1) // 2))),
            ("bn1", BatchNorm(f1)),
            ("depthwise", Conv(f1, f1 * d, c, 1, groups=f1)),
            ("bn2", BatchNorm(f1 * d)),
            ("elu1", Act("elu")),
            ("pool1", Pool("avg", 1, hp["pool1"])),
            ("drop1", Drop(hp["dropout"])),
            ("separable_depth", Conv(f1 * d, f1 * d, 1, k2, groups=f1 * d, padding=(0, (k2 - 1) // 2))),
            ("separable_point", Conv(f1 * d, f2, 1, 1)),
            ("bn3", BatchNorm(f2)),
            ("elu2", Act("elu")),
            ("pool2", Pool("avg", 1, hp["pool2"])),
            ("drop2", Drop(hp["dropout"])),
        ]
    elif spec.name == "shallow":
        nf = hp["n_filters"]
        layers += [
            ("temporal", Conv(1, nf, 1, hp["kern"], bias=True)),
            ("spatial", Conv(nf, nf, c, 1)),
            ("bn", BatchNorm(nf)),
            ("square", Act("square")),
            ("pool", Pool("avg", 1, hp["pool"], 1, hp["stride"])),
            ("log", Act("safelog")),
            ("drop", Drop(hp["dropout"])),
        ]
    elif spec.name == "deep":
        k = hp["kern"]
        filters = hp["filters"]
        layers += [
            ("temporal", Conv(1, filters[0], 1, k, bias=True)),
            ("spatial", Conv(filters[0], filters[0], c, 1)),
        ]
        cin = filters[0]
        for b, nf in enumerate(filters, start=1):
            if b > 1:
                layers.append((f"conv{b}", Conv(cin, nf, 1, k)))
            layers += [
                (f"bn{b}", BatchNorm(nf)),
                (f"elu{b}", Act("elu")),
                (f"pool{b}", Pool("max", 1, hp["pool"])),
                (f"drop{b}", Drop(hp["dropout"])),
            ]
            cin = nf
    else:
        raise ConfigurationError(f"unknown architecture {spec.name!r}")
    layers.append(("flatten", Flatten()))
    # the dense layer size depends on the validated shapes, so build in two passes
    probe = Network.__new__(Network)
    probe.spec, probe.layers = spec, layers
    feat = probe._validate()[-1][0]
    layers.append(("classifier", Dense(feat, spec.n_classes)))
    net = Network(spec, layers)
    net.init_weights(seed)
    return net


# --- training --------------------------------------------------------------------

@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    seconds: float = 0.0
    seed: int = 2024

    def to_dict(self):
        return {"train_loss": self.train_loss, "train_acc": self.train_acc, "val_acc": self.val_acc,
                "seconds": self.seconds, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["train_loss"]), list(d["train_acc"]), list(d["val_acc"]),
                   float(d["seconds"]), int(d["seed"]))


def _as_input(x: np.ndarray) -> np.ndarray:
    return x[:, None, :, :] if x.ndim == 3 else x


def logits(net: Network, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for model-ready windows [n, C, T]."""
    x = _as_input(np.asarray(x, dtype=np.float64))
    out = [net.forward(x[a:a + batch_size], "eval").data for a in range(0, x.shape[0], batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.spec.n_classes))


def features(net: Network, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    x = _as_input(np.asarray(x, dtype=np.float64))
    out = [net.forward(x[a:a + batch_size], "eval", features=True).data for a in range(0, x.shape[0], batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.penultimate_size))


def train_network(net: Network, x_train: np.ndarray, y_train, x_val=None, y_val=None,
                  class_weights=(1.0, 1.0), epochs: int = 50, batch_size: int = 64, seed: int = 2024,
                  lr: float = 1e-3, progress=None) -> TrainHistory:
    """Minimize class-weighted cross-entropy with Adam; deterministic per seed.

    Batches come from a fresh SplitMix64 permutation every epoch and dropout
    masks from a second stream derived from the same seed.
    """
    y_train = np.asarray(y_train, dtype=np.int64)
    if not (np.any(y_train == 1) and np.any(y_train == 0)):
        raise DegenerateLabelError("training set needs both classes")
    x_train = _as_input(np.asarray(x_train, dtype=np.float64))
    rng = SplitMix64(seed)
    shuffle_rng, drop_rng = rng.spawn(), rng.spawn()
    params = net.parameters()
    opt = OptimizerState(lr=lr)
    hist = TrainHistory(seed=seed)
    n = x_train.shape[0]
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        total, correct = 0.0, 0
        for a in range(0, n, batch_size):
            idx = order[a:a + batch_size]
            with Tape() as tape:
                out = net.forward(x_train[idx], "train", drop_rng)
                loss = weighted_cross_entropy(out, y_train[idx], class_weights)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingError(f"loss became {lv} in epoch {epoch}", epoch)
            grads = backward(loss, tape, params)
            adam_step(params, grads, opt)
            total += lv * idx.size
            correct += int(np.count_nonzero((out.data[:, 1] > out.data[:, 0]) == y_train[idx]))
        hist.train_loss.append(total / n)
        hist.train_acc.append(correct / n)
        if x_val is not None and len(x_val):
            z = logits(net, x_val)
            hist.val_acc.append(float(np.mean((z[:, 1] > z[:, 0]) == np.asarray(y_val))))
        else:
            hist.val_acc.append(float("nan"))
        if progress is not None:
            progress(epoch, hist)
        log.info("%s epoch %d loss %.4f train_acc %.3f val_acc %.3f", net.spec.name, epoch,
                 hist.train_loss[-1], hist.train_acc[-1], hist.val_acc[-1])
    hist.seconds = time.perf_counter() - t0
    return hist
