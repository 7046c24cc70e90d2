"""Differentiable layer operations used by the convolutional networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DimensionError, EmptyInputError, LabelError
from ..rng import SplitMix64
from .core import Tensor, make_output

SAFELOG_FLOOR = 1e-6
ELU_ALPHA = 1.0
# long single-input temporal kernels go through one banded matrix product
TOEPLITZ_MIN_WIDTH = 32


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, groups: int = 1,
           padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Grouped 2-D cross-correlation (no kernel flip), stride 1.

    ``x`` is [N, Cin, H, W]; ``kernel`` is [Cout, Cin/groups, kh, kw].
    Depthwise convolution is ``groups == Cin``.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D [N,C,H,W], got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-D, got shape {kernel.shape}")
    n, cin, h, w = x.shape
    cout, cig, kh, kw = kernel.shape
    groups = int(groups)
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigurationError(f"groups={groups} must divide input channels {cin} and output channels {cout}")
    if cig != cin // groups:
        raise DimensionError(f"kernel axis 1 is {cig}, expected Cin/groups = {cin // groups}")
    ph, pw = (int(p) for p in padding)
    if kh > h + 2 * ph:
        raise DimensionError(f"kernel height {kh} exceeds padded input height {h + 2 * ph}")
    if kw > w + 2 * pw:
        raise DimensionError(f"kernel width {kw} exceeds padded input width {w + 2 * pw}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match Cout={cout}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if cin == 1 and kh == 1 and kw >= TOEPLITZ_MIN_WIDTH:
        return _conv_temporal_toeplitz(x, kernel, bias, xp, (ph, pw), wo)
    cog = cout // groups
    # [N, Cin, ho, wo, kh, kw]
    patches = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    k = kernel.data.reshape(groups, cog, cig, kh, kw)
    out = np.empty((n, cout, ho, wo))
    for g in range(groups):
        pg = patches[:, g * cig:(g + 1) * cig]
        # -> [N, ho, wo, cog]
        r = np.tensordot(pg, k[g], axes=([1, 4, 5], [1, 2, 3]))
        out[:, g * cog:(g + 1) * cog] = r.transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def _backward(grad):
        gx = None
        gk = np.empty_like(k)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        for g in range(groups):
            gg = grad[:, g * cog:(g + 1) * cog]
            pg = patches[:, g * cig:(g + 1) * cig]
            # [cig, kh, kw, cog]
            gk[g] = np.tensordot(pg, gg, axes=([0, 2, 3], [0, 2, 3])).transpose(3, 0, 1, 2)
            if x.requires_grad:
                # [N, ho, wo, cig, kh, kw]
                dp = np.tensordot(gg, k[g], axes=([1], [0]))
                dst = gxp[:, g * cig:(g + 1) * cig]
                for a in range(kh):
                    for b in range(kw):
                        dst[:, :, a:a + ho, b:b + wo] += dp[:, :, :, :, a, b].transpose(0, 3, 1, 2)
        if x.requires_grad:
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        gb = grad.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gk.reshape(kernel.shape), gb) if bias is not None else (gx, gk.reshape(kernel.shape))

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_output("conv2d", out, inputs, _backward, groups=groups, padding=(ph, pw))


def _conv_temporal_toeplitz(x, kernel, bias, xp, padding, wo):
    """[N,1,H,W] * [Cout,1,1,K] as ``rows @ T`` with T[t + k, t, o] = kernel[o, 0, 0, k]."""
    n, _, h, w = x.shape
    cout, _, _, k = kernel.shape
    ph, pw = padding
    wp = xp.shape[3]
    tt = np.arange(wo)[:, None]
    kk = np.arange(k)[None, :]
    band = np.zeros((wp, wo, cout))
    band[tt + kk, tt, :] = kernel.data[:, 0, 0, :].T[None, :, :]
    rows = xp.reshape(n * h, wp)
    out = (rows @ band.reshape(wp, wo * cout)).reshape(n, h, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _backward(grad):
        g2 = grad.transpose(0, 2, 3, 1).reshape(n * h, wo * cout)
        dband = (rows.T @ g2).reshape(wp, wo, cout)
        gk = dband[tt + kk, tt, :].sum(axis=0).T.reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gx = (g2 @ band.reshape(wp, wo * cout).T).reshape(n, 1, h, wp)[:, :, :, pw:pw + w]
        if bias is not None:
            return gx, gk, grad.sum(axis=(0, 2, 3))
        return gx, gk

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_output("conv2d", np.ascontiguousarray(out), inputs, _backward, groups=1, padding=padding)


@dataclass
class BatchNormState:
    """Running statistics for one batch-normalization layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5):
        return cls(np.zeros(channels), np.ones(channels), momentum, epsilon)


def _chan(v):
    return v[None, :, None, None]


def _chan_dot(a, b):
    """Per-channel sum of ``a * b`` over the N, H and W axes."""
    n, c = a.shape[:2]
    return np.einsum("ncl,ncl->nc", a.reshape(n, c, -1), b.reshape(n, c, -1)).sum(axis=0)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization over the N, H and W axes.

    In train mode the batch statistics are used and the running estimates in
    ``state`` are updated in place (unbiased variance, ``momentum`` weight on
    the new batch). Eval mode reads the running estimates only.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    m = n * h * w
    if m == 0:
        raise EmptyInputError("batchnorm received an empty batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    eps = state.epsilon
    if eps <= 0:
        raise ConfigurationError("batchnorm epsilon must be positive")
    x3 = x.data.reshape(n, c, -1)
    if mode == "train":
        mu = x3.sum(axis=2).sum(axis=0) / m
        xhat = x.data - _chan(mu)
        var = _chan_dot(xhat, xhat) / m
        invstd = 1.0 / np.sqrt(var + eps)
        xhat *= _chan(invstd)
        mom = state.momentum
        unbiased = var * m / (m - 1) if m > 1 else var
        state.running_mean = (1 - mom) * state.running_mean + mom * mu
        state.running_var = (1 - mom) * state.running_var + mom * unbiased

        def _backward(grad):
            gsum = grad.reshape(n, c, -1).sum(axis=2).sum(axis=0)
            gdot = _chan_dot(grad, xhat)
            gx = xhat * _chan(-gdot / m)
            gx += grad
            gx -= _chan(gsum / m)
            gx *= _chan(gamma.data * invstd)
            return gx, gdot, gsum
    elif mode == "eval":
        invstd = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - _chan(state.running_mean)) * _chan(invstd)

        def _backward(grad):
            gx = grad * _chan(gamma.data * invstd)
            return gx, _chan_dot(grad, xhat), grad.reshape(n, c, -1).sum(axis=2).sum(axis=0)
    else:
        raise ConfigurationError(f"unknown batchnorm mode {mode!r}")
    out = xhat * _chan(gamma.data)
    out += _chan(beta.data)
    return make_output("batchnorm", out, (x, gamma, beta), _backward, mode=mode)


def pool2d(x: Tensor, kind: str, kh: int, kw: int, sh: int | None = None, sw: int | None = None) -> Tensor:
    """Average or max pooling without padding; stride defaults to the kernel."""
    if x.data.ndim != 4:
        raise DimensionError(f"pool2d input must be 4-D, got shape {x.shape}")
    sh = kh if sh is None else sh
    sw = kw if sw is None else sw
    n, c, h, w = x.shape
    if kh > h:
        raise DimensionError(f"pool height {kh} exceeds input height {h}")
    if kw > w:
        raise DimensionError(f"pool width {kw} exceeds input width {w}")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]

    def _slot(a, b):
        return (slice(None), slice(None), slice(a, a + sh * (ho - 1) + 1, sh), slice(b, b + sw * (wo - 1) + 1, sw))

    if kind == "avg":
        out = win.mean(axis=(4, 5))

        def _backward(grad):
            gx = np.zeros(x.shape)
            share = grad / (kh * kw)
            for a in range(kh):
                for b in range(kw):
                    gx[_slot(a, b)] += share
            return (gx,)
    elif kind == "max":
        flat = win.reshape(n, c, ho, wo, kh * kw)
        arg = flat.argmax(axis=-1)  # first occurrence on ties
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def _backward(grad):
            gx = np.zeros(x.shape)
            for a in range(kh):
                for b in range(kw):
                    gx[_slot(a, b)] += grad * (arg == a * kw + b)
            return (gx,)
    else:
        raise ConfigurationError(f"unknown pooling kind {kind!r}")
    return make_output(f"{kind}pool2d", out, (x,), _backward)


def activate(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity; ``softmax`` normalizes over the last axis."""
    d = x.data
    if kind == "relu":
        out = np.maximum(d, 0.0)
        fn = lambda g: (g * (d > 0),)
    elif kind == "elu":
        neg_part = ELU_ALPHA * np.expm1(np.minimum(d, 0.0))
        out = np.where(d >= 0, d, neg_part)
        fn = lambda g: (g * np.where(d >= 0, 1.0, neg_part + ELU_ALPHA),)
    elif kind == "square":
        out = d * d
        fn = lambda g: (2.0 * g * d,)
    elif kind == "safelog":
        clipped = np.maximum(d, SAFELOG_FLOOR)
        out = np.log(clipped)
        fn = lambda g: (np.where(d > SAFELOG_FLOOR, g / clipped, 0.0),)
    elif kind == "sigmoid":
        out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
        fn = lambda g: (g * out * (1.0 - out),)
    elif kind == "softmax":
        z = d - d.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        fn = lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    else:
        raise ConfigurationError(f"unknown activation {kind!r}")
    return make_output(kind, out, (x,), fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x of shape [N, F]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"dense expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense inner dimensions disagree: input features {x.shape[1]} vs weight rows {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    # one contiguous reduction per (row, output): no BLAS, so a row's result
    # does not depend on how many rows share the call
    out = (x.data[:, None, :] * weight.data.T[None, :, :]).sum(axis=2) + bias.data

    def _backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return make_output("dense", out, (x, weight, bias), _backward)


def dropout(x: Tensor, p: float, mode: str, rng: SplitMix64 | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval is identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ConfigurationError(f"unknown dropout mode {mode!r}")
    if rng is None:
        raise ConfigurationError("train-mode dropout needs a seeded generator")
    scale = (rng.uniform(x.shape) >= p) / (1.0 - p)
    return make_output("dropout", x.data * scale, (x,), lambda g: (g * scale,))


def weighted_cross_entropy(logits: Tensor, labels, class_weights=(1.0, 1.0)) -> Tensor:
    """Mean over samples of ``w[y] * -log softmax(logits)[y]`` for two classes."""
    z = logits.data
    if z.ndim != 2 or z.shape[1] != 2:
        raise DimensionError(f"logits must be [N, 2], got {logits.shape}")
    y = np.asarray(labels)
    if y.shape != (z.shape[0],):
        raise DimensionError(f"labels length {y.shape} does not match batch size {z.shape[0]}")
    if not np.all((y == 0) | (y == 1)):
        raise LabelError("labels must be 0 or 1")
    y = y.astype(np.int64)
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (2,) or np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ConfigurationError(f"class weights must be two positive finite numbers, got {class_weights}")
    n = z.shape[0]
    if n == 0:
        raise EmptyInputError("cross-entropy of an empty batch")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    nll = lse - z[np.arange(n), y]
    wy = w[y]
    loss = np.mean(wy * nll)

    def _backward(g):
        soft = np.exp(z - lse[:, None])
        soft[np.arange(n), y] -= 1.0
        return (g * soft * (wy / n)[:, None],)

    return make_output("weighted_cross_entropy", np.array(loss), (logits,), _backward)
