"""Exact t-SNE with CSV and SVG output.

Affinities use a per-point Gaussian whose precision is bisected (in log
space, all rows at once) until the conditional distribution has the
requested perplexity. The embedding is plain gradient descent on
KL(P || Q) with a Student-t kernel, momentum, per-coordinate gains and
early exaggeration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from html import escape

import numpy as np

from .errors import ConfigurationError, DimensionError, OptimizationError
from .rng import SplitMix64

log = logging.getLogger(__name__)

MAX_POINTS = 2000
JITTER = 1e-10


@dataclass(frozen=True)
class AffinityMatrix:
    P: np.ndarray
    perplexity: float
    sigmas: np.ndarray
    conditional: np.ndarray

    @property
    def n(self) -> int:
        return self.P.shape[0]


@dataclass
class EmbeddingResult:
    Y: np.ndarray
    kl: float
    iterations: int
    seed: int
    kl_history: list[float] = field(default_factory=list)


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _row_entropy_bits(d: np.ndarray, beta: np.ndarray):
    """Conditional rows for the given precisions; ``d`` has +inf on the diagonal."""
    shifted = d - d.min(axis=1, keepdims=True)
    p = np.exp(-shifted * beta[:, None])
    s = p.sum(axis=1, keepdims=True)
    p /= s
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p > 0, np.log2(p), 0.0)
    return p, -(p * logs).sum(axis=1)


def perplexity_affinities(x, perplexity: float = 30.0, tol: float = 1e-5, max_iter: int = 200,
                          seed: int = 2024) -> AffinityMatrix:
    """Symmetric joint affinities ``(P_j|i + P_i|j) / 2n``.

    Exact duplicate points get a 1e-10 jitter first (seeded), since a row
    whose neighbours sit at one distance cannot reach every perplexity.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected an n x F matrix, got shape {x.shape}")
    n = x.shape[0]
    if not 1.0 < perplexity < n:
        raise ConfigurationError(f"perplexity must lie in (1, {n}), got {perplexity}")
    if np.unique(x, axis=0).shape[0] < n:
        log.warning("duplicate points found; adding %g jitter", JITTER)
        x = x + JITTER * SplitMix64(seed).normal(x.shape)
    d = squared_distances(x)
    np.fill_diagonal(d, np.inf)
    target = np.log2(perplexity)
    lo = np.full(n, -60.0)  # bounds on log(beta)
    hi = np.full(n, 60.0)
    # start from a scale that puts typical neighbours at distance ~1
    med = np.nanmedian(np.where(np.isfinite(d), d, np.nan), axis=1)
    logb = -np.log(np.maximum(med, 1e-300))
    p, h = _row_entropy_bits(d, np.exp(logb))
    for _ in range(max_iter):
        err = h - target
        todo = np.abs(err) >= tol / 10
        if not todo.any():
            break
        # entropy falls as beta grows
        lo = np.where(todo & (err > 0), logb, lo)
        hi = np.where(todo & (err < 0), logb, hi)
        logb = np.where(todo, 0.5 * (lo + hi), logb)
        idx = np.flatnonzero(todo)
        p[idx], h[idx] = _row_entropy_bits(d[idx], np.exp(logb[idx]))
    worst = float(np.max(np.abs(h - target)))
    if worst >= tol:
        log.warning("perplexity search stopped %.2g bits from the target", worst)
    joint = (p + p.T) / (2.0 * n)
    joint = (joint + joint.T) / 2
    sigmas = np.sqrt(1.0 / (2.0 * np.exp(logb)))
    return AffinityMatrix(joint, float(perplexity), sigmas, p)


def _student_q(y):
    num = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def kl_divergence(P: np.ndarray, y: np.ndarray) -> float:
    _, q = _student_q(y)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(q[mask], 1e-300))))


def kl_gradient(P: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``dKL/dy_i = 4 sum_j (p_ij - q_ij)(y_i - y_j) / (1 + |y_i - y_j|^2)``."""
    num, q = _student_q(y)
    w = (P - q) * num
    return 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)


def tsne_optimize(aff, iters: int = 1000, seed: int = 2024, learning_rate: float | None = None,
                  momentum: float = 0.5, final_momentum: float = 0.8, momentum_switch: int = 250,
                  exaggeration: float = 12.0, exaggeration_iters: int = 250, init=None,
                  min_gain: float = 0.01) -> EmbeddingResult:
    """Gradient descent on KL(P || Q) in two dimensions.

    The start is N(0, 1e-4 I) from SplitMix64(seed) unless ``init`` is given.
    With ``learning_rate=None`` the step is ``n / (4 a)`` for current
    exaggeration ``a``: P rows sum to about 1/n, so this keeps the attractive
    update from overshooting, which a fixed rate of 200 does for small n.
    The embedding is re-centred after every step. ``kl_history`` holds the
    divergence against the true (unexaggerated) P after each iteration.
    """
    P = aff.P if isinstance(aff, AffinityMatrix) else np.asarray(aff, dtype=np.float64)
    n = P.shape[0]
    if P.shape != (n, n):
        raise DimensionError(f"affinity matrix must be square, got {P.shape}")
    if np.any(P < 0) or not np.allclose(P, P.T, atol=1e-12):
        raise ConfigurationError("affinities must be non-negative and symmetric")
    if init is None:
        y = 1e-2 * SplitMix64(seed).normal((n, 2))
    else:
        y = np.array(init, dtype=np.float64)
        if y.shape != (n, 2):
            raise DimensionError(f"init must be {n} x 2, got {y.shape}")
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    history = []
    for it in range(iters):
        ex = exaggeration if it < exaggeration_iters else 1.0
        mom = momentum if it < momentum_switch else final_momentum
        eta = n / (4.0 * ex) if learning_rate is None else learning_rate
        grad = kl_gradient(ex * P, y)
        if not np.all(np.isfinite(grad)):
            raise OptimizationError(f"non-finite gradient at iteration {it}", it)
        same = (grad > 0) == (update > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, min_gain, out=gains)
        update = mom * update - eta * gains * grad
        y = y + update
        y -= y.mean(axis=0)
        history.append(kl_divergence(P, y))
    kl = history[-1] if history else kl_divergence(P, y)
    return EmbeddingResult(y, kl, iters, seed, history)


def subsample(n: int, cap: int = MAX_POINTS, seed: int = 2024) -> np.ndarray:
    """Sorted indices of at most ``cap`` of ``n`` points, chosen by a seeded shuffle."""
    if n <= cap:
        return np.arange(n)
    return np.sort(SplitMix64(seed).permutation(n)[:cap])


def embed(x, labels=None, perplexity: float = 30.0, iters: int = 1000, seed: int = 2024,
          max_points: int = MAX_POINTS):
    """Flatten, subsample and embed; returns (result, kept indices)."""
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    keep = subsample(x.shape[0], min(max_points, MAX_POINTS), seed)
    x = x[keep]
    perplexity = min(perplexity, (x.shape[0] - 1) / 3.0)
    aff = perplexity_affinities(x, perplexity, seed=seed)
    return tsne_optimize(aff, iters=iters, seed=seed), keep


def embedding_csv(y: np.ndarray, labels) -> str:
    lines = ["x,y,label"]
    lines += [f"{a!r},{b!r},{int(c)}" for (a, b), c in zip(np.asarray(y, dtype=float).tolist(), labels)]
    return "\n".join(lines) + "\n"


COLORS = {1: ("#d62728", "speech"), 0: ("#1f77b4", "idle")}


def embedding_svg(y: np.ndarray, labels, title: str = "", size: int = 480) -> str:
    """Scatter plot with one colour per class and a speech/idle legend."""
    y = np.asarray(y, dtype=np.float64)
    labels = np.asarray(labels)
    pad = 30
    lo, hi = y.min(axis=0), y.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pts = pad + (y - lo) / span * (size - 2 * pad)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        out.append(f'<text x="{size / 2:.0f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for (px, py), lab in zip(pts, labels):
        color = COLORS.get(int(lab), ("#7f7f7f", ""))[0]
        out.append(f'<circle cx="{px:.2f}" cy="{size - py:.2f}" r="2.5" fill="{color}" fill-opacity="0.7"/>')
    for i, key in enumerate((1, 0)):
        color, name = COLORS[key]
        yy = size - 40 + 16 * i
        out.append(f'<circle cx="{size - 80}" cy="{yy}" r="4" fill="{color}"/>')
        out.append(f'<text x="{size - 70}" y="{yy + 4}" font-size="12">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
