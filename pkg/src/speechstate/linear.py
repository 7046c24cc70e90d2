"""Shrinkage LDA and a class-weighted linear SVM for CSP features."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateLabelError, DimensionError, NumericalRankError

log = logging.getLogger(__name__)


@dataclass
class LdaModel:
    w: np.ndarray
    b: float
    shrinkage: float


@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    lam: float
    epochs: int
    class_weights: tuple[float, float]
    objective_history: list[float] = field(default_factory=list)


def _check_xy(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise DimensionError(f"need X [n, F] and y [n], got {x.shape} and {y.shape}")
    if not (np.any(y == 1) and np.any(y == 0)):
        raise DegenerateLabelError("both classes must be present")
    return x, y.astype(np.int64)


def fit_lda(x, y, shrinkage: float = 0.1) -> LdaModel:
    """Two-class LDA with the pooled covariance shrunk toward a scaled identity.

    The bias puts the decision boundary midway between the projected class
    means, which is the equal-prior boundary.
    """
    x, y = _check_xy(x, y)
    n, f = x.shape
    if not 0.0 <= shrinkage <= 1.0:
        raise ConfigurationError(f"shrinkage must lie in [0, 1], got {shrinkage}")
    if n <= f and shrinkage < 0.5:
        log.warning("only %d samples for %d features; raising shrinkage to 0.5", n, f)
        shrinkage = 0.5
    mu1 = x[y == 1].mean(axis=0)
    mu0 = x[y == 0].mean(axis=0)
    centered = np.concatenate([x[y == 1] - mu1, x[y == 0] - mu0])
    s = centered.T @ centered / max(n - 2, 1)
    s = (1 - shrinkage) * s + shrinkage * (np.trace(s) / f) * np.eye(f)
    try:
        w = np.linalg.solve(s, mu1 - mu0)
    except np.linalg.LinAlgError as exc:
        raise NumericalRankError("shrunk covariance is singular") from exc
    b = -float(w @ (mu1 + mu0)) / 2.0
    return LdaModel(w, b, shrinkage)


def svm_objective(w, b, x, y, lam, class_weights=(1.0, 1.0)) -> float:
    """``lam/2 |w|^2 + mean_i c_i max(0, 1 - s_i (w.x_i + b))`` with s in {-1, +1}."""
    s = np.where(np.asarray(y) == 1, 1.0, -1.0)
    c = np.asarray(class_weights, dtype=np.float64)[np.asarray(y, dtype=np.int64)]
    margins = s * (x @ w + b)
    return 0.5 * lam * float(w @ w) + float(np.mean(c * np.maximum(0.0, 1.0 - margins)))


def fit_svm(x, y, lam: float = 1e-3, epochs: int = 50, class_weights=(1.0, 1.0), seed: int = 2024,
            steps_per_epoch: int = 100) -> SvmModel:
    """Class-weighted L2 hinge-loss SVM by full-batch Pegasos subgradient steps.

    Features are z-scored internally and the solution mapped back, so the
    returned ``w``/``b`` act on raw features. Step ``t`` uses rate
    ``1/(lam t)`` and is followed by projection onto the ball of radius
    ``sqrt(2 max c / lam)``, which contains the optimum. Every subgradient
    is a mean over all samples, so the result does not depend on sample
    order and ``seed`` only names the run. The returned weights are the average of the final epoch's iterates.
    """
    x, y = _check_xy(x, y)
    if lam <= 0:
        raise ConfigurationError(f"regularization must be positive, got {lam}")
    if epochs < 1:
        raise ConfigurationError("epochs must be at least 1")
    cw = np.asarray(class_weights, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    z = (x - mu) / sd
    s = np.where(y == 1, 1.0, -1.0)
    c = cw[y]
    n, f = z.shape
    # the bias rides along as an unregularized coordinate
    za = np.hstack([z, np.ones((n, 1))])
    v = np.zeros(f + 1)
    radius = np.sqrt(2.0 * cw.max() / lam)
    history = []
    avg = v
    t = 0
    for _ in range(epochs):
        acc = np.zeros(f + 1)
        for _ in range(steps_per_epoch):
            t += 1
            eta = 1.0 / (lam * t)
            active = s * (za @ v) < 1.0
            grad = -(za[active].T @ (c[active] * s[active])) / n
            grad[:f] += lam * v[:f]
            v = v - eta * grad
            norm = np.linalg.norm(v[:f])
            if norm > radius:
                v[:f] *= radius / norm
            acc += v
        avg = acc / steps_per_epoch
        history.append(svm_objective(avg[:f], avg[f], z, y, lam, cw))
    w_z, b_z = avg[:f], avg[f]
    w = w_z / sd
    b = float(b_z - w_z @ (mu / sd))
    return SvmModel(w, b, lam, epochs, (float(cw[0]), float(cw[1])), history)


def predict_linear(model, x) -> tuple[np.ndarray, np.ndarray]:
    """Scores ``w.x + b`` and labels (1 iff score > 0; a zero score maps to 0)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[1] != model.w.shape[0]:
        raise DimensionError(f"model expects {model.w.shape[0]} features, got {x.shape[1]}")
    scores = (x * model.w).sum(axis=1) + model.b
    ties = int(np.count_nonzero(scores == 0))
    if ties:
        log.debug("%d samples scored exactly 0; assigned to idle", ties)
    return (scores > 0).astype(np.int64), scores
