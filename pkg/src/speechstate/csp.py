"""Common spatial patterns with log-variance readout."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DegenerateLabelError, DimensionError, NumericalRankError

log = logging.getLogger(__name__)

RIDGE = 1e-9


@dataclass(frozen=True)
class SpatialFilterBank:
    """Retained filters as columns of ``W`` (C x 2m).

    The first ``m_pairs`` columns maximize speech-class variance, the last
    ``m_pairs`` maximize idle-class variance. ``eigenvalues`` lists all C
    generalized eigenvalues in descending order.
    """

    W: np.ndarray
    eigenvalues: np.ndarray
    m_pairs: int

    @property
    def n_channels(self) -> int:
        return self.W.shape[0]

    @property
    def retained_eigenvalues(self) -> np.ndarray:
        m = self.m_pairs
        return np.concatenate([self.eigenvalues[:m], self.eigenvalues[-m:]])


def _trace_normalized_mean(x: np.ndarray) -> np.ndarray:
    covs = np.einsum("nct,ndt->ncd", x, x)
    tr = np.trace(covs, axis1=1, axis2=2)
    if np.any(tr <= 0):
        raise DegenerateInputError("an all-zero window has no covariance")
    return (covs / tr[:, None, None]).mean(axis=0)


def class_covariances(ws) -> tuple[np.ndarray, np.ndarray]:
    """Average trace-normalized ``X Xᵀ`` of speech windows and of idle windows."""
    x, y = ws.x, ws.y
    if not (np.any(y == 1) and np.any(y == 0)):
        raise DegenerateLabelError("CSP needs windows of both classes")
    c1 = _trace_normalized_mean(x[y == 1])
    c0 = _trace_normalized_mean(x[y == 0])
    return (c1 + c1.T) / 2, (c0 + c0.T) / 2


def fit_csp(c1: np.ndarray, c0: np.ndarray, m_pairs: int = 3) -> SpatialFilterBank:
    """Whiten the composite covariance, then diagonalize the whitened speech covariance."""
    c1 = np.asarray(c1, dtype=np.float64)
    c0 = np.asarray(c0, dtype=np.float64)
    if c1.shape != c0.shape or c1.ndim != 2 or c1.shape[0] != c1.shape[1]:
        raise DimensionError(f"class covariances must be equal square matrices, got {c1.shape} and {c0.shape}")
    n = c1.shape[0]
    if m_pairs < 1 or 2 * m_pairs > n:
        raise DimensionError(f"m_pairs={m_pairs} needs at least {2 * m_pairs} channels, have {n}")
    cc = c1 + c0
    lam, u = np.linalg.eigh(cc)
    if lam[0] <= 1e-12 * lam[-1]:
        ridge = RIDGE * np.trace(cc)
        log.info("composite covariance is ill-conditioned; adding ridge %.3g", ridge)
        cc = cc + ridge * np.eye(n)
        c1 = c1 + 0.5 * ridge * np.eye(n)
        lam, u = np.linalg.eigh(cc)
        if lam[0] <= 1e-15 * lam[-1] or lam[0] <= 0:
            raise NumericalRankError("composite covariance is rank deficient even after ridge")
    whiten = u / np.sqrt(lam)  # columns scaled: whitenᵀ cc whiten = I
    s = whiten.T @ c1 @ whiten
    d, b = np.linalg.eigh((s + s.T) / 2)
    order = np.argsort(d)[::-1]
    d, b = d[order], b[:, order]
    w_full = whiten @ b
    keep = np.r_[0:m_pairs, n - m_pairs:n]
    w = w_full[:, keep]
    flip = np.sign(w[np.argmax(np.abs(w), axis=0), np.arange(w.shape[1])])
    w = w * flip
    return SpatialFilterBank(w, np.clip(d, 0.0, 1.0), m_pairs)


def transform_logvar(bank: SpatialFilterBank, window: np.ndarray) -> np.ndarray:
    """Normalized log-variance features for one window (C x T) or a stack (n x C x T)."""
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != bank.n_channels:
        raise DimensionError(f"expected {bank.n_channels} channels, got window shape {np.shape(window)}")
    z = np.einsum("ck,nct->nkt", bank.W, x)
    v = z.var(axis=2)
    tot = v.sum(axis=1, keepdims=True)
    if np.any(tot <= 0):
        raise DegenerateInputError("window has zero variance after spatial filtering")
    f = np.log(v / tot)
    return f[0] if single else f
