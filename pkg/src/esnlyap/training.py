"""Linear readout training by ridge regression on driven reservoir states."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .reservoir import FeatureMap, apply_feature_map

_RIDGE_ZERO_CUTOFF = 1e-12


@dataclass
class Readout:
    """Trained output matrix plus the feature map it applies."""

    W_out: np.ndarray
    feature_map: FeatureMap
    ridge: float = 0.0

    def __post_init__(self):
        self.W_out = np.asarray(self.W_out, dtype=float)
        if self.W_out.ndim != 2:
            raise ValueError("W_out must be a 2-d matrix")
        if not np.all(np.isfinite(self.W_out)):
            raise ValueError("W_out must be finite")
        if self.W_out.shape[1] != self.feature_map.n_features:
            raise ValueError("W_out columns must match the feature map size")


def fit_readout(features, targets, ridge: float, fm: FeatureMap) -> Readout:
    """Minimize sum ||W p_k - x_k||^2 + ridge ||W||_F^2 over W.

    Solved through the SVD of the feature matrix (reached via an economy QR
    of the row-augmented [P | X], which shares P's singular values and is
    much faster on tall problems): singular values are inverted as
    s/(s^2 + ridge); at ridge = 0, values below 1e-12 * s_max are dropped,
    giving the minimum-norm least-squares solution. No centering or scaling
    is applied to features or targets.
    """
    P = np.asarray(features, dtype=float)
    X = np.asarray(targets, dtype=float)
    if P.ndim != 2 or X.ndim != 2:
        raise ValueError("features and targets must be 2-d")
    if P.shape[0] != X.shape[0]:
        raise ValueError("features and targets must have the same row count")
    if P.shape[0] < 1:
        raise ValueError("need at least one sample")
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(X))):
        raise ValueError("non-finite features or targets")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    if P.shape[1] != fm.n_features:
        raise ValueError("feature count does not match the feature map")
    p = P.shape[1]
    d = X.shape[1]
    # Fortran-ordered augmented [P | X] keeps LAPACK's QR copy-free; R carries
    # both P's triangular factor and Q^T X.
    aug = np.empty((P.shape[0], p + d), order="F")
    aug[:, :p] = P
    aug[:, p:] = X
    rows = min(aug.shape)
    (raw, _), _ = sla.qr(aug, mode="raw", check_finite=False, overwrite_a=True)
    R = np.triu(raw[:rows])
    U, s, Vt = sla.svd(R[:, :p], full_matrices=False, check_finite=False)
    utx = U.T @ R[:, p:]
    if ridge == 0.0:
        cutoff = _RIDGE_ZERO_CUTOFF * (s[0] if s.size else 0.0)
        inv = np.where(s > cutoff, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    else:
        inv = s / (s ** 2 + ridge)
    W_out = (Vt.T @ (inv[:, None] * utx)).T
    return Readout(W_out=W_out, feature_map=fm, ridge=float(ridge))


def predict(readout: Readout, r) -> np.ndarray:
    """W_out P(r); accepts a single reservoir state (N,) or a batch (..., N)."""
    feats = apply_feature_map(readout.feature_map, r)
    if feats.ndim == 1:
        return readout.W_out @ feats
    return feats @ readout.W_out.T


def one_step_mse(readout: Readout, states, targets) -> float:
    """Mean squared one-step prediction error over all rows and components."""
    states = np.asarray(states, dtype=float)
    targets = np.asarray(targets, dtype=float)
    preds = predict(readout, states)
    if preds.shape != targets.shape:
        raise ValueError(f"prediction shape {preds.shape} does not match "
                         f"targets {targets.shape}")
    return float(np.mean((preds - targets) ** 2))
