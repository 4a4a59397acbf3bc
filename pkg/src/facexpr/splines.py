"""Penalised cubic smoothing splines for landmark traces.

Every trace is modelled as a cubic B-spline with a knot at each frame. The
roughness penalty is the sum of squared fourth differences of the spline
coefficients, i.e. of the jumps in the third derivative, so cubic
polynomials pass through unchanged whatever the smoothing weight. The weight
is picked per trace by generalised cross-validation (GCV) on a log grid.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .errors import ContractError, InsufficientDataError

# Smoothing weights scanned by GCV.
LAMBDA_GRID = np.logspace(-2, 8, 81)
MIN_POINTS = 4


def _knots(num_frames: int) -> np.ndarray:
    return np.arange(-3, num_frames + 3, dtype=np.float64)


def design_matrix(positions, num_frames: int) -> np.ndarray:
    """Cubic B-spline basis (dense) evaluated at frame positions, n x (F + 2)."""
    x = np.asarray(positions, dtype=np.float64)
    return BSpline.design_matrix(x, _knots(num_frames), 3).toarray()


def difference_penalty(num_coeffs: int, order: int = 4) -> np.ndarray:
    d = np.diff(np.eye(num_coeffs), n=order, axis=0)
    return d.T @ d


def _cubic_basis(positions, num_frames: int) -> np.ndarray:
    """Legendre polynomials up to degree 3 on frames mapped to [-1, 1]."""
    u = 2.0 * np.asarray(positions, dtype=np.float64) / max(num_frames - 1, 1) - 1.0
    return np.polynomial.legendre.legvander(u, 3)


def _to_upper_banded(a: np.ndarray, u: int) -> np.ndarray:
    n = a.shape[0]
    ab = np.zeros((u + 1, n))
    for off in range(u + 1):
        ab[u - off, off:] = np.diagonal(a, off)
    return ab


class _GcvSystem:
    """Demmler-Reinsch diagonalisation shared by every trace with the same mask.

    With ``G = B^T B + P = L L^T`` and ``L^-1 P L^-T = Q diag(k) Q^T`` the hat
    matrix for weight ``lam`` has eigenvalues ``(1 - k) / (1 + (lam - 1) k)``,
    which makes GCV over the whole grid a handful of vector operations.
    """

    def __init__(self, basis: np.ndarray, penalty: np.ndarray):
        self.basis = basis
        self.gram = basis.T @ basis
        self.penalty = penalty
        chol = linalg.cholesky(self.gram + penalty, lower=True)
        half = linalg.solve_triangular(chol, penalty, lower=True)
        a = linalg.solve_triangular(chol, half.T, lower=True)
        kappa, q = linalg.eigh((a + a.T) / 2)
        self.kappa = np.clip(kappa, 0.0, 1.0)
        self.to_coef = linalg.solve_triangular(chol.T, q, lower=False)  # L^-T Q

    def choose(self, y: np.ndarray, grid=LAMBDA_GRID) -> np.ndarray:
        """GCV-optimal weight for each column of ``y`` (n x T)."""
        n = y.shape[0]
        z = self.to_coef.T @ (self.basis.T @ y)  # m x T
        z2 = z * z
        yy = np.sum(y * y, axis=0)
        g = 1.0 / (1.0 + (grid[:, None] - 1.0) * self.kappa[None, :])  # grid x m
        trace = g @ (1.0 - self.kappa)
        rss = yy[None, :] - 2.0 * (g @ z2) + (g * g * (1.0 - self.kappa)) @ z2
        rss = np.maximum(rss, 0.0)
        dof = np.maximum(n - trace, 1e-12)
        score = n * rss / (dof[:, None] ** 2)
        return grid[np.argmin(score, axis=0)]


def _interpolating_coefficients(basis, penalty, y):
    """Zero-weight limit: least-roughness spline through the observations.

    Solves the KKT system of ``min c^T P c`` subject to ``B c = y``.
    """
    n, m = basis.shape
    kkt = np.zeros((m + n, m + n))
    kkt[:m, :m] = penalty
    kkt[:m, m:] = basis.T
    kkt[m:, :m] = basis
    rhs = np.vstack([np.zeros((m, y.shape[1])), y])
    return linalg.lstsq(kkt, rhs)[0][:m]


def smooth_traces(traces, valid, smoothing=None):
    """Smooth F x T traces observed on ``valid`` frames.

    ``smoothing`` is either None (GCV per trace) or a fixed non-negative
    weight. Returns ``(fitted F x T evaluated at every frame, weights T)``.
    """
    y = np.asarray(traces, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    valid = np.asarray(valid, dtype=bool)
    n_f = y.shape[0]
    idx = np.flatnonzero(valid)
    if idx.size < MIN_POINTS:
        raise InsufficientDataError(f"need at least {MIN_POINTS} valid frames, got {idx.size}")
    basis = design_matrix(idx.astype(np.float64), n_f)
    penalty = difference_penalty(n_f + 2)
    # Cubics pass through unchanged, so take the least-squares cubic out first
    # and smooth only the remainder; large weights then stay well conditioned.
    trend_all = _cubic_basis(np.arange(n_f), n_f)
    trend = linalg.lstsq(trend_all[idx], y[idx])[0]
    obs = y[idx] - trend_all[idx] @ trend
    if smoothing is None:
        system = _GcvSystem(basis, penalty)
        weights = system.choose(obs)
    else:
        if not smoothing >= 0:
            raise ContractError("smoothing weight must be non-negative")
        system = None
        weights = np.full(y.shape[1], float(smoothing))

    full = design_matrix(np.arange(n_f, dtype=np.float64), n_f)
    out = np.empty_like(y)
    for lam in np.unique(weights):
        cols = np.flatnonzero(weights == lam)
        if lam > 0:
            gram = system.gram if system is not None else basis.T @ basis
            ab = _to_upper_banded(gram + lam * penalty, 4)
            coef = linalg.solveh_banded(ab, basis.T @ obs[:, cols])
        else:
            coef = _interpolating_coefficients(basis, penalty, obs[:, cols])
        out[:, cols] = full @ coef
    return out + trend_all @ trend, weights


def short_gap_mask(valid, max_gap: int) -> np.ndarray:
    """Frames in interior gaps shorter than ``max_gap`` (to be filled)."""
    valid = np.asarray(valid, dtype=bool)
    fill = np.zeros_like(valid)
    idx = np.flatnonzero(valid)
    for a, b in zip(idx[:-1], idx[1:]):
        if 1 < b - a <= max_gap:
            fill[a + 1:b] = True
    return fill
