"""Linear soft-margin SVM trained by SMO on the dual.

Primal: ``min_{w,b} 1/2 |w|^2 + C sum_i max(0, 1 - y_i (w.x_i + b))``.
Dual: ``max_a sum a - 1/2 a^T Q a`` with ``0 <= a_i <= C``, ``y.a = 0`` and
``Q_ij = y_i y_j x_i.x_j``.

Pairs are picked with second-order working-set selection and updated
analytically. Kernel columns are computed on demand so memory stays linear in
the number of samples. An interior point solver backs SMO up when it makes
slow progress. Training stops once the duality gap between the primal
at ``(w(a), b*)`` and the dual at ``a`` is within ``gap_rtol`` of the primal;
``b*`` minimises the primal exactly for the current ``w``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import ContractError, SolverError, TrainingError

TAU = 1e-12
# Tighter than the 1e-6 objective tolerance callers compare against.
GAP_RTOL = 1e-7


@dataclass(frozen=True)
class BinarySvm:
    w: np.ndarray
    b: float
    C: float
    alpha: np.ndarray
    primal: float
    dual: float
    iterations: int
    method: str = "smo"

    def decision(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.w + self.b

    def support(self, x, y, tol: float = 1e-6) -> np.ndarray:
        """Indices on or inside the margin, ``y (w.x + b) <= 1 + tol``."""
        return np.flatnonzero(np.asarray(y) * self.decision(x) <= 1.0 + tol)


@numba.njit(cache=True)
def _smo(x, y, c, alpha, grad, eps, max_iter):
    m, d = x.shape
    diag = np.empty(m)
    for t in range(m):
        s = 0.0
        for k in range(d):
            s += x[t, k] * x[t, k]
        diag[t] = s
    ki = np.empty(m)
    kj = np.empty(m)
    it = 0
    while it < max_iter:
        # first index: maximal violation among the "up" set
        gmax = -np.inf
        i = -1
        for t in range(m):
            if y[t] > 0:
                if alpha[t] < c and -grad[t] >= gmax:
                    gmax = -grad[t]
                    i = t
            else:
                if alpha[t] > 0 and grad[t] >= gmax:
                    gmax = grad[t]
                    i = t
        if i < 0:
            break
        for t in range(m):
            s = 0.0
            for k in range(d):
                s += x[i, k] * x[t, k]
            ki[t] = s
        # second index: largest guaranteed decrease of the dual
        gmax2 = -np.inf
        j = -1
        obj_min = np.inf
        for t in range(m):
            if y[t] > 0:
                if not alpha[t] > 0:
                    continue
                diff = gmax + grad[t]
                if grad[t] >= gmax2:
                    gmax2 = grad[t]
            else:
                if not alpha[t] < c:
                    continue
                diff = gmax - grad[t]
                if -grad[t] >= gmax2:
                    gmax2 = -grad[t]
            if diff > 0:
                quad = diag[i] + diag[t] - 2.0 * ki[t]
                if quad <= 0:
                    quad = TAU
                obj = -(diff * diff) / quad
                if obj <= obj_min:
                    obj_min = obj
                    j = t
        if gmax + gmax2 < eps or j < 0:
            break
        it += 1

        for t in range(m):
            s = 0.0
            for k in range(d):
                s += x[j, k] * x[t, k]
            kj[t] = s
        quad = diag[i] + diag[j] - 2.0 * ki[j]
        if quad <= 0:
            quad = TAU
        old_i = alpha[i]
        old_j = alpha[j]
        if y[i] != y[j]:
            delta = (-grad[i] - grad[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > c:
                    alpha[i] = c
                    alpha[j] = c - diff
            else:
                if alpha[j] > c:
                    alpha[j] = c
                    alpha[i] = c + diff
        else:
            delta = (grad[i] - grad[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > c:
                if alpha[i] > c:
                    alpha[i] = c
                    alpha[j] = total - c
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = total
            if total > c:
                if alpha[j] > c:
                    alpha[j] = c
                    alpha[i] = total - c
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = total
        di = (alpha[i] - old_i) * y[i]
        dj = (alpha[j] - old_j) * y[j]
        for t in range(m):
            grad[t] += y[t] * (ki[t] * di + kj[t] * dj)
    return it


def optimal_bias(scores, y) -> float:
    """Midpoint of the interval of ``b`` minimising ``sum max(0, 1 - y (s + b))``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    knots = y - s  # hinge of sample i switches on/off at b = y_i - s_i
    order = np.argsort(knots, kind="stable")
    k, yy = knots[order], y[order]
    pos = yy > 0
    # value at each knot: positives with knot above b, negatives with knot below b
    kp = np.where(pos, k, 0.0)
    kn = np.where(~pos, k, 0.0)
    cnt_p_above = np.cumsum(pos[::-1])[::-1]
    sum_p_above = np.cumsum(kp[::-1])[::-1]
    cnt_n_below = np.cumsum(~pos)
    sum_n_below = np.cumsum(kn)
    value = (sum_p_above - cnt_p_above * k) + (cnt_n_below * k - sum_n_below)
    best = value.min()
    hit = np.flatnonzero(value <= best + 1e-12 * max(1.0, abs(best)))
    return float(0.5 * (k[hit[0]] + k[hit[-1]]))


def primal_objective(w, b, x, y, c) -> float:
    margins = 1.0 - y * (x @ w + b)
    return float(0.5 * w @ w + c * np.sum(np.maximum(margins, 0.0)))


def dual_objective(alpha, w) -> float:
    return float(alpha.sum() - 0.5 * w @ w)


def _balance(alpha, y, c):
    """Feasible point near ``alpha``: clip to the box, then shrink the heavier class so ``y.a = 0``."""
    a = np.clip(alpha, 0.0, c)
    pos, neg = a[y > 0].sum(), a[y < 0].sum()
    if pos > neg:
        a[y > 0] *= neg / pos
    elif neg > pos:
        a[y < 0] *= pos / neg
    return a


def _interior_point(x, y, c, gap_of, target, max_iter=200):
    """Primal-dual interior point on the dual with Mehrotra's step rule.

    The dual Hessian ``Q = Z Z^T`` (``Z = diag(y) X``) has rank at most d, so
    each Newton system ``(Q + D) da = r`` is solved through the Woodbury
    identity in ``O(M d^2)``. Returns the balanced iterate with the smallest
    ``gap_of`` value, stopping early once it falls to ``target``.
    """
    m, d = x.shape
    z_mat = y[:, None] * x
    alpha = np.full(m, c / 2)
    lo = np.ones(m)  # multipliers of alpha >= 0
    hi = np.ones(m)  # multipliers of alpha <= C
    nu = 0.0
    best, best_gap = _balance(alpha, y, c), np.inf

    def solve(diag, rhs):
        inv = 1.0 / diag
        zi = z_mat * inv[:, None]
        small = np.eye(d) + z_mat.T @ zi
        return inv[:, None] * rhs - zi @ np.linalg.solve(small, zi.T @ rhs)

    for _ in range(max_iter):
        gap_lo, gap_hi = alpha, c - alpha
        r_d = z_mat @ (z_mat.T @ alpha) - 1.0 + nu * y - lo + hi
        r_p = y @ alpha
        mu = (gap_lo @ lo + gap_hi @ hi) / (2 * m)
        if not (np.all(gap_lo > 0) and np.all(gap_hi > 0)):
            break
        candidate = _balance(alpha, y, c)
        gap = gap_of(candidate)
        if gap < best_gap:
            best, best_gap = candidate, gap
        if gap <= target:
            break
        diag = lo / gap_lo + hi / gap_hi

        def direction(sigma_mu, corr_lo, corr_hi):
            rhs = -r_d + (sigma_mu - corr_lo) / gap_lo - lo - (sigma_mu - corr_hi) / gap_hi + hi
            sol = solve(diag, np.column_stack([rhs, y]))
            d_nu = (y @ sol[:, 0] + r_p) / (y @ sol[:, 1])
            d_a = sol[:, 0] - d_nu * sol[:, 1]
            d_lo = (sigma_mu - corr_lo - gap_lo * lo - lo * d_a) / gap_lo
            d_hi = (sigma_mu - corr_hi - gap_hi * hi + hi * d_a) / gap_hi
            return d_a, d_nu, d_lo, d_hi

        def step(d_a, d_lo, d_hi):
            ratios = [1.0]
            for v, dv in ((gap_lo, d_a), (gap_hi, -d_a), (lo, d_lo), (hi, d_hi)):
                neg = dv < 0
                if neg.any():
                    ratios.append(np.min(-v[neg] / dv[neg]))
            return min(ratios)

        a_aff, _, lo_aff, hi_aff = direction(0.0, 0.0, 0.0)
        t = step(a_aff, lo_aff, hi_aff)
        mu_aff = ((gap_lo + t * a_aff) @ (lo + t * lo_aff) + (gap_hi - t * a_aff) @ (hi + t * hi_aff)) / (2 * m)
        sigma = (mu_aff / mu) ** 3
        d_a, d_nu, d_lo, d_hi = direction(sigma * mu, a_aff * lo_aff, -a_aff * hi_aff)
        t = min(1.0, 0.995 * step(d_a, d_lo, d_hi))
        alpha = alpha + t * d_a
        nu += t * d_nu
        lo = lo + t * d_lo
        hi = hi + t * d_hi
    return best


def _polish(x, y, c, alpha, rel=1e-4):
    """Exact dual point for the support partition suggested by ``alpha``.

    Multipliers within ``rel * C`` of a bound are pinned there; the free ones
    are solved from ``y_i (w.x_i + b) = 1`` and ``y.a = 0``. Returns ``None``
    when the solution leaves the box.
    """
    free = (alpha > rel * c) & (alpha < (1 - rel) * c)
    at_c = alpha >= (1 - rel) * c
    d = x.shape[1]
    zf = y[free, None] * x[free]
    k = zf.shape[0]
    lhs = np.zeros((d + 1 + k, d + 1 + k))
    rhs = np.zeros(d + 1 + k)
    lhs[:d, :d] = np.eye(d)
    lhs[:d, d + 1:] = -zf.T
    lhs[d, d + 1:] = y[free]
    lhs[d + 1:, :d] = zf
    lhs[d + 1:, d] = y[free]
    rhs[:d] = c * (y[at_c] @ x[at_c])
    rhs[d] = -c * y[at_c].sum()
    rhs[d + 1:] = 1.0
    sol = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    out = np.where(at_c, c, 0.0)
    out[free] = sol[d + 1:]
    if np.any(out < 0) or np.any(out > c):
        return None
    return out


def _evaluate(x, y, c, alpha):
    w = (alpha * y) @ x
    b = optimal_bias(x @ w, y)
    return w, b, primal_objective(w, b, x, y, c), dual_objective(alpha, w)


def train_binary_svm(x, y, C: float = 1.0, gap_rtol: float = GAP_RTOL, max_iter: int | None = None) -> BinarySvm:
    """Train a linear SVM; labels must be +1/-1 with both present.

    SMO runs first within an iteration budget; if the duality gap is still
    too large (slow progress at large C on overlapping classes) an interior
    point solve takes over.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ContractError(f"features {x.shape} and labels {y.shape} do not match")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ContractError("labels must be +1 or -1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise TrainingError("binary SVM needs both classes")
    if not np.all(np.isfinite(x)):
        raise ContractError("features must be finite")
    if not C > 0:
        raise ContractError("C must be positive")
    m = x.shape[0]
    max_iter = max_iter or max(5_000, 10 * m)
    alpha = np.zeros(m)
    grad = -np.ones(m)
    eps = 1e-3
    iterations = 0

    def converged(p, dl):
        return p - dl <= gap_rtol * max(1.0, abs(p))

    while True:
        iterations += _smo(x, y, float(C), alpha, grad, eps, max_iter - iterations)
        w, b, primal, dual = _evaluate(x, y, C, alpha)
        if converged(primal, dual) or iterations >= max_iter or eps < 1e-14:
            break
        eps /= 10
        # refresh the gradient to shed accumulated rounding
        grad = y * (x @ w) - 1.0
    method = "smo"
    if not converged(primal, dual):
        def gap_of(a):
            p, dl = _evaluate(x, y, C, a)[2:]
            return (p - dl) / max(1.0, abs(p))

        alpha = _interior_point(x, y, float(C), gap_of, gap_rtol)
        polished = _polish(x, y, float(C), alpha)
        if polished is not None and gap_of(polished) < gap_of(alpha):
            alpha = polished
        w, b, primal, dual = _evaluate(x, y, C, alpha)
        method = "interior-point"
    if not converged(primal, dual):
        raise SolverError(f"SVM solve did not converge: duality gap {primal - dual:.3e} ({method})")
    return BinarySvm(w, b, float(C), alpha, primal, dual, iterations, method)
