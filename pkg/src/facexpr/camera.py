"""Scaled-orthographic cameras and 2D similarity registration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegeneracyError

ROTATION_TOL = 1e-8
# Relative singular-value floor below which point sets count as degenerate.
DEGENERACY_RTOL = 1e-9
# Frontal view in image coordinates (y down): 180 degrees about the x axis.
FRONTAL_ROTATION = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Weak-perspective camera: ``x_2d = scale * (R x_3d)[:2] + translation``."""

    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(2)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))
        if r.shape != (3, 3):
            raise ContractError(f"rotation must be 3x3, got {r.shape}")
        if not self.scale > 0:
            raise ContractError(f"scale must be positive, got {self.scale}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ROTATION_TOL or abs(np.linalg.det(r) - 1) > ROTATION_TOL:
            raise ContractError("rotation is not a proper orthonormal matrix")

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), 1.0, np.zeros(2))

    @property
    def projection(self) -> np.ndarray:
        """The 2 x 3 linear part ``scale * R[:2]``."""
        return self.scale * self.rotation[:2]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation.ravel(), [self.scale], self.translation])

    @classmethod
    def from_vector(cls, v) -> "CameraPose":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:9].reshape(3, 3), v[9], v[10:12])


@dataclass(frozen=True)
class Similarity2D:
    scale: float
    rotation_angle: float
    translation: tuple

    @property
    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.rotation_angle), np.sin(self.rotation_angle)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix.T + np.asarray(self.translation)


def rotation_from_rows(r1, r2) -> np.ndarray:
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    return np.vstack([r1, r2, np.cross(r1, r2)])


def nearest_row_orthonormal(m: np.ndarray) -> np.ndarray:
    """Orthogonal polar factor of a 2 x 3 matrix (rows orthonormal)."""
    u, _, vt = np.linalg.svd(m, full_matrices=False)
    return u @ vt


def project(pose: CameraPose, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ pose.projection.T + pose.translation


def _centered(points3d, points2d, weights):
    """Weighted centroids and centered stacks for F x K x 3 / F x K x 2 arrays."""
    w = weights / weights.sum()
    c3 = np.einsum("k,fkd->fd", w, points3d)
    c2 = np.einsum("k,fkd->fd", w, points2d)
    return c3, c2, points3d - c3[:, None], points2d - c2[:, None]


def estimate_poses(points3d, points2d, weights=None):
    """Vectorised ``estimate_pose`` over F frames.

    Returns ``(rotations F x 3 x 3, scales F, translations F x 2, degenerate F)``;
    degenerate frames get identity placeholders instead of raising.
    """
    x = np.asarray(points3d, dtype=np.float64)
    y = np.asarray(points2d, dtype=np.float64)
    n_f, k = x.shape[:2]
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    c3, c2, xc, yc = _centered(x, y, w)
    s_mat = np.einsum("k,fki,fkj->fij", w, xc, xc)
    n_mat = np.einsum("k,fki,fkj->fij", w, yc, xc)
    sv = np.sqrt(np.clip(np.linalg.eigvalsh(s_mat)[:, ::-1], 0, None))
    degenerate = (sv[:, 0] <= 0) | (sv[:, -1] <= DEGENERACY_RTOL * sv[:, 0])
    if np.count_nonzero(w > 0) < 4:
        degenerate[:] = True
    s_safe = np.where(degenerate[:, None, None], np.eye(3), s_mat)
    m = np.linalg.solve(s_safe, np.swapaxes(n_mat, 1, 2)).swapaxes(1, 2)
    u, _, vt = np.linalg.svd(m, full_matrices=False)
    rows = u @ vt
    scale = np.sum(m * rows, axis=(1, 2)) / 2.0
    degenerate |= ~(scale > 0)
    rot = np.concatenate([rows, np.cross(rows[:, 0], rows[:, 1])[:, None]], axis=1)
    rot[degenerate] = np.eye(3)
    scale = np.where(degenerate, 1.0, scale)
    trans = c2 - scale[:, None] * np.einsum("fij,fj->fi", rot[:, :2], c3)
    return rot, scale, trans, degenerate


def estimate_pose(points3d, points2d, weights=None) -> CameraPose:
    """Weighted least-squares scaled-orthographic pose.

    Finds the unconstrained 2 x 3 linear map on centered points, takes its
    nearest row-orthonormal factor as the first two rows of the rotation (the
    third row is their cross product, so det = +1), projects the map onto
    that factor for the scale and recovers the translation from centroids.
    """
    x = np.asarray(points3d, dtype=np.float64)
    y = np.asarray(points2d, dtype=np.float64)
    k = x.shape[0]
    if x.shape != (k, 3) or y.shape != (k, 2):
        raise ContractError(f"expected K x 3 and K x 2 point sets, got {x.shape} and {y.shape}")
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ContractError("weights must be K non-negative reals")
    if np.count_nonzero(w > 0) < 4:
        raise DegeneracyError("fewer than 4 positively weighted points", singular_values=np.zeros(3))
    sv = np.linalg.svd(np.sqrt(w)[:, None] * (x - w @ x / w.sum()), compute_uv=False)
    rot, scale, trans, degenerate = estimate_poses(x[None], y[None], w)
    if degenerate[0]:
        raise DegeneracyError(f"degenerate 3D point configuration (singular values {sv})", singular_values=sv)
    return CameraPose(rot[0], scale[0], trans[0])


def refine_poses(rot, scale, points3d, points2d, iterations: int = 20):
    """Monotone majorize-minimize refinement of the exact pose objective, per frame.

    ``estimate_pose`` solves a relaxation; each step here majorizes the
    quadratic term by its largest eigenvalue and solves the resulting
    Procrustes problem, so the reprojection error never increases. Returns
    ``(rotations, scales, translations)``.
    """
    x = np.asarray(points3d, dtype=np.float64)
    y = np.asarray(points2d, dtype=np.float64)
    n_f, k = x.shape[:2]
    c3, c2, xc, yc = _centered(x, y, np.ones(k))
    s_mat = np.einsum("fki,fkj->fij", xc, xc)
    n_mat = np.einsum("fki,fkj->fij", yc, xc)
    shifted = s_mat - np.linalg.eigvalsh(s_mat)[:, -1, None, None] * np.eye(3)
    const = np.sum(yc * yc, axis=(1, 2))

    def cost(r, s):
        return (s * s * np.sum((r @ s_mat) * r, axis=(1, 2))
                - 2 * s * np.sum(r * n_mat, axis=(1, 2)) + const)

    rows = np.array(rot[:, :2], dtype=np.float64)
    s = np.array(scale, dtype=np.float64)
    f = cost(rows, s)
    for _ in range(iterations):
        target = s[:, None, None] * n_mat - (s * s)[:, None, None] * rows @ shifted
        u, _, vt = np.linalg.svd(target, full_matrices=False)
        new_rows = u @ vt
        denom = np.sum((new_rows @ s_mat) * new_rows, axis=(1, 2))
        new_s = np.where(denom > 0, np.sum(new_rows * n_mat, axis=(1, 2)) / np.where(denom > 0, denom, 1), s)
        new_f = cost(new_rows, new_s)
        better = (new_s > 0) & (new_f < f)
        if not better.any():
            break
        rows[better] = new_rows[better]
        s[better] = new_s[better]
        f[better] = new_f[better]
    rot = np.concatenate([rows, np.cross(rows[:, 0], rows[:, 1])[:, None]], axis=1)
    trans = c2 - s[:, None] * np.einsum("fij,fj->fi", rows, c3)
    return rot, s, trans


def refine_pose(pose: CameraPose, points3d, points2d, iterations: int = 50) -> CameraPose:
    rot, s, t = refine_poses(pose.rotation[None], np.array([pose.scale]),
                             np.asarray(points3d)[None], np.asarray(points2d)[None], iterations)
    return CameraPose(rot[0], s[0], t[0])


def reprojection_rmse(pose: CameraPose, points3d, points2d) -> float:
    """Root mean square over all 2K coordinates, so pixel noise of std σ gives about σ."""
    d = project(pose, points3d) - np.asarray(points2d)
    return float(np.sqrt(np.mean(d * d)))


def register_to_template(landmarks, template):
    """Least-squares similarity (no reflection) taking ``landmarks`` onto ``template``.

    Returns ``(Similarity2D, registered)``.
    """
    x = np.asarray(landmarks, dtype=np.float64)
    t = np.asarray(template, dtype=np.float64)
    if x.shape != t.shape or x.ndim != 2 or x.shape[1] != 2:
        raise ContractError(f"landmarks and template must both be K x 2, got {x.shape} and {t.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
        raise ContractError("landmarks and template must be finite")
    mx = x.mean(axis=0)
    mt = t.mean(axis=0)
    xc = x - mx
    tc = t - mt
    spread = np.sum(xc * xc)
    if spread <= DEGENERACY_RTOL**2 * max(1.0, np.sum(tc * tc)):
        raise DegeneracyError("landmarks have zero spread", singular_values=np.array([np.sqrt(spread)]))
    # Complex-number form: minimise |a z + b - w|^2 over complex a, b.
    z = xc[:, 0] + 1j * xc[:, 1]
    wt = tc[:, 0] + 1j * tc[:, 1]
    a = np.vdot(z, wt) / spread
    scale = float(abs(a))
    angle = float(np.angle(a))
    if angle <= -np.pi:
        angle += 2 * np.pi
    rot = np.array([[a.real, -a.imag], [a.imag, a.real]])
    translation = mt - rot @ mx
    sim = Similarity2D(scale, angle, (float(translation[0]), float(translation[1])))
    registered = x @ rot.T + translation
    return sim, registered


def make_template(landmarks_3d, canvas: float = 224.0, fill: float = 0.7) -> np.ndarray:
    """Frontal orthographic template of 68 landmarks on a square canvas.

    The landmarks are viewed through ``FRONTAL_ROTATION``, isotropically
    scaled so their bounding box occupies the central ``fill`` fraction of the
    canvas and centered.
    """
    p = np.asarray(landmarks_3d, dtype=np.float64)
    xy = (p @ FRONTAL_ROTATION.T)[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise DegeneracyError("template landmarks have zero extent")
    s = fill * canvas / extent
    return (xy - (lo + hi) / 2) * s + canvas / 2
