"""Batch fitting of one identity, per-frame expressions and per-frame cameras.

The energy minimised over a landmark sequence is::

    E = sum_f |project(c_f, X(i, e_f)) - L_f|^2
        + lambda_i |i|^2 + lambda_e sum_f |e_f|^2
        + lambda_t sum_f |e_{f+1} - e_f|^2

where only valid frames contribute a data term. Each outer cycle runs two
exact block updates, the cameras and then the shape (identity and every
expression solved together), followed by a few damped Gauss-Newton steps over
all variables, each kept only if it lowers the energy. Every update is
therefore non-increasing in ``E``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .camera import CameraPose, estimate_poses, refine_poses
from .errors import ContractError, DataError, InsufficientDataError, SolverError
from .model import NUM_LANDMARKS, ShapeModel

log = logging.getLogger(__name__)

CONDITION_WARN = 1e8
# Slack on the monotonicity assertion, relative and absolute (pixels^2).
ENERGY_RTOL = 1e-10
ENERGY_ATOL = 1e-12
POSE_DIM = 6
# Damped Gauss-Newton iterations per outer cycle.
GN_INNER_STEPS = 8


class PruneStatus(str, enum.Enum):
    KEPT = "kept"
    AUTO_PRUNED = "auto_pruned"
    MANUALLY_PRUNED = "manually_pruned"
    TRACK_LOST = "track_lost"


@dataclass
class LandmarkSequence:
    frames: np.ndarray
    valid: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (NUM_LANDMARKS, 2) or self.frames.shape[0] < 1:
            raise ContractError(f"landmark frames must be F x 68 x 2 with F >= 1, got {self.frames.shape}")
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if self.valid.shape != (self.frames.shape[0],):
            raise ContractError("valid flags must have one entry per frame")
        if not np.all(np.isfinite(self.frames[self.valid])):
            raise ContractError("valid frames must have finite coordinates")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FitConfig:
    lambda_identity: float = 1.0
    lambda_expression: float = 1.0
    lambda_temporal: float = 0.5
    outer_iterations: int = 10
    convergence_tol: float = 1e-6

    def __post_init__(self):
        for name in ("lambda_identity", "lambda_expression", "lambda_temporal"):
            if not getattr(self, name) >= 0:
                raise ContractError(f"{name} must be non-negative")
        if int(self.outer_iterations) < 1:
            raise ContractError("outer_iterations must be a positive integer")
        if not self.convergence_tol > 0:
            raise ContractError("convergence_tol must be positive")


@dataclass
class VideoAnnotation:
    identity: np.ndarray
    expressions: np.ndarray
    poses: list
    mean_reprojection_px: float
    prune_status: PruneStatus = PruneStatus.KEPT
    prune_reason: str = ""
    source_id: str = ""
    valid: np.ndarray | None = None
    energy_history: list = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.expressions.shape[0]


@dataclass
class _Cameras:
    rot: np.ndarray    # F x 3 x 3
    scale: np.ndarray  # F
    trans: np.ndarray  # F x 2

    @classmethod
    def from_poses(cls, poses) -> "_Cameras":
        return cls(np.stack([c.rotation for c in poses]),
                   np.array([c.scale for c in poses]),
                   np.stack([c.translation for c in poses]))

    def to_poses(self) -> list:
        return [CameraPose(self.rot[f], self.scale[f], self.trans[f]) for f in range(len(self.scale))]

    @property
    def proj(self) -> np.ndarray:
        return self.scale[:, None, None] * self.rot[:, :2]

    def copy(self) -> "_Cameras":
        return _Cameras(self.rot.copy(), self.scale.copy(), self.trans.copy())


def _cams(poses) -> _Cameras:
    return poses if isinstance(poses, _Cameras) else _Cameras.from_poses(poses)


# ---------------------------------------------------------------------------
# energy


def frame_shapes(model: ShapeModel, identity, expressions) -> np.ndarray:
    """Landmark shapes for every frame, F x 68 x 3."""
    base = model.landmark_mean + model.landmark_identity_basis @ identity
    return base[None] + np.einsum("kdn,fn->fkd", model.landmark_expression_basis, expressions)


def frame_residuals(model, identity, expressions, poses, frames) -> np.ndarray:
    cams = _cams(poses)
    shapes = frame_shapes(model, identity, expressions)
    return np.einsum("fij,fkj->fki", cams.proj, shapes) + cams.trans[:, None, :] - frames


def _frame_costs(shapes, cams: _Cameras, frames, valid) -> np.ndarray:
    res = np.einsum("fij,fkj->fki", cams.proj, shapes) + cams.trans[:, None, :] - frames
    return np.where(valid, np.sum(res * res, axis=(1, 2)), 0.0)


def energy_terms(model, seq: LandmarkSequence, config: FitConfig, identity, expressions, poses) -> dict:
    cams = _cams(poses)
    costs = _frame_costs(frame_shapes(model, identity, expressions), cams, seq.frames, seq.valid)
    diffs = np.diff(expressions, axis=0)
    terms = {
        "data": float(costs.sum()),
        "identity": config.lambda_identity * float(identity @ identity),
        "expression": config.lambda_expression * float(np.sum(expressions * expressions)),
        "temporal": config.lambda_temporal * float(np.sum(diffs * diffs)),
    }
    terms["total"] = terms["data"] + terms["identity"] + terms["expression"] + terms["temporal"]
    return terms


def total_energy(model, seq, config, identity, expressions, poses) -> float:
    return energy_terms(model, seq, config, identity, expressions, poses)["total"]


# ---------------------------------------------------------------------------
# linear algebra helpers


def _contract(gram: np.ndarray, tensor: np.ndarray) -> np.ndarray:
    """``sum_ab gram[f, a, b] * tensor[a, b]`` as one matrix product, F x n x m."""
    n_f = gram.shape[0]
    return (gram.reshape(n_f, 9) @ tensor.reshape(9, -1)).reshape(n_f, *tensor.shape[2:])


def _spd_solve(a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise SolverError(f"{what} matrix is not positive definite") from exc
    diag = np.diag(factor[0])
    cond_est = (diag.max() / diag.min()) ** 2
    if cond_est > CONDITION_WARN:
        log.info("%s matrix poorly conditioned (estimate %.2e)", what, cond_est)
    return linalg.cho_solve(factor, b)


def _to_banded(blocks: np.ndarray, coupled: np.ndarray, coupling: float) -> np.ndarray:
    """Upper banded storage of a block-tridiagonal SPD matrix.

    ``blocks`` are the F diagonal b x b blocks; consecutive blocks are linked
    by ``-coupling`` on the within-block indices ``coupled`` (a diagonal
    off-diagonal block), which puts every nonzero within bandwidth b.
    """
    n_f, b, _ = blocks.shape
    ab = np.zeros((b + 1, n_f * b))
    idx = np.arange(b)
    starts = np.arange(n_f)[:, None] * b
    for off in range(b):
        cols = (starts + idx[off:][None, :]).ravel()
        ab[b - off, cols] = blocks[:, idx[:b - off], idx[off:]].ravel()
    if n_f > 1 and coupling:
        cols = (starts[1:] + coupled[None, :]).ravel()
        ab[0, cols] = -coupling
    return ab


def _banded_factor(ab: np.ndarray, what: str):
    """Upper banded Cholesky factor in the ``(cb, lower)`` form ``cho_solve_banded`` takes."""
    try:
        return linalg.cholesky_banded(ab, lower=False, check_finite=True), False
    except linalg.LinAlgError as exc:
        raise SolverError(f"{what} system is not positive definite") from exc


def _temporal_degree(n_f: int) -> np.ndarray:
    degree = np.zeros(n_f)
    if n_f > 1:
        degree[:-1] += 1
        degree[1:] += 1
    return degree


def _temporal_gradient(expressions: np.ndarray) -> np.ndarray:
    """``D^T D e`` for the first-difference operator D along frames."""
    g = np.zeros_like(expressions)
    d = np.diff(expressions, axis=0)
    g[:-1] -= d
    g[1:] += d
    return g


# ---------------------------------------------------------------------------
# block updates


def solve_identity(model, seq, config, expressions, poses) -> np.ndarray:
    """Exact ridge minimiser of E over the identity with everything else fixed."""
    cams = _cams(poses)
    valid = seq.valid
    p, t = cams.proj[valid], cams.trans[valid]
    gram = np.einsum("fia,fib->ab", p, p)
    h = _contract(gram[None], model.landmark_identity_gram)[0]
    h[np.diag_indices_from(h)] += config.lambda_identity
    base = model.landmark_mean[None] + np.einsum(
        "kdn,fn->fkd", model.landmark_expression_basis, expressions[valid])
    r = np.einsum("fij,fkj->fki", p, base) + t[:, None, :] - seq.frames[valid]
    back = np.einsum("fia,fki->ka", p, r)
    g = np.einsum("kan,ka->n", model.landmark_identity_basis, back)
    return _spd_solve(h, -g, "identity normal")


def _expression_system(model, seq, config, identity, cams: _Cameras):
    n_e = model.n_expression
    valid = seq.valid.astype(np.float64)
    p = cams.proj
    gram = np.einsum("fia,fib->fab", p, p) * valid[:, None, None]
    blocks = _contract(gram, model.landmark_expression_gram)
    base = model.landmark_mean + model.landmark_identity_basis @ identity
    r = np.einsum("fij,kj->fki", p, base) + cams.trans[:, None, :] - seq.frames
    r[~seq.valid] = 0.0
    back = np.einsum("fia,fki->fka", p, r)
    rhs = -np.einsum("kan,fka->fn", model.landmark_expression_basis, back)
    idx = np.arange(n_e)
    diag = config.lambda_expression + config.lambda_temporal * _temporal_degree(seq.num_frames)
    blocks[:, idx, idx] += diag[:, None]
    ab = _to_banded(blocks, idx, config.lambda_temporal)
    return ab, rhs.ravel(), gram


def solve_expressions(model, seq, config, identity, poses) -> np.ndarray:
    """Exact joint minimiser over every frame's expression (banded SPD solve)."""
    ab, rhs, _ = _expression_system(model, seq, config, identity, _cams(poses))
    sol = linalg.cho_solve_banded(_banded_factor(ab, "expression"), rhs)
    return sol.reshape(seq.num_frames, model.n_expression)


def solve_shape(model, seq, config, poses) -> tuple[np.ndarray, np.ndarray]:
    """Exact minimiser over identity and all expressions together, cameras fixed.

    The normal matrix is an arrowhead: a dense identity block bordering the
    banded expression block. Expressions are eliminated through the Schur
    complement so the cost stays linear in the number of frames.
    """
    cams = _cams(poses)
    n_f, n_e, n_i = seq.num_frames, model.n_expression, model.n_identity
    ab, rhs_e, gram = _expression_system(model, seq, config, np.zeros(n_i), cams)
    factor = _banded_factor(ab, "expression")

    h_ii = _contract(gram.sum(axis=0)[None], model.landmark_identity_gram)[0]
    h_ii[np.diag_indices_from(h_ii)] += config.lambda_identity
    h_ie = np.moveaxis(_contract(gram, model.landmark_cross_gram), 0, 1).reshape(n_i, n_f * n_e)

    p = cams.proj
    r = np.einsum("fij,kj->fki", p, model.landmark_mean) + cams.trans[:, None, :] - seq.frames
    r[~seq.valid] = 0.0
    back = np.einsum("fia,fki->ka", p, r)
    rhs_i = -np.einsum("kan,ka->n", model.landmark_identity_basis, back)

    d_inv_b = linalg.cho_solve_banded(factor, h_ie.T)
    d_inv_r = linalg.cho_solve_banded(factor, rhs_e)
    schur = h_ii - h_ie @ d_inv_b
    identity = _spd_solve((schur + schur.T) / 2, rhs_i - h_ie @ d_inv_r, "identity Schur complement")
    expressions = d_inv_r - d_inv_b @ identity
    return identity, expressions.reshape(n_f, n_e)


def update_poses(shapes, frames, valid, poses) -> tuple[_Cameras, np.ndarray]:
    """Camera block: per frame, never increases that frame's reprojection cost.

    Takes the better of the current camera and the closed-form estimate, then
    applies the monotone refinement. Returns the new cameras and the mask of
    frames whose closed-form estimate was degenerate.
    """
    cams = _cams(poses)
    rot, scale, trans, degenerate = estimate_poses(shapes, frames)
    candidate = _Cameras(rot, scale, trans)
    current_cost = _frame_costs(shapes, cams, frames, valid)
    cand_cost = _frame_costs(shapes, candidate, frames, valid)
    take = valid & ~degenerate & (cand_cost < current_cost)
    best = cams.copy()
    best.rot[take], best.scale[take], best.trans[take] = rot[take], scale[take], trans[take]
    best_cost = np.where(take, cand_cost, current_cost)

    r_rot, r_scale, r_trans = refine_poses(best.rot, best.scale, shapes, frames)
    refined = _Cameras(r_rot, r_scale, r_trans)
    improve = valid & (_frame_costs(shapes, refined, frames, valid) < best_cost)
    best.rot[improve], best.scale[improve], best.trans[improve] = (
        r_rot[improve], r_scale[improve], r_trans[improve])
    return best, degenerate


def _rodrigues(omega: np.ndarray) -> np.ndarray:
    """Batched exponential map of F x 3 rotation vectors."""
    theta = np.linalg.norm(omega, axis=1)
    k = np.zeros((omega.shape[0], 3, 3))
    k[:, 0, 1], k[:, 0, 2] = -omega[:, 2], omega[:, 1]
    k[:, 1, 0], k[:, 1, 2] = omega[:, 2], -omega[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -omega[:, 1], omega[:, 0]
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24, (1 - np.cos(safe)) / safe**2)
    return np.eye(3) + a[:, None, None] * k + b[:, None, None] * (k @ k)


def _gauss_newton_system(model, seq, config, identity, expressions, cams: _Cameras):
    """Normal equations of the linearised energy over (cameras, expressions, identity).

    Per-frame unknowns are ordered [rotation (3), scale, translation (2),
    expression (n_e)]; the identity borders them.
    """
    n_f, n_e = expressions.shape
    valid = seq.valid
    vmask = valid.astype(np.float64)
    p = cams.proj
    shapes = frame_shapes(model, identity, expressions)
    rotated = np.einsum("fij,fkj->fki", cams.rot, shapes)
    res = cams.scale[:, None, None] * rotated[:, :, :2] + cams.trans[:, None, :] - seq.frames
    res[~valid] = 0.0

    s = cams.scale[:, None]
    y1, y2, y3 = rotated[..., 0], rotated[..., 1], rotated[..., 2]
    jp = np.zeros((n_f, NUM_LANDMARKS, 2, POSE_DIM))
    # d/d omega of s * (omega x Y)[:2]
    jp[:, :, 0, 1], jp[:, :, 0, 2] = s * y3, -s * y2
    jp[:, :, 1, 0], jp[:, :, 1, 2] = -s * y3, s * y1
    jp[:, :, 0, 3], jp[:, :, 1, 3] = rotated[..., 0], rotated[..., 1]
    jp[:, :, 0, 4] = 1.0
    jp[:, :, 1, 5] = 1.0
    jp *= vmask[:, None, None, None]

    gram = np.einsum("fia,fib->fab", p, p) * vmask[:, None, None]
    je = p[:, None] @ model.landmark_expression_basis[None]
    back_p = np.swapaxes(p, 1, 2)[:, None] @ jp  # P^T J_pose, F x K x 3 x 6

    b = POSE_DIM + n_e
    blocks = np.zeros((n_f, b, b))
    blocks[:, :POSE_DIM, :POSE_DIM] = np.einsum("fkip,fkiq->fpq", jp, jp)
    cross_pe = np.swapaxes(jp.reshape(n_f, -1, POSE_DIM), 1, 2) @ je.reshape(n_f, -1, n_e)
    blocks[:, :POSE_DIM, POSE_DIM:] = cross_pe
    blocks[:, POSE_DIM:, :POSE_DIM] = np.swapaxes(cross_pe, 1, 2)
    e_idx = np.arange(POSE_DIM, b)
    blocks[:, POSE_DIM:, POSE_DIM:] = _contract(gram, model.landmark_expression_gram)
    blocks[:, e_idx, e_idx] += (config.lambda_expression
                                + config.lambda_temporal * _temporal_degree(n_f))[:, None]

    grad = np.zeros((n_f, b))
    grad[:, :POSE_DIM] = np.einsum("fkip,fki->fp", jp, res)
    back_r = np.einsum("fia,fki->fka", p, res)
    grad[:, POSE_DIM:] = (np.einsum("kan,fka->fn", model.landmark_expression_basis, back_r)
                          + config.lambda_expression * expressions
                          + config.lambda_temporal * _temporal_gradient(expressions))

    h_ii = _contract(gram.sum(axis=0)[None], model.landmark_identity_gram)[0]
    h_ii[np.diag_indices_from(h_ii)] += config.lambda_identity
    border = np.zeros((model.n_identity, n_f, b))
    border[:, :, :POSE_DIM] = (model.landmark_identity_basis.reshape(-1, model.n_identity).T
                                  @ np.moveaxis(back_p, 0, 2).reshape(-1, n_f * POSE_DIM)).reshape(-1, n_f, POSE_DIM)
    border[:, :, POSE_DIM:] = np.moveaxis(_contract(gram, model.landmark_cross_gram), 0, 1)
    grad_i = (np.einsum("kan,ka->n", model.landmark_identity_basis, back_r.sum(axis=0))
              + config.lambda_identity * identity)
    return blocks, e_idx, border, h_ii, grad, grad_i


def _gauss_newton_candidate(model, seq, config, identity, expressions, cams, system, damping, rigid=False):
    blocks, e_idx, border, h_ii, grad, grad_i = system
    n_f, b, _ = blocks.shape
    blocks = blocks.copy()
    h_ii = h_ii.copy()
    coupling = config.lambda_temporal
    if rigid:
        # Expressions frozen: decouple their unknowns so their step is exactly zero.
        blocks[:, e_idx, :] = 0.0
        blocks[:, :, e_idx] = 0.0
        blocks[:, e_idx, e_idx] = 1.0
        grad = grad.copy()
        grad[:, POSE_DIM:] = 0.0
        border = border.copy()
        border[:, :, POSE_DIM:] = 0.0
        coupling = 0.0
    diag_idx = np.arange(b)
    blocks[:, diag_idx, diag_idx] *= 1 + damping
    h_ii[np.diag_indices_from(h_ii)] *= 1 + damping
    # Cameras of frames without data stay put.
    invalid = ~seq.valid
    if invalid.any():
        pose_idx = np.arange(POSE_DIM)
        blocks[np.ix_(invalid, pose_idx, pose_idx)] = np.eye(POSE_DIM)
        blocks[np.ix_(invalid, pose_idx, e_idx)] = 0.0
        blocks[np.ix_(invalid, e_idx, pose_idx)] = 0.0
        grad = grad.copy()
        grad[invalid, :POSE_DIM] = 0.0

    ab = _to_banded(blocks, e_idx, coupling)
    factor = _banded_factor(ab, "Gauss-Newton")
    border = border.reshape(border.shape[0], n_f * b)
    d_inv_b = linalg.cho_solve_banded(factor, border.T)
    d_inv_g = linalg.cho_solve_banded(factor, grad.ravel())
    schur = h_ii - border @ d_inv_b
    step_i = _spd_solve((schur + schur.T) / 2, -(grad_i - border @ d_inv_g), "Gauss-Newton Schur complement")
    step = (-d_inv_g - d_inv_b @ step_i).reshape(n_f, b)

    new_scale = cams.scale + step[:, 3]
    if np.any(new_scale <= 0):
        return None
    new_rot = _rodrigues(step[:, :3]) @ cams.rot
    # re-orthonormalise against drift
    u, _, vt = np.linalg.svd(new_rot)
    new_rot = u @ vt
    new_cams = _Cameras(new_rot, new_scale, cams.trans + step[:, 4:6])
    return identity + step_i, expressions + step[:, POSE_DIM:], new_cams


def gauss_newton_step(model, seq, config, identity, expressions, cams, energy, damping=1e-4, tries=6,
                      rigid=False):
    """Damped Gauss-Newton step over all variables, kept only if it lowers the energy.

    With ``rigid`` the expressions are held fixed. Returns ``(identity,
    expressions, cameras, energy, damping)``; when no trial step helps, the
    inputs come back unchanged.
    """
    system = _gauss_newton_system(model, seq, config, identity, expressions, cams)
    for _ in range(tries):
        cand = _gauss_newton_candidate(model, seq, config, identity, expressions, cams, system, damping, rigid)
        if cand is not None:
            new_energy = total_energy(model, seq, config, *cand)
            if new_energy < energy:
                return (*cand, new_energy, max(damping / 10, 1e-12))
        damping *= 10
    return identity, expressions, cams, energy, damping


def _relative_decrease(before: float, after: float) -> float:
    return (before - after) / max(before, np.finfo(float).tiny)


def _check_monotone(before: float, after: float, block: str) -> None:
    if after > before * (1 + ENERGY_RTOL) + ENERGY_ATOL:
        raise SolverError(f"energy increased in {block} update: {before!r} -> {after!r}")


# ---------------------------------------------------------------------------
# public operations


def _check_inputs(model: ShapeModel, seq: LandmarkSequence) -> None:
    if not isinstance(seq, LandmarkSequence):
        raise ContractError("expected a LandmarkSequence")
    if not seq.valid.any():
        raise InsufficientDataError(f"sequence {seq.source_id!r} has no valid frames")


def _initial_cameras(model, seq, valid) -> _Cameras:
    shapes = np.broadcast_to(model.landmark_mean, (seq.num_frames, NUM_LANDMARKS, 3))
    frames = np.where(valid[:, None, None], seq.frames, 0.0)
    rot, scale, trans, degenerate = estimate_poses(shapes, frames)
    valid &= ~degenerate
    if not valid.any():
        raise DataError(f"pose estimation degenerate on every frame of {seq.source_id!r}")
    # Frames without data borrow the nearest valid camera.
    good = np.flatnonzero(valid)
    nearest = good[np.argmin(np.abs(np.arange(seq.num_frames)[:, None] - good[None, :]), axis=1)]
    return _Cameras(rot[nearest], scale[nearest], trans[nearest])


def _init(model, seq, config, polish=False):
    valid = seq.valid.copy()
    cams = _initial_cameras(model, seq, valid)
    # Invalid frames may hold NaN; zero them so no pose solve ever sees one.
    work = LandmarkSequence(np.where(valid[:, None, None], seq.frames, 0.0), valid, seq.source_id)
    identity = np.zeros(model.n_identity)
    zeros = np.zeros((seq.num_frames, model.n_expression))
    energy = total_energy(model, work, config, identity, zeros, cams)
    damping = 1e-4
    for _ in range(int(config.outer_iterations)):
        start = energy
        identity = solve_identity(model, work, config, zeros, cams)
        cams, _ = update_poses(frame_shapes(model, identity, zeros), work.frames, valid, cams)
        energy = total_energy(model, work, config, identity, zeros, cams)
        # Alternation alone crawls along the pose/identity valley; rigid
        # Gauss-Newton steps (expressions held at zero) converge much faster.
        for _ in range(GN_INNER_STEPS if polish else 0):
            before = energy
            identity, _, cams, energy, damping = gauss_newton_step(
                model, work, config, identity, zeros, cams, energy, damping, rigid=True)
            if _relative_decrease(before, energy) < config.convergence_tol:
                break
        if _relative_decrease(start, energy) < config.convergence_tol:
            break
    return identity, cams, work


def init_cameras(model: ShapeModel, seq: LandmarkSequence, config: FitConfig | None = None):
    """Rigid initialisation: alternate per-frame cameras and one shared identity.

    Expressions stay at zero. Frames whose camera cannot be estimated from
    the mean shape are dropped. Each alternation round is followed by rigid
    Gauss-Newton steps so the result is the converged rigid optimum.
    Returns ``(identity, poses)``.
    """
    config = config or FitConfig()
    _check_inputs(model, seq)
    identity, cams, _ = _init(model, seq, config, polish=True)
    return identity, cams.to_poses()


def fit_video(model: ShapeModel, seq: LandmarkSequence, config: FitConfig | None = None,
              check_monotone: bool = True) -> VideoAnnotation:
    """Fit identity, expressions and cameras to a whole landmark sequence.

    ``energy_history`` holds the energy at initialisation followed by the
    energy after every update: per cycle the camera block, the shape block
    and each Gauss-Newton step. The start is the plain alternation stage of
    ``init_cameras``; polishing the rigid fit first lets identity absorb
    expression under weak priors and can strand the joint fit.
    """
    config = config or FitConfig()
    _check_inputs(model, seq)
    identity, cams, work = _init(model, seq, config)
    valid = work.valid
    expressions = np.zeros((seq.num_frames, model.n_expression))

    energy = total_energy(model, work, config, identity, expressions, cams)
    history = [energy]
    damping = 1e-4
    for _ in range(int(config.outer_iterations)):
        cycle_start = energy

        cams, _ = update_poses(frame_shapes(model, identity, expressions), work.frames, valid, cams)
        e_pose = total_energy(model, work, config, identity, expressions, cams)

        identity, expressions = solve_shape(model, work, config, cams)
        e_shape = total_energy(model, work, config, identity, expressions, cams)

        if check_monotone:
            _check_monotone(cycle_start, e_pose, "camera")
            _check_monotone(e_pose, e_shape, "shape")
        history.extend([e_pose, e_shape])

        energy = e_shape
        for _ in range(GN_INNER_STEPS):
            before = energy
            identity, expressions, cams, energy, damping = gauss_newton_step(
                model, work, config, identity, expressions, cams, energy, damping)
            if check_monotone:
                _check_monotone(before, energy, "Gauss-Newton")
            history.append(energy)
            if _relative_decrease(before, energy) < config.convergence_tol:
                break
        if _relative_decrease(cycle_start, energy) < config.convergence_tol:
            break

    res = frame_residuals(model, identity, expressions, cams, seq.frames)
    dist = np.sqrt(np.sum(res * res, axis=2))
    return VideoAnnotation(
        identity=identity,
        expressions=expressions,
        poses=cams.to_poses(),
        mean_reprojection_px=float(dist[valid].mean()),
        source_id=seq.source_id,
        valid=valid,
        energy_history=history,
    )
