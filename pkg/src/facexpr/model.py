"""Combined identity/expression shape model.

A shape is ``mean + U_id (sigma_id * i) + U_exp (sigma_exp * e)`` where the
coefficients ``i`` and ``e`` are measured in standard deviations of their
mode. Shapes are flat vectors ``[x1, y1, z1, ..., xN, yN, zN]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .container import read_container, write_container
from .errors import ContainerError, ContractError, RankDeficiencyError

NUM_LANDMARKS = 68
ORTHONORMAL_TOL = 1e-8
# Concatenated scaled basis is treated as rank deficient above this.
MAX_CONDITION = 1e12


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ShapeCoefficients:
    identity: np.ndarray
    expression: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "identity", _frozen(np.ravel(self.identity)))
        object.__setattr__(self, "expression", _frozen(np.ravel(self.expression)))
        if not (np.all(np.isfinite(self.identity)) and np.all(np.isfinite(self.expression))):
            raise ContractError("shape coefficients must be finite")

    @classmethod
    def zeros(cls, model: "ShapeModel") -> "ShapeCoefficients":
        return cls(np.zeros(model.n_identity), np.zeros(model.n_expression))


@dataclass(frozen=True, eq=False)
class ShapeModel:
    """Immutable statistical shape model; safe to share between threads."""

    mean_shape: np.ndarray
    identity_basis: np.ndarray
    identity_scales: np.ndarray
    expression_basis: np.ndarray
    expression_scales: np.ndarray
    landmark_vertex_ids: np.ndarray

    def __post_init__(self):
        for name in ("mean_shape", "identity_basis", "identity_scales",
                     "expression_basis", "expression_scales"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        ids = np.asarray(self.landmark_vertex_ids)
        if ids.dtype.kind == "f":
            if not np.all(np.isfinite(ids)) or np.any(ids != np.round(ids)):
                raise ContractError("landmark vertex ids must be integers")
        object.__setattr__(self, "landmark_vertex_ids", _frozen(ids, dtype=np.int64))

    @property
    def num_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def n_identity(self) -> int:
        return self.identity_basis.shape[1]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[1]

    def check_invariants(self) -> list[str]:
        """Return a list of violated invariants (empty when the model is valid)."""
        problems = []
        n3 = self.mean_shape.shape[0]
        if self.mean_shape.ndim != 1 or n3 == 0 or n3 % 3:
            return [f"mean_shape must be a non-empty vector of length 3N, got shape {self.mean_shape.shape}"]
        for label, basis, scales in (
            ("identity", self.identity_basis, self.identity_scales),
            ("expression", self.expression_basis, self.expression_scales),
        ):
            if basis.ndim != 2 or basis.shape[0] != n3 or basis.shape[1] < 1:
                problems.append(f"{label}_basis must be 3N x n with n >= 1, got {basis.shape}")
                continue
            if scales.shape != (basis.shape[1],):
                problems.append(f"{label}_scales must have length {basis.shape[1]}, got {scales.shape}")
            elif not np.all(scales > 0) or not np.all(np.isfinite(scales)):
                problems.append(f"{label}_scales must be strictly positive")
            if not np.all(np.isfinite(basis)):
                problems.append(f"{label}_basis has non-finite entries")
                continue
            dev = np.max(np.abs(basis.T @ basis - np.eye(basis.shape[1])))
            if dev > ORTHONORMAL_TOL:
                problems.append(f"{label}_basis is not orthonormal (max |U^T U - I| = {dev:.3e})")
        if not np.all(np.isfinite(self.mean_shape)):
            problems.append("mean_shape has non-finite entries")
        ids = self.landmark_vertex_ids
        if ids.shape != (NUM_LANDMARKS,):
            problems.append(f"expected {NUM_LANDMARKS} landmark vertex ids, got shape {ids.shape}")
        elif np.any(ids < 0) or np.any(ids >= self.num_vertices):
            problems.append("landmark vertex ids out of range [0, N)")
        elif np.unique(ids).size != ids.size:
            problems.append("landmark vertex ids are not unique")
        return problems

    def validate(self) -> "ShapeModel":
        problems = self.check_invariants()
        if problems:
            raise ContractError("invalid shape model: " + "; ".join(problems))
        return self

    @cached_property
    def scaled_identity_basis(self) -> np.ndarray:
        return _frozen(self.identity_basis * self.identity_scales)

    @cached_property
    def scaled_expression_basis(self) -> np.ndarray:
        return _frozen(self.expression_basis * self.expression_scales)

    @cached_property
    def _landmark_rows(self) -> np.ndarray:
        return (3 * self.landmark_vertex_ids[:, None] + np.arange(3)).ravel()

    @cached_property
    def landmark_mean(self) -> np.ndarray:
        """Mean shape restricted to the landmarks, 68 x 3."""
        return _frozen(self.mean_shape[self._landmark_rows].reshape(NUM_LANDMARKS, 3))

    @cached_property
    def landmark_identity_basis(self) -> np.ndarray:
        """Scaled identity basis restricted to landmarks, 68 x 3 x n_i."""
        rows = self.scaled_identity_basis[self._landmark_rows]
        return _frozen(rows.reshape(NUM_LANDMARKS, 3, self.n_identity))

    @cached_property
    def landmark_expression_basis(self) -> np.ndarray:
        """Scaled expression basis restricted to landmarks, 68 x 3 x n_e."""
        rows = self.scaled_expression_basis[self._landmark_rows]
        return _frozen(rows.reshape(NUM_LANDMARKS, 3, self.n_expression))

    @cached_property
    def landmark_identity_gram(self) -> np.ndarray:
        """``T[a, b] = sum_k B_k[a]^T B_k[b]`` for the landmark identity basis, 3 x 3 x n_i x n_i.

        Contracting with ``P^T P`` of a camera gives that camera's normal matrix.
        """
        b = self.landmark_identity_basis
        return _frozen(np.einsum("kan,kbm->abnm", b, b, optimize=True))

    @cached_property
    def landmark_expression_gram(self) -> np.ndarray:
        b = self.landmark_expression_basis
        return _frozen(np.einsum("kan,kbm->abnm", b, b, optimize=True))

    @cached_property
    def landmark_cross_gram(self) -> np.ndarray:
        """Identity/expression coupling, 3 x 3 x n_i x n_e."""
        return _frozen(np.einsum("kan,kbm->abnm", self.landmark_identity_basis,
                                 self.landmark_expression_basis, optimize=True))


def _check_coeffs(model: ShapeModel, coeffs: ShapeCoefficients) -> None:
    if coeffs.identity.shape != (model.n_identity,):
        raise ContractError(
            f"identity coefficients have length {coeffs.identity.size}, model expects {model.n_identity}"
        )
    if coeffs.expression.shape != (model.n_expression,):
        raise ContractError(
            f"expression coefficients have length {coeffs.expression.size}, model expects {model.n_expression}"
        )


def synthesize(model: ShapeModel, coeffs: ShapeCoefficients) -> np.ndarray:
    _check_coeffs(model, coeffs)
    return (model.mean_shape
            + model.scaled_identity_basis @ coeffs.identity
            + model.scaled_expression_basis @ coeffs.expression)


def landmarks_3d(model: ShapeModel, coeffs: ShapeCoefficients) -> np.ndarray:
    """The 68 landmark vertices of the synthesized shape, as a 68 x 3 array."""
    _check_coeffs(model, coeffs)
    return (model.landmark_mean
            + model.landmark_identity_basis @ coeffs.identity
            + model.landmark_expression_basis @ coeffs.expression)


def project_coefficients(model: ShapeModel, shape, return_residual: bool = False):
    """Least-squares coefficients of a full shape vector.

    Solves jointly for identity and expression since the two bases need not
    be mutually orthogonal. With ``return_residual`` the Euclidean norm of the
    unexplained part of ``shape`` is returned as well.
    """
    shape = np.asarray(shape, dtype=np.float64)
    if shape.shape != model.mean_shape.shape:
        raise ContractError(f"shape has length {shape.size}, model expects {model.mean_shape.size}")
    basis = np.hstack([model.scaled_identity_basis, model.scaled_expression_basis])
    u, s, vt = np.linalg.svd(basis, full_matrices=False)
    cond = s[0] / s[-1] if s[-1] > 0 else np.inf
    if cond > MAX_CONDITION:
        raise RankDeficiencyError(
            f"concatenated scaled basis is rank deficient (condition number {cond:.3e})",
            condition_number=cond,
        )
    centered = shape - model.mean_shape
    sol = vt.T @ ((u.T @ centered) / s)
    coeffs = ShapeCoefficients(sol[:model.n_identity], sol[model.n_identity:])
    if return_residual:
        return coeffs, float(np.linalg.norm(centered - basis @ sol))
    return coeffs


def condition_numbers(model: ShapeModel) -> dict:
    """Condition numbers of the bases used by the fitter and by projection."""
    def cond(a):
        s = np.linalg.svd(a, compute_uv=False)
        return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")

    id_l = model.landmark_identity_basis.reshape(-1, model.n_identity)
    exp_l = model.landmark_expression_basis.reshape(-1, model.n_expression)
    return {
        "identity_basis": cond(model.identity_basis),
        "expression_basis": cond(model.expression_basis),
        "scaled_joint_basis": cond(np.hstack([model.scaled_identity_basis, model.scaled_expression_basis])),
        "landmark_joint_basis": cond(np.hstack([id_l, exp_l])),
    }


_ARRAYS = ("mean_shape", "identity_basis", "identity_scales",
           "expression_basis", "expression_scales", "landmark_vertex_ids")


def save_model(model: ShapeModel, path) -> None:
    meta = {"N": model.num_vertices, "n_i": model.n_identity, "n_e": model.n_expression}
    arrays = {name: getattr(model, name) for name in _ARRAYS}
    arrays["landmark_vertex_ids"] = arrays["landmark_vertex_ids"].astype(np.float64)
    write_container(path, "shape_model", meta, arrays)


def load_model(path) -> ShapeModel:
    meta, arrays = read_container(path, expected_kind="shape_model")
    missing = [name for name in _ARRAYS if name not in arrays]
    if missing:
        raise ContainerError(f"{path}: missing arrays {missing}")
    try:
        model = ShapeModel(**{name: arrays[name] for name in _ARRAYS})
    except ContractError as exc:
        raise ContainerError(f"{path}: {exc}") from exc
    problems = model.check_invariants()
    for key, actual in (("N", model.num_vertices), ("n_i", model.n_identity), ("n_e", model.n_expression)):
        if meta.get(key) != str(actual):
            problems.append(f"metadata {key}={meta.get(key)} disagrees with arrays ({actual})")
    if problems:
        raise ContainerError(f"{path}: invariant violation: " + "; ".join(problems))
    return model
