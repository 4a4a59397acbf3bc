"""Single-frame expression regression from template-registered landmarks.

Two closed-form backends share one contract:

``ridge``
    ``e = W^T (x - mean_x) + mean_e`` with a ridge penalty on ``W``.
``view_ridge``
    The same ridge, applied to ``x`` expanded by a view descriptor ``v``:
    ``[x, x v_j, x v_j v_k, 1, v]``. ``v`` is the viewing direction of the
    scaled-orthographic camera that best maps the template's 3D landmarks onto
    the registered landmarks, so the learned map can bend with head rotation
    out of the image plane. It depends on the registered landmarks only, so
    similarity invariance is kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import estimate_poses, make_template, register_to_template
from .container import read_container, write_container
from .errors import ContainerError, ContractError, RankDeficiencyError
from .model import NUM_LANDMARKS, ShapeModel

FEATURE_DIM = 2 * NUM_LANDMARKS
BACKENDS = ("ridge", "view_ridge")
# Above this condition number an unregularised fit is refused.
MAX_CONDITION = 1e10


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    val: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.train < 1 and 0 <= self.val < 1 and self.train + self.val <= 1):
            raise ContractError("split fractions must satisfy 0 < train, 0 <= val, train + val <= 1")


@dataclass
class RegressorModel:
    backend_tag: str
    input_dim: int
    output_dim: int
    parameters: dict
    training_report: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backend_tag not in BACKENDS:
            raise ContractError(f"unknown regressor backend {self.backend_tag!r}")
        for name, value in self.parameters.items():
            if not np.all(np.isfinite(value)):
                raise ContractError(f"regressor parameter {name!r} is not finite")
        if self.parameters["weights"].shape[1] != self.output_dim:
            raise ContractError("weight matrix does not match output_dim")

    @property
    def template(self) -> np.ndarray:
        return self.parameters["template"]


def template_stats(template) -> tuple[np.ndarray, float]:
    t = np.asarray(template, dtype=np.float64)
    extent = t.max(axis=0) - t.min(axis=0)
    return t.mean(axis=0), float(np.hypot(*extent))


def featurize(landmarks, template) -> np.ndarray:
    """Register onto the template, center on it and divide by its bbox diagonal."""
    _, registered = register_to_template(landmarks, template)
    center, diagonal = template_stats(template)
    return ((registered - center) / diagonal).ravel()


def featurize_batch(frames, template) -> np.ndarray:
    return np.stack([featurize(f, template) for f in frames])


def default_template(model: ShapeModel) -> np.ndarray:
    return make_template(model.landmark_mean)


def view_directions(features, template_3d) -> np.ndarray:
    """Camera viewing direction (third rotation row) for each feature row, M x 3."""
    x = np.atleast_2d(features).reshape(-1, NUM_LANDMARKS, 2)
    pts = np.broadcast_to(np.asarray(template_3d, dtype=np.float64), (x.shape[0], NUM_LANDMARKS, 3))
    rot, _, _, _ = estimate_poses(pts, x)
    return rot[:, 2]


def _view_expand(features, views) -> np.ndarray:
    cols = [features]
    for j in range(3):
        cols.append(features * views[:, j:j + 1])
    for j in range(3):
        for k in range(j, 3):
            cols.append(features * (views[:, j:j + 1] * views[:, k:k + 1]))
    return np.hstack(cols + [views])


def _design(backend: str, features, parameters) -> np.ndarray:
    if backend == "ridge":
        return features
    return _view_expand(features, view_directions(features, parameters["template_3d"]))


def _ridge(z, targets, lam):
    z_mean, t_mean = z.mean(axis=0), targets.mean(axis=0)
    u, s, vt = np.linalg.svd(z - z_mean, full_matrices=False)
    if lam == 0:
        cond = s[0] / s[-1] if s[-1] > 0 else np.inf
        if cond > MAX_CONDITION:
            raise RankDeficiencyError(
                f"features are rank deficient (condition number {cond:.3e}); use ridge_lambda > 0",
                condition_number=cond)
    shrink = s / (s * s + lam)
    weights = vt.T @ (shrink[:, None] * (u.T @ (targets - t_mean)))
    return weights, z_mean, t_mean


def split_indices(num: int, split: SplitSpec, groups=None):
    """Seeded train/val/test index split; with ``groups`` whole groups move together."""
    rng = np.random.default_rng(split.seed)
    if groups is None:
        order = rng.permutation(num)
        n_train = int(round(split.train * num))
        n_val = int(round(split.val * num))
        return np.sort(order[:n_train]), np.sort(order[n_train:n_train + n_val]), np.sort(order[n_train + n_val:])
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    order = uniq[rng.permutation(uniq.size)]
    n_train = int(round(split.train * uniq.size))
    n_val = int(round(split.val * uniq.size))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(np.flatnonzero(np.isin(groups, p)) for p in parts)


def _mse(pred, target) -> float:
    return float(np.mean((pred - target) ** 2)) if len(target) else float("nan")


def train_regressor(features, targets, split: SplitSpec | None = None, ridge_lambda: float = 1e-3,
                    backend: str = "ridge", template=None, template_3d=None, groups=None) -> RegressorModel:
    """Fit a regressor on the training part of a seeded split.

    MSEs in the report are means over samples and coefficients. The
    ``view_ridge`` backend needs ``template_3d`` (the 68 x 3 landmarks the
    2D template was drawn from).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    split = split or SplitSpec()
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ContractError(f"features {x.shape} and targets {y.shape} must be M x d and M x n_e")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ContractError("features and targets must be finite")
    if x.shape[0] < 10 * y.shape[1]:
        raise ContractError(f"need at least {10 * y.shape[1]} samples, got {x.shape[0]}")
    if not ridge_lambda >= 0:
        raise ContractError("ridge_lambda must be non-negative")
    if backend not in BACKENDS:
        raise ContractError(f"unknown regressor backend {backend!r}")

    parameters = {}
    if template is not None:
        parameters["template"] = np.asarray(template, dtype=np.float64)
    if backend == "view_ridge":
        if template_3d is None or x.shape[1] != FEATURE_DIM:
            raise ContractError("view_ridge needs 136-dim landmark features and template_3d")
        parameters["template_3d"] = np.asarray(template_3d, dtype=np.float64)

    train, val, test = split_indices(x.shape[0], split, groups)
    if train.size == 0:
        raise ContractError("training split is empty")
    z = _design(backend, x, parameters)
    weights, z_mean, t_mean = _ridge(z[train], y[train], ridge_lambda)
    parameters.update(weights=weights, feature_mean=z_mean, target_mean=t_mean)

    pred = (z - z_mean) @ weights + t_mean
    report = {
        "backend": backend,
        "ridge_lambda": float(ridge_lambda),
        "train_mse": _mse(pred[train], y[train]),
        "val_mse": _mse(pred[val], y[val]),
        "test_mse": _mse(pred[test], y[test]),
        "epochs_or_iters": 1,
        "n_train": int(train.size),
        "n_val": int(val.size),
        "n_test": int(test.size),
        "mse_kind": "per-coefficient mean",
    }
    return RegressorModel(backend, x.shape[1], y.shape[1], parameters, report)


def predict_features(model: RegressorModel, features) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != model.input_dim:
        raise ContractError(f"expected {model.input_dim}-dim features, got {x.shape[1]}")
    p = model.parameters
    return (_design(model.backend_tag, x, p) - p["feature_mean"]) @ p["weights"] + p["target_mean"]


def regress_expression(model: RegressorModel, landmarks) -> np.ndarray:
    """Expression vector for one frame of 68 x 2 landmarks."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape != (NUM_LANDMARKS, 2):
        raise ContractError(f"landmarks must be 68 x 2, got {landmarks.shape}")
    if "template" not in model.parameters:
        raise ContractError("regressor has no template; it was trained on raw features")
    return predict_features(model, featurize(landmarks, model.template))[0]


def regress_batch(model: RegressorModel, frames) -> np.ndarray:
    return predict_features(model, featurize_batch(frames, model.template))


def save_regressor(model: RegressorModel, path) -> None:
    meta = {"backend_tag": model.backend_tag, "input_dim": model.input_dim, "output_dim": model.output_dim}
    meta.update({f"report.{k}": v for k, v in model.training_report.items()})
    write_container(path, "regressor", meta, {f"param.{k}": v for k, v in model.parameters.items()})


def load_regressor(path) -> RegressorModel:
    meta, arrays = read_container(path, expected_kind="regressor")
    try:
        report = {}
        for key, value in meta.items():
            if key.startswith("report."):
                name = key[len("report."):]
                try:
                    report[name] = int(value) if value.lstrip("-").isdigit() else float(value)
                except ValueError:
                    report[name] = value
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        return RegressorModel(meta["backend_tag"], int(meta["input_dim"]), int(meta["output_dim"]),
                              params, report)
    except (KeyError, ValueError) as exc:
        raise ContainerError(f"{path}: malformed regressor container ({exc})") from exc
