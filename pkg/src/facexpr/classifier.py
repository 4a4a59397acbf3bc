"""One-vs-all ECOC over linear SVMs, with (grouped) stratified cross-validation.

Decoding: each class ``c`` gets the loss
``sum_l max(0, 1 - M[c, l] * (w_l.x + b_l))`` and the smallest loss wins;
ties go to the lowest class id.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import ContainerError, ContractError, TrainingError
from .svm import BinarySvm, train_binary_svm

C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


def one_vs_all(num_classes: int) -> np.ndarray:
    return 2.0 * np.eye(num_classes) - 1.0


@dataclass
class EcocModel:
    coding_matrix: np.ndarray
    weights: np.ndarray  # L x d
    biases: np.ndarray   # L
    C_svm: float
    class_names: list
    training_report: dict = field(default_factory=dict)

    def __post_init__(self):
        m = self.coding_matrix
        if len({tuple(r) for r in m}) != m.shape[0]:
            raise ContractError("coding matrix rows must be distinct")
        if self.weights.shape[0] != m.shape[1]:
            raise ContractError("one learner per coding column required")

    @property
    def num_classes(self) -> int:
        return self.coding_matrix.shape[0]

    def scores(self, x) -> np.ndarray:
        return np.atleast_2d(np.asarray(x, dtype=np.float64)) @ self.weights.T + self.biases

    def losses(self, x) -> np.ndarray:
        """Hinge decoding loss per class, N x C."""
        s = self.scores(x)
        return np.maximum(0.0, 1.0 - s[:, None, :] * self.coding_matrix[None]).sum(axis=2)


def _check_examples(x, labels):
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ContractError(f"features {x.shape} and labels {labels.shape} do not match")
    if not np.all(np.isfinite(x)):
        raise ContractError("features must be finite")
    if labels.size and (labels.dtype.kind not in "iu" or labels.min() < 0):
        raise ContractError("labels must be non-negative integers")
    return x, labels.astype(np.int64)


def train_ecoc(x, labels, C_svm: float = 1.0, num_classes: int | None = None, class_names=None) -> EcocModel:
    """One learner per one-vs-all column.

    A column that is the exact negation of an earlier one (the two columns
    when C = 2) reuses that learner negated, so the C = 2 model decodes
    exactly like one binary SVM.
    """
    x, labels = _check_examples(x, labels)
    num_classes = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    if num_classes < 2:
        raise TrainingError("need at least two classes")
    counts = np.bincount(labels, minlength=num_classes)
    if labels.max() >= num_classes:
        raise ContractError(f"label {labels.max()} outside [0, {num_classes})")
    missing = [c for c in range(num_classes) if counts[c] < 2]
    if missing:
        raise TrainingError(f"classes {missing} have fewer than 2 examples")
    coding = one_vs_all(num_classes)
    weights = np.zeros((coding.shape[1], x.shape[1]))
    biases = np.zeros(coding.shape[1])
    iterations = []
    for col in range(coding.shape[1]):
        mirror = [p for p in range(col) if np.array_equal(coding[:, p], -coding[:, col])]
        if mirror:
            weights[col], biases[col] = -weights[mirror[0]], -biases[mirror[0]]
            continue
        y = coding[labels, col]
        if np.all(y > 0) or np.all(y < 0):
            raise TrainingError(f"coding column {col} is one-sided on this data")
        svm: BinarySvm = train_binary_svm(x, y, C_svm)
        weights[col], biases[col] = svm.w, svm.b
        iterations.append(svm.iterations)
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
    report = {"C_svm": float(C_svm), "svm_iterations": iterations, "coding": "one-vs-all"}
    return EcocModel(coding, weights, biases, float(C_svm), names, report)


def predict(model: EcocModel, x):
    """``(label, per_class_losses)`` for one feature vector."""
    losses = model.losses(x)[0]
    return int(np.argmin(losses)), losses


def predict_batch(model: EcocModel, x) -> np.ndarray:
    # argmin returns the first minimum: lowest class id on ties
    return np.argmin(model.losses(x), axis=1)


def confusion_matrix(truth, predicted, num_classes: int) -> np.ndarray:
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(out, (np.asarray(truth), np.asarray(predicted)), 1)
    return out


def _deal(groups_by_label: dict, k: int, rng) -> list:
    """Shuffle each label's units and deal them round-robin into k folds."""
    folds = [[] for _ in range(k)]
    start = 0
    for label in sorted(groups_by_label):
        units = list(groups_by_label[label])
        for pos, idx in enumerate(rng.permutation(len(units))):
            folds[(start + pos) % k].append(units[idx])
        start = (start + len(units)) % k
    return folds


def stratified_folds(labels, k: int, rng, subjects=None) -> list:
    """Index arrays of k held-out folds.

    Without ``subjects`` samples are stratified by label. With ``subjects``
    whole subjects are dealt, stratified by each subject's majority label
    (ties to the lowest label).
    """
    labels = np.asarray(labels)
    if subjects is None:
        by_label = {c: np.flatnonzero(labels == c).tolist() for c in np.unique(labels)}
        return [np.sort(np.array(f, dtype=np.int64)) for f in _deal(by_label, k, rng)]
    subjects = np.asarray(subjects)
    uniq = sorted(set(subjects.tolist()))
    if len(uniq) < k:
        raise ContractError(f"grouped CV needs at least k={k} subjects, got {len(uniq)}")
    by_label = {}
    for s in uniq:
        counts = Counter(labels[subjects == s].tolist())
        top = max(counts.values())
        majority = min(c for c, n in counts.items() if n == top)
        by_label.setdefault(majority, []).append(s)
    folds = _deal(by_label, k, rng)
    return [np.flatnonzero(np.isin(subjects, f)) for f in folds]


def select_C(x, labels, num_classes, grid=C_GRID, inner_k: int = 3, rng=None, subjects=None) -> tuple[float, dict]:
    """Grid search by inner cross-validation; ties go to the smallest C."""
    rng = rng or np.random.default_rng(0)
    if subjects is not None:
        inner_k = min(inner_k, len(set(np.asarray(subjects).tolist())))
    inner_k = max(2, min(inner_k, int(np.bincount(labels).max())))
    folds = stratified_folds(labels, inner_k, rng, subjects)
    scores = {}
    for c in grid:
        correct = total = 0
        for held in folds:
            train = np.setdiff1d(np.arange(labels.size), held)
            if held.size == 0:
                continue
            try:
                model = train_ecoc(x[train], labels[train], c, num_classes)
            except TrainingError:
                continue
            correct += int(np.sum(predict_batch(model, x[held]) == labels[held]))
            total += held.size
        scores[c] = correct / total if total else -1.0
    best = max(scores.values())
    return min(c for c in grid if scores[c] == best), scores


@dataclass
class CvResult:
    fold_accuracies: np.ndarray
    mean: float
    std: float
    confusion: np.ndarray
    chosen_C: list
    grouped: bool

    def summary(self) -> str:
        lines = [f"folds: {self.fold_accuracies.size}  grouped: {self.grouped}",
                 f"mean accuracy: {self.mean:.4f}  std: {self.std:.4f}"]
        return "\n".join(lines)


def cross_validate(x, labels, k: int = 10, grouped: bool = False, repeats: int = 1, seed: int = 0,
                   subjects=None, grid=C_GRID, inner_k: int = 3, num_classes: int | None = None) -> CvResult:
    """Repeated (optionally subject-grouped) stratified k-fold CV with inner C selection."""
    x, labels = _check_examples(x, labels)
    if k < 2:
        raise ContractError("k must be at least 2")
    if repeats < 1:
        raise ContractError("repeats must be at least 1")
    if grouped and subjects is None:
        raise ContractError("grouped cross-validation needs subject ids")
    subjects = np.asarray(subjects) if grouped else None
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    rng = np.random.default_rng(seed)
    accs, chosen = [], []
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for _ in range(repeats):
        for held in stratified_folds(labels, k, rng, subjects):
            if held.size == 0:
                continue
            train = np.setdiff1d(np.arange(labels.size), held)
            inner_subjects = subjects[train] if grouped else None
            c, _ = select_C(x[train], labels[train], num_classes, grid, inner_k, rng, inner_subjects)
            model = train_ecoc(x[train], labels[train], c, num_classes)
            pred = predict_batch(model, x[held])
            confusion += confusion_matrix(labels[held], pred, num_classes)
            accs.append(float(np.mean(pred == labels[held])))
            chosen.append(c)
    accs = np.array(accs)
    return CvResult(accs, float(accs.mean()), float(accs.std()), confusion, chosen, grouped)


def format_confusion(confusion, class_names=None) -> str:
    """Labelled text grid; rows are true classes, columns predictions."""
    n = confusion.shape[0]
    names = [str(c) for c in (class_names or range(n))]
    width = max(6, max(len(s) for s in names) + 1, len(str(confusion.max())) + 1)
    head = "true\\pred".ljust(10) + "".join(s.rjust(width) for s in names)
    rows = [names[r].ljust(10) + "".join(str(v).rjust(width) for v in confusion[r]) for r in range(n)]
    return "\n".join([head] + rows)


def save_classifier(model: EcocModel, path) -> None:
    meta = {"C_svm": repr(model.C_svm), "class_names": json.dumps(model.class_names),
            "coding": model.training_report.get("coding", "one-vs-all")}
    arrays = {"coding_matrix": model.coding_matrix, "weights": model.weights, "biases": model.biases}
    write_container(path, "ecoc_classifier", meta, arrays)


def load_classifier(path) -> EcocModel:
    meta, arrays = read_container(path, expected_kind="ecoc_classifier")
    try:
        return EcocModel(arrays["coding_matrix"], arrays["weights"], arrays["biases"], float(meta["C_svm"]),
                         json.loads(meta["class_names"]), {"coding": meta.get("coding", "")})
    except (KeyError, ValueError, IndexError) as exc:
        raise ContainerError(f"{path}: malformed classifier container ({exc})") from exc
