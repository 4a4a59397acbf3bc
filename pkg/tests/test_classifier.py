import itertools

import numpy as np
import pytest

from facexpr.classifier import (EcocModel, confusion_matrix, cross_validate, format_confusion,
                                load_classifier, one_vs_all, predict, predict_batch, save_classifier,
                                select_C, stratified_folds, train_ecoc)
from facexpr.errors import ContainerError, ContractError, TrainingError
from facexpr.svm import train_binary_svm
from facexpr.synth import SynthConfig, gen_emotion_dataset


@pytest.fixture(scope="module")
def clusters():
    return gen_emotion_dataset(SynthConfig(num_classes=7, n_e=10, samples_per_class=20, num_subjects=10), seed=1)


def test_one_vs_all_matrix():
    m = one_vs_all(3)
    assert m.tolist() == [[1, -1, -1], [-1, 1, -1], [-1, -1, 1]]


def test_two_classes_decode_like_one_svm():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 3))
    labels = (x[:, 0] + 0.3 * rng.normal(size=40) > 0).astype(int)
    model = train_ecoc(x, labels, C_svm=1.0)
    svm = train_binary_svm(x, np.where(labels == 0, 1.0, -1.0), 1.0)
    np.testing.assert_array_equal(model.weights[1], -model.weights[0])
    test = rng.normal(size=(200, 3))
    np.testing.assert_array_equal(predict_batch(model, test), np.where(svm.decision(test) >= 0, 0, 1))


def test_decoding_matches_brute_force():
    rng = np.random.default_rng(1)
    model = EcocModel(one_vs_all(4), rng.normal(size=(4, 2)), rng.normal(size=4), 1.0, list("abcd"))
    # integer grid makes exact ties common
    x = np.array(list(itertools.product(range(-3, 4), repeat=2)), dtype=float) * 0.5
    model.weights = np.round(model.weights)
    model.biases = np.round(model.biases)
    for row in x:
        s = model.weights @ row + model.biases
        losses = [sum(max(0.0, 1 - model.coding_matrix[c, l] * s[l]) for l in range(4)) for c in range(4)]
        best = min(losses)
        expected = min(c for c in range(4) if losses[c] == best)
        label, got = predict(model, row)
        assert label == expected
        np.testing.assert_allclose(got, losses)
    assert predict_batch(model, x).tolist() == [predict(model, r)[0] for r in x]


def test_training_accuracy_on_separated_clusters(clusters):
    model = train_ecoc(clusters.features, clusters.labels, C_svm=1.0)
    assert np.mean(predict_batch(model, clusters.features) == clusters.labels) == 1.0
    assert model.num_classes == 7 and model.weights.shape == (7, 10)


def test_label_permutation_equivariance(clusters):
    perm = np.random.default_rng(2).permutation(7)
    a = train_ecoc(clusters.features, clusters.labels)
    b = train_ecoc(clusters.features, perm[clusters.labels])
    probe = clusters.features + 0.5
    np.testing.assert_array_equal(predict_batch(b, probe), perm[predict_batch(a, probe)])


def test_missing_class_rejected(clusters):
    with pytest.raises(TrainingError, match=r"\[7\]"):
        train_ecoc(clusters.features, clusters.labels, num_classes=8)
    with pytest.raises(TrainingError):
        train_ecoc(clusters.features[:5], np.zeros(5, int))
    with pytest.raises(ContractError):
        train_ecoc(clusters.features, clusters.labels - 1)
    with pytest.raises(ContractError):
        train_ecoc(clusters.features, clusters.labels.astype(float))


def test_duplicate_coding_rows_rejected():
    with pytest.raises(ContractError):
        EcocModel(np.ones((2, 2)), np.zeros((2, 3)), np.zeros(2), 1.0, ["a", "b"])


def test_stratified_folds_balance_labels():
    labels = np.repeat(np.arange(3), [10, 20, 30])
    folds = stratified_folds(labels, 5, np.random.default_rng(0))
    assert np.array_equal(np.sort(np.concatenate(folds)), np.arange(60))
    for f in folds:
        assert np.bincount(labels[f], minlength=3).tolist() == [2, 4, 6]


def test_grouped_folds_keep_subjects_whole(clusters):
    folds = stratified_folds(clusters.labels, 5, np.random.default_rng(0), clusters.subject_ids)
    owner = {}
    for k, f in enumerate(folds):
        for s in set(clusters.subject_ids[f]):
            assert owner.setdefault(s, k) == k
    assert sum(len(f) for f in folds) == clusters.labels.size
    with pytest.raises(ContractError, match="subjects"):
        stratified_folds(clusters.labels, 11, np.random.default_rng(0), clusters.subject_ids)


def test_select_C_prefers_smallest_on_ties(clusters):
    c, scores = select_C(clusters.features, clusters.labels, 7, grid=(10.0, 1.0, 0.1))
    assert c == min(k for k, v in scores.items() if v == max(scores.values()))


def test_cross_validation_confusion_counts(clusters):
    res = cross_validate(clusters.features, clusters.labels, k=5, grid=(1.0,))
    assert res.confusion.sum() == clusters.labels.size
    assert res.confusion.sum(axis=1).tolist() == [20] * 7
    assert res.fold_accuracies.size == 5 and res.mean == pytest.approx(res.fold_accuracies.mean())
    assert "mean accuracy" in res.summary()
    with pytest.raises(ContractError):
        cross_validate(clusters.features, clusters.labels, grouped=True)
    with pytest.raises(ContractError):
        cross_validate(clusters.features, clusters.labels, k=1)


def test_confusion_matrix_and_format():
    cm = confusion_matrix([0, 1, 1, 2], [0, 2, 1, 2], 3)
    assert cm.tolist() == [[1, 0, 0], [0, 1, 1], [0, 0, 1]]
    text = format_confusion(cm, ["neutral", "happy", "sad"])
    assert text.splitlines()[0].startswith("true\\pred") and "happy" in text


def test_save_load_round_trip(clusters, tmp_path):
    model = train_ecoc(clusters.features, clusters.labels, class_names=[f"c{k}" for k in range(7)])
    save_classifier(model, tmp_path / "c.fxb")
    back = load_classifier(tmp_path / "c.fxb")
    assert back.class_names == model.class_names and back.C_svm == model.C_svm
    np.testing.assert_array_equal(predict_batch(back, clusters.features), predict_batch(model, clusters.features))
    (tmp_path / "bad.fxb").write_bytes(b"nope")
    with pytest.raises(ContainerError):
        load_classifier(tmp_path / "bad.fxb")


def test_binary_grouped_protocol_five_folds_ten_repeats():
    """Two classes, whole subjects held out: 50 folds and no subject-identity leakage."""
    from facexpr.synth import gen_confounded_dataset

    # dimension above the subject count: any subject labelling is linearly separable
    data = gen_confounded_dataset(20, 6, 24, 2, seed=5)
    res = cross_validate(data.features, data.labels, k=5, grouped=True, repeats=10, subjects=data.subject_ids,
                         grid=(1.0,))
    assert res.fold_accuracies.size == 50 and res.confusion.sum() == 10 * data.labels.size
    # 120 frames from 20 subjects: chance is 1/2, a 3 sd band on subject-level draws is about 0.34
    assert abs(res.mean - 0.5) < 0.34
    ungrouped = cross_validate(data.features, data.labels, k=5, repeats=1, grid=(1.0,))
    assert ungrouped.mean > 0.9
