import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facexpr.camera import Similarity2D
from facexpr.errors import ContainerError, ContractError, RankDeficiencyError
from facexpr.fitting import fit_video
from facexpr.regressor import (SplitSpec, featurize, load_regressor, predict_features, regress_batch,
                               regress_expression, save_regressor, split_indices, template_stats,
                               train_regressor)
from facexpr.synth import gen_video, rotation_from_angles, stationary_std

from conftest import CORPUS_CONFIG
from oracles import bayes_expression_mse


def linear_data(m=200, d=12, k=4, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, d))
    w = rng.normal(size=(d, k))
    b = rng.normal(size=k)
    return x, x @ w + b + noise * rng.normal(size=(m, k)), w, b


def test_template_features_are_centered_template(regression_corpus):
    t = regression_corpus["template"]
    center, diag = template_stats(t)
    np.testing.assert_allclose(featurize(t, t), ((t - center) / diag).ravel(), atol=1e-12)
    assert diag == pytest.approx(np.hypot(*(t.max(0) - t.min(0))))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.2, 5.0), angle=st.floats(-3.1, 3.1))
def test_features_similarity_invariant(regression_corpus, seed, scale, angle):
    t = regression_corpus["template"]
    rng = np.random.default_rng(seed)
    x = t + 3.0 * rng.normal(size=t.shape)
    moved = Similarity2D(scale, angle, rng.normal(size=2) * 100).apply(x)
    np.testing.assert_allclose(featurize(moved, t), featurize(x, t), atol=1e-9)


def test_mirror_image_is_not_a_similarity(regression_corpus):
    t = regression_corpus["template"]
    x = t + np.random.default_rng(0).normal(size=t.shape)
    mirrored = x * (-1.0, 1.0)
    assert np.max(np.abs(featurize(mirrored, t) - featurize(x, t))) > 1e-3


def test_unregularised_fit_recovers_linear_map():
    x, y, w, b = linear_data()
    model = train_regressor(x, y, ridge_lambda=0.0)
    np.testing.assert_allclose(model.parameters["weights"], w, atol=1e-10)
    np.testing.assert_allclose(predict_features(model, x), y, atol=1e-10)
    assert model.training_report["test_mse"] < 1e-20


def test_zero_targets_give_zero_weights():
    x, _, _, _ = linear_data()
    model = train_regressor(x, np.zeros((200, 4)), ridge_lambda=0.1)
    assert np.all(model.parameters["weights"] == 0)
    assert np.all(predict_features(model, x[:3]) == 0)


def test_weight_norm_shrinks_with_lambda():
    x, y, _, _ = linear_data(noise=0.5)
    norms = [np.linalg.norm(train_regressor(x, y, ridge_lambda=lam).parameters["weights"])
             for lam in (0.0, 0.1, 1.0, 10.0, 100.0)]
    assert np.all(np.diff(norms) < 0)


def test_ridge_matches_normal_equations():
    x, y, _, _ = linear_data(noise=0.3, seed=2)
    lam = 2.5
    model = train_regressor(x, y, ridge_lambda=lam, split=SplitSpec(seed=4))
    train, _, _ = split_indices(200, SplitSpec(seed=4))
    xc = x[train] - x[train].mean(0)
    yc = y[train] - y[train].mean(0)
    w = np.linalg.solve(xc.T @ xc + lam * np.eye(x.shape[1]), xc.T @ yc)
    np.testing.assert_allclose(model.parameters["weights"], w, atol=1e-10)


def test_rank_deficiency_reported():
    x, y, _, _ = linear_data()
    x = np.hstack([x, x[:, :1]])
    with pytest.raises(RankDeficiencyError) as info:
        train_regressor(x, y, ridge_lambda=0.0)
    assert info.value.condition_number > 1e10
    train_regressor(x, y, ridge_lambda=1e-3)


@pytest.mark.parametrize("kwargs, message", [
    (dict(ridge_lambda=-1.0), "non-negative"),
    (dict(backend="cnn"), "backend"),
    (dict(backend="view_ridge"), "template_3d"),
])
def test_training_contract(kwargs, message):
    x, y, _, _ = linear_data()
    with pytest.raises(ContractError, match=message):
        train_regressor(x, y, **kwargs)


def test_too_few_samples():
    x, y, _, _ = linear_data(m=39)
    with pytest.raises(ContractError, match="at least 40"):
        train_regressor(x, y)


def test_split_sizes_and_disjointness():
    train, val, test = split_indices(1000, SplitSpec())
    assert (train.size, val.size, test.size) == (700, 150, 150)
    assert np.unique(np.concatenate([train, val, test])).size == 1000
    again = split_indices(1000, SplitSpec())
    assert all(np.array_equal(a, b) for a, b in zip((train, val, test), again))


def test_grouped_split_keeps_groups_whole():
    groups = np.repeat([f"g{k}" for k in range(20)], 7)
    parts = split_indices(groups.size, SplitSpec(seed=3), groups)
    seen = [set(groups[p]) for p in parts]
    assert not (seen[0] & seen[1] or seen[0] & seen[2] or seen[1] & seen[2])
    assert [len(s) for s in seen] == [14, 3, 3]


def test_split_spec_contract():
    with pytest.raises(ContractError):
        SplitSpec(train=0.9, val=0.2)


def test_constant_targets_predicted_everywhere(regression_corpus):
    c = regression_corpus
    mean = np.linspace(-1, 1, 28)
    targets = np.broadcast_to(mean, c["targets"].shape)
    model = train_regressor(c["features"][:500], targets[:500], template=c["template"])
    np.testing.assert_allclose(regress_expression(model, c["template"]), mean, atol=1e-12)


def test_raw_feature_model_refuses_landmarks():
    x, y, _, _ = linear_data(d=136)
    model = train_regressor(x, y)
    with pytest.raises(ContractError, match="template"):
        regress_expression(model, np.zeros((68, 2)))
    with pytest.raises(ContractError):
        regress_expression(model, np.zeros((67, 2)))


def test_save_load_round_trip(view_regressor, regression_corpus, tmp_path):
    path = tmp_path / "r.fxb"
    save_regressor(view_regressor, path)
    back = load_regressor(path)
    assert back.backend_tag == "view_ridge" and back.training_report == view_regressor.training_report
    x = regression_corpus["features"][:20]
    assert np.array_equal(predict_features(back, x), predict_features(view_regressor, x))


def test_load_rejects_other_containers(model, tmp_path):
    from facexpr.model import save_model

    save_model(model, tmp_path / "m.fxb")
    with pytest.raises(ContainerError):
        load_regressor(tmp_path / "m.fxb")


def test_corpus_held_out_mse(regression_corpus, view_regressor):
    assert regression_corpus["stats"].kept == 100
    report = view_regressor.training_report
    assert report["test_mse"] < 0.02 and report["val_mse"] < 0.02
    assert report["n_train"] + report["n_val"] + report["n_test"] == len(regression_corpus["targets"])


def test_view_backend_beats_plain_ridge(regression_corpus, view_regressor):
    c = regression_corpus
    plain = train_regressor(c["features"], c["targets"], ridge_lambda=0.03, template=c["template"],
                            groups=c["groups"])
    assert view_regressor.training_report["test_mse"] < plain.training_report["test_mse"]


def test_bayes_oracle_matches_monte_carlo(model):
    """The posterior-mean estimator attains the oracle's error on simulated frames."""
    rng = np.random.default_rng(0)
    rot, scale, var, sigma = rotation_from_angles(20, 5, 0), 90.0, 0.25 ** 2, 1.0
    proj = scale * rot[:2]
    a = np.einsum("ij,kjn->kin", proj, model.landmark_identity_basis).reshape(-1, model.n_identity)
    b = np.einsum("ij,kjn->kin", proj, model.landmark_expression_basis).reshape(-1, model.n_expression)
    cov = var * b @ b.T + a @ a.T + sigma ** 2 * np.eye(b.shape[0])
    gain = var * np.linalg.solve(cov, b).T
    n = 4000
    e = np.sqrt(var) * rng.normal(size=(n, model.n_expression))
    obs = (rng.normal(size=(n, model.n_identity)) @ a.T + e @ b.T + sigma * rng.normal(size=(n, b.shape[0])))
    err = np.mean(np.sum((obs @ gain.T - e) ** 2, axis=1))
    _, rms = bayes_expression_mse(model, rot, scale, var, sigma)
    assert np.sqrt(err) == pytest.approx(rms, rel=0.03)


def test_single_frame_error_floor_exceeds_0_15(model):
    """No single-frame predictor gets within 0.15 l2 of the expression under unknown identity."""
    var = stationary_std(CORPUS_CONFIG) ** 2
    for yaw in (-30.0, 0.0, 30.0):
        _, rms = bayes_expression_mse(model, rotation_from_angles(yaw, 0, 0), CORPUS_CONFIG.camera_scale, var, 1.0)
        assert rms > 0.15
    _, known = bayes_expression_mse(model, rotation_from_angles(0, 0, 0), CORPUS_CONFIG.camera_scale, var, 1.0,
                                    identity_known=True)
    assert known < 0.15


@pytest.mark.xfail(strict=True, reason="single-frame l2 floor is about 0.2 with unknown identity")
def test_prediction_within_0_15_of_fit(model, view_regressor):
    dist = []
    for seed in range(3):
        seq, _ = gen_video(model, CORPUS_CONFIG, seed=9000 + seed)
        fitted = fit_video(model, seq)
        dist.append(np.linalg.norm(regress_batch(view_regressor, seq.frames) - fitted.expressions, axis=1))
    assert np.mean(np.concatenate(dist)) <= 0.15
