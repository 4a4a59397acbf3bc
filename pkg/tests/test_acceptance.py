"""The ten acceptance criteria, each at its stated tolerance.

One PASS/FAIL line per criterion is printed in the terminal summary.
"""

import itertools
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from facexpr.camera import CameraPose, Similarity2D
from facexpr.classifier import cross_validate, predict_batch, train_ecoc
from facexpr.fitting import FitConfig, VideoAnnotation, fit_video
from facexpr.pipeline import PipelineConfig, annotate_corpus, auto_prune, track_from_sequence
from facexpr.regressor import featurize, predict_features, regress_batch, regress_expression
from facexpr.runner import LATENCY_BUDGET_MS, load_run_config, measure_latency, run_pipeline
from facexpr.splines import smooth_traces
from facexpr.svm import optimal_bias, train_binary_svm
from facexpr.synth import (SynthConfig, gen_confounded_dataset, gen_emotion_dataset, gen_emotion_frames,
                           gen_video, render_landmarks, rotation_from_angles, stationary_std,
                           video_prototypes)

from oracles import brute_force_svm_objective

pytestmark = pytest.mark.slow


def rotation_angle(a, b) -> float:
    return float(Rotation.from_matrix(a @ b.T).magnitude())


def assert_monotone(history):
    h = np.asarray(history)
    rise = np.diff(h)
    allowed = 1e-10 * np.abs(h[:-1]) + 1e-12
    assert np.all(rise <= allowed), f"energy rose by {rise.max():.3e}"


_fits = {}


def _noise_free_fits(model):
    if "clean" not in _fits:
        cfg = SynthConfig(pixel_noise_sigma=0.0, frames_per_video=100)
        fit_cfg = FitConfig(lambda_identity=1e-8, lambda_expression=1e-8, lambda_temporal=1e-8)
        start = time.perf_counter()
        runs = []
        for seed in range(20):
            seq, truth = gen_video(model, cfg, seed=seed)
            runs.append((fit_video(model, seq, fit_cfg), truth))
        _fits["clean"] = (runs, time.perf_counter() - start)
    return _fits["clean"]


def _noisy_fits(model):
    if "noisy" not in _fits:
        cfg = SynthConfig(pixel_noise_sigma=1.0, frames_per_video=100)
        _fits["noisy"] = [(fit_video(model, seq, FitConfig()), truth)
                          for seq, truth in (gen_video(model, cfg, seed=1000 + s) for s in range(20))]
    return _fits["noisy"]


@pytest.mark.acceptance(1, "noise-free recovery")
def test_noise_free_recovery(model, record_property):
    runs, seconds = _noise_free_fits(model)
    mse = max(np.mean((a.expressions - t.expressions) ** 2) for a, t in runs)
    angle = max(rotation_angle(p.rotation, q.rotation) for a, t in runs for p, q in zip(a.poses, t.poses))
    record_property("detail", f"max MSE {mse:.2e}, max pose error {angle:.2e} rad, {seconds:.1f} s")
    assert mse < 1e-6
    assert angle < 1e-4
    assert seconds < 60.0


@pytest.mark.acceptance(2, "noisy-fit scale check")
def test_noisy_fit_scale(model, record_property):
    runs = _noisy_fits(model)
    mse = float(np.mean([np.mean((a.expressions - t.expressions) ** 2) for a, t in runs]))
    record_property("detail", f"mean expression MSE {mse:.4f} over 20 seeds at 1 px")
    assert mse <= 0.01


@pytest.mark.acceptance(3, "energy monotonicity")
def test_energy_monotone(model, record_property):
    runs = _noise_free_fits(model)[0] + _noisy_fits(model)
    for annotation, _ in runs:
        assert len(annotation.energy_history) >= 3
        assert_monotone(annotation.energy_history)
    record_property("detail", f"{len(runs)} fits, hard assert inside fit_video plus history check")


@pytest.mark.acceptance(4, "chi-square pruning calibration")
def test_prune_rate_in_model(model, record_property):
    rng = np.random.default_rng(4)
    n = 10_000
    flagged = 0
    for _ in range(n):
        a = VideoAnnotation(rng.normal(size=model.n_identity), np.zeros((1, model.n_expression)), [], 0.0)
        flagged += auto_prune(a, 0.99)[0]
    rate = flagged / n
    record_property("detail", f"in-model flag rate {rate:.4f}")
    assert abs(rate - 0.01) <= 0.005


@pytest.mark.acceptance(4, "chi-square pruning calibration")
def test_prune_off_model_videos(model, record_property):
    cfg = SynthConfig(frames_per_video=60)
    tracks, off_model = [], []
    for k in range(23):
        inflation = 2.0 if k % 8 == 3 else 1.0
        seq, _ = gen_video(model, cfg, seed=2000 + k, identity_inflation=inflation)
        if inflation > 1:
            off_model.append(k)
        tracks.append(track_from_sequence(seq))
    annotations, stats = annotate_corpus(model, tracks, PipelineConfig())
    assert len(off_model) == 3
    flagged = [k for k, a in enumerate(annotations) if a.prune_status.value == "auto_pruned"]
    record_property("detail", f"off-model {off_model} flagged {flagged}")
    assert set(off_model) <= set(flagged)
    assert stats.is_partition() and stats.total == 23


@pytest.mark.acceptance(5, "spline correctness")
def test_spline_cubic_gaps(record_property):
    rng = np.random.default_rng(5)
    worst = 0.0
    for trial in range(20):
        n = 80
        t = np.arange(n, dtype=float)
        coeffs = rng.normal(size=(4, 6)) * np.array([1.0, 1e-1, 1e-3, 1e-5])[:, None]
        traces = np.vander(t, 4, increasing=True) @ coeffs
        valid = np.ones(n, dtype=bool)
        for start in rng.choice(np.arange(5, n - 10), size=4, replace=False):
            valid[start:start + rng.integers(1, 5)] = False
        fitted, _ = smooth_traces(np.where(valid[:, None], traces, 0.0), valid)
        worst = max(worst, float(np.max(np.abs(fitted - traces))))
    record_property("detail", f"max cubic error {worst:.1e}")
    assert worst < 1e-9


def smooth_motion(rng, frames=200):
    """Three pixel traces of slow head motion."""
    t = np.arange(frames) / frames
    return np.stack([20 * np.sin(2 * np.pi * (f * t + rng.uniform())) for f in (1.0, 1.5, 2.0)], axis=1)


def jitter(traces):
    return float(np.sqrt(np.mean(np.diff(traces, n=2, axis=0) ** 2)))


@pytest.mark.acceptance(5, "spline correctness")
def test_spline_jitter_reduction(record_property):
    ratios, errors = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        clean = smooth_motion(rng)
        noisy = clean + rng.normal(size=clean.shape)
        fitted, _ = smooth_traces(noisy, np.ones(len(clean), dtype=bool))
        ratios.append(jitter(fitted) / jitter(noisy))
        errors.append(np.sqrt(np.mean((fitted - clean) ** 2)) / np.sqrt(np.mean((noisy - clean) ** 2)))
    record_property("detail", f"worst jitter ratio {max(ratios):.3f}, worst error ratio {max(errors):.3f}")
    assert max(ratios) <= 0.5
    assert max(errors) <= 0.5


@pytest.mark.acceptance(6, "SVM oracle equivalence")
def test_svm_matches_brute_force(record_property):
    worst, cases = 0.0, 0
    for n, d, seed, c in itertools.product(range(2, 9), (1, 2, 3), range(2), (0.1, 1.0, 10.0)):
        rng = np.random.default_rng(1000 * n + 100 * d + seed)
        x = rng.normal(size=(n, d))
        y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        y[0], y[1] = 1.0, -1.0
        svm = train_binary_svm(x, y, c)
        best = brute_force_svm_objective(x, y, c)
        err = abs(svm.primal - best) / max(1.0, abs(best))
        worst = max(worst, err)
        cases += 1
        assert err <= 1e-6, (n, d, seed, c, svm.primal, best)
    record_property("detail", f"{cases} datasets, worst relative gap {worst:.1e}")


@pytest.mark.acceptance(6, "SVM oracle equivalence")
def test_svm_all_labelings_small(record_property):
    """Every labelling of 4 points in 2-D, including the fallback solver path."""
    x = np.array([[0.0, 0.0], [1.0, 0.2], [0.3, 1.1], [1.2, 1.0]])
    cases = 0
    for labels in itertools.product((-1.0, 1.0), repeat=4):
        y = np.array(labels)
        if abs(y.sum()) == 4:
            continue
        best = brute_force_svm_objective(x, y, 1.0)
        for max_iter in (None, 1):
            svm = train_binary_svm(x, y, 1.0, max_iter=max_iter)
            assert abs(svm.primal - best) <= 1e-6 * max(1.0, best)
            assert svm.b == pytest.approx(optimal_bias(x @ svm.w, y), abs=1e-9)
            cases += 1
    record_property("detail", f"{cases} labelling/solver cases")


@pytest.mark.acceptance(7, "ECOC protocol")
def test_cv_separable_clusters(record_property):
    ds = gen_emotion_dataset(SynthConfig(margin=6.0), seed=0)
    result = cross_validate(ds.features, ds.labels, k=10, seed=0)
    record_property("detail", f"separable {result.mean:.4f}")
    assert result.mean >= 0.99
    assert result.confusion.sum(axis=1).tolist() == np.bincount(ds.labels).tolist()


@pytest.mark.acceptance(7, "ECOC protocol")
def test_cv_shuffled_labels_at_chance(record_property):
    ds = gen_emotion_dataset(SynthConfig(margin=6.0), seed=0)
    shuffled = np.random.default_rng(1).permutation(ds.labels)
    result = cross_validate(ds.features, shuffled, k=10, seed=0)
    z = abs(result.mean - 1 / 7) / result.std
    record_property("detail", f"shuffled {result.mean:.3f} (z={z:.2f})")
    assert z <= 3.0


@pytest.mark.acceptance(7, "ECOC protocol")
def test_cv_grouping_removes_leakage(record_property):
    ds = gen_confounded_dataset(40, 10, 28, 7, seed=0)
    leaky = cross_validate(ds.features, ds.labels, k=5, seed=0)
    grouped = cross_validate(ds.features, ds.labels, k=5, grouped=True, subjects=ds.subject_ids, seed=0)
    z = abs(grouped.mean - 1 / 7) / grouped.std
    record_property("detail", f"confounded: ungrouped {leaky.mean:.3f}, grouped {grouped.mean:.3f} (z={z:.2f})")
    assert leaky.mean >= 0.9
    assert z <= 3.0


def _frontal(model, identity, expression, yaw=0.0):
    cfg = SynthConfig()
    pose = CameraPose(rotation_from_angles(yaw, 0.0, 0.0), cfg.camera_scale, cfg.image_center)
    return render_landmarks(model, identity, expression, pose)


@pytest.mark.acceptance(8, "regressor invariances")
def test_regressor_similarity_invariance(model, view_regressor, record_property):
    rng = np.random.default_rng(8)
    protos = video_prototypes(model, SynthConfig())
    worst = 0.0
    for _ in range(20):
        lms = _frontal(model, rng.normal(size=model.n_identity), protos[rng.integers(7)],
                       yaw=rng.uniform(-40, 40))
        sim = Similarity2D(rng.uniform(0.3, 3.0), rng.uniform(-np.pi, np.pi), rng.uniform(-300, 300, 2))
        a = regress_expression(view_regressor, lms)
        b = regress_expression(view_regressor, sim.apply(lms))
        worst = max(worst, float(np.max(np.abs(a - b))))
        fa = featurize(lms, view_regressor.template)
        fb = featurize(sim.apply(lms), view_regressor.template)
        worst = max(worst, float(np.max(np.abs(fa - fb))))
    record_property("detail", f"max deviation {worst:.1e}")
    assert worst <= 1e-9


@pytest.mark.acceptance(8, "regressor invariances")
def test_regressor_identity_variance(model, view_regressor, record_property):
    rng = np.random.default_rng(81)
    protos = video_prototypes(model, SynthConfig())
    spread = stationary_std(SynthConfig())
    expressions = protos[rng.integers(7, size=10)] + spread * rng.normal(size=(10, model.n_expression))
    identities = rng.normal(size=(10, model.n_identity))
    frames = np.array([[_frontal(model, i, e) for i in identities] for e in expressions])
    pred = regress_batch(view_regressor, frames.reshape(-1, 68, 2)).reshape(10, 10, -1)
    across_identity = np.mean(np.var(pred, axis=1).sum(axis=-1))
    across_expression = np.mean(np.var(pred, axis=0).sum(axis=-1))
    ratio = across_identity / across_expression
    record_property("detail", f"identity/expression variance ratio {ratio:.4f}")
    assert ratio <= 0.10


@pytest.mark.acceptance(8, "regressor invariances")
def test_regressor_two_view(model, view_regressor, record_property):
    rng = np.random.default_rng(82)
    protos = video_prototypes(model, SynthConfig())
    spread = stationary_std(SynthConfig())
    diffs = []
    for _ in range(100):
        identity = rng.normal(size=model.n_identity)
        expression = protos[rng.integers(7)] + spread * rng.normal(size=model.n_expression)
        front, side = (regress_expression(view_regressor, _frontal(model, identity, expression, yaw))
                       for yaw in (0.0, 45.0))
        diffs.append(np.mean((front - side) ** 2))
    mse = float(np.mean(diffs))
    record_property("detail", f"0/45 degree prediction MSE {mse:.4f}")
    assert mse <= 0.01


@pytest.mark.acceptance(9, "latency")
def test_latency(model, view_regressor, record_property):
    frames = gen_emotion_frames(model, SynthConfig(samples_per_class=30), seed=9)
    feats = predict_features(view_regressor,
                             np.stack([featurize(f, view_regressor.template) for f in frames.landmarks]))
    classifier = train_ecoc(feats, frames.labels, 1.0)
    assert np.mean(predict_batch(classifier, feats) == frames.labels) > 0.5
    measure_latency(view_regressor, classifier, frames.landmarks, frames=20)  # warm caches
    result = measure_latency(view_regressor, classifier, frames.landmarks, frames=1000)
    record_property("detail", f"{result['per_frame_ms']:.3f} ms per frame over {result['frames']} frames")
    assert result["frames"] == 1000
    assert result["per_frame_ms"] <= LATENCY_BUDGET_MS
    assert result["within_budget"]


@pytest.mark.acceptance(10, "determinism")
def test_pipeline_rerun_is_byte_identical(tmp_path, record_property):
    config = load_run_config(seed=7)
    config.synth = SynthConfig(num_videos=6, frames_per_video=60, samples_per_class=12, num_subjects=6)
    config.classify.k = 3
    config.run.latency_frames = 10
    first = run_pipeline(config, tmp_path / "a", command=["test"])
    second = run_pipeline(config, tmp_path / "b", command=["test"])
    assert first.status == second.status == "ok"
    assert first.outputs == second.outputs
    assert first.output_digest() == second.output_digest()
    for rel in first.outputs:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    record_property("detail", f"{len(first.outputs)} artifacts, digest {first.output_digest()[:12]}")
