import numpy as np
import pytest

from facexpr.synth import SynthConfig, gen_model

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one numbered acceptance criterion")
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    results = item.config.stash[_ACCEPTANCE_KEY]
    entry = results.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": []})
    if report.when == "call":
        entry["ran"] = True
        entry["detail"] += [str(v) for k, v in item.user_properties if k == "detail"]
    if report.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        entry = results[number]
        status = "PASS" if entry["ok"] and entry["ran"] else "FAIL"
        detail = "; ".join(entry["detail"])
        line = f"criterion {number:2d} {status}  {entry['title']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture(scope="session")
def model():
    """Reference-size model: N=500, n_i=157, n_e=28."""
    return gen_model(SynthConfig(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Videos for the regressor: wider and offset yaw so training covers 0..45 degree views.
# Many short videos beat few long ones: identity diversity drives generalisation.
CORPUS_CONFIG = SynthConfig(frames_per_video=50, yaw_range=30.0, pitch_range=20.0, yaw_offset_range=40.0)
CORPUS_VIDEOS = 100


@pytest.fixture(scope="session")
def regression_corpus(model):
    """Detected landmarks and fitted expressions of 100 pipeline-annotated videos."""
    from facexpr.pipeline import annotate_corpus, regression_pairs, track_from_sequence
    from facexpr.regressor import default_template
    from facexpr.synth import gen_video

    seqs = [gen_video(model, CORPUS_CONFIG, seed=500 + k)[0] for k in range(CORPUS_VIDEOS)]
    annotations, stats = annotate_corpus(model, [track_from_sequence(s) for s in seqs])
    template = default_template(model)
    features, targets, groups = regression_pairs(annotations, seqs, template)
    return {"features": features, "targets": targets, "groups": groups, "template": template, "stats": stats}


@pytest.fixture(scope="session")
def view_regressor(model, regression_corpus):
    from facexpr.regressor import train_regressor

    c = regression_corpus
    return train_regressor(c["features"], c["targets"], ridge_lambda=0.03, backend="view_ridge",
                           template=c["template"], template_3d=model.landmark_mean, groups=c["groups"])
