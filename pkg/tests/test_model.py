import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facexpr.container import read_container, write_container
from facexpr.errors import ContainerError, ContractError, RankDeficiencyError
from facexpr.model import (NUM_LANDMARKS, ShapeCoefficients, ShapeModel, condition_numbers, landmarks_3d,
                           load_model, project_coefficients, save_model, synthesize)
from facexpr.synth import SynthConfig, gen_model

SMALL = SynthConfig(num_vertices=100, n_i=20, n_e=8)


@pytest.fixture(scope="module")
def small():
    return gen_model(SMALL, seed=3)


def coeffs_for(model, rng):
    return ShapeCoefficients(rng.normal(size=model.n_identity), rng.normal(size=model.n_expression))


def test_zero_coefficients_give_mean(small):
    assert np.array_equal(synthesize(small, ShapeCoefficients.zeros(small)), small.mean_shape)


def test_unit_coefficient_moves_by_scaled_column(small):
    e = np.zeros(small.n_expression)
    e[2] = 1.0
    shape = synthesize(small, ShapeCoefficients(np.zeros(small.n_identity), e))
    np.testing.assert_allclose(shape - small.mean_shape,
                               small.expression_scales[2] * small.expression_basis[:, 2], atol=1e-15)


def test_landmarks_are_rows_of_full_shape(small, rng):
    c = coeffs_for(small, rng)
    full = synthesize(small, c).reshape(-1, 3)
    np.testing.assert_allclose(landmarks_3d(small, c), full[small.landmark_vertex_ids], atol=1e-12)


def test_hand_built_model_landmarks():
    n = NUM_LANDMARKS
    mean = np.arange(3 * n, dtype=float)
    basis = np.eye(3 * n)[:, :2]
    ids = np.arange(n)[::-1]
    m = ShapeModel(mean, basis, [2.0, 1.0], np.eye(3 * n)[:, 2:3], [0.5], ids).validate()
    lm = landmarks_3d(m, ShapeCoefficients([1.0, 0.0], [0.0]))
    # vertex 0 is landmark 67; its x coordinate moved by 2
    assert lm[-1].tolist() == [2.0, 1.0, 2.0]
    assert lm[0].tolist() == mean[-3:].tolist()


def test_projection_round_trip(small, rng):
    c = coeffs_for(small, rng)
    back = project_coefficients(small, synthesize(small, c))
    np.testing.assert_allclose(back.identity, c.identity, atol=1e-8)
    np.testing.assert_allclose(back.expression, c.expression, atol=1e-8)


def test_projection_of_mean_is_zero(small):
    back, residual = project_coefficients(small, small.mean_shape, return_residual=True)
    assert np.allclose(back.identity, 0.0, atol=1e-12) and np.allclose(back.expression, 0.0, atol=1e-12)
    assert residual == pytest.approx(0.0, abs=1e-12)


def test_orthogonal_component_goes_to_residual(small, rng):
    c = coeffs_for(small, rng)
    joint = np.hstack([small.identity_basis, small.expression_basis])
    extra = rng.normal(size=small.mean_shape.size)
    extra -= joint @ np.linalg.lstsq(joint, extra, rcond=None)[0]
    extra *= 0.7 / np.linalg.norm(extra)
    back, residual = project_coefficients(small, synthesize(small, c) + extra, return_residual=True)
    np.testing.assert_allclose(back.expression, c.expression, atol=1e-8)
    assert residual == pytest.approx(0.7, rel=1e-9)


def test_dimension_mismatch_raises(small):
    with pytest.raises(ContractError, match="identity"):
        synthesize(small, ShapeCoefficients(np.zeros(3), np.zeros(small.n_expression)))
    with pytest.raises(ContractError):
        project_coefficients(small, np.zeros(7))


def test_nonfinite_coefficients_rejected():
    with pytest.raises(ContractError):
        ShapeCoefficients([np.nan], [0.0])


def test_rank_deficient_projection_reports_condition():
    n = NUM_LANDMARKS
    u = np.eye(3 * n)[:, :3]
    m = ShapeModel(np.zeros(3 * n), u, np.ones(3), u[:, :1], np.ones(1), np.arange(n)).validate()
    with pytest.raises(RankDeficiencyError) as info:
        project_coefficients(m, np.zeros(3 * n))
    assert info.value.condition_number > 1e12


def test_invariants_flag_nonorthonormal_basis(small):
    basis = small.identity_basis.copy()
    basis[0, 0] += 1e-6
    bad = ShapeModel(small.mean_shape, basis, small.identity_scales, small.expression_basis,
                     small.expression_scales, small.landmark_vertex_ids)
    problems = bad.check_invariants()
    assert any("identity_basis is not orthonormal" in p for p in problems)
    with pytest.raises(ContractError):
        bad.validate()


@pytest.mark.parametrize("field, value, message", [
    ("identity_scales", lambda m: -m.identity_scales, "identity_scales must be strictly positive"),
    ("landmark_vertex_ids", lambda m: np.zeros(NUM_LANDMARKS, dtype=int), "not unique"),
    ("landmark_vertex_ids", lambda m: np.arange(NUM_LANDMARKS) + 1000, "out of range"),
    ("landmark_vertex_ids", lambda m: np.arange(10), "expected 68"),
])
def test_invariant_messages(small, field, value, message):
    parts = {f: getattr(small, f) for f in ("mean_shape", "identity_basis", "identity_scales",
                                             "expression_basis", "expression_scales", "landmark_vertex_ids")}
    parts[field] = value(small)
    assert any(message in p for p in ShapeModel(**parts).check_invariants())


def test_condition_numbers_of_orthonormal_bases(small):
    conds = condition_numbers(small)
    assert conds["identity_basis"] == pytest.approx(1.0, abs=1e-9)
    assert conds["expression_basis"] == pytest.approx(1.0, abs=1e-9)
    assert np.isfinite(conds["landmark_joint_basis"])


def test_model_is_read_only(small):
    with pytest.raises(ValueError):
        small.mean_shape[0] = 1.0


def test_save_load_bit_exact(small, tmp_path):
    path = tmp_path / "m.fxb"
    save_model(small, path)
    loaded = load_model(path)
    for name in ("mean_shape", "identity_basis", "identity_scales", "expression_basis",
                 "expression_scales", "landmark_vertex_ids"):
        assert np.array_equal(getattr(loaded, name), getattr(small, name))
    meta, _ = read_container(path)
    assert meta["kind"] == "shape_model" and meta["n_i"] == "20"


def test_bad_magic_reports_offset(small, tmp_path):
    path = tmp_path / "m.fxb"
    save_model(small, path)
    data = bytearray(path.read_bytes())
    data[0:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(ContainerError, match="byte offset 0"):
        load_model(path)


def test_truncated_container_reports_offset(small, tmp_path):
    path = tmp_path / "m.fxb"
    save_model(small, path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(ContainerError, match="truncated .* at byte offset"):
        load_model(path)


def test_trailing_bytes_rejected(small, tmp_path):
    path = tmp_path / "m.fxb"
    save_model(small, path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(ContainerError, match="trailing"):
        load_model(path)


def test_perturbed_basis_rejected_on_load(small, tmp_path):
    basis = small.expression_basis.copy()
    basis[:, 0] *= 1.001
    arrays = {f: getattr(small, f) for f in ("mean_shape", "identity_basis", "identity_scales",
                                              "expression_scales", "landmark_vertex_ids")}
    arrays["expression_basis"] = basis
    path = tmp_path / "m.fxb"
    write_container(path, "shape_model", {"N": 100, "n_i": 20, "n_e": 8}, arrays)
    with pytest.raises(ContainerError, match="expression_basis is not orthonormal"):
        load_model(path)


def test_wrong_kind_rejected(tmp_path):
    path = tmp_path / "r.fxb"
    write_container(path, "regressor", {}, {"a": np.zeros(2)})
    with pytest.raises(ContainerError, match="expected a 'shape_model'"):
        load_model(path)


def test_metadata_disagreement_rejected(small, tmp_path):
    arrays = {f: getattr(small, f) for f in ("mean_shape", "identity_basis", "identity_scales",
                                              "expression_basis", "expression_scales", "landmark_vertex_ids")}
    path = tmp_path / "m.fxb"
    write_container(path, "shape_model", {"N": 100, "n_i": 21, "n_e": 8}, arrays)
    with pytest.raises(ContainerError, match="n_i"):
        load_model(path)


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(a=finite, b=finite, seed=st.integers(0, 2**16))
def test_synthesis_is_affine(small, a, b, seed):
    rng = np.random.default_rng(seed)
    c1, c2 = coeffs_for(small, rng), coeffs_for(small, rng)
    mix = ShapeCoefficients(a * c1.identity + b * c2.identity, a * c1.expression + b * c2.expression)
    lhs = synthesize(small, mix) - small.mean_shape
    rhs = a * (synthesize(small, c1) - small.mean_shape) + b * (synthesize(small, c2) - small.mean_shape)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_identity_offset_norm_is_weighted_coefficient_norm(small, seed):
    rng = np.random.default_rng(seed)
    i = rng.normal(size=small.n_identity)
    offset = synthesize(small, ShapeCoefficients(i, np.zeros(small.n_expression))) - small.mean_shape
    assert np.linalg.norm(offset) == pytest.approx(np.linalg.norm(small.identity_scales * i), rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_container_round_trip_property(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    arrays = {f"a{k}": rng.normal(size=tuple(rng.integers(1, 4, size=rng.integers(0, 3))))
              for k in range(rng.integers(0, 4))}
    path = tmp_path_factory.mktemp("c") / "x.fxb"
    write_container(path, "blob", {"note": "x y"}, arrays)
    meta, back = read_container(path, "blob")
    assert meta["note"] == "x y"
    assert back.keys() == arrays.keys()
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])
