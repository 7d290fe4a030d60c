import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cct.errors import SpecError
from cct.model import (Empirical, SimplexVector, UniformBox, moments, planar_instance,
                       sample_initial_states, validate_spec)


def test_planar_spec_is_valid_and_S_is_I_over_50(planar):
    report = validate_spec(planar)
    assert report.ok, report.violations
    np.testing.assert_allclose(planar.S, np.eye(2) / 50, rtol=0, atol=1e-15)


def test_zero_R_u_is_reported(planar):
    report = validate_spec(planar.replace(R_u=np.zeros((2, 2))))
    assert "R_u not positive definite" in report.violations


def test_non_pd_terminal_weight_is_reported(planar):
    report = validate_spec(planar.replace(M=np.diag([1.0, 0.0])))
    assert "M not positive definite" in report.violations


def test_destination_dimension_mismatch(planar):
    report = validate_spec(planar.replace(destinations=[[1.0, 2.0, 3.0]]))
    assert any("dimension mismatch" in v and "destinations" in v for v in report.violations)


def test_empty_destination_list(planar):
    report = validate_spec(planar.replace(destinations=np.zeros((0, 2))))
    assert "empty destination list" in report.violations


def test_check_raises_with_all_violations(planar):
    bad = planar.replace(R_u=np.zeros((2, 2)), T=-1.0)
    with pytest.raises(SpecError) as exc:
        bad.check()
    assert len(exc.value.violations) == 2


def test_asymmetric_weight_rejected(planar):
    report = validate_spec(planar.replace(R_x=[[1.0, 0.5], [0.0, 1.0]]))
    assert "R_x not symmetric" in report.violations


def test_box_moments_closed_form():
    box = UniformBox([-50, -50], [50, 50])
    mean, quad, second = moments(box, np.eye(2))
    np.testing.assert_array_equal(mean, [0.0, 0.0])
    assert quad == pytest.approx(2 * 100**2 / 12, rel=1e-14)
    assert second == pytest.approx(1666.6666666666667, rel=1e-14)


def test_box_moments_against_monte_carlo():
    box = UniformBox([-50, -50], [50, 50])
    X = np.random.default_rng(0).uniform(-50, 50, size=(10**6, 2))
    sq = np.sum(X**2, axis=1)
    _, _, second = moments(box)
    assert abs(second - sq.mean()) < 3 * sq.std() / np.sqrt(sq.size)


def test_empirical_two_point_moments():
    mean, quad, second = moments(Empirical([[1, 0], [-1, 0]]), np.eye(2))
    np.testing.assert_array_equal(mean, [0, 0])
    assert quad == 1.0 and second == 1.0


@given(st.lists(st.floats(0.1, 10), min_size=1, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_box_second_moment_formula(widths, centers):
    k = len(widths)
    w, c = np.array(widths), np.array(centers[:k])
    box = UniformBox(c - w / 2, c + w / 2)
    mean, _, second = moments(box)
    np.testing.assert_allclose(mean, c, atol=1e-12)
    expected = np.sum(w**2 / 12 + c**2)
    assert abs(second - expected) <= 1e-12 * max(1.0, expected)


@given(st.integers(1, 4), st.integers(0, 2**31))
@settings(max_examples=30)
def test_symmetric_box_has_zero_mean_for_any_Q(n, seed):
    rng = np.random.default_rng(seed)
    half = rng.uniform(0.5, 3, n)
    G = rng.normal(size=(n, n))
    mean, _, _ = moments(UniformBox(-half, half), G + G.T)
    np.testing.assert_array_equal(mean, np.zeros(n))


def test_sampling_is_deterministic():
    box = UniformBox([-1, -2], [3, 4])
    a = sample_initial_states(box, 50, 7)
    b = sample_initial_states(box, 50, 7)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, sample_initial_states(box, 50, 8))


def test_sample_mean_law_of_large_numbers():
    X = sample_initial_states(UniformBox([-50, -50], [50, 50]), 10**5, 11)
    assert np.all(np.abs(X.mean(axis=0)) < 0.5)
    assert X.min() >= -50 and X.max() <= 50


def test_empirical_verbatim_and_resampled():
    pts = [[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]
    np.testing.assert_array_equal(sample_initial_states(Empirical(pts), 3, 0), pts)
    draws = sample_initial_states(Empirical(pts), 10, 0)
    assert draws.shape == (10, 2)
    assert all(list(r) in pts for r in draws.tolist())


def test_simplex_vector_rejects_off_simplex():
    SimplexVector([0.5, 0.5])
    SimplexVector([1.0 - 5e-13, 5e-13])
    with pytest.raises(ValueError):
        SimplexVector([0.5, 0.5 + 2e-12])
    with pytest.raises(ValueError):
        SimplexVector([1.0 + 1e-11, -1e-11])


@given(st.lists(st.integers(0, 20), min_size=1, max_size=6).filter(lambda c: sum(c) > 0))
def test_simplex_from_counts(counts):
    p = SimplexVector.from_counts(counts)
    assert abs(sum(p) - 1.0) <= 1e-12
    assert len(p) == len(counts)


def test_planar_instance_horizon_parameter():
    assert planar_instance(10.0).T == 10.0
