import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hogs.mathcore import (
    AxisAngle,
    Quaternion,
    axis_angle_canonical,
    axis_angle_to_quaternion,
    axis_angle_to_rotation,
    matrix_to_quat,
    positional_encoding,
    positional_encoding_point_jacobian,
    quat_multiply,
    quat_to_matrix,
    rotation_jacobian,
    softmax,
    softmax_backward,
)

vec3 = st.lists(st.floats(-4.0, 4.0), min_size=3, max_size=3).map(np.array)


def assert_rotation(m, tol=1e-9):
    assert np.allclose(m.T @ m, np.eye(3), atol=tol)
    assert abs(np.linalg.det(m) - 1.0) < tol


def test_axis_angle_zero_is_identity():
    assert np.array_equal(axis_angle_to_rotation([0, 0, 0]), np.eye(3))


def test_axis_angle_half_turn_about_x():
    m = axis_angle_to_rotation([np.pi, 0, 0])
    assert np.allclose(m, np.diag([1.0, -1.0, -1.0]), atol=1e-12)


@settings(deadline=None, max_examples=60)
@given(vec3)
def test_axis_angle_matches_quaternion_path(v):
    direct = axis_angle_to_rotation(v)
    via_quat = quat_to_matrix(axis_angle_to_quaternion(v))
    assert np.allclose(direct, via_quat, atol=1e-9)
    assert_rotation(direct)


@settings(deadline=None, max_examples=40)
@given(vec3)
def test_axis_angle_canonical_range_and_equivalence(v):
    c = axis_angle_canonical(v)
    assert np.linalg.norm(c) <= np.pi + 1e-12
    assert np.allclose(axis_angle_to_rotation(v), axis_angle_to_rotation(c), atol=1e-9)
    a = AxisAngle(v)
    assert 0.0 <= a.angle <= np.pi + 1e-12


def test_quaternion_normalized_on_construction():
    q = Quaternion(2.0, 0.0, 0.0, 0.0)
    assert abs(np.linalg.norm(q.as_array()) - 1.0) < 1e-9
    with pytest.raises(ValueError):
        Quaternion(0.0, 0.0, 0.0, 0.0)


@settings(deadline=None, max_examples=40)
@given(vec3, vec3)
def test_quat_multiply_composes_rotations(a, b):
    qa = axis_angle_to_quaternion(a)
    qb = axis_angle_to_quaternion(b)
    composed = quat_to_matrix(quat_multiply(qa, qb))
    assert np.allclose(composed, axis_angle_to_rotation(a) @ axis_angle_to_rotation(b), atol=1e-9)


@settings(deadline=None, max_examples=40)
@given(vec3)
def test_matrix_quaternion_round_trip(v):
    m = axis_angle_to_rotation(v)
    q = matrix_to_quat(m)
    assert np.allclose(quat_to_matrix(q), m, atol=1e-9)


@settings(deadline=None, max_examples=40)
@given(vec3)
def test_rotation_jacobian_matches_finite_differences(v):
    jac = rotation_jacobian(v)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (axis_angle_to_rotation(v + e) - axis_angle_to_rotation(v - e)) / (2 * h)
        assert np.allclose(jac[i], fd, atol=1e-5)


def test_softmax_uniform():
    assert np.allclose(softmax([0.0, 0.0, 0.0]), np.full(3, 1 / 3), atol=1e-12)


def test_softmax_shift_invariance_ln2():
    c = 7.3
    assert np.allclose(softmax([c, c + np.log(2.0)]), [1 / 3, 2 / 3], atol=1e-12)


def test_softmax_large_inputs_match_mpmath():
    out = softmax([1000.0, 1001.0])
    assert np.all(np.isfinite(out))
    with mpmath.workdps(60):
        e0 = mpmath.exp(mpmath.mpf(1000))
        e1 = mpmath.exp(mpmath.mpf(1001))
        ref = np.array([float(e0 / (e0 + e1)), float(e1 / (e0 + e1))])
    assert np.allclose(out, ref, atol=1e-12)
    assert np.allclose(out, softmax([0.0, 1.0]), atol=1e-12)


@settings(deadline=None, max_examples=60)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.floats(-5, 5))
def test_softmax_properties(xs, c):
    x = np.array(xs)
    y = softmax(x)
    assert np.all(y > 0)
    assert abs(y.sum() - 1.0) < 1e-9
    assert np.allclose(softmax(x + c), y, atol=1e-9)
    perm = np.argsort(x)
    assert np.allclose(softmax(x[perm]), y[perm], atol=1e-12)


@settings(deadline=None, max_examples=30)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6))
def test_softmax_backward_matches_fd(xs):
    x = np.array(xs)
    rng = np.random.default_rng(0)
    w = rng.normal(size=x.size)
    grad = softmax_backward(softmax(x), w)
    h = 1e-6
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        fd = (w @ softmax(x + e) - w @ softmax(x - e)) / (2 * h)
        assert abs(grad[i] - fd) < 1e-6


def test_positional_encoding_zero_point():
    enc = positional_encoding([0.0, 0.0, 0.0], 10)
    assert enc.shape == (63,)
    sines = np.concatenate([enc[3 + 6 * k : 6 + 6 * k] for k in range(10)])
    cosines = np.concatenate([enc[6 + 6 * k : 9 + 6 * k] for k in range(10)])
    assert np.array_equal(sines, np.zeros(30))
    assert np.array_equal(cosines, np.ones(30))


def test_positional_encoding_no_frequencies_is_point():
    p = np.array([0.3, -0.2, 1.4])
    assert np.array_equal(positional_encoding(p, 0), p)


@settings(deadline=None, max_examples=30)
@given(vec3, st.integers(0, 16))
def test_positional_encoding_dimension_and_entries(p, L):
    enc = positional_encoding(p, L)
    assert enc.shape == (3 + 6 * L,)
    for k in range(L):
        for j in range(3):
            assert enc[3 + 6 * k + j] == np.sin((2.0**k) * np.pi * p[j])
            assert enc[6 + 6 * k + j] == np.cos((2.0**k) * np.pi * p[j])


def test_positional_encoding_jacobian_matches_fd():
    p = np.array([0.11, -0.37, 0.52])
    jac = positional_encoding_point_jacobian(p, 4)
    h = 1e-7
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (positional_encoding(p + e, 4) - positional_encoding(p - e, 4)) / (2 * h)
        assert np.allclose(jac[:, j], fd, atol=1e-5)
