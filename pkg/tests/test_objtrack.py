import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hogs.mathcore import axis_angle_to_rotation
from hogs.objtrack import (
    DegenerateGeometryError,
    RigidTransform,
    TriMesh,
    apply_transform,
    icp_rigid,
    kabsch,
    make_box,
    make_icosphere,
    make_lumpy_blob,
)


def random_transform(rng, max_angle=np.pi, max_trans=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, max_angle)
    return RigidTransform(axis_angle_to_rotation(axis * angle), rng.uniform(-max_trans, max_trans, 3))


def test_rigid_transform_rejects_improper_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_kabsch_identity():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(10, 3))
    t = kabsch(p, p)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, 0.0, atol=1e-12)


def test_kabsch_recovers_quarter_turn():
    rng = np.random.default_rng(1)
    p = rng.normal(size=(20, 3))
    r = axis_angle_to_rotation([0, 0, np.pi / 2])
    q = p @ r.T
    t = kabsch(p, q)
    assert np.allclose(t.rotation, r, atol=1e-9)
    assert np.allclose(t.translation, 0.0, atol=1e-9)


def test_kabsch_reflection_yields_proper_rotation():
    rng = np.random.default_rng(2)
    p = rng.normal(size=(15, 3))
    q = -p
    t = kabsch(p, q)
    assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9
    residual = np.linalg.norm(t.apply(p) - q)
    assert residual > 1e-3


def test_kabsch_collinear_reported():
    line = np.outer(np.linspace(0, 1, 8), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometryError):
        kabsch(line, line + 1.0)


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 10_000))
def test_kabsch_conjugation_invariance(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(12, 3))
    rel = random_transform(rng)
    q = rel.apply(p)
    outer = random_transform(rng)
    t1 = kabsch(p, q)
    t2 = kabsch(outer.apply(p), outer.apply(q))
    expected = outer.compose(t1).compose(outer.inverse())
    assert np.allclose(t2.rotation, expected.rotation, atol=1e-8)
    assert np.allclose(t2.translation, expected.translation, atol=1e-8)


def test_icp_on_template_subset_is_identity():
    mesh = make_lumpy_blob(radius=0.5, seed=3)
    markers = mesh.vertices[::3]
    res = icp_rigid(markers, mesh)
    assert np.allclose(res.transform.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(res.transform.translation, 0.0, atol=1e-9)


def test_icp_recovers_known_transform():
    mesh = make_lumpy_blob(radius=0.5, seed=4)
    rng = np.random.default_rng(5)
    gt = random_transform(rng, max_angle=np.deg2rad(30), max_trans=0.2)
    markers = gt.apply(mesh.vertices)
    res = icp_rigid(markers, mesh)
    rot_err = np.arccos(np.clip((np.trace(res.transform.rotation.T @ gt.rotation) - 1) / 2, -1, 1))
    assert rot_err < 1e-3
    assert np.linalg.norm(res.transform.translation - gt.translation) < 1e-4


def test_icp_noise_floor():
    mesh = make_lumpy_blob(radius=0.5, seed=6)
    rng = np.random.default_rng(7)
    gt = random_transform(rng, max_angle=np.deg2rad(20), max_trans=0.1)
    lo, hi = mesh.bbox
    sigma = 0.001 * float(np.max(hi - lo))
    markers = gt.apply(mesh.vertices) + rng.normal(0, sigma, size=mesh.vertices.shape)
    res = icp_rigid(markers, mesh)
    assert res.rms <= 3 * sigma


def test_icp_rms_monotone_nonincreasing():
    mesh = make_lumpy_blob(radius=0.5, seed=8)
    rng = np.random.default_rng(9)
    gt = random_transform(rng, max_angle=np.deg2rad(30), max_trans=0.25)
    markers = gt.apply(mesh.vertices[::2])
    res = icp_rigid(markers, mesh)
    hist = np.array(res.rms_history)
    assert np.all(np.diff(hist) <= 1e-12)


def test_icp_rejects_nonfinite():
    mesh = make_box()
    bad = np.array([[0.0, 0.0, np.nan], [1, 1, 1], [2, 2, 2]])
    with pytest.raises(ValueError):
        icp_rigid(bad, mesh)


def test_apply_transform_identity_and_translation():
    mesh = make_box()
    same = apply_transform(mesh, RigidTransform.identity())
    assert np.array_equal(same.vertices, mesh.vertices)
    shifted = apply_transform(mesh, RigidTransform(np.eye(3), np.array([1.0, 2.0, 3.0])))
    assert np.allclose(shifted.vertices, mesh.vertices + [1, 2, 3])
    e = mesh.edges()
    d0 = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    d1 = np.linalg.norm(shifted.vertices[e[:, 0]] - shifted.vertices[e[:, 1]], axis=1)
    assert np.allclose(d0, d1, atol=1e-12)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 10_000))
def test_apply_transform_is_isometry(seed):
    rng = np.random.default_rng(seed)
    mesh = make_icosphere(0.7, 1)
    t = random_transform(rng)
    out = apply_transform(mesh, t)
    pd0 = np.linalg.norm(mesh.vertices[:, None] - mesh.vertices[None], axis=2)
    pd1 = np.linalg.norm(out.vertices[:, None] - out.vertices[None], axis=2)
    assert np.allclose(pd0, pd1, atol=1e-9)


def test_trimesh_validation_and_obj_round_trip(tmp_path):
    with pytest.raises(ValueError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))  # zero-area face
    with pytest.raises(ValueError):
        TriMesh(np.eye(3), np.array([[0, 1, 5]]))  # index out of range
    mesh = make_icosphere(0.3, 1)
    path = tmp_path / "m.obj"
    mesh.save_obj(path)
    again = TriMesh.load_obj(path)
    assert np.allclose(again.vertices, mesh.vertices)
    assert np.array_equal(again.faces, mesh.faces)


def test_icosphere_face_count():
    assert len(make_icosphere(1.0, 3).faces) == 1280


def test_nearest_vertex_indices_brute_and_tree_agree():
    from hogs.objtrack import nearest_vertex_indices

    rng = np.random.default_rng(11)
    small = rng.normal(size=(100, 3))  # brute-force branch
    big = rng.normal(size=(600, 3))  # KD-tree branch
    queries = rng.normal(size=(40, 3))
    idx_small = nearest_vertex_indices(queries, small)
    d2 = np.sum((queries[:, None] - small[None]) ** 2, axis=2)
    assert np.array_equal(idx_small, np.argmin(d2, axis=1))
    idx_big = nearest_vertex_indices(queries, big)
    d2 = np.sum((queries[:, None] - big[None]) ** 2, axis=2)
    assert np.array_equal(idx_big, np.argmin(d2, axis=1))


def test_closest_surface_points_on_sphere():
    from hogs.objtrack import closest_surface_points

    mesh = make_icosphere(1.0, 3)
    rng = np.random.default_rng(12)
    pts = rng.normal(size=(30, 3)) * 1.5
    d, q = closest_surface_points(pts, mesh)
    # nearest surface points sit on the unit sphere (within mesh chord error)
    assert np.all(np.abs(np.linalg.norm(q, axis=1) - 1.0) < 5e-3)
    assert np.allclose(d, np.linalg.norm(pts - q, axis=1), atol=1e-12)
