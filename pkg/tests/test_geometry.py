import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from metface.geometry import (Camera, GeometryError, LinearShapeModel, Mesh, RigidTransform, SimilarityTransform,
                              apply_transform, axis_angle, decode_linear, decoder_parameter_count, pinhole, project,
                              random_rotation, rodrigues, rodrigues_jacobian, rot_z, vertex_normals)

from conftest import unit_cube

finite = st.floats(-1.0, 1.0, allow_nan=False)


def tiny_model(K=2, Ke=1, N=4):
    rng = np.random.default_rng(0)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return LinearShapeModel(rng.normal(size=3 * N), rng.normal(size=(3 * N, K)), rng.normal(size=(3 * N, Ke)),
                            faces, np.array([0, 1]), np.ones(N))


# -- decode ---------------------------------------------------------------

def test_decode_zero_code_is_mean(model):
    m = decode_linear(model, np.zeros(model.n_shape), np.zeros(model.n_expr))
    assert np.array_equal(m.vertices.ravel(), model.mean)
    assert np.array_equal(m.faces, model.faces)


def test_decode_basis_vector_response():
    mdl = tiny_model()
    e = np.array([0.0, 1.0])
    m = decode_linear(mdl, e)
    assert np.array_equal(m.vertices.ravel(), mdl.mean + mdl.shape_basis[:, 1])


def test_decode_dimension_mismatch():
    mdl = tiny_model()
    with pytest.raises(GeometryError):
        decode_linear(mdl, np.zeros(3))
    with pytest.raises(GeometryError):
        decode_linear(mdl, np.zeros(2), np.zeros(2))


def test_decoder_parameter_count():
    # [PAPER] 300 components, 5023 vertices
    assert decoder_parameter_count(300, 5023) == 4_535_769


@settings(max_examples=50, deadline=None)
@given(arrays(float, 2, elements=finite), arrays(float, 2, elements=finite), finite, finite)
def test_decode_is_affine(z1, z2, a, b):
    mdl = tiny_model()
    lhs = decode_linear(mdl, a * z1 + b * z2).vertices
    rhs = (a * decode_linear(mdl, z1).vertices + b * decode_linear(mdl, z2).vertices
           - (a + b - 1) * mdl.mean.reshape(-1, 3))
    assert np.abs(lhs - rhs).max() < 1e-9


def test_model_validation():
    mdl = tiny_model()
    with pytest.raises(GeometryError):
        LinearShapeModel(mdl.mean, mdl.shape_basis, mdl.expr_basis, mdl.faces, mdl.landmarks, -np.ones(4))
    zero_col = mdl.shape_basis.copy()
    zero_col[:, 0] = 0
    with pytest.raises(GeometryError):
        LinearShapeModel(mdl.mean, zero_col, mdl.expr_basis, mdl.faces, mdl.landmarks, np.ones(4))
    with pytest.raises(GeometryError):
        LinearShapeModel(mdl.mean, mdl.shape_basis, mdl.expr_basis, mdl.faces, np.array([9]), np.ones(4))


# -- projection -------------------------------------------------------------

def test_project_optical_axis():
    cam = Camera(100.0, 0.0, 0.0, 10, 10)
    assert np.allclose(project([0, 0, 1], RigidTransform(), cam), [0, 0])


def test_project_closed_form():
    # [DERIVED] 500 * 0.1 / 1 + 320 = 370
    cam = Camera(500.0, 320.0, 240.0, 640, 480)
    assert np.allclose(project([0.1, 0, 1], RigidTransform(), cam), [370, 240], atol=1e-12)


def test_project_behind_camera_is_flagged():
    cam = Camera(500.0, 320.0, 240.0, 640, 480)
    uv, front = pinhole(np.array([[0, 0, -1.0], [0, 0, 0.0], [0, 0, 2.0]]), cam)
    assert list(front) == [False, False, True]
    assert np.all(np.isnan(uv[:2])) and np.all(np.isfinite(uv[2]))


def test_camera_principal_point_inside():
    with pytest.raises(GeometryError):
        Camera(100.0, 700.0, 10.0, 640, 480)
    with pytest.raises(GeometryError):
        Camera(0.0, 10.0, 10.0, 640, 480)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_projection_scale_invariance(seed, s):
    rng = np.random.default_rng(seed)
    R = random_rotation(rng)
    x = rng.uniform(-0.1, 0.1, 3)
    t = np.array([*rng.uniform(-0.05, 0.05, 2), rng.uniform(0.3, 1.0)])
    cam = Camera.centered(800.0, 640, 480)
    p1 = project(x, RigidTransform(R, t), cam)
    p2 = project(s * x, RigidTransform(R, s * t), cam)
    assert np.abs(p1 - p2).max() < 1e-9


# -- rotations ----------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(arrays(float, 3, elements=st.floats(-3.0, 3.0)))
def test_axis_angle_round_trip(r):
    R = rodrigues(r)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
    assert np.linalg.det(R) == pytest.approx(1.0)
    r2 = axis_angle(R)
    assert np.linalg.norm(r2) <= np.pi + 1e-12
    assert np.abs(rodrigues(r2) - R).max() < 1e-8


@pytest.mark.parametrize("r", [np.zeros(3), np.array([1e-9, 0, 0]), np.array([0.3, -0.2, 0.5]),
                               np.array([2.0, 1.0, -0.5])])
def test_rodrigues_jacobian_matches_finite_differences(r):
    J = rodrigues_jacobian(r)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        num = (rodrigues(r + e) - rodrigues(r - e)) / (2 * h)
        assert np.abs(J[k] - num).max() < 1e-8


# -- transforms ---------------------------------------------------------------

def test_apply_transform_examples():
    p = np.array([[1.0, 0, 0]])
    assert np.array_equal(apply_transform(p, RigidTransform()), p)
    T = SimilarityTransform(2.0, rot_z(np.pi / 2), np.array([1.0, 0, 0]))
    assert np.allclose(apply_transform(p, T), [[1, 2, 0]], atol=1e-12)


def test_rotation_validation():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(GeometryError):
        SimilarityTransform(-1.0, np.eye(3), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 5.0))
def test_transform_properties(seed, s):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(6, 3))
    A = SimilarityTransform(s, random_rotation(rng), rng.normal(size=3))
    B = RigidTransform(random_rotation(rng), rng.normal(size=3))
    C = SimilarityTransform(1 / s, random_rotation(rng), rng.normal(size=3))
    assert np.abs(apply_transform(apply_transform(P, A), A.inverse()) - P).max() < 1e-12
    lhs = apply_transform(P, A.compose(B).compose(C))
    rhs = apply_transform(P, A.compose(B.compose(C)))
    assert np.abs(lhs - rhs).max() < 1e-12
    # composition applies the right operand first
    assert np.abs(apply_transform(P, A.compose(B)) - apply_transform(apply_transform(P, B), A)).max() < 1e-12
    d0 = np.linalg.norm(P[:, None] - P[None], axis=-1)
    dB = np.linalg.norm(apply_transform(P, B)[:, None] - apply_transform(P, B)[None], axis=-1)
    dA = np.linalg.norm(apply_transform(P, A)[:, None] - apply_transform(P, A)[None], axis=-1)
    assert np.abs(dB - d0).max() < 1e-9
    assert np.abs(dA - s * d0).max() < 1e-9


# -- normals --------------------------------------------------------------------

def test_single_triangle_normal():
    m = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    assert np.allclose(vertex_normals(m), [[0, 0, 1]] * 3)


def test_isolated_vertex_gets_default_normal():
    m = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0], [5, 5, 5]]), np.array([[0, 2, 1]]))
    n = vertex_normals(m)
    assert np.allclose(n[:3], [0, 0, -1]) and np.allclose(n[3], [0, 0, 1])


def test_cube_normals():
    # [DERIVED] every corner touches two equal-area fan triangles on each of its
    # three faces, so its normal is the normalised sum of the three face normals
    cube = unit_cube()
    n = vertex_normals(cube)
    assert np.abs(np.linalg.norm(n, axis=1) - 1).max() < 1e-9
    corners = cube.vertices[:8]
    assert np.abs(n[:8] - np.sign(corners) / np.sqrt(3)).max() < 1e-12
    centres = cube.vertices[8:]
    assert np.abs(n[8:] - centres / 0.5).max() < 1e-12


def test_model_normals_are_unit_and_outward(model):
    m = model.mean_mesh()
    n = vertex_normals(m)
    assert np.abs(np.linalg.norm(n, axis=1) - 1).max() < 1e-9
    c = m.vertices - m.vertices.mean(axis=0)
    assert np.all(np.sum(n * c, axis=1) > 0)


def test_mesh_is_immutable():
    m = Mesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 1.0
