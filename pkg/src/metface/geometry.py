"""Meshes, the linear morphable model, transforms, cameras and projection.

Coordinates are meters throughout. The camera looks down +z; pixel rows grow
with +y, so a model whose face points towards -z with +y pointing down (the
toy head produced by :mod:`metface.synthetic`) is seen frontally at identity
rotation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np


class GeometryError(ValueError):
    """Invalid geometric input (bad shapes, degenerate data, ...)."""


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    albedo: Optional[np.ndarray] = None

    def __post_init__(self):
        v = _frozen(self.vertices)
        f = _frozen(self.faces, np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError(f"vertices must be (N, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GeometryError("vertex coordinates must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.albedo is not None:
            a = _frozen(self.albedo)
            if a.shape != v.shape:
                raise GeometryError("albedo must be (N, 3)")
            object.__setattr__(self, "albedo", a)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner coordinates."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces, self.albedo)

    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2), sorted."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class LinearShapeModel:
    """Mean geometry plus linear shape/expression bases over a fixed topology.

    ``mean`` is a flat 3N vector (x0, y0, z0, x1, ...), bases are 3N x K.
    """

    mean: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    faces: np.ndarray
    landmarks: np.ndarray
    kappa: np.ndarray
    albedo_mean: Optional[np.ndarray] = None
    albedo_basis: Optional[np.ndarray] = None

    def __post_init__(self):
        mean = _frozen(self.mean).ravel()
        if mean.size % 3:
            raise GeometryError("mean must have 3N entries")
        n3 = mean.size
        B = _frozen(self.shape_basis).reshape(n3, -1)
        E = _frozen(self.expr_basis).reshape(n3, -1)
        for name, M in (("shape_basis", B), ("expr_basis", E)):
            if not np.all(np.isfinite(M)):
                raise GeometryError(f"{name} must be finite")
            if M.shape[1] and np.any(np.linalg.norm(M, axis=0) == 0):
                raise GeometryError(f"{name} has a zero column")
        if B.shape[1] > 300:
            raise GeometryError("at most 300 shape components are supported")
        kappa = _frozen(self.kappa).ravel()
        if kappa.size != n3 // 3 or np.any(kappa <= 0):
            raise GeometryError("kappa must hold one positive weight per vertex")
        faces = _frozen(self.faces, np.int64).reshape(-1, 3)
        lm = _frozen(self.landmarks, np.int64).ravel()
        if faces.size and (faces.min() < 0 or faces.max() >= n3 // 3):
            raise GeometryError("face index out of range")
        if lm.size and (lm.min() < 0 or lm.max() >= n3 // 3):
            raise GeometryError("landmark index out of range")
        for k, v in (("mean", mean), ("shape_basis", B), ("expr_basis", E),
                     ("kappa", kappa), ("faces", faces), ("landmarks", lm)):
            object.__setattr__(self, k, v)
        if self.albedo_mean is not None:
            am = _frozen(self.albedo_mean).ravel()
            if am.size != n3:
                raise GeometryError("albedo_mean must have 3N entries")
            ab = (np.zeros((n3, 0)) if self.albedo_basis is None
                  else _frozen(self.albedo_basis).reshape(n3, -1))
            object.__setattr__(self, "albedo_mean", am)
            object.__setattr__(self, "albedo_basis", _frozen(ab))

    @property
    def n_vertices(self) -> int:
        return self.mean.size // 3

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[1]

    @property
    def n_albedo(self) -> int:
        return 0 if self.albedo_basis is None else self.albedo_basis.shape[1]

    def mean_mesh(self) -> Mesh:
        return Mesh(self.mean.reshape(-1, 3), self.faces)

    def albedo(self, beta=None) -> np.ndarray:
        """Per-vertex RGB albedo (N, 3) from the linear albedo model."""
        if self.albedo_mean is None:
            raise GeometryError("model carries no albedo model")
        a = self.albedo_mean
        if beta is not None and self.n_albedo:
            a = a + self.albedo_basis @ np.asarray(beta, dtype=float)
        return a.reshape(-1, 3)


def decode_linear(model: LinearShapeModel, z, expr=None) -> Mesh:
    """Vertices ``A + B z + B_exp expr`` on the template faces."""
    z = np.asarray(z, dtype=float).ravel()
    if z.size != model.n_shape:
        raise GeometryError(f"expected {model.n_shape} shape coefficients, got {z.size}")
    x = model.mean + model.shape_basis @ z
    if expr is not None:
        expr = np.asarray(expr, dtype=float).ravel()
        if expr.size != model.n_expr:
            raise GeometryError(f"expected {model.n_expr} expression coefficients, got {expr.size}")
        x = x + model.expr_basis @ expr
    return Mesh(x.reshape(-1, 3), model.faces)


def decoder_parameter_count(n_components: int, n_vertices: int) -> int:
    """Weights plus bias of the single linear decoder layer."""
    return (n_components + 1) * n_vertices * 3


# --------------------------------------------------------------------------
# rotations

def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(r) -> np.ndarray:
    """Axis-angle vector to rotation matrix."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r)
    K = skew(r)
    if theta < 1e-8:
        # second-order Taylor expansion
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def rodrigues_jacobian(r) -> np.ndarray:
    """dR/dr as a (3, 3, 3) array, ``out[k] = dR/dr_k``.

    Uses the closed form of Gallego & Yezzi; reduces to the generators at 0.
    """
    r = np.asarray(r, dtype=float)
    theta2 = r @ r
    eye = np.eye(3)
    if theta2 < 1e-16:
        return np.stack([skew(eye[k]) for k in range(3)])
    R = rodrigues(r)
    K = skew(r)
    out = np.empty((3, 3, 3))
    for k in range(3):
        w = np.cross(r, (eye - R) @ eye[k])
        out[k] = (r[k] * K + skew(w)) / theta2 @ R
    return out


def axis_angle(R) -> np.ndarray:
    """Rotation matrix to axis-angle with angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(c)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * w
    if np.pi - theta < 1e-4:
        # near pi: axis from the symmetric part
        M = (R + np.eye(3)) / 2
        axis = M[np.argmax(np.diag(M))]
        axis = axis / np.linalg.norm(axis)
        if axis @ w < 0:
            axis = -axis
        return theta * axis
    return theta / (2 * np.sin(theta)) * w


def rot_x(angle):
    return rodrigues([angle, 0, 0])


def rot_y(angle):
    return rodrigues([0, angle, 0])


def rot_z(angle):
    return rodrigues([0, 0, angle])


def random_rotation(rng, max_angle=np.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rodrigues(axis * rng.uniform(0, max_angle))


# --------------------------------------------------------------------------
# transforms

def _check_rotation(R):
    R = _frozen(R).reshape(3, 3)
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) <= 0:
        raise GeometryError("R must be a proper rotation")
    return R


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))

    scale = 1.0

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other) -> "RigidTransform | SimilarityTransform":
        """``self ∘ other`` (apply ``other`` first)."""
        if isinstance(other, SimilarityTransform):
            return SimilarityTransform(1.0, self.rotation, self.translation).compose(other)
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError("scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(1 / self.scale, Rt, -Rt @ self.translation / self.scale)

    def compose(self, other) -> "SimilarityTransform":
        s2 = getattr(other, "scale", 1.0)
        return SimilarityTransform(
            self.scale * s2,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M


Transform = Union[RigidTransform, SimilarityTransform]


def apply_transform(points, T: Transform) -> np.ndarray:
    """``y = s R x + t`` for each row of ``points`` (s = 1 for rigid)."""
    p = np.asarray(points, dtype=float)
    return T.scale * p @ T.rotation.T + T.translation


def transform_mesh(mesh: Mesh, T: Transform) -> Mesh:
    return mesh.with_vertices(apply_transform(mesh.vertices, T))


# --------------------------------------------------------------------------
# camera

@dataclass(frozen=True)
class Camera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise GeometryError("focal length must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise GeometryError("principal point must lie inside the image")

    @classmethod
    def centered(cls, focal, width, height) -> "Camera":
        return cls(float(focal), width / 2.0, height / 2.0, int(width), int(height))

    def with_focal(self, focal) -> "Camera":
        return Camera(float(focal), self.cx, self.cy, self.width, self.height)


def pinhole(X, cam: Camera):
    """Project camera-frame points (..., 3). Returns (pixels, in_front mask).

    Points with Z <= 0 get NaN pixels and ``False`` in the mask.
    """
    X = np.asarray(X, dtype=float)
    Z = X[..., 2]
    front = Z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.focal * X[..., 0] / Z + cam.cx
        v = cam.focal * X[..., 1] / Z + cam.cy
    uv = np.stack([u, v], axis=-1)
    uv[~front] = np.nan
    return uv, front


def project(x, pose: RigidTransform, cam: Camera) -> np.ndarray:
    """Pixel position of ``pose`` applied to ``x``; points behind the camera are NaN."""
    X = np.asarray(x, dtype=float) @ pose.rotation.T + pose.translation
    return pinhole(X, cam)[0]


# --------------------------------------------------------------------------
# normals

DEFAULT_NORMAL = np.array([0.0, 0.0, 1.0])


def face_normals_unnormalized(vertices, faces) -> np.ndarray:
    """Cross products (p1 - p0) x (p2 - p0); norm is twice the area."""
    t = vertices[faces]
    return np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted unit vertex normals; isolated vertices get +z."""
    return _vertex_normals(mesh.vertices, mesh.faces)


def _vertex_normals(vertices, faces):
    fn = face_normals_unnormalized(vertices, faces)
    acc = np.zeros_like(vertices, dtype=float)
    for k in range(3):
        np.add.at(acc, faces[:, k], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    out = np.where(norm > 0, acc / np.where(norm > 0, norm, 1.0), DEFAULT_NORMAL)
    return out
