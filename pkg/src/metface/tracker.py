"""Analysis-by-synthesis expression tracking.

The face is the fixed identity shape plus a linear expression offset, posed
rigidly in front of a pinhole camera, coloured by a linear albedo model under
second-order spherical-harmonics lighting (Lambertian). The photometric term
samples the input image at the projections of the vertices that survive a
z-buffer depth test; the visible set is recomputed per evaluation but held
constant when differentiating.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .geometry import (Camera, LinearShapeModel, Mesh, axis_angle, face_normals_unnormalized, rodrigues,
                       rodrigues_jacobian)

log = logging.getLogger(__name__)

SH_C0 = 0.5 / np.sqrt(np.pi)
SH_C1 = np.sqrt(3 / (4 * np.pi))
SH_C2 = np.sqrt(15 / (4 * np.pi))
SH_C3 = np.sqrt(5 / (16 * np.pi))
SH_C4 = np.sqrt(15 / (16 * np.pi))
SH_BAND = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2])
RESIDUAL_ATOL = 1e-12  # colour residuals below this count as exact matches


class TrackingError(RuntimeError):
    pass


class EmptyVisibleSet(TrackingError):
    pass


# --------------------------------------------------------------------------
# state and inputs

@dataclass
class TrackerState:
    expr: np.ndarray
    albedo: np.ndarray
    rotation: np.ndarray  # axis-angle
    translation: np.ndarray  # m
    sh: np.ndarray  # (9, 3)
    focal: float

    def __post_init__(self):
        self.expr = np.asarray(self.expr, float).ravel()
        self.albedo = np.asarray(self.albedo, float).ravel()
        self.rotation = np.asarray(self.rotation, float).ravel()
        self.translation = np.asarray(self.translation, float).ravel()
        self.sh = np.asarray(self.sh, float).reshape(9, 3)
        self.focal = float(self.focal)

    GROUPS = ("expr", "albedo", "rotation", "translation", "sh", "focal")

    def sizes(self):
        return [self.expr.size, self.albedo.size, 3, 3, 27, 1]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.expr, self.albedo, self.rotation, self.translation,
                               self.sh.ravel(), [self.focal]])

    def with_vector(self, x) -> "TrackerState":
        parts = np.split(np.asarray(x, float), np.cumsum(self.sizes())[:-1])
        return TrackerState(parts[0], parts[1], parts[2], parts[3], parts[4], parts[5][0])

    def copy(self) -> "TrackerState":
        return self.with_vector(self.vector())

    def canonical(self) -> "TrackerState":
        """Same rotation with axis-angle norm below pi."""
        s = self.copy()
        if np.linalg.norm(s.rotation) >= np.pi:
            s.rotation = axis_angle(rodrigues(s.rotation))
        return s

    def to_dict(self) -> dict:
        return {"expr": self.expr.tolist(), "albedo": self.albedo.tolist(),
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "sh": self.sh.tolist(), "focal": self.focal}

    @classmethod
    def from_dict(cls, d) -> "TrackerState":
        return cls(d["expr"], d["albedo"], d["rotation"], d["translation"], d["sh"], d["focal"])


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    names: list
    landmarks: np.ndarray  # (L, 2) pixels
    conf: np.ndarray  # (L,)
    depth: Optional[np.ndarray] = None  # (H, W) m, non-finite or <= 0 where missing

    def __post_init__(self):
        self.image = np.asarray(self.image, float)
        self.landmarks = np.asarray(self.landmarks, float).reshape(-1, 2)
        self.conf = np.asarray(self.conf, float).ravel()


@dataclass
class EnergyWeights:
    dense: float = 1.0
    lmk: float = 0.05
    reg: float = 1e-4
    albedo_reg: float = 1.0  # lambda_beta inside E_reg


@dataclass
class EnergyBreakdown:
    dense: float
    lmk: float
    reg: float
    total: float
    weights: EnergyWeights
    n_visible: int

    def to_dict(self):
        return {"E_dense": self.dense, "E_lmk": self.lmk, "E_reg": self.reg, "total": self.total,
                "w_dense": self.weights.dense, "w_lmk": self.weights.lmk, "w_reg": self.weights.reg,
                "n_visible": self.n_visible}


@dataclass
class FaceRig:
    """Everything about the subject that stays fixed while tracking."""

    model: LinearShapeModel
    shape: np.ndarray  # (N, 3) identity shape, model frame
    width: int
    height: int
    landmark_index: dict  # landmark name -> vertex index
    cx: Optional[float] = None
    cy: Optional[float] = None
    depth_eps: float = 1e-2  # relative depth-test tolerance
    footprint: bool = True  # visibility over the whole bilinear footprint (see visible_from_raster)
    cull_backfaces: bool = True  # the face model is a closed, outward-oriented surface
    background: tuple = (0.25, 0.25, 0.25)

    def __post_init__(self):
        self.shape = np.asarray(self.shape.vertices if isinstance(self.shape, Mesh) else self.shape,
                                float).reshape(-1, 3)
        if self.shape.shape[0] != self.model.n_vertices:
            raise ValueError("shape is not in model topology")
        if self.model.albedo_mean is None:
            raise ValueError("tracking needs a model with an albedo model")
        self.cx = self.width / 2 if self.cx is None else self.cx
        self.cy = self.height / 2 if self.cy is None else self.cy

    def camera(self, focal) -> Camera:
        return Camera(float(focal), self.cx, self.cy, self.width, self.height)

    def landmark_vertices(self, names):
        missing = [n for n in names if n not in self.landmark_index]
        if missing:
            raise KeyError(f"unknown landmarks: {missing[:5]}")
        return np.array([self.landmark_index[n] for n in names], dtype=np.int64)


# --------------------------------------------------------------------------
# spherical harmonics

def sh_basis(n) -> np.ndarray:
    """The 9 real SH basis functions (bands 0-2) at unit directions (..., 3)."""
    n = np.asarray(n, float)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y, SH_C1 * z, SH_C1 * x,
        SH_C2 * x * y, SH_C2 * y * z, SH_C3 * (3 * z * z - 1), SH_C2 * x * z, SH_C4 * (x * x - y * y),
    ], axis=-1)


def sh_basis_vjp(n, g_Y) -> np.ndarray:
    """Pull a gradient on the 9 basis values back to the direction components."""
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    g = g_Y
    gx = SH_C1 * g[..., 3] + SH_C2 * (y * g[..., 4] + z * g[..., 7]) + 2 * SH_C4 * x * g[..., 8]
    gy = SH_C1 * g[..., 1] + SH_C2 * (x * g[..., 4] + z * g[..., 5]) - 2 * SH_C4 * y * g[..., 8]
    gz = SH_C1 * g[..., 2] + SH_C2 * (y * g[..., 5] + x * g[..., 7]) + 6 * SH_C3 * z * g[..., 6]
    return np.stack([gx, gy, gz], axis=-1)


def sh_shade(normal, albedo, sh) -> np.ndarray:
    """Lambertian SH shading ``albedo * sum_k sh[k] Y_k(normal)``, clamped at 0."""
    Y = sh_basis(normal)
    return np.maximum(np.asarray(albedo, float) * (Y @ np.asarray(sh, float).reshape(9, 3)), 0.0)


# --------------------------------------------------------------------------
# rasterisation

@dataclass
class Raster:
    depth: np.ndarray  # (H, W), inf where empty
    face: np.ndarray  # (H, W), -1 where empty
    bary: np.ndarray  # (H, W, 3) screen-space barycentrics


def rasterize(X, faces, cam: Camera, cull_backfaces=False) -> Raster:
    """Z-buffer rasterisation of camera-frame triangles at pixel centres.

    Depth is interpolated perspective-correctly (1/Z is affine in screen
    space). Triangles with any vertex at Z <= 0 are skipped. Ties go to the
    lower face index. Back-face culling is exact for closed, outward-oriented
    meshes seen from outside and roughly halves the work.
    """
    H, W = cam.height, cam.width
    depth = np.full((H, W), np.inf)
    face_id = np.full((H, W), -1, np.int64)
    bary_img = np.zeros((H, W, 3))
    X = np.asarray(X, float)
    Z = X[:, 2]
    ok = np.all(Z[faces] > 1e-9, axis=1)
    fidx = np.nonzero(ok)[0]
    if fidx.size == 0:
        return Raster(depth, face_id, bary_img)
    uv = np.empty((len(X), 2))
    good = Z > 1e-9
    uv[good, 0] = cam.focal * X[good, 0] / Z[good] + cam.cx
    uv[good, 1] = cam.focal * X[good, 1] / Z[good] + cam.cy
    T = uv[faces[fidx]]  # (F, 3, 2)
    if cull_backfaces:
        # front-facing triangles (outward normal towards the camera) wind clockwise in pixel space
        e1, e2 = T[:, 1] - T[:, 0], T[:, 2] - T[:, 0]
        front = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] < 0
        fidx, T = fidx[front], T[front]
    x0 = np.clip(np.ceil(T[:, :, 0].min(axis=1) - 0.5), 0, W).astype(np.int64)
    x1 = np.clip(np.floor(T[:, :, 0].max(axis=1) - 0.5), -1, W - 1).astype(np.int64)
    y0 = np.clip(np.ceil(T[:, :, 1].min(axis=1) - 0.5), 0, H).astype(np.int64)
    y1 = np.clip(np.floor(T[:, :, 1].max(axis=1) - 0.5), -1, H - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    count = nx * ny
    keep = count > 0
    fidx, T, x0, y0, nx, count = fidx[keep], T[keep], x0[keep], y0[keep], nx[keep], count[keep]
    if fidx.size == 0:
        return Raster(depth, face_id, bary_img)
    tri = np.repeat(np.arange(len(fidx)), count)
    local = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    px = x0[tri] + local % nx[tri]
    py = y0[tri] + local // nx[tri]
    cxp, cyp = px + 0.5, py + 0.5
    a, b, c = T[tri, 0], T[tri, 1], T[tri, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        w0 = ((b[:, 0] - cxp) * (c[:, 1] - cyp) - (b[:, 1] - cyp) * (c[:, 0] - cxp)) / area
        w1 = ((c[:, 0] - cxp) * (a[:, 1] - cyp) - (c[:, 1] - cyp) * (a[:, 0] - cxp)) / area
    w2 = 1 - w0 - w1
    inside = (area != 0) & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    tri, px, py = tri[inside], px[inside], py[inside]
    bw = np.column_stack([w0[inside], w1[inside], w2[inside]])
    Zf = Z[faces[fidx[tri]]]
    zpix = 1.0 / np.sum(bw / Zf, axis=1)
    pix = py * W + px
    flat_depth = depth.reshape(-1)
    np.minimum.at(flat_depth, pix, zpix)
    win = zpix == flat_depth[pix]
    flat_face = face_id.reshape(-1)
    flat_face[:] = np.iinfo(np.int64).max
    np.minimum.at(flat_face, pix[win], fidx[tri[win]])
    flat_face[flat_face == np.iinfo(np.int64).max] = -1
    win &= fidx[tri] == flat_face[pix]
    bary_img.reshape(-1, 3)[pix[win]] = bw[win]
    return Raster(depth, face_id, bary_img)


def visible_from_raster(uv, Z, raster: Raster, depth_eps=1e-2, footprint=False) -> np.ndarray:
    """Vertices inside the image whose depth is within ``depth_eps`` (relative)
    of the z-buffer at their pixel; an empty pixel does not occlude.

    With ``footprint`` the test is applied to all four pixels of the bilinear
    sampling footprint instead, and each of them must be covered by the
    surface, so samples never blend in background or an occluding contour.
    """
    H, W = raster.depth.shape
    vis = np.zeros(len(Z), bool)
    with np.errstate(invalid="ignore"):
        if not footprint:
            j, i = np.floor(uv[:, 0]), np.floor(uv[:, 1])
            inside = (Z > 0) & (j >= 0) & (j < W) & (i >= 0) & (i < H)
            ii, jj = i[inside].astype(np.int64), j[inside].astype(np.int64)
            vis[inside] = Z[inside] <= raster.depth[ii, jj] * (1 + depth_eps)
            return vis
        j, i = np.floor(uv[:, 0] - 0.5), np.floor(uv[:, 1] - 0.5)
        inside = (Z > 0) & (j >= 0) & (j < W - 1) & (i >= 0) & (i < H - 1)
    ii, jj = i[inside].astype(np.int64), j[inside].astype(np.int64)
    zl = Z[inside] / (1 + depth_eps)
    ok = np.ones(ii.size, bool)
    for di in (0, 1):
        for dj in (0, 1):
            zb = raster.depth[ii + di, jj + dj]
            ok &= np.isfinite(zb) & (zl <= zb)
    vis[inside] = ok
    return vis


def _pose_points(points, state: TrackerState):
    R = rodrigues(state.rotation)
    return points @ R.T + state.translation, R


def _project(X, focal, cx, cy):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.column_stack([focal * X[:, 0] / X[:, 2] + cx, focal * X[:, 1] / X[:, 2] + cy])


@dataclass
class VisibleSet:
    index: np.ndarray  # vertex ids
    uv: np.ndarray  # (|V|, 2)
    depth: np.ndarray  # (|V|,)


def rasterize_visible(mesh: Mesh, pose, cam: Camera, depth_eps=1e-2) -> VisibleSet:
    """Visible vertices of ``mesh`` under ``pose`` (RigidTransform or TrackerState)."""
    if isinstance(pose, TrackerState):
        X, _ = _pose_points(mesh.vertices, pose)
    else:
        X = mesh.vertices @ pose.rotation.T + pose.translation
    uv = _project(X, cam.focal, cam.cx, cam.cy)
    vis = visible_from_raster(uv, X[:, 2], rasterize(X, mesh.faces, cam), depth_eps)
    idx = np.nonzero(vis)[0]
    return VisibleSet(idx, uv[idx], X[idx, 2])


def visible_ray_cast(X, faces, cam: Camera, depth_eps=1e-2) -> np.ndarray:
    """Brute-force visibility oracle: cast the ray from the camera centre to
    each vertex and test every non-incident triangle (Moller-Trumbore)."""
    X = np.asarray(X, float)
    uv = _project(X, cam.focal, cam.cx, cam.cy)
    vis = np.zeros(len(X), bool)
    tri = X[faces]
    e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    for v in range(len(X)):
        Zv = X[v, 2]
        if not (Zv > 0 and 0 <= uv[v, 0] < cam.width and 0 <= uv[v, 1] < cam.height):
            continue
        d = X[v] / Zv  # ray with unit depth step
        others = ~np.any(faces == v, axis=1)
        p = np.cross(d, e2[others])
        det = np.einsum("ij,ij->i", e1[others], p)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s = -tri[others, 0]
            bu = np.einsum("ij,ij->i", s, p) * inv
            q = np.cross(s, e1[others])
            bv = (q @ d) * inv
            t = np.einsum("ij,ij->i", e2[others], q) * inv
        hit = (det != 0) & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t > 0)
        vis[v] = not np.any(Zv > t[hit] * (1 + depth_eps))
    return vis


# --------------------------------------------------------------------------
# image sampling

def bilinear(image, uv):
    """Sample (H, W, C) ``image`` at continuous pixel positions (pixel centres
    at integer + 0.5), clamping at the border. Returns values and d/du, d/dv."""
    H, W = image.shape[:2]
    x = uv[:, 0] - 0.5
    y = uv[:, 1] - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = np.clip(x0, 0, W - 1), np.clip(x0 + 1, 0, W - 1)
    ya, yb = np.clip(y0, 0, H - 1), np.clip(y0 + 1, 0, H - 1)
    I00, I10 = image[ya, xa], image[ya, xb]
    I01, I11 = image[yb, xa], image[yb, xb]
    val = (1 - fx) * (1 - fy) * I00 + fx * (1 - fy) * I10 + (1 - fx) * fy * I01 + fx * fy * I11
    du = (1 - fy) * (I10 - I00) + fy * (I11 - I01)
    dv = (1 - fx) * (I01 - I00) + fx * (I11 - I10)
    return val, du, dv


# --------------------------------------------------------------------------
# energy

def _normals_forward(p, faces):
    cf = face_normals_unnormalized(p, faces)
    m = np.zeros_like(p)
    for k in range(3):
        np.add.at(m, faces[:, k], cf)
    norm = np.linalg.norm(m, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    n = np.where(norm[:, None] > 0, m / safe[:, None], [0.0, 0.0, 1.0])
    return n, (p, faces, n, norm, safe)


def _normals_backward(cache, g_n):
    p, faces, n, norm, safe = cache
    g_m = (g_n - n * np.sum(n * g_n, axis=1, keepdims=True)) / safe[:, None]
    g_m[norm == 0] = 0.0
    g_c = g_m[faces[:, 0]] + g_m[faces[:, 1]] + g_m[faces[:, 2]]
    u = p[faces[:, 1]] - p[faces[:, 0]]
    v = p[faces[:, 2]] - p[faces[:, 0]]
    g_u = np.cross(v, g_c)
    g_v = np.cross(g_c, u)
    g_p = np.zeros_like(p)
    np.add.at(g_p, faces[:, 1], g_u)
    np.add.at(g_p, faces[:, 2], g_v)
    np.add.at(g_p, faces[:, 0], -(g_u + g_v))
    return g_p


@dataclass
class Evaluation:
    energy: EnergyBreakdown
    grad: Optional[TrackerState] = None
    visible: Optional[np.ndarray] = None
    signature: tuple = ()  # the energy is smooth while this stays unchanged


def vertex_geometry(state: TrackerState, rig: FaceRig):
    """Model-frame vertices with expression applied (N, 3)."""
    p = rig.shape
    if state.expr.size:
        p = p + (rig.model.expr_basis @ state.expr).reshape(-1, 3)
    return p


def vertex_colors(state: TrackerState, rig: FaceRig, p=None):
    """Per-vertex shaded colours (N, 3) for ``state``."""
    p = vertex_geometry(state, rig) if p is None else p
    R = rodrigues(state.rotation)
    n, _ = _normals_forward(p, rig.model.faces)
    return sh_shade(n @ R.T, rig.model.albedo(state.albedo), state.sh)


def compute_visible(state: TrackerState, rig: FaceRig) -> np.ndarray:
    p = vertex_geometry(state, rig)
    X, _ = _pose_points(p, state)
    cam = rig.camera(state.focal)
    uv = _project(X, cam.focal, cam.cx, cam.cy)
    return _visible(X, uv, rig, cam)


def _visible(X, uv, rig: FaceRig, cam: Camera) -> np.ndarray:
    ras = rasterize(X, rig.model.faces, cam, rig.cull_backfaces)
    return np.nonzero(visible_from_raster(uv, X[:, 2], ras, rig.depth_eps, rig.footprint))[0]


def evaluate(state: TrackerState, frame: Frame, rig: FaceRig, weights: EnergyWeights,
             visible=None, need_grad=True, lmk_index=None) -> Evaluation:
    """Energy (and analytic gradient) of ``state`` on ``frame``.

    ``E_dense = sum_{i in V} |I(pi(R p_i + t)) - c_i|_1 / |V|``,
    ``E_lmk = sum_l conf_l |pi(R p_l + t) - u_l|^2 / L``,
    ``E_reg = |expr|^2 + albedo_reg |albedo|^2``. ``visible`` overrides the
    rasterised visible set (it is treated as constant either way).
    """
    model = rig.model
    faces = model.faces
    p = vertex_geometry(state, rig)
    R = rodrigues(state.rotation)
    X = p @ R.T + state.translation
    f = state.focal
    uv = _project(X, f, rig.cx, rig.cy)
    if visible is None:
        cam = rig.camera(f)
        visible = _visible(X, uv, rig, cam)
    V = np.asarray(visible, np.int64)
    if V.size == 0:
        raise EmptyVisibleSet("no visible vertices")

    # dense colour term
    n, ncache = _normals_forward(p, faces)
    nw = n @ R.T
    a = model.albedo(state.albedo)
    Y = sh_basis(nw)
    shading = Y @ state.sh
    raw = a * shading
    c = np.maximum(raw, 0.0)
    I, dIu, dIv = bilinear(frame.image, uv[V])
    e = I - c[V]
    E_dense = float(np.abs(e).sum() / V.size)

    # landmark term
    if lmk_index is None:
        lmk_index = rig.landmark_vertices(frame.names)
    L = len(lmk_index)
    if L:
        dl = uv[lmk_index] - frame.landmarks
        E_lmk = float(np.sum(frame.conf * np.sum(dl * dl, axis=1)) / L)
    else:
        E_lmk = 0.0
    E_reg = float(state.expr @ state.expr + weights.albedo_reg * state.albedo @ state.albedo)
    total = weights.dense * E_dense + weights.lmk * E_lmk + weights.reg * E_reg
    br = EnergyBreakdown(E_dense, E_lmk, E_reg, total, weights, int(V.size))
    # residuals at round-off level take the zero subgradient of |.|
    s_e = np.where(np.abs(e) > RESIDUAL_ATOL, np.sign(e), 0.0)
    sig = (s_e, raw[V] > 0, np.floor(uv[V] - 0.5))
    if not need_grad:
        return Evaluation(br, None, V, sig)

    ge = weights.dense * s_e / V.size
    g_uv = np.zeros_like(uv)
    g_uv[V, 0] = np.sum(ge * dIu, axis=1)
    g_uv[V, 1] = np.sum(ge * dIv, axis=1)
    g_c = np.zeros_like(c)
    g_c[V] = -ge
    g_raw = g_c * (raw > 0)
    g_a = g_raw * shading
    g_shading = g_raw * a
    g_sh = Y.T @ g_shading
    g_nw = sh_basis_vjp(nw, g_shading @ state.sh.T)
    g_n = g_nw @ R
    g_R = g_nw.T @ n
    if L:
        np.add.at(g_uv, lmk_index, weights.lmk * 2 * frame.conf[:, None] * dl / L)

    Zc = X[:, 2]
    gu, gv = g_uv[:, 0], g_uv[:, 1]
    g_X = np.column_stack([gu * f / Zc, gv * f / Zc, -(gu * f * X[:, 0] + gv * f * X[:, 1]) / Zc ** 2])
    g_X[~np.isfinite(g_X)] = 0.0
    g_f = float(np.sum(np.nan_to_num(gu * X[:, 0] / Zc + gv * X[:, 1] / Zc)))
    g_t = g_X.sum(axis=0)
    g_R += g_X.T @ p
    g_p = g_X @ R + _normals_backward(ncache, g_n)
    dR = rodrigues_jacobian(state.rotation)
    g_r = np.einsum("kij,ij->k", dR, g_R)
    g_expr = model.expr_basis.T @ g_p.ravel() + weights.reg * 2 * state.expr
    g_alb = (model.albedo_basis.T @ g_a.ravel() if model.n_albedo else np.zeros(0))
    g_alb = g_alb + weights.reg * 2 * weights.albedo_reg * state.albedo
    grad = TrackerState(g_expr, g_alb, g_r, g_t, g_sh, g_f)
    return Evaluation(br, grad, V, sig)


def energy(state, frame, rig, weights, visible=None) -> EnergyBreakdown:
    return evaluate(state, frame, rig, weights, visible, need_grad=False).energy


def energy_grad(state, frame, rig, weights, visible=None) -> TrackerState:
    """Gradient of the total energy as a :class:`TrackerState`-shaped object."""
    return evaluate(state, frame, rig, weights, visible, need_grad=True).grad


def check_gradient(state, frame, rig, weights, h=1e-5, visible=None):
    """Central differences against :func:`energy_grad` with the visible set fixed.

    A coordinate is skipped when either perturbation crosses a kink of the
    piecewise-smooth energy (L1 sign, colour clamp, bilinear cell). Returns
    ``(max_rel_error, rel_errors, skipped)`` with NaN for skipped coordinates.
    """
    base = evaluate(state, frame, rig, weights, visible)
    V = base.visible
    g = base.grad.vector()
    x = state.vector()
    errs = np.full(x.size, np.nan)
    for i in range(x.size):
        vals = []
        for sgn in (1, -1):
            xp = x.copy()
            xp[i] += sgn * h
            ev = evaluate(state.with_vector(xp), frame, rig, weights, V, need_grad=False)
            if not all(np.array_equal(a, b) for a, b in zip(ev.signature, base.signature)):
                break
            vals.append(ev.energy.total)
        else:
            num = (vals[0] - vals[1]) / (2 * h)
            errs[i] = abs(g[i] - num) / max(1e-8, abs(num))
    skipped = int(np.isnan(errs).sum())
    return (float(np.nanmax(errs)) if skipped < x.size else float("nan")), errs, skipped


# --------------------------------------------------------------------------
# rendering

@dataclass
class Rendering:
    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), inf on background
    mask: np.ndarray  # (H, W) bool face pixels
    landmarks: np.ndarray  # (L, 2) projected model landmarks
    colors: np.ndarray  # (N, 3) vertex colours


def render(state: TrackerState, shape, model: LinearShapeModel, cam: Camera,
           background=(0.25, 0.25, 0.25), cull_backfaces=True) -> Rendering:
    """Full-image render with perspective-correct Gouraud colour interpolation."""
    S = shape.vertices if isinstance(shape, Mesh) else np.asarray(shape, float)
    rig = FaceRig(model, S, cam.width, cam.height, {}, cam.cx, cam.cy)
    state = TrackerState(state.expr, state.albedo, state.rotation, state.translation, state.sh, cam.focal)
    p = vertex_geometry(state, rig)
    X, _ = _pose_points(p, state)
    colors = vertex_colors(state, rig, p)
    ras = rasterize(X, model.faces, cam, cull_backfaces)
    mask = ras.face >= 0
    img = np.empty((cam.height, cam.width, 3))
    img[:] = background
    f = model.faces[ras.face[mask]]
    b = ras.bary[mask] / X[f, 2]
    b /= b.sum(axis=1, keepdims=True)
    img[mask] = np.einsum("pk,pkc->pc", b, colors[f])
    uv = _project(X, cam.focal, cam.cx, cam.cy)
    return Rendering(img, ras.depth, mask, uv[model.landmarks], colors)


# --------------------------------------------------------------------------
# optimisation

@dataclass
class TrackConfig:
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    first_lr: float = 1e-2
    lr: float = 5e-3
    first_iterations: int = 200
    iterations: int = 50
    # per-group multipliers on the base learning rate (parameter scales differ: m, rad, px)
    lr_scale: dict = field(default_factory=lambda: {
        "expr": 1.0, "albedo": 3.0, "rotation": 0.1, "translation": 0.01, "sh": 3.0, "focal": 20.0})
    lr_final: float = 0.1  # step size decays linearly to this fraction within each frame
    initial_focal: Optional[float] = None  # default: image width * 2
    optimize_focal: bool = True
    # re-solve pose and expression from landmarks (focal fixed) before each
    # frame's Adam run; Adam alone needs far more than 50 steps to follow
    # inter-frame head motion
    landmark_warm_start: bool = True
    seed: int = 0


def _group_mask(state: TrackerState, groups, scale: dict):
    lr = []
    for g, size in zip(TrackerState.GROUPS, state.sizes()):
        lr.append(np.full(size, scale.get(g, 1.0) if g in groups else 0.0))
    return np.concatenate(lr)


def adam_optimize(state: TrackerState, frame: Frame, rig: FaceRig, weights: EnergyWeights,
                  groups, lr: float, iterations: int, lr_scale: dict, lr_final: float = 1.0):
    """Adam over the parameter ``groups``; returns the best state seen and the
    per-iteration best-so-far energy (non-increasing)."""
    lmk_index = rig.landmark_vertices(frame.names)
    x = state.vector()
    step = lr * _group_mask(state, groups, lr_scale)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best, best_E, best_br = x.copy(), np.inf, None
    trace = []
    for it in range(iterations + 1):
        ev = evaluate(state.with_vector(x), frame, rig, weights, lmk_index=lmk_index,
                      need_grad=it < iterations)
        if ev.energy.total < best_E:
            best, best_E, best_br = x.copy(), ev.energy.total, ev.energy
        trace.append(best_E)
        if it == iterations:
            break
        g = ev.grad.vector()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** (it + 1))
        vh = v / (1 - b2 ** (it + 1))
        decay = 1.0 - (1.0 - lr_final) * it / max(iterations - 1, 1)
        x = x - decay * step * mh / (np.sqrt(vh) + eps)
    return state.with_vector(best).canonical(), best_br, trace


def fit_pose_landmarks(frame: Frame, rig: FaceRig, focal=None, optimize_focal=True,
                       weights: EnergyWeights | None = None, fit_expression=True,
                       init: TrackerState | None = None):
    """Pose, focal and expression from 2D landmarks by nonlinear least squares.

    Minimises the landmark and expression-prior parts of the energy, starting
    from ``init`` when given (its focal is used unless ``focal`` is passed).
    Returns ``(rotation, translation, focal, expr, rms_px)``.
    """
    weights = weights or EnergyWeights()
    idx = rig.landmark_vertices(frame.names)
    L = len(idx)
    if L < 4:
        raise TrackingError("need at least 4 landmarks")
    P0 = rig.shape[idx]
    Bl = rig.model.expr_basis.reshape(-1, 3, rig.model.n_expr)[idx] if fit_expression else None
    ke = rig.model.n_expr if fit_expression else 0
    w = np.sqrt(np.maximum(frame.conf, 0))
    prior = np.sqrt(weights.reg * L / weights.lmk) if weights.lmk > 0 else 0.0
    if focal is None:
        focal = init.focal if init is not None else 2.0 * rig.width
    f0 = float(focal)
    spread2d = np.sqrt(np.sum(np.var(frame.landmarks, axis=0)))
    spread3d = np.sqrt(np.sum(np.var(P0[:, :2], axis=0)))
    if spread2d <= 0 or spread3d <= 0:
        raise TrackingError("degenerate landmark configuration")
    tz = f0 * spread3d / spread2d
    c2 = frame.landmarks.mean(axis=0)
    t0 = np.array([(c2[0] - rig.cx) * tz / f0, (c2[1] - rig.cy) * tz / f0, tz]) - P0.mean(axis=0)

    def unpack(x):
        f = x[6 + ke] if optimize_focal else f0
        return x[:3], x[3:6], x[6:6 + ke], f

    def resid(x):
        r, t, e, f = unpack(x)
        P = P0 + Bl @ e if ke else P0
        Xc = P @ rodrigues(r).T + t
        d = (_project(Xc, f, rig.cx, rig.cy) - frame.landmarks) * w[:, None]
        return np.concatenate([d.ravel(), prior * e])

    opts = dict(method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=5000)
    # rigid first with the focal fixed: focal and depth are nearly degenerate
    if init is not None:
        e0 = init.expr if ke else np.zeros(0)
        x = np.r_[init.rotation, init.translation, e0, [f0] if optimize_focal else []]
    else:
        x = np.r_[np.zeros(3), t0, np.zeros(ke), [f0] if optimize_focal else []]
        rigid = least_squares(lambda y: resid(np.r_[y, x[6:]]), x[:6], **opts)
        x[:6] = rigid.x
    sol = least_squares(resid, x, **opts)
    x = sol.x
    J = sol.jac
    if np.linalg.matrix_rank(J, tol=1e-10 * np.abs(J).max()) < J.shape[1]:
        raise TrackingError("landmark pose solve is degenerate")
    r, t, e, f = unpack(x)
    if f <= 0 or t[2] <= 0:
        raise TrackingError("landmark pose solve produced an invalid camera")
    d = sol.fun[:2 * L].reshape(-1, 2) / np.maximum(w, 1e-12)[:, None]
    rms = float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
    return r, t, float(f), (e if ke else np.zeros(rig.model.n_expr)), rms


def init_first_frame(frame: Frame, rig: FaceRig, cfg: TrackConfig | None = None):
    """Pose and focal from landmarks, then Adam over albedo, SH, expression,
    pose and focal on the full energy, then one :func:`track_step`.

    Returns ``(state, breakdown, trace)``; ``trace`` is best-so-far energy.
    """
    cfg = cfg or TrackConfig()
    model = rig.model
    r, t, f, e, _ = fit_pose_landmarks(frame, rig, focal=cfg.initial_focal, optimize_focal=cfg.optimize_focal,
                                       weights=cfg.weights)
    state = TrackerState(e, np.zeros(model.n_albedo), r, t, np.zeros((9, 3)), f)
    # ambient-only lighting matched to the mean image colour at visible vertices
    V = compute_visible(state, rig)
    if V.size == 0:
        raise EmptyVisibleSet("face not visible after landmark pose fit")
    uv = _project(_pose_points(vertex_geometry(state, rig), state)[0][V], f, rig.cx, rig.cy)
    I, _, _ = bilinear(frame.image, uv)
    a = model.albedo()[V]
    state.sh[0] = I.mean(axis=0) / (a.mean(axis=0) * SH_C0)
    groups = {"albedo", "sh", "expr", "rotation", "translation"} | ({"focal"} if cfg.optimize_focal else set())
    state, br, trace = adam_optimize(state, frame, rig, cfg.weights, groups, cfg.first_lr,
                                     cfg.first_iterations, cfg.lr_scale, cfg.lr_final)
    # finish with one tracking update so that a static sequence is stationary
    state, br, trace2 = track_step(state, frame, rig, cfg)
    return state, br, trace + trace2[1:]


TRACK_GROUPS = frozenset({"expr", "rotation", "translation", "sh"})


def track_step(prev: TrackerState, frame: Frame, rig: FaceRig, cfg: TrackConfig):
    """One per-frame update from ``prev`` with albedo and focal frozen.

    Returns ``(state, breakdown, trace)``.
    """
    start = prev
    if cfg.landmark_warm_start:
        try:
            cand = prev.copy()
            cand.rotation, cand.translation, _, cand.expr, _ = fit_pose_landmarks(
                frame, rig, optimize_focal=False, weights=cfg.weights, init=prev)
            # keep whichever start has the lower full energy
            if energy(cand, frame, rig, cfg.weights).total < energy(prev, frame, rig, cfg.weights).total:
                start = cand
        except TrackingError as exc:
            log.warning("landmark warm start failed (%s)", exc)
    return adam_optimize(start, frame, rig, cfg.weights, TRACK_GROUPS, cfg.lr, cfg.iterations,
                         cfg.lr_scale, cfg.lr_final)


@dataclass
class TrackResult:
    states: list
    energies: list
    flags: list  # per frame: "" or a failure note
    traces: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"frames": [{"state": s.to_dict(), "energy": (e.to_dict() if e is not None else None), "flag": f}
                           for s, e, f in zip(self.states, self.energies, self.flags)]}


def track(frames, rig: FaceRig, cfg: TrackConfig | None = None, init: TrackerState | None = None) -> TrackResult:
    """Sequential tracking: frame 0 by :func:`init_first_frame` (or a
    :func:`track_step` from ``init``), every later frame by a
    :func:`track_step` from the previous result."""
    cfg = cfg or TrackConfig()
    frames = list(frames)
    if not frames:
        return TrackResult([], [], [])
    def step(prev, k, fr):
        try:
            state, br, trace = track_step(prev, fr, rig, cfg)
            return state, br, trace, ""
        except EmptyVisibleSet as exc:
            log.warning("frame %d: %s; carrying state forward", k, exc)
            return prev.copy(), None, [], f"empty visible set: {exc}"

    if init is None:
        state, br, trace = init_first_frame(frames[0], rig, cfg)
        flag = ""
    else:
        state, br, trace, flag = step(init, 0, frames[0])
    states, energies, flags, traces = [state], [br], [flag], [trace]
    for k, fr in enumerate(frames[1:], start=1):
        state, br, trace, flag = step(states[-1], k, fr)
        states.append(state)
        energies.append(br)
        flags.append(flag)
        traces.append(trace)
    return TrackResult(states, energies, flags, traces)


# --------------------------------------------------------------------------
# evaluation

def photometric_rmse(rendered, reference, mask) -> float:
    """RMSE over masked pixels and channels on the 0-255 scale."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("no pixels to compare")
    d = (np.asarray(rendered, float) - np.asarray(reference, float))[mask] * 255.0
    return float(np.sqrt(np.mean(d * d)))


def depth_rmse(rendered, reference) -> float:
    """RMSE (m) over pixels where both depths exist (finite and positive)."""
    r = np.asarray(rendered, float)
    g = np.asarray(reference, float)
    both = np.isfinite(r) & np.isfinite(g) & (r > 0) & (g > 0)
    if not both.any():
        raise ValueError("no overlapping depth pixels")
    d = r[both] - g[both]
    return float(np.sqrt(np.mean(d * d)))


def eval_rmse(states, frames, rig: FaceRig):
    """Per-frame photometric RMSE (0-255, rendered face pixels) and depth RMSE
    (m, or NaN for frames without reference depth)."""
    photo, depth = [], []
    for st, fr in zip(states, frames):
        r = render(st, rig.shape, rig.model, rig.camera(st.focal), rig.background)
        photo.append(photometric_rmse(r.image, fr.image, r.mask))
        depth.append(depth_rmse(r.depth, fr.depth) if fr.depth is not None else float("nan"))
    return np.array(photo), np.array(depth)
