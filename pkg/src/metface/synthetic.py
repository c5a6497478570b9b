"""Synthetic stand-ins for the morphable model, scan cohorts and video
sequences. Everything is a deterministic function of ``SyntheticSpec.seed``."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .alignment import ScanCloud
from .config import from_dict
from .geometry import (Camera, LinearShapeModel, Mesh, RigidTransform, apply_transform, decode_linear,
                       random_rotation, rodrigues)

FACE_WEIGHT, HEAD_WEIGHT, EYE_EAR_WEIGHT = 150.0, 1.0, 0.01


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_identities: int = 10
    n_shape: int = 10
    n_expr: int = 5
    n_albedo: int = 5
    subdivisions: int = 3  # icosphere level; 3 -> 642 vertices
    n_landmarks: int = 20
    shape_std: float = 0.1
    feature_dim: int = 64
    feature_noise: float = 0.05
    samples_per_identity: int = 1
    heldout_per_identity: int = 1
    scan_points: int = 4000
    scan_noise_mm: float = 0.0
    landmark_noise_mm: float = 0.0
    landmark_noise_px: float = 0.0
    scale_perturbation: float = 1.0
    n_frames: int = 20
    image_size: int = 256
    focal: float = 560.0
    distance: float = 0.5
    expr_amplitude: float = 0.15
    expr_period: float = 10.0
    yaw_amplitude_deg: float = 8.0

    def __post_init__(self):
        n = 10 * 4 ** self.subdivisions + 2
        if not 0 < self.n_shape <= min(300, 3 * n - 6 - self.n_expr):
            raise ValueError("invalid number of shape components for the mesh size")
        if self.n_landmarks < 4:
            raise ValueError("need at least 4 landmarks")
        if min(self.n_identities, self.scan_points, self.n_frames, self.image_size) < 1:
            raise ValueError("counts must be positive")


# --------------------------------------------------------------------------
# geometry helpers

def icosphere(subdivisions: int):
    """Unit icosphere with outward counter-clockwise faces."""
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    V = np.array(verts)
    F = np.array(f, dtype=np.int64)
    n = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    if np.sum(np.einsum("ij,ij->i", n, V[F].mean(axis=1))) < 0:
        F = F[:, ::-1].copy()
    return V, F


# Model frame: x right, y down, z away from the viewer; the face looks along -z.
FRONT = np.array([0.0, 0.0, -1.0])


def _direction(yaw, pitch):
    """Unit direction from the head centre; positive pitch looks up (-y)."""
    return np.array([np.sin(yaw) * np.cos(pitch), -np.sin(pitch), -np.cos(yaw) * np.cos(pitch)])


def _bump(u, center, sigma_x, sigma_y=None):
    sigma_y = sigma_x if sigma_y is None else sigma_y
    # local tangent frame around the bump centre
    d = u - center
    right = np.cross([0.0, 1.0, 0.0], center)
    if np.linalg.norm(right) < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    up = np.cross(center, right)
    x, y = d @ right, d @ up
    return np.exp(-0.5 * ((x / sigma_x) ** 2 + (y / sigma_y) ** 2)) * (u @ center > 0)


EYES = [_direction(-0.33, 0.22), _direction(0.33, 0.22)]
EARS = [np.array([-1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])]


def toy_head(u):
    """Deformed sphere: ellipsoid with nose, brow, chin, eye sockets and ears."""
    radii = np.array([0.075, 0.095, 0.09])
    base = u * radii
    r = (0.022 * _bump(u, _direction(0, -0.05), 0.09, 0.16)  # nose
         + 0.008 * _bump(u, _direction(0, 0.35), 0.45, 0.08)  # brow ridge
         + 0.010 * _bump(u, _direction(0, -0.55), 0.25, 0.12)  # chin
         - 0.008 * sum(_bump(u, e, 0.12, 0.08) for e in EYES)
         + 0.012 * sum(_bump(u, e, 0.12, 0.22) for e in EARS))
    return base + r[:, None] * u


def _rigid_fields(points):
    """Orthonormal basis (3N x 6) of infinitesimal rigid motions of ``points``."""
    c = points - points.mean(axis=0)
    cols = []
    for k in range(3):
        t = np.zeros_like(points)
        t[:, k] = 1.0
        cols.append(t.ravel())
        e = np.zeros(3)
        e[k] = 1.0
        cols.append(np.cross(e, c).ravel())
    q, _ = np.linalg.qr(np.array(cols).T)
    return q


def _smooth_fields(rng, u, count, n_bumps=8, sigma=0.6, weight=None):
    out = np.empty((u.shape[0] * 3, count))
    for k in range(count):
        field_ = np.zeros_like(u)
        for _ in range(n_bumps):
            c = rng.normal(size=3)
            c /= np.linalg.norm(c)
            g = np.exp(-np.sum((u - c) ** 2, axis=1) / (2 * sigma ** 2))
            field_ += g[:, None] * rng.normal(size=3)
        if weight is not None:
            field_ *= weight[:, None]
        out[:, k] = field_.ravel()
    return out


def _orthonormal_complement(fields, against):
    """Orthonormalize ``fields`` after projecting out the columns of ``against``."""
    f = fields - against @ (against.T @ fields)
    q, r = np.linalg.qr(f)
    q = q * np.sign(np.diag(r))  # deterministic sign
    q = q - against @ (against.T @ q)
    q, _ = np.linalg.qr(q)
    return q


def synth_model(spec: SyntheticSpec) -> LinearShapeModel:
    """Toy head model with orthonormal shape/expression bases (rigid motions
    projected out), region weights, landmarks and a linear albedo model."""
    rng = np.random.default_rng(spec.seed)
    u, faces = icosphere(spec.subdivisions)
    verts = toy_head(u)
    rigid = _rigid_fields(verts)
    B = _orthonormal_complement(_smooth_fields(rng, u, spec.n_shape), rigid)
    mouth = _bump(u, _direction(0, -0.35), 0.35, 0.25)
    E = _orthonormal_complement(_smooth_fields(rng, u, spec.n_expr, sigma=0.3, weight=mouth + 0.05),
                                np.hstack([rigid, B]))

    # landmarks: nearest vertices to a yaw/pitch grid over the face
    n = spec.n_landmarks
    cols = int(np.ceil(np.sqrt(n * 1.25)))
    rows = int(np.ceil(n / cols))
    dirs = [_direction(y, p) for p in np.linspace(0.45, -0.6, rows) for y in np.linspace(-0.8, 0.8, cols)]
    lm = []
    for d in dirs[:n]:
        order = np.argsort(-(u @ d))
        lm.append(next(int(i) for i in order if i not in lm))

    cos_front = u @ FRONT
    kappa = np.where(cos_front > np.cos(np.radians(55)), FACE_WEIGHT, HEAD_WEIGHT)
    near = np.zeros(len(u), bool)
    for e in EYES:
        near |= u @ e > np.cos(0.16)
    for e in EARS:
        near |= u @ e > np.cos(0.35)
    kappa[near] = EYE_EAR_WEIGHT

    skin = np.array([0.78, 0.58, 0.48])
    albedo = np.tile(skin, (len(u), 1))
    albedo -= 0.25 * sum(_bump(u, e, 0.1, 0.06) for e in EYES)[:, None]  # dark eyes
    albedo -= 0.20 * _bump(u, _direction(0, 0.33), 0.35, 0.05)[:, None] * [1, 1, 1]  # brows
    albedo += 0.12 * _bump(u, _direction(0, -0.37), 0.22, 0.06)[:, None] * [0.6, -0.6, -0.3]  # lips
    albedo += 0.06 * np.sin(6 * u[:, [0]] + 4 * u[:, [1]]) * [1, 0.8, 0.7]  # low-frequency texture
    albedo = np.clip(albedo, 0.05, 0.95)
    Ab = _orthonormal_complement(_smooth_fields(rng, u, spec.n_albedo, sigma=0.5), np.zeros((3 * len(u), 0)))
    return LinearShapeModel(
        mean=verts.ravel(),
        shape_basis=B,
        expr_basis=E,
        faces=faces,
        landmarks=np.array(lm),
        kappa=kappa,
        albedo_mean=albedo.ravel(),
        albedo_basis=Ab,
    )


def landmark_names(model: LinearShapeModel) -> list:
    return [f"lmk_{i:02d}" for i in range(len(model.landmarks))]


def landmark_map(model: LinearShapeModel) -> dict:
    return dict(zip(landmark_names(model), (int(i) for i in model.landmarks)))


def sample_surface(mesh: Mesh, count: int, rng):
    """Area-weighted uniform surface samples. Returns points, face ids, barycentrics."""
    area = mesh.face_areas()
    face = rng.choice(len(area), size=count, p=area / area.sum())
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    bary = np.column_stack([1 - s, s * (1 - r2), s * r2])
    pts = np.einsum("ij,ijk->ik", bary, mesh.triangles()[face])
    return pts, face, bary


def random_pose(rng, max_angle_deg=30.0, max_translation=0.1) -> RigidTransform:
    R = random_rotation(rng, np.radians(max_angle_deg))
    return RigidTransform(R, rng.uniform(-max_translation, max_translation, 3))


# --------------------------------------------------------------------------
# cohorts

@dataclass
class Identity:
    name: str
    z: np.ndarray
    gt: Mesh
    scan: ScanCloud
    scan_pose: RigidTransform
    prediction: Mesh
    features: np.ndarray  # (samples, D) training features
    heldout_features: np.ndarray  # (heldout, D)


@dataclass
class Cohort:
    model: LinearShapeModel
    identities: list = field(default_factory=list)

    def subjects(self):
        from .alignment import Subject
        lmap = landmark_map(self.model)
        return [Subject(i.name, i.prediction, i.scan, lmap) for i in self.identities]


def synth_cohort(spec: SyntheticSpec, model: LinearShapeModel) -> Cohort:
    rng = np.random.default_rng([spec.seed, 1])
    names = landmark_names(model)
    cohort = Cohort(model)
    face_vertex = model.kappa == FACE_WEIGHT
    for k in range(spec.n_identities):
        z = rng.normal(scale=spec.shape_std, size=model.n_shape)
        gt = decode_linear(model, z)
        pose = random_pose(rng)
        pts, face, bary = sample_surface(gt, spec.scan_points, rng)
        corner = model.faces[face, np.argmax(bary, axis=1)]
        mask = face_vertex[corner]
        pts = pts + rng.normal(scale=spec.scan_noise_mm / 1000.0, size=pts.shape)
        lm = gt.vertices[model.landmarks] + rng.normal(scale=spec.landmark_noise_mm / 1000.0,
                                                       size=(len(names), 3))
        scan = ScanCloud(apply_transform(pts, pose), dict(zip(names, apply_transform(lm, pose))), mask)
        pred = gt.with_vertices(gt.vertices / spec.scale_perturbation)
        base = rng.normal(size=spec.feature_dim)
        base /= np.linalg.norm(base)

        def noisy(n):
            f = base + rng.normal(scale=spec.feature_noise / np.sqrt(spec.feature_dim),
                                  size=(n, spec.feature_dim))
            return f / np.linalg.norm(f, axis=1, keepdims=True)

        cohort.identities.append(Identity(f"id{k:03d}", z, gt, scan, pose, pred,
                                          noisy(spec.samples_per_identity),
                                          noisy(spec.heldout_per_identity)))
    return cohort


def write_cohort(cohort: Cohort, out) -> dict:
    """Write scans, predictions, ground truth, landmarks and features under
    ``out``. Returns the dataset manifest (also written as manifest.json)."""
    out = Path(out)
    for sub in ("scan", "pred", "gt", "lmk"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    io.write_landmark_map(out / "lmk" / "landmark_map.json", landmark_map(cohort.model))
    rows, ids, samples = [], [], []
    for k, ident in enumerate(cohort.identities):
        io.write_ply(out / "scan" / f"{ident.name}.ply", ident.scan.points,
                     vertex_props={"face_mask": ident.scan.mask.astype(np.uint8)})
        io.save_mesh(out / "pred" / f"{ident.name}.ply", ident.prediction)
        io.save_mesh(out / "gt" / f"{ident.name}.ply", ident.gt)
        names = sorted(ident.scan.landmarks)
        io.write_landmarks_3d(out / "lmk" / f"{ident.name}.json", names,
                              [ident.scan.landmarks[n] for n in names])
        for split, feats in (("train", ident.features), ("val", ident.heldout_features)):
            for f in feats:
                samples.append({"row": len(rows), "subject": ident.name,
                                "mesh": f"gt/{ident.name}.ply", "split": split})
                rows.append(f)
                ids.append(k)
    io.write_mtc1(out / "features.mtc1", {"features": np.array(rows), "subject_ids": np.array(ids, float)})
    manifest = {"features": "features.mtc1", "samples": samples}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    truth = {i.name: {"z": i.z.tolist(), "scan_pose": {"rotation": i.scan_pose.rotation.tolist(),
                                                       "translation": i.scan_pose.translation.tolist()}}
             for i in cohort.identities}
    (out / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True))
    return manifest


def load_scan(path, landmarks_path=None) -> ScanCloud:
    """Scan PLY (optional ``face_mask`` vertex property) plus optional landmark JSON."""
    pts, _, props = io.read_ply(path)
    mask = props.get("face_mask")
    lm = io.read_landmarks_3d(landmarks_path) if landmarks_path else {}
    return ScanCloud(pts, lm, None if mask is None else mask.astype(bool))


def spec_from_json(path) -> SyntheticSpec:
    return from_dict(SyntheticSpec, json.loads(Path(path).read_text()))


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)


# --------------------------------------------------------------------------
# sequences

def sequence_camera(spec: SyntheticSpec) -> Camera:
    return Camera.centered(spec.focal, spec.image_size, spec.image_size)


def sequence_states(spec: SyntheticSpec, model: LinearShapeModel):
    """Ground-truth tracker states: sinusoidal expressions, slow yaw, fixed albedo."""
    from .tracker import TrackerState
    rng = np.random.default_rng([spec.seed, 2])
    beta = rng.normal(scale=0.3, size=model.n_albedo)
    gamma = np.zeros((9, 3))
    gamma[0] = 2.6  # ambient
    gamma[1] = [-0.25, -0.25, -0.25]  # light from above
    gamma[3] = [0.2, 0.2, 0.2]
    gamma[2] = [-0.5, -0.5, -0.5]  # towards the camera
    gamma[6] = [-0.1, -0.1, -0.1]
    phases = rng.uniform(0, 2 * np.pi, size=model.n_expr)
    states = []
    for t in range(spec.n_frames):
        w = 2 * np.pi * t / spec.expr_period
        psi = spec.expr_amplitude * np.sin(w + phases)
        yaw = np.radians(spec.yaw_amplitude_deg) * np.sin(2 * np.pi * t / max(spec.n_frames, 2))
        r = np.array([0.05 * np.sin(w / 3), yaw, 0.02])
        tr = np.array([0.004 * np.sin(w / 2), -0.003, spec.distance + 0.01 * np.sin(w / 4)])
        states.append(TrackerState(psi, beta.copy(), r, tr, gamma.copy(), spec.focal))
    return states


@dataclass
class Sequence:
    camera: Camera
    shape: Mesh
    states: list
    frames: list


def synth_sequence(spec: SyntheticSpec, model: LinearShapeModel, z) -> Sequence:
    """Render frames (image, landmarks, depth) from known states of identity ``z``."""
    from .tracker import Frame, render
    rng = np.random.default_rng([spec.seed, 3])
    cam = sequence_camera(spec)
    shape = decode_linear(model, z)
    states = sequence_states(spec, model)
    frames = []
    for st in states:
        r = render(st, shape, model, cam)
        lm = r.landmarks + rng.normal(scale=spec.landmark_noise_px, size=r.landmarks.shape)
        frames.append(Frame(r.image, landmark_names(model), lm, np.ones(len(lm)), r.depth))
    return Sequence(cam, shape, states, frames)


def write_sequence(seq: Sequence, out) -> None:
    out = Path(out)
    for sub in ("frames", "lmk", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    io.save_mesh(out / "shape.ply", seq.shape)
    for t, fr in enumerate(seq.frames):
        io.write_ppm(out / "frames" / f"{t:04d}.ppm", fr.image)
        io.write_pfm(out / "depth" / f"{t:04d}.pfm", np.where(np.isfinite(fr.depth), fr.depth, 0.0))
        io.write_landmarks_2d(out / "lmk" / f"{t:04d}.json", fr.names, fr.landmarks, fr.conf)
    truth = {"camera": asdict(seq.camera), "states": [s.to_dict() for s in seq.states]}
    (out / "truth.json").write_text(json.dumps(truth, indent=1))
