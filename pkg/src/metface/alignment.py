"""Rigid (metrical) and similarity (non-metrical) alignment, dense ICP,
exact scan-to-mesh distances and benchmark score reports."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from ._anderson import Anderson
from .geometry import (Mesh, RigidTransform, SimilarityTransform, Transform, apply_transform, axis_angle,
                       rodrigues)

log = logging.getLogger(__name__)

M_TO_MM = 1000.0


class DegenerateError(ValueError):
    """Correspondences do not determine a transform."""


class AlignmentError(RuntimeError):
    pass


@dataclass
class ScanCloud:
    points: np.ndarray
    landmarks: dict = field(default_factory=dict)
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("scan points must be finite")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).ravel()
            if self.mask.size != len(self.points):
                raise ValueError("mask must have one entry per scan point")

    def masked_points(self) -> np.ndarray:
        return self.points if self.mask is None else self.points[self.mask]

    def transformed(self, T: Transform) -> "ScanCloud":
        lm = {k: apply_transform(v[None], T)[0] for k, v in self.landmarks.items()}
        return ScanCloud(apply_transform(self.points, T), lm, self.mask)


@dataclass
class AlignmentReport:
    mode: str
    transform: Transform
    distances: np.ndarray  # mm
    history: list = field(default_factory=list)  # residual (m) per accepted ICP iteration
    label: str = ""

    @property
    def median(self) -> float:
        return float(np.median(self.distances))

    @property
    def mean(self) -> float:
        return float(np.mean(self.distances))

    @property
    def std(self) -> float:
        return float(np.std(self.distances))

    def stats(self) -> dict:
        return {"median": self.median, "mean": self.mean, "std": self.std}

    def to_dict(self, with_distances=False) -> dict:
        T = self.transform
        d = {
            "label": self.label,
            "mode": self.mode,
            "transform": {
                "scale": float(getattr(T, "scale", 1.0)),
                "rotation": T.rotation.tolist(),
                "translation": T.translation.tolist(),
            },
            "n_points": int(self.distances.size),
            **self.stats(),
            "history": [float(h) for h in self.history],
        }
        if with_distances:
            d["distances"] = self.distances.tolist()
        return d


# --------------------------------------------------------------------------
# closed-form alignment

def _weighted_moments(src, dst, weights):
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same shape")
    if len(src) < 3:
        raise DegenerateError("need at least 3 correspondences")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.size != len(src) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    sv = np.linalg.svd(np.sqrt(w)[:, None] * xs, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
        raise DegenerateError("source points are collinear or coincident")
    cov = (w[:, None] * xd).T @ xs  # dst x src
    return w, mu_s, mu_d, xs, xd, cov


def _rotation_from_cov(cov):
    U, S, Vt = np.linalg.svd(cov)
    if S[0] == 0 or S[1] <= 1e-10 * S[0]:
        raise DegenerateError("cross-covariance is rank deficient")
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    return U @ np.diag(D) @ Vt, S, D


def kabsch_rigid(src, dst, weights=None) -> RigidTransform:
    """Least-squares rotation and translation mapping ``src`` onto ``dst``."""
    w, mu_s, mu_d, _, _, cov = _weighted_moments(src, dst, weights)
    R, _, _ = _rotation_from_cov(cov)
    return RigidTransform(R, mu_d - R @ mu_s)


def umeyama_similarity(src, dst, weights=None) -> SimilarityTransform:
    """Least-squares ``s R x + t`` mapping ``src`` onto ``dst`` (Umeyama 1991)."""
    w, mu_s, mu_d, xs, _, cov = _weighted_moments(src, dst, weights)
    var_s = w @ np.einsum("ij,ij->i", xs, xs)
    if var_s <= 0:
        raise DegenerateError("source has zero variance")
    R, S, D = _rotation_from_cov(cov)
    s = float(S @ D) / var_s
    if not s > 0:
        raise DegenerateError("non-positive optimal scale")
    return SimilarityTransform(s, R, mu_d - s * R @ mu_s)


def alignment_residual(src, dst, T: Transform, weights=None) -> float:
    """Weighted sum of squared residuals."""
    r = apply_transform(src, T) - np.asarray(dst, dtype=float)
    e = np.einsum("ij,ij->i", r, r)
    return float(e.sum() if weights is None else np.asarray(weights) @ e)


def solve_transform(mode: str, src, dst, weights=None) -> Transform:
    if mode == "rigid":
        return kabsch_rigid(src, dst, weights)
    if mode == "similarity":
        return umeyama_similarity(src, dst, weights)
    raise ValueError(f"unknown alignment mode {mode!r}")


# --------------------------------------------------------------------------
# point-to-triangle distance

def _dot(x, y):
    return x[..., 0] * y[..., 0] + x[..., 1] * y[..., 1] + x[..., 2] * y[..., 2]


def _closest_bary(ap, ab, ac):
    """Barycentric weights (v, w) of the closest point ``a + v ab + w ac`` for
    offsets ``ap = p - a``; each argument is a tuple of x, y, z arrays.

    Region classification follows Ericson, *Real-Time Collision Detection*
    (5.1.5), with the b- and c-relative dot products derived from the
    a-relative ones.
    """
    d1 = ab[0] * ap[0] + ab[1] * ap[1] + ab[2] * ap[2]
    d2 = ac[0] * ap[0] + ac[1] * ap[1] + ac[2] * ap[2]
    abab = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2]
    abac = ab[0] * ac[0] + ab[1] * ac[1] + ab[2] * ac[2]
    acac = ac[0] * ac[0] + ac[1] * ac[1] + ac[2] * ac[2]
    d3, d4 = d1 - abab, d2 - abac  # ab.bp, ac.bp
    d5, d6 = d1 - abac, d2 - acac  # ab.cp, ac.cp
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
    regions = [  # first match wins, so apply in reverse
        ((d1 <= 0) & (d2 <= 0), 0.0, 0.0),  # vertex a
        ((d3 >= 0) & (d4 <= d3), 1.0, 0.0),  # vertex b
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), v_ab, 0.0),  # edge ab
        ((d6 >= 0) & (d5 <= d6), 0.0, 1.0),  # vertex c
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), 0.0, w_ac),  # edge ac
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), 1 - w_bc, w_bc),  # edge bc
    ]
    for cond, rv, rw in regions[::-1]:
        v = np.where(cond, rv, v)
        w = np.where(cond, rw, w)
    return v, w


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, elementwise with
    broadcasting. Returns ``(closest (..., 3), barycentric (..., 3))``."""
    p, a, b, c = (np.asarray(x, dtype=float) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    v, w = _closest_bary(np.moveaxis(ap, -1, 0), np.moveaxis(ab, -1, 0), np.moveaxis(ac, -1, 0))
    bary = np.stack([1 - v - w, v, w], axis=-1)
    closest = a + v[..., None] * ab + w[..., None] * ac
    return closest, bary


def _point_distance(p, q):
    d = p - q
    return np.sqrt(_dot(d, d))


@dataclass
class ClosestPoints:
    distance: np.ndarray  # (M,) in mesh units
    point: np.ndarray  # (M, 3)
    face: np.ndarray  # (M,)
    bary: np.ndarray  # (M, 3)


def closest_points_brute_force(points, mesh: Mesh, chunk=256) -> ClosestPoints:
    """Exhaustive search over every triangle; the oracle for :class:`MeshIndex`."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.triangles()
    out = ClosestPoints(np.empty(len(points)), np.empty((len(points), 3)),
                        np.empty(len(points), dtype=np.int64), np.empty((len(points), 3)))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk, None, :]
        cl, bary = closest_point_on_triangles(p, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        d = _point_distance(p, cl)
        j = np.argmin(d, axis=1)
        r = np.arange(len(j))
        out.distance[s:s + chunk] = d[r, j]
        out.point[s:s + chunk] = cl[r, j]
        out.face[s:s + chunk] = j
        out.bary[s:s + chunk] = bary[r, j]
    return out


class MeshIndex:
    """Exact nearest-surface queries accelerated by a k-d tree over triangle
    centroids.

    A triangle whose centroid is farther than ``ub + R_i`` from the query
    (``ub`` an upper bound from nearby triangles, ``R_i`` the triangle's
    centroid-to-corner radius) cannot contain the nearest point, so only the
    remaining candidates are evaluated exactly. Ties resolve to the lowest
    face index, like the brute-force search.
    """

    k_candidates = 16  # centroid neighbours fetched before falling back to a ball query

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.tri = mesh.triangles()
        self._a = np.ascontiguousarray(self.tri[:, 0].T)
        self._ab = np.ascontiguousarray((self.tri[:, 1] - self.tri[:, 0]).T)
        self._ac = np.ascontiguousarray((self.tri[:, 2] - self.tri[:, 0]).T)
        self.centroids = self.tri.mean(axis=1)
        self.radii = np.linalg.norm(self.tri - self.centroids[:, None], axis=2).max(axis=1)
        self.radius = float(self.radii.max())
        self.tree = cKDTree(self.centroids)

    def _pair_distances(self, points, qi, fi):
        a, ab, ac = self._a[:, fi], self._ab[:, fi], self._ac[:, fi]
        p = points.T[:, qi]
        v, w = _closest_bary(p - a, ab, ac)
        cl = a + v * ab + w * ac
        r = p - cl
        return np.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]), cl.T, np.column_stack([1 - v - w, v, w])

    def query(self, points, chunk=4096) -> ClosestPoints:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        M = len(points)
        out = ClosestPoints(np.empty(M), np.empty((M, 3)), np.empty(M, dtype=np.int64), np.empty((M, 3)))
        K = min(self.k_candidates, len(self.tri))
        k = min(4, K)
        for s in range(0, M, chunk):
            p = points[s:s + chunk]
            m = len(p)
            dc, idx = self.tree.query(p, k=K)
            dc, idx = dc.reshape(m, K), idx.reshape(m, K)
            d, _, _ = self._pair_distances(p, np.repeat(np.arange(m), k), idx[:, :k].ravel())
            ub = d.reshape(m, k).min(axis=1)
            r = (ub + self.radius) * (1 + 1e-9) + 1e-12
            # candidates: every triangle whose centroid lies within ub + its own
            # radius. The K nearest centroids settle a row once the K-th lies
            # beyond ub + max radius; the remaining rows use a ball query
            full = np.flatnonzero(dc[:, -1] <= r) if K < len(self.tri) else np.zeros(0, np.int64)
            qi, fi, dq = np.repeat(np.arange(m), K), idx.ravel(), dc.ravel()
            if full.size:
                qi, fi, dq = (x.reshape(m, K) for x in (qi, fi, dq))
                rest = np.ones(m, bool)
                rest[full] = False
                qi, fi, dq = qi[rest].ravel(), fi[rest].ravel(), dq[rest].ravel()
                lists = self.tree.query_ball_point(p[full], r[full])
                counts = np.array([len(l) for l in lists])
                fb = np.concatenate(lists).astype(np.int64)
                qb = np.repeat(full, counts)
                qi = np.concatenate([qi, qb])
                fi = np.concatenate([fi, fb])
                dq = np.concatenate([dq, np.linalg.norm(p[qb] - self.centroids[fb], axis=1)])
            keep = dq <= (ub[qi] + self.radii[fi]) * (1 + 1e-9) + 1e-12
            qi, fi = qi[keep], fi[keep]
            order = np.argsort(qi, kind="stable")
            qi, fi = qi[order], fi[order]
            start = np.r_[0, np.cumsum(np.bincount(qi, minlength=m))[:-1]]
            d, cl, bary = self._pair_distances(p, qi, fi)
            # smallest distance per query, ties to the lowest face index
            tie = d == np.minimum.reduceat(d, start)[qi]
            key = np.where(tie, fi, len(self.tri))
            first = np.flatnonzero(tie & (fi == np.minimum.reduceat(key, start)[qi]))
            out.distance[s:s + m] = d[first]
            out.point[s:s + m] = cl[first]
            out.face[s:s + m] = fi[first]
            out.bary[s:s + m] = bary[first]
        return out


def scan_to_mesh_distance(scan, mesh: Mesh, mask=None, index: MeshIndex | None = None) -> np.ndarray:
    """Per-point distance (mm) from scan points to the nearest mesh triangle."""
    if isinstance(scan, ScanCloud):
        pts = scan.points
        mask = scan.mask if mask is None else mask
    else:
        pts = np.asarray(scan, dtype=float).reshape(-1, 3)
    if mask is not None:
        pts = pts[np.asarray(mask, dtype=bool)]
    if len(pts) == 0:
        raise ValueError("no scan points selected")
    index = index or MeshIndex(mesh)
    return index.query(pts).distance * M_TO_MM


def mesh_to_scan_distance(scan, mesh: Mesh, mask=None) -> np.ndarray:
    """Reverse direction (mesh vertices to nearest scan point), mm."""
    pts = scan.masked_points() if isinstance(scan, ScanCloud) else np.asarray(scan, dtype=float)
    if mask is not None:
        pts = np.asarray(scan.points if isinstance(scan, ScanCloud) else scan)[np.asarray(mask, bool)]
    if len(pts) == 0:
        raise ValueError("no scan points selected")
    d, _ = cKDTree(pts).query(mesh.vertices)
    return d * M_TO_MM


# --------------------------------------------------------------------------
# ICP

@dataclass
class IcpOptions:
    max_iterations: int = 100
    tolerance: float = 1e-12  # minimum residual improvement (m) to continue
    trim_fraction: float = 0.1
    anderson_window: int = 5  # 0 disables acceleration

    def __post_init__(self):
        if not 0 <= self.trim_fraction < 1:
            raise ValueError("trim_fraction must be in [0, 1)")


def _trimmed(d2, trim):
    keep = max(int(np.ceil(len(d2) * (1 - trim))), 0)
    if keep < 3:
        raise AlignmentError("fewer than 3 correspondences left after trimming")
    return np.argsort(d2, kind="stable")[:keep]


def _to_params(T):
    return np.r_[axis_angle(T.rotation), T.translation, np.log(getattr(T, "scale", 1.0))]


def _from_params(x, mode):
    if mode == "rigid":
        return RigidTransform(rodrigues(x[:3]), x[3:6])
    return SimilarityTransform(float(np.exp(x[6])), rodrigues(x[:3]), x[3:6])


def icp_align(moving: Mesh, fixed: ScanCloud, mode: str = "rigid", init: Transform | None = None,
              opts: IcpOptions | None = None, index: MeshIndex | None = None) -> AlignmentReport:
    """Align ``moving`` to ``fixed`` by trimmed point-to-surface ICP.

    Each scan point is matched to its closest point on the transformed mesh;
    the worst ``trim_fraction`` of matches is discarded and the transform is
    re-solved in closed form. Plain ICP converges linearly when points slide
    along the surface, so the fixed-point iteration is Anderson-accelerated;
    an accelerated iterate is only taken when its residual beats the plain
    step. ``history`` holds the trimmed RMS residual (m) of every accepted
    iterate and is non-increasing.
    """
    opts = opts or IcpOptions()
    if mode not in ("rigid", "similarity"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    T = init if init is not None else RigidTransform()
    if mode == "rigid" and isinstance(T, SimilarityTransform):
        if abs(T.scale - 1) > 1e-12:
            raise ValueError("rigid ICP needs a rigid initial transform")
        T = RigidTransform(T.rotation, T.translation)
    pts = fixed.masked_points()
    if len(pts) < 3:
        raise AlignmentError("need at least 3 scan points")
    index = index or MeshIndex(moving)

    def correspond(T):
        # query in the mesh frame: similarity maps preserve nearest-point relations
        cp = index.query(apply_transform(pts, T.inverse()))
        d2 = np.sum((apply_transform(cp.point, T) - pts) ** 2, axis=1)
        keep = _trimmed(d2, opts.trim_fraction)
        return cp.point, keep, float(np.sqrt(d2[keep].mean()))

    src, keep, res = correspond(T)
    history = [res]
    mixer = Anderson(opts.anderson_window)
    for _ in range(opts.max_iterations):
        T_plain = solve_transform(mode, src[keep], pts[keep])
        cand = [T_plain]
        x_aa = mixer.propose(_to_params(T), _to_params(T_plain))
        if x_aa is not None and np.linalg.norm(x_aa[:3]) < np.pi:
            cand.insert(0, _from_params(x_aa, mode))
        best = None
        for Tc in cand:
            sc, kc, rc = correspond(Tc)
            if best is None or rc < best[3]:
                best = (Tc, sc, kc, rc)
            if rc <= res:
                break
        T_new, src_new, keep_new, res_new = best
        if res_new > res:
            break
        improvement = res - res_new
        T, src, keep, res = T_new, src_new, keep_new, res_new
        history.append(res)
        if improvement < opts.tolerance:
            break
    d = index.query(apply_transform(pts, T.inverse())).point
    dist = np.linalg.norm(apply_transform(d, T) - pts, axis=1) * M_TO_MM
    return AlignmentReport(mode, T, dist, history)


# --------------------------------------------------------------------------
# benchmark

@dataclass
class Protocol:
    alignment: str = "similarity"  # rigid | similarity
    init: str = "dense-icp"  # landmarks | dense-icp
    icp: IcpOptions = field(default_factory=IcpOptions)

    def __post_init__(self):
        if self.alignment not in ("rigid", "similarity"):
            raise ValueError(f"unknown alignment {self.alignment!r}")
        if self.init not in ("landmarks", "dense-icp"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class Subject:
    name: str
    prediction: Mesh
    scan: ScanCloud
    landmark_map: dict  # landmark name -> prediction vertex index


@dataclass
class BenchmarkResult:
    protocol: Protocol
    subjects: list  # AlignmentReport per evaluated subject
    failures: dict  # subject name -> message
    distances: np.ndarray  # pooled, sorted, mm
    curve: np.ndarray  # (T, 2) threshold mm, fraction

    @property
    def median(self):
        return float(np.median(self.distances)) if self.distances.size else float("nan")

    @property
    def mean(self):
        return float(np.mean(self.distances)) if self.distances.size else float("nan")

    @property
    def std(self):
        return float(np.std(self.distances)) if self.distances.size else float("nan")

    def to_dict(self) -> dict:
        return {
            "protocol": {"alignment": self.protocol.alignment, "init": self.protocol.init},
            "aggregate": {"median": self.median, "mean": self.mean, "std": self.std,
                          "n_points": int(self.distances.size),
                          "n_subjects": len(self.subjects)},
            "subjects": [r.to_dict() for r in self.subjects],
            "failures": dict(sorted(self.failures.items())),
            "curve": {"threshold_mm": self.curve[:, 0].tolist(), "fraction": self.curve[:, 1].tolist()},
        }


def landmark_pairs(subject: Subject):
    names = sorted(set(subject.landmark_map) & set(subject.scan.landmarks))
    if len(names) < 4:
        raise DegenerateError(f"{subject.name}: fewer than 4 landmark correspondences")
    src = subject.prediction.vertices[[subject.landmark_map[n] for n in names]]
    dst = np.array([subject.scan.landmarks[n] for n in names])
    return src, dst


def evaluate_subject(subject: Subject, protocol: Protocol) -> AlignmentReport:
    src, dst = landmark_pairs(subject)
    T0 = solve_transform(protocol.alignment, src, dst)
    if protocol.init == "landmarks":
        rep = AlignmentReport(protocol.alignment, T0,
                              scan_to_mesh_distance(subject.scan, _moved(subject.prediction, T0)))
    else:
        rep = icp_align(subject.prediction, subject.scan, protocol.alignment, T0, protocol.icp)
    rep.label = subject.name
    return rep


def _moved(mesh, T):
    return mesh.with_vertices(apply_transform(mesh.vertices, T))


def benchmark_evaluate(subjects, protocol: Protocol, bin_mm=0.1, max_mm=10.0, workers=1) -> BenchmarkResult:
    """Evaluate every subject; failures are recorded, never dropped silently."""
    subjects = list(subjects)

    def run(s):
        try:
            return s.name, evaluate_subject(s, protocol), None
        except (ValueError, RuntimeError) as exc:
            log.warning("subject %s failed: %s", s.name, exc)
            return s.name, None, str(exc)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, subjects))
    else:
        results = [run(s) for s in subjects]
    reports = [r for _, r, _ in results if r is not None]
    failures = {n: e for n, _, e in results if e is not None}
    pooled = np.sort(np.concatenate([r.distances for r in reports])) if reports else np.zeros(0)
    curve = cumulative_error_curve(pooled, bin_mm, max_mm) if pooled.size else np.zeros((0, 2))
    return BenchmarkResult(protocol, reports, failures, pooled, curve)


def cumulative_error_curve(distances, bin_mm: float, max_mm: float) -> np.ndarray:
    """Rows ``(threshold, fraction of distances <= threshold)`` for thresholds
    ``0, bin, 2 bin, ...`` up to ``max_mm``."""
    d = np.sort(np.asarray(distances, dtype=float).ravel())
    if d.size == 0:
        raise ValueError("no distances")
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    if not bin_mm > 0 or max_mm < 0:
        raise ValueError("need bin_mm > 0 and max_mm >= 0")
    n = int(np.floor(max_mm / bin_mm + 1e-9))
    thresholds = np.arange(n + 1) * bin_mm
    frac = np.searchsorted(d, thresholds, side="right") / d.size
    return np.column_stack([thresholds, frac])
