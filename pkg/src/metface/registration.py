"""Bring raw scans into model topology: landmark fit, model-parameter ICP and
model-regularized non-rigid refinement."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from . import io
from ._anderson import Anderson
from .alignment import (M_TO_MM, DegenerateError, MeshIndex, ScanCloud, kabsch_rigid,
                        scan_to_mesh_distance)
from .geometry import (LinearShapeModel, Mesh, RigidTransform, apply_transform, axis_angle,
                       decode_linear, rodrigues)

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


@dataclass
class RegistrationConfig:
    landmark_reg: float = 1e-7  # Tikhonov weight on z for the landmark fit (sum of squares, m^2)
    icp_reg: float = 1e-9  # Tikhonov weight on z for dense ICP (mean of squares, m^2)
    icp_iterations: int = 60
    icp_tolerance: float = 1e-14
    icp_divergence_patience: int = 3
    fit_expression: bool = False
    nonrigid_reg: float = 1.0
    nonrigid_smooth: float = 10.0
    nonrigid_radius: float = 0.01  # m
    nonrigid_iterations: int = 10
    anderson_window: int = 5


@dataclass
class Fit:
    z: np.ndarray
    expr: np.ndarray
    pose: RigidTransform
    residual: float = float("nan")  # RMS (m) of the fitted correspondences
    converged: bool = True


@dataclass
class RegistrationResult:
    name: str
    fit: Fit | None = None
    mesh: Mesh | None = None  # neutral, model frame, model topology
    residuals: dict = field(default_factory=dict)  # stage -> mean scan-to-mesh (mm)
    deformation: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        d = {"name": self.name, "ok": self.ok, "residuals_mm": self.residuals,
             "deformation_mm": self.deformation, "flags": list(self.flags), "error": self.error}
        if self.fit is not None:
            d.update(z=self.fit.z.tolist(), expr=self.fit.expr.tolist(),
                     pose={"rotation": self.fit.pose.rotation.tolist(),
                           "translation": self.fit.pose.translation.tolist()})
        return d


# --------------------------------------------------------------------------
# pose + linear coefficients least squares

def _objective(R, t, c, a, G, p, w, lam, n_reg):
    x = a + G @ c
    r = x @ R.T + t - p
    return float(w @ np.einsum("ij,ij->i", r, r) + lam * c[:n_reg] @ c[:n_reg])


def solve_pose_and_coefficients(a, G, p, w, lam, R, t, c, n_reg=None, iterations=30, tol=1e-15):
    """Minimise ``sum_j w_j |R (a_j + G_j c) + t - p_j|^2 + lam |c[:n_reg]|^2``.

    Gauss-Newton on (rotation increment, t, c) with step halving, starting
    from ``(R, t, c)``. ``a`` is (M, 3), ``G`` is (M, 3, P).
    Returns ``(R, t, c, objective)``.
    """
    P = G.shape[2]
    n_reg = P if n_reg is None else n_reg
    reg = np.zeros(6 + P)
    reg[6:6 + n_reg] = lam
    f = _objective(R, t, c, a, G, p, w, lam, n_reg)
    for _ in range(iterations):
        x = a + G @ c
        Rx = x @ R.T
        r = Rx + t - p
        J = np.empty((len(a), 3, 6 + P))
        # d(exp(w) R x)/dw = -[R x]_x
        J[:, :, 0:3] = -_skew_batch(Rx)
        J[:, :, 3:6] = np.eye(3)
        J[:, :, 6:] = np.einsum("ij,mjk->mik", R, G)
        Jw = J * w[:, None, None]
        H = np.einsum("mia,mib->ab", Jw, J) + np.diag(reg)
        g = np.einsum("mia,mi->a", Jw, r)
        g[6:6 + n_reg] += lam * c[:n_reg]
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            delta = -np.linalg.lstsq(H, g, rcond=None)[0]
        step = 1.0
        for _ in range(30):
            Rn = rodrigues(step * delta[:3]) @ R
            tn = t + step * delta[3:6]
            cn = c + step * delta[6:]
            fn = _objective(Rn, tn, cn, a, G, p, w, lam, n_reg)
            if fn <= f:
                break
            step *= 0.5
        else:
            break
        decrease = f - fn
        R, t, c, f = Rn, tn, cn, fn
        if decrease <= tol * max(f, 1e-300) or decrease == 0:
            break
    return R, t, c, f


def _skew_batch(v):
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def _model_columns(model: LinearShapeModel, fit_expression: bool):
    if fit_expression:
        return np.hstack([model.shape_basis, model.expr_basis])
    return model.shape_basis


def _split(model, coeffs, fit_expression):
    z = coeffs[:model.n_shape]
    expr = coeffs[model.n_shape:] if fit_expression else np.zeros(model.n_expr)
    return z, expr


# --------------------------------------------------------------------------
# stage 1: landmarks

def fit_landmarks(model: LinearShapeModel, scan_landmarks: dict, landmark_map: dict,
                  reg: float = 1e-7, fit_expression: bool = False) -> Fit:
    """Fit pose and shape coefficients to named 3D landmarks.

    Minimises ``sum_l |R (A + B z)_l + t - s_l|^2 + reg |z|^2``; the pose is
    initialised by Kabsch on the mean face, then refined jointly.
    """
    names = sorted(set(scan_landmarks) & set(landmark_map))
    if len(names) < 4:
        raise DegenerateError(f"need at least 4 landmark correspondences, got {len(names)}")
    idx = np.array([landmark_map[n] for n in names])
    targets = np.array([scan_landmarks[n] for n in names], dtype=float)
    A = model.mean.reshape(-1, 3)[idx]
    cols = _model_columns(model, fit_expression)
    G = cols.reshape(model.n_vertices, 3, -1)[idx]
    init = kabsch_rigid(A, targets)
    c0 = np.zeros(G.shape[2])
    R, t, c, f = solve_pose_and_coefficients(A, G, targets, np.ones(len(idx)), reg,
                                             init.rotation, init.translation, c0,
                                             n_reg=model.n_shape, iterations=100)
    z, expr = _split(model, c, fit_expression)
    res = np.sqrt(max(f - reg * z @ z, 0.0) / len(idx))
    return Fit(z, expr, RigidTransform(R, t), res)


# --------------------------------------------------------------------------
# stage 2: dense model ICP

def fit_model_icp(model: LinearShapeModel, scan: ScanCloud, init: Fit,
                  cfg: RegistrationConfig | None = None) -> Fit:
    """Dense ICP over pose and model coefficients.

    Scan points are matched to their closest points on the current model
    surface (barycentric, so each match is linear in the coefficients); pose
    and coefficients are then solved jointly with Tikhonov weight
    ``cfg.icp_reg`` on z. The objective is monitored after every
    re-correspondence; an increase for ``icp_divergence_patience`` consecutive
    attempts stops the fit and returns the best iterate with
    ``converged=False``.
    """
    cfg = cfg or RegistrationConfig()
    fe = cfg.fit_expression
    cols = _model_columns(model, fe)
    A3 = model.mean.reshape(-1, 3)
    C3 = cols.reshape(model.n_vertices, 3, -1)
    pts = scan.points
    w = np.full(len(pts), 1.0 / len(pts))
    coeffs = np.r_[init.z, init.expr] if fe else init.z.copy()
    R, t = init.pose.rotation, init.pose.translation

    def correspond(R, t, coeffs):
        mesh = Mesh(A3 + C3 @ coeffs, model.faces)
        cp = MeshIndex(mesh).query((pts - t) @ R)
        vid = model.faces[cp.face]
        a = np.einsum("mk,mkj->mj", cp.bary, A3[vid])
        G = np.einsum("mk,mkjp->mjp", cp.bary, C3[vid])
        return a, G

    def objective(R, t, coeffs, a, G):
        return _objective(R, t, coeffs, a, G, pts, w, cfg.icp_reg, model.n_shape)

    a, G = correspond(R, t, coeffs)
    f = objective(R, t, coeffs, a, G)
    best = (f, R, t, coeffs)
    mixer = Anderson(cfg.anderson_window)
    bad = 0
    converged = True
    for _ in range(cfg.icp_iterations):
        Rp, tp, cp_, _ = solve_pose_and_coefficients(a, G, pts, w, cfg.icp_reg, R, t, coeffs,
                                                     n_reg=model.n_shape)
        x = np.r_[axis_angle(R), t, coeffs]
        g = np.r_[axis_angle(Rp), tp, cp_]
        cands = [(Rp, tp, cp_)]
        xa = mixer.propose(x, g)
        if xa is not None and np.linalg.norm(xa[:3]) < np.pi:
            cands.insert(0, (rodrigues(xa[:3]), xa[3:6], xa[6:]))
        trial = None
        for Rc, tc, cc in cands:
            ac, Gc = correspond(Rc, tc, cc)
            fc = objective(Rc, tc, cc, ac, Gc)
            if trial is None or fc < trial[0]:
                trial = (fc, Rc, tc, cc, ac, Gc)
            if fc <= f:
                break
        fn, Rn, tn, cn, an, Gn = trial
        if fn > f:
            bad += 1
            mixer.reset()
            if bad >= cfg.icp_divergence_patience:
                converged = False
                log.warning("model ICP stopped: objective increased %d times", bad)
                break
        else:
            bad = 0
        decrease = f - fn
        R, t, coeffs, a, G, f = Rn, tn, cn, an, Gn, fn
        if f < best[0]:
            best = (f, R, t, coeffs)
        if 0 <= decrease <= cfg.icp_tolerance:
            break
    f, R, t, coeffs = best
    z, expr = _split(model, coeffs, fe)
    res = np.sqrt(max(f - cfg.icp_reg * z @ z, 0.0))
    return Fit(z, expr, RigidTransform(R, t), res, converged)


# --------------------------------------------------------------------------
# stage 3: non-rigid refinement

def _laplacian(n_vertices, edges):
    i, j = edges[:, 0], edges[:, 1]
    W = sp.coo_matrix((np.ones(len(edges)), (i, j)), shape=(n_vertices, n_vertices))
    W = (W + W.T).tocsr()
    L = sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    return sp.kron(L, sp.eye(3), format="csc")


def model_span(model: LinearShapeModel, include_expression=True) -> np.ndarray:
    """Orthonormal basis (3N x K) of the model's linear span."""
    cols = _model_columns(model, include_expression)
    q, _ = np.linalg.qr(cols)
    return q


def project_to_span(model: LinearShapeModel, vertices, include_expression=True) -> np.ndarray:
    U = model_span(model, include_expression)
    x = np.asarray(vertices, float).ravel() - model.mean
    return (model.mean + U @ (U.T @ x)).reshape(-1, 3)


def nonrigid_refine(current: Mesh, scan: ScanCloud, model: LinearShapeModel, reg: float = 1.0,
                    smooth: float = 10.0, radius: float = 0.01, iterations: int = 10,
                    include_expression: bool = True, pose: RigidTransform | None = None) -> Mesh:
    """Per-vertex displacement ``d`` minimising

        sum_{v with a scan point within radius} |x_v + d_v - q_v|^2
        + reg |(I - U U^T)(x + d - A)|^2 + smooth sum_edges |d_i - d_j|^2

    with ``q_v`` the nearest scan point and ``U`` the orthonormalised model
    basis. ``reg = inf`` constrains the result to the model span. The
    quadratic is solved exactly (sparse factorisation plus a Woodbury
    correction for the low-rank projector); correspondences are refreshed up
    to ``iterations`` times while ``d`` stays measured from ``current``.
    ``current`` and ``scan`` are in the model frame unless ``pose`` maps the
    model frame into the scan frame.
    """
    if reg < 0 or smooth < 0:
        raise ValueError("regularisation weights must be non-negative")
    if current.n_vertices != model.n_vertices:
        raise ValueError("current mesh is not in model topology")
    pts = scan.points if pose is None else (scan.points - pose.translation) @ pose.rotation
    x = current.vertices.ravel()
    n3 = x.size
    U = model_span(model, include_expression)
    L = _laplacian(model.n_vertices, current.edges())
    tree = cKDTree(pts) if len(pts) else None
    A = model.mean
    d = np.zeros(n3)
    prev_sel = None
    for _ in range(max(iterations, 1)):
        sel = np.zeros(model.n_vertices, bool)
        q = np.zeros((model.n_vertices, 3))
        if tree is not None:
            dist, j = tree.query((x + d).reshape(-1, 3), distance_upper_bound=radius)
            sel = np.isfinite(dist)
            q[sel] = pts[j[sel]]
        if prev_sel is not None and np.array_equal(sel, prev_sel[0]) and np.array_equal(q, prev_sel[1]):
            break
        prev_sel = (sel, q)
        wdiag = np.repeat(sel.astype(float), 3)
        rhs_data = wdiag * (q.ravel() - x)
        if np.isinf(reg):
            d = _solve_in_span(U, wdiag, L, smooth, A, x, q.ravel())
        else:
            d = _solve_free(U, wdiag, L, smooth, reg, A, x, rhs_data)
    return current.with_vertices((x + d).reshape(-1, 3))


def _solve_free(U, wdiag, L, smooth, reg, A, x, rhs_data):
    n3 = x.size
    ridge = 1e-12 if reg == 0 else 0.0
    S = (sp.diags(wdiag + reg + ridge) + smooth * L).tocsc()
    r = x - A
    rhs = rhs_data - reg * (r - U @ (U.T @ r))
    lu = splu(S)
    y = lu.solve(rhs)
    if reg == 0:
        return y
    SU = np.column_stack([lu.solve(U[:, k]) for k in range(U.shape[1])])
    core = np.eye(U.shape[1]) / reg - U.T @ SU
    return y + SU @ np.linalg.solve(core, U.T @ y)


def _solve_in_span(U, wdiag, L, smooth, A, x, q):
    # x + d = A + U c; tiny |d|^2 tie-break makes the data-free case a projection
    eps = 1e-10
    LU = L @ U
    H = U.T @ (wdiag[:, None] * U) + smooth * U.T @ LU + eps * np.eye(U.shape[1])
    b = U.T @ (wdiag * (q - A)) - smooth * LU.T @ (A - x) + eps * U.T @ (x - A)
    c = np.linalg.solve(H, b)
    return A + U @ c - x


# --------------------------------------------------------------------------
# pipeline

def _posed(mesh: Mesh, pose: RigidTransform) -> Mesh:
    return mesh.with_vertices(apply_transform(mesh.vertices, pose))


def _mean_distance_mm(scan, mesh):
    return float(np.mean(scan_to_mesh_distance(scan.points, mesh)))


def register(model: LinearShapeModel, scan: ScanCloud, landmark_map: dict,
             cfg: RegistrationConfig | None = None, name: str = "scan") -> RegistrationResult:
    """Three-stage registration of one scan.

    Stage residuals are mean scan-to-mesh distances (mm) in the scan frame.
    A later stage whose result does not lower the residual is not adopted
    (``flags`` records this), which keeps the stage sequence monotone.
    """
    cfg = cfg or RegistrationConfig()
    res = RegistrationResult(name)
    fit = fit_landmarks(model, scan.landmarks, landmark_map, cfg.landmark_reg, cfg.fit_expression)
    mesh = decode_linear(model, fit.z, fit.expr)
    res.residuals["landmarks"] = _mean_distance_mm(scan, _posed(mesh, fit.pose))

    icp = fit_model_icp(model, scan, fit, cfg)
    if not icp.converged:
        res.flags.append("icp_diverged")
    icp_mesh = decode_linear(model, icp.z, icp.expr)
    r_icp = _mean_distance_mm(scan, _posed(icp_mesh, icp.pose))
    if r_icp <= res.residuals["landmarks"]:
        fit, mesh = icp, icp_mesh
    else:
        res.flags.append("icp_rejected")
        r_icp = res.residuals["landmarks"]
    res.residuals["icp"] = r_icp

    refined = nonrigid_refine(mesh, scan, model, cfg.nonrigid_reg, cfg.nonrigid_smooth,
                              cfg.nonrigid_radius, cfg.nonrigid_iterations,
                              include_expression=True, pose=fit.pose)
    r_nr = _mean_distance_mm(scan, _posed(refined, fit.pose))
    if r_nr <= r_icp:
        disp = np.linalg.norm(refined.vertices - mesh.vertices, axis=1) * M_TO_MM
        mesh = refined
    else:
        res.flags.append("nonrigid_rejected")
        r_nr = r_icp
        disp = np.zeros(model.n_vertices)
    res.residuals["nonrigid"] = r_nr
    res.deformation = {"mean": float(disp.mean()), "max": float(disp.max())}
    # neutral output: remove the fitted expression component, keep free-form detail
    neutral = mesh.vertices - (model.expr_basis @ fit.expr).reshape(-1, 3)
    res.fit = fit
    res.mesh = Mesh(neutral, model.faces)
    return res


def unify(model: LinearShapeModel, items, cfg: RegistrationConfig | None = None, out_dir=None,
          workers: int = 1):
    """Register a batch of ``(name, ScanCloud, landmark_map)`` items.

    Failures are caught per scan and flagged in the manifest. With
    ``out_dir`` the neutral meshes (``<name>.ply``) and ``manifest.json`` are
    written there. Returns ``(results, manifest)``.
    """
    cfg = cfg or RegistrationConfig()
    items = list(items)

    def run(item):
        name, scan, lmap = item
        try:
            return register(model, scan, lmap, cfg, name)
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            log.warning("registration of %s failed: %s", name, exc)
            return RegistrationResult(name, error=str(exc), flags=["failed"])

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, items))
    else:
        results = [run(it) for it in items]
    manifest = {"results": [r.to_dict() for r in results],
                "n_ok": sum(r.ok for r in results), "n_failed": sum(not r.ok for r in results)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            if r.ok:
                io.save_mesh(out / f"{r.name}.ply", r.mesh)
                manifest_entry = next(m for m in manifest["results"] if m["name"] == r.name)
                manifest_entry["mesh"] = f"{r.name}.ply"
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return results, manifest
