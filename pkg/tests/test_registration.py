import json

import numpy as np
import pytest

from metface.alignment import DegenerateError, ScanCloud, kabsch_rigid, scan_to_mesh_distance
from metface.geometry import RigidTransform, apply_transform, decode_linear, random_rotation
from metface.registration import (Fit, RegistrationConfig, fit_landmarks, fit_model_icp, nonrigid_refine,
                                  project_to_span, register, unify)
from metface.synthetic import sample_surface


def landmarks_of(model, lmap, mesh, pose=None):
    pos = mesh.vertices[[lmap[n] for n in lmap]]
    if pose is not None:
        pos = apply_transform(pos, pose)
    return dict(zip(lmap, pos))


def test_fit_landmarks_mean_face(model, lmap):
    fit = fit_landmarks(model, landmarks_of(model, lmap, model.mean_mesh()), lmap)
    assert np.abs(fit.z).max() < 1e-6
    assert np.abs(fit.pose.rotation - np.eye(3)).max() < 1e-9 and np.abs(fit.pose.translation).max() < 1e-9


def test_fit_landmarks_recovers_known_code(model, lmap):
    rng = np.random.default_rng(5)
    z = rng.normal(scale=0.1, size=model.n_shape)
    pose = RigidTransform(random_rotation(rng, np.radians(30)), rng.uniform(-0.1, 0.1, 3))
    lm = landmarks_of(model, lmap, decode_linear(model, z), pose)
    # the constructed instance only determines z if the landmark Jacobian has full column rank
    J = model.shape_basis.reshape(model.n_vertices, 3, -1)[[lmap[n] for n in lmap]].reshape(-1, model.n_shape)
    assert np.linalg.matrix_rank(J) == model.n_shape
    fit = fit_landmarks(model, lm, lmap, reg=0.0)
    assert np.abs(fit.z - z).max() < 1e-4
    assert np.abs(fit.pose.rotation - pose.rotation).max() < 1e-6
    assert fit.residual < 1e-9


def test_fit_landmarks_infinite_regularisation_limit(model, lmap, rng):
    z = rng.normal(scale=0.1, size=model.n_shape)
    lm = landmarks_of(model, lmap, decode_linear(model, z))
    fit = fit_landmarks(model, lm, lmap, reg=1e12)
    assert np.abs(fit.z).max() < 1e-8
    names = sorted(lm)
    K = kabsch_rigid(model.mean.reshape(-1, 3)[[lmap[n] for n in names]], np.array([lm[n] for n in names]))
    assert np.abs(fit.pose.rotation - K.rotation).max() < 1e-6
    assert np.abs(fit.pose.translation - K.translation).max() < 1e-6


def test_fit_landmarks_degenerate(model, lmap):
    lm = landmarks_of(model, lmap, model.mean_mesh())
    with pytest.raises(DegenerateError):
        fit_landmarks(model, dict(list(lm.items())[:3]), lmap)


@pytest.fixture(scope="module")
def identity_scan(model):
    rng = np.random.default_rng(11)
    z = rng.normal(scale=0.1, size=model.n_shape)
    gt = decode_linear(model, z)
    pts, _, _ = sample_surface(gt, 4000, rng)
    return z, gt, ScanCloud(pts)


def test_model_icp_self_consistency(model, identity_scan):
    z, gt, scan = identity_scan
    rng = np.random.default_rng(2)
    init = Fit(z + rng.normal(scale=0.01, size=z.size), np.zeros(model.n_expr),
               RigidTransform(random_rotation(rng, np.radians(1)), rng.uniform(-0.002, 0.002, 3)))
    fit = fit_model_icp(model, scan, init)
    assert fit.converged
    mesh = decode_linear(model, fit.z)
    d = scan_to_mesh_distance(scan, mesh.with_vertices(apply_transform(mesh.vertices, fit.pose)))
    assert d.mean() / 1000 < 1e-5
    assert np.abs(fit.z - z).max() < 1e-3


def test_model_icp_on_mean_face(model):
    pts, _, _ = sample_surface(model.mean_mesh(), 3000, np.random.default_rng(4))
    init = Fit(np.zeros(model.n_shape), np.zeros(model.n_expr), RigidTransform())
    fit = fit_model_icp(model, ScanCloud(pts), init)
    assert np.abs(fit.z).max() < 1e-3


def test_nonrigid_zero_displacement_when_scan_is_surface(model, identity_scan):
    _, gt, _ = identity_scan
    out = nonrigid_refine(gt, ScanCloud(gt.vertices), model)
    assert np.abs(out.vertices - gt.vertices).max() < 1e-9


def test_nonrigid_span_limit_is_projection(model, identity_scan, rng):
    _, gt, _ = identity_scan
    cur = gt.with_vertices(gt.vertices + rng.normal(scale=0.002, size=gt.vertices.shape))
    out = nonrigid_refine(cur, ScanCloud(np.zeros((0, 3))), model, reg=np.inf, smooth=0.0)
    assert np.abs(out.vertices - project_to_span(model, cur.vertices)).max() < 1e-9


def test_nonrigid_span_limit_is_idempotent(model, identity_scan, rng):
    _, gt, scan = identity_scan
    cur = gt.with_vertices(gt.vertices + rng.normal(scale=0.002, size=gt.vertices.shape))
    once = nonrigid_refine(cur, scan, model, reg=np.inf, smooth=0.0)
    twice = nonrigid_refine(once, scan, model, reg=np.inf, smooth=0.0)
    assert np.abs(once.vertices - twice.vertices).max() < 1e-9
    empty = ScanCloud(np.zeros((0, 3)))
    once = nonrigid_refine(cur, empty, model, reg=np.inf)
    twice = nonrigid_refine(once, empty, model, reg=np.inf)
    assert np.abs(once.vertices - twice.vertices).max() < 1e-9


def test_nonrigid_captures_detail_outside_span(model, identity_scan):
    _, gt, _ = identity_scan
    v = gt.vertices
    # a smooth 5 mm bump on the front of the head; much smaller bumps drown in
    # the spacing noise of vertex-to-nearest-scan-point matches on 4000 points
    c = v[np.argmax(v[:, 2])]
    bump = 0.005 * np.exp(-np.sum((v - c) ** 2, axis=1) / (2 * 0.04 ** 2))
    n = v / np.linalg.norm(v, axis=1, keepdims=True)
    target = gt.with_vertices(v + bump[:, None] * n)
    scan = ScanCloud(sample_surface(target, 4000, np.random.default_rng(9))[0])
    before = scan_to_mesh_distance(scan, gt).mean()
    after = scan_to_mesh_distance(scan, nonrigid_refine(gt, scan, model)).mean()
    assert after < 0.8 * before


def test_nonrigid_rejects_negative_weights(model):
    with pytest.raises(ValueError):
        nonrigid_refine(model.mean_mesh(), ScanCloud(np.zeros((0, 3))), model, reg=-1.0)


@pytest.fixture(scope="module")
def batch(cohort):
    items = [(i.name, i.scan, s.landmark_map) for i, s in zip(cohort.identities[:5], cohort.subjects())]
    return items


def test_register_stages_and_topology(model, batch):
    for name, scan, lmap in batch[:3]:
        r = register(model, scan, lmap, name=name)
        res = r.residuals
        assert res["landmarks"] + 1e-9 >= res["icp"] >= res["nonrigid"] - 1e-9
        assert np.array_equal(r.mesh.faces, model.faces) and r.mesh.n_vertices == model.n_vertices


def test_unify_batch(model, batch, tmp_path):
    results, manifest = unify(model, batch, out_dir=tmp_path)
    assert manifest["n_ok"] == 5 and manifest["n_failed"] == 0
    for r in results:
        assert r.residuals["nonrigid"] / 1000 < 1e-4
        assert (tmp_path / f"{r.name}.ply").exists()
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert [e["name"] for e in on_disk["results"]] == [n for n, _, _ in batch]


def test_unify_empty_batch(model):
    results, manifest = unify(model, [])
    assert results == [] and manifest["n_ok"] == 0 and manifest["results"] == []


def test_unify_flags_degenerate_scan(model, batch):
    name, scan, lmap = batch[0]
    broken = ScanCloud(scan.points, dict(list(scan.landmarks.items())[:2]), scan.mask)
    items = batch[1:] + [("broken", broken, lmap)]
    results, manifest = unify(model, items, workers=2)
    assert manifest["n_ok"] == 4 and manifest["n_failed"] == 1
    bad = [r for r in results if not r.ok]
    assert [r.name for r in bad] == ["broken"] and "failed" in bad[0].flags


def test_register_recovers_neutral_shape(model, cohort):
    ident = cohort.identities[0]
    r = register(model, ident.scan, cohort.subjects()[0].landmark_map)
    assert np.abs(r.mesh.vertices - ident.gt.vertices).max() < 1e-4
    cfg = RegistrationConfig(icp_iterations=0)
    r0 = register(model, ident.scan, cohort.subjects()[0].landmark_map, cfg)
    assert r0.residuals["icp"] == r0.residuals["landmarks"]
