import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metface import io
from metface.alignment import Protocol, benchmark_evaluate
from metface.geometry import decode_linear, rodrigues
from metface.synthetic import (FRONT, SyntheticSpec, icosphere, landmark_map, landmark_names, load_scan,
                               spec_from_json, spec_to_dict, synth_model, write_cohort, write_sequence)
from metface.tracker import TrackerState, render


# -- model ----------------------------------------------------------------------------

def test_model_file_is_byte_identical_per_seed(tmp_path):
    for k in range(2):
        io.save_model(tmp_path / f"m{k}.mtc1", synth_model(SyntheticSpec(seed=7)))
    io.save_model(tmp_path / "other.mtc1", synth_model(SyntheticSpec(seed=8)))
    a, b, c = ((tmp_path / n).read_bytes() for n in ("m0.mtc1", "m1.mtc1", "other.mtc1"))
    assert a == b and a != c


def test_default_toy_dimensions(model):
    assert model.n_vertices == 642 and len(icosphere(3)[0]) == 642
    assert (model.n_shape, model.n_expr) == (10, 5)


def test_bases_are_orthonormal(model):
    for B in (model.shape_basis, model.expr_basis, np.hstack([model.shape_basis, model.expr_basis])):
        assert np.abs(B.T @ B - np.eye(B.shape[1])).max() < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decode_distance_grows_along_a_direction(model, seed):
    # [DERIVED] RMS vertex distance to the mean along t * d for t = 0 .. 1
    d = np.random.default_rng(seed).normal(size=model.n_shape)
    d /= np.linalg.norm(d)
    mean = model.mean.reshape(-1, 3)
    dist = [np.sqrt(np.mean(np.sum((decode_linear(model, t * d).vertices - mean) ** 2, axis=1)))
            for t in np.linspace(0, 1, 11)]
    assert dist[0] == 0 and np.all(np.diff(dist) > 0)


def test_landmarks_are_distinct_front_vertices(model):
    lm = model.landmarks
    assert len(set(lm.tolist())) == len(lm)
    assert np.all(model.mean.reshape(-1, 3)[lm] @ FRONT > 0)


def test_invalid_spec_rejected():
    with pytest.raises(ValueError):
        SyntheticSpec(n_shape=0)
    with pytest.raises(ValueError):
        SyntheticSpec(n_shape=3 * 642 + 1)


# -- cohorts ---------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["rigid", "similarity"])
def test_clean_cohort_evaluates_to_zero(cohort, mode):
    res = benchmark_evaluate(cohort.subjects()[:3], Protocol(mode))
    assert res.mean < 1e-3 and not res.failures


def test_scaled_prediction_is_exact(scaled_cohort):
    ident = scaled_cohort.identities[0]
    assert np.allclose(ident.prediction.vertices * 1.15, ident.gt.vertices, rtol=0, atol=1e-15)


def test_features_are_unit_vectors(cohort):
    for ident in cohort.identities:
        for f in (ident.features, ident.heldout_features):
            assert np.allclose(np.linalg.norm(f, axis=1), 1.0)


def test_cohort_manifest_round_trip(tmp_path, model, cohort):
    manifest = write_cohort(cohort, tmp_path)
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == manifest
    feats = io.read_mtc1(tmp_path / manifest["features"])["features"]
    assert len(feats) == len(manifest["samples"])
    for s in manifest["samples"]:
        mesh = io.load_mesh(tmp_path / s["mesh"])
        assert np.array_equal(mesh.faces, model.faces)
    ident = cohort.identities[0]
    scan = load_scan(tmp_path / "scan" / f"{ident.name}.ply", tmp_path / "lmk" / f"{ident.name}.json")
    assert np.abs(scan.points - ident.scan.points).max() < 1e-6  # float32 on disk
    assert np.array_equal(scan.mask, ident.scan.mask)
    assert sorted(scan.landmarks) == sorted(ident.scan.landmarks)
    assert io.read_landmark_map(tmp_path / "lmk" / "landmark_map.json") == landmark_map(model)


def test_spec_json_round_trip(tmp_path):
    spec = SyntheticSpec(seed=3, n_identities=4, scale_perturbation=1.15)
    (tmp_path / "s.json").write_text(json.dumps(spec_to_dict(spec)))
    assert spec_from_json(tmp_path / "s.json") == spec


# -- sequences -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def written_sequence(tmp_path_factory, sequence):
    out = tmp_path_factory.mktemp("seq")
    write_sequence(sequence, out)
    return out


def test_frame_rerender_is_pixel_identical(model, sequence, written_sequence):
    truth = json.loads((written_sequence / "truth.json").read_text())
    st0 = TrackerState.from_dict(truth["states"][0])
    again = render(st0, io.load_mesh(written_sequence / "shape.ply"), model, sequence.camera).image
    on_disk = io.read_ppm(written_sequence / "frames" / "0000.ppm")
    assert np.array_equal(np.rint(np.clip(again, 0, 1) * 255) / 255, on_disk)


def _ray_mesh_depth(X, faces, u, v, cam):
    """Nearest hit depth of the pixel ray through (u, v), Moller-Trumbore over all triangles."""
    d = np.array([(u - cam.cx) / cam.focal, (v - cam.cy) / cam.focal, 1.0])
    a, b, c = X[faces[:, 0]], X[faces[:, 1]], X[faces[:, 2]]
    e1, e2 = b - a, c - a
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = -a
    bu = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    bv = (q @ d) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t > 0)
    return t[hit].min()  # d has unit z, so t is the camera-space depth


def test_depth_at_face_centre_matches_ray_cast(model, sequence, written_sequence):
    # [DERIVED] analytic ray-mesh intersection through the pixel under the nose tip
    cam = sequence.camera
    truth = sequence.states[0]
    p = sequence.shape.vertices + (model.expr_basis @ truth.expr).reshape(-1, 3)
    X = p @ rodrigues(truth.rotation).T + truth.translation
    tip = X[np.argmax(sequence.shape.vertices @ FRONT)]
    j, i = np.floor(tip[:2] / tip[2] * cam.focal + [cam.cx, cam.cy]).astype(int)
    depth = io.read_pfm(written_sequence / "depth" / "0000.pfm")
    ref = _ray_mesh_depth(X, model.faces, j + 0.5, i + 0.5, cam)
    assert abs(sequence.frames[0].depth[i, j] - ref) < 1e-6
    assert abs(depth[i, j] - ref) < 1e-6  # float32 on disk


def test_landmark_files_match_projection(model, sequence, written_sequence):
    cam = sequence.camera
    for t in (0, len(sequence.states) - 1):
        st_ = sequence.states[t]
        p = sequence.shape.vertices + (model.expr_basis @ st_.expr).reshape(-1, 3)
        X = p[model.landmarks] @ rodrigues(st_.rotation).T + st_.translation
        proj = X[:, :2] / X[:, 2:] * cam.focal + [cam.cx, cam.cy]
        names, px, conf = io.read_landmarks_2d(written_sequence / "lmk" / f"{t:04d}.json")
        assert list(names) == landmark_names(model)
        assert np.abs(px - proj).max() < 0.5 and np.all(conf == 1)
        assert np.all((px >= 0) & (px < cam.width))


def test_sequence_truth_is_smooth(sequence):
    # inter-frame motion stays small enough to track from the previous state
    T = np.array([s.translation for s in sequence.states])
    R = np.array([s.rotation for s in sequence.states])
    assert np.abs(np.diff(T, axis=0)).max() < 0.005
    assert np.abs(np.diff(R, axis=0)).max() < np.radians(3)
