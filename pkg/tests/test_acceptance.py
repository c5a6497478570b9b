"""Acceptance gate: eight end-to-end criteria on synthetic data.

Each test times its whole body (data generation included) against a runtime
bound, and the terminal summary prints one PASS/FAIL line per criterion.
"""
import time

import numpy as np
import pytest

from metface.alignment import Protocol, benchmark_evaluate, kabsch_rigid, umeyama_similarity
from metface.geometry import (Camera, LinearShapeModel, RigidTransform, apply_transform, decoder_parameter_count,
                              project, random_rotation)
from metface.predictor import (MappingNetwork, SirenDecoder, TrainConfig, batch_loss_and_grad, evaluate_l1,
                               grad_check, mean_face_l1, siren_forward, siren_trunk_parameter_count, train)
from metface.registration import unify
from metface.synthetic import SyntheticSpec, landmark_map, synth_cohort, synth_model, synth_sequence
from metface.tracker import EnergyWeights, FaceRig, check_gradient, energy, eval_rmse, track


@pytest.fixture
def criterion(record_property):
    """Register a criterion for the summary; returns a ``finish`` callable that
    asserts the runtime bound at the end of the test body."""

    def start(name, bound_s=None):
        record_property("criterion", name)
        if bound_s:
            record_property("bound_s", bound_s)
        t0 = time.perf_counter()

        def finish():
            elapsed = time.perf_counter() - t0
            assert bound_s is None or elapsed < bound_s, f"runtime {elapsed:.1f} s over the {bound_s} s bound"

        return finish

    return start


def test_criterion_1_scale_ambiguity(criterion):
    finish = criterion("1 scale-ambiguity identity", 1)
    rng = np.random.default_rng(0)
    cam = Camera.centered(560.0, 256, 256)
    worst = 0.0
    for _ in range(1000):
        x = rng.uniform(-0.1, 0.1, size=(1, 3))
        pose = RigidTransform(random_rotation(rng), rng.uniform(-0.05, 0.05, 3) + [0, 0, 0.5])
        s = rng.uniform(0.5, 2.0)
        scaled = RigidTransform(pose.rotation, s * pose.translation)
        worst = max(worst, np.abs(project(s * x, scaled, cam) - project(x, pose, cam)).max())
    assert worst < 1e-9
    finish()


def test_criterion_2_alignment_oracles(criterion):
    finish = criterion("2 alignment oracles", 5)
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = rng.normal(size=(30, 3))
        R, t, s = random_rotation(rng), rng.normal(size=3), rng.uniform(0.5, 2.0)
        K = kabsch_rigid(p, p @ R.T + t)
        assert np.abs(K.rotation - R).max() < 1e-6 and np.abs(K.translation - t).max() < 1e-6
        U = umeyama_similarity(p, s * p @ R.T + t)
        assert abs(U.scale - s) < 1e-6 and np.abs(U.rotation - R).max() < 1e-6
        assert np.abs(U.translation - t).max() < 1e-6
    cube = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    T = kabsch_rigid(cube, 2 * cube)
    r = np.linalg.norm(apply_transform(cube, T) - 2 * cube, axis=1)
    assert np.abs(r - np.sqrt(0.75)).max() < 1e-6
    model = synth_model(SyntheticSpec())
    cohort = synth_cohort(SyntheticSpec(seed=5, n_identities=4, scale_perturbation=1.08, scan_noise_mm=0.2), model)
    subjects = cohort.subjects()
    rig = benchmark_evaluate(subjects, Protocol("rigid"))
    sim = benchmark_evaluate(subjects, Protocol("similarity"))
    for a, b in zip(sim.subjects, rig.subjects):
        assert a.label == b.label and a.mean <= b.mean
    finish()


def test_criterion_3_metrical_gap(criterion):
    finish = criterion("3 metrical-vs-non-metrical gap", 30)
    model = synth_model(SyntheticSpec())
    cohort = synth_cohort(SyntheticSpec(scale_perturbation=1.15), model)
    rig = benchmark_evaluate(cohort.subjects(), Protocol("rigid"))
    sim = benchmark_evaluate(cohort.subjects(), Protocol("similarity"))
    assert sim.mean < 0.01 and rig.mean > 1.0
    assert all(abs(r.transform.scale - 1.15) < 1e-3 for r in sim.subjects)
    finish()


def test_criterion_4_registration_monotonicity(criterion):
    finish = criterion("4 registration monotonicity", 60)
    model = synth_model(SyntheticSpec())
    cohort = synth_cohort(SyntheticSpec(n_identities=10), model)
    lmap = landmark_map(model)
    results, manifest = unify(model, [(i.name, i.scan, lmap) for i in cohort.identities])
    assert manifest["n_ok"] == 10
    for r in results:
        res = r.residuals
        assert res["landmarks"] >= res["icp"] >= res["nonrigid"]
        assert res["nonrigid"] / 1000 < 1e-4
    finish()


def test_criterion_5_predictor_training(criterion):
    finish = criterion("5 masked-L1 training", 120)
    model = synth_model(SyntheticSpec())
    cohort = synth_cohort(SyntheticSpec(n_identities=50), model)
    X = np.concatenate([i.features for i in cohort.identities])
    Xh = np.concatenate([i.heldout_features for i in cohort.identities])
    Y = [i.gt.vertices for i in cohort.identities]
    # default lr 1e-5 scaled x100 for the toy dimensions
    cfg = TrainConfig(lr=1e-3, batch_size=50, steps=2000, seed=0)
    res = train(MappingNetwork.create(X.shape[1], model.n_shape, cfg.hidden, seed=0), model, X, Y, cfg)
    assert res.history[-1] < 0.1 * res.history[0]
    assert evaluate_l1(res.net, model, Xh, Y) < mean_face_l1(model, Y)
    rng = np.random.default_rng(0)
    net = MappingNetwork.create(X.shape[1], model.n_shape, hidden=32, seed=4)
    z = net.forward(X[:5])[0]
    pred = (model.mean + z @ model.shape_basis.T).reshape(5, -1, 3)
    target = pred + rng.choice([-1, 1], pred.shape) * rng.uniform(1e-3, 2e-3, pred.shape)
    err = grad_check(lambda: batch_loss_and_grad(net, model, X[:5], target, model.kappa), net.params())
    assert err < 1e-4
    finish()


def test_criterion_6_tracker(criterion):
    finish = criterion("6 tracking energy and sequence", 180)
    spec = SyntheticSpec()
    model = synth_model(spec)
    cohort = synth_cohort(SyntheticSpec(n_identities=1), model)
    seq = synth_sequence(spec, model, cohort.identities[0].z)
    lm = landmark_map(model)
    W, H = seq.camera.width, seq.camera.height
    rig = FaceRig(model, seq.shape, W, H, lm)

    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(100):
        truth = seq.states[k % len(seq.states)]
        x = truth.vector()
        st = truth.with_vector(x + rng.normal(scale=0.01, size=x.size))
        st.focal += rng.normal(scale=5)
        err, errs, skipped = check_gradient(st, seq.frames[k % len(seq.frames)], rig, EnergyWeights())
        assert skipped < errs.size // 2
        worst = max(worst, err)
    assert worst < 1e-3

    res = track(seq.frames, rig)
    assert len(res.states) == 20 and res.flags == [""] * 20
    photo, _ = eval_rmse(res.states, seq.frames, rig)
    assert photo.mean() < 4.0
    terr = [np.linalg.norm(s.translation - t.translation) for s, t in zip(res.states, seq.states)]
    assert max(terr) < 2e-3

    s = 1.37
    scaled = LinearShapeModel(s * model.mean, s * model.shape_basis, s * model.expr_basis, model.faces,
                              model.landmarks, model.kappa, model.albedo_mean, model.albedo_basis)
    rig_s = FaceRig(scaled, s * seq.shape.vertices, W, H, lm)
    for st, fr in zip(res.states[::5], seq.frames[::5]):
        st2 = st.copy()
        st2.translation = s * st.translation
        a = energy(st, fr, rig, EnergyWeights())
        b = energy(st2, fr, rig_s, EnergyWeights())
        assert a.n_visible == b.n_visible
        assert abs(a.dense - b.dense) < 1e-6 and abs(a.lmk - b.lmk) < 1e-6
    finish()


def test_criterion_7_siren(criterion):
    finish = criterion("7 SIREN decoder")
    rng = np.random.default_rng(0)
    dec = SirenDecoder.create(4, n_hidden=2, width=8, cond_hidden=8, cond_layers=1, seed=1)
    z = rng.normal(size=4)
    x = rng.uniform(-1, 1, size=(10, 3))
    raw = dec.conditioner.forward(z)[0][0].reshape(2, 2, 8)
    fr, ph = 30.0 * (1 + 0.5 * raw[0]), raw[1]
    W, b = dec.trunk_w, dec.trunk_b
    h = np.sin(fr[0] * (x @ W[0].T + b[0]) + ph[0])
    h = np.sin(fr[1] * (h @ W[1].T + b[1]) + ph[1])
    assert np.abs(siren_forward(dec, z, x).vertices - (h @ W[2].T + b[2])).max() < 1e-9

    assert siren_trunk_parameter_count(8, 256) == 462_339
    assert SirenDecoder.create(8, n_hidden=8, width=256, cond_hidden=8,
                               cond_layers=1).trunk_parameter_count() == 462_339

    dec = SirenDecoder.create(4, n_hidden=3, width=16, cond_hidden=8, cond_layers=1)
    dec.conditioner.weights[-1][:] = 0
    n = dec.n_hidden * dec.width
    dec.conditioner.biases[-1][:n] = -2.0  # frequency 0
    dec.conditioner.biases[-1][n:] = np.pi / 2  # sin -> 1
    out = siren_forward(dec, np.ones(4), rng.uniform(-1, 1, size=(50, 3))).vertices
    assert np.all(out == out[0])
    assert np.abs(out[0] - (dec.trunk_w[-1].sum(axis=1) + dec.trunk_b[-1])).max() < 1e-12
    finish()


def test_criterion_8_decoder_parameter_count(criterion):
    finish = criterion("8 decoder parameter identity")
    assert decoder_parameter_count(300, 5023) == 4_535_769
    finish()
