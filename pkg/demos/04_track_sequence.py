"""
Tracking a face through a short video
=====================================

The identity shape is known; per frame the tracker fits expression, head
pose and spherical-harmonics lighting by comparing shaded vertex colours
with the image. Albedo and focal length are fixed after the first frame.
"""
import sys
from pathlib import Path

import numpy as np

from metface.geometry import LinearShapeModel
from metface.plotting import plot_tracking
from metface.synthetic import SyntheticSpec, landmark_map, synth_cohort, synth_model, synth_sequence
from metface.tracker import EnergyWeights, FaceRig, energy, eval_rmse, track

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

spec = SyntheticSpec(n_frames=10)
model = synth_model(spec)
z = synth_cohort(SyntheticSpec(n_identities=1), model).identities[0].z
seq = synth_sequence(spec, model, z)
W, H = seq.camera.width, seq.camera.height
rig = FaceRig(model, seq.shape, W, H, landmark_map(model))

res = track(seq.frames, rig)
photo, depth = eval_rmse(res.states, seq.frames, rig)
terr = [np.linalg.norm(s.translation - t.translation) * 1000 for s, t in zip(res.states, seq.states)]
print(f"photometric RMSE {photo.mean():.2f}/255, depth RMSE {np.nanmean(depth) * 1000:.2f} mm, "
      f"worst translation error {max(terr):.2f} mm")
plot_tracking(photo, depth, out / "tracking")

# the image alone cannot tell a big head far away from a small head close
# by: scaling shape and translation together leaves every energy unchanged
s = 1.3
big = LinearShapeModel(s * model.mean, s * model.shape_basis, s * model.expr_basis, model.faces,
                       model.landmarks, model.kappa, model.albedo_mean, model.albedo_basis)
st = res.states[3]
st_big = st.copy()
st_big.translation = s * st.translation
a = energy(st, seq.frames[3], rig, EnergyWeights())
b = energy(st_big, seq.frames[3], FaceRig(big, s * seq.shape.vertices, W, H, landmark_map(model)),
           EnergyWeights())
print(f"E_dense {a.dense:.6g} vs {b.dense:.6g} after scaling by {s}")
