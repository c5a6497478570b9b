"""Batch command line: ``metface <command> ...``.

Exit status is 0 on success, 1 when the inputs are valid but the work fails
(bad data, degenerate geometry, unreadable files) and 2 on usage errors.
All JSON output is written with sorted keys so repeated runs are
byte-identical.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .alignment import AlignmentError, DegenerateError, IcpOptions, Protocol, Subject, benchmark_evaluate
from .config import ConfigError, load_config
from .geometry import GeometryError
from .predictor import (MappingNetwork, TrainConfig, TrainingError, evaluate_l1, mean_face_l1, predict_shape,
                        train, weights_from_tensors, weights_to_tensors)
from .registration import RegistrationConfig, RegistrationError, register
from .synthetic import (SyntheticSpec, landmark_map, load_scan, synth_cohort, synth_model, synth_sequence,
                        write_cohort, write_sequence)
from .tracker import FaceRig, Frame, TrackConfig, TrackingError, eval_rmse, render, track

log = logging.getLogger("metface")

DOMAIN_ERRORS = (ValueError, KeyError, OSError, RuntimeError, np.linalg.LinAlgError, io.FormatError,
                 ConfigError, GeometryError, DegenerateError, AlignmentError, RegistrationError,
                 TrainingError, TrackingError)


def _dump(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _stems(directory, suffix):
    return {p.stem: p for p in sorted(Path(directory).glob(f"*{suffix}"))}


# --------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    spec = load_config(SyntheticSpec, args.cfg)
    if args.seed is not None:
        spec = SyntheticSpec(**{**spec.__dict__, "seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = synth_model(spec)
    io.save_model(out / "model.mtc1", model)
    _dump(out / "spec.json", spec.__dict__)
    what = set(args.what.split(","))
    unknown = what - {"model", "cohort", "sequence"}
    if unknown:
        raise ValueError(f"unknown artifact kinds: {sorted(unknown)}")
    cohort = None
    if "cohort" in what or "sequence" in what:
        cohort = synth_cohort(spec, model)
    if "cohort" in what:
        write_cohort(cohort, out / "cohort")
    if "sequence" in what:
        seq = synth_sequence(spec, model, cohort.identities[0].z)
        write_sequence(seq, out / "sequence")
        io.write_landmark_map(out / "sequence" / "lmk" / "landmark_map.json", landmark_map(model))
    print(f"wrote {out}")
    return 0


def _landmark_map_for(model, path):
    return io.read_landmark_map(path) if path else landmark_map(model)


def cmd_register(args) -> int:
    model = io.load_model(args.model)
    cfg = load_config(RegistrationConfig, args.cfg)
    lm_path = Path(args.lmk)
    lmap_path = args.landmark_map or (lm_path.parent / "landmark_map.json")
    lmap = _landmark_map_for(model, lmap_path if Path(lmap_path).exists() else None)
    scan = load_scan(args.scan, args.lmk)
    res = register(model, scan, lmap, cfg, Path(args.scan).stem)
    io.save_mesh(args.out, res.mesh)
    if args.manifest:
        entry = res.to_dict()
        entry["mesh"] = str(args.out)
        _dump(args.manifest, {"results": [entry], "n_ok": 1, "n_failed": 0})
    print(f"{res.name}: residual {res.residuals['nonrigid']:.6g} mm"
          + (f" ({', '.join(res.flags)})" if res.flags else ""))
    return 0


def cmd_evaluate(args) -> int:
    preds = _stems(args.pred, ".ply") or _stems(args.pred, ".obj")
    scans = _stems(args.scan, ".ply")
    lmks = _stems(args.lmk, ".json")
    lmap_path = Path(args.landmark_map) if args.landmark_map else Path(args.lmk) / "landmark_map.json"
    lmap = io.read_landmark_map(lmap_path)
    names = sorted(set(preds) & set(scans))
    if not names:
        raise ValueError("no prediction/scan pairs with matching names")
    subjects, failures = [], {}
    for n in names:
        if n not in lmks:
            failures[n] = "missing landmark file"
            continue
        subjects.append(Subject(n, io.load_mesh(preds[n]), load_scan(scans[n], lmks[n]), lmap))
    icp = IcpOptions(max_iterations=args.icp_iterations)
    protocol = Protocol(args.protocol, "dense-icp" if args.icp == "on" else "landmarks", icp)
    result = benchmark_evaluate(subjects, protocol, args.bin_mm, args.max_mm, args.workers)
    result.failures.update(failures)
    report = result.to_dict()
    report["label"] = args.label or args.protocol
    _dump(args.report, report)
    if args.csv:
        from .plotting import write_csv
        write_csv(args.csv, ["subject", "median_mm", "mean_mm", "std_mm", "n_points"],
                  [[r.label, r.median, r.mean, r.std, int(r.distances.size)] for r in result.subjects])
    print(f"{protocol.alignment}: mean {result.mean:.6g} mm, median {result.median:.6g} mm "
          f"over {len(result.subjects)} subjects, {len(result.failures)} failures")
    return 0


def _load_dataset(path, split):
    path = Path(path)
    manifest = json.loads(path.read_text())
    feats = io.read_mtc1(path.parent / manifest["features"])["features"]
    rows, meshes = [], []
    for s in manifest["samples"]:
        if s["split"] == split:
            rows.append(feats[s["row"]])
            meshes.append(io.load_mesh(path.parent / s["mesh"]).vertices)
    return np.array(rows), meshes


def cmd_train(args) -> int:
    model = io.load_model(args.model)
    cfg = load_config(TrainConfig, args.cfg)
    if args.seed is not None:
        cfg = TrainConfig(**{**cfg.__dict__, "seed": args.seed})
    X, Y = _load_dataset(args.data, "train")
    if not len(X):
        raise ValueError("dataset has no training samples")
    k = cfg.n_components or model.n_shape
    net = MappingNetwork.create(X.shape[1], k, hidden=cfg.hidden, seed=cfg.seed)
    res = train(net, model, X, Y, cfg)
    io.write_mtc1(args.out, weights_to_tensors(res.net, res.model))
    summary = {"initial_loss": res.history[0] if res.history else None,
               "final_loss": res.history[-1] if res.history else None, "steps": len(res.history)}
    Xv, Yv = _load_dataset(args.data, "val")
    if len(Xv):
        summary["val_l1"] = evaluate_l1(res.net, res.model, Xv, Yv, cfg.use_kappa)
        summary["val_mean_face_l1"] = mean_face_l1(res.model, Yv, cfg.use_kappa)
    if args.history:
        _dump(args.history, {"history": res.history, **summary})
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    net, dec = weights_from_tensors(io.read_mtc1(args.weights))
    feats = io.read_mtc1(args.feature)["features"]
    feats = feats.reshape(1, -1) if feats.ndim == 1 else feats
    if not 0 <= args.row < len(feats):
        raise ValueError(f"row {args.row} out of range (file has {len(feats)})")
    io.save_mesh(args.out, predict_shape(net, dec, feats[args.row]))
    print(f"wrote {args.out}")
    return 0


def load_frames(frames_dir, lmk_dir, depth_dir=None):
    images = _stems(frames_dir, ".ppm")
    lmks = _stems(lmk_dir, ".json")
    depths = _stems(depth_dir, ".pfm") if depth_dir else {}
    if not images:
        raise ValueError(f"no frames in {frames_dir}")
    frames = []
    for stem in sorted(images):
        if stem not in lmks:
            raise ValueError(f"frame {stem} has no landmark file")
        names, px, conf = io.read_landmarks_2d(lmks[stem])
        depth = None
        if stem in depths:
            depth = io.read_pfm(depths[stem])
            depth = np.where(depth > 0, depth, np.inf)
        frames.append(Frame(io.read_ppm(images[stem]), names, px, conf, depth))
    return sorted(images), frames


def cmd_track(args) -> int:
    model = io.load_model(args.model)
    shape = io.load_mesh(args.shape)
    cfg = load_config(TrackConfig, args.cfg)
    stems, frames = load_frames(args.frames, args.lmk, args.depth)
    lmap_path = args.landmark_map or Path(args.lmk) / "landmark_map.json"
    lmap = _landmark_map_for(model, lmap_path if Path(lmap_path).exists() else None)
    h, w = frames[0].image.shape[:2]
    rig = FaceRig(model, shape, w, h, lmap)
    res = track(frames, rig, cfg)
    out = res.to_dict()
    photo, depth = eval_rmse(res.states, frames, rig)
    for k, fr in enumerate(out["frames"]):
        fr["frame"] = stems[k]
        fr["photometric_rmse"] = float(photo[k])
        fr["depth_rmse"] = None if np.isnan(depth[k]) else float(depth[k])
    _dump(args.out, out)
    if args.render:
        rdir = Path(args.render)
        rdir.mkdir(parents=True, exist_ok=True)
        for stem, st in zip(stems, res.states):
            io.write_ppm(rdir / f"{stem}.ppm", render(st, rig.shape, model, rig.camera(st.focal)).image)
    print(f"tracked {len(frames)} frames, mean photometric RMSE {photo.mean():.4g}")
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_cumulative, plot_tracking
    reports = [json.loads(Path(p).read_text()) for p in args.report]
    if not reports:
        raise ValueError("empty report list")
    if all("curve" in r for r in reports):
        curves = {}
        for i, (p, r) in enumerate(zip(args.report, reports)):
            label = r.get("label") or Path(p).stem
            if label in curves:
                label = f"{label}-{i}"
            curves[label] = (r["curve"]["threshold_mm"], r["curve"]["fraction"])
        plot_cumulative(curves, args.out)
    elif len(reports) == 1 and "frames" in reports[0]:
        fr = reports[0]["frames"]
        if not fr:
            raise ValueError("empty tracking report")
        plot_tracking([f["photometric_rmse"] for f in fr],
                      [np.nan if f["depth_rmse"] is None else f["depth_rmse"] for f in fr], args.out)
    else:
        raise ValueError("reports must all be benchmark reports, or a single tracking report")
    print(f"wrote {Path(args.out).with_suffix('.csv')} and .svg")
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metface", description="Metrical 3D face toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", help="generate a synthetic model, scan cohort and video sequence")
    s.add_argument("--out", required=True)
    s.add_argument("--cfg", help="SyntheticSpec JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--what", default="model,cohort,sequence")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("register", help="register one scan to the model topology")
    s.add_argument("--model", required=True)
    s.add_argument("--scan", required=True)
    s.add_argument("--lmk", required=True, help="3D landmark JSON")
    s.add_argument("--landmark-map", help="name -> vertex index JSON (default: next to --lmk)")
    s.add_argument("--cfg", help="RegistrationConfig JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--manifest")
    s.add_argument("--seed", type=int, help="accepted for uniformity; registration is deterministic")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("evaluate", help="benchmark predicted meshes against scans")
    s.add_argument("--pred", required=True)
    s.add_argument("--scan", required=True)
    s.add_argument("--lmk", required=True)
    s.add_argument("--landmark-map")
    s.add_argument("--protocol", choices=["rigid", "similarity"], default="similarity")
    s.add_argument("--icp", choices=["on", "off"], default="on")
    s.add_argument("--icp-iterations", type=int, default=100)
    s.add_argument("--bin-mm", type=float, default=0.1)
    s.add_argument("--max-mm", type=float, default=10.0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--label")
    s.add_argument("--report", required=True)
    s.add_argument("--csv")
    s.add_argument("--seed", type=int, help="accepted for uniformity; evaluation is deterministic")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("train-predictor", help="train the feature -> shape mapping network")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="dataset manifest JSON")
    s.add_argument("--cfg", help="TrainConfig JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--history")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="decode a shape from an identity feature")
    s.add_argument("--weights", required=True)
    s.add_argument("--feature", required=True)
    s.add_argument("--row", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="accepted for uniformity; prediction is deterministic")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("track", help="track expression, pose and lighting through a frame sequence")
    s.add_argument("--model", required=True)
    s.add_argument("--shape", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--lmk", required=True)
    s.add_argument("--depth", help="reference depth maps (PFM) for depth RMSE")
    s.add_argument("--landmark-map")
    s.add_argument("--cfg", help="TrackConfig JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--render")
    s.add_argument("--seed", type=int, help="accepted for uniformity; tracking is deterministic")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("plot", help="cumulative-error or per-frame RMSE plot (CSV + SVG)")
    s.add_argument("--report", required=True, nargs="+")
    s.add_argument("--out", required=True, help="output path prefix")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"metface {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
