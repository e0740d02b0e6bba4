"""facefit command line: fit, eval-ssme, eval-cd, synth, gradcheck, info.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import io as fio
from .config import ConfigError, EnergyConfig, load_config
from .data import GROUPS, DataError
from .energy import TERMS, EnergyError, check_gradient, gradient
from .fitting import fit, initialize_params, reprojection_errors, world_vertices
from .geometry import Camera
from .model import ModelError, Region
from .procedural import make_head_model
from .recon import AlignmentError, evaluate_reconstruction, load_mesh, stats_csv
from .ssme import DEFAULT_HORIZONS, DEFAULT_RESOLUTION, REGION_SETS, evaluate_ssme, merge_reports, screen_meshes
from .synth import MOTIONS, SynthSpec, generate_sequence, perturb_params

log = logging.getLogger("facefit")

GRADCHECK_THRESHOLD = 1e-4
RUNTIME_ERRORS = (fio.FormatError, DataError, ConfigError, ModelError, EnergyError, AlignmentError, ValueError, OSError)


class UsageError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {path}")
    return p


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.6g}"


# ---------------------------------------------------------------- fit


def cmd_fit(args) -> int:
    model = fio.load_model(args.model)
    dataset = fio.load_sequence(args.sequence)
    config = load_config(args.config.read_text()) if args.config else EnergyConfig()
    dataset.observations.check_indices(model.n_vertices, dataset.n_cameras, dataset.n_frames)
    init = fio.load_params(args.init) if args.init else initialize_params(dataset, model)
    report = fit(dataset, config, init, model)
    err = reprojection_errors(report.params, dataset.observations, model)
    err = err[np.isfinite(err)]
    rms = float(np.sqrt(np.mean(err**2))) if len(err) else math.nan
    meta = {
        "iterations": report.iterations,
        "reason": report.reason,
        "final_lr": report.final_lr,
        "initial_energy": report.initial_energy,
        "energy": report.final_terms.as_dict(),
        "reprojection_rms_px": rms,
        "flags": report.flags,
    }
    fio.save_params(args.out, report.params, meta)
    trace = args.trace or args.out.with_name(args.out.name + ".trace.csv")
    fio.write_text_atomic(trace, report.trace_csv())
    for name, value in report.final_terms.as_dict().items():
        print(f"E_{name} = {_fmt(value)}")
    print(f"E_total = {_fmt(report.final_energy)}")
    print(f"reprojection_rms_px = {_fmt(rms)}")
    print(f"iterations = {report.iterations} ({report.reason})")
    for flag in report.flags:
        print(f"flag: {flag}")
    return 0


# ---------------------------------------------------------------- eval-ssme


def _rescaled(cam: Camera, width: int) -> Camera:
    s = width / cam.image_size[0]
    height = max(1, round(cam.image_size[1] * s))
    return Camera(cam.extrinsics, cam.focal * s, np.asarray(cam.principal_point) * s, (width, height), cam.calibrated)


def cmd_eval_ssme(args) -> int:
    if (args.pred_params is None) == (args.pred_meshes is None):
        raise UsageError("give exactly one of --pred-params or --pred-meshes")
    gt = fio.load_meshes(args.gt_meshes)
    model = fio.load_model(args.model) if args.model else None
    if args.pred_params is not None:
        if model is None:
            raise UsageError("--pred-params needs --model")
        params = fio.load_params(args.pred_params)
        pred_world, pred_tris = world_vertices(params, model), model.triangles
    else:
        pm = fio.load_meshes(args.pred_meshes)
        pred_world, pred_tris = pm.vertices, pm.triangles
    if len(pred_world) != gt.n_frames:
        raise DataError(f"frame count mismatch: {gt.n_frames} ground-truth vs {len(pred_world)} predicted")
    labels = gt.labels
    if labels is None and model is not None and model.n_vertices == gt.vertices.shape[1]:
        labels = model.region_labels
    regions = tuple(REGION_SETS) + ("all",) if labels is not None else ("all",)
    if labels is None:
        labels = np.full(gt.vertices.shape[1], int(Region.OTHER), dtype=np.uint8)
    reports = []
    for cam in fio.load_cameras(args.cameras):
        cam = _rescaled(cam, args.resolution)
        w, h = cam.image_size
        reports.append(
            evaluate_ssme(
                screen_meshes(gt.vertices, cam, gt.triangles, labels),
                screen_meshes(pred_world, cam, pred_tris, None),
                w,
                h,
                args.horizons,
                regions,
            )
        )
    report = merge_reports(reports)
    fio.write_text_atomic(args.out, report.to_csv())
    if args.per_frame:
        fio.write_text_atomic(args.per_frame, report.per_frame_csv())
    for r in report.regions:
        print(f"SSME[{r}] = {_fmt(report.aggregate[r])} px")
    return 0


# ---------------------------------------------------------------- eval-cd


def cmd_eval_cd(args) -> int:
    gt = load_mesh(args.gt, args.keypoints, role="gt")
    pred = load_mesh(args.pred, args.keypoints, role="pred")
    regions = tuple(REGION_SETS) if gt.labels is not None else ()
    result = evaluate_reconstruction(gt, pred, regions, with_scale=args.scale, symmetric=args.symmetric)
    fio.write_text_atomic(args.out, stats_csv(result.stats))
    for name, s in result.stats.items():
        print(f"CD[{name}] median {_fmt(s.median)} mean {_fmt(s.mean)} std {_fmt(s.std)} mm (n={s.count})")
    print(f"icp iterations = {result.icp.iterations} converged = {result.icp.converged}")
    return 0


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    if args.model:
        model = fio.load_model(args.model)
    else:
        model = make_head_model(n_vertices=args.vertices, seed=args.model_seed)
        if args.model_out:
            fio.save_model(args.model_out, model)
    spec = SynthSpec(
        frames=args.frames,
        cameras=args.cameras,
        seed=args.seed,
        motion=args.motion,
        sigma_obs=args.sigma,
        occlusion=args.occlusion,
        pose_jitter=args.pose_jitter,
        delta_d_scale=args.delta_d,
        mica_noise=None if args.no_mica else args.mica_noise,
        calibrated=not args.uncalibrated,
        image_size=(args.image_size, args.image_size),
    )
    dataset, gt = generate_sequence(model, spec)
    fio.save_sequence(args.out, dataset)
    if args.gt_params:
        fio.save_params(args.gt_params, gt, {"seed": args.seed})
    if args.gt_meshes:
        fio.save_meshes(args.gt_meshes, fio.MeshSequence(world_vertices(gt, model), model.triangles, model.region_labels))
    print(f"{len(dataset.observations)} observations, {spec.frames} frames, {spec.cameras} cameras")
    return 0


# ---------------------------------------------------------------- gradcheck


def _sabotaged(factor: float):
    def grad_fn(*a, **kw):
        return {g: v * factor for g, v in gradient(*a, **kw).items()}

    return grad_fn


def cmd_gradcheck(args) -> int:
    model = fio.load_model(args.model)
    dataset = fio.load_sequence(args.sequence)
    config = load_config(args.config.read_text()) if args.config else EnergyConfig()
    if config.mica_template is None and dataset.mica_template is not None:
        config = config.replace(mica_template=dataset.mica_template)
    if args.params:
        params = fio.load_params(args.params)
    else:
        params = perturb_params(initialize_params(dataset, model), 0.1, args.seed, groups=GROUPS)
    grad_fn = _sabotaged(args.sabotage) if args.sabotage is not None else None
    worst = 0.0
    for terms in [(t,) for t in TERMS] + [TERMS]:
        res = check_gradient(params, dataset.observations, config, model, terms, args.coords, args.seed, grad_fn)
        label = terms[0] if len(terms) == 1 else "total"
        print(f"{label}: max relative error {res.max_rel_error:.3e} over {len(res.coords)} coordinates")
        worst = max(worst, res.max_rel_error)
    ok = worst <= GRADCHECK_THRESHOLD
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAIL'}, threshold {GRADCHECK_THRESHOLD:g})")
    return 0 if ok else 1


# ---------------------------------------------------------------- info


def cmd_info(args) -> int:
    c = fio.load_file(args.path)
    print(f"{c.magic.decode()} version {c.version}, {len(c.chunks)} chunks")
    for name, arr in c.chunks.items():
        if name == "meta":
            continue
        print(f"  {name}: {arr.dtype.name} {tuple(arr.shape)}")
    if c.meta:
        print("meta: " + json.dumps(c.meta, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facefit", description="Multi-view face model fitting and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    f = sub.add_parser("fit", help="fit model parameters to an observation sequence")
    f.add_argument("--model", type=_existing, required=True, help="FTM1 model")
    f.add_argument("--sequence", type=_existing, required=True, help="FTS1 observation sequence")
    f.add_argument("--config", type=_existing, help="JSON energy/optimizer config")
    f.add_argument("--init", type=_existing, help="FTP1 initial parameters")
    f.add_argument("--out", type=Path, required=True, help="FTP1 output")
    f.add_argument("--trace", type=Path, help="energy trace CSV (default: OUT.trace.csv)")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval-ssme", help="screen-space motion error of a predicted sequence")
    s.add_argument("--gt-meshes", type=_existing, required=True, help="FTM1 ground-truth mesh sequence")
    s.add_argument("--pred-params", type=_existing, help="FTP1 fitted parameters (needs --model)")
    s.add_argument("--pred-meshes", type=_existing, help="FTM1 predicted mesh sequence (any topology)")
    s.add_argument("--model", type=_existing, help="FTM1 model")
    s.add_argument("--cameras", type=_existing, required=True, help="FTS1 or FTP1 file holding the cameras")
    s.add_argument("--horizons", type=_positive_int, default=DEFAULT_HORIZONS)
    s.add_argument("--resolution", type=_positive_int, default=DEFAULT_RESOLUTION, help="render width in pixels")
    s.add_argument("--out", type=Path, required=True, help="CSV output")
    s.add_argument("--per-frame", type=Path, help="optional per-frame EPE CSV")
    s.set_defaults(func=cmd_eval_ssme)

    c = sub.add_parser("eval-cd", help="scan-to-mesh distance after keypoint + ICP alignment")
    c.add_argument("--gt", type=_existing, required=True, help="ground-truth mesh (OBJ or FTM1)")
    c.add_argument("--pred", type=_existing, required=True, help="predicted mesh (OBJ or FTM1)")
    c.add_argument("--keypoints", type=_existing, required=True, help="JSON keypoint/region sidecar")
    c.add_argument("--out", type=Path, required=True, help="CSV output")
    c.add_argument("--scale", action="store_true", help="allow a uniform scale in the alignment")
    c.add_argument("--symmetric", action="store_true", help="also pool pred-to-gt distances")
    c.set_defaults(func=cmd_eval_cd)

    y = sub.add_parser("synth", help="generate a synthetic observation sequence")
    y.add_argument("--model", type=_existing, help="FTM1 model (default: procedural head)")
    y.add_argument("--model-out", type=Path, help="write the procedural model here")
    y.add_argument("--vertices", type=_positive_int, default=162)
    y.add_argument("--model-seed", type=int, default=0)
    y.add_argument("--frames", type=_positive_int, default=20)
    y.add_argument("--cameras", type=_positive_int, default=2)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--motion", choices=MOTIONS, default="sinusoidal")
    y.add_argument("--sigma", type=float, default=0.0, help="observation noise level (px)")
    y.add_argument("--occlusion", type=float, default=0.0, help="fraction of dropped observations")
    y.add_argument("--pose-jitter", type=float, default=0.0, help="per-frame head translation noise (m)")
    y.add_argument("--delta-d", type=float, default=0.0, help="rms of the true per-vertex deformation (m)")
    y.add_argument("--mica-noise", type=float, default=0.0, help="template noise (m)")
    y.add_argument("--no-mica", action="store_true", help="omit the neutral-shape template")
    y.add_argument("--uncalibrated", action="store_true", help="mark cameras as free")
    y.add_argument("--image-size", type=_positive_int, default=512)
    y.add_argument("--out", type=Path, required=True, help="FTS1 output")
    y.add_argument("--gt-params", type=Path, help="FTP1 ground-truth parameters")
    y.add_argument("--gt-meshes", type=Path, help="FTM1 ground-truth mesh sequence")
    y.set_defaults(func=cmd_synth)

    g = sub.add_parser("gradcheck", help="compare the analytic gradient with finite differences")
    g.add_argument("--model", type=_existing, required=True)
    g.add_argument("--sequence", type=_existing, required=True)
    g.add_argument("--config", type=_existing)
    g.add_argument("--params", type=_existing, help="FTP1 evaluation point (default: perturbed initialization)")
    g.add_argument("--coords", type=_positive_int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sabotage", type=float, help=argparse.SUPPRESS)  # test hook: scales the analytic gradient
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("info", help="summarize a container file")
    i.add_argument("path", type=_existing)
    i.set_defaults(func=cmd_info)
    return p


def _set_threads() -> None:
    value = os.environ.get("FACEFIT_THREADS")
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"FACEFIT_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"FACEFIT_THREADS must be a positive integer, got {value!r}")
    torch.set_num_threads(n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads()
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"facefit: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"facefit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
