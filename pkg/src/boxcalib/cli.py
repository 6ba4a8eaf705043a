"""Command-line front end.

Subcommands::

    boxcalib gen-dataset --out DIR --count N [--seed S]
    boxcalib train       --out DIR [--dataset DIR] [--preset micro|paper] [--lambda L]
    boxcalib calibrate   --views DIR (--checkpoint FILE | --gt-labels) --out FILE
    boxcalib eval        --views DIR --calibration FILE --out DIR
    boxcalib export-ply  --views DIR --calibration FILE --out FILE

Option precedence: built-in defaults, then command-line flags, then the file
given with ``--config``.  A config file is a JSON object whose keys are the
long option names (dashes or underscores); when it is supplied its values
replace the corresponding flags.

Exit codes: 0 success, 2 invalid input, 3 degenerate calibration, 4 I/O failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .calibration import (CalibrationError, ICPConfig, View, calibration_to_json, estimate_pose,
                          load_calibration, pose_from_labels, refine_icp)
from .dataset import generate_dataset, load_dataset
from .geometry import deproject, intrinsics_pool, pose_error
from .metrics import MetricReport, hausdorff_rms, rms_dist, write_reports
from .procrustes import DegenerateConfigurationError
from .segnet import (ListDataset, NetworkConfig, SegNet, SyntheticStream, TrainConfig,
                     network_config, save_network, train)
from .structure import (RHO_PRESETS, NoiseConfig, PoseSamplerConfig, default_structure,
                        load_structure)

log = logging.getLogger("boxcalib")

EXIT_OK, EXIT_INVALID, EXIT_DEGENERATE, EXIT_IO = 0, 2, 3, 4

# per-camera PLY colors, cycled
PALETTE = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180),
           (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 190), (0, 128, 128)]


class InvalidInput(ValueError):
    pass


class DegenerateCalibration(RuntimeError):
    pass


def _structure(args):
    if getattr(args, "structure", None):
        with open(args.structure) as f:
            return load_structure(f)
    return default_structure()


def _merge_config(args, parser):
    """Overlay the --config JSON object onto the parsed flags."""
    if not args.config:
        return args
    with open(args.config) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"{args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvalidInput(f"{args.config}: expected a JSON object")
    known = set(vars(args))
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if attr == "lambda":
            attr = "lam"
        if attr not in known:
            raise InvalidInput(f"{args.config}: unknown option {key!r}")
        setattr(args, attr, value)
    return args


def _sampler(args):
    if isinstance(args.sampler, dict):
        return PoseSamplerConfig.from_dict(args.sampler)
    return PoseSamplerConfig(rho=RHO_PRESETS[args.rho_preset])


def _noise(args):
    if isinstance(args.noise, dict):
        return NoiseConfig.from_dict(args.noise)
    return NoiseConfig.none() if args.noise == "none" else NoiseConfig()


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_dataset(args):
    model = _structure(args)
    pool = intrinsics_pool(args.width, args.height)
    if args.single_intrinsics:
        pool = pool[:1]
    generate_dataset(args.out, model, _sampler(args), _noise(args), pool, args.count, args.seed)
    return EXIT_OK


def _checkpoint_config(path):
    side = Path(path).with_suffix(".json")
    doc = json.loads(side.read_text())
    doc["widths"] = tuple(doc["widths"])
    doc["enc_convs"] = tuple(doc["enc_convs"])
    doc["dec_convs"] = tuple(doc["dec_convs"])
    return NetworkConfig(**doc)


def load_checkpoint_network(path):
    cfg = _checkpoint_config(path)
    net = SegNet(cfg)
    net.load_state_dict(ad.load_checkpoint(path))
    return net


def cmd_train(args):
    model = _structure(args)
    if args.dataset:
        ds = load_dataset(args.dataset)
        samples = ds.samples()
        if not samples:
            raise InvalidInput("training dataset is empty")
        h, w = samples[0].depth.shape
        data = ListDataset(samples, seed=args.seed)
        model = ds.model
    else:
        h, w = args.height, args.width
        data = SyntheticStream(model, _sampler(args), _noise(args), intrinsics_pool(w, h),
                               seed=args.seed, workers=args.workers)
    net_cfg = network_config(args.preset, h, w, model.num_classes)
    train_cfg = TrainConfig(lam=args.lam, lr=args.lr, batch=args.batch,
                            iterations=args.iterations, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net, _ = train(data, net_cfg, train_cfg, model, log_path=out / "train_log.csv")
    ckpt = out / "model.bxck"
    save_network(ckpt, net)
    ckpt.with_suffix(".json").write_text(json.dumps(net_cfg.to_dict(), indent=2))
    log.info("checkpoint written to %s", ckpt)
    return EXIT_OK


def _views(ds):
    return [View(cid, s.depth, s.intrinsics, s.pose) for cid, s in zip(ds.ids, ds.samples())]


def cmd_calibrate(args):
    ds = load_dataset(args.views)
    model = ds.model
    samples = ds.samples()
    net = None
    if not args.gt_labels:
        if not args.checkpoint:
            raise InvalidInput("calibrate needs --checkpoint or --gt-labels")
        net = load_checkpoint_network(args.checkpoint)
    initial, diagnostics = {}, {}
    for cid, s in zip(ds.ids, samples):
        try:
            if net is None:
                est = pose_from_labels(s.labels, s.depth, s.intrinsics, model, args.min_pixels)
            else:
                est = estimate_pose(s.depth, s.intrinsics, net, model, args.min_pixels)
        except DegenerateConfigurationError as exc:
            log.warning("camera %s: initial pose failed: %s", cid, exc)
            diagnostics[cid] = {"status": "failed", "error": str(exc)}
            continue
        initial[cid] = est.pose
        diagnostics[cid] = {"status": "ok", **est.diagnostics}
    views = [View(cid, s.depth, s.intrinsics) for cid, s in zip(ds.ids, samples) if cid in initial]
    refined = dict(initial)
    if len(views) >= 2 and not args.no_refine:
        cfg = ICPConfig(max_iter=args.icp_iterations, max_corr_dist=args.max_corr_dist)
        res = refine_icp(views, initial, cfg, model)
        refined = res.poses
        for cid, d in res.diagnostics.items():
            diagnostics[cid].update(d)
            if d["lost_correspondences"]:
                diagnostics[cid]["status"] = "refinement_lost_correspondences"
    elif len(views) < 2:
        log.warning("fewer than two cameras have an initial pose; skipping refinement")
    doc = calibration_to_json(initial, refined, diagnostics)
    Path(args.out).write_text(json.dumps(doc, indent=2))
    failed = [cid for cid, d in diagnostics.items() if d["status"] == "failed"]
    if failed:
        raise DegenerateCalibration(f"no pose for camera(s) {', '.join(failed)}; "
                                    f"see diagnostics in {args.out}")
    return EXIT_OK


def _stage_reports(stage, poses, ds, samples, surface):
    rot = MetricReport(f"{stage}_rot_err_deg")
    trans = MetricReport(f"{stage}_trans_err_m")
    rms = MetricReport(f"{stage}_rms_to_model_m")
    fused = []
    for cid, s in zip(ds.ids, samples):
        pose = poses.get(cid)
        if pose is None:
            continue
        pts = pose.apply(deproject(s.depth, s.intrinsics).valid_points())
        if len(pts) == 0:
            continue
        fused.append(pts)
        r, t = pose_error(pose, s.pose)
        rot.add(r, cid)
        trans.add(t, cid)
        rms.add(rms_dist(pts, surface), cid)
    extra = {"cameras": len(fused)}
    if fused:
        cloud = np.concatenate(fused)
        extra["fused_rms_to_model_m"] = rms_dist(cloud, surface)
        extra["fused_hausdorff_rms_m"] = hausdorff_rms(cloud, surface)
    return [rot, trans, rms], extra


def cmd_eval(args):
    ds = load_dataset(args.views)
    cal = load_calibration(Path(args.calibration).read_text())
    samples = ds.samples()
    surface = ds.model.surface_cloud(args.surface_spacing).points
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for stage in ("initial", "refined"):
        reports, extra = _stage_reports(stage, cal[stage], ds, samples, surface)
        write_reports(reports, out / f"{stage}.csv", out / f"{stage}.json", extra=extra)
        summary[stage] = extra
        log.info("%s: %s", stage, extra)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_export_ply(args):
    ds = load_dataset(args.views)
    cal = load_calibration(Path(args.calibration).read_text())
    poses = cal[args.stage]
    chunks = []
    for i, (cid, s) in enumerate(zip(ds.ids, ds.samples())):
        pose = poses.get(cid)
        if pose is None:
            log.warning("camera %s has no %s pose; not exported", cid, args.stage)
            continue
        pts = pose.apply(deproject(s.depth, s.intrinsics).valid_points())
        color = np.tile(PALETTE[i % len(PALETTE)], (len(pts), 1))
        chunks.append((pts, color))
    write_ply(args.out, chunks)
    return EXIT_OK


def write_ply(path, chunks):
    """ASCII PLY with x y z red green blue; ``chunks`` is [(points, colors)]."""
    n = sum(len(p) for p, _ in chunks)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {n}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for pts, col in chunks:
            for p, c in zip(pts, col):
                f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")


# --------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed")
    common.add_argument("--config", help="JSON file whose values replace the flags")
    common.add_argument("--structure", help="structure description JSON (default: built-in)")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="boxcalib", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", parents=[common], help="render a synthetic dataset")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--width", type=int, default=320)
    g.add_argument("--height", type=int, default=240)
    g.add_argument("--rho-preset", choices=sorted(RHO_PRESETS), default="225")
    g.add_argument("--noise", choices=["default", "none"], default="default")
    g.add_argument("--sampler", default=None, help=argparse.SUPPRESS)
    g.add_argument("--single-intrinsics", action="store_true",
                   help="use only the default pinhole model")
    g.set_defaults(func=cmd_gen_dataset)

    t = sub.add_parser("train", parents=[common], help="train the segmentation network")
    t.add_argument("--dataset", help="dataset directory (default: live synthetic stream)")
    t.add_argument("--preset", choices=["micro", "paper"], default="micro")
    t.add_argument("--lambda", dest="lam", type=float, default=0.1, help="3D loss weight")
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--iterations", type=int, default=1000)
    t.add_argument("--width", type=int, default=128)
    t.add_argument("--height", type=int, default=96)
    t.add_argument("--rho-preset", choices=sorted(RHO_PRESETS), default="225")
    t.add_argument("--noise", choices=["default", "none"], default="default")
    t.add_argument("--sampler", default=None, help=argparse.SUPPRESS)
    t.add_argument("--workers", type=int, default=0, help="sample-generation processes")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", parents=[common], help="estimate and refine camera poses")
    c.add_argument("--views", required=True, help="dataset directory holding the views")
    c.add_argument("--checkpoint", help="network checkpoint (.bxck with a .json sidecar)")
    c.add_argument("--gt-labels", action="store_true",
                   help="use the stored label rasters instead of the network")
    c.add_argument("--min-pixels", type=int, default=16)
    c.add_argument("--icp-iterations", type=int, default=30)
    c.add_argument("--max-corr-dist", type=float, default=0.05)
    c.add_argument("--no-refine", action="store_true")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("eval", parents=[common], help="score a calibration against ground truth")
    e.add_argument("--views", required=True)
    e.add_argument("--calibration", required=True)
    e.add_argument("--surface-spacing", type=float, default=0.005)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-ply", parents=[common], help="write the fused cloud as PLY")
    x.add_argument("--views", required=True)
    x.add_argument("--calibration", required=True)
    x.add_argument("--stage", choices=["initial", "refined"], default="refined")
    x.set_defaults(func=cmd_export_ply)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _merge_config(args, parser)
        return args.func(args)
    except DegenerateCalibration as exc:
        log.error("%s", exc)
        return EXIT_DEGENERATE
    except (CalibrationError, DegenerateConfigurationError) as exc:
        log.error("degenerate calibration: %s", exc)
        return EXIT_DEGENERATE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except (InvalidInput, ValueError, KeyError, TypeError, ad.ShapeError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
