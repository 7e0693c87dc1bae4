"""Command-line interface: fit, interp, flow, densify, bench, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
The NG4D_THREADS environment variable caps BLAS thread pools and must be
honored before numpy loads, so heavy imports happen inside main().
"""

from __future__ import annotations

import argparse
import json
import os
import sys

GRADCHECK_TOLERANCE = 1e-4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _apply_thread_cap() -> None:
    cap = os.environ.get("NG4D_THREADS")
    if not cap:
        return
    for var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, cap)


def _add_fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--frames", nargs="+", metavar="PATH", help="input cloud files")
    p.add_argument("--times", nargs="+", type=float, metavar="T",
                   help="raw timestamps, one per frame (defaults to 0,1,2,...)")
    p.add_argument("--config", metavar="PATH", help="key=value config file")
    p.add_argument("--profile", choices=("object", "lidar"))
    p.add_argument("--points", type=int, metavar="N")
    p.add_argument("--gaussians", type=int, metavar="M")
    p.add_argument("--iters", type=int, metavar="K")
    p.add_argument("--seed", type=int, metavar="S")
    p.add_argument("--no-smooth", action="store_true",
                   help="disable the smoothness loss term")
    p.add_argument("--outlier-k", type=int, metavar="K",
                   help="enable outlier removal with this neighborhood size")
    p.add_argument("--outlier-std", type=float, metavar="R")
    p.add_argument("--ablate", action="append", default=[],
                   choices=("neural_field", "gauss_pc", "t_rbf_gr", "deformation"),
                   help="disable a component (repeatable)")
    p.add_argument("--fusion", choices=("cat", "attn", "off"))
    p.add_argument("--dump-clusters", metavar="PATH",
                   help="write per-frame mixture state JSON")


def _build_config(args):
    from .config import RunConfig, load_config_file

    overrides = load_config_file(args.config) if args.config else {}
    if args.profile:
        overrides["profile"] = args.profile
    if args.points is not None:
        overrides["points_per_frame"] = args.points
    if args.gaussians is not None:
        overrides["gaussians"] = args.gaussians
    if args.iters is not None:
        overrides["iterations"] = args.iters
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_smooth:
        overrides["smoothness"] = False
    if args.outlier_k is not None:
        overrides["outlier_removal"] = True
        overrides["outlier_k"] = args.outlier_k
    if args.outlier_std is not None:
        overrides["outlier_std"] = args.outlier_std
    for component in args.ablate:
        overrides[component] = False
    if args.fusion:
        overrides["fusion"] = {"attn": "attention"}.get(args.fusion, args.fusion)
    return RunConfig(**overrides).validate()


def _load_sequence(args):
    from .io import load_cloud
    from .pointcloud import Sequence

    if not args.frames:
        raise _UsageError("--frames is required (or --model for inference commands)")
    times = args.times if args.times else list(range(len(args.frames)))
    if len(times) != len(args.frames):
        raise _UsageError(f"{len(args.frames)} frames but {len(times)} times")
    frames = []
    for path, t in zip(args.frames, times):
        if not os.path.exists(path):
            raise FileNotFoundError(f"frame file not found: {path}")
        frames.append(load_cloud(path, timestamp=float(t)))
    return Sequence(frames)


def _fit_from_args(args):
    from .pipeline import fit_sequence

    cfg = _build_config(args)
    seq = _load_sequence(args)
    fit = fit_sequence(seq, cfg)
    if getattr(args, "dump_clusters", None) and fit.clusters is not None:
        payload = [st.debug_dict() for st in fit.clusters]
        with open(args.dump_clusters, "w") as fh:
            json.dump(payload, fh)
    return fit


def _obtain_fit(args):
    from .pipeline import load_model

    if getattr(args, "model", None):
        if not os.path.exists(args.model):
            raise FileNotFoundError(f"model file not found: {args.model}")
        return load_model(args.model)
    return _fit_from_args(args)


def _fit_metrics_json(fit) -> dict:
    cds = [m["cd"] for m in fit.frame_metrics]
    emds = [m["emd"] for m in fit.frame_metrics]
    modes = {m["emd_mode"] for m in fit.frame_metrics}
    return {
        "cd": float(sum(cds) / len(cds)) if cds else None,
        "emd": float(sum(emds) / len(emds)) if emds else None,
        "emd_mode": modes.pop() if len(modes) == 1 else "mixed",
        "epe3d": None, "acc_s": None, "acc_r": None, "outliers": None,
        "iters": len(fit.loss_history),
        "wall_time_s": fit.wall_time_s,
    }


def _write_metrics(path, payload: dict) -> None:
    if path:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)


def _cmd_fit(args) -> int:
    from .pipeline import save_model

    fit = _fit_from_args(args)
    if args.out:
        save_model(fit, args.out)
    payload = _fit_metrics_json(fit)
    _write_metrics(args.metrics_json, payload)
    print(json.dumps(payload))
    return 0


def _cmd_interp(args) -> int:
    from .io import save_cloud
    from .pipeline import interpolate

    fit = _obtain_fit(args)
    cloud = interpolate(fit, args.t)
    fmt = "xyz" if str(args.out).endswith(".xyz") else "ply-binary"
    save_cloud(args.out, cloud, fmt)
    print(f"wrote {len(cloud)} points at t={args.t} to {args.out}")
    return 0


def _cmd_flow(args) -> int:
    import numpy as np

    from .io import save_flow
    from .pipeline import nearest_frame, scene_flow

    fit = _obtain_fit(args)
    flow = scene_flow(fit, args.t1, args.t)
    anchor = nearest_frame(fit.seq.timestamps, args.t1)
    save_flow(args.out, fit.seq.frames[anchor].points, flow)
    print(f"wrote flow for {len(flow)} points (t1={args.t1} -> t2={args.t}) to {args.out}")
    return 0


def _cmd_densify(args) -> int:
    from .io import save_cloud
    from .pipeline import densify

    fit = _obtain_fit(args)
    timestamps = [float(s) for s in args.t.split(",")]
    base = fit.seq.frames[args.base_frame]
    cloud = densify(fit, timestamps, base)
    fmt = "xyz" if str(args.out).endswith(".xyz") else "ply-binary"
    save_cloud(args.out, cloud, fmt)
    print(f"wrote {len(cloud)} densified points to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    import numpy as np

    from .config import RunConfig
    from .metrics import flow_metrics
    from .pipeline import fit_sequence, interpolate, scene_flow
    from .pointcloud import PointCloud, Sequence

    rng = np.random.default_rng(args.seed)
    base = rng.uniform(-1.0, 1.0, size=(args.points, 3))
    diag = float(np.linalg.norm(base.max(0) - base.min(0)))
    velocity = np.array([1.0, 0.5, 0.25])
    velocity *= 0.3 * diag / np.linalg.norm(velocity)
    frames = [PointCloud(base + velocity * t, t) for t in np.linspace(0, 1, 4)]
    cfg = RunConfig(points_per_frame=args.points, iterations=args.iters,
                    seed=args.seed).validate()
    fit = fit_sequence(Sequence(frames), cfg)

    mid = interpolate(fit, 0.5)
    gt_mid = base + velocity * 0.5
    from .metrics import eval_metrics
    payload = eval_metrics(mid.points, gt_mid)
    payload.update(flow_metrics(scene_flow(fit, 0.0, 1.0),
                                np.tile(velocity, (args.points, 1))))
    payload["iters"] = len(fit.loss_history)
    payload["wall_time_s"] = fit.wall_time_s
    _write_metrics(args.metrics_json, payload)
    print(json.dumps(payload))
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import pipeline_gradcheck

    report = pipeline_gradcheck(seed=args.seed, samples=args.samples)
    print(f"max relative gradient error: {report.max_rel_err:.3e} "
          f"({report.checked} entries probed)")
    return 0 if report.max_rel_err < GRADCHECK_TOLERANCE else 3


def _build_parser() -> _Parser:
    parser = _Parser(prog="cloud4d",
                     description="Self-supervised 4D point cloud interpolation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a sequence and save the model")
    _add_fit_options(p)
    p.add_argument("--out", metavar="PATH", help="model output file")
    p.add_argument("--metrics-json", metavar="PATH")

    p = sub.add_parser("interp", help="synthesize a cloud at time t")
    _add_fit_options(p)
    p.add_argument("--model", metavar="PATH", help="fitted model file")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--out", metavar="PATH", required=True)

    p = sub.add_parser("flow", help="scene flow between two times")
    _add_fit_options(p)
    p.add_argument("--model", metavar="PATH")
    p.add_argument("--t1", type=float, default=0.0, help="anchor time")
    p.add_argument("--t", type=float, required=True, help="target time")
    p.add_argument("--out", metavar="PATH", required=True)

    p = sub.add_parser("densify", help="gather frames into one timestamp")
    _add_fit_options(p)
    p.add_argument("--model", metavar="PATH")
    p.add_argument("--t", required=True,
                   help="comma-separated source timestamps")
    p.add_argument("--base-frame", type=int, default=0)
    p.add_argument("--out", metavar="PATH", required=True)

    p = sub.add_parser("bench", help="synthetic rigid-motion benchmark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--iters", type=int, default=800)
    p.add_argument("--metrics-json", metavar="PATH")

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--samples", type=int, default=12,
                   help="entries probed per parameter tensor")

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    from .autodiff import NumericalError
    from .io import ParseError

    handlers = {
        "fit": _cmd_fit,
        "interp": _cmd_interp,
        "flow": _cmd_flow,
        "densify": _cmd_densify,
        "bench": _cmd_bench,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
