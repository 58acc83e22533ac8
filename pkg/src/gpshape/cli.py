"""``gpshape`` command-line interface.

Subcommands::

    fit          sample a mesh or cloud, cluster, fit GPs, calibrate, save a template
    eval-shape   reconstruct from a template and compare against a ground-truth cloud
    score        confidence of a pose given 2D-3D correspondences
    bench-synth  synthetic ADD vs confidence sweep
    make-shape   write an analytic test shape (sphere, bumpy sphere, cube)

Errors are reported on stderr as a single line ``error: <CODE>: <message>``.
Exit status is 0 on success, 1 for user, config or data errors and 2 for
internal failures. Every run writes a JSON manifest with the resolved
configuration and SHA-256 hashes of the files read and written.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import __version__
from . import confidence as conf
from . import dataprep, meshio, metrics, shapes, synthbench
from . import template as tpl
from .errors import ConfigError, DataError, GPShapeError, InvalidDelta, ParseError
from .gp import KERNELS, DISTANCE_MODES, KernelConfig, OptimizerConfig

log = logging.getLogger("gpshape")

MANIFEST_SCHEMA = "gpshape-manifest/1"
REPORT_SCHEMA = 1


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "message": record.getMessage(), "time": round(record.created, 3)})


def _setup_logging(verbosity: int, as_json: bool) -> None:
    level = logging.WARNING - 10 * verbosity
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if as_json else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(max(level, logging.DEBUG))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, command: str, args: argparse.Namespace, inputs, outputs, result) -> None:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs if p and os.path.exists(p)},
        "outputs": {str(p): _sha256(p) for p in outputs if p and os.path.exists(p)},
        "result": result,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _manifest_path(args, default_base: str | None, command: str) -> str:
    if args.manifest:
        return args.manifest
    if default_base:
        return default_base + ".manifest.json"
    return f"gpshape-{command}.manifest.json"


def _emit(obj: dict, path: str | None = None) -> None:
    text = json.dumps(obj, sort_keys=True)
    print(text)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")


def _load_cloud(path) -> tuple[np.ndarray, meshio.MeshData]:
    data = meshio.read_geometry(path)
    if len(data.vertices) == 0:
        raise DataError(f"{path}: no points")
    return data.vertices, data


# ---------------------------------------------------------------------------
# subcommands

def _read_centers(path) -> np.ndarray:
    try:
        with open(path) as fh:
            C = np.asarray(json.load(fh), dtype=np.float64)
    except (json.JSONDecodeError, ValueError, TypeError) as exc:
        raise ParseError(f"{path}: expected a JSON array of [x, y, z] triples ({exc})") from exc
    if C.ndim != 2 or C.shape[1] != 3 or len(C) == 0 or not np.all(np.isfinite(C)):
        raise ParseError(f"{path}: expected a non-empty JSON array of [x, y, z] triples")
    return C


def cmd_fit(args) -> dict:
    if args.refs < 1:
        raise ConfigError(f"--refs must be >= 1, got {args.refs}")
    if args.overlap < 0:
        raise ConfigError("--overlap must be non-negative")
    if args.iters < 0 or args.train < 1 or args.test < 1:
        raise ConfigError("--iters must be >= 0 and --train/--test >= 1")
    verts, data = _load_cloud(args.input)
    if data.faces is not None and len(data.faces):
        mesh = dataprep.normalize_mesh(dataprep.TriangleMesh(verts, data.faces))
        cams = dataprep.fibonacci_directions(args.cameras)
        cloud = dataprep.raycast_sample(mesh, cams, args.rays_per_camera)
    else:
        cloud = dataprep.normalize_unit_sphere(dataprep.SurfacePointCloud(verts))
    log.info("surface sample: %d points", len(cloud))
    train, test = dataprep.split_train_test(cloud, args.train, args.test, seed=args.seed)
    centers = _read_centers(args.centers) if args.centers else None
    kernel = KernelConfig(kind=args.kernel, distance_mode=args.distance_mode)
    opt = OptimizerConfig(iterations=args.iters, lr=args.lr)
    t0 = time.perf_counter()
    template = tpl.build_template(train, test, k=args.refs, kernel=kernel, rho=args.overlap,
                                  seed=args.seed, opt=opt, centers=centers,
                                  threads=args.threads)
    elapsed = time.perf_counter() - t0
    labels, resid = tpl.heldout_residuals(template, test)
    mre = float(np.mean(np.abs(resid[labels >= 0])))
    log.info("mean radial error on held-out points: %.6g", mre)
    tpl.save(template, args.out)
    clusters = [{"cluster": j, "n_train": len(m), "nmll": m.nmll,
                 "sigma_hat": float(s), "status": m.status}
                for j, (m, s) in enumerate(zip(template.models, template.calibrated_sigma))]
    result = {"template": args.out, "k": template.k, "mean_radial_error": mre,
              "fit_seconds": round(elapsed, 3), "clusters": clusters}
    if args.json:
        _emit(result)
    else:
        for c in clusters:
            print(f"cluster {c['cluster']}: n={c['n_train']} nmll={c['nmll']:.6g} "
                  f"sigma_hat={c['sigma_hat']:.6g}")
        print(f"mean radial error {mre:.6g}; template written to {args.out}")
    _write_manifest(_manifest_path(args, args.out, "fit"), "fit", args,
                    [args.input, args.centers], [args.out], result)
    return result


def cmd_eval_shape(args) -> dict:
    if not args.tau > 0:
        raise ConfigError(f"--tau must be positive, got {args.tau}")
    if args.chamfer_samples < 1:
        raise ConfigError("--chamfer-samples must be positive")
    template = tpl.load(args.template)
    gt_orig, _ = _load_cloud(args.gt)
    gt = (gt_orig - template.center) * template.scale
    if args.directions:
        est = tpl.reconstruct(template, args.directions).points
    else:
        est = tpl.reconstruct_at(template, gt).points
    m = metrics.precision_recall_f(gt, est, args.tau, max_points=args.chamfer_samples,
                                   seed=args.seed)
    report = m.to_dict()
    _emit(report, args.report)
    result = dict(report)
    inputs = [args.template, args.gt]
    if args.baseline_train:
        train_orig, _ = _load_cloud(args.baseline_train)
        train = (train_orig - template.center) * template.scale
        result["comparison"] = {
            "nn_baseline": metrics.nn_baseline_eval(train, gt),
            "template_point_error": metrics.radial_error(tpl.reconstruct_at(template, gt).points, gt),
        }
        inputs.append(args.baseline_train)
    _write_manifest(_manifest_path(args, args.report, "eval-shape"), "eval-shape", args,
                    inputs, [args.report], result)
    return report


def _normalized_delta(args, template) -> float:
    if not (args.delta > 0) or not math.isfinite(args.delta):
        raise InvalidDelta(f"--delta must be positive, got {args.delta}")
    if args.units == "model":
        return args.delta
    if args.model_diameter is not None:
        if not args.model_diameter > 0:
            raise ConfigError("--model-diameter must be positive")
        # normalised objects have diameter 2
        return args.delta * 2.0 / args.model_diameter
    return args.delta * template.scale


def cmd_score(args) -> dict:
    template = tpl.load(args.template)
    pose = conf.read_pose(args.pose)
    cam = conf.read_intrinsics(args.intrinsics)
    corrs = conf.read_correspondences(args.corr)
    delta = _normalized_delta(args, template)
    # move pose and object points into the template's normalised frame
    T = conf.normalize_pose(pose, template.center, template.scale)
    X = (corrs.object_points - template.center) * template.scale
    corrs_n = conf.Correspondences(corrs.pixels, X, corrs.weights)
    has_w = _has_weight_column(args.corr)
    mode = args.weights if args.weights != "auto" else ("given" if has_w else "uniform")
    report = conf.score_pose(template, corrs_n, T, cam, weights_mode=mode, delta=delta)
    threshold = args.threshold
    if threshold is None:
        threshold = conf.confidence_bound(template, None, delta)
    out = {"score": report.score, "bound": report.bound,
           "accepted": conf.accept_pose(report, threshold),
           "n_points": report.n_points, "n_excluded": report.n_excluded}
    _emit(out, args.report)
    result = dict(out, threshold=threshold, delta_model_units=delta, weights_mode=mode)
    _write_manifest(_manifest_path(args, args.report, "score"), "score", args,
                    [args.template, args.pose, args.intrinsics, args.corr], [args.report], result)
    return out


def _has_weight_column(path) -> bool:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    return len(header) == 6


def cmd_bench_synth(args) -> dict:
    template = tpl.load(args.template)
    model_orig, _ = _load_cloud(args.model)
    model = (model_orig - template.center) * template.scale
    cfg = synthbench.load_sweep_config(args.sweep) if args.sweep else synthbench.SweepConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.ransac:
        overrides["ransac"] = True
    if overrides:
        cfg = synthbench.SweepConfig.from_dict(dict(cfg.to_dict(), **overrides))
    name = args.name or os.path.splitext(os.path.basename(args.template))[0]
    summary_path = args.summary or os.path.splitext(args.out)[0] + ".summary.json"
    tmp = args.out + ".partial"
    interrupted = False
    with open(tmp, "w", newline="") as fh:
        fh.write(",".join(synthbench.CSV_HEADER) + "\n")

        def on_row(row):
            fh.write(",".join(synthbench.csv_row(row)) + "\n")
            fh.flush()

        try:
            res = synthbench.run_sweep(template, model, cfg, name, threads=args.threads,
                                       on_row=on_row)
        except KeyboardInterrupt:
            interrupted = True
    if interrupted:
        log.error("interrupted; partial results kept in %s", tmp)
        raise DataError(f"sweep interrupted; partial results in {tmp}")
    os.replace(tmp, args.out)
    summary = dict(res.summary(), object=name)
    trend = synthbench.noise_trend(res.rows)
    summary["noise_trend_monotone"] = trend["monotone"]
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.json:
        _emit(summary)
    else:
        print(f"{name}: spearman(ADD, confidence) = {summary['spearman']:.4f} over "
              f"{summary['n_trials']} trials ({summary['failures']} PnP failures)")
    _write_manifest(_manifest_path(args, args.out, "bench-synth"), "bench-synth", args,
                    [args.template, args.model, args.sweep], [args.out, summary_path],
                    dict(summary, sweep=cfg.to_dict()))
    return summary


def cmd_make_shape(args) -> dict:
    rng = np.random.default_rng(args.seed)
    if args.kind == "mesh":
        if args.shape == "sphere":
            mesh = shapes.icosphere(args.subdivisions)
        elif args.shape == "bumpy":
            mesh = shapes.bumpy_mesh(args.subdivisions)
        else:
            mesh = shapes.cube_mesh(divisions=max(1, args.subdivisions))
        meshio.write_obj(args.out, mesh.vertices, mesh.faces)
        n = len(mesh.vertices)
    else:
        sampler = {"sphere": shapes.sample_sphere, "bumpy": shapes.sample_bumpy_sphere,
                   "cube": shapes.sample_cube}[args.shape]
        meshio.write_xyz(args.out, sampler(args.n, rng))
        n = args.n
    result = {"out": args.out, "shape": args.shape, "kind": args.kind, "n": n}
    if args.json:
        _emit(result)
    _write_manifest(_manifest_path(args, args.out, "make-shape"), "make-shape", args, [],
                    [args.out], result)
    return result


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="structured (JSON) logs and output")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--threads", type=int, default=1, help="worker thread cap")
    common.add_argument("--manifest", default=None, help="manifest path (default: next to the output)")

    p = _ArgumentParser(prog="gpshape", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"gpshape {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    f = sub.add_parser("fit", parents=[common], help="fit a shape template")
    f.add_argument("--input", required=True, help="mesh (.obj/.ply) or point cloud (.xyz/.ply)")
    f.add_argument("--refs", type=int, default=1, help="number of reference points K")
    f.add_argument("--kernel", choices=KERNELS, default="rq")
    f.add_argument("--distance-mode", choices=DISTANCE_MODES, default="bearing_euclidean")
    f.add_argument("--overlap", type=float, default=0.15, help="overlap ratio rho")
    f.add_argument("--train", type=int, default=10000)
    f.add_argument("--test", type=int, default=30000)
    f.add_argument("--iters", type=int, default=250)
    f.add_argument("--lr", type=float, default=0.1)
    f.add_argument("--centers", default=None,
                   help="JSON array of [x, y, z] reference points (normalised frame); "
                        "replaces k-means")
    f.add_argument("--cameras", type=int, default=200, help="virtual cameras for mesh sampling")
    f.add_argument("--rays-per-camera", type=int, default=2000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval-shape", parents=[common], help="shape metrics of a template")
    e.add_argument("--template", required=True)
    e.add_argument("--gt", required=True, help="ground-truth surface points (original units)")
    e.add_argument("--tau", type=float, default=0.01, help="F-score threshold, normalised units")
    e.add_argument("--chamfer-samples", type=int, default=metrics.CHAMFER_SAMPLES)
    e.add_argument("--directions", type=int, default=0,
                   help="reconstruct on a Fibonacci grid of this size per cluster "
                        "instead of along the ground-truth directions")
    e.add_argument("--baseline-train", default=None,
                   help="training cloud for the nearest-neighbour storage comparison")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", default=None, help="also write the JSON report here")
    e.set_defaults(func=cmd_eval_shape)

    s = sub.add_parser("score", parents=[common], help="confidence of a pose")
    s.add_argument("--template", required=True)
    s.add_argument("--pose", required=True)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--corr", required=True, help="CSV u,v,X,Y,Z[,w]")
    s.add_argument("--delta", type=float, default=0.01, help="residual margin")
    s.add_argument("--threshold", type=float, default=None,
                   help="acceptance threshold (default: the margin bound at --delta)")
    s.add_argument("--units", choices=("model", "mm"), default="model",
                   help="units of --delta: normalised model units or millimetres")
    s.add_argument("--model-diameter", type=float, default=None,
                   help="object diameter in mm, used with --units mm")
    s.add_argument("--weights", choices=("auto", "uniform", "given"), default="auto")
    s.add_argument("--report", default=None)
    s.set_defaults(func=cmd_score)

    b = sub.add_parser("bench-synth", parents=[common], help="synthetic ADD/confidence sweep")
    b.add_argument("--template", required=True)
    b.add_argument("--model", required=True, help="model points (original units)")
    b.add_argument("--sweep", default=None, help="sweep JSON (default grid if omitted)")
    b.add_argument("--out", required=True, help="results CSV")
    b.add_argument("--summary", default=None, help="summary JSON (default: <out>.summary.json)")
    b.add_argument("--name", default=None, help="object name for the CSV")
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--ransac", action="store_true", help="robust PnP")
    b.set_defaults(func=cmd_bench_synth)

    m = sub.add_parser("make-shape", parents=[common], help="write an analytic test shape")
    m.add_argument("--shape", choices=("sphere", "bumpy", "cube"), default="sphere")
    m.add_argument("--kind", choices=("mesh", "cloud"), default="mesh")
    m.add_argument("--n", type=int, default=5000, help="points for --kind cloud")
    m.add_argument("--subdivisions", type=int, default=4)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_shape)
    return p


def _report_error(code: str, message: str) -> None:
    prefix = "error:"
    if sys.stderr.isatty() and not os.environ.get("NO_COLOR"):
        prefix = "\x1b[31merror:\x1b[0m"
    message = " ".join(str(message).split())
    print(f"{prefix} {code}: {message}", file=sys.stderr)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        _report_error(exc.code, exc)
        return 1
    _setup_logging(args.verbose, args.json)
    if args.threads < 1:
        _report_error("E_CONFIG", "--threads must be >= 1")
        return 1
    try:
        args.func(args)
    except GPShapeError as exc:
        _report_error(exc.code, exc)
        return 2 if exc.code == "E_INTERNAL" else 1
    except MemoryError as exc:
        _report_error("E_MEMORY", f"out of memory ({exc}); reduce --train or raise --refs")
        return 1
    except OSError as exc:
        _report_error("E_IO", f"{exc.strerror or exc}: {exc.filename}" if exc.filename else exc)
        return 1
    except ValueError as exc:
        _report_error("E_CONFIG", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        log.debug("internal error", exc_info=True)
        _report_error("E_INTERNAL", f"{type(exc).__name__}: {exc}")
        return 2
    return 0
