"""Command-line front end: ``dynct <command> ...``.

Exit codes: 0 success, 2 user or config error, 3 numeric failure,
4 tolerance breach in a verification command.  Every command writes a
``*.manifest.json`` beside its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NumericFailure, PhantomSpecError, VolumeFormatError

log = logging.getLogger("dynct")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 2, 3, 4
THREADS_ENV = "DYNCT_THREADS"


class UserError(Exception):
    pass


def _stem(path):
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".f32", ".json", ".csv") else p


def write_manifest(args, outputs, started, extra=None):
    """Record what ran, with which arguments, and what it produced."""
    first = Path(outputs[0])
    path = first / "manifest.json" if first.is_dir() else Path(str(_stem(first)) + ".manifest.json")
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "argv")}
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "config": cfg,
        "seed": cfg.get("seed"),
        "outputs": [str(o) for o in outputs],
        "version": __version__,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UserError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UserError(f"{path} is not valid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_phantom(args):
    from .volumes import render_sequence_gt, sequence_times, spec_from_dict, write_volume

    t0 = time.perf_counter()
    spec = spec_from_dict(_load_json(args.spec))
    times = sequence_times(args.frames)
    seq = render_sequence_gt(spec, args.side, times, supersample=args.supersample)
    out = write_volume(seq, args.out)
    write_manifest(args, [out], t0)
    print(f"wrote {out} shape {list(seq.shape)}")
    return EXIT_OK


def cmd_project(args):
    from .radon import RadonOperator, Sinogram, project_dynamic, write_sinogram
    from .volumes import make_schedule, read_volume

    t0 = time.perf_counter()
    scene = read_volume(args.vol)
    side = scene.shape[-1]
    sch = make_schedule(args.arc[0], args.arc[1], args.n, endpoint=not args.endpoint_exclusive)
    op = RadonOperator.from_schedule(sch, side, args.n_det)
    sino = project_dynamic(op, scene, sch, nearest=not args.exact_times)
    data = sino.data
    if args.noise > 0:
        rng = np.random.default_rng(args.seed)
        data = (data + args.noise * rng.standard_normal(data.shape)).astype(np.float32)
        sino = Sinogram(data, sch)
    out = write_sinogram(sino, args.out)
    write_manifest(args, [out], t0)
    print(f"wrote {out} shape {list(sino.shape)}")
    return EXIT_OK


def cmd_reconstruct(args):
    from .optimize import ReconConfig, reconstruct
    from .radon import read_sinogram

    t0 = time.perf_counter()
    sino = read_sinogram(args.sino)
    cfg = ReconConfig.from_dict(_load_json(args.config)) if args.config else ReconConfig()

    def progress(it, loss):
        if args.log_every and (it % args.log_every == 0 or it == cfg.iters - 1):
            print(f"iter {it:6d}  data {loss.data_term:.6g}  tv {loss.tv_term:.6g}", flush=True)

    art = reconstruct(sino, cfg, checkpoint_dir=args.out, checkpoint_every=args.checkpoint_every,
                      progress=progress)
    write_manifest(args, [Path(args.out)], t0, {"config_digest": art.config.digest()})
    print(f"wrote artifact {args.out}; final data loss {art.history[-1][1]:.6g}")
    return EXIT_OK


def cmd_baseline(args):
    from .metrics import psnr
    from .radon import RadonOperator, fbp, read_sinogram, sart
    from .volumes import read_volume, write_volume

    t0 = time.perf_counter()
    sino = read_sinogram(args.sino)
    side = args.side or sino.n_det
    op = RadonOperator.from_schedule(sino.schedule, side, sino.n_det)
    if args.method == "fbp":
        vol = fbp(op, sino.data, window=args.window)
    else:
        vol = sart(op, sino.data, iters=args.iters, relax=args.relax)
    out = write_volume(vol, args.out)
    extra = {}
    code = EXIT_OK
    if args.gt:
        value = psnr(vol, _as_sequence(read_volume(args.gt)).data[0])
        extra["psnr_db"] = value
        print(f"{args.method} PSNR {value:.3f} dB")
        if args.min_psnr is not None and value < args.min_psnr:
            print(f"PSNR below the required {args.min_psnr} dB", file=sys.stderr)
            code = EXIT_TOLERANCE
    write_manifest(args, [out], t0, extra)
    print(f"wrote {out}")
    return code


def cmd_render(args):
    from .metrics import render_sequence
    from .optimize import ReconArtifact
    from .volumes import write_volume

    t0 = time.perf_counter()
    try:
        art = ReconArtifact.load(args.artifact)
    except FileNotFoundError as exc:
        raise UserError(f"not an artifact directory: {args.artifact}") from exc
    seq = render_sequence(art, args.side, args.frames)
    out = write_volume(seq, args.out)
    write_manifest(args, [out], t0, {"config_digest": art.config.digest()})
    print(f"wrote {out} shape {list(seq.shape)}")
    return EXIT_OK


def _as_sequence(vol):
    from .volumes import Volume4

    return vol if isinstance(vol, Volume4) else Volume4(vol.data[None], [0.0])


def cmd_metrics(args):
    from .metrics import compare, format_table, reports_to_csv
    from .volumes import read_volume

    t0 = time.perf_counter()
    est = _as_sequence(read_volume(args.est))
    gt = _as_sequence(read_volume(args.gt))
    reports = compare([(args.label, est)], gt, nearest=args.nearest)
    reports_to_csv(reports, args.out)
    print(format_table(reports))
    write_manifest(args, [Path(args.out)], t0)
    return EXIT_OK


def cmd_gradcheck(args):
    from .verify import gradient_suite

    t0 = time.perf_counter()
    results = gradient_suite(seed=args.seed, tol=args.tol)
    for r in results:
        print(r.line())
    if args.out:
        write_manifest(args, [Path(args.out)], t0, {"passed": all(r.passed for r in results)})
    return EXIT_OK if all(r.passed for r in results) else EXIT_TOLERANCE


def cmd_adjoint_test(args):
    from .verify import adjoint_test

    t0 = time.perf_counter()
    r = adjoint_test(args.side, args.angles, args.pairs, args.seed, planar=not args.volumetric,
                     tol=args.tol)
    print(r.line())
    if args.out:
        write_manifest(args, [Path(args.out)], t0, {"passed": r.passed})
    return EXIT_OK if r.passed else EXIT_TOLERANCE


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dynct", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap on BLAS worker threads (default: ${THREADS_ENV} or library default)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("phantom", help="render a ground-truth phantom sequence")
    s.add_argument("--spec", required=True, help="phantom description (JSON)")
    s.add_argument("--side", type=int, required=True, help="grid side in voxels")
    s.add_argument("--frames", type=int, default=10, help="number of frames at uniform times")
    s.add_argument("--supersample", action="store_true", help="2x2x2 supersampled rasterization")
    s.add_argument("--out", required=True, help="output volume path (.f32)")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("project", help="simulate a dynamic parallel-beam acquisition")
    s.add_argument("--vol", required=True, help="scene volume (.f32)")
    s.add_argument("--arc", type=float, nargs=2, metavar=("START", "STOP"), default=(0.0, 180.0),
                   help="angular arc in degrees")
    s.add_argument("--n", type=int, required=True, help="number of projections")
    s.add_argument("--n-det", type=int, default=None, help="detector bins (default: grid side)")
    s.add_argument("--endpoint-exclusive", action="store_true",
                   help="do not place a projection at STOP")
    s.add_argument("--exact-times", action="store_true",
                   help="require a scene frame at every projection time (no nearest-frame fallback)")
    s.add_argument("--noise", type=float, default=0.0, help="gaussian noise std added to the sinogram")
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--out", required=True, help="output sinogram path (.f32)")
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("reconstruct", help="joint template and motion optimization")
    s.add_argument("--sino", required=True, help="measured sinogram (.f32)")
    s.add_argument("--config", default=None, help="ReconConfig JSON (default: built-in defaults)")
    s.add_argument("--out", required=True, help="artifact directory")
    s.add_argument("--checkpoint-every", type=int, default=0, help="save every N iterations (0: end only)")
    s.add_argument("--log-every", type=int, default=100, help="print the loss every N iterations (0: quiet)")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("baseline", help="static FBP or SART reconstruction")
    s.add_argument("method", choices=("fbp", "sart"), help="reconstruction method")
    s.add_argument("--sino", required=True, help="sinogram (.f32)")
    s.add_argument("--side", type=int, default=None, help="output grid side (default: detector bins)")
    s.add_argument("--window", choices=("none", "hann"), default="none", help="FBP ramp window")
    s.add_argument("--iters", type=int, default=20, help="SART sweeps")
    s.add_argument("--relax", type=float, default=1.0, help="SART relaxation")
    s.add_argument("--gt", default=None, help="ground-truth volume for a PSNR readout")
    s.add_argument("--min-psnr", type=float, default=None,
                   help="exit 4 if PSNR against --gt falls below this value")
    s.add_argument("--out", required=True, help="output volume path (.f32)")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("render", help="render an artifact at any resolution and frame count")
    s.add_argument("--artifact", required=True, help="artifact directory")
    s.add_argument("--side", type=int, required=True, help="output grid side")
    s.add_argument("--frames", type=int, default=10, help="number of frames over t in [0, 1]")
    s.add_argument("--out", required=True, help="output volume path (.f32)")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("metrics", help="PSNR/SSIM of an estimate against ground truth")
    s.add_argument("--est", required=True, help="estimated volume (.f32)")
    s.add_argument("--gt", required=True, help="ground-truth volume (.f32)")
    s.add_argument("--label", default="est", help="method label in the report")
    s.add_argument("--nearest", action="store_true", help="match frames by nearest time")
    s.add_argument("--out", required=True, help="report CSV path")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--size", choices=("tiny",), default="tiny", help="problem size")
    s.add_argument("--seed", type=int, default=0, help="seed for the random instance")
    s.add_argument("--tol", type=float, default=1e-3, help="relative tolerance")
    s.add_argument("--out", default=None, help="optional path for the manifest")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("adjoint-test", help="dot-product test of projector and backprojector")
    s.add_argument("--side", type=int, default=32, help="grid side")
    s.add_argument("--angles", type=int, default=30, help="number of views")
    s.add_argument("--pairs", type=int, default=20, help="random (x, y) pairs")
    s.add_argument("--volumetric", action="store_true", help="use a side^3 volume instead of a slice")
    s.add_argument("--seed", type=int, default=0, help="seed for the random pairs")
    s.add_argument("--tol", type=float, default=1e-5, help="relative tolerance")
    s.add_argument("--out", default=None, help="optional path for the manifest")
    s.set_defaults(func=cmd_adjoint_test)
    return p


def _thread_count(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UserError(f"${THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _thread_count(args)
        if threads is not None and threads < 1:
            raise UserError("--threads must be >= 1")
        if threads is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, PhantomSpecError, VolumeFormatError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
