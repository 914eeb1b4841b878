"""Command-line entry point: ``nucrobust <command> ...``.

Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .colorspace import PlaneSpec, ReferenceSet, dataset_color_stats, kde_grid, sample_references
from .core import BundleIOError, NucRobustError, NumericalError, validate_patch
from .metrics import ThresholdGrid, UndefinedMetricError, mpq_plus_auc
from .perturb import CODECS, CodecError, ColorShiftSpec, CompressionSpec, color_shift, compress_sweep
from .stain import PlausibilityRule

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("nucrobust")


def _harness():
    # deferred so that light commands do not import matplotlib
    from . import harness
    return harness


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _plane(args) -> PlaneSpec:
    spec = PlaneSpec.default(args.space, args.steps)
    if args.ranges:
        u0, u1, v0, v1 = args.ranges
        spec = PlaneSpec(spec.space, (u0, u1), (v0, v1), args.steps)
    return spec


# ------------------------------------------------------------------ commands

def cmd_validate(args) -> int:
    h = _harness()
    bundle = h.load_bundle(args.bundle, validate=False)
    bad = 0
    for p in bundle:
        rep = validate_patch(p)
        if not rep.ok:
            bad += 1
            print(rep)
    print(f"{len(bundle)} patches, {bad} invalid")
    return EXIT_INVALID if bad else EXIT_OK


def cmd_eval(args) -> int:
    h = _harness()
    gt, pred = h.load_bundle(args.gt), h.load_bundle(args.pred)
    rep = mpq_plus_auc(gt, pred, ThresholdGrid.from_step(args.grid_step))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _emit(rep.class_rows_csv(), str(out / "classes.csv"))
        _emit(rep.summary_csv(), str(out / "summary.csv"))
    sys.stdout.write(rep.summary_csv())
    return EXIT_OK


def cmd_perturb_compress(args) -> int:
    h = _harness()
    bundle = h.load_bundle(args.bundle)
    spec = CompressionSpec(args.codec, tuple(args.qualities))
    out = Path(args.out)
    print("quality,mean_psnr,path")
    for q, variant, mean_psnr in compress_sweep(bundle, spec):
        path = out / f"{spec.codec}-q{q:03d}"
        h.save_bundle(variant, path)
        print(f"{q},{mean_psnr:.6f},{path}")
    return EXIT_OK


def cmd_perturb_stain(args) -> int:
    h = _harness()
    bundle = h.load_bundle(args.bundle)
    refs = ReferenceSet.from_dict(json.loads(Path(args.refs).read_text(encoding="utf-8")))
    ref_bundle = h.load_bundle(args.ref_bundle)
    images = {p.id: p.image for p in ref_bundle}
    spec = ColorShiftSpec(args.method, refs, images, args.lam, args.seed, PlausibilityRule())
    out = Path(args.out)
    summary = []
    print("reference_id,n_excluded,aborted,path")
    for rid, variant, manifest in color_shift(bundle, spec):
        path = out / f"{spec.method}-{refs.spec.space}-ref-{rid}"
        if variant is not None:
            h.save_bundle(variant, path)
        summary.append({"reference_id": rid, "descriptor": manifest.descriptor,
                        "excluded": manifest.excluded, "failures": manifest.failures,
                        "aborted": manifest.aborted,
                        "path": None if variant is None else path.name})
        print(f"{rid},{len(manifest.excluded)},{int(manifest.aborted)},"
              f"{'' if variant is None else path}")
    h.bundle_io.dump_json({"parent": bundle.name, "variants": summary}, out / "variants.json")
    return EXIT_OK


def cmd_color(args) -> int:
    h = _harness()
    bundle = h.load_bundle(args.bundle)
    spec = _plane(args)
    w, pts = dataset_color_stats(bundle, spec.space)
    if args.action == "stats":
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["patch_id", "u", "v", "w"])
        for pid, c in pts:
            wr.writerow([pid, f"{c.u:.6f}", f"{c.v:.6f}", f"{c.w:.6f}"])
        wr.writerow(["mean_w", "", "", f"{w:.6f}"])
        _emit(buf.getvalue(), args.out)
    elif args.action == "kde":
        _emit(kde_grid([c for _, c in pts], spec, args.bins).to_csv(), args.out)
    else:
        refs = sample_references(pts, spec, w if args.w is None else args.w)
        refs.source = bundle.name
        _emit(refs.to_json(), args.out)
    return EXIT_OK


def cmd_segment(args) -> int:
    h = _harness()
    bundle = h.load_bundle(args.bundle)
    params = h.SegmentParams(args.threshold, args.min_area)
    out = args.out or f"{str(args.bundle).rstrip('/')}_pred"
    h.save_bundle(h.segment_bundle(bundle, params), out)
    print(out)
    return EXIT_OK


def cmd_run(args) -> int:
    h = _harness()
    cfg = h.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    color = h.prepare_color(cfg)
    records = h.run_experiment(cfg, color)
    h.write_run(cfg.output, cfg, records, color)
    files = h.emit_report(records, color, cfg.output)
    for f in files:
        print(f)
    return EXIT_OK


def cmd_report(args) -> int:
    h = _harness()
    records, color = h.read_records(args.records)
    out = args.out or (args.records if Path(args.records).is_dir() else Path(args.records).parent)
    for f in h.emit_report(records, color, out):
        print(f)
    return EXIT_OK


def cmd_synth(args) -> int:
    h = _harness()
    from .synthetic import make_he_bundle, make_training_bundle
    out = Path(args.out)
    h.save_bundle(make_he_bundle(args.n, args.size, args.seed), out / "gt")
    h.save_bundle(make_training_bundle(args.n, args.size, args.seed + 100,
                                       with_teal=not args.no_teal), out / "train")
    config = (
        'gt = "gt"\n'
        'reference_bundle = "train"\n'
        'output = "run"\n'
        'predictor = "baseline"\n'
        f"seed = {args.seed}\n"
        'compression = "default"\n'
        "\n[color_shift]\n"
        'methods = ["ruifrok", "vahadane"]\n'
        'spaces = ["hsv", "lab"]\n'
        "steps = 16\n"
        "lambda = 0.1\n"
    )
    (out / "config.toml").write_text(config, encoding="utf-8")
    print(out / "config.toml")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nucrobust", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check every patch of a bundle")
    p.add_argument("bundle")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("eval", help="mPQ+ curve and AUC of predictions against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--grid-step", type=float, default=0.05)
    p.add_argument("--out", help="directory for classes.csv and summary.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="write perturbed variant bundles")
    psub = p.add_subparsers(dest="kind", required=True)
    c = psub.add_parser("compress", help="lossy codec quality sweep")
    c.add_argument("--bundle", required=True)
    c.add_argument("--codec", choices=CODECS, required=True)
    c.add_argument("--qualities", type=int, nargs="+", default=list(range(10, 101, 10)))
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_perturb_compress)
    s = psub.add_parser("stain", help="stain normalization toward sampled references")
    s.add_argument("--bundle", required=True)
    s.add_argument("--method", choices=("ruifrok", "vahadane"), required=True)
    s.add_argument("--refs", required=True, help="reference set JSON from 'color sample-refs'")
    s.add_argument("--ref-bundle", required=True, help="bundle holding the reference patches")
    s.add_argument("--lambda", dest="lam", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_perturb_stain)

    p = sub.add_parser("color", help="mean-color statistics of a bundle")
    p.add_argument("action", choices=("stats", "kde", "sample-refs"))
    p.add_argument("--bundle", required=True)
    p.add_argument("--space", choices=("hsv", "lab"), required=True)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--ranges", type=float, nargs=4, metavar=("U_LO", "U_HI", "V_LO", "V_HI"))
    p.add_argument("--bins", type=int, default=64, help="KDE bins per axis")
    p.add_argument("--w", type=float, help="fixed V or L for sample-refs (default: bundle mean)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_color)

    p = sub.add_parser("segment", help="baseline segmentation into a prediction bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--threshold", type=float, default=0.45)
    p.add_argument("--min-area", type=int, default=12)
    p.add_argument("--out")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("run", help="full experiment from a TOML or JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="variants evaluated in parallel")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="re-render reports from a run's records.json")
    p.add_argument("--records", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write the synthetic demo bundles and a config")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-teal", action="store_true", help="leave out the teal adversary")
    p.set_defaults(func=cmd_synth)
    return ap


def exit_code(err: BaseException) -> int:
    if isinstance(err, (BundleIOError, CodecError, OSError)):
        return EXIT_IO
    if isinstance(err, (NumericalError, UndefinedMetricError)):
        return EXIT_NUMERICAL
    return EXIT_INVALID


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NucRobustError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code(e)
    except (json.JSONDecodeError, KeyError) as e:
        print(f"error: malformed input: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
