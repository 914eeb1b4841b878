"""Experiment orchestration: control + compression sweeps + stain color shifts.

A run evaluates one prediction source against fixed ground truth on the
unperturbed bundle (the control) and on every generated variant, and records
mPQ+ AUC and its change relative to the control.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from ..colorspace import (HSV, LAB, ColorPoint, DensityGrid, PlaneSpec, ReferenceSet,
                          dataset_color_stats, kde_grid, sample_references)
from ..core import Bundle, BundleIOError, LabelledPatch, NucRobustError, ValidationError
from ..metrics import EvalReport, ThresholdGrid, mpq_plus_auc
from ..perturb import (ColorShiftSpec, CompressionSpec, color_shift, compress_sweep,
                       default_compression_specs)
from ..stain import PlausibilityRule
from .bundle_io import dump_json, load_bundle
from .segment import SegmentParams, segment_bundle

log = logging.getLogger(__name__)

METHODS = ("ruifrok", "vahadane")
RECORDS_FILE = "records.json"
RECORDS_VERSION = 1


def _read_config_file(path: Path) -> dict:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise NucRobustError(f"cannot read config {path}: {e}") from e
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:        # Python < 3.11
            import tomli as tomllib
        try:
            return tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ValidationError(f"malformed config {path}: {e}") from e
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise ValidationError(f"malformed config {path}: {e}") from e


@dataclass
class ExperimentConfig:
    gt: Path
    output: Path
    predictor: str = "baseline"            # "baseline", "gt", or a prediction bundle path
    reference_bundle: Optional[Path] = None
    compression: list[CompressionSpec] = field(default_factory=lambda: list(default_compression_specs()))
    methods: tuple[str, ...] = METHODS
    planes: list[PlaneSpec] = field(default_factory=lambda: [PlaneSpec.default(HSV),
                                                             PlaneSpec.default(LAB)])
    grid: ThresholdGrid = field(default_factory=lambda: ThresholdGrid.from_step(0.05))
    seed: int = 0
    lam: float = 0.1
    segment: SegmentParams = field(default_factory=SegmentParams)
    rule: PlausibilityRule = field(default_factory=PlausibilityRule)
    kde_bins: int = 48
    workers: int = 1

    def __post_init__(self):
        self.gt, self.output = Path(self.gt), Path(self.output)
        if self.reference_bundle is not None:
            self.reference_bundle = Path(self.reference_bundle)
        self.methods = tuple(m.lower() for m in self.methods)
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValidationError(f"unknown color-shift methods {bad}")
        paths = [self.gt.resolve(), self.output.resolve()]
        if self.reference_bundle is not None:
            paths.append(self.reference_bundle.resolve())
        if self.predictor_path is not None:
            paths.append(self.predictor_path.resolve())
            if self.compression or self.planes:
                raise ValidationError("a fixed prediction bundle can only be scored on the control; "
                                      "disable compression and color shifts")
        if len(set(paths)) != len(paths):
            raise ValidationError("gt, output, reference and prediction paths must be distinct")
        if self.planes and self.methods and self.reference_bundle is None:
            raise ValidationError("color shifts need a reference_bundle")
        if self.workers < 1 or self.kde_bins < 2:
            raise ValidationError("workers must be >= 1 and kde_bins >= 2")

    @property
    def predictor_path(self) -> Optional[Path]:
        if self.predictor in ("baseline", "gt"):
            return None
        return Path(self.predictor)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        d = dict(d)

        def path(key):
            v = d.pop(key, None)
            if v is None:
                return None
            p = Path(v)
            return p if p.is_absolute() else base_dir / p

        for key in ("gt", "output"):
            if key not in d:
                raise ValidationError(f"config is missing {key!r}")
        kw = {"gt": path("gt"), "output": path("output"),
              "reference_bundle": path("reference_bundle")}
        pred = d.pop("predictor", "baseline")
        if pred not in ("baseline", "gt"):
            p = Path(pred)
            pred = str(p if p.is_absolute() else base_dir / p)
        kw["predictor"] = pred

        comp = d.pop("compression", "default")
        if comp == "default":
            kw["compression"] = list(default_compression_specs())
        else:
            kw["compression"] = [CompressionSpec(c["codec"], tuple(c["qualities"])) for c in comp]
        color = d.pop("color_shift", {})
        if color is False or color is None:
            kw["planes"] = []
        else:
            steps = int(color.get("steps", 16))
            planes = []
            for sp in color.get("spaces", [HSV, LAB]):
                default = PlaneSpec.default(sp, steps)
                ranges = color.get("ranges", {}).get(default.space, {})
                planes.append(PlaneSpec(default.space, tuple(ranges.get("u", default.u_range)),
                                        tuple(ranges.get("v", default.v_range)), steps))
            kw["planes"] = planes
            kw["methods"] = tuple(color.get("methods", METHODS))
            kw["lam"] = float(color.get("lambda", 0.1))
            if "teal_band" in color or "min_saturation" in color:
                kw["rule"] = PlausibilityRule(tuple(color.get("teal_band", (150.0, 210.0))),
                                              float(color.get("min_saturation", 0.15)))
        kw["grid"] = ThresholdGrid.from_step(float(d.pop("grid_step", 0.05)))
        seg = d.pop("segment", {})
        kw["segment"] = SegmentParams(float(seg.get("threshold", SegmentParams.threshold)),
                                      int(seg.get("min_area", SegmentParams.min_area)),
                                      bool(seg.get("fill_holes", SegmentParams.fill_holes)))
        for key, conv in (("seed", int), ("kde_bins", int), ("workers", int)):
            if key in d:
                kw[key] = conv(d.pop(key))
        if d:
            raise ValidationError(f"unknown config keys: {sorted(d)}")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(_read_config_file(path), path.parent)

    def to_dict(self) -> dict:
        """Run parameters for the records file (paths reduced to names)."""
        return {
            "gt": self.gt.name,
            "predictor": self.predictor if self.predictor_path is None else self.predictor_path.name,
            "reference_bundle": None if self.reference_bundle is None else self.reference_bundle.name,
            "compression": [{"codec": c.codec, "qualities": list(c.qualities)}
                            for c in self.compression],
            "methods": list(self.methods),
            "planes": [{"space": p.space, "u_range": list(p.u_range), "v_range": list(p.v_range),
                        "steps": p.steps} for p in self.planes],
            "thresholds": list(self.grid.thresholds),
            "seed": self.seed,
            "lambda": self.lam,
            "segment": {"threshold": self.segment.threshold, "min_area": self.segment.min_area,
                        "fill_holes": self.segment.fill_holes},
            "plausibility": {"teal_band": list(self.rule.teal_band),
                             "min_saturation": self.rule.min_saturation},
            "kde_bins": self.kde_bins,
        }


@dataclass
class RunRecord:
    variant: str
    descriptor: dict
    report: Optional[EvalReport]
    duration: float = 0.0
    n_patches: int = 0
    exclusions: list[dict] = field(default_factory=list)
    reference_excluded: bool = False
    mean_psnr: Optional[float] = None
    delta_auc: Optional[float] = None

    @property
    def n_excluded(self) -> int:
        return len(self.exclusions)

    @property
    def auc(self) -> Optional[float]:
        return None if self.report is None else self.report.auc

    def to_dict(self) -> dict:
        """Deterministic fields only; durations are kept out on purpose."""
        return {
            "variant": self.variant,
            "descriptor": self.descriptor,
            "n_patches": self.n_patches,
            "exclusions": self.exclusions,
            "reference_excluded": self.reference_excluded,
            "mean_psnr": self.mean_psnr,
            "auc": self.auc,
            "delta_auc": self.delta_auc,
            "report": None if self.report is None else self.report.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        rep = None if d["report"] is None else EvalReport.from_dict(d["report"])
        return cls(d["variant"], d["descriptor"], rep, 0.0, d["n_patches"], list(d["exclusions"]),
                   d["reference_excluded"], d["mean_psnr"], d["delta_auc"])


@dataclass
class ColorStats:
    spec: PlaneSpec
    w: float
    train_points: list              # (patch id, ColorPoint)
    test_points: list
    train_kde: DensityGrid
    test_kde: DensityGrid
    references: ReferenceSet

    def to_dict(self) -> dict:
        def pts(ps):
            return [{"patch_id": pid, "u": c.u, "v": c.v, "w": c.w} for pid, c in ps]
        return {"space": self.spec.space, "w": self.w, "train_points": pts(self.train_points),
                "test_points": pts(self.test_points), "train_kde": self.train_kde.to_dict(),
                "test_kde": self.test_kde.to_dict(), "references": self.references.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ColorStats":
        refs = ReferenceSet.from_dict(d["references"])

        def pts(ps):
            return [(p["patch_id"], ColorPoint(d["space"], p["u"], p["v"], p["w"])) for p in ps]
        return cls(refs.spec, d["w"], pts(d["train_points"]), pts(d["test_points"]),
                   DensityGrid.from_dict(d["train_kde"]), DensityGrid.from_dict(d["test_kde"]), refs)


def prepare_color(cfg: ExperimentConfig, gt: Optional[Bundle] = None,
                  train: Optional[Bundle] = None) -> dict[str, ColorStats]:
    """Mean-color embeddings, densities and sampled references per plane."""
    if not cfg.planes:
        return {}
    gt = gt if gt is not None else load_bundle(cfg.gt)
    train = train if train is not None else load_bundle(cfg.reference_bundle)
    out = {}
    for spec in cfg.planes:
        w, train_pts = dataset_color_stats(train, spec.space)
        _, test_pts = dataset_color_stats(gt, spec.space)
        refs = sample_references(train_pts, spec, w)
        refs.source = train.name
        out[spec.space] = ColorStats(
            spec, w, train_pts, test_pts,
            kde_grid([c for _, c in train_pts], spec, cfg.kde_bins),
            kde_grid([c for _, c in test_pts], spec, cfg.kde_bins), refs)
    return out


def make_predictor(cfg: ExperimentConfig) -> Callable[[Bundle], Bundle]:
    if cfg.predictor == "baseline":
        return lambda b: segment_bundle(b, cfg.segment)
    if cfg.predictor == "gt":
        return lambda b: Bundle([LabelledPatch(p.id, None, p.instances, p.classes) for p in b],
                                f"{b.name}/gt")
    fixed = load_bundle(cfg.predictor_path)
    return lambda b: fixed


def _evaluate(job) -> RunRecord:
    (label, descriptor, variant, gt, predict, grid, exclusions, ref_excluded, mean_psnr) = job
    start = time.perf_counter()
    rec = RunRecord(label, descriptor, None, 0.0, len(gt), exclusions, ref_excluded, mean_psnr)
    if not ref_excluded:
        try:
            drop = {e["patch_id"] for e in exclusions}
            keep = [pid for pid in gt.ids if pid not in drop]
            pred = predict(variant)
            if set(pred.ids) != set(gt.ids):
                raise ValidationError("prediction bundle ids differ from ground truth ids")
            rec.report = mpq_plus_auc(gt.subset(keep), pred.subset(keep), grid)
        except NucRobustError as e:
            raise type(e)(f"variant {label}: {e}") from e
    rec.duration = time.perf_counter() - start
    return rec


def _reference_excluded(manifest, n: int) -> bool:
    # a reference whose variant lost most patches to exclusion is dropped whole
    return manifest.aborted or 2 * len(manifest.excluded) > n


def run_experiment(cfg: ExperimentConfig, color: Optional[dict[str, ColorStats]] = None,
                   gt: Optional[Bundle] = None) -> list[RunRecord]:
    gt = gt if gt is not None else load_bundle(cfg.gt)
    for p in gt:
        if p.image is None and (cfg.compression or cfg.planes or cfg.predictor == "baseline"):
            raise ValidationError(f"ground-truth patch {p.id} has no image layer")
    predict = make_predictor(cfg)

    jobs = [("control", {"type": "control"}, gt, gt, predict, cfg.grid, [], False, None)]
    for spec in cfg.compression:
        for q, variant, mean_psnr in compress_sweep(gt, spec):
            desc = {k: v for k, v in variant.lineage[-1].items() if k != "excluded"}
            finite = mean_psnr if mean_psnr != float("inf") else None
            jobs.append((f"{spec.codec}-q{q:03d}", desc, variant, gt, predict, cfg.grid, [],
                         False, finite))

    if cfg.planes and cfg.methods:
        train = load_bundle(cfg.reference_bundle)
        color = color if color is not None else prepare_color(cfg, gt, train)
        images = {p.id: p.image for p in train}
        fit_cache: dict = {}
        for method in cfg.methods:
            for spec in cfg.planes:
                refs = color[spec.space].references
                shift = ColorShiftSpec(method, refs, images, cfg.lam, cfg.seed, cfg.rule)
                for rid, variant, manifest in color_shift(gt, shift, fit_cache):
                    label = f"{method}-{spec.space}-ref-{rid}"
                    excl = _reference_excluded(manifest, len(gt))
                    jobs.append((label, manifest.descriptor, variant, gt, predict, cfg.grid,
                                 list(manifest.excluded), excl, None))

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            records = list(ex.map(_evaluate, jobs))
    else:
        records = [_evaluate(j) for j in jobs]

    control = records[0].auc
    for r in records[1:]:
        if r.auc is not None and control is not None:
            r.delta_auc = r.auc - control
    return records


def write_run(out_dir, cfg: Optional[ExperimentConfig], records: list[RunRecord],
              color: dict[str, ColorStats]) -> Path:
    """Records, per-variant CSVs, reference sets and density CSVs."""
    out = Path(out_dir)
    (out / "eval").mkdir(parents=True, exist_ok=True)
    dump_json({"format_version": RECORDS_VERSION,
               "config": None if cfg is None else cfg.to_dict(),
               "records": [r.to_dict() for r in records],
               "color": {k: color[k].to_dict() for k in sorted(color)}}, out / RECORDS_FILE)
    dump_json({r.variant: round(r.duration, 6) for r in records}, out / "timings.json")
    for r in records:
        if r.report is None:
            continue
        _write_text(out / "eval" / f"{r.variant}_classes.csv", r.report.class_rows_csv())
        _write_text(out / "eval" / f"{r.variant}_summary.csv", r.report.summary_csv())
    for space, cs in sorted(color.items()):
        _write_text(out / f"references_{space}.json", cs.references.to_json())
        _write_text(out / f"kde_{space}_train.csv", cs.train_kde.to_csv())
        _write_text(out / f"kde_{space}_test.csv", cs.test_kde.to_csv())
    return out


def read_records(path) -> tuple[list[RunRecord], dict[str, ColorStats]]:
    p = Path(path)
    if p.is_dir():
        p = p / RECORDS_FILE
    try:
        with open(p, encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise BundleIOError(f"cannot read records {p}: {e}") from e
    if data.get("format_version") != RECORDS_VERSION:
        raise ValidationError(f"{p}: unsupported records format")
    records = [RunRecord.from_dict(r) for r in data["records"]]
    color = {k: ColorStats.from_dict(v) for k, v in data.get("color", {}).items()}
    return records, color


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)

