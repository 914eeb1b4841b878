"""Summary CSV, SVG figures and a JSON mirror for a set of run records.

Figures are drawn on bare ``matplotlib.figure.Figure`` objects (no pyplot
state) and saved with a fixed SVG hash salt and no date stamp, so the same
records always give the same bytes.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Optional

import matplotlib
from matplotlib.cm import ScalarMappable
from matplotlib.colors import Normalize
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from ..core import ValidationError
from ..perturb import RECOMMENDED_QUALITY
from .bundle_io import dump_json
from .experiment import ColorStats, RunRecord

_RC = {"svg.hashsalt": "nucrobust", "svg.fonttype": "path", "font.size": 9,
       "axes.titlesize": 10, "figure.dpi": 100}
DELTA_LEGEND = "delta AUC = variant minus control (positive = better than control)"

SUMMARY_COLUMNS = ["variant", "type", "codec", "quality", "method", "space", "reference_id",
                   "n_patches", "n_excluded", "reference_excluded", "mean_psnr", "auc",
                   "delta_auc"]


def _f6(x) -> str:
    return "" if x is None else f"{x:.6f}"


def summary_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in records:
        d = r.descriptor
        w.writerow([r.variant, d.get("type", ""), d.get("codec", ""), d.get("quality", ""),
                    d.get("method", ""), d.get("space", ""), d.get("reference_id", ""),
                    r.n_patches, r.n_excluded, int(r.reference_excluded), _f6(r.mean_psnr),
                    _f6(r.auc), _f6(r.delta_auc)])
    return buf.getvalue()


def _save(fig: Figure, path: Path) -> None:
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})


def _control(records):
    for r in records:
        if r.descriptor.get("type") == "control":
            return r
    raise ValidationError("records contain no control entry")


def quality_curve(records: list[RunRecord], codec: str, path: Path) -> Path:
    ctrl = _control(records)
    rows = sorted((r.descriptor["quality"], r.auc) for r in records
                  if r.descriptor.get("type") == "compress" and r.descriptor.get("codec") == codec)
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5.0, 3.4))
        ax = fig.add_subplot()
        q = [x for x, _ in rows]
        auc = [y for _, y in rows]
        ax.plot(q, auc, marker="o", color="tab:blue", label=f"{codec.upper()} variants",
                gid="auc-curve")
        if ctrl.auc is not None:
            ax.axhline(ctrl.auc, color="0.3", linestyle="--", label="control", gid="control-baseline")
        rec = RECOMMENDED_QUALITY.get(codec)
        if rec is not None:
            ax.axvline(rec, color="tab:red", linestyle=":", linewidth=1.0, gid="recommended-quality")
            ax.annotate(f"q={rec}", (rec, 1.0), xycoords=("data", "axes fraction"),
                        xytext=(3, -12), textcoords="offset points", color="tab:red")
        ax.set_xlabel("quality")
        ax.set_ylabel("mPQ+ AUC")
        ax.set_title(f"{codec.upper()} quality sweep")
        ax.set_xlim(0, 105)
        ax.grid(True, linewidth=0.3)
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
    _save(fig, path)
    return path


def kde_figure(cs: ColorStats, path: Path) -> Path:
    spec = cs.spec
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5.2, 4.0))
        ax = fig.add_subplot()
        grid = cs.train_kde
        mesh = ax.pcolormesh(grid.u_edges, grid.v_edges, grid.density, cmap="viridis",
                             shading="flat", gid="train-density")
        fig.colorbar(mesh, ax=ax, label="train density")
        t = cs.test_kde
        if t.density.max() > 0:
            ax.contour(t.u_centers, t.v_centers, t.density, levels=4, colors="white",
                       linewidths=0.8)
        u = spec.unwrap_u([c.u for _, c in cs.test_points])
        v = [c.v for _, c in cs.test_points]
        ax.scatter(u, v, s=8, c="white", edgecolors="black", linewidths=0.4, label="test patches",
                   gid="test-points")
        ax.set_xlim(*spec.u_range)
        ax.set_ylim(*spec.v_range)
        ax.set_xlabel(spec.u_label)
        ax.set_ylabel(spec.v_label)
        ax.set_title(f"{spec.space.upper()} mean-color density (train heatmap, test contours)")
        fig.tight_layout()
    _save(fig, path)
    return path


def reference_grid(records: list[RunRecord], cs: ColorStats, method: str, path: Path) -> tuple[Path, int]:
    """Tiles at each reference's grid color; returns (path, hatched tile count)."""
    spec = cs.spec
    by_ref = {r.descriptor.get("reference_id"): r for r in records
              if r.descriptor.get("type") == "color_shift" and r.descriptor.get("method") == method
              and r.descriptor.get("space") == spec.space}
    du = (spec.u_range[1] - spec.u_range[0]) / (spec.steps - 1)
    dv = (spec.v_range[1] - spec.v_range[0]) / (spec.steps - 1)
    deltas = [r.delta_auc for r in by_ref.values() if r.delta_auc is not None]
    lim = max([abs(d) for d in deltas] + [1e-6])
    norm = Normalize(-lim, lim)
    hatched = 0
    with matplotlib.rc_context(_RC):
        cmap = matplotlib.colormaps["RdBu"]
        fig = Figure(figsize=(5.4, 4.4))
        ax = fig.add_subplot()
        for ref in cs.references.references:
            r = by_ref.get(ref.patch_id)
            if r is None:
                continue
            xy = (ref.grid_u - du / 2, ref.grid_v - dv / 2)
            if r.reference_excluded or r.delta_auc is None:
                hatched += 1
                ax.add_patch(Rectangle(xy, du, dv, facecolor="0.85", edgecolor="0.2", hatch="///",
                                       linewidth=0.4, gid=f"excluded-tile-{hatched}"))
            else:
                ax.add_patch(Rectangle(xy, du, dv, facecolor=cmap(norm(r.delta_auc)),
                                       edgecolor="0.2", linewidth=0.4,
                                       gid=f"tile-{ref.grid_index}"))
        sm = ScalarMappable(norm=norm, cmap=cmap)
        fig.colorbar(sm, ax=ax, label="delta mPQ+ AUC (variant - control)")
        ax.set_xlim(spec.u_range[0] - du / 2, spec.u_range[1] + du / 2)
        ax.set_ylim(spec.v_range[0] - dv / 2, spec.v_range[1] + dv / 2)
        ax.set_xlabel(spec.u_label)
        ax.set_ylabel(spec.v_label)
        ax.set_title(f"{method} toward {spec.space.upper()} references (hatched = excluded)")
        fig.tight_layout()
    _save(fig, path)
    return path, hatched


def emit_report(records: list[RunRecord], color: dict[str, ColorStats], out_dir,
                figures: bool = True) -> list[Path]:
    if not records:
        raise ValidationError("emit_report needs at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with open(out / "summary.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write(summary_csv(records))
    written.append(out / "summary.csv")

    fig_meta = []
    if figures:
        codecs = sorted({r.descriptor["codec"] for r in records
                         if r.descriptor.get("type") == "compress"})
        for codec in codecs:
            p = quality_curve(records, codec, out / f"quality_curve_{codec}.svg")
            written.append(p)
            fig_meta.append({"file": p.name, "kind": "quality_curve", "codec": codec})
        for space in sorted(color):
            p = kde_figure(color[space], out / f"kde_{space}.svg")
            written.append(p)
            fig_meta.append({"file": p.name, "kind": "kde", "space": space})
        methods = sorted({r.descriptor["method"] for r in records
                          if r.descriptor.get("type") == "color_shift"})
        for method in methods:
            for space in sorted(color):
                p, n = reference_grid(records, color[space], method,
                                      out / f"reference_grid_{method}_{space}.svg")
                written.append(p)
                fig_meta.append({"file": p.name, "kind": "reference_grid", "method": method,
                                 "space": space, "hatched_tiles": n})

    ctrl = _control(records)
    dump_json({
        "control": {"variant": ctrl.variant, "auc": ctrl.auc, "n_patches": ctrl.n_patches},
        "delta_auc_definition": DELTA_LEGEND,
        "variants": [{"variant": r.variant, "descriptor": r.descriptor, "auc": r.auc,
                      "delta_auc": r.delta_auc, "mean_psnr": r.mean_psnr,
                      "n_patches": r.n_patches, "n_excluded": r.n_excluded,
                      "reference_excluded": r.reference_excluded,
                      "mpq_plus": None if r.report is None else r.report.mpq_plus}
                     for r in records],
        "color": {s: {"w": color[s].w, "references": color[s].references.to_dict()["references"]}
                  for s in sorted(color)},
        "figures": fig_meta,
    }, out / "report.json")
    written.append(out / "report.json")
    return written


def hatched_tiles(svg_text: str) -> int:
    return svg_text.count('id="excluded-tile-')


def curve_points(svg_text: str, gid: str = "auc-curve") -> Optional[int]:
    """Marker count inside a line group of a saved SVG."""
    start = svg_text.find(f'<g id="{gid}">')
    if start < 0:
        return None
    depth, i, count = 0, start, 0
    while True:
        nxt_open = svg_text.find("<g", i + 1)
        nxt_close = svg_text.find("</g>", i + 1)
        nxt_use = svg_text.find("<use", i + 1)
        if nxt_use != -1 and nxt_use < min(x for x in (nxt_open, nxt_close) if x != -1):
            count += 1
            i = nxt_use
            continue
        if nxt_open != -1 and nxt_open < nxt_close:
            depth += 1
            i = nxt_open
        else:
            if depth == 0:
                return count
            depth -= 1
            i = nxt_close
