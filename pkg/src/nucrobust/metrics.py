"""Panoptic quality for multi-class nuclei and its area under the threshold curve.

Matching follows the usual two-regime rule: above an IoU threshold of 0.5 a
prediction can overlap at most one ground-truth instance by more than half,
so every surviving pair is already unique; below 0.5 the surviving pairs are
resolved by a maximum-total-IoU linear assignment.

Counts are pooled over the whole dataset per class before PQ is formed, and
the per-class PQ values are averaged into mPQ+.  Classes absent from both
ground truth and prediction are excluded from the mean.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .core import (NUM_CLASSES, Bundle, NucRobustError, NumericalError, ValidationError,
                   instance_classes)

BRUTEFORCE_CAP = 8


class UndefinedMetricError(NucRobustError):
    pass


@dataclass
class PairIoUTable:
    gt_ids: np.ndarray
    pred_ids: np.ndarray
    intersection: np.ndarray
    union: np.ndarray
    iou: np.ndarray
    gt_sizes: dict[int, int]
    pred_sizes: dict[int, int]

    def __len__(self):
        return len(self.gt_ids)

    @property
    def entries(self) -> list[tuple[int, int, int, int, float]]:
        return [(int(g), int(p), int(i), int(u), float(v)) for g, p, i, u, v in
                zip(self.gt_ids, self.pred_ids, self.intersection, self.union, self.iou)]

    def restrict(self, gt_keep: Iterable[int], pred_keep: Iterable[int]) -> "PairIoUTable":
        """Sub-table over the given gt and pred ids (IoU values are unchanged)."""
        gt_keep, pred_keep = set(gt_keep), set(pred_keep)
        mask = (np.isin(self.gt_ids, np.fromiter(gt_keep, np.int64, len(gt_keep)))
                & np.isin(self.pred_ids, np.fromiter(pred_keep, np.int64, len(pred_keep))))
        return PairIoUTable(
            self.gt_ids[mask], self.pred_ids[mask], self.intersection[mask],
            self.union[mask], self.iou[mask],
            {k: v for k, v in self.gt_sizes.items() if k in gt_keep},
            {k: v for k, v in self.pred_sizes.items() if k in pred_keep},
        )

    @classmethod
    def from_iou(cls, ious: dict[tuple[int, int], float],
                 gt_ids: Iterable[int] = (), pred_ids: Iterable[int] = ()) -> "PairIoUTable":
        """Build a table straight from IoU values (pixel counts left at zero).

        Handy for exercising the matching logic without rasterising shapes.
        """
        keys = sorted(k for k, v in ious.items() if v > 0)
        gt_all = sorted(set(gt_ids) | {g for g, _ in keys})
        pred_all = sorted(set(pred_ids) | {p for _, p in keys})
        n = len(keys)
        return cls(
            np.array([g for g, _ in keys], dtype=np.int64),
            np.array([p for _, p in keys], dtype=np.int64),
            np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64),
            np.array([ious[k] for k in keys], dtype=np.float64),
            {g: 0 for g in gt_all}, {p: 0 for p in pred_all},
        )


@dataclass
class Matching:
    threshold: float
    pairs: list[tuple[int, int, float]]
    unmatched_gt: list[int]
    unmatched_pred: list[int]

    @property
    def total_iou(self) -> float:
        return math.fsum(v for _, _, v in self.pairs)

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)


@dataclass
class ClassMatchStats:
    cls: int
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0


@dataclass(frozen=True)
class ThresholdGrid:
    thresholds: tuple[float, ...]

    def __post_init__(self):
        t = self.thresholds
        if len(t) < 2:
            raise ValidationError("threshold grid needs at least 2 points")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValidationError("thresholds must be strictly ascending")
        if t[0] != 0.0 or t[-1] != 0.5:
            raise ValidationError("threshold grid must span [0, 0.5]")

    @classmethod
    def from_step(cls, step: float = 0.05) -> "ThresholdGrid":
        if step <= 0 or step > 0.5:
            raise ValidationError(f"grid step must be in (0, 0.5], got {step}")
        n = int(round(0.5 / step))
        if not math.isclose(n * step, 0.5, rel_tol=0, abs_tol=1e-9):
            raise ValidationError(f"grid step {step} does not divide 0.5")
        return cls(tuple(round(i * 0.5 / n, 12) for i in range(n + 1)))


DEFAULT_GRID = ThresholdGrid.from_step(0.05)


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    # (cls, threshold) -> dict(tp, fp, fn, dq, sq, pq); dq/sq/pq are None when undefined
    per_class: dict[tuple[int, float], dict]
    mpq_plus: list[float]
    auc: float
    excluded_classes: list[int] = field(default_factory=list)

    def class_rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "threshold", "tp", "fp", "fn", "dq", "sq", "pq"])
        for t in range(1, NUM_CLASSES + 1):
            for a in self.thresholds:
                r = self.per_class[(t, a)]
                w.writerow([t, _fmt(a), r["tp"], r["fp"], r["fn"],
                            _fmt(r["dq"]), _fmt(r["sq"]), _fmt(r["pq"])])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "mpq_plus"])
        for a, m in zip(self.thresholds, self.mpq_plus):
            w.writerow([_fmt(a), _fmt(m)])
        w.writerow(["auc", _fmt(self.auc)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "mpq_plus": list(self.mpq_plus),
            "auc": self.auc,
            "excluded_classes": list(self.excluded_classes),
            "per_class": [
                {"class": t, "threshold": a, **self.per_class[(t, a)]}
                for t in range(1, NUM_CLASSES + 1) for a in self.thresholds
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        per_class = {}
        for row in d["per_class"]:
            row = dict(row)
            per_class[(row.pop("class"), row.pop("threshold"))] = row
        return cls(tuple(d["thresholds"]), per_class, list(d["mpq_plus"]),
                   d["auc"], list(d["excluded_classes"]))


def _fmt(x) -> str:
    if x is None:
        return "nan"
    return f"{x:.6f}"


def iou_table(gt: np.ndarray, pred: np.ndarray) -> PairIoUTable:
    """Exact pixel-count IoU for every overlapping (gt, pred) instance pair."""
    gt, pred = np.asarray(gt), np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValidationError(f"dimension mismatch: gt {gt.shape} vs pred {pred.shape}")
    g = gt.ravel().astype(np.int64)
    p = pred.ravel().astype(np.int64)
    gl, gc = np.unique(g[g > 0], return_counts=True)
    pl, pc = np.unique(p[p > 0], return_counts=True)
    gt_sizes = dict(zip(gl.tolist(), gc.tolist()))
    pred_sizes = dict(zip(pl.tolist(), pc.tolist()))

    both = (g > 0) & (p > 0)
    base = int(p.max()) + 1 if p.size else 1
    keys, inter = np.unique(g[both] * base + p[both], return_counts=True)
    gid, pid = keys // base, keys % base
    gsz = np.array([gt_sizes[k] for k in gid.tolist()], dtype=np.int64)
    psz = np.array([pred_sizes[k] for k in pid.tolist()], dtype=np.int64)
    union = gsz + psz - inter
    return PairIoUTable(gid, pid, inter.astype(np.int64), union,
                        inter / union, gt_sizes, pred_sizes)


def _check_threshold(a: float):
    if not 0.0 <= a <= 0.5:
        raise ValidationError(f"IoU threshold must lie in [0, 0.5], got {a}")


def _finish(table: PairIoUTable, a: float, pairs) -> Matching:
    pairs = sorted(pairs)
    used_g = {g for g, _, _ in pairs}
    used_p = {p for _, p, _ in pairs}
    return Matching(
        a, pairs,
        sorted(g for g in table.gt_sizes if g not in used_g),
        sorted(p for p in table.pred_sizes if p not in used_p),
    )


def _best_assignment(w: np.ndarray) -> list[tuple[int, int]]:
    if w.size == 0:
        return []
    rows, cols = linear_sum_assignment(w, maximize=True)
    return [(r, c) for r, c in zip(rows.tolist(), cols.tolist()) if w[r, c] > 0]


def _assign_component(w: np.ndarray) -> list[tuple[int, int]]:
    """Max-total-weight assignment on a dense block, ties broken lexicographically.

    Rows and columns are already in ascending id order, so walking the edges
    in (row, col) order and keeping each one that still admits an optimal
    completion yields the lexicographically smallest optimal pair list.
    """
    best = _best_assignment(w)
    target = math.fsum(w[r, c] for r, c in best)
    w = w.copy()
    fixed: list[tuple[int, int]] = []
    free_r = list(range(w.shape[0]))
    free_c = list(range(w.shape[1]))
    for r, c in zip(*np.nonzero(w)):
        r, c = int(r), int(c)
        if r not in free_r or c not in free_c or w[r, c] <= 0:
            continue
        rr = [x for x in free_r if x != r]
        cc = [x for x in free_c if x != c]
        sub = w[np.ix_(rr, cc)]
        rest = [(rr[i], cc[j]) for i, j in _best_assignment(sub)]
        cand = fixed + [(r, c)] + rest
        if math.fsum(w[i, j] for i, j in cand) >= target:
            fixed.append((r, c))
            free_r, free_c = rr, cc
        else:
            w[r, c] = 0.0
    if math.fsum(w[i, j] for i, j in fixed) < target:
        return best
    return fixed


def match_instances(table: PairIoUTable, a: float) -> Matching:
    """Match gt to predicted instances over edges with IoU strictly above ``a``."""
    _check_threshold(a)
    keep = table.iou > a
    g, p, v = table.gt_ids[keep], table.pred_ids[keep], table.iou[keep]

    if a >= 0.5:
        if len(np.unique(g)) != len(g) or len(np.unique(p)) != len(p):
            raise NumericalError("non-unique pairing above IoU 0.5")
        return _finish(table, a, [(int(x), int(y), float(z)) for x, y, z in zip(g, p, v)])

    if len(g) == 0:
        return _finish(table, a, [])

    gu, gi = np.unique(g, return_inverse=True)
    pu, pi = np.unique(p, return_inverse=True)
    ng, n_p = len(gu), len(pu)
    adj = coo_matrix((np.ones(len(g)), (gi, pi + ng)), shape=(ng + n_p, ng + n_p))
    _, comp = connected_components(adj, directed=False)

    pairs = []
    for c in np.unique(comp[:ng]):
        rows = np.nonzero(comp[:ng] == c)[0]
        cols = np.nonzero(comp[ng:] == c)[0]
        sel = np.isin(gi, rows)
        if sel.sum() == 1:
            k = int(np.nonzero(sel)[0][0])
            pairs.append((int(g[k]), int(p[k]), float(v[k])))
            continue
        w = np.zeros((len(rows), len(cols)))
        rpos = {r: i for i, r in enumerate(rows.tolist())}
        cpos = {q: j for j, q in enumerate(cols.tolist())}
        for k in np.nonzero(sel)[0]:
            w[rpos[int(gi[k])], cpos[int(pi[k])]] = v[k]
        for i, j in _assign_component(w):
            pairs.append((int(gu[rows[i]]), int(pu[cols[j]]), float(w[i, j])))
    return _finish(table, a, pairs)


def match_bruteforce(table: PairIoUTable, a: float) -> Matching:
    """Exhaustively enumerate every admissible pairing and keep the best one.

    Test oracle only: limited to BRUTEFORCE_CAP instances on each side.
    """
    _check_threshold(a)
    gts = sorted(table.gt_sizes)
    preds = sorted(table.pred_sizes)
    if len(gts) > BRUTEFORCE_CAP or len(preds) > BRUTEFORCE_CAP:
        raise ValidationError(
            f"brute force limited to {BRUTEFORCE_CAP}x{BRUTEFORCE_CAP} instances, "
            f"got {len(gts)}x{len(preds)}")
    edges: dict[int, list[tuple[int, float]]] = {x: [] for x in gts}
    for x, y, v in zip(table.gt_ids.tolist(), table.pred_ids.tolist(), table.iou.tolist()):
        if v > a:
            edges[x].append((y, v))

    best_total = -1.0
    best_pairs: list = []
    active = [x for x in gts if edges[x]]

    def walk(i, used, chosen):
        nonlocal best_total, best_pairs
        if i == len(active):
            total = math.fsum(v for _, _, v in chosen)
            if total > best_total:
                best_total, best_pairs = total, list(chosen)
            return
        x = active[i]
        for y, v in edges[x]:
            if y not in used:
                used.add(y)
                chosen.append((x, y, v))
                walk(i + 1, used, chosen)
                chosen.pop()
                used.discard(y)
        walk(i + 1, used, chosen)

    walk(0, set(), [])
    return _finish(table, a, best_pairs)


def _patch_tables(bundle_gt: Bundle, bundle_pred: Bundle):
    """Per patch: (full IoU table, gt id->class, pred id->class)."""
    gt_ids, pred_ids = bundle_gt.ids, bundle_pred.ids
    if gt_ids != pred_ids:
        missing = sorted(set(gt_ids) ^ set(pred_ids))
        if missing:
            raise ValidationError(f"patch id mismatch between bundles: {missing}")
        raise ValidationError("patch order differs between gt and prediction bundles")
    out = []
    for pg, pp in zip(bundle_gt.patches, bundle_pred.patches):
        if pg.shape != pp.shape:
            raise ValidationError(f"patch {pg.id}: gt {pg.shape} vs pred {pp.shape}")
        table = iou_table(pg.instances, pp.instances)
        out.append((table, instance_classes(pg.instances, pg.classes),
                    instance_classes(pp.instances, pp.classes)))
    return out


def _accumulate(tables, a: float) -> dict[int, ClassMatchStats]:
    ious: dict[int, list[float]] = {t: [] for t in range(1, NUM_CLASSES + 1)}
    stats = {t: ClassMatchStats(t) for t in range(1, NUM_CLASSES + 1)}
    for table, gcls, pcls in tables:
        for t in range(1, NUM_CLASSES + 1):
            gk = [k for k, c in gcls.items() if c == t]
            pk = [k for k, c in pcls.items() if c == t]
            if not gk and not pk:
                continue
            m = match_instances(table.restrict(gk, pk), a)
            s = stats[t]
            s.tp += m.tp
            s.fp += m.fp
            s.fn += m.fn
            ious[t].extend(v for _, _, v in m.pairs)
    for t, s in stats.items():
        s.iou_sum = math.fsum(ious[t])
    return stats


def accumulate_class_stats(bundle_gt: Bundle, bundle_pred: Bundle,
                           a: float) -> dict[int, ClassMatchStats]:
    """Match per patch and per class at threshold ``a``; pool counts over the dataset."""
    _check_threshold(a)
    return _accumulate(_patch_tables(bundle_gt, bundle_pred), a)


def pq_from_stats(s: ClassMatchStats) -> Optional[tuple[float, float, float]]:
    """(DQ, SQ, PQ) from pooled counts, or None when the class is undefined."""
    if s.tp == 0:
        if s.fp + s.fn == 0:
            return None
        return 0.0, 0.0, 0.0
    dq = s.tp / (s.tp + 0.5 * s.fp + 0.5 * s.fn)
    sq = s.iou_sum / s.tp
    return dq, sq, dq * sq


def mpq_plus(stats: dict[int, ClassMatchStats]) -> tuple[float, list[int]]:
    if sorted(stats) != list(range(1, NUM_CLASSES + 1)):
        raise ValidationError(f"expected class slots 1..{NUM_CLASSES}, got {sorted(stats)}")
    values, excluded = [], []
    for t in sorted(stats):
        r = pq_from_stats(stats[t])
        if r is None:
            excluded.append(t)
        else:
            values.append(r[2])
    if not values:
        raise UndefinedMetricError("mPQ+ undefined: no class present in gt or prediction")
    return math.fsum(values) / len(values), excluded


def trapezoid(xs: Sequence[float], ys: Sequence[float]) -> float:
    return math.fsum((x1 - x0) * (y0 + y1) / 2
                     for x0, x1, y0, y1 in zip(xs, xs[1:], ys, ys[1:]))


def mpq_plus_auc(bundle_gt: Bundle, bundle_pred: Bundle,
                 grid: ThresholdGrid = DEFAULT_GRID) -> EvalReport:
    tables = _patch_tables(bundle_gt, bundle_pred)
    per_class = {}
    curve = []
    excluded: list[int] = []
    for a in grid.thresholds:
        stats = _accumulate(tables, a)
        m, excluded = mpq_plus(stats)
        curve.append(m)
        for t, s in stats.items():
            r = pq_from_stats(s)
            dq, sq, pq = r if r is not None else (None, None, None)
            per_class[(t, a)] = {"tp": s.tp, "fp": s.fp, "fn": s.fn,
                                 "dq": dq, "sq": sq, "pq": pq}
    return EvalReport(grid.thresholds, per_class, curve,
                      trapezoid(grid.thresholds, curve), excluded)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for 8-bit images; inf when identical."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)
