import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nucrobust.core import Bundle, ValidationError
from nucrobust.metrics import (DEFAULT_GRID, ClassMatchStats, PairIoUTable, ThresholdGrid,
                               UndefinedMetricError, accumulate_class_stats, iou_table,
                               match_bruteforce, match_instances, mpq_plus, mpq_plus_auc,
                               pq_from_stats, psnr, trapezoid)

from conftest import make_patch


def squares_overlap_2px():
    gt = np.zeros((4, 4), np.int32)
    pred = np.zeros((4, 4), np.int32)
    gt[0:2, 0:2] = 1
    pred[0:2, 1:3] = 1
    return gt, pred


def test_iou_table_examples():
    one = np.zeros((3, 3), np.int32)
    one[:2, :2] = 1
    assert iou_table(one, one).entries == [(1, 1, 4, 4, 1.0)]

    gt, pred = squares_overlap_2px()
    (entry,) = iou_table(gt, pred).entries
    assert entry[:4] == (1, 1, 2, 6)
    assert entry[4] == 1 / 3

    a = np.zeros((4, 4), np.int32)
    b = np.zeros((4, 4), np.int32)
    a[0, 0] = 1
    b[3, 3] = 1
    t = iou_table(a, b)
    assert t.entries == []
    assert t.gt_sizes == {1: 1} and t.pred_sizes == {1: 1}


def test_iou_table_dimension_mismatch():
    with pytest.raises(ValidationError):
        iou_table(np.zeros((2, 2)), np.zeros((2, 3)))


def test_iou_table_order_and_union():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 5, (16, 16))
    pred = rng.integers(0, 5, (16, 16))
    t = iou_table(gt, pred)
    keys = list(zip(t.gt_ids.tolist(), t.pred_ids.tolist()))
    assert keys == sorted(keys)
    for g, p, i, u, v in t.entries:
        assert i == int(((gt == g) & (pred == p)).sum())
        assert u == t.gt_sizes[g] + t.pred_sizes[p] - i
        assert v == i / u


def test_match_threshold_regimes():
    gt, pred = squares_overlap_2px()
    t = iou_table(gt, pred)
    m = match_instances(t, 0.5)
    assert m.pairs == [] and m.unmatched_gt == [1] and m.unmatched_pred == [1]
    m = match_instances(t, 0.25)
    assert m.pairs == [(1, 1, 1 / 3)]
    with pytest.raises(ValidationError):
        match_instances(t, 0.51)
    with pytest.raises(ValidationError):
        match_instances(t, -0.01)


def two_by_two():
    # A=1, B=2; P=1, Q=2
    return PairIoUTable.from_iou({(1, 1): 0.2, (1, 2): 0.4, (2, 1): 0.5, (2, 2): 0.1})


def test_match_hungarian_beats_greedy():
    m = match_instances(two_by_two(), 0.05)
    assert [(g, p) for g, p, _ in m.pairs] == [(1, 2), (2, 1)]
    assert m.total_iou == pytest.approx(0.9, abs=1e-15)
    assert match_bruteforce(two_by_two(), 0.05).total_iou == pytest.approx(0.9, abs=1e-15)


def test_bruteforce_empty_and_cap():
    empty = PairIoUTable.from_iou({})
    m = match_bruteforce(empty, 0.3)
    assert m.pairs == [] and m.unmatched_gt == [] and m.unmatched_pred == []
    big = PairIoUTable.from_iou({(i, i): 0.9 for i in range(1, 10)})
    with pytest.raises(ValidationError):
        match_bruteforce(big, 0.1)


def test_tie_break_is_lexicographic():
    # two optimal perfect matchings with equal total; pick (1,1),(2,2)
    t = PairIoUTable.from_iou({(1, 1): 0.3, (1, 2): 0.3, (2, 1): 0.3, (2, 2): 0.3})
    assert [(g, p) for g, p, _ in match_instances(t, 0.0).pairs] == [(1, 1), (2, 2)]
    t = PairIoUTable.from_iou({(1, 1): 0.25, (1, 2): 0.25, (2, 2): 0.25})
    assert [(g, p) for g, p, _ in match_instances(t, 0.0).pairs] == [(1, 1), (2, 2)]


def random_table(rng, ng, n_p, density=0.6):
    ious = {}
    for g in range(1, ng + 1):
        for p in range(1, n_p + 1):
            if rng.random() < density:
                ious[(g, p)] = float(rng.uniform(0.01, 1.0))
    return PairIoUTable.from_iou(ious, range(1, ng + 1), range(1, n_p + 1))


def random_label_map(rng, n, size=12):
    """Paint up to ``n`` random rectangles; later ones overwrite earlier ones."""
    m = np.zeros((size, size), np.int32)
    for k in range(1, n + 1):
        y, x = rng.integers(0, size - 1, 2)
        hh, ww = rng.integers(1, size // 2 + 1, 2)
        m[y:y + hh, x:x + ww] = k
    return m


def raster_table(rng, ng, n_p):
    gt = random_label_map(rng, ng)
    pred = gt.copy() if rng.random() < 0.3 else random_label_map(rng, n_p)
    if rng.random() < 0.5:
        pred = np.roll(pred, int(rng.integers(-2, 3)), axis=int(rng.integers(0, 2)))
    return iou_table(gt, pred)


def test_three_by_three_random_equals_bruteforce(rng):
    for _ in range(50):
        t = random_table(rng, 3, 3)
        for a in DEFAULT_GRID.thresholds[:-1]:
            assert match_instances(t, a).total_iou == match_bruteforce(t, a).total_iou


def check_matching_invariants(t, m):
    gs = [g for g, _, _ in m.pairs]
    ps = [p for _, p, _ in m.pairs]
    assert len(set(gs)) == len(gs) and len(set(ps)) == len(ps)
    assert all(v > m.threshold for *_, v in m.pairs)
    assert sorted(gs + m.unmatched_gt) == sorted(t.gt_sizes)
    assert sorted(ps + m.unmatched_pred) == sorted(t.pred_sizes)


@given(st.integers(0, 2**32 - 1), st.integers(0, 7), st.integers(0, 7),
       st.sampled_from(DEFAULT_GRID.thresholds[:-1]))
@settings(max_examples=150, deadline=None)
def test_oracle_equivalence_abstract_tables(seed, ng, n_p, a):
    rng = np.random.default_rng(seed)
    t = random_table(rng, ng, n_p, density=rng.uniform(0.1, 1.0))
    m = match_instances(t, a)
    check_matching_invariants(t, m)
    assert m.total_iou == match_bruteforce(t, a).total_iou


def test_non_unique_pairs_above_half_are_rejected():
    from nucrobust.core import NumericalError
    t = PairIoUTable.from_iou({(1, 1): 0.6, (1, 2): 0.7})
    with pytest.raises(NumericalError):
        match_instances(t, 0.5)


@given(st.integers(0, 2**32 - 1), st.integers(0, 8), st.integers(0, 8),
       st.sampled_from(DEFAULT_GRID.thresholds))
@settings(max_examples=200, deadline=None)
def test_oracle_equivalence_raster_tables(seed, ng, n_p, a):
    rng = np.random.default_rng(seed)
    t = raster_table(rng, ng, n_p)
    m = match_instances(t, a)
    check_matching_invariants(t, m)
    assert m.total_iou == match_bruteforce(t, a).total_iou


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_tp_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 6, (12, 12))
    pred = rng.integers(0, 6, (12, 12))
    t = iou_table(gt, pred)
    tps = [match_instances(t, a).tp for a in DEFAULT_GRID.thresholds]
    assert all(x >= y for x, y in zip(tps, tps[1:]))


def test_high_threshold_unique_on_random_partitions(rng):
    for _ in range(30):
        gt = rng.integers(0, 8, (10, 10))
        pred = rng.integers(0, 8, (10, 10))
        m = match_instances(iou_table(gt, pred), 0.5)
        check_matching_invariants(iou_table(gt, pred), m)


def test_pq_from_stats_cases():
    assert pq_from_stats(ClassMatchStats(1, 1, 0, 0, 1.0)) == (1.0, 1.0, 1.0)
    dq, sq, pq = pq_from_stats(ClassMatchStats(1, 1, 0, 0, 1 / 3))
    assert (dq, sq, pq) == (1.0, 1 / 3, 1 / 3)
    assert pq_from_stats(ClassMatchStats(1, 0, 1, 1, 0.0))[2] == 0.0
    assert pq_from_stats(ClassMatchStats(1)) is None
    dq, sq, pq = pq_from_stats(ClassMatchStats(1, 3, 1, 2, 2.4))
    assert dq == pytest.approx(3 / 4.5) and sq == pytest.approx(0.8)


def _stats(values):
    out = {t: ClassMatchStats(t) for t in range(1, 7)}
    for t, pq in values.items():
        out[t] = ClassMatchStats(t, 1, 0, 0, pq)
    return out


def test_mpq_plus_cases():
    assert mpq_plus(_stats({t: 1.0 for t in range(1, 7)})) == (1.0, [])
    v, ex = mpq_plus(_stats({1: 1 / 3}))
    assert v == pytest.approx(1 / 3) and ex == [2, 3, 4, 5, 6]
    v, ex = mpq_plus(_stats({1: 1.0, 4: 0.5}))
    assert v == 0.75 and ex == [2, 3, 5, 6]
    with pytest.raises(UndefinedMetricError):
        mpq_plus(_stats({}))
    with pytest.raises(ValidationError):
        mpq_plus({1: ClassMatchStats(1)})


def test_trapezoid_step_profile():
    ys = [1.0] * 6 + [0.0] * 5
    assert trapezoid(DEFAULT_GRID.thresholds, ys) == 0.275
    c = 0.37
    assert trapezoid(DEFAULT_GRID.thresholds, [c] * 11) == pytest.approx(0.5 * c, abs=1e-15)


def test_threshold_grid():
    assert DEFAULT_GRID.thresholds[0] == 0.0 and DEFAULT_GRID.thresholds[-1] == 0.5
    assert len(DEFAULT_GRID.thresholds) == 11
    assert DEFAULT_GRID.thresholds[3] == 0.15
    with pytest.raises(ValidationError):
        ThresholdGrid((0.0,))
    with pytest.raises(ValidationError):
        ThresholdGrid((0.0, 0.4))
    with pytest.raises(ValidationError):
        ThresholdGrid.from_step(0.03)


def _bundle(name, patches):
    return Bundle(patches, name)


def two_patch_fixture():
    """Patch a: class 1 exact + class 2 shifted (IoU 1/3); patch b: class 1 missed, class 2 FP."""
    g1 = np.zeros((8, 8), np.int32)
    c1 = np.zeros_like(g1)
    g1[0:2, 0:2] = 1
    c1[0:2, 0:2] = 1
    g1[4:6, 4:6] = 2
    c1[4:6, 4:6] = 2
    p1 = np.zeros_like(g1)
    q1 = np.zeros_like(g1)
    p1[0:2, 0:2] = 7
    q1[0:2, 0:2] = 1
    p1[4:6, 5:7] = 3
    q1[4:6, 5:7] = 2

    g2 = np.zeros((8, 8), np.int32)
    c2 = np.zeros_like(g2)
    g2[1:4, 1:4] = 1
    c2[1:4, 1:4] = 1
    p2 = np.zeros_like(g2)
    q2 = np.zeros_like(g2)
    p2[6:8, 6:8] = 1
    q2[6:8, 6:8] = 2
    gt = _bundle("gt", [make_patch("a", g1, c1), make_patch("b", g2, c2)])
    pred = _bundle("pred", [make_patch("a", p1, q1), make_patch("b", p2, q2)])
    return gt, pred


def test_accumulate_pools_per_patch_counts():
    gt, pred = two_patch_fixture()
    s = accumulate_class_stats(gt, pred, 0.25)
    assert (s[1].tp, s[1].fp, s[1].fn, s[1].iou_sum) == (1, 0, 1, 1.0)
    assert (s[2].tp, s[2].fp, s[2].fn) == (1, 1, 0)
    assert s[2].iou_sum == 1 / 3
    for t in range(3, 7):
        assert (s[t].tp, s[t].fp, s[t].fn) == (0, 0, 0)
    s = accumulate_class_stats(gt, pred, 0.5)
    assert (s[2].tp, s[2].fp, s[2].fn) == (0, 2, 1)
    # pooled equals the sum over single-patch bundles
    for a in (0.0, 0.25, 0.5):
        parts = [accumulate_class_stats(gt.subset([i]), pred.subset([i]), a) for i in "ab"]
        whole = accumulate_class_stats(gt, pred, a)
        for t in range(1, 7):
            assert whole[t].tp == sum(p[t].tp for p in parts)
            assert whole[t].fp == sum(p[t].fp for p in parts)
            assert whole[t].fn == sum(p[t].fn for p in parts)


def test_class_restriction_blocks_cross_class_matches():
    g = np.zeros((4, 4), np.int32)
    g[:2, :2] = 1
    gt = _bundle("g", [make_patch("x", g, g * 1)])
    pred = _bundle("p", [make_patch("x", g, g * 3)])
    s = accumulate_class_stats(gt, pred, 0.0)
    assert (s[1].tp, s[1].fn, s[3].tp, s[3].fp) == (0, 1, 0, 1)


def test_accumulate_perfect_and_empty(he_bundle):
    s = accumulate_class_stats(he_bundle, he_bundle, 0.3)
    for st_ in s.values():
        assert st_.fp == st_.fn == 0 and st_.iou_sum == st_.tp
    empty = Bundle([make_patch(p.id, np.zeros_like(p.instances)) for p in he_bundle], "e")
    s = accumulate_class_stats(he_bundle, empty, 0.3)
    counts = {}
    for p in he_bundle:
        for k in np.unique(p.instances[p.instances > 0]):
            c = int(p.classes[p.instances == k][0])
            counts[c] = counts.get(c, 0) + 1
    for t in range(1, 7):
        assert (s[t].tp, s[t].fp, s[t].fn) == (0, 0, counts.get(t, 0))


def test_accumulate_id_mismatch():
    gt, pred = two_patch_fixture()
    with pytest.raises(ValidationError):
        accumulate_class_stats(gt, pred.subset(["a"]), 0.1)


def test_auc_perfect_and_constant(he_bundle):
    rep = mpq_plus_auc(he_bundle, he_bundle)
    assert rep.auc == 0.5
    assert all(m == 1.0 for m in rep.mpq_plus)
    for (t, a), r in rep.per_class.items():
        if t not in rep.excluded_classes:
            assert r["pq"] == 1.0


def test_auc_step_profile_from_fixture():
    # 3x3 squares offset by (1, 1): overlap 4, union 14, IoU 2/7 in (0.25, 0.30]
    gt = np.zeros((6, 6), np.int32)
    pred = np.zeros((6, 6), np.int32)
    gt[0:3, 0:3] = 1
    pred[1:4, 1:4] = 1
    iou = iou_table(gt, pred).iou[0]
    assert iou == 4 / 14
    rep = mpq_plus_auc(Bundle([make_patch("x", gt)], "g"), Bundle([make_patch("x", pred)], "p"))
    # one TP -> DQ=1, SQ=iou up to a=0.25; afterwards one FP + one FN -> PQ=0
    assert rep.mpq_plus == pytest.approx([iou] * 6 + [0.0] * 5, abs=1e-15)
    assert rep.auc == pytest.approx(0.275 * iou, abs=1e-15)
    assert rep.excluded_classes == [2, 3, 4, 5, 6]


def test_auc_empty_prediction_is_zero(he_bundle):
    empty = Bundle([make_patch(p.id, np.zeros_like(p.instances)) for p in he_bundle], "e")
    rep = mpq_plus_auc(he_bundle, empty)
    assert rep.auc == 0.0


def test_auc_permutation_invariant(he_bundle, rng):
    pred = []
    for p in he_bundle:
        labels = np.unique(p.instances)
        perm = rng.permutation(np.arange(1, labels.max() + 100))[: labels.max() + 1] + 1
        perm[0] = 0
        inst = perm[p.instances]
        # erode every instance slightly so IoU < 1
        inst = np.where(np.roll(p.instances, 1, axis=1) == p.instances, inst, 0)
        pred.append(make_patch(p.id, inst, np.where(inst > 0, p.classes, 0)))
    pred_b = Bundle(pred, "pred")
    r1 = mpq_plus_auc(he_bundle, pred_b)
    relab = Bundle([make_patch(p.id, np.where(p.instances > 0, p.instances + 1000, 0),
                               p.classes) for p in pred], "pred2")
    r2 = mpq_plus_auc(he_bundle, relab)
    assert r1.mpq_plus == r2.mpq_plus and r1.auc == r2.auc
    assert 0 <= r1.auc <= 0.5


def test_report_csv_layout(he_bundle):
    rep = mpq_plus_auc(he_bundle, he_bundle)
    lines = rep.class_rows_csv().splitlines()
    assert lines[0] == "class,threshold,tp,fp,fn,dq,sq,pq"
    assert len(lines) == 1 + 6 * 11
    s = rep.summary_csv().splitlines()
    assert s[0] == "threshold,mpq_plus" and s[-1] == "auc,0.500000"
    assert rep.class_rows_csv() == mpq_plus_auc(he_bundle, he_bundle).class_rows_csv()


def test_psnr_cases():
    a = np.zeros((4, 5, 3), np.uint8)
    assert psnr(a, a) == math.inf
    assert psnr(a, np.full_like(a, 255)) == 0.0
    b = a.copy()
    b[0, 0] = 1
    n = 20
    assert psnr(a, b) == pytest.approx(10 * math.log10(255**2 * n * 3 / 3), abs=1e-9)
    with pytest.raises(ValidationError):
        psnr(a, a[:2])
