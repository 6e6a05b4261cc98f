import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progfreeze.metrics import (ConfusionCounts, UndefinedMetricError, aggregate, auroc,
                                auroc_pairs, confusion_counts, evaluate, metrics_from_counts,
                                paired_t, paired_t_from_differences, t_cdf)


def _pairs(pos, neg):
    return [(s, 1) for s in pos] + [(s, 0) for s in neg]


def test_auroc_examples():
    assert auroc(_pairs([0.9, 0.8], [0.1, 0.2])) == 1.0
    assert auroc(_pairs([0.6], [0.6])) == 0.5
    assert auroc(_pairs([0.8, 0.4], [0.6, 0.2])) == 0.75
    with pytest.raises(UndefinedMetricError):
        auroc(_pairs([0.1, 0.2], []))


scores_st = st.lists(st.tuples(st.integers(0, 6).map(lambda v: v / 6), st.integers(0, 1)),
                     min_size=2, max_size=50).filter(lambda xs: len({y for _, y in xs}) == 2)


@given(scores_st)
@settings(max_examples=200, deadline=None)
def test_auroc_equals_pair_counting(xs):
    assert auroc(xs) == auroc_pairs(xs)


@given(scores_st)
@settings(max_examples=100, deadline=None)
def test_auroc_invariant_under_monotone_transform(xs):
    assert auroc([(math.exp(3 * s) - 7, y) for s, y in xs]) == pytest.approx(auroc(xs))


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=40,
                unique_by=lambda t: t[0]).filter(lambda xs: len({y for _, y in xs}) == 2))
@settings(max_examples=100, deadline=None)
def test_auroc_label_flip_complements(xs):
    flipped = [(s, 1 - y) for s, y in xs]
    assert auroc(flipped) == pytest.approx(1 - auroc(xs))


def _naive(tp, fp, tn, fn):
    sens = tp / (tp + fn)
    spec = tn / (tn + fp)
    prec = tp / (tp + fp)
    return {"sensitivity": sens, "specificity": spec, "precision": prec,
            "f1": 2 * prec * sens / (prec + sens), "balanced_accuracy": (sens + spec) / 2,
            "raw_accuracy": (tp + tn) / (tp + fp + tn + fn)}


@pytest.mark.parametrize("counts", [(5, 5, 5, 5), (3, 2, 2, 1), (10, 1, 7, 4)])
def test_confusion_metrics_match_definitions(counts):
    got = metrics_from_counts(ConfusionCounts(*counts))
    for k, v in _naive(*counts).items():
        assert got[k] == pytest.approx(v, abs=1e-12)


def test_worked_example():
    got = metrics_from_counts(ConfusionCounts(tp=3, fp=2, tn=2, fn=1))
    assert got["sensitivity"] == 0.75 and got["specificity"] == 0.5
    assert got["precision"] == pytest.approx(0.6)
    assert got["f1"] == pytest.approx(2 * 0.6 * 0.75 / 1.35)
    assert got["balanced_accuracy"] == 0.625


def test_zero_denominators_flagged():
    got = metrics_from_counts(ConfusionCounts(tp=0, fp=0, tn=4, fn=4))
    assert got["precision"] == 0.0 and got["f1"] == 0.0
    assert "precision_undefined" in got["flags"]


def test_threshold_sweep_is_monotone():
    rng = np.random.default_rng(0)
    xs = [(float(s), int(y)) for s, y in zip(rng.uniform(size=60), rng.integers(0, 2, 60))]
    sens = []
    for thr in [-np.inf, *np.linspace(0, 1, 21), np.inf]:
        c = confusion_counts(xs, thr)
        sens.append(c.tp / (c.tp + c.fn))
    assert sens[0] == 1.0 and sens[-1] == 0.0
    assert all(a >= b for a, b in zip(sens, sens[1:]))


def test_evaluate_single_class_flags():
    rep = evaluate([(0.2, 1), (0.9, 1)])
    assert math.isnan(rep.auroc) and "single_class" in rep.flags
    rep = evaluate([(0.2, 0), (0.9, 1)])
    assert rep.balanced_accuracy == pytest.approx((rep.sensitivity + rep.specificity) / 2, abs=1e-12)


def test_aggregate_sample_std():
    reps = [evaluate([(0.1, 0), (0.9, 1), (0.4, 1), (0.6, 0)]),
            evaluate([(0.1, 0), (0.9, 1), (0.6, 1), (0.4, 0)])]
    agg = aggregate(reps)
    assert agg["auroc"][0] == pytest.approx(0.875)
    assert agg["auroc"][1] == pytest.approx(np.std([0.75, 1.0], ddof=1))
    same = aggregate([reps[0]] * 3)
    assert same["auroc"][1] == 0.0
    with pytest.raises(ValueError):
        aggregate(reps[:1])


def _t_cdf_oracle(t, df):
    mpmath.mp.dps = 40
    nu = mpmath.mpf(df)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    dens = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    return float(mpmath.mpf("0.5") + mpmath.quad(dens, [0, t]))


@pytest.mark.parametrize("t,df", [(0.3, 1), (1.0, 1), (-2.0, 2), (2.5706, 5), (-0.7, 5),
                                  (4.0, 7), (1.5, 29), (-3.3, 12), (10.0, 3)])
def test_t_cdf_against_high_precision_integration(t, df):
    assert abs(t_cdf(t, df) - _t_cdf_oracle(t, df)) <= 1e-10


def test_t_cdf_closed_forms():
    assert t_cdf(0.0, 9) == 0.5
    assert t_cdf(1.0, 1) == pytest.approx(0.5 + math.atan(1.0) / math.pi, abs=1e-14)
    assert abs(t_cdf(2.5706, 5) - 0.975) < 1e-4


def test_paired_t_cases():
    sym = paired_t_from_differences([1, -1, 1, -1, 1, -1])
    assert sym.t_stat == 0.0 and sym.p_two_sided == pytest.approx(1.0)
    deg = paired_t_from_differences([0.1] * 6)
    assert deg.degenerate and deg.p_two_sided == 0.0
    # build six differences whose t statistic is exactly 2.5706
    base = np.array([-1.0, -0.6, -0.2, 0.2, 0.6, 1.0])
    d = base + 2.5706 * base.std(ddof=1) / math.sqrt(6)
    res = paired_t_from_differences(d)
    assert res.t_stat == pytest.approx(2.5706)
    assert res.df == 5
    assert abs(res.p_two_sided - 0.05) < 1e-3


def _rows(vals):
    return [{"repeat": r, "fold": f, "auroc": v} for r, fs in enumerate(vals) for f, v in enumerate(fs)]


def test_paired_t_antisymmetric_and_grouped_by_repeat():
    rng = np.random.default_rng(3)
    a = _rows(rng.uniform(0.5, 1, (6, 5)))
    b = _rows(rng.uniform(0.4, 0.9, (6, 5)))
    ab, ba = paired_t(a, b), paired_t(b, a)
    assert ab.t_stat == pytest.approx(-ba.t_stat)
    assert ab.p_two_sided == pytest.approx(ba.p_two_sided)
    assert ab.df == 5 and len(ab.differences) == 6
    with pytest.raises(ValueError):
        paired_t(a, [r for r in b if r["repeat"] < 5])
