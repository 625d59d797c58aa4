from fractions import Fraction
from itertools import product
from math import comb

import numpy as np
import pytest
from scipy import stats

from lesionkit.exceptions import DataError, DegenerateInputError, ValidationError
from lesionkit.lesion_metrics import volumetric_dice
from lesionkit.phantom import PhantomParams, StudyParams, simulate_study
from lesionkit.rater_protocol import (
    CaseStudy,
    RaterRecord,
    compare_settings,
    consensus,
    evaluate_setting,
    median,
    mmss,
    sign_test,
    speedup,
    timing_summary,
)


def binomial_oracle(n_pos, n):
    """Two-sided exact sign test from the binomial pmf, in exact arithmetic."""
    pmf = [Fraction(comb(n, k), 2**n) for k in range(n + 1)]
    tail = min(sum(pmf[: n_pos + 1]), sum(pmf[n_pos:]))
    return min(Fraction(1), 2 * tail)


def test_sign_test_exhaustive_small_n():
    for n in range(1, 13):
        for signs in product((-1, 1), repeat=n):
            p = sign_test(signs)
            ref = binomial_oracle(signs.count(1), n)
            assert abs(p - float(ref)) <= 1e-12


def test_sign_test_all_counts_up_to_20():
    # the statistic only depends on (n, #positive), so this covers every pattern
    for n in range(1, 21):
        for k in range(n + 1):
            diffs = [1.0] * k + [-1.0] * (n - k)
            p = sign_test(diffs)
            assert abs(p - float(binomial_oracle(k, n))) <= 1e-12
            assert abs(p - stats.binomtest(k, n, 0.5).pvalue) <= 1e-12


def test_sign_test_known_values():
    assert sign_test([0.1] * 5) == 0.0625
    assert sign_test([1, -1]) == 1.0
    # zeros are dropped
    assert sign_test([0.3, 0.0, 0.2, 0.0, 0.5, 0.1, 0.4]) == 0.0625


def test_sign_test_degenerate():
    with pytest.raises(DegenerateInputError):
        sign_test([])
    with pytest.raises(DegenerateInputError):
        sign_test([0.0, 0.0])


def test_consensus_majority_and_ties():
    a = np.array([1, 1, 0, 0], np.uint8).reshape(4, 1, 1)
    b = np.array([1, 0, 1, 0], np.uint8).reshape(4, 1, 1)
    c = np.array([0, 0, 1, 0], np.uint8).reshape(4, 1, 1)
    assert consensus([a, b, c]).ravel().tolist() == [1, 0, 1, 0]
    # two raters: mean 0.5 counts as positive
    assert consensus([a, b]).ravel().tolist() == [1, 1, 1, 0]
    with pytest.raises(ValidationError):
        consensus([a])


def _record(m, c, tm=600.0, ta=300.0):
    return RaterRecord(np.asarray(m, np.uint8), np.asarray(c, np.uint8), tm, ta)


def test_evaluate_setting_against_hand_computation():
    rng = np.random.default_rng(4)
    shape = (6, 6, 6)
    raters = [_record(rng.random(shape) < 0.4, rng.random(shape) < 0.4) for _ in range(4)]
    study = [CaseStudy("c0", raters)]
    out = {s: evaluate_setting(study, s) for s in ("1v3", "1p_v3", "1p_v3p")}
    for u in range(4):
        others = [v for v in range(4) if v != u]
        man = [raters[v].manual_mask for v in others]
        cnn = [raters[v].cnn_init_mask for v in others]
        maj_m = (np.sum(man, axis=0) >= 2).astype(np.uint8)
        maj_c = (np.sum(cnn, axis=0) >= 2).astype(np.uint8)
        assert out["1v3"][("c0", u + 1)] == volumetric_dice(raters[u].manual_mask, maj_m)
        assert out["1p_v3"][("c0", u + 1)] == volumetric_dice(raters[u].cnn_init_mask, maj_m)
        assert out["1p_v3p"][("c0", u + 1)] == volumetric_dice(raters[u].cnn_init_mask, maj_c)


def test_missing_mask_and_bad_times():
    m = np.ones((2, 2, 2), np.uint8)
    study = [CaseStudy("c", [RaterRecord(m, None, 1.0, 1.0), RaterRecord(m, m, 1.0, 1.0)])]
    with pytest.raises(DataError, match="cnn_init"):
        evaluate_setting(study, "1p_v3")
    with pytest.raises(ValidationError):
        CaseStudy("c", [RaterRecord(m, m, 0.0, 1.0)])
    with pytest.raises(ValidationError):
        CaseStudy("c", [RaterRecord(m, np.ones((2, 2, 3), np.uint8), 1.0, 1.0)])
    with pytest.raises(ValidationError):
        evaluate_setting(study, "2v2")


def test_median():
    assert median([3, 1, 2]) == 2
    assert median([4, 1, 3, 2]) == 2.5
    with pytest.raises(ValidationError):
        median([])


def test_speedup_arithmetic():
    # pooled medians of 10.09 min manual and 5.53 min reduction
    assert speedup(10.09 * 60, 5.53 * 60) == pytest.approx(2.21, abs=0.005)
    assert speedup(10.0, 10.0) == float("inf")


def test_timing_summary_hand_values():
    m = np.ones((2, 2, 2), np.uint8)
    times = [(600, 200), (300, 200), (900, 300)]
    study = [CaseStudy(f"c{i}", [RaterRecord(m, m, tm, ta)]) for i, (tm, ta) in enumerate(times)]
    t = timing_summary(study)
    assert t.keys() == {1, "all"}
    s = t["all"]
    assert s["median_manual"] == 600
    assert s["median_reduction"] == 400
    assert s["manual_range"] == (300, 900)
    assert s["reduction_range"] == (100, 600)
    assert s["speedup"] == 3.0
    assert s["speedup_per_case"] == 3.0


def test_mmss():
    assert mmss(605.4) == "10:05"
    assert mmss(59.5) == "01:00"
    assert mmss(-75) == "-01:15"


def test_compare_settings_on_simulated_study():
    phantom = PhantomParams(dims=(40, 40, 40), noise_sigma=0.0, diameter_range=(4.0, 14.0))
    cases, _ = simulate_study(phantom, StudyParams(n_cases=4), np.random.default_rng(0))
    report = compare_settings(cases)
    assert set(report.medians) == {1, 2, 3, 4, "all"}
    rows = list(report.rows())
    assert rows[-1]["rater"] == "All data"
    # pooled row recomputed by hand from the per-pair Dice values
    for s in ("1v3", "1p_v3", "1p_v3p"):
        assert report.medians["all"][s] == float(np.median(list(report.dice[s].values())))
    diffs = [report.dice["1p_v3p"][k] - report.dice["1v3"][k] for k in report.dice["1v3"]]
    assert report.p_values["all"]["II"] == sign_test(diffs)


def test_degenerate_pairs_report_none():
    m = np.ones((2, 2, 2), np.uint8)
    study = [CaseStudy("c", [RaterRecord(m, m, 2.0, 1.0) for _ in range(3)])]
    report = compare_settings(study)
    assert report.p_values["all"] == {"I": None, "II": None}
