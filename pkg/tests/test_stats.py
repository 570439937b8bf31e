import math

import numpy as np
import pytest
from scipy import stats as sps

from cvdrisk.errors import (
    DegenerateCounts,
    EmptyGroup,
    EmptyInput,
    SingleClass,
    UnachievablePPV,
    ZeroVariance,
)
from cvdrisk.stats import (
    AUCResult,
    KMCurve,
    ScoredCohort,
    SurvivalRecord,
    auc,
    auc_z_test,
    hanley_mcneil_ci,
    km_estimate,
    logrank_test,
    pearson,
    permutation_test_sensitivity,
    roc_points,
    sensitivity_at_ppv,
    threshold_for_group_survival,
    trapezoid_area,
)


def pairwise_auc_oracle(scores, labels):
    """O(n^2) concordance loop, independent of the rank implementation."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def random_cohort(rng, n_max=50, ties=True):
    n = int(rng.integers(4, n_max + 1))
    labels = np.zeros(n, dtype=int)
    labels[: int(rng.integers(1, n))] = 1
    rng.shuffle(labels)
    if labels.sum() == 0:
        labels[0] = 1
    if labels.sum() == n:
        labels[0] = 0
    if ties:
        scores = rng.integers(0, 10, size=n) / 10.0
    else:
        scores = rng.uniform(0, 1, size=n)
    return ScoredCohort(scores, labels)


class TestAUC:
    def test_perfect_separation(self):
        c = ScoredCohort(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0]))
        assert auc(c) == 1.0

    def test_all_ties(self):
        c = ScoredCohort(np.array([0.5] * 6), np.array([1, 0, 1, 0, 1, 0]))
        assert auc(c) == 0.5

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            c = random_cohort(rng)
            assert abs(auc(c) - pairwise_auc_oracle(c.scores, c.labels)) < 1e-12

    def test_rank_invariance(self):
        rng = np.random.default_rng(1)
        c = random_cohort(rng, ties=False)
        transformed = ScoredCohort(np.exp(3.0 * c.scores) + 7.0, c.labels)
        assert abs(auc(c) - auc(transformed)) < 1e-12

    def test_single_class_raises(self):
        with pytest.raises(SingleClass):
            auc(ScoredCohort(np.array([0.1, 0.2]), np.array([1, 1])))


class TestHanleyMcNeil:
    def test_hand_value_a_half(self):
        # A=0.5: Q1=Q2=1/3; SE^2 = (0.25 + 9/12 + 9/12)/100 = 0.0175
        res = hanley_mcneil_ci(0.5, 10, 10)
        assert abs(res.se - math.sqrt(0.0175)) < 1e-12
        assert abs(res.se - 0.132288) < 1e-6

    def test_se_limit_toward_one(self):
        res = hanley_mcneil_ci(0.999, 5000, 5000)
        assert res.se < 1e-3
        assert res.ci_low > 0.99 and res.ci_high <= 1.0

    def test_paper_scale_ci_width(self):
        res = hanley_mcneil_ci(0.871, 648, 1437)
        assert res.ci_low <= 0.871 <= res.ci_high
        assert (res.ci_high - res.ci_low) < 0.05

    def test_se_decreases_with_counts(self):
        ses = [hanley_mcneil_ci(0.8, n, n).se for n in (10, 100, 1000)]
        assert ses[0] > ses[1] > ses[2]

    def test_ci_ordering_invariant(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = float(rng.uniform(0.01, 0.99))
            res = hanley_mcneil_ci(a, int(rng.integers(2, 40)), int(rng.integers(2, 40)))
            assert res.ci_low <= res.auc <= res.ci_high

    def test_degenerate_counts(self):
        with pytest.raises(DegenerateCounts):
            hanley_mcneil_ci(0.8, 1, 10)


class TestAUCZTest:
    def test_identical_scores_give_p_one(self):
        rng = np.random.default_rng(3)
        c = random_cohort(rng, ties=False)
        assert auc_z_test(c, c, paired=True, rng=np.random.default_rng(0)) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a = random_cohort(rng, ties=False)
        b = ScoredCohort(rng.uniform(0, 1, size=len(a.scores)), a.labels)
        p_ab = auc_z_test(a, b, paired=False)
        p_ba = auc_z_test(b, a, paired=False)
        assert abs(p_ab - p_ba) < 1e-12

    def test_perfect_vs_random_significant(self):
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            labels = np.array([1] * 100 + [0] * 100)
            perfect = ScoredCohort(labels + rng.normal(0, 0.01, 200), labels)
            noise = ScoredCohort(rng.uniform(0, 1, 200), labels)
            if auc_z_test(perfect, noise, paired=False) < 0.001:
                hits += 1
        assert hits >= 9

    def test_paired_more_sensitive_than_unpaired_for_correlated_scores(self):
        rng = np.random.default_rng(5)
        labels = np.array([1] * 80 + [0] * 80)
        base = labels * 0.6 + rng.normal(0, 0.35, 160)
        a = ScoredCohort(base + rng.normal(0, 0.02, 160), labels)
        b = ScoredCohort(base * 0.85 + rng.normal(0, 0.02, 160), labels)
        p_paired = auc_z_test(a, b, paired=True, rng=np.random.default_rng(0))
        p_unpaired = auc_z_test(a, b, paired=False)
        assert p_paired <= p_unpaired + 1e-9


class TestSensitivityAtPPV:
    def test_perfect_cohort(self):
        c = ScoredCohort(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0]))
        sens, thr = sensitivity_at_ppv(c, 0.5)
        assert sens == 1.0

    def test_all_negative_unachievable(self):
        c = ScoredCohort(np.array([0.9, 0.8, 0.2, 0.1]), np.array([0, 0, 0, 0]))
        with pytest.raises(UnachievablePPV):
            sensitivity_at_ppv(c, 0.5)

    def test_unreachable_target(self):
        c = ScoredCohort(np.array([0.1, 0.9, 0.8, 0.2]), np.array([1, 0, 0, 1]))
        with pytest.raises(UnachievablePPV):
            sensitivity_at_ppv(c, 0.999)

    def test_matches_exhaustive_sweep(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            c = random_cohort(rng)
            target = float(rng.uniform(0.1, 0.9))
            best = None
            for thr in np.unique(c.scores):
                pred = c.scores >= thr
                tp = int((pred & (c.labels == 1)).sum())
                fp = int((pred & (c.labels == 0)).sum())
                if tp + fp == 0 or tp / (tp + fp) < target:
                    continue
                sens = tp / c.n_pos
                if best is None or sens > best[0] or (sens == best[0] and thr < best[1]):
                    best = (sens, float(thr))
            if best is None:
                with pytest.raises(UnachievablePPV):
                    sensitivity_at_ppv(c, target)
            else:
                assert sensitivity_at_ppv(c, target) == pytest.approx(best)


class TestPermutationTest:
    def test_equal_predictions_give_p_one(self):
        y = np.array([1, 1, 1, 0, 0])
        a = np.array([1, 0, 1, 0, 0])
        assert permutation_test_sensitivity(a, a, y, n=200) == 1.0

    def test_p_bounded_away_from_zero(self):
        rng = np.random.default_rng(7)
        y = np.ones(30, dtype=int)
        a = np.ones(30, dtype=int)
        b = np.zeros(30, dtype=int)
        p = permutation_test_sensitivity(a, b, y, n=100, rng=rng)
        assert 0.0 < p <= 1.0
        assert p >= 1.0 / 101.0

    def test_null_p_values_approximately_uniform(self):
        # large cohorts keep the sensitivity statistic's atoms small enough
        # for the permutation p to be near-uniform under the null
        rng = np.random.default_rng(8)
        pvals = []
        for _ in range(200):
            n = 4000
            y = (rng.random(n) < 0.5).astype(int)
            y[:2] = 1  # at least two positives
            a = (rng.random(n) < 0.5).astype(int)
            b = (rng.random(n) < 0.5).astype(int)
            pvals.append(permutation_test_sensitivity(a, b, y, n=400, rng=rng))
        ks = sps.kstest(pvals, "uniform").statistic
        assert ks < 0.08

    def test_detects_real_difference(self):
        rng = np.random.default_rng(9)
        y = np.ones(200, dtype=int)
        a = (rng.random(200) < 0.9).astype(int)
        b = (rng.random(200) < 0.5).astype(int)
        p = permutation_test_sensitivity(a, b, y, n=2000, rng=rng)
        assert p < 0.001


class TestKaplanMeier:
    def test_hand_example(self):
        records = [SurvivalRecord(1, True), SurvivalRecord(2, False),
                   SurvivalRecord(3, True), SurvivalRecord(4, False),
                   SurvivalRecord(5, False)]
        curve = km_estimate(records)
        np.testing.assert_array_equal(curve.event_times, [1, 3])
        assert curve.survival[0] == pytest.approx(0.8)
        assert curve.survival[1] == pytest.approx(0.8 * 2 / 3)
        np.testing.assert_array_equal(curve.at_risk, [5, 3])

    def test_no_events_survival_one(self):
        records = [SurvivalRecord(t, False) for t in (1, 2, 3)]
        curve = km_estimate(records)
        assert curve.final_survival == 1.0

    def test_all_die_distinct_times(self):
        records = [SurvivalRecord(t, True) for t in (1, 2, 3, 4)]
        curve = km_estimate(records)
        np.testing.assert_allclose(curve.survival, [0.75, 0.5, 0.25, 0.0])

    def test_non_increasing_on_random_cohorts(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            n = int(rng.integers(2, 60))
            records = [SurvivalRecord(float(rng.integers(1, 30)),
                                      bool(rng.random() < 0.6)) for _ in range(n)]
            if not any(r.event for r in records):
                records[0] = SurvivalRecord(records[0].time, True)
            curve = km_estimate(records)
            assert np.all(np.diff(curve.survival) <= 1e-12)
            assert np.all(curve.survival >= -1e-12) and np.all(curve.survival <= 1.0)
            assert np.all(np.diff(curve.at_risk) < 0)

    def test_empty_raises(self):
        with pytest.raises(EmptyInput):
            km_estimate([])


class TestThresholdMatching:
    def test_whole_cohort_low_risk_exact(self):
        rng = np.random.default_rng(11)
        scores = rng.uniform(0, 1, 30)
        records = [SurvivalRecord(float(rng.integers(1, 50)),
                                  bool(rng.random() < 0.5)) for _ in range(30)]
        overall = km_estimate(records).final_survival
        thr = threshold_for_group_survival(scores, records, overall, group="low")
        assert thr == pytest.approx(scores.max())

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            n = 25
            scores = rng.integers(0, 8, n) / 7.0
            records = [SurvivalRecord(float(rng.integers(1, 40)),
                                      bool(rng.random() < 0.5)) for _ in range(n)]
            target = float(rng.uniform(0.3, 1.0))
            best = None
            for thr in np.unique(scores):
                low = scores <= thr
                if not low.any():
                    continue
                final = km_estimate([r for r, m in zip(records, low) if m]).final_survival
                key = (abs(final - target), -int(low.sum()), float(thr))
                if best is None or key < best:
                    best = key
            got = threshold_for_group_survival(scores, records, target, group="low")
            assert got == best[2]

    def test_monotone_trend_over_targets(self):
        rng = np.random.default_rng(13)
        n = 400
        scores = rng.uniform(0, 1, n)
        # hazard increases with score: high scores die early
        records = [SurvivalRecord(max(1.0, float(rng.exponential(60 * (1.1 - s)))),
                                  bool(rng.random() < 0.9)) for s in scores]
        targets = [0.3, 0.5, 0.7, 0.9]
        thrs = [threshold_for_group_survival(scores, records, t, group="low")
                for t in targets]
        assert all(a >= b - 0.02 for a, b in zip(thrs, thrs[1:]))


class TestLogrank:
    def test_identical_groups(self):
        rng = np.random.default_rng(14)
        group = [SurvivalRecord(float(rng.integers(1, 30)), bool(rng.random() < 0.5))
                 for _ in range(40)]
        if not any(r.event for r in group):
            group[0] = SurvivalRecord(group[0].time, True)
        assert logrank_test(group, list(group)) == pytest.approx(1.0, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(15)
        g1 = [SurvivalRecord(float(rng.integers(1, 30)), True) for _ in range(25)]
        g2 = [SurvivalRecord(float(rng.integers(1, 50)), True) for _ in range(25)]
        assert logrank_test(g1, g2) == pytest.approx(logrank_test(g2, g1))

    def test_hazard_ratio_four_detected(self):
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            horizon = 2000.0
            def draw(hazard):
                t = rng.exponential(1.0 / hazard)
                return SurvivalRecord(min(t, horizon) if t < horizon else horizon,
                                      t < horizon)
            g_fast = [draw(5e-4) for _ in range(200)]
            g_slow = [draw(1.25e-4) for _ in range(200)]
            if logrank_test(g_fast, g_slow) < 0.01:
                hits += 1
        assert hits >= 10 * 0.95

    def test_empty_group(self):
        with pytest.raises(EmptyGroup):
            logrank_test([], [SurvivalRecord(1, True)])


class TestPearson:
    def test_identity_and_negation(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        assert pearson(x, x)[0] == pytest.approx(1.0)
        assert pearson(x, -x)[0] == pytest.approx(-1.0)

    def test_matches_definitional_formula(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=100)
        y = 0.3 * x + rng.normal(size=100)
        r, p = pearson(x, y)
        # definitional oracle computed with plain loops
        mx = sum(x) / len(x)
        my = sum(y) / len(y)
        num = sum((a - mx) * (b - my) for a, b in zip(x, y))
        den = math.sqrt(sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y))
        assert abs(r - num / den) < 1e-12
        r_sp, p_sp = sps.pearsonr(x, y)
        assert p == pytest.approx(p_sp, rel=1e-9)

    def test_zero_variance(self):
        with pytest.raises(ZeroVariance):
            pearson(np.ones(5), np.arange(5.0))


class TestROCPoints:
    def test_perfect_scorer_hits_corner(self):
        c = ScoredCohort(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0]))
        pts = roc_points(c)
        assert any(np.allclose(p, [0.0, 1.0]) for p in pts)

    def test_single_threshold_two_segments(self):
        c = ScoredCohort(np.array([0.5, 0.5, 0.5, 0.5]), np.array([1, 0, 1, 0]))
        pts = roc_points(c)
        np.testing.assert_allclose(pts, [[0, 0], [1, 1]])

    def test_trapezoid_area_equals_auc(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            c = random_cohort(rng)
            assert abs(trapezoid_area(roc_points(c)) - auc(c)) < 1e-12

    def test_endpoints(self):
        rng = np.random.default_rng(18)
        c = random_cohort(rng)
        pts = roc_points(c)
        np.testing.assert_allclose(pts[0], [0.0, 0.0])
        np.testing.assert_allclose(pts[-1], [1.0, 1.0])
