"""ROC/AUC statistics, survival analysis, and the associated hypothesis tests.

AUC is the pairwise concordance probability (ties count 1/2), confidence
intervals use the binormal-free standard-error formula of Hanley and McNeil,
AUC comparisons use a z statistic with bootstrap covariance when paired,
sensitivity comparisons use a per-subject swap permutation test, and survival
curves use the product-limit estimator with a log-rank two-group test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .errors import (
    DegenerateCounts,
    EmptyGroup,
    EmptyInput,
    LengthMismatch,
    SingleClass,
    UnachievablePPV,
    ZeroVariance,
)


@dataclass(frozen=True)
class ScoredCohort:
    """Parallel score/label arrays; labels are 0/1."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        y = np.asarray(self.labels, dtype=int)
        if s.shape != y.shape or s.ndim != 1:
            raise LengthMismatch("scores and labels must be equal-length 1D arrays")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)

    @property
    def n_pos(self) -> int:
        return int((self.labels == 1).sum())

    @property
    def n_neg(self) -> int:
        return int((self.labels == 0).sum())

    def require_both_classes(self):
        if self.n_pos == 0 or self.n_neg == 0:
            raise SingleClass(f"need both classes, got {self.n_pos} pos / {self.n_neg} neg")


@dataclass(frozen=True)
class AUCResult:
    auc: float
    se: float
    ci_low: float
    ci_high: float
    n_pos: int
    n_neg: int


@dataclass(frozen=True)
class SurvivalRecord:
    time: float
    event: bool

    def __post_init__(self):
        if self.time <= 0:
            raise ValueError(f"survival time must be positive, got {self.time}")


@dataclass(frozen=True)
class KMCurve:
    event_times: np.ndarray       # ascending distinct event times
    survival: np.ndarray          # S(t) just after each event time
    at_risk: np.ndarray           # risk-set size just before each event time

    @property
    def final_survival(self) -> float:
        return float(self.survival[-1]) if len(self.survival) else 1.0


def auc(cohort: ScoredCohort) -> float:
    """Concordance AUC: P(score_pos > score_neg) + 0.5 P(equal).

    Computed from rank sums (equivalent to the O(n^2) pair average, ties
    handled by midranks).
    """
    cohort.require_both_classes()
    ranks = sps.rankdata(cohort.scores)
    n_pos, n_neg = cohort.n_pos, cohort.n_neg
    pos_rank_sum = ranks[cohort.labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def hanley_mcneil_ci(auc_value: float, n_pos: int, n_neg: int,
                     level: float = 0.95) -> AUCResult:
    """Standard error and normal CI for an AUC from class counts alone.

    SE^2 = (A(1-A) + (n_pos-1)(Q1-A^2) + (n_neg-1)(Q2-A^2)) / (n_pos n_neg)
    with Q1 = A/(2-A) and Q2 = 2A^2/(1+A). The CI is clamped to [0, 1].
    """
    if n_pos < 2 or n_neg < 2:
        raise DegenerateCounts(f"need >= 2 per class, got {n_pos}/{n_neg}")
    a = float(auc_value)
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"AUC must be in [0, 1], got {a}")
    q1 = a / (2.0 - a)
    q2 = 2.0 * a * a / (1.0 + a)
    var = (a * (1 - a) + (n_pos - 1) * (q1 - a * a) + (n_neg - 1) * (q2 - a * a))
    var /= n_pos * n_neg
    se = math.sqrt(max(var, 0.0))
    z = sps.norm.ppf(0.5 + level / 2.0)
    return AUCResult(
        auc=a, se=se,
        ci_low=max(0.0, a - z * se),
        ci_high=min(1.0, a + z * se),
        n_pos=n_pos, n_neg=n_neg,
    )


def _bootstrap_auc_cov(a: ScoredCohort, b: ScoredCohort, n_boot: int,
                       rng: np.random.Generator) -> float:
    """Covariance of the two AUCs under stratified subject resampling."""
    pos_idx = np.flatnonzero(a.labels == 1)
    neg_idx = np.flatnonzero(a.labels == 0)
    aucs_a = np.empty(n_boot)
    aucs_b = np.empty(n_boot)
    for i in range(n_boot):
        p = rng.choice(pos_idx, size=len(pos_idx), replace=True)
        n = rng.choice(neg_idx, size=len(neg_idx), replace=True)
        idx = np.concatenate([p, n])
        labels = a.labels[idx]
        aucs_a[i] = auc(ScoredCohort(a.scores[idx], labels))
        aucs_b[i] = auc(ScoredCohort(b.scores[idx], labels))
    return float(np.cov(aucs_a, aucs_b)[0, 1])


def auc_z_test(cohort_a: ScoredCohort, cohort_b: ScoredCohort, paired: bool,
               n_boot: int = 1000, rng: np.random.Generator | None = None) -> float:
    """Two-sided z test for a difference of two AUCs.

    z = (A1 - A2) / sqrt(SE1^2 + SE2^2 - 2 Cov); the covariance is zero for
    independent cohorts and estimated by a paired subject-level bootstrap
    otherwise.
    """
    a1 = auc(cohort_a)
    a2 = auc(cohort_b)
    if paired and len(cohort_a.scores) != len(cohort_b.scores):
        raise LengthMismatch("paired comparison needs the same subjects")
    se1 = hanley_mcneil_ci(a1, cohort_a.n_pos, cohort_a.n_neg).se
    se2 = hanley_mcneil_ci(a2, cohort_b.n_pos, cohort_b.n_neg).se
    cov = 0.0
    if paired:
        if rng is None:
            rng = np.random.default_rng(0)
        cov = _bootstrap_auc_cov(cohort_a, cohort_b, n_boot, rng)
    if a1 == a2:
        return 1.0
    var = se1 * se1 + se2 * se2 - 2.0 * cov
    if var <= 0:
        return 0.0
    z = (a1 - a2) / math.sqrt(var)
    return float(2.0 * sps.norm.sf(abs(z)))


def sensitivity_at_ppv(cohort: ScoredCohort, target_ppv: float) -> tuple[float, float]:
    """Best sensitivity among thresholds whose PPV reaches `target_ppv`.

    Prediction is positive when score >= threshold; candidate thresholds are
    the distinct score values. Ties on sensitivity resolve to the lowest
    threshold. A cohort without positives cannot reach any positive PPV.
    """
    if cohort.n_pos == 0:
        raise UnachievablePPV("no positive subjects; PPV target unreachable")
    order = np.argsort(cohort.scores, kind="stable")[::-1]
    sorted_scores = cohort.scores[order]
    sorted_labels = cohort.labels[order]
    tp = np.cumsum(sorted_labels == 1)
    fp = np.cumsum(sorted_labels == 0)
    n_pos = cohort.n_pos
    # last index of each threshold block (score >= threshold takes the block)
    distinct = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    best = None
    for i in distinct:
        ppv = tp[i] / (tp[i] + fp[i])
        if ppv >= target_ppv:
            sens = tp[i] / n_pos
            thr = sorted_scores[i]
            if best is None or sens > best[0] or (sens == best[0] and thr < best[1]):
                best = (float(sens), float(thr))
    if best is None:
        raise UnachievablePPV(f"no threshold achieves PPV >= {target_ppv}")
    return best


def permutation_test_sensitivity(preds_a: np.ndarray, preds_b: np.ndarray,
                                 labels: np.ndarray, n: int = 10000,
                                 rng: np.random.Generator | None = None) -> float:
    """Two-sided permutation p for a paired difference in sensitivity.

    `preds_a` and `preds_b` are binary predictions at fixed operating points.
    The null swaps the two methods' predictions independently per subject;
    p = (1 + #{|T_perm| >= |T_obs|}) / (n + 1).
    """
    a = np.asarray(preds_a, dtype=int)
    b = np.asarray(preds_b, dtype=int)
    y = np.asarray(labels, dtype=int)
    if not (a.shape == b.shape == y.shape):
        raise LengthMismatch("predictions and labels must have equal length")
    pos = y == 1
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise SingleClass("no positive subjects; sensitivity undefined")
    if rng is None:
        rng = np.random.default_rng(0)
    t_obs = (a[pos].sum() - b[pos].sum()) / n_pos
    # swapping a subject with a_i == b_i leaves the statistic unchanged, so
    # the null reduces to random sign flips on the disagreeing positives
    diffs = (a[pos] - b[pos]).astype(np.int64)
    diffs = diffs[diffs != 0]
    if diffs.size == 0:
        return 1.0
    signs = rng.integers(0, 2, size=(n, diffs.size)).astype(np.int64) * 2 - 1
    t_perm = (signs @ diffs) / n_pos
    exceed = int((np.abs(t_perm) >= abs(t_obs) - 1e-12).sum())
    return float((1 + exceed) / (n + 1))


def km_estimate(records: list[SurvivalRecord]) -> KMCurve:
    """Product-limit survival curve; censored subjects leave the risk set."""
    if not records:
        raise EmptyInput("no survival records")
    times = np.array([r.time for r in records], dtype=float)
    events = np.array([r.event for r in records], dtype=bool)
    event_times = np.unique(times[events])
    survival = np.empty(len(event_times))
    at_risk = np.empty(len(event_times), dtype=int)
    s = 1.0
    for i, t in enumerate(event_times):
        n_i = int((times >= t).sum())
        d_i = int((events & (times == t)).sum())
        s *= 1.0 - d_i / n_i
        survival[i] = s
        at_risk[i] = n_i
    return KMCurve(event_times, survival, at_risk)


def threshold_for_group_survival(scores: np.ndarray, records: list[SurvivalRecord],
                                 target_survival: float, group: str = "low") -> float:
    """Score threshold making one risk group's final survival match a target.

    The low-risk group is scores <= threshold, the high-risk group is
    scores > threshold. Candidate thresholds are the distinct score values;
    among equally close candidates the one keeping more subjects in the
    low-risk group wins.
    """
    if group not in ("low", "high"):
        raise ValueError(f"group must be 'low' or 'high', got {group!r}")
    scores = np.asarray(scores, dtype=float)
    if len(scores) != len(records):
        raise LengthMismatch("scores and records must align")
    if len(records) == 0:
        raise EmptyInput("no survival records")
    recs = np.array(records, dtype=object)
    best = None  # (distance, -low_count, threshold)
    for thr in np.unique(scores):
        low = scores <= thr
        members = low if group == "low" else ~low
        if not members.any():
            continue
        final = km_estimate(list(recs[members])).final_survival
        key = (abs(final - target_survival), -int(low.sum()), float(thr))
        if best is None or key < best:
            best = key
    if best is None:
        raise EmptyInput("no threshold produces a nonempty group")
    return best[2]


def logrank_test(group1: list[SurvivalRecord], group2: list[SurvivalRecord]) -> float:
    """Two-sided log-rank p value (chi-square, 1 dof)."""
    if not group1 or not group2:
        raise EmptyGroup("both groups must be nonempty")
    t1 = np.array([r.time for r in group1]); e1 = np.array([r.event for r in group1], dtype=bool)
    t2 = np.array([r.time for r in group2]); e2 = np.array([r.event for r in group2], dtype=bool)
    all_event_times = np.unique(np.concatenate([t1[e1], t2[e2]]))
    if len(all_event_times) == 0:
        return 1.0
    o_minus_e = 0.0
    var = 0.0
    for t in all_event_times:
        n1 = int((t1 >= t).sum())
        n2 = int((t2 >= t).sum())
        d1 = int((e1 & (t1 == t)).sum())
        d2 = int((e2 & (t2 == t)).sum())
        n = n1 + n2
        d = d1 + d2
        if n < 2 or n1 == 0:
            continue
        e1_t = d * n1 / n
        o_minus_e += d1 - e1_t
        var += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1) if n > 1 else 0.0
    if var <= 0:
        return 1.0
    chi2 = o_minus_e * o_minus_e / var
    return float(sps.chi2.sf(chi2, df=1))


def pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Product-moment correlation with a t-distribution p value (n-2 dof)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch("x and y must be equal-length 1D arrays")
    n = len(x)
    if n < 3:
        raise EmptyInput(f"need >= 3 pairs, got {n}")
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if denom == 0:
        raise ZeroVariance("an input has zero variance")
    r = float((dx * dy).sum() / denom)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = float(2.0 * sps.t.sf(abs(t), df=n - 2))
    return r, p


def roc_points(cohort: ScoredCohort) -> np.ndarray:
    """ROC polyline as an array of (fpr, tpr) rows from (0,0) to (1,1).

    One point per distinct threshold (prediction positive when score >=
    threshold); the trapezoid area under this polyline equals auc().
    """
    cohort.require_both_classes()
    order = np.argsort(cohort.scores, kind="stable")[::-1]
    sorted_scores = cohort.scores[order]
    sorted_labels = cohort.labels[order]
    tp = np.cumsum(sorted_labels == 1)
    fp = np.cumsum(sorted_labels == 0)
    distinct = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    tpr = tp[distinct] / cohort.n_pos
    fpr = fp[distinct] / cohort.n_neg
    pts = np.vstack([
        np.r_[0.0, fpr],
        np.r_[0.0, tpr],
    ]).T
    if pts[-1, 0] != 1.0 or pts[-1, 1] != 1.0:
        pts = np.vstack([pts, [1.0, 1.0]])
    return pts


def trapezoid_area(points: np.ndarray) -> float:
    x = points[:, 0]
    y = points[:, 1]
    return float(np.trapezoid(y, x))
