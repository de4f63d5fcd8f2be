"""Evaluation machinery: discrimination and calibration metrics, bootstrap
uncertainty, paired significance tests with Holm correction, correlation, and
the decision-centric analyses (precision@k, severity-stratified recall, and
the remediation-value simulation).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, rankdata

from .scoring import ScoredRanking


class MetricError(Exception):
    pass


class BootstrapError(MetricError):
    pass


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    ci_low: float | None = None
    ci_high: float | None = None
    n: int = 0
    skipped_resamples: int = 0


@dataclass
class ComparisonResult:
    method_a: str
    method_b: str
    delta: float
    ci: tuple[float, float]
    p_value: float
    test: str
    p_adjusted: float | None = None
    degenerate_variance: bool = False


@dataclass(frozen=True)
class ErvReport:
    budgets: tuple[int, ...]
    raw: dict[str, tuple[float, ...]]
    normalized: dict[str, tuple[float, ...]]
    lift: dict[str, tuple[float, ...]]
    random_expectation: tuple[float, ...]
    random_mc_mean: tuple[float, ...]
    random_mc_se: tuple[float, ...]

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["budget", "method", "erv_raw", "erv_normalized", "lift"])
        for name in self.raw:
            for i, budget in enumerate(self.budgets):
                writer.writerow([
                    budget, name,
                    repr(self.raw[name][i]),
                    repr(self.normalized[name][i]),
                    repr(self.lift[name][i]),
                ])
        return buf.getvalue().encode()


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=bool)
    if y.all() or not y.any():
        raise MetricError("metric needs both classes present")
    return y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC via midranks: fraction of (pos, neg) pairs ordered
    correctly, ties counting one half.
    """
    s = np.asarray(scores, dtype=float)
    y = _check_binary(labels)
    r = rankdata(s, method="average")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Non-interpolated step-sum AP; tied scores form a single threshold block."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s = s[order]
    y = y[order]
    # last index of each tie block
    block_end = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp = np.cumsum(y)[block_end]
    depth = block_end + 1.0
    precision = tp / depth
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def brier(probs, labels) -> float:
    p = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=float)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise MetricError("probabilities must lie in [0, 1]")
    return float(np.mean((p - y) ** 2))


def pearson_r(x, y) -> float:
    a = np.asarray(x, dtype=float)
    b = np.asarray(y, dtype=float)
    if len(a) != len(b) or len(a) < 2:
        raise MetricError("pearson_r needs two equal-length vectors of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    va = np.sum(da * da)
    vb = np.sum(db * db)
    if va == 0.0 or vb == 0.0:
        raise MetricError("correlation undefined for a constant input")
    return float(np.sum(da * db) / math.sqrt(va * vb))


def precision_at_k(ranking: ScoredRanking, labels: dict[str, bool], k: int) -> float:
    if not 1 <= k <= len(ranking.order):
        raise MetricError(f"k={k} outside [1, {len(ranking.order)}]")
    hits = sum(labels[cve] for cve in ranking.order[:k])
    return hits / k


def recall_at_k_stratified(
    ranking: ScoredRanking,
    labels: dict[str, bool],
    strata: dict[str, str],
    k: int,
) -> dict[str, float]:
    """Per-band recall of positives inside the top-k; bands without positives
    are omitted rather than reported as 0/0.
    """
    if not 1 <= k <= len(ranking.order):
        raise MetricError(f"k={k} outside [1, {len(ranking.order)}]")
    total: dict[str, int] = {}
    captured: dict[str, int] = {}
    top = set(ranking.order[:k])
    for cve in ranking.order:
        if labels[cve]:
            band = strata[cve]
            total[band] = total.get(band, 0) + 1
            if cve in top:
                captured[band] = captured.get(band, 0) + 1
    return {band: captured.get(band, 0) / n for band, n in total.items()}


ORACLE_METHOD_NAME = "oracle"


def erv_simulation(
    rankings: list[ScoredRanking],
    labels: dict[str, bool],
    severity_weights: dict[str, int],
    budgets: list[int],
    random_trials: int = 200,
    seed: int = 42,
) -> ErvReport:
    """Impact-weighted remediation value captured within each patching budget.

    Each CVE is worth label * severity_weight. Methods are normalized against
    the oracle ranking (descending value); the random baseline is the analytic
    expectation k * total / n, cross-checked by seeded Monte Carlo trials.
    """
    if not rankings:
        raise MetricError("erv_simulation needs at least one ranking")
    ids = rankings[0].order
    n = len(ids)
    values = {cve: (severity_weights[cve] if labels[cve] else 0.0) for cve in ids}
    total = sum(values.values())
    if total == 0:
        raise MetricError("ERV undefined: no record carries positive value")
    for k in budgets:
        if not 1 <= k <= n:
            raise MetricError(f"budget {k} outside [1, {n}]")

    oracle_order = sorted(ids, key=lambda c: (-values[c], c))

    def erv(order, k):
        return float(sum(values[c] for c in order[:k]))

    budgets_t = tuple(budgets)
    oracle_raw = tuple(erv(oracle_order, k) for k in budgets_t)
    raw = {ORACLE_METHOD_NAME: oracle_raw}
    for ranking in rankings:
        raw[ranking.method.value] = tuple(erv(ranking.order, k) for k in budgets_t)

    expectation = tuple(k * total / n for k in budgets_t)
    value_arr = np.array([values[c] for c in ids])
    mc = np.empty((random_trials, len(budgets_t)))
    for t in range(random_trials):
        rng = np.random.default_rng([seed, t])
        perm = rng.permutation(n)
        cum = np.cumsum(value_arr[perm])
        mc[t] = [cum[k - 1] for k in budgets_t]
    mc_mean = tuple(float(v) for v in mc.mean(axis=0))
    mc_se = tuple(
        float(v) for v in (mc.std(axis=0, ddof=1) / math.sqrt(random_trials) if random_trials > 1 else np.zeros(len(budgets_t)))
    )

    normalized = {
        name: tuple(r / o for r, o in zip(series, oracle_raw))
        for name, series in raw.items()
    }
    lift = {
        name: tuple(r / e for r, e in zip(series, expectation))
        for name, series in raw.items()
    }
    return ErvReport(
        budgets=budgets_t,
        raw=raw,
        normalized=normalized,
        lift=lift,
        random_expectation=expectation,
        random_mc_mean=mc_mean,
        random_mc_se=mc_se,
    )


_METRIC_FNS = {
    "roc_auc": roc_auc,
    "average_precision": average_precision,
    "brier": brier,
}


def bootstrap_ci(
    metric: str,
    scores,
    labels,
    resamples: int = 1000,
    seed: int = 42,
    stratified: bool = True,
) -> MetricValue:
    """Percentile bootstrap CI, resampling CVEs with replacement within each
    class. Each resample draws from its own substream of (seed, index), so
    results are deterministic and order-independent.
    """
    fn = _METRIC_FNS[metric]
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    point = fn(s, y)
    pos_idx = np.flatnonzero(y)
    neg_idx = np.flatnonzero(~y)
    stats = []
    skipped = 0
    for i in range(resamples):
        rng = np.random.default_rng([seed, i])
        if stratified:
            idx = np.concatenate([
                rng.choice(pos_idx, size=len(pos_idx), replace=True),
                rng.choice(neg_idx, size=len(neg_idx), replace=True),
            ])
        else:
            idx = rng.choice(len(y), size=len(y), replace=True)
        try:
            stats.append(fn(s[idx], y[idx]))
        except MetricError:
            skipped += 1
    if skipped > 0.1 * resamples:
        raise BootstrapError(f"{skipped}/{resamples} bootstrap resamples were degenerate")
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return MetricValue(
        name=metric,
        value=point,
        ci_low=float(min(lo, point)),
        ci_high=float(max(hi, point)),
        n=len(y),
        skipped_resamples=skipped,
    )


def _delong_components(scores, y):
    """Structural components: V10 per positive and V01 per negative, via midranks."""
    s = np.asarray(scores, dtype=float)
    pos = s[y]
    neg = s[~y]
    m, n = len(pos), len(neg)
    all_ranks = rankdata(np.concatenate([pos, neg]), method="average")
    pos_ranks = rankdata(pos, method="average")
    neg_ranks = rankdata(neg, method="average")
    v10 = (all_ranks[:m] - pos_ranks) / n
    v01 = 1.0 - (all_ranks[m:] - neg_ranks) / m
    return v10, v01


Z_95 = 1.96


def delong_test(scores_a, scores_b, labels) -> ComparisonResult:
    """DeLong test for the difference of two correlated ROC-AUCs on paired data."""
    y = _check_binary(labels)
    if len(np.asarray(scores_a)) != len(y) or len(np.asarray(scores_b)) != len(y):
        raise MetricError("delong_test needs scores paired with labels")
    auc_a = roc_auc(scores_a, y)
    auc_b = roc_auc(scores_b, y)
    delta = auc_a - auc_b
    v10_a, v01_a = _delong_components(scores_a, y)
    v10_b, v01_b = _delong_components(scores_b, y)
    m, n = len(v10_a), len(v01_a)
    s10 = np.cov(np.vstack([v10_a, v10_b]), ddof=1)
    s01 = np.cov(np.vstack([v01_a, v01_b]), ddof=1)
    var = (s10[0, 0] - 2 * s10[0, 1] + s10[1, 1]) / m + (s01[0, 0] - 2 * s01[0, 1] + s01[1, 1]) / n
    if not math.isfinite(var) or var <= 0.0:
        if delta == 0.0:
            return ComparisonResult(
                method_a="a", method_b="b", delta=0.0, ci=(0.0, 0.0),
                p_value=1.0, test="delong",
            )
        return ComparisonResult(
            method_a="a", method_b="b", delta=delta, ci=(delta, delta),
            p_value=0.0, test="delong", degenerate_variance=True,
        )
    se = math.sqrt(var)
    z = delta / se
    p = float(2.0 * norm.sf(abs(z)))
    return ComparisonResult(
        method_a="a", method_b="b", delta=delta,
        ci=(delta - Z_95 * se, delta + Z_95 * se),
        p_value=p, test="delong",
    )


def paired_bootstrap_test(
    metric: str,
    scores_a,
    scores_b,
    labels,
    resamples: int = 1000,
    seed: int = 42,
) -> ComparisonResult:
    """Paired stratified bootstrap: both methods see the same resampled index
    set; CI from Δ percentiles, two-sided p from the Δ* sign fractions,
    clamped below at 2/resamples.
    """
    fn = _METRIC_FNS[metric]
    sa = np.asarray(scores_a, dtype=float)
    sb = np.asarray(scores_b, dtype=float)
    y = _check_binary(labels)
    delta = fn(sa, y) - fn(sb, y)
    pos_idx = np.flatnonzero(y)
    neg_idx = np.flatnonzero(~y)
    deltas = []
    skipped = 0
    for i in range(resamples):
        rng = np.random.default_rng([seed, i])
        idx = np.concatenate([
            rng.choice(pos_idx, size=len(pos_idx), replace=True),
            rng.choice(neg_idx, size=len(neg_idx), replace=True),
        ])
        try:
            deltas.append(fn(sa[idx], y[idx]) - fn(sb[idx], y[idx]))
        except MetricError:
            skipped += 1
    if skipped > 0.1 * resamples:
        raise BootstrapError(f"{skipped}/{resamples} bootstrap resamples were degenerate")
    deltas = np.array(deltas)
    lo, hi = np.percentile(deltas, [2.5, 97.5])
    frac_le = float(np.mean(deltas <= 0.0))
    frac_ge = float(np.mean(deltas >= 0.0))
    p = 2.0 * min(frac_le, frac_ge)
    p = min(max(p, 2.0 / resamples), 1.0)
    return ComparisonResult(
        method_a="a", method_b="b", delta=float(delta),
        ci=(float(lo), float(hi)), p_value=p, test="paired_bootstrap",
    )


def holm_adjust(p_values) -> list[float]:
    """Holm step-down adjustment, mapped back to the input order."""
    p = np.asarray(p_values, dtype=float)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise MetricError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 0.0
    for rank_i, idx in enumerate(order):
        running = max(running, (m - rank_i) * p[idx])
        adjusted[idx] = min(running, 1.0)
    return [float(v) for v in adjusted]


@dataclass
class EvaluationReport:
    """Full evaluation output for one method comparison run, serializable."""

    metrics: dict[str, dict[str, dict]]            # method -> metric name -> MetricValue dict
    comparisons: list[dict]                        # ComparisonResult dicts with adjusted p
    correlations: dict[str, dict[str, float]]
    n: int
    n_positive: int

    def to_json(self) -> bytes:
        doc = {
            "n": self.n,
            "n_positive": self.n_positive,
            "metrics": self.metrics,
            "comparisons": self.comparisons,
            "correlations": self.correlations,
        }
        return json.dumps(doc, indent=1, sort_keys=True).encode()

    @staticmethod
    def from_json(data: bytes) -> "EvaluationReport":
        doc = json.loads(data)
        return EvaluationReport(
            metrics=doc["metrics"],
            comparisons=doc["comparisons"],
            correlations=doc["correlations"],
            n=doc["n"],
            n_positive=doc["n_positive"],
        )


def metric_value_to_dict(mv: MetricValue) -> dict:
    return {
        "name": mv.name,
        "value": mv.value,
        "ci_low": mv.ci_low,
        "ci_high": mv.ci_high,
        "n": mv.n,
    }


def comparison_to_dict(cr: ComparisonResult) -> dict:
    return {
        "method_a": cr.method_a,
        "method_b": cr.method_b,
        "delta": cr.delta,
        "ci": list(cr.ci),
        "p_value": cr.p_value,
        "p_adjusted": cr.p_adjusted,
        "test": cr.test,
        "degenerate_variance": cr.degenerate_variance,
    }
