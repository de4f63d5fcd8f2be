"""Cost-sensitive single-feature logistic regression and nested cross-validation.

The model maps a composite risk score to an exploitation probability via
sigmoid(b0 + b1 * score). Training minimizes the class-weighted negative
log-likelihood with an L2 penalty on the slope only, by damped Newton steps
from a zero start; two parameters make this deterministic and fast.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import Dataset, compute_cwe_weights
from .scoring import Method, score_records


class LearnerError(Exception):
    pass


@dataclass(frozen=True)
class LogisticModel:
    beta0: float
    beta1: float
    c: float
    converged: bool
    iterations: int

    def to_json(self, **extra) -> bytes:
        doc = {
            "beta0": self.beta0,
            "beta1": self.beta1,
            "c": self.c,
            "converged": self.converged,
            "iterations": self.iterations,
        }
        doc.update(extra)
        return json.dumps(doc, indent=1, sort_keys=True).encode()

    @staticmethod
    def from_json(data: bytes) -> "LogisticModel":
        doc = json.loads(data)
        return LogisticModel(
            beta0=doc["beta0"],
            beta1=doc["beta1"],
            c=doc["c"],
            converged=doc["converged"],
            iterations=doc["iterations"],
        )


@dataclass(frozen=True)
class ClassWeights:
    w_pos: float
    w_neg: float


@dataclass(frozen=True)
class CvConfig:
    outer_folds: int = 5
    inner_folds: int = 3
    seed: int = 42
    c_grid: tuple[float, ...] = (0.1, 1.0, 10.0)
    max_iter: int = 2000
    tolerance: float = 1e-8


@dataclass(frozen=True)
class FoldResult:
    fold: int
    selected_c: float
    roc_auc: float
    auprc: float


@dataclass(frozen=True)
class CvReport:
    folds: tuple[FoldResult, ...]
    mean_roc_auc: float
    std_roc_auc: float
    mean_auprc: float
    std_auprc: float

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fold", "selected_c", "roc_auc", "auprc"])
        for f in self.folds:
            writer.writerow([f.fold, f.selected_c, repr(f.roc_auc), repr(f.auprc)])
        writer.writerow(["mean", "", repr(self.mean_roc_auc), repr(self.mean_auprc)])
        writer.writerow(["std", "", repr(self.std_roc_auc), repr(self.std_auprc)])
        return buf.getvalue().encode()


def class_weights(labels) -> ClassWeights:
    """Balanced scheme: w_c = n_total / (2 * n_c)."""
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise LearnerError("class weights need both classes present")
    n = len(y)
    return ClassWeights(w_pos=n / (2.0 * n_pos), w_neg=n / (2.0 * n_neg))


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def penalized_nll(params, scores, labels, weights: ClassWeights, c: float):
    """Objective and gradient of the weighted NLL + slope L2 penalty.

    The intercept is not penalized. Returns (value, gradient ndarray).
    """
    b0, b1 = params
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    w = np.where(y, weights.w_pos, weights.w_neg)
    z = b0 + b1 * s
    # log(1 + exp(-z)) for y=1, log(1 + exp(z)) for y=0, computed stably
    loss = np.where(y, np.logaddexp(0.0, -z), np.logaddexp(0.0, z))
    value = float(np.sum(w * loss)) + b1 * b1 / (2.0 * c)
    p = sigmoid(z)
    resid = w * (p - y)
    grad = np.array([np.sum(resid), np.sum(resid * s) + b1 / c])
    return value, grad


def fit_logistic(
    scores,
    labels,
    weights: ClassWeights,
    c: float = 1.0,
    max_iter: int = 2000,
    tolerance: float = 1e-8,
) -> LogisticModel:
    """Damped Newton from a zero start; converged when max|grad| <= tolerance."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if len(s) != len(y):
        raise LearnerError("scores and labels must have equal length")
    if not np.all(np.isfinite(s)):
        raise LearnerError("scores must be finite")
    if y.all() or not y.any():
        raise LearnerError("fit needs both classes present")

    w = np.where(y, weights.w_pos, weights.w_neg)
    params = np.zeros(2)
    value, grad = penalized_nll(params, s, y, weights, c)
    iterations = 0
    converged = np.max(np.abs(grad)) <= tolerance
    while not converged and iterations < max_iter:
        z = params[0] + params[1] * s
        p = sigmoid(z)
        d = w * p * (1.0 - p)
        h00 = np.sum(d)
        h01 = np.sum(d * s)
        h11 = np.sum(d * s * s) + 1.0 / c
        hess = np.array([[h00, h01], [h01, h11]])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad / max(h00, h11, 1.0)
        # halve the step until the objective stops increasing
        t = 1.0
        improved = False
        for _ in range(40):
            new_params = params - t * step
            new_value, new_grad = penalized_nll(new_params, s, y, weights, c)
            if new_value <= value:
                improved = True
                break
            t *= 0.5
        if not improved:
            break  # stalled at float precision; converged reflects the gradient
        stalled = value - new_value <= 1e-14 * (1.0 + abs(value))
        params, value, grad = new_params, new_value, new_grad
        iterations += 1
        converged = np.max(np.abs(grad)) <= tolerance
        if stalled:
            break
    return LogisticModel(
        beta0=float(params[0]),
        beta1=float(params[1]),
        c=c,
        converged=bool(converged),
        iterations=iterations,
    )


def predict_proba(model: LogisticModel, score):
    """Exploitation probability sigmoid(b0 + b1 * score); overflow-safe."""
    s = np.asarray(score, dtype=float)
    if not np.all(np.isfinite(s)):
        raise LearnerError("score must be finite")
    out = sigmoid(model.beta0 + model.beta1 * s)
    return float(out) if np.isscalar(score) or out.ndim == 0 else out


def stratified_fold_ids(labels, k: int, rng: np.random.Generator) -> np.ndarray:
    """Deterministic stratified fold assignment: shuffle each class, deal round-robin."""
    y = np.asarray(labels, dtype=bool)
    folds = np.empty(len(y), dtype=int)
    for cls in (True, False):
        idx = np.flatnonzero(y == cls)
        perm = rng.permutation(len(idx))
        folds[idx[perm]] = np.arange(len(idx)) % k
    return folds


def nested_cv(train: Dataset, method: Method, config: CvConfig = CvConfig()) -> CvReport:
    """Nested stratified CV: inner folds pick C by mean ROC-AUC, outer folds
    estimate performance. The CWE prevalence table is recomputed from each
    outer-train portion so no fold sees statistics from its own test data.
    """
    from .evalsuite import average_precision, roc_auc  # local import avoids a cycle

    labels = train.labels
    n_pos = int(labels.sum())
    if n_pos < config.outer_folds or (len(labels) - n_pos) < config.outer_folds:
        raise LearnerError(
            f"need at least {config.outer_folds} records per class to stratify "
            f"(have {n_pos} positives, {len(labels) - n_pos} negatives)"
        )

    records = np.array(train.records, dtype=object)
    outer_ids = stratified_fold_ids(labels, config.outer_folds, np.random.default_rng(config.seed))
    folds: list[FoldResult] = []
    for f in range(config.outer_folds):
        test_mask = outer_ids == f
        fit_recs = records[~test_mask]
        eval_recs = records[test_mask]
        fit_labels = labels[~test_mask]
        eval_labels = labels[test_mask]

        fit_ds = Dataset(records=tuple(fit_recs), provenance={}, created_at=train.created_at)
        table = compute_cwe_weights(fit_ds) if method.requires_table else None
        fit_scores = np.array([s for s in score_records(fit_recs, method, table).values()])
        eval_scores = np.array([s for s in score_records(eval_recs, method, table).values()])

        inner_rng = np.random.default_rng([config.seed, f])
        inner_ids = stratified_fold_ids(fit_labels, config.inner_folds, inner_rng)
        best_c = None
        best_mean = -np.inf
        for c in config.c_grid:
            aucs = []
            for g in range(config.inner_folds):
                val_mask = inner_ids == g
                if fit_labels[val_mask].all() or not fit_labels[val_mask].any():
                    continue
                weights = class_weights(fit_labels[~val_mask])
                model = fit_logistic(
                    fit_scores[~val_mask], fit_labels[~val_mask], weights,
                    c=c, max_iter=config.max_iter, tolerance=config.tolerance,
                )
                probs = predict_proba(model, fit_scores[val_mask])
                aucs.append(roc_auc(probs, fit_labels[val_mask]))
            mean_auc = float(np.mean(aucs)) if aucs else -np.inf
            if mean_auc > best_mean:  # ties keep the smaller C (grid order)
                best_mean = mean_auc
                best_c = c

        weights = class_weights(fit_labels)
        model = fit_logistic(
            fit_scores, fit_labels, weights,
            c=best_c, max_iter=config.max_iter, tolerance=config.tolerance,
        )
        probs = predict_proba(model, eval_scores)
        folds.append(
            FoldResult(
                fold=f,
                selected_c=best_c,
                roc_auc=roc_auc(probs, eval_labels),
                auprc=average_precision(probs, eval_labels),
            )
        )

    rocs = np.array([f.roc_auc for f in folds])
    aps = np.array([f.auprc for f in folds])
    return CvReport(
        folds=tuple(folds),
        mean_roc_auc=float(rocs.mean()),
        std_roc_auc=float(rocs.std(ddof=1)) if len(rocs) > 1 else 0.0,
        mean_auprc=float(aps.mean()),
        std_auprc=float(aps.std(ddof=1)) if len(aps) > 1 else 0.0,
    )
