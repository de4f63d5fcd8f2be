import numpy as np
import pytest

from riskrank.corpus import Dataset, VulnRecord
from riskrank.evalsuite import roc_auc
from riskrank.learner import (
    ClassWeights,
    CvConfig,
    LearnerError,
    class_weights,
    fit_logistic,
    nested_cv,
    penalized_nll,
    predict_proba,
    stratified_fold_ids,
)
from riskrank.scoring import Method


class TestClassWeights:
    def test_balanced_formula(self):
        w = class_weights([True] + [False] * 99)
        assert w.w_pos == 50.0
        assert w.w_neg == pytest.approx(100 / 198)

    def test_even_classes(self):
        w = class_weights([True] * 5 + [False] * 5)
        assert (w.w_pos, w.w_neg) == (1.0, 1.0)

    def test_paper_prevalence(self):
        labels = [True] * 1400 + [False] * (280694 - 1400)
        w = class_weights(labels)
        assert w.w_pos == pytest.approx(100.25, abs=0.01)

    def test_single_class_rejected(self):
        with pytest.raises(LearnerError):
            class_weights([True, True])


class TestFitLogistic:
    def test_symmetric_data_zero_intercept(self):
        model = fit_logistic([-1.0, 1.0], [False, True], ClassWeights(1.0, 1.0), c=1.0)
        assert model.converged
        assert abs(model.beta0) <= 1e-6

    def test_no_signal_zero_slope(self):
        scores = [0.0, 1.0, 2.0, 0.0, 1.0, 2.0]
        labels = [True, True, True, False, False, False]
        model = fit_logistic(scores, labels, ClassWeights(1.0, 1.0), c=1.0)
        assert abs(model.beta1) <= 1e-6

    def test_rank_equivalence_with_raw_score(self):
        rng = np.random.default_rng(3)
        scores = np.concatenate([rng.normal(0, 1, 150), rng.normal(1.5, 1, 50)])
        labels = np.arange(200) >= 150
        model = fit_logistic(scores, labels, class_weights(labels), c=1.0)
        assert model.beta1 > 0
        probs = predict_proba(model, scores)
        assert roc_auc(probs, labels) == roc_auc(scores, labels)

    def test_nan_scores_rejected(self):
        with pytest.raises(LearnerError):
            fit_logistic([0.0, float("nan")], [False, True], ClassWeights(1.0, 1.0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        scores = rng.normal(size=60)
        labels = rng.random(60) < 0.3
        if not labels.any():
            labels[0] = True
        weights = ClassWeights(w_pos=4.0, w_neg=0.6)
        h = 1e-6
        for _ in range(20):
            params = rng.normal(scale=2.0, size=2)
            _, grad = penalized_nll(params, scores, labels, weights, c=0.7)
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                up, _ = penalized_nll(params + e, scores, labels, weights, c=0.7)
                dn, _ = penalized_nll(params - e, scores, labels, weights, c=0.7)
                fd = (up - dn) / (2 * h)
                assert abs(grad[j] - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_weight_scaling_preserves_ordering(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=100)
        labels = scores + rng.normal(scale=0.8, size=100) > 0.5
        base = fit_logistic(scores, labels, ClassWeights(2.0, 0.5), c=1.0)
        scaled = fit_logistic(scores, labels, ClassWeights(6.0, 1.5), c=1.0)
        order_a = np.argsort(predict_proba(base, scores))
        order_b = np.argsort(predict_proba(scaled, scores))
        assert list(order_a) == list(order_b)

    def test_determinism(self):
        rng = np.random.default_rng(9)
        scores = rng.normal(size=80)
        labels = scores > 0.3
        a = fit_logistic(scores, labels, class_weights(labels), c=10.0)
        b = fit_logistic(scores, labels, class_weights(labels), c=10.0)
        assert a == b


class TestPredictProba:
    def test_null_model(self):
        from riskrank.learner import LogisticModel
        model = LogisticModel(beta0=0.0, beta1=0.0, c=1.0, converged=True, iterations=0)
        assert predict_proba(model, 123.0) == 0.5

    def test_sigmoid_zero(self):
        from riskrank.learner import LogisticModel
        model = LogisticModel(beta0=0.0, beta1=1.0, c=1.0, converged=True, iterations=0)
        assert predict_proba(model, 0.0) == 0.5

    def test_monotone_approach_to_limits(self):
        from riskrank.learner import LogisticModel
        model = LogisticModel(beta0=0.0, beta1=1.0, c=1.0, converged=True, iterations=0)
        values = [predict_proba(model, z) for z in (1.0, 10.0, 100.0, 1000.0)]
        assert values == sorted(values)
        assert values[-1] <= 1.0
        assert predict_proba(model, -1000.0) >= 0.0


def _planted_dataset(n=400, n_pos=20, seed=0, signal=True):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        pos = i < n_pos
        if signal:
            epss = 0.6 + 0.4 * rng.random() if pos else float(rng.beta(0.5, 8))
        else:
            epss = float(rng.random())
        records.append(VulnRecord(
            cve_id=f"CVE-2020-{i:05d}", published=None,
            severity_band=["low", "medium", "high", "critical"][int(rng.integers(4))],
            base_score=None, cwe_ids=("CWE-79",) if rng.random() < 0.5 else (),
            epss=epss, kev=pos,
        ))
    return Dataset(records=tuple(records), provenance={}, created_at="")


class TestNestedCv:
    def test_planted_signal_all_folds_strong(self):
        report = nested_cv(_planted_dataset(), Method.epss, CvConfig(seed=42))
        assert all(f.roc_auc > 0.9 for f in report.folds)
        assert all(f.selected_c in (0.1, 1.0, 10.0) for f in report.folds)

    def test_shuffled_labels_chance_level(self):
        report = nested_cv(_planted_dataset(signal=False, seed=1), Method.epss, CvConfig(seed=42))
        assert abs(report.mean_roc_auc - 0.5) <= 0.1

    def test_determinism(self):
        ds = _planted_dataset()
        a = nested_cv(ds, Method.kri, CvConfig(seed=42))
        b = nested_cv(ds, Method.kri, CvConfig(seed=42))
        assert a == b

    def test_too_few_positives(self):
        with pytest.raises(LearnerError):
            nested_cv(_planted_dataset(n=50, n_pos=3), Method.epss, CvConfig())

    def test_csv_shape(self):
        report = nested_cv(_planted_dataset(), Method.epss, CvConfig(seed=42))
        lines = report.to_csv().decode().splitlines()
        assert lines[0] == "fold,selected_c,roc_auc,auprc"
        assert len(lines) == 1 + 5 + 2  # header, five folds, mean and std rows


def test_stratified_fold_ids_balance():
    labels = np.array([True] * 10 + [False] * 90)
    folds = stratified_fold_ids(labels, 5, np.random.default_rng(42))
    for f in range(5):
        assert labels[folds == f].sum() == 2
        assert (folds == f).sum() == 20
