"""riskrank: vulnerability prioritization with composite risk scoring and a
decision-centric evaluation harness.
"""

from .corpus import (
    CwePrevalenceTable,
    Dataset,
    SplitSpec,
    VulnRecord,
    compute_cwe_weights,
    cwe_weight_for,
    merge,
    stratified_split,
)
from .feeds import (
    CveEntry,
    EpssEntry,
    EpssSnapshot,
    FeedSnapshot,
    KevEntry,
    fetch_snapshot,
    parse_cve_records,
    parse_epss_snapshot,
    parse_kev_catalog,
)
from .learner import (
    ClassWeights,
    CvConfig,
    CvReport,
    LogisticModel,
    class_weights,
    fit_logistic,
    nested_cv,
    predict_proba,
)
from .scoring import (
    Method,
    ScoredRanking,
    ablation_score,
    cvss_weight,
    kri_score,
    rank,
    sm_score,
    transform,
)
from .evalsuite import (
    ComparisonResult,
    ErvReport,
    MetricValue,
    average_precision,
    bootstrap_ci,
    brier,
    delong_test,
    erv_simulation,
    holm_adjust,
    paired_bootstrap_test,
    pearson_r,
    precision_at_k,
    recall_at_k_stratified,
    roc_auc,
)

__version__ = "0.1.0"
