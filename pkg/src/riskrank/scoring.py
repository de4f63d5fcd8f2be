"""Composite risk scores: the severity baseline, the full composite, ablations,
monotone transforms, and deterministic ranking.

The composite multiplies exploitation probability, an ordinal severity weight
(low=1, medium=2, high=3, critical=4), and the CWE prevalence weight, so a
negligible value on any dimension pulls the product toward zero.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import rankdata

from .corpus import CwePrevalenceTable, VulnRecord, cwe_weight_for


class ScoringError(Exception):
    pass


class ConfigurationError(ScoringError):
    pass


CVSS_WEIGHTS = {"low": 1, "medium": 2, "high": 3, "critical": 4}


class Method(str, Enum):
    sm_ordinal = "sm_ordinal"
    sm_continuous = "sm_continuous"
    epss = "epss"
    cvss_x_cwe = "cvss_x_cwe"
    epss_x_cvss = "epss_x_cvss"
    epss_x_cwe = "epss_x_cwe"
    kri = "kri"

    @property
    def requires_table(self) -> bool:
        return self in (Method.cvss_x_cwe, Method.epss_x_cwe, Method.kri)


# Table-style ablation labels (a)-(e) map onto named methods.
ABLATION_SETTINGS = {
    "a": Method.epss,
    "b": Method.cvss_x_cwe,
    "c": Method.epss_x_cvss,
    "d": Method.epss_x_cwe,
    "e": Method.kri,
}


@dataclass(frozen=True)
class ScoredRanking:
    method: Method
    scores: dict[str, float]
    order: tuple[str, ...]


def cvss_weight(band: str) -> int:
    try:
        return CVSS_WEIGHTS[band]
    except KeyError:
        raise ScoringError(f"unknown severity band {band!r}")


def sm_score(record: VulnRecord, mode: str = "ordinal") -> float:
    if mode == "ordinal":
        return float(cvss_weight(record.severity_band))
    if mode == "continuous":
        if record.base_score is None:
            raise ScoringError(f"{record.cve_id}: continuous severity score requires base_score")
        return float(record.base_score)
    raise ScoringError(f"unknown severity mode {mode!r}")


def kri_score(record: VulnRecord, table: CwePrevalenceTable) -> float:
    return record.epss * cvss_weight(record.severity_band) * cwe_weight_for(record, table)


def ablation_score(record: VulnRecord, table: CwePrevalenceTable | None, setting: Method) -> float:
    if setting.requires_table and table is None:
        raise ConfigurationError(f"method {setting.value} requires a CWE prevalence table")
    if setting is Method.sm_ordinal:
        return sm_score(record, "ordinal")
    if setting is Method.sm_continuous:
        return sm_score(record, "continuous")
    if setting is Method.epss:
        return record.epss
    if setting is Method.cvss_x_cwe:
        return cvss_weight(record.severity_band) * cwe_weight_for(record, table)
    if setting is Method.epss_x_cvss:
        return record.epss * cvss_weight(record.severity_band)
    if setting is Method.epss_x_cwe:
        return record.epss * cwe_weight_for(record, table)
    if setting is Method.kri:
        return kri_score(record, table)
    raise ConfigurationError(f"unknown method {setting!r}")


def score_records(
    records: tuple[VulnRecord, ...] | list[VulnRecord],
    method: Method,
    table: CwePrevalenceTable | None = None,
) -> dict[str, float]:
    return {r.cve_id: ablation_score(r, table, method) for r in records}


def transform(scores, kind: str):
    """Monotone transforms of a score vector; every kind preserves rank order."""
    x = np.asarray(scores, dtype=float)
    if kind == "raw":
        return x.copy()
    if kind == "log1p":
        return np.log1p(x)
    if kind == "percentile_rank":
        return rankdata(x, method="average") / len(x)
    if kind == "minmax":
        lo, hi = x.min(), x.max()
        if hi == lo:
            return np.full_like(x, 0.5)
        return (x - lo) / (hi - lo)
    raise ScoringError(f"unknown transform kind {kind!r}")


TRANSFORM_KINDS = ("raw", "log1p", "percentile_rank", "minmax")


def rank(scores: dict[str, float], method: Method = Method.kri) -> ScoredRanking:
    """Descending score order with ties broken by ascending cve_id."""
    if not scores:
        raise ScoringError("cannot rank an empty score map")
    for cve_id, s in scores.items():
        if not math.isfinite(s):
            raise ScoringError(f"non-finite score for {cve_id}: {s}")
    order = tuple(sorted(scores, key=lambda c: (-scores[c], c)))
    return ScoredRanking(method=method, scores=dict(scores), order=order)


def rankings_to_csv(rankings: list[ScoredRanking]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cve_id", "method", "score", "rank"])
    for ranking in rankings:
        for pos, cve_id in enumerate(ranking.order, start=1):
            writer.writerow([cve_id, ranking.method.value, repr(ranking.scores[cve_id]), pos])
    return buf.getvalue().encode()
