"""Merge the three feeds into a labeled dataset, split it, and derive CWE weights.

The merge is an inner join of CVE records with EPSS scores (records without an
EPSS score are dropped and counted; no imputation) and a left join against the
KEV catalog for the exploitation label. The CWE prevalence table is computed
from training records only, so test-set evaluation stays out-of-sample.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import date

import numpy as np

from .feeds import CveEntry, EpssSnapshot, KevEntry


class CorpusError(Exception):
    pass


class MergeError(CorpusError):
    pass


class StratificationError(CorpusError):
    pass


@dataclass(frozen=True)
class VulnRecord:
    cve_id: str
    published: date | None
    severity_band: str
    base_score: float | None
    cwe_ids: tuple[str, ...]
    epss: float
    kev: bool
    kev_date_added: date | None = None


@dataclass(frozen=True)
class Dataset:
    records: tuple[VulnRecord, ...]
    provenance: dict
    created_at: str

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.kev for r in self.records], dtype=bool)

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 42


@dataclass(frozen=True)
class CwePrevalenceTable:
    weights: dict[str, float]
    default_weight: float = 1.0
    train_size: int = 0


def derive_band(base_score: float) -> str | None:
    """CVSS v3 qualitative severity bands; 0.0 ('none') maps to None."""
    if base_score < 0.1:
        return None
    if base_score < 4.0:
        return "low"
    if base_score < 7.0:
        return "medium"
    if base_score < 9.0:
        return "high"
    return "critical"


def merge(
    cves: list[CveEntry],
    epss: EpssSnapshot,
    kev: list[KevEntry],
    kev_window_days: int | None = None,
    created_at: str = "",
) -> Dataset:
    """Join the feeds on CVE id and attach the exploitation label.

    With kev_window_days set, a record is labeled positive only if its KEV
    date_added falls within that many days of publication (ex-ante framing);
    by default plain catalog membership labels the record.
    """
    seen: set[str] = set()
    dupes: list[str] = []
    for c in cves:
        if c.cve_id in seen:
            dupes.append(c.cve_id)
        seen.add(c.cve_id)
    if dupes:
        raise MergeError(f"duplicate cve_id among CVE records: {sorted(set(dupes))}")

    epss_by_id = {e.cve_id: e.epss for e in epss.entries}
    kev_by_id: dict[str, date] = {k.cve_id: k.date_added for k in kev}

    records: list[VulnRecord] = []
    dropped = {"missing_epss": 0, "missing_severity": 0, "severity_none": 0}
    for c in cves:
        score = epss_by_id.get(c.cve_id)
        if score is None:
            dropped["missing_epss"] += 1
            continue
        band = c.severity_band
        if band is None:
            if c.base_score is None:
                dropped["missing_severity"] += 1
                continue
            band = derive_band(c.base_score)
            if band is None:
                dropped["severity_none"] += 1
                continue
        added = kev_by_id.get(c.cve_id)
        labeled = added is not None
        if labeled and kev_window_days is not None:
            if c.published is None:
                labeled = False
            else:
                delta = (added - c.published).days
                labeled = 0 <= delta <= kev_window_days
        records.append(
            VulnRecord(
                cve_id=c.cve_id,
                published=c.published,
                severity_band=band,
                base_score=c.base_score,
                cwe_ids=c.cwe_ids,
                epss=score,
                kev=labeled,
                kev_date_added=added if labeled else None,
            )
        )

    provenance = {
        "input_cves": len(cves),
        "input_epss": len(epss.entries),
        "input_kev": len(kev),
        "kept": len(records),
        "dropped": dropped,
        "positives": sum(r.kev for r in records),
        "kev_window_days": kev_window_days,
    }
    return Dataset(records=tuple(records), provenance=provenance, created_at=created_at)


def stratified_split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Split positives and negatives independently by train_fraction.

    The test side takes floor(n * (1 - train_fraction)) of each stratum; the
    remainder goes to train. Deterministic for a given seed; record order
    within each partition follows the source dataset.
    """
    labels = dataset.labels
    pos_idx = np.flatnonzero(labels)
    neg_idx = np.flatnonzero(~labels)
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        raise StratificationError("dataset must contain both classes to stratify")

    rng = np.random.default_rng(spec.seed)
    test_mask = np.zeros(len(dataset), dtype=bool)
    for idx in (pos_idx, neg_idx):
        n_test = math.floor(len(idx) * (1.0 - spec.train_fraction))
        perm = rng.permutation(len(idx))
        test_mask[idx[perm[:n_test]]] = True

    def subset(mask: np.ndarray, name: str) -> Dataset:
        recs = tuple(r for r, m in zip(dataset.records, mask) if m)
        prov = dict(dataset.provenance)
        prov["partition"] = name
        prov["train_fraction"] = spec.train_fraction
        prov["seed"] = spec.seed
        return Dataset(records=recs, provenance=prov, created_at=dataset.created_at)

    return subset(~test_mask, "train"), subset(test_mask, "test")


def compute_cwe_weights(train: Dataset) -> CwePrevalenceTable:
    """Prevalence weight 1 + (train records carrying the CWE) / train size."""
    if len(train) == 0:
        raise CorpusError("cannot compute CWE weights from an empty training set")
    counts: dict[str, int] = {}
    for r in train.records:
        for cwe in set(r.cwe_ids):
            counts[cwe] = counts.get(cwe, 0) + 1
    n = len(train)
    weights = {cwe: 1.0 + count / n for cwe, count in sorted(counts.items())}
    return CwePrevalenceTable(weights=weights, default_weight=1.0, train_size=n)


def cwe_weight_for(record: VulnRecord, table: CwePrevalenceTable) -> float:
    """Maximum table weight over the record's CWEs; 1.0 when none are listed."""
    if not record.cwe_ids:
        return table.default_weight
    return max(table.weights.get(cwe, table.default_weight) for cwe in record.cwe_ids)


def dataset_to_jsonl(dataset: Dataset) -> bytes:
    lines = []
    for r in dataset.records:
        lines.append(
            json.dumps(
                {
                    "cve_id": r.cve_id,
                    "published": r.published.isoformat() if r.published else None,
                    "severity_band": r.severity_band,
                    "base_score": r.base_score,
                    "cwe_ids": list(r.cwe_ids),
                    "epss": r.epss,
                    "kev": r.kev,
                    "kev_date_added": r.kev_date_added.isoformat() if r.kev_date_added else None,
                },
                sort_keys=True,
            )
        )
    return ("\n".join(lines) + "\n").encode() if lines else b""


def dataset_from_jsonl(data: bytes, provenance: dict | None = None, created_at: str = "") -> Dataset:
    records = []
    for line in data.decode().splitlines():
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        records.append(
            VulnRecord(
                cve_id=obj["cve_id"],
                published=date.fromisoformat(obj["published"]) if obj.get("published") else None,
                severity_band=obj["severity_band"],
                base_score=obj.get("base_score"),
                cwe_ids=tuple(obj.get("cwe_ids") or ()),
                epss=float(obj["epss"]),
                kev=bool(obj["kev"]),
                kev_date_added=date.fromisoformat(obj["kev_date_added"]) if obj.get("kev_date_added") else None,
            )
        )
    return Dataset(records=tuple(records), provenance=provenance or {}, created_at=created_at)


def cwe_table_to_csv(table: CwePrevalenceTable, seed: int | None = None) -> bytes:
    header = f"# train_size={table.train_size}"
    if seed is not None:
        header += f",seed={seed}"
    lines = [header, "cwe_id,weight"]
    for cwe, w in sorted(table.weights.items()):
        lines.append(f"{cwe},{w!r}")
    return ("\n".join(lines) + "\n").encode()
