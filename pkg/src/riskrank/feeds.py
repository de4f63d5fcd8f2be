"""Parsers and cached fetch layer for the three public vulnerability feeds.

Supported inputs:
  - CISA KEV catalog (JSON document with a "vulnerabilities" array)
  - EPSS daily CSV (leading "#model_version:...,score_date:..." comment line)
  - CVE records, either as the normalized JSON-lines interchange format or as
    an NVD-style JSON feed (2.0 "vulnerabilities" or 1.1 "CVE_Items")

All parsers are pure: same bytes in, same records out.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import re
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path

import requests
from filelock import FileLock

logger = logging.getLogger(__name__)

CVE_ID_RE = re.compile(r"^CVE-\d{4}-\d{4,}$")
CWE_ID_RE = re.compile(r"CWE-(\d+)")

SEVERITY_BANDS = ("low", "medium", "high", "critical")

DEFAULT_FEED_URLS = {
    "kev": "https://www.cisa.gov/sites/default/files/feeds/known_exploited_vulnerabilities.json",
    "epss": "https://epss.cyentia.com/epss_scores-current.csv.gz",
    "cve": "",  # no single canonical URL; usually a local normalized corpus
}


class FeedError(Exception):
    """Base class for feed parsing and fetching failures."""


class FeedFormatError(FeedError):
    """The document as a whole is not in the expected format."""


class FeedRecordError(FeedError):
    """A single record within an otherwise well-formed document is invalid."""

    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (record {index})")
        self.index = index


class CacheMissError(FeedError):
    """Offline fetch requested but no cached payload exists."""


class CacheCorruptionError(FeedError):
    """Cached payload bytes do not match their recorded digest."""


@dataclass(frozen=True)
class KevEntry:
    cve_id: str
    date_added: date
    vendor_project: str = ""
    product: str = ""
    vulnerability_name: str = ""


@dataclass(frozen=True)
class EpssEntry:
    cve_id: str
    epss: float
    percentile: float


@dataclass(frozen=True)
class EpssSnapshot:
    model_version: str
    score_date: date
    entries: tuple[EpssEntry, ...]


@dataclass(frozen=True)
class CveEntry:
    cve_id: str
    published: date | None
    severity_band: str | None
    base_score: float | None
    cwe_ids: tuple[str, ...]
    description: str = ""


@dataclass(frozen=True)
class FeedSnapshot:
    source: str
    retrieved_at: str
    content_digest: str
    payload_path: Path
    stale: bool = False


def _parse_date(value: str, index: int) -> date:
    try:
        return date.fromisoformat(str(value)[:10])
    except ValueError:
        raise FeedRecordError(f"invalid date {value!r}", index)


def parse_kev_catalog(raw_bytes: bytes) -> list[KevEntry]:
    """Parse the KEV catalog JSON into entries, order preserved.

    Duplicate CVE ids are collapsed to a single entry keeping the earliest
    date_added (the earliest confirmation of exploitation).
    """
    try:
        doc = json.loads(raw_bytes)
    except json.JSONDecodeError as e:
        raise FeedFormatError(f"malformed KEV JSON at byte {e.pos}: {e.msg}")
    if not isinstance(doc, dict) or not isinstance(doc.get("vulnerabilities"), list):
        raise FeedFormatError("KEV document lacks a top-level 'vulnerabilities' array")

    by_id: dict[str, KevEntry] = {}
    for i, item in enumerate(doc["vulnerabilities"]):
        if not isinstance(item, dict):
            raise FeedRecordError("KEV element is not an object", i)
        cve_id = item.get("cveID")
        date_added = item.get("dateAdded")
        if not cve_id or not date_added:
            raise FeedRecordError("KEV element missing 'cveID' or 'dateAdded'", i)
        entry = KevEntry(
            cve_id=cve_id,
            date_added=_parse_date(date_added, i),
            vendor_project=item.get("vendorProject", ""),
            product=item.get("product", ""),
            vulnerability_name=item.get("vulnerabilityName", ""),
        )
        prev = by_id.get(cve_id)
        if prev is None:
            by_id[cve_id] = entry
        elif entry.date_added < prev.date_added:
            # keep first position in the ordering, earliest date
            by_id[cve_id] = KevEntry(
                cve_id=prev.cve_id,
                date_added=entry.date_added,
                vendor_project=prev.vendor_project,
                product=prev.product,
                vulnerability_name=prev.vulnerability_name,
            )
    return list(by_id.values())


def kev_to_json(entries: list[KevEntry]) -> bytes:
    """Serialize KEV entries back to the catalog JSON layout."""
    doc = {
        "vulnerabilities": [
            {
                "cveID": e.cve_id,
                "dateAdded": e.date_added.isoformat(),
                "vendorProject": e.vendor_project,
                "product": e.product,
                "vulnerabilityName": e.vulnerability_name,
            }
            for e in entries
        ]
    }
    return json.dumps(doc, indent=1).encode()


_EPSS_COMMENT_RE = re.compile(r"#\s*model_version\s*:\s*([^,]+)\s*,\s*score_date\s*:\s*(\d{4}-\d{2}-\d{2})")


def parse_epss_snapshot(raw_bytes: bytes) -> EpssSnapshot:
    """Parse the EPSS daily CSV (with its leading metadata comment line)."""
    text = raw_bytes.decode("utf-8-sig")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise FeedFormatError("EPSS CSV missing leading '#model_version:...' comment line")
    m = _EPSS_COMMENT_RE.search(lines[0])
    if m is None:
        raise FeedFormatError(f"cannot parse EPSS metadata comment: {lines[0]!r}")
    model_version = m.group(1).strip()
    score_date = date.fromisoformat(m.group(2))

    reader = csv.reader(io.StringIO("\n".join(lines[1:])))
    try:
        header = next(reader)
    except StopIteration:
        raise FeedFormatError("EPSS CSV missing header row")
    if [h.strip().lower() for h in header[:3]] != ["cve", "epss", "percentile"]:
        raise FeedFormatError(f"unexpected EPSS header: {header!r}")

    entries: list[EpssEntry] = []
    for row_idx, row in enumerate(reader):
        if not row or not any(cell.strip() for cell in row):
            continue
        if len(row) < 3:
            raise FeedRecordError(f"EPSS row has {len(row)} columns, expected 3", row_idx)
        cve_id = row[0].strip()
        try:
            epss = float(row[1])
            percentile = float(row[2])
        except ValueError:
            raise FeedRecordError(f"non-numeric EPSS score in row {row!r}", row_idx)
        if not 0.0 <= epss <= 1.0:
            raise FeedRecordError(f"epss {epss} outside [0,1]", row_idx)
        if not 0.0 <= percentile <= 1.0:
            raise FeedRecordError(f"percentile {percentile} outside [0,1]", row_idx)
        entries.append(EpssEntry(cve_id=cve_id, epss=epss, percentile=percentile))

    seen: set[str] = set()
    for e in entries:
        if e.cve_id in seen:
            raise FeedFormatError(f"duplicate cve_id {e.cve_id} in EPSS snapshot")
        seen.add(e.cve_id)
    return EpssSnapshot(model_version=model_version, score_date=score_date, entries=tuple(entries))


def normalize_cwe(value: str) -> str | None:
    """Map a raw weakness string to 'CWE-<digits>', or None for placeholders."""
    m = CWE_ID_RE.search(value)
    if m is None:
        return None  # NVD-CWE-noinfo, NVD-CWE-Other, free text
    return f"CWE-{m.group(1)}"


def _band_or_none(value) -> str | None:
    if value is None:
        return None
    band = str(value).strip().lower()
    if band in SEVERITY_BANDS:
        return band
    return None


def _cve_entry_from_normalized(obj: dict, index: int) -> CveEntry:
    cve_id = obj.get("cve_id")
    if not cve_id:
        raise FeedRecordError("record missing cve_id", index)
    published = obj.get("published")
    base_score = obj.get("base_score")
    cwe_ids = []
    for raw in obj.get("cwe_ids") or []:
        cwe = normalize_cwe(str(raw))
        if cwe is not None:
            cwe_ids.append(cwe)
    return CveEntry(
        cve_id=cve_id,
        published=_parse_date(published, index) if published else None,
        severity_band=_band_or_none(obj.get("severity_band")),
        base_score=float(base_score) if base_score is not None else None,
        cwe_ids=tuple(cwe_ids),
        description=obj.get("description", "") or "",
    )


def _cve_entry_from_nvd2(item: dict, index: int) -> CveEntry:
    cve = item.get("cve", item)
    cve_id = cve.get("id")
    if not cve_id:
        raise FeedRecordError("NVD 2.0 record missing cve.id", index)
    band = None
    score = None
    metrics = cve.get("metrics", {})
    for key in ("cvssMetricV31", "cvssMetricV30"):
        for metric in metrics.get(key, []):
            data = metric.get("cvssData", {})
            if score is None and "baseScore" in data:
                score = float(data["baseScore"])
                band = _band_or_none(data.get("baseSeverity"))
        if score is not None:
            break
    if score is None:
        for metric in metrics.get("cvssMetricV2", []):
            data = metric.get("cvssData", {})
            if "baseScore" in data:
                score = float(data["baseScore"])
                band = _band_or_none(metric.get("baseSeverity"))
                break
    cwe_ids = []
    for weakness in cve.get("weaknesses", []):
        for desc in weakness.get("description", []):
            cwe = normalize_cwe(desc.get("value", ""))
            if cwe is not None and cwe not in cwe_ids:
                cwe_ids.append(cwe)
    description = ""
    for desc in cve.get("descriptions", []):
        if desc.get("lang") == "en":
            description = desc.get("value", "")
            break
    published = cve.get("published")
    return CveEntry(
        cve_id=cve_id,
        published=_parse_date(published, index) if published else None,
        severity_band=band,
        base_score=score,
        cwe_ids=tuple(cwe_ids),
        description=description,
    )


def _cve_entry_from_nvd1(item: dict, index: int) -> CveEntry:
    cve = item.get("cve", {})
    cve_id = cve.get("CVE_data_meta", {}).get("ID")
    if not cve_id:
        raise FeedRecordError("NVD 1.1 record missing CVE_data_meta.ID", index)
    impact = item.get("impact", {})
    band = None
    score = None
    v3 = impact.get("baseMetricV3", {}).get("cvssV3", {})
    if "baseScore" in v3:
        score = float(v3["baseScore"])
        band = _band_or_none(v3.get("baseSeverity"))
    else:
        v2meta = impact.get("baseMetricV2", {})
        v2 = v2meta.get("cvssV2", {})
        if "baseScore" in v2:
            score = float(v2["baseScore"])
            band = _band_or_none(v2meta.get("severity"))
    cwe_ids = []
    for pt in cve.get("problemtype", {}).get("problemtype_data", []):
        for desc in pt.get("description", []):
            cwe = normalize_cwe(desc.get("value", ""))
            if cwe is not None and cwe not in cwe_ids:
                cwe_ids.append(cwe)
    description = ""
    for desc in cve.get("description", {}).get("description_data", []):
        if desc.get("lang") == "en":
            description = desc.get("value", "")
            break
    published = item.get("publishedDate")
    return CveEntry(
        cve_id=cve_id,
        published=_parse_date(published, index) if published else None,
        severity_band=band,
        base_score=score,
        cwe_ids=tuple(cwe_ids),
        description=description,
    )


def parse_cve_records(raw_bytes: bytes) -> list[CveEntry]:
    """Parse CVE records from normalized JSON-lines or an NVD-style feed."""
    text = raw_bytes.decode("utf-8-sig").strip()
    if not text:
        return []
    if text.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError:
            doc = None
        if isinstance(doc, dict):
            if "vulnerabilities" in doc:
                return [_cve_entry_from_nvd2(item, i) for i, item in enumerate(doc["vulnerabilities"])]
            if "CVE_Items" in doc:
                return [_cve_entry_from_nvd1(item, i) for i, item in enumerate(doc["CVE_Items"])]
        # fall through: may be one JSON object per line
    entries: list[CveEntry] = []
    for i, line in enumerate(text.splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise FeedFormatError(f"unrecognized CVE container format (line {i}: {e.msg})")
        if not isinstance(obj, dict):
            raise FeedFormatError(f"unrecognized CVE container format (line {i} is not an object)")
        entries.append(_cve_entry_from_normalized(obj, i))
    return entries


def cve_records_to_jsonl(entries: list[CveEntry]) -> bytes:
    """Serialize CVE entries to the normalized JSON-lines interchange format."""
    lines = []
    for e in entries:
        lines.append(
            json.dumps(
                {
                    "cve_id": e.cve_id,
                    "published": e.published.isoformat() if e.published else None,
                    "severity_band": e.severity_band,
                    "base_score": e.base_score,
                    "cwe_ids": list(e.cwe_ids),
                    "description": e.description,
                },
                sort_keys=True,
            )
        )
    return ("\n".join(lines) + "\n").encode() if lines else b""


def sha256_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_cached(source: str, cache_dir: Path) -> FeedSnapshot | None:
    meta_path = cache_dir / f"{source}.meta.json"
    payload_path = cache_dir / f"{source}.payload"
    if not meta_path.exists() or not payload_path.exists():
        return None
    meta = json.loads(meta_path.read_text())
    payload = payload_path.read_bytes()
    if sha256_digest(payload) != meta["content_digest"]:
        raise CacheCorruptionError(f"cached {source} payload does not match its digest")
    return FeedSnapshot(
        source=source,
        retrieved_at=meta["retrieved_at"],
        content_digest=meta["content_digest"],
        payload_path=payload_path,
    )


def _commit_payload(source: str, cache_dir: Path, payload: bytes, url: str) -> FeedSnapshot:
    payload_path = cache_dir / f"{source}.payload"
    retrieved_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    digest = sha256_digest(payload)
    _atomic_write(payload_path, payload)
    meta = {
        "source": source,
        "url": url,
        "retrieved_at": retrieved_at,
        "content_digest": digest,
    }
    _atomic_write(cache_dir / f"{source}.meta.json", json.dumps(meta, indent=1).encode())
    return FeedSnapshot(
        source=source,
        retrieved_at=retrieved_at,
        content_digest=digest,
        payload_path=payload_path,
    )


def fetch_snapshot(
    source: str,
    cache_dir: Path | str,
    offline: bool = False,
    max_age: float = 86400.0,
    url: str | None = None,
) -> FeedSnapshot:
    """Return a cached feed payload, refreshing it when stale.

    Offline mode never touches the network and requires a warm cache, except
    when `url` names a local file, which is read directly. A failed refresh
    with a stale cache present returns the stale snapshot flagged rather than
    failing: prioritization on stale feeds beats no prioritization.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    if url is None:
        url = DEFAULT_FEED_URLS.get(source, "")

    local_path = None
    if url:
        if url.startswith("file://"):
            local_path = Path(url[len("file://"):])
        elif "://" not in url:
            local_path = Path(url)

    with FileLock(str(cache_dir / f"{source}.lock")):
        cached = _read_cached(source, cache_dir)
        if offline:
            if cached is not None:
                return cached
            if local_path is not None:
                # reading a local file is not a network operation
                return _commit_payload(source, cache_dir, local_path.read_bytes(), url)
            raise CacheMissError(f"offline fetch of {source!r} with cold cache at {cache_dir}")

        if cached is not None:
            meta = json.loads((cache_dir / f"{source}.meta.json").read_text())
            age = time.time() - datetime.fromisoformat(meta["retrieved_at"]).timestamp()
            if age < max_age:
                return cached

        try:
            if local_path is not None:
                payload = local_path.read_bytes()
            else:
                if not url:
                    raise FeedError(f"no URL configured for feed source {source!r}")
                resp = requests.get(url, timeout=60)
                resp.raise_for_status()
                payload = resp.content
        except (OSError, requests.RequestException) as e:
            if cached is not None:
                logger.warning("refresh of %s failed (%s); serving stale cache", source, e)
                return FeedSnapshot(
                    source=cached.source,
                    retrieved_at=cached.retrieved_at,
                    content_digest=cached.content_digest,
                    payload_path=cached.payload_path,
                    stale=True,
                )
            raise FeedError(f"fetch of {source!r} failed with no cache to fall back on: {e}")

        return _commit_payload(source, cache_dir, payload, url)
