"""Deterministic synthetic fixture feeds.

The fixture mimics the real corpus at desk scale: ~2,000 merged records with a
0.5% positive rate, exploitation probability carrying the dominant signal, and
severity bands largely independent of the label. A handful of high-severity
negatives sit just below the positives' probability range, so multiplying in
severity and weakness weights re-orders the tail the way the full composite
does on live data. Everything is generated from a fixed seed, so the bytes are
reproducible and no network is ever needed.
"""

from __future__ import annotations

import json
from datetime import date, timedelta
from pathlib import Path

import numpy as np

CWE_POOL = [
    "CWE-79", "CWE-787", "CWE-89", "CWE-20", "CWE-22",
    "CWE-78", "CWE-416", "CWE-125", "CWE-352", "CWE-287",
]
CWE_PROBS = [0.22, 0.16, 0.12, 0.12, 0.09, 0.08, 0.08, 0.07, 0.04, 0.02]

BANDS = ["low", "medium", "high", "critical"]
BAND_PROBS = [0.148, 0.473, 0.312, 0.067]
BAND_SCORE_RANGES = {
    "low": (0.1, 3.9),
    "medium": (4.0, 6.9),
    "high": (7.0, 8.9),
    "critical": (9.0, 10.0),
}

N_MERGED = 2000
N_POSITIVE = 10
N_NO_EPSS = 10  # extra CVE records absent from the EPSS snapshot
EPOCH = date(2020, 1, 1)


def generate_fixture(seed: int = 42):
    """Return (cve_jsonl, epss_csv, kev_json) byte strings."""
    rng = np.random.default_rng(seed)
    n = N_MERGED + N_NO_EPSS

    cve_ids = [f"CVE-2020-{10000 + i}" for i in range(n)]
    labels = np.zeros(n, dtype=bool)
    labels[:N_POSITIVE] = True

    epss = rng.beta(0.4, 15.0, size=n)
    # positives carry strong short-horizon signal
    epss[:N_POSITIVE] = 0.55 + 0.44 * rng.random(N_POSITIVE)
    # decoy negatives: high severity, moderate probability, just below the
    # positives' range; the composite promotes them past low-band positives
    decoy = slice(N_POSITIVE, N_POSITIVE + 15)
    epss[decoy] = 0.35 + 0.15 * rng.random(15)

    bands = list(rng.choice(BANDS, size=n, p=BAND_PROBS))
    # positives: mostly low/medium so severity-weighting demotes them
    pos_bands = ["low", "low", "low", "low", "medium", "medium", "medium", "high", "high", "critical"]
    for i, b in enumerate(pos_bands):
        bands[i] = b
    for i in range(decoy.start, decoy.stop):
        bands[i] = "critical"

    cve_lines = []
    for i in range(n):
        band = bands[i]
        lo, hi = BAND_SCORE_RANGES[band]
        base_score = round(float(lo + (hi - lo) * rng.random()), 1)
        if rng.random() < 0.15:
            cwes: list[str] = []  # ~15% of CVEs lack a CWE classification
        else:
            k = 1 + int(rng.random() < 0.2)
            cwes = list(rng.choice(CWE_POOL, size=k, replace=False, p=CWE_PROBS))
        published = EPOCH + timedelta(days=int(rng.integers(0, 1500)))
        cve_lines.append(
            json.dumps(
                {
                    "cve_id": cve_ids[i],
                    "published": published.isoformat(),
                    "severity_band": band,
                    "base_score": base_score,
                    "cwe_ids": cwes,
                    "description": f"synthetic vulnerability {i}",
                },
                sort_keys=True,
            )
        )
    cve_jsonl = ("\n".join(cve_lines) + "\n").encode()

    epss_rows = ["#model_version:v2023.03.01,score_date:2024-06-01T00:00:00+0000", "cve,epss,percentile"]
    order = np.argsort(epss[:N_MERGED])
    percentile = np.empty(N_MERGED)
    percentile[order] = (np.arange(N_MERGED) + 1) / N_MERGED
    for i in range(N_MERGED):
        epss_rows.append(f"{cve_ids[i]},{epss[i]:.5f},{percentile[i]:.5f}")
    epss_csv = ("\n".join(epss_rows) + "\n").encode()

    kev_items = []
    for i in range(N_POSITIVE):
        kev_items.append(
            {
                "cveID": cve_ids[i],
                "dateAdded": (EPOCH + timedelta(days=1600 + i)).isoformat(),
                "vendorProject": "synthetic",
                "product": f"product-{i}",
                "vulnerabilityName": f"synthetic exploit {i}",
            }
        )
    kev_json = json.dumps({"vulnerabilities": kev_items}, indent=1).encode()

    return cve_jsonl, epss_csv, kev_json


def write_fixture_feeds(directory: Path | str, seed: int = 42) -> dict[str, Path]:
    """Write the three fixture feed files into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cve_jsonl, epss_csv, kev_json = generate_fixture(seed)
    paths = {
        "cve": directory / "cve.jsonl",
        "epss": directory / "epss.csv",
        "kev": directory / "kev.json",
    }
    paths["cve"].write_bytes(cve_jsonl)
    paths["epss"].write_bytes(epss_csv)
    paths["kev"].write_bytes(kev_json)
    return paths
