"""Run configuration: defaults, flat key-value config file, environment
overrides (RISKRANK_* variables), and command-line flag overrides, applied in
that order of increasing precedence.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .feeds import DEFAULT_FEED_URLS
from .scoring import Method

ENV_PREFIX = "RISKRANK_"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    kev_url: str = DEFAULT_FEED_URLS["kev"]
    epss_url: str = DEFAULT_FEED_URLS["epss"]
    cve_source: str = ""
    cache_dir: str = "cache"
    output_dir: str = "out"
    seed: int = 42
    train_fraction: float = 0.7
    kev_window_days: int | None = None
    methods: tuple[Method, ...] = (Method.sm_ordinal, Method.epss, Method.kri)
    budgets: tuple[int, ...] = (100, 250, 500, 1000, 2000)
    resamples: int = 1000
    offline: bool = False
    max_age: float = 86400.0
    recall_k: int = 500

    def snapshot(self) -> dict:
        return {
            "kev_url": self.kev_url,
            "epss_url": self.epss_url,
            "cve_source": self.cve_source,
            "cache_dir": self.cache_dir,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "kev_window_days": self.kev_window_days,
            "methods": [m.value for m in self.methods],
            "budgets": list(self.budgets),
            "resamples": self.resamples,
            "offline": self.offline,
            "max_age": self.max_age,
            "recall_k": self.recall_k,
        }


_PARSERS = {
    "kev_url": str,
    "epss_url": str,
    "cve_source": str,
    "cache_dir": str,
    "output_dir": str,
    "seed": int,
    "train_fraction": float,
    "kev_window_days": lambda v: None if v.strip().lower() in ("", "none") else int(v),
    "methods": lambda v: tuple(Method(m.strip()) for m in v.split(",") if m.strip()),
    "budgets": lambda v: tuple(int(b) for b in v.split(",") if b.strip()),
    "resamples": int,
    "offline": lambda v: v.strip().lower() in ("1", "true", "yes", "on"),
    "max_age": float,
    "recall_k": int,
}


def _apply(values: dict, key: str, raw: str) -> None:
    if key not in _PARSERS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        values[key] = _PARSERS[key](raw)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})")


def load_config(path: Path | str | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional config file, RISKRANK_*
    environment variables, and explicit overrides (highest precedence).
    """
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            _apply(values, key.strip(), raw.strip())
    for env_key, raw in sorted(os.environ.items()):
        if env_key.startswith(ENV_PREFIX):
            _apply(values, env_key[len(ENV_PREFIX):].lower(), raw)
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                values[key] = value
    return replace(RunConfig(), **values)
