"""Command-line surface for the prioritization pipeline.

Subcommands: fetch, build, score, train, eval, decision, report. Exit codes:
0 success, 2 usage, 3 fetch, 4 build/merge, 5 train, 6 report dependency
missing. All output files are written atomically into the run's output
directory, which a single run owns via a lockfile.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import corpus, evalsuite, feeds, learner, scoring
from .config import ConfigError, RunConfig, load_config
from .corpus import Dataset, SplitSpec, compute_cwe_weights, stratified_split
from .feeds import FeedError, _atomic_write
from .learner import CvConfig, LogisticModel
from .scoring import Method

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_FETCH = 3
EXIT_BUILD = 4
EXIT_TRAIN = 5
EXIT_REPORT = 6

__version__ = "0.1.0"


def _out(config: RunConfig) -> Path:
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _record_timing(config: RunConfig, command: str, seconds: float) -> None:
    # timings.json is the one deliberately non-deterministic artifact
    path = _out(config) / "timings.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc[command] = round(seconds, 3)
    _atomic_write(path, json.dumps(doc, indent=1, sort_keys=True).encode())


def _load_snapshots(config: RunConfig) -> dict[str, feeds.FeedSnapshot]:
    urls = {"kev": config.kev_url, "epss": config.epss_url, "cve": config.cve_source}
    snapshots = {}
    for source in ("kev", "epss", "cve"):
        snapshots[source] = feeds.fetch_snapshot(
            source,
            config.cache_dir,
            offline=config.offline,
            max_age=config.max_age,
            url=urls[source] or None,
        )
    return snapshots


def cmd_fetch(config: RunConfig) -> int:
    snapshots = _load_snapshots(config)
    for source, snap in snapshots.items():
        flag = " (stale)" if snap.stale else ""
        print(f"{source}: {snap.content_digest[:16]} retrieved {snap.retrieved_at}{flag}")
    return 0


def _load_dataset(config: RunConfig) -> Dataset:
    out = _out(config)
    data = (out / "dataset.jsonl").read_bytes()
    provenance = json.loads((out / "provenance.json").read_text())
    return corpus.dataset_from_jsonl(data, provenance=provenance, created_at=provenance.get("created_at", ""))


def cmd_build(config: RunConfig) -> int:
    snapshots = _load_snapshots(config)
    cves = feeds.parse_cve_records(snapshots["cve"].payload_path.read_bytes())
    epss = feeds.parse_epss_snapshot(snapshots["epss"].payload_path.read_bytes())
    kev = feeds.parse_kev_catalog(snapshots["kev"].payload_path.read_bytes())
    # derived from the cached snapshots, not the wall clock, so rebuilds of
    # the same cache are byte-identical
    created_at = max(s.retrieved_at for s in snapshots.values())
    dataset = corpus.merge(
        cves, epss, kev,
        kev_window_days=config.kev_window_days,
        created_at=created_at,
    )
    out = _out(config)
    _atomic_write(out / "dataset.jsonl", corpus.dataset_to_jsonl(dataset))
    provenance = dict(dataset.provenance)
    provenance["created_at"] = created_at
    _atomic_write(out / "provenance.json", json.dumps(provenance, indent=1, sort_keys=True).encode())

    manifest = {
        "tool_version": __version__,
        "config": config.snapshot(),
        "feed_digests": {source: snap.content_digest for source, snap in snapshots.items()},
        "provenance": provenance,
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
    print(f"dataset: {len(dataset)} records, {dataset.n_positive} positives "
          f"(dropped: {dataset.provenance['dropped']})")
    return 0


def _split(config: RunConfig, dataset: Dataset):
    return stratified_split(dataset, SplitSpec(train_fraction=config.train_fraction, seed=config.seed))


def cmd_score(config: RunConfig) -> int:
    dataset = _load_dataset(config)
    train, _ = _split(config, dataset)
    table = compute_cwe_weights(train)
    out = _out(config)
    _atomic_write(out / "cwe_weights.csv", corpus.cwe_table_to_csv(table, seed=config.seed))
    rankings = []
    for method in config.methods:
        scores = scoring.score_records(dataset.records, method, table)
        rankings.append(scoring.rank(scores, method))
    _atomic_write(out / "scores.csv", scoring.rankings_to_csv(rankings))
    print(f"scored {len(dataset)} records with {len(config.methods)} methods")
    return 0


def cmd_train(config: RunConfig) -> int:
    dataset = _load_dataset(config)
    train, _ = _split(config, dataset)
    out = _out(config)
    cv_config = CvConfig(seed=config.seed)
    for method in config.methods:
        report = learner.nested_cv(train, method, cv_config)
        _atomic_write(out / f"cv_{method.value}.csv", report.to_csv())
        table = compute_cwe_weights(train) if method.requires_table else None
        scores = np.array(list(scoring.score_records(train.records, method, table).values()))
        labels = train.labels
        weights = learner.class_weights(labels)
        # final model uses the C most often selected across outer folds
        selected = [f.selected_c for f in report.folds]
        final_c = max(sorted(set(selected)), key=selected.count)
        model = learner.fit_logistic(
            scores, labels, weights,
            c=final_c, max_iter=cv_config.max_iter, tolerance=cv_config.tolerance,
        )
        _atomic_write(
            out / f"model_{method.value}.json",
            model.to_json(method=method.value, seed=config.seed),
        )
        print(f"{method.value}: outer ROC-AUC {report.mean_roc_auc:.4f} "
              f"± {report.std_roc_auc:.4f}, C={final_c}, converged={model.converged}")
    return 0


def _test_scores(config: RunConfig, dataset: Dataset):
    """Test-partition score vectors per method, using the train-side CWE table."""
    train, test = _split(config, dataset)
    table = compute_cwe_weights(train)
    labels = test.labels
    per_method = {
        method: np.array(list(scoring.score_records(test.records, method, table).values()))
        for method in config.methods
    }
    return train, test, table, labels, per_method


def cmd_eval(config: RunConfig) -> int:
    dataset = _load_dataset(config)
    train, test, table, labels, per_method = _test_scores(config, dataset)
    out = _out(config)

    metrics: dict[str, dict[str, dict]] = {}
    for method, scores in per_method.items():
        entry = {}
        for name in ("roc_auc", "average_precision"):
            mv = evalsuite.bootstrap_ci(
                name, scores, labels, resamples=config.resamples, seed=config.seed
            )
            entry[name] = evalsuite.metric_value_to_dict(mv)
        model_path = out / f"model_{method.value}.json"
        if model_path.exists():
            model = LogisticModel.from_json(model_path.read_bytes())
        else:
            weights = learner.class_weights(train.labels)
            train_scores = np.array(list(scoring.score_records(train.records, method, table).values()))
            model = learner.fit_logistic(train_scores, train.labels, weights)
        probs = learner.predict_proba(model, scores)
        entry["brier"] = evalsuite.metric_value_to_dict(
            evalsuite.MetricValue(name="brier", value=evalsuite.brier(probs, labels), n=len(labels))
        )
        metrics[method.value] = entry

    pairs = [
        (a, b)
        for i, a in enumerate(config.methods)
        for b in config.methods[i + 1:]
    ]
    delong_results = []
    bootstrap_results = []
    for a, b in pairs:
        r = evalsuite.delong_test(per_method[a], per_method[b], labels)
        r.method_a, r.method_b = a.value, b.value
        delong_results.append(r)
        r = evalsuite.paired_bootstrap_test(
            "average_precision", per_method[a], per_method[b], labels,
            resamples=config.resamples, seed=config.seed,
        )
        r.method_a, r.method_b = a.value, b.value
        bootstrap_results.append(r)
    for family in (delong_results, bootstrap_results):
        if family:
            adjusted = evalsuite.holm_adjust([r.p_value for r in family])
            for r, p_adj in zip(family, adjusted):
                r.p_adjusted = p_adj

    sm = np.array(list(scoring.score_records(test.records, Method.sm_ordinal, table).values()))
    kri = np.array(list(scoring.score_records(test.records, Method.kri, table).values()))
    kev_flag = labels.astype(float)
    names = {"sm": sm, "kri": kri, "kev": kev_flag}
    correlations = {
        a: {b: (1.0 if a == b else evalsuite.pearson_r(names[a], names[b])) for b in names}
        for a in names
    }

    report = evalsuite.EvaluationReport(
        metrics=metrics,
        comparisons=[evalsuite.comparison_to_dict(r) for r in delong_results + bootstrap_results],
        correlations=correlations,
        n=len(labels),
        n_positive=int(labels.sum()),
    )
    _atomic_write(out / "eval.json", report.to_json())
    for method in config.methods:
        m = metrics[method.value]
        print(f"{method.value}: ROC-AUC {m['roc_auc']['value']:.4f} "
              f"AUPRC {m['average_precision']['value']:.4f} Brier {m['brier']['value']:.4f}")
    return 0


def cmd_decision(config: RunConfig) -> int:
    dataset = _load_dataset(config)
    _, test, table, labels_arr, per_method = _test_scores(config, dataset)
    out = _out(config)
    n = len(test)

    labels = {r.cve_id: r.kev for r in test.records}
    strata = {r.cve_id: r.severity_band for r in test.records}
    severity_weights = {r.cve_id: scoring.cvss_weight(r.severity_band) for r in test.records}

    budgets = []
    for k in config.budgets:
        if k > n:
            logger.warning("budget %d exceeds test size %d; clipping", k, n)
            k = n
        if k not in budgets:
            budgets.append(k)
    recall_k = min(config.recall_k, n)

    rankings = [
        scoring.rank(dict(zip((r.cve_id for r in test.records), per_method[m])), m)
        for m in config.methods
    ]

    fig5 = ["k,method,precision"]
    for ranking in rankings:
        for k in budgets:
            fig5.append(f"{k},{ranking.method.value},{evalsuite.precision_at_k(ranking, labels, k)!r}")
    _atomic_write(out / "fig5.csv", ("\n".join(fig5) + "\n").encode())

    fig6 = ["band,method,recall_at_k"]
    summary: dict[str, dict] = {}
    for ranking in rankings:
        recalls = evalsuite.recall_at_k_stratified(ranking, labels, strata, recall_k)
        for band in ("low", "medium", "high", "critical"):
            if band in recalls:
                fig6.append(f"{band},{ranking.method.value},{recalls[band]!r}")
        captured = sum(labels[c] for c in ranking.order[:recall_k])
        total_pos = sum(labels.values())
        summary[ranking.method.value] = {
            "recall_at_k": captured / total_pos if total_pos else None,
            "critical_recall_at_k": recalls.get("critical"),
        }
    _atomic_write(out / "fig6.csv", ("\n".join(fig6) + "\n").encode())

    erv = evalsuite.erv_simulation(
        rankings, labels, severity_weights,
        budgets=budgets, seed=config.seed,
    )
    _atomic_write(out / "fig7.csv", erv.to_csv())

    erv_budget = recall_k if recall_k in budgets else budgets[-1]
    idx = budgets.index(erv_budget)
    for name, series in erv.normalized.items():
        if name in summary:
            summary[name]["erv_normalized_at_k"] = series[idx]
    decision_summary = {"k": recall_k, "erv_budget": erv_budget, "methods": summary}
    _atomic_write(out / "decision_summary.json",
                  json.dumps(decision_summary, indent=1, sort_keys=True).encode())
    print(f"decision series written for budgets {budgets} (recall k={recall_k})")
    return 0


REPORT_GUIDE = """\
## Practitioner decision guide

- Treating every exploited CVE as equally important: rank by exploitation
  probability alone and patch from the top.
- Weighting remediation by severity of impact: rank by the composite risk
  score, which trades a little raw detection for far better coverage of
  critical-severity exploited CVEs.
- Severity-only ranking performs near random chance on exploitation data and
  should not be the primary prioritization instrument.
"""


def cmd_report(config: RunConfig) -> int:
    out = _out(config)
    required = [out / "eval.json", out / "decision_summary.json", out / "manifest.json"]
    missing = [str(p) for p in required if not p.exists()]
    if missing:
        print(f"report inputs missing: {', '.join(missing)}", file=sys.stderr)
        return EXIT_REPORT
    eval_report = evalsuite.EvaluationReport.from_json((out / "eval.json").read_bytes())
    decision = json.loads((out / "decision_summary.json").read_text())
    manifest_bytes = (out / "manifest.json").read_bytes()
    manifest_digest = hashlib.sha256(manifest_bytes).hexdigest()

    methods = [m.value for m in config.methods]
    k = decision["k"]
    rows = [
        ("ROC-AUC", lambda m: eval_report.metrics[m]["roc_auc"]["value"]),
        ("AUPRC", lambda m: eval_report.metrics[m]["average_precision"]["value"]),
        (f"KEV Recall@{k}", lambda m: decision["methods"][m]["recall_at_k"]),
        (f"ERV@{decision['erv_budget']} (norm.)", lambda m: decision["methods"][m].get("erv_normalized_at_k")),
        (f"Critical Recall@{k}", lambda m: decision["methods"][m]["critical_recall_at_k"]),
    ]
    lines = [
        "# Vulnerability prioritization report",
        "",
        f"Run manifest digest: `{manifest_digest}`",
        f"Test partition: {eval_report.n} records, {eval_report.n_positive} exploited.",
        "",
        "## Performance profile",
        "",
        "| Metric | " + " | ".join(methods) + " |",
        "|" + "---|" * (len(methods) + 1),
    ]
    for name, getter in rows:
        cells = []
        for m in methods:
            v = getter(m)
            cells.append("n/a" if v is None else f"{v:.4f}")
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    lines += ["", REPORT_GUIDE]
    _atomic_write(out / "report.md", ("\n".join(lines)).encode())
    print(f"report written to {out / 'report.md'}")
    return 0


COMMANDS = {
    "fetch": (cmd_fetch, EXIT_FETCH),
    "build": (cmd_build, EXIT_BUILD),
    "score": (cmd_score, EXIT_BUILD),
    "train": (cmd_train, EXIT_TRAIN),
    "eval": (cmd_eval, 1),
    "decision": (cmd_decision, 1),
    "report": (cmd_report, EXIT_REPORT),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskrank", description=__doc__)
    parser.add_argument("--config", type=Path, help="flat key-value config file")
    parser.add_argument("--seed", type=int, help="random seed (default 42)")
    parser.add_argument("--offline", action="store_true", default=None,
                        help="never touch the network; require a warm cache")
    parser.add_argument("--output-dir", type=Path, help="run output directory")
    parser.add_argument("--cache-dir", type=Path, help="feed cache directory")
    parser.add_argument("--kev-window", type=int, dest="kev_window_days",
                        help="label positives only within N days of publication")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {
        "seed": args.seed,
        "offline": args.offline,
        "output_dir": str(args.output_dir) if args.output_dir else None,
        "cache_dir": str(args.cache_dir) if args.cache_dir else None,
        "kev_window_days": args.kev_window_days,
    }
    try:
        config = load_config(args.config, overrides)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE

    fn, error_code = COMMANDS[args.command]
    start = time.monotonic()
    lock = FileLock(str(_out(config) / ".riskrank.lock"))
    try:
        with lock:
            code = fn(config)
    except FeedError as e:
        print(f"feed error: {e}", file=sys.stderr)
        return EXIT_FETCH if args.command == "fetch" else error_code
    except corpus.CorpusError as e:
        print(f"corpus error: {e}", file=sys.stderr)
        return EXIT_BUILD if args.command in ("build", "score") else error_code
    except learner.LearnerError as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_TRAIN if args.command == "train" else error_code
    except (scoring.ScoringError, evalsuite.MetricError) as e:
        print(f"error: {e}", file=sys.stderr)
        return error_code
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return error_code
    if code == 0:
        _record_timing(config, args.command, time.monotonic() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
