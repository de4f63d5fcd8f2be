import hashlib
import json
from pathlib import Path

import pytest

from riskrank.cli import main
from riskrank.fixtures import write_fixture_feeds

FIXTURE_DIR = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="module")
def feed_paths(tmp_path_factory):
    if FIXTURE_DIR.exists():
        return {
            "cve": FIXTURE_DIR / "cve.jsonl",
            "epss": FIXTURE_DIR / "epss.csv",
            "kev": FIXTURE_DIR / "kev.json",
        }
    return write_fixture_feeds(tmp_path_factory.mktemp("feeds"))


@pytest.fixture(scope="module")
def run_env(tmp_path_factory, feed_paths):
    tmp_path = tmp_path_factory.mktemp("run")
    config_path = tmp_path / "riskrank.conf"
    config_path.write_text(
        f"kev_url = {feed_paths['kev']}\n"
        f"epss_url = {feed_paths['epss']}\n"
        f"cve_source = {feed_paths['cve']}\n"
        f"cache_dir = {tmp_path / 'cache'}\n"
        f"output_dir = {tmp_path / 'out'}\n"
        "resamples = 200\n"
        "budgets = 50,100,200\n"
        "recall_k = 100\n"
    )
    return config_path, tmp_path / "out"


def run(config_path, *args):
    return main(["--config", str(config_path), "--offline", *args])


class TestFetchBuild:
    def test_fetch_offline_with_file_sources(self, run_env):
        config_path, _ = run_env
        assert run(config_path, "fetch") == 0

    def test_fetch_offline_cold_cache_exit_3(self, tmp_path):
        config_path = tmp_path / "riskrank.conf"
        config_path.write_text(
            f"cache_dir = {tmp_path / 'cache'}\n"
            f"output_dir = {tmp_path / 'out'}\n"
        )
        assert run(config_path, "fetch") == 3

    def test_build_fixture_counts(self, run_env):
        config_path, out = run_env
        assert run(config_path, "build") == 0
        provenance = json.loads((out / "provenance.json").read_text())
        assert provenance["kept"] == 2000
        assert provenance["positives"] == 10

    def test_rebuild_identical_digest(self, run_env):
        config_path, out = run_env
        run(config_path, "build")
        first = hashlib.sha256((out / "dataset.jsonl").read_bytes()).hexdigest()
        run(config_path, "build")
        second = hashlib.sha256((out / "dataset.jsonl").read_bytes()).hexdigest()
        assert first == second

    def test_empty_kev_zero_positives(self, tmp_path, feed_paths):
        empty_kev = tmp_path / "kev_empty.json"
        empty_kev.write_text('{"vulnerabilities": []}')
        config_path = tmp_path / "conf"
        config_path.write_text(
            f"kev_url = {empty_kev}\n"
            f"epss_url = {feed_paths['epss']}\n"
            f"cve_source = {feed_paths['cve']}\n"
            f"cache_dir = {tmp_path / 'cache'}\n"
            f"output_dir = {tmp_path / 'out'}\n"
        )
        assert run(config_path, "build") == 0
        provenance = json.loads((tmp_path / "out" / "provenance.json").read_text())
        assert provenance["positives"] == 0


class TestScoreTrain:
    def test_score_outputs(self, run_env):
        config_path, out = run_env
        run(config_path, "build")
        assert run(config_path, "score") == 0
        lines = (out / "scores.csv").read_text().splitlines()
        assert lines[0] == "cve_id,method,score,rank"
        assert len(lines) == 1 + 3 * 2000
        sm_scores = {float(l.split(",")[2]) for l in lines[1:] if ",sm_ordinal," in l}
        assert sm_scores <= {1.0, 2.0, 3.0, 4.0}

    def test_score_deterministic(self, run_env):
        config_path, out = run_env
        run(config_path, "build")
        run(config_path, "score")
        first = (out / "scores.csv").read_bytes()
        run(config_path, "score")
        assert (out / "scores.csv").read_bytes() == first

    def test_train_planted_signal(self, run_env):
        config_path, out = run_env
        run(config_path, "build")
        assert run(config_path, "train") == 0
        model = json.loads((out / "model_epss.json").read_text())
        assert model["converged"]
        assert model["beta1"] > 0
        cv = (out / "cv_kri.csv").read_text().splitlines()
        assert cv[0] == "fold,selected_c,roc_auc,auprc"
        assert len(cv) == 8


@pytest.fixture(scope="module")
def full_run(run_env):
    config_path, out = run_env
    for cmd in ("build", "score", "train", "eval", "decision"):
        assert run(config_path, cmd) == 0, cmd
    return config_path, out


class TestEvalDecisionReport:
    def test_eval_report_schema(self, full_run):
        _, out = full_run
        doc = json.loads((out / "eval.json").read_text())
        assert set(doc) == {"n", "n_positive", "metrics", "comparisons", "correlations"}
        for method in ("sm_ordinal", "epss", "kri"):
            assert set(doc["metrics"][method]) == {"roc_auc", "average_precision", "brier"}
        for comp in doc["comparisons"]:
            assert comp["p_adjusted"] >= comp["p_value"]
        assert set(doc["correlations"]) == {"sm", "kri", "kev"}

    def test_eval_ordering_significant(self, full_run):
        _, out = full_run
        doc = json.loads((out / "eval.json").read_text())
        delong = {(c["method_a"], c["method_b"]): c for c in doc["comparisons"]
                  if c["test"] == "delong"}
        kri_vs_sm = delong[("sm_ordinal", "kri")]
        assert kri_vs_sm["delta"] < 0  # sm below kri
        assert kri_vs_sm["p_adjusted"] < 0.05

    def test_self_comparison_null(self, full_run):
        _, out = full_run
        import numpy as np
        from riskrank import evalsuite
        doc = json.loads((out / "eval.json").read_text())
        rng = np.random.default_rng(0)
        scores = rng.random(100)
        labels = rng.random(100) < 0.2
        labels[:2] = [True, False]
        r = evalsuite.delong_test(scores, scores, labels)
        assert (r.delta, r.p_value) == (0.0, 1.0)
        assert doc["n"] > 0

    def test_decision_outputs(self, full_run):
        _, out = full_run
        fig5 = (out / "fig5.csv").read_text().splitlines()
        assert fig5[0] == "k,method,precision"
        assert len(fig5) == 1 + 3 * 3  # methods x budgets
        fig6 = (out / "fig6.csv").read_text().splitlines()
        assert fig6[0] == "band,method,recall_at_k"
        fig7 = (out / "fig7.csv").read_text().splitlines()
        assert fig7[0] == "budget,method,erv_raw,erv_normalized,lift"
        oracle_rows = [l for l in fig7[1:] if l.split(",")[1] == "oracle"]
        assert all(float(l.split(",")[3]) == 1.0 for l in oracle_rows)

    def test_report(self, full_run):
        config_path, out = full_run
        assert run(config_path, "report") == 0
        text = (out / "report.md").read_text()
        assert "ROC-AUC" in text and "AUPRC" in text
        manifest_digest = hashlib.sha256((out / "manifest.json").read_bytes()).hexdigest()
        assert manifest_digest in text
        first = (out / "report.md").read_bytes()
        assert run(config_path, "report") == 0
        assert (out / "report.md").read_bytes() == first

    def test_report_missing_inputs_exit_6(self, run_env, tmp_path, monkeypatch):
        config_path, _ = run_env
        monkeypatch.setenv("RISKRANK_OUTPUT_DIR", str(tmp_path / "fresh"))
        assert run(config_path, "report") == 6


def test_env_override(run_env, monkeypatch, tmp_path):
    config_path, _ = run_env
    other = tmp_path / "other_out"
    monkeypatch.setenv("RISKRANK_OUTPUT_DIR", str(other))
    assert run(config_path, "build") == 0
    assert (other / "dataset.jsonl").exists()
