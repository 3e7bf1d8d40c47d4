"""Integration tests for the speech_mrl.py command line on the smoke config."""

import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

pytestmark = pytest.mark.integration

SMOKE = "configs/smoke.yaml"
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


def _cli(project_root, *args):
    return subprocess.run(
        [sys.executable, "speech_mrl.py", *args],
        capture_output=True,
        text=True,
        cwd=project_root,
    )


def _error(result):
    """The JSON error record is the last line on stderr."""
    return json.loads(result.stderr.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    """Run gen through index once for the whole module."""
    run_dir = tmp_path_factory.mktemp("smoke_run")
    for command in ("gen", "train", "embed", "index"):
        result = _cli(PROJECT_ROOT, command, "--config", SMOKE, "--run-dir", str(run_dir))
        assert result.returncode == 0, result.stderr
    return run_dir


class TestArgumentHandling:
    """Test cases for argument parsing and error reporting."""

    def test_help(self, project_root):
        result = _cli(project_root, "--help")
        assert result.returncode == 0
        for command in ("gen", "eval-retrieval", "analyze-rank", "bench-cost", "repro-findings"):
            assert command in result.stdout
        assert "--run-dir" in result.stdout

    def test_config_required(self, project_root):
        result = _cli(project_root, "gen")
        assert result.returncode == 2
        assert "--config" in result.stderr

    def test_unknown_command(self, project_root):
        assert _cli(project_root, "serve", "--config", SMOKE).returncode == 2

    def test_missing_config_file(self, project_root, tmp_path):
        result = _cli(project_root, "gen", "--config", str(tmp_path / "missing.yaml"))
        assert result.returncode == 1
        record = _error(result)
        assert record["command"] == "gen"
        assert record["error"] == "ConfigError"
        assert "Config file not found" in record["message"]

    def test_invalid_config(self, project_root, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("data:\n  topicz: 3\n", encoding="utf-8")
        result = _cli(project_root, "gen", "--config", str(path), "--run-dir", str(tmp_path / "run"))
        assert result.returncode == 1
        assert "data.topicz: unknown key" in _error(result)["message"]

    def test_eval_before_gen(self, project_root, tmp_path):
        result = _cli(project_root, "eval-retrieval", "--config", SMOKE, "--run-dir", str(tmp_path))
        assert result.returncode == 1
        record = _error(result)
        assert record["error"] == "StaleArtifactError"
        assert "run `gen` first" in record["message"]


class TestPipeline:
    """Test cases for the command sequence on one shared run."""

    def test_gen_is_byte_reproducible(self, project_root, tmp_path):
        dirs = [tmp_path / "a", tmp_path / "b"]
        for run_dir in dirs:
            assert _cli(project_root, "gen", "--config", SMOKE, "--run-dir", str(run_dir)).returncode == 0
        for name in ("train.jsonl", "test.jsonl", "test_degraded.jsonl", "intents.jsonl", "keywords.jsonl"):
            assert (dirs[0] / "corpus" / name).read_bytes() == (dirs[1] / "corpus" / name).read_bytes()

    def test_seed_override_changes_corpus(self, project_root, tmp_path):
        _cli(project_root, "gen", "--config", SMOKE, "--run-dir", str(tmp_path / "a"))
        _cli(project_root, "gen", "--config", SMOKE, "--run-dir", str(tmp_path / "b"), "--seed", "99")
        assert (tmp_path / "a" / "corpus" / "test.jsonl").read_bytes() != (tmp_path / "b" / "corpus" / "test.jsonl").read_bytes()

    def test_training_artifacts(self, pipeline_run):
        for variant in ("text-only", "late-fusion", "dual-retrieval", "dual-alignment"):
            assert (pipeline_run / "checkpoints" / f"{variant}.ckpt").is_file()
            assert (pipeline_run / "curves" / f"{variant}.jsonl").is_file()
        assert (pipeline_run / "manifests" / "train.json").is_file()

    def test_search_by_document(self, project_root, pipeline_run):
        doc_id = int(np.load(pipeline_run / "embeddings" / "document_ids.npy")[0])
        result = _cli(project_root, "search", "--config", SMOKE, "--run-dir", str(pipeline_run),
                      "--doc-id", str(doc_id), "--dim", "8", "--k", "3")
        assert result.returncode == 0, result.stderr
        payload = json.loads(result.stdout.strip().splitlines()[-1])
        assert payload["dim"] == 8
        assert len(payload["hits"]) == 3
        assert payload["hits"][0]["id"] == doc_id
        assert (pipeline_run / "reports" / "search.json").is_file()

    def test_search_by_query_file(self, project_root, pipeline_run, tmp_path):
        query = np.load(pipeline_run / "embeddings" / "queries_late-fusion.npy")[0]
        path = tmp_path / "q.npy"
        np.save(path, query)
        result = _cli(project_root, "search", "--config", SMOKE, "--run-dir", str(pipeline_run),
                      "--query-file", str(path))
        assert result.returncode == 0, result.stderr
        payload = json.loads(result.stdout.strip().splitlines()[-1])
        assert payload["dim"] == 16
        assert len(payload["hits"]) == 10

    def test_search_unknown_document(self, project_root, pipeline_run):
        result = _cli(project_root, "search", "--config", SMOKE, "--run-dir", str(pipeline_run), "--doc-id", "-5")
        assert result.returncode == 1
        assert "not in the index" in _error(result)["message"]

    @pytest.mark.parametrize("command,artifacts", [
        ("eval-retrieval", ["reports/retrieval.jsonl", "plots/table_retrieval.tsv"]),
        ("eval-kws", ["reports/kws.jsonl", "reports/prompt_ablation.jsonl", "plots/table_kws.tsv"]),
        ("eval-intent", ["reports/intent.jsonl", "plots/fewshot_recall.tsv"]),
        ("analyze-rank", ["reports/energy.jsonl", "plots/energy_fraction.tsv", "plots/energy_curves.tsv"]),
        ("bench-cost", ["reports/bench.jsonl", "reports/bench_bytes.tsv", "plots/costs.tsv"]),
    ])
    def test_downstream_commands(self, project_root, pipeline_run, command, artifacts):
        result = _cli(project_root, command, "--config", SMOKE, "--run-dir", str(pipeline_run))
        assert result.returncode == 0, result.stderr
        for rel in artifacts:
            assert (pipeline_run / rel).is_file(), rel
        assert (pipeline_run / "manifests" / f"{command}.json").is_file()

    def test_retrieval_report_covers_dims(self, project_root, pipeline_run):
        assert _cli(project_root, "eval-retrieval", "--config", SMOKE, "--run-dir", str(pipeline_run)).returncode == 0
        header = (pipeline_run / "plots" / "table_retrieval.tsv").read_text(encoding="utf-8").splitlines()[0]
        assert header == "task\t8\t16"

    def test_modified_upstream_is_stale(self, project_root, tmp_path):
        run_dir = tmp_path / "run"
        assert _cli(project_root, "gen", "--config", SMOKE, "--run-dir", str(run_dir)).returncode == 0
        with open(run_dir / "corpus" / "train.jsonl", "a", encoding="utf-8") as f:
            f.write("\n")
        result = _cli(project_root, "train", "--config", SMOKE, "--run-dir", str(run_dir))
        assert result.returncode == 1
        assert "changed since it was written" in _error(result)["message"]

    def test_unexpected_error_is_reported(self, project_root, pipeline_run, tmp_path):
        run_dir = tmp_path / "run"
        shutil.copytree(pipeline_run, run_dir)
        path = run_dir / "corpus" / "intents.jsonl"
        lines = path.read_text(encoding="utf-8").splitlines()
        header = json.loads(lines[0])
        del header["labels"]
        path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n", encoding="utf-8")
        result = _cli(project_root, "eval-intent", "--config", SMOKE, "--run-dir", str(run_dir), "--force")
        assert result.returncode == 1
        record = _error(result)
        assert record["command"] == "eval-intent"
        assert record["error"] == "KeyError"


class TestReproducibleRun:
    """Test cases for repeating the whole pipeline on the smoke config."""

    def test_repro_findings_twice_is_byte_identical(self, project_root, tmp_path):
        dirs = [tmp_path / "a", tmp_path / "b"]
        for run_dir in dirs:
            # trend checks may fail on the smoke sizes; only the artifacts matter here
            _cli(project_root, "repro-findings", "--config", SMOKE, "--run-dir", str(run_dir))
        manifests = sorted(p.name for p in (dirs[0] / "manifests").glob("*.json"))
        assert manifests == sorted(p.name for p in (dirs[1] / "manifests").glob("*.json"))
        assert "repro-findings.json" in manifests
        volatile = set()
        for name in manifests:
            assert (dirs[0] / "manifests" / name).read_bytes() == (dirs[1] / "manifests" / name).read_bytes(), name
            volatile.update(json.loads((dirs[0] / "manifests" / name).read_text(encoding="utf-8"))["volatile"])
        for folder in ("reports", "plots"):
            for path in sorted((dirs[0] / folder).rglob("*")):
                rel = path.relative_to(dirs[0]).as_posix()
                if path.is_file() and rel not in volatile:
                    assert path.read_bytes() == (dirs[1] / rel).read_bytes(), rel


@pytest.mark.acceptance
class TestReproFindings:
    """Full-size run; selected with ``pytest -m acceptance``."""

    def test_default_config_trends_hold(self, project_root, tmp_path):
        result = _cli(project_root, "repro-findings", "--config", "configs/default.yaml", "--run-dir", str(tmp_path))
        assert result.returncode == 0, (tmp_path / "reports" / "findings.tsv").read_text(encoding="utf-8")
        lines = (tmp_path / "reports" / "findings.tsv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "check\tstatus\tdetail"
        assert all(line.split("\t")[1] != "fail" for line in lines[1:])
