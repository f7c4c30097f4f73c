import json

import pytest
from typer.testing import CliRunner

from syndy.main import EXIT_FAILURE, EXIT_VALIDATION, app
from syndy.orchestration.config import normalized_config_text
from tests.conftest import world_config

runner = CliRunner()


def write_config(path, config):
    path.write_text(normalized_config_text(config), encoding="utf-8")
    return path


def write_rows(path, rows):
    path.write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
    return path


@pytest.fixture
def built(tmp_path):
    """A config file and the dataset the pipeline command emits from it."""
    config = world_config(tmp_path)
    config_file = write_config(tmp_path / "config.json", config)
    result = runner.invoke(app, ["pipeline", "--config", str(config_file)])
    assert result.exit_code == 0, result.output
    return config_file, config.out_path


def test_help():
    result = runner.invoke(app, ["--help"])
    assert result.exit_code == 0
    assert "pipeline" in result.stdout
    assert "eval" in result.stdout


class TestValidateConfig:
    def test_valid_config_prints_normalized_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"topic": "vaccine safety", "seed": 3}))
        result = runner.invoke(app, ["validate-config", str(path)])
        assert result.exit_code == 0
        data = json.loads(result.stdout)
        assert data["seed"] == 3
        assert data["clustering"]["tau"] == 0.95

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"topic": "x", "clustering": {"tau": 1.5}}))
        result = runner.invoke(app, ["validate-config", str(path)])
        assert result.exit_code == EXIT_VALIDATION
        assert "tau out of (0,1]" in result.stdout


class TestPipeline:
    def test_pipeline_then_validate(self, built):
        config_file, out = built
        assert (out / "manifest.json").exists()
        result = runner.invoke(app, ["validate", str(out)])
        assert result.exit_code == 0
        assert "Dataset valid" in result.stdout

    def test_rerun_reports_cached_stages(self, built):
        config_file, _ = built
        result = runner.invoke(app, ["pipeline", "--config", str(config_file)])
        assert result.exit_code == 0
        assert "Cached: emit" in result.stdout
        assert "llm=0" in result.stdout

    def test_validate_reports_tampering(self, built):
        _, out = built
        (out / "test" / "claims.jsonl").write_text("")
        result = runner.invoke(app, ["validate", str(out)])
        assert result.exit_code == EXIT_VALIDATION
        assert "violations" in result.stdout

    def test_stage_failure_exits_2(self, tmp_path):
        config = world_config(tmp_path, topics=["alien landings"])
        config_file = write_config(tmp_path / "config.json", config)
        result = runner.invoke(app, ["pipeline", "--config", str(config_file)])
        assert result.exit_code == EXIT_FAILURE
        assert not config.out_path.exists()

    def test_flags_override_config(self, tmp_path):
        config = world_config(tmp_path)
        config_file = write_config(tmp_path / "config.json", config)
        result = runner.invoke(app, ["queries", "--config", str(config_file), "--n", "2", "--seed", "11"])
        assert result.exit_code == 0
        assert result.stdout.count("AND") == 2 * 3 * 2

    def test_bad_tau_flag(self, tmp_path):
        config_file = write_config(tmp_path / "config.json", world_config(tmp_path))
        result = runner.invoke(app, ["cluster", "--config", str(config_file), "--tau", "0"])
        assert result.exit_code == EXIT_VALIDATION


class TestExportAndEval:
    def test_relations_scored_against_themselves(self, built, tmp_path):
        _, out = built
        gold = tmp_path / "gold.jsonl"
        result = runner.invoke(app, ["export-relations", str(out), "--split", "train", "--out", str(gold)])
        assert result.exit_code == 0
        assert gold.read_text().strip()

        report = tmp_path / "f1.json"
        result = runner.invoke(app, ["eval", "f1", "--pred", str(gold), "--gold", str(gold), "--report", str(report)])
        assert result.exit_code == 0
        assert json.loads(report.read_text())["f1"]["macro_f1"] == 1.0

    def test_qrels_export_and_embedder_ranking(self, built, tmp_path):
        config_file, out = built
        qrels_dir = tmp_path / "qrels"
        result = runner.invoke(app, ["export-qrels", str(out), "--split", "train", "--out", str(qrels_dir)])
        assert result.exit_code == 0
        assert sorted(p.name for p in qrels_dir.iterdir()) == ["candidates.jsonl", "qrels.jsonl", "queries.jsonl"]

        report = tmp_path / "map.json"
        result = runner.invoke(
            app,
            ["eval", "map", "--qrels", str(qrels_dir), "--embedder", "--config", str(config_file), "--report", str(report)],
        )
        assert result.exit_code == 0
        [(name, scores)] = json.loads(report.read_text()).items()
        assert name.startswith("embedder:")
        assert 0.0 < scores["map_at_k"] <= 1.0
        assert scores["k"] == 20

    def test_saved_ranking_scores_the_same_as_a_run(self, built, tmp_path):
        config_file, out = built
        qrels_dir = tmp_path / "qrels"
        runner.invoke(app, ["export-qrels", str(out), "--split", "train", "--out", str(qrels_dir)])
        saved = tmp_path / "runs" / "embedder.jsonl"
        live = tmp_path / "live.json"
        result = runner.invoke(
            app,
            [
                "eval",
                "map",
                "--qrels",
                str(qrels_dir),
                "--embedder",
                "--config",
                str(config_file),
                "--save-ranking",
                str(saved),
                "--report",
                str(live),
            ],
        )
        assert result.exit_code == 0, result.output
        assert saved.exists()

        replay = tmp_path / "replay.json"
        result = runner.invoke(app, ["eval", "map", "--qrels", str(qrels_dir), "--run", str(saved), "--report", str(replay)])
        assert result.exit_code == 0, result.output
        [live_scores] = json.loads(live.read_text()).values()
        assert json.loads(replay.read_text())[str(saved)] == live_scores

    def test_save_ranking_needs_embedder(self, tmp_path):
        result = runner.invoke(
            app, ["eval", "map", "--qrels", str(tmp_path), "--run", "r.jsonl", "--save-ranking", str(tmp_path / "x.jsonl")]
        )
        assert result.exit_code == EXIT_VALIDATION

    def test_unknown_task(self, built, tmp_path):
        _, out = built
        result = runner.invoke(app, ["export-qrels", str(out), "--task", "stance", "--out", str(tmp_path / "q")])
        assert result.exit_code == EXIT_VALIDATION

    def test_map_of_run_file(self, tmp_path):
        qrels_dir = tmp_path / "qrels"
        qrels_dir.mkdir()
        write_rows(qrels_dir / "queries.jsonl", [{"query_id": "q1", "text": "a"}, {"query_id": "q2", "text": "b"}])
        write_rows(qrels_dir / "candidates.jsonl", [{"cand_id": f"c{i}", "text": f"t{i}"} for i in range(1, 4)])
        write_rows(qrels_dir / "qrels.jsonl", [{"query_id": "q1", "cand_id": "c1"}, {"query_id": "q2", "cand_id": "c3"}])
        run = write_rows(
            tmp_path / "run.jsonl",
            [
                {"query_id": "q1", "cand_id": "c1", "score": 0.9},
                {"query_id": "q1", "cand_id": "c2", "score": 0.1},
                {"query_id": "q2", "cand_id": "c2", "score": 0.8},
                {"query_id": "q2", "cand_id": "c3", "score": 0.5},
            ],
        )
        report = tmp_path / "map.json"
        result = runner.invoke(
            app, ["eval", "map", "--qrels", str(qrels_dir), "--run", str(run), "--k", "2", "--report", str(report)]
        )
        assert result.exit_code == 0
        scores = json.loads(report.read_text())[str(run)]
        assert scores["map_at_k"] == pytest.approx(0.75)
        assert scores["per_query_ap"] == {"q1": 1.0, "q2": 0.5}

    def test_map_needs_something_to_score(self, tmp_path):
        result = runner.invoke(app, ["eval", "map", "--qrels", str(tmp_path)])
        assert result.exit_code == EXIT_VALIDATION

    def test_f1_rejects_rows_without_labels(self, tmp_path):
        pred = write_rows(tmp_path / "pred.jsonl", [{"item_id": "a"}])
        gold = write_rows(tmp_path / "gold.jsonl", [{"item_id": "a", "label": "SUPPORT"}])
        result = runner.invoke(app, ["eval", "f1", "--pred", str(pred), "--gold", str(gold)])
        assert result.exit_code == EXIT_VALIDATION
