from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from polya_forge.chatml import parse_training_config
from polya_forge.cli import main
from polya_forge.evaluation import write_annotations
from polya_forge.model import read_dialogues

from conftest import DATA_DIR, make_dialogue
from table2 import _c, build_domain_corpus
from polya_forge.model import MathDomain


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workdir(tmp_path):
    gsm8k = tmp_path / "gsm8k.jsonl"
    gsm8k.write_text((DATA_DIR / "gsm8k_fixture.jsonl").read_text(encoding="utf-8"))
    personas = tmp_path / "personas.jsonl"
    personas.write_text((DATA_DIR / "personas.jsonl").read_text(encoding="utf-8"))
    return tmp_path


def invoke(runner, *args):
    return runner.invoke(main, [str(a) for a in args])


def test_unknown_subcommand_exits_2(runner):
    result = invoke(runner, "frobnicate")
    assert result.exit_code == 2
    assert "Usage" in result.stderr or "No such command" in result.stderr


def test_ingest_writes_plan(runner, workdir):
    plan_path = workdir / "plan.json"
    result = invoke(
        runner, "ingest",
        "--gsm8k", workdir / "gsm8k.jsonl",
        "--personas", workdir / "personas.jsonl",
        "--count", 6, "--seed", 3, "--out", plan_path,
    )
    assert result.exit_code == 0, result.output + result.stderr
    plan = json.loads(plan_path.read_text())
    assert plan["seed"] == 3
    assert len(plan["pairs"]) == 6


def test_ingest_bad_file_exits_1(runner, workdir):
    bad = workdir / "bad.jsonl"
    bad.write_text('{"question": "q", "answer": "no marker"}\n')
    result = invoke(
        runner, "ingest", "--gsm8k", bad, "--personas", workdir / "personas.jsonl",
        "--count", 2, "--out", workdir / "plan.json",
    )
    assert result.exit_code == 1
    assert "line 1" in result.stderr


def _make_plan(runner, workdir, count=4, seed=7) -> Path:
    plan_path = workdir / "plan.json"
    result = invoke(
        runner, "ingest",
        "--gsm8k", workdir / "gsm8k.jsonl", "--personas", workdir / "personas.jsonl",
        "--count", count, "--seed", seed, "--out", plan_path,
    )
    assert result.exit_code == 0
    return plan_path


def test_generate_is_seed_reproducible(runner, workdir):
    plan = _make_plan(runner, workdir)
    outputs = []
    for name in ("a.jsonl", "b.jsonl"):
        out = workdir / name
        result = invoke(
            runner, "generate",
            "--plan", plan, "--gsm8k", workdir / "gsm8k.jsonl",
            "--personas", workdir / "personas.jsonl",
            "--prompt-version", "v1", "--out", out, "--parallelism", 2,
        )
        assert result.exit_code == 0, result.stderr
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]
    manifest = json.loads((workdir / "a.manifest.json").read_text())
    assert manifest["prompt_version"] == "v1"
    assert all(r["status"] == "ok" for r in manifest["records"])


def test_full_pipeline_generate_validate_chatml_sample(runner, workdir):
    plan = _make_plan(runner, workdir, count=5)
    corpus = workdir / "corpus.jsonl"
    assert invoke(
        runner, "generate", "--plan", plan,
        "--gsm8k", workdir / "gsm8k.jsonl", "--personas", workdir / "personas.jsonl",
        "--out", corpus,
    ).exit_code == 0

    assert invoke(runner, "validate", "--in", corpus).exit_code == 0

    train = workdir / "train.jsonl"
    sidecar = workdir / "masks.jsonl"
    config_out = workdir / "trainer.yml"
    result = invoke(
        runner, "chatml", "--in", corpus, "--out", train,
        "--mask-sidecar", sidecar, "--emit-config", config_out,
    )
    assert result.exit_code == 0, result.stderr
    train_lines = train.read_text().splitlines()
    mask_lines = sidecar.read_text().splitlines()
    assert len(train_lines) == 5 and len(mask_lines) == 5
    first = json.loads(train_lines[0])
    assert first["messages"][0]["role"] == "system"
    assert {m["role"] for m in first["messages"][1:]} == {"user", "assistant"}
    spans = json.loads(mask_lines[0])["spans"]
    assert spans and all(s < e for s, e in spans)
    cfg = parse_training_config(config_out.read_text())
    assert cfg.learning_rate == 0.0002
    assert cfg.dataset_path == str(train)

    sample = workdir / "sample.jsonl"
    assert invoke(runner, "review-sample", "--corpus", corpus, "--k", 2, "--seed", 1, "--out", sample).exit_code == 0
    with open(sample, encoding="utf-8") as fp:
        assert len(list(read_dialogues(fp))) == 2


def test_chatml_no_system_omits_system_message(runner, workdir):
    plan = _make_plan(runner, workdir, count=2)
    corpus = workdir / "corpus.jsonl"
    invoke(
        runner, "generate", "--plan", plan, "--gsm8k", workdir / "gsm8k.jsonl",
        "--personas", workdir / "personas.jsonl", "--out", corpus,
    )
    train = workdir / "train.jsonl"
    assert invoke(runner, "chatml", "--in", corpus, "--out", train, "--no-system").exit_code == 0
    first = json.loads(train.read_text().splitlines()[0])
    assert first["messages"][0]["role"] == "user"


def test_validate_reports_violations_and_exits_1(runner, workdir):
    from polya_forge.model import Dialogue, Speaker, Turn, dialogue_to_record

    bad = Dialogue(
        id="bad", problem_id="p",
        turns=(Turn(Speaker.HUMAN, "a"), Turn(Speaker.HUMAN, "b")),
    )
    path = workdir / "dialogues.jsonl"
    path.write_text(json.dumps(dialogue_to_record(bad)) + "\n")
    result = invoke(runner, "validate", "--in", path)
    assert result.exit_code == 1
    assert "NonAlternating" in result.stderr


def test_evaluate_renders_report(runner, workdir):
    corpus = build_domain_corpus(
        "polya-v2", MathDomain.UNSPECIFIED, _c(310, 189, 267, 234, 0), 110, 180, "x"
    )
    path = workdir / "annotations.jsonl"
    with open(path, "w", encoding="utf-8") as fp:
        write_annotations(corpus, fp)
    result = invoke(runner, "evaluate", "--annotations", path, "--group-by", "model")
    assert result.exit_code == 0
    assert "31.0% | 18.9% | 26.7% | 23.4% | 0.0%" in result.output

    result = invoke(runner, "evaluate", "--annotations", path, "--format", "json")
    rows = json.loads(result.output)
    assert rows[0]["model_tag"] == "polya-v2"


def test_evaluate_malformed_annotations_exit_1(runner, workdir):
    path = workdir / "annotations.jsonl"
    path.write_text('{"id": "d"\n')
    result = invoke(runner, "evaluate", "--annotations", path)
    assert result.exit_code == 1
    assert "line 1" in result.stderr


def test_survey_scores_csv_and_json(runner, workdir):
    responses = workdir / "responses.jsonl"
    lines = []
    for rater, values in enumerate([(5, 4, 4), (4, 4, 5)]):
        ratings = {
            f"pedagogical_validity.self_level.{n}": v for n, v in zip((1, 2, 3), values)
        }
        lines.append(json.dumps({"rater_id": f"e{rater}", "ratings": ratings}))
    responses.write_text("\n".join(lines) + "\n")

    out = workdir / "scores.csv"
    result = invoke(runner, "survey", "--responses", responses, "--out", out)
    assert result.exit_code == 0
    assert "Self-level Feedback" in out.read_text()

    result = invoke(runner, "survey", "--responses", responses, "--format", "json")
    assert result.exit_code == 0
    body = json.loads(result.output)
    assert body["sections"][0]["section"] == "Self-level Feedback"


def test_survey_out_of_scale_exit_1(runner, workdir):
    responses = workdir / "responses.jsonl"
    responses.write_text(
        json.dumps({"rater_id": "e", "ratings": {"pedagogical_validity.self_level.1": 9}}) + "\n"
    )
    result = invoke(runner, "survey", "--responses", responses)
    assert result.exit_code == 1
    assert "outside" in result.stderr


def test_config_file_discovery(runner, workdir, monkeypatch):
    config = workdir / "polya-forge.toml"
    config.write_text('[global]\nlog_level = "INFO"\n\n[endpoints.local-mock]\nbase_url = "mock:dialogue"\n')
    monkeypatch.setenv("POLYA_CONFIG", str(config))
    plan = _make_plan(runner, workdir, count=2)
    corpus = workdir / "corpus.jsonl"
    result = invoke(
        runner, "generate", "--plan", plan, "--gsm8k", workdir / "gsm8k.jsonl",
        "--personas", workdir / "personas.jsonl", "--endpoint", "local-mock", "--out", corpus,
    )
    assert result.exit_code == 0, result.stderr
    manifest = json.loads((workdir / "corpus.manifest.json").read_text())
    assert manifest["endpoint"]["base_url"] == "mock:dialogue"
