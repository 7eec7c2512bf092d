"""polya-forge: single entry point wiring every stage into subcommands.

Exit codes: 0 success, 1 data/validation errors, 2 usage errors. Diagnostics
go to stderr; data goes to files or stdout. Config discovery: --config, then
$POLYA_CONFIG, then ./polya-forge.toml.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from . import chatml as chatml_mod
from . import evaluation as eval_mod
from . import ingest as ingest_mod
from . import survey as survey_mod
from . import synth as synth_mod
from .model import (
    MalformedRecord,
    dialogue_to_record,
    read_dialogues,
    validate_dialogue,
    ValidationPolicy,
    write_dialogues,
)
from .prompts import (
    LIVE_INSTRUCTION,
    PromptError,
    instructional_system_text,
    load_default_elements,
    load_prompt_elements,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("polya_forge")

CONFIG_ENV = "POLYA_CONFIG"
DEFAULT_CONFIG = "polya-forge.toml"


def _load_config(explicit: str | None) -> dict:
    path = explicit or os.environ.get(CONFIG_ENV)
    if path is None and Path(DEFAULT_CONFIG).is_file():
        path = DEFAULT_CONFIG
    if path is None:
        return {}
    with open(path, "rb") as fp:
        return tomllib.load(fp)


def _fail(message: str) -> SystemExit:
    click.echo(f"error: {message}", err=True)
    return SystemExit(1)


def _elements(version: str, prompt_file: str | None):
    if prompt_file:
        return load_prompt_elements(Path(prompt_file))
    return load_default_elements(version)


def _endpoint_config(ctx_config: dict, name: str | None, base_url: str | None, model: str | None) -> synth_mod.EndpointConfig:
    if base_url:
        return synth_mod.EndpointConfig(base_url=base_url, model_name=model or "custom")
    endpoints = {}
    if "endpoints" in ctx_config:
        for ep_name, entry in ctx_config["endpoints"].items():
            endpoints[ep_name] = synth_mod.EndpointConfig(
                base_url=entry["base_url"],
                model_name=entry.get("model_name", ep_name),
                api_key=entry.get("api_key"),
                temperature=entry.get("temperature", 0.7),
                max_output_tokens=entry.get("max_output_tokens", 1024),
                timeout=entry.get("timeout", 60.0),
                max_retries=entry.get("max_retries", 3),
            )
    wanted = name or ctx_config.get("global", {}).get("endpoint")
    if wanted:
        if wanted not in endpoints:
            raise _fail(f"endpoint {wanted!r} not found in config")
        return endpoints[wanted]
    # safe default: the deterministic in-process mock
    return synth_mod.EndpointConfig(base_url="mock:dialogue", model_name="mock")


@click.group()
@click.option("--config", "config_path", default=None, help="Path to a polya-forge.toml config.")
@click.option("--log-level", default=None, help="Logging level (default from config or WARNING).")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, log_level: str | None):
    """Synthesize, pack, and evaluate stage-scaffolded tutoring dialogues."""
    ctx.ensure_object(dict)
    config = _load_config(config_path)
    level = log_level or config.get("global", {}).get("log_level", "WARNING")
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level.upper(), logging.WARNING))
    ctx.obj["config"] = config


@main.command()
@click.option("--gsm8k", "gsm8k_path", required=True, type=click.Path(exists=True))
@click.option("--personas", "personas_path", required=True, type=click.Path(exists=True))
@click.option("--count", required=True, type=int)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def ingest(gsm8k_path: str, personas_path: str, count: int, seed: int, out_path: str):
    """Parse problems and personas; write a pairing plan."""
    try:
        with open(gsm8k_path, encoding="utf-8") as fp:
            problems = ingest_mod.parse_gsm8k(fp)
        with open(personas_path, encoding="utf-8") as fp:
            personas = ingest_mod.load_personas(fp)
        plan = ingest_mod.make_pairing(problems, personas, count, seed)
    except ingest_mod.IngestError as exc:
        raise _fail(str(exc))
    Path(out_path).write_text(plan.to_json() + "\n", encoding="utf-8")
    click.echo(
        f"paired {len(problems)} problems x {len(personas)} personas -> {count} pairs (seed {seed})",
        err=True,
    )


@main.command()
@click.option("--plan", "plan_path", required=True, type=click.Path(exists=True))
@click.option("--gsm8k", "gsm8k_path", required=True, type=click.Path(exists=True))
@click.option("--personas", "personas_path", required=True, type=click.Path(exists=True))
@click.option("--prompt-version", default="v2", show_default=True)
@click.option("--prompt-file", default=None, type=click.Path(exists=True))
@click.option("--endpoint", "endpoint_name", default=None, help="Named endpoint from config.")
@click.option("--base-url", default=None, help="Ad hoc endpoint base URL (incl. /v1), or mock:dialogue.")
@click.option("--model", default=None, help="Model name for ad hoc endpoints.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--parallelism", default=1, type=int, show_default=True)
@click.option("--retry-failed", is_flag=True, help="Regenerate only non-Ok records of an existing corpus.")
@click.pass_context
def generate(
    ctx: click.Context,
    plan_path: str,
    gsm8k_path: str,
    personas_path: str,
    prompt_version: str,
    prompt_file: str | None,
    endpoint_name: str | None,
    base_url: str | None,
    model: str | None,
    out_path: str,
    parallelism: int,
    retry_failed: bool,
):
    """Generate a dialogue corpus for a pairing plan."""
    cfg = _endpoint_config(ctx.obj["config"], endpoint_name, base_url, model)
    try:
        plan = ingest_mod.PairingPlan.from_json(Path(plan_path).read_text(encoding="utf-8"))
        with open(gsm8k_path, encoding="utf-8") as fp:
            problems = ingest_mod.parse_gsm8k(fp)
        with open(personas_path, encoding="utf-8") as fp:
            personas = ingest_mod.load_personas(fp)
        elements = _elements(prompt_version, prompt_file)
    except (ingest_mod.IngestError, PromptError) as exc:
        raise _fail(str(exc))

    retry_of = None
    manifest_path = Path(out_path).with_suffix(".manifest.json")
    if retry_failed:
        if not (Path(out_path).exists() and manifest_path.exists()):
            raise _fail("--retry-failed needs an existing corpus and manifest")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        with open(out_path, encoding="utf-8") as fp:
            prior = list(read_dialogues(fp))
        retry_of = synth_mod.records_from_manifest(manifest, prior)

    try:
        records = synth_mod.generate_corpus(
            plan, elements, cfg, problems, personas, parallelism=parallelism, retry_of=retry_of
        )
    except synth_mod.ConfigError as exc:
        raise _fail(str(exc))

    with open(out_path, "w", encoding="utf-8") as fp:
        write_dialogues((r.dialogue for r in records if r.ok), fp)
    manifest_path.write_text(
        json.dumps(synth_mod.corpus_manifest(records, plan, elements.version, cfg), ensure_ascii=False, indent=2)
        + "\n",
        encoding="utf-8",
    )
    n_ok = sum(1 for r in records if r.ok)
    click.echo(f"generated {n_ok}/{len(records)} dialogues -> {out_path}", err=True)
    if n_ok < len(records):
        raise SystemExit(1)


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--min-turns", default=2, type=int, show_default=True)
@click.option("--max-turns", default=60, type=int, show_default=True)
def validate(in_path: str, min_turns: int, max_turns: int):
    """Structurally validate a dialogue JSONL file."""
    policy = ValidationPolicy(min_turns=min_turns, max_turns=max_turns)
    n = 0
    bad = 0
    try:
        with open(in_path, encoding="utf-8") as fp:
            for dialogue in read_dialogues(fp):
                n += 1
                report = validate_dialogue(dialogue, policy)
                if not report.is_valid:
                    bad += 1
                    for violation in report.violations:
                        click.echo(f"{dialogue.id}: {violation.code.value}: {violation.detail}", err=True)
    except MalformedRecord as exc:
        raise _fail(str(exc))
    click.echo(f"validated {n} dialogues, {bad} invalid", err=True)
    if bad:
        raise SystemExit(1)


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--mask-sidecar", "sidecar_path", default=None, type=click.Path())
@click.option("--no-system", is_flag=True, help="Omit the instructional system message.")
@click.option("--prompt-version", default="v2", show_default=True)
@click.option("--prompt-file", default=None, type=click.Path(exists=True))
@click.option("--emit-config", "config_out", default=None, type=click.Path(),
              help="Also write the trainer config (paper defaults) here.")
@click.option("--base-model", default=None)
@click.option("--learning-rate", default=None, type=float)
@click.option("--epochs", default=None, type=int)
@click.option("--zero-stage", default=None, type=int)
def chatml(
    in_path: str,
    out_path: str,
    sidecar_path: str | None,
    no_system: bool,
    prompt_version: str,
    prompt_file: str | None,
    config_out: str | None,
    base_model: str | None,
    learning_rate: float | None,
    epochs: int | None,
    zero_stage: int | None,
):
    """Pack a dialogue corpus into training JSONL (plus optional mask sidecar)."""
    system_text = None
    if not no_system:
        try:
            system_text = instructional_system_text(_elements(prompt_version, prompt_file), LIVE_INSTRUCTION)
        except PromptError as exc:
            raise _fail(str(exc))

    n = 0
    try:
        with open(in_path, encoding="utf-8") as fp_in, open(out_path, "w", encoding="utf-8") as fp_out:
            sidecar = open(sidecar_path, "w", encoding="utf-8") if sidecar_path else None
            try:
                for dialogue in read_dialogues(fp_in):
                    messages = []
                    if system_text:
                        messages.append(chatml_mod.ChatMessage("system", system_text))
                    messages += [
                        chatml_mod.ChatMessage(t.speaker.chat_role, t.text) for t in dialogue.turns
                    ]
                    doc = chatml_mod.render_chatml(messages)
                    fp_out.write(
                        json.dumps(
                            {"messages": [{"role": m.role, "content": m.content} for m in doc.messages]},
                            ensure_ascii=False,
                        )
                        + "\n"
                    )
                    if sidecar:
                        sidecar.write(
                            json.dumps({"spans": [list(span) for span in doc.assistant_spans]}) + "\n"
                        )
                    n += 1
            finally:
                if sidecar:
                    sidecar.close()
    except (MalformedRecord, chatml_mod.ChatMLError) as exc:
        raise _fail(str(exc))

    if config_out:
        overrides = {
            key: value
            for key, value in {
                "base_model": base_model,
                "learning_rate": learning_rate,
                "epochs": epochs,
                "zero_stage": zero_stage,
            }.items()
            if value is not None
        }
        cfg = chatml_mod.TrainingConfig(dataset_path=out_path, **overrides)
        Path(config_out).write_text(chatml_mod.emit_training_config(cfg), encoding="utf-8")
    click.echo(f"packed {n} dialogues -> {out_path}", err=True)


@main.command()
@click.option("--annotations", "annotations_path", required=True, type=click.Path(exists=True))
@click.option("--group-by", "group_by", default="model,domain", show_default=True,
              type=click.Choice(["model", "model,domain"]))
@click.option("--format", "fmt", default="markdown", show_default=True,
              type=click.Choice(["markdown", "csv", "json"]))
@click.option("--out", "out_path", default=None, type=click.Path())
def evaluate(annotations_path: str, group_by: str, fmt: str, out_path: str | None):
    """Compute the stage-distribution battery from annotated transcripts."""
    try:
        with open(annotations_path, encoding="utf-8") as fp:
            corpus = eval_mod.load_annotations(fp)
        mode = eval_mod.GroupBy.MODEL if group_by == "model" else eval_mod.GroupBy.MODEL_DOMAIN
        rows = eval_mod.compute_stage_metrics(corpus, mode)
    except (MalformedRecord, eval_mod.AnnotationError, eval_mod.EmptyGroup) as exc:
        raise _fail(str(exc))
    if fmt == "json":
        output = json.dumps(eval_mod.metrics_to_records(rows), indent=2) + "\n"
    else:
        output = eval_mod.render_report(rows, fmt)
    if out_path:
        Path(out_path).write_text(output, encoding="utf-8")
    else:
        click.echo(output, nl=False)


@main.command()
@click.option("--responses", "responses_path", required=True, type=click.Path(exists=True))
@click.option("--questionnaire", "questionnaire_path", default=None, type=click.Path(exists=True))
@click.option("--format", "fmt", default="csv", show_default=True, type=click.Choice(["csv", "json"]))
@click.option("--out", "out_path", default=None, type=click.Path())
def survey(responses_path: str, questionnaire_path: str | None, fmt: str, out_path: str | None):
    """Score Likert survey responses against the questionnaire."""
    try:
        q_path = Path(questionnaire_path) if questionnaire_path else survey_mod.default_questionnaire_path()
        questionnaire = survey_mod.load_questionnaire(q_path)
        with open(responses_path, encoding="utf-8") as fp:
            responses = survey_mod.load_responses(fp)
        table = survey_mod.score_survey(questionnaire, responses)
    except survey_mod.SurveyError as exc:
        raise _fail(str(exc))

    if fmt == "json":
        output = json.dumps(survey_mod.score_table_to_records(table), indent=2) + "\n"
    else:
        import csv as csv_lib
        import io

        buf = io.StringIO()
        writer = csv_lib.writer(buf)
        writer.writerow(["kind", "ref", "label", "mean", "sd", "n"])
        for section in table.sections:
            writer.writerow(["section", section.ref, section.section_name, f"{section.mean:.4f}", "", section.n_items])
        for item in table.items:
            writer.writerow(["item", item.ref, item.text, f"{item.mean:.4f}", f"{item.sd:.4f}", item.n])
        output = buf.getvalue()
    if out_path:
        Path(out_path).write_text(output, encoding="utf-8")
    else:
        click.echo(output, nl=False)


@main.command("review-sample")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--k", required=True, type=int)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def review_sample(corpus_path: str, k: int, seed: int, out_path: str):
    """Draw a seeded sample of corpus dialogues for manual review."""
    try:
        with open(corpus_path, encoding="utf-8") as fp:
            dialogues = list(read_dialogues(fp))
        sample = synth_mod.sample_for_review(dialogues, k, seed)
    except (MalformedRecord, synth_mod.InsufficientCorpus) as exc:
        raise _fail(str(exc))
    with open(out_path, "w", encoding="utf-8") as fp:
        write_dialogues(sample, fp)
    click.echo(f"sampled {k} of {len(dialogues)} dialogues -> {out_path}", err=True)


@main.command()
@click.option("--port", default=8080, type=int, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--data-dir", "data_dir", required=True, type=click.Path())
@click.option("--endpoints", "endpoints_path", required=True, type=click.Path(exists=True))
@click.option("--problems", "problems_path", required=True, type=click.Path(exists=True))
@click.option("--personas", "personas_path", default=None, type=click.Path(exists=True))
@click.option("--prompt-version", default="v2", show_default=True)
@click.option("--ui-dir", default=None, type=click.Path(), help="Static frontend assets to mount at /ui.")
def serve(
    port: int,
    host: str,
    data_dir: str,
    endpoints_path: str,
    problems_path: str,
    personas_path: str | None,
    prompt_version: str,
    ui_dir: str | None,
):
    """Run the live-session annotation backend."""
    import uvicorn

    from .service import create_app

    try:
        endpoints = synth_mod.load_endpoints(Path(endpoints_path))
        with open(problems_path, encoding="utf-8") as fp:
            problems = {p.id: p for p in ingest_mod.parse_gsm8k(fp)}
        personas = {}
        if personas_path:
            with open(personas_path, encoding="utf-8") as fp:
                personas = {p.id: p for p in ingest_mod.load_personas(fp)}
        elements = load_default_elements(prompt_version)
    except (ingest_mod.IngestError, PromptError, synth_mod.ConfigError) as exc:
        raise _fail(str(exc))
    if not endpoints:
        raise _fail(f"no [endpoints.*] tables in {endpoints_path}")

    app = create_app(
        Path(data_dir),
        endpoints,
        problems,
        personas,
        elements,
        ui_dir=Path(ui_dir) if ui_dir else None,
    )
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
