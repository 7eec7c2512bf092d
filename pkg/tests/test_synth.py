from __future__ import annotations

import io
import json

import httpx
import pytest

from polya_forge.ingest import PairingPlan, load_personas, parse_gsm8k
from polya_forge.model import Speaker, read_dialogues, validate_dialogue, write_dialogues
from polya_forge.prompts import load_default_elements
from polya_forge.synth import (
    ConfigError,
    EndpointConfig,
    EndpointTimeout,
    GenerationStatus,
    InsufficientCorpus,
    MalformedResponse,
    NoDialogueFound,
    RateLimited,
    Unauthorized,
    UnknownRole,
    UnresolvedReference,
    chat_complete,
    corpus_manifest,
    generate_corpus,
    parse_dialogue_completion,
    records_from_manifest,
    sample_for_review,
)

MOCK_CFG = EndpointConfig(base_url="mock:dialogue", model_name="mock")


def completion_body(text: str) -> dict:
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def http_cfg(**kwargs) -> EndpointConfig:
    defaults = dict(base_url="https://api.example.test/v1", model_name="m", api_key="k")
    defaults.update(kwargs)
    return EndpointConfig(**defaults)


class Recorder:
    def __init__(self):
        self.sleeps: list[float] = []

    def __call__(self, seconds: float) -> None:
        self.sleeps.append(seconds)


def test_chat_complete_passes_through_fixed_text():
    transport = httpx.MockTransport(lambda request: httpx.Response(200, json=completion_body("fixed")))
    assert chat_complete(http_cfg(), "sys", "user", transport=transport) == "fixed"


def test_chat_complete_sends_wire_schema():
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json=completion_body("ok"))

    chat_complete(http_cfg(), "S", "U", transport=httpx.MockTransport(handler))
    assert seen["url"].endswith("/v1/chat/completions")
    assert seen["auth"] == "Bearer k"
    assert seen["body"]["messages"] == [
        {"role": "system", "content": "S"},
        {"role": "user", "content": "U"},
    ]


def test_retry_after_429_then_success():
    calls = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        calls["n"] += 1
        if calls["n"] <= 2:
            return httpx.Response(429)
        return httpx.Response(200, json=completion_body("done"))

    sleeper = Recorder()
    text = chat_complete(
        http_cfg(max_retries=3), "s", "u", transport=httpx.MockTransport(handler), sleeper=sleeper
    )
    assert text == "done"
    assert calls["n"] == 3
    # exponential backoff: base 1s then 2s, each plus nonnegative jitter
    assert len(sleeper.sleeps) == 2
    assert 1.0 <= sleeper.sleeps[0] < 1.5
    assert 2.0 <= sleeper.sleeps[1] < 3.0


def test_rate_limited_after_exhausting_retries():
    transport = httpx.MockTransport(lambda request: httpx.Response(429))
    with pytest.raises(RateLimited):
        chat_complete(http_cfg(max_retries=2), "s", "u", transport=transport, sleeper=Recorder())


def test_unauthorized_is_not_retried():
    calls = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        calls["n"] += 1
        return httpx.Response(401)

    with pytest.raises(Unauthorized):
        chat_complete(http_cfg(max_retries=5), "s", "u", transport=httpx.MockTransport(handler))
    assert calls["n"] == 1


def test_timeouts_retried_then_raised():
    def handler(request: httpx.Request) -> httpx.Response:
        raise httpx.ConnectTimeout("slow")

    sleeper = Recorder()
    with pytest.raises(EndpointTimeout):
        chat_complete(
            http_cfg(max_retries=2), "s", "u", transport=httpx.MockTransport(handler), sleeper=sleeper
        )
    assert len(sleeper.sleeps) == 2


def test_malformed_body_raises():
    transport = httpx.MockTransport(lambda request: httpx.Response(200, json={"nope": 1}))
    with pytest.raises(MalformedResponse):
        chat_complete(http_cfg(), "s", "u", transport=transport)


def test_config_invariants():
    with pytest.raises(ConfigError):
        EndpointConfig(base_url="", model_name="m")
    with pytest.raises(ConfigError):
        EndpointConfig(base_url="mock:dialogue", model_name="m", max_retries=11)


# --- completion parsing ---

def test_parse_fenced_block():
    raw = 'Sure!\n```json\n[{"from": "human", "value": "q"}, {"from": "gpt", "value": "a"}]\n```\nDone.'
    turns = parse_dialogue_completion(raw)
    assert [t.speaker for t in turns] == [Speaker.HUMAN, Speaker.TUTOR]
    assert [t.text for t in turns] == ["q", "a"]


def test_parse_unknown_role():
    raw = '[{"from": "system", "value": "x"}]'
    with pytest.raises(UnknownRole) as exc:
        parse_dialogue_completion(raw)
    assert exc.value.value == "system"


def test_parse_empty_string():
    with pytest.raises(NoDialogueFound):
        parse_dialogue_completion("")


def test_parse_skips_non_matching_arrays():
    raw = 'scores [1, 2, 3] then [{"from": "gpt", "value": "hi"}]'
    turns = parse_dialogue_completion(raw)
    assert turns[0].text == "hi"


def test_parse_prose_without_dialogue():
    with pytest.raises(NoDialogueFound):
        parse_dialogue_completion("no list here [broken")


# --- corpus generation ---

@pytest.fixture
def inputs(gsm8k_lines, persona_lines):
    problems = parse_gsm8k(gsm8k_lines)
    personas = load_personas(persona_lines)
    plan = PairingPlan(
        seed=1,
        pairs=tuple(
            (problems[i % len(problems)].id, personas[i % len(personas)].id) for i in range(3)
        ),
    )
    return plan, load_default_elements("v1"), problems, personas


def test_generate_corpus_all_ok_in_order(inputs):
    plan, elements, problems, personas = inputs
    records = generate_corpus(plan, elements, MOCK_CFG, problems, personas)
    assert [r.index for r in records] == [0, 1, 2]
    assert all(r.status == GenerationStatus.OK for r in records)
    for record, (problem_id, persona_id) in zip(records, plan.pairs):
        assert record.dialogue.problem_id == problem_id
        assert record.dialogue.persona_id == persona_id
        assert validate_dialogue(record.dialogue).is_valid
        # the stored dialogue is exactly what the raw completion parses to
        assert tuple(parse_dialogue_completion(record.raw_completion)) == record.dialogue.turns


def test_generate_corpus_parallel_matches_serial(inputs):
    plan, elements, problems, personas = inputs
    serial = generate_corpus(plan, elements, MOCK_CFG, problems, personas, parallelism=1)
    parallel = generate_corpus(plan, elements, MOCK_CFG, problems, personas, parallelism=4)
    assert serial == parallel


def test_generate_corpus_isolates_failures(inputs):
    plan, elements, problems, personas = inputs
    # route through HTTP so one pair can be sabotaged deterministically
    bad_question = next(p.question for p in problems if p.id == plan.pairs[1][0])

    def handler(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        user_text = body["messages"][-1]["content"]
        if bad_question in user_text:
            return httpx.Response(200, json=completion_body("no dialogue here"))
        from polya_forge.synth import _mock_dialogue_completion

        return httpx.Response(200, json=completion_body(_mock_dialogue_completion(user_text)))

    records = generate_corpus(
        plan, elements, http_cfg(), problems, personas, transport=httpx.MockTransport(handler)
    )
    assert [r.status for r in records] == [
        GenerationStatus.OK,
        GenerationStatus.PARSE_FAILED,
        GenerationStatus.OK,
    ]
    assert records[1].dialogue is None
    assert records[1].raw_completion == "no dialogue here"


def test_generate_corpus_endpoint_errors_become_statuses(inputs):
    plan, elements, problems, personas = inputs
    cfg = EndpointConfig(base_url="mock:error", model_name="broken")
    records = generate_corpus(plan, elements, cfg, problems, personas)
    assert all(r.status == GenerationStatus.ENDPOINT_ERROR for r in records)
    assert all(r.dialogue is None for r in records)


def test_generate_corpus_rejects_unresolved_references(inputs):
    plan, elements, problems, personas = inputs
    broken = PairingPlan(seed=0, pairs=(("missing-problem", personas[0].id),))
    with pytest.raises(UnresolvedReference):
        generate_corpus(broken, elements, MOCK_CFG, problems, personas)


def test_retry_failed_records_only(inputs):
    plan, elements, problems, personas = inputs
    cfg = EndpointConfig(base_url="mock:error", model_name="broken")
    failed = generate_corpus(plan, elements, cfg, problems, personas)
    retried = generate_corpus(
        plan, elements, MOCK_CFG, problems, personas, retry_of=failed
    )
    assert all(r.status == GenerationStatus.OK for r in retried)
    fresh = generate_corpus(plan, elements, MOCK_CFG, problems, personas)
    assert retried == fresh


def test_manifest_round_trip(inputs):
    plan, elements, problems, personas = inputs
    records = generate_corpus(plan, elements, MOCK_CFG, problems, personas)
    manifest = corpus_manifest(records, plan, elements.version, MOCK_CFG)
    assert manifest["prompt_version"] == "v1"
    assert [e["status"] for e in manifest["records"]] == [GenerationStatus.OK] * 3

    buf = io.StringIO()
    write_dialogues((r.dialogue for r in records if r.ok), buf)
    buf.seek(0)
    rebuilt = records_from_manifest(
        json.loads(json.dumps(manifest)), list(read_dialogues(buf))
    )
    assert rebuilt == records


def test_sample_for_review(inputs):
    plan, elements, problems, personas = inputs
    records = generate_corpus(plan, elements, MOCK_CFG, problems, personas)
    whole = sample_for_review(records, k=3, seed=0)
    assert sorted(d.id for d in whole) == [r.dialogue.id for r in records]
    assert sample_for_review(records, 2, seed=5) == sample_for_review(records, 2, seed=5)
    with pytest.raises(InsufficientCorpus):
        sample_for_review(records, 4, seed=0)


def test_sample_seeds_differ(gsm8k_lines, persona_lines):
    problems = parse_gsm8k(gsm8k_lines)
    personas = load_personas(persona_lines)
    plan = PairingPlan(
        seed=1,
        pairs=tuple((problems[i].id, personas[i % 4].id) for i in range(20)),
    )
    records = generate_corpus(plan, load_default_elements("v1"), MOCK_CFG, problems, personas)
    a = sample_for_review(records, 5, seed=1)
    b = sample_for_review(records, 5, seed=2)
    assert {d.id for d in a} != {d.id for d in b}


def test_mock_tutor_script_is_deterministic():
    cfg = EndpointConfig(base_url="mock:tutor", model_name="mock")
    from polya_forge.synth import chat_complete_messages

    history = [{"role": "system", "content": "s"}, {"role": "user", "content": "hello"}]
    first = chat_complete_messages(cfg, history)
    assert first == chat_complete_messages(cfg, history)
    history += [{"role": "assistant", "content": first}, {"role": "user", "content": "next"}]
    second = chat_complete_messages(cfg, history)
    assert second != first
