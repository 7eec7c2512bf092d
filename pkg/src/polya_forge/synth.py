"""Drive a chat-completion endpoint to synthesize dialogues for a pairing plan.

The transport speaks the OpenAI-compatible chat-completions wire schema
(POST {base_url}/chat/completions, bearer auth), which is what hosted APIs
and local servers alike expose. Two deterministic in-process mock endpoints
ship for tests and dry runs: base_url "mock:dialogue" fabricates a whole
tutoring dialogue, "mock:tutor" plays one tutor turn at a time.

Endpoint failures never abort a corpus run; they become per-record statuses
so long paid runs stay resumable (re-run with retry_failed to target them).
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from .ingest import PairingPlan
from .model import (
    Dialogue,
    MathDomain,
    MathProblem,
    Speaker,
    StudentPersona,
    Turn,
    validate_dialogue,
)
from .prompts import PromptElements, assemble_prompt, bind_spec

API_KEY_ENV = "POLYA_API_KEY"
MOCK_SCHEME = "mock:"


class EndpointError(Exception):
    """Base class for chat-completion transport failures."""


class Unauthorized(EndpointError):
    pass


class RateLimited(EndpointError):
    pass


class EndpointTimeout(EndpointError):
    pass


class MalformedResponse(EndpointError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    api_key: str | None = None  # falls back to $POLYA_API_KEY at call time
    temperature: float = 0.7
    max_output_tokens: int = 1024
    timeout: float = 60.0
    max_retries: int = 3

    def __post_init__(self):
        if not self.base_url:
            raise ConfigError("base_url must be nonempty")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 <= self.max_retries <= 10:
            raise ConfigError(f"max_retries must be in 0..10, got {self.max_retries}")

    @property
    def is_mock(self) -> bool:
        return self.base_url.startswith(MOCK_SCHEME)

    def resolve_api_key(self) -> str | None:
        return self.api_key or os.environ.get(API_KEY_ENV)


def load_endpoints(path: Path) -> dict[str, EndpointConfig]:
    """Read named endpoint configs from a TOML file ([endpoints.<name>] tables)."""
    import sys

    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(path, "rb") as fp:
        data = tomllib.load(fp)
    out = {}
    for name, entry in data.get("endpoints", {}).items():
        out[name] = EndpointConfig(
            base_url=entry["base_url"],
            model_name=entry.get("model_name", name),
            api_key=entry.get("api_key"),
            temperature=entry.get("temperature", 0.7),
            max_output_tokens=entry.get("max_output_tokens", 1024),
            timeout=entry.get("timeout", 60.0),
            max_retries=entry.get("max_retries", 3),
        )
    return out


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------

_RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}


def _complete_with_attempts(
    cfg: EndpointConfig,
    messages: Sequence[dict],
    transport: httpx.BaseTransport | None = None,
    sleeper: Callable[[float], None] = time.sleep,
) -> tuple[str, int]:
    """POST a chat-completion request, retrying transient failures with
    exponential backoff (base 1s, factor 2, jitter). Returns (text, attempts)."""
    if cfg.is_mock:
        return _mock_complete(cfg, messages), 1

    url = cfg.base_url.rstrip("/") + "/chat/completions"
    headers = {}
    api_key = cfg.resolve_api_key()
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    payload = {
        "model": cfg.model_name,
        "messages": list(messages),
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_output_tokens,
    }

    attempts = 0
    delay = 1.0
    last_error: EndpointError | None = None
    with httpx.Client(transport=transport, timeout=cfg.timeout) as client:
        while attempts <= cfg.max_retries:
            attempts += 1
            try:
                response = client.post(url, json=payload, headers=headers)
            except httpx.TimeoutException as exc:
                last_error = EndpointTimeout(f"request timed out after {cfg.timeout}s")
                last_error.__cause__ = exc
            except httpx.HTTPError as exc:
                last_error = EndpointError(f"transport failure: {exc}")
            else:
                if response.status_code == 401:
                    raise Unauthorized("endpoint rejected the API key")
                if response.status_code in _RETRYABLE_STATUS:
                    kind = RateLimited if response.status_code == 429 else EndpointError
                    last_error = kind(f"endpoint returned {response.status_code}")
                elif response.status_code != 200:
                    raise EndpointError(
                        f"endpoint returned {response.status_code}: {response.text[:200]}"
                    )
                else:
                    return _extract_content(response), attempts
            if attempts <= cfg.max_retries:
                sleeper(delay + random.uniform(0, delay / 2))
                delay *= 2
    assert last_error is not None
    raise last_error


def _extract_content(response: httpx.Response) -> str:
    try:
        body = response.json()
        content = body["choices"][0]["message"]["content"]
    except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"unexpected completion body: {exc}") from exc
    if not isinstance(content, str):
        raise MalformedResponse("completion content is not a string")
    return content


def chat_complete(
    cfg: EndpointConfig,
    system_text: str,
    user_text: str,
    transport: httpx.BaseTransport | None = None,
    sleeper: Callable[[float], None] = time.sleep,
) -> str:
    """Complete a single system+user exchange; returns the first choice's text."""
    messages = [
        {"role": "system", "content": system_text},
        {"role": "user", "content": user_text},
    ]
    text, _ = _complete_with_attempts(cfg, messages, transport, sleeper)
    return text


def chat_complete_messages(
    cfg: EndpointConfig,
    messages: Sequence[dict],
    transport: httpx.BaseTransport | None = None,
    sleeper: Callable[[float], None] = time.sleep,
) -> str:
    """Complete over an arbitrary message history (used by live sessions)."""
    text, _ = _complete_with_attempts(cfg, messages, transport, sleeper)
    return text


# ---------------------------------------------------------------------------
# Mock endpoints
# ---------------------------------------------------------------------------

_MOCK_STUDENT_LINES = (
    "It's asking how much is left at the end.",
    "We need the total after all the steps.",
    "I think we have to find the final amount.",
)
_MOCK_PLAN_LINES = (
    "Maybe we should start with the first quantity and work forward.",
    "I'd split it into two smaller steps.",
    "We could add the parts first, then compare.",
)
_MOCK_EXEC_LINES = (
    "Okay, I computed that step and wrote down the result.",
    "Done - I worked that part out on paper.",
    "I carried out the step and got a number.",
)

TUTOR_SCRIPT = (
    "Let's start by understanding the problem. What is it asking us to find?",
    "Good. Now let's devise a plan: what should we work out first, and why?",
    "Nice plan. Carry out that first step - what do you get?",
    "Keep going: compute the next step and tell me the result.",
    "Let's look back. Does the result make sense for the story, and how could we check it?",
    "Well done. You worked through every stage - is there anything you'd do differently next time?",
)


def _mock_complete(cfg: EndpointConfig, messages: Sequence[dict]) -> str:
    flavor = cfg.base_url[len(MOCK_SCHEME):]
    if flavor == "tutor":
        n_user = sum(1 for m in messages if m.get("role") == "user")
        return TUTOR_SCRIPT[min(n_user - 1, len(TUTOR_SCRIPT) - 1)] if n_user else TUTOR_SCRIPT[0]
    if flavor == "dialogue":
        user_text = next(
            (m["content"] for m in reversed(list(messages)) if m.get("role") == "user"), ""
        )
        return _mock_dialogue_completion(user_text)
    if flavor == "error":
        # always-failing endpoint, for exercising failure paths end to end
        raise EndpointTimeout("mock endpoint always times out")
    raise ConfigError(f"unknown mock endpoint {cfg.base_url!r} (use mock:dialogue or mock:tutor)")


def _mock_dialogue_completion(user_text: str) -> str:
    """Fabricate a deterministic ten-turn tutoring dialogue for the prompt."""
    digest = hashlib.sha256(user_text.encode("utf-8")).digest()
    pick = lambda bank, i: bank[digest[i] % len(bank)]
    first_line = next((ln for ln in user_text.splitlines() if ln.strip()), "this problem")
    turns = [
        {"from": "human", "value": f"Can you help me work through this? ({first_line[:80]})"},
        {"from": "gpt", "value": TUTOR_SCRIPT[0]},
        {"from": "human", "value": pick(_MOCK_STUDENT_LINES, 0)},
        {"from": "gpt", "value": TUTOR_SCRIPT[1]},
        {"from": "human", "value": pick(_MOCK_PLAN_LINES, 1)},
        {"from": "gpt", "value": TUTOR_SCRIPT[2]},
        {"from": "human", "value": pick(_MOCK_EXEC_LINES, 2)},
        {"from": "gpt", "value": TUTOR_SCRIPT[4]},
        {"from": "human", "value": "Yes - checking backwards gives the starting numbers, so it fits."},
        {"from": "gpt", "value": TUTOR_SCRIPT[5]},
    ]
    body = json.dumps(turns, ensure_ascii=False)
    return f"Here is the tutoring dialogue.\n\n```json\n{body}\n```\n"


# ---------------------------------------------------------------------------
# Completion parsing
# ---------------------------------------------------------------------------

class ParseError(ValueError):
    """Base class for completion parsing failures."""


class NoDialogueFound(ParseError):
    def __init__(self):
        super().__init__("no {'from','value'} turn list found in completion")


class UnknownRole(ParseError):
    def __init__(self, value: str):
        super().__init__(f"unknown 'from' value {value!r} (expected 'human' or 'gpt')")
        self.value = value


def parse_dialogue_completion(raw: str) -> list[Turn]:
    """Extract the first well-formed turn list from a completion.

    Tolerates surrounding prose and code fences: scans for the first JSON
    array of objects carrying string "from"/"value" fields.
    """
    decoder = json.JSONDecoder()
    pos = raw.find("[")
    while pos != -1:
        try:
            candidate, _ = decoder.raw_decode(raw, pos)
        except json.JSONDecodeError:
            candidate = None
        if (
            isinstance(candidate, list)
            and candidate
            and all(
                isinstance(t, dict)
                and isinstance(t.get("from"), str)
                and isinstance(t.get("value"), str)
                for t in candidate
            )
        ):
            turns = []
            for t in candidate:
                if t["from"] not in ("human", "gpt"):
                    raise UnknownRole(t["from"])
                turns.append(Turn(Speaker(t["from"]), t["value"]))
            return turns
        pos = raw.find("[", pos + 1)
    raise NoDialogueFound()


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

class GenerationStatus:
    OK = "ok"
    PARSE_FAILED = "parse_failed"
    VALIDATION_FAILED = "validation_failed"
    ENDPOINT_ERROR = "endpoint_error"


@dataclass(frozen=True)
class GenerationRecord:
    index: int
    dialogue: Dialogue | None
    raw_completion: str
    status: str
    attempts: int
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == GenerationStatus.OK


class UnresolvedReference(ConfigError):
    pass


class InsufficientCorpus(ValueError):
    pass


def _generate_one(
    index: int,
    pair: tuple[str, str],
    elements: PromptElements,
    cfg: EndpointConfig,
    problems: Mapping[str, MathProblem],
    personas: Mapping[str, StudentPersona],
    transport: httpx.BaseTransport | None,
    sleeper: Callable[[float], None],
) -> GenerationRecord:
    problem_id, persona_id = pair
    spec = bind_spec(elements, personas[persona_id], problems[problem_id])
    prompt = assemble_prompt(spec)
    messages = [
        {"role": "system", "content": prompt.system_text},
        {"role": "user", "content": prompt.user_text},
    ]
    try:
        raw, attempts = _complete_with_attempts(cfg, messages, transport, sleeper)
    except EndpointError as exc:
        return GenerationRecord(
            index, None, "", GenerationStatus.ENDPOINT_ERROR, cfg.max_retries + 1, str(exc)
        )
    try:
        turns = parse_dialogue_completion(raw)
    except ParseError as exc:
        return GenerationRecord(index, None, raw, GenerationStatus.PARSE_FAILED, attempts, str(exc))
    dialogue = Dialogue(
        id=f"gen-{index:06d}",
        problem_id=problem_id,
        persona_id=persona_id,
        domain=MathDomain.UNSPECIFIED,
        turns=tuple(turns),
    )
    report = validate_dialogue(dialogue)
    if not report.is_valid:
        detail = "; ".join(v.detail for v in report.violations)
        return GenerationRecord(
            index, None, raw, GenerationStatus.VALIDATION_FAILED, attempts, detail
        )
    return GenerationRecord(index, dialogue, raw, GenerationStatus.OK, attempts)


def generate_corpus(
    plan: PairingPlan,
    elements: PromptElements,
    cfg: EndpointConfig,
    problems: Mapping[str, MathProblem] | Iterable[MathProblem],
    personas: Mapping[str, StudentPersona] | Iterable[StudentPersona],
    parallelism: int = 1,
    transport: httpx.BaseTransport | None = None,
    sleeper: Callable[[float], None] = time.sleep,
    retry_of: Sequence[GenerationRecord] | None = None,
) -> list[GenerationRecord]:
    """Generate one record per plan pair, ordered by pairing index.

    Endpoint failures become per-record statuses; only configuration problems
    (unresolvable references, bad parallelism) abort. With ``retry_of``, prior
    non-Ok records are regenerated and Ok ones carried over unchanged.
    """
    if parallelism < 1:
        raise ConfigError(f"parallelism must be >= 1, got {parallelism}")
    if not isinstance(problems, Mapping):
        problems = {p.id: p for p in problems}
    if not isinstance(personas, Mapping):
        personas = {p.id: p for p in personas}
    for problem_id, persona_id in plan.pairs:
        if problem_id not in problems:
            raise UnresolvedReference(f"plan references unknown problem {problem_id!r}")
        if persona_id not in personas:
            raise UnresolvedReference(f"plan references unknown persona {persona_id!r}")

    carried: dict[int, GenerationRecord] = {}
    if retry_of is not None:
        carried = {r.index: r for r in retry_of if r.ok}

    todo = [(i, pair) for i, pair in enumerate(plan.pairs) if i not in carried]

    def work(item: tuple[int, tuple[str, str]]) -> GenerationRecord:
        index, pair = item
        return _generate_one(index, pair, elements, cfg, problems, personas, transport, sleeper)

    if parallelism == 1 or len(todo) <= 1:
        fresh = [work(item) for item in todo]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            fresh = list(pool.map(work, todo))

    merged = dict(carried)
    merged.update({r.index: r for r in fresh})
    return [merged[i] for i in range(len(plan.pairs))]


def sample_for_review(
    corpus: Sequence[GenerationRecord] | Sequence[Dialogue], k: int, seed: int
) -> list[Dialogue]:
    """Seeded uniform sample (without replacement) of Ok dialogues, by id."""
    dialogues = [
        item.dialogue if isinstance(item, GenerationRecord) else item
        for item in corpus
        if not isinstance(item, GenerationRecord) or item.ok
    ]
    if k > len(dialogues):
        raise InsufficientCorpus(f"requested {k} dialogues but only {len(dialogues)} available")
    sample = random.Random(seed).sample(dialogues, k)
    return sorted(sample, key=lambda d: d.id)


# ---------------------------------------------------------------------------
# Persistence: corpus JSONL + run manifest sidecar
# ---------------------------------------------------------------------------

def plan_hash(plan: PairingPlan) -> str:
    return hashlib.sha256(plan.to_json().encode("utf-8")).hexdigest()


def corpus_manifest(
    records: Sequence[GenerationRecord],
    plan: PairingPlan,
    prompt_version: str,
    cfg: EndpointConfig,
) -> dict:
    return {
        "plan_hash": plan_hash(plan),
        "plan_seed": plan.seed,
        "prompt_version": prompt_version,
        "endpoint": {"base_url": cfg.base_url, "model_name": cfg.model_name},
        "records": [
            {
                "index": r.index,
                "status": r.status,
                "attempts": r.attempts,
                "dialogue_id": r.dialogue.id if r.dialogue else None,
                "error": r.error,
                "raw_completion": r.raw_completion,
            }
            for r in records
        ],
    }


def records_from_manifest(manifest: dict, dialogues: Iterable[Dialogue]) -> list[GenerationRecord]:
    """Rebuild generation records from a persisted corpus + manifest pair
    (used by retry-failed runs)."""
    by_id = {d.id: d for d in dialogues}
    records = []
    for entry in manifest["records"]:
        dialogue = by_id.get(entry["dialogue_id"]) if entry.get("dialogue_id") else None
        status = entry["status"]
        if status == GenerationStatus.OK and dialogue is None:
            # corpus and manifest disagree; regenerate this record
            status = GenerationStatus.PARSE_FAILED
        records.append(
            GenerationRecord(
                index=entry["index"],
                dialogue=dialogue,
                raw_completion=entry.get("raw_completion", ""),
                status=status,
                attempts=entry["attempts"],
                error=entry.get("error", ""),
            )
        )
    return records
