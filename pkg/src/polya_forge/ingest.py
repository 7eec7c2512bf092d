"""Load GSM8K problems and persona files; pair them deterministically for runs.

GSM8K ships as JSONL with "question" and "answer" keys, the final answer
marked by a trailing "#### <value>". Personas are JSONL with
id/background/strengths/challenges. Pairing samples both lists with
replacement under a seeded RNG so plans are reproducible.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

from .model import MathDomain, MathProblem, StudentPersona

ANSWER_MARKER = "####"


class IngestError(ValueError):
    """Base class for ingestion failures."""


class MalformedLine(IngestError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class MissingAnswerMarker(IngestError):
    def __init__(self, line_no: int):
        super().__init__(f"line {line_no}: answer has no '{ANSWER_MARKER}' marker")
        self.line_no = line_no


class EmptyField(IngestError):
    def __init__(self, field: str, line_no: int):
        super().__init__(f"line {line_no}: field {field!r} is empty")
        self.field = field
        self.line_no = line_no


class DuplicateId(IngestError):
    def __init__(self, dup_id: str, line_no: int):
        super().__init__(f"line {line_no}: duplicate id {dup_id!r}")
        self.dup_id = dup_id
        self.line_no = line_no


class EmptyInput(IngestError):
    pass


def normalize_final_answer(raw: str) -> str:
    """Trim and strip thousands separators; keep sign and decimal point."""
    return raw.strip().replace(",", "")


def parse_gsm8k(stream: Iterable[str]) -> list[MathProblem]:
    """Parse GSM8K-format JSONL into problems.

    final_answer is the text after the last "####" marker, normalized.
    reference_solution keeps the full answer text. Records without an "id"
    get a line-number-derived one so serialization round-trips.
    """
    problems: list[MathProblem] = []
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLine(line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict) or "question" not in obj or "answer" not in obj:
            raise MalformedLine(line_no, "object must have 'question' and 'answer'")
        question = obj["question"]
        answer = obj["answer"]
        if not isinstance(question, str) or not question.strip():
            raise MalformedLine(line_no, "'question' must be a nonempty string")
        if not isinstance(answer, str):
            raise MalformedLine(line_no, "'answer' must be a string")
        if ANSWER_MARKER not in answer:
            raise MissingAnswerMarker(line_no)
        final = normalize_final_answer(answer.rsplit(ANSWER_MARKER, 1)[1])
        if not final:
            raise MalformedLine(line_no, "final answer after marker is empty")
        problems.append(
            MathProblem(
                id=obj.get("id") or f"gsm8k-{line_no:05d}",
                question=question,
                reference_solution=answer,
                final_answer=final,
                domain=MathDomain.UNSPECIFIED,
            )
        )
    return problems


def serialize_gsm8k(problems: Iterable[MathProblem], fp: TextIO) -> None:
    for p in problems:
        fp.write(
            json.dumps(
                {"id": p.id, "question": p.question, "answer": p.reference_solution},
                ensure_ascii=False,
            )
            + "\n"
        )


_PERSONA_FIELDS = ("id", "background", "strengths", "challenges")


def load_personas(stream: Iterable[str]) -> list[StudentPersona]:
    personas: list[StudentPersona] = []
    seen: set[str] = set()
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLine(line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise MalformedLine(line_no, "expected a JSON object")
        for name in _PERSONA_FIELDS:
            value = obj.get(name)
            if not isinstance(value, str) or not value.strip():
                raise EmptyField(name, line_no)
        if obj["id"] in seen:
            raise DuplicateId(obj["id"], line_no)
        seen.add(obj["id"])
        personas.append(
            StudentPersona(
                id=obj["id"],
                background=obj["background"],
                strengths=obj["strengths"],
                challenges=obj["challenges"],
            )
        )
    return personas


@dataclass(frozen=True)
class PairingPlan:
    """A reproducible (problem_id, persona_id) sampling for a generation run."""

    seed: int
    pairs: tuple[tuple[str, str], ...]

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "pairs": [list(p) for p in self.pairs]},
            ensure_ascii=False,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "PairingPlan":
        obj = json.loads(text)
        return cls(seed=obj["seed"], pairs=tuple((p, q) for p, q in obj["pairs"]))


def make_pairing(
    problems: Sequence[MathProblem],
    personas: Sequence[StudentPersona],
    count: int,
    seed: int,
) -> PairingPlan:
    """Sample `count` (problem, persona) pairs with replacement.

    Pure in (problems, personas, count, seed): same inputs in the same order
    give a byte-identical plan.
    """
    if not problems or not personas:
        raise EmptyInput("problems and personas must both be nonempty")
    if count < 1:
        raise EmptyInput(f"count must be >= 1, got {count}")
    rng = random.Random(seed)
    pairs = tuple(
        (
            problems[rng.randrange(len(problems))].id,
            personas[rng.randrange(len(personas))].id,
        )
        for _ in range(count)
    )
    return PairingPlan(seed=seed, pairs=pairs)
