"""Core domain types: dialogues, turns, problems, personas, and structural validation.

Every other module builds on these. All types are immutable values, so they are
safe to share across threads. Construction is deliberately permissive —
structural rules are checked by :func:`validate_dialogue`, which reports
violations as data instead of raising.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, TextIO


class PolyaStage(Enum):
    """The four problem-solving stages, totally ordered by ``ordinal``."""

    UNDERSTAND = 1
    PLAN = 2
    EXECUTE = 3
    LOOK_BACK = 4

    @property
    def ordinal(self) -> int:
        return self.value

    @property
    def title(self) -> str:
        return _STAGE_TITLES[self]

    def __lt__(self, other: "PolyaStage") -> bool:
        if not isinstance(other, PolyaStage):
            return NotImplemented
        return self.value < other.value


_STAGE_TITLES = {
    PolyaStage.UNDERSTAND: "Understanding the Problem",
    PolyaStage.PLAN: "Devising a Plan",
    PolyaStage.EXECUTE: "Carrying Out the Plan",
    PolyaStage.LOOK_BACK: "Looking Back",
}


class TurnLabel(Enum):
    """Per-turn annotation: one of the four stages, or Error for turns that
    bypass the stage scaffold (e.g. a premature direct answer)."""

    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"
    ERROR = "ERR"

    @property
    def code(self) -> str:
        return self.value

    @property
    def stage(self) -> PolyaStage | None:
        """The stage this label names, or None for ERROR."""
        return _LABEL_STAGES.get(self)

    @classmethod
    def from_stage(cls, stage: PolyaStage) -> "TurnLabel":
        return cls(f"S{stage.ordinal}")

    @classmethod
    def from_code(cls, code: str) -> "TurnLabel":
        try:
            return cls(code)
        except ValueError:
            raise UnknownLabel(code) from None


_LABEL_STAGES = {
    TurnLabel.S1: PolyaStage.UNDERSTAND,
    TurnLabel.S2: PolyaStage.PLAN,
    TurnLabel.S3: PolyaStage.EXECUTE,
    TurnLabel.S4: PolyaStage.LOOK_BACK,
}


class UnknownLabel(ValueError):
    def __init__(self, code: str):
        super().__init__(f"unknown turn label {code!r}")
        self.code = code


class Speaker(Enum):
    HUMAN = "human"
    TUTOR = "gpt"

    @property
    def wire_name(self) -> str:
        """Key used in the JSONL record format ("human" / "gpt")."""
        return self.value

    @property
    def chat_role(self) -> str:
        """ChatML / chat-completions role this speaker maps to."""
        return "user" if self is Speaker.HUMAN else "assistant"

    @classmethod
    def from_wire(cls, name: str) -> "Speaker":
        try:
            return cls(name)
        except ValueError:
            raise UnknownSpeaker(name) from None


class UnknownSpeaker(ValueError):
    def __init__(self, name: str):
        super().__init__(f"unknown speaker {name!r} (expected 'human' or 'gpt')")
        self.name = name


class MathDomain(Enum):
    ARITHMETIC = "arithmetic"
    MEASUREMENT = "measurement"
    GEOMETRY = "geometry"
    UNSPECIFIED = "unspecified"

    @property
    def display(self) -> str:
        return self.value.capitalize()


#: Domains evaluation transcripts must use (generated training data stays
#: UNSPECIFIED).
EVALUATION_DOMAINS = (MathDomain.ARITHMETIC, MathDomain.MEASUREMENT, MathDomain.GEOMETRY)

#: Known model variant tags with human-readable descriptions. model_tag is free
#: text everywhere; these are seeds for UIs and docs, not an enum.
MODEL_VARIANTS = {
    "base": "Pretrained only, no instruction tuning",
    "instruct": "Instruction-tuned variant from Meta",
    "polya-v2": "Finetuned on the Polya v2 math corpus",
    "metamath": "Finetuned on the Metamath dataset",
    "metamath+polya-v2": "Sequentially tuned on Metamath then Polya v2",
}


@dataclass(frozen=True)
class Turn:
    speaker: Speaker
    text: str


@dataclass(frozen=True)
class Dialogue:
    """A multi-turn human/tutor exchange.

    ``turns`` may violate structural rules (alternation etc.); run
    :func:`validate_dialogue` to find out.
    """

    id: str
    problem_id: str
    turns: tuple[Turn, ...]
    persona_id: str | None = None
    model_tag: str | None = None
    domain: MathDomain = MathDomain.UNSPECIFIED

    def tutor_turn_indices(self) -> list[int]:
        """Absolute indices into ``turns`` whose speaker is the tutor."""
        return [i for i, t in enumerate(self.turns) if t.speaker is Speaker.TUTOR]


@dataclass(frozen=True)
class MathProblem:
    id: str
    question: str
    reference_solution: str
    final_answer: str
    domain: MathDomain = MathDomain.UNSPECIFIED


@dataclass(frozen=True)
class StudentPersona:
    id: str
    background: str
    strengths: str
    challenges: str


# ---------------------------------------------------------------------------
# Structural validation
# ---------------------------------------------------------------------------

class ViolationCode(Enum):
    NON_ALTERNATING = "NonAlternating"
    EMPTY_TURN = "EmptyTurn"
    NO_TUTOR_TURN = "NoTutorTurn"
    LENGTH_OUT_OF_RANGE = "LengthOutOfRange"


@dataclass(frozen=True)
class Violation:
    code: ViolationCode
    detail: str
    turn_index: int | None = None


@dataclass(frozen=True)
class ValidationPolicy:
    # 2..60 is a repo choice; the turn-count range of generated training data
    # is not externally constrained.
    min_turns: int = 2
    max_turns: int = 60


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def codes(self) -> set[ViolationCode]:
        return {v.code for v in self.violations}


def validate_dialogue(d: Dialogue, policy: ValidationPolicy = ValidationPolicy()) -> ValidationReport:
    """Check a dialogue's structure and report every violation found.

    Violations are data, not failures: any Dialogue value is accepted. Either
    speaker may open the dialogue; the alternation rule only requires the
    speaker to change between adjacent turns.
    """
    violations: list[Violation] = []
    for i, turn in enumerate(d.turns):
        if not turn.text.strip():
            violations.append(Violation(ViolationCode.EMPTY_TURN, f"turn {i} is empty", i))
    for i in range(1, len(d.turns)):
        if d.turns[i].speaker is d.turns[i - 1].speaker:
            violations.append(
                Violation(
                    ViolationCode.NON_ALTERNATING,
                    f"turns {i - 1} and {i} have the same speaker",
                    i,
                )
            )
    if not any(t.speaker is Speaker.TUTOR for t in d.turns):
        violations.append(Violation(ViolationCode.NO_TUTOR_TURN, "dialogue has no tutor turn"))
    if not (policy.min_turns <= len(d.turns) <= policy.max_turns):
        violations.append(
            Violation(
                ViolationCode.LENGTH_OUT_OF_RANGE,
                f"{len(d.turns)} turns outside [{policy.min_turns}, {policy.max_turns}]",
            )
        )
    return ValidationReport(tuple(violations))


# ---------------------------------------------------------------------------
# JSONL record format
# ---------------------------------------------------------------------------
# One object per line:
#   {"id", "problem_id", "persona_id", "model_tag", "domain",
#    "turns": [{"from": "human"|"gpt", "value": ...}]}


class MalformedRecord(ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"{message}{where}")
        self.line_no = line_no


def dialogue_to_record(d: Dialogue) -> dict:
    return {
        "id": d.id,
        "problem_id": d.problem_id,
        "persona_id": d.persona_id,
        "model_tag": d.model_tag,
        "domain": d.domain.value,
        "turns": [{"from": t.speaker.wire_name, "value": t.text} for t in d.turns],
    }


def dialogue_from_record(obj: dict, line_no: int | None = None) -> Dialogue:
    try:
        turns = tuple(
            Turn(Speaker.from_wire(t["from"]), t["value"]) for t in obj["turns"]
        )
        return Dialogue(
            id=obj["id"],
            problem_id=obj["problem_id"],
            persona_id=obj.get("persona_id"),
            model_tag=obj.get("model_tag"),
            domain=MathDomain(obj.get("domain", "unspecified")),
            turns=turns,
        )
    except UnknownSpeaker:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(f"bad dialogue record: {exc}", line_no) from exc


def write_dialogues(dialogues: Iterable[Dialogue], fp: TextIO) -> None:
    for d in dialogues:
        fp.write(json.dumps(dialogue_to_record(d), ensure_ascii=False) + "\n")


def read_dialogues(fp: TextIO) -> Iterator[Dialogue]:
    for line_no, line in enumerate(fp, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(f"invalid JSON: {exc}", line_no) from exc
        yield dialogue_from_record(obj, line_no)
