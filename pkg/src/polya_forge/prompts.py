"""Assemble synthesis prompts from the eight-element scheme.

A prompt is built from three groups of elements: fixed framing (situation
information, utterance guidelines), per-run variables (student persona, math
problem), and tuned material (stage flows, few shots, template, instruction).
Six of the eight live in a version file (v1/v2 bundled as package data); the
persona and problem are bound per pairing at generation time.

Instructional material renders into the system message, learner-specific
material (persona, problem, few-shots) into the user message, so persona
variation stays out of the cacheable system prompt.
"""

from __future__ import annotations

import json
import re
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .model import (
    Dialogue,
    MathProblem,
    PolyaStage,
    Speaker,
    StudentPersona,
    Turn,
    ValidationReport,
    validate_dialogue,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class PromptError(ValueError):
    """Base class for prompt assembly failures."""


class MissingElement(PromptError):
    def __init__(self, name: str):
        super().__init__(f"prompt element {name!r} is missing or empty")
        self.name = name


class UnboundPlaceholder(PromptError):
    def __init__(self, name: str):
        super().__init__(f"template references unknown placeholder {name!r}")
        self.name = name


class InvalidShot(PromptError):
    def __init__(self, index: int, report: ValidationReport):
        codes = ", ".join(v.code.value for v in report.violations)
        super().__init__(f"few-shot {index} is not a valid dialogue: {codes}")
        self.index = index
        self.report = report


class BadPromptFile(PromptError):
    pass


@dataclass(frozen=True)
class StageFlow:
    stage: PolyaStage
    goal: str
    explanation: str
    example_prompts: tuple[str, ...] = ()


@dataclass(frozen=True)
class PromptSpec:
    """The full eight-element prompt, ready to assemble."""

    version: str  # "v1" or "v2"
    situation_information: str
    utterance_guidelines: str
    persona: StudentPersona
    problem: MathProblem
    stage_flows: tuple[StageFlow, ...]
    few_shots: tuple[Dialogue, ...]
    template: str
    instruction: str


@dataclass(frozen=True)
class AssembledPrompt:
    system_text: str
    user_text: str


#: Placeholder names a template may reference, and whether their rendering
#: belongs to the system or the user message.
PLACEHOLDERS = {
    "situation": "system",
    "guidelines": "system",
    "stages": "system",
    "instruction": "system",
    "persona": "user",
    "problem": "user",
    "few_shots": "user",
}

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


def render_few_shots(shots: list[Dialogue] | tuple[Dialogue, ...]) -> str:
    """Serialize exemplar dialogues as JSON lists of {"from","value"} objects.

    One list per shot, blank-line separated; byte-deterministic. Each shot
    must be structurally valid.
    """
    blocks = []
    for i, shot in enumerate(shots):
        report = validate_dialogue(shot)
        if not report.is_valid:
            raise InvalidShot(i, report)
        blocks.append(
            json.dumps(
                [{"from": t.speaker.wire_name, "value": t.text} for t in shot.turns],
                ensure_ascii=False,
            )
        )
    return "\n\n".join(blocks)


def parse_few_shots(text: str) -> list[list[Turn]]:
    """Inverse of render_few_shots: recover the turn sequences."""
    shots = []
    for block in text.split("\n\n"):
        if not block.strip():
            continue
        items = json.loads(block)
        shots.append([Turn(Speaker.from_wire(t["from"]), t["value"]) for t in items])
    return shots


def render_stage_flows(flows: tuple[StageFlow, ...]) -> str:
    parts = []
    for flow in flows:
        lines = [
            f"Stage {flow.stage.ordinal} — {flow.stage.title}",
            f"Goal: {flow.goal}",
            f"How: {flow.explanation}",
        ]
        if flow.example_prompts:
            lines.append("Example prompts:")
            lines.extend(f"  - {p}" for p in flow.example_prompts)
        parts.append("\n".join(lines))
    return "\n\n".join(parts)


def render_persona(persona: StudentPersona) -> str:
    return (
        f"Student profile:\n"
        f"  Background: {persona.background}\n"
        f"  Strengths: {persona.strengths}\n"
        f"  Challenges: {persona.challenges}"
    )


def render_problem(problem: MathProblem) -> str:
    return f"Math problem:\n{problem.question}\n\nReference solution (tutor eyes only):\n{problem.reference_solution}"


def _check_spec(spec: PromptSpec) -> None:
    for name in ("situation_information", "utterance_guidelines", "template", "instruction"):
        if not getattr(spec, name).strip():
            raise MissingElement(name)
    if spec.persona is None:
        raise MissingElement("persona")
    if spec.problem is None:
        raise MissingElement("problem")
    ordinals = [f.stage.ordinal for f in spec.stage_flows]
    if len(set(ordinals)) != len(ordinals):
        raise PromptError("stage_flows lists a stage more than once")
    if ordinals != sorted(ordinals):
        raise PromptError("stage_flows must be in stage order")


def assemble_prompt(spec: PromptSpec) -> AssembledPrompt:
    """Render a PromptSpec into system and user texts.

    The template lays out the system message; substitution is single-pass, so
    substituted content (e.g. few-shot JSON with braces) is never rescanned.
    System-side elements the template does not mention are appended in
    canonical order so every element always reaches the endpoint. The user
    message always carries the persona, the problem, and the few-shots.
    """
    _check_spec(spec)
    renderings = {
        "situation": spec.situation_information,
        "guidelines": spec.utterance_guidelines,
        "stages": render_stage_flows(spec.stage_flows),
        "instruction": spec.instruction,
        "persona": render_persona(spec.persona),
        "problem": render_problem(spec.problem),
        "few_shots": render_few_shots(spec.few_shots),
    }

    referenced: set[str] = set()

    def substitute(match: re.Match) -> str:
        name = match.group(1)
        if name not in PLACEHOLDERS:
            raise UnboundPlaceholder(name)
        referenced.add(name)
        return renderings[name]

    system_text = _PLACEHOLDER_RE.sub(substitute, spec.template)

    for name in ("situation", "guidelines", "stages", "instruction"):
        if name not in referenced and renderings[name]:
            system_text = f"{system_text}\n\n{renderings[name]}" if system_text else renderings[name]

    user_parts = [renderings["persona"], renderings["problem"]]
    if spec.few_shots:
        user_parts.append("Example dialogues:\n\n" + renderings["few_shots"])
    user_text = "\n\n".join(user_parts)

    return AssembledPrompt(system_text=system_text, user_text=user_text)


def stage_scoped_spec(spec: PromptSpec, stage: PolyaStage) -> PromptSpec:
    """Narrow a spec to a single stage: keep only that stage's flow and extend
    the instruction with a scope clause naming it. Idempotent."""
    flows = tuple(f for f in spec.stage_flows if f.stage is stage)
    clause = f'Focus only on "{stage.title}".'
    instruction = spec.instruction
    if clause not in instruction:
        instruction = f"{instruction.rstrip()} {clause}"
    return replace(spec, stage_flows=flows, instruction=instruction)


# ---------------------------------------------------------------------------
# Version files
# ---------------------------------------------------------------------------

PROMPT_VERSIONS = ("v1", "v2")

_STAGE_KEYS = {
    "understand": PolyaStage.UNDERSTAND,
    "plan": PolyaStage.PLAN,
    "execute": PolyaStage.EXECUTE,
    "look_back": PolyaStage.LOOK_BACK,
}


@dataclass(frozen=True)
class PromptElements:
    """The six file-borne elements of a prompt version; persona and problem
    are bound per pairing via :func:`bind_spec`."""

    version: str
    situation_information: str
    utterance_guidelines: str
    stage_flows: tuple[StageFlow, ...]
    few_shots: tuple[Dialogue, ...]
    template: str
    instruction: str


def bind_spec(elements: PromptElements, persona: StudentPersona, problem: MathProblem) -> PromptSpec:
    return PromptSpec(
        version=elements.version,
        situation_information=elements.situation_information,
        utterance_guidelines=elements.utterance_guidelines,
        persona=persona,
        problem=problem,
        stage_flows=elements.stage_flows,
        few_shots=elements.few_shots,
        template=elements.template,
        instruction=elements.instruction,
    )


def load_prompt_elements(path: Path) -> PromptElements:
    """Read a prompt version file (TOML: key/value plus multiline blocks)."""
    try:
        with open(path, "rb") as fp:
            data = tomllib.load(fp)
    except tomllib.TOMLDecodeError as exc:
        raise BadPromptFile(f"{path}: {exc}") from exc

    try:
        version = data["version"]
        flows = []
        for entry in data.get("stage_flows", []):
            stage_key = entry["stage"]
            if stage_key not in _STAGE_KEYS:
                raise BadPromptFile(f"{path}: unknown stage {stage_key!r}")
            flows.append(
                StageFlow(
                    stage=_STAGE_KEYS[stage_key],
                    goal=entry["goal"],
                    explanation=entry["explanation"],
                    example_prompts=tuple(entry.get("example_prompts", [])),
                )
            )
        shots = []
        for i, entry in enumerate(data.get("few_shots", []), start=1):
            turns = tuple(
                Turn(Speaker.from_wire(t["from"]), t["value"]) for t in entry["turns"]
            )
            shots.append(
                Dialogue(id=f"{version}-shot-{i}", problem_id="exemplar", turns=turns)
            )
        return PromptElements(
            version=version,
            situation_information=data["situation_information"],
            utterance_guidelines=data["utterance_guidelines"],
            stage_flows=tuple(flows),
            few_shots=tuple(shots),
            template=data["template"],
            instruction=data["instruction"],
        )
    except KeyError as exc:
        raise BadPromptFile(f"{path}: missing key {exc}") from exc


def default_elements_path(version: str) -> Path:
    if version not in PROMPT_VERSIONS:
        raise BadPromptFile(f"unknown prompt version {version!r} (expected one of {PROMPT_VERSIONS})")
    return Path(__file__).parent / "prompts" / version / "promptspec.toml"


def load_default_elements(version: str) -> PromptElements:
    return load_prompt_elements(default_elements_path(version))


#: Instruction used when a model plays the tutor live (or is trained to),
#: replacing the corpus-synthesis instruction that asks for a whole dialogue.
LIVE_INSTRUCTION = (
    "You are the tutor in a live session. Reply with the tutor's next single "
    "turn only: one to three short sentences ending in one question, staying "
    "within the current problem-solving stage."
)

_PLACEHOLDER_PERSONA = StudentPersona(
    id="unbound",
    background="(student profile bound at runtime)",
    strengths="(bound at runtime)",
    challenges="(bound at runtime)",
)
_PLACEHOLDER_PROBLEM = MathProblem(
    id="unbound",
    question="(math problem bound at runtime)",
    reference_solution="(bound at runtime)",
    final_answer="(bound at runtime)",
)


def instructional_system_text(elements: PromptElements, instruction: str | None = None) -> str:
    """System text built from the file-borne elements alone.

    Persona and problem render into the user message, so binding placeholders
    here leaves the system text free of them (default templates reference only
    system-side elements).
    """
    spec = bind_spec(elements, _PLACEHOLDER_PERSONA, _PLACEHOLDER_PROBLEM)
    if instruction is not None:
        spec = replace(spec, instruction=instruction)
    return assemble_prompt(spec).system_text
