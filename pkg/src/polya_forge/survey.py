"""Expert questionnaire model, Likert response collection, and scoring.

The instrument is parts → sections → items; quantitative items use a 1-5
Likert scale, the rest collect open-ended text (stored verbatim, never
scored). Item references are "<part_key>.<section_key>.<number>".

Scoring: per-item mean and population standard deviation across raters, and
per-section mean as the mean of its item means (items may have different
rater counts, so pooling raw ratings would weight them unevenly).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class SurveyError(ValueError):
    """Base class for questionnaire/response problems."""


class DuplicateItem(SurveyError):
    def __init__(self, ref: str):
        super().__init__(f"duplicate item {ref!r}")
        self.ref = ref


class BadScale(SurveyError):
    def __init__(self, value: str):
        super().__init__(f"unknown scale {value!r}")
        self.value = value


class UnknownItemRef(SurveyError):
    def __init__(self, ref: str):
        super().__init__(f"unknown item reference {ref!r}")
        self.ref = ref


class OutOfScale(SurveyError):
    def __init__(self, ref: str, rating: int):
        super().__init__(f"rating {rating} for {ref!r} outside 1..5")
        self.ref = ref
        self.rating = rating


LIKERT = "likert_1_5"
OPEN_ENDED = "open_ended"
SCALES = (LIKERT, OPEN_ENDED)


@dataclass(frozen=True)
class Item:
    number: int
    text: str
    scale: str = LIKERT


@dataclass(frozen=True)
class Section:
    key: str
    name: str
    preamble: str
    items: tuple[Item, ...]


@dataclass(frozen=True)
class Part:
    key: str
    name: str
    sections: tuple[Section, ...]


@dataclass(frozen=True)
class Questionnaire:
    parts: tuple[Part, ...]

    def item_refs(self) -> dict[str, Item]:
        refs: dict[str, Item] = {}
        for part in self.parts:
            for section in part.sections:
                for item in section.items:
                    refs[f"{part.key}.{section.key}.{item.number}"] = item
        return refs

    def sections_in_order(self) -> list[tuple[Part, Section]]:
        return [(p, s) for p in self.parts for s in p.sections]


def load_questionnaire(path: Path) -> Questionnaire:
    with open(path, encoding="utf-8") as fp:
        data = json.load(fp)
    parts = []
    for part_obj in data["parts"]:
        sections = []
        for sec_obj in part_obj["sections"]:
            items = []
            seen_numbers: set[int] = set()
            for item_obj in sec_obj["items"]:
                number = item_obj["number"]
                scale = item_obj.get("scale", LIKERT)
                if scale not in SCALES:
                    raise BadScale(scale)
                if number in seen_numbers:
                    raise DuplicateItem(f"{part_obj['key']}.{sec_obj['key']}.{number}")
                seen_numbers.add(number)
                items.append(Item(number=number, text=item_obj["text"], scale=scale))
            sections.append(
                Section(
                    key=sec_obj["key"],
                    name=sec_obj["name"],
                    preamble=sec_obj.get("preamble", ""),
                    items=tuple(items),
                )
            )
        parts.append(Part(key=part_obj["key"], name=part_obj["name"], sections=tuple(sections)))
    return Questionnaire(parts=tuple(parts))


def default_questionnaire_path() -> Path:
    return Path(__file__).parent / "survey" / "llama-polya-appendix.json"


@dataclass(frozen=True)
class SurveyResponse:
    rater_id: str
    ratings: dict[str, int] = field(default_factory=dict)
    open_answers: dict[str, str] = field(default_factory=dict)


def load_responses(stream: Iterable[str]) -> list[SurveyResponse]:
    responses = []
    for line in stream:
        if not line.strip():
            continue
        obj = json.loads(line)
        responses.append(
            SurveyResponse(
                rater_id=obj["rater_id"],
                ratings={ref: int(v) for ref, v in obj.get("ratings", {}).items()},
                open_answers=dict(obj.get("open_answers", {})),
            )
        )
    return responses


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ItemScore:
    ref: str
    text: str
    mean: float
    sd: float  # population sd across the rater panel
    n: int


@dataclass(frozen=True)
class SectionScore:
    part_name: str
    section_name: str
    ref: str  # "<part_key>.<section_key>"
    mean: float
    n_items: int


@dataclass(frozen=True)
class ScoreTable:
    items: tuple[ItemScore, ...]
    sections: tuple[SectionScore, ...]
    open_answers: dict[str, list[tuple[str, str]]]  # ref -> [(rater_id, text)]


def score_survey(q: Questionnaire, responses: Sequence[SurveyResponse]) -> ScoreTable:
    if not responses:
        raise SurveyError("at least one response is required")
    refs = q.item_refs()

    ratings_by_ref: dict[str, list[int]] = {}
    open_by_ref: dict[str, list[tuple[str, str]]] = {}
    for response in responses:
        for ref, rating in response.ratings.items():
            item = refs.get(ref)
            if item is None or item.scale != LIKERT:
                raise UnknownItemRef(ref)
            if not 1 <= rating <= 5:
                raise OutOfScale(ref, rating)
            ratings_by_ref.setdefault(ref, []).append(rating)
        for ref, text in response.open_answers.items():
            item = refs.get(ref)
            if item is None or item.scale != OPEN_ENDED:
                raise UnknownItemRef(ref)
            open_by_ref.setdefault(ref, []).append((response.rater_id, text))

    item_scores: list[ItemScore] = []
    section_scores: list[SectionScore] = []
    for part in q.parts:
        for section in part.sections:
            means = []
            for item in section.items:
                ref = f"{part.key}.{section.key}.{item.number}"
                values = ratings_by_ref.get(ref)
                if not values:
                    continue
                mean = sum(values) / len(values)
                variance = sum((v - mean) ** 2 for v in values) / len(values)
                item_scores.append(
                    ItemScore(ref=ref, text=item.text, mean=mean, sd=math.sqrt(variance), n=len(values))
                )
                means.append(mean)
            if means:
                section_scores.append(
                    SectionScore(
                        part_name=part.name,
                        section_name=section.name,
                        ref=f"{part.key}.{section.key}",
                        mean=sum(means) / len(means),
                        n_items=len(means),
                    )
                )
    return ScoreTable(
        items=tuple(item_scores),
        sections=tuple(section_scores),
        open_answers=open_by_ref,
    )


def section_comparison(table: ScoreTable) -> list[SectionScore]:
    """Sections sorted by mean, best first; ties keep questionnaire order."""
    if not table.sections:
        raise SurveyError("score table has no sections")
    # sorted() is stable, so equal means preserve the original order.
    return sorted(table.sections, key=lambda s: -s.mean)


def score_table_to_records(table: ScoreTable) -> dict:
    return {
        "items": [
            {"ref": i.ref, "text": i.text, "mean": i.mean, "sd": i.sd, "n": i.n}
            for i in table.items
        ],
        "sections": [
            {
                "ref": s.ref,
                "part": s.part_name,
                "section": s.section_name,
                "mean": s.mean,
                "n_items": s.n_items,
            }
            for s in table.sections
        ],
        "open_answers": {
            ref: [{"rater_id": rid, "text": text} for rid, text in answers]
            for ref, answers in table.open_answers.items()
        },
    }
