"""Stage-annotated transcripts and the per-model evaluation battery.

A labeled corpus yields, per model and math domain: the distribution of tutor
turns over the four stages, the share of Error-labeled turns, and the average
conversation length. The unit of analysis is the labeled tutor turn, pooled
across a group's dialogues, which is why each row's five percentages sum to
100. Every model additionally gets an "Average" row: the unweighted mean of
its per-domain rows.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .model import (
    Dialogue,
    MalformedRecord,
    PolyaStage,
    Speaker,
    TurnLabel,
    dialogue_from_record,
    dialogue_to_record,
)

AVERAGE = "Average"


class AnnotationError(ValueError):
    """Base class for annotation loading failures."""


class UnlabeledTutorTurn(AnnotationError):
    def __init__(self, dialogue_id: str, index: int):
        super().__init__(f"dialogue {dialogue_id!r}: tutor turn {index} has no label")
        self.dialogue_id = dialogue_id
        self.index = index


class LabelOnHumanTurn(AnnotationError):
    def __init__(self, dialogue_id: str, index: int):
        super().__init__(f"dialogue {dialogue_id!r}: turn {index} is not a tutor turn")
        self.dialogue_id = dialogue_id
        self.index = index


class EmptyGroup(ValueError):
    pass


@dataclass(frozen=True)
class AnnotatedDialogue:
    """A dialogue whose tutor turns each carry exactly one label.

    ``labels`` maps absolute turn indices (into dialogue.turns) to labels.
    """

    dialogue: Dialogue
    labels: dict[int, TurnLabel]

    def __post_init__(self):
        tutor = set(self.dialogue.tutor_turn_indices())
        for index in self.labels:
            if index not in tutor:
                raise LabelOnHumanTurn(self.dialogue.id, index)
        for index in sorted(tutor):
            if index not in self.labels:
                raise UnlabeledTutorTurn(self.dialogue.id, index)

    def labels_in_order(self) -> list[tuple[int, TurnLabel]]:
        return sorted(self.labels.items())


def annotated_to_record(ad: AnnotatedDialogue) -> dict:
    record = dialogue_to_record(ad.dialogue)
    record["labels"] = {str(i): label.code for i, label in ad.labels_in_order()}
    return record


def annotated_from_record(obj: dict, line_no: int | None = None) -> AnnotatedDialogue:
    dialogue = dialogue_from_record(obj, line_no)
    raw_labels = obj.get("labels")
    if not isinstance(raw_labels, dict):
        raise MalformedRecord("record has no 'labels' object", line_no)
    labels = {int(i): TurnLabel.from_code(code) for i, code in raw_labels.items()}
    return AnnotatedDialogue(dialogue=dialogue, labels=labels)


def load_annotations(stream: Iterable[str]) -> list[AnnotatedDialogue]:
    out = []
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(f"invalid JSON: {exc.msg}", line_no) from exc
        out.append(annotated_from_record(obj, line_no))
    return out


def write_annotations(corpus: Iterable[AnnotatedDialogue], fp) -> None:
    for ad in corpus:
        fp.write(json.dumps(annotated_to_record(ad), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

class GroupBy(Enum):
    MODEL = "model"
    MODEL_DOMAIN = "model,domain"


@dataclass(frozen=True)
class StageMetrics:
    """One report row. Percentages are unrounded; rendering rounds to one
    decimal. stage_pct plus error_rate always sums to 100 (of labeled turns).
    """

    model_tag: str
    domain: str  # domain display name, or "Average"
    avg_conv_length: float
    stage_pct: tuple[float, float, float, float]  # stages 1..4
    error_rate: float
    n_labels: int
    n_dialogues: int

    def pct(self, stage: PolyaStage) -> float:
        return self.stage_pct[stage.ordinal - 1]


_DOMAIN_ORDER = {"Arithmetic": 0, "Measurement": 1, "Geometry": 2, "Unspecified": 3, AVERAGE: 4}


def _group_row(model_tag: str, domain: str, group: list[AnnotatedDialogue]) -> StageMetrics:
    counts = {label: 0 for label in TurnLabel}
    for ad in group:
        for label in ad.labels.values():
            counts[label] += 1
    total = sum(counts.values())
    if total == 0:
        raise EmptyGroup(f"group ({model_tag!r}, {domain!r}) has no labeled turns")
    stage_pct = tuple(
        100.0 * counts[TurnLabel.from_stage(stage)] / total for stage in PolyaStage
    )
    error_rate = 100.0 * counts[TurnLabel.ERROR] / total
    avg_len = sum(len(ad.dialogue.turns) for ad in group) / len(group)
    return StageMetrics(
        model_tag=model_tag,
        domain=domain,
        avg_conv_length=avg_len,
        stage_pct=stage_pct,
        error_rate=error_rate,
        n_labels=total,
        n_dialogues=len(group),
    )


def _average_row(model_tag: str, rows: Sequence[StageMetrics]) -> StageMetrics:
    n = len(rows)
    return StageMetrics(
        model_tag=model_tag,
        domain=AVERAGE,
        avg_conv_length=sum(r.avg_conv_length for r in rows) / n,
        stage_pct=tuple(sum(r.stage_pct[i] for r in rows) / n for i in range(4)),
        error_rate=sum(r.error_rate for r in rows) / n,
        n_labels=sum(r.n_labels for r in rows),
        n_dialogues=sum(r.n_dialogues for r in rows),
    )


def compute_stage_metrics(
    corpus: Sequence[AnnotatedDialogue], group_by: GroupBy = GroupBy.MODEL_DOMAIN
) -> list[StageMetrics]:
    """Aggregate a labeled corpus into report rows.

    With MODEL_DOMAIN grouping, each model gets one row per domain plus an
    Average row (unweighted mean of its domain rows). With MODEL grouping,
    all of a model's labels pool into a single row reported as "Average".
    """
    if not corpus:
        raise EmptyGroup("corpus has no annotated dialogues")

    groups: dict[tuple[str, str], list[AnnotatedDialogue]] = {}
    for ad in corpus:
        model = ad.dialogue.model_tag or ""
        domain = ad.dialogue.domain.display if group_by is GroupBy.MODEL_DOMAIN else AVERAGE
        groups.setdefault((model, domain), []).append(ad)

    rows: list[StageMetrics] = []
    for model in sorted({model for model, _ in groups}):
        model_rows = [
            _group_row(model, domain, groups[(m, domain)])
            for (m, domain) in sorted(groups, key=lambda k: _DOMAIN_ORDER[k[1]])
            if m == model
        ]
        rows.extend(model_rows)
        if group_by is GroupBy.MODEL_DOMAIN:
            rows.append(_average_row(model, model_rows))
    return rows


@dataclass(frozen=True)
class Regression:
    """An adjacent pair of stage-labeled tutor turns whose stage went backwards.

    Regressions are diagnostics, not errors: deliberately revisiting an
    earlier stage is legitimate tutoring.
    """

    index_from: int
    index_to: int


def stage_order_diagnostics(ad: AnnotatedDialogue) -> list[Regression]:
    """List adjacent stage decreases across a dialogue's labeled tutor turns.

    Error labels are skipped entirely; equal stages do not regress.
    """
    regressions = []
    prev: tuple[int, PolyaStage] | None = None
    for index, label in ad.labels_in_order():
        stage = label.stage
        if stage is None:
            continue
        if prev is not None and stage.ordinal < prev[1].ordinal:
            regressions.append(Regression(prev[0], index))
        prev = (index, stage)
    return regressions


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = (
    "Model",
    "Domain",
    "Avg Conv. Length",
    "Stage 1",
    "Stage 2",
    "Stage 3",
    "Stage 4",
    "Error rate",
)


def _display_model(tag: str) -> str:
    return tag if tag else "(untagged)"


def _row_cells(m: StageMetrics, pct_suffix: str) -> list[str]:
    return [
        _display_model(m.model_tag),
        m.domain,
        f"{m.avg_conv_length:.1f}",
        *[f"{p:.1f}{pct_suffix}" for p in m.stage_pct],
        f"{m.error_rate:.1f}{pct_suffix}",
    ]


def render_report(metrics: Sequence[StageMetrics], format: str = "markdown") -> str:
    """Render rows as a markdown table or CSV; percentages to one decimal."""
    if not metrics:
        raise EmptyGroup("no metrics to render")
    if format == "markdown":
        lines = [
            "| " + " | ".join(REPORT_COLUMNS) + " |",
            "|" + "|".join(" --- " for _ in REPORT_COLUMNS) + "|",
        ]
        lines.extend("| " + " | ".join(_row_cells(m, "%")) + " |" for m in metrics)
        return "\n".join(lines) + "\n"
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(REPORT_COLUMNS)
        for m in metrics:
            writer.writerow(_row_cells(m, ""))
        return buf.getvalue()
    raise ValueError(f"unknown report format {format!r}")


def metrics_to_records(metrics: Sequence[StageMetrics]) -> list[dict]:
    """JSON-friendly view of the rows (used by --format json and the API)."""
    return [
        {
            "model_tag": m.model_tag,
            "domain": m.domain,
            "avg_conv_length": m.avg_conv_length,
            "stage_pct": list(m.stage_pct),
            "error_rate": m.error_rate,
            "n_labels": m.n_labels,
            "n_dialogues": m.n_dialogues,
        }
        for m in metrics
    ]
