"""polya-forge: stage-scaffolded tutoring dialogue synthesis, ChatML packing,
and transcript evaluation."""

from .model import (
    Dialogue,
    MathDomain,
    MathProblem,
    PolyaStage,
    Speaker,
    StudentPersona,
    Turn,
    TurnLabel,
    ValidationPolicy,
    ValidationReport,
    validate_dialogue,
)

__all__ = [
    "Dialogue",
    "MathDomain",
    "MathProblem",
    "PolyaStage",
    "Speaker",
    "StudentPersona",
    "Turn",
    "TurnLabel",
    "ValidationPolicy",
    "ValidationReport",
    "validate_dialogue",
]

__version__ = "0.1.0"
