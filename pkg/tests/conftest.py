from __future__ import annotations

from pathlib import Path

import pytest

from polya_forge.model import Dialogue, MathDomain, Speaker, Turn

DATA_DIR = Path(__file__).parent / "data"


def make_turns(*texts: str, opener: Speaker = Speaker.HUMAN) -> tuple[Turn, ...]:
    """Build an alternating turn sequence from texts, starting with `opener`."""
    order = (
        (Speaker.HUMAN, Speaker.TUTOR) if opener is Speaker.HUMAN else (Speaker.TUTOR, Speaker.HUMAN)
    )
    return tuple(Turn(order[i % 2], text) for i, text in enumerate(texts))


def make_dialogue(
    n_turns: int = 4,
    dialogue_id: str = "d-1",
    model_tag: str | None = None,
    domain: MathDomain = MathDomain.UNSPECIFIED,
    opener: Speaker = Speaker.HUMAN,
) -> Dialogue:
    return Dialogue(
        id=dialogue_id,
        problem_id="p-1",
        model_tag=model_tag,
        domain=domain,
        turns=make_turns(*(f"turn {i}" for i in range(n_turns)), opener=opener),
    )


@pytest.fixture
def gsm8k_lines() -> list[str]:
    return (DATA_DIR / "gsm8k_fixture.jsonl").read_text(encoding="utf-8").splitlines()


@pytest.fixture
def persona_lines() -> list[str]:
    return (DATA_DIR / "personas.jsonl").read_text(encoding="utf-8").splitlines()
