"""ChatML rendering, assistant-only loss masks, masked NLL, and trainer config.

The rendered layout is fixed: ``<|im_start|>`` + role + newline + content +
``<|im_end|>`` + newline per message. Only assistant message content counts
toward the training loss; spans and token ranges are byte offsets into the
UTF-8 encoding of the rendered text. Message content containing a literal tag
is rejected at render time (no escaping scheme — training-data hygiene).

The tokenizer is pluggable. The shipped reference splitter is deliberately
simple (special tags, single whitespace bytes, non-whitespace runs) so the
mask logic is testable without any ML dependency; real subword tokenizers are
out of scope here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

IM_START = "<|im_start|>"
IM_END = "<|im_end|>"
ROLES = ("system", "user", "assistant")


class ChatMLError(ValueError):
    """Base class for ChatML rendering/parsing failures."""


class EmptyContent(ChatMLError):
    def __init__(self, index: int):
        super().__init__(f"message {index} has empty content")
        self.index = index


class UnknownRole(ChatMLError):
    def __init__(self, role: str):
        super().__init__(f"unknown role {role!r} (expected one of {ROLES})")
        self.role = role


class ReservedSequence(ChatMLError):
    def __init__(self, index: int, sequence: str):
        super().__init__(f"message {index} content contains reserved sequence {sequence!r}")
        self.index = index
        self.sequence = sequence


class UnbalancedTags(ChatMLError):
    def __init__(self, position: int):
        super().__init__(f"malformed ChatML at offset {position}")
        self.position = position


class TokenizerGap(ChatMLError):
    def __init__(self, position: int):
        super().__init__(f"tokenizer failed to tile the text at byte {position}")
        self.position = position


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatMLDocument:
    """Rendered ChatML plus the byte spans holding assistant content.

    ``assistant_spans`` are half-open ranges into ``rendered``'s UTF-8 bytes,
    disjoint and sorted; each covers exactly one assistant message's content.
    """

    messages: tuple[ChatMessage, ...]
    rendered: str
    assistant_spans: tuple[tuple[int, int], ...]

    @property
    def rendered_bytes(self) -> bytes:
        return self.rendered.encode("utf-8")


def render_chatml(messages: Sequence[ChatMessage]) -> ChatMLDocument:
    parts: list[str] = []
    spans: list[tuple[int, int]] = []
    pos = 0
    for i, msg in enumerate(messages):
        if msg.role not in ROLES:
            raise UnknownRole(msg.role)
        if not msg.content:
            raise EmptyContent(i)
        for reserved in (IM_START, IM_END):
            if reserved in msg.content:
                raise ReservedSequence(i, reserved)
        head = f"{IM_START}{msg.role}\n"
        parts.append(head)
        pos += len(head.encode("utf-8"))
        n_content = len(msg.content.encode("utf-8"))
        if msg.role == "assistant":
            spans.append((pos, pos + n_content))
        parts.append(msg.content)
        pos += n_content
        tail = f"{IM_END}\n"
        parts.append(tail)
        pos += len(tail.encode("utf-8"))
    return ChatMLDocument(
        messages=tuple(messages), rendered="".join(parts), assistant_spans=tuple(spans)
    )


def parse_chatml(text: str) -> list[ChatMessage]:
    """Inverse of render_chatml: parse(render(m).rendered) == m."""
    messages: list[ChatMessage] = []
    pos = 0
    while pos < len(text):
        if not text.startswith(IM_START, pos):
            raise UnbalancedTags(pos)
        pos += len(IM_START)
        newline = text.find("\n", pos)
        if newline == -1:
            raise UnbalancedTags(pos)
        role = text[pos:newline]
        if role not in ROLES:
            raise UnknownRole(role)
        pos = newline + 1
        end = text.find(IM_END, pos)
        if end == -1:
            raise UnbalancedTags(pos)
        content = text[pos:end]
        pos = end + len(IM_END)
        if not text.startswith("\n", pos):
            raise UnbalancedTags(pos)
        pos += 1
        messages.append(ChatMessage(role, content))
    return messages


# ---------------------------------------------------------------------------
# Tokenization and loss masks
# ---------------------------------------------------------------------------

class Tokenizer(Protocol):
    def tokenize(self, data: bytes) -> list[tuple[int, int]]:
        """Tile ``data`` into contiguous half-open byte ranges, in order."""
        ...


_WHITESPACE = frozenset(b" \t\n\r\f\v")
_SPECIALS = (IM_START.encode(), IM_END.encode())


class ReferenceTokenizer:
    """Deterministic splitter: tag tokens, single whitespace bytes, and
    maximal non-whitespace runs.

    Because rendered content is always preceded by the role line's newline and
    followed by an end tag, this splitter never emits a token straddling an
    assistant-span boundary, so masked bytes cover spans exactly.
    """

    def tokenize(self, data: bytes) -> list[tuple[int, int]]:
        ranges: list[tuple[int, int]] = []
        i = 0
        n = len(data)
        while i < n:
            special = self._special_at(data, i)
            if special:
                ranges.append((i, i + special))
                i += special
            elif data[i] in _WHITESPACE:
                ranges.append((i, i + 1))
                i += 1
            else:
                j = i + 1
                while j < n and data[j] not in _WHITESPACE and not self._special_at(data, j):
                    j += 1
                ranges.append((i, j))
                i = j
        return ranges

    @staticmethod
    def _special_at(data: bytes, i: int) -> int:
        for special in _SPECIALS:
            if data.startswith(special, i):
                return len(special)
        return 0


@dataclass(frozen=True)
class Token:
    piece: bytes
    start: int
    end: int


@dataclass(frozen=True)
class TokenizedDocument:
    """Token tiling of a rendered document plus the per-token loss mask.

    mask[t] is True iff token t lies fully inside an assistant span; a token
    straddling a span boundary never contributes to the loss.
    """

    tokens: tuple[Token, ...]
    mask: tuple[bool, ...]


def compute_loss_mask(doc: ChatMLDocument, tok: Tokenizer) -> TokenizedDocument:
    data = doc.rendered_bytes
    ranges = tok.tokenize(data)
    expected = 0
    for start, end in ranges:
        if start != expected or end <= start or end > len(data):
            raise TokenizerGap(expected)
        expected = end
    if expected != len(data):
        raise TokenizerGap(expected)

    spans = doc.assistant_spans
    mask: list[bool] = []
    span_idx = 0
    for start, end in ranges:
        while span_idx < len(spans) and spans[span_idx][1] <= start:
            span_idx += 1
        inside = (
            span_idx < len(spans)
            and spans[span_idx][0] <= start
            and end <= spans[span_idx][1]
        )
        mask.append(inside)
    tokens = tuple(Token(data[s:e], s, e) for s, e in ranges)
    return TokenizedDocument(tokens=tokens, mask=tuple(mask))


# ---------------------------------------------------------------------------
# Masked NLL
# ---------------------------------------------------------------------------

class BatchError(ValueError):
    """Base class for masked-NLL input errors."""


class EmptyBatch(BatchError):
    def __init__(self):
        super().__init__("batch has no examples")


class NoMaskedTokens(BatchError):
    def __init__(self):
        super().__init__("no mask-true token in the batch")


class LengthMismatch(BatchError):
    def __init__(self, index: int, n_logprobs: int, n_mask: int):
        super().__init__(
            f"example {index}: {n_logprobs} logprobs but {n_mask} mask entries"
        )
        self.index = index


def _pairwise_sum(values: Sequence[float]) -> float:
    # Deterministic reduction order regardless of how work is split.
    n = len(values)
    if n == 0:
        return 0.0
    if n == 1:
        return values[0]
    mid = n // 2
    return _pairwise_sum(values[:mid]) + _pairwise_sum(values[mid:])


def masked_nll(batch: Sequence[tuple[Sequence[float], Sequence[bool]]]) -> float:
    """Mean over examples of the negated sum of masked token logprobs.

    The normalizer is the example count, not the token count: long responses
    weigh more within their example, but every example counts once.
    """
    if not batch:
        raise EmptyBatch()
    example_sums: list[float] = []
    n_masked = 0
    for i, (logprobs, mask) in enumerate(batch):
        if len(logprobs) != len(mask):
            raise LengthMismatch(i, len(logprobs), len(mask))
        masked = [lp for lp, m in zip(logprobs, mask) if m]
        n_masked += len(masked)
        example_sums.append(_pairwise_sum(masked))
    if n_masked == 0:
        raise NoMaskedTokens()
    return -_pairwise_sum(example_sums) / len(batch)


# ---------------------------------------------------------------------------
# Trainer config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    base_model: str = "meta-llama/Llama-3.1-8B"
    dataset_path: str = "train.jsonl"
    learning_rate: float = 0.0002
    warmup_steps: int = 100
    weight_decay: float = 0.1
    micro_batch_size: int = 1
    epochs: int = 1
    zero_stage: int = 2

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


def emit_training_config(cfg: TrainingConfig) -> str:
    """Emit a flat key/value config (valid YAML mapping) for the trainer.

    A ``deepspeed`` line is derived from zero_stage so sharded optimizer runs
    pick up the right preset; parse_training_config ignores it.
    """
    lines = [
        f"base_model: {cfg.base_model}",
        f"dataset_path: {cfg.dataset_path}",
        f"learning_rate: {cfg.learning_rate!r}",
        f"warmup_steps: {cfg.warmup_steps}",
        f"weight_decay: {cfg.weight_decay!r}",
        f"micro_batch_size: {cfg.micro_batch_size}",
        f"epochs: {cfg.epochs}",
        f"zero_stage: {cfg.zero_stage}",
    ]
    if cfg.zero_stage > 0:
        lines.append(f"deepspeed: zero{cfg.zero_stage}")
    return "\n".join(lines) + "\n"


_INT_FIELDS = {"warmup_steps", "micro_batch_size", "epochs", "zero_stage"}
_FLOAT_FIELDS = {"learning_rate", "weight_decay"}


def parse_training_config(text: str) -> TrainingConfig:
    values: dict = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or ":" not in line:
            continue
        key, _, raw = line.partition(":")
        key = key.strip()
        raw = raw.strip()
        if key in _INT_FIELDS:
            values[key] = int(raw)
        elif key in _FLOAT_FIELDS:
            values[key] = float(raw)
        elif key in ("base_model", "dataset_path"):
            values[key] = raw
        # derived keys (deepspeed) are ignored
    return TrainingConfig(**values)
