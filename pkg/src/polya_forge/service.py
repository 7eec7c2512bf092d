"""HTTP backend for live tutoring sessions with turn-by-turn stage labeling.

Each session is an append-only JSONL event log under the data directory;
replaying a log reconstructs the exact session state, and relabeling appends
(last write wins) rather than mutating. Message handling is strictly
serialized per session — one in-flight student message — because the protocol
is a single human conversing with one model.

The service holds no model weights: "model variants" are just named endpoint
configurations (a locally served model, a hosted API, or the mock).
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .evaluation import (
    AnnotatedDialogue,
    EmptyGroup,
    GroupBy,
    annotated_to_record,
    compute_stage_metrics,
    metrics_to_records,
)
from .model import (
    EVALUATION_DOMAINS,
    Dialogue,
    MathDomain,
    MathProblem,
    MODEL_VARIANTS,
    Speaker,
    StudentPersona,
    Turn,
    TurnLabel,
    UnknownLabel,
)
from .prompts import (
    LIVE_INSTRUCTION,
    PromptElements,
    instructional_system_text,
    render_persona,
    render_problem,
)
from .synth import EndpointConfig, EndpointError, chat_complete_messages


@dataclass
class Session:
    """Replayed state of one session's event log."""

    id: str
    model_tag: str
    endpoint_name: str
    problem_id: str
    domain: MathDomain
    persona_id: str | None = None
    turns: list[Turn] = dc_field(default_factory=list)
    labels: dict[int, TurnLabel] = dc_field(default_factory=dict)
    closed: bool = False

    def apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "student_msg":
            self.turns.append(Turn(Speaker.HUMAN, event["text"]))
        elif kind == "tutor_msg":
            self.turns.append(Turn(Speaker.TUTOR, event["text"]))
        elif kind == "label":
            self.labels[event["turn_index"]] = TurnLabel.from_code(event["label"])
        elif kind == "closed":
            self.closed = True

    def tutor_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.turns) if t.speaker is Speaker.TUTOR]

    def unlabeled_indices(self) -> list[int]:
        return [i for i in self.tutor_indices() if i not in self.labels]

    def to_dialogue(self) -> Dialogue:
        return Dialogue(
            id=self.id,
            problem_id=self.problem_id,
            persona_id=self.persona_id,
            model_tag=self.model_tag,
            domain=self.domain,
            turns=tuple(self.turns),
        )


class SessionStore:
    """Event-log persistence: one append-only JSONL file per session."""

    def __init__(self, data_dir: Path):
        self.dir = Path(data_dir) / "sessions"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._sessions: dict[str, Session] = {}
        self._io_lock = threading.Lock()
        self._reply_locks: dict[str, threading.Lock] = {}
        for path in sorted(self.dir.glob("*.jsonl")):
            session = self._replay(path)
            if session:
                self._sessions[session.id] = session
                self._reply_locks[session.id] = threading.Lock()

    @staticmethod
    def _replay(path: Path) -> Session | None:
        session: Session | None = None
        with open(path, encoding="utf-8") as fp:
            for line in fp:
                if not line.strip():
                    continue
                event = json.loads(line)
                if event["type"] == "created":
                    session = Session(
                        id=event["id"],
                        model_tag=event["model_tag"],
                        endpoint_name=event["endpoint"],
                        problem_id=event["problem_id"],
                        persona_id=event.get("persona_id"),
                        domain=MathDomain(event["domain"]),
                    )
                elif session is not None:
                    session.apply(event)
        return session

    def create(self, session: Session, created_event: dict) -> None:
        with self._io_lock:
            self._sessions[session.id] = session
            self._reply_locks[session.id] = threading.Lock()
            self._append(session.id, created_event)

    def get(self, session_id: str) -> Session:
        session = self._sessions.get(session_id)
        if session is None:
            raise HTTPException(404, f"unknown session {session_id!r}")
        return session

    def reply_lock(self, session_id: str) -> threading.Lock:
        return self._reply_locks[session_id]

    def all_sessions(self) -> list[Session]:
        return list(self._sessions.values())

    def append(self, session: Session, *events: dict) -> None:
        """Persist events and apply them to in-memory state atomically."""
        with self._io_lock:
            for event in events:
                self._append(session.id, event)
                session.apply(event)

    def _append(self, session_id: str, event: dict) -> None:
        with open(self.dir / f"{session_id}.jsonl", "a", encoding="utf-8") as fp:
            fp.write(json.dumps(event, ensure_ascii=False) + "\n")


class CreateSessionBody(BaseModel):
    model_tag: str
    endpoint: str
    problem_id: str
    domain: str
    persona_id: str | None = None


class MessageBody(BaseModel):
    text: str


class LabelBody(BaseModel):
    turn_index: int
    label: str


def _session_view(session: Session, problem: MathProblem, persona: StudentPersona | None, pending: bool) -> dict:
    return {
        "id": session.id,
        "model_tag": session.model_tag,
        "endpoint": session.endpoint_name,
        "domain": session.domain.value,
        "closed": session.closed,
        "pending": pending,
        "problem": {
            "id": problem.id,
            "question": problem.question,
            "final_answer": problem.final_answer,
        },
        "persona": None
        if persona is None
        else {
            "id": persona.id,
            "background": persona.background,
            "strengths": persona.strengths,
            "challenges": persona.challenges,
        },
        "turns": [
            {
                "index": i,
                "from": t.speaker.wire_name,
                "value": t.text,
                "label": session.labels[i].code if i in session.labels else None,
            }
            for i, t in enumerate(session.turns)
        ],
        "unlabeled_tutor_turns": session.unlabeled_indices(),
    }


def create_app(
    data_dir: Path,
    endpoints: dict[str, EndpointConfig],
    problems: dict[str, MathProblem],
    personas: dict[str, StudentPersona],
    elements: PromptElements,
    ui_dir: Path | None = None,
) -> FastAPI:
    app = FastAPI(title="polya-forge session service")
    store = SessionStore(data_dir)
    app.state.store = store

    def _system_prompt(problem: MathProblem, persona: StudentPersona | None) -> str:
        parts = [instructional_system_text(elements, LIVE_INSTRUCTION), render_problem(problem)]
        if persona is not None:
            parts.append(render_persona(persona))
        return "\n\n".join(parts)

    @app.get("/catalog")
    def catalog() -> dict:
        return {
            "endpoints": sorted(endpoints),
            "model_variants": MODEL_VARIANTS,
            "domains": [d.value for d in EVALUATION_DOMAINS],
            "problems": [
                {"id": p.id, "question": p.question, "domain": p.domain.value}
                for p in problems.values()
            ],
            "personas": [{"id": p.id, "background": p.background} for p in personas.values()],
        }

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody) -> dict:
        if body.endpoint not in endpoints:
            raise HTTPException(400, f"unknown endpoint {body.endpoint!r}")
        if body.problem_id not in problems:
            raise HTTPException(400, f"unknown problem {body.problem_id!r}")
        if body.persona_id is not None and body.persona_id not in personas:
            raise HTTPException(400, f"unknown persona {body.persona_id!r}")
        try:
            domain = MathDomain(body.domain.lower())
        except ValueError:
            domain = None
        if domain not in EVALUATION_DOMAINS:
            raise HTTPException(
                400,
                f"bad domain {body.domain!r}: expected one of "
                f"{[d.value for d in EVALUATION_DOMAINS]}",
            )
        session = Session(
            id=uuid.uuid4().hex[:12],
            model_tag=body.model_tag,
            endpoint_name=body.endpoint,
            problem_id=body.problem_id,
            persona_id=body.persona_id,
            domain=domain,
        )
        store.create(
            session,
            {
                "type": "created",
                "id": session.id,
                "model_tag": session.model_tag,
                "endpoint": session.endpoint_name,
                "problem_id": session.problem_id,
                "persona_id": session.persona_id,
                "domain": session.domain.value,
            },
        )
        return {"id": session.id}

    @app.get("/sessions")
    def list_sessions() -> list[dict]:
        return [
            {
                "id": s.id,
                "model_tag": s.model_tag,
                "domain": s.domain.value,
                "n_turns": len(s.turns),
                "closed": s.closed,
                "fully_labeled": not s.unlabeled_indices(),
            }
            for s in sorted(store.all_sessions(), key=lambda s: s.id)
        ]

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str) -> dict:
        session = store.get(session_id)
        pending = store.reply_lock(session_id).locked()
        problem = problems[session.problem_id]
        persona = personas.get(session.persona_id) if session.persona_id else None
        return _session_view(session, problem, persona, pending)

    @app.post("/sessions/{session_id}/messages")
    def post_message(session_id: str, body: MessageBody) -> dict:
        session = store.get(session_id)
        if session.closed:
            raise HTTPException(409, "session is closed")
        if not body.text.strip():
            raise HTTPException(400, "message text is empty")
        lock = store.reply_lock(session_id)
        if not lock.acquire(blocking=False):
            raise HTTPException(409, "a reply is already pending for this session")
        try:
            problem = problems[session.problem_id]
            persona = personas.get(session.persona_id) if session.persona_id else None
            messages = [{"role": "system", "content": _system_prompt(problem, persona)}]
            messages += [
                {"role": t.speaker.chat_role, "content": t.text} for t in session.turns
            ]
            messages.append({"role": "user", "content": body.text})
            try:
                reply = chat_complete_messages(endpoints[session.endpoint_name], messages)
            except EndpointError as exc:
                # nothing is appended: the transcript stays as it was
                raise HTTPException(502, f"endpoint failure: {exc}") from exc
            store.append(
                session,
                {"type": "student_msg", "text": body.text},
                {"type": "tutor_msg", "text": reply},
            )
        finally:
            lock.release()
        return {"index": len(session.turns) - 1, "from": "gpt", "value": reply}

    @app.post("/sessions/{session_id}/labels")
    def post_label(session_id: str, body: LabelBody) -> dict:
        session = store.get(session_id)
        if not 0 <= body.turn_index < len(session.turns):
            raise HTTPException(400, f"no turn {body.turn_index}")
        if session.turns[body.turn_index].speaker is not Speaker.TUTOR:
            raise HTTPException(400, f"turn {body.turn_index} is not a tutor turn")
        try:
            label = TurnLabel.from_code(body.label)
        except UnknownLabel as exc:
            raise HTTPException(400, str(exc)) from exc
        store.append(session, {"type": "label", "turn_index": body.turn_index, "label": label.code})
        return {"ok": True, "turn_index": body.turn_index, "label": label.code}

    @app.post("/sessions/{session_id}/close")
    def close_session(session_id: str) -> dict:
        session = store.get(session_id)
        if not session.closed:
            store.append(session, {"type": "closed"})
        return {"ok": True, "closed": True}

    def _export_record(session: Session) -> dict:
        if not session.closed:
            raise HTTPException(409, "session is still open; close it before exporting")
        unlabeled = session.unlabeled_indices()
        if unlabeled:
            raise HTTPException(409, f"unlabeled tutor turns: {unlabeled}")
        annotated = AnnotatedDialogue(dialogue=session.to_dialogue(), labels=dict(session.labels))
        return annotated_to_record(annotated)

    @app.get("/sessions/{session_id}/export")
    def export_session(session_id: str) -> Response:
        record = _export_record(store.get(session_id))
        return Response(
            content=json.dumps(record, ensure_ascii=False) + "\n",
            media_type="application/json",
        )

    @app.get("/metrics")
    def metrics(group_by: str = "model,domain") -> dict:
        exportable = [
            s for s in store.all_sessions() if s.closed and not s.unlabeled_indices()
        ]
        corpus = [
            AnnotatedDialogue(dialogue=s.to_dialogue(), labels=dict(s.labels))
            for s in sorted(exportable, key=lambda s: s.id)
        ]
        mode = GroupBy.MODEL if group_by == "model" else GroupBy.MODEL_DOMAIN
        try:
            rows = metrics_to_records(compute_stage_metrics(corpus, mode))
        except EmptyGroup:
            rows = []
        return {"rows": rows, "n_sessions": len(corpus)}

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
