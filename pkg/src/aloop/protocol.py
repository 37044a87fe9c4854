"""Annotation protocol state machine.

Protocols are YAML documents mapping state names to state definitions::

    start:
        type: load
        dataloader: OCTLoader
        transitions:
            - next:
                  target: seg_ilm
    seg_ilm:
        type: octSegmentation
        question: Inner Limiting Membrane
        annotation_type: line
        transitions:
            - "*":
                  target: end

The machine starts at the state named ``start`` and finishes at the implicit
``end`` state. Transition patterns are matched literally first, the "*"
wildcard last, in listed order within each class. Completing a session emits
one AnnotationRecord merging all line and select answers; re-completion after
jumps overwrites it (latest wins).
"""

from __future__ import annotations

import itertools
import uuid
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from .datamgr import AnnotationRecord, BoundaryLine, CategoricalAnswer, UsageError

STATE_TYPES = ("load", "octSegmentation", "select", "summary_oct", "end")
USER_STATE_TYPES = ("octSegmentation", "select", "summary_oct")
END = "end"


class ProtocolError(Exception):
    """Protocol text that cannot become a valid state machine."""

    def __init__(self, message: str, state: Optional[str] = None):
        self.state = state
        super().__init__(f"state {state!r}: {message}" if state else message)


class AnswerRejected(Exception):
    """Answer does not fit the current state; session unchanged."""


@dataclass
class StateDef:
    name: str
    type: str
    question: str = ""
    annotation_type: Optional[str] = None
    annotation_class: Optional[str] = None
    options: List[str] = field(default_factory=list)
    dataloader: Optional[str] = None
    transitions: List[Tuple[str, str]] = field(default_factory=list)
    extras: Dict[str, Any] = field(default_factory=dict)


@dataclass
class Protocol:
    states: Dict[str, StateDef]
    start: str = "start"
    warnings: List[str] = field(default_factory=list, compare=False)

    def user_states(self) -> List[str]:
        return [n for n, s in self.states.items() if s.type in USER_STATE_TYPES]


@dataclass
class Session:
    session_id: str
    sample_id: str
    current_state: str
    annotator_id: str = "ui"
    answers: Dict[str, Any] = field(default_factory=dict)
    visited: List[str] = field(default_factory=list)
    completed: bool = False
    draft: Any = None  # prior answer preloaded by jump_to_state

    def __post_init__(self):
        if not self.visited:
            self.visited = [self.current_state]


# --- parsing ------------------------------------------------------------------

_STATE_KEYS = {"type", "question", "annotation_type", "class", "options",
               "dataloader", "transitions"}


def _parse_transitions(raw: Any, name: str) -> List[Tuple[str, str]]:
    if raw is None:
        return []
    if not isinstance(raw, list):
        raise ProtocolError("transitions must be a sequence", name)
    out = []
    for entry in raw:
        if not isinstance(entry, dict) or len(entry) != 1:
            raise ProtocolError("each transition must be a single pattern -> target mapping", name)
        (pattern, body), = entry.items()
        if isinstance(pattern, bool):  # YAML 1.1 turns bare yes/no into bools
            pattern = "yes" if pattern else "no"
        if not isinstance(body, dict) or "target" not in body:
            raise ProtocolError(f"transition {pattern!r} lacks a target", name)
        out.append((str(pattern), str(body["target"])))
    return out


def parse_protocol(text: str) -> Protocol:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ProtocolError(f"invalid YAML: {exc}") from None
    if doc is None:
        raise ProtocolError("empty protocol")
    if not isinstance(doc, dict):
        raise ProtocolError("protocol must map state names to definitions")

    warnings: List[str] = []
    states: Dict[str, StateDef] = {}
    for name, body in doc.items():
        name = str(name)
        if not isinstance(body, dict):
            raise ProtocolError("state definition must be a mapping", name)
        stype = body.get("type")
        if stype not in STATE_TYPES:
            raise ProtocolError(f"unknown state type {stype!r}", name)
        if stype == "octSegmentation":
            ann_type = body.get("annotation_type", "line")
            if ann_type != "line":
                raise ProtocolError(f"unsupported annotation_type {ann_type!r}", name)
        options = body.get("options") or []
        if not isinstance(options, list):
            raise ProtocolError("options must be a list", name)
        if stype == "select":
            if not options:
                raise ProtocolError("select state lists no options", name)
            options = ["yes" if o is True else "no" if o is False else str(o)
                       for o in options]
        for key in set(body) - _STATE_KEYS:
            warnings.append(f"state {name!r}: unrecognized key {key!r}")
        states[name] = StateDef(
            name=name,
            type=str(stype),
            question=str(body.get("question", "")),
            annotation_type=body.get("annotation_type", "line" if stype == "octSegmentation" else None),
            annotation_class=body.get("class"),
            options=options,
            dataloader=body.get("dataloader"),
            transitions=_parse_transitions(body.get("transitions"), name),
            extras={k: body[k] for k in set(body) - _STATE_KEYS},
        )

    if END in states:
        if states[END].type != END:
            raise ProtocolError("the end state must have type 'end'", END)
    else:
        states[END] = StateDef(name=END, type=END)
    if "start" not in states:
        raise ProtocolError("no start state: define a state named 'start'")

    for name, state in states.items():
        for pattern, target in state.transitions:
            if target not in states:
                raise ProtocolError(f"transition {pattern!r} targets unknown state {target!r}", name)

    protocol = Protocol(states=states, start="start", warnings=warnings)
    _check_reachability(protocol)
    return protocol


def _reachable_from(protocol: Protocol, origin: str) -> set:
    seen = {origin}
    frontier = [origin]
    while frontier:
        here = frontier.pop()
        for _, target in protocol.states[here].transitions:
            if target not in seen:
                seen.add(target)
                frontier.append(target)
    return seen


def _check_reachability(protocol: Protocol) -> None:
    reachable = _reachable_from(protocol, protocol.start)
    if END not in reachable:
        raise ProtocolError("'end' is not reachable from 'start'")
    for name in sorted(reachable - {END}):
        if END not in _reachable_from(protocol, name):
            raise ProtocolError("cannot reach 'end' from here", name)


# --- session mechanics ----------------------------------------------------------


def _match_key(answer: Any) -> Optional[str]:
    if isinstance(answer, str):
        return answer
    if isinstance(answer, dict) and isinstance(answer.get("answer"), str):
        return answer["answer"]
    return None


def _next_state(state: StateDef, answer: Any) -> str:
    key = _match_key(answer)
    for pattern, target in state.transitions:
        if pattern != "*" and pattern == key:
            return target
    for pattern, target in state.transitions:
        if pattern == "*":
            return target
    raise AnswerRejected(f"no transition of state {state.name!r} matches answer {key!r}")


def _validate_answer(state: StateDef, answer: Any) -> Any:
    if state.type == "octSegmentation":
        if not isinstance(answer, dict) or "points" not in answer:
            raise AnswerRejected("line states expect {points: [[x, y], ...], uncertain: bool}")
        points = answer["points"]
        if not isinstance(points, (list, tuple)) or len(points) < 2:
            raise AnswerRejected("a boundary needs at least 2 points")
        for p in points:
            if not (isinstance(p, (list, tuple)) and len(p) == 2):
                raise AnswerRejected(f"malformed point {p!r}")
        return {
            "points": [[float(x), float(y)] for x, y in points],
            "uncertain": bool(answer.get("uncertain", False)),
            "class": answer.get("class"),
        }
    if state.type == "select":
        key = _match_key(answer)
        if key not in state.options:
            raise AnswerRejected(f"answer {key!r} is not one of {state.options}")
        return key
    return answer


def advance(protocol: Protocol, session: Session, answer: Any) -> Session:
    """Record the answer for the current state and move along the first match."""
    if session.completed:
        raise UsageError("session already completed")
    state = protocol.states[session.current_state]
    payload = _validate_answer(state, answer)
    target = _next_state(state, payload)
    session.answers[session.current_state] = payload
    session.current_state = target
    if target not in session.visited:
        session.visited.append(target)
    session.draft = None
    if target == END:
        session.completed = True
    return session


def jump_to_state(protocol: Protocol, session: Session, state_name: str) -> Session:
    """Move the cursor without touching the answer log; prior answer becomes the draft."""
    if state_name == END:
        raise UsageError("cannot jump to 'end'")
    if state_name not in protocol.states:
        raise UsageError(f"unknown state {state_name!r}")
    session.current_state = state_name
    session.completed = False
    session.draft = session.answers.get(state_name)
    if state_name not in session.visited:
        session.visited.append(state_name)
    return session


def session_record(protocol: Protocol, session: Session) -> AnnotationRecord:
    """Merge all line and select answers into one AnnotationRecord."""
    items = []
    for name, state in protocol.states.items():
        if name not in session.answers:
            continue
        payload = session.answers[name]
        if state.type == "octSegmentation":
            class_name = payload.get("class") or state.annotation_class or state.question or name
            items.append(BoundaryLine(
                class_name=class_name,
                points=[(x, y) for x, y in payload["points"]],
                uncertain=bool(payload.get("uncertain", False)),
            ))
        elif state.type == "select":
            items.append(CategoricalAnswer(question=state.question or name, answer=payload))
    return AnnotationRecord(sample_id=session.sample_id, annotator_id=session.annotator_id,
                            items=items)


def progress(protocol: Protocol, session: Session) -> Tuple[int, int]:
    user = set(protocol.user_states())
    visited = [s for s in session.visited if s in user]
    return len(visited), len(user)


# --- the engine: sessions + store emission ---------------------------------------


class SessionEngine:
    """Owns live sessions over one protocol; emits records to a store on completion.

    ``store`` is anything with update_annotations(records) -> (accepted, rejected);
    normally the DataManager. Without a store, completed records are kept on the
    session result only.
    """

    def __init__(self, protocol: Protocol, store=None):
        self.protocol = protocol
        self.store = store
        self.sessions: Dict[str, Session] = {}
        self._counter = itertools.count()

    def create_session(self, sample_id: str, annotator_id: str = "ui") -> Session:
        session = Session(
            session_id=f"s{next(self._counter):04d}-{uuid.uuid4().hex[:8]}",
            sample_id=sample_id,
            current_state=self.protocol.start,
            annotator_id=annotator_id,
        )
        self.sessions[session.session_id] = session
        return session

    def get(self, session_id: str) -> Session:
        if session_id not in self.sessions:
            raise UsageError(f"unknown session {session_id!r}")
        return self.sessions[session_id]

    def advance(self, session_id: str, answer: Any):
        """Returns (session, record_status). record_status is None until completion."""
        session = advance(self.protocol, self.get(session_id), answer)
        status = None
        if session.completed:
            record = session_record(self.protocol, session)
            status = {"record": record, "accepted": True, "reason": None}
            if self.store is not None:
                accepted, rejected = self.store.update_annotations([record])
                if rejected:
                    status["accepted"] = False
                    status["reason"] = rejected[0][1]
        return session, status

    def jump(self, session_id: str, state_name: str) -> Session:
        return jump_to_state(self.protocol, self.get(session_id), state_name)

    def describe(self, session: Session) -> dict:
        """JSON session view for the REST surface and the UI."""
        state = self.protocol.states[session.current_state]
        visited, total = progress(self.protocol, session)
        return {
            "session_id": session.session_id,
            "sample_id": session.sample_id,
            "current_state": session.current_state,
            "state": {
                "type": state.type,
                "question": state.question,
                "annotation_type": state.annotation_type,
                "options": state.options,
                "dataloader": state.dataloader,
            },
            "answers": session.answers,
            "visited": session.visited,
            "completed": session.completed,
            "draft": session.draft,
            "progress": {"visited": visited, "total": total},
            "states": [
                {"name": s.name, "type": s.type, "question": s.question}
                for s in self.protocol.states.values()
            ],
        }


def build_session_router(engine: SessionEngine):
    """FastAPI router: POST /sessions, GET /sessions/{id}, answer and jump."""
    from fastapi import APIRouter, HTTPException

    router = APIRouter()

    @router.post("/sessions")
    def create_session(body: dict):
        sample_id = body.get("sample_id")
        if not sample_id:
            raise HTTPException(status_code=400, detail="sample_id required")
        session = engine.create_session(sample_id, body.get("annotator_id", "ui"))
        return engine.describe(session)

    @router.get("/sessions/{session_id}")
    def get_session(session_id: str):
        try:
            return engine.describe(engine.get(session_id))
        except UsageError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from None

    @router.post("/sessions/{session_id}/answer")
    def post_answer(session_id: str, body: dict):
        try:
            session, status = engine.advance(session_id, body.get("answer"))
        except AnswerRejected as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        except UsageError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from None
        view = engine.describe(session)
        if status is not None:
            view["record_status"] = {"accepted": status["accepted"], "reason": status["reason"]}
        return view

    @router.post("/sessions/{session_id}/jump")
    def post_jump(session_id: str, body: dict):
        try:
            session = engine.jump(session_id, body.get("state", ""))
        except UsageError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from None
        return engine.describe(session)

    return router
