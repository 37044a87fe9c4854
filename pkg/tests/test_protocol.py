"""Protocol state machine: parsing, walks, jumps, mutations, and the session
engine with its REST surface."""

import pytest
from fastapi.testclient import TestClient

from aloop.datamgr import UsageError
from aloop.protocol import (
    AnswerRejected,
    ProtocolError,
    SessionEngine,
    advance,
    build_session_router,
    jump_to_state,
    parse_protocol,
    progress,
    session_record,
)

RETINA_PROTOCOL = """
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
              target: macular_foramen
macular_foramen:
    type: select
    question: Macular Foramen
    options: ['-', pseudo, lamellar, full-thickness]
    transitions:
        - '*':
              target: summary
summary:
    type: summary_oct
    question: Summary
    transitions:
        - '*':
              target: end
"""

LINE_ANSWER = {"points": [[0, 10], [63, 12]], "uncertain": False}


@pytest.fixture
def protocol():
    return parse_protocol(RETINA_PROTOCOL)


@pytest.fixture
def engine(protocol):
    return SessionEngine(protocol)


def _walk(engine, option, sample_id="v_000"):
    session = engine.create_session(sample_id)
    engine.advance(session.session_id, "next")
    engine.advance(session.session_id, LINE_ANSWER)
    engine.advance(session.session_id, option)
    return engine.advance(session.session_id, "done")


# --- parsing -------------------------------------------------------------------


def test_parse_retina_protocol(protocol):
    assert len(protocol.states) == 5  # four written states plus the implicit end
    assert set(protocol.states) == {"start", "seg_ilm", "macular_foramen", "summary", "end"}
    assert protocol.user_states() == ["seg_ilm", "macular_foramen", "summary"]
    assert protocol.states["seg_ilm"].annotation_type == "line"
    assert protocol.states["macular_foramen"].options == [
        "-", "pseudo", "lamellar", "full-thickness"]
    assert protocol.states["start"].dataloader == "OCTLoader"
    assert protocol.warnings == []


def test_parse_warns_on_unknown_keys():
    proto = parse_protocol(RETINA_PROTOCOL.replace(
        "dataloader: OCTLoader", "dataloader: OCTLoader\n    color: teal"))
    assert any("color" in w for w in proto.warnings)
    assert proto.states["start"].extras == {"color": "teal"}


def test_parse_bool_patterns_become_strings():
    text = """
start:
    type: select
    question: proceed?
    options: [yes, no]
    transitions:
        - yes:
              target: end
        - no:
              target: end
"""
    proto = parse_protocol(text)
    assert [p for p, _ in proto.states["start"].transitions] == ["yes", "no"]
    assert proto.states["start"].options == ["yes", "no"]
    eng = SessionEngine(proto)
    session = eng.create_session("v")
    eng.advance(session.session_id, "yes")
    assert session.completed


# --- walks ----------------------------------------------------------------------


@pytest.mark.parametrize("option", ["-", "pseudo", "lamellar", "full-thickness"])
def test_full_walk_every_option(engine, option):
    session, status = _walk(engine, option)
    assert session.completed
    assert session.visited == ["start", "seg_ilm", "macular_foramen", "summary", "end"]
    record = status["record"]
    assert status["accepted"] is True
    assert [l.class_name for l in record.lines] == ["Inner Limiting Membrane"]
    assert record.lines[0].points == [(0.0, 10.0), (63.0, 12.0)]
    assert [a.answer for a in record.answers] == [option]
    assert record.answers[0].question == "Macular Foramen"


def test_line_answer_validation(engine):
    session = engine.create_session("v_000")
    engine.advance(session.session_id, "next")
    for bad in ("a string", {"points": []}, {"points": [[1, 2]]},
                {"points": [[1, 2], [3]]}, {}):
        with pytest.raises(AnswerRejected):
            engine.advance(session.session_id, bad)
    assert session.current_state == "seg_ilm"  # rejection leaves the session put
    assert "seg_ilm" not in session.answers


def test_uncertain_flag_travels(engine):
    session = engine.create_session("v_000")
    engine.advance(session.session_id, "next")
    engine.advance(session.session_id, {"points": [[0, 1], [5, 1]], "uncertain": True})
    engine.advance(session.session_id, "pseudo")
    _, status = engine.advance(session.session_id, "ok")
    assert status["record"].lines[0].uncertain is True


def test_select_rejects_foreign_option(engine):
    session = engine.create_session("v_000")
    engine.advance(session.session_id, "next")
    engine.advance(session.session_id, LINE_ANSWER)
    with pytest.raises(AnswerRejected, match="not one of"):
        engine.advance(session.session_id, "severe")


def test_literal_transitions_beat_wildcard():
    text = """
start:
    type: select
    question: route
    options: [left, right]
    transitions:
        - "*":
              target: fallback
        - left:
              target: end
fallback:
    type: summary_oct
    transitions:
        - "*":
              target: end
"""
    proto = parse_protocol(text)
    eng = SessionEngine(proto)
    s1 = eng.create_session("a")
    eng.advance(s1.session_id, "left")
    assert eng.get(s1.session_id).completed  # literal match goes straight to end
    s2 = eng.create_session("b")
    eng.advance(s2.session_id, "right")
    assert eng.get(s2.session_id).current_state == "fallback"


def test_no_matching_transition_rejected():
    text = """
start:
    type: select
    question: q
    options: [a, b]
    transitions:
        - a:
              target: end
"""
    proto = parse_protocol(text)
    session = SessionEngine(proto).create_session("x")
    with pytest.raises(AnswerRejected, match="no transition"):
        advance(proto, session, "b")


def test_advance_after_completion_errors(engine):
    session, _ = _walk(engine, "-")
    with pytest.raises(UsageError, match="completed"):
        engine.advance(session.session_id, "again")


# --- jumps --------------------------------------------------------------------------


def test_jump_preserves_answers_and_drafts(protocol, engine):
    session, _ = _walk(engine, "lamellar")
    answers_before = dict(session.answers)
    engine.jump(session.session_id, "macular_foramen")
    assert session.completed is False
    assert session.answers == answers_before  # the log survives the jump
    assert session.draft == "lamellar"
    assert session.visited[-1] == "end"  # visited keeps history too
    # amending re-routes through the tail of the machine
    engine.advance(session.session_id, "pseudo")
    _, status = engine.advance(session.session_id, "done")
    assert session.completed
    assert [a.answer for a in status["record"].answers] == ["pseudo"]


def test_jump_limits(protocol, engine):
    session = engine.create_session("v_000")
    with pytest.raises(UsageError):
        jump_to_state(protocol, session, "end")
    with pytest.raises(UsageError):
        jump_to_state(protocol, session, "nowhere")


def test_progress_counts_user_states(protocol, engine):
    session = engine.create_session("v_000")
    assert progress(protocol, session) == (0, 3)
    engine.advance(session.session_id, "next")
    assert progress(protocol, session) == (1, 3)
    engine.advance(session.session_id, LINE_ANSWER)
    engine.advance(session.session_id, "-")
    engine.advance(session.session_id, "done")
    assert progress(protocol, session) == (3, 3)


def test_record_class_resolution():
    # explicit class overrides; state class beats question; question beats name
    text = """
start:
    type: octSegmentation
    question: Q
    class: ILM
    transitions:
        - "*":
              target: anon
anon:
    type: octSegmentation
    transitions:
        - "*":
              target: end
"""
    proto = parse_protocol(text)
    eng = SessionEngine(proto)
    session = eng.create_session("v")
    eng.advance(session.session_id, LINE_ANSWER)
    _, status = eng.advance(session.session_id, dict(LINE_ANSWER, **{"class": "override"}))
    names = [l.class_name for l in status["record"].lines]
    assert names == ["ILM", "override"]


# --- mutations: every broken protocol fails loudly, never crashes ---------------------


def _mutations():
    base = RETINA_PROTOCOL
    yield "unknown state type", base.replace("type: load", "type: teleport")
    yield "missing start state", base.replace("start:", "boot:")
    yield "dangling transition target", base.replace("target: summary", "target: nowhere")
    yield "transitions not a list", base.replace(
        "    transitions:\n        - next:\n              target: seg_ilm",
        "    transitions: {next: seg_ilm}")
    yield "transition with two patterns", base.replace(
        "        - next:\n              target: seg_ilm",
        "        - next:\n              target: seg_ilm\n          also:\n              target: seg_ilm")
    yield "transition without target", base.replace(
        "        - next:\n              target: seg_ilm",
        "        - next: {label: onwards}")
    yield "transition body is a scalar", base.replace(
        "        - next:\n              target: seg_ilm", "        - next: seg_ilm")
    yield "transition entry is a scalar", base.replace(
        "        - next:\n              target: seg_ilm", "        - seg_ilm")
    yield "select without options", base.replace(
        "    options: ['-', pseudo, lamellar, full-thickness]\n", "")
    yield "select with empty options", base.replace(
        "options: ['-', pseudo, lamellar, full-thickness]", "options: []")
    yield "options not a list", base.replace(
        "options: ['-', pseudo, lamellar, full-thickness]", "options: 5")
    yield "unsupported annotation type", base.replace(
        "annotation_type: line", "annotation_type: polygon")
    yield "explicit end with wrong type", base + "\nend:\n    type: select\n    options: [x]\n"
    yield "empty document", ""
    yield "top-level list", "- start\n- end\n"
    yield "state body is a scalar", base.replace(
        "summary:\n    type: summary_oct\n    question: Summary\n    transitions:\n        - '*':\n              target: end",
        "summary: 3")
    yield "missing type", base.replace("    type: summary_oct\n", "")
    yield "invalid yaml", "start: {type: load\n"
    yield "end unreachable from start", base.replace(
        "        - '*':\n              target: end",
        "        - '*':\n              target: seg_ilm")
    # the trap must be reachable for the check to bite, so reroute into it
    yield "trap state cannot reach end", base.replace(
        "        - '*':\n              target: summary",
        "        - '*':\n              target: trap") + """
trap:
    type: summary_oct
    transitions:
        - "*":
              target: trap
"""


def test_twenty_mutations_raise_named_errors():
    cases = list(_mutations())
    assert len(cases) == 20
    for desc, text in cases:
        with pytest.raises(ProtocolError):
            parse_protocol(text)


def test_mutation_errors_name_the_state():
    err = None
    try:
        parse_protocol(RETINA_PROTOCOL.replace("type: select", "type: dropdown"))
    except ProtocolError as exc:
        err = exc
    assert err is not None and err.state == "macular_foramen"
    assert "macular_foramen" in str(err)


# --- engine + store + REST -------------------------------------------------------


class _Store:
    def __init__(self, reject_with=None):
        self.received = []
        self.reject_with = reject_with

    def update_annotations(self, records):
        self.received.extend(records)
        if self.reject_with:
            return [], [(r.sample_id, self.reject_with) for r in records]
        return [(r.sample_id, f"masks/{r.sample_id}.png") for r in records], []


def test_engine_pushes_to_store(protocol):
    store = _Store()
    engine = SessionEngine(protocol, store)
    session, status = _walk(engine, "pseudo")
    assert status["accepted"] is True and status["reason"] is None
    assert [r.sample_id for r in store.received] == ["v_000"]


def test_engine_reports_store_rejection(protocol):
    engine = SessionEngine(protocol, _Store(reject_with="no layers"))
    _, status = _walk(engine, "pseudo")
    assert status["accepted"] is False
    assert status["reason"] == "no layers"


def test_engine_unknown_session(engine):
    with pytest.raises(UsageError):
        engine.get("s9999-deadbeef")


def test_session_rest_surface(protocol):
    from fastapi import FastAPI

    app = FastAPI()
    app.include_router(build_session_router(SessionEngine(protocol, _Store())))
    client = TestClient(app)

    assert client.post("/sessions", json={}).status_code == 400
    view = client.post("/sessions", json={"sample_id": "v_007"}).json()
    sid = view["session_id"]
    assert view["current_state"] == "start"
    assert view["progress"] == {"visited": 0, "total": 3}
    assert [s["name"] for s in view["states"]] == [
        "start", "seg_ilm", "macular_foramen", "summary", "end"]

    assert client.get("/sessions/does-not-exist").status_code == 404
    assert client.get(f"/sessions/{sid}").json()["sample_id"] == "v_007"

    view = client.post(f"/sessions/{sid}/answer", json={"answer": "next"}).json()
    assert view["current_state"] == "seg_ilm"
    assert view["state"]["annotation_type"] == "line"

    bad = client.post(f"/sessions/{sid}/answer", json={"answer": {"points": []}})
    assert bad.status_code == 422

    client.post(f"/sessions/{sid}/answer", json={"answer": LINE_ANSWER})
    client.post(f"/sessions/{sid}/answer", json={"answer": "lamellar"})
    view = client.post(f"/sessions/{sid}/answer", json={"answer": "done"}).json()
    assert view["completed"] is True
    assert view["record_status"] == {"accepted": True, "reason": None}

    # answering a finished session conflicts; jumping revives it
    assert client.post(f"/sessions/{sid}/answer", json={"answer": "x"}).status_code == 409
    assert client.post(f"/sessions/{sid}/jump", json={"state": "ghost"}).status_code == 409
    view = client.post(f"/sessions/{sid}/jump", json={"state": "macular_foramen"}).json()
    assert view["completed"] is False and view["draft"] == "lamellar"
