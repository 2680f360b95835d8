import json
import threading
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from biasmrp.annotate import (AGE_LABELS, BLOCK_KEYS, BLOCKS, NOT_US, PARSE_FAILURE, STATE, SUCCESS,
                              TRANSPORT_FAILURE, UNRESOLVED, AnnotateConfig, MockTransport,
                              RecordedTransport, TransportError, UserRecord, annotate_batch,
                              annotations_to_survey, block_order, build_demo_prompt,
                              build_location_prompt, load_users, parse_demo_answer,
                              parse_location_answer, read_annotations, user_stream,
                              write_annotations)
from biasmrp.errors import DataValidationError
from biasmrp.frame import US_STATES, Attribute, Schema

PROMPTS = Path(__file__).parent / "fixtures" / "prompts"

SAMPLE_ANSWER = """HIGHEST EDUCATIONAL QUALIFICATION: Q2) completed high-school but did not go to college
THIS INDIVIDUAL IS REGISTERED AS: R2) a Democrat
ETHNICITY: E1) White
2016 US PRESIDENTIAL ELECTION VOTE: L3) voted for Hillary Clinton, the Democrat candidate
SEX: S1) Male
AGE: A5) 45 to 54 years old
MARITAL STATUS: M1) Married
2020 US PRESIDENTIAL ELECTION VOTE: V3) voted for Joe Biden, the Democrat candidate
2018 MIDTERM ELECTION VOTE: T3) voted for the Democratic Party
HOUSEHOLD INCOME BRACKET: H5) more than 100000 USD per year"""


def make_user(uid="u1", n=10, location="Philly, PA", day=None):
    return UserRecord(uid, location, f"bio of {uid}", tuple(f"post {k} by {uid}" for k in range(n)),
                      day=day)


def golden_user():
    d = json.loads((PROMPTS / "demo_user.json").read_text())
    return UserRecord(d["id"], d["location"], d["bio"], tuple(d["tweets"]))


def test_location_prompt_matches_golden_bytes():
    got = build_location_prompt(make_user()).encode("utf-8")
    assert got == (PROMPTS / "location_philly.txt").read_bytes()


def test_location_prompt_with_empty_location():
    p = build_location_prompt(make_user(location=""))
    assert "follows:≪≫." in p


def test_demo_prompt_matches_golden_bytes():
    u = golden_user()
    got = build_demo_prompt(u, user_stream(u.id, 2020), 10).encode("utf-8")
    assert got == (PROMPTS / "demo_seed2020.txt").read_bytes()


def test_first_block_is_uniform_over_seeds():
    first = Counter(block_order(np.random.default_rng(s))[0].key for s in range(10_000))
    assert set(first) == set(BLOCK_KEYS)
    for key in BLOCK_KEYS:
        assert abs(first[key] / 10_000 - 0.1) <= 0.01


@given(st.integers(0, 2**63 - 1))
def test_every_block_appears_once(seed):
    p = build_demo_prompt(make_user(), np.random.default_rng(seed))
    for b in BLOCKS:
        assert p.count(b.header + ":\n") == 1


@given(st.text(max_size=20), st.integers(0, 1000))
def test_prompt_is_pure_in_user_and_seed(uid, seed):
    u = make_user(uid)
    assert build_demo_prompt(u, user_stream(uid, seed)) == build_demo_prompt(u, user_stream(uid, seed))


def test_context_sizes_differ_only_in_post_list():
    u = make_user(n=10)
    p10 = build_demo_prompt(u, user_stream(u.id, 1), 10)
    p5 = build_demo_prompt(u, user_stream(u.id, 1), 5)
    posts10 = "\n".join(u.tweets)
    posts5 = "\n".join(u.tweets[:5])
    assert p10.replace(posts10, "@") == p5.replace(posts5, "@")
    with pytest.raises(DataValidationError):
        build_demo_prompt(make_user(n=4), user_stream("x", 1), 5)


@pytest.mark.parametrize("reply,status,state", [
    ("Pennsylvania", STATE, "Pennsylvania"),
    ("Not enough information is provided to determine which state the person lives in. "
     "They simply stated their location as ``USA''.", UNRESOLVED, None),
    ("I think they live in New York.", STATE, "New York"),
    ("west virginia", STATE, "West Virginia"),
    ("Washington DC", STATE, "District of Columbia"),
    ("Not from US", NOT_US, None),
    ("Texas or Oklahoma", UNRESOLVED, None),
    ("", UNRESOLVED, None),
])
def test_location_answers(reply, status, state):
    r = parse_location_answer(reply)
    assert (r.status, r.state) == (status, state)


def test_sample_answer_parses_to_published_identifiers():
    a = parse_demo_answer(SAMPLE_ANSWER)
    assert a.identifier_set == {"Q2", "R2", "E1", "L3", "S1", "A5", "M1", "V3", "T3", "H5"}
    assert a.mapped == {"choice": "D", "gender": "M", "ethnicity": "White", "age": "45-54",
                        "college_degree": "0", "income": "100k+", "vote2016": "D"}
    assert a.excluded is None


def test_conflicting_identifiers_make_block_missing():
    a = parse_demo_answer("V2 V3 S2")
    assert a.identifiers["vote2020"] is None and a.mapped["choice"] is None
    assert a.mapped["gender"] == "F"


def test_under_18_is_excluded():
    assert parse_demo_answer("A1 S1").excluded == "under-18"


def test_nothing_parsed_is_rejected():
    with pytest.raises(DataValidationError):
        parse_demo_answer("I cannot determine this from the information given.")


@given(st.text(alphabet="AEHLMQRSTVX0123456789 )\n", max_size=80))
def test_parser_only_assigns_schema_identifiers(text):
    valid = {i for b in BLOCKS for i in b.identifiers}
    try:
        a = parse_demo_answer(text)
    except DataValidationError:
        return
    assert a.identifier_set <= valid
    for key, ident in a.identifiers.items():
        if ident is not None:
            assert ident in BLOCKS[BLOCK_KEYS.index(key)].identifiers


def echo_reply(prompt):
    if prompt.startswith("A person writes"):
        return "Pennsylvania"
    return SAMPLE_ANSWER


def test_batch_with_mock_succeeds_and_uses_zero_temperature():
    seen = []

    class Recording(MockTransport):
        def complete(self, prompt, temperature=0.0):
            seen.append(temperature)
            return super().complete(prompt, temperature)

    t = Recording(echo_reply)
    out = annotate_batch([make_user(f"u{k}") for k in range(3)], t)
    assert [o.outcome for o in out] == [SUCCESS] * 3
    assert len(t.prompts) == 6 and set(seen) == {0.0}
    assert t.prompts[0].startswith("A person writes")


def test_garbage_replies_are_isolated():
    out = annotate_batch([make_user("a"), make_user("b")], MockTransport(lambda p: "no idea"))
    assert [o.outcome for o in out] == [PARSE_FAILURE] * 2


def test_transient_failures_are_retried_with_backoff():
    calls = {"n": 0}
    sleeps = []

    def flaky(prompt):
        calls["n"] += 1
        if calls["n"] <= 2:
            raise TransportError("503")
        return echo_reply(prompt)

    cfg = AnnotateConfig(max_retries=3, backoff=0.5)
    out = annotate_batch([make_user()], MockTransport(flaky), cfg, sleep=sleeps.append)
    assert out[0].outcome == SUCCESS
    assert sleeps == [0.5, 1.0]


def test_exhausted_retries_record_transport_failure():
    def down(prompt):
        raise TransportError("timeout")

    sleeps = []
    out = annotate_batch([make_user("a"), make_user("b")], MockTransport(down),
                         AnnotateConfig(max_retries=2, backoff=1.0), sleep=sleeps.append)
    assert [o.outcome for o in out] == [TRANSPORT_FAILURE] * 2
    assert sleeps == [1.0, 2.0] * 2


def test_permanent_failure_is_not_retried():
    def bad(prompt):
        raise TransportError("401", transient=False)

    sleeps = []
    out = annotate_batch([make_user()], MockTransport(bad), sleep=sleeps.append)
    assert out[0].outcome == TRANSPORT_FAILURE and sleeps == []


def test_results_do_not_depend_on_concurrency():
    lock = threading.Lock()

    def reply(prompt):
        with lock:
            pass
        if prompt.startswith("A person writes"):
            return "Ohio"
        return "S2 V2 A3" if "u3" in prompt else SAMPLE_ANSWER

    users = [make_user(f"u{k}") for k in range(8)]
    one = annotate_batch(users, MockTransport(reply), AnnotateConfig(concurrency=1))
    many = annotate_batch(users, MockTransport(reply), AnnotateConfig(concurrency=4))
    assert [(o.user_id, o.outcome, o.annotation.identifiers) for o in one] == \
           [(o.user_id, o.outcome, o.annotation.identifiers) for o in many]


def test_recorded_transport_looks_up_by_prompt_hash():
    u = make_user()
    loc = build_location_prompt(u)
    demo = build_demo_prompt(u, user_stream(u.id, 0))
    t = RecordedTransport({RecordedTransport.key(loc): "Ohio", RecordedTransport.key(demo): SAMPLE_ANSWER})
    out = annotate_batch([u], t)
    assert out[0].location.state == "Ohio" and out[0].outcome == SUCCESS
    assert annotate_batch([make_user("other")], t)[0].outcome == TRANSPORT_FAILURE


def test_users_file_and_annotation_roundtrip(tmp_path):
    f = tmp_path / "users.csv"
    f.write_text('id,location,bio,tweets,day\n'
                 'a,"Austin, TX",hi,"[""x"", ""y""]",1\n'
                 'b,,,"[]",2\n', encoding="utf-8")
    users = load_users(f)
    assert users[0].tweets == ("x", "y") and users[0].day == "1" and users[1].location == ""
    bad = tmp_path / "bad.csv"
    bad.write_text('id,location,bio,tweets\na,x,y,not json\n')
    with pytest.raises(DataValidationError, match="bad.csv:2"):
        load_users(bad)

    out = annotate_batch([make_user("a", day="1"), make_user("b", day="2")],
                         MockTransport(lambda p: "Ohio" if p.startswith("A person writes") else
                                       ("A1 S1" if "bio of b" in p else SAMPLE_ANSWER)))
    write_annotations(out, tmp_path / "ann.csv")
    rows = read_annotations(tmp_path / "ann.csv")
    assert rows[0]["state"] == "Ohio" and rows[0]["vote2020"] == "V3" and rows[0]["choice"] == "D"
    assert rows[1]["reason"] == "under-18"


def test_annotations_to_survey_drops_unusable_rows():
    schema = Schema((Attribute("state", 51, labels=US_STATES),
                     Attribute("gender", 2, labels=("M", "F")),
                     Attribute("age", 6, ordinal=True, labels=AGE_LABELS)),
                    ("D", "R", "L", "G", "stay home"), area="state", time=None)
    reply = {"u0": SAMPLE_ANSWER, "u1": "A1 S1 V3", "u2": SAMPLE_ANSWER, "u3": "S1 V3"}

    def answer(p):
        if p.startswith("A person writes"):
            return "Atlantis" if "≪Nowhere≫" in p else "Ohio"
        return next(v for k, v in reply.items() if f"bio of {k}" in p)

    users = [make_user("u0"), make_user("u1"), make_user("u2", location="Nowhere"), make_user("u3")]
    survey = annotations_to_survey(annotate_batch(users, MockTransport(answer)), schema)
    assert survey.choice.tolist() == [0]
    reasons = dict(survey.dropped)
    assert "under-18" in reasons[1] and "unresolved" in reasons[2] and 3 in reasons
