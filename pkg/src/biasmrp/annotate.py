"""
LLM annotation of social-media users into survey-like rows.

Two prompts per user: one resolving the free-text location to a US state,
one classifying the user into the survey categories from their bio and
recent posts. Category blocks are shown in a random order drawn from a
stream derived from ``(seed, user id)``, so a prompt depends only on the
user and the seed, never on request scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataValidationError
from .frame import US_STATES, Schema, SurveyDataset

log = logging.getLogger(__name__)


# -- category blocks -----------------------------------------------------------

@dataclass(frozen=True)
class CategoryBlock:
    key: str
    header: str
    options: tuple[tuple[str, str], ...]

    @property
    def identifiers(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self.options)

    def render(self) -> str:
        return f"{self.header}:\n" + "".join(f"{i}) {text}\n" for i, text in self.options)


# Option texts are kept verbatim, including the trailing space after "White".
BLOCKS = (
    CategoryBlock("ethnicity", "ETHNICITY", (
        ("E1", "White "), ("E2", "Black"), ("E3", "Hispanic"), ("E4", "Asian"), ("E5", "Other"))),
    CategoryBlock("age", "AGE", (
        ("A1", "between 0 and 17 year old"), ("A2", "18 to 24 years old"),
        ("A3", "25 to 34 years old"), ("A4", "35 to 44 years old"), ("A5", "45 to 54 years old"),
        ("A6", "55 to 64 years old"), ("A7", "65 or older"))),
    CategoryBlock("sex", "SEX", (("S1", "Male"), ("S2", "Female"))),
    CategoryBlock("marital", "MARITAL STATUS", (("M1", "Married"), ("M2", "Not married"))),
    CategoryBlock("education", "HIGHEST EDUCATIONAL QUALIFICATION", (
        ("Q1", "no formal education"), ("Q2", "completed high-school but did not go to college"),
        ("Q3", "obtained a Bachelor degree or higher"))),
    CategoryBlock("income", "HOUSEHOLD INCOME BRACKET", (
        ("H1", "up to 25000 USD per year"), ("H2", "between 25000 and 50000 USD per year"),
        ("H3", "between 50000 and 75000 USD per year"),
        ("H4", "between 75000 and 100000 USD per year"), ("H5", "more than 100000 USD per year"))),
    # identifiers start at R2; kept as published
    CategoryBlock("registration", "THIS INDIVIDUAL IS REGISTERED AS", (
        ("R2", "a Democrat"), ("R3", "a Republican"), ("R4", "an Independent"))),
    CategoryBlock("vote2016", "2016 US PRESIDENTIAL ELECTION VOTE", (
        ("L1", "did not vote"), ("L2", "voted for Donald Trump, the Republican candidate"),
        ("L3", "voted for Hillary Clinton, the Democrat candidate"),
        ("L4", "voted for Gary Johnson, the Libertarian candidate"),
        ("L5", "voted for Jill Stein, the Green Party candidate"))),
    CategoryBlock("vote2018", "2018 MIDTERM ELECTION VOTE", (
        ("T1", "did not vote"), ("T2", "voted for the Republican Party"),
        ("T3", "voted for the Democratic Party"), ("T4", "voted for a third party"))),
    CategoryBlock("vote2020", "2020 US PRESIDENTIAL ELECTION VOTE", (
        ("V1", "did not vote"), ("V2", "voted for Donald Trump, the Republican candidate"),
        ("V3", "voted for Joe Biden, the Democrat candidate"),
        ("V4", "voted for Jo Jorgensen, the Libertarian candidate"),
        ("V5", "voted for Howie Hawkins, the Green Party candidate"))),
)
BLOCK_KEYS = tuple(b.key for b in BLOCKS)
_BLOCK_OF = {i: b.key for b in BLOCKS for i in b.identifiers}

LOCATION_TEMPLATE = (
    "A person writes their location in their bio as follows:≪{location}≫.\n"
    "Which state in the US do they live in ?\n"
    "For this answer consider Washington DC and other Territories of the US as states.\n"
    'Write out just the full name of the state, and if not from US, write "Not from US"'
)

DEMO_TEMPLATE = (
    "A person has in their Twitter bio the following information:\n"
    "≪{bio}≫ ;\n"
    "Further, they have written the following tweets:\n"
    "≪{tweets}≫.\n"
    "I will now show you a number of categories to which this user may belong.\n"
    'The categories are preceded by a header (e.g. "AGE:" or "SEX:" etc.) and an identifier '
    '(e.g. "A1", "A2" or "E2" etc.). '
    "Please select, for each header, the most likely category to which this user belongs to.\n"
    "In your answer present, for each header, the selected identifier.\n"
    "{blocks}"
)


# -- users and prompts ---------------------------------------------------------

@dataclass(frozen=True)
class UserRecord:
    id: str
    location: str
    bio: str
    tweets: tuple[str, ...]
    post_count: int | None = None
    day: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "tweets", tuple("" if t is None else str(t) for t in self.tweets))
        if self.post_count is None:
            object.__setattr__(self, "post_count", len(self.tweets))


def user_stream(user_id: str, seed: int) -> np.random.Generator:
    """RNG for one user's prompt, stable across processes and platforms."""
    key = int.from_bytes(hashlib.sha256(str(user_id).encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def build_location_prompt(user) -> str:
    location = user.location if isinstance(user, UserRecord) else str(user)
    return LOCATION_TEMPLATE.format(location=location or "")


def block_order(rng) -> list[CategoryBlock]:
    return [BLOCKS[k] for k in np.random.default_rng(rng).permutation(len(BLOCKS))]


def build_demo_prompt(user: UserRecord, rng, context: int = 10) -> str:
    """Bio, the first ``context`` posts (one per line) and all category
    blocks in random order."""
    if context < 1:
        raise DataValidationError("context size must be >= 1")
    if user.post_count < context or len(user.tweets) < context:
        raise DataValidationError(f"user {user.id}: {len(user.tweets)} posts, context needs {context}")
    blocks = "\n".join(b.render() for b in block_order(rng))
    return DEMO_TEMPLATE.format(bio=user.bio or "", tweets="\n".join(user.tweets[:context]), blocks=blocks)


# -- parsing -------------------------------------------------------------------

STATE = "state"
NOT_US = "not-from-US"
UNRESOLVED = "unresolved"

_STATE_ALIASES = {s.lower(): s for s in US_STATES}
_STATE_ALIASES.update({"washington dc": "District of Columbia", "washington d.c.": "District of Columbia",
                       "washington, dc": "District of Columbia",
                       "washington, d.c.": "District of Columbia"})
_STATE_RE = re.compile(r"(?<![a-z])(" + "|".join(
    re.escape(k) for k in sorted(_STATE_ALIASES, key=len, reverse=True)) + r")(?![a-z])")


@dataclass(frozen=True)
class LocationResult:
    status: str
    state: str | None = None


def parse_location_answer(text: str) -> LocationResult:
    """Any state name in the reply (longest match wins, so "West Virginia"
    is not read as "Virginia"); "Not from US" otherwise; else unresolved.
    Replies naming two different states are unresolved."""
    low = (text or "").lower()
    found = {_STATE_ALIASES[m.group(1)] for m in _STATE_RE.finditer(low)}
    if len(found) == 1:
        return LocationResult(STATE, found.pop())
    if not found and "not from us" in low:
        return LocationResult(NOT_US)
    return LocationResult(UNRESOLVED)


_ID_RE = re.compile(r"(?<![A-Za-z0-9])([A-Z][0-9]+)(?![0-9])")

AGE_LABELS = ("18-24", "25-34", "35-44", "45-54", "55-64", "65+")
ETHNICITY_LABELS = ("White", "Black", "Hispanic", "Asian", "Other")
INCOME_LABELS = ("0-25k", "25-50k", "50-75k", "75-100k", "100k+")
GENDER = {"S1": "M", "S2": "F"}
VOTE2016 = {"L1": "stay home", "L2": "R", "L3": "D", "L4": "other", "L5": "other"}
VOTE2020 = {"V1": "stay home", "V2": "R", "V3": "D", "V4": "L", "V5": "G"}
MODELED = ("choice", "gender", "ethnicity", "age", "college_degree", "income", "vote2016")


@dataclass(frozen=True)
class Annotation:
    """Chosen identifier per block (``None`` when missing or ambiguous) and
    the fields mapped onto the model schema."""

    identifiers: dict
    mapped: dict
    excluded: str | None = None
    raw: str = ""

    @property
    def n_parsed(self) -> int:
        return sum(v is not None for v in self.identifiers.values())

    @property
    def identifier_set(self) -> set[str]:
        return {v for v in self.identifiers.values() if v is not None}


def parse_demo_answer(text: str) -> Annotation:
    """Scan for schema identifiers; a block with more than one distinct
    identifier is missing. Raises :class:`DataValidationError` when nothing
    parses."""
    seen = {k: set() for k in BLOCK_KEYS}
    for m in _ID_RE.finditer(text or ""):
        ident = m.group(1)
        if ident in _BLOCK_OF:
            seen[_BLOCK_OF[ident]].add(ident)
    ids = {k: (next(iter(v)) if len(v) == 1 else None) for k, v in seen.items()}
    if not any(ids.values()):
        raise DataValidationError("no category identifiers found in the answer")
    mapped = dict.fromkeys(MODELED)
    excluded = None
    if ids["age"] == "A1":
        excluded = "under-18"
    elif ids["age"]:
        mapped["age"] = AGE_LABELS[int(ids["age"][1:]) - 2]
    if ids["sex"]:
        mapped["gender"] = GENDER[ids["sex"]]
    if ids["ethnicity"]:
        mapped["ethnicity"] = ETHNICITY_LABELS[int(ids["ethnicity"][1:]) - 1]
    if ids["education"]:
        mapped["college_degree"] = "1" if ids["education"] == "Q3" else "0"
    if ids["income"]:
        mapped["income"] = INCOME_LABELS[int(ids["income"][1:]) - 1]
    if ids["vote2016"]:
        mapped["vote2016"] = VOTE2016[ids["vote2016"]]
    if ids["vote2020"]:
        mapped["choice"] = VOTE2020[ids["vote2020"]]
    return Annotation(ids, mapped, excluded, text or "")


# -- transports ----------------------------------------------------------------

class TransportError(RuntimeError):
    """A request failed. ``transient`` failures are retried."""

    def __init__(self, message, transient: bool = True):
        super().__init__(message)
        self.transient = transient


class Transport:
    """Chat-completion client: one user message in, reply text out."""

    def complete(self, prompt: str, temperature: float = 0.0) -> str:  # pragma: no cover
        raise NotImplementedError


class MockTransport(Transport):
    """Replies from a callable ``reply(prompt) -> str`` and records every
    prompt it sees."""

    def __init__(self, reply):
        self.reply = reply
        self.prompts: list[str] = []

    def complete(self, prompt, temperature=0.0):
        self.prompts.append(prompt)
        return self.reply(prompt)


class RecordedTransport(Transport):
    """Replies looked up by the SHA-256 of the prompt; unknown prompts are
    a permanent failure."""

    def __init__(self, fixtures: dict[str, str]):
        self.fixtures = dict(fixtures)

    @staticmethod
    def key(prompt: str) -> str:
        return hashlib.sha256(prompt.encode("utf-8")).hexdigest()

    @classmethod
    def load(cls, path) -> "RecordedTransport":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def complete(self, prompt, temperature=0.0):
        try:
            return self.fixtures[self.key(prompt)]
        except KeyError:
            raise TransportError("no recorded reply for this prompt", transient=False) from None


class OpenAITransport(Transport):
    """OpenAI-compatible ``/chat/completions`` endpoint over httpx. The key is
    read from ``api_key_env`` at construction."""

    def __init__(self, model: str = "gpt-3.5-turbo", base_url: str = "https://api.openai.com/v1",
                 api_key_env: str = "OPENAI_API_KEY", timeout: float = 60.0):
        import httpx

        key = os.environ.get(api_key_env)
        if not key:
            raise DataValidationError(f"environment variable {api_key_env} is not set")
        self.model = model
        self._client = httpx.Client(base_url=base_url, timeout=timeout,
                                    headers={"Authorization": f"Bearer {key}"})
        self._httpx = httpx

    def complete(self, prompt, temperature=0.0):
        body = {"model": self.model, "temperature": temperature,
                "messages": [{"role": "user", "content": prompt}]}
        try:
            resp = self._client.post("/chat/completions", json=body)
        except self._httpx.TransportError as e:
            raise TransportError(str(e)) from e
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", transient=False)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as e:
            raise TransportError(f"malformed response: {e}", transient=False) from e


# -- batch ---------------------------------------------------------------------

SUCCESS = "success"
PARSE_FAILURE = "parse-failure"
TRANSPORT_FAILURE = "transport-failure"


@dataclass(frozen=True)
class AnnotateConfig:
    context: int = 10
    seed: int = 0
    temperature: float = 0.0
    max_retries: int = 3
    backoff: float = 1.0
    concurrency: int = 1

    def __post_init__(self):
        if self.context < 1 or self.max_retries < 0 or self.concurrency < 1 or self.backoff < 0:
            raise DataValidationError("invalid annotation config")


@dataclass
class UserOutcome:
    user_id: str
    outcome: str
    location: LocationResult | None = None
    annotation: Annotation | None = None
    reason: str = ""
    day: str | None = None
    responses: list = field(default_factory=list)


def _request(transport, prompt, cfg: AnnotateConfig, sleep):
    for attempt in range(cfg.max_retries + 1):
        try:
            return transport.complete(prompt, cfg.temperature)
        except TransportError as e:
            if not e.transient or attempt == cfg.max_retries:
                raise
            sleep(cfg.backoff * 2 ** attempt)


def annotate_user(user: UserRecord, transport: Transport, cfg: AnnotateConfig,
                  sleep=time.sleep) -> UserOutcome:
    try:
        loc_reply = _request(transport, build_location_prompt(user), cfg, sleep)
        demo_prompt = build_demo_prompt(user, user_stream(user.id, cfg.seed), cfg.context)
        demo_reply = _request(transport, demo_prompt, cfg, sleep)
    except TransportError as e:
        return UserOutcome(user.id, TRANSPORT_FAILURE, reason=str(e), day=user.day)
    loc = parse_location_answer(loc_reply)
    try:
        ann = parse_demo_answer(demo_reply)
    except DataValidationError as e:
        return UserOutcome(user.id, PARSE_FAILURE, loc, reason=str(e), day=user.day,
                           responses=[loc_reply, demo_reply])
    return UserOutcome(user.id, SUCCESS, loc, ann, ann.excluded or "", user.day, [loc_reply, demo_reply])


def annotate_batch(users, transport: Transport, cfg: AnnotateConfig | None = None,
                   sleep=time.sleep) -> list[UserOutcome]:
    """Annotate every user; failures are recorded per user and the batch
    continues. Results follow the input order whatever the concurrency."""
    cfg = cfg or AnnotateConfig()
    users = list(users)
    if cfg.concurrency == 1:
        return [annotate_user(u, transport, cfg, sleep) for u in users]
    with ThreadPoolExecutor(max_workers=cfg.concurrency) as ex:
        return list(ex.map(lambda u: annotate_user(u, transport, cfg, sleep), users))


# -- files ---------------------------------------------------------------------

def load_users(path) -> list[UserRecord]:
    """``users.csv``: id, location, bio, tweets (JSON array); optional
    post_count and day columns."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "location", "bio", "tweets"} - set(reader.fieldnames or ())
        if missing:
            raise DataValidationError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                tweets = json.loads(row["tweets"] or "[]")
            except json.JSONDecodeError as e:
                raise DataValidationError(f"{path}:{line}: tweets is not a JSON array ({e})") from None
            if not isinstance(tweets, list):
                raise DataValidationError(f"{path}:{line}: tweets is not a JSON array")
            pc = row.get("post_count")
            out.append(UserRecord(row["id"], row["location"] or "", row["bio"] or "", tuple(tweets),
                                  int(pc) if pc else None, row.get("day") or None))
    ids = [u.id for u in out]
    if len(set(ids)) != len(ids):
        raise DataValidationError(f"{path}: duplicate user ids")
    return out


ANNOTATION_COLUMNS = ("id", "outcome", "reason", "location_status", "state", "day") + MODELED + BLOCK_KEYS


def write_annotations(outcomes, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ANNOTATION_COLUMNS)
        for o in outcomes:
            loc = o.location or LocationResult(UNRESOLVED)
            mapped = o.annotation.mapped if o.annotation else {}
            ids = o.annotation.identifiers if o.annotation else {}
            w.writerow([o.user_id, o.outcome, o.reason, loc.status, loc.state or "", o.day or ""]
                       + [mapped.get(k) or "" for k in MODELED] + [ids.get(k) or "" for k in BLOCK_KEYS])


def read_annotations(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def annotations_to_survey(rows, schema: Schema) -> SurveyDataset:
    """Successful, resolved, non-excluded rows with every modeled field as a
    :class:`SurveyDataset`; every other row is listed in ``dropped`` with
    its reason."""
    if rows and isinstance(rows[0], UserOutcome):
        rows = [_outcome_row(o) for o in rows]
    choice, levels, dropped = [], [], []
    for k, r in enumerate(rows):
        reason = None
        if r["outcome"] != SUCCESS:
            reason = r["outcome"]
        elif r["reason"]:
            reason = r["reason"]
        elif r["location_status"] != STATE:
            reason = f"location {r['location_status']}"
        else:
            values = {"state": r["state"], "day": r.get("day", ""), **{c: r[c] for c in MODELED}}
            try:
                j = schema.choice_index(values["choice"] or "")
                lv = [a.parse(values.get(a.name) or "") for a in schema.attributes]
            except DataValidationError as e:
                reason = str(e)
        if reason:
            dropped.append((k, f"{r['id']}: {reason}"))
        else:
            choice.append(j)
            levels.append(lv)
    if not choice:
        raise DataValidationError("no annotation rows usable for modeling")
    return SurveyDataset(schema, np.array(choice), np.array(levels), None, tuple(dropped))


def _outcome_row(o: UserOutcome) -> dict:
    loc = o.location or LocationResult(UNRESOLVED)
    mapped = o.annotation.mapped if o.annotation else {}
    row = {"id": o.user_id, "outcome": o.outcome, "reason": o.reason, "location_status": loc.status,
           "state": loc.state or "", "day": o.day or ""}
    row.update({k: mapped.get(k) or "" for k in MODELED})
    return row
