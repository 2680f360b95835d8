"""Write a synthetic social-media corpus for exercising annotate -> fit -> poststratify.

Usage: python scripts/make_synthetic_corpus.py OUT_DIR [--users N] [--seed S]

OUT_DIR receives:
  users.csv       id, location, bio, tweets (JSON array), day
  replies.json    recorded model replies keyed by prompt SHA-256
  schema.json     state x gender x age cells, 3 days, choices R / D / stay home
  frame.csv       population cell weights
  adjacency.csv   state graph (Alaska and Hawaii isolated)
  prevalence.csv  population share of each choice
  truth.json      true population shares

The replies are generated from a known individual-level truth, with a small
share of refusals, multi-answers, foreign users and minors mixed in so every
parser branch is hit. Replies are recorded for the demographic prompt built
with ``--prompt-seed`` and ``--context``; annotate with the same values.
"""

import argparse
import csv
import json
from pathlib import Path

import numpy as np
from scipy.special import expit

from biasmrp.annotate import (BLOCKS, LOCATION_TEMPLATE, RecordedTransport, UserRecord,
                              build_demo_prompt, user_stream)
from biasmrp.frame import US_STATES, Attribute, Schema, write_adjacency
from biasmrp.simstudy import planar_graph

AGES = ("18-24", "25-34", "35-44", "45-54", "55-64", "65+")
CHOICES = ("R", "D", "stay home")
VOTE_ID = {"R": "V2", "D": "V3", "stay home": "V1"}
N_DAYS = 3


def corpus_schema() -> Schema:
    return Schema((Attribute("state", 51, labels=US_STATES),
                   Attribute("gender", 2, labels=("M", "F")),
                   Attribute("age", 6, ordinal=True, labels=AGES),
                   Attribute("day", N_DAYS, ordinal=True)),
                  CHOICES, area="state", time="day")


def _answer(ids: dict, rng) -> str:
    """Reply in the published answer format, blocks in random order."""
    lines = []
    for k in rng.permutation(len(BLOCKS)):
        b = BLOCKS[k]
        ident = ids.get(b.key) or b.identifiers[rng.integers(len(b.identifiers))]
        text = dict(b.options)[ident].strip()
        lines.append(f"{b.header}: {ident}) {text}")
    return "\n".join(lines)


def build_corpus(out, n_users: int = 400, seed: int = 0, prompt_seed: int = 0,
                 context: int = 10) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    schema = corpus_schema()
    (out / "schema.json").write_text(json.dumps(schema.to_dict(), indent=2))

    graph = planar_graph(51, 2, rng=np.random.default_rng(seed))
    write_adjacency(graph, out / "adjacency.csv")

    # population: state sizes, gender and age shares, vote propensities
    state_w = rng.dirichlet(np.full(51, 3.0)) * 2.0e8
    lean = rng.normal(0.0, 0.6, 51)
    age_shift = np.linspace(-0.4, 0.4, 6)
    turnout = 0.7
    rows, probs = [], []
    for s in range(51):
        for g, gs in enumerate((0.49, 0.51)):
            for a, share in enumerate((0.12, 0.18, 0.17, 0.17, 0.17, 0.19)):
                w = state_w[s] * gs * share
                pr = expit(lean[s] + age_shift[a] + (0.2 if g == 0 else -0.2))
                rows.append((US_STATES[s], "MF"[g], AGES[a], w))
                probs.append((turnout * pr, turnout * (1 - pr), 1 - turnout))
    weights = np.array([r[3] for r in rows])
    probs = np.array(probs)
    with open(out / "frame.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "gender", "age", "weight"])
        for st, g, a, wt in rows:
            w.writerow([st, g, a, repr(float(wt))])
    prevalence = weights @ probs / weights.sum()
    with open(out / "prevalence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["choice", "value"])
        for c, v in zip(CHOICES, prevalence):
            w.writerow([c, repr(float(v))])

    # respondents: over-represent D voters to mimic online selection
    keep = np.array([0.5, 1.0, 0.6])
    replies, users = {}, []
    locations = {}
    while len(users) < n_users:
        m = rng.choice(len(rows), p=weights / weights.sum())
        j = rng.choice(3, p=probs[m])
        if rng.uniform() > keep[j]:
            continue
        st, g, a, _ = rows[m]
        uid = f"user{len(users):04d}"
        kind = rng.choice(["ok", "foreign", "minor", "garbage", "conflict"],
                          p=[0.86, 0.04, 0.03, 0.04, 0.03])
        loc = "Somewhere abroad" if kind == "foreign" else f"{st}, USA"
        locations[loc] = "Not from US" if kind == "foreign" else st
        tweets = [f"{uid} post {k}" for k in range(context)]
        user = UserRecord(uid, loc, f"{uid} bio", tuple(tweets), day=str(rng.integers(1, N_DAYS + 1)))
        users.append(user)
        ids = {"sex": "S1" if g == "M" else "S2",
               "age": "A1" if kind == "minor" else f"A{AGES.index(a) + 2}",
               "vote2020": VOTE_ID[CHOICES[j]]}
        text = _answer(ids, rng)
        if kind == "garbage":
            text = "I cannot tell from the information given."
        elif kind == "conflict":
            text += "\nAlternatively V2 or V3."
        prompt = build_demo_prompt(user, user_stream(uid, prompt_seed), context)
        replies[RecordedTransport.key(prompt)] = text
    for loc, reply in locations.items():
        replies[RecordedTransport.key(LOCATION_TEMPLATE.format(location=loc))] = reply

    with open(out / "users.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "location", "bio", "tweets", "day"])
        for u in users:
            w.writerow([u.id, u.location, u.bio, json.dumps(list(u.tweets)), u.day])
    (out / "replies.json").write_text(json.dumps(replies, indent=1, sort_keys=True))
    truth = {"prevalence": dict(zip(CHOICES, prevalence.tolist()))}
    (out / "truth.json").write_text(json.dumps(truth, indent=2))
    return truth


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--users", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--prompt-seed", type=int, default=0)
    ap.add_argument("--context", type=int, default=10)
    args = ap.parse_args(argv)
    build_corpus(args.out, args.users, args.seed, args.prompt_seed, args.context)
    print(f"wrote corpus to {args.out}")


if __name__ == "__main__":
    main()
