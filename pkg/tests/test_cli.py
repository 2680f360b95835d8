import csv
import json
from pathlib import Path

import pytest

from biasmrp.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main, read_config

from corpus import CHOICES, build_corpus

FIXTURES = Path(__file__).parent / "fixtures"
TINY_SAMPLER = ["--chains", "2", "--iterations", "200", "--warmup", "100", "--thin", "1"]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    build_corpus(d, n_users=150, seed=4)
    return d


@pytest.fixture(scope="module")
def fitted(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    c = corpus_dir
    assert main(["annotate", "--users", str(c / "users.csv"), "--fixtures", str(c / "replies.json"),
                 "--schema", str(c / "schema.json"), "--survey-out", "--out", str(out / "ann")]) == EXIT_OK
    assert main(["fit", "--survey", str(out / "ann" / "survey.csv"), "--schema", str(c / "schema.json"),
                 "--adjacency", str(c / "adjacency.csv"), "--seed", "3", "--out", str(out / "fits")]
                + TINY_SAMPLER) == EXIT_OK
    return out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_missing_seed_is_usage_error(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "--seed" in capsys.readouterr().err


def test_unknown_scenario_lists_valid_ids(tmp_path, capsys):
    assert main(["simulate", "--seed", "1", "--scenarios", "S.0,S.99", "--out", str(tmp_path)]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "S.99" in err and "S.9" in err


def test_missing_input_path_is_usage_error(tmp_path):
    assert main(["fit", "--seed", "1", "--survey", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_unknown_subcommand_is_usage_error():
    assert main(["dance"]) == EXIT_USAGE


def test_bias_correct_needs_prevalence(fitted, corpus_dir, tmp_path):
    assert main(["fit", "--survey", str(fitted / "ann" / "survey.csv"), "--schema",
                 str(corpus_dir / "schema.json"), "--seed", "1", "--bias-correct",
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_bad_data_is_data_error(tmp_path):
    f = tmp_path / "prev.csv"
    f.write_text("area,share\nA,abc\n")
    assert main(["swing", "--previous", str(f), "--national-previous", "0.5",
                 "--national-now", "0.5", "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_config_file_with_flag_override(tmp_path):
    prev = tmp_path / "prev.csv"
    prev.write_text("area,share\nA,0.4\nB,0.6\n")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# swing settings\nprevious = {prev}\nnational-previous = 0.5\n"
                   f"national_now = 0.6\nout = {tmp_path / 'from_cfg'}\n")
    assert read_config(cfg)["national_previous"] == "0.5"
    assert main(["swing", "--config", str(cfg), "--national-now", "0.5"]) == EXIT_OK
    got = rows(tmp_path / "from_cfg" / "swing.csv")
    assert [r["share"] for r in got] == ["0.4", "0.6"]
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert main(["swing", "--config", str(bad)]) == EXIT_USAGE


def test_zero_swing_returns_input(tmp_path):
    prev = tmp_path / "prev.csv"
    prev.write_text("area,share\nAlabama,0.3656\nAlaska,0.4277\nArizona,0.49363\n")
    assert main(["swing", "--previous", str(prev), "--national-previous", "0.48",
                 "--national-now", "0.48", "--out", str(tmp_path / "o")]) == EXIT_OK
    got = rows(tmp_path / "o" / "swing.csv")
    assert [(r["area"], r["share"], r["clamped"]) for r in got] == \
           [("Alabama", "0.3656", "0"), ("Alaska", "0.4277", "0"), ("Arizona", "0.49363", "0")]


def test_agreement_on_vote_matrix(tmp_path):
    assert main(["agreement", "--matrix", str(FIXTURES / "vote2020_matrix.csv"), "--bootstrap", "50",
                 "--seed", "2", "--out", str(tmp_path)]) == EXIT_OK
    (r,) = rows(tmp_path / "alpha.csv")
    assert r["variable"] == "vote2020_matrix" and int(r["n_units"]) == 3537
    assert float(r["alpha"]) == pytest.approx(0.639659171477051, abs=1e-12)


def test_agreement_network_writes_incidence(tmp_path):
    assert main(["agreement", "--matrix", str(FIXTURES / "vote2020_matrix.csv"), "--bootstrap", "10",
                 "--network", "--chains", "1", "--iterations", "300", "--warmup", "150",
                 "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "incidence_vote2020_matrix.csv").read_text().splitlines()
    assert lines[0] == ",D,G,L,R,stay home" and len(lines) == 6
    vals = [float(x) for line in lines[1:] for x in line.split(",")[1:]]
    assert all(0.0 <= v <= 1.0 for v in vals)


def test_annotate_three_fixture_users(tmp_path):
    from biasmrp.annotate import RecordedTransport, UserRecord, build_demo_prompt, build_location_prompt, user_stream

    users = [UserRecord(f"f{k}", "Ohio", "bio", tuple(f"t{i}" for i in range(10))) for k in range(3)]
    replies = {RecordedTransport.key(build_location_prompt(users[0])): "Ohio"}
    for u in users:
        replies[RecordedTransport.key(build_demo_prompt(u, user_stream(u.id, 9)))] = "S1 A3 V3"
    (tmp_path / "replies.json").write_text(json.dumps(replies))
    with open(tmp_path / "users.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "location", "bio", "tweets"])
        for u in users:
            w.writerow([u.id, u.location, u.bio, json.dumps(list(u.tweets))])
    assert main(["annotate", "--users", str(tmp_path / "users.csv"), "--fixtures",
                 str(tmp_path / "replies.json"), "--seed", "9", "--out", str(tmp_path / "o")]) == EXIT_OK
    got = rows(tmp_path / "o" / "annotations.csv")
    assert len(got) == 3 and {r["outcome"] for r in got} == {"success"}


def test_fit_writes_one_draw_file_per_choice_and_manifest(fitted):
    fits = fitted / "fits"
    assert sorted(p.name for p in fits.glob("fit_*.csv")) == ["fit_D.csv", "fit_R.csv", "fit_stay_home.csv"]
    m = json.loads((fits / "manifest.json").read_text())
    assert m["command"] == "fit" and m["seed"] == 3
    assert set(m["versions"]) == {"python", "numpy", "scipy", "biasmrp"}
    assert len(m["config_hash"]) == 64
    assert "fit_D.csv" in m["outputs"]


def test_poststratify_margins(fitted, corpus_dir):
    c = corpus_dir
    base = ["poststratify", "--fits", str(fitted / "fits"), "--frame", str(c / "frame.csv")]
    assert main(base + ["--margin", "state", "--out", str(fitted / "e1")]) == EXIT_OK
    est = rows(fitted / "e1" / "estimates.csv")
    assert len(est) == 51 * len(CHOICES)
    assert {r["day"] for r in est} == {"3"}
    assert main(base + ["--margin", "state,day", "--out", str(fitted / "e2")]) == EXIT_OK
    assert len(rows(fitted / "e2" / "estimates.csv")) == 51 * 3 * len(CHOICES)
    assert main(base + ["--day", "9", "--out", str(fitted / "e3")]) == EXIT_USAGE
    assert main(["poststratify", "--fits", str(fitted / "fits"), "--frame", str(c / "nope.csv"),
                 "--out", str(fitted / "e4")]) == EXIT_USAGE


def test_inputs_are_not_mutated(fitted, corpus_dir):
    before = {p.name: p.read_bytes() for p in corpus_dir.iterdir()}
    main(["poststratify", "--fits", str(fitted / "fits"), "--frame", str(corpus_dir / "frame.csv"),
          "--out", str(fitted / "e5")])
    assert {p.name: p.read_bytes() for p in corpus_dir.iterdir()} == before


@pytest.mark.slow
def test_simulate_rerun_from_manifest_is_byte_identical(tmp_path):
    args = ["simulate", "--scenarios", "S.0", "--replicates", "1", "--N", "3000", "--n", "200",
            "--seed", "7", "--out", str(tmp_path / "a")] + TINY_SAMPLER
    assert main(args) == EXIT_OK
    report = rows(tmp_path / "a" / "simreport.csv")
    assert {(r["replicate"], r["scenario"]) for r in report} == {("0", "S.0")}
    assert main(["simulate", "--config", str(tmp_path / "a" / "manifest.json"),
                 "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "simreport.csv").read_bytes() == (tmp_path / "b" / "simreport.csv").read_bytes()
