"""
Command-line front end.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (keys
are option names without the leading dashes, ``-`` or ``_`` alike). A
``manifest.json`` written by an earlier run is accepted too. Flags on the
command line override the file. Each run writes ``manifest.json`` next to
its outputs with the resolved configuration, its hash, the seed, library
versions and output checksums.

Exit codes: 0 success, 2 usage, 3 data validation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import DataValidationError, NumericalError

log = logging.getLogger("biasmrp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- config --------------------------------------------------------------------

def read_config(path) -> dict:
    """``key = value`` lines (``#`` comments) or a run manifest."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        data = json.loads(text)
        return dict(data.get("config", data))
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _coerce(action: argparse.Action, value):
    if isinstance(action, (argparse._StoreTrueAction,)):
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if value is None:
        return None
    if action.type is not None and isinstance(value, str):
        return action.type(value)
    return value


class _Unset:
    def __repr__(self):
        return "<unset>"


_UNSET = _Unset()


def _strip_defaults(parser):
    for a in parser._actions:
        if a.dest not in ("help", "command"):
            a.default = _UNSET
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            for p in a.choices.values():
                _strip_defaults(p)


def _config_dict(ns) -> dict:
    out = {}
    for k, v in sorted(vars(ns).items()):
        if k in ("config", "verbose"):
            continue
        out[k] = v if isinstance(v, (int, float, str, bool, type(None))) else str(v)
    return out


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import scipy

    from . import __version__

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "biasmrp": __version__}


def write_manifest(out_dir, ns, outputs) -> Path:
    cfg = _config_dict(ns)
    blob = json.dumps(cfg, sort_keys=True).encode()
    manifest = {"command": ns.command, "config": cfg, "config_hash": hashlib.sha256(blob).hexdigest(),
                "seed": cfg.get("seed"), "versions": _versions(),
                "outputs": {str(Path(p).name): _sha256(p) for p in outputs}}
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _existing(path, what):
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _require(ns, *names):
    missing = [n for n in names if getattr(ns, n, None) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _out_dir(ns) -> Path:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- shared loaders ------------------------------------------------------------

def _schema(ns):
    from .frame import Schema, election_schema

    if getattr(ns, "schema", None):
        with open(_existing(ns.schema, "schema file")) as fh:
            return Schema.from_dict(json.load(fh))
    return election_schema(ns.days)


def _covariates(ns, schema):
    from .frame import CovariateTables, load_covariates

    if not schema.covariate_names:
        return CovariateTables.empty(schema.n_areas, schema.n_days)
    return load_covariates(schema, _existing(ns.state_covariates, "state covariates"),
                           _existing(ns.day_covariates, "day covariates"),
                           _existing(ns.state_day_covariates, "state-day covariates"))


def _sampler(ns):
    from .sampler import SamplerConfig

    return SamplerConfig(chains=ns.chains, iterations=ns.iterations, warmup=ns.warmup, thin=ns.thin,
                         target_accept=ns.target_accept, max_depth=ns.max_depth, seed=ns.seed,
                         metric=ns.metric, workers=ns.workers)


# -- commands ------------------------------------------------------------------

def cmd_simulate(ns) -> int:
    from .simstudy import (METRICS, SCENARIOS, STIMULI, TARGETS, PopulationConfig, run_study,
                           stimulus_sweeps, write_report)

    _require(ns, "seed", "out")
    scen = tuple(s.strip() for s in ns.scenarios.split(",") if s.strip())
    bad = [s for s in scen if s not in SCENARIOS]
    if bad or not scen:
        raise UsageError(f"unknown scenario id(s) {', '.join(bad) or '(none)'}; valid ids: {', '.join(SCENARIOS)}")
    base = PopulationConfig.desk_scale if ns.scale == "desk" else PopulationConfig
    kw = {"seed": ns.seed}
    for k in ("replicates", "N", "n"):
        if getattr(ns, k) is not None:
            kw[k] = getattr(ns, k)
    cfg = base(**kw)
    sampler = _sampler(ns)
    rows = run_study(cfg, scen, sampler, workers=ns.workers)
    out = _out_dir(ns)
    report = out / "simreport.csv"
    write_report(rows, report)
    sweeps = out / "sweeps.csv"
    with open(sweeps, "w") as fh:
        fh.write("scenario,target,metric,stimulus,lo,hi,count,mean,se\n")
        for stim in STIMULI:
            for target in TARGETS:
                for metric in METRICS:
                    for b in stimulus_sweeps(rows, stim, target=target, metric=metric):
                        fh.write(f"{b.scenario},{b.target},{b.metric},{b.stimulus},{b.lo!r},{b.hi!r},"
                                 f"{b.count},{b.mean!r},{b.se!r}\n")
    write_manifest(out, ns, [report, sweeps])
    print(f"wrote {len(rows)} report rows to {report}")
    return EXIT_OK


def cmd_fit(ns) -> int:
    from .correction import king_zeng_offset, load_prevalence
    from .fitting import fit
    from .frame import load_adjacency, load_frame, load_survey
    from .model import BERNOULLI, MULTINOMIAL

    _require(ns, "seed", "survey", "out")
    if ns.bias_correct and not ns.prevalence:
        raise UsageError("--bias-correct needs --prevalence")
    if ns.bias_correct and ns.likelihood != BERNOULLI:
        raise UsageError("--bias-correct applies to per-choice Bernoulli fits only")
    schema = _schema(ns)
    survey = load_survey(_existing(ns.survey, "survey"), schema)
    cov = _covariates(ns, schema)
    graph = None
    if not ns.unstructured and ns.adjacency:
        graph = load_adjacency(_existing(ns.adjacency, "adjacency"), schema.n_areas)
    sampler = _sampler(ns)
    out = _out_dir(ns)
    outputs = []
    if ns.likelihood == MULTINOMIAL:
        fm = fit(survey, cov, graph, MULTINOMIAL, structured=not ns.unstructured, sampler=sampler)
        stem = out / "fit_multinomial"
        fm.save(stem)
        outputs += [stem.with_suffix(".csv"), stem.with_name(stem.name + ".model.json")]
    else:
        choices = [c.strip() for c in ns.choices.split(",")] if ns.choices else list(schema.choices)
        for c in choices:
            schema.choice_index(c)
        prev = None
        N = None
        if ns.bias_correct:
            prev = load_prevalence(_existing(ns.prevalence, "prevalence file"), choices)
            if ns.population_size:
                N = float(ns.population_size)
            elif ns.frame:
                N = load_frame(_existing(ns.frame, "frame"), schema).total_weight
            else:
                raise UsageError("--bias-correct needs --population-size or --frame")
        for j, c in enumerate(choices):
            offset = 0.0
            if prev is not None:
                n1 = int(np.sum(survey.choice == schema.choice_index(c)))
                offset = king_zeng_offset(n1, survey.n - n1, prev[c], N)
            fm = fit(survey, cov, graph, BERNOULLI, choice=c, structured=not ns.unstructured,
                     offset=offset, sampler=replace(sampler, seed=sampler.seed + 7919 * j))
            stem = out / f"fit_{_slug(c)}"
            fm.save(stem)
            outputs += [stem.with_suffix(".csv"), stem.with_name(stem.name + ".model.json")]
            print(f"{c}: offset {offset:+.4f}, {fm.draws.n_draws} draws, "
                  f"{fm.draws.total_divergences} divergences")
    # poststratify reads the schema back from the fit directory
    (out / "schema.json").write_text(json.dumps(schema.to_dict(), indent=2))
    outputs.append(out / "schema.json")
    write_manifest(out, ns, outputs)
    return EXIT_OK


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label)


def cmd_poststratify(ns) -> int:
    from .fitting import FittedModel
    from .frame import load_frame
    from .poststrat import (aggregate, combine, normalize_turnout, predict_cells, summarize,
                            write_estimates)

    _require(ns, "fits", "frame", "out")
    fit_dir = _existing(ns.fits, "fit directory")
    if ns.schema is None and (fit_dir / "schema.json").exists():
        ns.schema = str(fit_dir / "schema.json")
    schema = _schema(ns)
    frame = load_frame(_existing(ns.frame, "frame"), schema)
    cov = _covariates(ns, schema)
    stems = sorted(p.with_name(p.name[: -len(".model.json")]) for p in fit_dir.glob("*.model.json"))
    if not stems:
        raise DataValidationError(f"no fitted models in {fit_dir}")
    fits = [FittedModel.load(s) for s in stems]
    margin = tuple(m.strip() for m in ns.margin.split(",") if m.strip()) if ns.margin else ()
    cell_margin = tuple(m for m in margin if m != schema.time)
    if not schema.time:
        days = [None]
    elif schema.time in margin:
        days = range(schema.n_days)
    else:
        day = ns.day or schema.n_days
        if not 1 <= day <= schema.n_days:
            raise UsageError(f"--day must be in 1..{schema.n_days}")
        days = [day - 1]
    rows = []
    for d in days:
        cp = combine(predict_cells(f, frame, cov, d) for f in fits)
        if ns.normalize_turnout:
            cp = normalize_turnout(cp)
        rows += summarize(aggregate(cp, cell_margin or None), schema)
    out = _out_dir(ns)
    path = out / "estimates.csv"
    write_estimates(rows, path)
    write_manifest(out, ns, [path])
    print(f"wrote {len(rows)} estimates to {path}")
    return EXIT_OK


def cmd_annotate(ns) -> int:
    from .annotate import (AnnotateConfig, OpenAITransport, RecordedTransport, annotate_batch,
                           annotations_to_survey, load_users, write_annotations)
    from .frame import write_survey

    _require(ns, "users", "out")
    users = load_users(_existing(ns.users, "users file"))
    if ns.transport == "recorded":
        _require(ns, "fixtures")
        transport = RecordedTransport.load(_existing(ns.fixtures, "fixtures"))
    else:
        transport = OpenAITransport(model=ns.model, base_url=ns.base_url, api_key_env=ns.api_key_env)
    cfg = AnnotateConfig(context=ns.context, seed=ns.seed or 0, max_retries=ns.max_retries,
                         backoff=ns.backoff, concurrency=ns.concurrency)
    outcomes = annotate_batch(users, transport, cfg)
    out = _out_dir(ns)
    path = out / "annotations.csv"
    write_annotations(outcomes, path)
    outputs = [path]
    counts = {}
    for o in outcomes:
        counts[o.outcome] = counts.get(o.outcome, 0) + 1
    if ns.survey_out:
        schema = _schema(ns)
        survey = annotations_to_survey(outcomes, schema)
        write_survey(survey, out / "survey.csv")
        outputs.append(out / "survey.csv")
        print(f"{survey.n} respondents usable for modeling, {len(survey.dropped)} dropped")
    write_manifest(out, ns, outputs)
    print(", ".join(f"{k}: {v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def cmd_agreement(ns) -> int:
    from .agreement import (ORDINAL, NOMINAL, AgreementMatrix, NetworkConfig, bootstrap_alpha,
                            fit_agreement_network, load_matrix, load_ratings, posterior_incidence,
                            write_matrix)

    if not ns.ratings and not ns.matrix:
        raise UsageError("need --ratings or --matrix")
    if ns.ratings:
        tables = {k: AgreementMatrix.from_pairs(v) for k, v in load_ratings(_existing(ns.ratings, "ratings")).items()}
    else:
        tables = {Path(ns.matrix).stem: load_matrix(_existing(ns.matrix, "matrix"))}
    ordinal = {v.strip() for v in (ns.ordinal or "").split(",") if v.strip()}
    seed = ns.seed or 0
    out = _out_dir(ns)
    alpha_path = out / "alpha.csv"
    outputs = [alpha_path]
    with open(alpha_path, "w") as fh:
        fh.write("variable,level,n_units,alpha,q5,q50,q95\n")
        for k, (var, A) in enumerate(sorted(tables.items())):
            level = ORDINAL if var in ordinal else NOMINAL
            bs = bootstrap_alpha(A, ns.bootstrap, np.random.default_rng([seed, k]), level)
            fh.write(f"{var},{level},{A.n_units},{bs.alpha!r},{bs.q05!r},{bs.q50!r},{bs.q95!r}\n")
            print(f"{var}: alpha {bs.alpha:.4f} [{bs.q05:.4f}, {bs.q95:.4f}]")
            if ns.network:
                post = fit_agreement_network(A, NetworkConfig(chains=ns.chains, iterations=ns.iterations,
                                                              warmup=ns.warmup, seed=seed + k))
                path = out / f"incidence_{_slug(var)}.csv"
                write_matrix(posterior_incidence(post), A.levels, path)
                outputs.append(path)
    write_manifest(out, ns, outputs)
    return EXIT_OK


def cmd_swing(ns) -> int:
    import csv

    from .poststrat import uniform_swing

    _require(ns, "previous", "national_previous", "national_now", "out")
    with open(_existing(ns.previous, "previous results")) as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"area", "share"} <= set(rows[0]):
        raise DataValidationError(f"{ns.previous}: need columns area,share")
    try:
        prev = np.array([float(r["share"]) for r in rows])
    except ValueError as e:
        raise DataValidationError(f"{ns.previous}: {e}") from None
    shares, clamped = uniform_swing(prev, ns.national_previous, ns.national_now)
    out = _out_dir(ns)
    path = out / "swing.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area", "share", "clamped"])
        for r, s, c in zip(rows, shares, clamped):
            w.writerow([r["area"], r["share"] if s == float(r["share"]) else repr(float(s)), int(c)])
    write_manifest(out, ns, [path])
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _add_sampler(p):
    g = p.add_argument_group("sampler")
    g.add_argument("--chains", type=int, default=8)
    g.add_argument("--iterations", type=int, default=500)
    g.add_argument("--warmup", type=int, default=250)
    g.add_argument("--thin", type=int, default=4)
    g.add_argument("--target-accept", type=float, default=0.8)
    g.add_argument("--max-depth", type=int, default=8)
    g.add_argument("--metric", choices=("diag", "dense"), default="diag")
    g.add_argument("--workers", type=int, default=1)


def _add_inputs(p):
    p.add_argument("--schema", help="schema JSON (default: the 2020 election layout)")
    p.add_argument("--days", type=int, default=30, help="days in the default schema")
    p.add_argument("--state-covariates")
    p.add_argument("--day-covariates")
    p.add_argument("--state-day-covariates")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="biasmrp", description="Bias-corrected structured MrP.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the simulation study")
    p.add_argument("--config")
    p.add_argument("--scenarios", default="S.0,S.4,S.8")
    p.add_argument("--scale", choices=("desk", "full"), default="desk")
    p.add_argument("--replicates", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="simulation")
    _add_sampler(p)

    p = sub.add_parser("fit", help="fit per-choice or multinomial models")
    p.add_argument("--config")
    p.add_argument("--survey")
    _add_inputs(p)
    p.add_argument("--adjacency")
    p.add_argument("--likelihood", choices=("bernoulli", "multinomial"), default="bernoulli")
    p.add_argument("--choices", help="comma-separated subset of choices (Bernoulli)")
    p.add_argument("--unstructured", action="store_true")
    p.add_argument("--bias-correct", action="store_true")
    p.add_argument("--prevalence")
    p.add_argument("--population-size", type=float)
    p.add_argument("--frame", help="frame whose total weight is the population size")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="fits")
    _add_sampler(p)

    p = sub.add_parser("poststratify", help="aggregate fitted models over a frame")
    p.add_argument("--config")
    p.add_argument("--fits")
    p.add_argument("--frame")
    _add_inputs(p)
    p.add_argument("--margin", default="", help="comma-separated attributes; empty for the total")
    p.add_argument("--day", type=int, help="1-based day when the margin has no day (default: last)")
    p.add_argument("--normalize-turnout", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="estimates")

    p = sub.add_parser("annotate", help="annotate users with a chat-completion model")
    p.add_argument("--config")
    p.add_argument("--users")
    p.add_argument("--transport", choices=("recorded", "openai"), default="recorded")
    p.add_argument("--fixtures", help="recorded replies (JSON, prompt SHA-256 -> reply)")
    p.add_argument("--model", default="gpt-3.5-turbo")
    p.add_argument("--base-url", default="https://api.openai.com/v1")
    p.add_argument("--api-key-env", default="OPENAI_API_KEY")
    p.add_argument("--context", type=int, choices=(5, 10), default=10)
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--backoff", type=float, default=1.0)
    p.add_argument("--survey-out", action="store_true", help="also write survey.csv for fitting")
    _add_inputs(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="annotations")

    p = sub.add_parser("agreement", help="Krippendorff's alpha and agreement networks")
    p.add_argument("--config")
    p.add_argument("--ratings")
    p.add_argument("--matrix")
    p.add_argument("--ordinal", help="comma-separated variables treated as ordinal")
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--network", action="store_true")
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--iterations", type=int, default=1500)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="agreement")

    p = sub.add_parser("swing", help="uniform swing baseline")
    p.add_argument("--config")
    p.add_argument("--previous")
    p.add_argument("--national-previous", type=float)
    p.add_argument("--national-now", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="swing")
    return ap


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "poststratify": cmd_poststratify,
            "annotate": cmd_annotate, "agreement": cmd_agreement, "swing": cmd_swing}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        bare = build_parser()
        _strip_defaults(bare)
        explicit = vars(bare.parse_args(argv))
        if getattr(ns, "config", None):
            cfg = read_config(ns.config)
            sub = parser._subparsers._group_actions[0].choices[ns.command]
            actions = {a.dest: a for a in sub._actions}
            unknown = sorted(set(cfg) - set(actions) - {"command"})
            if unknown:
                raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
            for k, v in cfg.items():
                if k == "command" or explicit.get(k, _UNSET) is not _UNSET:
                    continue
                try:
                    setattr(ns, k, _coerce(actions[k], v))
                except (TypeError, ValueError) as e:
                    raise UsageError(f"config key {k}: {e}") from None
        return COMMANDS[ns.command](ns)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataValidationError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
