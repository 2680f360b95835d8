"""
Simulation study harness: synthetic populations with spatially structured
preferences, random or online-selected samples, the ten scenario models and
the four scoring metrics.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay
from scipy.special import softmax

from . import correction
from .errors import DataValidationError
from .fitting import fit
from .frame import (US_STATES, AdjacencyGraph, Attribute, CovariateTables, Schema,
                    StratificationFrame, SurveyDataset)
from .model import BERNOULLI, MULTINOMIAL
from .priors import bym2_convolve, compute_scaling_factor
from .sampler import SamplerConfig

log = logging.getLogger(__name__)

METRICS = ("bias", "rmse", "pearson", "coverage")
TARGETS = ("theta", "pi")


@dataclass(frozen=True)
class PopulationConfig:
    N: int = 1_000_000
    J: int = 3
    L: int = 51
    n_covariates: int = 3
    cutoffs: tuple[float, ...] = (-1.0, 0.0, 1.0)
    sar_candidates: int = 1000
    sar_max_lambda: float = 0.99
    replicates: int = 150
    n: int = 2000
    seed: int = 0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.cutoffs, self.cutoffs[1:])):
            raise DataValidationError("cutoffs must be strictly increasing")
        if self.sar_candidates < 1:
            raise DataValidationError("need at least one SAR candidate")
        if self.J < 2 or self.L < 2:
            raise DataValidationError("need at least 2 choices and 2 areas")
        if not 1 <= self.n <= self.N:
            raise DataValidationError("sample size must be in [1, N]")

    @classmethod
    def desk_scale(cls, **kw) -> "PopulationConfig":
        base = dict(N=100_000, replicates=10, n=2000)
        base.update(kw)
        return cls(**base)

    @property
    def levels_per_covariate(self) -> int:
        return len(self.cutoffs) + 1

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# -- graphs and spatial fields ----------------------------------------------

def planar_graph(n_nodes: int = 51, n_islands: int = 2, avg_degree: float = 4.27,
                 rng=None, islands=None) -> AdjacencyGraph:
    """Random planar-like graph: a Delaunay triangulation of uniform points
    over the connected nodes, thinned by dropping the longest non-bridge
    edges until the average degree (over all nodes) reaches ``avg_degree``.
    """
    rng = np.random.default_rng(rng)
    if islands is None:
        if n_nodes == len(US_STATES) and n_islands == 2:
            islands = [US_STATES.index("Alaska"), US_STATES.index("Hawaii")]
        else:
            islands = list(range(n_nodes - n_islands, n_nodes))
    islands = sorted(islands)
    mainland = np.array([i for i in range(n_nodes) if i not in islands])
    m = mainland.size
    if m < 3:
        edges = [(mainland[0], mainland[1])] if m == 2 else []
        return AdjacencyGraph(n_nodes, np.array(edges, dtype=np.int64).reshape(-1, 2))
    pts = rng.uniform(size=(m, 2))
    tri = Delaunay(pts)
    es = set()
    for s in tri.simplices:
        for a, b in ((s[0], s[1]), (s[1], s[2]), (s[0], s[2])):
            es.add((min(a, b), max(a, b)))
    es = sorted(es, key=lambda e: -np.hypot(*(pts[e[0]] - pts[e[1]])))
    target = max(m - 1, int(round(avg_degree * n_nodes / 2)))
    kept = list(es)
    for e in es:
        if len(kept) <= target:
            break
        trial = [x for x in kept if x != e]
        A = np.zeros((m, m))
        ij = np.array(trial)
        A[ij[:, 0], ij[:, 1]] = 1
        if connected_components(A, directed=False)[0] == 1:
            kept = trial
    edges = np.array([(mainland[a], mainland[b]) for a, b in kept], dtype=np.int64)
    return AdjacencyGraph(n_nodes, edges)


def moran_i(values, graph: AdjacencyGraph) -> float:
    """Global Moran's I with binary symmetric weights."""
    v = np.asarray(values, dtype=float)
    d = v - v.mean()
    den = float(d @ d)
    if den <= 1e-300 * max(v.size, 1):
        raise DataValidationError("zero variance")
    S0 = 2.0 * graph.edges.shape[0]
    if S0 == 0:
        raise DataValidationError("graph has no edges")
    num = 2.0 * float(np.sum(d[graph.node1] * d[graph.node2]))
    return v.size / S0 * num / den


def _row_normalized(graph: AdjacencyGraph) -> np.ndarray:
    A = graph.adjacency_matrix().astype(float)
    deg = A.sum(axis=1)
    return np.divide(A, deg[:, None], out=np.zeros_like(A), where=deg[:, None] > 0)


def sar_candidates(graph: AdjacencyGraph, candidates: int, rng, max_lambda: float = 0.99,
                   lambdas=None):
    """Draw SAR fields ``(I - lambda W)^{-1} eps``; returns ``(fields, lambdas)``
    with one field per row."""
    W = _row_normalized(graph)
    L = graph.n_nodes
    I = np.eye(L)
    fields, lams = [], []
    for k in range(candidates):
        lam = rng.uniform(0.0, max_lambda) if lambdas is None else float(lambdas[k])
        eps = rng.standard_normal(L)
        for _ in range(100):
            try:
                psi = np.linalg.solve(I - lam * W, eps)
                break
            except np.linalg.LinAlgError:
                lam = rng.uniform(0.0, max_lambda)
        else:
            raise DataValidationError("could not draw a nonsingular SAR operator")
        fields.append(psi)
        lams.append(lam)
    return np.asarray(fields), np.asarray(lams)


def sample_sar_psi(graph: AdjacencyGraph, candidates: int = 1000, rng=None,
                   max_lambda: float = 0.99, lambdas=None):
    """The candidate SAR field with the highest Moran's I.

    Returns ``(psi, moran, lambda)``.
    """
    rng = np.random.default_rng(rng)
    fields, lams = sar_candidates(graph, candidates, rng, max_lambda, lambdas)
    scores = np.array([moran_i(f, graph) for f in fields])
    k = int(np.argmax(scores))
    return fields[k], float(scores[k]), float(lams[k])


# -- populations -----------------------------------------------------------

def sim_schema(cfg: PopulationConfig) -> Schema:
    K = cfg.levels_per_covariate
    attrs = (Attribute("area", cfg.L),) + tuple(
        Attribute(f"u{k + 1}", K, ordinal=True) for k in range(cfg.n_covariates))
    return Schema(attrs, tuple(f"c{j + 1}" for j in range(cfg.J)), area="area", time=None,
                  state_covariates=("z",))


@dataclass(eq=False)
class Population:
    """Cell-level population: every (area, u1..uK) combination with its size,
    per-choice counts and true choice probabilities."""

    cfg: PopulationConfig
    graph: AdjacencyGraph
    schema: Schema
    cells: np.ndarray
    sizes: np.ndarray
    counts: np.ndarray
    probs: np.ndarray
    z: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def prevalence(self) -> np.ndarray:
        return self.counts.sum(axis=0) / self.counts.sum()

    def frame(self) -> StratificationFrame:
        return StratificationFrame(self.schema, self.cells, self.sizes.astype(float))

    def covariates(self) -> CovariateTables:
        L = self.cfg.L
        return CovariateTables(self.z[:, None], np.zeros((0, 0)), np.zeros((L, 0, 0)),
                               state_names=("z",))

    def area_truth(self) -> tuple[np.ndarray, np.ndarray]:
        """True area-level shares (areas x J) from cell probabilities, and
        the ids of populated areas."""
        area = self.cells[:, 0]
        w = np.bincount(area, weights=self.sizes, minlength=self.cfg.L)
        num = np.stack([np.bincount(area, weights=self.sizes * self.probs[:, j], minlength=self.cfg.L)
                        for j in range(self.cfg.J)], axis=1)
        ok = np.flatnonzero(w > 0)
        return num[ok] / w[ok, None], ok


def all_cells(cfg: PopulationConfig) -> np.ndarray:
    K = cfg.levels_per_covariate
    grids = np.meshgrid(np.arange(cfg.L), *[np.arange(K)] * cfg.n_covariates, indexing="ij")
    return np.column_stack([g.ravel() for g in grids])


def gen_population(cfg: PopulationConfig, graph: AdjacencyGraph, rng,
                   zero_effects: bool = False) -> Population:
    """Draw one population from the simulation DGP.

    Area membership follows a Dirichlet(1, ..., 1) share vector drawn once per
    population; individual covariates are equicorrelated normals cut into
    ``len(cutoffs) + 1`` levels; choices are categorical given the softmax of
    the per-choice predictors.
    """
    if graph.n_nodes != cfg.L:
        raise DataValidationError(f"graph has {graph.n_nodes} nodes, config has L = {cfg.L}")
    rng = np.random.default_rng(rng)
    J, L, K, P = cfg.J, cfg.L, cfg.levels_per_covariate, cfg.n_covariates
    alpha = rng.normal(size=J)
    gammas = rng.normal(size=(P, K, J))
    beta = rng.uniform(-1.0, 1.0, size=J)
    z = rng.normal(size=L)
    sf = compute_scaling_factor(graph)
    xi = rng.uniform(size=J)
    phi = rng.normal(size=(J, L))
    spatial = np.zeros((J, L))
    morans = []
    for j in range(J):
        psi, mi, _ = sample_sar_psi(graph, cfg.sar_candidates, rng, cfg.sar_max_lambda)
        morans.append(mi)
        # put the SAR field on the unit scale of the unstructured part
        psi = (psi - psi.mean()) / psi.std()
        spatial[j] = bym2_convolve(phi[j], psi, xi[j], 1.0, sf)
    if zero_effects:
        alpha[:] = 0
        gammas[:] = 0
        beta[:] = 0
        spatial[:] = 0
    rho = rng.uniform()
    cov = np.full((P, P), rho) + (1.0 - rho) * np.eye(P)
    x = rng.multivariate_normal(np.zeros(P), cov, size=cfg.N)
    u = np.digitize(x, cfg.cutoffs)
    area_p = rng.dirichlet(np.ones(L))
    area = rng.choice(L, size=cfg.N, p=area_p)

    cells = all_cells(cfg)
    strides = K ** np.arange(P - 1, -1, -1)
    cell_id = area * K ** P + u @ strides
    sizes = np.bincount(cell_id, minlength=cells.shape[0])
    eta = alpha[None, :] + beta[None, :] * z[cells[:, 0], None] + spatial.T[cells[:, 0]]
    for k in range(P):
        eta = eta + gammas[k][cells[:, 1 + k]]
    probs = softmax(eta, axis=1)
    counts = np.zeros((cells.shape[0], J), dtype=np.int64)
    pos = sizes > 0
    counts[pos] = np.array([rng.multinomial(s, p) for s, p in zip(sizes[pos], probs[pos])])
    params = {"alpha": alpha, "gammas": gammas, "beta": beta, "xi": xi, "phi": phi,
              "spatial": spatial, "rho_x": rho, "area_p": area_p, "moran": np.array(morans)}
    return Population(cfg, graph, sim_schema(cfg), cells, sizes, counts, probs, z, params)


# -- scenarios -------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    sampling: str
    likelihood: str
    structured: bool
    corrected: bool


SCENARIOS = {
    "S.0": ScenarioSpec("S.0", "random", BERNOULLI, True, False),
    "S.1": ScenarioSpec("S.1", "random", BERNOULLI, False, False),
    "S.2": ScenarioSpec("S.2", "random", MULTINOMIAL, True, False),
    "S.3": ScenarioSpec("S.3", "random", MULTINOMIAL, False, False),
    "S.4": ScenarioSpec("S.4", "selected", BERNOULLI, True, False),
    "S.5": ScenarioSpec("S.5", "selected", BERNOULLI, False, False),
    "S.6": ScenarioSpec("S.6", "selected", MULTINOMIAL, True, False),
    "S.7": ScenarioSpec("S.7", "selected", MULTINOMIAL, False, False),
    "S.8": ScenarioSpec("S.8", "selected", BERNOULLI, True, True),
    "S.9": ScenarioSpec("S.9", "selected", BERNOULLI, False, True),
}


def scenario(sid: str) -> ScenarioSpec:
    try:
        return SCENARIOS[sid]
    except KeyError:
        raise DataValidationError(f"unknown scenario {sid!r}; choose from {', '.join(SCENARIOS)}") from None


@dataclass(frozen=True)
class Sample:
    cell: np.ndarray
    choice: np.ndarray
    protocol: str
    selection: correction.SelectionConfig | None = None

    def survey(self, pop: Population) -> SurveyDataset:
        return SurveyDataset(pop.schema, self.choice, pop.cells[self.cell], self.cell)

    def shares(self, J: int) -> np.ndarray:
        return np.bincount(self.choice, minlength=J) / self.choice.size


def draw_sample(pop: Population, protocol: str, n: int, rng, mu=None) -> Sample:
    if protocol == "random":
        cell, choice = correction.draw_random_sample(pop.counts, n, rng)
        return Sample(cell, choice, protocol)
    if protocol == "selected":
        if mu is None:
            mu = rng.uniform(size=pop.cfg.J)
        sel = correction.SelectionConfig.half_bound(mu, n)
        cell, choice, _ = correction.draw_online_selected_sample(pop.counts, sel, rng)
        return Sample(cell, choice, protocol, sel)
    raise DataValidationError(f"unknown sampling protocol {protocol!r}")


def score(truth, estimate, lo=None, hi=None) -> dict[str, float]:
    """Bias ``mean(f - f_hat)``, RMSE, Pearson correlation and the share of
    truths strictly inside ``(lo, hi)``. Undefined values are ``nan``."""
    f = np.asarray(truth, dtype=float)
    fh = np.asarray(estimate, dtype=float)
    d = f - fh
    out = {"bias": float(d.mean()), "rmse": float(math.sqrt(np.mean(d * d)))}
    if f.size > 1 and np.ptp(f) > 0 and np.ptp(fh) > 0:
        out["pearson"] = float(np.clip(np.corrcoef(f, fh)[0, 1], -1.0, 1.0))
    else:
        out["pearson"] = float("nan")
    if lo is None or hi is None:
        out["coverage"] = float("nan")
    else:
        out["coverage"] = float(np.mean((np.asarray(lo) < f) & (f < np.asarray(hi))))
    return out


@dataclass
class ReportRow:
    replicate: int
    scenario: str
    choice: str
    target: str
    metric: str
    value: float
    n: int
    prevalence: float
    mu_upsilon: float
    sample_prevalence_bias: float
    divergences: int = 0
    flagged: bool = False


REPORT_COLUMNS = tuple(ReportRow.__dataclass_fields__)


def _estimate_probs(pop, sample, spec: ScenarioSpec, sampler: SamplerConfig):
    """Posterior cell probabilities (draws x cells x J) for one scenario and
    the divergence count per choice."""
    survey = sample.survey(pop)
    cov = pop.covariates()
    graph = pop.graph if spec.structured else None
    levels, X = pop.cells, pop.z[pop.cells[:, 0], None]
    J = pop.cfg.J
    if spec.likelihood == MULTINOMIAL:
        fm = fit(survey, cov, graph, MULTINOMIAL, structured=spec.structured, sampler=sampler)
        return fm.probabilities(levels, X), [fm.draws.total_divergences] * J
    probs, divs = [], []
    n = sample.choice.size
    for j, label in enumerate(pop.schema.choices):
        offset = 0.0
        if spec.corrected:
            n1 = int(np.sum(sample.choice == j))
            offset = correction.king_zeng_offset(n1, n - n1, float(pop.prevalence[j]), pop.cfg.N)
        fm = fit(survey, cov, graph, BERNOULLI, choice=label, structured=spec.structured,
                 offset=offset, sampler=replace(sampler, seed=sampler.seed + 7919 * j))
        probs.append(fm.probabilities(levels, X)[:, :, 0])
        divs.append(fm.draws.total_divergences)
    return np.stack(probs, axis=2), divs


def run_scenario(pop: Population, sample: Sample, spec: ScenarioSpec, sampler: SamplerConfig,
                 replicate: int = 0, estimator=None, divergence_limit: float = 0.05):
    """Fit, post-stratify and score one scenario; one row per choice, target
    and metric. ``estimator(pop, sample, spec, sampler)`` overrides model
    fitting (used to inject known truths)."""
    est = estimator or _estimate_probs
    probs, divs = est(pop, sample, spec, sampler)
    J = pop.cfg.J
    w = pop.sizes.astype(float)
    area = pop.cells[:, 0]
    theta_true, areas = pop.area_truth()
    populated = w > 0
    wsum = np.bincount(area, weights=w, minlength=pop.cfg.L)[areas]
    # theta draws: (draws x areas x J)
    theta = np.stack([np.stack([np.bincount(area, weights=w * probs[s, :, j], minlength=pop.cfg.L)[areas]
                                for j in range(J)], axis=1) for s in range(probs.shape[0])]) / wsum[None, :, None]
    shares = sample.shares(J)
    n_draws = probs.shape[0]
    rows = []
    for j, label in enumerate(pop.schema.choices):
        mu = sample.selection.mu[j] if sample.selection is not None else 0.0
        flagged = divs[j] > divergence_limit * n_draws
        for target, truth, draws in (("theta", theta_true[:, j], theta[:, :, j]),
                                     ("pi", pop.probs[populated, j], probs[:, populated, j])):
            lo, med, hi = np.percentile(draws, [5, 50, 95], axis=0)
            for metric, value in score(truth, med, lo, hi).items():
                rows.append(ReportRow(replicate, spec.id, label, target, metric, value,
                                      int(sample.choice.size), float(pop.prevalence[j]), float(mu),
                                      float(shares[j] - pop.prevalence[j]), int(divs[j]), bool(flagged)))
    return rows


def run_replicate(cfg: PopulationConfig, replicate: int, scenarios=("S.0", "S.4", "S.8"),
                  sampler: SamplerConfig | None = None, graph: AdjacencyGraph | None = None):
    """One population, one random and one selected sample shared across the
    scenarios that use them, and the scored rows for each scenario."""
    sampler = sampler or SamplerConfig()
    ss = np.random.SeedSequence([cfg.seed, replicate])
    p_rng, s_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    if graph is None:
        graph = planar_graph(cfg.L, rng=np.random.default_rng(np.random.SeedSequence([cfg.seed])))
    pop = gen_population(cfg, graph, p_rng)
    specs = [scenario(s) for s in scenarios]
    samples = {}
    rows = []
    for spec in specs:
        if spec.sampling not in samples:
            samples[spec.sampling] = draw_sample(pop, spec.sampling, cfg.n, s_rng)
        srep = replace(sampler, seed=int(np.random.SeedSequence([sampler.seed, replicate]).generate_state(1)[0]))
        log.info("replicate %d scenario %s", replicate, spec.id)
        rows.extend(run_scenario(pop, samples[spec.sampling], spec, srep, replicate))
    return rows


def run_study(cfg: PopulationConfig, scenarios=("S.0", "S.4", "S.8"),
              sampler: SamplerConfig | None = None, graph=None, workers: int = 1):
    """All replicates; rows ordered by (replicate, scenario) regardless of
    scheduling."""
    reps = range(cfg.replicates)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run_replicate, [cfg] * cfg.replicates, reps,
                                [tuple(scenarios)] * cfg.replicates,
                                [sampler] * cfg.replicates, [graph] * cfg.replicates))
    else:
        parts = [run_replicate(cfg, r, scenarios, sampler, graph) for r in reps]
    return [row for part in parts for row in part]


# modules whose code determines a study report
STUDY_SOURCES = ("_kernels.py", "correction.py", "errors.py", "fitting.py", "frame.py", "model.py",
                 "priors.py", "sampler.py", "simstudy.py")


def study_fingerprint(cfg: PopulationConfig, scenarios, sampler: SamplerConfig) -> str:
    """Hash of everything that determines a study's report: the population
    and sampler configs, the scenario list and the package source."""
    from pathlib import Path

    h = hashlib.sha256()
    sam = asdict(sampler)
    sam.pop("workers", None)  # results do not depend on parallelism
    h.update(json.dumps([asdict(cfg), list(scenarios), sam], sort_keys=True).encode())
    here = Path(__file__).parent
    for name in STUDY_SOURCES:
        h.update(name.encode())
        h.update((here / name).read_bytes())
    return h.hexdigest()[:20]


def write_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in
                        (getattr(r, c) for c in REPORT_COLUMNS)])


def read_report(path) -> list[ReportRow]:
    out = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            out.append(ReportRow(int(d["replicate"]), d["scenario"], d["choice"], d["target"],
                                 d["metric"], float(d["value"]), int(d["n"]), float(d["prevalence"]),
                                 float(d["mu_upsilon"]), float(d["sample_prevalence_bias"]),
                                 int(d["divergences"]), d["flagged"] == "True"))
    return out


def metric_table(rows, target: str, metric: str):
    """``{scenario: [(replicate, choice, value, row)]}`` for one target/metric."""
    out = {}
    for r in rows:
        if r.target == target and r.metric == metric:
            out.setdefault(r.scenario, []).append(r)
    return out


STIMULI = {
    "n": lambda r: r.n,
    "prevalence": lambda r: r.prevalence,
    "mu_upsilon": lambda r: r.mu_upsilon,
    "sample_prevalence_bias": lambda r: abs(r.sample_prevalence_bias),
}


@dataclass(frozen=True)
class SweepBin:
    scenario: str
    target: str
    metric: str
    stimulus: str
    lo: float
    hi: float
    count: int
    mean: float
    se: float


def stimulus_sweeps(rows, stimulus: str = "sample_prevalence_bias", bins: int = 5,
                    target: str = "theta", metric: str = "rmse") -> list[SweepBin]:
    """Binned mean metric (with Monte Carlo standard error) against a
    stimulus, per scenario. Bins are quantiles of the stimulus."""
    key = STIMULI[stimulus]
    out = []
    for sid, rs in sorted(metric_table(rows, target, metric).items()):
        x = np.array([key(r) for r in rs], dtype=float)
        y = np.array([r.value for r in rs], dtype=float)
        ok = np.isfinite(y)
        x, y = x[ok], y[ok]
        if x.size == 0:
            continue
        edges = np.unique(np.quantile(x, np.linspace(0, 1, bins + 1)))
        if edges.size < 2:
            edges = np.array([x.min(), x.max()])
        idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, edges.size - 2)
        for b in range(edges.size - 1):
            yb = y[idx == b]
            if yb.size == 0:
                continue
            se = float(yb.std(ddof=1) / math.sqrt(yb.size)) if yb.size > 1 else float("nan")
            out.append(SweepBin(sid, target, metric, stimulus, float(edges[b]), float(edges[b + 1]),
                                int(yb.size), float(yb.mean()), se))
    return out


def rank_correlation(rows, scenario_id: str, stimulus: str = "sample_prevalence_bias",
                     target: str = "theta", metric: str = "rmse") -> float:
    rs = metric_table(rows, target, metric).get(scenario_id, [])
    x = [STIMULI[stimulus](r) for r in rs]
    y = [r.value for r in rs]
    if len(x) < 3:
        return float("nan")
    return float(stats.spearmanr(x, y).statistic)
