"""
Agreement between two raters: Krippendorff's alpha with a unit bootstrap,
and a latent agreement-network model for a rater-by-rater contingency table.

Network model
-------------
For an L1 x L2 agreement matrix ``A``::

    A_ij ~ Poisson(mu_ij),  log mu_ij = b0 + b1_i + b2_j + log(1 + r B_ij)
    B_ij ~ Bernoulli(pi_ij), pi_ij ~ Beta(1/2, 1/2), r ~ Exp(rate)
    b0 ~ N(0, 10), b1_i ~ N(0, s1), b2_j ~ N(0, s2), s1, s2 ~ U(0, 5)

Normal scales are standard deviations. Writing ``eta = b0 + b1_i + b2_j``,
the Poisson likelihood ratio between ``B_ij = 1`` and ``B_ij = 0`` is::

    p(A | B=1) / p(A | B=0) = (1 + r)^A * exp(-exp(eta) * r)

so ``B_ij`` given everything else is Bernoulli with log-odds
``logit(pi_ij) + A_ij log(1 + r) - r exp(eta_ij)``, and ``pi_ij`` given
``B_ij`` is Beta(1/2 + B, 3/2 - B). The remaining blocks use random-walk
Metropolis with step sizes tuned during warmup. Row effects are
conditionally independent given the rest, so all of them are proposed
jointly and accepted row by row; columns likewise.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DataValidationError

NOMINAL = "nominal"
ORDINAL = "ordinal"


# -- data ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AgreementMatrix:
    """``counts[i, j]``: units rater 1 labelled ``levels[i]`` and rater 2
    labelled ``levels[j]``."""

    counts: np.ndarray
    levels: tuple[str, ...]

    def __post_init__(self):
        A = np.asarray(self.counts)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DataValidationError("agreement matrix must be square")
        if A.shape[0] != len(self.levels):
            raise DataValidationError("one level name per row/column required")
        if np.any(A < 0) or np.any(A != np.round(A)):
            raise DataValidationError("agreement counts must be nonnegative integers")
        if A.sum() < 1:
            raise DataValidationError("agreement matrix is empty")
        object.__setattr__(self, "counts", A.astype(np.int64))

    @property
    def n_units(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_pairs(cls, pairs: "PairedRatings") -> "AgreementMatrix":
        L = len(pairs.levels)
        A = np.bincount(pairs.codes1 * L + pairs.codes2, minlength=L * L).reshape(L, L)
        return cls(A, pairs.levels)


@dataclass(frozen=True, eq=False)
class PairedRatings:
    """Labels from two raters on the same units, coded against ``levels``
    (whose order is the ordinal order when that matters)."""

    units: tuple[str, ...]
    codes1: np.ndarray
    codes2: np.ndarray
    levels: tuple[str, ...]
    raters: tuple[str, str] = ("rater1", "rater2")

    @classmethod
    def from_labels(cls, labels1, labels2, levels=None, units=None, raters=("rater1", "rater2")):
        """Pairs with a missing label (``None`` or ``""``) on either side are
        dropped."""
        labels1, labels2 = list(labels1), list(labels2)
        if len(labels1) != len(labels2):
            raise DataValidationError("both raters need one label per unit")
        units = [str(u) for u in (units if units is not None else range(len(labels1)))]
        keep = [k for k, (a, b) in enumerate(zip(labels1, labels2)) if a not in (None, "") and b not in (None, "")]
        if levels is None:
            levels = sorted({str(labels1[k]) for k in keep} | {str(labels2[k]) for k in keep})
        levels = tuple(str(v) for v in levels)
        index = {v: i for i, v in enumerate(levels)}
        try:
            c1 = np.array([index[str(labels1[k])] for k in keep], dtype=np.int64)
            c2 = np.array([index[str(labels2[k])] for k in keep], dtype=np.int64)
        except KeyError as e:
            raise DataValidationError(f"label {e.args[0]!r} not among levels {levels}") from None
        return cls(tuple(units[k] for k in keep), c1, c2, levels, tuple(raters))

    @property
    def n_units(self) -> int:
        return int(self.codes1.size)


def load_ratings(path, levels: dict | None = None) -> dict[str, PairedRatings]:
    """Read ``unit,rater,variable,label`` rows into one :class:`PairedRatings`
    per variable. Each variable must involve exactly two raters."""
    table = defaultdict(dict)
    raters = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"unit", "rater", "variable", "label"} - set(reader.fieldnames or ())
        if missing:
            raise DataValidationError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            var, rater = row["variable"], row["rater"]
            if rater not in raters[var]:
                raters[var].append(rater)
            table[var][(row["unit"], rater)] = row["label"]
    out = {}
    for var, rs in raters.items():
        if len(rs) != 2:
            raise DataValidationError(f"variable {var!r} has raters {rs}; exactly two are needed")
        units = sorted({u for u, _ in table[var]})
        l1 = [table[var].get((u, rs[0])) for u in units]
        l2 = [table[var].get((u, rs[1])) for u in units]
        lv = (levels or {}).get(var)
        out[var] = PairedRatings.from_labels(l1, l2, lv, units, tuple(rs))
    return out


def load_matrix(path) -> AgreementMatrix:
    """Pre-tabulated matrix: header ``,level1,level2,...`` then one row per
    rater-1 level."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 3:
        raise DataValidationError(f"{path}: need a header and at least two rows")
    levels = tuple(rows[0][1:])
    if tuple(r[0] for r in rows[1:]) != levels:
        raise DataValidationError(f"{path}: row labels must match column labels in order")
    try:
        A = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    except ValueError as e:
        raise DataValidationError(f"{path}: {e}") from None
    return AgreementMatrix(A, levels)


def write_matrix(matrix: np.ndarray, levels, path, fmt=repr) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(levels))
        for name, row in zip(levels, np.asarray(matrix)):
            w.writerow([name] + [fmt(float(x)) for x in row])


# -- Krippendorff's alpha ------------------------------------------------------

def _distance(L: int, level: str) -> np.ndarray:
    ranks = np.arange(L, dtype=float)
    if level == NOMINAL:
        return 1.0 - np.eye(L)
    if level == ORDINAL:
        # squared distance between category ranks
        return (ranks[:, None] - ranks[None, :]) ** 2
    raise DataValidationError(f"unknown measurement level {level!r}; use nominal or ordinal")


def alpha_from_matrix(A, level: str = NOMINAL) -> float:
    """Alpha from a two-rater pair-count matrix.

    Every unit contributes one ordered pair in each direction to the
    coincidence matrix ``o = A + A.T``.
    """
    A = np.asarray(A, dtype=float)
    o = A + A.T
    n = o.sum()
    if n < 4:
        raise DataValidationError("need at least 2 units with both labels present")
    nc = o.sum(axis=1)
    d = _distance(A.shape[0], level)
    observed = float(np.sum(o * d))
    expected = float(nc @ d @ nc)
    if expected <= 0:
        warnings.warn("no expected disagreement (a single label used); alpha set to 1",
                      RuntimeWarning, stacklevel=2)
        return 1.0
    return float(1.0 - (n - 1.0) * observed / expected)


def krippendorff_alpha(ratings, level: str = NOMINAL) -> float:
    """Krippendorff's alpha for :class:`PairedRatings`, an
    :class:`AgreementMatrix` or a raw square count matrix."""
    if isinstance(ratings, PairedRatings):
        ratings = AgreementMatrix.from_pairs(ratings).counts
    elif isinstance(ratings, AgreementMatrix):
        ratings = ratings.counts
    return alpha_from_matrix(ratings, level)


@dataclass(frozen=True)
class BootstrapSummary:
    alpha: float
    draws: np.ndarray
    q05: float
    q50: float
    q95: float

    @property
    def mean(self) -> float:
        return float(self.draws.mean())


def bootstrap_alpha(ratings, B: int = 1000, rng=None, level: str = NOMINAL) -> BootstrapSummary:
    """Resample units with replacement ``B`` times and recompute alpha."""
    if B < 1:
        raise DataValidationError("need at least one bootstrap resample")
    rng = np.random.default_rng(rng)
    if isinstance(ratings, PairedRatings):
        L = len(ratings.levels)
        cells = ratings.codes1 * L + ratings.codes2
    else:
        A = ratings.counts if isinstance(ratings, AgreementMatrix) else np.asarray(ratings, dtype=np.int64)
        L = A.shape[0]
        cells = np.repeat(np.arange(L * L), A.ravel())
    n = cells.size
    point = alpha_from_matrix(np.bincount(cells, minlength=L * L).reshape(L, L), level)
    draws = np.empty(B)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for b in range(B):
            pick = cells[rng.integers(0, n, size=n)]
            draws[b] = alpha_from_matrix(np.bincount(pick, minlength=L * L).reshape(L, L), level)
    q = np.percentile(draws, [5, 50, 95])
    return BootstrapSummary(point, draws, float(q[0]), float(q[1]), float(q[2]))


# -- latent agreement network --------------------------------------------------

@dataclass(frozen=True)
class NetworkConfig:
    """Sampler settings. ``fixed_r`` pins the premium (``0`` removes any
    information about ``B``)."""

    chains: int = 4
    iterations: int = 1500
    warmup: int = 1000
    thin: int = 1
    seed: int = 0
    r_rate: float = 0.01
    beta0_sd: float = 10.0
    sigma_max: float = 5.0
    fixed_r: float | None = None
    min_accept: float = 0.05

    def __post_init__(self):
        if self.chains < 1 or self.thin < 1:
            raise DataValidationError("chains and thin must be >= 1")
        if not 0 <= self.warmup < self.iterations:
            raise DataValidationError("need 0 <= warmup < iterations")
        if self.r_rate <= 0 or self.beta0_sd <= 0 or self.sigma_max <= 0:
            raise DataValidationError("prior parameters must be positive")
        if self.fixed_r is not None and self.fixed_r < 0:
            raise DataValidationError("fixed_r must be nonnegative")


@dataclass(frozen=True, eq=False)
class NetworkPosterior:
    """Retained draws stacked over chains (draw axis first)."""

    beta0: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    sigma1: np.ndarray
    sigma2: np.ndarray
    r: np.ndarray
    pi: np.ndarray
    B: np.ndarray
    levels: tuple[str, ...]
    acceptance: dict
    converged: bool

    @property
    def n_draws(self) -> int:
        return int(self.B.shape[0])


def posterior_incidence(post) -> np.ndarray:
    """Monte Carlo mean of the incidence draws, ``B_bar[i, j]``."""
    B = post.B if isinstance(post, NetworkPosterior) else np.asarray(post)
    return B.mean(axis=0)


def _loglik_rows(A, logmu):
    """Poisson log-likelihood without the ``log A!`` constant."""
    return A * logmu - np.exp(logmu)


class _Step:
    """Random-walk proposal scale adapted towards a target acceptance."""

    def __init__(self, scale, target=0.44):
        self.log_scale = math.log(scale)
        self.target = target
        self.tries = 0
        self.accepts = 0

    @property
    def scale(self):
        return math.exp(self.log_scale)

    def record(self, accepted, tries, adapt, it):
        if adapt:
            rate = accepted / tries
            self.log_scale += (rate - self.target) / math.sqrt(it + 1.0)
        else:
            self.accepts += accepted
            self.tries += tries


def _network_chain(A, cfg: NetworkConfig, chain: int):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, chain])))
    L1, L2 = A.shape
    b0 = math.log(max(A.mean(), 0.5))
    b1 = np.zeros(L1)
    b2 = np.zeros(L2)
    s1 = s2 = 1.0
    r = 1.0 if cfg.fixed_r is None else cfg.fixed_r
    pi = np.full(A.shape, 0.5)
    B = (rng.uniform(size=A.shape) < 0.5).astype(np.int64)
    steps = {k: _Step(v) for k, v in (("beta0", 0.1), ("beta1", 0.2), ("beta2", 0.2),
                                       ("sigma1", 0.5), ("sigma2", 0.5), ("log_r", 0.3))}
    n_keep = math.ceil((cfg.iterations - cfg.warmup) / cfg.thin)
    out = {"beta0": np.empty(n_keep), "beta1": np.empty((n_keep, L1)), "beta2": np.empty((n_keep, L2)),
           "sigma1": np.empty(n_keep), "sigma2": np.empty(n_keep), "r": np.empty(n_keep),
           "pi": np.empty((n_keep,) + A.shape), "B": np.empty((n_keep,) + A.shape, dtype=np.int8)}

    def logmu(b0, b1, b2, r, B):
        return b0 + b1[:, None] + b2[None, :] + np.log1p(r * B)

    def normal_lp(x, sd):
        return float(-0.5 * np.sum((x / sd) ** 2) - x.size * math.log(sd))

    keep = 0
    for it in range(cfg.iterations):
        adapt = it < cfg.warmup
        # incidence and link probabilities
        eta = b0 + b1[:, None] + b2[None, :]
        logit_b = np.log(pi) - np.log1p(-pi) + A * math.log1p(r) - r * np.exp(eta)
        B = (rng.uniform(size=A.shape) < expit(logit_b)).astype(np.int64)
        pi = rng.beta(0.5 + B, 1.5 - B)
        pi = np.clip(pi, 1e-300, 1.0 - 1e-16)
        cur = _loglik_rows(A, logmu(b0, b1, b2, r, B))

        # global abundance
        st = steps["beta0"]
        prop = b0 + st.scale * rng.normal()
        new = _loglik_rows(A, logmu(prop, b1, b2, r, B))
        log_ratio = new.sum() - cur.sum() - 0.5 * (prop ** 2 - b0 ** 2) / cfg.beta0_sd ** 2
        ok = math.log(rng.uniform()) < log_ratio
        if ok:
            b0, cur = prop, new
        st.record(int(ok), 1, adapt, it)

        # row and column propensities, accepted independently
        for name, axis in (("beta1", 1), ("beta2", 0)):
            st = steps[name]
            vec, sd = (b1, s1) if name == "beta1" else (b2, s2)
            prop = vec + st.scale * rng.normal(size=vec.size)
            pb1, pb2 = (prop, b2) if name == "beta1" else (b1, prop)
            new = _loglik_rows(A, logmu(b0, pb1, pb2, r, B))
            log_ratio = new.sum(axis=axis) - cur.sum(axis=axis) - 0.5 * (prop ** 2 - vec ** 2) / sd ** 2
            acc = np.log(rng.uniform(size=vec.size)) < log_ratio
            vec = np.where(acc, prop, vec)
            if name == "beta1":
                b1 = vec
                cur = np.where(acc[:, None], new, cur)
            else:
                b2 = vec
                cur = np.where(acc[None, :], new, cur)
            st.record(int(acc.sum()), vec.size, adapt, it)

        # scales: uniform prior on (0, sigma_max), proposals outside are rejected
        for name in ("sigma1", "sigma2"):
            st = steps[name]
            s, vec = (s1, b1) if name == "sigma1" else (s2, b2)
            prop = s + st.scale * rng.normal()
            ok = False
            if 0.0 < prop < cfg.sigma_max:
                ok = math.log(rng.uniform()) < normal_lp(vec, prop) - normal_lp(vec, s)
            if ok:
                s = prop
            if name == "sigma1":
                s1 = s
            else:
                s2 = s
            st.record(int(ok), 1, adapt, it)

        # premium on the log scale (Jacobian r)
        if cfg.fixed_r is None:
            st = steps["log_r"]
            lr = math.log(r)
            plr = lr + st.scale * rng.normal()
            pr = math.exp(plr)
            new = _loglik_rows(A, logmu(b0, b1, b2, pr, B))
            log_ratio = new.sum() - cur.sum() - cfg.r_rate * (pr - r) + (plr - lr)
            ok = math.log(rng.uniform()) < log_ratio
            if ok:
                r, cur = pr, new
            st.record(int(ok), 1, adapt, it)

        if not adapt and (it - cfg.warmup) % cfg.thin == 0:
            out["beta0"][keep] = b0
            out["beta1"][keep] = b1
            out["beta2"][keep] = b2
            out["sigma1"][keep] = s1
            out["sigma2"][keep] = s2
            out["r"][keep] = r
            out["pi"][keep] = pi
            out["B"][keep] = B
            keep += 1
    rates = {k: (s.accepts / s.tries if s.tries else float("nan")) for k, s in steps.items()}
    if cfg.fixed_r is not None:
        rates.pop("log_r")
    return out, rates


def fit_agreement_network(A, cfg: NetworkConfig | None = None, levels=None) -> NetworkPosterior:
    """Gibbs-within-Metropolis sampler for the latent agreement network.

    ``converged`` is False (with a warning) when any block's post-warmup
    acceptance rate drops below ``cfg.min_accept``.
    """
    cfg = cfg or NetworkConfig()
    if isinstance(A, AgreementMatrix):
        levels = A.levels
        A = A.counts
    else:
        A = AgreementMatrix(np.asarray(A), tuple(levels or (str(i + 1) for i in range(np.shape(A)[0])))).counts
    levels = tuple(levels or (str(i + 1) for i in range(A.shape[0])))
    Af = A.astype(float)
    parts = [_network_chain(Af, cfg, c) for c in range(cfg.chains)]
    draws = {k: np.concatenate([p[0][k] for p in parts]) for k in parts[0][0]}
    acceptance = {k: [p[1][k] for p in parts] for k in parts[0][1]}
    low = sorted(k for k, v in acceptance.items() if min(v) < cfg.min_accept)
    if low:
        warnings.warn(f"acceptance collapsed for {', '.join(low)}; treat the fit as non-convergent",
                      RuntimeWarning, stacklevel=2)
    return NetworkPosterior(draws["beta0"], draws["beta1"], draws["beta2"], draws["sigma1"],
                            draws["sigma2"], draws["r"], draws["pi"], draws["B"].astype(np.int64),
                            levels, acceptance, not low)


def simulate_network_counts(L: int, rng, r: float = 5.0, link_prob: float = 0.3,
                            beta0: float = math.log(20.0), effect_sd: float = 0.5):
    """Draw ``(A, B)`` from the network model with known parameters."""
    rng = np.random.default_rng(rng)
    b1 = rng.normal(0.0, effect_sd, L)
    b2 = rng.normal(0.0, effect_sd, L)
    B = (rng.uniform(size=(L, L)) < link_prob).astype(np.int64)
    mu = np.exp(beta0 + b1[:, None] + b2[None, :] + np.log1p(r * B))
    return rng.poisson(mu), B

