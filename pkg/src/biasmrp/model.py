"""
Structured logistic / multinomial-logit models for MrP.

A :class:`ModelSpec` declares the likelihood and the prior components; it
induces a flat unconstrained parameter vector with a named block index
(:class:`ParameterLayout`). :class:`PosteriorModel` evaluates the joint
log-posterior and its analytic gradient on compressed data, where rows with
identical design are merged into binomial / multinomial counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from . import priors
from .errors import DataValidationError, NonFiniteError
from .priors import BYM2, RANDOM_WALK, UNSTRUCTURED, PriorComponent

try:
    from . import _kernels
    COMPILED = True
except ImportError:  # numba missing; the numpy path still works
    _kernels = None
    COMPILED = False

BERNOULLI = "bernoulli"
MULTINOMIAL = "multinomial"

ALPHA_SD = 10.0
BETA_SD = 1.0


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model layout.

    For a Bernoulli model ``choice`` is the 0-based modeled option; for a
    multinomial model the last choice is the reference category and one
    parameter block is created for every other choice.
    """

    likelihood: str
    choices: tuple[str, ...]
    components: tuple[PriorComponent, ...]
    fixed_names: tuple[str, ...] = ()
    choice: int | None = None
    offset: float = 0.0
    structured: bool = True
    alpha_sd: float = ALPHA_SD
    beta_sd: float = BETA_SD

    def __post_init__(self):
        if self.likelihood not in (BERNOULLI, MULTINOMIAL):
            raise DataValidationError(f"unknown likelihood {self.likelihood!r}")
        if self.likelihood == BERNOULLI:
            if self.choice is None or not 0 <= self.choice < len(self.choices):
                raise DataValidationError("Bernoulli model needs a valid choice index")
        else:
            if self.choice is not None:
                raise DataValidationError("multinomial model models all choices; choice must be None")
            if self.offset != 0.0:
                raise DataValidationError(
                    "bias-correction offsets are only defined for Bernoulli models")
        if not math.isfinite(self.offset):
            raise DataValidationError("offset must be finite")
        names = [c.attribute for c in self.components]
        if len(set(names)) != len(names):
            raise DataValidationError("one prior component per attribute")

    @property
    def n_fixed(self) -> int:
        return len(self.fixed_names)

    @property
    def n_blocks(self) -> int:
        """Number of linear predictors carrying parameters."""
        return 1 if self.likelihood == BERNOULLI else len(self.choices) - 1

    @property
    def block_labels(self) -> tuple[str, ...]:
        if self.likelihood == BERNOULLI:
            return (self.choices[self.choice],)
        return self.choices[:-1]

    @property
    def attributes(self) -> tuple[str, ...]:
        return tuple(c.attribute for c in self.components)

    def to_dict(self) -> dict:
        return {
            "likelihood": self.likelihood,
            "choices": list(self.choices),
            "choice": self.choice,
            "offset": self.offset,
            "structured": self.structured,
            "fixed_names": list(self.fixed_names),
            "alpha_sd": self.alpha_sd,
            "beta_sd": self.beta_sd,
            "components": [
                {"attribute": c.attribute, "kind": c.kind, "levels": c.levels,
                 "tightness": c.tightness,
                 "edges": c.graph.edges.tolist() if c.graph is not None else None}
                for c in self.components
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        from .frame import AdjacencyGraph

        comps = []
        for c in d["components"]:
            graph = None
            if c.get("edges") is not None:
                graph = AdjacencyGraph(int(c["levels"]), np.array(c["edges"], dtype=np.int64))
            comps.append(PriorComponent(c["attribute"], c["kind"], int(c["levels"]), graph,
                                        tightness=float(c.get("tightness", 0.01))))
        return cls(likelihood=d["likelihood"], choices=tuple(d["choices"]),
                   components=tuple(comps), fixed_names=tuple(d.get("fixed_names", ())),
                   choice=d.get("choice"), offset=float(d.get("offset", 0.0)),
                   structured=bool(d.get("structured", True)),
                   alpha_sd=float(d.get("alpha_sd", ALPHA_SD)),
                   beta_sd=float(d.get("beta_sd", BETA_SD)))


def unstructured_variant(spec: ModelSpec) -> ModelSpec:
    """Replace random-walk and BYM2 components with plain shared-variance
    random intercepts of the same cardinality."""
    return replace(spec, components=tuple(c.unstructured() for c in spec.components),
                   structured=False)


@dataclass(frozen=True)
class ParameterLayout:
    """Named contiguous blocks partitioning the unconstrained parameter vector."""

    blocks: tuple[tuple[str, int, int], ...]

    @classmethod
    def from_spec(cls, spec: ModelSpec) -> "ParameterLayout":
        blocks = []
        pos = 0

        def add(name, size):
            nonlocal pos
            blocks.append((name, pos, pos + size))
            pos += size

        multi = spec.likelihood == MULTINOMIAL
        for label in spec.block_labels:
            p = f"{label}:" if multi else ""
            add(p + "alpha", 1)
            add(p + "beta", spec.n_fixed)
            for c in spec.components:
                a = p + c.attribute
                if c.kind == BYM2:
                    add(a + ".phi", c.levels)
                    add(a + ".psi", c.levels)
                    add(a + ".logit_xi", 1)
                else:
                    add(a + ".z", c.levels)
                add(a + ".log_scale", 1)
        return cls(tuple(blocks))

    @property
    def size(self) -> int:
        return self.blocks[-1][2] if self.blocks else 0

    def slice(self, name: str) -> slice:
        for n, a, b in self.blocks:
            if n == name:
                return slice(a, b)
        raise KeyError(name)

    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _, _ in self.blocks)

    def scalar_names(self) -> list[str]:
        out = []
        for n, a, b in self.blocks:
            if b - a == 1:
                out.append(n)
            else:
                out.extend(f"{n}[{i + 1}]" for i in range(b - a))
        return out

    def as_dict(self) -> dict[str, list[int]]:
        return {n: [a, b] for n, a, b in self.blocks}


@dataclass(frozen=True)
class Standardizer:
    """Column centering/scaling fitted on training rows and frozen for prediction."""

    means: np.ndarray
    sds: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        if X.shape[1] == 0:
            return cls(np.zeros(0), np.ones(0))
        means = X.mean(axis=0)
        sds = X.std(axis=0)
        sds = np.where(sds > 1e-12, sds, 1.0)
        return cls(means, sds)

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.means) / self.sds

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "sds": self.sds.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.asarray(d["means"], dtype=float), np.asarray(d["sds"], dtype=float))


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Rows of 0-based level ids (columns aligned to ``spec.components``) and
    standardized continuous covariates ``X``."""

    levels: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=np.int64)
        X = np.asarray(self.X, dtype=float)
        if lv.ndim != 2 or X.ndim != 2 or lv.shape[0] != X.shape[0]:
            raise DataValidationError("design levels and X must be 2-D with equal rows")
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.levels.shape[0]


@dataclass(frozen=True, eq=False)
class ModelData:
    """Compressed training data: unique design rows with outcome counts.

    ``counts`` is (rows x J): the number of respondents in each row choosing
    each option.
    """

    design: DesignMatrix
    counts: np.ndarray

    @classmethod
    def from_rows(cls, design: DesignMatrix, choice, n_choices: int) -> "ModelData":
        choice = np.asarray(choice, dtype=np.int64)
        key = np.hstack([design.levels.astype(float), design.X])
        uniq, inverse = np.unique(key, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        counts = np.zeros((uniq.shape[0], n_choices))
        np.add.at(counts, (inverse, choice), 1.0)
        nl = design.levels.shape[1]
        d = DesignMatrix(uniq[:, :nl].astype(np.int64), uniq[:, nl:])
        return cls(d, counts)

    @property
    def trials(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def _sparse_design(design: DesignMatrix, goff) -> sparse.csr_matrix:
    """``[1 | X | one-hot levels]`` so that ``eta = W @ [alpha, beta, gammas]``."""
    n, P = design.X.shape
    C = design.levels.shape[1]
    rows = np.repeat(np.arange(n), 1 + P + C)
    cols = np.hstack([np.zeros((n, 1), dtype=np.int64),
                      np.broadcast_to(np.arange(1, 1 + P), (n, P)),
                      design.levels + (1 + P + goff[:-1])[None, :]]).ravel()
    vals = np.hstack([np.ones((n, 1)), design.X, np.ones((n, C))]).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, 1 + P + int(goff[-1])))


def _check_conformance(spec: ModelSpec, design: DesignMatrix):
    if design.levels.shape[1] != len(spec.components):
        raise DataValidationError(
            f"design has {design.levels.shape[1]} attribute columns, spec has {len(spec.components)}")
    if design.X.shape[1] != spec.n_fixed:
        raise DataValidationError(
            f"design has {design.X.shape[1]} covariates, spec has {spec.n_fixed}")
    for k, c in enumerate(spec.components):
        col = design.levels[:, k]
        if col.size and (col.min() < 0 or col.max() >= c.levels):
            raise DataValidationError(f"attribute {c.attribute!r}: level outside 0..{c.levels - 1}")


@dataclass
class BlockEffects:
    """Constrained effects of one linear predictor."""

    alpha: float
    beta: np.ndarray
    gammas: list[np.ndarray]
    scales: list[float]
    xis: list[float | None]


class PosteriorModel:
    """Joint log-posterior of a :class:`ModelSpec` on :class:`ModelData`.

    Instances are immutable after construction and safe to evaluate from
    several threads or to ship to worker processes.
    """

    def __init__(self, spec: ModelSpec, data: ModelData | None = None):
        self.spec = spec
        self.layout = ParameterLayout.from_spec(spec)
        self.data = data
        self._sl = {n: slice(a, b) for n, a, b in self.layout.blocks}
        self._plan = []
        for b in range(spec.n_blocks):
            p = self._prefix(b)
            comps = []
            for k, c in enumerate(spec.components):
                a = p + c.attribute
                if c.kind == BYM2:
                    main = (self._sl[a + ".phi"], self._sl[a + ".psi"], self._sl[a + ".logit_xi"].start)
                else:
                    main = (self._sl[a + ".z"],)
                P, const = c.gaussian_prior()
                comps.append((k, c, a, self._sl[a + ".log_scale"].start, main, P, const))
            self._plan.append((p, self._sl[p + "alpha"].start, self._sl[p + "beta"], comps))
        # effects of all components are concatenated; level k of component c
        # sits at _goff[c] + k
        sizes = [c.levels for c in spec.components]
        self._goff = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        if data is not None:
            _check_conformance(spec, data.design)
            if data.counts.shape[1] != len(spec.choices):
                raise DataValidationError("outcome counts do not match the choice set")
            self._X = data.design.X
            self._W = _sparse_design(data.design, self._goff)
            self._WT = self._W.T.tocsr()
            self._counts = data.counts
            self._trials = data.counts.sum(axis=1)

    @property
    def dim(self) -> int:
        return self.layout.size

    def _prefix(self, b: int) -> str:
        return f"{self.spec.block_labels[b]}:" if self.spec.likelihood == MULTINOMIAL else ""

    # -- effects ---------------------------------------------------------
    def effects(self, theta, b: int = 0) -> BlockEffects:
        theta = np.asarray(theta, dtype=float)
        p, ia, sb, comps = self._plan[b]
        gammas, scales, xis = [], [], []
        for k, c, a, iu, main, _, _ in comps:
            s = math.exp(theta[iu])
            if c.kind == BYM2:
                xi, _, _ = priors.logit_xi_transform(theta[main[2]])
                g = priors.bym2_convolve(theta[main[0]], theta[main[1]], xi, s, c.scaling)
                xis.append(xi)
            else:
                g = s * theta[main[0]]
                xis.append(None)
            gammas.append(g)
            scales.append(s)
        return BlockEffects(float(theta[ia]), theta[sb], gammas, scales, xis)

    def linear_predictor(self, theta, design: DesignMatrix | None = None,
                         offset: float | None = None) -> np.ndarray:
        """Linear predictor(s): shape (n,) for Bernoulli, (n, J-1) for multinomial.

        ``offset`` defaults to the ModelSpec offset; pass 0 to predict for a
        representative sampling protocol.
        """
        design = self.data.design if design is None else design
        _check_conformance(self.spec, design)
        off = self.spec.offset if offset is None else offset
        out = []
        for b in range(self.spec.n_blocks):
            e = self.effects(theta, b)
            mu = off + e.alpha + design.X @ e.beta
            for k, g in enumerate(e.gammas):
                mu = mu + g[design.levels[:, k]]
            out.append(mu)
        return out[0] if self.spec.likelihood == BERNOULLI else np.column_stack(out)

    # -- density ---------------------------------------------------------
    def log_prob(self, theta) -> float:
        return self.log_prob_and_grad(theta, need_grad=False)[0]

    def grad(self, theta) -> np.ndarray:
        return self.log_prob_and_grad(theta)[1]

    def __call__(self, theta):
        return self.log_prob_and_grad(theta)

    def _packed(self):
        packed = getattr(self, "_pack", None)
        if packed is None:
            packed = self._pack = self._pack_arrays()
        return packed

    def _pack_arrays(self):
        spec = self.spec
        i64 = np.int64
        kinds = {UNSTRUCTURED: _kernels.KIND_UNSTRUCTURED, RANDOM_WALK: _kernels.KIND_RANDOM_WALK,
                 BYM2: _kernels.KIND_BYM2}
        comps0 = self._plan[0][3]
        C = len(comps0)
        kind = np.array([kinds[c.kind] for _, c, *_ in comps0], dtype=i64)
        levels = np.array([c.levels for _, c, *_ in comps0], dtype=i64)
        Ps = [np.ascontiguousarray(P, dtype=float).ravel() for *_, P, _ in comps0]
        P_off = np.concatenate([[0], np.cumsum([p.size for p in Ps])]).astype(i64)
        P_flat = np.concatenate(Ps) if Ps else np.zeros(0)
        consts = np.array([const for *_, const in comps0], dtype=float)
        G = int(self._goff[-1])
        island, mainland, mis = np.zeros(G), np.zeros(G), np.zeros(G)
        for k, c, *_ in comps0:
            if c.kind == BYM2:
                sl = slice(self._goff[k], self._goff[k + 1])
                island[sl] = c.scaling.island_mask
                mainland[sl] = c.scaling.mainland
                mis[sl] = c.scaling.mainland_inv_sqrt
        m0, m1, mx, ms = (np.zeros(len(self._plan) * C, dtype=i64) for _ in range(4))
        for b, (_, _, _, comps) in enumerate(self._plan):
            for k, c, a, iu, main, _, _ in comps:
                j = b * C + k
                m0[j] = main[0].start
                if c.kind == BYM2:
                    m1[j], mx[j] = main[1].start, main[2]
                ms[j] = iu
        blk_alpha = np.array([ia for _, ia, _, _ in self._plan], dtype=i64)
        blk_beta = np.array([sb.start for _, _, sb, _ in self._plan], dtype=i64)
        if self.data is not None:
            W, WT = self._W, self._WT
            data = (W.indptr.astype(i64), W.indices.astype(i64), W.data.astype(float),
                    WT.indptr.astype(i64), WT.indices.astype(i64), WT.data.astype(float),
                    np.ascontiguousarray(self._counts, dtype=float), self._trials.astype(float))
        else:
            z, zf = np.zeros(1, dtype=i64), np.zeros(0)
            data = (z, z[:0], zf, z, z[:0], zf, np.zeros((0, len(spec.choices))), zf)
        lik = _kernels.LIK_BERNOULLI if spec.likelihood == BERNOULLI else _kernels.LIK_MULTINOMIAL
        choice = -1 if spec.choice is None else int(spec.choice)
        head = (lik, choice, float(spec.offset), float(spec.alpha_sd), float(spec.beta_sd),
                blk_alpha, blk_beta, int(spec.n_fixed), kind, levels, m0, m1, mx, ms,
                P_flat, P_off, consts, island, mainland, mis, self._goff)
        return head + data

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_pack", None)
        return state

    def log_prob_and_grad(self, theta, need_grad: bool = True):
        """Log-posterior and, optionally, its gradient.

        Uses the compiled kernel when numba is available. A non-finite result
        is re-evaluated on the reference path so the error names the block.
        """
        if not COMPILED:
            return self.reference_log_prob_and_grad(theta, need_grad)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DataValidationError(f"parameter vector has length {theta.size}, expected {self.dim}")
        lp, g = _kernels.log_prob_grad(theta, need_grad, *self._packed())
        if not math.isfinite(lp) or (need_grad and not np.all(np.isfinite(g))):
            return self.reference_log_prob_and_grad(theta, need_grad)
        return lp, (g if need_grad else None)

    def reference_log_prob_and_grad(self, theta, need_grad: bool = True):
        """Pure numpy evaluation; the oracle for the compiled kernel."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DataValidationError(f"parameter vector has length {theta.size}, expected {self.dim}")
        spec = self.spec
        has_data = self.data is not None
        grad = np.zeros(self.dim)
        parts = []
        etas = []
        cache = []
        for p, ia, sb, comps in self._plan:
            alpha = theta[ia]
            beta = theta[sb]
            parts.append((p + "alpha", -0.5 * (alpha / spec.alpha_sd) ** 2
                          - math.log(spec.alpha_sd) - 0.5 * priors.LOG_2PI))
            grad[ia] -= alpha / spec.alpha_sd ** 2
            v, g = priors.iid_normal_logdensity(beta, spec.beta_sd)
            parts.append((p + "beta", v))
            grad[sb] += g
            gammas = []
            comp_cache = []
            for k, c, a, iu, main, P, const in comps:
                s, lps, dlps = priors.log_scale_transform(theta[iu])
                grad[iu] += dlps
                if c.kind == BYM2:
                    sphi, spsi, ix = main
                    phi, psi = theta[sphi], theta[spsi]
                    xi, lpx, dlpx = priors.logit_xi_transform(theta[ix])
                    Ppsi = P @ psi
                    grad[sphi] -= phi
                    grad[spsi] -= Ppsi
                    grad[ix] += dlpx
                    parts.append((a, lps + lpx - 0.5 * float(phi @ phi) - 0.5 * priors.LOG_2PI * phi.size
                                  - 0.5 * float(psi @ Ppsi) + const))
                    gamma = priors.bym2_convolve(phi, psi, xi, s, c.scaling)
                    comp_cache.append((s, (phi, psi, xi)))
                else:
                    z = theta[main[0]]
                    Pz = P @ z
                    grad[main[0]] -= Pz
                    parts.append((a, lps - 0.5 * float(z @ Pz) + const))
                    gamma = s * z
                    comp_cache.append((s, z))
                gammas.append(gamma)
            if has_data:
                coef = np.concatenate([theta[ia:ia + 1], beta] + gammas)
                etas.append(spec.offset + self._W @ coef)
            cache.append(comp_cache)

        if has_data:
            if spec.likelihood == BERNOULLI:
                eta = etas[0]
                succ = self._counts[:, spec.choice]
                # softplus and sigmoid share one exp(-|eta|)
                ex = np.exp(-np.abs(eta))
                softplus = np.maximum(eta, 0.0) + np.log1p(ex)
                ll = float(succ @ eta - self._trials @ softplus)
                if need_grad:
                    inv1p = 1.0 / (1.0 + ex)
                    sig = 0.5 + np.copysign(inv1p - 0.5, eta)
                    resid = [succ - self._trials * sig]
            else:
                E = np.column_stack(etas + [np.zeros_like(etas[0])])
                lse = logsumexp(E, axis=1)
                ll = float(np.sum(self._counts * E) - self._trials @ lse)
                if need_grad:
                    Pr = np.exp(E - lse[:, None])
                    R = self._counts - self._trials[:, None] * Pr
                    resid = [R[:, b] for b in range(spec.n_blocks)]
            parts.append(("likelihood", ll))
        total = math.fsum(v for _, v in parts)
        if not math.isfinite(total):
            bad = next((n for n, v in parts if not math.isfinite(v)), "likelihood")
            raise NonFiniteError(bad)
        if not need_grad:
            return total, None

        if has_data:
            nf = 1 + spec.n_fixed
            goff = self._goff + nf
            for (p, ia, sb, comps), r, comp_cache in zip(self._plan, resid, cache):
                dcoef = self._WT @ r
                grad[ia] += dcoef[0]
                grad[sb] += dcoef[1:nf]
                for (k, c, a, iu, main, P, const), (s, st) in zip(comps, comp_cache):
                    dgamma = dcoef[goff[k]:goff[k + 1]]
                    if c.kind == BYM2:
                        phi, psi, xi = st
                        dphi, dpsi, dv, ds = priors.bym2_convolve_grad(
                            dgamma, phi, psi, xi, s, c.scaling, wrt_logit=True)
                        grad[main[0]] += dphi
                        grad[main[1]] += dpsi
                        grad[main[2]] += dv
                    else:
                        grad[main[0]] += s * dgamma
                        ds = float(dgamma @ st)
                    grad[iu] += ds * s
        if not math.isfinite(float(grad.sum())):
            raise NonFiniteError("gradient")
        return total, grad

    def initial_point(self, rng, sd: float = 0.1) -> np.ndarray:
        return rng.normal(0.0, sd, size=self.dim)

    def preconditioner(self) -> np.ndarray:
        """Fixed linear map ``theta = A @ eta`` whitening the Gaussian prior
        precision of every standardized effect vector.

        Random-walk and ICAR vectors carry a tight soft sum-to-zero term, so
        their prior is strongly anisotropic along directions a diagonal
        metric cannot capture. Sampling ``eta`` instead of ``theta`` leaves
        the posterior unchanged (the Jacobian is constant).
        """
        A = np.eye(self.dim)
        for p, ia, sb, comps in self._plan:
            for k, c, a, iu, main, P, const in comps:
                if c.kind == UNSTRUCTURED:
                    continue
                sl = main[1] if c.kind == BYM2 else main[0]
                lam, V = np.linalg.eigh(P)
                A[sl, sl] = (V / np.sqrt(lam)) @ V.T
        return A


def log_posterior(theta, model: PosteriorModel) -> float:
    return model.log_prob(theta)


def grad_log_posterior(theta, model: PosteriorModel) -> np.ndarray:
    return model.grad(theta)


def linear_predictor(theta, model: PosteriorModel, design: DesignMatrix | None = None,
                     offset: float | None = None) -> np.ndarray:
    return model.linear_predictor(theta, design, offset)


def default_components(schema, graph=None, attributes=None,
                       structured: bool = True) -> tuple[PriorComponent, ...]:
    """One prior component per modeled attribute: BYM2 for the area attribute
    (when a graph is given), random walks for ordinal attributes and shared
    variance intercepts for the rest."""
    attributes = schema.names if attributes is None else attributes
    comps = []
    for name in attributes:
        a = schema.attribute(name)
        if structured and name == schema.area and graph is not None:
            comps.append(PriorComponent(name, BYM2, a.cardinality, graph))
        elif structured and a.ordinal:
            comps.append(PriorComponent(name, RANDOM_WALK, a.cardinality))
        else:
            comps.append(PriorComponent(name, UNSTRUCTURED, a.cardinality))
    return tuple(comps)
