"""
No-U-turn Hamiltonian Monte Carlo with windowed warmup adaptation.

Each chain draws from its own counter-based Philox stream keyed by
``(seed, chain)``, so retained draws depend only on the configuration and
never on how chains are scheduled across workers.

Draw files
----------
``save_draws`` writes ``<stem>.csv`` with columns ``chain, iteration`` then
one column per named scalar (``alpha``, ``beta[1]``, ...), and a
``<stem>.json`` sidecar holding the block index (``name -> [start, stop)``
into the scalar columns), the sampler configuration and per-chain
step sizes and divergence counts.
"""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.covariance import ledoit_wolf

from .errors import DataValidationError, NonFiniteError, NumericalError

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 8
    iterations: int = 500
    warmup: int = 250
    thin: int = 4
    target_accept: float = 0.8
    max_depth: int = 8
    seed: int = 0
    init_sd: float = 0.1
    metric: str = "diag"
    workers: int = 1

    def __post_init__(self):
        if self.chains < 1:
            raise DataValidationError("chains must be >= 1")
        if not 0 <= self.warmup < self.iterations:
            raise DataValidationError("warmup must be in [0, iterations)")
        if self.thin < 1:
            raise DataValidationError("thin must be >= 1")
        if not 0 < self.target_accept < 1:
            raise DataValidationError("target_accept must be in (0, 1)")
        if self.max_depth < 1:
            raise DataValidationError("max_depth must be >= 1")
        if self.metric not in ("diag", "dense"):
            raise DataValidationError("metric must be 'diag' or 'dense'")

    @property
    def draws_per_chain(self) -> int:
        return -(-(self.iterations - self.warmup) // self.thin)


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(chain)])))


def _as_target(target):
    return target.log_prob_and_grad if hasattr(target, "log_prob_and_grad") else target


def _evaluate(f, q):
    """``(logp, grad)`` or ``(-inf, None)`` if the target is not finite at ``q``."""
    try:
        lp, g = f(q)
    except NonFiniteError:
        return -math.inf, None
    if not math.isfinite(lp) or not math.isfinite(float(np.sum(g))):
        return -math.inf, None
    return lp, g


def leapfrog(q, p, step: float, grad, mass=None):
    """One leapfrog step for ``H = -log p(q) + p' M^{-1} p / 2``.

    ``grad`` maps a position to the gradient of the log density; ``mass`` is
    the diagonal of ``M`` (identity when omitted).
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    inv = 1.0 if mass is None else 1.0 / np.asarray(mass, dtype=float)
    g0 = np.asarray(grad(q), dtype=float)
    if not np.all(np.isfinite(g0)):
        raise NonFiniteError("gradient")
    ph = p + 0.5 * step * g0
    q1 = q + step * inv * ph
    g1 = np.asarray(grad(q1), dtype=float)
    if not np.all(np.isfinite(g1)):
        raise NonFiniteError("gradient")
    return q1, ph + 0.5 * step * g1


@dataclass
class _Point:
    q: np.ndarray
    p: np.ndarray
    lp: float
    g: np.ndarray


class _Tree:
    __slots__ = ("valid", "edge", "prop", "log_w", "rho", "p_beg", "p_end", "ps_beg", "ps_end")


def _no_uturn(ps_minus, ps_plus, rho) -> bool:
    return float(ps_minus @ rho) > 0 and float(ps_plus @ rho) > 0


class _NUTS:
    """Multinomial NUTS transition with the generalized no-U-turn criterion,
    including the extra checks across subtree boundaries."""

    def __init__(self, f, inv_metric, max_depth):
        self.f = f
        self.inv = inv_metric
        self.max_depth = max_depth

    def _leaf(self, z: _Point, eps, H0, stats):
        ph = z.p + 0.5 * eps * z.g
        q = z.q + eps * self.inv * ph
        lp, g = _evaluate(self.f, q)
        stats["n_leapfrog"] += 1
        t = _Tree()
        if g is None:
            stats["divergent"] = True
            t.valid = False
            return t
        p = ph + 0.5 * eps * g
        h = -lp + 0.5 * float(p @ (self.inv * p))
        if not math.isfinite(h) or h - H0 > DIVERGENCE_THRESHOLD:
            stats["divergent"] = True
            t.valid = False
            return t
        stats["sum_metro"] += min(1.0, math.exp(H0 - h)) if H0 - h < 0 else 1.0
        pt = _Point(q, p, lp, g)
        ps = self.inv * p
        t.valid = True
        t.edge = pt
        t.prop = pt
        t.log_w = H0 - h
        t.rho = p
        t.p_beg = t.p_end = p
        t.ps_beg = t.ps_end = ps
        return t

    def _build(self, depth, z, eps, H0, rng, stats):
        if depth == 0:
            return self._leaf(z, eps, H0, stats)
        left = self._build(depth - 1, z, eps, H0, rng, stats)
        if not left.valid:
            return left
        right = self._build(depth - 1, left.edge, eps, H0, rng, stats)
        if not right.valid:
            return right
        t = _Tree()
        t.log_w = np.logaddexp(left.log_w, right.log_w)
        t.prop = right.prop if rng.uniform() < math.exp(right.log_w - t.log_w) else left.prop
        t.rho = left.rho + right.rho
        t.valid = (_no_uturn(left.ps_beg, right.ps_end, t.rho)
                   and _no_uturn(left.ps_beg, right.ps_beg, left.rho + right.p_beg)
                   and _no_uturn(left.ps_end, right.ps_end, right.rho + left.p_end))
        t.edge = right.edge
        t.p_beg, t.p_end = left.p_beg, right.p_end
        t.ps_beg, t.ps_end = left.ps_beg, right.ps_end
        return t

    def transition(self, z0: _Point, eps, rng):
        p0 = rng.standard_normal(z0.q.size) / np.sqrt(self.inv)
        z0 = _Point(z0.q, p0, z0.lp, z0.g)
        H0 = -z0.lp + 0.5 * float(p0 @ (self.inv * p0))
        stats = {"n_leapfrog": 0, "sum_metro": 0.0, "divergent": False}
        ps0 = self.inv * p0
        # Backward edge (bb), forward edge (ff) of the whole trajectory.
        z_bwd = z0
        z_fwd = z0
        p_bb = p_ff = p0
        ps_bb = ps_ff = ps0
        rho = p0.copy()
        sample = z0
        log_w = 0.0
        depth = 0
        while depth < self.max_depth:
            forward = rng.uniform() > 0.5
            start = z_fwd if forward else z_bwd
            step = eps if forward else -eps
            sub = self._build(depth, start, step, H0, rng, stats)
            if not sub.valid:
                break
            depth += 1
            if sub.log_w > log_w or rng.uniform() < math.exp(sub.log_w - log_w):
                sample = sub.prop
            log_w = np.logaddexp(log_w, sub.log_w)
            if forward:
                z_fwd = sub.edge
                # old tree is the backward half; new subtree the forward half
                rho_b, rho_f = rho, sub.rho
                p_bf, ps_bf = p_ff, ps_ff
                p_fb, ps_fb = sub.p_beg, sub.ps_beg
                p_ff, ps_ff = sub.p_end, sub.ps_end
            else:
                z_bwd = sub.edge
                rho_b, rho_f = sub.rho, rho
                p_fb, ps_fb = p_bb, ps_bb
                p_bf, ps_bf = sub.p_beg, sub.ps_beg
                p_bb, ps_bb = sub.p_end, sub.ps_end
            rho = rho_b + rho_f
            persist = (_no_uturn(ps_bb, ps_ff, rho)
                       and _no_uturn(ps_bb, ps_fb, rho_b + p_fb)
                       and _no_uturn(ps_bf, ps_ff, rho_f + p_bf))
            if not persist:
                break
        accept = stats["sum_metro"] / max(stats["n_leapfrog"], 1)
        return sample, accept, stats["divergent"], depth, stats["n_leapfrog"]


class _DualAveraging:
    def __init__(self, eps, delta, gamma=0.05, t0=10.0, kappa=0.75):
        self.delta, self.gamma, self.t0, self.kappa = delta, gamma, t0, kappa
        self.restart(eps)

    def restart(self, eps):
        self.mu = math.log(10.0 * eps)
        self.s_bar = 0.0
        self.x_bar = 0.0
        self.counter = 0

    def learn(self, accept) -> float:
        self.counter += 1
        accept = min(1.0, accept)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    def final(self) -> float:
        return math.exp(self.x_bar)


def _initial_step(f, z: _Point, inv, rng, eps=1.0) -> float:
    """Double or halve ``eps`` until one leapfrog step's acceptance crosses 0.8."""
    def log_accept(e):
        p = rng.standard_normal(z.q.size) / np.sqrt(inv)
        H0 = -z.lp + 0.5 * float(p @ (inv * p))
        ph = p + 0.5 * e * z.g
        q = z.q + e * inv * ph
        lp, g = _evaluate(f, q)
        if g is None:
            return -math.inf
        p1 = ph + 0.5 * e * g
        return H0 - (-lp + 0.5 * float(p1 @ (inv * p1)))

    direction = 1 if log_accept(eps) > math.log(0.8) else -1
    for _ in range(60):
        eps = eps * 2.0 if direction == 1 else eps / 2.0
        la = log_accept(eps)
        if direction == 1 and not la > math.log(0.8):
            break
        if direction == -1 and la > math.log(0.8):
            break
    return eps


def _warmup_windows(warmup: int) -> tuple[int, int]:
    """Iterations ``[start, stop)`` whose draws estimate the diagonal metric.

    The window covers the second half of warmup minus a terminal buffer used
    to re-tune the step size under the new metric.
    """
    start = warmup // 2
    terminal = min(50, max(warmup // 10, 0))
    return start, max(start, warmup - terminal)


def _regularized_variance(x) -> np.ndarray:
    n = x.shape[0]
    var = x.var(axis=0, ddof=1) if n > 1 else np.ones(x.shape[1])
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


@dataclass
class ChainResult:
    chain: int
    draws: np.ndarray
    iterations: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    divergences: int
    warmup_divergences: int
    mean_accept: float
    mean_depth: float
    n_leapfrog: int


class _Preconditioned:
    """Target in coordinates ``eta`` with ``theta = A @ eta``."""

    def __init__(self, f, A):
        self.f = f
        self.A = A

    def __call__(self, eta):
        lp, g = self.f(self.A @ eta)
        return lp, self.A.T @ g


def _shrunk_cholesky(x) -> np.ndarray:
    """Cholesky factor of a Ledoit-Wolf shrunk covariance of ``x`` (rows are
    draws), shrinking the correlation matrix toward the identity so that
    marginal variances are kept."""
    var = _regularized_variance(x)
    sd = np.sqrt(var)
    z = (x - x.mean(axis=0)) / np.sqrt(x.var(axis=0) + 1e-300)
    R, _ = ledoit_wolf(z, assume_centered=True)
    d = np.sqrt(np.diag(R))
    R = R / np.outer(d, d)
    return np.linalg.cholesky(R * np.outer(sd, sd))


def run_chain(target, dim: int, cfg: SamplerConfig, chain: int, init=None,
              precondition=None) -> ChainResult:
    """One chain. ``precondition`` is an optional invertible matrix ``A``;
    the chain then moves in ``eta`` with ``theta = A @ eta`` and reports
    ``theta``.

    With ``cfg.metric == "dense"`` the warmup covariance estimate is folded
    into ``A`` (a Cholesky factor), which is equivalent to a dense metric.
    """
    base = _as_target(target)
    rng = chain_rng(cfg.seed, chain)
    A = None if precondition is None else np.asarray(precondition, dtype=float)
    f = base if A is None else _Preconditioned(base, A)

    def to_eta(theta):
        return theta if A is None else np.linalg.solve(A, theta)

    q0 = rng.normal(0.0, cfg.init_sd, size=dim) if init is None else np.array(init, dtype=float)
    q0 = to_eta(q0)
    lp, g = _evaluate(f, q0)
    tries = 0
    while g is None:
        tries += 1
        if tries > 100:
            raise NumericalError(f"chain {chain}: no finite initial point found")
        q0 = to_eta(rng.normal(0.0, cfg.init_sd, size=dim))
        lp, g = _evaluate(f, q0)
    z = _Point(q0, np.zeros(dim), lp, g)
    inv = np.ones(dim)
    eps = _initial_step(f, z, inv, rng)
    da = _DualAveraging(eps, cfg.target_accept)
    w_start, w_stop = _warmup_windows(cfg.warmup)
    window = []
    kept, kept_it = [], []
    div = wdiv = 0
    acc_sum = depth_sum = 0.0
    n_leap = 0
    nuts = _NUTS(f, inv, cfg.max_depth)
    for it in range(cfg.iterations):
        z, accept, divergent, depth, nl = nuts.transition(z, eps, rng)
        n_leap += nl
        if it < cfg.warmup:
            wdiv += divergent
            eps = da.learn(accept)
            if w_start <= it < w_stop:
                window.append(z.q)
            if it + 1 == w_stop and len(window) >= 10:
                W = np.asarray(window)
                if cfg.metric == "dense":
                    L = _shrunk_cholesky(W)
                    A = L if A is None else A @ L
                    f = _Preconditioned(base, A)
                    q = np.linalg.solve(L, z.q)
                    lp, g = _evaluate(f, q)
                    z = _Point(q, np.zeros(dim), lp, g)
                else:
                    inv = _regularized_variance(W)
                nuts = _NUTS(f, inv, cfg.max_depth)
                eps = _initial_step(f, z, inv, rng, eps)
                da.restart(eps)
            if it + 1 == cfg.warmup:
                eps = da.final()
                if wdiv == cfg.warmup:
                    raise NumericalError(
                        f"chain {chain}: every warmup transition diverged "
                        f"(final step size {eps:.3g})")
        else:
            div += divergent
            acc_sum += accept
            depth_sum += depth
            if (it - cfg.warmup) % cfg.thin == 0:
                kept.append(z.q)
                kept_it.append(it)
    n_post = max(cfg.iterations - cfg.warmup, 1)
    draws = np.asarray(kept).reshape(-1, dim)
    if A is not None:
        draws = draws @ A.T
    if not np.all(np.isfinite(draws)):
        raise NumericalError(f"chain {chain}: non-finite draw retained")
    return ChainResult(chain, draws, np.asarray(kept_it), eps, inv, div, wdiv,
                       acc_sum / n_post, depth_sum / n_post, n_leap)


@dataclass
class PosteriorDraws:
    """Retained draws of all chains stacked chain-major.

    ``blocks`` maps block names to ``[start, stop)`` column ranges and
    ``names`` lists one label per column.
    """

    draws: np.ndarray
    chain: np.ndarray
    iteration: np.ndarray
    names: list[str]
    blocks: dict[str, list[int]]
    divergences: list[int] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain).size)

    @property
    def total_divergences(self) -> int:
        return int(sum(self.divergences))

    def block(self, name: str) -> np.ndarray:
        a, b = self.blocks[name]
        return self.draws[:, a:b]

    def by_chain(self) -> np.ndarray:
        """Draws reshaped to ``(chains, draws_per_chain, dim)``."""
        ids = np.unique(self.chain)
        return np.stack([self.draws[self.chain == c] for c in ids])


def run_chains(target, cfg: SamplerConfig, dim: int | None = None, names=None,
               blocks=None, init=None, precondition="auto") -> PosteriorDraws:
    """Run ``cfg.chains`` NUTS chains and stack the thinned post-warmup draws.

    ``target`` is either a callable ``q -> (logp, grad)`` or an object with a
    ``log_prob_and_grad`` method (and optionally ``dim`` and ``layout``).
    With ``cfg.workers > 1`` chains run in worker processes; results are
    identical to the serial run. ``precondition="auto"`` uses the target's
    ``preconditioner()`` when it has one; pass ``None`` to disable.
    """
    if isinstance(precondition, str) and precondition == "auto":
        precondition = target.preconditioner() if hasattr(target, "preconditioner") else None
    if dim is None:
        dim = getattr(target, "dim", None)
        if dim is None:
            raise DataValidationError("target dimension unknown; pass dim=")
    layout = getattr(target, "layout", None)
    if names is None:
        names = layout.scalar_names() if layout is not None else [f"x[{i + 1}]" for i in range(dim)]
    if blocks is None:
        blocks = layout.as_dict() if layout is not None else {"x": [0, dim]}
    workers = min(cfg.workers, cfg.chains)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(run_chain, target, dim, cfg, c, init, precondition) for c in range(cfg.chains)]
            results = [fu.result() for fu in futs]
    else:
        results = [run_chain(target, dim, cfg, c, init, precondition) for c in range(cfg.chains)]
    results.sort(key=lambda r: r.chain)
    draws = np.vstack([r.draws for r in results])
    chain = np.concatenate([np.full(r.draws.shape[0], r.chain) for r in results])
    iteration = np.concatenate([r.iterations for r in results])
    out = PosteriorDraws(draws, chain, iteration, list(names), dict(blocks),
                         [r.divergences for r in results], [r.step_size for r in results],
                         asdict(cfg))
    if out.total_divergences:
        log.warning("%d divergent transitions after warmup", out.total_divergences)
    return out


def save_draws(draws: PosteriorDraws, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    csv_path = stem.with_suffix(".csv")
    json_path = stem.with_suffix(".json")
    with open(csv_path, "w") as fh:
        fh.write(",".join(["chain", "iteration"] + draws.names) + "\n")
        for c, it, row in zip(draws.chain, draws.iteration, draws.draws):
            fh.write(f"{int(c)},{int(it)}," + ",".join(repr(float(x)) for x in row) + "\n")
    with open(json_path, "w") as fh:
        json.dump({"blocks": draws.blocks, "config": draws.config,
                   "divergences": draws.divergences, "step_sizes": draws.step_sizes},
                  fh, indent=2)
    return csv_path, json_path


def load_draws(stem) -> PosteriorDraws:
    stem = Path(stem)
    with open(stem.with_suffix(".json")) as fh:
        meta = json.load(fh)
    with open(stem.with_suffix(".csv")) as fh:
        header = fh.readline().strip().split(",")
    arr = np.loadtxt(stem.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
    return PosteriorDraws(arr[:, 2:], arr[:, 0].astype(int), arr[:, 1].astype(int), header[2:],
                          {k: list(v) for k, v in meta["blocks"].items()},
                          meta.get("divergences", []), meta.get("step_sizes", []),
                          meta.get("config", {}))


# -- diagnostics -----------------------------------------------------------

def _autocov(x):
    n = x.size
    f = np.fft.rfft(x - x.mean(), n=2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n] / n
    return ac


def ess(chains) -> float:
    """Multi-chain effective sample size (Geyer initial monotone sequence).

    ``chains`` has shape ``(m, n)``.
    """
    chains = np.asarray(chains, dtype=float)
    m, n = chains.shape
    if n < 4:
        return float(m * n)
    acov = np.array([_autocov(c) for c in chains])
    chain_var = acov[:, 0] * n / (n - 1.0)
    W = chain_var.mean()
    var_plus = W * (n - 1.0) / n
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return float("nan")
    rho_hat = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho_hat[0] = 1.0
    # pair sums, truncated at the first negative pair, made monotone
    t = 0
    pairs = []
    while 2 * t + 1 < n:
        s = rho_hat[2 * t] + rho_hat[2 * t + 1]
        if s < 0:
            break
        pairs.append(s)
        t += 1
    pairs = np.minimum.accumulate(np.asarray(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / math.log10(m * n)) if m * n > 1 else tau
    return float(m * n / tau)


def split_rhat(chains) -> float:
    """Split R-hat; ``nan`` when every chain is constant."""
    chains = np.asarray(chains, dtype=float)
    m, n = chains.shape
    half = n // 2
    if half < 2:
        return float("nan")
    sp = np.vstack([chains[:, :half], chains[:, n - half:]])
    W = sp.var(axis=1, ddof=1).mean()
    if not W > 0:
        return float("nan")
    B = half * sp.mean(axis=1).var(ddof=1)
    var_plus = (half - 1.0) / half * W + B / half
    return float(math.sqrt(var_plus / W))


@dataclass
class ScalarSummary:
    name: str
    p5: float
    p50: float
    p95: float
    rhat: float
    ess: float


@dataclass
class DrawSummary:
    scalars: list[ScalarSummary]
    blocks: dict[str, dict[str, float]]
    divergences: int
    degenerate: list[str]

    def scalar(self, name: str) -> ScalarSummary:
        for s in self.scalars:
            if s.name == name:
                return s
        raise KeyError(name)


def diagnostics(draws: PosteriorDraws) -> DrawSummary:
    """Split R-hat and ESS per scalar and block; 5/50/95 percentiles per scalar."""
    by = draws.by_chain()
    scalars = []
    degenerate = []
    for j, name in enumerate(draws.names):
        col = by[:, :, j]
        r = split_rhat(col)
        e = ess(col) if np.ptp(col) > 0 else float("nan")
        if not math.isfinite(r):
            degenerate.append(name)
        p5, p50, p95 = np.percentile(draws.draws[:, j], [5, 50, 95])
        scalars.append(ScalarSummary(name, float(p5), float(p50), float(p95), r, e))
    if degenerate:
        warnings.warn(f"R-hat undefined (constant draws) for {len(degenerate)} scalar(s): "
                      f"{', '.join(degenerate[:5])}", RuntimeWarning, stacklevel=2)
    blocks = {}
    for name, (a, b) in draws.blocks.items():
        rs = [s.rhat for s in scalars[a:b] if math.isfinite(s.rhat)]
        es = [s.ess for s in scalars[a:b] if math.isfinite(s.ess)]
        blocks[name] = {"max_rhat": max(rs) if rs else float("nan"),
                        "min_ess": min(es) if es else float("nan")}
    return DrawSummary(scalars, blocks, draws.total_divergences, degenerate)


def default_workers() -> int:
    return max(1, min(8, os.cpu_count() or 1))
