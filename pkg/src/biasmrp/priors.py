"""
Structured prior components: shared-variance random intercepts, random
walks, ICAR and the BYM2 convolution, plus the graph scaling factor.

Every log-density here returns ``(value, gradient)``. Effects use the
non-centered form ``effect = scale * z``; scales live on the log scale and
mixing weights on the logit scale, with Jacobians folded into the
transform helpers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataValidationError
from .frame import AdjacencyGraph

LOG_2PI = math.log(2.0 * math.pi)
SUM_TO_ZERO_TIGHTNESS = 0.01

UNSTRUCTURED = "unstructured"
RANDOM_WALK = "random_walk"
BYM2 = "bym2"
KINDS = (UNSTRUCTURED, RANDOM_WALK, BYM2)


def normal_logpdf(x, mean, sd):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI


@dataclass(frozen=True)
class ScalingFactors:
    """Per-component BYM2 scaling factors.

    ``eps[k]`` is the geometric mean of the marginal ICAR variances of
    component ``k`` (1 for islands); ``inv_sqrt`` is ``1/sqrt(eps)`` expanded
    to nodes.
    """

    eps: np.ndarray
    inv_sqrt: np.ndarray
    islands: np.ndarray
    # float masks used by the convolution: 1 on islands / on connected
    # nodes, and 1/sqrt(eps) restricted to connected nodes
    island_mask: np.ndarray = field(init=False, repr=False)
    mainland: np.ndarray = field(init=False, repr=False)
    mainland_inv_sqrt: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        isl = np.asarray(self.islands, dtype=float)
        object.__setattr__(self, "island_mask", isl)
        object.__setattr__(self, "mainland", 1.0 - isl)
        object.__setattr__(self, "mainland_inv_sqrt", (1.0 - isl) * np.asarray(self.inv_sqrt))

    @property
    def node_eps(self) -> np.ndarray:
        return 1.0 / self.inv_sqrt ** 2


def compute_scaling_factor(graph: AdjacencyGraph) -> ScalingFactors:
    """Scaling factor per connected component of ``graph``."""
    eps = np.ones(graph.n_components)
    A = graph.adjacency_matrix()
    for k in range(graph.n_components):
        nodes = np.flatnonzero(graph.components == k)
        n = nodes.size
        if n == 1:
            continue
        sub = A[np.ix_(nodes, nodes)]
        Q = np.diag(sub.sum(axis=1)) - sub
        # constrained generalized inverse: inv(Q + 11'/n) - 11'/n
        J = np.full((n, n), 1.0 / n)
        cov = np.linalg.inv(Q + J) - J
        eps[k] = math.exp(np.mean(np.log(np.diag(cov))))
    inv_sqrt = 1.0 / np.sqrt(eps[graph.components])
    return ScalingFactors(eps=eps, inv_sqrt=inv_sqrt, islands=graph.islands.copy())


def icar_logdensity(psi, graph: AdjacencyGraph) -> tuple[float, np.ndarray]:
    """Pairwise-difference ICAR term ``-1/2 sum_edges (psi_i - psi_j)^2``."""
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (graph.n_nodes,):
        raise DataValidationError(f"psi has length {psi.size}, graph has {graph.n_nodes} nodes")
    Qpsi = graph.laplacian() @ psi
    return -0.5 * float(psi @ Qpsi), -Qpsi


def component_sum_to_zero(x, graph: AdjacencyGraph,
                          tightness: float = SUM_TO_ZERO_TIGHTNESS) -> tuple[float, np.ndarray]:
    """Soft constraint ``sum(x[component]) ~ N(0, tightness * size)`` per component.

    Islands are pinned near zero by the same rule, which keeps their ICAR
    value proper while they play no role in the convolution.
    """
    x = np.asarray(x, dtype=float)
    sums = np.bincount(graph.components, weights=x, minlength=graph.n_components)
    sd = tightness * graph.component_sizes
    r = sums / sd
    value = -0.5 * float(r @ r) - float(np.log(sd).sum()) - 0.5 * LOG_2PI * sd.size
    grad = -(r / sd)[graph.components]
    return value, grad


def bym2_convolve(phi, psi, xi: float, scale: float, sf: ScalingFactors) -> np.ndarray:
    """``scale * (phi sqrt(1 - xi) + psi sqrt(xi / eps))``; islands get ``scale * phi``."""
    if not scale > 0:
        raise DataValidationError("BYM2 scale must be positive")
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    mixed = sf.mainland * math.sqrt(1.0 - xi) + sf.island_mask
    return scale * (phi * mixed + psi * (math.sqrt(xi) * sf.mainland_inv_sqrt))


def bym2_convolve_grad(g, phi, psi, xi: float, scale: float, sf: ScalingFactors,
                       wrt_logit: bool = False):
    """Pull back ``g = d/d gamma`` through :func:`bym2_convolve`.

    Returns gradients with respect to ``(phi, psi, xi, scale)``; with
    ``wrt_logit`` the third entry is the derivative with respect to
    ``logit(xi)``, which stays finite as ``xi`` reaches 0 or 1.
    """
    a = math.sqrt(1.0 - xi)
    rx = math.sqrt(xi)
    cphi = sf.mainland * a + sf.island_mask
    cpsi = rx * sf.mainland_inv_sqrt
    gphi = g * phi
    gpsi = g * psi
    dphi = scale * g * cphi
    dpsi = scale * g * cpsi
    u = float(gphi @ sf.mainland)
    w = float(gpsi @ sf.mainland_inv_sqrt)
    if wrt_logit:
        # d sqrt(1-xi)/dv = -sqrt(1-xi) xi / 2,  d sqrt(xi)/dv = sqrt(xi) (1-xi) / 2
        dxi = 0.5 * scale * (-u * a * xi + w * rx * (1.0 - xi))
    else:
        dxi = scale * (-u / (2.0 * a) + w / (2.0 * rx))
    dscale = float(gphi @ cphi) + float(gpsi @ cpsi)
    return dphi, dpsi, dxi, dscale


def random_walk_logdensity(gamma, scale: float = 1.0,
                           tightness: float = SUM_TO_ZERO_TIGHTNESS) -> tuple[float, np.ndarray]:
    """First-order random walk with innovation sd ``scale`` plus the soft
    sum-to-zero term ``sum(gamma) ~ N(0, tightness * U * scale)``.

    The model always calls this on standardized effects (``scale = 1``).
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim != 1 or gamma.size < 2:
        raise DataValidationError("random walk needs at least 2 levels")
    U = gamma.size
    d = gamma[1:] - gamma[:-1]
    r = d / scale ** 2
    value = -0.5 * float(d @ r) - (U - 1) * (math.log(scale) + 0.5 * LOG_2PI)
    grad = np.zeros(U)
    grad[1:] -= r
    grad[:-1] += r
    s = gamma.sum()
    sd = tightness * U * scale
    value += -0.5 * (s / sd) ** 2 - math.log(sd) - 0.5 * LOG_2PI
    grad -= s / sd ** 2
    return value, grad


def unstructured_logdensity(z) -> tuple[float, np.ndarray]:
    """Standard-normal density of standardized random intercepts."""
    z = np.asarray(z, dtype=float)
    return -0.5 * float(z @ z) - 0.5 * LOG_2PI * z.size, -z


def iid_normal_logdensity(x, sd: float) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=float)
    r = x / sd
    return -0.5 * float(r @ r) - x.size * (math.log(sd) + 0.5 * LOG_2PI), -r / sd


def log_scale_transform(u: float) -> tuple[float, float, float]:
    """Map an unconstrained ``u`` to a half-normal(0, 1) scale ``exp(u)``.

    Returns ``(scale, log prior + log Jacobian, derivative wrt u)``.
    """
    if u > 709.0:  # exp overflows; the half-normal density is zero there
        return math.inf, -math.inf, -math.inf
    s = math.exp(u)
    lp = math.log(2.0) - 0.5 * LOG_2PI - 0.5 * s * s + u
    return s, lp, 1.0 - s * s


def _log_sigmoid(v: float) -> float:
    return -math.log1p(math.exp(-v)) if v > -30 else v - math.log1p(math.exp(v))


def logit_xi_transform(v: float) -> tuple[float, float, float]:
    """Map an unconstrained ``v`` to a Beta(1/2, 1/2) mixing weight in (0, 1).

    Returns ``(xi, log prior + log Jacobian, derivative wrt v)``.
    """
    log_xi = _log_sigmoid(v)
    log_1m = _log_sigmoid(-v)
    xi = math.exp(log_xi)
    lp = -math.log(math.pi) + 0.5 * log_xi + 0.5 * log_1m
    return xi, lp, 0.5 - xi


@dataclass(frozen=True)
class PriorComponent:
    """A structured effect decorating one categorical attribute.

    ``graph`` and ``scaling`` are only set for BYM2 components.
    """

    attribute: str
    kind: str
    levels: int
    graph: AdjacencyGraph | None = None
    scaling: ScalingFactors | None = None
    tightness: float = SUM_TO_ZERO_TIGHTNESS

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataValidationError(f"unknown prior kind {self.kind!r}")
        if self.kind == BYM2:
            if self.graph is None:
                raise DataValidationError(f"{self.attribute}: BYM2 needs an adjacency graph")
            if self.graph.n_nodes != self.levels:
                raise DataValidationError(f"{self.attribute}: graph has {self.graph.n_nodes} "
                                          f"nodes, attribute has {self.levels} levels")
            if self.scaling is None:
                object.__setattr__(self, "scaling", compute_scaling_factor(self.graph))
            if self.scaling.eps.size != self.graph.n_components:
                raise DataValidationError("one scaling factor per graph component required")
        if self.kind == RANDOM_WALK and self.levels < 2:
            raise DataValidationError("random walk needs at least 2 levels")

    def gaussian_prior(self) -> tuple[np.ndarray, float]:
        """``(P, c)`` with ``log p(x) = -x' P x / 2 + c`` for the standardized
        vector of this component (``z``, or ``psi`` for BYM2), including the
        soft sum-to-zero terms. Agrees with the log-densities above."""
        U = self.levels
        if self.kind == UNSTRUCTURED:
            return np.eye(U), -0.5 * LOG_2PI * U
        if self.kind == RANDOM_WALK:
            D = np.diff(np.eye(U), axis=0)
            sd = self.tightness * U
            P = D.T @ D + 1.0 / sd ** 2
            return P, -0.5 * LOG_2PI * U - math.log(sd)
        g = self.graph
        P = np.array(g.laplacian(), dtype=float)
        sds = self.tightness * g.component_sizes
        for comp in range(g.n_components):
            idx = np.flatnonzero(g.components == comp)
            P[np.ix_(idx, idx)] += 1.0 / sds[comp] ** 2
        return P, -float(np.log(sds).sum()) - 0.5 * LOG_2PI * sds.size

    def unstructured(self) -> "PriorComponent":
        return PriorComponent(self.attribute, UNSTRUCTURED, self.levels, tightness=self.tightness)

    @property
    def n_params(self) -> int:
        if self.kind == BYM2:
            return 2 * self.levels + 2
        return self.levels + 1
