"""
Online selection (for simulation) and King-Zeng prior correction (for
estimation).

Online selection removes a random fraction ``Upsilon[m, j] ~ Beta`` of the
people in cell ``m`` choosing option ``j`` before sampling. The Beta is
parameterized by its mean ``mu`` and variance ``sigma``; the variance must lie
strictly inside ``(0, mu (1 - mu))``.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataValidationError


def beta_shapes(mu: float, variance: float) -> tuple[float, float]:
    """Beta shape parameters ``(a, b)`` for a given mean and variance."""
    if not 0.0 < mu < 1.0:
        raise DataValidationError(f"selection penalty mean must be in (0, 1), got {mu}")
    nu = mu * (1.0 - mu) / variance - 1.0 if variance > 0 else math.inf
    if not nu > 0:
        raise DataValidationError(
            f"selection dispersion {variance} is at or above its bound {mu * (1 - mu):.6g}")
    if not math.isfinite(nu):
        raise DataValidationError("selection dispersion must be positive")
    return mu * nu, (1.0 - mu) * nu


@dataclass(frozen=True)
class SelectionConfig:
    """Per-choice selection penalties.

    ``mu[j]`` in [0, 1) is the mean share of choice-``j`` people who opt out;
    ``sigma[j]`` is the Beta variance. ``mu[j] == 0`` means no opt-out for
    that choice (its variance is ignored).
    """

    mu: tuple[float, ...]
    sigma: tuple[float, ...]
    n: int
    seed: int | None = None

    def __post_init__(self):
        if len(self.mu) != len(self.sigma):
            raise DataValidationError("mu and sigma need one entry per choice")
        if self.n < 1:
            raise DataValidationError("sample size must be >= 1")
        for m, s in zip(self.mu, self.sigma):
            if m == 0.0:
                continue
            beta_shapes(m, s)

    @classmethod
    def half_bound(cls, mu, n: int, seed=None) -> "SelectionConfig":
        """Dispersion set to half of the Beta variance bound for each choice."""
        mu = tuple(float(m) for m in mu)
        return cls(mu, tuple(0.5 * m * (1.0 - m) for m in mu), n, seed)


def draw_penalties(cfg: SelectionConfig, n_cells: int, rng) -> np.ndarray:
    """``Upsilon`` of shape (cells x choices), each entry in [0, 1)."""
    J = len(cfg.mu)
    ups = np.zeros((n_cells, J))
    for j, (m, s) in enumerate(zip(cfg.mu, cfg.sigma)):
        if m == 0.0:
            continue
        a, b = beta_shapes(m, s)
        u = rng.beta(a, b, size=n_cells)
        # keep strictly inside (0, 1) when shapes are extreme
        ups[:, j] = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    return ups


def weighted_sample_without_replacement(weights, n: int, rng) -> np.ndarray:
    """Successive weighted draws without replacement (exponential-key method).

    Equivalent to repeatedly picking an item with probability proportional to
    its weight among those not yet picked.
    """
    w = np.asarray(weights, dtype=float)
    pos = np.flatnonzero(w > 0)
    if pos.size < n:
        raise DataValidationError(f"only {pos.size} units have positive weight, need {n}")
    keys = rng.exponential(size=pos.size) / w[pos]
    order = np.argpartition(keys, n - 1)[:n] if n < pos.size else np.arange(pos.size)
    order = order[np.argsort(keys[order], kind="stable")]
    return pos[order]


def draw_online_selected_sample(counts, cfg: SelectionConfig, rng):
    """Sample ``cfg.n`` individuals under online selection.

    ``counts`` is (cells x choices) population counts. Individual ``i`` in
    cell ``m`` with choice ``j`` is weighted by ``1 - Upsilon[m, j]``.

    Returns ``(cell, choice, upsilon)``: per-respondent cell and choice ids
    and the drawn penalty matrix.
    """
    counts = np.asarray(counts)
    if counts.ndim != 2 or np.any(counts < 0):
        raise DataValidationError("population counts must be a nonnegative (cells x choices) array")
    counts = counts.astype(np.int64)
    if counts.shape[1] != len(cfg.mu):
        raise DataValidationError("selection config and population disagree on the choice count")
    if counts.sum() < cfg.n:
        raise DataValidationError(f"population of {counts.sum()} is smaller than n = {cfg.n}")
    ups = draw_penalties(cfg, counts.shape[0], rng)
    flat = counts.ravel()
    unit_w = np.repeat((1.0 - ups).ravel(), flat)
    picked = weighted_sample_without_replacement(unit_w, cfg.n, rng)
    group = np.repeat(np.arange(flat.size), flat)[picked]
    cell, choice = np.divmod(group, counts.shape[1])
    return cell, choice, ups


def draw_random_sample(counts, n: int, rng):
    """Simple random sample without replacement; returns ``(cell, choice)``."""
    counts = np.asarray(counts).astype(np.int64)
    flat = counts.ravel()
    if flat.sum() < n:
        raise DataValidationError(f"population of {flat.sum()} is smaller than n = {n}")
    picked = rng.choice(flat.sum(), size=n, replace=False)
    group = np.repeat(np.arange(flat.size), flat)[picked]
    return np.divmod(group, counts.shape[1])


def expected_selected_shares(counts, cfg: SelectionConfig) -> np.ndarray:
    """Closed-form ``sum_m E[w*_mj] / sum E[w*]``."""
    counts = np.asarray(counts, dtype=float)
    surv = counts * (1.0 - np.asarray(cfg.mu))[None, :]
    return surv.sum(axis=0) / surv.sum()


def king_zeng_offset(n1: float, n0: float, prevalence: float, N: float) -> float:
    """``log((n1 / N1) / (n0 / N0))`` with ``N1 = prevalence * N``.

    The offset is the log odds of being sampled for a case relative to a
    control; it is zero when the sample prevalence equals ``prevalence``.
    """
    if n1 < 1 or n0 < 1:
        raise DataValidationError(
            "offset undefined: the sample has no "
            + ("cases" if n1 < 1 else "controls")
            + " for this choice; pool it with another choice or drop it")
    if not 0.0 < prevalence < 1.0:
        raise DataValidationError(f"prevalence must be in (0, 1), got {prevalence}")
    if N < n1 + n0:
        raise DataValidationError("population size smaller than the sample")
    N1 = prevalence * N
    N0 = (1.0 - prevalence) * N
    return math.log(n1 / N1) - math.log(n0 / N0)


def corrected_intercept(alpha_fitted: float, offset: float) -> float:
    """Representative-protocol intercept from one fitted without the offset.

    A model fit to the selected sample without an offset estimates
    ``alpha = alpha_tilde + offset``; this returns ``alpha_tilde``. Fitting
    with the offset included yields ``alpha_tilde`` directly, and prediction
    then omits the offset.
    """
    return alpha_fitted - offset


def biased_intercept(alpha_tilde: float, offset: float) -> float:
    """Inverse of :func:`corrected_intercept`."""
    return alpha_tilde + offset


@dataclass(frozen=True)
class PrevalenceTable:
    values: dict[str, float]
    provenance: str

    def __post_init__(self):
        if not self.provenance:
            raise DataValidationError("prevalence provenance must be nonempty")
        for k, v in self.values.items():
            if not 0.0 < v < 1.0:
                raise DataValidationError(f"prevalence for {k!r} must be in (0, 1), got {v}")

    def __getitem__(self, choice: str) -> float:
        try:
            return self.values[choice]
        except KeyError:
            raise DataValidationError(f"prevalence table has no entry for choice {choice!r}") from None

    def require(self, choices) -> None:
        missing = [c for c in choices if c not in self.values]
        if missing:
            raise DataValidationError(f"prevalence table is missing choice(s): {', '.join(missing)}")


def load_prevalence(path, choices=None) -> PrevalenceTable:
    """Read ``prevalence.csv`` with columns ``choice,value`` or
    ``choice,day,value``; day series are averaged per choice. An optional
    ``provenance`` column overrides the default (the file path)."""
    path = Path(path)
    series = defaultdict(list)
    provenance = None
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        if not {"choice", "value"} <= cols:
            raise DataValidationError(f"{path}: needs columns choice,value (and optionally day)")
        for line, row in enumerate(reader, start=2):
            try:
                v = float(row["value"])
            except ValueError:
                raise DataValidationError(f"{path}:{line}: value {row['value']!r} is not a number") from None
            if not 0.0 < v < 1.0:
                raise DataValidationError(f"{path}:{line}: prevalence {v} outside (0, 1)")
            series[row["choice"].strip()].append(v)
            if row.get("provenance"):
                provenance = row["provenance"].strip()
    values = {k: math.fsum(v) / len(v) for k, v in series.items()}
    table = PrevalenceTable(values, provenance or f"file:{path}")
    if choices is not None:
        table.require(choices)
    return table
