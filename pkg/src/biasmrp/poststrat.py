"""
Post-stratification: cell predictions, turnout normalization, aggregation
to margins, percentile summaries and the uniform-swing baseline.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataValidationError
from .frame import StratificationFrame

PERCENTILES = (5.0, 50.0, 95.0)
ABSTAIN = "stay home"


@dataclass(frozen=True, eq=False)
class CellPosterior:
    """``probs[draw, cell, k]`` is the probability of ``choices[k]``."""

    probs: np.ndarray
    choices: tuple[str, ...]
    frame: StratificationFrame
    day: int | None = None
    normalized: bool = False

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 3 or p.shape[1] != self.frame.n_cells or p.shape[2] != len(self.choices):
            raise DataValidationError("cell posterior must be (draws x cells x choices)")
        if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
            raise DataValidationError("cell probabilities must lie in [0, 1]")
        object.__setattr__(self, "probs", p)

    @property
    def n_draws(self) -> int:
        return self.probs.shape[0]

    def choice(self, label: str) -> np.ndarray:
        return self.probs[:, :, self.choices.index(label)]


def predict_cells(fitted, frame: StratificationFrame, covariates=None,
                  day: int | None = None) -> CellPosterior:
    """Per-draw cell probabilities without the bias-correction offset."""
    from .fitting import frame_design_inputs

    levels, X = frame_design_inputs(frame, covariates, day)
    return CellPosterior(fitted.probabilities(levels, X), fitted.modeled_choices, frame, day)


def combine(posteriors) -> CellPosterior:
    """Stack separately fitted (e.g. per-choice Bernoulli) cell posteriors."""
    posteriors = list(posteriors)
    if not posteriors:
        raise DataValidationError("nothing to combine")
    first = posteriors[0]
    choices = sum((p.choices for p in posteriors), ())
    if len(set(choices)) != len(choices):
        raise DataValidationError("duplicate choices across combined posteriors")
    n = min(p.n_draws for p in posteriors)
    if any(p.n_draws != n for p in posteriors):
        warnings.warn(f"truncating combined posteriors to {n} draws", RuntimeWarning, stacklevel=2)
    for p in posteriors:
        if p.frame is not first.frame and p.frame.n_cells != first.frame.n_cells:
            raise DataValidationError("posteriors refer to different frames")
    probs = np.concatenate([p.probs[:n] for p in posteriors], axis=2)
    return CellPosterior(probs, choices, first.frame, first.day, False)


def normalize_turnout(cp: CellPosterior, exclude: str = ABSTAIN) -> CellPosterior:
    """Rescale party probabilities to sum to 1 per (draw, cell), dropping the
    abstention choice."""
    keep = [k for k, c in enumerate(cp.choices) if c != exclude]
    if not keep:
        raise DataValidationError("no party choices to normalize")
    p = cp.probs[:, :, keep]
    total = p.sum(axis=2, keepdims=True)
    if np.any(total <= 0):
        raise DataValidationError("party probabilities sum to zero in some cell")
    out = p / total
    return CellPosterior(out, tuple(cp.choices[k] for k in keep), cp.frame, cp.day, True)


def _margin_columns(frame: StratificationFrame, margin) -> list[int]:
    if margin is None or margin == ():
        return []
    names = (margin,) if isinstance(margin, str) else tuple(margin)
    attrs = [a.name for a in frame.schema.cell_attributes]
    try:
        return [attrs.index(n) for n in names]
    except ValueError:
        raise DataValidationError(f"margin {names} not among cell attributes {attrs}") from None


@dataclass(frozen=True, eq=False)
class MarginDraws:
    """``theta[level_index, draw, choice]`` for each margin level."""

    margin: tuple[str, ...]
    levels: list[tuple[int, ...]]
    theta: np.ndarray
    choices: tuple[str, ...]
    day: int | None = None


def aggregate(cp: CellPosterior, margin=None, weights=None) -> MarginDraws:
    """Weighted mean of cell probabilities within each level of ``margin``.

    ``margin`` is an attribute name, a tuple of names, or ``None`` for the
    whole population. Levels with no cells are omitted; levels whose cells
    carry zero total weight are an error.
    """
    frame = cp.frame
    w = frame.weights if weights is None else np.asarray(weights, dtype=float)
    cols = _margin_columns(frame, margin)
    if cols:
        keys, group = np.unique(frame.levels[:, cols], axis=0, return_inverse=True)
        group = group.ravel()
    else:
        keys, group = np.zeros((1, 0), dtype=np.int64), np.zeros(frame.n_cells, dtype=np.int64)
    G = keys.shape[0]
    wsum = np.bincount(group, weights=w, minlength=G)
    if np.any(wsum <= 0):
        bad = [tuple(int(x) for x in keys[g]) for g in np.flatnonzero(wsum <= 0)]
        raise DataValidationError(f"margin level(s) {bad[:5]} have zero total weight")
    # indicator (groups x cells) scaled by normalized weights
    M = np.zeros((G, frame.n_cells))
    M[group, np.arange(frame.n_cells)] = w / wsum[group]
    theta = np.einsum("gm,smj->gsj", M, cp.probs)
    names = tuple(a.name for a in frame.schema.cell_attributes)
    return MarginDraws(tuple(names[c] for c in cols), [tuple(int(x) for x in k) for k in keys],
                       theta, cp.choices, cp.day)


def percentiles(draws, q=PERCENTILES, axis=0) -> np.ndarray:
    """Linear-interpolation percentiles between order statistics."""
    return np.percentile(np.asarray(draws, dtype=float), q, axis=axis, method="linear")


@dataclass(frozen=True)
class MarginEstimate:
    margin: str
    level: str
    choice: str
    day: int | None
    p5: float
    p50: float
    p95: float


def summarize(md: MarginDraws, schema=None) -> list[MarginEstimate]:
    """5th/50th/95th percentiles per margin level and choice."""
    out = []
    label = "+".join(md.margin) if md.margin else "total"
    for g, key in enumerate(md.levels):
        if schema is not None and md.margin:
            lvl = "+".join(schema.attribute(a).format(v) for a, v in zip(md.margin, key))
        else:
            lvl = "+".join(str(v + 1) for v in key) if key else "all"
        qs = percentiles(md.theta[g], axis=0)
        for k, c in enumerate(md.choices):
            out.append(MarginEstimate(label, lvl, c, md.day, float(qs[0, k]), float(qs[1, k]),
                                      float(qs[2, k])))
    return out


ESTIMATE_COLUMNS = ("margin", "level", "choice", "day", "p5", "p50", "p95")


def write_estimates(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ESTIMATE_COLUMNS)
        for r in rows:
            w.writerow([r.margin, r.level, r.choice, "" if r.day is None else r.day + 1,
                        repr(r.p5), repr(r.p50), repr(r.p95)])


def uniform_swing(prev_share, national_prev: float, national_now: float):
    """Add the national change to every area's previous share, clamped to
    [0, 1]. Returns ``(shares, clamped_mask)``."""
    prev = np.asarray(prev_share, dtype=float)
    raw = prev + (national_now - national_prev)
    clamped = (raw < 0) | (raw > 1)
    if clamped.any():
        warnings.warn(f"uniform swing clamped {int(clamped.sum())} area(s) to [0, 1]",
                      RuntimeWarning, stacklevel=2)
    return np.clip(raw, 0.0, 1.0), clamped
