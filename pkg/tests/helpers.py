"""Shared builders for model-level tests."""

import numpy as np

from biasmrp.fitting import build_model
from biasmrp.frame import AdjacencyGraph, Attribute, CovariateTables, Schema, SurveyDataset
from biasmrp.model import BERNOULLI

SCHEMA = Schema(
    attributes=(Attribute("area", 7), Attribute("sex", 2), Attribute("age", 5, ordinal=True)),
    choices=("a", "b", "c"), area="area", time=None, state_covariates=("z1", "z2"))
# one island (node 6) and a 6-node mainland with a cycle
GRAPH = AdjacencyGraph(7, np.array([[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [5, 0], [1, 4]]))


def toy_survey(rng, n=300):
    levels = np.column_stack([rng.integers(0, 7, n), rng.integers(0, 2, n), rng.integers(0, 5, n)])
    eta = np.column_stack([0.4 * levels[:, 2] - 0.8, 0.6 * levels[:, 1], np.zeros(n)])
    p = np.exp(eta) / np.exp(eta).sum(axis=1, keepdims=True)
    choice = np.array([rng.choice(3, p=pi) for pi in p])
    return SurveyDataset(SCHEMA, choice, levels)


def toy_covariates(rng):
    return CovariateTables(rng.normal(size=(7, 2)), np.zeros((0, 0)), np.zeros((7, 0, 0)),
                           state_names=("z1", "z2"))


def toy_model(rng, likelihood=BERNOULLI, structured=True, offset=0.0, n=300):
    survey = toy_survey(rng, n)
    cov = toy_covariates(rng)
    return build_model(survey, cov, GRAPH, likelihood, "b" if likelihood == BERNOULLI else None,
                       structured, offset)


def central_difference(f, x, h=1e-3):
    """Fourth-order central differences, step scaled to each coordinate."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        hi = h * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = hi
        g[i] = (-f(x + 2 * e) + 8 * f(x + e) - 8 * f(x - e) + f(x - 2 * e)) / (12 * hi)
    return g


def relative_error(g, ref):
    return float(np.linalg.norm(g - ref) / max(np.linalg.norm(ref), 1e-300))
