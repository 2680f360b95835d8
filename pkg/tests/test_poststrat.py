import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biasmrp.errors import DataValidationError
from biasmrp.frame import Attribute, Schema, StratificationFrame
from biasmrp.poststrat import (CellPosterior, aggregate, combine, normalize_turnout, percentiles,
                               summarize, uniform_swing, write_estimates)

SCHEMA = Schema((Attribute("state", 4), Attribute("sex", 2), Attribute("age", 3, ordinal=True)),
                ("D", "R", "stay home"), area="state", time=None)
ALL_KEYS = list(itertools.product(range(4), range(2), range(3)))


@st.composite
def small_frames(draw):
    m = draw(st.integers(1, 20))
    idx = draw(st.lists(st.integers(0, len(ALL_KEYS) - 1), min_size=m, max_size=m, unique=True))
    levels = np.array([ALL_KEYS[i] for i in idx], dtype=np.int64)
    weights = np.array(draw(st.lists(st.floats(0.01, 1e6), min_size=m, max_size=m)))
    seed = draw(st.integers(0, 2**32 - 1))
    frame = StratificationFrame(SCHEMA, levels, weights)
    probs = np.random.default_rng(seed).uniform(0.001, 1.0, size=(3, m, 3))
    return CellPosterior(probs, SCHEMA.choices, frame)


def brute_force(cp, cols):
    """Dictionary of level key -> (draws x choices) by explicit loops."""
    acc = {}
    for m in range(cp.frame.n_cells):
        key = tuple(int(cp.frame.levels[m, c]) for c in cols)
        num, den = acc.get(key, (np.zeros(cp.probs[:, 0, :].shape), 0.0))
        acc[key] = (num + cp.frame.weights[m] * cp.probs[:, m, :], den + cp.frame.weights[m])
    return {k: num / den for k, (num, den) in acc.items()}


MARGINS = [None, "state", ("state", "sex"), "age"]
COLS = {None: [], "state": [0], ("state", "sex"): [0, 1], "age": [2]}


@settings(max_examples=100)
@given(small_frames(), st.sampled_from(MARGINS))
def test_aggregate_matches_weighted_average_oracle(cp, margin):
    md = aggregate(cp, margin)
    oracle = brute_force(cp, COLS[margin])
    assert sorted(oracle) == sorted(md.levels)
    for g, key in enumerate(md.levels):
        np.testing.assert_allclose(md.theta[g], oracle[key], rtol=1e-12, atol=1e-12)


@settings(max_examples=100)
@given(small_frames())
def test_turnout_normalized_rows_sum_to_one(cp):
    nt = normalize_turnout(cp)
    assert nt.choices == ("D", "R") and nt.normalized
    assert np.max(np.abs(nt.probs.sum(axis=2) - 1.0)) < 1e-12


@given(small_frames())
def test_total_margin_lies_within_cell_range(cp):
    md = aggregate(cp)
    lo, hi = cp.probs.min(axis=1), cp.probs.max(axis=1)
    assert np.all(md.theta[0] >= lo - 1e-12) and np.all(md.theta[0] <= hi + 1e-12)


def _frame(weights):
    levels = np.array(ALL_KEYS[:len(weights)])
    return StratificationFrame(SCHEMA, levels, np.asarray(weights, dtype=float))


def test_zero_weight_level_is_rejected():
    frame = _frame([1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0])
    cp = CellPosterior(np.full((2, 7, 3), 0.3), SCHEMA.choices, frame)
    # cells 0..5 are state 1, cell 6 is state 2 (weight 0)
    with pytest.raises(DataValidationError, match="zero total weight"):
        aggregate(cp, "state")


def test_unknown_margin_is_rejected():
    cp = CellPosterior(np.full((2, 3, 3), 0.3), SCHEMA.choices, _frame([1, 1, 1]))
    with pytest.raises(DataValidationError):
        aggregate(cp, "income")


def test_probabilities_outside_unit_interval_rejected():
    with pytest.raises(DataValidationError):
        CellPosterior(np.full((2, 3, 3), 1.5), SCHEMA.choices, _frame([1, 1, 1]))


def test_combine_stacks_choices_and_truncates_draws():
    f = _frame([1, 2, 3])
    a = CellPosterior(np.full((5, 3, 1), 0.4), ("D",), f)
    b = CellPosterior(np.full((4, 3, 1), 0.5), ("R",), f)
    with pytest.warns(RuntimeWarning):
        c = combine([a, b])
    assert c.choices == ("D", "R") and c.n_draws == 4
    with pytest.raises(DataValidationError):
        combine([a, a])
    with pytest.raises(DataValidationError):
        combine([])


def test_summarize_and_write(tmp_path):
    f = _frame([1, 1, 1, 1, 1, 1, 3])
    draws = np.linspace(0.1, 0.9, 11)
    probs = np.broadcast_to(draws[:, None, None], (11, 7, 3)).copy()
    md = aggregate(CellPosterior(probs, SCHEMA.choices, f, day=2), "state")
    rows = summarize(md, SCHEMA)
    assert len(rows) == 2 * 3
    r = rows[0]
    assert (r.margin, r.choice, r.day) == ("state", "D", 2)
    assert (r.p5, r.p50, r.p95) == pytest.approx((0.14, 0.5, 0.86))
    write_estimates(rows, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "margin,level,choice,day,p5,p50,p95"
    assert lines[1].split(",")[3] == "3"


def test_percentiles_use_linear_interpolation():
    q = percentiles(np.arange(1.0, 6.0))
    np.testing.assert_allclose(q, [1.2, 3.0, 4.8])


def test_uniform_swing_adds_national_change_and_clamps():
    with pytest.warns(RuntimeWarning):
        shares, clamped = uniform_swing([0.5, 0.98, 0.01], 0.48, 0.51)
    np.testing.assert_allclose(shares, [0.53, 1.0, 0.04])
    assert clamped.tolist() == [False, True, False]
    same, c = uniform_swing([0.2, 0.7], 0.4, 0.4)
    np.testing.assert_array_equal(same, [0.2, 0.7])
    assert not c.any()
    assert math.isclose(uniform_swing([0.3], 0.5, 0.4)[0][0], 0.2)
