import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.metrics import roc_auc_score

from biasmrp.agreement import (ORDINAL, AgreementMatrix, NetworkConfig, PairedRatings,
                               alpha_from_matrix, bootstrap_alpha, fit_agreement_network,
                               krippendorff_alpha, load_matrix, load_ratings, posterior_incidence,
                               simulate_network_counts, write_matrix)
from biasmrp.errors import DataValidationError

FIXTURES = Path(__file__).parent / "fixtures"
VOTE_MATRIX = np.array([[1906, 3, 4, 50, 234],
                        [3, 5, 0, 0, 0],
                        [0, 0, 7, 0, 2],
                        [40, 0, 6, 864, 59],
                        [185, 2, 1, 95, 71]])
# nominal alpha of VOTE_MATRIX from the `krippendorff` package, frozen
VOTE_ALPHA = 0.639659171477051


def pairwise_alpha(codes1, codes2, delta):
    """Textbook alpha by enumerating ordered value pairs within units."""
    values = np.concatenate([codes1, codes2])
    n = values.size
    d_obs = sum(2 * delta(a, b) for a, b in zip(codes1, codes2)) / n
    counts = np.bincount(values)
    d_exp = sum(counts[a] * counts[b] * delta(a, b)
                for a in range(counts.size) for b in range(counts.size)) / (n * (n - 1))
    return 1.0 - d_obs / d_exp


def expand(A):
    i, j = np.nonzero(A)
    reps = A[i, j]
    return np.repeat(i, reps), np.repeat(j, reps)


def test_vote_matrix_alpha_matches_frozen_and_pairwise_oracles():
    assert alpha_from_matrix(VOTE_MATRIX) == pytest.approx(VOTE_ALPHA, abs=1e-9)
    c1, c2 = expand(VOTE_MATRIX)
    assert alpha_from_matrix(VOTE_MATRIX) == pytest.approx(
        pairwise_alpha(c1, c2, lambda a, b: float(a != b)), abs=1e-9)


def test_matches_reference_package_on_random_data():
    kd = pytest.importorskip("krippendorff")
    rng = np.random.default_rng(3)
    # ordinal here means squared distance between ranks, the package's "interval"
    for level, ref_level in (("nominal", "nominal"), ("ordinal", "interval")):
        c1 = rng.integers(0, 4, 300)
        c2 = np.where(rng.uniform(size=300) < 0.6, c1, rng.integers(0, 4, 300))
        ref = kd.alpha(reliability_data=np.array([c1, c2]), level_of_measurement=ref_level)
        p = PairedRatings.from_labels(c1, c2, levels=range(4))
        assert krippendorff_alpha(p, level) == pytest.approx(ref, abs=1e-9)


@given(st.lists(st.integers(0, 4), min_size=2, max_size=60).filter(lambda x: len(set(x)) > 1))
def test_perfect_agreement_is_one(labels):
    assert krippendorff_alpha(PairedRatings.from_labels(labels, labels)) == pytest.approx(1.0)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=3, max_size=50))
def test_ordinal_matches_pairwise_oracle(pairs):
    c1 = np.array([a for a, _ in pairs])
    c2 = np.array([b for _, b in pairs])
    A = np.bincount(c1 * 4 + c2, minlength=16).reshape(4, 4)
    o = A + A.T
    nc = o.sum(axis=1)
    d = (np.arange(4)[:, None] - np.arange(4)[None, :]) ** 2
    if nc @ d @ nc == 0:
        return
    got = alpha_from_matrix(A, ORDINAL)
    assert got == pytest.approx(pairwise_alpha(c1, c2, lambda a, b: float((a - b) ** 2)), abs=1e-9)


def test_independent_raters_give_alpha_near_zero():
    rng = np.random.default_rng(0)
    n = 100_000
    p = PairedRatings.from_labels(rng.integers(0, 5, n), rng.integers(0, 5, n))
    assert abs(krippendorff_alpha(p)) < 0.02


def test_single_label_warns_and_returns_one():
    with pytest.warns(RuntimeWarning):
        assert krippendorff_alpha(PairedRatings.from_labels("aaa", "aaa")) == 1.0


def test_too_few_units_rejected():
    with pytest.raises(DataValidationError):
        krippendorff_alpha(PairedRatings.from_labels(["a"], ["b"]))


def test_missing_labels_are_dropped():
    p = PairedRatings.from_labels(["a", None, "b", "a"], ["a", "b", "", "b"])
    assert p.n_units == 2 and p.units == ("0", "3")


def test_bootstrap_single_draw_and_perfect_agreement():
    rng_seed = 11
    A = AgreementMatrix(VOTE_MATRIX, ("D", "G", "L", "R", "stay home"))
    one = bootstrap_alpha(A, B=1, rng=rng_seed)
    cells = np.repeat(np.arange(25), VOTE_MATRIX.ravel())
    pick = cells[np.random.default_rng(rng_seed).integers(0, cells.size, cells.size)]
    assert one.draws[0] == pytest.approx(alpha_from_matrix(np.bincount(pick, minlength=25).reshape(5, 5)))
    assert one.alpha == pytest.approx(VOTE_ALPHA)
    perfect = bootstrap_alpha(PairedRatings.from_labels("abcabc", "abcabc"), B=50, rng=0)
    np.testing.assert_array_equal(perfect.draws, 1.0)
    with pytest.raises(DataValidationError):
        bootstrap_alpha(A, B=0)


def test_bootstrap_quantiles_bracket_point_estimate():
    s = bootstrap_alpha(VOTE_MATRIX, B=300, rng=1)
    assert s.q05 < s.alpha < s.q95
    assert abs(s.mean - s.alpha) < 0.02


def test_matrix_file_roundtrip(tmp_path):
    A = load_matrix(FIXTURES / "vote2020_matrix.csv")
    np.testing.assert_array_equal(A.counts, VOTE_MATRIX)
    assert A.levels[-1] == "stay home"
    write_matrix(A.counts, A.levels, tmp_path / "m.csv", fmt=lambda x: str(int(x)))
    np.testing.assert_array_equal(load_matrix(tmp_path / "m.csv").counts, VOTE_MATRIX)


def test_load_ratings_requires_two_raters(tmp_path):
    f = tmp_path / "r.csv"
    f.write_text("unit,rater,variable,label\n1,h,vote,D\n1,g,vote,D\n2,h,vote,R\n2,g,vote,D\n"
                 "1,h,sex,M\n1,g,sex,M\n1,x,sex,F\n")
    with pytest.raises(DataValidationError, match="sex"):
        load_ratings(f)
    f.write_text("unit,rater,variable,label\n1,h,vote,D\n1,g,vote,D\n2,h,vote,R\n2,g,vote,D\n")
    r = load_ratings(f)["vote"]
    assert r.raters == ("h", "g") and r.levels == ("D", "R")
    np.testing.assert_array_equal(AgreementMatrix.from_pairs(r).counts, [[1, 0], [1, 0]])


def test_matrix_validation():
    with pytest.raises(DataValidationError):
        AgreementMatrix(np.ones((2, 3)), ("a", "b"))
    with pytest.raises(DataValidationError):
        AgreementMatrix(np.zeros((2, 2)), ("a", "b"))
    with pytest.raises(DataValidationError):
        AgreementMatrix(np.array([[1, -1], [0, 1]]), ("a", "b"))


def test_network_recovers_planted_links():
    A, B = simulate_network_counts(6, 0, r=5.0)
    post = fit_agreement_network(A, NetworkConfig(seed=0))
    Bbar = posterior_incidence(post)
    assert post.converged
    assert np.all((post.B == 0) | (post.B == 1))
    assert np.all(post.r > 0) and np.all((post.sigma1 > 0) & (post.sigma1 < 5))
    assert roc_auc_score(B.ravel(), Bbar.ravel()) >= 0.9


def test_network_without_premium_is_uninformative():
    A, _ = simulate_network_counts(6, 1, r=0.0)
    post = fit_agreement_network(A, NetworkConfig(fixed_r=0.0, iterations=4000, warmup=1000, seed=1))
    assert np.max(np.abs(posterior_incidence(post) - 0.5)) < 0.05


def test_network_is_seed_deterministic():
    A, _ = simulate_network_counts(4, 2)
    cfg = NetworkConfig(chains=2, iterations=300, warmup=100, seed=5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a, b = fit_agreement_network(A, cfg), fit_agreement_network(A, cfg)
    np.testing.assert_array_equal(a.B, b.B)
    np.testing.assert_array_equal(a.beta0, b.beta0)


def test_network_config_validation():
    with pytest.raises(DataValidationError):
        NetworkConfig(warmup=10, iterations=10)
    with pytest.raises(DataValidationError):
        NetworkConfig(fixed_r=-1.0)
