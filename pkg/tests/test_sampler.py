import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from biasmrp.errors import DataValidationError, NonFiniteError, NumericalError
from biasmrp.sampler import (PosteriorDraws, SamplerConfig, chain_rng, diagnostics, ess, leapfrog,
                             load_draws, run_chain, run_chains, save_draws, split_rhat)


def std_normal(q):
    return -0.5 * float(q @ q), -q


def correlated_normal(rho=0.95):
    C = np.array([[1.0, rho], [rho, 1.0]])
    P = np.linalg.inv(C)

    def f(q):
        return -0.5 * float(q @ P @ q), -(P @ q)
    return f, C


def test_config_validation():
    for kw in (dict(chains=0), dict(warmup=600), dict(thin=0), dict(target_accept=1.0),
               dict(max_depth=0), dict(metric="full")):
        with pytest.raises(DataValidationError):
            SamplerConfig(**kw)
    assert SamplerConfig(iterations=500, warmup=250, thin=4).draws_per_chain == 63


def test_leapfrog_is_reversible_and_volume_preserving():
    q, p = np.array([0.3, -1.0]), np.array([0.5, 0.2])

    def grad(x):
        return -x ** 3

    q1, p1 = leapfrog(q, p, 0.1, grad)
    q2, p2 = leapfrog(q1, -p1, 0.1, grad)
    np.testing.assert_allclose(q2, q, atol=1e-14)
    np.testing.assert_allclose(-p2, p, atol=1e-14)


def test_chain_streams_are_keyed_by_seed_and_chain():
    a = chain_rng(3, 0).normal(size=4)
    assert np.array_equal(a, chain_rng(3, 0).normal(size=4))
    assert not np.array_equal(a, chain_rng(3, 1).normal(size=4))
    assert not np.array_equal(a, chain_rng(4, 0).normal(size=4))


def test_moments_of_correlated_gaussian():
    f, C = correlated_normal()
    cfg = SamplerConfig(chains=2, iterations=3000, warmup=1000, thin=1, seed=1)
    d = run_chains(f, cfg, dim=2)
    assert d.draws.shape == (4000, 2)
    np.testing.assert_allclose(d.draws.mean(axis=0), 0.0, atol=0.15)
    np.testing.assert_allclose(np.cov(d.draws.T), C, atol=0.15)
    assert d.total_divergences == 0


def test_dense_metric_runs_and_is_deterministic():
    f, C = correlated_normal(0.99)
    cfg = SamplerConfig(chains=1, iterations=1500, warmup=700, thin=1, seed=2, metric="dense")
    d1 = run_chains(f, cfg, dim=2)
    d2 = run_chains(f, cfg, dim=2)
    assert np.array_equal(d1.draws, d2.draws)
    np.testing.assert_allclose(np.cov(d1.draws.T), C, atol=0.2)


def test_precondition_leaves_target_invariant():
    f, C = correlated_normal(0.9)
    A = np.linalg.cholesky(C)
    cfg = SamplerConfig(chains=1, iterations=2500, warmup=500, thin=1, seed=3)
    r = run_chain(f, 2, cfg, 0, precondition=A)
    np.testing.assert_allclose(np.cov(r.draws.T), C, atol=0.15)


def test_nonfinite_regions_are_rejected_not_fatal():
    # half-line target: log density -inf for q < 0
    def f(q):
        if q[0] <= 0:
            raise NonFiniteError("support")
        return -q[0], np.array([-1.0])

    cfg = SamplerConfig(chains=1, iterations=3000, warmup=1000, thin=1, seed=4, init_sd=0.1)
    r = run_chain(f, 1, cfg, 0, init=[0.5])
    assert np.all(r.draws > 0)
    assert r.draws.mean() == pytest.approx(1.0, abs=0.15)


def test_no_finite_start_raises():
    def f(q):
        raise NonFiniteError("nowhere")

    with pytest.raises(NumericalError):
        run_chain(f, 2, SamplerConfig(chains=1, iterations=10, warmup=5), 0)


def test_worker_count_does_not_change_draws():
    cfg = SamplerConfig(chains=3, iterations=200, warmup=100, thin=2, seed=5)
    serial = run_chains(std_normal, cfg, dim=4)
    par = run_chains(std_normal, SamplerConfig(**{**cfg.__dict__, "workers": 3}), dim=4)
    assert serial.draws.tobytes() == par.draws.tobytes()
    np.testing.assert_array_equal(serial.chain, par.chain)


def test_draws_roundtrip(tmp_path):
    cfg = SamplerConfig(chains=2, iterations=60, warmup=30, thin=3, seed=6)
    d = run_chains(std_normal, cfg, dim=3, names=["a", "b[1]", "b[2]"], blocks={"a": [0, 1], "b": [1, 3]})
    save_draws(d, tmp_path / "fit")
    back = load_draws(tmp_path / "fit")
    assert back.draws.tobytes() == d.draws.tobytes()
    assert back.names == d.names and back.blocks == d.blocks
    assert back.block("b").shape == (d.n_draws, 2)
    assert back.by_chain().shape == (2, 10, 3)
    assert back.config["seed"] == 6


def test_rhat_and_ess_on_iid_chains():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 2000))
    assert split_rhat(x) == pytest.approx(1.0, abs=0.01)
    assert 6000 < ess(x) < 10000
    shifted = x + np.array([[0], [0], [0], [3]])
    assert split_rhat(shifted) > 1.5
    assert math.isnan(split_rhat(np.ones((2, 50))))


def test_ess_of_ar1_matches_theory():
    rng = np.random.default_rng(8)
    phi, n = 0.8, 20000
    x = np.zeros((2, n))
    e = rng.normal(size=(2, n))
    for t in range(1, n):
        x[:, t] = phi * x[:, t - 1] + e[:, t]
    expected = 2 * n * (1 - phi) / (1 + phi)
    assert ess(x) == pytest.approx(expected, rel=0.15)


def test_diagnostics_flags_constant_columns():
    d = PosteriorDraws(np.column_stack([np.random.default_rng(9).normal(size=40), np.ones(40)]),
                       np.repeat([0, 1], 20), np.tile(np.arange(20), 2), ["x", "c"],
                       {"x": [0, 1], "c": [1, 2]})
    with pytest.warns(RuntimeWarning, match="constant"):
        s = diagnostics(d)
    assert s.degenerate == ["c"]
    assert math.isfinite(s.scalar("x").rhat)


@given(st.integers(1, 3), st.integers(10, 40), st.integers(1, 4))
def test_retained_draw_count(chains, post, thin):
    cfg = SamplerConfig(chains=chains, iterations=10 + post, warmup=10, thin=thin, seed=0)
    d = run_chains(std_normal, cfg, dim=1)
    assert d.n_draws == chains * cfg.draws_per_chain
    assert d.n_chains == chains
