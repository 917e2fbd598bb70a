import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import gammaln
from scipy.stats import norm, poisson

from arplnica.errors import NumericalError, ValidationError
from arplnica.generative import (Dims, Emission, LatentPath, ModelParams, RegimePrior, Sequence, SourceDynamics,
                                 emit_counts, log_joint, sample_dataset, sample_latent_batch, sample_regime_chain,
                                 sample_source_path)
from arplnica.variational import SourceProxy, forward_moments

from oracles import naive_log_joint, random_model


def single_regime(B=0.5, b=0.0, b_bar=0.0, psi_bar=1.0, psi=1.0, d=1):
    dyn = SourceDynamics(np.full((d, 1), b_bar), np.full((d, 1), psi_bar), np.full((d, 1), B),
                         np.full((d, 1), b), np.full((d, 1), psi))
    return RegimePrior.uniform(d, 1), dyn


def test_dims_validation():
    with pytest.raises(ValidationError):
        Dims(2, 3, 1)
    with pytest.raises(ValidationError):
        Dims(3, 2, 0)


def test_regime_prior_rejects_nonstochastic_columns():
    with pytest.raises(ValidationError):
        RegimePrior(np.array([[0.5, 0.5]]), np.array([[[0.9, 0.9], [0.1, 0.2]]]))


def test_single_regime_chain_is_all_zero():
    prior = RegimePrior.uniform(2, 1)
    assert np.all(sample_regime_chain(prior, 1, 30, np.random.default_rng(0)) == 0)


def test_absorbing_chain():
    prior = RegimePrior(np.array([[1.0, 0.0]]), np.eye(2)[None])
    assert sample_regime_chain(prior, 0, 5, np.random.default_rng(1)).tolist() == [0, 0, 0, 0, 0]


def test_invalid_component_index():
    with pytest.raises(ValidationError):
        sample_regime_chain(RegimePrior.uniform(2, 2), 2, 5, np.random.default_rng(0))


def test_uniform_transition_frequencies():
    prior = RegimePrior(np.array([[0.5, 0.5]]), np.full((1, 2, 2), 0.5))
    lab = sample_regime_chain(prior, 0, 100_001, np.random.default_rng(2))
    prev, nxt = lab[:-1], lab[1:]
    for l in (0, 1):
        n = np.sum(prev == l)
        p = np.mean(nxt[prev == l] == 1)
        assert abs(p - 0.5) < 3 * np.sqrt(0.25 / n)


def test_nonpositive_variance_rejected():
    with pytest.raises(ValidationError):
        SourceDynamics([[0.0]], [[1.0]], [[0.5]], [[0.0]], [[0.0]])


def test_source_mean_with_zero_coefficient():
    mu, sig2 = 1.7, 0.4
    _, dyn = single_regime(B=0.0, b=mu, psi=sig2)
    rng = np.random.default_rng(3)
    s = np.array([sample_source_path(dyn, 0, np.zeros(3, dtype=int), rng)[1:] for _ in range(100_000)])
    se = np.sqrt(sig2 / s.shape[0])
    assert np.all(np.abs(s.mean(axis=0) - mu) < 3 * se)


def test_second_step_variance():
    _, dyn = single_regime()
    rng = np.random.default_rng(4)
    s2 = np.array([sample_source_path(dyn, 0, np.zeros(2, dtype=int), rng)[1] for _ in range(100_000)])
    # Var of the sample variance of a Gaussian: 2 v^2 / (n - 1)
    assert abs(s2.var(ddof=1) - 1.25) < 3 * np.sqrt(2 * 1.25 ** 2 / (s2.size - 1))


def test_batch_sampler_matches_forward_recursion():
    prior, dyn = single_regime(B=0.8, b=0.3, b_bar=-1.0, psi_bar=0.5, psi=0.2, d=1)
    _, s = sample_latent_batch(prior, dyn, 200_000, 5, np.random.default_rng(5))
    proxy = SourceProxy([-1.0], np.full((4, 1), 0.8), np.full((4, 1), 0.3), np.array([[0.5], [0.2], [0.2], [0.2], [0.2]]))
    mom = forward_moments(proxy)
    n = s.shape[0]
    assert np.all(np.abs(s.mean(axis=0) - mom.mu) < 3 * np.sqrt(mom.sigma / n))
    assert np.all(np.abs(s.var(axis=0, ddof=1) - mom.sigma) < 3 * np.sqrt(2 * mom.sigma ** 2 / (n - 1)))


def test_components_are_uncorrelated():
    model = random_model(np.random.default_rng(6), 3, 2, 2)
    _, s = sample_latent_batch(model.prior, model.dynamics, 100_000, 4, np.random.default_rng(7))
    for t in range(4):
        r = np.corrcoef(s[:, t, 0], s[:, t, 1])[0, 1]
        assert abs(r) < 3 / np.sqrt(s.shape[0])


def test_poisson_unit_rate():
    em = Emission(np.zeros((10, 2)), np.zeros(10))
    x = emit_counts(em, np.zeros(100_000), np.zeros((100_000, 2)), np.random.default_rng(8))
    assert abs(x.mean() - 1.0) < 3 * np.sqrt(1.0 / x.size)


def test_poisson_baseline_rate():
    em = Emission(np.zeros((4, 1)), np.full(4, np.log(5.0)))
    x = emit_counts(em, np.zeros(50_000), np.zeros((50_000, 1)), np.random.default_rng(9))
    assert abs(x.mean() - 5.0) < 3 * np.sqrt(5.0 / x.size)


def test_offset_doubles_expected_counts():
    em = Emission(np.zeros((3, 1)), np.zeros(3))
    rng = np.random.default_rng(10)
    n = 200_000
    a = emit_counts(em, np.zeros(n), np.zeros((n, 1)), rng).mean()
    b = emit_counts(em, np.full(n, np.log(2.0)), np.zeros((n, 1)), rng).mean()
    assert abs(b / a - 2.0) < 0.02


def test_poisson_variance_equals_mean():
    em = Emission(np.array([[0.5], [-1.0]]), np.array([1.0, 0.5]))
    s = np.full((100_000, 1), 0.7)
    x = emit_counts(em, np.zeros(100_000), s, np.random.default_rng(11))
    m, v = x.mean(axis=0), x.var(axis=0, ddof=1)
    # Var of the sample variance of a Poisson(l): (l + 2 l^2) / n to first order
    assert np.all(np.abs(v - m) < 4 * np.sqrt((m + 2 * m ** 2) / x.shape[0]))


def test_rate_cap_raises():
    em = Emission(np.ones((2, 1)), np.zeros(2))
    with pytest.raises(NumericalError):
        emit_counts(em, np.zeros(2), np.array([[40.0], [0.0]]), np.random.default_rng(0), log_rate_cap=30.0)


def test_empty_dataset():
    model = random_model(np.random.default_rng(0), 3, 2, 1, T=4)
    ds, lat = sample_dataset(model, 0)
    assert len(ds) == 0 and lat == []


def test_dataset_is_deterministic():
    model = random_model(np.random.default_rng(1), 4, 2, 2, T=6)
    a, la = sample_dataset(model, 5, seed=42)
    b, lb = sample_dataset(model, 5, seed=42)
    assert np.array_equal(a.counts_array(), b.counts_array())
    assert all(np.array_equal(p.s, q.s) and np.array_equal(p.u, q.u) for p, q in zip(la, lb))


def test_scenario_dataset_shape():
    model = random_model(np.random.default_rng(2), 12, 5, 1, T=20, scale=0.1)
    ds, lat = sample_dataset(model, 150, seed=0)
    assert ds.counts_array().shape == (150, 20, 12)
    assert len(lat) == 150 and lat[0].s.shape == (20, 5)


def test_offsets_replayed_from_donor():
    model = random_model(np.random.default_rng(3), 3, 1, 1, T=4)
    donor = [Sequence(np.zeros((4, 3), dtype=int), np.arange(4.0) + j, f"d{j}") for j in range(2)]
    from arplnica.generative import Dataset
    ds, _ = sample_dataset(model, 3, offsets=Dataset(donor), seed=1)
    assert np.array_equal(ds[2].offsets, donor[0].offsets)


def test_model_json_round_trip():
    model = random_model(np.random.default_rng(4), 5, 3, 2, T=7)
    back = ModelParams.from_dict(model.to_dict())
    for f in ("pi", "A"):
        assert np.array_equal(getattr(back.prior, f), getattr(model.prior, f))
    assert np.array_equal(back.emission.Gamma, model.emission.Gamma)
    assert np.array_equal(back.dynamics.psi, model.dynamics.psi)


def test_log_joint_scalar_case():
    prior, dyn = single_regime(b_bar=0.3, psi_bar=0.7)
    model = ModelParams(Dims(1, 1, 1, 1), prior, dyn, Emission(np.ones((1, 1)), np.zeros(1)))
    seq = Sequence(np.zeros((1, 1), dtype=int), np.zeros(1))
    lp = log_joint(model, seq, LatentPath(np.zeros((1, 1), dtype=int), np.zeros((1, 1))))
    assert lp == pytest.approx(norm.logpdf(0.0, 0.3, np.sqrt(0.7)) - 1.0, abs=1e-12)


def test_log_joint_matches_naive_loops():
    rng = np.random.default_rng(5)
    for _ in range(20):
        model = random_model(rng, 4, 3, 3, T=5)
        u = rng.integers(0, 3, size=(5, 3))
        s = rng.normal(size=(5, 3))
        seq = Sequence(rng.integers(0, 5, size=(5, 4)), rng.normal(size=5))
        assert log_joint(model, seq, LatentPath(u, s)) == pytest.approx(
            naive_log_joint(model, seq.counts, seq.offsets, u, s), abs=1e-9)


def test_log_joint_normalizes():
    # sum over u and x, integral over s, for T=1, C=2, d=1, K=1
    rng = np.random.default_rng(6)
    model = random_model(rng, 1, 1, 2, T=1, scale=0.5)
    grid = np.linspace(-12, 12, 4001)
    h = grid[1] - grid[0]
    total = 0.0
    for k in range(2):
        for x in range(60):
            seq = Sequence(np.array([[x]]), np.zeros(1))
            vals = np.array([log_joint(model, seq, LatentPath(np.array([[k]]), np.array([[s]]))) for s in grid[::20]])
            # Simpson on a coarse grid is enough for smooth Gaussian tails
            from scipy.integrate import simpson
            total += simpson(np.exp(vals), x=grid[::20])
    assert total == pytest.approx(1.0, abs=1e-3)


def test_doubling_counts_changes_emission_only():
    rng = np.random.default_rng(7)
    model = random_model(rng, 3, 2, 2, T=4)
    u = rng.integers(0, 2, size=(4, 2))
    s = rng.normal(size=(4, 2))
    x = rng.integers(0, 4, size=(4, 3))
    o = rng.normal(size=4)
    a = log_joint(model, Sequence(x, o), LatentPath(u, s))
    b = log_joint(model, Sequence(2 * x, o), LatentPath(u, s))
    z = s @ model.emission.Gamma.T + o[:, None] + model.emission.eta
    direct = np.sum(poisson.logpmf(2 * x, np.exp(z)) - poisson.logpmf(x, np.exp(z)))
    assert b - a == pytest.approx(direct, abs=1e-9)
    assert direct == pytest.approx(np.sum(x * z - gammaln(2 * x + 1) + gammaln(x + 1)), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_labels_in_range(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 3, 2, 3, T=6)
    u, _ = sample_latent_batch(model.prior, model.dynamics, 50, 6, rng)
    assert u.min() >= 0 and u.max() < 3


def test_sequence_validation():
    with pytest.raises(ValidationError):
        Sequence(np.array([[-1, 2]]), np.zeros(1))
    with pytest.raises(ValidationError):
        Sequence(np.array([[1.5, 2]]), np.zeros(1))
    with pytest.raises(ValidationError):
        Sequence(np.array([[1, 2]]), np.array([np.inf]))
