import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arplnica.errors import NumericalError, ValidationError
from arplnica.evaluation import (align_mixing, aitchison_distance, all_metrics, analytic_lag_covariances,
                                 check_identifiability_conditions, clr, cosine_similarity, gram_coherence,
                                 mae_log1p, max_coherence, mc_lag_covariances, medoid_mixing, poisson_deviance,
                                 recover_signed_permutation, recovery_report, sliced_wasserstein)
from arplnica.generative import Dims, Emission, ModelParams, RegimePrior, SourceDynamics, sample_dataset
from arplnica.learning import project_gamma_columns

from oracles import random_model


def signed_permutation(rng, d):
    P = np.eye(d)[:, rng.permutation(d)]
    return P * rng.choice([-1.0, 1.0], size=d)


def single_regime_model(B, psi_bar=None, psi=None, K=None):
    B = np.asarray(B, dtype=np.float64)
    d = B.size
    K = d if K is None else K
    psi_bar = np.ones(d) if psi_bar is None else np.asarray(psi_bar, dtype=np.float64)
    psi = np.ones(d) if psi is None else np.asarray(psi, dtype=np.float64)
    dyn = SourceDynamics(np.zeros((d, 1)), psi_bar[:, None], B[:, None], np.zeros((d, 1)), psi[:, None])
    return ModelParams(Dims(K, d, 1, 4), RegimePrior.uniform(d, 1), dyn, Emission(np.eye(K, d), np.zeros(K)))


# cosine and alignment

def test_cosine_examples():
    assert cosine_similarity([1, 2], [1, 2]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 3]) == 0.0
    assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2))
    with pytest.raises(ValidationError):
        cosine_similarity([0, 0], [1, 1])


def test_identity_alignment():
    G = project_gamma_columns(np.random.default_rng(0).normal(size=(6, 3)))
    al = align_mixing(G, G)
    assert al.permutation.tolist() == [0, 1, 2] and al.signs.tolist() == [1, 1, 1]
    assert al.mean_cosine == pytest.approx(1.0, abs=1e-15)


def test_swap_and_flip_is_recovered():
    G = project_gamma_columns(np.random.default_rng(1).normal(size=(5, 3)))
    est = G[:, [1, 0, 2]] * np.array([1, -1, 1])
    al = align_mixing(est, G)
    assert al.permutation.tolist() == [1, 0, 2]
    assert al.signs.tolist() == [-1, 1, 1]
    assert np.allclose(al.apply(est), G)


def test_alignment_matches_exhaustive_signed_search():
    rng = np.random.default_rng(2)
    for _ in range(30):
        est = project_gamma_columns(rng.normal(size=(5, 3)))
        ref = project_gamma_columns(rng.normal(size=(5, 3)))
        best = -np.inf
        for perm in itertools.permutations(range(3)):
            for signs in itertools.product([-1, 1], repeat=3):
                best = max(best, sum(signs[i] * est[:, perm[i]] @ ref[:, i] for i in range(3)))
        assert align_mixing(est, ref).mean_cosine == pytest.approx(best / 3, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_alignment_invariant_under_signed_permutation(seed, d):
    rng = np.random.default_rng(seed)
    G = project_gamma_columns(rng.normal(size=(d + 3, d)))
    other = project_gamma_columns(rng.normal(size=(d + 3, d)))
    F = signed_permutation(rng, d)
    assert align_mixing(G @ F, G).mean_cosine == pytest.approx(1.0, abs=1e-12)
    assert align_mixing(other @ F, G).mean_cosine == pytest.approx(align_mixing(other, G).mean_cosine, abs=1e-12)


def test_alignment_guards():
    with pytest.raises(ValidationError, match="Hungarian"):
        align_mixing(np.eye(10), np.eye(10))
    with pytest.raises(ValidationError):
        align_mixing(np.eye(3), np.eye(3), hungarian=True)
    with pytest.raises(ValidationError):
        align_mixing(np.eye(3)[:, :2], np.eye(3))


# sliced Wasserstein

def test_sw_identical_samples_is_zero():
    x = np.random.default_rng(3).poisson(3.0, size=(20, 4, 3))
    assert sliced_wasserstein(x, x) == 0.0


def test_sw_point_masses():
    assert sliced_wasserstein(np.array([[2.0]]), np.array([[5.5]]), directions=[[1.0]]) == pytest.approx(3.5)


def test_sw_gaussian_shift():
    # uniformly spaced directions make the directional average exact: E[cos^2] = 1/2;
    # the finite-sample bias of empirical W2 is removed with an unshifted null run
    delta, n, reps = 2.0, 2000, 20
    ang = (np.arange(720) + 0.5) * np.pi / 720
    dirs = np.stack([np.cos(ang), np.sin(ang)], 1)
    rng = np.random.default_rng(4)

    def run(shift):
        return np.array([sliced_wasserstein(rng.normal(size=(n, 2)) + [shift, 0.0], rng.normal(size=(n, 2)),
                                            directions=dirs) ** 2 for _ in range(reps)])

    shifted, null = run(delta), run(0.0)
    se = math.sqrt((shifted.var(ddof=1) + null.var(ddof=1)) / reps)
    assert abs(shifted.mean() - null.mean() - delta ** 2 / 2) < 3 * se


def test_sw_symmetric_nonnegative_and_unequal_sizes():
    rng = np.random.default_rng(5)
    a = rng.poisson(2.0, size=(30, 3, 2))
    b = rng.poisson(3.0, size=(30, 3, 2))
    c = rng.poisson(3.0, size=(17, 3, 2))
    assert sliced_wasserstein(a, b) == sliced_wasserstein(b, a) > 0
    assert sliced_wasserstein(a, c) == pytest.approx(sliced_wasserstein(c, a), rel=1e-12)
    assert sliced_wasserstein(b, b[rng.permutation(30)]) == 0.0


def test_sw_errors():
    with pytest.raises(ValidationError):
        sliced_wasserstein([], np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        sliced_wasserstein(np.zeros((2, 3)), np.zeros((2, 4)))


def test_sw_accepts_datasets():
    model = random_model(np.random.default_rng(6), 3, 2, 1, T=4)
    a, _ = sample_dataset(model, 10, seed=1)
    b, _ = sample_dataset(model, 10, seed=2)
    assert sliced_wasserstein(a, b) == pytest.approx(sliced_wasserstein(a.counts_array(), b.counts_array()))


# Gram coherence and recovery report

def test_gram_examples():
    Q, _ = np.linalg.qr(np.random.default_rng(7).normal(size=(5, 3)))
    assert np.allclose(gram_coherence(Q), np.eye(3))
    v = np.array([0.6, 0.8, 0.0])
    D = np.stack([v, v], 1)
    assert gram_coherence(D)[0, 1] == pytest.approx(1.0)
    assert max_coherence(D) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalized_gram_has_unit_diagonal(seed):
    G = project_gamma_columns(np.random.default_rng(seed).normal(size=(6, 4)))
    assert np.allclose(np.diag(gram_coherence(G)), 1.0)


def test_recovery_report_fields():
    rng = np.random.default_rng(8)
    m1 = random_model(rng, 4, 2, 1, T=3)
    m2 = random_model(rng, 4, 2, 1, T=3)
    a, _ = sample_dataset(m1, 15, seed=0)
    b, _ = sample_dataset(m2, 15, seed=0)
    rep = recovery_report(m1, m2, a, b, n_projections=64)
    assert rep.sliced_wasserstein >= 0
    assert np.allclose(np.diag(rep.gram_coherence), np.sum(m1.emission.Gamma ** 2, axis=0))
    assert set(rep.to_dict()) == {"alignment", "sliced_wasserstein", "gram_coherence", "runtime_seconds"}


# identifiability

def test_lag_one_whitened_diagonal_equals_B():
    rep = check_identifiability_conditions(single_regime_model([0.9, 0.5]))
    e = rep.entry(2, 1)
    assert np.allclose(e["diag"], [0.9, 0.5], atol=1e-12)
    assert e["min_gap"] == pytest.approx(0.4, abs=1e-12)
    assert rep.passed and rep.B_distinct


def test_equal_B_entries_are_flagged():
    rep = check_identifiability_conditions(single_regime_model([0.7, 0.7, 0.2]))
    assert not rep.entry(2, 1)["distinct"]
    assert "not_distinct(t0=2,l0=1)" in rep.flags and "B_not_distinct" in rep.flags
    assert rep.B_distinct is False


def test_analytic_lag_covariances_match_dense_oracle():
    rng = np.random.default_rng(9)
    B = rng.uniform(-0.9, 0.9, 3)
    psi_bar, psi = rng.uniform(0.3, 2, 3), rng.uniform(0.3, 2, 3)
    cov = analytic_lag_covariances(single_regime_model(B, psi_bar, psi), 5)
    for i in range(3):
        L = np.zeros((5, 5))
        L[0, 0] = math.sqrt(psi_bar[i])
        for t in range(1, 5):
            L[t] = B[i] * L[t - 1]
            L[t, t] = math.sqrt(psi[i])
        S = L @ L.T
        for t0 in range(1, 6):
            for l0 in range(t0):
                assert cov[t0][l0][i] == pytest.approx(S[t0 - 1, t0 - 1 - l0], abs=1e-12)


def test_monte_carlo_lag_covariances_single_regime():
    model = single_regime_model([0.8, -0.4], [1.0, 0.5], [0.6, 1.2])
    exact = analytic_lag_covariances(model, 3)
    mc = mc_lag_covariances(model, 3, 200_000, np.random.default_rng(10))
    for t0 in range(1, 4):
        for l0 in range(t0):
            assert np.allclose(mc[t0][l0], exact[t0][l0], atol=0.02)


def test_monte_carlo_checker_is_self_consistent():
    model = random_model(np.random.default_rng(11), 3, 2, 2)
    reps = [np.array(check_identifiability_conditions(model, 3, 5000, np.random.default_rng(100 + r)).entry(2, 1)["diag"])
            for r in range(20)]
    se = np.std(reps, axis=0, ddof=1)
    big = np.array(check_identifiability_conditions(model, 3, 50_000, np.random.default_rng(7)).entry(2, 1)["diag"])
    assert np.all(np.abs(reps[0] - big) < 3 * np.sqrt(se ** 2 + se ** 2 / 10))


def test_identifiability_errors():
    with pytest.raises(ValidationError):
        check_identifiability_conditions(single_regime_model([0.5]), max_t0=1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_signed_permutation_recovered_from_diagonalization(seed, d):
    rng = np.random.default_rng(seed)
    lam = rng.choice([-1, 1], size=d) * rng.uniform(0.2, 2.0, size=d)
    if d > 1 and np.min(np.diff(np.sort(lam))) < 0.05:
        lam = np.linspace(-1.5, 1.7, d)
    F = signed_permutation(rng, d)
    A = F @ np.diag(lam) @ F.T
    F_hat, lam_hat = recover_signed_permutation(A)
    order = np.argsort(lam)[::-1]
    assert np.allclose(lam_hat, lam[order])
    assert np.array_equal(np.abs(F_hat), np.abs(F[:, order]))
    assert np.allclose(F_hat @ np.diag(lam_hat) @ F_hat.T, A)


def test_recovery_rejects_repeated_eigenvalues():
    with pytest.raises(NumericalError):
        recover_signed_permutation(np.eye(3))


# medoid

def test_medoid_identical():
    G = project_gamma_columns(np.random.default_rng(12).normal(size=(5, 2)))
    res = medoid_mixing([G, G.copy(), G.copy()])
    assert res.index == 0 and np.allclose(res.deviation, 0.0, atol=1e-15)


def test_medoid_ignores_outlier():
    rng = np.random.default_rng(13)
    G = project_gamma_columns(rng.normal(size=(6, 3)))
    out = project_gamma_columns(rng.normal(size=(6, 3)))
    assert medoid_mixing([out, G, G[:, [2, 0, 1]] * -1, G]).index in (1, 2, 3)


def test_medoid_matches_exhaustive_similarity():
    rng = np.random.default_rng(14)
    for _ in range(5):
        mats = [project_gamma_columns(rng.normal(size=(5, 3))) for _ in range(4)]

        def sim(a, b):
            return max(sum(abs(a[:, p[i]] @ b[:, i]) for i in range(3)) / 3
                       for p in itertools.permutations(range(3)))

        scores = [np.mean([sim(mats[j], mats[i]) for j in range(4) if j != i]) for i in range(4)]
        res = medoid_mixing(mats)
        assert res.index == int(np.argmax(scores))
        assert np.allclose(res.mean_similarity, scores)


def test_medoid_deviation_estimator():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[0.8, 0.0], [0.6, 1.0]])
    res = medoid_mixing([a, b])
    stack = np.stack(res.aligned)
    assert np.allclose(res.deviation, stack.std(axis=0, ddof=1))
    with pytest.raises(ValidationError):
        medoid_mixing([a])


# metrics

def test_metric_identities():
    x = np.random.default_rng(15).poisson(2.0, size=(6, 4))
    assert mae_log1p(x, x) == 0.0
    assert poisson_deviance(x, x) == 0.0
    assert aitchison_distance(x, x) == 0.0


def test_metric_examples():
    assert mae_log1p([[0]], [[math.e - 1]]) == pytest.approx(1.0)
    assert poisson_deviance([[0]], [[3.0]]) == 0.0
    assert poisson_deviance([[2]], [[1.0]]) == pytest.approx(2 * (2 * math.log(2) - 1))
    assert poisson_deviance([[2]], [[1.0]]) == pytest.approx(0.77259, abs=1e-5)


def test_mae_matches_double_loop():
    rng = np.random.default_rng(16)
    x = rng.poisson(4.0, size=(5, 3))
    y = rng.uniform(0, 8, size=(5, 3))
    ref = sum(abs(math.log(1 + x[t, k]) - math.log(1 + y[t, k])) for t in range(5) for k in range(3)) / 15
    assert mae_log1p(x, y) == pytest.approx(ref, abs=1e-12)


def test_deviance_matches_double_loop():
    rng = np.random.default_rng(17)
    x = rng.poisson(1.0, size=(5, 3))
    y = rng.uniform(0.1, 4, size=(5, 3))
    tot = 0.0
    for t in range(5):
        for k in range(3):
            if x[t, k] > 0:
                tot += x[t, k] * math.log(x[t, k] / y[t, k]) - x[t, k] + y[t, k]
    assert poisson_deviance(x, y) == pytest.approx(2 * tot / 15, abs=1e-12)


def test_aitchison_pseudo_count_and_scale():
    rng = np.random.default_rng(18)
    x = rng.poisson(3.0, size=(4, 5)) + 1
    assert aitchison_distance(x, 2 * x, pseudo_count=0.0) == pytest.approx(0.0, abs=1e-12)
    # the 0.5 pseudo-count makes the scale invariance approximate
    assert 0 < aitchison_distance(x, 2 * x) < aitchison_distance(x, 2 * x[:, ::-1])
    row = clr([[0, 3, 7]])
    assert row.sum() == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(row, np.log([0.5, 3.5, 7.5]) - np.log([0.5, 3.5, 7.5]).mean())


def test_metric_errors():
    with pytest.raises(ValidationError):
        mae_log1p([[1]], [[-1.0]])
    with pytest.raises(ValidationError):
        poisson_deviance([[1]], [[0.0]])
    with pytest.raises(ValidationError):
        all_metrics(np.zeros((2, 2)), np.zeros((2, 3)))
