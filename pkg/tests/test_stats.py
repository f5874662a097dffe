from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import optimize, stats as scipy_stats

from echo_lens.errors import (
    DegenerateVariance,
    EmptyClass,
    NonConvergence,
    Separation,
    SingularDesign,
    TooFewSamples,
)
from echo_lens.stats import auroc, cohens_d, logistic_irls, welch_t


def pairwise_auroc(pos, neg):
    """O(n^2) oracle: count wins and half-ties over all pairs."""
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def test_auroc_hand_cases():
    assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert auroc([0.5, 0.5], [0.5, 0.5]) == 0.5
    assert auroc([0.1], [0.9]) == 0.0


def test_auroc_matches_pairwise_oracle_many_seeds():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        pos = rng.normal(0.3, 1.0, size=200)
        neg = rng.normal(0.0, 1.0, size=200)
        if seed % 3 == 0:  # force ties
            pos = np.round(pos, 1)
            neg = np.round(neg, 1)
        assert auroc(pos, neg) == pytest.approx(pairwise_auroc(pos, neg), abs=1e-12)


def test_auroc_complement_exact():
    rng = np.random.default_rng(7)
    pos = np.round(rng.normal(size=151), 1)
    neg = np.round(rng.normal(size=77), 1)
    assert auroc(pos, neg) + auroc(neg, pos) == 1.0


def test_auroc_affine_invariance():
    rng = np.random.default_rng(11)
    pos = rng.normal(0.5, 1.0, size=60)
    neg = rng.normal(0.0, 1.0, size=40)
    base = auroc(pos, neg)
    for transform in (lambda x: 3.0 * x + 2.0, np.tanh, lambda x: np.exp(x / 4.0)):
        assert auroc(transform(pos), transform(neg)) == pytest.approx(base, abs=1e-12)


def test_auroc_empty_class():
    with pytest.raises(EmptyClass):
        auroc([], [0.1])


def test_cohens_d_hand_case():
    assert cohens_d([0.0, 2.0], [0.0, 0.0]) == pytest.approx(1.0, abs=1e-15)


def test_cohens_d_identical_lists_zero():
    a = [1.0, 2.0, 3.0]
    assert cohens_d(a, list(a)) == 0.0


def test_cohens_d_antisymmetry_exact():
    rng = np.random.default_rng(3)
    a = rng.normal(1.0, 2.0, size=31)
    b = rng.normal(0.0, 1.0, size=17)
    assert cohens_d(a, b) == -cohens_d(b, a)


def test_cohens_d_errors():
    with pytest.raises(DegenerateVariance):
        cohens_d([1.0, 1.0], [1.0, 1.0])
    with pytest.raises(TooFewSamples):
        cohens_d([1.0], [1.0, 2.0])


def welch_oracle(a, b):
    """Independent closed-form implementation using scipy's t distribution."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    dof = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return t, dof, 2.0 * scipy_stats.t.sf(abs(t), dof)


def test_welch_identical_lists():
    a = [1.0, 2.0, 3.0, 4.0]
    result = welch_t(a, list(a))
    assert result.t == 0.0
    assert result.p == 1.0


def test_welch_matches_independent_formula():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a = rng.normal(0.2, 1.3, size=rng.integers(5, 40))
        b = rng.normal(0.0, 0.7, size=rng.integers(5, 40))
        ours = welch_t(a, b)
        t, dof, p = welch_oracle(a, b)
        assert ours.t == pytest.approx(t, abs=1e-10)
        assert ours.dof == pytest.approx(dof, abs=1e-10)
        assert ours.p == pytest.approx(p, abs=1e-10)
    # cross-check against scipy's own Welch test
    res = scipy_stats.ttest_ind(a, b, equal_var=False)
    ours = welch_t(a, b)
    assert ours.t == pytest.approx(res.statistic, abs=1e-10)
    assert ours.p == pytest.approx(res.pvalue, abs=1e-10)


def test_welch_errors():
    with pytest.raises(TooFewSamples):
        welch_t([1.0], [1.0, 2.0])
    with pytest.raises(DegenerateVariance):
        welch_t([2.0, 2.0], [3.0, 3.0])


def test_welch_p_monotone_in_t():
    base = welch_t([0.0, 1.0, 2.0, 3.0], [0.5, 1.5, 2.5, 3.5])
    dof = base.dof
    from echo_lens.stats import _student_t_sf_two_sided

    ts = [0.0, 0.3, 1.0, 2.5, 7.0]
    ps = [_student_t_sf_two_sided(t, dof) for t in ts]
    assert all(p1 > p2 for p1, p2 in zip(ps, ps[1:]))


# --- logistic regression ---------------------------------------------------


def synthetic_logistic_data(seed=0, n=2000, beta=(0.12, 0.24, 0.001)):
    """Generator mimicking gap/echo-length predictors on their raw scales."""
    rng = np.random.default_rng(seed)
    x1 = rng.normal(2.5, 0.8, size=n)
    x2 = rng.normal(220.0, 40.0, size=n)
    X = np.column_stack([np.ones(n), x1, x2])
    logits = X @ np.asarray(beta)
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-logits))).astype(float)
    return X, y


def test_irls_recovers_generator_within_two_se():
    beta_true = (0.12, 0.24, 0.001)
    X, y = synthetic_logistic_data(seed=12, beta=beta_true)
    result = logistic_irls(X, y)
    assert result.converged
    for b_hat, se, b_true in zip(result.coefficients, result.standard_errors, beta_true):
        assert abs(b_hat - b_true) <= 2.0 * se


def test_irls_matches_direct_likelihood_optimum():
    X, y = synthetic_logistic_data(seed=3, n=400)

    def nll(beta):
        z = X @ beta
        return float(np.sum(np.logaddexp(0.0, z) - y * z))

    def grad(beta):
        p = 1.0 / (1.0 + np.exp(-(X @ beta)))
        return X.T @ (p - y)

    direct = optimize.minimize(nll, np.zeros(3), jac=grad, method="BFGS", options={"gtol": 1e-10})
    result = logistic_irls(X, y)
    assert np.allclose(result.coefficients, direct.x, atol=1e-6)


def test_irls_gradient_vanishes_at_optimum():
    X, y = synthetic_logistic_data(seed=9, n=800)
    result = logistic_irls(X, y)
    p = 1.0 / (1.0 + np.exp(-(X @ np.asarray(result.coefficients))))
    grad = X.T @ (y - p)
    assert np.max(np.abs(grad)) < 1e-6


def test_irls_flags_separation():
    n = 60
    x = np.linspace(-2, 2, n)
    X = np.column_stack([np.ones(n), x])
    y = (x > 0).astype(float)  # perfectly separable
    with pytest.raises(Separation):
        logistic_irls(X, y)


def test_irls_singular_design():
    X, y = synthetic_logistic_data(seed=1, n=100)
    X_dup = np.column_stack([X, X[:, 1]])
    with pytest.raises(SingularDesign):
        logistic_irls(X_dup, y)


def test_irls_wald_outputs_well_formed():
    X, y = synthetic_logistic_data(seed=4, n=500)
    result = logistic_irls(X, y)
    assert len(result.coefficients) == len(result.standard_errors) == 3
    assert all(0.0 <= p <= 1.0 for p in result.p_values)
    assert all(se > 0 for se in result.standard_errors)
    assert result.se_method == "observed_fisher_information"
    assert result.p_method == "wald_normal"
    # z and p consistent: p = erfc(|z|/sqrt(2))
    from scipy import special

    for z, p in zip(result.z_stats, result.p_values):
        assert p == pytest.approx(float(special.erfc(abs(z) / math.sqrt(2.0))), abs=1e-12)
