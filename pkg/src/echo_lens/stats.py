"""Statistics primitives: AUROC, Cohen's d, Welch's t-test, IRLS logistic fit.

All functions are pure. AUROC uses the Mann-Whitney formulation with ties
counted 0.5, computed from integer pair counts so complement symmetry is
exact. Regression p-values use the Wald normal approximation; Welch p-values
use the Student-t CDF through the regularized incomplete beta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import (
    DegenerateVariance,
    EmptyClass,
    NonConvergence,
    Separation,
    SingularDesign,
    TooFewSamples,
)


def auroc(pos_scores, neg_scores) -> float:
    """Probability a positive outranks a negative; ties count one half.

    Equivalent to the normalized Mann-Whitney U statistic. Computed from
    exact win/tie pair counts, so auroc(a, b) + auroc(b, a) == 1 holds
    without floating error.
    """
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    if pos.size == 0 or neg.size == 0:
        raise EmptyClass("both score lists must be non-empty")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    below_or_equal = np.searchsorted(neg_sorted, pos, side="right")
    wins = int(below.sum())
    ties = int((below_or_equal - below).sum())
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def cohens_d(a, b) -> float:
    """Standardized mean difference with pooled (n-1) sample variances."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise TooFewSamples("need at least 2 samples per group")
    var_a = a.var(ddof=1)
    var_b = b.var(ddof=1)
    pooled = np.sqrt(((a.size - 1) * var_a + (b.size - 1) * var_b) / (a.size + b.size - 2))
    if pooled == 0.0:
        raise DegenerateVariance("pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / pooled)


def _student_t_sf_two_sided(t: float, dof: float) -> float:
    # two-sided tail of Student-t via the regularized incomplete beta
    if t == 0.0:
        return 1.0
    x = dof / (dof + t * t)
    return float(special.betainc(dof / 2.0, 0.5, x))


@dataclass(frozen=True)
class WelchResult:
    t: float
    dof: float
    p: float


def welch_t(a, b) -> WelchResult:
    """Welch's unequal-variance t-test with Welch-Satterthwaite dof."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise TooFewSamples("need at least 2 samples per group")
    var_a = a.var(ddof=1)
    var_b = b.var(ddof=1)
    if var_a == 0.0 and var_b == 0.0:
        raise DegenerateVariance("both group variances are zero")
    sq_a = var_a / a.size
    sq_b = var_b / b.size
    se2 = sq_a + sq_b
    t = float((a.mean() - b.mean()) / np.sqrt(se2))
    dof = float(se2**2 / (sq_a**2 / (a.size - 1) + sq_b**2 / (b.size - 1)))
    return WelchResult(t=t, dof=dof, p=_student_t_sf_two_sided(t, dof))


@dataclass(frozen=True)
class RegressionResult:
    coefficients: tuple[float, ...]
    standard_errors: tuple[float, ...]
    z_stats: tuple[float, ...]
    p_values: tuple[float, ...]
    converged: bool
    iterations: int
    se_method: str = "observed_fisher_information"
    p_method: str = "wald_normal"


_SEPARATION_BOUND = 50.0


def logistic_irls(X, y, tol: float = 1e-8, max_iter: int = 100) -> RegressionResult:
    """Newton/IRLS logistic regression with Wald inference.

    ``X`` must carry an explicit intercept column. Converges when the
    largest coefficient change falls below ``tol``. Standard errors come
    from the inverse observed Fisher information at the optimum.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d design matrix")
    n, k = X.shape
    if y.shape != (n,):
        raise ValueError("y must have one label per row of X")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0/1")
    if n <= k + 1:
        raise TooFewSamples(f"need more than {k + 1} samples for {k} columns")
    if np.linalg.matrix_rank(X) < k:
        raise SingularDesign("design matrix is rank deficient")

    beta = np.zeros(k)
    prev_step = np.inf
    for iteration in range(1, max_iter + 1):
        eta = np.clip(X @ beta, -700, 700)
        p = special.expit(eta)
        weights = p * (1.0 - p)
        grad = X.T @ (y - p)
        hessian = (X * weights[:, None]).T @ X
        try:
            step = np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError as exc:
            if np.max(np.abs(beta)) > _SEPARATION_BOUND:
                raise Separation("coefficients diverging; data looks separable") from exc
            raise SingularDesign("information matrix is singular") from exc
        beta = beta + step
        step_norm = float(np.max(np.abs(step)))
        if np.max(np.abs(beta)) > _SEPARATION_BOUND and step_norm >= prev_step:
            raise Separation("coefficients diverging; data looks separable")
        if step_norm < tol:
            break
        prev_step = step_norm
    else:
        raise NonConvergence(f"no convergence in {max_iter} iterations")

    p = special.expit(np.clip(X @ beta, -700, 700))
    weights = p * (1.0 - p)
    info = (X * weights[:, None]).T @ X
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign("observed information is singular at the optimum") from exc
    se = np.sqrt(np.diag(cov))
    z = beta / se
    p_values = special.erfc(np.abs(z) / np.sqrt(2.0))
    return RegressionResult(
        coefficients=tuple(float(b) for b in beta),
        standard_errors=tuple(float(s) for s in se),
        z_stats=tuple(float(v) for v in z),
        p_values=tuple(float(v) for v in p_values),
        converged=True,
        iterations=iteration,
    )
