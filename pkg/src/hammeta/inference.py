"""Large-sample inference for the shrinkage estimator and heterogeneity summaries.

The estimator at a fixed ray (c, pi_r) is the linear map
G = I + c Pi_r (K A(pi_r) - I) applied to the stacked study estimates, so its
covariance is G V G' with V the block-diagonal MLE covariance. Intervals and
tests condition on the selected ray (plug-in, no selection correction).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.stats

from .estimators import fixed_effect, mixing_matrix
from .model import MetaProblem, RayScale

__all__ = [
    "IntervalRow",
    "IntervalTable",
    "gradient_expectation",
    "ham_covariance",
    "centroid_covariance",
    "confidence_intervals",
    "wald_tests",
    "i_squared",
    "z_quantile",
]

CSV_COLUMNS = (
    "study_id",
    "covariate",
    "estimate",
    "se",
    "lower",
    "upper",
    "p_value",
    "significant",
)


def z_quantile(alpha: float) -> float:
    """Two-sided normal critical value z_{1 - alpha/2}."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return float(scipy.stats.norm.ppf(1.0 - alpha / 2.0))


def gradient_expectation(problem: MetaProblem, ray: RayScale) -> np.ndarray:
    """Expected-gradient map G = I + c Pi_r (K A(pi_r) - I), dense kp x kp.

    At c = 0 this is the identity (the fit is the stacked MLE). The map is
    linear in the stacked estimates, so it also equals the exact Jacobian of
    the fit at fixed (c, pi_r).
    """
    eye = np.eye(problem.pk)
    if ray.c == 0.0:
        return eye
    mix = mixing_matrix(problem, ray.pi_r)
    weights = np.repeat(ray.c * ray.pi_r, problem.p)
    return eye + weights[:, None] * mix.b


def ham_covariance(problem: MetaProblem, ray: RayScale) -> np.ndarray:
    """Covariance G V G' of the shrinkage estimator at a fixed ray."""
    g = gradient_expectation(problem, ray)
    v = scipy.linalg.block_diag(*problem.variance_blocks)
    return 0.5 * ((g @ v @ g.T) + (g @ v @ g.T).T)


def centroid_covariance(problem: MetaProblem, pi) -> np.ndarray:
    """Covariance of the centroid: S^{-1} (sum_j pi_j^2 W_j) S^{-1}."""
    pi = np.asarray(getattr(pi, "pi", pi), dtype=float).reshape(-1)
    if not np.any(pi > 0):
        raise ValueError("all-zero pi: no centroid defined")
    w = problem.precision_blocks
    s = np.einsum("j,jab->ab", pi, w)
    inner = np.einsum("j,jab->ab", pi * pi, w)
    sinv = np.linalg.solve(s, np.eye(problem.p))
    cov = sinv @ inner @ sinv
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class IntervalRow:
    study_id: str
    covariate: int
    estimate: float
    se: float
    lower: float
    upper: float
    p_value: float
    significant: bool | None


@dataclass(frozen=True)
class IntervalTable:
    """Per-coordinate intervals and tests, one row per study x covariate."""

    rows: tuple[IntervalRow, ...]
    alpha: float
    null_value: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow(
                    [
                        row.study_id,
                        row.covariate,
                        f"{row.estimate:.10g}",
                        f"{row.se:.10g}",
                        f"{row.lower:.10g}",
                        f"{row.upper:.10g}",
                        "NA" if math.isnan(row.p_value) else f"{row.p_value:.10g}",
                        "NA" if row.significant is None else str(row.significant).lower(),
                    ]
                )

    def significant_count(self) -> int:
        return sum(1 for row in self.rows if row.significant)


def _build_table(
    problem: MetaProblem,
    estimates: np.ndarray,
    variances: np.ndarray,
    alpha: float,
    null_value,
) -> IntervalTable:
    z = z_quantile(alpha)
    est = np.asarray(estimates, dtype=float).reshape(-1)
    if est.shape[0] != problem.pk:
        raise ValueError(f"estimates have length {est.shape[0]}, expected {problem.pk}")
    nulls = np.broadcast_to(np.asarray(null_value, dtype=float), est.shape)
    var = np.asarray(variances, dtype=float).reshape(-1)
    se = np.sqrt(np.maximum(var, 0.0))
    rows = []
    for idx in range(problem.pk):
        j, ell = divmod(idx, problem.p)
        if se[idx] > 0:
            zstat = (est[idx] - nulls[idx]) / se[idx]
            p_val = float(2.0 * scipy.stats.norm.sf(abs(zstat)))
            significant: bool | None = p_val < alpha
        else:
            # a zero standard error leaves the test undefined
            p_val = float("nan")
            significant = None
        rows.append(
            IntervalRow(
                study_id=problem.study_ids[j],
                covariate=ell,
                estimate=float(est[idx]),
                se=float(se[idx]),
                lower=float(est[idx] - z * se[idx]),
                upper=float(est[idx] + z * se[idx]),
                p_value=p_val,
                significant=significant,
            )
        )
    return IntervalTable(rows=tuple(rows), alpha=alpha, null_value=float(np.ravel(nulls)[0]))


def confidence_intervals(
    problem: MetaProblem,
    estimates: np.ndarray,
    covariance: np.ndarray,
    alpha: float = 0.05,
    null_value=0.0,
) -> IntervalTable:
    """Normal intervals estimate +/- z_{1-alpha/2} se per coordinate.

    ``covariance`` may be the dense kp x kp matrix or just its diagonal.
    p-values test the supplied null (default 0) and are dual to the
    intervals: significant exactly when the interval excludes the null.
    """
    cov = np.asarray(covariance, dtype=float)
    var = np.diag(cov) if cov.ndim == 2 else cov
    return _build_table(problem, estimates, var, alpha, null_value)


def wald_tests(
    problem: MetaProblem,
    estimates: np.ndarray,
    covariance: np.ndarray,
    null_value=0.0,
    alpha: float = 0.05,
) -> IntervalTable:
    """Per-coordinate normal tests of H0: coordinate = null_value."""
    return confidence_intervals(problem, estimates, covariance, alpha, null_value)


def i_squared(problem: MetaProblem) -> float:
    """Descriptive heterogeneity fraction on the coordinate-stacked scale.

    Q = sum_j (beta_tilde_j - fe)' W_j (beta_tilde_j - fe) with the precision
    weighted fixed-effect fit; I^2 = max(0, (Q - df) / Q) with df = p (k - 1).
    This is a heterogeneity description, not an input to the estimator.
    """
    if problem.k < 2:
        raise ValueError("i_squared needs at least two studies")
    fe, _ = fixed_effect(problem)
    resid = problem.beta_mat - fe[None, :]
    q_stat = float(np.einsum("ja,jab,jb->", resid, problem.precision_blocks, resid))
    if q_stat <= 0.0:
        return 0.0
    df = problem.p * (problem.k - 1)
    return max(0.0, (q_stat - df) / q_stat)
