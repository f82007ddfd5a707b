"""Risk decomposition, oracle tuning quantities, and estimable risk proxies.

For the shrinkage estimator written as beta_hat(pi) = beta_tilde +
Pi B(pi) beta_tilde with B = K A - I, the exact mean squared error splits as

    MSE(pi) = ||Pi B beta||^2 + tr(Pi B V B' Pi) + 2 tr(Pi B V) + tr(V)

with V the stacked MLE covariance. All four pieces reduce to k small-matrix
traces through S(pi) = sum_j pi_j W_j:

    (B v)_j = centroid(pi; v) - v_j,
    tr(Pi B V)        = tr(S^-1) sum pi_j^2 - sum_j pi_j tr(W_j^-1),
    tr(Pi B V B' Pi)  = (sum pi_j^2)(sum_j pi_j^2 tr(S^-1 W_j S^-1))
                        - 2 tr(S^-1) sum pi_j^3 + sum_j pi_j^2 tr(W_j^-1),

so each evaluation costs O(k p^3) without assembling kp x kp operators. The
dense route exists in the test suite as an independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .model import MetaProblem, RayScale

__all__ = [
    "RiskTerms",
    "risk_terms",
    "true_mse",
    "mse_in_c",
    "c_star",
    "pi_star_equal",
    "decompose",
    "bmse",
    "umse",
    "pseudo_mse",
    "make_objective",
]

ZERO_PI_TOL = 1e-12
DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class RiskTerms:
    """Components of the MSE decomposition at a fixed shrinkage vector.

    ``bias_norm2_hat`` plugs the study estimates into the bias norm;
    ``bias_norm2_true`` is present only when the true coefficients were
    supplied. ``tr_var_mle`` does not depend on pi and equals the stacked
    MLE risk.
    """

    pi: np.ndarray
    tr_cov: float
    tr_var: float
    bias_norm2_hat: float
    tr_var_mle: float
    bias_norm2_true: float | None = None


def _pi_array(problem: MetaProblem, pi) -> np.ndarray:
    if isinstance(pi, RayScale):
        pi = pi.pi
    arr = np.asarray(getattr(pi, "pi", pi), dtype=float).reshape(-1)
    if arr.shape[0] != problem.k:
        raise ValueError(f"pi has length {arr.shape[0]}, expected k={problem.k}")
    return arr


def _core(
    problem: MetaProblem, pi: np.ndarray, beta_true: np.ndarray | None
) -> tuple[float, float, float, float | None]:
    """(bias_norm2_hat, tr_cov, tr_var, bias_norm2_true) at pi."""
    if float(pi.max(initial=0.0)) <= ZERO_PI_TOL:
        return 0.0, 0.0, 0.0, (0.0 if beta_true is not None else None)
    pi2 = pi * pi
    p2 = float(pi2.sum())
    p3 = float((pi2 * pi).sum())
    w = problem.precision_blocks
    trv = problem.variance_traces
    if problem.p == 1:
        wv = w[:, 0, 0]
        s = float(pi @ wv)
        theta = float(pi @ (wv * problem.beta_mat[:, 0])) / s
        resid2 = (theta - problem.beta_mat[:, 0]) ** 2
        bias_hat = float(pi2 @ resid2)
        tr_sinv = 1.0 / s
        t2 = float(pi2 @ wv) / (s * s)
        bias_true = None
        if beta_true is not None:
            bt = beta_true.reshape(-1)
            theta_t = float(pi @ (wv * bt)) / s
            bias_true = float(pi2 @ (theta_t - bt) ** 2)
    else:
        s = np.einsum("j,jab->ab", pi, w)
        factor = scipy.linalg.cho_factor(s, lower=True, check_finite=False)
        theta = scipy.linalg.cho_solve(
            factor, pi @ problem.precision_rhs, check_finite=False
        )
        sinv = scipy.linalg.cho_solve(
            factor, np.eye(problem.p), check_finite=False
        )
        resid = theta[None, :] - problem.beta_mat
        bias_hat = float(pi2 @ np.einsum("ja,ja->j", resid, resid))
        tr_sinv = float(np.trace(sinv))
        t2 = float(pi2 @ np.einsum("ab,jbc,ca->j", sinv, w, sinv))
        bias_true = None
        if beta_true is not None:
            bt = np.asarray(beta_true, dtype=float).reshape(problem.k, problem.p)
            rhs_t = np.einsum("j,jab,jb->a", pi, w, bt)
            theta_t = scipy.linalg.cho_solve(factor, rhs_t, check_finite=False)
            resid_t = theta_t[None, :] - bt
            bias_true = float(pi2 @ np.einsum("ja,ja->j", resid_t, resid_t))
    tr_cov = tr_sinv * p2 - float(pi @ trv)
    tr_var = p2 * t2 - 2.0 * tr_sinv * p3 + float(pi2 @ trv)
    return bias_hat, tr_cov, tr_var, bias_true


def risk_terms(problem: MetaProblem, pi, beta_true=None) -> RiskTerms:
    """All MSE components at ``pi`` (a vector, ShrinkageVector, or RayScale).

    ``beta_true`` (stacked or (k, p)) additionally fills the oracle bias norm.
    """
    pi = _pi_array(problem, pi)
    bt = None if beta_true is None else np.asarray(beta_true, dtype=float)
    bias_hat, tr_cov, tr_var, bias_true = _core(problem, pi, bt)
    return RiskTerms(
        pi=pi,
        tr_cov=tr_cov,
        tr_var=tr_var,
        bias_norm2_hat=bias_hat,
        tr_var_mle=problem.tr_var_mle,
        bias_norm2_true=bias_true,
    )


def true_mse(problem: MetaProblem, pi, beta_true) -> float:
    """Exact MSE at pi given the true coefficients (designs and sigma2 fixed)."""
    terms = risk_terms(problem, pi, beta_true)
    return (
        terms.bias_norm2_true + terms.tr_var + 2.0 * terms.tr_cov + terms.tr_var_mle
    )


def _ray_direction(problem: MetaProblem, pi_r) -> np.ndarray:
    if isinstance(pi_r, RayScale):
        return np.asarray(pi_r.pi_r, dtype=float)
    arr = _pi_array(problem, pi_r)
    if abs(float(arr.max(initial=0.0)) - 1.0) > 1e-12:
        raise ValueError("ray direction must have maximum entry 1")
    return arr


def mse_in_c(problem: MetaProblem, pi_r, beta_true) -> tuple[float, float, float]:
    """Coefficients (a, b, const) of MSE(c * pi_r) = a c^2 + b c + const.

    a = tr_var(pi_r) + ||Pi_r B beta||^2, b = 2 tr_cov(pi_r), and const is the
    stacked MLE risk; both bias and variance-reduction terms follow exact
    power laws along the ray.
    """
    direction = _ray_direction(problem, pi_r)
    terms = risk_terms(problem, direction, beta_true)
    a = terms.tr_var + terms.bias_norm2_true
    b = 2.0 * terms.tr_cov
    return a, b, terms.tr_var_mle


def _degenerate_ray(direction: np.ndarray) -> bool:
    big = direction >= 1.0 - DEGENERATE_TOL
    small = direction < DEGENERATE_TOL
    return bool(big.sum() == 1 and (big | small).all())


def c_star(problem: MetaProblem, pi_r, beta_true) -> float:
    """Oracle ray scale minimizing MSE(c * pi_r), clamped to [0, 1].

    Raises ValueError on a degenerate ray (a single unit entry, the rest
    zero), where the estimator equals the stacked MLE for every c.
    """
    direction = _ray_direction(problem, pi_r)
    if _degenerate_ray(direction):
        raise ValueError(
            "degenerate ray: estimator equals the stacked MLE along this direction"
        )
    terms = risk_terms(problem, direction, beta_true)
    denom = terms.tr_var + terms.bias_norm2_true
    if denom <= 0.0:
        raise ValueError("ray has no curvature: estimator equals the stacked MLE")
    return min(-terms.tr_cov / denom, 1.0)


def pi_star_equal(problem: MetaProblem, beta_true=None) -> float:
    """Optimal equal shrinkage weight, clamped to [0, 1].

    Evaluates -tr_cov / (tr_var + bias) on the equal-weights ray pi_r = 1.
    With beta_true omitted the study estimates are plugged into the bias norm,
    which is the data-driven starting value used by selection.
    """
    if problem.k == 1:
        raise ValueError("k = 1: no borrowing direction, equal weight undefined")
    ones = np.ones(problem.k)
    if beta_true is None:
        terms = risk_terms(problem, ones)
        bias = terms.bias_norm2_hat
    else:
        terms = risk_terms(problem, ones, beta_true)
        bias = terms.bias_norm2_true
    denom = terms.tr_var + bias
    if denom <= 0.0:
        raise ValueError("no curvature on the equal-weights ray")
    return float(np.clip(-terms.tr_cov / denom, 0.0, 1.0))


def decompose(pi) -> RayScale:
    """Split pi into scale and direction: pi = c * pi_r with max(pi_r) = 1."""
    arr = np.asarray(getattr(pi, "pi", pi), dtype=float).reshape(-1)
    c = float(arr.max(initial=0.0))
    if c <= 0.0:
        raise ValueError("all-zero pi has no ray decomposition")
    return RayScale(c=c, pi_r=arr / c)


def bmse(problem: MetaProblem, pi) -> float:
    """Plug-in risk proxy: bias_hat + tr_var + 2 tr_cov + tr_var_mle.

    Overstates the MSE by tr_var in expectation (the plug-in bias norm picks
    up the variance of the displacement).
    """
    terms = risk_terms(problem, pi)
    return (
        terms.bias_norm2_hat + terms.tr_var + 2.0 * terms.tr_cov + terms.tr_var_mle
    )


def umse(problem: MetaProblem, pi) -> float:
    """Unbiased risk proxy: bias_hat + 2 tr_cov + tr_var_mle.

    Accepts a RayScale, in which case the exact ray scaling
    c^2 bias_hat(pi_r) + 2 c tr_cov(pi_r) + tr_var_mle is used.
    """
    if isinstance(pi, RayScale):
        terms = risk_terms(problem, pi.pi_r)
        c = pi.c
        return (
            c * c * terms.bias_norm2_hat + 2.0 * c * terms.tr_cov + terms.tr_var_mle
        )
    terms = risk_terms(problem, pi)
    return terms.bias_norm2_hat + 2.0 * terms.tr_cov + terms.tr_var_mle


def pseudo_mse(problem: MetaProblem, pi, *, pseudo_sign: str = "plus") -> float:
    """Bias-corrected selection objective.

    O(pi) = bias_hat + 2 bias_hat tr_cov / (tr_var + bias_hat), zero at pi = 0
    and defined as zero whenever the denominator vanishes. pseudo_sign="plus"
    (default) adds the correction term as derived; "minus" subtracts it (kept
    for sensitivity analysis, it removes the interior minimum along rays
    because tr_cov is negative).
    """
    if pseudo_sign not in ("plus", "minus"):
        raise ValueError(f"unknown pseudo_sign {pseudo_sign!r}")
    pi = _pi_array(problem, pi if not isinstance(pi, RayScale) else pi.pi)
    bias_hat, tr_cov, tr_var, _ = _core(problem, pi, None)
    denom = tr_var + bias_hat
    if denom <= 0.0:
        return 0.0
    corr = 2.0 * bias_hat * tr_cov / denom
    return bias_hat + corr if pseudo_sign == "plus" else bias_hat - corr


def make_objective(
    problem: MetaProblem,
    criterion: str = "pseudo",
    *,
    pseudo_sign: str = "plus",
    beta_true=None,
) -> Callable[[np.ndarray], float]:
    """Fast callable pi -> objective for the selection optimizer.

    criterion is one of "pseudo", "umse", "bmse", "true"; the last needs
    beta_true and evaluates the exact MSE.
    """
    if criterion not in ("pseudo", "umse", "bmse", "true"):
        raise ValueError(f"unknown selection criterion {criterion!r}")
    if criterion == "true":
        if beta_true is None:
            raise ValueError("criterion 'true' needs beta_true")
        bt = np.asarray(beta_true, dtype=float)
    if pseudo_sign not in ("plus", "minus"):
        raise ValueError(f"unknown pseudo_sign {pseudo_sign!r}")
    tr_var_mle = problem.tr_var_mle
    sign = 1.0 if pseudo_sign == "plus" else -1.0

    def objective(pi: np.ndarray) -> float:
        pi = np.asarray(pi, dtype=float)
        if criterion == "true":
            bias_hat, tr_cov, tr_var, bias_true = _core(problem, pi, bt)
            return bias_true + tr_var + 2.0 * tr_cov + tr_var_mle
        bias_hat, tr_cov, tr_var, _ = _core(problem, pi, None)
        if criterion == "umse":
            return bias_hat + 2.0 * tr_cov + tr_var_mle
        if criterion == "bmse":
            return bias_hat + tr_var + 2.0 * tr_cov + tr_var_mle
        denom = tr_var + bias_hat
        if denom <= 0.0:
            return 0.0
        return bias_hat + sign * 2.0 * bias_hat * tr_cov / denom

    return objective
