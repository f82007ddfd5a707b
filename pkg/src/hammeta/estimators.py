"""Closed-form estimators: stacked MLE, fixed-effect, shrinkage, and ridge.

The shrinkage estimator moves each study estimate toward a precision-weighted
centroid: beta_hat_j = (1 - pi_j) beta_tilde_j + pi_j * theta_hat(pi). Its
stacked form is beta_tilde + Pi (K A(pi) - I) beta_tilde, where block j of
A(pi) is (sum_l pi_l W_l)^{-1} pi_j W_j and K stacks k copies of I_p.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._linalg import inv_pd, solve_pd, symmetrize
from .model import InputError, MetaProblem, RayScale

__all__ = [
    "MixingStructure",
    "HamFit",
    "RidgeFit",
    "mle_stack",
    "fixed_effect",
    "mixing_matrix",
    "centroid",
    "ham_beta",
    "objective_value",
    "objective_gradient",
    "ridge_apply",
    "ridge_fit",
]


def _pi_vector(problem: MetaProblem, pi) -> np.ndarray:
    arr = np.asarray(getattr(pi, "pi", pi), dtype=float).reshape(-1)
    if arr.shape[0] != problem.k:
        raise ValueError(f"pi has length {arr.shape[0]}, expected k={problem.k}")
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError("pi entries must lie in [0, 1]")
    return arr


def stack_k(problem: MetaProblem) -> np.ndarray:
    """K = 1_k (x) I_p, shape (k*p, p)."""
    return np.tile(np.eye(problem.p), (problem.k, 1))


@dataclass(frozen=True)
class MixingStructure:
    """Dense mixing operators for a given shrinkage vector.

    ``a`` is the p x kp matrix mapping stacked estimates to the centroid;
    ``b = K a - I`` is the kp x kp displacement operator. ``a_blocks[j]``
    is the p x p block of ``a`` acting on study j.
    """

    pi: np.ndarray
    a_blocks: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @property
    def k(self) -> int:
        return self.a_blocks.shape[0]

    @property
    def p(self) -> int:
        return self.a_blocks.shape[1]


def mixing_matrix(problem: MetaProblem, pi) -> MixingStructure:
    """Assemble A(pi) and B(pi) = K A(pi) - I densely.

    Raises ValueError for an all-zero pi, where no centroid is defined.
    A(pi) is invariant to positive rescaling of pi.
    """
    pi = _pi_vector(problem, pi)
    if not np.any(pi > 0):
        raise ValueError("all-zero pi: no centroid defined")
    s = np.einsum("j,jab->ab", pi, problem.precision_blocks)
    a_blocks = np.stack(
        [solve_pd(s, pi[j] * problem.precision_blocks[j]) for j in range(problem.k)]
    )
    a = np.hstack(list(a_blocks))
    b = stack_k(problem) @ a - np.eye(problem.pk)
    return MixingStructure(pi=pi, a_blocks=a_blocks, a=a, b=b)


def mle_stack(problem: MetaProblem) -> tuple[np.ndarray, np.ndarray]:
    """Stacked study-by-study estimates and their block-diagonal covariance."""
    cov = scipy.linalg.block_diag(*problem.variance_blocks)
    return problem.beta_stacked.copy(), cov


def fixed_effect(problem: MetaProblem) -> tuple[np.ndarray, np.ndarray]:
    """Precision-weighted common-coefficient estimate and its covariance."""
    s = problem.precision_blocks.sum(axis=0)
    est = solve_pd(s, problem.precision_rhs.sum(axis=0))
    return est, inv_pd(s)


def centroid(problem: MetaProblem, pi, beta_mat: np.ndarray | None = None) -> np.ndarray:
    """theta_hat(pi) = (sum_j pi_j W_j)^{-1} sum_j pi_j W_j beta_tilde_j.

    With all weights equal this is the fixed-effect estimate; with a single
    positive weight it returns that study's estimate. ``beta_mat`` substitutes
    other study-level vectors (used for bias terms at the true coefficients).
    """
    pi = _pi_vector(problem, pi)
    if not np.any(pi > 0):
        raise ValueError("all-zero pi: no centroid defined")
    s = np.einsum("j,jab->ab", pi, problem.precision_blocks)
    if beta_mat is None:
        rhs = pi @ problem.precision_rhs
    else:
        beta_mat = np.asarray(beta_mat, dtype=float).reshape(problem.k, problem.p)
        rhs = np.einsum("j,jab,jb->a", pi, problem.precision_blocks, beta_mat)
    return solve_pd(s, rhs)


def ham_beta(problem: MetaProblem, pi) -> np.ndarray:
    """Stacked shrinkage estimate at a given pi.

    beta_hat_j = (1 - pi_j) beta_tilde_j + pi_j theta_hat(pi); an all-zero pi
    returns the stacked MLE unchanged.
    """
    pi = _pi_vector(problem, pi)
    if not np.any(pi > 0):
        return problem.beta_stacked.copy()
    theta = centroid(problem, pi)
    out = (1.0 - pi)[:, None] * problem.beta_mat + pi[:, None] * theta[None, :]
    return out.reshape(-1)


def objective_value(problem: MetaProblem, beta, theta, pi) -> float:
    """Penalized log-likelihood whose maximizer is the shrinkage estimator.

    Written in summary-statistic form: the data term for study j is
    -(rss_j + (beta_j - beta_tilde_j)' gram_j (beta_j - beta_tilde_j)) / (2 sigma2_j)
    and the penalty is -(pi_j / (1 - pi_j)) (beta_j - theta)' gram_j
    (beta_j - theta) / (2 sigma2_j). Any pi_j = 1 is rejected (the penalty
    weight diverges). Studies without a stored rss contribute no constant
    term, which shifts the value but not the maximizer.
    """
    pi = _pi_vector(problem, pi)
    if np.any(pi >= 1.0):
        raise ValueError("objective undefined at pi_j = 1 (infinite penalty weight)")
    beta = np.asarray(beta, dtype=float).reshape(problem.k, problem.p)
    theta = np.asarray(theta, dtype=float).reshape(problem.p)
    w = problem.precision_blocks
    d = beta - problem.beta_mat
    e = beta - theta[None, :]
    weight = pi / (1.0 - pi)
    data_term = -0.5 * np.einsum("ja,jab,jb->", d, w, d)
    penalty = -0.5 * np.einsum("j,ja,jab,jb->", weight, e, w, e)
    const = -0.5 * sum(
        (st.rss / st.sigma2) for st in problem.studies if st.rss is not None
    )
    return float(const + data_term + penalty)


def objective_gradient(problem: MetaProblem, beta, theta, pi) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`objective_value` in (beta, theta)."""
    pi = _pi_vector(problem, pi)
    if np.any(pi >= 1.0):
        raise ValueError("objective undefined at pi_j = 1 (infinite penalty weight)")
    beta = np.asarray(beta, dtype=float).reshape(problem.k, problem.p)
    theta = np.asarray(theta, dtype=float).reshape(problem.p)
    w = problem.precision_blocks
    d = np.einsum("jab,jb->ja", w, beta - problem.beta_mat)
    e = np.einsum("jab,jb->ja", w, beta - theta[None, :])
    weight = (pi / (1.0 - pi))[:, None]
    grad_beta = -(d + weight * e)
    grad_theta = (weight * e).sum(axis=0)
    return grad_beta, grad_theta


@dataclass(frozen=True)
class HamFit:
    """Fitted shrinkage estimator with its inference pieces.

    ``gradient`` is the expected-gradient map G used for the covariance; both
    are dense kp x kp. ``ray`` is the (c, pi_r) decomposition of ``pi`` and is
    None when pi = 0 (no borrowing, the fit equals the stacked MLE).
    """

    beta_hat: np.ndarray
    theta_hat: np.ndarray | None
    pi: np.ndarray
    ray: RayScale | None
    gradient: np.ndarray
    covariance: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RidgeFit:
    """Ridge-type competitor fit: beta_r = R(lambda) beta_tilde."""

    lam: float
    beta_r: np.ndarray
    r: np.ndarray
    meta: dict = field(default_factory=dict)


def _ridge_blocks(problem: MetaProblem, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-study inverses G_j^{-1} = (W_j + 2 lam k I)^{-1} and the coupling
    matrix (I - 2 lam sum_j G_j^{-1})^{-1} from the Woodbury identity for
    blockdiag(G_j) - 2 lam K K'."""
    k, p = problem.k, problem.p
    shift = 2.0 * lam * k
    ginv = np.stack(
        [inv_pd(problem.precision_blocks[j] + shift * np.eye(p)) for j in range(k)]
    )
    inner = np.eye(p) - 2.0 * lam * ginv.sum(axis=0)
    coupling = np.linalg.solve(inner, np.eye(p))
    return ginv, coupling


def ridge_apply(problem: MetaProblem, lam: float) -> tuple[np.ndarray, float]:
    """R(lambda) beta_tilde as a (k, p) array, plus tr(R(lambda) V).

    Uses the identity X'Sigma^{-1}X + 2 lam (CC' (x) I_p) =
    blockdiag(W_j + 2 lam k I) - 2 lam K K' with CC' = k I - 11', solved by a
    Woodbury-style block inversion; tr(R V) equals the trace of that inverse.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0.0 or problem.k == 1:
        return problem.beta_mat.copy(), problem.tr_var_mle
    ginv, coupling = _ridge_blocks(problem, lam)
    u = np.einsum("jab,jb->ja", ginv, problem.precision_rhs)
    t = coupling @ u.sum(axis=0)
    beta_r = u + 2.0 * lam * np.einsum("jab,b->ja", ginv, t)
    g2 = np.einsum("jab,jbc->ac", ginv, ginv)
    tr_inv = float(np.einsum("jaa->", ginv) + 2.0 * lam * np.trace(coupling @ g2))
    return beta_r, tr_inv


def ridge_fit(problem: MetaProblem, lam: float) -> RidgeFit:
    """Ridge-type fit with the dense shrinkage operator R(lambda) assembled.

    lambda = 0 (and the single-study case) returns the stacked MLE with
    R = I. The penalty couples studies through CC' = k I_k - 1_k 1_k',
    assembled directly rather than from an explicit contrast matrix.
    """
    k, p = problem.k, problem.p
    beta_r, _ = ridge_apply(problem, lam)
    if lam == 0.0 or k == 1:
        r = np.eye(problem.pk)
    else:
        ginv, coupling = _ridge_blocks(problem, lam)
        r = np.zeros((problem.pk, problem.pk))
        for i in range(k):
            left = 2.0 * lam * (ginv[i] @ coupling)
            for j in range(k):
                block = left @ ginv[j]
                if i == j:
                    block = block + ginv[i]
                r[i * p : (i + 1) * p, j * p : (j + 1) * p] = block @ problem.precision_blocks[j]
    return RidgeFit(lam=float(lam), beta_r=beta_r.reshape(-1), r=r)
