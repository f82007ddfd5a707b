"""Data-driven tuning: shrinkage-vector search and ridge penalty selection.

The shrinkage vector minimizes the bias-corrected risk proxy over the box
[0, 1 - 1e-9]^k with a bounded Nelder-Mead search started at the optimal
equal-weight value (study estimates plugged in) plus jittered restarts. The
unoptimized start stays in the candidate pool, and candidates within a noise
floor of the best objective count as ties, resolved toward the smaller L1
norm (less borrowing). The floor exists because the proxy's sampling noise
makes tiny estimated-risk differences meaningless, and without it the search
latches onto near-degenerate weight vectors that saturate one study's weight
while displacing every estimate by a vanishing amount. The search never fails
hard: hitting the evaluation cap returns the best candidate with a warning
flag.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .estimators import HamFit, centroid, ham_beta, ridge_apply
from .inference import gradient_expectation, ham_covariance
from .model import MetaProblem, RayScale
from .risk import decompose, make_objective, risk_terms

__all__ = [
    "SelectionOptions",
    "SelectionResult",
    "LambdaResult",
    "select_pi_ham",
    "select_lambda_ridge",
    "fit_ham",
]

BOX_UPPER = 1.0 - 1e-9
ZERO_PI_TOL = 1e-12


@dataclass(frozen=True)
class SelectionOptions:
    """Knobs for the shrinkage search.

    tolerance is the objective-change stopping rule; max_iterations caps
    function evaluations per start; restarts adds jittered starting points
    around the equal-weight start; seed fixes the jitter. tie_margin_rel
    widens the tie-break for estimated
    criteria: candidates within tie_margin_rel * tr(Var(beta_tilde)) of the
    best objective count as ties and the least-borrowing (smallest L1) one
    wins. Differences below that floor are smaller than the risk proxy's own
    sampling noise, so they do not justify extra borrowing. The exact
    criterion ("true") keeps exact ties.
    """

    tolerance: float = 1e-8
    max_iterations: int = 2000
    restarts: int = 4
    box_upper: float = BOX_UPPER
    seed: int | None = None
    jitter: float = 0.25
    tie_margin_rel: float = 0.01


@dataclass(frozen=True)
class SelectionResult:
    pi: np.ndarray
    objective: float
    converged: bool
    warning: str | None
    start: np.ndarray
    start_value_unclamped: float
    n_evaluations: int
    criterion: str
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LambdaResult:
    lam: float
    objective: float
    converged: bool
    n_evaluations: int
    meta: dict = field(default_factory=dict)


def _equal_weight_start(problem: MetaProblem, criterion: str, beta_true) -> tuple[float, float]:
    """(clamped, unclamped) equal-weight starting value."""
    try:
        ones = np.ones(problem.k)
        if criterion == "true" and beta_true is not None:
            terms = risk_terms(problem, ones, beta_true)
            bias = terms.bias_norm2_true
        else:
            terms = risk_terms(problem, ones)
            bias = terms.bias_norm2_hat
        raw = -terms.tr_cov / (terms.tr_var + bias)
    except (ValueError, ZeroDivisionError, FloatingPointError):
        return 0.5, 0.5
    if not np.isfinite(raw):
        return 0.5, float(raw)
    return float(np.clip(raw, 1e-6, BOX_UPPER)), float(raw)


def select_pi_ham(
    problem: MetaProblem,
    options: SelectionOptions | None = None,
    *,
    criterion: str = "pseudo",
    pseudo_sign: str = "plus",
    beta_true=None,
) -> SelectionResult:
    """Minimize a risk proxy over shrinkage vectors in the box.

    criterion: "pseudo" (default), "umse", "bmse", or "true" (exact MSE,
    needs beta_true). A single study returns pi = 0 with a note: there is
    nothing to borrow.
    """
    opts = options or SelectionOptions()
    k = problem.k
    if k == 1:
        zero = np.zeros(1)
        return SelectionResult(
            pi=zero,
            objective=0.0,
            converged=True,
            warning=None,
            start=zero,
            start_value_unclamped=0.0,
            n_evaluations=0,
            criterion=criterion,
            meta={"note": "single study: nothing to borrow"},
        )
    objective = make_objective(
        problem, criterion, pseudo_sign=pseudo_sign, beta_true=beta_true
    )
    start_value, start_unclamped = _equal_weight_start(problem, criterion, beta_true)
    upper = min(opts.box_upper, BOX_UPPER)
    base = np.full(k, min(start_value, upper))
    rng = np.random.default_rng(opts.seed)
    starts = [base]
    for _ in range(max(opts.restarts, 0)):
        jitter = rng.uniform(-opts.jitter, opts.jitter, size=k)
        starts.append(np.clip(base + jitter, 0.0, upper))

    bounds = scipy.optimize.Bounds(np.zeros(k), np.full(k, upper))
    # the unoptimized equal-weight start stays in the candidate pool: it is
    # the least-borrowing theory point the noise-floor tie-break falls back to
    candidates = [
        (float(objective(base)), float(np.abs(base).sum()), base.copy(), False)
    ]
    total_evals = 1
    any_converged = False
    for x0 in starts:
        res = scipy.optimize.minimize(
            objective,
            x0,
            method="Nelder-Mead",
            bounds=bounds,
            options={
                "xatol": 1e-6,
                "fatol": opts.tolerance,
                "maxfev": opts.max_iterations,
                "maxiter": opts.max_iterations,
            },
        )
        total_evals += int(res.nfev)
        any_converged = any_converged or bool(res.success)
        pi_cand = np.clip(res.x, 0.0, upper)
        candidates.append((float(res.fun), float(np.abs(pi_cand).sum()), pi_cand, bool(res.success)))

    best_found = min(item[0] for item in candidates)
    margin = 0.0
    if criterion != "true":
        margin = max(opts.tie_margin_rel, 0.0) * problem.tr_var_mle
    eligible = [item for item in candidates if item[0] <= best_found + margin]
    best = min(eligible, key=lambda item: (item[1], item[0]))
    warning = None
    if not any_converged:
        warning = "evaluation cap reached before meeting tolerance; best candidate returned"
    return SelectionResult(
        pi=best[2],
        objective=best[0],
        converged=any_converged,
        warning=warning,
        start=base,
        start_value_unclamped=start_unclamped,
        n_evaluations=total_evals,
        criterion=criterion,
        meta={
            "candidate_objectives": tuple(c[0] for c in candidates),
            "objective_best_found": best_found,
        },
    )


def select_lambda_ridge(
    problem: MetaProblem, options: SelectionOptions | None = None
) -> LambdaResult:
    """Penalty weight minimizing ||(R - I) beta_tilde||^2 + tr((2R - I) V).

    Coarse log-spaced grid (with lambda = 0 included) followed by
    golden-section refinement around the grid minimizer. A single study gets
    lambda = 0. At lambda = 0 the objective equals the stacked MLE risk.
    """
    if problem.k == 1:
        return LambdaResult(
            lam=0.0,
            objective=problem.tr_var_mle,
            converged=True,
            n_evaluations=0,
            meta={"note": "single study: penalty has no effect"},
        )
    beta_mat = problem.beta_mat
    tr_v = problem.tr_var_mle
    evals = {"count": 0}

    def objective(lam: float) -> float:
        evals["count"] += 1
        beta_r, tr_inv = ridge_apply(problem, lam)
        err = beta_r - beta_mat
        return float(np.einsum("ja,ja->", err, err) + 2.0 * tr_inv - tr_v)

    # grid centred on the scale where the penalty shift matches the precisions
    mean_diag = float(np.einsum("jaa->", problem.precision_blocks)) / problem.pk
    lam_ref = max(mean_diag / (2.0 * problem.k), 1e-12)
    grid = np.concatenate(
        [[0.0], lam_ref * np.logspace(-6.0, 6.0, 49)]
    )
    values = np.array([objective(lam) for lam in grid])
    best_idx = int(np.argmin(values))
    lam_best = float(grid[best_idx])
    val_best = float(values[best_idx])
    if best_idx == 0:
        return LambdaResult(
            lam=0.0,
            objective=val_best,
            converged=True,
            n_evaluations=evals["count"],
            meta={"grid_minimum": lam_best},
        )
    lo = grid[best_idx - 1] if best_idx >= 2 else grid[1] * 1e-2
    hi = grid[best_idx + 1] if best_idx + 1 < grid.size else grid[best_idx] * 1e2
    mid = grid[best_idx]

    def log_objective(t: float) -> float:
        return objective(float(np.exp(t)))

    # evaluate the bracket through the same wrapper the refiner uses so the
    # strictness check below agrees bit for bit with scipy's own
    t_lo, t_mid, t_hi = np.log(lo), np.log(mid), np.log(hi)
    bracket_vals = (log_objective(t_lo), log_objective(t_mid), log_objective(t_hi))
    if bracket_vals[1] < bracket_vals[0] and bracket_vals[1] < bracket_vals[2]:
        try:
            res = scipy.optimize.minimize_scalar(
                log_objective,
                bracket=(t_lo, t_mid, t_hi),
                method="golden",
                options={"xtol": 1e-10},
            )
        except ValueError:
            res = None  # flat bracket: the grid minimum stands
        if res is not None:
            lam_ref_val = float(np.exp(res.x))
            if res.fun <= val_best:
                lam_best, val_best = lam_ref_val, float(res.fun)
            evals["count"] += int(res.nfev)
    if values[0] <= val_best:
        lam_best, val_best = 0.0, float(values[0])
    return LambdaResult(
        lam=lam_best,
        objective=val_best,
        converged=True,
        n_evaluations=evals["count"],
        meta={"grid_minimum": float(grid[best_idx])},
    )


def fit_ham(
    problem: MetaProblem,
    options: SelectionOptions | None = None,
    *,
    criterion: str = "pseudo",
    pseudo_sign: str = "plus",
    beta_true=None,
) -> HamFit:
    """Select the shrinkage vector and assemble the fitted estimator.

    Bundles the selected pi, its ray decomposition, the point estimate, the
    centroid, the expected-gradient map, and the plug-in covariance. With
    pi = 0 (including the single-study case) the fit is the stacked MLE and
    the ray is None.
    """
    started = time.perf_counter()
    sel = select_pi_ham(
        problem,
        options,
        criterion=criterion,
        pseudo_sign=pseudo_sign,
        beta_true=beta_true,
    )
    meta = {
        "criterion": criterion,
        "objective": sel.objective,
        "converged": sel.converged,
        "warning": sel.warning,
        "start": sel.start.tolist(),
        "start_value_unclamped": sel.start_value_unclamped,
        "n_evaluations": sel.n_evaluations,
        "pseudo_sign": pseudo_sign,
    }
    meta.update(sel.meta)
    pi = sel.pi
    if float(pi.max(initial=0.0)) <= ZERO_PI_TOL:
        eye = np.eye(problem.pk)
        cov = scipy.linalg.block_diag(*problem.variance_blocks)
        meta["note"] = meta.get("note", "selected pi = 0: fit equals the stacked MLE")
        meta["runtime_s"] = time.perf_counter() - started
        return HamFit(
            beta_hat=problem.beta_stacked.copy(),
            theta_hat=None,
            pi=np.zeros(problem.k),
            ray=None,
            gradient=eye,
            covariance=cov,
            meta=meta,
        )
    ray = decompose(pi)
    beta_hat = ham_beta(problem, pi)
    theta = centroid(problem, pi)
    grad = gradient_expectation(problem, ray)
    cov = ham_covariance(problem, ray)
    meta["runtime_s"] = time.perf_counter() - started
    return HamFit(
        beta_hat=beta_hat,
        theta_hat=theta,
        pi=pi,
        ray=ray,
        gradient=grad,
        covariance=cov,
        meta=meta,
    )
