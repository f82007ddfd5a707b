"""Command line interface: fit, simulate, check, and compare workflows.

Exit codes: 0 on success, 1 on input/schema problems, 2 when a verification
suite fails. The effective configuration of every run is echoed to
``config_used.json`` in the output directory; feeding that file back through
``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import sim as simmod
from .estimators import (
    centroid,
    fixed_effect,
    ham_beta,
    mle_stack,
    objective_gradient,
    objective_value,
    ridge_fit,
)
from .inference import (
    IntervalTable,
    centroid_covariance,
    confidence_intervals,
    i_squared,
    z_quantile,
)
from .model import InputError, MetaProblem, StudySummary, load_meta_problem, standardize
from .risk import c_star, mse_in_c, pi_star_equal, pseudo_mse, risk_terms, true_mse
from .selection import SelectionOptions, fit_ham, select_lambda_ridge

SETTING_ALIASES = {
    "1": "S1",
    "2": "S2",
    "3": "S3",
    "4": "S4",
    "s1": "S1",
    "s2": "S2",
    "s3": "S3",
    "s4": "S4",
    "k": "K",
}

ESTIMATOR_ALIASES = {name.lower(): name for name in simmod.ESTIMATOR_CHOICES}


class _Parser(argparse.ArgumentParser):
    """Argument errors are input errors: exit 1, not argparse's default 2."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--output-dir", default=None, help="directory for artifacts")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--threads", type=int, default=None, help="worker processes (or HAM_THREADS)")
    parser.add_argument("--alpha", type=float, default=None, help="two-sided interval level")
    parser.add_argument("--config", default=None, help="JSON file with defaults for these options")
    parser.add_argument(
        "--standardize",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="standardize covariate scales before fitting",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="ham", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", parents=[], help="fit estimators to an input document")
    p_fit.add_argument("--input", required=True, help="JSON problem document")
    p_fit.add_argument(
        "--estimator",
        default=None,
        choices=["ham", "mle", "fe", "ridge"],
        help="which estimator to report (default ham)",
    )
    p_fit.add_argument(
        "--pseudo-sign",
        default=None,
        choices=["plus", "minus"],
        help="sign convention for the selection objective's correction term",
    )
    _add_common(p_fit)

    p_sim = sub.add_parser("simulate", help="run Monte-Carlo cells")
    p_sim.add_argument("--setting", default=None, help="S1, S2, S3, S4, or K")
    p_sim.add_argument("--reps", type=int, default=None, help="replicates per cell")
    p_sim.add_argument("--estimators", nargs="+", default=None, help="estimator names")
    p_sim.add_argument("--cells", nargs="+", default=None, help="restrict to these cell ids")
    p_sim.add_argument("--p", type=int, nargs="+", default=None, help="S1 dimensions")
    p_sim.add_argument("--k", type=int, nargs="+", default=None, help="S2 study counts")
    p_sim.add_argument("--het", nargs="+", default=None, help="S2 heterogeneity levels")
    p_sim.add_argument("--scenario", nargs="+", default=None, help="S3/S4 scenarios")
    p_sim.add_argument("--n", type=int, nargs="+", default=None, help="S4 sample sizes")
    p_sim.add_argument(
        "--sizes", nargs="+", default=None, help="size combos like 100,100,300 (S1 and K)"
    )
    p_sim.add_argument(
        "--emit-plot-data",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="also write tidy per-replicate values",
    )
    _add_common(p_sim)

    p_check = sub.add_parser("check", help="run verification suites")
    p_check.add_argument(
        "--suite",
        default=None,
        choices=["all", "oracle", "improvement", "window", "calibration"],
        help="which suite to run (default all)",
    )
    p_check.add_argument("--instances", type=int, default=None, help="random instances per suite")
    p_check.add_argument(
        "--pseudo-sign",
        default=None,
        choices=["plus", "minus"],
        help="sign convention under test",
    )
    _add_common(p_check)

    p_cmp = sub.add_parser("compare", help="side-by-side estimator comparison")
    p_cmp.add_argument("--input", required=True, help="JSON problem document")
    p_cmp.add_argument(
        "--pseudo-sign",
        default=None,
        choices=["plus", "minus"],
        help="sign convention for the selection objective's correction term",
    )
    _add_common(p_cmp)
    return parser


def _apply_config_file(args: argparse.Namespace) -> None:
    if not getattr(args, "config", None):
        return
    try:
        with open(args.config) as handle:
            conf = json.load(handle)
    except OSError as exc:
        raise InputError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(conf, dict):
        raise InputError("config file must hold a JSON object")
    for key, value in conf.items():
        attr = key.replace("-", "_")
        if attr == "command":
            continue
        if hasattr(args, attr) and getattr(args, attr) is None:
            if attr == "sizes" and isinstance(value, list):
                value = [",".join(str(v) for v in combo) if isinstance(combo, list) else combo for combo in value]
            setattr(args, attr, value)


def _fill_defaults(args: argparse.Namespace) -> None:
    if getattr(args, "output_dir", None) is None:
        args.output_dir = "."
    if getattr(args, "seed", None) is None:
        args.seed = 0
    if getattr(args, "alpha", None) is None:
        args.alpha = 0.05
    if getattr(args, "threads", None) is None:
        env = os.environ.get("HAM_THREADS", "")
        args.threads = int(env) if env.strip().isdigit() else 1
    if getattr(args, "standardize", None) is None:
        args.standardize = False
    for attr, value in (
        ("estimator", "ham"),
        ("pseudo_sign", "plus"),
        ("suite", "all"),
        ("reps", 1000),
        ("emit_plot_data", False),
    ):
        if hasattr(args, attr) and getattr(args, attr) is None:
            setattr(args, attr, value)


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=1, sort_keys=True)
        handle.write("\n")


def _echo_config(args: argparse.Namespace, keys: list[str]) -> dict:
    payload = {"command": args.command}
    for key in keys:
        payload[key] = getattr(args, key)
    return payload


# ---------------------------------------------------------------------------
# fit


def _interval_payload(table: IntervalTable) -> list[dict]:
    return [
        {
            "study_id": row.study_id,
            "covariate": row.covariate,
            "estimate": row.estimate,
            "se": row.se,
            "lower": row.lower,
            "upper": row.upper,
        }
        for row in table.rows
    ]


def cmd_fit(args: argparse.Namespace) -> int:
    problem = load_meta_problem(args.input)
    os.makedirs(args.output_dir, exist_ok=True)
    record = None
    fitted_problem = problem
    if args.standardize:
        fitted_problem, record = standardize(problem)
    if problem.k == 1:
        print("warning: single study, nothing to borrow; fit equals the study MLE", file=sys.stderr)

    started = time.perf_counter()
    diagnostics: dict = {
        "estimator": args.estimator,
        "alpha": args.alpha,
        "standardize": bool(args.standardize),
        "k": problem.k,
        "p": problem.p,
    }
    pi = np.zeros(problem.k)
    theta = None
    table = None
    if args.estimator == "ham":
        fit = fit_ham(
            fitted_problem,
            SelectionOptions(seed=args.seed),
            pseudo_sign=args.pseudo_sign,
        )
        estimates = fit.beta_hat
        variances = np.diag(fit.covariance)
        pi = fit.pi
        theta = fit.theta_hat
        diagnostics["selection"] = {
            key: fit.meta.get(key)
            for key in (
                "objective",
                "converged",
                "warning",
                "start",
                "start_value_unclamped",
                "n_evaluations",
                "pseudo_sign",
                "note",
            )
        }
        diagnostics["ray_scale"] = None if fit.ray is None else fit.ray.c
    elif args.estimator == "mle":
        estimates, cov = mle_stack(fitted_problem)
        variances = np.diag(cov)
    elif args.estimator == "fe":
        fe, fe_cov = fixed_effect(fitted_problem)
        estimates = np.tile(fe, problem.k)
        variances = np.tile(np.diag(fe_cov), problem.k)
        theta = fe
    else:  # ridge
        lam_res = select_lambda_ridge(fitted_problem)
        rfit = ridge_fit(fitted_problem, lam_res.lam)
        estimates = rfit.beta_r
        variances = None
        diagnostics["lambda"] = lam_res.lam
        diagnostics["lambda_objective"] = lam_res.objective

    if record is not None:
        scales = record.scales.reshape(-1)
        estimates = estimates / scales
        if variances is not None:
            variances = variances / scales**2

    if variances is not None:
        table = confidence_intervals(problem, estimates, variances, alpha=args.alpha)
        table.to_csv(os.path.join(args.output_dir, "intervals.csv"))

    fit_path = os.path.join(args.output_dir, "fit.csv")
    with open(fit_path, "w") as handle:
        handle.write("study_id,covariate,estimate,pi\n")
        est_mat = np.asarray(estimates, dtype=float).reshape(problem.k, problem.p)
        for j, sid in enumerate(problem.study_ids):
            for ell in range(problem.p):
                handle.write(f"{sid},{ell},{est_mat[j, ell]:.10g},{pi[j]:.6g}\n")
        if theta is not None:
            for ell in range(problem.p):
                handle.write(f"__centroid__,{ell},{theta[ell]:.10g},\n")

    if problem.k >= 2:
        diagnostics["i_squared"] = i_squared(problem)
        diagnostics["i_squared_percent"] = 100.0 * diagnostics["i_squared"]
    diagnostics["pi"] = [float(v) for v in pi]
    if theta is not None:
        note = " (standardized scale)" if record is not None else ""
        diagnostics["centroid_note"] = f"synthesis summary at the selected weights{note}"
    diagnostics["runtime_s"] = time.perf_counter() - started
    _write_json(os.path.join(args.output_dir, "diagnostics.json"), diagnostics)
    _write_json(
        os.path.join(args.output_dir, "config_used.json"),
        _echo_config(args, ["input", "estimator", "seed", "alpha", "standardize", "pseudo_sign"]),
    )
    print(f"fit written to {args.output_dir} (estimator={args.estimator}, k={problem.k})")
    return 0


# ---------------------------------------------------------------------------
# simulate


def _parse_sizes(tokens) -> tuple[tuple[int, ...], ...]:
    combos = []
    for token in tokens:
        parts = [part for part in str(token).replace(";", " ").split(",") if part]
        combos.append(tuple(int(part) for part in parts))
    return tuple(combos)


def _sim_config(args: argparse.Namespace) -> simmod.SimConfig:
    if not args.setting:
        raise InputError("simulate needs --setting (S1, S2, S3, S4, or K)")
    setting = SETTING_ALIASES.get(str(args.setting).lower(), str(args.setting))
    if setting not in ("S1", "S2", "S3", "S4", "K"):
        raise InputError(f"unknown setting {args.setting!r}")
    estimators: tuple[str, ...] = ()
    if args.estimators:
        names = []
        for token in args.estimators:
            for part in str(token).split(","):
                if not part:
                    continue
                key = part.strip().lower()
                if key not in ESTIMATOR_ALIASES:
                    raise InputError(f"unknown estimator {part!r}")
                names.append(ESTIMATOR_ALIASES[key])
        estimators = tuple(names)
    return simmod.SimConfig(
        setting=setting,
        replicate_count=int(args.reps),
        master_seed=int(args.seed),
        alpha=float(args.alpha),
        estimators=estimators,
        standardize=bool(args.standardize),
        threads=int(args.threads),
        size_combos=_parse_sizes(args.sizes) if args.sizes else (),
        p_values=tuple(args.p) if args.p else (),
        k_values=tuple(args.k) if args.k else (),
        het_levels=tuple(args.het) if args.het else (),
        scenarios=tuple(args.scenario) if args.scenario else (),
        sample_sizes=tuple(args.n) if args.n else (),
        cells_filter=tuple(args.cells) if args.cells else (),
    )


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _sim_config(args)
    os.makedirs(args.output_dir, exist_ok=True)
    report = simmod.run_cells(config)
    report.to_csv(os.path.join(args.output_dir, "report.csv"))
    with open(os.path.join(args.output_dir, "report.txt"), "w") as handle:
        handle.write(report.text_table())
    report.pi_summary_csv(os.path.join(args.output_dir, "pi_summary.csv"))
    if args.emit_plot_data:
        report.plot_data_csv(os.path.join(args.output_dir, "plot_data.csv"))
    _write_json(
        os.path.join(args.output_dir, "timings.json"),
        {row.cell_id: row.runtime_s for row in report.rows},
    )
    _write_json(
        os.path.join(args.output_dir, "config_used.json"),
        _echo_config(
            args,
            [
                "setting",
                "reps",
                "seed",
                "alpha",
                "threads",
                "standardize",
                "estimators",
                "cells",
                "p",
                "k",
                "het",
                "scenario",
                "n",
                "sizes",
                "emit_plot_data",
            ],
        ),
    )
    sys.stdout.write(report.text_table())
    for cell_id, count in report.exclusions:
        if count:
            print(f"excluded replicates in {cell_id}: {count}")
    return 0


# ---------------------------------------------------------------------------
# check


def _random_problem(rng: np.random.Generator, k: int, p: int) -> MetaProblem:
    # spread controls how heterogeneous the instance is: near-homogeneous
    # instances exercise the heavy-borrowing regime, spread-out ones the
    # light-borrowing regime
    spread = float(rng.choice([0.05, 0.3, 2.0]))
    center = rng.normal(0.0, 1.0, size=p)
    studies = []
    for j in range(k):
        n = int(rng.integers(40, 120))
        raw = rng.standard_normal((max(p + 2, 4), p))
        gram = raw.T @ raw + p * np.eye(p)
        gram = 0.5 * (gram + gram.T) * float(rng.uniform(5.0, 50.0))
        studies.append(
            StudySummary(
                study_id=f"inst{j + 1}",
                p=p,
                q=p,
                n=n,
                sigma2=float(rng.uniform(0.5, 2.0)),
                beta_tilde=center + rng.normal(0.0, spread, size=p),
                gram_proj=gram,
                rss=float(rng.uniform(5.0, 50.0)),
            )
        )
    return MetaProblem(studies)


def _numeric_objective_max(problem: MetaProblem, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quasi-Newton maximization of the penalized objective over (beta, theta)."""
    import scipy.optimize

    k, p = problem.k, problem.p

    def split(vec):
        return vec[: k * p].reshape(k, p), vec[k * p :]

    def neg(vec):
        beta, theta = split(vec)
        return -objective_value(problem, beta, theta, pi)

    def grad(vec):
        beta, theta = split(vec)
        gb, gt = objective_gradient(problem, beta, theta, pi)
        return -np.concatenate([gb.reshape(-1), gt])

    x0 = np.concatenate([problem.beta_stacked, problem.beta_mat.mean(axis=0)])
    res = scipy.optimize.minimize(neg, x0, jac=grad, method="L-BFGS-B",
                                  options={"maxiter": 500, "ftol": 1e-14, "gtol": 1e-12})
    beta, theta = split(res.x)
    return beta, theta


def _suite_oracle(instances: int, seed: int, pseudo_sign: str) -> tuple[int, list[dict]]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x10)))
    failures = []
    checks = 0
    for idx in range(instances):
        k = int(rng.integers(2, 5))
        p = int(rng.integers(1, 4))
        problem = _random_problem(rng, k, p)
        pi = rng.uniform(0.05, 0.95, size=k)
        closed = ham_beta(problem, pi).reshape(k, p)
        theta_closed = centroid(problem, pi)
        beta_num, theta_num = _numeric_objective_max(problem, pi)
        diff = max(
            float(np.abs(beta_num - closed).max()),
            float(np.abs(theta_num - theta_closed).max()),
        )
        checks += 1
        if diff > 1e-6:
            failures.append(
                {"suite": "oracle", "instance": idx, "k": k, "p": p, "max_abs_diff": diff}
            )
    return checks, failures


def _suite_improvement(instances: int, seed: int, pseudo_sign: str) -> tuple[int, list[dict]]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x11)))
    failures = []
    checks = 0
    for idx in range(instances):
        k = int(rng.integers(2, 7))
        p = int(rng.integers(1, 4))
        problem = _random_problem(rng, k, p)
        beta_true = rng.normal(0.0, 1.5, size=(k, p))
        try:
            pi_opt = pi_star_equal(problem, beta_true)
            mse_at_opt = true_mse(problem, pi_opt * np.ones(k), beta_true)
            mse_zero = problem.tr_var_mle
            checks += 1
            if not (pi_opt > 0 and mse_at_opt < mse_zero):
                failures.append(
                    {
                        "suite": "improvement",
                        "instance": idx,
                        "check": "equal-weight improvement",
                        "pi_star": pi_opt,
                        "mse_at_opt": mse_at_opt,
                        "mse_zero": mse_zero,
                    }
                )
            direction = rng.uniform(0.2, 1.0, size=k)
            direction /= direction.max()
            cs = c_star(problem, direction, beta_true)
            checks += 1
            if not cs > 0:
                failures.append(
                    {"suite": "improvement", "instance": idx, "check": "c_star positive", "c_star": cs}
                )
            # exact quadratic structure along the ray
            a, b, const = mse_in_c(problem, direction, beta_true)
            cs_grid = rng.uniform(0.0, 1.0, size=20)
            vals = np.array(
                [true_mse(problem, c * direction, beta_true) for c in cs_grid]
            )
            fitted = a * cs_grid**2 + b * cs_grid + const
            resid = float(np.abs(vals - fitted).max())
            checks += 1
            if resid > 1e-10 * max(1.0, float(np.abs(vals).max())):
                failures.append(
                    {"suite": "improvement", "instance": idx, "check": "quadratic residual", "residual": resid}
                )
            # negative covariance trace whenever two weights are interior
            pi_rand = rng.uniform(0.05, 0.95, size=k)
            terms = risk_terms(problem, pi_rand)
            checks += 1
            if not terms.tr_cov < 0:
                failures.append(
                    {"suite": "improvement", "instance": idx, "check": "tr_cov sign", "tr_cov": terms.tr_cov}
                )
        except ValueError as exc:
            failures.append({"suite": "improvement", "instance": idx, "error": repr(exc)})
    return checks, failures


def _suite_window(instances: int, seed: int, pseudo_sign: str) -> tuple[int, list[dict]]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x12)))
    failures = []
    checks = 0
    grid = np.linspace(0.01, 1.0, 100)
    for idx in range(instances):
        k = int(rng.integers(2, 6))
        p = int(rng.integers(1, 4))
        problem = _random_problem(rng, k, p)
        beta_true = rng.normal(0.0, 1.5, size=(k, p))
        direction = rng.uniform(0.2, 1.0, size=k)
        direction /= direction.max()
        try:
            cs = c_star(problem, direction, beta_true)
        except ValueError as exc:
            failures.append({"suite": "window", "instance": idx, "error": repr(exc)})
            continue
        mse_zero = problem.tr_var_mle
        margin = 1e-10 * max(1.0, mse_zero)
        for c in grid:
            diff = true_mse(problem, c * direction, beta_true) - mse_zero
            if abs(diff) <= margin:
                continue
            checks += 1
            improved = diff < 0
            predicted = c < 2.0 * cs
            if improved != predicted:
                failures.append(
                    {
                        "suite": "window",
                        "instance": idx,
                        "check": "improvement iff c < 2 c_star",
                        "c": float(c),
                        "c_star": cs,
                        "mse_diff": diff,
                    }
                )
                break
        # selection objective: zero at zero, stationary at the proxy minimizer
        checks += 1
        if pseudo_mse(problem, np.zeros(k), pseudo_sign=pseudo_sign) != 0.0:
            failures.append(
                {"suite": "window", "instance": idx, "check": "objective zero at pi=0"}
            )
        terms = risk_terms(problem, direction)
        denom = terms.tr_var + terms.bias_norm2_hat
        if denom <= 0:
            continue
        c_tilde = -terms.tr_cov / denom
        if not 1e-3 <= c_tilde <= 0.99:
            continue
        # along a ray the objective is an exact quadratic in the scale, so a
        # central difference recovers its derivative to rounding accuracy
        step = 1e-4 * c_tilde
        up = pseudo_mse(problem, (c_tilde + step) * direction, pseudo_sign=pseudo_sign)
        down = pseudo_mse(problem, (c_tilde - step) * direction, pseudo_sign=pseudo_sign)
        deriv = (up - down) / (2 * step)
        bias_ray = terms.bias_norm2_hat
        checks += 1
        if abs(deriv) > 1e-6 * max(bias_ray, 1e-12):
            failures.append(
                {
                    "suite": "window",
                    "instance": idx,
                    "check": "stationarity at proxy minimizer",
                    "c_tilde": float(c_tilde),
                    "derivative": float(deriv),
                }
            )
    return checks, failures


def _suite_calibration(
    instances: int,
    seed: int,
    pseudo_sign: str,
    *,
    draws: int = 30000,
    mean_rtol: float = 0.03,
    gap_rtol: float = 0.05,
) -> tuple[int, list[dict]]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x13)))
    failures = []
    problem = _random_problem(rng, 3, 2)
    beta_true = rng.normal(0.0, 1.0, size=(3, 2))
    base = problem.with_beta_tilde(beta_true)
    pi = np.array([0.6, 0.35, 0.5])
    mse_exact = true_mse(base, pi, beta_true)
    terms = risk_terms(base, pi, beta_true)
    chols = np.stack([np.linalg.cholesky(v) for v in base.variance_blocks])
    umse_vals = np.empty(draws)
    bmse_vals = np.empty(draws)
    noises = np.einsum("jab,rjb->rja", chols, rng.standard_normal((draws, 3, 2)))
    for i in range(draws):
        prob_i = base.with_beta_tilde(beta_true + noises[i])
        t = risk_terms(prob_i, pi)
        umse_vals[i] = t.bias_norm2_hat + 2.0 * t.tr_cov + t.tr_var_mle
        bmse_vals[i] = t.bias_norm2_hat + t.tr_var + 2.0 * t.tr_cov + t.tr_var_mle
    checks = 2
    umse_err = abs(umse_vals.mean() - mse_exact) / mse_exact
    if umse_err > mean_rtol:
        failures.append(
            {"suite": "calibration", "check": "unbiased proxy mean", "rel_error": umse_err}
        )
    bmse_gap = bmse_vals.mean() - mse_exact
    gap_err = abs(bmse_gap - terms.tr_var) / max(terms.tr_var, 1e-12)
    if gap_err > gap_rtol:
        failures.append(
            {"suite": "calibration", "check": "plug-in proxy gap equals tr_var", "rel_error": gap_err}
        )
    return checks, failures


SUITES = {
    "oracle": (_suite_oracle, 20),
    "improvement": (_suite_improvement, 100),
    "window": (_suite_window, 100),
    "calibration": (_suite_calibration, 1),
}


def cmd_check(args: argparse.Namespace) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    os.makedirs(args.output_dir, exist_ok=True)
    all_failures: list[dict] = []
    lines = [f"{'suite':<14} {'checks':>7} {'failures':>9} status"]
    for name in names:
        func, default_n = SUITES[name]
        n_inst = args.instances if args.instances else default_n
        checks, failures = func(n_inst, args.seed, args.pseudo_sign)
        status = "pass" if not failures else "FAIL"
        lines.append(f"{name:<14} {checks:>7} {len(failures):>9} {status}")
        all_failures.extend(failures)
    print("\n".join(lines))
    _write_json(
        os.path.join(args.output_dir, "config_used.json"),
        _echo_config(args, ["suite", "instances", "seed", "pseudo_sign"]),
    )
    if all_failures:
        first = all_failures[0]
        _write_json(os.path.join(args.output_dir, "counterexample.json"), first)
        print(f"first counterexample: {json.dumps(first)}", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args: argparse.Namespace) -> int:
    problem = load_meta_problem(args.input)
    os.makedirs(args.output_dir, exist_ok=True)
    fit = fit_ham(problem, SelectionOptions(seed=args.seed), pseudo_sign=args.pseudo_sign)
    mle_est, mle_cov = mle_stack(problem)
    mle_table = confidence_intervals(problem, mle_est, np.diag(mle_cov), alpha=args.alpha)
    ham_table = confidence_intervals(
        problem, fit.beta_hat, np.diag(fit.covariance), alpha=args.alpha
    )
    fe, fe_cov = fixed_effect(problem)
    z = z_quantile(args.alpha)
    fe_se = np.sqrt(np.diag(fe_cov))
    if fit.theta_hat is not None:
        cen = fit.theta_hat
        cen_se = np.sqrt(np.diag(centroid_covariance(problem, fit.pi)))
    else:
        cen, cen_se = fe, fe_se

    sig = {
        "mle": np.array([bool(r.significant) for r in mle_table.rows]).reshape(
            problem.k, problem.p
        ),
        "ham": np.array([bool(r.significant) for r in ham_table.rows]).reshape(
            problem.k, problem.p
        ),
    }

    summary_path = os.path.join(args.output_dir, "compare_summary.csv")
    with open(summary_path, "w") as handle:
        handle.write(
            "covariate,fe_estimate,fe_lower,fe_upper,"
            "centroid_estimate,centroid_lower,centroid_upper,"
            "mle_significant_count,ham_significant_count\n"
        )
        for ell in range(problem.p):
            handle.write(
                f"{ell},{fe[ell]:.10g},{fe[ell] - z * fe_se[ell]:.10g},{fe[ell] + z * fe_se[ell]:.10g},"
                f"{cen[ell]:.10g},{cen[ell] - z * cen_se[ell]:.10g},{cen[ell] + z * cen_se[ell]:.10g},"
                f"{int(sig['mle'][:, ell].sum())},{int(sig['ham'][:, ell].sum())}\n"
            )

    intervals_path = os.path.join(args.output_dir, "compare_intervals.csv")
    with open(intervals_path, "w") as handle:
        handle.write("estimator,study_id,covariate,estimate,se,lower,upper,p_value,significant\n")
        for name, table in (("mle", mle_table), ("ham", ham_table)):
            for row in table.rows:
                pv = "NA" if np.isnan(row.p_value) else f"{row.p_value:.10g}"
                sg = "NA" if row.significant is None else str(row.significant).lower()
                handle.write(
                    f"{name},{row.study_id},{row.covariate},{row.estimate:.10g},"
                    f"{row.se:.10g},{row.lower:.10g},{row.upper:.10g},{pv},{sg}\n"
                )

    both = int((sig["mle"] & sig["ham"]).sum())
    mle_only = int((sig["mle"] & ~sig["ham"]).sum())
    ham_only = int((~sig["mle"] & sig["ham"]).sum())
    neither = int((~sig["mle"] & ~sig["ham"]).sum())
    with open(os.path.join(args.output_dir, "crosstab.csv"), "w") as handle:
        handle.write("cell,count\nboth_significant,%d\nmle_only,%d\nham_only,%d\nneither,%d\n"
                     % (both, mle_only, ham_only, neither))

    caveat = (
        "note: the centroid summarizes the precision-weighted center of the studies "
        "at the selected weights; it is not a study-specific estimate and its "
        "interval ignores weight selection."
    )
    lines = [
        f"comparison across {problem.k} studies, {problem.p} shared covariates",
        f"heterogeneity fraction (descriptive): {100 * i_squared(problem):.1f}%"
        if problem.k >= 2
        else "single study",
        "",
        f"{'covariate':>9} {'fixed-effect [CI]':>34} {'centroid [CI]':>34} "
        f"{'sig mle':>8} {'sig ham':>8}",
    ]
    for ell in range(problem.p):
        fe_str = f"{fe[ell]:.3f} [{fe[ell] - z * fe_se[ell]:.3f}, {fe[ell] + z * fe_se[ell]:.3f}]"
        cen_str = f"{cen[ell]:.3f} [{cen[ell] - z * cen_se[ell]:.3f}, {cen[ell] + z * cen_se[ell]:.3f}]"
        lines.append(
            f"{ell:>9} {fe_str:>34} {cen_str:>34} "
            f"{int(sig['mle'][:, ell].sum()):>8} {int(sig['ham'][:, ell].sum()):>8}"
        )
    lines += [
        "",
        "significance cross-table (study x covariate tests):",
        f"  both: {both}  mle only: {mle_only}  ham only: {ham_only}  neither: {neither}",
        caveat,
    ]
    text = "\n".join(lines) + "\n"
    with open(os.path.join(args.output_dir, "compare.txt"), "w") as handle:
        handle.write(text)
    sys.stdout.write(text)
    _write_json(
        os.path.join(args.output_dir, "config_used.json"),
        _echo_config(args, ["input", "seed", "alpha", "pseudo_sign"]),
    )
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args)
        _fill_defaults(args)
        if args.command == "fit":
            return cmd_fit(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "check":
            return cmd_check(args)
        if args.command == "compare":
            return cmd_compare(args)
        raise InputError(f"unknown command {args.command!r}")
    except InputError as exc:
        print(f"ham: input error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
