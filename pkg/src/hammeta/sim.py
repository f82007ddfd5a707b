"""Monte-Carlo harness for the estimator's reference simulation settings.

Five study-generation recipes are built in:

* S1: k=3 studies, shared covariates, frozen coefficient table, sample-size
  combinations from {100, 200, 300}, p in {2, 4, 10, 20}.
* S2: p=4, n=200, k in {5, 10, 15}; per-replicate coefficient heterogeneity
  at levels none / mild / moderate / mixture.
* S3: k=20 studies sharing only an intercept (p=1) with 3 study-specific
  nuisance covariates; one- and two-cluster coefficient scenarios.
* S4: k=3, p=4 with population (covariate-scale) heterogeneity across four
  location/scale scenarios, with an optional standardization remedy.
* K:  frozen-design cells comparing shrinkage selected by the exact MSE and
  by the three estimable proxies, scored by the analytic MSE at the
  selected weights (probability-of-loss versus the stacked MLE).

Replicate streams are keyed by (master_seed, cell, replicate), so results are
independent of scheduling and thread count.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._linalg import stable_hash64, symmetrize
from .estimators import fixed_effect, ham_beta, ridge_apply
from .inference import z_quantile
from .model import MetaProblem, StudySummary, standardize, summarize_raw_study
from .risk import true_mse
from .selection import SelectionOptions, fit_ham, select_lambda_ridge, select_pi_ham

__all__ = [
    "SimConfig",
    "SimReport",
    "CellSpec",
    "CellEstimatorRow",
    "generate_setting1",
    "generate_setting2",
    "generate_setting3",
    "generate_setting4",
    "generate_setting_k",
    "run_cells",
    "make_example_corpus",
    "SETTING1_BETA",
    "SETTING1_SIZE_COMBOS",
]

ESTIMATOR_CHOICES = (
    "MLE",
    "FE",
    "HAM",
    "Ridge",
    "HAM-true-MSE",
    "HAM-UMSE",
    "HAM-BMSE",
)

# frozen coefficient table for S1 (columns are studies 1..3)
SETTING1_BETA = {
    2: np.array(
        [
            [3.53, 3.37, 3.27],
            [4.50, 4.49, 4.52],
        ]
    ).T,
    4: np.array(
        [
            [3.37, 3.18, 3.59],
            [4.49, 4.53, 4.30],
            [2.17, 2.16, 2.41],
            [0.14, -0.13, 0.26],
        ]
    ).T,
    10: np.array(
        [
            [3.26, 3.24, 3.42],
            [4.26, 4.24, 4.36],
            [2.48, 2.09, 2.30],
            [-0.08, 0.18, 0.05],
            [-0.92, -1.18, -0.85],
            [0.15, 0.22, -0.01],
            [-2.97, -2.93, -2.95],
            [0.46, 0.43, 0.46],
            [-4.49, -4.64, -4.52],
            [0.66, 0.65, 0.69],
        ]
    ).T,
    20: np.array(
        [
            [3.24, 3.23, 3.17],
            [4.24, 4.69, 4.74],
            [2.09, 2.52, 2.06],
            [0.18, 0.08, 0.10],
            [-1.18, -1.13, -0.89],
            [0.22, 0.06, 0.23],
            [-2.93, -2.80, -2.63],
            [0.43, 0.68, 0.37],
            [-4.64, -4.61, -4.60],
            [0.65, 0.77, 1.06],
            [-3.07, -3.21, -3.22],
            [-4.82, -4.55, -4.85],
            [3.44, 3.30, 3.40],
            [-3.87, -3.68, -3.98],
            [2.07, 1.68, 2.01],
            [3.13, 3.09, 3.37],
            [-2.40, -2.31, -2.35],
            [-2.61, -2.49, -2.61],
            [3.12, 3.12, 3.07],
            [-3.70, -3.50, -3.49],
        ]
    ).T,
}

SETTING1_SIZE_COMBOS = (
    (100, 100, 100),
    (100, 100, 200),
    (100, 100, 300),
    (100, 200, 200),
    (100, 200, 300),
    (100, 300, 300),
    (200, 200, 200),
    (200, 200, 300),
    (200, 300, 300),
    (300, 300, 300),
)

# common mean used where the recipe leaves it free (results are invariant to
# it because the displacement operator annihilates stacked common vectors)
BETA_MEAN_P4 = np.array([3.4, 4.5, 2.2, 0.1])

SETTING2_HET = ("none", "mild", "moderate", "mixture")
SETTING3_CENTER = 3.47
SETTING3_SCENARIOS = ("single", "two")
SETTING4_SCENARIOS = {
    "i": ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
    "ii": ((10.0, 10.0, 10.0), (100.0, 100.0, 100.0)),
    "iii": ((0.0, 1.0, 2.0), (1.0, 1.0, 4.0)),
    "iv": ((0.0, 5.0, 10.0), (1.0, 25.0, 100.0)),
}
SETTING_K_SIZE_COMBOS = (
    (100, 100, 100),
    (100, 100, 500),
    (100, 500, 500),
    (500, 500, 500),
)
SETTING_K_SIGMA2 = 0.25

DEFAULT_ESTIMATORS = {
    "S1": ("MLE", "HAM", "Ridge"),
    "S2": ("MLE", "FE", "HAM", "Ridge"),
    "S3": ("MLE", "HAM", "Ridge"),
    "S4": ("MLE", "HAM"),
    "K": ("HAM-true-MSE", "HAM-UMSE", "HAM-BMSE", "HAM"),
}


@dataclass(frozen=True)
class CellSpec:
    """One simulation cell: a setting plus its frozen-parameter axes."""

    cell_id: str
    setting: str
    k: int
    p: int
    sizes: tuple[int, ...]
    het: str | None = None
    scenario: str | None = None


def generate_setting1(p: int = 2, sizes: tuple[int, ...] = (100, 100, 100)) -> CellSpec:
    if p not in SETTING1_BETA:
        raise ValueError(f"setting 1 has frozen coefficients for p in {sorted(SETTING1_BETA)}")
    sizes = tuple(int(n) for n in sizes)
    if len(sizes) != 3:
        raise ValueError("setting 1 uses k=3 studies; pass three sample sizes")
    cid = f"S1[n={'-'.join(map(str, sizes))},p={p}]"
    return CellSpec(cell_id=cid, setting="S1", k=3, p=p, sizes=sizes)


def generate_setting2(k: int = 5, het: str = "none") -> CellSpec:
    if het not in SETTING2_HET:
        raise ValueError(f"heterogeneity must be one of {SETTING2_HET}")
    if het == "mixture" and k < 4:
        raise ValueError("mixture heterogeneity needs k >= 4")
    cid = f"S2[k={k},het={het}]"
    return CellSpec(cell_id=cid, setting="S2", k=int(k), p=4, sizes=(200,) * int(k), het=het)


def generate_setting3(scenario: str = "two") -> CellSpec:
    if scenario not in SETTING3_SCENARIOS:
        raise ValueError(f"scenario must be one of {SETTING3_SCENARIOS}")
    cid = f"S3[{scenario}]"
    return CellSpec(cell_id=cid, setting="S3", k=20, p=1, sizes=(200,) * 20, scenario=scenario)


def generate_setting4(scenario: str = "i", n: int = 100) -> CellSpec:
    if scenario not in SETTING4_SCENARIOS:
        raise ValueError(f"scenario must be one of {tuple(SETTING4_SCENARIOS)}")
    cid = f"S4[{scenario},n={n}]"
    return CellSpec(cell_id=cid, setting="S4", k=3, p=4, sizes=(int(n),) * 3, scenario=scenario)


def generate_setting_k(sizes: tuple[int, ...] = (100, 100, 100)) -> CellSpec:
    sizes = tuple(int(n) for n in sizes)
    if len(sizes) != 3:
        raise ValueError("the frozen-design comparison uses k=3 studies")
    cid = f"K[n={'-'.join(map(str, sizes))}]"
    return CellSpec(cell_id=cid, setting="K", k=3, p=4, sizes=sizes)


@dataclass(frozen=True)
class SimConfig:
    """Declarative run description: which cells, how many replicates, seeds.

    Leave ``estimators`` empty to get the per-setting default set. The
    S1/S2/S3/S4/K axis fields are each used only by their own setting.
    """

    setting: str = "S2"
    replicate_count: int = 1000
    master_seed: int = 0
    alpha: float = 0.05
    estimators: tuple[str, ...] = ()
    standardize: bool = False
    threads: int = 1
    # S1 and K
    size_combos: tuple[tuple[int, ...], ...] = ()
    p_values: tuple[int, ...] = ()
    # S2
    k_values: tuple[int, ...] = ()
    het_levels: tuple[str, ...] = ()
    # S3 / S4
    scenarios: tuple[str, ...] = ()
    sample_sizes: tuple[int, ...] = ()
    cells_filter: tuple[str, ...] = ()

    def resolved_estimators(self) -> tuple[str, ...]:
        names = self.estimators or DEFAULT_ESTIMATORS[self.setting]
        for name in names:
            if name not in ESTIMATOR_CHOICES:
                raise ValueError(f"unknown estimator {name!r}")
        return tuple(names)

    def cells(self) -> tuple[CellSpec, ...]:
        setting = self.setting
        out: list[CellSpec] = []
        if setting == "S1":
            combos = self.size_combos or ((100, 100, 100),)
            ps = self.p_values or (2,)
            out = [generate_setting1(p, sizes) for sizes in combos for p in ps]
        elif setting == "S2":
            ks = self.k_values or (5,)
            hets = self.het_levels or ("none",)
            out = [generate_setting2(k, het) for k in ks for het in hets]
        elif setting == "S3":
            out = [generate_setting3(sc) for sc in (self.scenarios or ("two",))]
        elif setting == "S4":
            scs = self.scenarios or ("i",)
            ns = self.sample_sizes or (100,)
            out = [generate_setting4(sc, n) for sc in scs for n in ns]
        elif setting == "K":
            combos = self.size_combos or ((100, 100, 100),)
            out = [generate_setting_k(sizes) for sizes in combos]
        else:
            raise ValueError(f"unknown setting {setting!r}")
        if self.cells_filter:
            wanted = set(self.cells_filter)
            out = [cell for cell in out if cell.cell_id in wanted]
            if not out:
                raise ValueError("cells_filter matched no cells")
        return tuple(out)


# ---------------------------------------------------------------------------
# random streams


def _rng(master_seed: int, cell: CellSpec, stream: int, rep: int = 0) -> np.random.Generator:
    entropy = (int(master_seed), stable_hash64(cell.cell_id), stream, rep)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _selection_seed(master_seed: int, cell: CellSpec, rep: int) -> int:
    seq = np.random.SeedSequence(
        (int(master_seed), stable_hash64(cell.cell_id), 0xB, rep)
    )
    return int(seq.generate_state(1)[0])


def _round_2sig(values: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values, dtype=float)
    nonzero = values != 0
    mags = np.floor(np.log10(np.abs(values[nonzero])))
    scale = 10.0 ** (mags - 1)
    out[nonzero] = np.round(values[nonzero] / scale) * scale
    return out


def _design_common(n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """Shared covariate recipe: intercept, a normal, a Bernoulli(0.5), their
    product, then extra standard normals up to p columns."""
    cols = [np.ones(n)]
    if p >= 2:
        x2 = rng.standard_normal(n)
        cols.append(x2)
    if p >= 3:
        x3 = rng.binomial(1, 0.5, n).astype(float)
        cols.append(x3)
    if p >= 4:
        cols.append(x2 * x3)
    for _ in range(p - 4):
        cols.append(rng.standard_normal(n))
    return np.column_stack(cols[:p])


# ---------------------------------------------------------------------------
# frozen per-cell parameters


def frozen_params(cell: CellSpec, master_seed: int) -> dict:
    """Draw (or look up) the parameters held fixed across replicates."""
    rng = _rng(master_seed, cell, 0xF)
    if cell.setting == "S1":
        return {"beta": SETTING1_BETA[cell.p].copy()}
    if cell.setting == "S2":
        return {"beta_mean": BETA_MEAN_P4.copy()}
    if cell.setting == "S3":
        centers = np.full(cell.k, SETTING3_CENTER)
        if cell.scenario == "two":
            centers[:5] = 0.0
        beta = np.round(centers + rng.uniform(-0.25, 0.25, size=cell.k), 2)
        gamma = np.round(rng.standard_normal((cell.k, 3)), 2)
        return {"beta": beta.reshape(-1, 1), "gamma": gamma}
    if cell.setting == "S4":
        beta = np.round(rng.uniform(-0.25, 0.25, size=(cell.k, cell.p)), 2)
        return {"beta": beta}
    if cell.setting == "K":
        beta = _round_2sig(
            BETA_MEAN_P4[None, :] + np.sqrt(0.1) * rng.standard_normal((cell.k, cell.p))
        )
        designs = [
            _design_common(n, cell.p, rng) for n in cell.sizes
        ]
        # oracle problem: frozen designs with the true error variance
        oracle_studies = [
            StudySummary(
                study_id=f"study{j + 1}",
                p=cell.p,
                q=cell.p,
                n=cell.sizes[j],
                sigma2=SETTING_K_SIGMA2,
                beta_tilde=beta[j],
                gram_proj=symmetrize(designs[j].T @ designs[j]),
                intercept_index=0,
            )
            for j in range(cell.k)
        ]
        oracle = MetaProblem(oracle_studies)
        sel_true = select_pi_ham(
            oracle,
            SelectionOptions(seed=_selection_seed(master_seed, cell, 0)),
            criterion="true",
            beta_true=beta,
        )
        return {
            "beta": beta,
            "designs": designs,
            "oracle": oracle,
            "pi_true": sel_true.pi,
            "mse_true_sel": true_mse(oracle, sel_true.pi, beta),
        }
    raise ValueError(f"unknown setting {cell.setting!r}")


# ---------------------------------------------------------------------------
# per-replicate work


def _replicate_problem(
    cell: CellSpec, frozen: dict, rng: np.random.Generator
) -> tuple[MetaProblem, np.ndarray]:
    """Generate one replicate's data and reduce it to summaries."""
    setting = cell.setting
    if setting in ("S1", "S2"):
        if setting == "S1":
            beta = frozen["beta"]
        else:
            mean = frozen["beta_mean"]
            if cell.het == "none":
                beta = np.tile(mean, (cell.k, 1))
            elif cell.het == "mild":
                beta = mean + np.sqrt(0.1) * rng.standard_normal((cell.k, cell.p))
            elif cell.het == "moderate":
                beta = mean + np.sqrt(0.5) * rng.standard_normal((cell.k, cell.p))
            else:  # mixture: three studies at the mean, the rest widely spread
                beta = mean + rng.standard_normal((cell.k, cell.p))
                beta[:3] = mean
        studies = []
        for j, n in enumerate(cell.sizes):
            x = _design_common(n, cell.p, rng)
            y = x @ beta[j] + rng.standard_normal(n)
            studies.append(
                summarize_raw_study(x, y, study_id=f"study{j + 1}", intercept_index=0)
            )
        return MetaProblem(studies), beta
    if setting == "S3":
        beta = frozen["beta"]
        gamma = frozen["gamma"]
        studies = []
        for j, n in enumerate(cell.sizes):
            x = np.ones((n, 1))
            z = rng.standard_normal((n, 3))
            y = x[:, 0] * beta[j, 0] + z @ gamma[j] + rng.standard_normal(n)
            studies.append(
                summarize_raw_study(x, y, z, study_id=f"study{j + 1}", intercept_index=0)
            )
        return MetaProblem(studies), beta
    if setting == "S4":
        beta = frozen["beta"]
        mus, sig2s = SETTING4_SCENARIOS[cell.scenario]
        studies = []
        for j, n in enumerate(cell.sizes):
            mu, sig2 = mus[j], sig2s[j]
            scale = 1.0 if mu == 0 else mu
            x = np.column_stack(
                [np.ones(n), rng.normal(mu, scale, size=(n, cell.p - 1))]
            )
            y = x @ beta[j] + np.sqrt(sig2) * rng.standard_normal(n)
            studies.append(
                summarize_raw_study(x, y, study_id=f"study{j + 1}", intercept_index=0)
            )
        return MetaProblem(studies), beta
    if setting == "K":
        beta = frozen["beta"]
        studies = []
        for j, n in enumerate(cell.sizes):
            x = frozen["designs"][j]
            y = x @ beta[j] + np.sqrt(SETTING_K_SIGMA2) * rng.standard_normal(n)
            studies.append(
                summarize_raw_study(x, y, study_id=f"study{j + 1}", intercept_index=0)
            )
        return MetaProblem(studies), beta
    raise ValueError(f"unknown setting {setting!r}")


def _evaluate_replicate(
    cell: CellSpec, frozen: dict, config: SimConfig, estimators: tuple[str, ...], rep: int
) -> dict:
    rng = _rng(config.master_seed, cell, 0xA, rep)
    problem, beta_true = _replicate_problem(cell, frozen, rng)
    if config.standardize:
        problem, record = standardize(problem)
        beta_eval = beta_true * record.scales
    else:
        beta_eval = beta_true
    truth = beta_eval.reshape(-1)
    z = z_quantile(config.alpha)
    sel_seed = _selection_seed(config.master_seed, cell, rep)
    out: dict = {"rep": rep, "excluded": False, "estimators": {}}
    for name in estimators:
        try:
            entry: dict = {}
            if name == "MLE":
                vec = problem.beta_stacked
                var = np.concatenate(
                    [np.diag(v) for v in problem.variance_blocks]
                )
                entry["covered"] = _coverage_counts(problem, vec, var, truth, z)
            elif name == "FE":
                fe, _ = fixed_effect(problem)
                vec = np.tile(fe, problem.k)
            elif name == "Ridge":
                lam = select_lambda_ridge(problem).lam
                beta_r, _ = ridge_apply(problem, lam)
                vec = beta_r.reshape(-1)
                entry["lam"] = lam
            elif name == "HAM":
                fitted = fit_ham(problem, SelectionOptions(seed=sel_seed))
                vec = fitted.beta_hat
                var = np.diag(fitted.covariance)
                entry["covered"] = _coverage_counts(problem, vec, var, truth, z)
                entry["pi"] = fitted.pi
            else:  # proxy-selected variants
                criterion = {
                    "HAM-true-MSE": "true",
                    "HAM-UMSE": "umse",
                    "HAM-BMSE": "bmse",
                }[name]
                if criterion == "true" and cell.setting == "K":
                    pi_sel = frozen["pi_true"]
                else:
                    sel = select_pi_ham(
                        problem,
                        SelectionOptions(seed=sel_seed),
                        criterion=criterion,
                        beta_true=beta_eval if criterion == "true" else None,
                    )
                    pi_sel = sel.pi
                vec = ham_beta(problem, pi_sel)
                entry["pi"] = pi_sel
            err = vec - truth
            entry["sq_err"] = float(err @ err)
            if cell.setting == "K" and "pi" in entry:
                entry["analytic_mse"] = true_mse(
                    frozen["oracle"], entry["pi"], frozen["beta"]
                )
            elif cell.setting == "K" and name == "MLE":
                entry["analytic_mse"] = frozen["oracle"].tr_var_mle
            out["estimators"][name] = entry
        except Exception as exc:  # noqa: BLE001 - a failed estimator drops the replicate
            out["excluded"] = True
            out["error"] = f"{name}: {exc!r}"
            return out
    return out


def _coverage_counts(
    problem: MetaProblem, vec: np.ndarray, var: np.ndarray, truth: np.ndarray, z: float
) -> np.ndarray:
    half = z * np.sqrt(np.maximum(var, 0.0))
    inside = np.abs(vec - truth) <= half
    return inside.reshape(problem.k, problem.p).sum(axis=1)


def _chunk_worker(args) -> list[dict]:
    cell, frozen, config, estimators, reps = args
    return [_evaluate_replicate(cell, frozen, config, estimators, r) for r in reps]


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class CellEstimatorRow:
    cell_id: str
    estimator: str
    replicates: int
    excluded: int
    emse: float
    emse_x100: float
    coverage_avg: float | None
    coverage_by_study: tuple[float, ...] | None
    pi_quartiles: tuple[tuple[float, float, float], ...] | None
    mean_max_pi: float | None
    pl_percent: float | None
    analytic_mse_x100: float | None
    runtime_s: float


@dataclass(frozen=True)
class SimReport:
    """Aggregated results plus raw per-replicate draws for plotting."""

    setting: str
    rows: tuple[CellEstimatorRow, ...]
    replicate_rows: tuple[tuple[str, str, int, float], ...]
    pi_rows: tuple[tuple[str, str, int, float], ...]
    exclusions: tuple[tuple[str, int], ...]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(
                [
                    "cell",
                    "estimator",
                    "replicates",
                    "excluded",
                    "emse",
                    "emse_x100",
                    "coverage_avg_pct",
                    "coverage_by_study_pct",
                    "mean_max_pi",
                    "pl_percent",
                    "analytic_mse_x100",
                ]
            )
            for row in self.rows:
                writer.writerow(
                    [
                        row.cell_id,
                        row.estimator,
                        row.replicates,
                        row.excluded,
                        f"{row.emse:.10g}",
                        f"{row.emse_x100:.6g}",
                        "" if row.coverage_avg is None else f"{row.coverage_avg:.4g}",
                        ""
                        if row.coverage_by_study is None
                        else ";".join(f"{c:.4g}" for c in row.coverage_by_study),
                        "" if row.mean_max_pi is None else f"{row.mean_max_pi:.6g}",
                        "" if row.pl_percent is None else f"{row.pl_percent:.4g}",
                        ""
                        if row.analytic_mse_x100 is None
                        else f"{row.analytic_mse_x100:.6g}",
                    ]
                )

    def pi_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["cell", "estimator", "study", "pi_q25", "pi_q50", "pi_q75"])
            for row in self.rows:
                if row.pi_quartiles is None:
                    continue
                for j, (q1, q2, q3) in enumerate(row.pi_quartiles):
                    writer.writerow(
                        [
                            row.cell_id,
                            row.estimator,
                            f"study{j + 1}",
                            f"{q1:.6g}",
                            f"{q2:.6g}",
                            f"{q3:.6g}",
                        ]
                    )

    def plot_data_csv(self, path) -> None:
        """Tidy long format: per-replicate squared errors and selected pi."""
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["cell", "series", "unit", "replicate", "value"])
            for cell_id, est, rep, val in self.replicate_rows:
                writer.writerow([cell_id, "sq_err", est, rep, f"{val:.10g}"])
            for cell_id, study, rep, val in self.pi_rows:
                writer.writerow([cell_id, "pi", study, rep, f"{val:.6g}"])

    def text_table(self) -> str:
        buf = io.StringIO()
        header = (
            f"{'cell':<26} {'estimator':<14} {'eMSE x100':>10} "
            f"{'coverage %':>11} {'PL %':>6} {'excl':>5}"
        )
        buf.write(header + "\n")
        buf.write("-" * len(header) + "\n")
        for row in self.rows:
            cov = "" if row.coverage_avg is None else f"{row.coverage_avg:.1f}"
            pl = "" if row.pl_percent is None else f"{row.pl_percent:.1f}"
            buf.write(
                f"{row.cell_id:<26} {row.estimator:<14} {row.emse_x100:>10.2f} "
                f"{cov:>11} {pl:>6} {row.excluded:>5d}\n"
            )
        return buf.getvalue()

    def row(self, cell_id: str, estimator: str) -> CellEstimatorRow:
        for row in self.rows:
            if row.cell_id == cell_id and row.estimator == estimator:
                return row
        raise KeyError(f"no row for ({cell_id!r}, {estimator!r})")


def _aggregate_cell(
    cell: CellSpec,
    estimators: tuple[str, ...],
    results: list[dict],
    runtime_s: float,
) -> tuple[list[CellEstimatorRow], list, list, int]:
    kept = [res for res in results if not res["excluded"]]
    excluded = len(results) - len(kept)
    rows: list[CellEstimatorRow] = []
    rep_rows: list[tuple[str, str, int, float]] = []
    pi_rows: list[tuple[str, str, int, float]] = []
    for name in estimators:
        sq = np.array([res["estimators"][name]["sq_err"] for res in kept])
        emse = float(sq.mean()) if sq.size else float("nan")
        covered = [
            res["estimators"][name]["covered"]
            for res in kept
            if "covered" in res["estimators"][name]
        ]
        if covered:
            cov_mat = np.stack(covered)  # replicates x studies
            by_study = tuple(100.0 * cov_mat.mean(axis=0) / cell.p)
            cov_avg = float(np.mean(by_study))
        else:
            by_study = None
            cov_avg = None
        pis = [
            res["estimators"][name]["pi"]
            for res in kept
            if "pi" in res["estimators"][name]
        ]
        if pis:
            pi_mat = np.stack(pis)
            quart = tuple(
                tuple(np.percentile(pi_mat[:, j], (25, 50, 75))) for j in range(cell.k)
            )
            mean_max = float(pi_mat.max(axis=1).mean())
        else:
            quart = None
            mean_max = None
        analytic = [
            res["estimators"][name].get("analytic_mse")
            for res in kept
            if res["estimators"][name].get("analytic_mse") is not None
        ]
        analytic_x100 = None
        if analytic and cell.setting == "K":
            analytic_x100 = float(100.0 * np.mean(analytic))
        rows.append(
            CellEstimatorRow(
                cell_id=cell.cell_id,
                estimator=name,
                replicates=len(kept),
                excluded=excluded,
                emse=emse,
                emse_x100=100.0 * emse,
                coverage_avg=cov_avg,
                coverage_by_study=by_study,
                pi_quartiles=quart,
                mean_max_pi=mean_max,
                pl_percent=None,
                analytic_mse_x100=analytic_x100,
                runtime_s=runtime_s,
            )
        )
        for res in kept:
            rep_rows.append((cell.cell_id, name, res["rep"], res["estimators"][name]["sq_err"]))
            if "pi" in res["estimators"][name] and name == "HAM":
                for j, val in enumerate(res["estimators"][name]["pi"]):
                    pi_rows.append((cell.cell_id, f"study{j + 1}", res["rep"], float(val)))
    return rows, rep_rows, pi_rows, excluded


def run_cells(config: SimConfig) -> SimReport:
    """Run every cell of the configured setting and aggregate.

    Replicates are keyed by index, so reruns (with any thread count) give
    identical reports. A replicate where any estimator raises is excluded
    from all aggregates and counted in the exclusion column.
    """
    estimators = config.resolved_estimators()
    all_rows: list[CellEstimatorRow] = []
    all_rep_rows: list = []
    all_pi_rows: list = []
    exclusions: list[tuple[str, int]] = []
    for cell in config.cells():
        started = time.perf_counter()
        frozen = frozen_params(cell, config.master_seed)
        reps = list(range(config.replicate_count))
        if config.threads > 1 and config.replicate_count > 1:
            workers = min(config.threads, len(reps))
            chunks = [
                (cell, frozen, config, estimators, reps[i::workers])
                for i in range(workers)
            ]
            results_by_rep: dict[int, dict] = {}
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for chunk_result in pool.map(_chunk_worker, chunks):
                    for res in chunk_result:
                        results_by_rep[res["rep"]] = res
            results = [results_by_rep[r] for r in reps]
        else:
            results = [
                _evaluate_replicate(cell, frozen, config, estimators, r) for r in reps
            ]
        runtime_s = time.perf_counter() - started
        if cell.setting == "K":
            _fill_pl(cell, frozen, results)
        rows, rep_rows, pi_rows, excluded = _aggregate_cell(
            cell, estimators, results, runtime_s
        )
        if cell.setting == "K":
            rows = _pl_rows(cell, frozen, results, rows)
        all_rows.extend(rows)
        all_rep_rows.extend(rep_rows)
        all_pi_rows.extend(pi_rows)
        exclusions.append((cell.cell_id, excluded))
    return SimReport(
        setting=config.setting,
        rows=tuple(all_rows),
        replicate_rows=tuple(all_rep_rows),
        pi_rows=tuple(all_pi_rows),
        exclusions=tuple(exclusions),
    )


def _fill_pl(cell: CellSpec, frozen: dict, results: list[dict]) -> None:
    mle_ref = frozen["oracle"].tr_var_mle
    for res in results:
        if res["excluded"]:
            continue
        for entry in res["estimators"].values():
            if "analytic_mse" in entry:
                entry["loss"] = bool(entry["analytic_mse"] > mle_ref)


def _pl_rows(
    cell: CellSpec, frozen: dict, results: list[dict], rows: list[CellEstimatorRow]
) -> list[CellEstimatorRow]:
    kept = [res for res in results if not res["excluded"]]
    out = []
    for row in rows:
        losses = [
            res["estimators"][row.estimator].get("loss")
            for res in kept
            if res["estimators"][row.estimator].get("loss") is not None
        ]
        pl = 100.0 * float(np.mean(losses)) if losses else None
        out.append(replace(row, pl_percent=pl))
    return out


# ---------------------------------------------------------------------------
# synthetic multi-site corpus for the comparison workflow


def make_example_corpus(seed: int = 0, k: int = 29, p: int = 7) -> MetaProblem:
    """Generate a synthetic multi-site corpus shaped like a hospital network.

    Each site regresses an outcome on an intercept plus p-1 mixed covariates;
    site coefficient vectors sit near a common mean with a minority of sites
    displaced further, giving substantial but not total heterogeneity.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x0C0)))
    beta_mean = np.array([2.0, 0.8, -0.5, 0.3, 0.0, -0.2, 0.6])[:p]
    studies = []
    beta_true = np.zeros((k, p))
    outliers = set(rng.choice(k, size=max(k // 7, 1), replace=False).tolist())
    for j in range(k):
        n = int(rng.integers(150, 1500))
        tau = 0.45 if j in outliers else 0.08
        beta_j = beta_mean + tau * rng.standard_normal(p)
        beta_true[j] = beta_j
        cols = [np.ones(n)]
        for ell in range(1, p):
            if ell == p - 1:
                cols.append(rng.binomial(1, 0.3, n).astype(float))
            else:
                cols.append(rng.standard_normal(n))
        x = np.column_stack(cols)
        y = x @ beta_j + rng.standard_normal(n)
        studies.append(
            summarize_raw_study(x, y, study_id=f"site{j + 1:02d}", intercept_index=0)
        )
    return MetaProblem(studies)
