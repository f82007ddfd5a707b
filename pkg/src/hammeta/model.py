"""Study summaries, the meta-analysis problem container, and input handling.

A study enters the analysis through its summary statistics only: the point
estimate of the shared coefficients, the residual variance, and the Gram
matrix of the shared covariates after projecting out any study-specific
nuisance columns. Raw per-study data can be reduced to this form with
:func:`summarize_raw_study`; reported covariance matrices can be converted
with :func:`precision_from_covariance`.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ._linalg import inv_pd, max_asymmetry, pd_eigenvalues, solve_pd, symmetrize

__all__ = [
    "InputError",
    "StudySummary",
    "MetaProblem",
    "ShrinkageVector",
    "RayScale",
    "StandardizationRecord",
    "summarize_raw_study",
    "precision_from_covariance",
    "load_meta_problem",
    "document_from_problem",
    "save_meta_problem",
    "standardize",
    "unstandardize",
]

SYMMETRY_RTOL = 1e-10
PD_RTOL = 1e-12


class InputError(ValueError):
    """Raised when an input document or raw dataset violates the schema."""


def _as_readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class StudySummary:
    """Sufficient summary of one study's linear model fit.

    ``gram_proj`` is X'X with any nuisance columns projected out, so that
    Var(beta_tilde) = sigma2 * inv(gram_proj). ``q`` counts all covariates in
    the study's own model (shared plus nuisance), ``p`` only the shared ones.
    """

    study_id: str
    p: int
    q: int
    n: int
    sigma2: float
    beta_tilde: np.ndarray
    gram_proj: np.ndarray
    covariate_sds: np.ndarray | None = None
    intercept_index: int | None = None
    rss: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta_tilde", _as_readonly(self.beta_tilde))
        object.__setattr__(self, "gram_proj", _as_readonly(self.gram_proj))
        if self.covariate_sds is not None:
            object.__setattr__(self, "covariate_sds", _as_readonly(self.covariate_sds))
        sid = self.study_id
        if self.p < 1:
            raise InputError(f"study {sid}: p must be >= 1, got {self.p}")
        if self.q < self.p:
            raise InputError(f"study {sid}: q={self.q} smaller than p={self.p}")
        if self.n < self.q + 1:
            raise InputError(f"study {sid}: n={self.n} must be at least q+1={self.q + 1}")
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise InputError(f"study {sid}: sigma2 must be positive, got {self.sigma2}")
        if self.beta_tilde.shape != (self.p,):
            raise InputError(
                f"study {sid}: beta_tilde has shape {self.beta_tilde.shape}, expected ({self.p},)"
            )
        if self.gram_proj.shape != (self.p, self.p):
            raise InputError(
                f"study {sid}: gram_proj has shape {self.gram_proj.shape}, "
                f"expected ({self.p}, {self.p})"
            )
        if not np.all(np.isfinite(self.gram_proj)) or not np.all(np.isfinite(self.beta_tilde)):
            raise InputError(f"study {sid}: non-finite values in summary")
        if max_asymmetry(self.gram_proj) > SYMMETRY_RTOL:
            raise InputError(f"study {sid}: gram_proj is not symmetric")
        eigs = pd_eigenvalues(self.gram_proj)
        if eigs[0] <= PD_RTOL * max(eigs[-1], 0.0):
            raise InputError(
                f"study {sid}: gram_proj is not positive definite "
                f"(smallest eigenvalue {eigs[0]:.6g})"
            )
        if self.covariate_sds is not None and self.covariate_sds.shape != (self.p,):
            raise InputError(f"study {sid}: covariate_sds must have length p={self.p}")
        if self.intercept_index is not None and not 0 <= self.intercept_index < self.p:
            raise InputError(
                f"study {sid}: intercept_index {self.intercept_index} outside [0, {self.p})"
            )
        if self.rss is not None and not (self.rss >= 0 and math.isfinite(self.rss)):
            raise InputError(f"study {sid}: rss must be a nonnegative number")

    @property
    def precision(self) -> np.ndarray:
        """W_j = gram_proj / sigma2, the precision of beta_tilde."""
        return self.gram_proj / self.sigma2

    @property
    def variance(self) -> np.ndarray:
        """Var(beta_tilde) = sigma2 * inv(gram_proj)."""
        return inv_pd(self.gram_proj) * self.sigma2


class MetaProblem:
    """Immutable collection of study summaries with shared dimension p.

    Precomputes the per-study precision blocks and their inverses once;
    every downstream evaluation (estimators, risk terms, selection) reads
    from these caches.
    """

    def __init__(self, studies: Sequence[StudySummary]):
        studies = tuple(studies)
        if not studies:
            raise InputError("a meta problem needs at least one study")
        p = studies[0].p
        for st in studies:
            if st.p != p:
                raise InputError(
                    f"study {st.study_id}: shared dimension p={st.p} differs from {p}"
                )
        ids = [st.study_id for st in studies]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate study ids in meta problem")
        self._studies = studies
        self._k = len(studies)
        self._p = p
        self._beta = np.stack([st.beta_tilde for st in studies])
        self._W = np.stack([st.precision for st in studies])
        self._V = np.stack([inv_pd(w) for w in self._W])
        self._trV = np.einsum("jaa->j", self._V)
        self._Wb = np.einsum("jab,jb->ja", self._W, self._beta)
        for arr in (self._beta, self._W, self._V, self._trV, self._Wb):
            arr.flags.writeable = False

    @property
    def studies(self) -> tuple[StudySummary, ...]:
        return self._studies

    @property
    def k(self) -> int:
        return self._k

    @property
    def p(self) -> int:
        return self._p

    @property
    def pk(self) -> int:
        return self._k * self._p

    @property
    def study_ids(self) -> tuple[str, ...]:
        return tuple(st.study_id for st in self._studies)

    @property
    def precision_blocks(self) -> np.ndarray:
        """(k, p, p) array of W_j = gram_proj_j / sigma2_j."""
        return self._W

    @property
    def variance_blocks(self) -> np.ndarray:
        """(k, p, p) array of Var(beta_tilde_j) = W_j^{-1}."""
        return self._V

    @property
    def variance_traces(self) -> np.ndarray:
        return self._trV

    @property
    def tr_var_mle(self) -> float:
        """tr of the stacked MLE covariance, sum_j tr W_j^{-1}."""
        return float(self._trV.sum())

    @property
    def beta_mat(self) -> np.ndarray:
        """(k, p) matrix of study estimates."""
        return self._beta

    @property
    def beta_stacked(self) -> np.ndarray:
        """Stacked study estimates, length k*p."""
        return self._beta.reshape(-1)

    @property
    def precision_rhs(self) -> np.ndarray:
        """(k, p) array of W_j beta_tilde_j."""
        return self._Wb

    def with_beta_tilde(self, beta_mat: np.ndarray) -> "MetaProblem":
        """Copy of the problem with replaced study estimates (same designs).

        Used by simulation code that redraws estimates under fixed designs;
        the precision caches are rebuilt from the unchanged Gram matrices.
        """
        beta_mat = np.asarray(beta_mat, dtype=float)
        if beta_mat.shape != (self._k, self._p):
            raise InputError(
                f"beta_mat has shape {beta_mat.shape}, expected {(self._k, self._p)}"
            )
        studies = tuple(
            replace(st, beta_tilde=beta_mat[j]) for j, st in enumerate(self._studies)
        )
        return MetaProblem(studies)

    def __repr__(self) -> str:
        return f"MetaProblem(k={self._k}, p={self._p})"


@dataclass(frozen=True)
class ShrinkageVector:
    """Per-study shrinkage weights pi in [0, 1]^k."""

    pi: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "pi", _as_readonly(np.atleast_1d(self.pi)))
        if self.pi.ndim != 1:
            raise InputError("pi must be a vector")
        if not np.all(np.isfinite(self.pi)):
            raise InputError("pi has non-finite entries")
        if np.any(self.pi < 0) or np.any(self.pi > 1):
            raise InputError("pi entries must lie in [0, 1]")

    @property
    def k(self) -> int:
        return self.pi.shape[0]


@dataclass(frozen=True)
class RayScale:
    """Ray decomposition pi = c * pi_r with max(pi_r) = 1 and c in [0, 1]."""

    c: float
    pi_r: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "pi_r", _as_readonly(np.atleast_1d(self.pi_r)))
        if not (0.0 <= self.c <= 1.0):
            raise InputError(f"ray scale c={self.c} outside [0, 1]")
        if np.any(self.pi_r < 0) or np.any(self.pi_r > 1 + 1e-12):
            raise InputError("pi_r entries must lie in [0, 1]")
        if abs(float(self.pi_r.max()) - 1.0) > 1e-12:
            raise InputError("pi_r must have maximum entry 1")

    @property
    def pi(self) -> np.ndarray:
        return self.c * self.pi_r


@dataclass(frozen=True)
class StandardizationRecord:
    """Per-study covariate scales used to standardize a problem.

    ``scales[j, l]`` multiplies coefficient l of study j on the standardized
    scale; dividing recovers the original scale.
    """

    study_ids: tuple[str, ...]
    scales: np.ndarray
    pooled: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "scales", _as_readonly(self.scales))

    def to_standardized(self, study_index: int, vec: np.ndarray) -> np.ndarray:
        return np.asarray(vec, dtype=float) * self.scales[study_index]

    def to_original(self, study_index: int, vec: np.ndarray) -> np.ndarray:
        return np.asarray(vec, dtype=float) / self.scales[study_index]


# ---------------------------------------------------------------------------
# raw-data reduction


def summarize_raw_study(
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray | None = None,
    *,
    study_id: str = "study",
    sigma2_mode: str = "mle",
    intercept_index: int | None = None,
) -> StudySummary:
    """Reduce raw study data to the summary statistics used downstream.

    ``x`` holds the shared covariates (n, p); ``z`` optionally holds
    study-specific nuisance covariates (n, q - p). The full design [x z] must
    have full column rank and n > q. sigma2 uses the MLE denominator RSS/n by
    default; pass sigma2_mode="unbiased" for RSS/(n - q).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.ndim != 2:
        raise InputError(f"study {study_id}: x must be 2-dimensional")
    n, p = x.shape
    if y.shape[0] != n:
        raise InputError(f"study {study_id}: y has {y.shape[0]} rows, x has {n}")
    if z is not None:
        z = np.asarray(z, dtype=float)
        if z.ndim != 2 or z.shape[0] != n:
            raise InputError(f"study {study_id}: z must be (n, q-p)")
        if z.shape[1] == 0:
            z = None
    q = p + (z.shape[1] if z is not None else 0)
    if n <= q:
        raise InputError(f"study {study_id}: need n > q, got n={n}, q={q}")
    design = x if z is None else np.hstack([x, z])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < q:
        raise InputError(f"study {study_id}: design [x z] is rank deficient ({rank} < {q})")
    resid = y - design @ coef
    rss = float(resid @ resid)
    if sigma2_mode == "mle":
        sigma2 = rss / n
    elif sigma2_mode == "unbiased":
        sigma2 = rss / (n - q)
    else:
        raise InputError(f"unknown sigma2_mode {sigma2_mode!r}")
    xtx = x.T @ x
    if z is None:
        gram = symmetrize(xtx)
    else:
        xtz = x.T @ z
        gram = symmetrize(xtx - xtz @ solve_pd(z.T @ z, xtz.T))
    sds = x.std(axis=0, ddof=1)
    return StudySummary(
        study_id=study_id,
        p=p,
        q=q,
        n=n,
        sigma2=sigma2,
        beta_tilde=coef[:p],
        gram_proj=gram,
        covariate_sds=sds,
        intercept_index=intercept_index,
        rss=rss,
    )


def precision_from_covariance(cov_full: np.ndarray, sigma2: float, p: int) -> np.ndarray:
    """Recover the projected Gram matrix from a reported covariance matrix.

    ``cov_full`` is the estimated covariance of the study's full coefficient
    vector (shared coordinates first). The top-left p x p block inverts to
    the precision of the shared coordinates, so
    gram_proj = sigma2 * inv(cov_full[:p, :p]).
    """
    cov_full = np.asarray(cov_full, dtype=float)
    if cov_full.ndim != 2 or cov_full.shape[0] != cov_full.shape[1]:
        raise InputError("cov_full must be square")
    if cov_full.shape[0] < p:
        raise InputError(f"cov_full is {cov_full.shape[0]} x {cov_full.shape[0]}, need at least p={p}")
    block = symmetrize(cov_full[:p, :p])
    eigs = pd_eigenvalues(block)
    if eigs[0] <= PD_RTOL * max(eigs[-1], 0.0):
        raise InputError(
            f"top-left covariance block is singular (smallest eigenvalue {eigs[0]:.6g})"
        )
    return symmetrize(inv_pd(block) * sigma2)


# ---------------------------------------------------------------------------
# document loading

_GRAM_KEYS = ("gram_proj", "gram_blocks", "cov_full")


def _study_from_entry(entry: dict, index: int, base_dir: str) -> StudySummary:
    if not isinstance(entry, dict):
        raise InputError(f"study entry {index} is not an object")
    sid = str(entry.get("study_id", entry.get("id", f"study{index + 1}")))
    if "csv" in entry:
        return _study_from_csv(entry, sid, base_dir)

    for key in ("n", "sigma2", "beta_tilde"):
        if key not in entry:
            raise InputError(f"study {sid}: missing required field {key!r}")
    present = [key for key in _GRAM_KEYS if key in entry]
    if len(present) != 1:
        raise InputError(
            f"study {sid}: exactly one of {', '.join(_GRAM_KEYS)} must be given "
            f"(found {present or 'none'})"
        )
    beta = np.asarray(entry["beta_tilde"], dtype=float).reshape(-1)
    p = int(entry.get("p", beta.shape[0]))
    if beta.shape[0] != p:
        raise InputError(f"study {sid}: beta_tilde length {beta.shape[0]} does not match p={p}")
    q = int(entry.get("q", p))
    n = int(entry["n"])
    sigma2 = float(entry["sigma2"])

    key = present[0]
    if key == "gram_proj":
        gram = np.asarray(entry["gram_proj"], dtype=float)
    elif key == "gram_blocks":
        blocks = entry["gram_blocks"]
        for part in ("xx", "xz", "zz"):
            if part not in blocks:
                raise InputError(f"study {sid}: gram_blocks needs fields xx, xz, zz")
        xx = np.asarray(blocks["xx"], dtype=float)
        xz = np.asarray(blocks["xz"], dtype=float)
        zz = np.asarray(blocks["zz"], dtype=float)
        if xz.ndim != 2 or xx.shape != (p, p) or xz.shape[0] != p or zz.shape != (xz.shape[1],) * 2:
            raise InputError(f"study {sid}: gram_blocks dimensions are inconsistent")
        try:
            gram = symmetrize(xx - xz @ solve_pd(zz, xz.T))
        except np.linalg.LinAlgError:
            raise InputError(f"study {sid}: gram_blocks zz block is singular") from None
        if q == p:
            q = p + xz.shape[1]
    else:
        cov = np.asarray(entry["cov_full"], dtype=float)
        gram = precision_from_covariance(cov, sigma2, p)
        if q == p and cov.shape[0] > p:
            q = cov.shape[0]

    if gram.shape != (p, p):
        raise InputError(
            f"study {sid}: gram has shape {gram.shape}, expected ({p}, {p})"
        )
    sds = entry.get("covariate_sds")
    sds_arr = None if sds is None else np.asarray(sds, dtype=float).reshape(-1)
    idx = entry.get("intercept_index")
    rss = entry.get("rss")
    return StudySummary(
        study_id=sid,
        p=p,
        q=q,
        n=n,
        sigma2=sigma2,
        beta_tilde=beta,
        gram_proj=gram,
        covariate_sds=sds_arr,
        intercept_index=None if idx is None else int(idx),
        rss=None if rss is None else float(rss),
    )


def _study_from_csv(entry: dict, sid: str, base_dir: str) -> StudySummary:
    path = entry["csv"]
    if not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    if "outcome" not in entry or "shared" not in entry:
        raise InputError(f"study {sid}: csv entries need 'outcome' and 'shared' fields")
    outcome = entry["outcome"]
    shared = list(entry["shared"])
    nuisance = list(entry.get("nuisance", []))
    if not shared:
        raise InputError(f"study {sid}: 'shared' column list is empty")
    try:
        with open(path, newline="") as handle:
            reader = csv.DictReader(handle)
            rows = list(reader)
            fields = reader.fieldnames or []
    except OSError as exc:
        raise InputError(f"study {sid}: cannot read csv {path}: {exc}") from None
    if not rows:
        raise InputError(f"study {sid}: csv {path} has no data rows")
    for col in [outcome, *shared, *nuisance]:
        if col not in fields:
            raise InputError(f"study {sid}: csv {path} has no column {col!r}")

    def column(name: str) -> np.ndarray:
        try:
            return np.array([float(row[name]) for row in rows])
        except (TypeError, ValueError):
            raise InputError(f"study {sid}: non-numeric value in column {name!r}") from None

    y = column(outcome)
    x = np.column_stack([column(c) for c in shared])
    z = np.column_stack([column(c) for c in nuisance]) if nuisance else None
    idx = entry.get("intercept_index")
    return summarize_raw_study(
        x,
        y,
        z,
        study_id=sid,
        sigma2_mode=entry.get("sigma2_mode", "mle"),
        intercept_index=None if idx is None else int(idx),
    )


def load_meta_problem(source: "str | os.PathLike[str] | dict") -> MetaProblem:
    """Build a MetaProblem from a JSON document (path or already-parsed dict).

    The document holds a top-level "studies" list. Each entry either carries
    summary statistics directly (beta_tilde, sigma2, n, and exactly one of
    gram_proj / gram_blocks / cov_full) or points at a raw csv file with
    declared outcome, shared, and nuisance columns.
    """
    base_dir = os.getcwd()
    if isinstance(source, dict):
        doc = source
    else:
        path = os.fspath(source)
        base_dir = os.path.dirname(os.path.abspath(path))
        try:
            with open(path) as handle:
                doc = json.load(handle)
        except OSError as exc:
            raise InputError(f"cannot read input document: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"input document is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "studies" not in doc:
        raise InputError("input document must be an object with a 'studies' list")
    entries = doc["studies"]
    if not isinstance(entries, list) or not entries:
        raise InputError("'studies' must be a non-empty list")
    studies = [_study_from_entry(entry, i, base_dir) for i, entry in enumerate(entries)]
    return MetaProblem(studies)


def document_from_problem(problem: MetaProblem) -> dict:
    """Serialize a problem back to the document schema (summary form)."""
    studies = []
    for st in problem.studies:
        entry: dict = {
            "study_id": st.study_id,
            "p": st.p,
            "q": st.q,
            "n": st.n,
            "sigma2": st.sigma2,
            "beta_tilde": st.beta_tilde.tolist(),
            "gram_proj": st.gram_proj.tolist(),
        }
        if st.covariate_sds is not None:
            entry["covariate_sds"] = st.covariate_sds.tolist()
        if st.intercept_index is not None:
            entry["intercept_index"] = st.intercept_index
        if st.rss is not None:
            entry["rss"] = st.rss
        studies.append(entry)
    return {"studies": studies}


def save_meta_problem(problem: MetaProblem, path: "str | os.PathLike[str]") -> None:
    with open(path, "w") as handle:
        json.dump(document_from_problem(problem), handle, indent=1)
        handle.write("\n")


# ---------------------------------------------------------------------------
# standardization


def _study_scales(st: StudySummary) -> np.ndarray:
    if st.covariate_sds is None:
        raise InputError(
            f"study {st.study_id}: covariate_sds required for standardization"
        )
    scales = np.array(st.covariate_sds, dtype=float)
    if st.intercept_index is not None:
        scales[st.intercept_index] = 1.0
    bad = np.nonzero(~(scales > 0))[0]
    if bad.size:
        raise InputError(
            f"study {st.study_id}: covariate {bad[0]} has non-positive SD, cannot standardize"
        )
    return scales


def standardize(
    problem: MetaProblem, *, pooled: bool = False
) -> tuple[MetaProblem, StandardizationRecord]:
    """Rescale each study's coefficients to unit-SD covariates.

    Coefficient l is multiplied by its covariate SD s_l, and the Gram matrix
    entry (l, m) is divided by s_l * s_m; sigma2 is untouched. The intercept
    (identified by intercept_index only, never inferred) keeps scale 1. With
    pooled=True a single n-weighted root-mean-square SD per coordinate is
    shared across studies.
    """
    per_study = np.stack([_study_scales(st) for st in problem.studies])
    if pooled:
        weights = np.array([st.n for st in problem.studies], dtype=float)
        pooled_sd = np.sqrt(
            np.einsum("j,jl->l", weights, per_study**2) / weights.sum()
        )
        scales = np.tile(pooled_sd, (problem.k, 1))
        for j, st in enumerate(problem.studies):
            if st.intercept_index is not None:
                scales[j, st.intercept_index] = 1.0
    else:
        scales = per_study
    new_studies = []
    for j, st in enumerate(problem.studies):
        s = scales[j]
        gram = st.gram_proj / np.outer(s, s)
        sds = None if st.covariate_sds is None else st.covariate_sds / s
        new_studies.append(
            replace(
                st,
                beta_tilde=st.beta_tilde * s,
                gram_proj=symmetrize(gram),
                covariate_sds=sds,
            )
        )
    record = StandardizationRecord(
        study_ids=problem.study_ids, scales=scales, pooled=pooled
    )
    return MetaProblem(new_studies), record


def unstandardize(problem: MetaProblem, record: StandardizationRecord) -> MetaProblem:
    """Invert :func:`standardize` (round-trips to the original problem)."""
    if record.scales.shape != (problem.k, problem.p):
        raise InputError("standardization record does not match problem shape")
    new_studies = []
    for j, st in enumerate(problem.studies):
        s = record.scales[j]
        sds = None if st.covariate_sds is None else st.covariate_sds * s
        new_studies.append(
            replace(
                st,
                beta_tilde=st.beta_tilde / s,
                gram_proj=symmetrize(st.gram_proj * np.outer(s, s)),
                covariate_sds=sds,
            )
        )
    return MetaProblem(new_studies)
