import sys

import numpy as np
import pytest

from hammeta.model import MetaProblem, StudySummary


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print the acceptance checklist collected by test_acceptance, if any."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None) if module else None
    if not lines:
        return
    terminalreporter.section("acceptance checklist")
    for line in lines:
        terminalreporter.write_line(line)


def build_problem(
    seed: int,
    k: int,
    p: int,
    spread: float = 1.0,
    sigma_lo: float = 0.5,
    sigma_hi: float = 2.0,
    with_sds: bool = False,
) -> MetaProblem:
    """Random well-conditioned instance for property tests."""
    rng = np.random.default_rng(seed)
    center = rng.normal(0.0, 1.0, size=p)
    studies = []
    for j in range(k):
        n = int(rng.integers(30, 200))
        raw = rng.standard_normal((p + 3, p))
        gram = raw.T @ raw + p * np.eye(p)
        gram = 0.5 * (gram + gram.T) * float(rng.uniform(2.0, 30.0))
        studies.append(
            StudySummary(
                study_id=f"s{j + 1}",
                p=p,
                q=p,
                n=n,
                sigma2=float(rng.uniform(sigma_lo, sigma_hi)),
                beta_tilde=center + rng.normal(0.0, spread, size=p),
                gram_proj=gram,
                covariate_sds=rng.uniform(0.5, 3.0, size=p) if with_sds else None,
                intercept_index=0 if with_sds else None,
                rss=float(rng.uniform(5.0, 80.0)),
            )
        )
    return MetaProblem(studies)


@pytest.fixture
def worked_problem() -> MetaProblem:
    """Two intercept-only studies with precisions 2 and 4, estimates 1 and 3.

    Small enough that every downstream quantity has a hand-computable value:
    the pooled estimate is 7/3, the averaging blocks at equal full weights are
    (1/3, 2/3), and so on. Several tests pin those fractions.
    """
    s1 = StudySummary(
        study_id="a",
        p=1,
        q=1,
        n=5,
        sigma2=1.0,
        beta_tilde=np.array([1.0]),
        gram_proj=np.array([[2.0]]),
    )
    s2 = StudySummary(
        study_id="b",
        p=1,
        q=1,
        n=5,
        sigma2=1.0,
        beta_tilde=np.array([3.0]),
        gram_proj=np.array([[4.0]]),
    )
    return MetaProblem([s1, s2])


@pytest.fixture
def worked_beta_true() -> np.ndarray:
    return np.array([[1.0], [3.0]])
