import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hammeta.model import RayScale
from hammeta.risk import (
    bmse,
    c_star,
    decompose,
    make_objective,
    mse_in_c,
    pi_star_equal,
    pseudo_mse,
    risk_terms,
    true_mse,
    umse,
)

import oracles
from conftest import build_problem


class TestWorkedValues:
    """Exact fractions for the two-study intercept-only instance."""

    def test_terms_at_full_weights(self, worked_problem, worked_beta_true):
        t = risk_terms(worked_problem, np.ones(2), worked_beta_true)
        assert t.tr_cov == pytest.approx(-5.0 / 12.0, rel=1e-12)
        assert t.tr_var == pytest.approx(5.0 / 12.0, rel=1e-12)
        assert t.tr_var_mle == pytest.approx(3.0 / 4.0, rel=1e-12)
        assert t.bias_norm2_true == pytest.approx(20.0 / 9.0, rel=1e-12)
        # plug-in bias equals the oracle value here since beta_true is the
        # observed estimate vector
        assert t.bias_norm2_hat == pytest.approx(20.0 / 9.0, rel=1e-12)

    def test_true_mse_sums_the_terms(self, worked_problem, worked_beta_true):
        got = true_mse(worked_problem, np.ones(2), worked_beta_true)
        assert got == pytest.approx(23.0 / 9.0, rel=1e-12)

    def test_quadratic_coefficients_along_diagonal_ray(
        self, worked_problem, worked_beta_true
    ):
        a, b, const = mse_in_c(worked_problem, np.ones(2), worked_beta_true)
        assert a == pytest.approx(95.0 / 36.0, rel=1e-12)
        assert b == pytest.approx(-5.0 / 6.0, rel=1e-12)
        assert const == pytest.approx(3.0 / 4.0, rel=1e-12)

    def test_oracle_scale_and_equal_weight(self, worked_problem, worked_beta_true):
        assert c_star(worked_problem, np.ones(2), worked_beta_true) == pytest.approx(
            3.0 / 19.0, rel=1e-12
        )
        assert pi_star_equal(worked_problem, worked_beta_true) == pytest.approx(
            3.0 / 19.0, rel=1e-12
        )

    def test_pseudo_value_and_zero(self, worked_problem):
        assert pseudo_mse(worked_problem, np.ones(2)) == pytest.approx(
            260.0 / 171.0, rel=1e-12
        )
        assert pseudo_mse(worked_problem, np.zeros(2)) == 0.0

    def test_oracle_scale_clamps_at_one_for_homogeneous_truth(self, worked_problem):
        shared = np.array([[2.0], [2.0]])
        assert c_star(worked_problem, np.ones(2), shared) == 1.0


class TestAgainstDenseOracle:
    @pytest.mark.parametrize(
        "seed,k,p", [(40, 2, 1), (41, 3, 2), (42, 5, 3), (43, 4, 1), (44, 2, 4)]
    )
    def test_all_terms_match(self, seed, k, p):
        prob = build_problem(seed=seed, k=k, p=p)
        rng = np.random.default_rng(seed)
        pi = rng.uniform(0.0, 1.0, size=k)
        beta_true = rng.normal(0.0, 1.5, size=(k, p))
        t = risk_terms(prob, pi, beta_true)
        d = oracles.dense_risk(prob, pi, beta_true)
        assert t.bias_norm2_hat == pytest.approx(d["bias_norm2_hat"], rel=1e-9, abs=1e-12)
        assert t.tr_cov == pytest.approx(d["tr_cov"], rel=1e-9, abs=1e-12)
        assert t.tr_var == pytest.approx(d["tr_var"], rel=1e-9, abs=1e-12)
        assert t.tr_var_mle == pytest.approx(d["tr_var_mle"], rel=1e-9)
        assert t.bias_norm2_true == pytest.approx(d["bias_norm2_true"], rel=1e-9, abs=1e-12)
        assert true_mse(prob, pi, beta_true) == pytest.approx(d["true_mse"], rel=1e-9)

    def test_scalar_fast_path_matches_general(self):
        # p = 1 takes a dedicated code path; pin it to the dense computation
        for seed in range(45, 50):
            prob = build_problem(seed=seed, k=6, p=1)
            rng = np.random.default_rng(seed)
            pi = rng.uniform(0.0, 1.0, size=6)
            pi[rng.integers(0, 6)] = 0.0  # exercise the zero-weight branch
            beta_true = rng.normal(0.0, 1.0, size=(6, 1))
            t = risk_terms(prob, pi, beta_true)
            d = oracles.dense_risk(prob, pi, beta_true)
            for name in ("bias_norm2_hat", "tr_cov", "tr_var", "bias_norm2_true"):
                assert getattr(t, name) == pytest.approx(d[name], rel=1e-9, abs=1e-12), name

    def test_zero_pi_short_circuit(self):
        prob = build_problem(seed=50, k=3, p=2)
        t = risk_terms(prob, np.zeros(3))
        assert t.bias_norm2_hat == 0.0
        assert t.tr_cov == 0.0
        assert t.tr_var == 0.0
        assert t.tr_var_mle == pytest.approx(prob.tr_var_mle)


@settings(max_examples=40, deadline=None)
@given(
    c=st.floats(min_value=0.0, max_value=1.0),
    seed=st.integers(min_value=0, max_value=8),
)
def test_ray_power_laws(c, seed):
    """bias scales as c^2, tr_cov as c, tr_var as c^2 along any ray."""
    prob = build_problem(seed=seed, k=3, p=2)
    rng = np.random.default_rng(seed + 60)
    pi_r = rng.uniform(0.1, 1.0, size=3)
    pi_r /= pi_r.max()
    ref = risk_terms(prob, pi_r)
    scaled = risk_terms(prob, c * pi_r)
    assert scaled.bias_norm2_hat == pytest.approx(
        c**2 * ref.bias_norm2_hat, rel=1e-9, abs=1e-12
    )
    assert scaled.tr_cov == pytest.approx(c * ref.tr_cov, rel=1e-9, abs=1e-12)
    assert scaled.tr_var == pytest.approx(c**2 * ref.tr_var, rel=1e-9, abs=1e-12)


class TestQuadraticStructure:
    def test_mse_matches_quadratic_on_grid(self):
        prob = build_problem(seed=61, k=4, p=2)
        rng = np.random.default_rng(61)
        beta_true = rng.normal(0.0, 1.0, size=(4, 2))
        pi_r = rng.uniform(0.2, 1.0, size=4)
        pi_r /= pi_r.max()
        a, b, const = mse_in_c(prob, pi_r, beta_true)
        for c in np.linspace(0.0, 1.0, 23):
            direct = true_mse(prob, c * pi_r, beta_true)
            assert direct == pytest.approx(a * c**2 + b * c + const, rel=1e-10)

    def test_c_star_minimizes_and_improvement_window(self):
        prob = build_problem(seed=62, k=3, p=2)
        rng = np.random.default_rng(62)
        beta_true = rng.normal(0.0, 1.0, size=(3, 2))
        pi_r = rng.uniform(0.3, 1.0, size=3)
        pi_r /= pi_r.max()
        cs = c_star(prob, pi_r, beta_true)
        assert cs > 0.0
        mse0 = true_mse(prob, np.zeros(3), beta_true)
        at_star = true_mse(prob, cs * pi_r, beta_true)
        assert at_star < mse0
        for c in np.linspace(0.01, 1.0, 50):
            diff = true_mse(prob, c * pi_r, beta_true) - mse0
            if abs(diff) < 1e-10 * mse0:
                continue
            assert (diff < 0) == (c < 2 * cs), f"window violated at c={c}"

    def test_degenerate_ray_rejected(self):
        prob = build_problem(seed=63, k=3, p=2)
        beta = np.zeros((3, 2))
        with pytest.raises(ValueError, match="degenerate|single"):
            c_star(prob, np.array([1.0, 0.0, 0.0]), beta)

    def test_non_unit_direction_rejected(self):
        prob = build_problem(seed=64, k=3, p=2)
        with pytest.raises(ValueError, match="maximum entry 1"):
            mse_in_c(prob, np.array([0.5, 0.2, 0.4]), np.zeros((3, 2)))

    def test_ray_scale_object_accepted(self):
        prob = build_problem(seed=65, k=3, p=2)
        ray = RayScale(c=0.4, pi_r=np.array([1.0, 0.5, 0.25]))
        t_vec = risk_terms(prob, ray.pi)
        t_ray = risk_terms(prob, ray)
        assert t_vec.bias_norm2_hat == pytest.approx(t_ray.bias_norm2_hat, rel=1e-12)
        assert t_vec.tr_cov == pytest.approx(t_ray.tr_cov, rel=1e-12)


class TestEqualWeightStart:
    def test_plug_in_uses_estimates_when_truth_missing(self):
        prob = build_problem(seed=66, k=3, p=2)
        plug = pi_star_equal(prob)
        explicit = pi_star_equal(prob, prob.beta_mat)
        assert plug == pytest.approx(explicit, rel=1e-12)

    def test_single_study_rejected(self):
        prob = build_problem(seed=67, k=1, p=2)
        with pytest.raises(ValueError, match="k = 1"):
            pi_star_equal(prob)

    def test_clipped_to_unit_interval(self):
        # nearly identical studies push the unclipped optimum past 1
        prob = build_problem(seed=68, k=4, p=1, spread=1e-4)
        val = pi_star_equal(prob)
        assert 0.0 <= val <= 1.0


class TestDecompose:
    def test_worked_example(self):
        ray = decompose(np.array([0.5, 0.25]))
        assert ray.c == pytest.approx(0.5)
        assert np.allclose(ray.pi_r, [1.0, 0.5])

    def test_round_trip(self):
        rng = np.random.default_rng(69)
        for _ in range(20):
            pi = rng.uniform(0.0, 1.0, size=4)
            pi[rng.integers(0, 4)] = rng.uniform(0.5, 1.0)
            ray = decompose(pi)
            assert np.allclose(ray.pi, pi, atol=1e-12)
            assert ray.pi_r.max() == pytest.approx(1.0)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError, match="all-zero"):
            decompose(np.zeros(3))


class TestProxies:
    def test_umse_ray_form_matches_vector_form(self):
        prob = build_problem(seed=70, k=3, p=2)
        ray = RayScale(c=0.6, pi_r=np.array([1.0, 0.4, 0.7]))
        assert umse(prob, ray) == pytest.approx(umse(prob, ray.pi), rel=1e-10)

    def test_proxies_at_zero(self):
        prob = build_problem(seed=71, k=3, p=2)
        zero = np.zeros(3)
        assert umse(prob, zero) == pytest.approx(prob.tr_var_mle)
        assert bmse(prob, zero) == pytest.approx(prob.tr_var_mle)
        assert pseudo_mse(prob, zero) == 0.0

    def test_proxy_identities_in_terms(self):
        prob = build_problem(seed=72, k=4, p=2)
        rng = np.random.default_rng(72)
        pi = rng.uniform(0.1, 0.9, size=4)
        t = risk_terms(prob, pi)
        assert umse(prob, pi) == pytest.approx(
            t.bias_norm2_hat + 2 * t.tr_cov + t.tr_var_mle, rel=1e-12
        )
        assert bmse(prob, pi) == pytest.approx(
            t.bias_norm2_hat + t.tr_var + 2 * t.tr_cov + t.tr_var_mle, rel=1e-12
        )
        denom = t.tr_var + t.bias_norm2_hat
        assert pseudo_mse(prob, pi) == pytest.approx(
            t.bias_norm2_hat + 2 * t.bias_norm2_hat * t.tr_cov / denom, rel=1e-12
        )

    def test_pseudo_sign_flip(self):
        prob = build_problem(seed=73, k=3, p=2)
        pi = np.array([0.5, 0.7, 0.3])
        t = risk_terms(prob, pi)
        corr = 2 * t.bias_norm2_hat * t.tr_cov / (t.tr_var + t.bias_norm2_hat)
        assert pseudo_mse(prob, pi, pseudo_sign="plus") == pytest.approx(
            t.bias_norm2_hat + corr, rel=1e-12
        )
        assert pseudo_mse(prob, pi, pseudo_sign="minus") == pytest.approx(
            t.bias_norm2_hat - corr, rel=1e-12
        )
        with pytest.raises(ValueError, match="pseudo_sign"):
            pseudo_mse(prob, pi, pseudo_sign="sideways")

    def test_pseudo_stationary_at_proxy_minimizer(self):
        # along a ray the objective c^2 b + 2 c b t/(v+b) is flat exactly at
        # c = -t/(v+b)
        prob = build_problem(seed=74, k=3, p=2, spread=0.2)
        rng = np.random.default_rng(74)
        pi_r = rng.uniform(0.4, 1.0, size=3)
        pi_r /= pi_r.max()
        t = risk_terms(prob, pi_r)
        c_tilde = -t.tr_cov / (t.tr_var + t.bias_norm2_hat)
        assert 0.0 < c_tilde < 1.0
        h = 1e-5 * c_tilde
        plus = pseudo_mse(prob, (c_tilde + h) * pi_r)
        minus = pseudo_mse(prob, (c_tilde - h) * pi_r)
        deriv = (plus - minus) / (2 * h)
        assert abs(deriv) < 1e-7 * max(1.0, t.bias_norm2_hat)

    def test_expected_plug_in_bias_inflation(self):
        # E[bias_hat] = bias_true + tr_var under redrawn estimates; a light
        # Monte-Carlo version of the identity (the heavy one lives in the
        # acceptance suite)
        prob = build_problem(seed=75, k=3, p=2)
        rng = np.random.default_rng(75)
        beta_true = rng.normal(0.0, 1.0, size=(3, 2))
        base = prob.with_beta_tilde(beta_true)
        pi = np.array([0.5, 0.8, 0.3])
        exact = risk_terms(base, pi, beta_true)
        chols = np.stack([np.linalg.cholesky(v) for v in base.variance_blocks])
        draws = 4000
        noise = np.einsum("jab,rjb->rja", chols, rng.standard_normal((draws, 3, 2)))
        vals = np.array(
            [
                risk_terms(base.with_beta_tilde(beta_true + noise[i]), pi).bias_norm2_hat
                for i in range(draws)
            ]
        )
        expected = exact.bias_norm2_true + exact.tr_var
        assert vals.mean() == pytest.approx(expected, rel=0.1)


class TestMakeObjective:
    def test_closures_match_module_functions(self):
        prob = build_problem(seed=76, k=3, p=2)
        rng = np.random.default_rng(76)
        beta_true = rng.normal(size=(3, 2))
        pi = rng.uniform(0.1, 0.9, size=3)
        assert make_objective(prob, "pseudo")(pi) == pytest.approx(
            pseudo_mse(prob, pi), rel=1e-12
        )
        assert make_objective(prob, "umse")(pi) == pytest.approx(umse(prob, pi), rel=1e-12)
        assert make_objective(prob, "bmse")(pi) == pytest.approx(bmse(prob, pi), rel=1e-12)
        assert make_objective(prob, "true", beta_true=beta_true)(pi) == pytest.approx(
            true_mse(prob, pi, beta_true), rel=1e-12
        )

    def test_invalid_arguments(self):
        prob = build_problem(seed=77, k=2, p=1)
        with pytest.raises(ValueError, match="criterion"):
            make_objective(prob, "mape")
        with pytest.raises(ValueError, match="beta_true"):
            make_objective(prob, "true")
        with pytest.raises(ValueError, match="pseudo_sign"):
            make_objective(prob, "pseudo", pseudo_sign="upside_down")
