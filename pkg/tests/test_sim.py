import csv

import numpy as np
import pytest

from hammeta.inference import i_squared
from hammeta.sim import (
    SETTING_K_SIGMA2,
    SETTING_K_SIZE_COMBOS,
    BETA_MEAN_P4,
    SETTING1_BETA,
    SETTING1_SIZE_COMBOS,
    SETTING2_HET,
    SETTING3_CENTER,
    SimConfig,
    SimReport,
    frozen_params,
    generate_setting_k,
    generate_setting1,
    generate_setting2,
    generate_setting3,
    generate_setting4,
    make_example_corpus,
    run_cells,
    _replicate_problem,
    _rng,
)


class TestCellGeneration:
    def test_full_grids(self):
        s1 = SimConfig(
            setting="S1", size_combos=SETTING1_SIZE_COMBOS, p_values=(2, 4, 10, 20)
        ).cells()
        assert len(s1) == 40
        s2 = SimConfig(setting="S2", k_values=(5, 10, 20), het_levels=SETTING2_HET).cells()
        assert len(s2) == 12
        s3 = SimConfig(setting="S3", scenarios=("single", "two")).cells()
        assert len(s3) == 2
        s4 = SimConfig(
            setting="S4",
            scenarios=("i", "ii", "iii", "iv"),
            sample_sizes=(100, 200, 300, 400, 500),
        ).cells()
        assert len(s4) == 20
        kk = SimConfig(setting="K", size_combos=SETTING_K_SIZE_COMBOS).cells()
        assert len(kk) == 4

    def test_cell_id_formats(self):
        assert generate_setting1(2, (100, 100, 300)).cell_id == "S1[n=100-100-300,p=2]"
        assert generate_setting2(5, "none").cell_id == "S2[k=5,het=none]"
        assert generate_setting3("two").cell_id == "S3[two]"
        assert generate_setting4("ii", 500).cell_id == "S4[ii,n=500]"
        assert generate_setting_k((100, 500, 500)).cell_id == "K[n=100-500-500]"

    def test_cell_shapes(self):
        cell = generate_setting2(10, "mild")
        assert cell.k == 10
        assert cell.p == 4
        assert cell.sizes == (200,) * 10
        s3 = generate_setting3("single")
        assert (s3.k, s3.p) == (20, 1)
        s4 = generate_setting4("iv", 250)
        assert (s4.k, s4.p, s4.sizes) == (3, 4, (250, 250, 250))

    def test_generation_guards(self):
        with pytest.raises(ValueError, match="frozen coefficients"):
            generate_setting1(3)
        with pytest.raises(ValueError, match="three sample sizes"):
            generate_setting1(2, (100, 100))
        with pytest.raises(ValueError, match="heterogeneity"):
            generate_setting2(5, "wild")
        with pytest.raises(ValueError, match="k >= 4"):
            generate_setting2(3, "mixture")
        with pytest.raises(ValueError, match="scenario"):
            generate_setting3("three")
        with pytest.raises(ValueError, match="scenario"):
            generate_setting4("v")
        with pytest.raises(ValueError, match="k=3"):
            generate_setting_k((100,))
        with pytest.raises(ValueError, match="unknown setting"):
            SimConfig(setting="S9").cells()

    def test_cells_filter(self):
        cfg = SimConfig(
            setting="S1",
            size_combos=SETTING1_SIZE_COMBOS,
            p_values=(2,),
            cells_filter=("S1[n=100-100-100,p=2]",),
        )
        assert len(cfg.cells()) == 1
        with pytest.raises(ValueError, match="matched no cells"):
            SimConfig(setting="S1", cells_filter=("S1[nope]",)).cells()

    def test_estimator_resolution(self):
        assert SimConfig(setting="S2").resolved_estimators() == (
            "MLE",
            "FE",
            "HAM",
            "Ridge",
        )
        assert SimConfig(setting="K").resolved_estimators() == (
            "HAM-true-MSE",
            "HAM-UMSE",
            "HAM-BMSE",
            "HAM",
        )
        with pytest.raises(ValueError, match="unknown estimator"):
            SimConfig(setting="S1", estimators=("SUPERDUPER",)).resolved_estimators()


class TestFrozenParams:
    def test_s1_uses_the_frozen_table(self):
        cell = generate_setting1(4)
        frozen = frozen_params(cell, master_seed=0)
        assert np.array_equal(frozen["beta"], SETTING1_BETA[4])
        frozen["beta"][0, 0] = 99.0
        assert SETTING1_BETA[4][0, 0] != 99.0  # the table itself stays intact

    def test_s2_mean_vector(self):
        frozen = frozen_params(generate_setting2(5, "mild"), master_seed=0)
        assert np.array_equal(frozen["beta_mean"], BETA_MEAN_P4)

    def test_deterministic_per_seed(self):
        for cell in (generate_setting3("two"), generate_setting4("iii"), generate_setting_k()):
            a = frozen_params(cell, master_seed=11)
            b = frozen_params(cell, master_seed=11)
            assert np.array_equal(a["beta"], b["beta"])
            c = frozen_params(cell, master_seed=12)
            assert not np.array_equal(a["beta"], c["beta"])

    def test_s3_centers_and_rounding(self):
        frozen = frozen_params(generate_setting3("two"), master_seed=0)
        beta = frozen["beta"][:, 0]
        assert np.all(np.abs(beta[:5]) <= 0.25 + 1e-12)
        assert np.all(np.abs(beta[5:] - SETTING3_CENTER) <= 0.26)
        assert np.allclose(beta * 100, np.round(beta * 100))  # two decimals
        assert frozen["gamma"].shape == (20, 3)
        single = frozen_params(generate_setting3("single"), master_seed=0)
        assert np.all(np.abs(single["beta"][:, 0] - SETTING3_CENTER) <= 0.26)

    def test_s4_box_and_rounding(self):
        frozen = frozen_params(generate_setting4("ii", 500), master_seed=0)
        beta = frozen["beta"]
        assert beta.shape == (3, 4)
        assert np.all(np.abs(beta) <= 0.25)
        assert np.allclose(beta * 100, np.round(beta * 100))

    def test_k_frozen_bundle(self):
        cell = generate_setting_k((100, 100, 500))
        frozen = frozen_params(cell, master_seed=0)
        assert set(frozen) == {"beta", "designs", "oracle", "pi_true", "mse_true_sel"}
        assert [d.shape for d in frozen["designs"]] == [(100, 4), (100, 4), (500, 4)]
        oracle = frozen["oracle"]
        assert all(s.sigma2 == SETTING_K_SIGMA2 for s in oracle.studies)
        assert np.allclose(
            oracle.beta_mat, frozen["beta"]
        )  # oracle centered at the frozen truth
        # the selected-from-truth weight can only improve on the MLE risk
        assert frozen["mse_true_sel"] <= oracle.tr_var_mle + 1e-12
        assert np.all(frozen["pi_true"] >= 0.0)

    def test_k_beta_two_significant_digits(self):
        frozen = frozen_params(generate_setting_k(), master_seed=3)
        beta = frozen["beta"]
        nonzero = beta[beta != 0]
        mags = np.floor(np.log10(np.abs(nonzero)))
        scaled = nonzero / 10.0 ** (mags - 1)
        assert np.allclose(scaled, np.round(scaled))


class TestReplicateGeneration:
    def test_s2_heterogeneity_recipes(self):
        base = generate_setting2(5, "none")
        frozen = frozen_params(base, master_seed=0)
        rng = _rng(0, base, 0xA, 0)
        _, beta = _replicate_problem(base, frozen, rng)
        assert np.array_equal(beta, np.tile(BETA_MEAN_P4, (5, 1)))

        mix = generate_setting2(5, "mixture")
        frozen = frozen_params(mix, master_seed=0)
        rng = _rng(0, mix, 0xA, 0)
        _, beta = _replicate_problem(mix, frozen, rng)
        assert np.array_equal(beta[:3], np.tile(BETA_MEAN_P4, (3, 1)))
        assert not np.allclose(beta[3:], BETA_MEAN_P4)

    def test_s2_mild_spread_scale(self):
        cell = generate_setting2(5, "mild")
        frozen = frozen_params(cell, master_seed=0)
        draws = []
        for rep in range(60):
            rng = _rng(0, cell, 0xA, rep)
            _, beta = _replicate_problem(cell, frozen, rng)
            draws.append(beta - BETA_MEAN_P4)
        sd = np.std(np.stack(draws))
        assert sd == pytest.approx(np.sqrt(0.1), rel=0.15)

    def test_k_reuses_frozen_designs(self):
        cell = generate_setting_k()
        frozen = frozen_params(cell, master_seed=0)
        prob_a, _ = _replicate_problem(cell, frozen, _rng(0, cell, 0xA, 0))
        prob_b, _ = _replicate_problem(cell, frozen, _rng(0, cell, 0xA, 1))
        for sa, sb, design in zip(prob_a.studies, prob_b.studies, frozen["designs"]):
            assert np.allclose(sa.gram_proj, design.T @ design)
            assert np.array_equal(sa.gram_proj, sb.gram_proj)
            assert not np.array_equal(sa.beta_tilde, sb.beta_tilde)

    def test_s4_design_location_scale(self):
        cell = generate_setting4("iv", 400)
        frozen = frozen_params(cell, master_seed=0)
        prob, _ = _replicate_problem(cell, frozen, _rng(0, cell, 0xA, 0))
        # scenario iv: mu = (0, 5, 10); the gram mean of a non-intercept
        # column estimates mu, its spread estimates b = max(mu, 1)
        for study, mu in zip(prob.studies, (0.0, 5.0, 10.0)):
            col_mean = study.gram_proj[0, 1] / study.n
            assert col_mean == pytest.approx(mu, abs=0.5 if mu == 0 else mu * 0.12)

    def test_s3_nuisance_projection_keeps_p1(self):
        cell = generate_setting3("two")
        frozen = frozen_params(cell, master_seed=0)
        prob, beta = _replicate_problem(cell, frozen, _rng(0, cell, 0xA, 0))
        assert prob.p == 1
        assert prob.k == 20
        assert beta.shape == (20, 1)


@pytest.fixture(scope="module")
def small_report():
    cfg = SimConfig(
        setting="S1",
        replicate_count=3,
        master_seed=0,
        estimators=("MLE", "HAM"),
    )
    return cfg, run_cells(cfg)


class TestRunCells:
    def test_report_shape(self, small_report):
        _, report = small_report
        assert report.setting == "S1"
        assert len(report.rows) == 2
        row = report.row("S1[n=100-100-100,p=2]", "HAM")
        assert row.replicates == 3
        assert row.excluded == 0
        assert row.emse_x100 == pytest.approx(100 * row.emse)
        assert row.coverage_avg is not None
        assert row.mean_max_pi is not None
        assert row.pl_percent is None
        assert row.analytic_mse_x100 is None
        with pytest.raises(KeyError):
            report.row("S1[n=100-100-100,p=2]", "Bogus")

    def test_rerun_is_byte_identical(self, small_report, tmp_path):
        cfg, report = small_report
        again = run_cells(cfg)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        report.to_csv(a)
        again.to_csv(b)
        assert a.read_bytes() == b.read_bytes()

    def test_threads_do_not_change_results(self, small_report, tmp_path):
        cfg, report = small_report
        import dataclasses

        threaded = run_cells(dataclasses.replace(cfg, threads=2))
        a, b = tmp_path / "serial.csv", tmp_path / "threaded.csv"
        report.to_csv(a)
        threaded.to_csv(b)
        assert a.read_bytes() == b.read_bytes()

    def test_replicate_and_pi_rows(self, small_report):
        _, report = small_report
        # per-replicate squared errors: reps x estimators
        assert len(report.replicate_rows) == 3 * 2
        # pi draws are recorded for the adaptive estimator only: reps x k
        assert len(report.pi_rows) == 3 * 3
        assert {r[1] for r in report.pi_rows} == {"study1", "study2", "study3"}

    def test_csv_headers(self, small_report, tmp_path):
        _, report = small_report
        out = tmp_path / "report.csv"
        report.to_csv(out)
        with open(out, newline="") as handle:
            header = next(csv.reader(handle))
        assert header == [
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
        pi_out = tmp_path / "pi.csv"
        report.pi_summary_csv(pi_out)
        with open(pi_out, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["cell", "estimator", "study", "pi_q25", "pi_q50", "pi_q75"]
        assert len(rows) == 1 + 3  # HAM rows only, one per study

    def test_plot_data_layout(self, small_report, tmp_path):
        _, report = small_report
        out = tmp_path / "plot.csv"
        report.plot_data_csv(out)
        with open(out, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["cell", "series", "unit", "replicate", "value"]
        series = {r[1] for r in rows[1:]}
        assert series == {"sq_err", "pi"}
        assert len(rows) == 1 + len(report.replicate_rows) + len(report.pi_rows)

    def test_text_table_mentions_cells_and_estimators(self, small_report):
        _, report = small_report
        text = report.text_table()
        assert "S1[n=100-100-100,p=2]" in text
        assert "HAM" in text
        assert "eMSE x100" in text

    def test_k_setting_fills_pl_and_analytic(self):
        cfg = SimConfig(
            setting="K",
            replicate_count=2,
            master_seed=0,
            estimators=("HAM-true-MSE", "HAM"),
        )
        report = run_cells(cfg)
        oracle_row = report.row("K[n=100-100-100]", "HAM-true-MSE")
        # selection from the truth is frozen across replicates, so its
        # analytic risk never exceeds the MLE reference
        assert oracle_row.pl_percent == 0.0
        assert oracle_row.analytic_mse_x100 is not None
        ham_row = report.row("K[n=100-100-100]", "HAM")
        assert ham_row.pl_percent is not None
        assert ham_row.analytic_mse_x100 is not None

    def test_standardize_flag_runs(self):
        cfg = SimConfig(
            setting="S4",
            replicate_count=2,
            master_seed=0,
            scenarios=("ii",),
            sample_sizes=(100,),
            estimators=("HAM",),
            standardize=True,
        )
        report = run_cells(cfg)
        row = report.row("S4[ii,n=100]", "HAM")
        assert row.replicates == 2
        assert np.isfinite(row.emse)

    def test_exclusions_recorded_per_cell(self, small_report):
        _, report = small_report
        assert report.exclusions == (("S1[n=100-100-100,p=2]", 0),)


class TestExampleCorpus:
    def test_shape_and_determinism(self):
        a = make_example_corpus()
        b = make_example_corpus()
        assert a.k == 29
        assert a.p == 7
        assert np.array_equal(a.beta_stacked, b.beta_stacked)
        assert a.study_ids[0] == "site01"
        assert a.study_ids[-1] == "site29"

    def test_substantial_heterogeneity(self):
        prob = make_example_corpus()
        assert i_squared(prob) > 0.3

    def test_seed_changes_the_corpus(self):
        assert not np.array_equal(
            make_example_corpus(seed=1).beta_stacked, make_example_corpus().beta_stacked
        )
