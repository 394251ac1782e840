import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import logit
from scipy.stats import norm

from dosecombo.models import (
    DEFAULT_TRADEOFF,
    EfficacyParams,
    ToxicityParams,
    UtilityTradeoff,
    efficacy_prob,
    standardize_grid,
    toxicity_prob,
    utility,
)
from dosecombo.posterior import (
    ChainSet,
    McmcConfig,
    PatientRecord,
    TrialData,
    conditional_mtd_percentile,
    export_chains,
    log_posterior_efficacy,
    log_posterior_toxicity,
    sample_chains,
    summarize_on_grid,
    surfaces_at_points,
    utility_on_lattice,
)

GRID = standardize_grid([1, 2, 3, 4], [1, 2, 3, 4])


def synthetic_data(n, truth_t, truth_e, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        x = float(rng.choice(GRID.x_levels))
        y = float(rng.choice(GRID.y_levels))
        zt = int(rng.random() < toxicity_prob(truth_t, x, y))
        ze = int(rng.random() < efficacy_prob(truth_e, x, y))
        recs.append(PatientRecord(x, y, zt, ze, stage=1, cohort_index=1 + i // 2))
    return TrialData(recs)


TRUTH_T = ToxicityParams(0.10, 0.25, 0.35, 1.0)
TRUTH_E = EfficacyParams.from_named(
    [-1.0, 6.0, -6.0, 0, 0, 0, 5.0, -5.0, 0, 0, 0, 0.5], 0.3, 0.7, 0.4, 0.8)


class TestLogPosteriorToxicity:
    def test_empty_data_is_log_prior(self):
        p = ToxicityParams(0.05, 0.3, 0.4, eta=0.7)
        a, b = 0.1, 0.1
        gamma_term = a * math.log(b) - math.lgamma(a) + (a - 1) * math.log(0.7) - b * 0.7
        expected = -math.log(min(0.3, 0.4)) + gamma_term
        assert log_posterior_toxicity(p, TrialData()) == pytest.approx(expected, rel=1e-12)

    def test_prior_normalizes_over_rho00(self):
        # Integrating the prior density over rho00 at fixed (rho01, rho10, eta)
        # must return exactly the gamma density of eta: the conditional ratio
        # prior is uniform, contributing density 1/min(rho01, rho10).
        rho01, rho10, eta = 0.3, 0.45, 0.8
        a, b = 0.1, 0.1
        gamma_pdf = math.exp(a * math.log(b) - math.lgamma(a) + (a - 1) * math.log(eta) - b * eta)

        def dens(r00):
            return math.exp(log_posterior_toxicity(
                ToxicityParams(r00, rho01, rho10, eta), TrialData()))

        val, err = integrate.quad(dens, 1e-12, min(rho01, rho10), limit=200)
        assert val == pytest.approx(gamma_pdf, abs=1e-8)

    def test_outside_support(self):
        assert log_posterior_toxicity(ToxicityParams(0.5, 0.3, 0.4, 0.1), TrialData()) == -math.inf
        assert log_posterior_toxicity(ToxicityParams(0.05, 0.3, 0.4, -1.0), TrialData()) == -math.inf

    def test_single_dlt_at_origin(self):
        p = ToxicityParams(0.05, 0.3, 0.4, eta=0.7)
        data = TrialData([PatientRecord(0.0, 0.0, 1, 0, 1, 1)])
        prior_only = log_posterior_toxicity(p, TrialData())
        assert log_posterior_toxicity(p, data) == pytest.approx(
            prior_only + math.log(0.05), rel=1e-9)


class TestLogPosteriorEfficacy:
    def test_empty_data_is_log_prior(self):
        beta = [0.5, -1.0, 2.0, 0.1, 0.0, 0.3, -0.4, 1.1, 0.0, 0.2, -0.2, 0.9]
        p = EfficacyParams.from_named(beta, 0.2, 0.7, 0.1, 0.9)
        expected = sum(norm.logpdf(b, 0.0, 10.0) for b in beta) + 2 * math.log(2.0)
        assert log_posterior_efficacy(p, TrialData()) == pytest.approx(expected, rel=1e-12)

    def test_unordered_knots(self):
        p = EfficacyParams(beta=(0.0,) * 12, knots=(0.0, 0.7, 0.3, 0.0, 0.3, 0.6))
        assert log_posterior_efficacy(p, TrialData()) == -math.inf

    def test_single_nonresponse_flat_spline(self):
        p = EfficacyParams.from_named([0.0] * 12, 0.3, 0.6, 0.3, 0.6)
        data = TrialData([PatientRecord(0.4, 0.9, 0, 0, 2, 16)])
        prior_only = log_posterior_efficacy(p, TrialData())
        assert log_posterior_efficacy(p, data) == pytest.approx(
            prior_only + math.log(0.5), rel=1e-12)


class TestSampler:
    def test_deterministic_given_seed(self):
        data = synthetic_data(20, TRUTH_T, TRUTH_E, seed=5)
        cfg = McmcConfig(n_burn=150, n_keep=100, thin=1, n_chains=2, seed=99)
        a = sample_chains(data, cfg)
        b = sample_chains(data, cfg)
        assert np.array_equal(a.tox_draws, b.tox_draws)
        assert np.array_equal(a.eff_draws, b.eff_draws)
        assert a.diagnostics.split_rhat == b.diagnostics.split_rhat

    def test_different_seeds_differ(self):
        data = synthetic_data(20, TRUTH_T, TRUTH_E, seed=5)
        a = sample_chains(data, McmcConfig(100, 100, 1, 1, seed=1))
        b = sample_chains(data, McmcConfig(100, 100, 1, 1, seed=2))
        assert not np.array_equal(a.tox_draws, b.tox_draws)

    def test_prior_means_without_data(self):
        cfg = McmcConfig(n_burn=1500, n_keep=3000, thin=2, n_chains=2, seed=11)
        cs = sample_chains(TrialData(), cfg)
        assert abs(cs.tox_draws[:, 1].mean() - 0.5) < 0.03
        assert abs(cs.tox_draws[:, 2].mean() - 0.5) < 0.03
        # gamma(0.1, 0.1) mean is 1; use a batch-means standard error
        eta = cs.tox_draws[:, 3]
        batches = eta[: 40 * (eta.size // 40)].reshape(40, -1).mean(axis=1)
        se = batches.std(ddof=1) / math.sqrt(len(batches))
        assert abs(eta.mean() - 1.0) < 3 * max(se, 0.05)
        # beta coefficients keep their N(0, 10^2) prior
        assert abs(cs.eff_draws[:, 0].mean()) < 1.0
        assert abs(cs.eff_draws[:, 0].std() - 10.0) < 1.0
        # ordered uniform knots have means 1/3 and 2/3
        assert abs(cs.eff_draws[:, 12].mean() - 1 / 3) < 0.04
        assert abs(cs.eff_draws[:, 13].mean() - 2 / 3) < 0.04

    def test_support_preserved_in_all_draws(self):
        data = synthetic_data(30, TRUTH_T, TRUTH_E, seed=3)
        cs = sample_chains(data, McmcConfig(200, 300, 1, 2, seed=21))
        tox = cs.tox_draws
        assert np.all(tox[:, 0] <= np.minimum(tox[:, 1], tox[:, 2]))
        assert np.all(tox[:, 3] >= 0)
        assert np.all((tox[:, :3] > 0) & (tox[:, :3] < 1))
        eff = cs.eff_draws
        assert np.all(eff[:, 12] < eff[:, 13])
        assert np.all(eff[:, 14] < eff[:, 15])
        assert np.all((eff[:, 12:] >= 0) & (eff[:, 12:] <= 1))
        for i in (0, cs.size - 1):
            assert cs.tox_param(i).is_valid()
            assert cs.eff_param(i).is_valid()

    def test_draws_have_finite_posterior(self):
        data = synthetic_data(30, TRUTH_T, TRUTH_E, seed=3)
        cs = sample_chains(data, McmcConfig(100, 50, 1, 1, seed=2))
        for i in (0, 10, 49):
            assert math.isfinite(log_posterior_toxicity(cs.tox_param(i), data))
            assert math.isfinite(log_posterior_efficacy(cs.eff_param(i), data))

    def test_toxicity_only_mode(self):
        data = synthetic_data(10, TRUTH_T, TRUTH_E, seed=1)
        cs = sample_chains(data, McmcConfig(100, 50, 1, 1, seed=2), models="toxicity")
        assert cs.eff_draws is None
        assert cs.tox_draws.shape == (50, 4)
        with pytest.raises(ValueError):
            sample_chains(data, McmcConfig(100, 50, 1, 1, seed=2), models="nope")

    def test_posterior_recovery_short(self):
        # Desk-scale version of the recovery experiment (full scale runs in
        # the acceptance suite).
        data = synthetic_data(300, TRUTH_T, TRUTH_E, seed=8)
        cs = sample_chains(data, McmcConfig(800, 800, 1, 2, seed=13), models="toxicity")
        truth = np.array([TRUTH_T.rho00, TRUTH_T.rho01, TRUTH_T.rho10])
        mean = cs.tox_draws[:, :3].mean(axis=0)
        sd = cs.tox_draws[:, :3].std(axis=0)
        assert np.all(np.abs(mean - truth) < 2.5 * sd)


class TestSummaries:
    def test_degenerate_chain_matches_pointwise_utility(self):
        p = ToxicityParams(0.1, 0.3, 0.3, 0.5)
        e = TRUTH_E
        cs = ChainSet.from_params([p], [e])
        s = summarize_on_grid(cs, GRID, DEFAULT_TRADEOFF, lattice_resolution=11)
        for (i, j) in [(0, 0), (2, 1), (3, 3)]:
            x, y = GRID.x_levels[i], GRID.y_levels[j]
            pt = toxicity_prob(p, x, y)
            pe = efficacy_prob(e, x, y)
            assert s.pi_t_hat[i, j] == pytest.approx(pt, rel=1e-12)
            assert s.pi_e_hat[i, j] == pytest.approx(pe, rel=1e-12)
            assert s.u_hat[i, j] == pytest.approx(utility(pt, pe, DEFAULT_TRADEOFF), rel=1e-12)

    def test_indicator_averaged_per_draw(self):
        # pi_T = 0.2 and 0.4 at the origin with certain efficacy: the second
        # draw is zeroed by the indicator, so U_hat is half the first's value.
        e_sure = EfficacyParams.from_named([1000.0] + [0.0] * 11, 0.3, 0.6, 0.3, 0.6)
        cs = ChainSet.from_params(
            [ToxicityParams(0.2, 0.9, 0.9, 0.0), ToxicityParams(0.4, 0.9, 0.9, 0.0)],
            [e_sure, e_sure],
        )
        s = summarize_on_grid(cs, GRID, DEFAULT_TRADEOFF, lattice_resolution=5)
        expected = 0.5 * utility(0.2, 1.0, DEFAULT_TRADEOFF)
        assert s.u_hat[0, 0] == pytest.approx(expected, rel=1e-9)

    def test_all_unsafe_gives_empty_safe_set(self):
        p = ToxicityParams(0.6, 0.9, 0.9, 0.0)
        cs = ChainSet.from_params([p], [TRUTH_E])
        s = summarize_on_grid(cs, GRID, DEFAULT_TRADEOFF, lattice_resolution=5)
        assert s.safe_set == []
        assert np.all(s.u_hat == 0.0)
        assert np.all(s.lattice_u_hat == 0.0)

    def test_posterior_mean_is_draw_average(self):
        data = synthetic_data(24, TRUTH_T, TRUTH_E, seed=9)
        cs = sample_chains(data, McmcConfig(200, 120, 1, 1, seed=4))
        s = summarize_on_grid(cs, GRID, DEFAULT_TRADEOFF, lattice_resolution=7)
        # independent oracle: loop draws through the scalar model functions
        for (i, j) in [(0, 0), (1, 2)]:
            x, y = GRID.x_levels[i], GRID.y_levels[j]
            us = [
                utility(
                    toxicity_prob(cs.tox_param(k), x, y),
                    efficacy_prob(cs.eff_param(k), x, y),
                    DEFAULT_TRADEOFF,
                )
                for k in range(cs.size)
            ]
            assert s.u_hat[i, j] == pytest.approx(np.mean(us), rel=1e-10)

    def test_lattice_matches_generic_path(self):
        data = synthetic_data(16, TRUTH_T, TRUTH_E, seed=2)
        cs = sample_chains(data, McmcConfig(150, 80, 1, 1, seed=6))
        ax = np.linspace(0, 1, 9)
        xx, yy = np.meshgrid(ax, ax, indexing="ij")
        _, _, u = surfaces_at_points(cs, xx.ravel(), yy.ravel(), DEFAULT_TRADEOFF, chunk=32)
        # identical draw grouping -> identical floating-point sums
        lat = utility_on_lattice(cs, 9, DEFAULT_TRADEOFF, chunk=32)
        assert np.array_equal(lat, u.reshape(9, 9))
        # default chunking may regroup sums but stays within round-off
        assert np.allclose(utility_on_lattice(cs, 9, DEFAULT_TRADEOFF), u.reshape(9, 9),
                           rtol=0, atol=1e-13)

    def test_doubling_keep_within_mc_error(self):
        data = synthetic_data(24, TRUTH_T, TRUTH_E, seed=9)
        base = McmcConfig(400, 400, 1, 1, seed=14)
        cs1 = sample_chains(data, base)
        cs2 = sample_chains(data, McmcConfig(400, 800, 1, 1, seed=14))
        s1 = summarize_on_grid(cs1, GRID, DEFAULT_TRADEOFF, lattice_resolution=3)
        s2 = summarize_on_grid(cs2, GRID, DEFAULT_TRADEOFF, lattice_resolution=3)
        # MC standard error estimated from the larger run's per-draw utilities
        for (i, j) in [(0, 0), (2, 2), (3, 1)]:
            x, y = GRID.x_levels[i], GRID.y_levels[j]
            pt, pe, _ = surfaces_at_points(cs2, [x], [y], DEFAULT_TRADEOFF)
            us = []
            for k in range(cs2.size):
                us.append(utility(
                    toxicity_prob(cs2.tox_param(k), x, y),
                    efficacy_prob(cs2.eff_param(k), x, y), DEFAULT_TRADEOFF))
            se = np.std(us) / math.sqrt(len(us) / 20)  # conservative ESS deflation
            assert abs(s1.u_hat[i, j] - s2.u_hat[i, j]) <= 3 * max(se, 1e-3)


class TestConditionalMtd:
    def test_degenerate_closed_form(self):
        cs = ChainSet.from_params([ToxicityParams(0.05, 0.3, 0.4, 0.0)])
        expected = float((logit(0.3) - logit(0.05)) / (logit(0.4) - logit(0.05)))
        for alpha in (0.25, 0.4, 0.5):
            assert conditional_mtd_percentile(cs, "y", 0.0, alpha, 0.3) == pytest.approx(
                expected, rel=1e-12)

    def test_flat_draw_clamps_to_one(self):
        cs = ChainSet.from_params([ToxicityParams(0.05, 0.05, 0.05, 0.0)])
        assert conditional_mtd_percentile(cs, "y", 0.0, 0.25, 0.3) == 1.0
        assert conditional_mtd_percentile(cs, "x", 0.7, 0.25, 0.3) == 1.0

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(17)
        params = []
        for _ in range(1000):
            r00 = rng.uniform(0.01, 0.4)
            params.append(ToxicityParams(
                r00, rng.uniform(r00, 0.95), rng.uniform(r00, 0.95), rng.gamma(0.5, 2.0)))
        cs = ChainSet.from_params(params)
        for axis, v, alpha in [("y", 0.0, 0.25), ("y", 0.5, 0.37), ("x", 1.0, 0.5)]:
            got = conditional_mtd_percentile(cs, axis, v, alpha, 0.3)
            vals = []
            for p in params:
                a0 = float(logit(p.rho00))
                a1 = float(logit(p.rho10)) - a0
                a2 = float(logit(p.rho01)) - a0
                if axis == "y":
                    num, den = float(logit(0.3)) - a0 - a2 * v, a1 + p.eta * v
                else:
                    num, den = float(logit(0.3)) - a0 - a1 * v, a2 + p.eta * v
                mtd = num / den if den != 0.0 else math.inf
                vals.append(min(max(mtd, 0.0), 1.0))
            vals.sort()
            h = (len(vals) - 1) * alpha
            lo = math.floor(h)
            oracle = vals[lo] + (h - lo) * (vals[min(lo + 1, len(vals) - 1)] - vals[lo])
            assert got == oracle

    def test_nondecreasing_in_alpha(self):
        rng = np.random.default_rng(23)
        params = [ToxicityParams(r, r + 0.2, r + 0.3, g)
                  for r, g in zip(rng.uniform(0.01, 0.3, 200), rng.gamma(0.3, 2.0, 200))]
        cs = ChainSet.from_params(params)
        alphas = np.linspace(0.05, 0.95, 19)
        vals = [conditional_mtd_percentile(cs, "y", 0.25, a, 0.3) for a in alphas]
        assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))

    def test_rejects_bad_arguments(self):
        cs = ChainSet.from_params([ToxicityParams(0.05, 0.3, 0.4, 0.0)])
        with pytest.raises(ValueError):
            conditional_mtd_percentile(cs, "y", 0.0, 0.0, 0.3)
        with pytest.raises(ValueError):
            conditional_mtd_percentile(cs, "z", 0.0, 0.25, 0.3)
        with pytest.raises(ValueError):
            conditional_mtd_percentile(cs, "y", 1.5, 0.25, 0.3)


class TestExport:
    def test_round_trip(self, tmp_path):
        data = synthetic_data(10, TRUTH_T, TRUTH_E, seed=1)
        cs = sample_chains(data, McmcConfig(50, 40, 1, 2, seed=3))
        path = tmp_path / "chains.csv"
        export_chains(cs, path)
        lines = path.read_text().splitlines()
        header = lines[0].split(",")
        assert header[:6] == ["chain", "draw", "rho00", "rho01", "rho10", "eta"]
        assert len(lines) == 1 + cs.size
        row = lines[1].split(",")
        assert float(row[2]) == cs.tox_draws[0, 0]


class TestRecordValidation:
    def test_patient_record_bounds(self):
        with pytest.raises(ValueError):
            PatientRecord(1.2, 0.0, 0, 0, 1, 1)
        with pytest.raises(ValueError):
            PatientRecord(0.5, 0.0, 2, 0, 1, 1)

    def test_mcmc_config_validation(self):
        with pytest.raises(ValueError):
            McmcConfig(n_burn=0).validate()
        with pytest.raises(ValueError):
            McmcConfig(target_accept=0.7).validate()
