import math
import unittest

import numpy as np

from spinbath.decomodels import temperature_model
from spinbath.errors import BoundsError, MissingSeedError, SingularJacobianError, ZeroFrequencyError
from spinbath.fitkit import (FitEngine, FitOptions, covariance_scan, fit_avoided_crossing, fit_biexponential_t1,
                             fit_decay_noise_floor, fit_eseem, fit_field_sweep_gaussian, fit_stimulated,
                             fit_temperature_model, least_squares, stimulated_model, synth_crossing, synth_decay,
                             synth_eseem, synth_fieldsweep, synth_stimulated, synth_t1)
from spinbath.model import CentralSpinContext, CrossingTrace, RateTrace, SubEnsemble

STIM_TAU = np.linspace(10e-6, 100e-6, 10)
STIM_TW = np.geomspace(1e-4, 0.1, 12)
STIM_PRODUCT = 3.6 * 3.6e4
SEEDS = range(20)
# noisy round trips must land within their bound for this many of the 20 seeds
MIN_HITS = 19


def _stim_grid(seed, snr=100.0):
    return synth_stimulated(STIM_TAU, STIM_TW, a0=1.0, r=3.6, gamma_sd=3.6e4, t1=0.047, snr=snr, seed=seed)


def _within(value, expected, relative):
    return abs(value - expected) <= relative * abs(expected)


def _hits(results, name, expected, relative):
    return sum(_within(result[name], expected, relative) for result in results)


class TestEngine(unittest.TestCase):

    def test_weighted_line_matches_polyfit(self):
        rng = np.random.default_rng(5)
        x = np.linspace(0, 1, 30)
        sigma = np.full(30, 0.1)
        y = 2.0 * x - 0.5 + rng.normal(0, 0.1, 30)
        result = least_squares(lambda x_, p: p[0] * x_ + p[1], [1.0, 0.0], x, y, ["slope", "intercept"],
                               sigma=sigma)
        coefficients, covariance = np.polyfit(x, y, 1, w=1 / sigma, cov="unscaled")
        np.testing.assert_allclose(result.values, coefficients, rtol=1e-6)
        np.testing.assert_allclose(result.covariance, covariance, rtol=1e-4)
        self.assertTrue(result.converged)
        self.assertIsNone(result.seed)

    def test_deterministic(self):
        trace = synth_decay(np.linspace(0, 5e-3, 80), 1.0, 1e-3, 0.05, 100.0, seed=3)
        first = fit_decay_noise_floor(trace)
        second = fit_decay_noise_floor(trace)
        self.assertEqual(first.values, second.values)
        self.assertEqual(first.covariance, second.covariance)

    def test_multistart_needs_seed(self):
        with self.assertRaises(MissingSeedError):
            least_squares(lambda x, p: p[0] * x, [1.0], np.arange(3.0), np.arange(3.0), ["a"],
                          options=FitOptions(n_starts=3))
        result = least_squares(lambda x, p: p[0] * x, [1.0], np.arange(3.0), 2 * np.arange(3.0), ["a"],
                               bounds=([0], [10]), options=FitOptions(n_starts=3, seed=11))
        self.assertEqual(result.seed, 11)
        self.assertAlmostEqual(result["a"], 2.0, places=8)

    def test_start_outside_bounds(self):
        with self.assertRaises(BoundsError) as context:
            least_squares(lambda x, p: p[0] * x, [-1.0], np.arange(3.0), np.arange(3.0), ["a"], bounds=([0], [1]))
        self.assertEqual(context.exception.code, "bounds_violation")

    def test_starting_values_not_modified(self):
        params0 = np.array([1.0, 5.0])
        result = FitEngine().fit(lambda x, p: p[0] * x + p[1], np.arange(4.0), 2 * np.arange(4.0), params0,
                                 ["slope", "offset"], ["1", "1"], fixed={"offset": 0.0})
        np.testing.assert_array_equal(params0, [1.0, 5.0])
        self.assertAlmostEqual(result["slope"], 2.0, places=8)
        self.assertEqual(result["offset"], 0.0)

    def test_everything_fixed(self):
        with self.assertRaises(ValueError):
            FitEngine().fit(lambda x, p: p[0] * x, np.arange(3.0), np.arange(3.0), [1.0], ["a"], ["1"],
                            fixed={"a": 1.0})

    def test_singular_jacobian(self):
        x = np.linspace(0, 1, 10)
        with self.assertRaises(SingularJacobianError):
            least_squares(lambda x_, p: (p[0] + p[1]) * x_, [1.0, 1.0], x, 3 * x, ["a", "b"])
        result = least_squares(lambda x_, p: (p[0] + p[1]) * x_, [1.0, 1.0], x, 3 * x, ["a", "b"],
                               options=FitOptions(allow_singular=True))
        self.assertIn("singular_jacobian", result.flags)
        self.assertAlmostEqual(result["a"] + result["b"], 3.0, places=8)

    def test_result_access(self):
        result = fit_stimulated(_stim_grid(seed=1, snr=math.inf))
        self.assertEqual(result["product"], result.derived["product"][0])
        self.assertIn("product", result.as_dict())
        with self.assertRaises(KeyError):
            result["missing"]


class TestDecay(unittest.TestCase):

    def test_noiseless(self):
        trace = synth_decay(np.linspace(0, 8e-3, 100), 1.0, 1e-3, 0.05, math.inf, seed=0)
        self.assertIsNone(trace.sigma)
        result = fit_decay_noise_floor(trace)
        for name, expected in (("A0", 1.0), ("T2", 1e-3), ("C", 0.05)):
            self.assertAlmostEqual(result[name] / expected, 1.0, delta=1e-6)
        self.assertAlmostEqual(result.r2, 1.0, places=9)

    def test_noisy(self):
        trace = synth_decay(np.linspace(0, 1e-2, 200), 1.0, 1e-3, 0.05, 100.0, seed=42)
        result = fit_decay_noise_floor(trace)
        self.assertTrue(_within(result["A0"], 1.0, 0.02))
        self.assertTrue(_within(result["T2"], 1e-3, 0.02))
        self.assertTrue(_within(result["C"], 0.05, 0.05))
        self.assertTrue(all(u > 0 for u in result.uncertainties))

    def test_noisy_over_seeds(self):
        results = [fit_decay_noise_floor(synth_decay(np.linspace(0, 1e-2, 200), 1.0, 1e-3, 0.05, 100.0, seed))
                   for seed in SEEDS]
        for name, expected, relative in (("A0", 1.0, 0.02), ("T2", 1e-3, 0.02), ("C", 0.05, 0.05)):
            with self.subTest(parameter=name):
                self.assertGreaterEqual(_hits(results, name, expected, relative), MIN_HITS)

    def test_pure_exponential(self):
        trace = synth_decay(np.linspace(0, 4e-3, 60), 0.8, 2e-3, 0.0, math.inf, seed=0)
        result = fit_decay_noise_floor(trace, floor=0.0)
        self.assertAlmostEqual(result["T2"] / 2e-3, 1.0, delta=1e-6)
        self.assertEqual(result["C"], 0.0)
        self.assertEqual(result.uncertainty("C"), 0.0)
        self.assertIn("fixed:C", result.flags)

    def test_seed_required(self):
        with self.assertRaises(MissingSeedError):
            synth_decay(np.linspace(0, 1e-3, 10), 1.0, 1e-3, 0.0, 100.0, seed=None)
        with self.assertRaises(MissingSeedError):
            synth_decay(np.linspace(0, 1e-3, 10), 1.0, 1e-3, 0.0, math.inf, seed=None)
        with self.assertRaises(ValueError):
            synth_decay(np.linspace(0, 1e-3, 10), 1.0, 1e-3, 0.0, 0.0, seed=1)


class TestStimulatedEcho(unittest.TestCase):

    def test_zero_flip_flop_rate(self):
        model = stimulated_model(t1=0.047, gamma0=200.0)
        tau, tw = np.array([1e-5, 5e-5]), np.array([1e-3, 1e-2])
        expected = np.exp(-(tw / 0.047 + 2 * np.pi * tau * 200.0))
        np.testing.assert_allclose(model((tau, tw), [1.0, 0.0, 3.6e4]), expected)

    def test_noiseless_product(self):
        result = fit_stimulated(_stim_grid(seed=0, snr=math.inf))
        self.assertAlmostEqual(result["product"] / STIM_PRODUCT, 1.0, delta=1e-4)
        self.assertAlmostEqual(result["A0"], 1.0, delta=1e-6)
        self.assertGreater(result.uncertainty("product"), 0.0)

    def test_product_recovered_under_noise(self):
        results = [fit_stimulated(_stim_grid(seed)) for seed in SEEDS]
        self.assertGreaterEqual(_hits(results, "product", STIM_PRODUCT, 0.05), MIN_HITS)

    def test_covariance_ridge(self):
        gsd_values = np.geomspace(2e4, 7e4, 6)
        r_values = np.geomspace(1.8, 7.0, 6)
        hits = 0
        for seed in SEEDS:
            scan = covariance_scan(_stim_grid(seed), gsd_values, r_values)
            self.assertEqual(len(scan.rows), 12)
            self.assertEqual([row.fixed_name for row in scan.rows], ["Gamma_SD"] * 6 + ["R"] * 6)
            if scan.ridge_rows() and _within(scan.ridge_product, STIM_PRODUCT, 0.05):
                hits += 1
        self.assertGreaterEqual(hits, MIN_HITS)


class TestInversionRecovery(unittest.TestCase):
    t = np.geomspace(1e-4, 3.0, 120)

    def test_noiseless(self):
        trace = synth_t1(self.t, -0.8, 0.01, -0.6, 0.5, 0.7, math.inf, seed=0)
        result = fit_biexponential_t1(trace)
        self.assertAlmostEqual(result["T1_fast"] / 0.01, 1.0, delta=1e-4)
        self.assertAlmostEqual(result["T1_slow"] / 0.5, 1.0, delta=1e-4)
        self.assertAlmostEqual(abs(result["offset"]), 0.7, delta=1e-4)

    def test_noisy(self):
        results = [fit_biexponential_t1(synth_t1(self.t, -0.8, 0.01, -0.6, 0.5, 0.7, 50.0, seed)) for seed in SEEDS]
        self.assertGreaterEqual(_hits(results, "T1_fast", 0.01, 0.05), MIN_HITS)
        self.assertGreaterEqual(_hits(results, "T1_slow", 0.5, 0.05), MIN_HITS)
        for result in results:
            self.assertLess(result["T1_fast"], result["T1_slow"])

    def test_single_exponential_is_flagged(self):
        result = fit_biexponential_t1(synth_t1(self.t, -1.4, 0.01, 0.0, 0.5, 0.7, math.inf, seed=0))
        self.assertTrue({"single_exponential", "degenerate_rates", "singular_jacobian"} & set(result.flags))
        self.assertLess(result.rss, 1e-8)

    def test_equal_rates_are_flagged(self):
        result = fit_biexponential_t1(synth_t1(self.t, -0.7, 0.05, -0.7, 0.05, 0.7, math.inf, seed=0))
        self.assertTrue({"single_exponential", "degenerate_rates", "singular_jacobian"} & set(result.flags))


class TestAvoidedCrossing(unittest.TestCase):
    df_dB = 8.07e9 / 0.326

    def _trace(self, g, gamma, kappa0, snr, seed=0, span=30):
        half = span * gamma / self.df_dB
        fields = np.linspace(0.326 - half, 0.326 + half, 401)
        return synth_crossing(fields, 8.07e9, kappa0, g, gamma, 0.326, self.df_dB, snr, seed)

    def test_cooperativity_regimes(self):
        for g, gamma, kappa0, cooperativity in ((19.2e6, 3e6, 0.5e6, 245), (2.7e6, 8.7e6, 60e3, 14),
                                                (0.85e6, 3e6, 60e3, 4)):
            with self.subTest(cooperativity=cooperativity):
                result = fit_avoided_crossing(self._trace(g, gamma, kappa0, math.inf))
                expected = g ** 2 / (kappa0 * gamma)
                self.assertAlmostEqual(result["cooperativity"] / expected, 1.0, delta=1e-4)
                self.assertAlmostEqual(result["cooperativity"], cooperativity, delta=0.02 * cooperativity)
                self.assertAlmostEqual(result["B0"], 0.326, delta=1e-9)

    def test_noisy(self):
        for g, gamma, kappa0 in ((1e6, 3e6, 56e3), (2.7e6, 8.7e6, 60e3), (0.85e6, 3e6, 60e3)):
            with self.subTest(g=g):
                results = [fit_avoided_crossing(self._trace(g, gamma, kappa0, 100.0, seed)) for seed in SEEDS]
                self.assertGreaterEqual(_hits(results, "g_ens", g, 0.02), MIN_HITS)
                self.assertGreaterEqual(_hits(results, "gamma", gamma, 0.02), MIN_HITS)
                self.assertGreaterEqual(_hits(results, "cooperativity", g ** 2 / (kappa0 * gamma), 0.05), MIN_HITS)

    def test_slope_required(self):
        trace = self._trace(1e6, 3e6, 56e3, math.inf)
        with self.assertRaises(ValueError):
            fit_avoided_crossing(CrossingTrace(trace.field, trace.frequency, trace.kappa))
        with self.assertRaises(ValueError):
            fit_avoided_crossing(trace, df_dB=0.0)


class TestFieldSweep(unittest.TestCase):
    fields = np.linspace(0.365, 0.375, 201)

    def test_noisy(self):
        results = [fit_field_sweep_gaussian(synth_fieldsweep(self.fields, 2.0, 0.37, 0.97e-3, 0.76, 100.0, seed))
                   for seed in SEEDS]
        centered = sum(abs(result["center"] - 0.37) <= 0.01 * 0.97e-3 for result in results)
        self.assertGreaterEqual(centered, MIN_HITS)
        for name, expected in (("FWHM", 0.97e-3), ("background", 0.76), ("amplitude", 2.0)):
            with self.subTest(parameter=name):
                self.assertGreaterEqual(_hits(results, name, expected, 0.02), MIN_HITS)

    def test_fixed_width(self):
        result = fit_field_sweep_gaussian(synth_fieldsweep(self.fields, 2.0, 0.37, 0.97e-3, 0.76, math.inf, seed=0),
                                          fwhm=0.97e-3)
        self.assertEqual(result["FWHM"], 0.97e-3)
        self.assertIn("fixed:FWHM", result.flags)
        self.assertAlmostEqual(result["background"], 0.76, places=8)


class TestEseem(unittest.TestCase):
    tau = np.linspace(0, 2e-4, 300)

    def test_noisy(self):
        results = [fit_eseem(synth_eseem(self.tau, 1.0, 2e-4, 0.3, 0.01, 0.5, 100.0, seed), field=0.01)
                   for seed in SEEDS]
        self.assertGreaterEqual(_hits(results, "T2", 2e-4, 0.03), MIN_HITS)
        self.assertGreaterEqual(sum(abs(result["depth"] - 0.3) <= 0.03 for result in results), MIN_HITS)
        self.assertGreaterEqual(sum(abs(result["phase"] - 0.5) <= 0.1 for result in results), MIN_HITS)

    def test_zero_field(self):
        trace = synth_eseem(self.tau, 1.0, 2e-4, 0.3, 0.01, 0.5, math.inf, seed=0)
        with self.assertRaises(ZeroFrequencyError):
            fit_eseem(trace, field=0.0)


class TestTemperatureFit(unittest.TestCase):

    def test_recovers_xi_and_residual(self):
        ensembles = [SubEnsemble(n=1e23, linewidth=8.7e6, matrix_element=0.8, frequency=5e9, g_eff=2.0)]
        truth = CentralSpinContext(g=1.5, linewidth=8.7e6, residual_rate=120.0, xi=6.0)
        temperatures = np.geomspace(0.02, 1.0, 15)
        rates = [temperature_model(truth, ensembles, t) for t in temperatures]
        context = CentralSpinContext(g=1.5, linewidth=8.7e6)
        result = fit_temperature_model(RateTrace(temperatures, rates), context, ensembles)
        self.assertAlmostEqual(result["xi"] / 6.0, 1.0, delta=1e-6)
        self.assertAlmostEqual(result["residual_rate"] / 120.0, 1.0, delta=1e-6)


if __name__ == '__main__':
    unittest.main()
