import math
from dataclasses import replace
import unittest

import numpy as np
from scipy.integrate import quad

from spinbath import PPM_DENSITY
from spinbath.decomodels import (angular_t2_model, bath_subensembles, boltzmann_populations, eseem_frequency,
                                 eseem_model, estimate_bath_temperature, excited_fraction, excited_spin_density,
                                 flip_flop_rate, id_t2, id_t2_profile, purcell_t1, sd_linewidth, t2_from_sd,
                                 temperature_model, y89_bath)
from spinbath.errors import UndefinedRateError
from spinbath.fieldsearch import TransitionSelector, angular_sweep
from spinbath.model import DEFAULT_CONSTANTS, CentralSpinContext, ResonatorFilter, SpinSystem, SubEnsemble
from spinbath.spinham import SpinHamiltonian, zeeman_temperature
from test.utils_for_tests import free_spin, presets

C = DEFAULT_CONSTANTS


def _ensemble(n: float = 1e23, frequency: float = 5e9, g_eff: float = 2.0, label: str = "bath") -> SubEnsemble:
    return SubEnsemble(n=n, linewidth=8.7e6, matrix_element=0.8, frequency=frequency, g_eff=g_eff, label=label)


class TestInstantaneousDiffusion(unittest.TestCase):

    def test_free_electron_value(self):
        self.assertAlmostEqual(id_t2(2.0, 1e24) / 1.21e-6, 1.0, delta=0.01)

    def test_scaling(self):
        reference = id_t2(1.3, 2e23)
        self.assertAlmostEqual(id_t2(1.3, 4e23) / reference, 0.5, places=12)
        self.assertAlmostEqual(id_t2(2.6, 2e23) / reference, 0.25, places=12)

    def test_no_resonant_spins(self):
        self.assertEqual(id_t2(2.0, 0.0), math.inf)

    def test_si_variant(self):
        expected = 8 * C.h / (5 * C.mu_0 * (2.0 * C.mu_B) ** 2 * 1e24)
        self.assertAlmostEqual(id_t2(2.0, 1e24, variant="si") / expected, 1.0, places=12)
        self.assertAlmostEqual(id_t2(2.0, 1e24, variant="si", theta=math.pi / 2) / expected, 2.0, places=12)
        self.assertEqual(id_t2(2.0, 1e24, variant="si", theta=0.0), math.inf)

    def test_invalid(self):
        with self.assertRaises(ValueError):
            id_t2(0.0, 1e24)
        with self.assertRaises(ValueError):
            id_t2(2.0, -1.0)
        with self.assertRaises(ValueError):
            id_t2(2.0, 1e24, variant="other")

    def test_yb_id_limit(self):
        resonator = presets().resonator("Yb_5GHz").filter()
        n = excited_spin_density(3.5 * PPM_DENSITY, resonator)
        self.assertAlmostEqual(id_t2(0.973, n), 11e-3, delta=5.5e-3)


class TestExcitedFraction(unittest.TestCase):

    def setUp(self) -> None:
        self.resonator = ResonatorFilter(f0=8.07e9, pulse_length=7.5e-6, line_fwhm=8.7e6, df_dB=2.5e10)

    def test_quadrature_oracle(self):
        sigma = 8.7e6 / (2 * math.sqrt(2 * math.log(2)))
        hwhm = self.resonator.bandwidth / 2

        for detuning in (0.0, 1e-4):
            offset = detuning * self.resonator.df_dB

            def integrand(f):
                gaussian = math.exp(-f ** 2 / (2 * sigma ** 2)) / (sigma * math.sqrt(2 * math.pi))
                return gaussian * hwhm ** 2 / ((f - offset) ** 2 + hwhm ** 2)

            oracle, _ = quad(integrand, -10 * sigma, 10 * sigma, points=[offset], limit=500)
            with self.subTest(detuning=detuning):
                self.assertAlmostEqual(excited_fraction(self.resonator, detuning) / oracle, 1.0, delta=1e-4)

    def test_limits(self):
        self.assertLess(excited_fraction(self.resonator, 1.0), 1e-6)
        wide = ResonatorFilter(f0=8.07e9, pulse_length=1e-12, line_fwhm=8.7e6, df_dB=2.5e10)
        self.assertAlmostEqual(excited_fraction(wide), 1.0, delta=1e-3)
        self.assertGreater(excited_fraction(self.resonator), excited_fraction(self.resonator, 1e-4))

    def test_density(self):
        self.assertAlmostEqual(excited_spin_density(1e24, self.resonator),
                               1e24 * excited_fraction(self.resonator))
        with self.assertRaises(ValueError):
            excited_spin_density(-1.0, self.resonator)

    def test_invalid_filter(self):
        with self.assertRaises(ValueError):
            ResonatorFilter(f0=5e9, pulse_length=0.0, line_fwhm=8.7e6, df_dB=1e10)
        with self.assertRaises(ValueError):
            ResonatorFilter(f0=5e9, pulse_length=1e-5, line_fwhm=0.0, df_dB=1e10)

    def test_profile(self):
        system = presets().system("YbI0_site2")
        resonator = presets().resonator("Yb_5GHz").filter()
        fields = np.linspace(0.9, 0.91, 11)
        profile = id_t2_profile(system, resonator, fields, center_field=0.905)
        self.assertEqual(int(np.argmin(profile)), 5)
        self.assertLess(profile[5], profile[0])
        doubled = replace(system, concentration=2 * system.concentration)
        np.testing.assert_allclose(id_t2_profile(doubled, resonator, fields, 0.905), profile / 2, rtol=1e-12)


class TestSpectralDiffusion(unittest.TestCase):

    def test_t2_from_sd_values(self):
        self.assertAlmostEqual(t2_from_sd(3.5e6)[1], 0.60e-3, delta=0.02 * 0.60e-3)
        self.assertAlmostEqual(t2_from_sd(1.3e5)[1], 3.1e-3, delta=0.03 * 3.1e-3)
        self.assertAlmostEqual(t2_from_sd(1.05e5)[1], 3.48e-3, delta=0.01 * 3.48e-3)

    def test_t2_from_sd_algebra(self):
        for product in (1e2, 1.3e5, 3.5e6, 1e10):
            with self.subTest(product=product):
                self.assertAlmostEqual(t2_from_sd(product)[1] / (2 / math.sqrt(math.pi * product)), 1.0, places=12)
        rate, t2 = t2_from_sd(1.3e5, gamma0=500.0)
        printed = (1.3e5 / 2) / (math.sqrt(500.0 ** 2 + 1.3e5 / math.pi) - 500.0)
        self.assertAlmostEqual(rate / printed, 1.0, places=10)
        self.assertEqual(t2, 1 / rate)
        self.assertAlmostEqual(t2_from_sd(0.0, gamma0=100.0)[0], math.pi * 100.0)

    def test_t2_from_sd_undefined(self):
        with self.assertRaises(UndefinedRateError):
            t2_from_sd(0.0)
        with self.assertRaises(ValueError):
            t2_from_sd(-1.0)

    def test_flip_flop_rate(self):
        hot = _ensemble(frequency=0.0)
        t_z = zeeman_temperature(5e9)
        ratio = flip_flop_rate(_ensemble(), 1.0, t_z) / flip_flop_rate(hot, 1.0, t_z)
        self.assertAlmostEqual(ratio, 0.4200, places=4)
        self.assertAlmostEqual(flip_flop_rate(_ensemble(n=2e23), 1.0, 0.1) / flip_flop_rate(_ensemble(), 1.0, 0.1),
                               4.0, places=10)
        with self.assertRaises(UndefinedRateError):
            flip_flop_rate(SubEnsemble(n=1e23, linewidth=0.0, matrix_element=1, frequency=1e9, g_eff=2), 1.0, 0.1)
        with self.assertRaises(ValueError):
            flip_flop_rate(_ensemble(), 1.0, 0.0)

    def test_sd_linewidth(self):
        prefactor = math.pi * C.mu_0 * C.mu_B ** 2 / (9 * math.sqrt(3) * C.h)
        value = sd_linewidth(_ensemble(n=1e24, frequency=0.0), 2.0, 1.0)
        self.assertAlmostEqual(value / (prefactor * 1e24 * 4), 1.0, places=12)
        self.assertLess(sd_linewidth(_ensemble(), 2.0, 1e-4), 1e-100)
        self.assertAlmostEqual(sd_linewidth(_ensemble(n=3e23), 2.0, 0.1) / sd_linewidth(_ensemble(), 2.0, 0.1), 3.0)

    def test_boltzmann_populations(self):
        self.assertEqual(boltzmann_populations(0.0, 0.1), (0.5, 0.5))
        for t_z, temperature in ((0.24, 0.014), (0.24, 1.0), (5.0, 0.01)):
            with self.subTest(t_z=t_z, temperature=temperature):
                down, up = boltzmann_populations(t_z, temperature)
                self.assertAlmostEqual(down + up, 1.0, places=12)
                sech = 1 / math.cosh(t_z / (2 * temperature))
                self.assertAlmostEqual(down * up, 0.25 * sech ** 2, places=12)
                self.assertLessEqual(down, up)


class TestTemperatureModel(unittest.TestCase):

    def setUp(self) -> None:
        self.context = CentralSpinContext(g=1.5, linewidth=8.7e6, residual_rate=120.0, xi=6.0)

    def test_zero_temperature_limit(self):
        self.assertAlmostEqual(temperature_model(self.context, [_ensemble()], 1e-4), 120.0, places=9)
        self.assertEqual(temperature_model(self.context, [], 0.5), 120.0)

    def test_monotone(self):
        rates = [temperature_model(self.context, [_ensemble(), _ensemble(frequency=2e9, n=5e22)], t)
                 for t in np.geomspace(0.014, 1.2, 40)]
        self.assertTrue(all(b >= a for a, b in zip(rates, rates[1:])))
        self.assertGreater(rates[-1], rates[0])

    def test_single_ensemble_composition(self):
        ensemble = _ensemble()
        for temperature in (0.05, 0.2, 1.0):
            with self.subTest(temperature=temperature):
                t_z = zeeman_temperature(ensemble.frequency)
                down, up = boltzmann_populations(t_z, temperature)
                sech2 = 1 / math.cosh(t_z / temperature) ** 2
                r = flip_flop_rate(ensemble, self.context.xi, temperature) / sech2 * down * up
                gamma_sd = sd_linewidth(ensemble, self.context.g, temperature) / sech2 * down * up
                oracle = self.context.residual_rate + t2_from_sd(r * gamma_sd)[0]
                self.assertAlmostEqual(temperature_model(self.context, [ensemble], temperature) / oracle, 1.0,
                                       places=9)

    def test_printed_prefactor(self):
        ensemble = _ensemble(g_eff=3.0)
        context = CentralSpinContext(g=1.5, linewidth=8.7e6, residual_rate=0.0, xi=6.0)
        composed = temperature_model(context, [ensemble], 0.3)
        printed = temperature_model(context, [ensemble], 0.3, prefactor="printed")
        self.assertAlmostEqual(composed / printed, math.sqrt(math.pi) / 2 * math.sqrt(3.0), places=10)
        with self.assertRaises(ValueError):
            temperature_model(context, [ensemble], 0.3, prefactor="other")

    def test_splitting_reduces_rate(self):
        context = CentralSpinContext(g=1.5, linewidth=8.7e6)
        whole = temperature_model(context, [_ensemble(n=2e23)], 0.3)
        halves = temperature_model(context, [_ensemble(n=1e23), _ensemble(n=1e23)], 0.3)
        self.assertAlmostEqual(halves / whole, 1 / math.sqrt(2), places=10)

    def test_bath_temperature_inversion(self):
        context = CentralSpinContext(g=1.5, linewidth=8.7e6, xi=6.0)
        ensembles = [_ensemble(), _ensemble(frequency=1e9, n=3e22)]
        rate = temperature_model(context, ensembles, 0.061)
        product = 4 * rate ** 2 / math.pi
        self.assertAlmostEqual(estimate_bath_temperature(context, ensembles, product), 0.061, places=6)
        with self.assertRaises(ValueError):
            estimate_bath_temperature(context, ensembles, product * 1e12)


class TestBath(unittest.TestCase):

    def test_bath_subensembles(self):
        system = presets().system("YbI0_site2")
        ensembles = bath_subensembles(system, (0.1, 0.1, 0.0), linewidth=8.7e6, subsites=("a", "b"))
        self.assertEqual(len(ensembles), 2)
        for ensemble in ensembles:
            self.assertAlmostEqual(ensemble.n, system.resonant_density / 2)
            self.assertGreater(ensemble.g_eff, 0)
            self.assertEqual(ensemble.linewidth, 8.7e6)
        nuclear = bath_subensembles(presets().system("Yb171_site1"), (0.3, 0.0, 0.0), 8.7e6, threshold=0.0)
        self.assertEqual(len(nuclear), 6)
        self.assertAlmostEqual(nuclear[0].n, presets().system("Yb171_site1").resonant_density / 2)

    def test_angular_model_frozen_and_hot(self):
        central = free_spin()
        bath = [replace(free_spin("bath"), concentration=1e23)]
        sweep = angular_sweep(central, 5.6e9, [-45.0, 0.0, 45.0], subsites=("a",))
        context = CentralSpinContext(g=1.0, linewidth=3e6, residual_rate=100.0)
        frozen = angular_t2_model(central, bath, context, 1e-3, sweep)
        for point in frozen:
            self.assertAlmostEqual(point.rate, 100.0, places=6)
            self.assertAlmostEqual(point.g_central, 2.0, places=5)
            self.assertAlmostEqual(point.t2, 0.01, places=8)
        hot = angular_t2_model(central, bath, context, 10.0, sweep)
        self.assertTrue(all(point.rate > 100.0 for point in hot))
        self.assertAlmostEqual(hot[0].rate, hot[2].rate, places=6)

    def test_angular_model_peaks_at_minimal_g(self):
        # g = sqrt(cos^2 + 9 sin^2) in the D1-D2 plane, smallest along D1 where the working field is highest
        central = SpinSystem(label="anisotropic", S=0.5, I=0.0, g_tensor=np.diag([1.0, 3.0, 2.0]))
        bath = [replace(free_spin("bath"), concentration=1e23)]
        angles = np.arange(-60.0, 61.0, 10.0)
        sweep = angular_sweep(central, 2.43e9, angles, subsites=("a",))
        context = CentralSpinContext(g=1.0, linewidth=3e6, xi=6.0)
        points = angular_t2_model(central, bath, context, 0.014, sweep, selector=TransitionSelector(lower=0, upper=1))
        t2 = [point.t2 for point in points]
        g_central = [point.g_central for point in points]
        self.assertEqual(angles[int(np.argmax(t2))], 0.0)
        self.assertEqual(int(np.argmax(t2)), int(np.argmin(g_central)))
        self.assertAlmostEqual(points[int(np.argmax(t2))].g_central, 1.0, places=4)
        for point in points:
            self.assertGreaterEqual(point.g_central, 1.0 - 1e-6)
            self.assertEqual((point.transition.lower, point.transition.upper), (0, 1))

    def test_angular_model_follows_selected_transition(self):
        central = presets().system("Yb171_site2")
        sweep = angular_sweep(central, 2.43e9, np.arange(-70.0, -29.0, 5.0), subsites=("a",))
        first = max(sweep.for_subsite("a")[0].solutions, key=lambda s: s.transition.matrix_element)
        selector = TransitionSelector(lower=first.transition.lower, upper=first.transition.upper,
                                      reference=tuple(float(v) for v in first.field.array))
        context = CentralSpinContext(g=1.0, linewidth=8.7e6, xi=6.0)
        points = angular_t2_model(central, [presets().system("YbI0_site2")], context, 0.014, sweep,
                                  selector=selector)
        self.assertEqual(len(points), len(sweep.angles))
        self.assertIsNotNone(points[0].transition)
        ham = SpinHamiltonian(central)
        for point in points:
            if point.transition is None:
                self.assertTrue(math.isnan(point.rate))
                continue
            with self.subTest(angle=point.angle_deg):
                solution = next(s for s in sweep.for_subsite("a")[sweep.angles.index(point.angle_deg)].solutions
                                if s.field_magnitude == point.field_magnitude)
                lower, upper, _ = selector.track(ham, [solution.field.array])
                self.assertEqual((point.transition.lower, point.transition.upper), (int(lower[0]), int(upper[0])))
                self.assertGreater(point.rate, 0.0)

    def test_angular_model_without_resonance(self):
        sweep = angular_sweep(free_spin(), 5.6e9, [0.0], subsites=("a",), bracket=(0.0, 0.05))
        points = angular_t2_model(free_spin(), [], CentralSpinContext(g=1.0, linewidth=3e6), 0.1, sweep)
        self.assertTrue(math.isnan(points[0].rate))
        self.assertTrue(math.isnan(points[0].t2))

    def test_y89_bath(self):
        gamma_sd, rate, product = y89_bath(0.973, 0.37, 0.014)
        self.assertAlmostEqual(gamma_sd, 38e3, delta=19e3)
        self.assertAlmostEqual(rate, 3.6, delta=1.8)
        self.assertAlmostEqual(product, 1.05e5, delta=0.3 * 1.05e5)
        self.assertEqual(product, gamma_sd * rate)
        self.assertEqual(y89_bath(0.973, -0.37, 0.014), y89_bath(0.973, 0.37, 0.014))
        self.assertLess(y89_bath(0.973, 3.7, 0.014)[2], product)
        self.assertLess(y89_bath(0.973, 1e4, 0.001)[2], 1e-100)

    def test_purcell(self):
        self.assertAlmostEqual(purcell_t1(2 * math.pi * 100, 2 * math.pi * 1e6), 3.979, places=3)
        self.assertAlmostEqual(purcell_t1(200.0, 1e6) / purcell_t1(100.0, 1e6), 0.25)
        self.assertEqual(purcell_t1(0.0, 1e6), math.inf)
        with self.assertRaises(ValueError):
            purcell_t1(1.0, 0.0)

    def test_eseem(self):
        self.assertAlmostEqual(eseem_frequency(1e-3), 2.095e3, delta=1.0)
        t = np.linspace(0, 1e-4, 50)
        np.testing.assert_allclose(eseem_model(t, 1.0, 2e-4, 0.0, 0.37, 0.3), np.exp(-2 * t / 2e-4))
        np.testing.assert_allclose(eseem_model(t, 1.0, 2e-4, 0.5, 0.0, 0.0), np.exp(-2 * t / 2e-4))
        modulated = eseem_model(t, 1.0, 2e-4, 0.5, 0.37, 0.0)
        self.assertTrue(np.all(modulated <= np.exp(-2 * t / 2e-4) + 1e-15))


if __name__ == '__main__':
    unittest.main()
