import unittest

import numpy as np

from spinbath.fieldsearch import (TransitionSelector, angular_sweep, gradient_profile, min_gradient_ray,
                                  resonance_fields, track_levels, zefoz_scan)
from spinbath.model import DEFAULT_CONSTANTS, plane_direction
from spinbath.spinham import SpinHamiltonian
from test.utils_for_tests import free_spin, presets

FREE_SLOPE = 2 * DEFAULT_CONSTANTS.mu_B / DEFAULT_CONSTANTS.h
CLOCK = TransitionSelector(frequency=2.37e9)


class TestResonanceFields(unittest.TestCase):

    def test_free_spin_analytic(self):
        for direction in ((1, 0, 0), (0, 1, 1), (-1, 2, 0.5)):
            with self.subTest(direction=direction):
                solutions = resonance_fields(free_spin(), 5.6e9, direction)
                self.assertEqual(len(solutions), 1)
                self.assertAlmostEqual(solutions[0].field_magnitude, 5.6e9 / FREE_SLOPE, delta=1e3 / FREE_SLOPE)
                self.assertLessEqual(solutions[0].residual, 1e3)
                np.testing.assert_allclose(np.linalg.norm(solutions[0].direction), 1.0)

    def test_no_resonance_in_bracket(self):
        self.assertEqual(resonance_fields(free_spin(), 5.6e9, (1, 0, 0), bracket=(0.0, 0.1)), [])

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            resonance_fields(free_spin(), -1.0, (1, 0, 0))
        with self.assertRaises(ValueError):
            resonance_fields(free_spin(), 1e9, (1, 0, 0), bracket=(0.5, 0.1))
        with self.assertRaises(ValueError):
            resonance_fields(free_spin(), 1e9, (0, 0, 0))

    def test_roots_match_target(self):
        system = presets().system("Yb171_site1")
        ham = SpinHamiltonian(system)
        solutions = resonance_fields(system, 5.04e9, plane_direction(30.0), bracket=(0.0, 1.0))
        self.assertGreater(len(solutions), 0)
        for solution in solutions:
            with self.subTest(field=solution.field_magnitude):
                energies = np.linalg.eigvalsh(ham.matrix(solution.field))
                t = solution.transition
                self.assertLess(abs(energies[t.upper] - energies[t.lower] - 5.04e9), 1e3)
                self.assertGreaterEqual(t.matrix_element, 0.05)

    def test_grid_refinement(self):
        system = presets().system("Yb171_site2")
        direction = plane_direction(-40.0)
        coarse = resonance_fields(system, 2.43e9, direction, grid_points=400)
        fine = resonance_fields(system, 2.43e9, direction, grid_points=800)
        self.assertEqual(len(coarse), len(fine))
        for a, b in zip(coarse, fine):
            self.assertLess(abs(a.field_magnitude - b.field_magnitude), 1e3 / FREE_SLOPE)

    def test_yb_working_field_near_minus_88_degrees(self):
        system = presets().system("Yb171_site2")
        sweep = angular_sweep(system, 2.43e9, [-88.0])
        fields = [s.field_magnitude for p in sweep.points for s in p.solutions]
        self.assertTrue(any(0.154 <= b <= 0.174 for b in fields), fields)


class TestAngularSweep(unittest.TestCase):

    def test_subsites_and_order(self):
        sweep = angular_sweep(free_spin(), 5.6e9, [-30.0, 0.0, 45.0])
        self.assertEqual(sweep.angles, [-30.0, 0.0, 45.0])
        self.assertEqual(len(sweep.for_subsite("a")), 3)
        self.assertEqual(len(sweep.for_subsite("b")), 3)
        for point in sweep.points:
            self.assertAlmostEqual(point.solutions[0].field_magnitude, 5.6e9 / FREE_SLOPE, delta=1e-6)

    def test_misalignment_tilts_direction(self):
        sweep = angular_sweep(free_spin(), 5.6e9, [0.0], misalignment_deg=10.0, subsites=("a",))
        direction = sweep.points[0].solutions[0].direction
        self.assertAlmostEqual(direction[2], np.sin(np.radians(10.0)))

    def _yb_subsite_fields(self, misalignment_deg):
        sweep = angular_sweep(presets().system("Yb171_site2"), 2.43e9, np.arange(-90.0, 90.0, 15.0),
                              misalignment_deg=misalignment_deg)
        return [(sorted(s.field_magnitude for s in a.solutions), sorted(s.field_magnitude for s in b.solutions))
                for a, b in zip(sweep.for_subsite("a"), sweep.for_subsite("b"))]

    def test_yb_subsites_coincide_in_plane(self):
        for fields_a, fields_b in self._yb_subsite_fields(0.0):
            self.assertGreater(len(fields_a), 0)
            self.assertEqual(len(fields_a), len(fields_b))
            np.testing.assert_allclose(fields_a, fields_b, rtol=0, atol=1e-9)

    def test_yb_subsites_split_when_misaligned(self):
        splitting = max(abs(max(fields_a) - max(fields_b))
                        for fields_a, fields_b in self._yb_subsite_fields(0.8) if fields_a and fields_b)
        self.assertGreater(splitting, 1e-3)

    def test_invalid_angles(self):
        with self.assertRaises(ValueError):
            angular_sweep(free_spin(), 5.6e9, [10.0, 0.0])
        with self.assertRaises(ValueError):
            angular_sweep(free_spin(), 5.6e9, [0.0, 200.0])
        with self.assertRaises(ValueError):
            angular_sweep(free_spin(), 5.6e9, [0.0], plane="D1D3")

    def test_yb_peak_field(self):
        system = presets().system("Yb171_site2")
        sweep = angular_sweep(system, 2.43e9, np.arange(-90.0, 90.0, 3.0), subsites=("a",))
        peak = max(s.field_magnitude for p in sweep.points for s in p.solutions)
        self.assertAlmostEqual(peak, 1.2, delta=0.18)


class TestTracking(unittest.TestCase):

    def test_permutation_recovered(self):
        basis = np.linalg.qr(np.random.default_rng(3).normal(size=(4, 4)))[0]
        permutation = [2, 0, 3, 1]
        states = np.array([basis, basis[:, permutation]])
        index, overlap = track_levels(states)
        np.testing.assert_array_equal(basis[:, permutation][:, index[1]], basis)
        np.testing.assert_allclose(overlap, 1.0)

    def test_selector_validation(self):
        with self.assertRaises(ValueError):
            TransitionSelector()
        with self.assertRaises(ValueError):
            TransitionSelector(lower=0, upper=1, frequency=1e9)
        with self.assertRaises(ValueError):
            TransitionSelector(lower=2, upper=1)
        ham = SpinHamiltonian(free_spin())
        with self.assertRaises(ValueError):
            TransitionSelector(lower=0, upper=5).at_reference(ham)

    def test_selector_by_frequency(self):
        ham = SpinHamiltonian(presets().system("Yb171_site2"))
        lower, upper = CLOCK.at_reference(ham)
        energies = np.linalg.eigvalsh(ham.hyperfine)
        self.assertAlmostEqual((energies[upper] - energies[lower]) / 2.37e9, 1.0, delta=0.02)


class TestZefoz(unittest.TestCase):

    def setUp(self) -> None:
        self.system = presets().system("Yb171_site2")

    def test_gradient_profile(self):
        profile = gradient_profile(free_spin(), TransitionSelector(lower=0, upper=1, reference=(0.01, 0, 0)),
                                   (1, 0, 0), [0.02, 0.1, 0.5])
        for point in profile:
            self.assertAlmostEqual(point.g_eff, 2.0, places=5)
            self.assertAlmostEqual(point.frequency / (FREE_SLOPE * point.field_magnitude), 1.0, places=9)

    def test_clock_profile_grows_from_zero(self):
        profile = gradient_profile(self.system, CLOCK, plane_direction(49.0), np.linspace(0.0, 5e-3, 6))
        self.assertLess(profile[0].gradient_norm, 0.01 * FREE_SLOPE)
        self.assertGreater(profile[-1].gradient_norm, profile[0].gradient_norm)

    def test_map_symmetry_and_origin(self):
        zefoz = zefoz_scan(self.system, CLOCK, "D1D2", b_max=5e-3, grid_n=7)
        norms = zefoz.gradient_norm
        self.assertEqual(norms.shape, (7, 7))
        self.assertEqual(len(zefoz.axis), 7)
        self.assertFalse(zefoz.degenerate.any())
        self.assertLess(zefoz.value_at(3, 3), 0.01 * FREE_SLOPE)
        self.assertEqual(np.nanargmin(norms), 3 * 7 + 3)
        np.testing.assert_allclose(norms, norms[::-1, ::-1], rtol=1e-4, atol=1e-3 * FREE_SLOPE)

    def test_min_gradient_ray(self):
        best, means = min_gradient_ray(self.system, CLOCK, "D1D2", angles=np.arange(20.0, 80.0, 1.0))
        self.assertEqual(len(means), 60)
        self.assertAlmostEqual(best, 49.0, delta=3.0)

    def test_invalid_scan(self):
        with self.assertRaises(ValueError):
            zefoz_scan(self.system, CLOCK, b_max=0.0)
        with self.assertRaises(ValueError):
            zefoz_scan(self.system, CLOCK, grid_n=2)
        with self.assertRaises(ValueError):
            zefoz_scan(self.system, CLOCK, plane="xy")


if __name__ == '__main__':
    unittest.main()
