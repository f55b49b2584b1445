"""
Inverse problem of the spin Hamiltonian: resonance fields at a fixed microwave frequency, angular sweeps and maps of
the transition frequency gradient at low field.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment, root_scalar

from .errors import DegenerateGradientError
from .model import (DEFAULT_CONSTANTS, PLANES, AngularSweep, GradientPoint, PhysicalConstants, ResonanceSolution,
                    SpinSystem, SweepPoint, Transition, Vector3, ZefozMap, plane_direction)
from .spinham import SpinHamiltonian, default_drive_direction, subsite, unit_vector
from .utils import get_logger

logger = get_logger("fieldsearch")

DEFAULT_GRID_POINTS = 400
DEFAULT_TOLERANCE = 1e3
DEFAULT_THRESHOLD = 0.05
TRACKING_STEPS = 40
LOW_OVERLAP = 0.5


def track_levels(states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Follows every level along a sequence of eigenbases by maximal eigenvector overlap
    :param states: eigenvectors, shape (N, d, d), one basis per step, vectors as columns
    :return: index[k, label], position of each level at step k in the energy order of that step, and the overlap
    between consecutive steps of each level, shape (N, d), equal to 1 at step 0
    """
    n_steps, dim, _ = states.shape
    index = np.empty((n_steps, dim), dtype=int)
    overlap = np.ones((n_steps, dim))
    index[0] = np.arange(dim)
    for k in range(1, n_steps):
        overlaps = np.abs(states[k - 1].conj().T @ states[k]) ** 2
        rows, cols = linear_sum_assignment(overlaps, maximize=True)
        new_of_old = cols[np.argsort(rows)]
        index[k] = new_of_old[index[k - 1]]
        overlap[k] = overlaps[index[k - 1], index[k]]
    return index, overlap


def _match(reference: np.ndarray, states: np.ndarray) -> np.ndarray:
    overlaps = np.abs(reference.conj().T @ states) ** 2
    rows, cols = linear_sum_assignment(overlaps, maximize=True)
    return cols[np.argsort(rows)]


def resonance_fields(system: SpinSystem, f_target: float, direction: Sequence[float],
                     bracket: Tuple[float, float] = (0.0, 1.5), tol: float = DEFAULT_TOLERANCE,
                     grid_points: int = DEFAULT_GRID_POINTS, b1_direction: Optional[Sequence[float]] = None,
                     threshold: float = DEFAULT_THRESHOLD, constants: PhysicalConstants = DEFAULT_CONSTANTS,
                     hamiltonian: Optional[SpinHamiltonian] = None) -> List[ResonanceSolution]:
    """
    Finds every field magnitude along a direction at which a transition matches the target frequency. Levels are
    tracked across the scan grid by eigenvector overlap, so a transition keeps its identity through avoided crossings.
    :param system: the spin system
    :param f_target: microwave frequency, Hz
    :param direction: field direction, normalized internally
    :param bracket: (Bmin, Bmax) in T
    :param tol: maximal |f(B) - f_target| of a returned root, Hz
    :param grid_points: size of the coarse scan
    :param b1_direction: microwave field direction, perpendicular to the static field if omitted
    :param threshold: minimal drive matrix element of a returned transition
    :param constants: physical constants
    :param hamiltonian: precomputed Hamiltonian of the system, built if omitted
    :return: solutions sorted by field, possibly empty
    """
    b_min, b_max = bracket
    if not f_target > 0:
        raise ValueError(f"Target frequency must be > 0, got {f_target}.")
    if not (0 <= b_min < b_max):
        raise ValueError(f"Invalid bracket {bracket}, expected 0 <= Bmin < Bmax.")
    if not tol > 0 or grid_points < 2:
        raise ValueError(f"Tolerance must be > 0 and the grid needs at least 2 points, got {tol}, {grid_points}.")
    ham = hamiltonian or SpinHamiltonian(system, constants)
    direction = unit_vector(direction, "field direction")
    drive = ham.drive_operator(default_drive_direction(direction) if b1_direction is None else b1_direction)

    # levels are degenerate at zero field for a pure Zeeman system, the scan starts just above it
    grid = np.linspace(b_min if b_min > 0 else 1e-6 * b_max, b_max, grid_points)
    energies, states = ham.eigh_batch(grid[:, None] * direction[None, :])
    index, overlap = track_levels(states)
    running_overlap = np.minimum.accumulate(overlap, axis=0)
    tracked = np.take_along_axis(energies, index, axis=1)

    solutions = []
    low_overlap = math.inf
    for a in range(ham.dimension):
        for b in range(a + 1, ham.dimension):
            detuning = np.abs(tracked[:, b] - tracked[:, a]) - f_target
            exact = np.nonzero(detuning == 0)[0]
            crossing = np.nonzero(detuning[:-1] * detuning[1:] < 0)[0]
            for k in sorted(set(exact.tolist()) | set(crossing.tolist())):
                reference = states[k]
                ia, ib = index[k, a], index[k, b]

                def pair_detuning(magnitude: float) -> float:
                    e, v = np.linalg.eigh(ham.matrix(magnitude * direction))
                    matched = _match(reference, v)
                    return abs(e[matched[ib]] - e[matched[ia]]) - f_target

                if detuning[k] == 0:
                    root = float(grid[k])
                else:
                    result = root_scalar(pair_detuning, bracket=[grid[k], grid[k + 1]], method="brentq",
                                         xtol=1e-13)
                    root = float(result.root)
                e, v = np.linalg.eigh(ham.matrix(root * direction))
                matched = _match(reference, v)
                residual = abs(abs(e[matched[ib]] - e[matched[ia]]) - f_target)
                if residual > tol:
                    logger.warning(f"Dropping root at {root:.6g} T of levels ({a}, {b}): residual {residual:.3g} Hz "
                                   f"exceeds {tol:.3g} Hz.")
                    continue
                lower, upper = sorted((int(matched[ia]), int(matched[ib])))
                m = float(abs(v[:, upper].conj() @ drive @ v[:, lower]))
                if m < threshold:
                    continue
                pair_overlap = float(min(running_overlap[k, a], running_overlap[k, b]))
                low_overlap = min(low_overlap, pair_overlap)
                solutions.append(ResonanceSolution(
                    direction=tuple(float(x) for x in direction), field_magnitude=root,
                    transition=Transition(lower=lower, upper=upper, frequency=float(e[upper] - e[lower]),
                                          matrix_element=m),
                    residual=residual, min_overlap=pair_overlap))
    if low_overlap < LOW_OVERLAP:
        logger.warning(f"Level tracking overlap dropped to {low_overlap:.3f} along {direction.tolist()}, "
                       f"transition identities may be ambiguous.")
    solutions.sort(key=lambda s: (s.field_magnitude, s.transition.lower, s.transition.upper))
    logger.debug(f"{len(solutions)} resonance(s) at {f_target:.6g} Hz along {direction.tolist()}")
    return solutions


def angular_sweep(system: SpinSystem, f_target: float, angles: Sequence[float], plane: str = "D1D2",
                  misalignment_deg: float = 0.0, subsites: Sequence[str] = ("a", "b"),
                  bracket: Tuple[float, float] = (0.0, 1.5), tol: float = DEFAULT_TOLERANCE,
                  grid_points: int = DEFAULT_GRID_POINTS, threshold: float = DEFAULT_THRESHOLD,
                  constants: PhysicalConstants = DEFAULT_CONSTANTS) -> AngularSweep:
    """
    Resonance fields for field directions rotated within a plane, evaluated for both magnetic subsites
    :param angles: angles in degrees from the first axis of the plane, strictly increasing, within [-180, 180]
    :param plane: one of D1D2, D1b, D2b
    :param misalignment_deg: tilt of the rotation plane towards its normal
    """
    angles = [float(angle) for angle in angles]
    if any(not -180 <= angle <= 180 for angle in angles):
        raise ValueError("Angles must lie within [-180, 180] degrees.")
    if any(b <= a for a, b in zip(angles, angles[1:])):
        raise ValueError("Angles must be strictly increasing.")
    if plane not in PLANES:
        raise ValueError(f"Unknown plane '{plane}'. Known planes: {list(PLANES)}.")
    hamiltonians = {name: SpinHamiltonian(subsite(system, name), constants) for name in subsites}
    points = []
    for angle in angles:
        direction = plane_direction(angle, plane, misalignment_deg)
        for name in subsites:
            solutions = resonance_fields(system, f_target, direction, bracket=bracket, tol=tol,
                                         grid_points=grid_points, threshold=threshold, constants=constants,
                                         hamiltonian=hamiltonians[name])
            points.append(SweepPoint(angle_deg=angle, subsite=name, solutions=tuple(solutions)))
    logger.info(f"Angular sweep of {system.label} at {f_target:.6g} Hz: {len(angles)} angles in {plane}, "
                f"{sum(len(p.solutions) for p in points)} resonances")
    return AngularSweep(plane=plane, frequency=f_target, misalignment_deg=misalignment_deg, points=tuple(points))


@dataclass(frozen=True)
class TransitionSelector:
    """
    Picks one transition at a reference field, either by level indices or as the transition nearest to a frequency,
    and follows it to other fields along the straight path from the reference
    """
    lower: Optional[int] = None
    upper: Optional[int] = None
    frequency: Optional[float] = None
    reference: Vector3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        by_index = self.lower is not None and self.upper is not None
        if by_index == (self.frequency is not None):
            raise ValueError("Select a transition either by (lower, upper) or by frequency.")
        if by_index and not 0 <= self.lower < self.upper:
            raise ValueError(f"Expected 0 <= lower < upper, got ({self.lower}, {self.upper}).")

    def at_reference(self, hamiltonian: SpinHamiltonian) -> Tuple[int, int]:
        if self.frequency is None:
            if self.upper >= hamiltonian.dimension:
                raise ValueError(f"Level {self.upper} does not exist, the system has {hamiltonian.dimension} levels.")
            return self.lower, self.upper
        energies = np.linalg.eigvalsh(hamiltonian.matrix(self.reference))
        pairs = [(i, j) for i in range(len(energies)) for j in range(i + 1, len(energies))]
        return min(pairs, key=lambda p: abs(energies[p[1]] - energies[p[0]] - self.frequency))

    def track(self, hamiltonian: SpinHamiltonian, fields: np.ndarray,
              steps: int = TRACKING_STEPS) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        :param fields: target fields, shape (N, 3)
        :return: lower and upper level indices at each target (energy order) and the lowest overlap met on the path
        """
        fields = np.asarray(fields, dtype=float).reshape(-1, 3)
        reference = np.asarray(self.reference, dtype=float)
        lower, upper = self.at_reference(hamiltonian)
        _, v0 = np.linalg.eigh(hamiltonian.matrix(reference))
        n = len(fields)
        tracked = np.array([np.repeat(v0[None, :, lower], n, axis=0), np.repeat(v0[None, :, upper], n, axis=0)])
        idx = np.array([np.full(n, lower), np.full(n, upper)])
        worst = np.ones(n)
        for s in range(1, steps + 1):
            path = reference[None, :] + s / steps * (fields - reference[None, :])
            _, v = hamiltonian.eigh_batch(path)
            for level in range(2):
                overlaps = np.abs(np.einsum("na,nab->nb", tracked[level].conj(), v)) ** 2
                if level == 1:
                    overlaps[np.arange(n), idx[0]] = -1.0
                idx[level] = np.argmax(overlaps, axis=1)
                worst = np.minimum(worst, overlaps[np.arange(n), idx[level]])
                tracked[level] = v[np.arange(n), :, idx[level]]
        return np.minimum(idx[0], idx[1]), np.maximum(idx[0], idx[1]), worst


def _gradient_or_nan(hamiltonian: SpinHamiltonian, field: np.ndarray, lower: int,
                     upper: int) -> Tuple[float, bool]:
    try:
        return float(np.linalg.norm(hamiltonian.gradient(field, lower, upper))), False
    except DegenerateGradientError:
        return math.nan, True


def gradient_profile(system: SpinSystem, selector: TransitionSelector, direction: Sequence[float],
                     magnitudes: Sequence[float],
                     constants: PhysicalConstants = DEFAULT_CONSTANTS) -> List[GradientPoint]:
    """
    Frequency, gradient norm and effective g-factor of the selected transition along a ray
    """
    ham = SpinHamiltonian(system, constants)
    direction = unit_vector(direction, "field direction")
    magnitudes = np.asarray(magnitudes, dtype=float)
    fields = magnitudes[:, None] * direction[None, :]
    lowers, uppers, worst = selector.track(ham, fields)
    if np.any(worst < LOW_OVERLAP):
        logger.warning(f"Transition tracking overlap dropped to {worst.min():.3f} along {direction.tolist()}.")
    profile = []
    for magnitude, field, lower, upper in zip(magnitudes, fields, lowers, uppers):
        energies = np.linalg.eigvalsh(ham.matrix(field))
        norm, _ = _gradient_or_nan(ham, field, int(lower), int(upper))
        profile.append(GradientPoint(field_magnitude=float(magnitude),
                                     frequency=float(energies[upper] - energies[lower]), gradient_norm=norm,
                                     g_eff=constants.h * norm / constants.mu_B))
    return profile


def min_gradient_ray(system: SpinSystem, selector: TransitionSelector, plane: str = "D1D2", b_max: float = 5e-3,
                     angles: Optional[Sequence[float]] = None, ray_points: int = 10,
                     constants: PhysicalConstants = DEFAULT_CONSTANTS) -> Tuple[float, np.ndarray]:
    """
    Finds the ray through the origin of a plane along which the selected transition is least sensitive to the field
    :param b_max: length of the rays, T
    :param angles: candidate angles in degrees, 0 to 179 by 1 if omitted
    :param ray_points: field points per ray, the origin excluded
    :return: the angle with the smallest mean gradient norm and the mean gradient norm of every angle (Hz/T)
    """
    angles = np.arange(0.0, 180.0, 1.0) if angles is None else np.asarray(angles, dtype=float)
    ham = SpinHamiltonian(system, constants)
    magnitudes = np.linspace(b_max / ray_points, b_max, ray_points)
    means = np.empty(len(angles))
    for i, angle in enumerate(angles):
        fields = magnitudes[:, None] * plane_direction(angle, plane)[None, :]
        lowers, uppers, _ = selector.track(ham, fields)
        norms = [_gradient_or_nan(ham, field, int(lo), int(up))[0] for field, lo, up in zip(fields, lowers, uppers)]
        means[i] = np.nanmean(norms) if not np.all(np.isnan(norms)) else math.nan
    best = float(angles[np.nanargmin(means)])
    logger.info(f"Minimal gradient ray of {system.label} in {plane}: {best:.1f} deg")
    return best, means


def zefoz_scan(system: SpinSystem, selector: TransitionSelector, plane: str = "D1D2", b_max: float = 5e-3,
               grid_n: int = 41, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> ZefozMap:
    """
    Maps the frequency gradient norm of a transition on a square grid of fields in a plane, [-b_max, b_max] along
    both in-plane axes. Points where the transition levels are degenerate are flagged and hold nan.
    """
    if not b_max > 0:
        raise ValueError(f"Bmax must be > 0, got {b_max}.")
    if grid_n < 3:
        raise ValueError(f"The grid needs at least 3 points per axis, got {grid_n}.")
    if plane not in PLANES:
        raise ValueError(f"Unknown plane '{plane}'. Known planes: {list(PLANES)}.")
    first, second, _ = PLANES[plane]
    ham = SpinHamiltonian(system, constants)
    axis = np.linspace(-b_max, b_max, grid_n)
    fields = np.zeros((grid_n, grid_n, 3))
    fields[:, :, first] = axis[:, None]
    fields[:, :, second] = axis[None, :]
    flat = fields.reshape(-1, 3)
    lowers, uppers, worst = selector.track(ham, flat)
    if np.any(worst < LOW_OVERLAP):
        logger.warning(f"Transition tracking overlap dropped to {worst.min():.3f} on the {plane} grid.")
    norms = np.empty(len(flat))
    degenerate = np.zeros(len(flat), dtype=bool)
    for k, (field, lower, upper) in enumerate(zip(flat, lowers, uppers)):
        norms[k], degenerate[k] = _gradient_or_nan(ham, field, int(lower), int(upper))
    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} grid point(s) with degenerate levels flagged.")
    best_angle, _ = min_gradient_ray(system, selector, plane, b_max, constants=constants)
    return ZefozMap(plane=plane, axis=tuple(float(x) for x in axis),
                    gradient_norm=norms.reshape(grid_n, grid_n), degenerate=degenerate.reshape(grid_n, grid_n),
                    min_ray_angle_deg=best_angle)
