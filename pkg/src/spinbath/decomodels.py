"""
Closed-form decoherence models: instantaneous diffusion, spectral diffusion from electron spin sub-ensembles and from
the 89Y nuclear bath, Purcell relaxation and the echo envelope modulation by 89Y.

Rates are in Hz, times in s, densities in spins/m^3, temperatures in K.
"""
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, voigt_profile

from .errors import DegenerateGradientError, UndefinedRateError
from .fieldsearch import TransitionSelector
from .model import (DEFAULT_CONSTANTS, AngularRatePoint, AngularSweep, CentralSpinContext, FieldLike, FieldVector,
                    PhysicalConstants, ResonanceSolution, ResonatorFilter, SpinSystem, SubEnsemble, SweepPoint)
from .spinham import SpinHamiltonian, effective_g, subsite, zeeman_temperature
from .utils import get_logger

logger = get_logger("decomodels")

ID_VARIANTS = ("main", "si")
PREFACTORS = ("composed", "printed")
# one crystallographic Y site of Y2SiO5
DEFAULT_Y_DENSITY = 9.35e27
Y89_SPIN = 0.5
GAUSSIAN_FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def _sech(x):
    x = np.abs(x)
    return 2.0 * np.exp(-x) / (1.0 + np.exp(-2.0 * x))


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ValueError(f"Temperature must be > 0, got {temperature}.")


def id_t2(g: float, n: float, variant: str = "main", theta: float = math.pi,
          constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """
    Coherence time limited by instantaneous diffusion
    :param g: effective g-factor of the excited spins
    :param n: density of spins flipped by the refocusing pulse
    :param variant: "main" for 9 sqrt(3) hbar / (pi mu0 (g muB)^2 n), "si" for 8 h / (5 mu0 (g muB)^2 n) divided by
    sin^2(theta/2)
    :param theta: refocusing pulse angle, rad, only used by the "si" variant
    :return: T2 in s, math.inf without resonant spins
    """
    if variant not in ID_VARIANTS:
        raise ValueError(f"Unknown variant '{variant}', expected one of {ID_VARIANTS}.")
    if n < 0 or not g > 0:
        raise ValueError(f"Expected n >= 0 and g > 0, got n = {n}, g = {g}.")
    if n == 0:
        return math.inf
    coupling = constants.mu_0 * (g * constants.mu_B) ** 2 * n
    if variant == "main":
        return 9 * math.sqrt(3) * constants.hbar / (math.pi * coupling)
    excitation = math.sin(theta / 2) ** 2
    if excitation == 0:
        return math.inf
    return 8 * constants.h / (5 * coupling) / excitation


def excited_fraction(resonator: ResonatorFilter, field_detuning: float = 0.0) -> float:
    """
    Fraction of a Gaussian spin line inside the resonator/pulse Lorentzian: the overlap integral of the normalized
    line with a unit-height Lorentzian of FWHM equal to the bandwidth, which is pi * gamma times a Voigt profile
    """
    hwhm = resonator.bandwidth / 2
    sigma = resonator.line_fwhm * GAUSSIAN_FWHM_TO_SIGMA
    detuning = resonator.df_dB * field_detuning
    return float(math.pi * hwhm * voigt_profile(detuning, sigma, hwhm))


def excited_spin_density(n: float, resonator: ResonatorFilter, field_detuning: float = 0.0) -> float:
    """
    :param n: density of the whole spin line
    :param resonator: the resonator and pulse filter
    :param field_detuning: offset of the field from the line center, T
    :return: density of spins within the excitation bandwidth
    """
    if n < 0:
        raise ValueError(f"Density must be >= 0, got {n}.")
    return n * excited_fraction(resonator, field_detuning)


def id_t2_profile(system: SpinSystem, resonator: ResonatorFilter, fields: Sequence[float], center_field: float,
                  g: Optional[float] = None, variant: str = "main",
                  constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """
    Instantaneous diffusion limit across a field sweep of a spin line
    :param system: the resonant species, its concentration times abundance is the line density
    :param resonator: the resonator and pulse filter
    :param fields: field magnitudes, T
    :param center_field: field of the line center, T
    :param g: effective g-factor of the line, h |df/dB| / muB of the resonator filter if omitted
    :return: T2 for every field, s
    """
    if g is None:
        g = constants.h * abs(resonator.df_dB) / constants.mu_B
    return np.array([id_t2(g, excited_spin_density(system.resonant_density, resonator, field - center_field),
                           variant, constants=constants) for field in fields])


def flip_flop_rate(ensemble: SubEnsemble, xi: float, temperature: float,
                   constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """
    Flip-flop rate within a sub-ensemble, xi (muB^4 mu0^2 / h^2) M^2 (n^2 / linewidth) sech^2(T_Z / T)
    """
    _check_temperature(temperature)
    if ensemble.linewidth == 0:
        raise UndefinedRateError(f"Sub-ensemble {ensemble.label!r} has zero linewidth.", label=ensemble.label)
    t_z = zeeman_temperature(ensemble.frequency, constants)
    return float(xi * constants.mu_B ** 4 * constants.mu_0 ** 2 / constants.h ** 2 * ensemble.matrix_element ** 2
                 * ensemble.n ** 2 / ensemble.linewidth * _sech(t_z / temperature) ** 2)


def sd_linewidth(ensemble: SubEnsemble, g_central: float, temperature: float,
                 constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """
    Spectral diffusion linewidth of the central spin due to a sub-ensemble,
    (pi mu0 muB^2 / (9 sqrt(3) h)) n g_i g sech^2(T_Z / T)
    """
    _check_temperature(temperature)
    t_z = zeeman_temperature(ensemble.frequency, constants)
    prefactor = math.pi * constants.mu_0 * constants.mu_B ** 2 / (9 * math.sqrt(3) * constants.h)
    return float(prefactor * ensemble.n * ensemble.g_eff * g_central * _sech(t_z / temperature) ** 2)


def t2_from_sd(product: float, gamma0: float = 0.0) -> Tuple[float, float]:
    """
    Decoherence rate under spectral diffusion, (R Gamma_SD / 2) / (sqrt(Gamma0^2 + R Gamma_SD / pi) - Gamma0),
    evaluated as (pi / 2) (Gamma0 + sqrt(Gamma0^2 + R Gamma_SD / pi))
    :param product: R Gamma_SD, Hz^2
    :param gamma0: linewidth without spectral diffusion, Hz
    :return: (rate in Hz, T2 in s)
    """
    if product < 0 or gamma0 < 0:
        raise ValueError(f"Expected R Gamma_SD >= 0 and Gamma0 >= 0, got {product}, {gamma0}.")
    if product == 0 and gamma0 == 0:
        raise UndefinedRateError("The decoherence rate is undefined for R Gamma_SD = 0 and Gamma0 = 0.")
    rate = math.pi / 2 * (gamma0 + math.sqrt(gamma0 ** 2 + product / math.pi))
    return rate, 1.0 / rate


def boltzmann_populations(t_z: float, temperature: float) -> Tuple[float, float]:
    """
    :return: (P_down, P_up) = (1 / (1 + exp(T_Z/T)), 1 / (1 + exp(-T_Z/T)))
    """
    _check_temperature(temperature)
    x = t_z / temperature
    return float(expit(-x)), float(expit(x))


def _population_product(t_z: float, temperature: float) -> float:
    # P_down * P_up without overflow
    return 0.25 * float(_sech(t_z / (2 * temperature))) ** 2


def temperature_model(context: CentralSpinContext, ensembles: Sequence[SubEnsemble], temperature: float,
                      prefactor: str = "composed", constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """
    Decoherence rate of the central spin against the bath temperature: the residual rate plus one spectral
    diffusion term per sub-ensemble, each weighted by the population product P_down P_up of that sub-ensemble.

    With prefactor "composed" a term is sqrt(pi R_i Gamma_SD,i) / 2 with R_i and Gamma_SD,i the flip-flop rate and
    spectral diffusion linewidth in which sech^2 is replaced by the population product. With "printed" a term is
    sqrt(pi mu0^3 muB^6 g / (9 sqrt(3) h^3 Gamma_i)) sqrt(xi) n_i^(3/2) M_i P_down P_up.
    """
    _check_temperature(temperature)
    if prefactor not in PREFACTORS:
        raise ValueError(f"Unknown prefactor '{prefactor}', expected one of {PREFACTORS}.")
    c = constants
    rate = context.residual_rate
    for ensemble in ensembles:
        if ensemble.linewidth == 0:
            raise UndefinedRateError(f"Sub-ensemble {ensemble.label!r} has zero linewidth.", label=ensemble.label)
        population = _population_product(zeeman_temperature(ensemble.frequency, c), temperature)
        if prefactor == "composed":
            root = math.sqrt(context.xi * c.mu_0 ** 3 * c.mu_B ** 6 * context.g * ensemble.g_eff
                             / (9 * math.sqrt(3) * c.h ** 3 * ensemble.linewidth))
            rate += math.pi / 2 * root * ensemble.n ** 1.5 * ensemble.matrix_element * population
        else:
            root = math.sqrt(math.pi * c.mu_0 ** 3 * c.mu_B ** 6 * context.g
                             / (9 * math.sqrt(3) * c.h ** 3 * ensemble.linewidth))
            rate += root * math.sqrt(context.xi) * ensemble.n ** 1.5 * ensemble.matrix_element * population
    return rate


def bath_subensembles(system: SpinSystem, field: FieldLike, linewidth: float, threshold: float = 0.05,
                      subsites: Sequence[str] = ("a",),
                      constants: PhysicalConstants = DEFAULT_CONSTANTS) -> List[SubEnsemble]:
    """
    Sub-ensembles formed by one bath species at a field: one per allowed transition and subsite. The species density
    is split evenly over the 2I+1 nuclear projections and over the subsites.
    :param system: the bath species
    :param field: static field, T
    :param linewidth: linewidth given to every sub-ensemble, Hz
    :param threshold: minimal drive matrix element of a transition
    :param subsites: magnetic subsites included
    """
    density = system.resonant_density / (2 * system.I + 1) / len(subsites)
    ensembles = []
    for name in subsites:
        for transition in SpinHamiltonian(subsite(system, name), constants).transitions(
                field, threshold=threshold, with_gradients=True):
            g_eff = 0.0 if math.isnan(transition.g_eff) else transition.g_eff
            ensembles.append(SubEnsemble(n=density, linewidth=linewidth, matrix_element=transition.matrix_element,
                                         frequency=transition.frequency, g_eff=g_eff,
                                         label=f"{system.label}/{name}/{transition.lower}-{transition.upper}"))
    logger.debug(f"{len(ensembles)} sub-ensemble(s) of {system.label} at {FieldVector.of(field)}")
    return ensembles


def _working_solution(point: SweepPoint, hamiltonian: SpinHamiltonian,
                      selector: Optional[TransitionSelector]) -> Optional[ResonanceSolution]:
    if not point.solutions:
        return None
    if selector is None:
        return max(point.solutions, key=lambda s: s.transition.matrix_element)
    fields = np.array([s.field.array for s in point.solutions])
    lower, upper, _ = selector.track(hamiltonian, fields)
    followed = [s for s, low, up in zip(point.solutions, lower, upper)
                if (s.transition.lower, s.transition.upper) == (int(low), int(up))]
    return max(followed, key=lambda s: s.transition.matrix_element, default=None)


def angular_t2_model(central: SpinSystem, bath: Sequence[SpinSystem], context: CentralSpinContext,
                     temperature: float, sweep: AngularSweep, subsite_name: str = "a", threshold: float = 0.05,
                     prefactor: str = "composed", selector: Optional[TransitionSelector] = None,
                     constants: PhysicalConstants = DEFAULT_CONSTANTS) -> List[AngularRatePoint]:
    """
    Decoherence rate of the central spin along an angular sweep. The central g-factor is the effective g of the
    working transition and the bath sub-ensembles are recomputed at the working field.

    With a selector the working transition is the selected one, followed from the selector reference to the resonance
    field of every angle, and angles where it has no resonance hold nan. Without a selector it is the resonance with
    the strongest matrix element at each angle, which may jump between branches.
    :param central: the measured species, its transition defines the working field
    :param bath: species forming the spin bath, each with its concentration and abundance
    :param context: central linewidth, residual rate and xi, its g is replaced at every angle
    :param selector: transition followed along the sweep
    """
    central_hamiltonian = SpinHamiltonian(subsite(central, subsite_name), constants)
    points = []
    for point in sweep.for_subsite(subsite_name):
        solution = _working_solution(point, central_hamiltonian, selector)
        if solution is None:
            logger.warning(f"No resonance of the working transition at {point.angle_deg} deg, the rate is left "
                           f"undefined.")
            points.append(AngularRatePoint(point.angle_deg, math.nan, math.nan, math.nan))
            continue
        field = solution.field
        try:
            g_central = effective_g(central_hamiltonian.gradient(field, solution.transition.lower,
                                                                 solution.transition.upper), constants)
        except DegenerateGradientError as e:
            logger.warning(f"No effective g at {point.angle_deg} deg: {e.message}")
            points.append(AngularRatePoint(point.angle_deg, solution.field_magnitude, math.nan, math.nan,
                                           solution.transition))
            continue
        ensembles = [ensemble for species in bath
                     for ensemble in bath_subensembles(species, field, context.linewidth, threshold,
                                                       subsites=("a", "b"), constants=constants)]
        local = CentralSpinContext(g=g_central, linewidth=context.linewidth, residual_rate=context.residual_rate,
                                   xi=context.xi)
        rate = temperature_model(local, ensembles, temperature, prefactor, constants)
        points.append(AngularRatePoint(point.angle_deg, solution.field_magnitude, g_central, rate,
                                       solution.transition))
    return points


def estimate_bath_temperature(context: CentralSpinContext, ensembles: Sequence[SubEnsemble], product: float,
                              bracket: Tuple[float, float] = (1e-4, 10.0), prefactor: str = "composed",
                              constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """
    Spin bath temperature at which the modelled spectral diffusion matches a measured R Gamma_SD
    :param product: measured R Gamma_SD, Hz^2
    :param bracket: temperature search interval, K
    :return: temperature, K
    """
    target = context.residual_rate + t2_from_sd(product)[0]

    def mismatch(temperature: float) -> float:
        return temperature_model(context, ensembles, temperature, prefactor, constants) - target

    low, high = mismatch(bracket[0]), mismatch(bracket[1])
    if low * high > 0:
        raise ValueError(f"R Gamma_SD = {product:.4g} Hz^2 is out of reach of the model within {bracket} K "
                         f"(rates {low + target:.4g} to {high + target:.4g} Hz against {target:.4g} Hz).")
    temperature = brentq(mismatch, *bracket, xtol=1e-9, rtol=1e-12)
    logger.info(f"Bath temperature for R Gamma_SD = {product:.4g} Hz^2: {temperature * 1e3:.2f} mK")
    return temperature


def y89_bath(g_central: float, field: float, temperature: float, n_y: float = DEFAULT_Y_DENSITY,
             constants: PhysicalConstants = DEFAULT_CONSTANTS) -> Tuple[float, float, float]:
    """
    Spectral diffusion caused by flip-flops of 89Y nuclear spins
    :param g_central: effective g-factor of the central spin
    :param field: static field magnitude, T
    :param temperature: bath temperature, K
    :param n_y: 89Y density taking part in flip-flops, spins/m^3
    :return: (Gamma_SD in Hz, R in Hz, R Gamma_SD in Hz^2)
    """
    _check_temperature(temperature)
    if g_central < 0 or not n_y > 0:
        raise ValueError(f"Expected g >= 0 and n_Y > 0, got {g_central}, {n_y}.")
    c = constants
    spin = math.sqrt(Y89_SPIN * (Y89_SPIN + 1))
    polarization = float(_sech(c.h * c.gamma_Y89 * field / (2 * c.k_B * temperature)))
    gamma_sd = 0.14 * c.mu_0 * c.gamma_Y89 * g_central * c.mu_B * n_y * spin * polarization
    rate = 0.25 * c.mu_0 * c.h * c.gamma_Y89 ** 2 * (n_y / 2) * spin * polarization
    return gamma_sd, rate, gamma_sd * rate


def purcell_t1(g0: float, kappa: float) -> float:
    """
    Purcell-limited relaxation time kappa / (4 g0^2), both in angular units (rad/s)
    """
    if g0 < 0 or not kappa > 0:
        raise ValueError(f"Expected g0 >= 0 and kappa > 0, got {g0}, {kappa}.")
    if g0 == 0:
        return math.inf
    return kappa / (4 * g0 ** 2)


def eseem_frequency(field: float, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """
    89Y Larmor frequency, Hz
    """
    return constants.gamma_Y89 * abs(field)


def eseem_model(t, a0: float, t2: float, depth: float, field: float, phase: float,
                constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """
    Echo amplitude modulated at the 89Y Larmor frequency,
    A0 exp(-2t/T2) (1 - k (1 - cos(2 pi gamma_Y B t + phase)) / 2)
    """
    t = np.asarray(t, dtype=float)
    modulation = 1 - depth * (1 - np.cos(2 * math.pi * eseem_frequency(field, constants) * t + phase)) / 2
    return a0 * np.exp(-2 * t / t2) * modulation
