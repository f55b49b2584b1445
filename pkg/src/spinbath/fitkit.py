"""
Least squares engine and the measurement models fitted to echo and resonator data, plus seeded synthetic data
generators for each model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from .decomodels import eseem_frequency, eseem_model, temperature_model
from .errors import BoundsError, FitDivergenceError, MissingSeedError, SingularJacobianError, ZeroFrequencyError
from .model import (DEFAULT_CONSTANTS, CentralSpinContext, CovarianceRow, CovarianceScan, CrossingTrace, DecayTrace,
                    FieldSweepTrace, FitResult, PhysicalConstants, RateTrace, StimEchoGrid, SubEnsemble)
from .utils import LoggingObject, get_logger

logger = get_logger("fitkit")

Model = Callable[[np.ndarray, np.ndarray], np.ndarray]
FOUR_LN2 = 4 * math.log(2)


@dataclass(frozen=True)
class FitOptions:
    """
    :param n_starts: number of random starts added to the given ones, needs a seed
    :param singular_tolerance: smallest singular value of the column-normalized Jacobian, relative to the largest,
    below which the Jacobian is singular
    :param allow_singular: report a singular Jacobian as a flag and use a pseudo-inverse instead of failing
    """
    max_nfev: int = 5000
    ftol: float = 1e-12
    xtol: float = 1e-12
    gtol: float = 1e-12
    n_starts: int = 0
    seed: Optional[int] = None
    singular_tolerance: float = 1e-6
    allow_singular: bool = False


class FitEngine(LoggingObject):
    """
    Trust region reflective least squares with numerical Jacobians. Covariances come from the Jacobian at the optimum,
    scaled by the reduced residual sum of squares unless absolute uncertainties are given.
    """

    def __init__(self, options: FitOptions = FitOptions()):
        super().__init__()
        self.options = options

    def _random_starts(self, p0: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> List[np.ndarray]:
        if self.options.n_starts <= 0:
            return []
        if self.options.seed is None:
            raise MissingSeedError("Random multi-start needs a seed.")
        rng = np.random.default_rng(self.options.seed)
        starts = []
        for _ in range(self.options.n_starts):
            start = np.empty_like(p0)
            for i, (p, lo, hi) in enumerate(zip(p0, lower, upper)):
                if math.isfinite(lo) and math.isfinite(hi):
                    start[i] = rng.uniform(lo, hi)
                elif p != 0:
                    start[i] = p * 10 ** rng.uniform(-1, 1)
                else:
                    start[i] = rng.uniform(-1, 1)
            starts.append(np.clip(start, lower, upper))
        return starts

    def fit(self, model: Model, x, y, params0: Sequence[float], names: Sequence[str], units: Sequence[str],
            bounds: Optional[Tuple[Sequence[float], Sequence[float]]] = None, sigma=None,
            absolute_sigma: Optional[bool] = None, fixed: Optional[Dict[str, float]] = None,
            extra_starts: Sequence[Sequence[float]] = (), model_name: str = "model") -> FitResult:
        """
        Minimizes sum(((model(x, p) - y) / sigma)^2)
        :param model: model(x, p) with p the full parameter vector, returning an array shaped like y
        :param params0: starting parameters, full vector
        :param names: parameter names
        :param units: parameter units
        :param bounds: (lower, upper) over the full vector, unbounded if omitted
        :param sigma: per-point uncertainties
        :param absolute_sigma: whether sigma are absolute uncertainties, True when sigma is given
        :param fixed: parameters held at a value, by name
        :param extra_starts: further full starting vectors
        :param model_name: stored in the result
        """
        y = np.asarray(y, dtype=float).reshape(-1)
        p0 = np.array(params0, dtype=float)
        n_params = len(p0)
        if len(names) != n_params or len(units) != n_params:
            raise ValueError("names, units and params0 must have the same length.")
        lower, upper = (np.full(n_params, -np.inf), np.full(n_params, np.inf)) if bounds is None else \
            (np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float))
        fixed = dict(fixed or {})
        unknown = set(fixed) - set(names)
        if unknown:
            raise ValueError(f"Unknown fixed parameters {sorted(unknown)}.")
        for name, value in fixed.items():
            p0[names.index(name)] = value
        outside = [name for name, p, lo, hi in zip(names, p0, lower, upper) if not lo <= p <= hi]
        if outside:
            raise BoundsError(f"Starting values of {outside} lie outside their bounds.", parameters=outside)
        free = np.array([name not in fixed for name in names])
        if not free.any():
            raise ValueError("Every parameter is fixed, nothing to fit.")
        weights = None if sigma is None else 1.0 / np.asarray(sigma, dtype=float).reshape(-1)
        if weights is not None and not np.all(np.isfinite(weights) & (weights > 0)):
            raise ValueError("Uncertainties must be finite and > 0.")
        if absolute_sigma is None:
            absolute_sigma = sigma is not None

        def full(p_free: np.ndarray) -> np.ndarray:
            p = p0.copy()
            p[free] = p_free
            return p

        def residuals(p_free: np.ndarray) -> np.ndarray:
            r = np.asarray(model(x, full(p_free)), dtype=float).reshape(-1) - y
            return r if weights is None else r * weights

        starts = [p0] + [np.asarray(s, dtype=float) for s in extra_starts] + self._random_starts(p0, lower, upper)
        best = None
        failures = []
        for start in starts:
            start = np.clip(start, lower, upper)[free]
            try:
                result = optimize.least_squares(residuals, start, jac="3-point", bounds=(lower[free], upper[free]),
                                                method="trf", x_scale="jac", max_nfev=self.options.max_nfev,
                                                ftol=self.options.ftol, xtol=self.options.xtol,
                                                gtol=self.options.gtol)
            except ValueError as e:
                failures.append(str(e))
                continue
            if result.status <= 0 or not np.all(np.isfinite(result.fun)):
                failures.append(result.message)
                continue
            if best is None or result.cost < best.cost:
                best = result
        if best is None:
            raise FitDivergenceError(f"{model_name}: no start converged ({len(starts)} tried). Last reason: "
                                     f"{failures[-1] if failures else 'unknown'}", failures=failures)

        flags = [f"fixed:{name}" for name in fixed]
        covariance_free = self._covariance(best.jac, best.fun, absolute_sigma, flags, model_name)
        covariance = np.zeros((n_params, n_params))
        covariance[np.ix_(free, free)] = covariance_free
        values = full(best.x)
        prediction = np.asarray(model(x, values), dtype=float).reshape(-1)
        rss = float(np.sum((prediction - y) ** 2))
        tss = float(np.sum((y - y.mean()) ** 2))
        if tss > 0:
            r2 = 1 - rss / tss
        else:
            r2 = 1.0 if rss == 0 else -math.inf
        if np.any(best.active_mask != 0):
            flags.append("at_bound")
        self.logger.debug(f"{model_name}: {dict(zip(names, values.tolist()))}, r2 = {r2:.6f}, nfev = {best.nfev}")
        return FitResult(model=model_name, names=list(names), units=list(units), values=values.tolist(),
                         uncertainties=np.sqrt(np.clip(np.diag(covariance), 0, None)).tolist(),
                         covariance=covariance.tolist(), rss=rss, r2=r2, converged=True, message=best.message,
                         nfev=int(best.nfev), seed=self.options.seed if self.options.n_starts > 0 else None,
                         flags=flags)

    def _covariance(self, jac: np.ndarray, fun: np.ndarray, absolute_sigma: bool, flags: List[str],
                    model_name: str) -> np.ndarray:
        jac = np.atleast_2d(jac)
        n_points, n_free = jac.shape
        column_norms = np.linalg.norm(jac, axis=0)
        singular = bool(np.any(column_norms <= 1e-12 * max(column_norms.max(), 1e-300)))
        scale = np.where(column_norms > 0, column_norms, 1.0)
        _, s, vt = np.linalg.svd(jac / scale, full_matrices=False)
        if s[0] == 0 or s[-1] < self.options.singular_tolerance * s[0]:
            singular = True
        if singular:
            if not self.options.allow_singular:
                raise SingularJacobianError(f"{model_name}: the Jacobian at the optimum is singular, the parameters "
                                            f"are not identifiable from these data.",
                                            singular_values=s.tolist())
            flags.append("singular_jacobian")
            inverse = np.where(s > self.options.singular_tolerance * s[0], 1.0 / np.where(s > 0, s, 1.0) ** 2, 0.0)
        else:
            inverse = 1.0 / s ** 2
        covariance = (vt.T * inverse) @ vt / np.outer(scale, scale)
        if not absolute_sigma:
            dof = n_points - n_free
            if dof <= 0:
                flags.append("no_degrees_of_freedom")
                return np.full((n_free, n_free), math.inf)
            covariance = covariance * float(np.sum(fun ** 2)) / dof
        return (covariance + covariance.T) / 2


def least_squares(model: Model, params0: Sequence[float], x, y, names: Sequence[str],
                  units: Optional[Sequence[str]] = None, bounds=None, sigma=None,
                  options: FitOptions = FitOptions(), **kwargs) -> FitResult:
    """
    Fits a model to data, see FitEngine.fit
    """
    units = units if units is not None else [""] * len(params0)
    return FitEngine(options).fit(model, x, y, params0, names, units, bounds=bounds, sigma=sigma, **kwargs)


def _propagate(result: FitResult, gradient: Sequence[float]) -> float:
    gradient = np.asarray(gradient, dtype=float)
    variance = float(gradient @ np.asarray(result.covariance) @ gradient)
    return math.sqrt(max(variance, 0.0))


def _log_linear_rate(t: np.ndarray, y: np.ndarray) -> Optional[float]:
    """
    Decay rate from a straight line fit of log(y), None without enough positive points
    """
    mask = y > 0
    if mask.sum() < 2:
        return None
    slope = np.polyfit(t[mask], np.log(y[mask]), 1)[0]
    return -slope if slope < 0 else None


# Hahn echo decay over a noise floor

def decay_model(tau, p):
    a0, t2, floor = p
    return np.sqrt((a0 * np.exp(-2 * tau / t2)) ** 2 + floor ** 2)


def fit_decay_noise_floor(trace: DecayTrace, floor: Optional[float] = None,
                          options: FitOptions = FitOptions()) -> FitResult:
    """
    Fits A(tau) = sqrt((A0 exp(-2 tau / T2))^2 + C^2)
    :param trace: echo amplitudes against tau
    :param floor: noise floor C held fixed, e.g. measured without pulses
    """
    tau, amplitude = trace.tau, trace.amplitude
    tail = amplitude[-max(1, len(amplitude) // 10):]
    c0 = float(np.clip(np.median(tail), 0, None)) if floor is None else float(floor)
    a0 = float(max(amplitude.max(), 1e-12))
    core = np.sqrt(np.clip(amplitude ** 2 - c0 ** 2, 0, None))
    above = core > 0.1 * core.max() if core.max() > 0 else np.ones(len(core), dtype=bool)
    rate = _log_linear_rate(tau[above], core[above])
    t20 = 2 / rate if rate else float(tau[-1] - tau[0]) / 2 or 1.0
    fixed = None if floor is None else {"C": float(floor)}
    return FitEngine(options).fit(decay_model, tau, amplitude, [a0, t20, c0], ["A0", "T2", "C"], ["V", "s", "V"],
                                  bounds=([0, 0, 0], [np.inf, np.inf, np.inf]), sigma=trace.sigma, fixed=fixed,
                                  model_name="decay_noise_floor")


# Stimulated echo

def stimulated_model(t1: float, gamma0: float = 0.0) -> Model:
    def model(x, p):
        tau, tw = x
        a0, r, gamma_sd = p
        diffusion = gamma0 + 0.5 * gamma_sd * (r * tau + 1 - np.exp(-r * tw))
        return a0 * np.exp(-(tw / t1 + 2 * np.pi * tau * diffusion))
    return model


def _stimulated_starts(grid: StimEchoGrid, gamma0: float, rates: Sequence[float]) -> List[List[float]]:
    """
    For each candidate R, ln A0 and Gamma_SD follow from a linear fit of the log amplitude
    """
    log_amplitude = np.log(np.clip(grid.amplitude, 1e-12 * max(grid.amplitude.max(), 1e-300), None))
    target = log_amplitude + grid.tw / grid.t1 + 2 * np.pi * grid.tau * gamma0
    starts = []
    for r in rates:
        design = np.column_stack([np.ones_like(grid.tau),
                                  -np.pi * grid.tau * (r * grid.tau + 1 - np.exp(-r * grid.tw))])
        (log_a0, gamma_sd), *_ = np.linalg.lstsq(design, target, rcond=None)
        starts.append([float(np.exp(log_a0)), float(r), float(max(gamma_sd, 1e-6))])
    return starts


def _with_product(result: FitResult) -> FitResult:
    r, gamma_sd = result["R"], result["Gamma_SD"]
    product = r * gamma_sd
    result.derived["product"] = (product, _propagate(result, [0.0, gamma_sd, r]))
    return result


def fit_stimulated(grid: StimEchoGrid, gamma0: float = 0.0, options: FitOptions = FitOptions(),
                   start_rates: Optional[Sequence[float]] = None) -> FitResult:
    """
    Fits A(tau, T_w) = A0 exp[-(T_w/T1 + 2 pi tau (Gamma0 + Gamma_SD (R tau + 1 - exp(-R T_w)) / 2))] with T1 and
    Gamma0 fixed. The product R Gamma_SD, much better determined than either factor, is stored in derived["product"].
    :param start_rates: candidate R values (Hz) used to build starting points, log-spaced over 0.01 Hz to 10 kHz if
    omitted
    """
    rates = np.geomspace(1e-2, 1e4, 13) if start_rates is None else start_rates
    starts = _stimulated_starts(grid, gamma0, rates)
    best_start = min(starts, key=lambda s: float(np.sum(
        (stimulated_model(grid.t1, gamma0)((grid.tau, grid.tw), s) - grid.amplitude) ** 2)))
    result = FitEngine(options).fit(stimulated_model(grid.t1, gamma0), (grid.tau, grid.tw), grid.amplitude,
                                    best_start, ["A0", "R", "Gamma_SD"], ["V", "Hz", "Hz"],
                                    bounds=([0, 0, 0], [np.inf, np.inf, np.inf]), sigma=grid.sigma,
                                    extra_starts=starts, model_name="stimulated_echo")
    return _with_product(result)


def covariance_scan(grid: StimEchoGrid, gamma_sd_values: Sequence[float], r_values: Sequence[float],
                    gamma0: float = 0.0, r2_threshold: float = 0.99,
                    options: FitOptions = FitOptions()) -> CovarianceScan:
    """
    Refits the stimulated echo grid with Gamma_SD held at each of gamma_sd_values, then with R held at each of
    r_values. Over the rows with r2 above the threshold the product R Gamma_SD stays constant, its median is the
    ridge product.
    """
    reference = fit_stimulated(grid, gamma0, options)
    product = reference.derived["product"][0]
    model = stimulated_model(grid.t1, gamma0)
    engine = FitEngine(options)
    rows = []
    for fixed_name, other_name, values in (("Gamma_SD", "R", gamma_sd_values), ("R", "Gamma_SD", r_values)):
        for value in values:
            value = float(value)
            start = {"A0": reference["A0"], fixed_name: value, other_name: product / value if value > 0 else 1.0}
            try:
                result = engine.fit(model, (grid.tau, grid.tw), grid.amplitude,
                                    [start["A0"], start["R"], start["Gamma_SD"]], ["A0", "R", "Gamma_SD"],
                                    ["V", "Hz", "Hz"], bounds=([0, 0, 0], [np.inf, np.inf, np.inf]), sigma=grid.sigma,
                                    fixed={fixed_name: value}, model_name="stimulated_echo_fixed")
            except (FitDivergenceError, SingularJacobianError) as e:
                logger.warning(f"Refit with {fixed_name} = {value:.4g} failed: {e.message}")
                rows.append(CovarianceRow(fixed_name, value, math.nan, math.nan, math.nan, math.nan))
                continue
            rows.append(CovarianceRow(fixed_name=fixed_name, fixed_value=value, other_value=result[other_name],
                                      a0=result["A0"], r2=result.r2, product=result["R"] * result["Gamma_SD"]))
    ridge = [row.product for row in rows if row.r2 > r2_threshold]
    if ridge:
        ridge_product = float(np.median(ridge))
        spread = float((max(ridge) - min(ridge)) / ridge_product)
    else:
        logger.warning(f"No refit reached r2 > {r2_threshold}, the ridge product is undefined.")
        ridge_product, spread = math.nan, math.nan
    logger.info(f"Covariance scan: {len(ridge)} of {len(rows)} rows on the ridge, product {ridge_product:.4g} Hz^2")
    return CovarianceScan(rows=rows, ridge_product=ridge_product, ridge_spread=spread, r2_threshold=r2_threshold)


# Inversion recovery

def biexponential_model(t, p):
    a_fast, t1_fast, a_slow, t1_slow, offset = p
    return np.abs(a_fast * np.exp(-t / t1_fast) + a_slow * np.exp(-t / t1_slow) + offset)


def _biexponential_starts(t: np.ndarray, amplitude: np.ndarray, n_best: int = 3) -> List[List[float]]:
    # amplitude detection folds the recovery curve, unfold it before its minimum
    signed = amplitude.copy()
    signed[:int(np.argmin(amplitude))] *= -1
    span = float(t[-1] - t[0]) or 1.0
    step = float(np.min(np.diff(t))) if len(t) > 1 else span
    times = np.geomspace(max(step, span * 1e-4), 3 * span, 16)
    candidates = []
    for i, fast in enumerate(times):
        for slow in times[i + 1:]:
            design = np.column_stack([np.exp(-t / fast), np.exp(-t / slow), np.ones_like(t)])
            coefficients, *_ = np.linalg.lstsq(design, signed, rcond=None)
            cost = float(np.sum((np.abs(design @ coefficients) - amplitude) ** 2))
            candidates.append((cost, [coefficients[0], fast, coefficients[1], slow, coefficients[2]]))
    candidates.sort(key=lambda c: c[0])
    return [[float(v) for v in c[1]] for c in candidates[:n_best]]


def fit_biexponential_t1(trace: DecayTrace, options: FitOptions = FitOptions(),
                         degenerate_ratio: float = 0.05, minor_amplitude: float = 1e-3) -> FitResult:
    """
    Fits |A_fast exp(-t/T1_fast) + A_slow exp(-t/T1_slow) + offset| to an amplitude-detected inversion recovery.
    The components are ordered so that T1_fast < T1_slow. Data explained by one exponential are flagged
    "single_exponential", equal rates "degenerate_rates".
    """
    t, amplitude = trace.tau, trace.amplitude
    starts = _biexponential_starts(t, amplitude)
    result = FitEngine(replace(options, allow_singular=True)).fit(
        biexponential_model, t, amplitude, starts[0], ["A_fast", "T1_fast", "A_slow", "T1_slow", "offset"],
        ["V", "s", "V", "s", "V"], bounds=([-np.inf, 0, -np.inf, 0, -np.inf], [np.inf] * 5), sigma=trace.sigma,
        extra_starts=starts[1:], model_name="biexponential_t1")
    if result["T1_fast"] > result["T1_slow"]:
        order = [2, 3, 0, 1, 4]
        covariance = np.asarray(result.covariance)[np.ix_(order, order)]
        result.values = [result.values[i] for i in order]
        result.uncertainties = [result.uncertainties[i] for i in order]
        result.covariance = covariance.tolist()
    a_fast, t1_fast, a_slow, t1_slow, _ = result.values
    total = abs(a_fast) + abs(a_slow)
    if abs(t1_slow - t1_fast) <= degenerate_ratio * t1_slow:
        result.flags.append("degenerate_rates")
        logger.warning(f"Biexponential rates are degenerate: T1 = {t1_fast:.4g} s and {t1_slow:.4g} s.")
    elif total == 0 or min(abs(a_fast), abs(a_slow)) < minor_amplitude * total:
        result.flags.append("single_exponential")
        logger.warning("Inversion recovery is described by a single exponential.")
    return result


# Avoided crossing

def crossing_model(df_dB: float) -> Model:
    """
    Stacked resonator frequency and half-width, f0 - g^2 D / (D^2 + gamma^2) then kappa0 + g^2 gamma / (D^2 + gamma^2)
    with D = df_dB (B - B0)
    """
    def model(field, p):
        f0, kappa0, g, gamma, b0 = p
        detuning = df_dB * (field - b0)
        denominator = detuning ** 2 + gamma ** 2
        return np.concatenate([f0 - g ** 2 * detuning / denominator, kappa0 + g ** 2 * gamma / denominator])
    return model


def _crossing_start(trace: CrossingTrace, df_dB: float) -> List[float]:
    field, frequency, kappa = trace.field, trace.frequency, trace.kappa
    kappa0 = float(min(kappa[0], kappa[-1], np.min(kappa)))
    peak = int(np.argmax(kappa))
    height = float(kappa[peak] - kappa0)
    above = np.nonzero(kappa - kappa0 >= height / 2)[0]
    width = abs(float(field[above[-1]] - field[above[0]])) / 2 if len(above) > 1 else \
        abs(float(field[-1] - field[0])) / len(field)
    gamma = max(abs(df_dB) * width, 1.0)
    g = math.sqrt(max(height, 1e-12) * gamma)
    return [float((frequency[0] + frequency[-1]) / 2), max(kappa0, 1e-12), g, gamma, float(field[peak])]


def fit_avoided_crossing(trace: CrossingTrace, df_dB: Optional[float] = None,
                         options: FitOptions = FitOptions()) -> FitResult:
    """
    Joint fit of the dispersive shift and the broadening of a resonator across a spin line. The slope df/dB of the
    spin transition is required, only g_ens/df_dB and gamma/df_dB can be told apart otherwise. The cooperativity
    g_ens^2 / (kappa0 gamma) is stored in derived["cooperativity"]. All rates are half-widths in Hz.
    """
    df_dB = trace.df_dB if df_dB is None else df_dB
    if df_dB is None or df_dB == 0:
        raise ValueError("A non-zero transition slope df/dB is required to fit an avoided crossing.")
    start = _crossing_start(trace, df_dB)
    result = FitEngine(options).fit(crossing_model(df_dB), trace.field,
                                    np.concatenate([trace.frequency, trace.kappa]), start,
                                    ["f0", "kappa0", "g_ens", "gamma", "B0"], ["Hz", "Hz", "Hz", "Hz", "T"],
                                    bounds=([0, 0, 0, 0, -np.inf], [np.inf] * 5), model_name="avoided_crossing")
    _, kappa0, g, gamma, _ = result.values
    cooperativity = g ** 2 / (kappa0 * gamma)
    result.derived["cooperativity"] = (cooperativity, _propagate(
        result, [0.0, -cooperativity / kappa0, 2 * cooperativity / g, -cooperativity / gamma, 0.0]))
    return result


# Field sweep

def gaussian_sweep_model(field, p):
    amplitude, center, fwhm, background = p
    return background + amplitude * np.exp(-FOUR_LN2 * (field - center) ** 2 / fwhm ** 2)


def fit_field_sweep_gaussian(trace: FieldSweepTrace, fwhm: Optional[float] = None,
                             options: FitOptions = FitOptions()) -> FitResult:
    """
    Fits a Gaussian over a constant background to the maximum echo amplitude against field
    :param fwhm: field FWHM held fixed, T, e.g. the spin linewidth divided by df/dB
    """
    field, amplitude = trace.field, trace.amplitude
    edge = max(1, len(field) // 10)
    background = float(np.median(np.concatenate([amplitude[:edge], amplitude[-edge:]])))
    peak = int(np.argmax(amplitude))
    height = float(amplitude[peak] - background)
    above = np.nonzero(amplitude - background >= height / 2)[0]
    width = float(field[above[-1]] - field[above[0]]) if len(above) > 1 else float(field[-1] - field[0]) / 4
    start = [height, float(field[peak]), width if fwhm is None else fwhm, background]
    fixed = None if fwhm is None else {"FWHM": float(fwhm)}
    return FitEngine(options).fit(gaussian_sweep_model, field, amplitude, start,
                                  ["amplitude", "center", "FWHM", "background"], ["V", "T", "T", "V"],
                                  bounds=([-np.inf, -np.inf, 0, -np.inf], [np.inf] * 4), sigma=trace.sigma,
                                  fixed=fixed, model_name="field_sweep_gaussian")


# ESEEM

def fit_eseem(trace: DecayTrace, field: float, options: FitOptions = FitOptions(),
              constants: PhysicalConstants = DEFAULT_CONSTANTS) -> FitResult:
    """
    Fits a decay modulated at the 89Y Larmor frequency of the field, the frequency is not a free parameter
    """
    if eseem_frequency(field, constants) == 0:
        raise ZeroFrequencyError("The modulation frequency is zero at zero field, the envelope cannot be fitted.",
                                 field=field)
    tau, amplitude = trace.tau, trace.amplitude

    def model(t, p):
        return eseem_model(t, p[0], p[1], p[2], field, p[3], constants)

    rate = _log_linear_rate(tau, amplitude)
    t20 = 2 / rate if rate else float(tau[-1] - tau[0]) or 1.0
    a0 = float(max(amplitude.max(), 1e-12))
    starts = [[a0, t20, depth, phase] for depth in (0.2, 0.6) for phase in np.linspace(-math.pi, math.pi, 4,
                                                                                        endpoint=False)]
    result = FitEngine(options).fit(model, tau, amplitude, starts[0], ["A0", "T2", "depth", "phase"],
                                    ["V", "s", "1", "rad"],
                                    bounds=([0, 0, 0, -2 * math.pi], [np.inf, np.inf, 1, 2 * math.pi]),
                                    sigma=trace.sigma, extra_starts=starts[1:], model_name="eseem")
    phase_index = result.names.index("phase")
    result.values[phase_index] = float((result.values[phase_index] + math.pi) % (2 * math.pi) - math.pi)
    return result


# Spectral diffusion against temperature

def fit_temperature_model(trace: RateTrace, context: CentralSpinContext, ensembles: Sequence[SubEnsemble],
                          prefactor: str = "composed", options: FitOptions = FitOptions(),
                          constants: PhysicalConstants = DEFAULT_CONSTANTS) -> FitResult:
    """
    Fits xi and the residual rate of the temperature model to decoherence rates measured at several temperatures.
    The spectral diffusion part scales with sqrt(xi), which gives a linear starting point.
    """
    unit_context = CentralSpinContext(g=context.g, linewidth=context.linewidth, residual_rate=0.0, xi=1.0)
    shape = np.array([temperature_model(unit_context, ensembles, t, prefactor, constants)
                      for t in trace.temperature])

    def model(_, p):
        xi, residual_rate = p
        return residual_rate + math.sqrt(max(xi, 0.0)) * shape

    design = np.column_stack([shape, np.ones_like(shape)])
    (root_xi, residual_rate), *_ = np.linalg.lstsq(design, trace.rate, rcond=None)
    start = [float(max(root_xi, 1e-3) ** 2), float(max(residual_rate, 0.0))]
    return FitEngine(options).fit(model, trace.temperature, trace.rate, start, ["xi", "residual_rate"], ["1", "Hz"],
                                  bounds=([0, 0], [np.inf, np.inf]), sigma=trace.sigma,
                                  model_name="temperature_model")


# Synthetic data

def _add_noise(clean: np.ndarray, signal_scale: float, snr: float,
               seed: Optional[int]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Adds Gaussian noise of standard deviation signal_scale / snr, none for an infinite snr
    :return: noisy values and their uncertainties
    """
    if seed is None:
        raise MissingSeedError("Synthetic data need an explicit seed.")
    if not snr > 0:
        raise ValueError(f"SNR must be > 0, got {snr}.")
    if math.isinf(snr):
        return clean.copy(), None
    scale = abs(signal_scale) / snr
    rng = np.random.default_rng(seed)
    return clean + rng.normal(0.0, scale, clean.shape), np.full(clean.shape, scale)


def synth_decay(tau, a0: float, t2: float, floor: float, snr: float, seed: Optional[int]) -> DecayTrace:
    tau = np.asarray(tau, dtype=float)
    amplitude, sigma = _add_noise(decay_model(tau, [a0, t2, floor]), a0, snr, seed)
    return DecayTrace(tau, amplitude, sigma)


def synth_stimulated(tau_values, tw_values, a0: float, r: float, gamma_sd: float, t1: float, snr: float,
                     seed: Optional[int], gamma0: float = 0.0) -> StimEchoGrid:
    """
    Stimulated echo amplitudes on the full tau x T_w grid
    """
    tau, tw = (m.reshape(-1) for m in np.meshgrid(np.asarray(tau_values, dtype=float),
                                                  np.asarray(tw_values, dtype=float), indexing="ij"))
    clean = stimulated_model(t1, gamma0)((tau, tw), [a0, r, gamma_sd])
    amplitude, sigma = _add_noise(clean, a0, snr, seed)
    return StimEchoGrid(tau, tw, amplitude, t1, sigma)


def synth_t1(t, a_fast: float, t1_fast: float, a_slow: float, t1_slow: float, offset: float, snr: float,
             seed: Optional[int]) -> DecayTrace:
    """
    Amplitude-detected inversion recovery: noise is added to the signed signal before taking the modulus
    """
    t = np.asarray(t, dtype=float)
    signed = a_fast * np.exp(-t / t1_fast) + a_slow * np.exp(-t / t1_slow) + offset
    noisy, sigma = _add_noise(signed, float(np.abs(signed).max()), snr, seed)
    return DecayTrace(t, np.abs(noisy), sigma)


def synth_crossing(fields, f0: float, kappa0: float, g: float, gamma: float, b0: float, df_dB: float, snr: float,
                   seed: Optional[int]) -> CrossingTrace:
    """
    Resonator frequency and half-width across a spin line, noise relative to the maximal broadening g^2 / gamma
    """
    fields = np.asarray(fields, dtype=float)
    noisy, _ = _add_noise(crossing_model(df_dB)(fields, [f0, kappa0, g, gamma, b0]), g ** 2 / gamma, snr, seed)
    return CrossingTrace(fields, noisy[:len(fields)], noisy[len(fields):], df_dB)


def synth_fieldsweep(fields, amplitude: float, center: float, fwhm: float, background: float, snr: float,
                     seed: Optional[int]) -> FieldSweepTrace:
    fields = np.asarray(fields, dtype=float)
    noisy, sigma = _add_noise(gaussian_sweep_model(fields, [amplitude, center, fwhm, background]), amplitude, snr,
                              seed)
    return FieldSweepTrace(fields, noisy, sigma)


def synth_eseem(tau, a0: float, t2: float, depth: float, field: float, phase: float, snr: float,
                seed: Optional[int], constants: PhysicalConstants = DEFAULT_CONSTANTS) -> DecayTrace:
    tau = np.asarray(tau, dtype=float)
    noisy, sigma = _add_noise(eseem_model(tau, a0, t2, depth, field, phase, constants), a0, snr, seed)
    return DecayTrace(tau, noisy, sigma)
