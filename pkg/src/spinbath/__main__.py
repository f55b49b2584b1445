import argparse
import logging
import math
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import jsonpickle
import numpy as np

from . import DEFAULT_WORKING_DIR
from .config import SystemConfig, parse_config, parse_config_text, serialize_config
from .decomodels import (DEFAULT_Y_DENSITY, angular_t2_model, bath_subensembles, estimate_bath_temperature,
                         excited_fraction, id_t2, id_t2_profile, purcell_t1, t2_from_sd, temperature_model, y89_bath)
from .errors import InvalidArgumentsError, SpinBathError
from .fieldsearch import (TransitionSelector, angular_sweep, gradient_profile, resonance_fields, zefoz_scan)
from .fitkit import (FitOptions, covariance_scan, fit_avoided_crossing, fit_biexponential_t1, fit_decay_noise_floor,
                     fit_eseem, fit_field_sweep_gaussian, fit_stimulated, fit_temperature_model, synth_crossing,
                     synth_decay, synth_eseem, synth_fieldsweep, synth_stimulated, synth_t1)
from .model import (PLANES, AngularSweep, CentralSpinContext, CrossingTrace, DecayTrace, FieldSweepTrace, RateTrace,
                    StimEchoGrid, SpinSystem, SubEnsemble, plane_direction)
from .runs import RunManifest, RunWriter, load_manifest
from .spinham import SpinHamiltonian, subsite, symmetrized
from .utils import get_logger, read_csv_columns, set_log_level

logger = get_logger("main")

TRANSITION_HEADER = ["lower", "upper", "f_Hz", "M", "dfdB_D1_Hz_per_T", "dfdB_D2_Hz_per_T", "dfdB_b_Hz_per_T",
                     "g_eff"]
RESONANCE_HEADER = ["angle_deg", "subsite", "B_T", "B_D1_T", "B_D2_T", "B_b_T", "lower", "upper", "f_Hz", "M",
                    "residual_Hz", "min_overlap"]
DEFAULT_BATH = ["Yb171_site1", "Yb171_site2", "YbI0_site1", "YbI0_site2"]


def _base_system(args: argparse.Namespace, config: SystemConfig) -> SpinSystem:
    system = config.system(args.system)
    return symmetrized(system) if args.symmetrize else system


def _system(args: argparse.Namespace, config: SystemConfig) -> SpinSystem:
    return subsite(_base_system(args, config), args.subsite)


def _rows_from_solutions(angle: float, subsite_name: str, solutions) -> List[list]:
    rows = []
    for solution in solutions:
        t = solution.transition
        rows.append([angle, subsite_name, solution.field_magnitude, *(float(v) for v in solution.field.array),
                     t.lower, t.upper, t.frequency, t.matrix_element, solution.residual, solution.min_overlap])
    return rows


def _write_sweep(sweep: AngularSweep, writer: RunWriter) -> None:
    rows = []
    for point in sweep.points:
        rows.extend(_rows_from_solutions(point.angle_deg, point.subsite, point.solutions))
    writer.write_csv("fields", RESONANCE_HEADER, rows)
    if rows:
        peak = max(rows, key=lambda row: row[2])
        writer.write_json("summary", {"plane": sweep.plane, "f_Hz": sweep.frequency, "resonances": len(rows),
                                      "peak_field_T": peak[2], "peak_angle_deg": peak[0], "peak_subsite": peak[1]})
    else:
        logger.warning(f"No resonance at {sweep.frequency:.6g} Hz over the swept angles.")
        writer.write_json("summary", {"plane": sweep.plane, "f_Hz": sweep.frequency, "resonances": 0})


def _angles(start: float, stop: float, step: float) -> np.ndarray:
    if not step > 0:
        raise ValueError(f"Angle step must be > 0, got {step}.")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(count)


def _run_levels(args, config, writer):
    levels = SpinHamiltonian(_system(args, config), config.constants).levels(args.field)
    writer.write_csv("", ["level", "energy_Hz"], [[i, float(e)] for i, e in enumerate(levels.energies)])


def _run_transitions(args, config, writer):
    ham = SpinHamiltonian(_system(args, config), config.constants)
    rows = []
    for t in ham.transitions(args.field, args.b1, threshold=args.threshold, with_gradients=args.gradients):
        gradient = [math.nan] * 3 if t.gradient is None else [float(v) for v in t.gradient]
        rows.append([t.lower, t.upper, t.frequency, t.matrix_element, *gradient, t.g_eff])
    writer.write_csv("", TRANSITION_HEADER, rows)


def _run_resonance(args, config, writer):
    if args.direction is None and args.angle is None:
        sweep = angular_sweep(_base_system(args, config), args.freq, _angles(-90.0, 90.0 - args.step, args.step),
                              plane=args.plane, subsites=args.subsites, bracket=(0.0, args.bmax), tol=args.tol,
                              threshold=args.threshold, constants=config.constants)
        _write_sweep(sweep, writer)
        return
    direction = args.direction if args.direction is not None else plane_direction(args.angle, args.plane, args.tilt)
    solutions = resonance_fields(_system(args, config), args.freq, direction, bracket=(0.0, args.bmax), tol=args.tol,
                                 threshold=args.threshold, constants=config.constants)
    angle = math.nan if args.angle is None else args.angle
    writer.write_csv("fields", RESONANCE_HEADER, _rows_from_solutions(angle, args.subsite, solutions))


def _run_sweep_angle(args, config, writer):
    sweep = angular_sweep(_base_system(args, config), args.freq, _angles(args.start, args.stop, args.step),
                          plane=args.plane, misalignment_deg=args.misalignment, subsites=args.subsites,
                          bracket=(0.0, args.bmax), tol=args.tol, threshold=args.threshold,
                          constants=config.constants)
    _write_sweep(sweep, writer)


def _selector(args) -> TransitionSelector:
    if args.near is not None:
        return TransitionSelector(frequency=args.near)
    return TransitionSelector(lower=args.lower, upper=args.upper)


def _optional_selector(args) -> Optional[TransitionSelector]:
    if args.near is None and args.lower is None and args.upper is None:
        return None
    return _selector(args)


def _run_zefoz(args, config, writer):
    system = _system(args, config)
    selector = _selector(args)
    zefoz = zefoz_scan(system, selector, args.plane, args.bmax, args.grid, config.constants)
    rows = []
    for i, b_first in enumerate(zefoz.axis):
        for j, b_second in enumerate(zefoz.axis):
            norm = zefoz.value_at(i, j)
            rows.append([b_first, b_second, norm, config.constants.h * norm / config.constants.mu_B,
                         int(zefoz.degenerate[i, j])])
    first, second, _ = PLANES[args.plane]
    axis_names = ("D1", "D2", "b")
    writer.write_csv("map", [f"B_{axis_names[first]}_T", f"B_{axis_names[second]}_T", "grad_norm_Hz_per_T",
                             "g_eff", "degenerate"], rows)
    profile = gradient_profile(system, selector, plane_direction(zefoz.min_ray_angle_deg, args.plane),
                               np.linspace(0.0, args.bmax, args.grid), config.constants)
    writer.write_csv("ray", ["B_T", "f_Hz", "grad_norm_Hz_per_T", "g_eff"],
                     [[p.field_magnitude, p.frequency, p.gradient_norm, p.g_eff] for p in profile])
    writer.write_json("summary", {"plane": args.plane, "min_ray_angle_deg": zefoz.min_ray_angle_deg,
                                  "degenerate_points": int(zefoz.degenerate.sum())})


def _run_model_id(args, config, writer):
    n = args.n if args.n is not None else args.ppm * config.ppm_density * args.abundance
    summary = {"g": args.g, "n_per_m3": n}
    if args.resonator is not None:
        fraction = excited_fraction(config.resonator(args.resonator).filter())
        n *= fraction
        summary.update({"excited_fraction": fraction, "n_excited_per_m3": n})
    summary["T2_s"] = id_t2(args.g, n, args.variant, args.theta, config.constants)
    writer.write_json("", summary)


def _run_model_id_profile(args, config, writer):
    resonator = config.resonator(args.resonator).filter()
    fields = np.linspace(args.center - args.span / 2, args.center + args.span / 2, args.points)
    t2 = id_t2_profile(_system(args, config), resonator, fields, args.center, args.g, args.variant,
                       config.constants)
    writer.write_csv("", ["B_T", "T2_s"], zip(fields, t2))


def _central_g(args, config) -> float:
    if args.g is not None:
        return args.g
    ham = SpinHamiltonian(_system(args, config), config.constants)
    candidates = [t for t in ham.transitions(args.field, threshold=0.0, with_gradients=True) if not math.isnan(t.g_eff)]
    if not candidates:
        raise ValueError(f"No transition of {args.system} with a defined g_eff at {args.field} T, give --g.")
    strongest = max(candidates, key=lambda t: t.matrix_element)
    logger.info(f"Central transition {strongest.lower}-{strongest.upper} at {strongest.frequency:.6g} Hz, "
                f"g_eff = {strongest.g_eff:.4f}")
    return strongest.g_eff


def _ensembles(args, config) -> List[SubEnsemble]:
    ensembles = [config.ensemble(name) for name in args.ensemble]
    bath = args.bath if args.bath is not None else ([] if args.ensemble else [args.system])
    for name in bath:
        ensembles.extend(bath_subensembles(config.system(name), args.field, args.linewidth, args.threshold,
                                           subsites=("a", "b"), constants=config.constants))
    if not ensembles:
        raise ValueError("No bath sub-ensemble: give --bath systems or --ensemble blocks.")
    logger.info(f"{len(ensembles)} bath sub-ensemble(s)")
    return ensembles


def _context(args, config) -> CentralSpinContext:
    return CentralSpinContext(g=_central_g(args, config), linewidth=args.linewidth, residual_rate=args.residual,
                              xi=args.xi)


def _run_model_sd_temp(args, config, writer):
    context = _context(args, config)
    ensembles = _ensembles(args, config)
    rows = []
    for temperature in np.geomspace(args.tmin, args.tmax, args.points):
        rate = temperature_model(context, ensembles, temperature, args.prefactor, config.constants)
        rows.append([temperature, rate, 1.0 / rate if rate > 0 else math.inf])
    writer.write_csv("", ["T_K", "rate_Hz", "T2_s"], rows)


def _run_model_sd_angle(args, config, writer):
    central = _base_system(args, config)
    sweep = angular_sweep(central, args.freq, _angles(args.start, args.stop, args.step), plane=args.plane,
                          misalignment_deg=args.misalignment, subsites=(args.subsite,), bracket=(0.0, args.bmax),
                          constants=config.constants)
    context = CentralSpinContext(g=1.0, linewidth=args.linewidth, residual_rate=args.residual, xi=args.xi)
    bath = [config.system(name) for name in args.bath]
    points = angular_t2_model(central, bath, context, args.temperature, sweep, args.subsite, args.threshold,
                              args.prefactor, selector=_optional_selector(args), constants=config.constants)
    rows = []
    for p in points:
        levels = [p.transition.lower, p.transition.upper] if p.transition is not None else [math.nan, math.nan]
        rows.append([p.angle_deg, *levels, p.field_magnitude, p.g_central, p.rate, p.t2])
    writer.write_csv("", ["angle_deg", "lower", "upper", "B_T", "g_central", "rate_Hz", "T2_s"], rows)


def _run_model_y89(args, config, writer):
    gamma_sd, rate, product = y89_bath(args.g, args.field_magnitude, args.temperature, args.n_y, config.constants)
    writer.write_json("", {"gamma_sd_Hz": gamma_sd, "R_Hz": rate, "product_Hz2": product,
                           "T2_s": 1.0 / t2_from_sd(product)[0]})


def _run_model_purcell(args, config, writer):
    t1 = purcell_t1(2 * math.pi * args.g0, 2 * math.pi * args.kappa)
    writer.write_json("", {"g0_Hz": args.g0, "kappa_Hz": args.kappa, "T1_s": t1})


def _run_model_bath_temp(args, config, writer):
    temperature = estimate_bath_temperature(_context(args, config), _ensembles(args, config), args.product,
                                            prefactor=args.prefactor, constants=config.constants)
    writer.write_json("", {"product_Hz2": args.product, "T_K": temperature})


def _fit_options(args) -> FitOptions:
    return FitOptions(n_starts=args.starts, seed=args.seed)


def _decay_trace(path: Path, x_name: str) -> DecayTrace:
    columns = read_csv_columns(path, [x_name, "amplitude_V"], ["sigma_V"])
    return DecayTrace(columns[x_name], columns["amplitude_V"], columns.get("sigma_V"))


def _stim_grid(args) -> StimEchoGrid:
    columns = read_csv_columns(args.data, ["tau_s", "tw_s", "amplitude_V"], ["sigma_V"])
    return StimEchoGrid(columns["tau_s"], columns["tw_s"], columns["amplitude_V"], args.t1, columns.get("sigma_V"))


def _run_fit_decay(args, config, writer):
    writer.write_json("", fit_decay_noise_floor(_decay_trace(args.data, "tau_s"), args.floor, _fit_options(args)))


def _run_fit_stim(args, config, writer):
    writer.write_json("", fit_stimulated(_stim_grid(args), args.gamma0, _fit_options(args)))


def _run_fit_covscan(args, config, writer):
    scan = covariance_scan(_stim_grid(args), np.geomspace(*args.gamma_sd_range[:2], int(args.gamma_sd_range[2])),
                           np.geomspace(*args.r_range[:2], int(args.r_range[2])), args.gamma0, args.r2_threshold,
                           _fit_options(args))
    writer.write_csv("", ["fixed", "fixed_value", "other_value", "A0_V", "r2", "product_Hz2"],
                     [[row.fixed_name, row.fixed_value, row.other_value, row.a0, row.r2, row.product]
                      for row in scan.rows])
    writer.write_json("summary", {"ridge_product_Hz2": scan.ridge_product, "ridge_spread": scan.ridge_spread,
                                  "ridge_rows": len(scan.ridge_rows()), "r2_threshold": scan.r2_threshold})


def _run_fit_t1(args, config, writer):
    writer.write_json("", fit_biexponential_t1(_decay_trace(args.data, "t_s"), _fit_options(args)))


def _run_fit_crossing(args, config, writer):
    columns = read_csv_columns(args.data, ["B_T", "f_Hz", "kappa_Hz"])
    df_dB = args.df_dB
    if df_dB is None and args.resonator is not None:
        df_dB = config.resonator(args.resonator).df_dB
    trace = CrossingTrace(columns["B_T"], columns["f_Hz"], columns["kappa_Hz"], df_dB)
    writer.write_json("", fit_avoided_crossing(trace, options=_fit_options(args)))


def _run_fit_fieldsweep(args, config, writer):
    columns = read_csv_columns(args.data, ["B_T", "amplitude_V"], ["sigma_V"])
    trace = FieldSweepTrace(columns["B_T"], columns["amplitude_V"], columns.get("sigma_V"))
    writer.write_json("", fit_field_sweep_gaussian(trace, args.fwhm, _fit_options(args)))


def _run_fit_eseem(args, config, writer):
    writer.write_json("", fit_eseem(_decay_trace(args.data, "tau_s"), args.field_magnitude, _fit_options(args),
                                    config.constants))


def _run_fit_sdtemp(args, config, writer):
    columns = read_csv_columns(args.data, ["T_K", "rate_Hz"], ["sigma_Hz"])
    trace = RateTrace(columns["T_K"], columns["rate_Hz"], columns.get("sigma_Hz"))
    result = fit_temperature_model(trace, _context(args, config), _ensembles(args, config), args.prefactor,
                                   _fit_options(args), config.constants)
    writer.write_json("", result)


def _trace_rows(x, amplitude, sigma) -> List[list]:
    if sigma is None:
        return [[a, b] for a, b in zip(x, amplitude)]
    return [[a, b, s] for a, b, s in zip(x, amplitude, sigma)]


def _write_trace(writer: RunWriter, x_name: str, x, amplitude, sigma) -> None:
    header = [x_name, "amplitude_V"] + ([] if sigma is None else ["sigma_V"])
    writer.write_csv("", header, _trace_rows(x, amplitude, sigma))


def _run_synth_decay(args, config, writer):
    trace = synth_decay(np.linspace(*args.tau[:2], int(args.tau[2])), args.a0, args.t2, args.floor, args.snr,
                        args.seed)
    _write_trace(writer, "tau_s", trace.tau, trace.amplitude, trace.sigma)


def _run_synth_stim(args, config, writer):
    grid = synth_stimulated(np.linspace(*args.tau[:2], int(args.tau[2])),
                            np.geomspace(*args.tw[:2], int(args.tw[2])), args.a0, args.r, args.gamma_sd, args.t1,
                            args.snr, args.seed, args.gamma0)
    header = ["tau_s", "tw_s", "amplitude_V"] + ([] if grid.sigma is None else ["sigma_V"])
    columns = [grid.tau, grid.tw, grid.amplitude] + ([] if grid.sigma is None else [grid.sigma])
    writer.write_csv("", header, zip(*columns))


def _run_synth_crossing(args, config, writer):
    fields = np.linspace(args.b0 - args.span / 2, args.b0 + args.span / 2, args.points)
    trace = synth_crossing(fields, args.f0, args.kappa0, args.g, args.gamma, args.b0, args.df_dB, args.snr, args.seed)
    writer.write_csv("", ["B_T", "f_Hz", "kappa_Hz"], zip(trace.field, trace.frequency, trace.kappa))


def _run_synth_eseem(args, config, writer):
    trace = synth_eseem(np.linspace(*args.tau[:2], int(args.tau[2])), args.a0, args.t2, args.depth,
                        args.field_magnitude, args.phase, args.snr, args.seed, config.constants)
    _write_trace(writer, "tau_s", trace.tau, trace.amplitude, trace.sigma)


def _run_synth_t1(args, config, writer):
    trace = synth_t1(np.geomspace(*args.t[:2], int(args.t[2])), args.a_fast, args.t1_fast, args.a_slow, args.t1_slow,
                     args.offset, args.snr, args.seed)
    _write_trace(writer, "t_s", trace.tau, trace.amplitude, trace.sigma)


def _run_synth_fieldsweep(args, config, writer):
    fields = np.linspace(args.center - args.span / 2, args.center + args.span / 2, args.points)
    trace = synth_fieldsweep(fields, args.amplitude, args.center, args.fwhm, args.background, args.snr, args.seed)
    _write_trace(writer, "B_T", trace.field, trace.amplitude, trace.sigma)


def _run_presets(args, config, writer):
    writer.write_text("", "ini", serialize_config(config))


def _add_system_args(parser: argparse.ArgumentParser, default: str = "Yb171_site2") -> None:
    parser.add_argument("--system", default=default, help="Name of a system block (default: %(default)s).")
    parser.add_argument("--subsite", choices=("a", "b"), default="a", help="Magnetic subsite (default: a).")
    parser.add_argument("--symmetrize", action="store_true", help="Use the symmetric parts of g and A.")


def _add_field_arg(parser: argparse.ArgumentParser, required: bool = False) -> None:
    parser.add_argument("--field", type=float, nargs=3, metavar=("B_D1", "B_D2", "B_b"), required=required,
                        default=None if required else [0.0, 0.0, 0.0], help="Static field components, T.")


def _add_sweep_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--freq", type=float, required=True, help="Target transition frequency, Hz.")
    parser.add_argument("--plane", choices=list(PLANES), default="D1D2")
    parser.add_argument("--bmax", type=float, default=1.5, help="Upper end of the field search, T.")
    parser.add_argument("--tol", type=float, default=1e3, help="Frequency tolerance of a root, Hz.")
    parser.add_argument("--threshold", type=float, default=0.05, help="Minimal drive matrix element.")


def _add_angle_range(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--start", type=float, default=-90.0, help="First angle, degrees.")
    parser.add_argument("--stop", type=float, default=90.0, help="Last angle, degrees.")
    parser.add_argument("--step", type=float, default=1.0, help="Angle step, degrees.")
    parser.add_argument("--misalignment", type=float, default=0.0, help="Tilt of the rotation plane, degrees.")


def _add_bath_args(parser: argparse.ArgumentParser, default_system: str = "Nd145_YSO") -> None:
    _add_system_args(parser, default_system)
    _add_field_arg(parser, required=True)
    parser.add_argument("--g", type=float, default=None,
                        help="Central g-factor, the strongest transition of --system at --field if omitted.")
    parser.add_argument("--bath", nargs="+", default=None,
                        help="Bath systems split into sub-ensembles at --field (default: the central system).")
    parser.add_argument("--ensemble", nargs="+", default=[], help="Extra sub-ensemble blocks of the configuration.")
    parser.add_argument("--linewidth", type=float, default=3e6, help="Linewidth of central and bath spins, Hz.")
    parser.add_argument("--xi", type=float, default=1.0, help="Coupling fit parameter.")
    parser.add_argument("--residual", type=float, default=0.0, help="Residual decoherence rate, Hz.")
    parser.add_argument("--threshold", type=float, default=0.05, help="Minimal drive matrix element of the bath.")
    parser.add_argument("--prefactor", choices=("composed", "printed"), default="composed")


def _add_fit_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("data", type=Path, help="Input csv file.")
    parser.add_argument("--starts", type=int, default=0, help="Random extra starting points, needs --seed.")
    parser.add_argument("--seed", type=int, default=None)


def _add_selector_args(parser: argparse.ArgumentParser, near_help: str) -> None:
    parser.add_argument("--near", type=float, default=None, help=near_help)
    parser.add_argument("--lower", type=int, default=None)
    parser.add_argument("--upper", type=int, default=None)


def _add_synth_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="Noise seed, mandatory.")
    parser.add_argument("--snr", type=float, default=100.0, help="Signal to noise ratio, inf for no noise.")


def _init_structure_parsers(commands) -> None:
    levels = commands.add_parser("levels", help="Energy levels at a field.")
    _add_system_args(levels)
    _add_field_arg(levels)
    levels.set_defaults(handler=_run_levels)

    transitions = commands.add_parser("transitions", help="Transitions, matrix elements and gradients at a field.")
    _add_system_args(transitions)
    _add_field_arg(transitions)
    transitions.add_argument("--b1", type=float, nargs=3, default=None, help="Microwave field direction.")
    transitions.add_argument("--threshold", type=float, default=1e-6, help="Minimal drive matrix element.")
    transitions.add_argument("--gradients", action="store_true", help="Also compute df/dB and g_eff.")
    transitions.set_defaults(handler=_run_transitions)

    resonance = commands.add_parser("resonance", help="Resonance fields along a direction, or the peak over a plane.")
    _add_system_args(resonance)
    _add_sweep_args(resonance)
    resonance.add_argument("--direction", type=float, nargs=3, default=None, help="Field direction.")
    resonance.add_argument("--angle", type=float, default=None, help="In-plane angle of the field, degrees.")
    resonance.add_argument("--tilt", type=float, default=0.0, help="Tilt towards the plane normal, degrees.")
    resonance.add_argument("--step", type=float, default=1.0, help="Angle step of the plane sweep, degrees.")
    resonance.add_argument("--subsites", nargs="+", choices=("a", "b"), default=["a", "b"])
    resonance.set_defaults(handler=_run_resonance)

    sweep = commands.add_parser("sweep-angle", help="Resonance fields against the in-plane angle.")
    _add_system_args(sweep)
    _add_sweep_args(sweep)
    _add_angle_range(sweep)
    sweep.add_argument("--subsites", nargs="+", choices=("a", "b"), default=["a", "b"])
    sweep.set_defaults(handler=_run_sweep_angle)

    zefoz = commands.add_parser("zefoz", help="Frequency gradient map around zero field.")
    _add_system_args(zefoz)
    zefoz.add_argument("--plane", choices=list(PLANES), default="D1D2")
    zefoz.add_argument("--bmax", type=float, default=5e-3, help="Half-width of the map, T.")
    zefoz.add_argument("--grid", type=int, default=41, help="Points per axis.")
    _add_selector_args(zefoz, "Select the transition nearest this frequency at B=0.")
    zefoz.set_defaults(handler=_run_zefoz)


def _init_model_parsers(commands) -> None:
    model = commands.add_parser("model", help="Closed-form decoherence models.").add_subparsers(
        dest="model", required=True)

    id_parser = model.add_parser("id", help="Instantaneous diffusion limited T2.")
    id_parser.add_argument("--g", type=float, required=True)
    density = id_parser.add_mutually_exclusive_group(required=True)
    density.add_argument("--n", type=float, help="Resonant spin density, m^-3.")
    density.add_argument("--ppm", type=float, help="Concentration, ppm of the Y sites.")
    id_parser.add_argument("--abundance", type=float, default=1.0, help="Isotope abundance, with --ppm.")
    id_parser.add_argument("--resonator", default=None, help="Resonator block filtering the excited spins.")
    id_parser.add_argument("--variant", choices=("main", "si"), default="main")
    id_parser.add_argument("--theta", type=float, default=math.pi, help="Refocusing angle, rad.")
    id_parser.set_defaults(handler=_run_model_id)

    profile = model.add_parser("id-profile", help="Instantaneous diffusion T2 across a spin line.")
    _add_system_args(profile)
    profile.add_argument("--resonator", required=True)
    profile.add_argument("--center", type=float, required=True, help="Line center field, T.")
    profile.add_argument("--span", type=float, default=2e-3, help="Swept field range, T.")
    profile.add_argument("--points", type=int, default=101)
    profile.add_argument("--g", type=float, default=None)
    profile.add_argument("--variant", choices=("main", "si"), default="main")
    profile.set_defaults(handler=_run_model_id_profile)

    sd_temp = model.add_parser("sd-temp", help="Decoherence rate against temperature.")
    _add_bath_args(sd_temp)
    sd_temp.add_argument("--tmin", type=float, default=0.014)
    sd_temp.add_argument("--tmax", type=float, default=1.2)
    sd_temp.add_argument("--points", type=int, default=50)
    sd_temp.set_defaults(handler=_run_model_sd_temp)

    sd_angle = model.add_parser("sd-angle", help="Decoherence rate against the field angle.")
    _add_system_args(sd_angle)
    _add_angle_range(sd_angle)
    sd_angle.add_argument("--freq", type=float, default=2.43e9)
    sd_angle.add_argument("--plane", choices=list(PLANES), default="D1D2")
    sd_angle.add_argument("--bmax", type=float, default=1.5)
    sd_angle.add_argument("--bath", nargs="+", default=DEFAULT_BATH)
    sd_angle.add_argument("--temperature", type=float, default=0.014)
    sd_angle.add_argument("--linewidth", type=float, default=8.7e6)
    sd_angle.add_argument("--xi", type=float, default=1.0)
    sd_angle.add_argument("--residual", type=float, default=0.0)
    sd_angle.add_argument("--threshold", type=float, default=0.05)
    sd_angle.add_argument("--prefactor", choices=("composed", "printed"), default="composed")
    _add_selector_args(sd_angle, "Follow the transition nearest this frequency at B=0. Without a selection the "
                                 "strongest resonance of each angle is used.")
    sd_angle.set_defaults(handler=_run_model_sd_angle)

    y89 = model.add_parser("y89", help="Spectral diffusion from the 89Y nuclear bath.")
    y89.add_argument("--g", type=float, required=True)
    y89.add_argument("--field", dest="field_magnitude", type=float, required=True, help="Field magnitude, T.")
    y89.add_argument("--temperature", type=float, required=True)
    y89.add_argument("--n-y", type=float, default=DEFAULT_Y_DENSITY)
    y89.set_defaults(handler=_run_model_y89)

    purcell = model.add_parser("purcell", help="Purcell-limited T1.")
    purcell.add_argument("--g0", type=float, required=True, help="Single spin coupling, Hz.")
    purcell.add_argument("--kappa", type=float, required=True, help="Resonator half-width, Hz.")
    purcell.set_defaults(handler=_run_model_purcell)

    bath_temp = model.add_parser("bath-temp", help="Bath temperature reproducing a measured R Gamma_SD.")
    _add_bath_args(bath_temp)
    bath_temp.add_argument("--product", type=float, required=True, help="Measured R Gamma_SD, Hz^2.")
    bath_temp.set_defaults(handler=_run_model_bath_temp)


def _init_fit_parsers(commands) -> None:
    fit = commands.add_parser("fit", help="Fit measurement models to csv data.").add_subparsers(
        dest="fit", required=True)

    decay = fit.add_parser("decay", help="Hahn echo decay over a noise floor (tau_s, amplitude_V).")
    _add_fit_args(decay)
    decay.add_argument("--floor", type=float, default=None, help="Fixed noise floor, V.")
    decay.set_defaults(handler=_run_fit_decay)

    for name, help_text, handler in (("stim", "Stimulated echo grid (tau_s, tw_s, amplitude_V).", _run_fit_stim),
                                     ("covscan", "R / Gamma_SD covariance scan.", _run_fit_covscan)):
        stim = fit.add_parser(name, help=help_text)
        _add_fit_args(stim)
        stim.add_argument("--t1", type=float, required=True, help="Separately measured T1, s.")
        stim.add_argument("--gamma0", type=float, default=0.0, help="Residual decoherence rate, Hz.")
        stim.set_defaults(handler=handler)
        if name == "covscan":
            stim.add_argument("--gamma-sd-range", type=float, nargs=3, default=[1e3, 1e6, 31],
                              metavar=("MIN", "MAX", "N"))
            stim.add_argument("--r-range", type=float, nargs=3, default=[0.1, 100.0, 31], metavar=("MIN", "MAX", "N"))
            stim.add_argument("--r2-threshold", type=float, default=0.99)

    t1 = fit.add_parser("t1", help="Biexponential inversion recovery (t_s, amplitude_V).")
    _add_fit_args(t1)
    t1.set_defaults(handler=_run_fit_t1)

    crossing = fit.add_parser("crossing", help="Avoided crossing (B_T, f_Hz, kappa_Hz).")
    _add_fit_args(crossing)
    crossing.add_argument("--df-dB", dest="df_dB", type=float, default=None, help="Spin transition slope, Hz/T.")
    crossing.add_argument("--resonator", default=None, help="Take df/dB from a resonator block.")
    crossing.set_defaults(handler=_run_fit_crossing)

    fieldsweep = fit.add_parser("fieldsweep", help="Gaussian over background (B_T, amplitude_V).")
    _add_fit_args(fieldsweep)
    fieldsweep.add_argument("--fwhm", type=float, default=None, help="Fixed field FWHM, T.")
    fieldsweep.set_defaults(handler=_run_fit_fieldsweep)

    eseem = fit.add_parser("eseem", help="89Y modulated decay (tau_s, amplitude_V).")
    _add_fit_args(eseem)
    eseem.add_argument("--field", dest="field_magnitude", type=float, required=True, help="Field magnitude, T.")
    eseem.set_defaults(handler=_run_fit_eseem)

    sdtemp = fit.add_parser("sdtemp", help="xi and residual rate from rates against temperature (T_K, rate_Hz).")
    _add_fit_args(sdtemp)
    _add_bath_args(sdtemp)
    sdtemp.set_defaults(handler=_run_fit_sdtemp)


def _init_synth_parsers(commands) -> None:
    synth = commands.add_parser("synth", help="Seeded synthetic data.").add_subparsers(dest="synth", required=True)

    decay = synth.add_parser("decay")
    _add_synth_args(decay)
    decay.add_argument("--tau", type=float, nargs=3, default=[2e-6, 5e-3, 60], metavar=("MIN", "MAX", "N"))
    decay.add_argument("--a0", type=float, default=1.0)
    decay.add_argument("--t2", type=float, default=1e-3)
    decay.add_argument("--floor", type=float, default=0.01)
    decay.set_defaults(handler=_run_synth_decay)

    stim = synth.add_parser("stim")
    _add_synth_args(stim)
    stim.add_argument("--tau", type=float, nargs=3, default=[10e-6, 100e-6, 10], metavar=("MIN", "MAX", "N"))
    stim.add_argument("--tw", type=float, nargs=3, default=[1e-4, 0.1, 10], metavar=("MIN", "MAX", "N"))
    stim.add_argument("--a0", type=float, default=1.0)
    stim.add_argument("--r", type=float, default=3.6)
    stim.add_argument("--gamma-sd", type=float, default=3.6e4)
    stim.add_argument("--t1", type=float, default=0.047)
    stim.add_argument("--gamma0", type=float, default=0.0)
    stim.set_defaults(handler=_run_synth_stim)

    crossing = synth.add_parser("crossing")
    _add_synth_args(crossing)
    crossing.add_argument("--f0", type=float, default=8.07e9)
    crossing.add_argument("--kappa0", type=float, default=0.5e6)
    crossing.add_argument("--g", type=float, default=19.2e6)
    crossing.add_argument("--gamma", type=float, default=3e6)
    crossing.add_argument("--b0", type=float, default=0.326)
    crossing.add_argument("--df-dB", dest="df_dB", type=float, default=2.4754601226993866e10)
    crossing.add_argument("--span", type=float, default=10e-3)
    crossing.add_argument("--points", type=int, default=201)
    crossing.set_defaults(handler=_run_synth_crossing)

    eseem = synth.add_parser("eseem")
    _add_synth_args(eseem)
    eseem.add_argument("--tau", type=float, nargs=3, default=[1e-6, 50e-6, 200], metavar=("MIN", "MAX", "N"))
    eseem.add_argument("--a0", type=float, default=1.0)
    eseem.add_argument("--t2", type=float, default=1e-4)
    eseem.add_argument("--depth", type=float, default=0.3)
    eseem.add_argument("--field", dest="field_magnitude", type=float, default=0.37)
    eseem.add_argument("--phase", type=float, default=0.0)
    eseem.set_defaults(handler=_run_synth_eseem)

    t1 = synth.add_parser("t1")
    _add_synth_args(t1)
    t1.add_argument("--t", type=float, nargs=3, default=[1e-4, 3.0, 80], metavar=("MIN", "MAX", "N"))
    t1.add_argument("--a-fast", type=float, default=-0.6)
    t1.add_argument("--t1-fast", type=float, default=0.01)
    t1.add_argument("--a-slow", type=float, default=-0.8)
    t1.add_argument("--t1-slow", type=float, default=0.5)
    t1.add_argument("--offset", type=float, default=1.0)
    t1.set_defaults(handler=_run_synth_t1)

    fieldsweep = synth.add_parser("fieldsweep")
    _add_synth_args(fieldsweep)
    fieldsweep.add_argument("--amplitude", type=float, default=2.0)
    fieldsweep.add_argument("--center", type=float, default=0.326)
    fieldsweep.add_argument("--fwhm", type=float, default=0.97e-3)
    fieldsweep.add_argument("--background", type=float, default=0.76)
    fieldsweep.add_argument("--span", type=float, default=10e-3)
    fieldsweep.add_argument("--points", type=int, default=201)
    fieldsweep.set_defaults(handler=_run_synth_fieldsweep)


class SpinBathArgumentParser(argparse.ArgumentParser):
    """
    Argument parser raising InvalidArgumentsError instead of printing the usage and exiting, so that bad arguments
    end in the same error object as every other failure. Subcommand parsers inherit the class.
    """

    def error(self, message: str):
        raise InvalidArgumentsError(f"{self.prog}: {message}", usage=self.format_usage().strip())


def init_argparse() -> argparse.ArgumentParser:
    arg_parser = SpinBathArgumentParser(
        prog="spinbath",
        description="Spin Hamiltonian spectroscopy, decoherence models and measurement fits for rare-earth spins in "
                    "Y2SiO5. Every run writes its artifacts and a manifest.json into the output directory."
    )
    arg_parser.add_argument("-c", "--config", type=Path, default=None,
                            help="INI file with system, ensemble and resonator blocks, on top of the presets.")
    arg_parser.add_argument("-o", "--out", type=Path, default=DEFAULT_WORKING_DIR, help="Output directory.")
    verbosity = arg_parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    commands = arg_parser.add_subparsers(dest="command", required=True)
    _init_structure_parsers(commands)
    _init_model_parsers(commands)
    _init_fit_parsers(commands)
    _init_synth_parsers(commands)
    rerun = commands.add_parser("rerun", help="Repeat the run stored in a manifest.json.")
    rerun.add_argument("manifest", type=Path)
    presets = commands.add_parser("presets", help="Write the resolved configuration as INI.")
    presets.set_defaults(handler=_run_presets)
    return arg_parser


def _command_name(args: argparse.Namespace) -> str:
    parts = [args.command] + [getattr(args, group) for group in ("model", "fit", "synth") if getattr(args, group, None)]
    return " ".join(parts)


def _execute(arg_parser: argparse.ArgumentParser, argv: Sequence[str], config: SystemConfig, out: Path) -> Path:
    args = arg_parser.parse_args(argv)
    if args.command == "rerun":
        raise ValueError("A manifest cannot point to another rerun.")
    started = time.perf_counter()
    writer = RunWriter(_command_name(args), out)
    args.handler(args, config, writer)
    manifest = RunManifest(argv=list(argv), config_text=serialize_config(config), seed=getattr(args, "seed", None),
                           wall_time_s=time.perf_counter() - started)
    return writer.write_manifest(manifest)


def _report(record: dict) -> int:
    print(jsonpickle.dumps(record, unpicklable=False, keys=False))
    return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    arg_parser = init_argparse()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = arg_parser.parse_args(argv)
        if args.verbose:
            set_log_level(logging.DEBUG)
        elif args.quiet:
            set_log_level(logging.WARNING)
        if args.command == "rerun":
            manifest = load_manifest(args.manifest)
            logger.info(f"Repeating '{' '.join(manifest.argv)}' from {args.manifest}")
            config = parse_config_text(manifest.config_text, source=str(args.manifest))
            # the stored global flags are superseded by the ones of this invocation
            _execute(arg_parser, manifest.argv, config, args.out)
        else:
            _execute(arg_parser, argv, parse_config(args.config), args.out)
    except (SpinBathError, ValueError, OSError) as e:
        record = e.to_record() if isinstance(e, SpinBathError) else {
            "error": "invalid_input" if isinstance(e, ValueError) else "io_error", "message": str(e), "details": {}}
        logger.error(record["message"])
        return _report(record)
    except Exception as e:
        logger.exception(f"Unexpected {type(e).__name__}")
        return _report({"error": "internal_error", "message": f"{type(e).__name__}: {e}",
                        "details": {"type": type(e).__name__}})
    return 0


if __name__ == '__main__':
    sys.exit(main())
