"""
INI configuration of spin systems, bath sub-ensembles, resonators and physical constants.

Blocks are sections named "system NAME", "ensemble NAME", "resonator NAME" and a single "constants" section.
Matrices are written row by row, rows separated by ";". Built-in presets are always available and a user file may
override them by name.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields as dataclass_fields
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, Optional, Union

import numpy as np

from . import PPM_DENSITY
from .errors import ConfigError
from .model import DEFAULT_CONSTANTS, PhysicalConstants, ResonatorFilter, SpinSystem, SubEnsemble
from .utils import get_logger

logger = get_logger("config")

CONFIG_ENV_VAR = "SPINBATH_CONFIG"
PRESETS_FILE = "presets.ini"

SYSTEM_KEYS = {"S", "I", "g", "A", "gN", "include_nuclear_zeeman", "site", "concentration", "concentration_ppm",
               "abundance"}
ENSEMBLE_KEYS = {"n", "concentration_ppm", "linewidth", "matrix_element", "frequency", "g_eff"}
RESONATOR_KEYS = {"f0", "kappa0", "Q", "pulse_length", "line_fwhm", "df_dB"}
CONSTANT_KEYS = {f.name for f in dataclass_fields(PhysicalConstants)} | {"ppm_density"}


@dataclass(frozen=True)
class ResonatorSpec:
    """
    A resonator: frequency f0 (Hz), bare half-width kappa0 (Hz), pulse length (s), spin line FWHM (Hz) and the
    slope of the spin transition df/dB (Hz/T)
    """
    f0: float
    kappa0: float
    pulse_length: float
    line_fwhm: float
    df_dB: float

    def filter(self) -> ResonatorFilter:
        return ResonatorFilter(f0=self.f0, pulse_length=self.pulse_length, line_fwhm=self.line_fwhm,
                               df_dB=self.df_dB)


@dataclass
class SystemConfig:
    systems: Dict[str, SpinSystem] = field(default_factory=dict)
    ensembles: Dict[str, SubEnsemble] = field(default_factory=dict)
    resonators: Dict[str, ResonatorSpec] = field(default_factory=dict)
    constants: PhysicalConstants = DEFAULT_CONSTANTS
    ppm_density: float = PPM_DENSITY

    def system(self, name: str) -> SpinSystem:
        return _lookup(self.systems, name, "system")

    def ensemble(self, name: str) -> SubEnsemble:
        return _lookup(self.ensembles, name, "ensemble")

    def resonator(self, name: str) -> ResonatorSpec:
        return _lookup(self.resonators, name, "resonator")

    def merged_with(self, other: SystemConfig, other_has_constants: bool) -> SystemConfig:
        """
        Blocks of other replace blocks of the same name
        """
        for kind, mine, theirs in (("system", self.systems, other.systems), ("ensemble", self.ensembles,
                                                                             other.ensembles),
                                   ("resonator", self.resonators, other.resonators)):
            for name in set(mine) & set(theirs):
                logger.info(f"User {kind} '{name}' overrides the built-in one.")
        return SystemConfig(systems={**self.systems, **other.systems}, ensembles={**self.ensembles, **other.ensembles},
                            resonators={**self.resonators, **other.resonators},
                            constants=other.constants if other_has_constants else self.constants,
                            ppm_density=other.ppm_density if other_has_constants else self.ppm_density)


def _lookup(blocks: Dict, name: str, kind: str):
    if name not in blocks:
        raise ConfigError(f"Unknown {kind} '{name}'. Available: {sorted(blocks)}.", field_path=f"{kind} {name}")
    return blocks[name]


def parse_matrix(text: str) -> np.ndarray:
    rows = [row.split() for row in text.strip().split(";")]
    matrix = np.array([[float(v) for v in row] for row in rows])
    if matrix.shape != (3, 3):
        raise ValueError(f"expected 3 rows of 3 numbers, got {[len(row) for row in rows]}")
    return matrix


def format_matrix(matrix) -> str:
    return "; ".join(" ".join(repr(float(v)) for v in row) for row in matrix)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
        raise ValueError(f"not a boolean: {text!r}")
    return configparser.ConfigParser.BOOLEAN_STATES[lowered]


def _value(section: configparser.SectionProxy, key: str, parse: Callable = float, default=None):
    path = f"{section.name}.{key}"
    if key not in section:
        if default is None:
            raise ConfigError("missing required key", field_path=path)
        return default
    try:
        return parse(section[key])
    except ValueError as e:
        raise ConfigError(f"invalid value {section[key]!r} ({e})", field_path=path)


def _check_keys(section: configparser.SectionProxy, allowed) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key, allowed keys are {sorted(allowed)}", field_path=f"{section.name}.{key}")


def _parse_constants(section: configparser.SectionProxy) -> (PhysicalConstants, float):
    _check_keys(section, CONSTANT_KEYS)
    overrides = {key: _value(section, key) for key in section if key != "ppm_density"}
    ppm_density = _value(section, "ppm_density", default=PPM_DENSITY)
    try:
        return DEFAULT_CONSTANTS.with_overrides(**overrides), ppm_density
    except ValueError as e:
        raise ConfigError(str(e), field_path=section.name)


def _density(section: configparser.SectionProxy, key: str, ppm_density: float) -> float:
    if key in section and "concentration_ppm" in section:
        raise ConfigError(f"give either {key} or concentration_ppm", field_path=section.name)
    if "concentration_ppm" in section:
        return _value(section, "concentration_ppm") * ppm_density
    return _value(section, key, default=0.0)


def _parse_system(name: str, section: configparser.SectionProxy, ppm_density: float) -> SpinSystem:
    _check_keys(section, SYSTEM_KEYS)
    try:
        return SpinSystem(label=name, S=_value(section, "S", default=0.5), I=_value(section, "I", default=0.0),
                          g_tensor=_value(section, "g", parse_matrix),
                          A_tensor=_value(section, "A", parse_matrix, default=np.zeros((3, 3))),
                          g_n=_value(section, "gN", default=0.0),
                          include_nuclear_zeeman=_value(section, "include_nuclear_zeeman", _parse_bool, default=False),
                          concentration=_density(section, "concentration", ppm_density),
                          abundance=_value(section, "abundance", default=1.0),
                          site=_value(section, "site", int, default=1))
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e), field_path=section.name)


def _parse_ensemble(name: str, section: configparser.SectionProxy, ppm_density: float) -> SubEnsemble:
    _check_keys(section, ENSEMBLE_KEYS)
    try:
        return SubEnsemble(n=_density(section, "n", ppm_density), linewidth=_value(section, "linewidth"),
                           matrix_element=_value(section, "matrix_element"), frequency=_value(section, "frequency"),
                           g_eff=_value(section, "g_eff"), label=name)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e), field_path=section.name)


def _parse_resonator(section: configparser.SectionProxy) -> ResonatorSpec:
    _check_keys(section, RESONATOR_KEYS)
    f0 = _value(section, "f0")
    if ("Q" in section) == ("kappa0" in section):
        raise ConfigError("give exactly one of Q and kappa0", field_path=section.name)
    kappa0 = f0 / (2 * _value(section, "Q")) if "Q" in section else _value(section, "kappa0")
    spec = ResonatorSpec(f0=f0, kappa0=kappa0, pulse_length=_value(section, "pulse_length"),
                         line_fwhm=_value(section, "line_fwhm"), df_dB=_value(section, "df_dB"))
    try:
        spec.filter()
    except ValueError as e:
        raise ConfigError(str(e), field_path=section.name)
    if not (f0 > 0 and kappa0 > 0):
        raise ConfigError("f0 and the half-width must be > 0", field_path=section.name)
    return spec


def _read_parser(text: str, source: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(strict=True, interpolation=None)
    # keys are case sensitive: S and I, A and g
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"{source}: content before the first [section]", line=e.lineno)
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as e:
        raise ConfigError(f"{source}: {e.message}", line=e.lineno)
    except configparser.ParsingError as e:
        line, content = e.errors[0]
        raise ConfigError(f"{source}: cannot parse {content!r}", line=line)
    return parser


def parse_config_text(text: str, source: str = "<string>") -> SystemConfig:
    """
    Parses configuration text, without the built-in presets
    """
    if not text.strip():
        raise ConfigError(f"{source}: the configuration is empty.")
    parser = _read_parser(text, source)
    config = SystemConfig()
    if parser.has_section("constants"):
        config.constants, config.ppm_density = _parse_constants(parser["constants"])
    for section_name in parser.sections():
        kind, _, name = section_name.partition(" ")
        name = name.strip()
        if kind == "constants" and not name:
            continue
        if not name or kind not in ("system", "ensemble", "resonator"):
            raise ConfigError("unknown block, expected 'system NAME', 'ensemble NAME', 'resonator NAME' or "
                              "'constants'", field_path=section_name)
        section = parser[section_name]
        if kind == "system":
            config.systems[name] = _parse_system(name, section, config.ppm_density)
        elif kind == "ensemble":
            config.ensembles[name] = _parse_ensemble(name, section, config.ppm_density)
        else:
            config.resonators[name] = _parse_resonator(section)
    return config


def load_presets() -> SystemConfig:
    text = resources.files("spinbath.resources").joinpath(PRESETS_FILE).read_text(encoding="utf-8")
    return parse_config_text(text, source=PRESETS_FILE)


def parse_config(path: Optional[Union[str, Path]] = None, include_presets: bool = True) -> SystemConfig:
    """
    Loads a configuration file on top of the built-in presets
    :param path: the INI file, SPINBATH_CONFIG if omitted, presets only when neither is set
    :param include_presets: whether the built-in presets are loaded first
    :return: the validated configuration
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    base = load_presets() if include_presets else SystemConfig()
    if path is None:
        return base
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Configuration file {path} does not exist.")
    text = path.read_text(encoding="utf-8")
    user = parse_config_text(text, source=str(path))
    has_constants = _read_parser(text, str(path)).has_section("constants")
    logger.info(f"Loaded {len(user.systems)} system(s), {len(user.ensembles)} ensemble(s) and "
                f"{len(user.resonators)} resonator(s) from {path}")
    return base.merged_with(user, has_constants)


def serialize_config(config: SystemConfig) -> str:
    """
    Writes a configuration as INI text that parses back to an equal configuration
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    constants = {f.name: repr(getattr(config.constants, f.name)) for f in dataclass_fields(PhysicalConstants)}
    constants["ppm_density"] = repr(config.ppm_density)
    parser["constants"] = constants
    for name, system in config.systems.items():
        parser[f"system {name}"] = {
            "S": repr(system.S), "I": repr(system.I), "g": format_matrix(system.g_tensor),
            "A": format_matrix(system.A_tensor), "gN": repr(system.g_n),
            "include_nuclear_zeeman": str(system.include_nuclear_zeeman).lower(), "site": str(system.site),
            "concentration": repr(system.concentration), "abundance": repr(system.abundance),
        }
    for name, ensemble in config.ensembles.items():
        parser[f"ensemble {name}"] = {
            "n": repr(ensemble.n), "linewidth": repr(ensemble.linewidth),
            "matrix_element": repr(ensemble.matrix_element), "frequency": repr(ensemble.frequency),
            "g_eff": repr(ensemble.g_eff),
        }
    for name, resonator in config.resonators.items():
        parser[f"resonator {name}"] = {
            "f0": repr(resonator.f0), "kappa0": repr(resonator.kappa0), "pulse_length": repr(resonator.pulse_length),
            "line_fwhm": repr(resonator.line_fwhm), "df_dB": repr(resonator.df_dB),
        }
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in parser[section].items())
        lines.append("")
    return "\n".join(lines)
