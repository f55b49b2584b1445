"""
Contains data classes definitions
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import constants as sc

Matrix3 = Tuple[Tuple[float, float, float], Tuple[float, float, float], Tuple[float, float, float]]
Vector3 = Tuple[float, float, float]

# plane name -> (first in-plane axis, second in-plane axis, normal axis), frame (D1, D2, b)
PLANES: Dict[str, Tuple[int, int, int]] = {
    "D1D2": (0, 1, 2),
    "D1b": (0, 2, 1),
    "D2b": (1, 2, 0),
}


def _as_matrix3(values, name: str) -> Matrix3:
    array = np.asarray(values, dtype=float)
    if array.shape != (3, 3):
        raise ValueError(f"{name} must be a 3x3 matrix, got shape {array.shape}.")
    return tuple(tuple(float(v) for v in row) for row in array)


def _as_vector3(values, name: str) -> Vector3:
    array = np.asarray(values, dtype=float).reshape(-1)
    if array.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got {array.shape[0]}.")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} has non-finite components: {array}.")
    return tuple(float(v) for v in array)


@dataclass(frozen=True)
class PhysicalConstants:
    """
    SI constants used by every model. Gyromagnetic ratios are magnitudes in Hz/T.
    """
    h: float = sc.h
    hbar: float = sc.hbar
    mu_B: float = sc.physical_constants["Bohr magneton"][0]
    mu_0: float = sc.mu_0
    k_B: float = sc.k
    mu_N: float = sc.physical_constants["nuclear magneton"][0]
    gamma_Y89: float = 2.0949e6

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"Physical constant {name} must be strictly positive, got {value}.")
        if abs(self.hbar - self.h / (2 * math.pi)) > 1e-12 * self.hbar:
            raise ValueError(f"hbar ({self.hbar}) must equal h/2pi ({self.h / (2 * math.pi)}).")

    def with_overrides(self, **overrides: float) -> PhysicalConstants:
        """
        Returns a copy with some constants replaced. hbar follows h unless given explicitly.
        """
        if "h" in overrides and "hbar" not in overrides:
            overrides["hbar"] = overrides["h"] / (2 * math.pi)
        return replace(self, **overrides)


DEFAULT_CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class SpinSystem:
    """
    Electron-nuclear spin system in the (D1, D2, b) frame. The hyperfine tensor is in MHz, the concentration in
    spins/m^3 and refers to the crystallographic site the system lives in.
    """
    label: str
    S: float
    I: float
    g_tensor: Matrix3
    A_tensor: Matrix3 = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    g_n: float = 0.0
    include_nuclear_zeeman: bool = False
    concentration: float = 0.0
    abundance: float = 1.0
    site: int = 1

    def __post_init__(self):
        object.__setattr__(self, "g_tensor", _as_matrix3(self.g_tensor, f"{self.label}.g"))
        object.__setattr__(self, "A_tensor", _as_matrix3(self.A_tensor, f"{self.label}.A"))
        if self.I < 0 or not float(2 * self.I).is_integer():
            raise ValueError(f"{self.label}: nuclear spin must be a non-negative half-integer, got {self.I}.")
        if not self.concentration >= 0:
            raise ValueError(f"{self.label}: concentration must be >= 0, got {self.concentration}.")
        if not 0 <= self.abundance <= 1:
            raise ValueError(f"{self.label}: abundance must be within [0, 1], got {self.abundance}.")
        if self.site not in (1, 2):
            raise ValueError(f"{self.label}: site must be 1 or 2, got {self.site}.")

    @property
    def g(self) -> np.ndarray:
        return np.array(self.g_tensor)

    @property
    def A(self) -> np.ndarray:
        return np.array(self.A_tensor)

    @property
    def dimension(self) -> int:
        return int(round((2 * self.S + 1) * (2 * self.I + 1)))

    @property
    def resonant_density(self) -> float:
        """
        Density of spins of this isotope on this site, spins/m^3
        """
        return self.concentration * self.abundance

    def with_tensors(self, g=None, A=None, label: Optional[str] = None) -> SpinSystem:
        return replace(self, g_tensor=self.g_tensor if g is None else g,
                       A_tensor=self.A_tensor if A is None else A,
                       label=self.label if label is None else label)


@dataclass(frozen=True)
class FieldVector:
    """
    Static magnetic field in tesla, components along (D1, D2, b)
    """
    d1: float = 0.0
    d2: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        _as_vector3((self.d1, self.d2, self.b), "FieldVector")

    @classmethod
    def of(cls, value: FieldLike) -> FieldVector:
        if isinstance(value, FieldVector):
            return value
        return cls(*_as_vector3(value, "FieldVector"))

    @classmethod
    def in_plane(cls, magnitude: float, angle_deg: float, plane: str = "D1D2", tilt_deg: float = 0.0) -> FieldVector:
        """
        Field along a direction given by an angle within a plane, measured from the plane's first axis, optionally
        tilted by tilt_deg towards the plane normal
        """
        return cls(*(magnitude * plane_direction(angle_deg, plane, tilt_deg)))

    @property
    def array(self) -> np.ndarray:
        return np.array([self.d1, self.d2, self.b])

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.array))


FieldLike = Union[FieldVector, Sequence[float], np.ndarray]


def plane_direction(angle_deg: float, plane: str = "D1D2", tilt_deg: float = 0.0) -> np.ndarray:
    """
    Unit vector at angle_deg from the first axis of the plane, tilted by tilt_deg towards the plane normal
    """
    if plane not in PLANES:
        raise ValueError(f"Unknown plane '{plane}'. Known planes: {list(PLANES)}.")
    first, second, normal = PLANES[plane]
    theta = math.radians(angle_deg)
    alpha = math.radians(tilt_deg)
    direction = np.zeros(3)
    direction[first] = math.cos(theta) * math.cos(alpha)
    direction[second] = math.sin(theta) * math.cos(alpha)
    direction[normal] = math.sin(alpha)
    return direction


class LevelSet(object):
    """
    Eigenlevels of a spin Hamiltonian: ascending energies in Hz and eigenvectors as columns of `states`
    """

    def __init__(self, energies: np.ndarray, states: np.ndarray):
        self.energies: np.ndarray = energies
        self.states: np.ndarray = states

    def __len__(self) -> int:
        return len(self.energies)

    def __str__(self) -> str:
        return str({"energies_Hz": self.energies.tolist()})


@dataclass(frozen=True)
class Transition:
    """
    Transition between two eigenlevels, indices refer to the ascending energy order
    """
    lower: int
    upper: int
    frequency: float
    matrix_element: float
    gradient: Optional[Vector3] = None
    g_eff: float = math.nan

    @property
    def gradient_norm(self) -> float:
        if self.gradient is None:
            return math.nan
        return float(np.linalg.norm(self.gradient))


@dataclass(frozen=True)
class ResonanceSolution:
    """
    A field magnitude along `direction` at which a transition matches the target frequency
    """
    direction: Vector3
    field_magnitude: float
    transition: Transition
    residual: float
    min_overlap: float = 1.0

    @property
    def field(self) -> FieldVector:
        return FieldVector(*(self.field_magnitude * np.asarray(self.direction)))


@dataclass(frozen=True)
class SweepPoint:
    angle_deg: float
    subsite: str
    solutions: Tuple[ResonanceSolution, ...]


@dataclass(frozen=True)
class AngularSweep:
    """
    Resonance solutions for a list of field orientations within a plane
    """
    plane: str
    frequency: float
    misalignment_deg: float
    points: Tuple[SweepPoint, ...]

    def __post_init__(self):
        for subsite in {point.subsite for point in self.points}:
            angles = [point.angle_deg for point in self.points if point.subsite == subsite]
            if any(b <= a for a, b in zip(angles, angles[1:])):
                raise ValueError(f"Sweep angles of subsite {subsite} must be strictly increasing.")

    @property
    def angles(self) -> List[float]:
        return sorted({point.angle_deg for point in self.points})

    def for_subsite(self, subsite: str) -> List[SweepPoint]:
        return [point for point in self.points if point.subsite == subsite]


@dataclass(frozen=True)
class GradientPoint:
    """
    One field point along a ray: frequency (Hz), gradient norm (Hz/T) and effective g-factor of a tracked transition
    """
    field_magnitude: float
    frequency: float
    gradient_norm: float
    g_eff: float


@dataclass(frozen=True)
class ZefozMap:
    """
    Norm of the frequency gradient of one transition on a square grid of fields within a plane
    """
    plane: str
    axis: Tuple[float, ...]
    gradient_norm: np.ndarray
    degenerate: np.ndarray
    min_ray_angle_deg: float

    def value_at(self, i: int, j: int) -> float:
        return float(self.gradient_norm[i, j])


@dataclass(frozen=True)
class SubEnsemble:
    """
    Class of environmental spins sharing a transition: density (spins/m^3), linewidth (Hz), matrix element,
    transition frequency (Hz) and effective g-factor
    """
    n: float
    linewidth: float
    matrix_element: float
    frequency: float
    g_eff: float
    label: str = ""

    def __post_init__(self):
        for name in ("n", "linewidth", "matrix_element", "frequency", "g_eff"):
            value = getattr(self, name)
            if not value >= 0:
                raise ValueError(f"Sub-ensemble {self.label!r}: {name} must be >= 0, got {value}.")


@dataclass(frozen=True)
class CentralSpinContext:
    """
    The measured ("central") transition: effective g-factor, linewidth (Hz), residual rate (Hz) and coupling
    fit parameter xi
    """
    g: float
    linewidth: float
    residual_rate: float = 0.0
    xi: float = 1.0

    def __post_init__(self):
        if not self.g >= 0:
            raise ValueError(f"Central spin g must be >= 0, got {self.g}.")
        if not self.xi >= 0:
            raise ValueError(f"xi must be >= 0, got {self.xi}.")
        if not self.linewidth > 0:
            raise ValueError(f"Central spin linewidth must be > 0, got {self.linewidth}.")


@dataclass(frozen=True)
class AngularRatePoint:
    """
    Decoherence rate of the central spin at the working field of one sweep angle. Angles without a resonance hold nan
    and no transition.
    """
    angle_deg: float
    field_magnitude: float
    g_central: float
    rate: float
    transition: Optional[Transition] = None

    @property
    def t2(self) -> float:
        if math.isnan(self.rate):
            return math.nan
        return 1.0 / self.rate if self.rate > 0 else math.inf


@dataclass(frozen=True)
class ResonatorFilter:
    """
    Resonator/pulse filter: a Lorentzian of FWHM 1/pulse_length over a Gaussian spin line of FWHM line_fwhm.
    df_dB converts a field detuning into a frequency detuning.
    """
    f0: float
    pulse_length: float
    line_fwhm: float
    df_dB: float

    def __post_init__(self):
        if not self.pulse_length > 0:
            raise ValueError(f"Pulse length must be > 0, got {self.pulse_length}.")
        if not self.line_fwhm > 0:
            raise ValueError(f"Spin line FWHM must be > 0, got {self.line_fwhm}.")

    @property
    def bandwidth(self) -> float:
        return 1.0 / self.pulse_length


def _check_trace(x: np.ndarray, y: np.ndarray, x_name: str, monotone: bool = True) -> None:
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"{x_name} and amplitudes must be 1D arrays of equal length, got {x.shape}, {y.shape}.")
    if len(x) == 0:
        raise ValueError("Trace is empty.")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("Trace holds non-finite values.")
    if monotone and np.any(np.diff(x) <= 0):
        raise ValueError(f"{x_name} must be strictly increasing.")


class DecayTrace(object):
    """
    Amplitude (V) against a delay (s). Also used for inversion recovery (delay is the wait time) and ESEEM.
    """

    def __init__(self, tau, amplitude, sigma=None):
        self.tau: np.ndarray = np.asarray(tau, dtype=float)
        self.amplitude: np.ndarray = np.asarray(amplitude, dtype=float)
        self.sigma: Optional[np.ndarray] = None if sigma is None else np.asarray(sigma, dtype=float)
        _check_trace(self.tau, self.amplitude, "tau")


class FieldSweepTrace(object):
    """
    Maximum echo amplitude (V) against field (T)
    """

    def __init__(self, field, amplitude, sigma=None):
        self.field: np.ndarray = np.asarray(field, dtype=float)
        self.amplitude: np.ndarray = np.asarray(amplitude, dtype=float)
        self.sigma: Optional[np.ndarray] = None if sigma is None else np.asarray(sigma, dtype=float)
        _check_trace(self.field, self.amplitude, "field")


class RateTrace(object):
    """
    Decoherence rate 1/T2 (Hz) against bath temperature (K)
    """

    def __init__(self, temperature, rate, sigma=None):
        self.temperature: np.ndarray = np.asarray(temperature, dtype=float)
        self.rate: np.ndarray = np.asarray(rate, dtype=float)
        self.sigma: Optional[np.ndarray] = None if sigma is None else np.asarray(sigma, dtype=float)
        _check_trace(self.temperature, self.rate, "temperature")
        if np.any(self.temperature <= 0):
            raise ValueError("Temperatures must be > 0.")


class StimEchoGrid(object):
    """
    Stimulated echo amplitudes (V) over (tau, T_w) pairs (s), with the separately measured T1 (s)
    """

    def __init__(self, tau, tw, amplitude, t1: float, sigma=None):
        self.tau: np.ndarray = np.asarray(tau, dtype=float)
        self.tw: np.ndarray = np.asarray(tw, dtype=float)
        self.amplitude: np.ndarray = np.asarray(amplitude, dtype=float)
        self.t1: float = float(t1)
        self.sigma: Optional[np.ndarray] = None if sigma is None else np.asarray(sigma, dtype=float)
        if not (self.tau.shape == self.tw.shape == self.amplitude.shape) or self.tau.ndim != 1:
            raise ValueError("tau, tw and amplitude must be 1D arrays of equal length.")
        if len(self.tau) == 0:
            raise ValueError("Stimulated echo grid is empty.")
        if np.any(self.tau <= 0) or np.any(self.tw <= 0):
            raise ValueError("tau and tw must be > 0.")
        if not self.t1 > 0:
            raise ValueError(f"T1 must be > 0, got {self.t1}.")


class CrossingTrace(object):
    """
    Resonator frequency (Hz) and half-width (Hz) against field (T) across an avoided crossing. df_dB (Hz/T) is the
    spin transition slope.
    """

    def __init__(self, field, frequency, kappa, df_dB: Optional[float] = None):
        self.field: np.ndarray = np.asarray(field, dtype=float)
        self.frequency: np.ndarray = np.asarray(frequency, dtype=float)
        self.kappa: np.ndarray = np.asarray(kappa, dtype=float)
        self.df_dB: Optional[float] = df_dB
        _check_trace(self.field, self.frequency, "field", monotone=False)
        steps = np.diff(self.field)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise ValueError("Field must be strictly monotone.")
        if self.kappa.shape != self.field.shape:
            raise ValueError("kappa must have the same length as field.")


@dataclass
class FitResult:
    """
    Outcome of a least squares fit. `derived` holds quantities computed from the parameters (e.g. the R*Gamma_SD
    product, the cooperativity) as name -> (value, 1 sigma).
    """
    model: str
    names: List[str]
    units: List[str]
    values: List[float]
    uncertainties: List[float]
    covariance: List[List[float]]
    rss: float
    r2: float
    converged: bool
    message: str
    nfev: int
    seed: Optional[int] = None
    flags: List[str] = field(default_factory=list)
    derived: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        if name in self.names:
            return self.values[self.names.index(name)]
        if name in self.derived:
            return self.derived[name][0]
        raise KeyError(name)

    def uncertainty(self, name: str) -> float:
        if name in self.names:
            return self.uncertainties[self.names.index(name)]
        return self.derived[name][1]

    def as_dict(self) -> Dict[str, float]:
        result = dict(zip(self.names, self.values))
        result.update({name: value for name, (value, _) in self.derived.items()})
        return result


@dataclass(frozen=True)
class CovarianceRow:
    """
    One refit of a stimulated echo grid with either Gamma_SD or R held fixed
    """
    fixed_name: str
    fixed_value: float
    other_value: float
    a0: float
    r2: float
    product: float


@dataclass
class CovarianceScan:
    rows: List[CovarianceRow]
    ridge_product: float
    ridge_spread: float
    r2_threshold: float = 0.99

    def ridge_rows(self) -> List[CovarianceRow]:
        return [row for row in self.rows if row.r2 > self.r2_threshold]
