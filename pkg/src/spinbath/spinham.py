"""
Electron-nuclear spin Hamiltonian of a rare-earth ion: construction, diagonalization, transitions, matrix elements
and frequency gradients.

All operators act on the product basis |m_S> x |m_I>, quantum numbers in descending order. Energies are in Hz.
"""
from __future__ import annotations

import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConvergenceError, DegenerateGradientError, NonHermitianError, UnsupportedSpinError
from .model import DEFAULT_CONSTANTS, FieldLike, FieldVector, LevelSet, PhysicalConstants, SpinSystem, Transition
from .utils import LoggingObject, get_logger

logger = get_logger("spinham")

HERMITIAN_TOLERANCE = 1e-10
RESIDUAL_TOLERANCE = 1e-9
ORTHONORMALITY_TOLERANCE = 1e-10
# level pairs closer than this (Hz) anywhere on a finite difference stencil are treated as degenerate
DEGENERACY_TOLERANCE = 1e3
# C2 rotation about b relating the two magnetic subsites
SUBSITE_ROTATION = np.diag([-1.0, -1.0, 1.0])

TransitionLike = Union[Transition, Tuple[int, int]]


def spin_matrices(spin: float) -> np.ndarray:
    """
    Spin operators for an arbitrary spin, basis ordered from m = spin down to m = -spin
    :param spin: the spin quantum number, a non-negative half-integer
    :return: array of shape (3, 2*spin+1, 2*spin+1) holding Sx, Sy, Sz
    """
    dim = int(round(2 * spin + 1))
    m = spin - np.arange(dim)
    # <m+1|S+|m>, on the superdiagonal because m is descending
    raising = np.diag(np.sqrt(spin * (spin + 1) - m[1:] * (m[1:] + 1)), k=1).astype(complex)
    lowering = raising.conj().T
    sx = (raising + lowering) / 2
    sy = (raising - lowering) / 2j
    sz = np.diag(m).astype(complex)
    return np.array([sx, sy, sz])


class SpinHamiltonian(LoggingObject):
    """
    Hamiltonian of one SpinSystem with the field-independent parts precomputed:

    H(B) = S.A.I + (mu_B/h) B.g.S - flag (mu_N/h) g_n B.I

    so that evaluating it for many fields only costs a tensor contraction.
    """

    def __init__(self, system: SpinSystem, constants: PhysicalConstants = DEFAULT_CONSTANTS):
        super().__init__()
        if system.S != 0.5:
            raise UnsupportedSpinError(f"Only S = 1/2 electron spins are supported, {system.label} has S = {system.S}.",
                                       label=system.label, S=system.S)
        if not (np.all(np.isfinite(system.g)) and np.all(np.isfinite(system.A)) and math.isfinite(system.g_n)):
            raise ValueError(f"{system.label}: tensors hold non-finite entries.")
        self.system = system
        self.constants = constants
        dim_s = int(round(2 * system.S + 1))
        dim_i = int(round(2 * system.I + 1))
        self.dimension = dim_s * dim_i
        s_ops = np.array([np.kron(op, np.eye(dim_i)) for op in spin_matrices(system.S)])
        i_ops = np.array([np.kron(np.eye(dim_s), op) for op in spin_matrices(system.I)])
        # A is in MHz
        self.hyperfine: np.ndarray = 1e6 * np.einsum("ij,iab,jbc->ac", system.A, s_ops, i_ops)
        # electron Zeeman operator per field component, Hz/T
        self.zeeman: np.ndarray = constants.mu_B / constants.h * np.einsum("kj,jab->kab", system.g, s_ops)
        if system.include_nuclear_zeeman:
            self.zeeman = self.zeeman - constants.mu_N / constants.h * system.g_n * i_ops
        # drive operator per microwave field component, dimensionless
        self.drive: np.ndarray = np.einsum("ij,jab->iab", system.g, s_ops)

    def matrix(self, field: FieldLike) -> np.ndarray:
        """
        :param field: static field in T
        :return: the Hamiltonian in Hz
        """
        return self.hyperfine + np.tensordot(FieldVector.of(field).array, self.zeeman, axes=1)

    def matrices(self, fields: np.ndarray) -> np.ndarray:
        """
        Hamiltonians for a batch of fields
        :param fields: array of shape (N, 3), T
        :return: array of shape (N, d, d), Hz
        """
        fields = np.asarray(fields, dtype=float).reshape(-1, 3)
        return self.hyperfine[None, :, :] + np.einsum("nk,kab->nab", fields, self.zeeman)

    def eigh_batch(self, fields: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Eigenvalues (ascending) and eigenvectors of a batch of Hamiltonians, without the checks done by eigensolve
        """
        return np.linalg.eigh(self.matrices(fields))

    def levels(self, field: FieldLike) -> LevelSet:
        return eigensolve(self.matrix(field))

    def drive_operator(self, b1_direction: Sequence[float]) -> np.ndarray:
        return np.tensordot(unit_vector(b1_direction, "b1 direction"), self.drive, axes=1)

    def matrix_element(self, upper_state: np.ndarray, lower_state: np.ndarray, b1_direction: Sequence[float]) -> float:
        return float(abs(upper_state.conj() @ self.drive_operator(b1_direction) @ lower_state))

    def transitions(self, field: FieldLike, b1_direction: Optional[Sequence[float]] = None, threshold: float = 0.0,
                    with_gradients: bool = False) -> List[Transition]:
        field = FieldVector.of(field)
        if b1_direction is None:
            b1_direction = default_drive_direction(field)
        levels = self.levels(field)
        drive = self.drive_operator(b1_direction)
        elements = np.abs(levels.states.conj().T @ drive @ levels.states)
        result = []
        for lower in range(len(levels)):
            for upper in range(lower + 1, len(levels)):
                m = float(elements[upper, lower])
                if m < threshold:
                    continue
                frequency = float(levels.energies[upper] - levels.energies[lower])
                gradient = None
                g_eff = math.nan
                if with_gradients:
                    try:
                        gradient_array = self.gradient(field, lower, upper)
                        gradient = tuple(float(v) for v in gradient_array)
                        g_eff = effective_g(gradient_array, self.constants)
                    except DegenerateGradientError as e:
                        self.logger.debug(f"No gradient for ({lower}, {upper}) at {field}: {e.message}")
                result.append(Transition(lower=lower, upper=upper, frequency=frequency, matrix_element=m,
                                         gradient=gradient, g_eff=g_eff))
        result.sort(key=lambda t: (t.frequency, t.lower, t.upper))
        return result

    def gradient_estimate(self, field: FieldLike, lower: int, upper: int) -> Tuple[np.ndarray, bool]:
        """
        Central finite differences of the (lower, upper) transition frequency at two step sizes, combined by
        Richardson extrapolation
        :return: gradient in Hz/T and whether the two step sizes agreed
        """
        center = FieldVector.of(field).array
        step = max(1e-6, 1e-6 * float(np.linalg.norm(center)))
        offsets = np.concatenate([np.eye(3), -np.eye(3)])
        stencil = np.concatenate([center[None, :], center + step * offsets, center + 2 * step * offsets])
        energies, _ = self.eigh_batch(stencil)
        dim = energies.shape[1]
        if not (0 <= lower < upper < dim):
            raise ValueError(f"Level indices ({lower}, {upper}) out of range for dimension {dim}.")
        gaps = np.abs(energies[:, :, None] - energies[:, None, :])
        gaps[:, np.arange(dim), np.arange(dim)] = np.inf
        closest = min(float(gaps[:, lower, :].min()), float(gaps[:, upper, :].min()))
        if closest < DEGENERACY_TOLERANCE:
            raise DegenerateGradientError(
                f"Levels {lower} or {upper} are degenerate within the stencil around B = {center.tolist()} T "
                f"(closest gap {closest:.3g} Hz).", field=center.tolist(), lower=lower, upper=upper)
        frequencies = energies[:, upper] - energies[:, lower]
        forward, backward = frequencies[1:4], frequencies[4:7]
        forward2, backward2 = frequencies[7:10], frequencies[10:13]
        g1 = (forward - backward) / (2 * step)
        g2 = (forward2 - backward2) / (4 * step)
        floor = 1e-6 * self.constants.mu_B / self.constants.h
        agreed = bool(np.linalg.norm(g1 - g2) <= 1e-3 * np.linalg.norm(g1) + floor)
        if not agreed:
            self.logger.warning(f"Finite difference gradients at steps {step:.3g} T and {2 * step:.3g} T disagree at "
                                f"B = {center.tolist()} T: {g1.tolist()} vs {g2.tolist()} Hz/T.")
        return (4 * g1 - g2) / 3, agreed

    def gradient(self, field: FieldLike, lower: int, upper: int) -> np.ndarray:
        return self.gradient_estimate(field, lower, upper)[0]


def unit_vector(vector: Sequence[float], name: str) -> np.ndarray:
    array = np.asarray(vector, dtype=float).reshape(-1)
    norm = float(np.linalg.norm(array))
    if array.shape != (3,) or not (norm > 0 and math.isfinite(norm)):
        raise ValueError(f"{name} must be a finite non-zero 3-vector, got {array.tolist()}.")
    return array / norm


def build_hamiltonian(system: SpinSystem, field: FieldLike,
                      constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """
    Builds the spin Hamiltonian of a system in a static field
    :param system: the spin system
    :param field: the static field in T
    :param constants: physical constants
    :return: Hermitian matrix in Hz on the |m_S> x |m_I> basis
    """
    return SpinHamiltonian(system, constants).matrix(field)


def eigensolve(hamiltonian: np.ndarray) -> LevelSet:
    """
    Diagonalizes a Hermitian matrix. Every eigenvector is rotated so that its largest-magnitude component (the first
    one in case of ties) is real and positive.
    :param hamiltonian: square Hermitian matrix
    :return: the levels, energies ascending
    """
    h = np.asarray(hamiltonian, dtype=complex)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError(f"Expected a square matrix, got shape {h.shape}.")
    if not np.all(np.isfinite(h)):
        raise ValueError("Matrix holds non-finite entries.")
    scale = float(np.linalg.norm(h))
    asymmetry = float(np.linalg.norm(h - h.conj().T))
    if asymmetry > HERMITIAN_TOLERANCE * scale:
        raise NonHermitianError(f"Matrix is not Hermitian: ||H - H^dagger|| = {asymmetry:.3g}, ||H|| = {scale:.3g}.",
                                asymmetry=asymmetry, norm=scale)
    h = (h + h.conj().T) / 2
    try:
        energies, states = np.linalg.eigh(h)
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(f"Eigensolver did not converge: {e}")
    pivots = np.argmax(np.abs(states), axis=0)
    pivot_values = states[pivots, np.arange(states.shape[1])]
    states = states * (pivot_values.conj() / np.abs(pivot_values))[None, :]

    residual = float(np.max(np.linalg.norm(h @ states - states * energies[None, :], axis=0), initial=0.0))
    if residual > RESIDUAL_TOLERANCE * scale:
        raise ConvergenceError(f"Eigenpair residual {residual:.3g} exceeds {RESIDUAL_TOLERANCE} * ||H||.",
                               residual=residual)
    orthonormality = float(np.max(np.abs(states.conj().T @ states - np.eye(len(energies))), initial=0.0))
    if orthonormality > ORTHONORMALITY_TOLERANCE:
        raise ConvergenceError(f"Eigenvectors are not orthonormal (deviation {orthonormality:.3g}).",
                               residual=orthonormality)
    return LevelSet(energies=energies, states=states)


def default_drive_direction(field: FieldLike) -> np.ndarray:
    """
    Microwave field direction perpendicular to the static field: D1 at zero field, otherwise B x b, or B x D1 when
    B is along b
    """
    b = FieldVector.of(field).array
    norm = float(np.linalg.norm(b))
    if norm == 0:
        return np.array([1.0, 0.0, 0.0])
    direction = np.cross(b / norm, [0.0, 0.0, 1.0])
    if np.linalg.norm(direction) < 1e-12:
        direction = np.cross(b / norm, [1.0, 0.0, 0.0])
    return direction / np.linalg.norm(direction)


def transitions(system: SpinSystem, field: FieldLike, b1_direction: Optional[Sequence[float]] = None,
                threshold: float = 1e-6, constants: PhysicalConstants = DEFAULT_CONSTANTS,
                with_gradients: bool = False) -> List[Transition]:
    """
    Lists the transitions of a system whose drive matrix element |<upper| b1.g.S |lower>| reaches the threshold
    :param system: the spin system
    :param field: the static field in T
    :param b1_direction: microwave field direction, perpendicular to the static field if omitted
    :param threshold: minimal matrix element
    :param constants: physical constants
    :param with_gradients: also computes frequency gradients and effective g-factors
    :return: transitions sorted by frequency
    """
    return SpinHamiltonian(system, constants).transitions(field, b1_direction, threshold, with_gradients)


def freq_gradient(system: SpinSystem, field: FieldLike, transition: TransitionLike,
                  constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """
    Gradient of a transition frequency with respect to the static field, Hz/T
    :param transition: a Transition or a (lower, upper) pair of level indices
    """
    lower, upper = (transition.lower, transition.upper) if isinstance(transition, Transition) else transition
    return SpinHamiltonian(system, constants).gradient(field, lower, upper)


def effective_g(gradient: Sequence[float], constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    return constants.h * float(np.linalg.norm(gradient)) / constants.mu_B


def zeeman_temperature(frequency: float, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """
    :param frequency: transition frequency, Hz
    :return: h f / k_B, K
    """
    if frequency < 0:
        raise ValueError(f"Frequency must be >= 0, got {frequency}.")
    return constants.h * frequency / constants.k_B


def principal_g_values(g: np.ndarray) -> np.ndarray:
    """
    Principal values of a g-matrix as its singular values, descending. Also valid for non-symmetric matrices.
    """
    return np.linalg.svd(np.asarray(g, dtype=float), compute_uv=False)


def symmetrized(system: SpinSystem) -> SpinSystem:
    g = system.g
    a = system.A
    return system.with_tensors(g=(g + g.T) / 2, A=(a + a.T) / 2)


def subsite(system: SpinSystem, which: str = "a") -> SpinSystem:
    """
    Tensors of one of the two magnetically inequivalent subsites. Subsite b is the C2 image about b of subsite a.
    """
    if which == "a":
        return system
    if which != "b":
        raise ValueError(f"Unknown subsite '{which}', expected 'a' or 'b'.")
    r = SUBSITE_ROTATION
    return system.with_tensors(g=r @ system.g @ r.T, A=r @ system.A @ r.T)
