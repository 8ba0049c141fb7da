"""Raman-transition Hamiltonians without the Lamb-Dicke approximation.

Every drive is assembled from a *single-beam* term

    H(t) = (Omega/2) e^{i phi(t)} sigma_+ F_1 F_2 ... + h.c.,

where ``F_j`` keeps only the diagonal of ``exp(i eta_j (a_j + a_j^dag))`` that
raises mode ``j`` by the requested sideband order.  Everything is written in
the interaction picture: mode frequencies never appear, and detunings enter
only through the time-dependent phase ``phi(t)``.

Terms expose ``components()``, a list of ``(coefficient, matrix)`` pairs with
``H(t) = sum_k c_k(t) M_k``.  The propagators in :mod:`jointparity.evolve`
consume that interface, so any mixture of terms can be evolved together.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .qstate import HilbertSpec, Operator, _lowering, _SPIN, embed

__all__ = [
    "DrivePhases",
    "NoiseDrive",
    "ConstantPhase",
    "LinearPhase",
    "NoisyMotionalPhase",
    "BeamPhase",
    "TimedHamiltonian",
    "DetuningTerm",
    "StaticTerm",
    "CompositeDrive",
    "lamb_dicke_factor",
    "single_beam",
    "sbs_drive",
    "sdf_drive",
    "bichromatic_carrier",
    "sideband_drive",
    "noisy_motional_phase",
    "ideal_sbs_generator",
    "ideal_sbs_unitary",
    "ideal_carrier_generator",
    "beam_splitter_generator",
    "sbs_rate",
    "sbs_pi_time",
    "sdf_duration",
    "carrier_period",
    "round_to_carrier_period",
    "TWO_PI",
]

TWO_PI = 2.0 * np.pi


# ----------------------------------------------------------------------------
# phases


@dataclass(frozen=True)
class DrivePhases:
    """Beam phases of a bichromatic drive and the derived spin/motional phases.

    Construct with :meth:`from_beams` or :meth:`from_spin_motion`; the direct
    constructor checks that the four numbers are consistent.
    """

    phi_S: float
    phi_M: float
    phi_b: float
    phi_r: float

    def __post_init__(self):
        if abs(self.phi_S - 0.5 * (self.phi_b + self.phi_r)) > 1e-12 or \
                abs(self.phi_M - 0.5 * (self.phi_b - self.phi_r)) > 1e-12:
            raise ValueError("inconsistent phases: need phi_S=(b+r)/2, phi_M=(b-r)/2")

    @classmethod
    def from_beams(cls, phi_b: float, phi_r: float) -> "DrivePhases":
        return cls(0.5 * (phi_b + phi_r), 0.5 * (phi_b - phi_r), phi_b, phi_r)

    @classmethod
    def from_spin_motion(cls, phi_S: float = 0.0, phi_M: float = 0.0) -> "DrivePhases":
        return cls(phi_S, phi_M, phi_S + phi_M, phi_S - phi_M)


@dataclass(frozen=True)
class NoiseDrive:
    """Sinusoidal mode-frequency excursion ``delta(t) = Delta sin(w t + phase)``."""

    delta_amp: float
    omega_noise: float = TWO_PI * 60.0
    phi_noise: float = 0.0

    def __post_init__(self):
        if self.delta_amp < 0:
            raise ValueError("delta_amp must be non-negative")

    def detuning(self, t: float) -> float:
        return self.delta_amp * math.sin(self.omega_noise * t + self.phi_noise)

    def integrated(self, t: float) -> float:
        """``int_0^t delta(s) ds``."""
        if self.delta_amp == 0:
            return 0.0
        w = self.omega_noise
        return (self.delta_amp / w) * (math.cos(self.phi_noise) - math.cos(w * t + self.phi_noise))

    def with_phase(self, phi_noise: float) -> "NoiseDrive":
        return NoiseDrive(self.delta_amp, self.omega_noise, phi_noise)


# Phase functions are small frozen callables rather than closures so that
# propagators can recognise constant and linear phases and take fast paths.


@dataclass(frozen=True)
class ConstantPhase:
    value: float = 0.0

    def __call__(self, t: float) -> float:
        return self.value


@dataclass(frozen=True)
class LinearPhase:
    """``phi(t) = phi0 + rate * t``."""

    phi0: float = 0.0
    rate: float = 0.0

    def __call__(self, t: float) -> float:
        return self.phi0 + self.rate * t


@dataclass(frozen=True)
class NoisyMotionalPhase:
    """Motional phase of a force whose mode frequency wobbles at ``noise``:
    ``phi_M(t) = phi_M0 - int_0^t delta``."""

    noise: NoiseDrive
    phi_M0: float = 0.0

    def __call__(self, t: float) -> float:
        return self.phi_M0 - self.noise.integrated(t)


@dataclass(frozen=True)
class BeamPhase:
    """Phase of one tone of a bichromatic pair, ``phi_S + sign * phi_M(t)``."""

    phi_S: float
    motional: Callable[[float], float]
    sign: int = 1

    def __call__(self, t: float) -> float:
        return self.phi_S + self.sign * self.motional(t)


def noisy_motional_phase(noise: NoiseDrive, phi_M0: float = 0.0) -> NoisyMotionalPhase:
    """Motional phase with a 60-Hz style frequency excursion.

    ``phi_M(t) = (Delta/w)(cos(w t + phi_n) - cos(phi_n)) + phi_M0``, so
    ``phi_M(0) = phi_M0`` exactly.  ``t`` is measured on the experiment's
    shared clock.
    """
    return NoisyMotionalPhase(noise, phi_M0)


# ----------------------------------------------------------------------------
# Hamiltonian terms


def _as_coef(c):
    return c if callable(c) else (lambda t, _c=complex(c): _c)


@dataclass(frozen=True)
class TimedHamiltonian:
    """``(amplitude/2) (e^{i phi(t)} base + h.c.)``, zero before ``dead_time``."""

    base: Operator
    phase_fn: Callable[[float], float]
    amplitude: float
    segment_duration: float | None = None
    dead_time: float = 0.0

    @property
    def space(self) -> HilbertSpec:
        return self.base.space

    def _coef(self, t: float) -> complex:
        if t < self.dead_time:
            return 0.0
        return 0.5 * self.amplitude * np.exp(1j * self.phase_fn(t))

    def components(self) -> list:
        B = self.base.matrix
        return [(self._coef, B), (lambda t: np.conj(self._coef(t)), B.conj().T)]

    def matrix(self, t: float) -> np.ndarray:
        c = self._coef(t)
        B = self.base.matrix
        return c * B + np.conj(c) * B.conj().T

    def is_static(self) -> bool:
        return isinstance(self.phase_fn, ConstantPhase) and self.dead_time == 0

    def static_matrix(self) -> np.ndarray:
        if not self.is_static():
            raise ValueError("term has a time-dependent phase")
        return self.matrix(0.0)


@dataclass(frozen=True)
class DetuningTerm:
    """``rate_fn(t) * operator`` for a Hermitian ``operator`` (e.g. ``n_1 + n_2``)."""

    operator: Operator
    rate_fn: Callable[[float], float]

    @property
    def space(self) -> HilbertSpec:
        return self.operator.space

    def components(self) -> list:
        return [(lambda t: complex(self.rate_fn(t)), self.operator.matrix)]

    def matrix(self, t: float) -> np.ndarray:
        return self.rate_fn(t) * self.operator.matrix

    def is_static(self) -> bool:
        return isinstance(self.rate_fn, ConstantPhase)

    def static_matrix(self) -> np.ndarray:
        return self.matrix(0.0)


@dataclass(frozen=True)
class StaticTerm:
    """Time-independent Hamiltonian ``scale * operator``."""

    operator: Operator
    scale: float = 1.0

    @property
    def space(self) -> HilbertSpec:
        return self.operator.space

    def components(self) -> list:
        return [(lambda t: complex(self.scale), self.operator.matrix)]

    def matrix(self, t: float = 0.0) -> np.ndarray:
        return self.scale * self.operator.matrix

    def is_static(self) -> bool:
        return True

    def static_matrix(self) -> np.ndarray:
        return self.matrix()


@dataclass(frozen=True)
class CompositeDrive:
    """Sum of terms evolved together, e.g. the two tones of a bichromatic drive."""

    terms: tuple = field(default_factory=tuple)

    @property
    def space(self) -> HilbertSpec:
        return self.terms[0].space

    def components(self) -> list:
        out = []
        for term in self.terms:
            out.extend(term.components())
        return out

    def matrix(self, t: float) -> np.ndarray:
        return sum(term.matrix(t) for term in self.terms)

    def is_static(self) -> bool:
        return all(term.is_static() for term in self.terms)

    def static_matrix(self) -> np.ndarray:
        return sum(term.static_matrix() for term in self.terms)

    def __add__(self, other) -> "CompositeDrive":
        more = other.terms if isinstance(other, CompositeDrive) else (other,)
        return CompositeDrive(self.terms + tuple(more))

    def __iter__(self):
        return iter(self.terms)

    def __len__(self):
        return len(self.terms)


# ----------------------------------------------------------------------------
# single-beam construction


@functools.lru_cache(maxsize=256)
def _displacement_kernel(dim: int, eta: float) -> np.ndarray:
    """``exp(i eta (a + a^dag))`` on the first ``dim`` Fock levels.

    Computed in an enlarged space and cropped, so the kept elements carry no
    truncation error from the exponential itself.
    """
    big = dim + 40
    a = _lowering(big)
    x = (a + a.T).real
    w, V = np.linalg.eigh(x)
    F = (V * np.exp(1j * eta * w)) @ V.T
    F = F[:dim, :dim].copy()
    F.setflags(write=False)
    return F


def lamb_dicke_factor(dim: int, eta: float, order: int) -> np.ndarray:
    """Keep the elements of ``exp(i eta (a+a^dag))`` that raise the phonon
    number by ``order`` (lower if negative); all other entries are zeroed."""
    F = _displacement_kernel(int(dim), float(eta))
    if abs(order) >= dim:
        raise ValueError(f"sideband order {order} does not fit in dimension {dim}")
    return np.diag(np.diag(F, -order), -order)


def _orders_for(space: HilbertSpec, n1: int, n2: int, pair: Sequence[int]) -> list[int]:
    orders = [0] * space.n_modes
    if space.n_modes == 0:
        if n1 or n2:
            raise ValueError("no modes to take a sideband on")
        return orders
    orders[pair[0]] = n1
    if space.n_modes > 1:
        orders[pair[1]] = n2
    elif n2:
        raise ValueError("second sideband order given for a single-mode space")
    return orders


def _single_beam_base(space: HilbertSpec, orders: Sequence[int]) -> np.ndarray:
    if not space.has_spin:
        raise ValueError("single-beam terms need a spin")
    m = _SPIN["plus"]
    for d, eta, k in zip(space.mode_dims, space.lamb_dicke, orders):
        if abs(k) >= d:
            raise ValueError(f"|sideband order| {abs(k)} must be below the mode dimension {d}")
        m = np.kron(m, lamb_dicke_factor(d, eta, k))
    return m


def single_beam(space: HilbertSpec, n1: int, n2: int, omega: float,
                phase_fn: Callable[[float], float] | float = 0.0, *,
                pair: Sequence[int] = (0, 1), dead_time: float = 0.0) -> TimedHamiltonian:
    """Raman term driving sideband orders ``(n1, n2)`` on the modes in ``pair``.

    The ``sigma_+`` part raises mode ``pair[0]`` by ``n1`` and mode ``pair[1]``
    by ``n2``; any other mode enters through its number-conserving
    (Debye-Waller) factor.  ``phase_fn`` may be a number for a fixed phase.
    """
    if not callable(phase_fn):
        phase_fn = ConstantPhase(float(phase_fn))
    base = _single_beam_base(space, _orders_for(space, n1, n2, pair))
    return TimedHamiltonian(Operator(space, base), phase_fn, float(omega), dead_time=dead_time)


def sbs_drive(space: HilbertSpec, omega: float, phases: DrivePhases, *,
              pair: Sequence[int] = (0, 1), dead_time: float = 0.0) -> CompositeDrive:
    """Exact spin-dependent beam splitter on ``pair``.

    The red tone (phase ``phi_r``) moves a phonon from the second mode to the
    first while raising the spin; the blue tone does the reverse.  To leading
    order this is ``-(g/2)(a1^dag a2 e^{-i phi_M} + h.c.) sigma_{phi_S}`` with
    ``g = eta_1 eta_2 Omega``.
    """
    red = single_beam(space, 1, -1, omega, phases.phi_r, pair=pair, dead_time=dead_time)
    blue = single_beam(space, -1, 1, omega, phases.phi_b, pair=pair, dead_time=dead_time)
    return CompositeDrive((red, blue))


def sdf_drive(space: HilbertSpec, mode: int, omega: float, phases: DrivePhases,
              motional_phase: Callable[[float], float] | None = None) -> CompositeDrive:
    """Exact bichromatic spin-dependent force on one mode.

    Leading order: ``(eta Omega / 2) sigma_{phi_S + pi/2} (a e^{-i phi_M} + a^dag e^{i phi_M})``.
    ``motional_phase`` replaces the constant ``phases.phi_M`` with a function
    of time, e.g. :func:`noisy_motional_phase`.
    """
    if motional_phase is None:
        blue_phase: Callable = ConstantPhase(phases.phi_b)
        red_phase: Callable = ConstantPhase(phases.phi_r)
    else:
        blue_phase = BeamPhase(phases.phi_S, motional_phase, +1)
        red_phase = BeamPhase(phases.phi_S, motional_phase, -1)
    pair = (mode, (mode + 1) % max(space.n_modes, 1))
    blue = single_beam(space, 1, 0, omega, blue_phase, pair=pair)
    red = single_beam(space, -1, 0, omega, red_phase, pair=pair)
    return CompositeDrive((blue, red))


def bichromatic_carrier(space: HilbertSpec, omega: float, delta: float, phases: DrivePhases,
                        *, dead_time: float = 0.0) -> CompositeDrive:
    """Off-resonant carrier from a tone pair detuned by ``+/-delta``.

    In the Lamb-Dicke limit this is ``Omega cos(delta t + phi_M) sigma_{phi_S}``.
    """
    pair = (0, 1)
    blue = single_beam(space, 0, 0, omega, LinearPhase(phases.phi_b, delta), pair=pair,
                       dead_time=dead_time)
    red = single_beam(space, 0, 0, omega, LinearPhase(phases.phi_r, -delta), pair=pair,
                      dead_time=dead_time)
    return CompositeDrive((blue, red))


def sideband_drive(space: HilbertSpec, mode: int, order: int, omega: float,
                   phase: float | Callable[[float], float] = 0.0) -> TimedHamiltonian:
    """Resonant single-tone sideband of the given order on one mode
    (``+1`` blue, ``-1`` red, ``0`` carrier)."""
    pair = (mode, (mode + 1) % max(space.n_modes, 1))
    return single_beam(space, order, 0, omega, phase, pair=pair)


# ----------------------------------------------------------------------------
# ideal (leading-order) generators


def beam_splitter_generator(space: HilbertSpec, phi_M: float = 0.0,
                            pair: Sequence[int] = (0, 1)) -> np.ndarray:
    """Motional part ``a1^dag a2 e^{-i phi_M} + h.c.`` on the full space (identity on spin)."""
    i, j = pair
    a_i = embed(space, _lowering(space.mode_dims[i]), i)
    a_j = embed(space, _lowering(space.mode_dims[j]), j)
    K = a_i.conj().T @ a_j * np.exp(-1j * phi_M)
    return K + K.conj().T


def ideal_sbs_generator(space: HilbertSpec, phases: DrivePhases,
                        pair: Sequence[int] = (0, 1)) -> Operator:
    """``-(1/2)(a1^dag a2 e^{-i phi_M} + h.c.) sigma_{phi_S}``; multiply by ``g``."""
    K = beam_splitter_generator(space, phases.phi_M, pair)
    s = embed(space, _SPIN["plus"] * np.exp(1j * phases.phi_S)
              + _SPIN["minus"] * np.exp(-1j * phases.phi_S), "spin")
    return Operator(space, -0.5 * (s @ K))


def ideal_carrier_generator(space: HilbertSpec, phases: DrivePhases) -> Operator:
    """``sigma_{phi_S}``; the bichromatic carrier is ``Omega cos(delta t + phi_M)`` times this."""
    s = _SPIN["plus"] * np.exp(1j * phases.phi_S) + _SPIN["minus"] * np.exp(-1j * phases.phi_S)
    return Operator(space, embed(space, s, "spin"))


@functools.lru_cache(maxsize=64)
def _motional_bs_eig(mode_dims: tuple, pair: tuple, phi_M: float):
    space = HilbertSpec(mode_dims, spin_dim=1, lamb_dicke=tuple(0.1 for _ in mode_dims))
    K = beam_splitter_generator(space, phi_M, pair)
    return np.linalg.eigh(K)


def ideal_sbs_unitary(space: HilbertSpec, theta: float, phases: DrivePhases,
                      pair: Sequence[int] = (0, 1)) -> np.ndarray:
    """``exp(i (theta/2) sigma_{phi_S} K)`` with ``K`` the beam-splitter generator.

    ``theta = g t``.  Built from the eigen-decompositions of ``sigma_{phi_S}``
    (eigenvalues +/-1) and of ``K``, so the result is exactly unitary; it is
    exact on every block of fixed total phonon number that fits inside the
    truncation.
    """
    w, V = _motional_bs_eig(space.mode_dims, tuple(pair), float(phases.phi_M))
    Up = (V * np.exp(0.5j * theta * w)) @ V.conj().T
    Um = (V * np.exp(-0.5j * theta * w)) @ V.conj().T
    if not space.has_spin:
        raise ValueError("the spin-dependent beam splitter needs a spin")
    e = np.exp(1j * phases.phi_S)
    plus = np.array([1.0, e]) / np.sqrt(2)   # sigma_{phi_S} eigenvector, +1
    minus = np.array([1.0, -e]) / np.sqrt(2)
    Pp = np.outer(plus, plus.conj())
    Pm = np.outer(minus, minus.conj())
    return np.kron(Pp, Up) + np.kron(Pm, Um)


# ----------------------------------------------------------------------------
# timing helpers


def sbs_rate(space: HilbertSpec, omega: float, pair: Sequence[int] = (0, 1)) -> float:
    """Leading-order coupling ``g = eta_1 eta_2 Omega``."""
    return space.lamb_dicke[pair[0]] * space.lamb_dicke[pair[1]] * omega


def sbs_pi_time(eta1: float, eta2: float, omega: float) -> float:
    """``t_pi = pi / (eta_1 eta_2 Omega)``."""
    return np.pi / (eta1 * eta2 * omega)


def sdf_duration(alpha: complex, eta: float, omega: float, *, exact: bool = False) -> float:
    """Pulse length giving displacement magnitude ``|alpha|``.

    Leading order ``t = 2|alpha| / (eta Omega)``; with ``exact=True`` the
    ground-state Debye-Waller reduction ``e^{-eta^2/2}`` of the sideband
    coupling is included.
    """
    t = 2.0 * abs(alpha) / (eta * omega)
    return t * math.exp(eta * eta / 2) if exact else t


def carrier_period(delta: float) -> float:
    return TWO_PI / delta


def round_to_carrier_period(t, delta: float):
    """Round ``t`` to the nearest multiple of ``2 pi / delta``."""
    td = carrier_period(delta)
    return np.floor(np.asarray(t) / td + 0.5) * td
