"""Experiment sequences: state preparation, displaced-parity Wigner
measurement, parity readout and filtering, and the calibration scans.

Spin rotations inside sequences are instantaneous and perfect.  Mid-circuit
detection projects the spin, keeps the requested outcome, and heats the
motion for the length of the detection window.

Two propagation routes are used.  :class:`PulseSequence` runs arbitrary
segments with the generic engines of :mod:`jointparity.evolve`.  The
spin-dependent-force steps of ECS preparation and Wigner measurement use a
faster structured engine: the exact force Hamiltonian is
``(Omega/2) sigma ⊗ M(t) ⊗ G`` with ``G`` diagonal on the other modes, so in
the ``sigma`` eigenbasis each spin block evolves under a family of single-mode
unitaries indexed by the other mode's Fock level.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import least_squares

from . import evolve as ev
from .evolve import NoiseModel
from .hamiltonian import (
    DetuningTerm,
    DrivePhases,
    NoiseDrive,
    StaticTerm,
    _displacement_kernel,
    beam_splitter_generator,
    bichromatic_carrier,
    ideal_sbs_generator,
    ideal_sbs_unitary,
    noisy_motional_phase,
    round_to_carrier_period,
    sbs_drive,
    sideband_drive,
)
from .qstate import (
    DensityMatrix,
    HilbertSpec,
    Operator,
    StateVector,
    TruncationWarning,
    _lowering,
    apply_local,
    coherent_amplitudes,
    displacement_matrix,
    embed,
    fock_state,
    motional_matrix,
    number,
    spin_rotation,
    thermal_density,
)

__all__ = [
    "Pulse",
    "Wait",
    "Measure",
    "SpinRotate",
    "PulseSequence",
    "SequenceResult",
    "run_sequence",
    "ShotRecord",
    "sample_shots",
    "shot_rng",
    "WignerGrid",
    "prepare_fock",
    "fock_preparation_sequence",
    "EcsPreparation",
    "prepare_ecs",
    "ConditionalForce",
    "WignerPipeline",
    "measure_wigner_point",
    "scan_wigner",
    "sample_wigner_grid",
    "plane_betas",
    "joint_parity_readout",
    "multimode_parity",
    "ParityFilterResult",
    "parity_filter_experiment",
    "sbs_time_scan",
    "calibrated_sbs_omega",
    "RamseyResult",
    "ramsey_scan",
    "ramsey_half_pulse",
    "common_mode_fidelity",
    "ThermometryResult",
    "sideband_thermometry",
    "heating_rate_scan",
    "sdf_breakdown_study",
    "sbs_breakdown_study",
    "FOUR_OVER_PI2",
]

FOUR_OVER_PI2 = 4.0 / np.pi ** 2
DEFAULT_SDF_OMEGA = 2 * np.pi * 100e3
DEFAULT_CARRIER_DETUNING = 2 * np.pi * 360e3


# ----------------------------------------------------------------------------
# generic sequences


@dataclass(frozen=True)
class Pulse:
    terms: tuple
    duration: float
    label: str = ""


@dataclass(frozen=True)
class Wait:
    duration: float
    label: str = "wait"


@dataclass(frozen=True)
class Measure:
    """Mid-circuit spin detection.

    ``herald`` is ``keep_down``, ``keep_up`` or ``record`` (no post-selection).
    ``heating_time`` is the detection window during which the motion heats.
    """

    herald: str = "keep_down"
    heating_time: float = 0.0
    label: str = "detect"

    def __post_init__(self):
        if self.herald not in ("keep_down", "keep_up", "record"):
            raise ValueError(f"unknown herald mode {self.herald!r}")


@dataclass(frozen=True)
class SpinRotate:
    """Instantaneous ``exp(-i angle/2 sigma_phi)``; ``axis`` is ``phi``."""

    axis: float
    angle: float
    label: str = "rotate"


@dataclass
class PulseSequence:
    segments: list = field(default_factory=list)
    clock_origin: float = 0.0

    def add(self, segment) -> "PulseSequence":
        if getattr(segment, "duration", 0.0) < 0:
            raise ValueError("segment durations must be non-negative")
        self.segments.append(segment)
        return self

    @property
    def duration(self) -> float:
        total = 0.0
        for seg in self.segments:
            total += getattr(seg, "duration", 0.0) + getattr(seg, "heating_time", 0.0)
        return total


@dataclass
class SequenceResult:
    state: DensityMatrix
    kept_probability: float
    end_time: float
    records: list = field(default_factory=list)


def run_sequence(seq: PulseSequence, rho0: DensityMatrix, noise: NoiseModel | None = None) -> SequenceResult:
    """Run a sequence on a density matrix with one shared clock.

    Pulses use the Lindblad engine when heating is on and an exact propagator
    otherwise.  Heralded detections renormalize the state and multiply the
    running keep probability.
    """
    space = rho0.space
    rho = rho0.matrix.copy()
    t = seq.clock_origin
    kept = 1.0
    records = []
    rates = noise.heat_rates if noise is not None else ()
    heating = noise is not None and noise.has_heating
    for seg in seq.segments:
        if isinstance(seg, Pulse):
            if heating:
                res = ev.propagate_lindblad(list(seg.terms), DensityMatrix.from_array(space, rho),
                                            noise, seg.duration, t_start=t)
                rho = res.final_state.matrix.copy()
            else:
                U = ev.unitary_propagator(list(seg.terms), space, seg.duration, t_start=t)
                rho = U @ rho @ U.conj().T
            t += seg.duration
        elif isinstance(seg, Wait):
            if heating:
                rho = ev.apply_heating(rho, rates, seg.duration, space)
            t += seg.duration
        elif isinstance(seg, SpinRotate):
            rho = apply_local(space, rho, spin_rotation(seg.angle, seg.axis), ["spin"])
        elif isinstance(seg, Measure):
            M = space.motional_dim
            blk = rho.reshape(2, M, 2, M)
            p_up = float(np.trace(blk[1, :, 1, :]).real)
            records.append((seg.label, t, p_up))
            if seg.herald != "record":
                keep = 0 if seg.herald == "keep_down" else 1
                p_keep = p_up if keep else 1.0 - p_up
                if p_keep <= 1e-12:
                    raise ValueError(f"herald at {seg.label!r} has zero acceptance probability")
                new = np.zeros_like(blk)
                new[keep, :, keep, :] = blk[keep, :, keep, :] / p_keep
                rho = new.reshape(rho.shape)
                kept *= p_keep
            else:
                new = np.zeros_like(blk)
                new[0, :, 0, :] = blk[0, :, 0, :]
                new[1, :, 1, :] = blk[1, :, 1, :]
                rho = new.reshape(rho.shape)
            if heating and seg.heating_time > 0:
                rho = ev.apply_heating(rho, rates, seg.heating_time, space)
            t += seg.heating_time
        else:
            raise TypeError(f"unknown segment {seg!r}")
    return SequenceResult(DensityMatrix.from_array(space, rho), kept, t, records)


# ----------------------------------------------------------------------------
# shots


@dataclass(frozen=True)
class ShotRecord:
    outcome: int
    timestamp: float
    kept: bool
    rng_seed: int


def shot_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Independent stream for task ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def sample_shots(p_up_true: float, shots: int, noise: NoiseModel | None, seed: int,
                 index: int = 0, *, timestamp: float = 0.0,
                 records: bool = False):
    """Draw ``shots`` bright/dark readings after the detection channel.

    Returns the number of bright readings, and the per-shot records when
    ``records`` is true.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    p = float(np.clip(p_up_true, 0.0, 1.0))
    if noise is not None:
        p = ev.detection_channel(p, noise)
    rng = shot_rng(seed, index)
    bits = rng.random(shots) < p
    k = int(bits.sum())
    if not records:
        return k
    return k, [ShotRecord(int(b), timestamp, True, int(seed)) for b in bits]


# ----------------------------------------------------------------------------
# Wigner grids


@dataclass
class WignerGrid:
    """Two-dimensional slice of the two-mode Wigner function.

    ``betas[i, j]`` holds the complex displacements ``(beta1, beta2)`` for
    grid cell ``(i, j)``; ``values[i, j]`` is indexed by ``beta1_axis[i]`` and
    ``beta2_axis[j]``.  ``shot_counts`` is zero in infinite-shot mode.
    """

    plane: str
    beta1_axis: np.ndarray
    beta2_axis: np.ndarray
    values: np.ndarray
    shot_counts: np.ndarray
    std_errors: np.ndarray
    betas: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.beta1_axis = np.asarray(self.beta1_axis, dtype=float)
        self.beta2_axis = np.asarray(self.beta2_axis, dtype=float)
        shape = (self.beta1_axis.size, self.beta2_axis.size)
        if self.beta1_axis.size == 0 or self.beta2_axis.size == 0:
            raise ValueError("grid axes must be non-empty")
        self.values = np.asarray(self.values, dtype=float).reshape(shape)
        self.shot_counts = np.asarray(self.shot_counts, dtype=int).reshape(shape)
        self.std_errors = np.asarray(self.std_errors, dtype=float).reshape(shape)
        if self.betas is None:
            self.betas = plane_betas(self.plane, self.beta1_axis, self.beta2_axis)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def p_up(self) -> np.ndarray:
        """Spin-up probability implied by each value."""
        return 0.5 * (1.0 - self.values / FOUR_OVER_PI2)


def plane_betas(plane: str, axis1, axis2) -> np.ndarray:
    """Complex displacement pairs for a named plane.

    ``real-real`` puts both axes on the real parts, ``imag-imag`` on the
    imaginary parts, ``real-imag`` mixes them.
    """
    x = np.asarray(axis1, dtype=float)[:, None]
    y = np.asarray(axis2, dtype=float)[None, :]
    table = {
        "real-real": (1.0, 1.0),
        "imag-imag": (1j, 1j),
        "real-imag": (1.0, 1j),
        "imag-real": (1j, 1.0),
    }
    if plane not in table:
        raise ValueError(f"unknown plane {plane!r}")
    u, v = table[plane]
    b1 = np.broadcast_to(u * x, (x.size, y.size))
    b2 = np.broadcast_to(v * y, (x.size, y.size))
    return np.stack([b1, b2], axis=-1).astype(complex)


# ----------------------------------------------------------------------------
# Fock-state preparation


def _transition_element(space: HilbertSpec, term, upper, lower) -> float:
    """``|<upper|H|lower>|`` for basis states given as (spin, n) tuples."""
    i = space.basis_index(upper[0], upper[1])
    j = space.basis_index(lower[0], lower[1])
    return abs(term.matrix(0.0)[i, j])


def fock_preparation_sequence(space: HilbertSpec, n1: int, n2: int, *,
                              omega: float = DEFAULT_SDF_OMEGA,
                              detection_time: float = 0.0) -> PulseSequence:
    """Alternating blue/red sideband pi pulses climbing to ``|n1, n2>``.

    Each pulse length is the exact pi time of its transition.  If the spin
    ends up, a carrier pi pulse returns it down, and a final heralded
    detection discards shots found up.
    """
    for j, n in enumerate((n1, n2)):
        if not 0 <= n < space.mode_dims[j]:
            raise IndexError(f"target n{j + 1}={n} outside truncation")
    seq = PulseSequence()
    spin = 0
    occ = [0] * space.n_modes
    for mode, target in ((0, n1), (1, n2)):
        while occ[mode] < target:
            order = +1 if spin == 0 else -1
            term = sideband_drive(space, mode, order, omega, 0.0)
            after = list(occ)
            after[mode] += 1
            up, down = ((1, after), (0, occ)) if spin == 0 else ((0, after), (1, occ))
            coupling = _transition_element(space, term, up, down)
            seq.add(Pulse((term,), np.pi / (2 * coupling), f"{'bsb' if order > 0 else 'rsb'}{mode + 1}"))
            occ = after
            spin = 1 - spin
    if spin == 1:
        term = sideband_drive(space, 0, 0, omega, 0.0)
        coupling = _transition_element(space, term, (0, occ), (1, occ))
        seq.add(Pulse((term,), np.pi / (2 * coupling), "carrier"))
    seq.add(Measure("keep_down", detection_time))
    return seq


def prepare_fock(space: HilbertSpec, n1: int, n2: int, noise: NoiseModel | None = None, *,
                 omega: float = DEFAULT_SDF_OMEGA, detection_time: float = 0.0) -> DensityMatrix:
    """Heralded two-mode Fock state starting from a thermal state with spin down."""
    nbar = noise.nbar_init if noise is not None else (0.0,) * space.n_modes
    rho0 = thermal_density(space, nbar)
    if n1 == 0 and n2 == 0:
        seq = PulseSequence([Measure("keep_down", detection_time)])
    else:
        seq = fock_preparation_sequence(space, n1, n2, omega=omega, detection_time=detection_time)
    return run_sequence(seq, rho0, noise).state


# ----------------------------------------------------------------------------
# structured spin-dependent force engine


def _sigma_x_basis() -> np.ndarray:
    """Columns are ``|+>`` and ``|->`` in the (down, up) basis."""
    return np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2)


@dataclass
class ConditionalForce:
    """Exact bichromatic force on one mode of a two-mode space, in the frame
    where the spin operator is ``sigma_x``.

    For spin eigenvalue ``s`` and other-mode level ``m`` the motional
    generator is ``s (Omega/2) g_m R(phi) M0 R(phi)^dag`` where ``M0`` is the
    Hermitian sideband part of ``exp(i eta x)`` at zero phase and ``g_m`` the
    other mode's Debye-Waller factor.
    """

    space: HilbertSpec
    mode: int
    omega: float = DEFAULT_SDF_OMEGA

    def __post_init__(self):
        if self.space.n_modes != 2:
            raise ValueError("ConditionalForce expects exactly two modes")
        d = self.space.mode_dims[self.mode]
        F = _displacement_kernel(d, self.space.lamb_dicke[self.mode])
        K = np.diag(np.diag(F, -1).imag, -1)  # raising part divided by i
        self.M0 = K + K.T
        self.w, self.V = np.linalg.eigh(self.M0)
        o = 1 - self.mode
        Fo = _displacement_kernel(self.space.mode_dims[o], self.space.lamb_dicke[o])
        self.g = np.diag(Fo).real.copy()
        self.coupling = float(self.M0[1, 0])  # eta e^{-eta^2/2}

    def duration_for(self, amplitude: float) -> float:
        """Length giving ``|alpha|`` for a ground-state mode."""
        return 2.0 * abs(amplitude) / (self.omega * self.coupling)

    def phase_for(self, target: complex, s: int) -> float:
        """Motional phase that displaces spin branch ``s`` towards ``target``."""
        # alpha_s = -i s e^{i phi} |alpha|
        return float(np.angle(target) + np.pi / 2 + (0.0 if s > 0 else np.pi))

    def unitaries(self, duration: float, phase: float, s: int) -> np.ndarray:
        """Stack ``(d_other, d, d)`` of single-mode propagators, one per other-mode level."""
        c = s * 0.5 * self.omega * duration * self.g  # (d_other,)
        r = np.exp(1j * phase * np.arange(self.M0.shape[0]))
        left = (r[:, None] * self.V)[None, :, :] * np.exp(-1j * np.outer(c, self.w))[:, None, :]
        return left @ (r[:, None] * self.V).conj().T

    def apply(self, X: np.ndarray, Ua: np.ndarray, Ub: np.ndarray) -> np.ndarray:
        """``U_a X U_b^dag`` for a motional block ``X`` (two-mode, flattened)."""
        d1, d2 = self.space.mode_dims
        T = X.reshape(d1, d2, d1, d2)
        Ubh = Ub.conj().transpose(0, 2, 1)
        if self.mode == 0:
            A = Ua @ T.transpose(1, 0, 2, 3).reshape(d2, d1, d1 * d2)
            T = A.reshape(d2, d1, d1, d2).transpose(1, 0, 2, 3)
            B = T.transpose(3, 0, 1, 2).reshape(d2, d1 * d2, d1) @ Ubh
            T = B.reshape(d2, d1, d2, d1).transpose(1, 2, 3, 0)
        else:
            T = (Ua @ T.reshape(d1, d2, d1 * d2)).reshape(d1, d2, d1, d2)
            B = T.transpose(2, 0, 1, 3).reshape(d1, d1 * d2, d2) @ Ubh
            T = B.reshape(d1, d1, d2, d2).transpose(1, 2, 0, 3)
        return np.ascontiguousarray(T).reshape(X.shape)


def _effective_phase(phase_fn: Callable[[float], float], t0: float, t1: float) -> float:
    """``arg int e^{i phi(t)} dt``: direction of the net small-amplitude kick."""
    if t1 <= t0:
        return float(phase_fn(t0))
    x, w = np.polynomial.legendre.leggauss(16)
    ts = 0.5 * (t1 - t0) * x + 0.5 * (t1 + t0)
    z = np.sum(w * np.exp(1j * np.array([phase_fn(t) for t in ts])))
    return float(np.angle(z))


class _Heating:
    """Equal-rate heating generator on a multimode motional block.

    Applied with index slicing: ``a X a^dag`` shifts both indices of mode
    ``j`` down by one with weights ``sqrt((n+1)(m+1))``.  The generator is
    its own adjoint, so the same object serves Heisenberg-picture steps.
    """

    def __init__(self, dims: Sequence[int], rates: Sequence[float]):
        self.dims = tuple(dims)
        nm = len(self.dims)
        self.terms = []
        for j, r in enumerate(rates):
            if r <= 0:
                continue
            d = self.dims[j]
            sq = np.sqrt(np.arange(1, d))
            shape_w = [1] * (2 * nm)
            shape_w[j] = d - 1
            shape_w[nm + j] = d - 1
            w = np.outer(sq, sq).reshape(shape_w)
            # diagonal of a^dag a + a a^dag in the truncated space (trace preserving)
            s = 2 * np.arange(d) + 1.0
            s[-1] = d - 1
            shape_r = [1] * (2 * nm)
            shape_r[j] = d
            shape_c = [1] * (2 * nm)
            shape_c[nm + j] = d
            diag = 0.5 * (s.reshape(shape_r) + s.reshape(shape_c))
            lo = [slice(None)] * (2 * nm)
            hi = [slice(None)] * (2 * nm)
            lo[j] = lo[nm + j] = slice(0, d - 1)
            hi[j] = hi[nm + j] = slice(1, d)
            self.terms.append((r, w, diag, tuple(lo), tuple(hi)))

    @property
    def active(self) -> bool:
        return bool(self.terms)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        T = X.reshape(self.dims + self.dims)
        out = np.zeros_like(T)
        for r, w, diag, lo, hi in self.terms:
            out[lo] += r * w * T[hi]
            out[hi] += r * w * T[lo]
            out -= r * diag * T
        return out.reshape(X.shape)

    def step(self, X: np.ndarray, dt: float, order: int = 3) -> np.ndarray:
        if not self.active or dt == 0:
            return X
        out = X.copy()
        term = X
        for k in range(1, order + 1):
            term = self(term) * (dt / k)
            out = out + term
        return out


def _heat_blocks(B: np.ndarray, heat: _Heating, dt: float) -> np.ndarray:
    """Heat sigma_x blocks; the lower off-diagonal block is the adjoint of the upper."""
    out = np.empty_like(B)
    out[0, 0] = heat.step(B[0, 0], dt)
    out[1, 1] = heat.step(B[1, 1], dt)
    out[0, 1] = heat.step(B[0, 1], dt)
    out[1, 0] = out[0, 1].conj().T
    return out


def _spin_blocks(rho: np.ndarray, M: int) -> np.ndarray:
    """Full (down, up) density matrix -> blocks ``B[s, s']`` in the sigma_x basis."""
    T = _sigma_x_basis()
    blk = rho.reshape(2, M, 2, M)
    return np.einsum("as,aibj,bt->sitj", T.conj(), blk, T).transpose(0, 2, 1, 3)


def _down_block(B: np.ndarray) -> np.ndarray:
    """``<down| rho |down>`` from sigma_x blocks."""
    T = _sigma_x_basis()
    return np.einsum("s,stij,t->ij", T[0], B, T[0].conj())


# ----------------------------------------------------------------------------
# ECS preparation


@dataclass
class EcsPreparation:
    state: DensityMatrix          # spin down times heralded motion
    motional: np.ndarray          # motional density matrix
    herald_probability: float
    sdf_durations: tuple
    end_time: float


def prepare_ecs(space: HilbertSpec, alpha1: complex, alpha2: complex, parity: str = "even",
                noise: NoiseModel | None = None, *, omega: float = DEFAULT_SDF_OMEGA,
                phi_noise: float = 0.0, detection_time: float = 250e-6,
                generation_time: float = 350e-6, slices_per_pulse: int = 6,
                include_nbar: bool = True, include_heating: bool = True,
                include_dephasing: bool = True) -> EcsPreparation:
    """Spin-dependent forces on each mode, then a heralded dark-state detection.

    The odd state is reached by flipping the spin before the forces.  After
    detection the motion heats for ``detection_time`` and then for the
    padding that fills ``generation_time``.  ``include_*`` switches turn off
    individual noise sources while keeping the rest.
    """
    if parity not in ("even", "odd"):
        raise ValueError("parity must be 'even' or 'odd'")
    if space.n_modes != 2 or not space.has_spin:
        raise ValueError("ECS preparation needs a spin and two modes")
    noise = noise or NoiseModel()
    nbar = noise.nbar_init if include_nbar else (0.0, 0.0)
    rates = noise.heat_rates if include_heating else (0.0, 0.0)
    drive = noise.noise_60hz if include_dephasing else None
    M = space.motional_dim
    rho0 = thermal_density(space, nbar, spin="down" if parity == "even" else "up").matrix
    B = _spin_blocks(rho0, M)
    heat = _Heating(space.mode_dims, rates)

    t = 0.0
    durations = []
    for mode, alpha in ((0, alpha1), (1, alpha2)):
        force = ConditionalForce(space, mode, omega)
        T = force.duration_for(alpha)
        durations.append(T)
        if T == 0:
            continue
        base = force.phase_for(alpha, +1)
        phase_fn = (noisy_motional_phase(drive.with_phase(phi_noise), base)
                    if drive is not None and drive.delta_amp > 0 else (lambda _t, b=base: b))
        static = drive is None or drive.delta_amp == 0
        n = 1 if (static and not heat.active) else slices_per_pulse
        dt = T / n
        if heat.active:
            B = _heat_blocks(B, heat, dt / 2)
        for k in range(n):
            ta, tb = t + k * dt, t + (k + 1) * dt
            ph = _effective_phase(phase_fn, ta, tb) if not static else base
            if k == 0 or not static:
                Up = force.unitaries(dt, ph, +1)
                Um = force.unitaries(dt, ph, -1)
            B[0, 0] = force.apply(B[0, 0], Up, Up)
            B[1, 1] = force.apply(B[1, 1], Um, Um)
            B[0, 1] = force.apply(B[0, 1], Up, Um)
            B[1, 0] = B[0, 1].conj().T
            if heat.active:
                B = _heat_blocks(B, heat, dt if k < n - 1 else dt / 2)
        t += T

    P = _down_block(B)
    p_keep = float(np.trace(P).real)
    if p_keep < 1e-3:
        raise ValueError(f"herald probability {p_keep:.2e} is below 1e-3")
    P = P / p_keep
    P = 0.5 * (P + P.conj().T)
    mspace = HilbertSpec(space.mode_dims, space.lamb_dicke, spin_dim=1)
    wait = detection_time + max(generation_time - t - detection_time, 0.0)
    if any(r > 0 for r in rates) and wait > 0:
        P = ev.apply_heating(P, rates, wait, mspace)
    end = max(generation_time, t + detection_time)
    full = np.zeros((2 * M, 2 * M), dtype=complex)
    full[:M, :M] = P
    return EcsPreparation(DensityMatrix.from_array(space, full), P, p_keep, tuple(durations), end)


# ----------------------------------------------------------------------------
# Wigner measurement


def _ideal_parity_blocks(dim: int, beta: complex) -> np.ndarray:
    """``D(-beta)^dag P D(-beta)`` on the first ``dim`` levels via a padded displacement."""
    r = abs(beta)
    big = int(dim + np.ceil(r * r + 12 * r + 40))
    D = displacement_matrix(big, -beta)[:, :dim]
    return (D.conj().T * ((-1.0) ** np.arange(big))[None, :]) @ D


def _sbs_readout_observable(space: HilbertSpec, noise: NoiseModel | None, kind: str,
                            pi_time: float, omega: float | None) -> np.ndarray:
    """Motional operator ``E`` with ``Tr[E rho] = <sigma_down - sigma_up>`` after the parity pulse,
    for a spin-down input."""
    M = space.motional_dim
    if kind == "ideal":
        mspace = HilbertSpec(space.mode_dims, space.lamb_dicke, spin_dim=1)
        K = beam_splitter_generator(mspace, 0.0)
        w, V = np.linalg.eigh(K)
        # <down| U^dag sigma_z' U |down> for U = exp(i pi/2 sigma_x K) is cos(pi K)
        return (V * np.cos(np.pi * w)) @ V.conj().T
    if kind != "exact":
        raise ValueError("readout kind must be 'ideal' or 'exact'")
    H = sbs_drive(space, omega, DrivePhases.from_spin_motion(0.0, 0.0)).static_matrix()
    # H = sigma_+ A + h.c. with A Hermitian, i.e. sigma_x (x) A
    A = H[M:, :M]
    if not np.allclose(A, A.conj().T, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("beam-splitter drive is not of the form sigma_x (x) A")
    w, V = np.linalg.eigh(A)
    rates = noise.heat_rates if noise is not None else ()
    heat = _Heating(space.mode_dims, rates)
    n = max(1, int(np.ceil(pi_time * 1.0e5))) if heat.active else 1
    dt = pi_time / n
    Up = (V * np.exp(-1j * dt * w)) @ V.conj().T
    Um = Up.conj()
    # observable sigma_down - sigma_up in the sigma_x basis: only off-diagonal blocks
    B = np.zeros((2, 2, M, M), dtype=complex)
    B[0, 1] = B[1, 0] = np.eye(M)
    if heat.active:
        B = _heat_blocks(B, heat, dt / 2)
    for k in range(n):
        B[0, 0] = Up.conj().T @ B[0, 0] @ Up
        B[1, 1] = Um.conj().T @ B[1, 1] @ Um
        B[0, 1] = Up.conj().T @ B[0, 1] @ Um
        B[1, 0] = B[0, 1].conj().T
        if heat.active:
            B = _heat_blocks(B, heat, dt if k < n - 1 else dt / 2)
    E = _down_block(B)
    return 0.5 * (E + E.conj().T)


def calibrated_sbs_omega(space: HilbertSpec, pi_time: float) -> float:
    """Carrier Rabi frequency whose exact beam-splitter pi time on ``|1,0>`` is ``pi_time``."""
    H = sbs_drive(space, 1.0, DrivePhases.from_spin_motion(0.0, 0.0))
    elem = _transition_element(space, H, (1, [0, 1]), (0, [1, 0]))
    return np.pi / (2.0 * elem * pi_time)


@dataclass
class WignerPipeline:
    """Displaced-parity measurement on a spin-down, two-mode input.

    ``readout='ideal'`` uses the ideal beam-splitter pi pulse with perfect
    displacements: the value is then exact for the truncated input (the
    displacement is carried out in a padded space).  ``readout='exact'`` uses
    the exact Raman drives in the working truncation, with optional heating
    during the displacement (``d_noise``) and parity pulse (``m_noise``) and
    60-Hz phase noise on the displacement forces.  ``readout='direct'`` keeps
    the exact displacement forces but reads the joint parity directly.
    """

    space: HilbertSpec
    readout: str = "ideal"
    d_noise: NoiseModel | None = None
    m_noise: NoiseModel | None = None
    sdf_omega: float = DEFAULT_SDF_OMEGA
    sbs_pi_time: float = 550e-6
    clock_start: float = 350e-6
    spin_branch: int = -1

    def __post_init__(self):
        if self.space.n_modes != 2:
            raise ValueError("the Wigner pipeline measures two modes")
        if self.readout not in ("ideal", "exact", "direct"):
            raise ValueError("readout must be 'ideal', 'exact' or 'direct'")
        self._cache: dict = {}
        if self.readout != "ideal":
            self.forces = (ConditionalForce(self.space, 0, self.sdf_omega),
                           ConditionalForce(self.space, 1, self.sdf_omega))
            if self.readout == "exact":
                self.sbs_omega = calibrated_sbs_omega(self.space, self.sbs_pi_time)
                E = _sbs_readout_observable(self.space, self.m_noise, "exact", self.sbs_pi_time,
                                            self.sbs_omega)
            else:
                d1, d2 = self.space.mode_dims
                par = np.outer((-1.0) ** np.arange(d1), (-1.0) ** np.arange(d2)).reshape(-1)
                E = np.diag(par).astype(complex)
            rates = self.d_noise.heat_rates if self.d_noise is not None else (0.0, 0.0)
            heat = _Heating(self.space.mode_dims, rates)
            # heating commutes with displacements, so it is folded into the observable
            E1 = heat(E) if heat.active else np.zeros_like(E)
            E2 = heat(E1) if heat.active else np.zeros_like(E)
            self._E = (E, E1, E2)

    # -- helpers -----------------------------------------------------------
    def _motional(self, rho) -> np.ndarray:
        if isinstance(rho, DensityMatrix):
            if rho.space.has_spin:
                M = rho.space.motional_dim
                blk = rho.matrix.reshape(2, M, 2, M)
                if abs(blk[1, :, 1, :].trace()) > 1e-9:
                    raise ValueError("the Wigner pipeline expects a spin-down input")
                return blk[0, :, 0, :]
            return rho.matrix
        return np.asarray(rho)

    def _pulse_phases(self, betas, phi_noise: float):
        drive = self.d_noise.noise_60hz if self.d_noise is not None else None
        phases = []
        durations = []
        t = self.clock_start
        for force, beta in zip(self.forces, betas):
            target = -complex(beta)
            T = force.duration_for(target)
            base = force.phase_for(target, self.spin_branch)
            if drive is not None and drive.delta_amp > 0 and T > 0:
                fn = noisy_motional_phase(drive.with_phase(phi_noise), base)
                phases.append(_effective_phase(fn, t, t + T))
            else:
                phases.append(base)
            durations.append(T)
            t += T
        return phases, durations

    def displacement_durations(self, betas) -> tuple:
        forces = self.forces if self.readout != "ideal" else (
            ConditionalForce(self.space, 0, self.sdf_omega), ConditionalForce(self.space, 1, self.sdf_omega))
        return tuple(f.duration_for(b) for f, b in zip(forces, betas))

    def p_up(self, rho, betas, phi_noise: float = 0.0) -> float:
        """Probability of reading the spin up (before detection errors)."""
        return 0.5 * (1.0 - self.value(rho, betas, phi_noise) / FOUR_OVER_PI2)

    def value(self, rho, betas, phi_noise: float = 0.0) -> float:
        """Infinite-shot Wigner value ``(4/pi^2) <sigma_down - sigma_up>``."""
        X = self._motional(rho)
        betas = [complex(b) for b in betas]
        if self.readout == "ideal":
            d1, d2 = self.space.mode_dims
            Q1 = _ideal_parity_blocks(d1, betas[0])
            Q2 = _ideal_parity_blocks(d2, betas[1])
            T = X.reshape(d1, d2, d1, d2)
            val = np.einsum("ikjl,ji,lk->", T, Q1, Q2)
            self._guard(X, betas)
            return float(FOUR_OVER_PI2 * val.real)
        phases, durations = self._pulse_phases(betas, phi_noise)
        Y = X
        for force, ph, T in zip(self.forces, phases, durations):
            if T == 0:
                continue
            U = force.unitaries(T, ph, self.spin_branch)
            Y = force.apply(Y, U, U)
        tD = sum(durations)
        E0, E1, E2 = self._E
        val = np.sum(E0.T * Y)
        if tD > 0 and self.d_noise is not None and self.d_noise.has_heating:
            val = val + tD * np.sum(E1.T * Y) + 0.5 * tD * tD * np.sum(E2.T * Y)
        return float(FOUR_OVER_PI2 * val.real)

    def _guard(self, X: np.ndarray, betas) -> None:
        d1, d2 = self.space.mode_dims
        pops = np.real(np.diag(X)).reshape(d1, d2)
        top = pops[-1, :].sum() + pops[:, -1].sum()
        if top > 1e-4:
            warnings.warn(f"input has {top:.2e} weight on the top Fock level", TruncationWarning,
                          stacklevel=3)

    def grid(self, rho, betas: np.ndarray, phi_noise: float = 0.0, workers: int = 1) -> np.ndarray:
        flat = betas.reshape(-1, 2)
        X = self._motional(rho)

        def one(k):
            return self.value(X, flat[k], phi_noise)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                vals = list(pool.map(one, range(len(flat))))
        else:
            vals = [one(k) for k in range(len(flat))]
        return np.array(vals).reshape(betas.shape[:-1])


def measure_wigner_point(prep, beta: Sequence[complex], shots: int | None = None,
                         noise: NoiseModel | None = None, mode: str = "infinite_shot", *,
                         pipeline: WignerPipeline | None = None, seed: int = 0, index: int = 0,
                         phi_noise: float = 0.0) -> tuple[float, float]:
    """Wigner value at ``beta`` and its standard error.

    ``prep`` is a density matrix (spin down or motion only).  In sampled mode
    the spin probability passes through the detection channel, is sampled
    with ``shots`` Bernoulli trials, and is then corrected; the standard
    error is the propagated binomial error.
    """
    if pipeline is None:
        space = prep.space if prep.space.has_spin else HilbertSpec(prep.space.mode_dims,
                                                                    prep.space.lamb_dicke)
        pipeline = WignerPipeline(space)
    p = pipeline.p_up(prep, beta, phi_noise)
    if mode == "infinite_shot":
        return FOUR_OVER_PI2 * (1.0 - 2.0 * p), 0.0
    if mode != "sampled":
        raise ValueError("mode must be 'infinite_shot' or 'sampled'")
    if shots is None or shots < 1:
        raise ValueError("sampled mode needs shots >= 1")
    noise = noise or NoiseModel()
    k = sample_shots(p, shots, noise, seed, index)
    qu, qd = noise.detect_up_given_up, noise.detect_up_given_down
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        p_corr = ev.detection_correct(k / shots, qu, qd)
    p_meas = k / shots
    stderr = 2 * FOUR_OVER_PI2 * math.sqrt(p_meas * (1 - p_meas) / shots) / (qu - qd)
    return FOUR_OVER_PI2 * (1.0 - 2.0 * p_corr), stderr


def sample_wigner_grid(W: np.ndarray, plane: str, axes: tuple, shots: int, noise: NoiseModel | None,
                       seed: int, betas: np.ndarray | None = None, metadata: dict | None = None) -> WignerGrid:
    """Finite-shot version of an exact Wigner grid.

    Every cell draws ``shots`` detections from its own random stream,
    passes them through the detection channel of ``noise`` and corrects
    back; the standard error is the propagated binomial error.
    """
    if shots is None or shots < 1:
        raise ValueError("sampled mode needs shots >= 1")
    axis1, axis2 = (np.asarray(a, dtype=float) for a in axes)
    noise = noise or NoiseModel()
    qu, qd = noise.detect_up_given_up, noise.detect_up_given_down
    p = 0.5 * (1.0 - np.asarray(W, dtype=float) / FOUR_OVER_PI2)
    vals = np.empty(p.shape)
    errs = np.empty(p.shape)
    for k, pk in enumerate(p.reshape(-1)):
        pm = sample_shots(pk, shots, noise, seed, k) / shots
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            pc = ev.detection_correct(pm, qu, qd)
        vals.flat[k] = FOUR_OVER_PI2 * (1 - 2 * pc)
        errs.flat[k] = 2 * FOUR_OVER_PI2 * math.sqrt(pm * (1 - pm) / shots) / (qu - qd)
    meta = {"mode": "sampled", "seed": seed, **(metadata or {})}
    return WignerGrid(plane, axis1, axis2, vals, np.full(p.shape, shots), errs, betas, meta)


def scan_wigner(prep, plane: str, axes: tuple, shots: int | None = None,
                noise: NoiseModel | None = None, *, mode: str = "infinite_shot",
                pipeline: WignerPipeline | None = None, seed: int = 0,
                phi_noises: Sequence[float] | None = None, workers: int = 1) -> WignerGrid:
    """Grid of Wigner values over a plane.

    With ``phi_noises`` the infinite-shot value is averaged over the listed
    60-Hz phases before any sampling; ``prep`` may then be a list holding
    the state prepared at each of those phases.  Each grid cell draws from
    its own random stream, so results do not depend on ``workers``.
    """
    if mode not in ("infinite_shot", "sampled"):
        raise ValueError("mode must be 'infinite_shot' or 'sampled'")
    axis1, axis2 = (np.asarray(a, dtype=float) for a in axes)
    if axis1.size == 0 or axis2.size == 0:
        raise ValueError("grid axes must be non-empty")
    betas = plane_betas(plane, axis1, axis2)
    phases = list(phi_noises) if phi_noises is not None else [0.0]
    states = list(prep) if isinstance(prep, (list, tuple)) else [prep] * len(phases)
    if len(states) != len(phases):
        raise ValueError("need one prepared state per noise phase")
    if pipeline is None:
        sp = states[0].space
        pipeline = WignerPipeline(sp if sp.has_spin else HilbertSpec(sp.mode_dims, sp.lamb_dicke))
    W = np.mean([pipeline.grid(st, betas, ph, workers) for st, ph in zip(states, phases)], axis=0)
    if mode == "infinite_shot":
        shape = W.shape
        return WignerGrid(plane, axis1, axis2, W, np.zeros(shape, int), np.zeros(shape),
                          betas, {"mode": mode, "seed": seed})
    return sample_wigner_grid(W, plane, (axis1, axis2), shots, noise, seed, betas)


# ----------------------------------------------------------------------------
# parity readout


def joint_parity_readout(rho: DensityMatrix, phi_M: float = 0.0,
                         pair: Sequence[int] = (0, 1)):
    """Ideal beam-splitter pi pulse followed by spin detection.

    Returns ``(p_even, post_even, post_odd)`` where the post-measurement
    states are the renormalized branches (``None`` if the branch has zero
    weight).  The input spin should be down.
    """
    space = rho.space
    U = ideal_sbs_unitary(space, np.pi, DrivePhases.from_spin_motion(0.0, phi_M), pair)
    out = U @ rho.matrix @ U.conj().T
    M = space.motional_dim
    blk = out.reshape(2, M, 2, M)
    p_even = float(np.trace(blk[0, :, 0, :]).real)
    p_odd = float(np.trace(blk[1, :, 1, :]).real)

    def branch(k, p):
        if p < 1e-14:
            return None
        new = np.zeros_like(blk)
        new[k, :, k, :] = blk[k, :, k, :] / p
        return DensityMatrix.from_array(space, new.reshape(out.shape))

    return p_even / (p_even + p_odd), branch(0, p_even), branch(1, p_odd)


def multimode_parity(rho: DensityMatrix, pairing: Sequence[tuple[int, int]] | None = None, *,
                     max_dim: int = 4096) -> dict:
    """Total joint parity of many modes read out by successive beam-splitter pi pulses.

    With an odd mode count a vacuum auxiliary mode is appended.  Returns the
    spin outcome distribution ``{'down': p, 'up': 1 - p}``.
    """
    space = rho.space
    m = rho.matrix
    if space.n_modes % 2:
        dims = space.mode_dims + (2,)
        etas = space.lamb_dicke + (0.1,)
        new_space = HilbertSpec(dims, etas, space.spin_dim)
        if new_space.dim > max_dim:
            raise ValueError(f"dimension {new_space.dim} exceeds the cap {max_dim}")
        vac = np.zeros((2, 2))
        vac[0, 0] = 1.0
        m = np.kron(m, vac)
        space = new_space
    if space.dim > max_dim:
        raise ValueError(f"dimension {space.dim} exceeds the cap {max_dim}")
    if pairing is None:
        pairing = [(2 * k, 2 * k + 1) for k in range(space.n_modes // 2)]
    for pair in pairing:
        U = ideal_sbs_unitary(space, np.pi, DrivePhases.from_spin_motion(0.0, 0.0), pair)
        m = U @ m @ U.conj().T
    M = space.motional_dim
    blk = m.reshape(2, M, 2, M)
    p_up = float(np.trace(blk[1, :, 1, :]).real)
    return {"down": 1.0 - p_up, "up": p_up}


# ----------------------------------------------------------------------------
# parity filtering


@dataclass
class ParityFilterResult:
    populations: dict            # stage -> (d1, d2) population array
    slices: dict                 # stage -> Wigner values on beta1 = 0
    beta2_axis: np.ndarray
    keep_probability: float
    states: dict


def parity_filter_experiment(noise: NoiseModel, t_wait: float = 10e-3, shots: int | None = None, *,
                             dims: tuple = (8, 8), lamb_dicke: tuple = (0.1, 0.087),
                             sbs_pi_time: float = 550e-6, beta2_axis=None,
                             readout: str = "exact", seed: int = 0) -> ParityFilterResult:
    """Prepare ``|1,1>``, wait, then measure with and without parity post-selection.

    Stage ``A1`` is right after preparation, ``A2`` after the wait, ``A3``
    after a heralded even-parity readout.  The beam splitter swaps the modes,
    so ``A3`` populations are reported with mode labels swapped back.
    """
    space = HilbertSpec(dims, lamb_dicke)
    rho1 = prepare_fock(space, 1, 1, noise)
    rho2 = ev.apply_heating(rho1, noise.heat_rates, t_wait)
    if readout == "exact":
        omega = calibrated_sbs_omega(space, sbs_pi_time)
        H = sbs_drive(space, omega, DrivePhases.from_spin_motion(0.0, 0.0))
        if noise.has_heating:
            out = ev.propagate_lindblad([H], rho2, noise, sbs_pi_time).final_state
        else:
            U = ev.unitary_propagator([H], space, sbs_pi_time)
            out = DensityMatrix.from_array(space, U @ rho2.matrix @ U.conj().T)
    else:
        U = ideal_sbs_unitary(space, np.pi, DrivePhases.from_spin_motion(0.0, 0.0))
        out = DensityMatrix.from_array(space, U @ rho2.matrix @ U.conj().T)
    M = space.motional_dim
    blk = out.matrix.reshape(2, M, 2, M)
    p_keep = float(np.trace(blk[0, :, 0, :]).real)
    post = blk[0, :, 0, :] / p_keep
    d1, d2 = dims
    post_swapped = post.reshape(d1, d2, d1, d2).transpose(1, 0, 3, 2).reshape(M, M) \
        if d1 == d2 else post
    mspace = HilbertSpec(dims, lamb_dicke, spin_dim=1)
    states = {
        "A1": DensityMatrix.from_array(mspace, motional_matrix(rho1)),
        "A2": DensityMatrix.from_array(mspace, motional_matrix(rho2)),
        "A3": DensityMatrix.from_array(mspace, post_swapped),
    }
    pops = {k: np.real(np.diag(v.matrix)).reshape(dims) for k, v in states.items()}
    if beta2_axis is None:
        beta2_axis = np.linspace(-2.0, 2.0, 41)
    beta2_axis = np.asarray(beta2_axis, dtype=float)
    pipe = WignerPipeline(HilbertSpec(dims, lamb_dicke))
    slices = {}
    for k, st in states.items():
        grid = scan_wigner(st, "real-real", ([0.0], beta2_axis), shots,
                           mode="sampled" if shots else "infinite_shot", pipeline=pipe, seed=seed)
        slices[k] = grid.values[0]
    return ParityFilterResult(pops, slices, beta2_axis, p_keep, states)


# ----------------------------------------------------------------------------
# beam-splitter time scan


def sbs_time_scan(n1: int, n2: int, t_axis, noise: NoiseModel | None = None, *,
                  omega: float = 2 * np.pi * 103e3, dims: tuple = (6, 6),
                  lamb_dicke: tuple = (0.1, 0.087), prepare: bool = False,
                  carrier_detuning: float | None = None, round_times: bool = True,
                  readout: str = "exact") -> dict:
    """Spin-up probability versus beam-splitter interaction time.

    ``carrier_detuning`` adds the off-resonant bichromatic carrier; with
    ``round_times`` every time is rounded to a whole carrier period first.
    ``readout='ideal'`` uses the leading-order generator instead of the
    exact drives.  Detection errors are applied and then corrected, which
    is the identity in expectation.
    """
    space = HilbertSpec(dims, lamb_dicke)
    ts = np.asarray(t_axis, dtype=float)
    delta = carrier_detuning
    if round_times and delta:
        ts = round_to_carrier_period(ts, delta)
    phases = DrivePhases.from_spin_motion(0.0, 0.0)
    if prepare:
        rho0 = prepare_fock(space, n1, n2, noise, omega=omega)
    else:
        nb = noise.nbar_init if noise is not None else (0.0, 0.0)
        if any(nb):
            base = thermal_density(space, nb).matrix
            # displace populations upward to the target while keeping the thermal spread
            rho0 = DensityMatrix.from_array(space, _shift_fock(base, space, (n1, n2)))
        else:
            rho0 = fock_state(space, "down", [n1, n2]).dm()
    if readout == "ideal":
        g = space.lamb_dicke[0] * space.lamb_dicke[1] * omega
        terms = [StaticTerm(ideal_sbs_generator(space, phases), g)]
    else:
        terms = [sbs_drive(space, omega, phases)]
    if delta:
        terms.append(bichromatic_carrier(space, omega, delta, phases))
    order = np.argsort(ts)
    p = np.empty(ts.size)
    if noise is not None and noise.has_heating:
        res = ev.propagate_lindblad(terms, rho0, noise, float(ts.max()), ts[order])
        p[order] = res.expectations["p_up"]
    else:
        res = _pure_or_mixed_unitary(terms, rho0, float(ts.max()), ts[order])
        p[order] = res
    if noise is not None:
        p_meas = ev.detection_channel(p, noise)
        p = ev.detection_correct(p_meas, noise.detect_up_given_up, noise.detect_up_given_down,
                                 clamp=False)
    return {"t": ts, "p_up": p}


def _shift_fock(thermal: np.ndarray, space: HilbertSpec, target) -> np.ndarray:
    """Relabel a diagonal thermal state so each mode starts at ``target`` instead of 0."""
    d1, d2 = space.mode_dims
    pops = np.real(np.diag(thermal)).reshape(2, d1, d2)[0]
    out = np.zeros((2, d1, d2))
    n1, n2 = target
    out[0, n1:, n2:] = pops[: d1 - n1, : d2 - n2]
    out /= out.sum()
    return np.diag(out.reshape(-1)).astype(complex)


def _pure_or_mixed_unitary(terms, rho0: DensityMatrix, duration: float, ts) -> np.ndarray:
    space = rho0.space
    w, V = np.linalg.eigh(rho0.matrix)
    keep = w > 1e-12
    p = np.zeros(len(ts))
    for wk, vk in zip(w[keep], V[:, keep].T):
        res = ev.propagate_unitary(terms, StateVector(space, vk), duration, ts)
        p += wk * res.expectations["p_up"]
    return p


# ----------------------------------------------------------------------------
# Ramsey contrast


@dataclass
class RamseyResult:
    t_wait: np.ndarray
    contrast: np.ndarray
    flagged: np.ndarray
    fits: dict
    final_states: list = field(default_factory=list, repr=False)


def _gauss_hermite(n: int):
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / w.sum()


def _ramsey_space(kind: str) -> tuple[HilbertSpec, np.ndarray]:
    if kind == "bsb":
        space = HilbertSpec((3, 2), (0.1, 0.087))
        psi0 = fock_state(space, "down", (0, 0)).amplitudes
    else:
        space = HilbertSpec((3, 3), (0.1, 0.087))
        psi0 = fock_state(space, "down", (1, 0)).amplitudes
    return space, psi0


def ramsey_half_pulse(space: HilbertSpec, kind: str, phase: float = 0.0) -> np.ndarray:
    """Ideal pi/2 pulse on the blue sideband of mode 1 or on the beam splitter."""
    if kind == "sbs":
        return ideal_sbs_unitary(space, 0.5 * np.pi, DrivePhases.from_spin_motion(phase, 0.0))
    a = embed(space, _lowering(space.mode_dims[0]), 0)
    sp = embed(space, np.array([[0, 0], [1, 0]], dtype=complex), "spin")
    G = sp @ a.conj().T * np.exp(1j * phase)
    G = G + G.conj().T
    # |down,0> <-> |up,1> has matrix element 1; higher rungs are not visited
    w, V = np.linalg.eigh(G)
    return (V * np.exp(-0.25j * np.pi * w)) @ V.conj().T


def _mode_numbers(space: HilbertSpec) -> tuple[np.ndarray, np.ndarray]:
    n1 = np.real(np.diag(embed(space, np.diag(np.arange(space.mode_dims[0], dtype=float)), 0)))
    n2 = np.real(np.diag(embed(space, np.diag(np.arange(space.mode_dims[1], dtype=float)), 1)))
    return n1, n2


def ramsey_scan(kind: str, t_wait_axis, *, shot_sigma: tuple = (0.0, 0.0),
                shot_correlation: float = 1.0,
                sinusoid: NoiseDrive | None = None, sinusoid_modes: tuple = (1.0, 1.0),
                differential_dephasing: float = 0.0, n_phase_points: int = 16,
                n_quadrature: int = 24, n_noise_phases: int = 8) -> RamseyResult:
    """Ramsey contrast of a blue-sideband or beam-splitter superposition.

    Two ideal pi/2 pulses bracket a free wait during which each mode picks
    up the phase of its frequency excursion.  Noise sources:

    ``shot_sigma``
        per-mode standard deviations (rad/s) of a detuning that is constant
        within a shot; ``shot_correlation`` sets the correlation between modes.
    ``sinusoid``
        a 60-Hz style detuning applied to mode ``j`` with weight
        ``sinusoid_modes[j]``; ``(1, 1)`` is common mode, ``(1, -1)``
        differential.  The line phase is averaged over ``n_noise_phases``.
    ``differential_dephasing``
        rate of a Lindblad term ``D[n1 - n2]`` during the wait.

    The phase of the second pulse is scanned and a sinusoid fitted; the
    contrast is twice the fitted amplitude.
    """
    if kind not in ("bsb", "sbs"):
        raise ValueError("kind must be 'bsb' or 'sbs'")
    if not -1.0 <= shot_correlation <= 1.0:
        raise ValueError("shot_correlation must lie in [-1, 1]")
    t_wait = np.asarray(t_wait_axis, dtype=float)
    phis = np.linspace(0, 2 * np.pi, n_phase_points, endpoint=False)
    space, psi0 = _ramsey_space(kind)
    n1, n2 = _mode_numbers(space)
    psi1 = ramsey_half_pulse(space, kind) @ psi0
    closing = [ramsey_half_pulse(space, kind, p) for p in phis]
    up = embed(space, np.diag([0.0, 1.0]), "spin").diagonal().real

    # shot-to-shot detuning samples (per-mode rad/s) and weights
    if any(shot_sigma):
        z, wz = _gauss_hermite(n_quadrature)
        if abs(shot_correlation) == 1.0 or not all(shot_sigma):
            det = np.column_stack([shot_sigma[0] * z, shot_sigma[1] * shot_correlation * z
                                   if shot_sigma[0] else shot_sigma[1] * z])
            wts = wz
        else:
            z1, z2 = np.meshgrid(z, z, indexing="ij")
            c = shot_correlation
            det = np.column_stack([shot_sigma[0] * z1.ravel(),
                                   shot_sigma[1] * (c * z1 + math.sqrt(1 - c * c) * z2).ravel()])
            wts = np.outer(wz, wz).ravel()
    else:
        det = np.zeros((1, 2))
        wts = np.ones(1)
    noise_ph = ev.noise_phases(n_noise_phases) if sinusoid is not None else np.zeros(1)
    diff = n1 - n2

    contrast = np.empty(t_wait.size)
    flagged = np.zeros(t_wait.size, bool)
    finals = []
    for i, tw in enumerate(t_wait):
        rho = np.zeros((space.dim, space.dim), complex)
        for ph in noise_ph:
            # the wait starts right after the first pulse; take t = 0 there
            integ = sinusoid.with_phase(ph).integrated(tw) if sinusoid is not None else 0.0
            for (d1, d2), wk in zip(det, wts):
                phase = (d1 * tw + sinusoid_modes[0] * integ) * n1 \
                    + (d2 * tw + sinusoid_modes[1] * integ) * n2
                psi = np.exp(-1j * phase) * psi1
                rho += (wk / noise_ph.size) * np.outer(psi, psi.conj())
        if differential_dephasing:
            rho *= np.exp(-0.5 * differential_dephasing * tw * (diff[:, None] - diff[None, :]) ** 2)
        finals.append(rho)
        p = np.array([np.real(np.einsum("ij,jk,ik->i", U, rho, U.conj())) @ up for U in closing])
        A = np.column_stack([np.ones_like(phis), np.cos(phis), np.sin(phis)])
        coef, *_ = np.linalg.lstsq(A, p, rcond=None)
        contrast[i] = 2 * math.hypot(coef[1], coef[2])
        flagged[i] = not np.isfinite(contrast[i])
    fits = _decay_fits(t_wait, contrast)
    return RamseyResult(t_wait, contrast, flagged, fits, finals)


def common_mode_fidelity(detuning: Callable[[float], float], duration: float, *,
                         n: tuple = (1, 0), g: float = 2 * np.pi * 1e3, weights: tuple = (1.0, 1.0),
                         dims: tuple = (4, 4)) -> float:
    """Fidelity between beam-splitter evolution with and without a mode-frequency excursion.

    ``detuning(t)`` (rad/s) is applied to mode ``j`` scaled by ``weights[j]``;
    equal weights give a common-mode excursion.
    """
    space = HilbertSpec(dims, (0.1, 0.087))
    psi0 = fock_state(space, "down", n)
    sbs = StaticTerm(ideal_sbs_generator(space, DrivePhases.from_spin_motion()), g)
    N = Operator(space, weights[0] * number(space, 0).matrix + weights[1] * number(space, 1).matrix)
    ref = ev.propagate_unitary([sbs], psi0, duration).final_state.amplitudes
    noisy = ev.propagate_unitary([sbs, DetuningTerm(N, detuning)], psi0, duration).final_state.amplitudes
    return float(abs(np.vdot(ref, noisy)) ** 2)


def _decay_fits(t: np.ndarray, c: np.ndarray) -> dict:
    out = {}
    if t.size < 3 or np.all(c > 1 - 1e-12):
        return out
    for name, f in (("gaussian", lambda g, t: np.exp(-g * t * t)), ("exponential", lambda g, t: np.exp(-g * t))):
        scale = 1.0 / max(t.max(), 1e-12)
        g0 = scale ** 2 if name == "gaussian" else scale
        res = least_squares(lambda x: f(abs(x[0]) * g0, t) - c, [1.0])
        out[name] = {"rate": abs(res.x[0]) * g0, "residual": float(np.sqrt(np.mean(res.fun ** 2)))}
    return out


# ----------------------------------------------------------------------------
# thermometry


@dataclass
class ThermometryResult:
    nbar: float
    nbar_error: float
    t: np.ndarray
    bsb: np.ndarray
    rsb: np.ndarray


def _sideband_rates(dim: int, eta: float, omega: float) -> np.ndarray:
    """Exact blue-sideband Rabi rates ``Omega |<n+1|e^{i eta x}|n>|`` for n = 0..dim-2."""
    F = _displacement_kernel(dim + 1, eta)
    return omega * np.abs(np.diag(F, -1))[:dim]


def _sideband_curves(nbar: float, t: np.ndarray, rates: np.ndarray):
    n = np.arange(rates.size)
    p = (nbar / (nbar + 1)) ** n / (nbar + 1) if nbar > 0 else (n == 0).astype(float)
    p = p / p.sum()
    s = np.sin(0.5 * np.outer(t, rates)) ** 2
    bsb = s @ p
    rsb = s[:, :-1] @ p[1:]
    return bsb, rsb


def sideband_thermometry(nbar_true: float, t_axis, shots: int = 200, *, seed: int = 0,
                         eta: float = 0.1, omega: float = DEFAULT_SDF_OMEGA,
                         dim: int = 40) -> ThermometryResult:
    """Simulate red and blue sideband flops of a thermal mode and fit one ``nbar``."""
    if nbar_true < 0:
        raise ValueError("nbar must be non-negative")
    t = np.asarray(t_axis, dtype=float)
    rates = _sideband_rates(dim, eta, omega)
    bsb, rsb = _sideband_curves(nbar_true, t, rates)
    rng = shot_rng(seed, 0)
    kb = rng.binomial(shots, np.clip(bsb, 0, 1)) / shots
    kr = rng.binomial(shots, np.clip(rsb, 0, 1)) / shots

    def resid(x):
        b, r = _sideband_curves(abs(x[0]), t, rates)
        return np.concatenate([b - kb, r - kr])

    res = least_squares(resid, [max(nbar_true, 0.02) * 1.3 + 0.01])
    J = res.jac
    dof = max(2 * t.size - 1, 1)
    s2 = float(np.sum(res.fun ** 2) / dof)
    JTJ = float((J.T @ J)[0, 0])
    if JTJ <= 0:
        raise ValueError("degenerate thermometry fit")
    return ThermometryResult(abs(float(res.x[0])), math.sqrt(s2 / JTJ), t, kb, kr)


def heating_rate_scan(rate: float, waits, *, nbar0: float = 0.03, shots: int = 200, seed: int = 0,
                      t_axis=None, **kw) -> dict:
    """Thermometry after each wait, then a weighted line fit of ``nbar`` versus wait."""
    waits = np.asarray(waits, dtype=float)
    if t_axis is None:
        t_axis = np.arange(0, 1e-3 + 1e-12, 5e-6)
    ests = [sideband_thermometry(nbar0 + rate * w, t_axis, shots, seed=seed + k, **kw)
            for k, w in enumerate(waits)]
    y = np.array([e.nbar for e in ests])
    s = np.array([max(e.nbar_error, 1e-6) for e in ests])
    A = np.column_stack([np.ones_like(waits), waits]) / s[:, None]
    coef, *_ = np.linalg.lstsq(A, y / s, rcond=None)
    cov = np.linalg.inv(A.T @ A)
    return {"rate": float(coef[1]), "rate_error": float(math.sqrt(cov[1, 1])),
            "nbar0": float(coef[0]), "nbar": y, "nbar_error": s, "waits": waits}


# ----------------------------------------------------------------------------
# Lamb-Dicke breakdown


def sdf_breakdown_study(targets: Sequence[float], eta: float = 0.1, dim: int = 200,
                        omega: float = DEFAULT_SDF_OMEGA) -> dict:
    """Exact single-mode force aimed at ``|target>`` with the leading-order duration.

    The spin starts in a ``sigma_x`` eigenstate, so the motion evolves
    unitarily.  Reports the mean phonon number reached and the fidelity to the
    coherent state with that mean number and the same phase.
    """
    F = _displacement_kernel(dim, eta)
    K = np.diag(np.diag(F, -1).imag, -1)
    M0 = K + K.T
    w, V = np.linalg.eigh(M0)
    n = np.arange(dim)
    nbar, fid = [], []
    for alpha in targets:
        T = 2 * abs(alpha) / (eta * omega)
        psi = V @ (np.exp(-1j * 0.5 * omega * T * w) * V[0].conj())
        pn = np.abs(psi) ** 2
        nb = float(pn @ n)
        a_mean = np.vdot(psi[:-1], np.sqrt(n[1:]) * psi[1:])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            ref = coherent_amplitudes(dim, math.sqrt(nb) * np.exp(1j * np.angle(a_mean)))
        nbar.append(nb)
        fid.append(float(abs(np.vdot(ref, psi)) ** 2))
    return {"target": np.asarray(targets, float), "nbar": np.array(nbar), "fidelity": np.array(fid)}


def sbs_breakdown_study(ns: Sequence[int], lamb_dicke: tuple = (0.1, 0.087),
                        omega: float = 2 * np.pi * 100e3, n_times: int = 801) -> dict:
    """Exact beam-splitter dynamics of ``|n, 0>`` in a space of dimension ``n + 1``.

    The drive conserves ``n1 + n2`` so no truncation error enters.  Returns
    the parity-mapping time (maximum of the spin-up probability for odd
    ``n``, minimum for even) within ``[0.5, 1.5]`` times the ideal ``n = 1``
    pi time.
    """
    t_pi = np.pi / (lamb_dicke[0] * lamb_dicke[1] * omega)
    ts = np.linspace(0.5 * t_pi, 1.5 * t_pi, n_times)
    out = {"n": np.asarray(ns), "t_map": [], "t_pi_ideal": t_pi}
    for n in ns:
        d = n + 1 if n >= 1 else 2
        space = HilbertSpec((d, d), lamb_dicke)
        H = sbs_drive(space, omega, DrivePhases.from_spin_motion(0.0, 0.0)).static_matrix()
        w, V = np.linalg.eigh(H)
        psi0 = fock_state(space, "down", [n, 0]).amplitudes
        c0 = V.conj().T @ psi0
        M = space.motional_dim
        amps = V @ (np.exp(-1j * np.outer(w, ts)) * c0[:, None])
        p_up = np.sum(np.abs(amps[M:]) ** 2, axis=0)
        k = int(np.argmax(p_up)) if n % 2 else int(np.argmin(p_up))
        out["t_map"].append(ts[k])
    out["t_map"] = np.array(out["t_map"])
    return out
