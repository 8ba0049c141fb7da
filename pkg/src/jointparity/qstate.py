"""Truncated Hilbert-space core for a spin coupled to bosonic modes.

Basis ordering is fixed: the spin is the slowest index, followed by mode 1,
mode 2, ... (lexicographic).  Spin index 0 is ``|down>`` and index 1 is
``|up>``, so ``sigma_+ = |up><down|`` has its single nonzero entry at
``[1, 0]``.

Operators and states are immutable containers around dense numpy arrays.
Most heavy lifting elsewhere in the package works on the raw arrays; the
containers exist so that public results carry their Hilbert space along.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln

__all__ = [
    "HilbertSpec",
    "Operator",
    "StateVector",
    "DensityMatrix",
    "TruncationWarning",
    "annihilation",
    "creation",
    "number",
    "identity",
    "sigma_plus",
    "sigma_minus",
    "sigma_x",
    "sigma_y",
    "sigma_z",
    "sigma_phi",
    "spin_rotation",
    "fock_state",
    "coherent_amplitudes",
    "coherent_state",
    "product_state",
    "ecs_state",
    "thermal_density",
    "displacement_matrix",
    "displacement_operator",
    "parity_operator",
    "rotation_operator",
    "embed",
    "apply_local",
    "wigner_point",
    "fidelity",
    "purity",
    "partial_transpose",
    "min_eigenvalue",
    "partial_trace",
    "motional_matrix",
]

TRUNCATION_WARN = 1e-6
_EIG_FLOOR = 1e-15


class TruncationWarning(UserWarning):
    """Raised when a truncated Fock space loses non-negligible weight."""


@dataclass(frozen=True)
class HilbertSpec:
    """Spin (optionally absent) tensored with truncated bosonic modes.

    Parameters
    ----------
    mode_dims : sequence of int
        Fock truncation per mode; every entry must be at least 2.
    lamb_dicke : sequence of float
        Lamb-Dicke parameter per mode, each in (0, 1).  Defaults to
        ``(0.1, 0.087, 0.1, ...)``.
    spin_dim : int
        2 for the qubit; 1 describes a mode-only marginal.
    """

    mode_dims: tuple[int, ...] = (20, 20)
    lamb_dicke: tuple[float, ...] = ()
    spin_dim: int = 2

    def __post_init__(self):
        dims = tuple(int(d) for d in self.mode_dims)
        if any(d < 2 for d in dims):
            raise ValueError(f"mode_dims must all be >= 2, got {dims}")
        eta = tuple(float(e) for e in self.lamb_dicke)
        if not eta:
            eta = tuple((0.1, 0.087)[j] if j < 2 else 0.1 for j in range(len(dims)))
        if len(eta) != len(dims):
            raise ValueError("lamb_dicke must have one entry per mode")
        if any(not 0.0 < e < 1.0 for e in eta):
            raise ValueError(f"lamb_dicke entries must lie in (0, 1), got {eta}")
        if self.spin_dim not in (1, 2):
            raise ValueError("spin_dim must be 1 or 2")
        object.__setattr__(self, "mode_dims", dims)
        object.__setattr__(self, "lamb_dicke", eta)

    @property
    def n_modes(self) -> int:
        return len(self.mode_dims)

    @property
    def motional_dim(self) -> int:
        return int(np.prod(self.mode_dims, dtype=int))

    @property
    def dim(self) -> int:
        return self.spin_dim * self.motional_dim

    @property
    def has_spin(self) -> bool:
        return self.spin_dim == 2

    @property
    def subsystem_dims(self) -> tuple[int, ...]:
        return (self.spin_dim,) + self.mode_dims

    def with_dims(self, mode_dims: Sequence[int]) -> "HilbertSpec":
        return HilbertSpec(tuple(mode_dims), self.lamb_dicke, self.spin_dim)

    def motional(self) -> "HilbertSpec":
        """The same modes without the spin."""
        return HilbertSpec(self.mode_dims, self.lamb_dicke, 1)

    def basis_index(self, spin: int, n: Sequence[int]) -> int:
        if len(n) != self.n_modes:
            raise ValueError(f"expected {self.n_modes} occupation numbers, got {len(n)}")
        for j, (nj, d) in enumerate(zip(n, self.mode_dims)):
            if not 0 <= nj < d:
                raise IndexError(f"n[{j}]={nj} outside truncation 0..{d - 1}")
        return int(np.ravel_multi_index((spin, *n), self.subsystem_dims))


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Operator:
    space: HilbertSpec
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = _freeze(self.matrix)
        if m.shape != (self.space.dim, self.space.dim):
            raise ValueError(f"matrix shape {m.shape} does not match dim {self.space.dim}")
        object.__setattr__(self, "matrix", m)

    def dag(self) -> "Operator":
        return Operator(self.space, self.matrix.conj().T)

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.matrix - self.matrix.conj().T), initial=0.0) < tol)

    def expect(self, state: "StateVector | DensityMatrix") -> complex:
        if isinstance(state, StateVector):
            v = state.amplitudes
            return complex(np.vdot(v, self.matrix @ v))
        return complex(np.trace(self.matrix @ state.matrix))

    def __matmul__(self, other):
        if isinstance(other, Operator):
            return Operator(self.space, self.matrix @ other.matrix)
        if isinstance(other, StateVector):
            return StateVector(self.space, self.matrix @ other.amplitudes, normalize=False)
        return NotImplemented

    def __add__(self, other: "Operator") -> "Operator":
        return Operator(self.space, self.matrix + other.matrix)

    def __sub__(self, other: "Operator") -> "Operator":
        return Operator(self.space, self.matrix - other.matrix)

    def __mul__(self, c) -> "Operator":
        return Operator(self.space, c * self.matrix)

    __rmul__ = __mul__


@dataclass(frozen=True)
class StateVector:
    space: HilbertSpec
    amplitudes: np.ndarray = field(repr=False)
    normalize: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.amplitudes, dtype=complex).reshape(-1)
        if v.size != self.space.dim:
            raise ValueError(f"vector length {v.size} does not match dim {self.space.dim}")
        if self.normalize:
            nrm = np.linalg.norm(v)
            if nrm == 0:
                raise ValueError("cannot normalize the zero vector")
            v = v / nrm
        object.__setattr__(self, "amplitudes", _freeze(v))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def dm(self) -> "DensityMatrix":
        v = self.amplitudes
        return DensityMatrix(self.space, np.outer(v, v.conj()))

    def overlap(self, other: "StateVector") -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))


@dataclass(frozen=True)
class DensityMatrix:
    """Mixed state.  Hermiticity and unit trace are checked on construction;
    positivity is checked by :meth:`validate` because it needs an eigensolve."""

    space: HilbertSpec
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = _freeze(self.matrix)
        if m.shape != (self.space.dim, self.space.dim):
            raise ValueError(f"matrix shape {m.shape} does not match dim {self.space.dim}")
        herm = np.max(np.abs(m - m.conj().T), initial=0.0)
        if herm > 1e-10:
            raise ValueError(f"density matrix is not Hermitian (max deviation {herm:.2e})")
        tr = np.trace(m).real
        if abs(tr - 1.0) > 1e-8:
            raise ValueError(f"density matrix trace is {tr:.12f}, expected 1")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_array(cls, space: HilbertSpec, m: np.ndarray) -> "DensityMatrix":
        """Symmetrize and renormalize a numerically produced matrix."""
        m = 0.5 * (m + m.conj().T)
        return cls(space, m / np.trace(m).real)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def validate(self, tol: float = 1e-8) -> "DensityMatrix":
        lo = self.eigenvalues()[0]
        if lo < -tol:
            raise ValueError(f"density matrix has negative eigenvalue {lo:.3e}")
        return self

    def expect(self, op: Operator) -> complex:
        return op.expect(self)


# ----------------------------------------------------------------------------
# single-subsystem building blocks (raw arrays)


def _lowering(dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, dim, dtype=float)), 1).astype(complex)


_SPIN = {
    "plus": np.array([[0, 0], [1, 0]], dtype=complex),  # |up><down|
    "minus": np.array([[0, 1], [0, 0]], dtype=complex),
    "z": np.diag([-1.0, 1.0]).astype(complex),
}


def embed(space: HilbertSpec, local: np.ndarray, subsystem) -> np.ndarray:
    """Lift an operator on one subsystem (``'spin'`` or a mode index) to the
    full space by tensoring identities around it."""
    idx = _subsystem_position(space, subsystem)
    out = np.ones((1, 1), dtype=complex)
    for k, d in enumerate(space.subsystem_dims):
        out = np.kron(out, local if k == idx else np.eye(d))
    return out


def _subsystem_position(space: HilbertSpec, subsystem) -> int:
    if subsystem == "spin":
        if not space.has_spin:
            raise ValueError("space has no spin")
        return 0
    j = int(subsystem)
    if not 0 <= j < space.n_modes:
        raise IndexError(f"mode {j} out of range for {space.n_modes} modes")
    return j + 1


def apply_local(space: HilbertSpec, state: np.ndarray, local: np.ndarray, subsystems) -> np.ndarray:
    """Apply ``local`` (acting on the listed subsystems, in order) to a ket or
    a density matrix given as a raw array, without forming the full operator.

    For density matrices the map is ``rho -> L rho L^dagger``.
    """
    subsystems = list(subsystems)
    pos = [_subsystem_position(space, s) for s in subsystems]
    dims = space.subsystem_dims
    ldims = [dims[p] for p in pos]
    n = len(dims)
    L = np.asarray(local).reshape(ldims + ldims)
    nloc = len(pos)

    def _left(t, offset):
        # contract L's input legs with tensor legs pos+offset
        t = np.tensordot(L, t, axes=(list(range(nloc, 2 * nloc)), [p + offset for p in pos]))
        # tensordot puts the new legs first; move them back into place
        return np.moveaxis(t, list(range(nloc)), [p + offset for p in pos])

    if state.ndim == 1:
        t = state.reshape(dims)
        return _left(t, 0).reshape(-1)
    t = state.reshape(dims + dims)
    t = _left(t, 0)
    Lc = L.conj()
    t = np.tensordot(Lc, t, axes=(list(range(nloc, 2 * nloc)), [p + n for p in pos]))
    t = np.moveaxis(t, list(range(nloc)), [p + n for p in pos])
    return t.reshape(state.shape)


def annihilation(space: HilbertSpec, mode: int) -> Operator:
    return Operator(space, embed(space, _lowering(space.mode_dims[mode]), mode))


def creation(space: HilbertSpec, mode: int) -> Operator:
    return annihilation(space, mode).dag()


def number(space: HilbertSpec, mode: int) -> Operator:
    d = space.mode_dims[mode]
    return Operator(space, embed(space, np.diag(np.arange(d, dtype=complex)), mode))


def identity(space: HilbertSpec) -> Operator:
    return Operator(space, np.eye(space.dim))


def sigma_plus(space: HilbertSpec) -> Operator:
    return Operator(space, embed(space, _SPIN["plus"], "spin"))


def sigma_minus(space: HilbertSpec) -> Operator:
    return Operator(space, embed(space, _SPIN["minus"], "spin"))


def sigma_phi(space: HilbertSpec, phi: float) -> Operator:
    """``sigma_+ e^{i phi} + sigma_- e^{-i phi}``; ``phi = 0`` is sigma_x."""
    s = _SPIN["plus"] * np.exp(1j * phi) + _SPIN["minus"] * np.exp(-1j * phi)
    return Operator(space, embed(space, s, "spin"))


def sigma_x(space: HilbertSpec) -> Operator:
    return sigma_phi(space, 0.0)


def sigma_y(space: HilbertSpec) -> Operator:
    return sigma_phi(space, -np.pi / 2)


def sigma_z(space: HilbertSpec) -> Operator:
    return Operator(space, embed(space, _SPIN["z"], "spin"))


def spin_rotation(theta: float, phi: float) -> np.ndarray:
    """2x2 rotation ``exp(-i theta/2 sigma_phi)`` about an equatorial axis."""
    s = _SPIN["plus"] * np.exp(1j * phi) + _SPIN["minus"] * np.exp(-1j * phi)
    return np.cos(theta / 2) * np.eye(2) - 1j * np.sin(theta / 2) * s


# ----------------------------------------------------------------------------
# states


def _spin_vector(spin) -> np.ndarray:
    if isinstance(spin, str):
        table = {
            "down": [1, 0],
            "up": [0, 1],
            "plus": [1 / math.sqrt(2), 1 / math.sqrt(2)],
            "minus": [1 / math.sqrt(2), -1 / math.sqrt(2)],
        }
        if spin not in table:
            raise ValueError(f"unknown spin label {spin!r}")
        return np.array(table[spin], dtype=complex)
    return np.asarray(spin, dtype=complex)


def product_state(space: HilbertSpec, spin, mode_vectors: Sequence[np.ndarray]) -> StateVector:
    v = _spin_vector(spin) if space.has_spin else np.ones(1, dtype=complex)
    for vec in mode_vectors:
        v = np.kron(v, vec)
    return StateVector(space, v)


def fock_state(space: HilbertSpec, spin: str, n: Sequence[int]) -> StateVector:
    """Product basis state ``|spin>|n_1>|n_2>...``."""
    if len(n) != space.n_modes:
        raise ValueError(f"expected {space.n_modes} occupation numbers")
    vecs = []
    for j, (nj, d) in enumerate(zip(n, space.mode_dims)):
        if not 0 <= nj < d:
            raise IndexError(f"n[{j}]={nj} outside truncation 0..{d - 1}")
        e = np.zeros(d, dtype=complex)
        e[nj] = 1.0
        vecs.append(e)
    return product_state(space, spin, vecs)


def coherent_amplitudes(dim: int, alpha: complex, *, renormalize: bool = True) -> np.ndarray:
    """Fock amplitudes ``e^{-|a|^2/2} a^n / sqrt(n!)`` truncated to ``dim``."""
    alpha = complex(alpha)
    n = np.arange(dim)
    if alpha == 0:
        c = np.zeros(dim, dtype=complex)
        c[0] = 1.0
        return c
    logmag = -0.5 * abs(alpha) ** 2 + n * np.log(abs(alpha)) - 0.5 * gammaln(n + 1)
    c = np.exp(logmag) * np.exp(1j * n * np.angle(alpha))
    lost = 1.0 - float(np.sum(np.abs(c) ** 2))
    if lost > TRUNCATION_WARN:
        warnings.warn(
            f"coherent state |{alpha:.3g}> loses {lost:.2e} of its weight at dim {dim}",
            TruncationWarning,
            stacklevel=3,
        )
    if renormalize:
        c = c / np.linalg.norm(c)
    return c


def _vacuum(d: int) -> np.ndarray:
    e = np.zeros(d, dtype=complex)
    e[0] = 1.0
    return e


def coherent_state(space: HilbertSpec, mode: int, alpha: complex, spin: str = "down") -> StateVector:
    vecs = [_vacuum(d) for d in space.mode_dims]
    vecs[mode] = coherent_amplitudes(space.mode_dims[mode], alpha)
    return product_state(space, spin, vecs)


def ecs_state(space: HilbertSpec, alpha1: complex, alpha2: complex, parity: str = "even",
              spin: str = "down") -> StateVector:
    """Entangled coherent state ``(|a1>|a2> +/- |-a1>|-a2>)/N``.

    The truncated coherent states are renormalized before forming the
    superposition; the result is normalized on the truncated space.
    """
    if space.n_modes != 2:
        raise ValueError("ecs_state needs exactly two modes")
    if parity not in ("even", "odd"):
        raise ValueError("parity must be 'even' or 'odd'")
    sign = 1.0 if parity == "even" else -1.0
    d1, d2 = space.mode_dims
    p = np.kron(coherent_amplitudes(d1, alpha1), coherent_amplitudes(d2, alpha2))
    m = np.kron(coherent_amplitudes(d1, -alpha1), coherent_amplitudes(d2, -alpha2))
    motion = p + sign * m
    if np.linalg.norm(motion) < 1e-6:
        raise ValueError("ECS norm vanishes (odd parity with alpha -> 0)")
    spin_v = _spin_vector(spin) if space.has_spin else np.ones(1, dtype=complex)
    return StateVector(space, np.kron(spin_v, motion))


def _thermal_populations(dim: int, nbar: float) -> np.ndarray:
    if nbar < 0:
        raise ValueError("nbar must be non-negative")
    if nbar == 0:
        return _vacuum(dim).real
    n = np.arange(dim)
    p = (nbar / (nbar + 1.0)) ** n / (nbar + 1.0)
    lost = 1.0 - p.sum()
    if lost > TRUNCATION_WARN:
        warnings.warn(f"thermal nbar={nbar} loses {lost:.2e} at dim {dim}", TruncationWarning,
                      stacklevel=3)
    return p / p.sum()


def thermal_density(space: HilbertSpec, nbar: Sequence[float], spin: str = "down") -> DensityMatrix:
    """Spin ``|spin><spin|`` times a product of geometric Fock distributions."""
    if len(nbar) != space.n_modes:
        raise ValueError("need one nbar per mode")
    p = np.ones(1)
    for d, nb in zip(space.mode_dims, nbar):
        p = np.kron(p, _thermal_populations(d, float(nb)))
    if space.has_spin:
        s = np.abs(_spin_vector(spin)) ** 2 if spin in ("down", "up") else None
        if s is None:
            raise ValueError("thermal_density supports spin 'down' or 'up'")
        p = np.kron(s, p)
    return DensityMatrix(space, np.diag(p))


# ----------------------------------------------------------------------------
# displacement, parity, rotation


@functools.lru_cache(maxsize=512)
def _displacement_cached(dim: int, re: float, im: float) -> np.ndarray:
    alpha = complex(re, im)
    a = _lowering(dim)
    # D = exp(alpha a^dag - alpha^* a) = exp(-i G), G = i(alpha a^dag - alpha^* a) Hermitian
    G = 1j * (alpha * a.conj().T - np.conj(alpha) * a)
    w, V = np.linalg.eigh(G)
    D = (V * np.exp(-1j * w)) @ V.conj().T
    D.setflags(write=False)
    return D


def displacement_matrix(dim: int, alpha: complex) -> np.ndarray:
    """Single-mode displacement ``exp(alpha a^dag - alpha^* a)`` on a ``dim``-level
    truncation, computed by eigendecomposition of the Hermitian generator
    (exactly unitary on the truncated space)."""
    alpha = complex(alpha)
    return _displacement_cached(int(dim), alpha.real, alpha.imag)


def displacement_operator(space: HilbertSpec, mode: int, alpha: complex) -> Operator:
    return Operator(space, embed(space, displacement_matrix(space.mode_dims[mode], alpha), mode))


def parity_operator(space: HilbertSpec, modes: Iterable[int] | None = None) -> Operator:
    """Diagonal ``(-1)^{sum n_j}`` over the selected modes (all by default)."""
    modes = range(space.n_modes) if modes is None else list(modes)
    diag = np.ones(1)
    for j, d in enumerate(space.mode_dims):
        f = (-1.0) ** np.arange(d) if j in modes else np.ones(d)
        diag = np.kron(diag, f)
    diag = np.kron(np.ones(space.spin_dim), diag)
    return Operator(space, np.diag(diag))


def rotation_operator(space: HilbertSpec, mode: int, phi: float) -> Operator:
    """``exp(i phi a^dag a)`` on one mode."""
    d = space.mode_dims[mode]
    return Operator(space, embed(space, np.diag(np.exp(1j * phi * np.arange(d))), mode))


def _displaced_parity_block(dim: int, beta: complex) -> np.ndarray:
    """``D(beta) P D(-beta) = D(2 beta) P`` restricted to the first ``dim`` levels.

    The displacement is built in an enlarged space so the block is free of
    truncation error for any state supported below ``dim``.
    """
    beta = complex(beta)
    r = abs(2 * beta)
    big = int(dim + np.ceil(r * r + 12 * r + 40))
    D = displacement_matrix(big, 2 * beta)[:dim, :dim]
    return D * ((-1.0) ** np.arange(dim))[None, :]


def motional_matrix(rho: DensityMatrix | np.ndarray, space: HilbertSpec | None = None) -> np.ndarray:
    """Trace out the spin, returning the motional density matrix as an array."""
    if isinstance(rho, DensityMatrix):
        space, m = rho.space, rho.matrix
    else:
        m = np.asarray(rho)
    if not space.has_spin:
        return np.asarray(m)
    M = space.motional_dim
    t = m.reshape(2, M, 2, M)
    return t[0, :, 0, :] + t[1, :, 1, :]


def wigner_point(rho: DensityMatrix, beta: Sequence[complex]) -> float:
    """Multimode Wigner function ``(2/pi)^N <prod D_j(b_j) P prod D_j(-b_j)>``.

    Evaluated through ``D(b) P D(-b) = D(2b) P`` with displacement matrix
    elements taken from an enlarged space, so the value is exact for the
    truncated state ``rho``.  A :class:`TruncationWarning` is emitted when the
    state itself has more than 1e-6 weight on the highest Fock level of some
    mode, since that indicates the state was clipped by the truncation.
    """
    space = rho.space
    beta = list(beta)
    if len(beta) != space.n_modes:
        raise ValueError(f"need {space.n_modes} displacements")
    m = motional_matrix(rho)
    dims = space.mode_dims
    N = len(dims)
    _warn_top_level(m, dims)
    t = m.reshape(dims + dims)
    for j, (d, b) in enumerate(zip(dims, beta)):
        A = _displaced_parity_block(d, b)
        # contract A_{k i} with rho_{i ... , k ...} (trace over mode j)
        t = np.tensordot(t, A, axes=([0, N - j], [1, 0]))
        N_left = N - j - 1
        # remaining tensor has legs: row modes j+1.., col modes j+1..
        t = t.reshape(dims[j + 1:] + dims[j + 1:]) if N_left else t
    return float(np.real(t)) * (2 / np.pi) ** N


def _warn_top_level(m: np.ndarray, dims: Sequence[int]) -> None:
    pops = np.real(np.diag(m)).reshape(dims)
    for j in range(len(dims)):
        top = np.take(pops, dims[j] - 1, axis=j).sum()
        if top > TRUNCATION_WARN:
            warnings.warn(f"state has {top:.2e} weight on the top Fock level of mode {j}",
                          TruncationWarning, stacklevel=3)


# ----------------------------------------------------------------------------
# quantum-information functionals


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(m)
    w = np.where(w > _EIG_FLOOR * max(w[-1], 1.0), w, 0.0)
    return (V * np.sqrt(w)) @ V.conj().T


def fidelity(rho: DensityMatrix, rho0: DensityMatrix) -> float:
    """Uhlmann fidelity ``(Tr sqrt(sqrt(rho0) rho sqrt(rho0)))^2``.

    Evaluated as the squared nuclear norm of ``sqrt(rho) sqrt(rho0)``, which
    avoids taking square roots of round-off eigenvalues a second time.
    """
    for r in (rho, rho0):
        r.validate()
    sv = np.linalg.svd(_psd_sqrt(rho.matrix) @ _psd_sqrt(rho0.matrix), compute_uv=False)
    f = float(np.sum(sv) ** 2)
    return min(max(f, 0.0), 1.0)


def purity(rho: DensityMatrix) -> float:
    m = rho.matrix
    return float(np.real(np.vdot(m, m)))


def partial_transpose(rho: DensityMatrix, mode: int = 0) -> np.ndarray:
    """Transpose the indices of one mode (Peres-Horodecki test)."""
    space = rho.space
    dims = space.subsystem_dims
    n = len(dims)
    p = _subsystem_position(space, mode)
    t = rho.matrix.reshape(dims + dims)
    t = np.swapaxes(t, p, p + n)
    return t.reshape(rho.matrix.shape)


def min_eigenvalue(matrix: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (matrix + matrix.conj().T))[0])


def partial_trace(rho: DensityMatrix, keep: Iterable) -> DensityMatrix:
    """Reduce onto the subsystems in ``keep`` (``'spin'`` and/or mode indices).

    Kept subsystems stay in their original order.  Dropping the spin yields a
    density matrix on a spin-less space.
    """
    space = rho.space
    keep = list(keep)
    pos = sorted(_subsystem_position(space, k) for k in keep)
    dims = space.subsystem_dims
    n = len(dims)
    t = rho.matrix.reshape(dims + dims)
    letters = "abcdefghijklmnopqrstuvwxyz"
    rows = list(letters[:n])
    cols = [rows[k] if k not in pos else letters[n + k].upper() for k in range(n)]
    out = "".join(rows[k] for k in pos) + "".join(cols[k] for k in pos)
    red = np.einsum("".join(rows) + "".join(cols) + "->" + out, t)
    kept_modes = [p - 1 for p in pos if p > 0]
    new_space = HilbertSpec(
        tuple(space.mode_dims[j] for j in kept_modes) or (),
        tuple(space.lamb_dicke[j] for j in kept_modes) or (),
        2 if 0 in pos and space.has_spin else 1,
    ) if kept_modes else _spin_only_space(0 in pos and space.has_spin)
    D = int(np.prod([dims[p] for p in pos]))
    return DensityMatrix.from_array(new_space, red.reshape(D, D))


def _spin_only_space(has_spin: bool) -> HilbertSpec:
    return HilbertSpec((), (), 2 if has_spin else 1)
