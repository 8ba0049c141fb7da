"""Time evolution: unitary and Lindblad propagation, motional heating,
60-Hz ensemble averaging, rotational smearing and detection errors.

Heating is modelled with collapse operators ``sqrt(r) a`` and ``sqrt(r) a^dag``
at the same rate ``r`` per mode, which gives ``d<n>/dt = r`` exactly.
"""

from __future__ import annotations

import functools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from .hamiltonian import NoiseDrive
from .qstate import (
    DensityMatrix,
    HilbertSpec,
    Operator,
    StateVector,
    _lowering,
    embed,
)

__all__ = [
    "NoiseModel",
    "EvolutionResult",
    "EnsembleResult",
    "PropagationError",
    "propagate_unitary",
    "propagate_lindblad",
    "unitary_propagator",
    "heisenberg_observable",
    "heating_superoperator",
    "apply_heating",
    "apply_mode_superoperator",
    "ensemble_average_60hz",
    "noise_phases",
    "rotational_smearing",
    "smearing_kernel",
    "smearing_width",
    "effective_duration",
    "detection_channel",
    "detection_correct",
]


class PropagationError(RuntimeError):
    """The ODE integrator failed; the message carries solver diagnostics."""


@dataclass(frozen=True)
class NoiseModel:
    """Error sources acting on the spin-motion system.

    ``heat_rates`` are quanta per second; ``dephasing_rates`` are the
    rotational-smearing rates ``delta_j`` (1/s).  ``detect_up_given_up`` and
    ``detect_up_given_down`` are the probabilities of reading bright given the
    true spin state.
    """

    nbar_init: tuple[float, ...] = (0.0, 0.0)
    heat_rates: tuple[float, ...] = (0.0, 0.0)
    dephasing_rates: tuple[float, ...] = (0.0, 0.0)
    noise_60hz: NoiseDrive | None = None
    detect_up_given_up: float = 1.0
    detect_up_given_down: float = 0.0

    def __post_init__(self):
        for name in ("nbar_init", "heat_rates", "dephasing_rates"):
            vals = tuple(float(v) for v in getattr(self, name))
            if any(v < 0 for v in vals):
                raise ValueError(f"{name} must be non-negative, got {vals}")
            object.__setattr__(self, name, vals)
        qu, qd = self.detect_up_given_up, self.detect_up_given_down
        if not 0.0 <= qd < qu <= 1.0:
            raise ValueError(f"need 0 <= q_down < q_up <= 1, got q_up={qu}, q_down={qd}")

    @property
    def has_heating(self) -> bool:
        return any(r > 0 for r in self.heat_rates)

    def replace(self, **changes) -> "NoiseModel":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass
class EvolutionResult:
    final_state: StateVector | DensityMatrix
    sampled_times: np.ndarray
    expectations: dict[str, np.ndarray] = field(default_factory=dict)
    states: list | None = None


@dataclass
class EnsembleResult:
    mean: Any
    per_phase: list
    phases: np.ndarray


# ----------------------------------------------------------------------------
# generator assembly


def _flatten_components(H_terms) -> list:
    if not isinstance(H_terms, (list, tuple)):
        H_terms = [H_terms]
    comps = []
    for term in H_terms:
        comps.extend(term.components())
    return comps


def _all_static(H_terms) -> bool:
    if not isinstance(H_terms, (list, tuple)):
        H_terms = [H_terms]
    return all(term.is_static() for term in H_terms)


def _static_matrix(H_terms, dim: int) -> np.ndarray:
    if not isinstance(H_terms, (list, tuple)):
        H_terms = [H_terms]
    H = np.zeros((dim, dim), dtype=complex)
    for term in H_terms:
        H += term.static_matrix()
    return H


def _sparse_components(H_terms) -> list:
    out = []
    for coef, M in _flatten_components(H_terms):
        out.append((coef, sp.csr_matrix(M)))
    return out


def _observables(space: HilbertSpec, observables) -> dict[str, np.ndarray]:
    if observables is not None:
        return {k: (v.matrix if isinstance(v, Operator) else np.asarray(v)) for k, v in observables.items()}
    obs = {}
    if space.has_spin:
        obs["p_up"] = embed(space, np.diag([0.0, 1.0]).astype(complex), "spin")
    for j, d in enumerate(space.mode_dims):
        obs[f"n{j + 1}"] = embed(space, np.diag(np.arange(d, dtype=complex)), j)
    return obs


def _sample_axis(duration: float, sample_times) -> np.ndarray:
    if duration < 0:
        raise ValueError("duration must be non-negative")
    if sample_times is None:
        return np.array([duration])
    ts = np.asarray(sample_times, dtype=float)
    if ts.size and (ts.min() < -1e-15 or ts.max() > duration * (1 + 1e-12) + 1e-15):
        raise ValueError("sample_times must lie inside [0, duration]")
    return np.clip(ts, 0.0, duration)


# ----------------------------------------------------------------------------
# unitary propagation


def propagate_unitary(H_terms, psi0: StateVector, duration: float, sample_times=None, *,
                      t_start: float = 0.0, observables: Mapping | None = None,
                      rtol: float = 1e-10, atol: float = 1e-12,
                      keep_states: bool = False) -> EvolutionResult:
    """Evolve a ket under ``H(t) = sum of terms``.

    Time-independent generators are exponentiated through an eigen-decomposition;
    otherwise an adaptive 8th-order Runge-Kutta integrator runs on the sparse
    components.  ``sample_times`` are relative to the segment start; the
    Hamiltonian is evaluated at ``t_start + t`` so phases can follow a shared
    clock.
    """
    space = psi0.space
    ts = _sample_axis(duration, sample_times)
    obs = _observables(space, observables)
    psi = psi0.amplitudes.astype(complex)

    if _all_static(H_terms) if H_terms else True:
        H = _static_matrix(H_terms, space.dim) if H_terms else np.zeros((space.dim, space.dim))
        w, V = np.linalg.eigh(H)
        c0 = V.conj().T @ psi
        states = [V @ (np.exp(-1j * w * t) * c0) for t in ts]
        final = V @ (np.exp(-1j * w * duration) * c0)
    else:
        comps = _sparse_components(H_terms)

        def rhs(t, y):
            out = np.zeros_like(y)
            for coef, M in comps:
                c = coef(t)
                if c != 0:
                    out += c * (M @ y)
            return -1j * out

        t_eval = np.unique(np.concatenate([t_start + ts, [t_start + duration]]))
        sol = _solve(rhs, t_start, t_start + duration, psi, t_eval, rtol, atol)
        lookup = {round(t, 15): sol.y[:, k] for k, t in enumerate(sol.t)}
        states = [lookup[round(t_start + t, 15)] for t in ts]
        final = lookup[round(t_start + duration, 15)]

    norms = np.array([np.linalg.norm(s) for s in states])
    if np.max(np.abs(norms - 1.0), initial=0.0) > 1e-8:
        raise PropagationError(f"norm drifted to {norms.min():.12f}..{norms.max():.12f}")
    expectations = {k: np.array([np.real(np.vdot(s, O @ s)) for s in states]) for k, O in obs.items()}
    return EvolutionResult(StateVector(space, final), ts, expectations,
                           [StateVector(space, s) for s in states] if keep_states else None)


def _solve(rhs, t0, t1, y0, t_eval, rtol, atol):
    if t1 == t0:
        class _Trivial:
            t = np.array([t0])
            y = y0.reshape(-1, 1)
        return _Trivial()
    sol = solve_ivp(rhs, (t0, t1), y0, method="DOP853", t_eval=t_eval, rtol=rtol, atol=atol)
    if not sol.success:
        raise PropagationError(
            f"integrator failed at t={sol.t[-1] if sol.t.size else t0:.3e} of [{t0:.3e}, {t1:.3e}]: "
            f"{sol.message} (nfev={sol.nfev})")
    return sol


def unitary_propagator(H_terms, space: HilbertSpec, duration: float, *, t_start: float = 0.0,
                       rtol: float = 1e-10, atol: float = 1e-12) -> np.ndarray:
    """Full propagator ``U(t_start + duration, t_start)`` as a dense matrix.

    Static generators use an eigen-decomposition; time-dependent ones evolve
    all basis columns at once.  Intended for small spaces.
    """
    if not H_terms or _all_static(H_terms):
        H = _static_matrix(H_terms, space.dim) if H_terms else np.zeros((space.dim, space.dim))
        w, V = np.linalg.eigh(H)
        return (V * np.exp(-1j * w * duration)) @ V.conj().T
    comps = _sparse_components(H_terms)
    D = space.dim

    def rhs(t, y):
        Y = y.reshape(D, D)
        out = np.zeros_like(Y)
        for coef, M in comps:
            c = coef(t)
            if c != 0:
                out += c * (M @ Y)
        return (-1j * out).reshape(-1)

    sol = _solve(rhs, t_start, t_start + duration, np.eye(D, dtype=complex).reshape(-1),
                 [t_start + duration], rtol, atol)
    return sol.y[:, -1].reshape(D, D)


# ----------------------------------------------------------------------------
# Lindblad propagation


def _collapse_ops(space: HilbertSpec, rates: Sequence[float]) -> list[sp.csr_matrix]:
    ops = []
    for j, r in enumerate(rates):
        if r <= 0:
            continue
        a = embed(space, _lowering(space.mode_dims[j]), j)
        ops.append(sp.csr_matrix(math.sqrt(r) * a))
        ops.append(sp.csr_matrix(math.sqrt(r) * a.conj().T))
    return ops


def _extra_ops(extra_collapse) -> list[sp.csr_matrix]:
    out = []
    for op, rate in extra_collapse or ():
        M = op.matrix if isinstance(op, Operator) else np.asarray(op)
        if rate < 0:
            raise ValueError("collapse rates must be non-negative")
        if rate > 0:
            out.append(sp.csr_matrix(math.sqrt(rate) * M))
    return out


def propagate_lindblad(H_terms, rho0: DensityMatrix, noise: NoiseModel | None, duration: float,
                       sample_times=None, *, t_start: float = 0.0,
                       observables: Mapping | None = None, extra_collapse=None,
                       rtol: float = 1e-8, atol: float = 1e-10,
                       keep_states: bool = False) -> EvolutionResult:
    """Integrate ``d rho/dt = -i[H(t), rho] + sum_k D[C_k] rho``.

    Collapse operators are ``sqrt(r_j) a_j`` and ``sqrt(r_j) a_j^dag`` for each
    mode's heating rate, plus any ``(operator, rate)`` pairs in
    ``extra_collapse`` (each contributing ``D[sqrt(rate) operator]``).
    """
    space = rho0.space
    ts = _sample_axis(duration, sample_times)
    obs = _observables(space, observables)
    rates = noise.heat_rates if noise is not None else ()
    C = _collapse_ops(space, rates) + _extra_ops(extra_collapse)
    CdC = sum((c.conj().T @ c for c in C), sp.csr_matrix((space.dim, space.dim)))
    comps = _sparse_components(H_terms) if H_terms else []
    D = space.dim

    def rhs(t, y):
        R = y.reshape(D, D)
        Hm = sp.csr_matrix((D, D), dtype=complex)
        for coef, M in comps:
            c = coef(t)
            if c != 0:
                Hm = Hm + c * M
        # -i(H - i/2 CdC) R + h.c. + sum C R C^dag
        K = -1j * Hm - 0.5 * CdC
        KR = K @ R
        out = KR + KR.conj().T
        for c in C:
            out += c @ (c @ R.conj().T).conj().T  # c R c^dag without forming dense c
        return out.reshape(-1)

    t_eval = np.unique(np.concatenate([t_start + ts, [t_start + duration]]))
    sol = _solve(rhs, t_start, t_start + duration, rho0.matrix.astype(complex).reshape(-1),
                 t_eval, rtol, atol)
    lookup = {round(t, 15): sol.y[:, k].reshape(D, D) for k, t in enumerate(sol.t)}
    mats = [lookup[round(t_start + t, 15)] for t in ts]
    final = lookup[round(t_start + duration, 15)]

    traces = np.array([np.trace(m).real for m in mats])
    if np.max(np.abs(traces - 1.0), initial=0.0) > 1e-7:
        raise PropagationError(f"trace drifted to {traces.min():.10f}..{traces.max():.10f}")
    lo = np.linalg.eigvalsh(0.5 * (final + final.conj().T))[0]
    if lo < -1e-7:
        warnings.warn(f"Lindblad state has eigenvalue {lo:.2e} below -1e-7", RuntimeWarning,
                      stacklevel=2)
    expectations = {k: np.array([np.real(np.trace(O @ m)) for m in mats]) for k, O in obs.items()}
    return EvolutionResult(DensityMatrix.from_array(space, final), ts, expectations,
                           [DensityMatrix.from_array(space, m) for m in mats] if keep_states else None)


def heisenberg_observable(H_terms, observable: np.ndarray, space: HilbertSpec,
                          noise: NoiseModel | None, duration: float, *, t_start: float = 0.0,
                          rtol: float = 1e-9, atol: float = 1e-12) -> np.ndarray:
    """Pull an observable back through a noisy segment.

    Returns ``E`` with ``Tr[E rho] = Tr[O Phi(rho)]`` where ``Phi`` is the
    Lindblad map over ``[t_start, t_start + duration]``.  Integrated backwards
    in time with the adjoint generator.
    """
    rates = noise.heat_rates if noise is not None else ()
    C = _collapse_ops(space, rates)
    CdC = sum((c.conj().T @ c for c in C), sp.csr_matrix((space.dim, space.dim)))
    comps = _sparse_components(H_terms) if H_terms else []
    D = space.dim

    def rhs(t, y):
        E = y.reshape(D, D)
        Hm = sp.csr_matrix((D, D), dtype=complex)
        for coef, M in comps:
            c = coef(t)
            if c != 0:
                Hm = Hm + c * M
        # dE/dt = -(i[H, E] + sum C^dag E C - 1/2{CdC, E}) integrated from T down to 0
        K = 1j * Hm - 0.5 * CdC
        KE = K @ E
        out = KE + KE.conj().T
        for c in C:
            out += c.conj().T @ (c.conj().T @ E.conj().T).conj().T
        return (-out).reshape(-1)

    t1 = t_start + duration
    sol = _solve(rhs, t1, t_start, np.asarray(observable, dtype=complex).reshape(-1),
                 [t_start], rtol, atol)
    E = sol.y[:, -1].reshape(D, D)
    return 0.5 * (E + E.conj().T)


# ----------------------------------------------------------------------------
# heating as an exact channel


@functools.lru_cache(maxsize=16)
def _heating_eig(dim: int) -> tuple[np.ndarray, np.ndarray]:
    a = _lowering(dim)
    ad = a.conj().T
    I = np.eye(dim)
    # row-major vec: vec(A X B) = (A kron B^T) vec(X)
    L = (np.kron(a, ad.T) - 0.5 * np.kron(ad @ a, I) - 0.5 * np.kron(I, (ad @ a).T)
         + np.kron(ad, a.T) - 0.5 * np.kron(a @ ad, I) - 0.5 * np.kron(I, (a @ ad).T))
    # the equal-rate generator is real symmetric
    return np.linalg.eigh(L.real)


@functools.lru_cache(maxsize=256)
def heating_superoperator(dim: int, rate: float, duration: float) -> np.ndarray:
    """Single-mode heating channel ``exp(L t)`` as a ``(d, d, d, d)`` tensor
    ``S[i, j, k, l]`` with ``rho'[i, j] = sum_kl S[i, j, k, l] rho[k, l]``."""
    w, V = _heating_eig(dim)
    S = ((V * np.exp(rate * duration * w)) @ V.T).reshape(dim, dim, dim, dim)
    S.setflags(write=False)
    return S


def apply_mode_superoperator(rho: np.ndarray, dims: Sequence[int], position: int,
                             S: np.ndarray) -> np.ndarray:
    """Apply a ``(d, d, d, d)`` superoperator to subsystem ``position`` of a
    density-matrix array with subsystem ``dims``."""
    dims = list(dims)
    n = len(dims)
    t = rho.reshape(dims + dims)
    t = np.tensordot(S, t, axes=([2, 3], [position, position + n]))
    t = np.moveaxis(t, [0, 1], [position, position + n])
    return t.reshape(rho.shape)


def apply_heating(rho: DensityMatrix | np.ndarray, rates: Sequence[float], duration: float,
                  space: HilbertSpec | None = None):
    """Heat every mode for ``duration`` with no Hamiltonian.

    Accepts a :class:`DensityMatrix` (returns one) or a raw array together
    with ``space`` (returns an array).  Exact: the per-mode Lindblad
    generators commute, so the channel factorises.
    """
    raw = not isinstance(rho, DensityMatrix)
    space = space if raw else rho.space
    m = np.asarray(rho if raw else rho.matrix)
    dims = space.subsystem_dims
    for j, r in enumerate(rates):
        if r > 0 and duration > 0:
            S = heating_superoperator(space.mode_dims[j], float(r), float(duration))
            m = apply_mode_superoperator(m, dims, j + 1, S)
    return m if raw else DensityMatrix.from_array(space, m)


# ----------------------------------------------------------------------------
# ensembles, smearing, detection


def noise_phases(n_phases: int = 8) -> np.ndarray:
    return 2 * np.pi * np.arange(n_phases) / n_phases


def _mean(results: list):
    first = results[0]
    if isinstance(first, DensityMatrix):
        return DensityMatrix.from_array(first.space, sum(r.matrix for r in results) / len(results))
    if isinstance(first, dict):
        return {k: _mean([r[k] for r in results]) for k in first}
    return sum(np.asarray(r) for r in results) / len(results)


def ensemble_average_60hz(experiment_fn: Callable[[float], Any], n_phases: int = 8, *,
                          workers: int = 1) -> EnsembleResult:
    """Average ``experiment_fn(phi_noise)`` over evenly spaced noise phases.

    Results may be numbers, arrays, dicts of arrays or density matrices.  The
    reduction runs in phase order, so the mean is identical for any worker count.
    """
    phases = noise_phases(n_phases)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(experiment_fn, phases))
    else:
        results = [experiment_fn(p) for p in phases]
    return EnsembleResult(_mean(results), results, phases)


def smearing_width(dephasing_rate: float, t_eff: float = 75e-6) -> float:
    """Gaussian rotation width ``sqrt(delta * T_eff)`` in radians."""
    return math.sqrt(dephasing_rate * t_eff)


def effective_duration(durations: Sequence[float]) -> float:
    """``sum t^3 / sum t^2`` over the displacement pulse lengths of a scan."""
    t = np.asarray(durations, dtype=float)
    den = np.sum(t ** 2)
    return float(np.sum(t ** 3) / den) if den > 0 else 0.0


def smearing_kernel(sigma: float, dim: int, n_samples: int = 20) -> np.ndarray:
    """``f(k) = sum_i w_i e^{-i phi_i k}`` for ``k = -(dim-1) .. dim-1``.

    The rotation angles are ``n_samples`` evenly spaced points on
    ``[-4 sigma, 4 sigma]`` with renormalized Gaussian weights.  Returned array
    is indexed by ``k + dim - 1``.
    """
    k = np.arange(-(dim - 1), dim)
    if sigma <= 0:
        return np.ones(k.size, dtype=complex)
    phi = np.linspace(-4 * sigma, 4 * sigma, n_samples)
    w = np.exp(-0.5 * (phi / sigma) ** 2)
    w /= w.sum()
    return (w[None, :] * np.exp(-1j * np.outer(k, phi))).sum(axis=1)


def rotational_smearing(rho: DensityMatrix, sigmas: Sequence[float], n_samples: int = 20) -> DensityMatrix:
    """Gaussian mixture of phase-space rotations, independently per mode.

    ``rho_bar = sum_{phi_1, phi_2} w_1 w_2 R_1^dag R_2^dag rho R_1 R_2`` with
    ``R_j = exp(i phi_j n_j)``.  Because the rotations are diagonal this is an
    elementwise multiplication of ``rho_{n, m}`` by ``prod_j f_j(n_j - m_j)``.
    """
    space = rho.space
    if len(sigmas) != space.n_modes:
        raise ValueError("need one smearing width per mode")
    if any(s < 0 for s in sigmas):
        raise ValueError("smearing widths must be non-negative")
    return DensityMatrix.from_array(space, smear_array(rho.matrix, space, sigmas, n_samples))


def smear_array(m: np.ndarray, space: HilbertSpec, sigmas: Sequence[float],
                n_samples: int = 20) -> np.ndarray:
    dims = space.subsystem_dims
    n = len(dims)
    mask = np.ones([1] * (2 * n))
    for j, (d, s) in enumerate(zip(space.mode_dims, sigmas)):
        if s <= 0:
            continue
        f = smearing_kernel(s, d, n_samples)
        idx = np.arange(d)
        fj = f[(idx[:, None] - idx[None, :]) + d - 1]
        shape = [1] * (2 * n)
        shape[j + 1] = d
        shape[j + 1 + n] = d
        mask = mask * fj.reshape(shape)
    return (m.reshape(dims + dims) * mask).reshape(m.shape)


def detection_channel(p_up_true, noise: NoiseModel):
    """Probability of a bright reading: ``q_up p + q_down (1 - p)``."""
    qu, qd = noise.detect_up_given_up, noise.detect_up_given_down
    p = np.asarray(p_up_true, dtype=float)
    out = qu * p + qd * (1.0 - p)
    return float(out) if out.ndim == 0 else out


def detection_correct(p_measured, q_up: float, q_down: float, *, clamp: bool = True):
    """Invert the detection channel: ``(p - q_down) / (q_up - q_down)``.

    Finite-shot estimates can land outside ``[0, 1]``; those are clamped with
    a warning unless ``clamp`` is false.
    """
    if not q_up > q_down:
        raise ValueError("need q_up > q_down")
    p = (np.asarray(p_measured, dtype=float) - q_down) / (q_up - q_down)
    if clamp and (np.any(p < 0) or np.any(p > 1)):
        warnings.warn("corrected probability outside [0, 1]; clamped", RuntimeWarning, stacklevel=2)
        p = np.clip(p, 0.0, 1.0)
    return float(p) if p.ndim == 0 else p
