"""Model-based density-matrix estimation from Wigner slices.

The model state is built from a thermal state by ideal spin-dependent
displacements and a dark-state herald, heated over the generation window,
smeared by Gaussian phase-space rotations, and heated again over the
measurement window.  The Wigner prediction then passes through a detection
error that reads a bright spin as dark with probability ``c``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares, minimize

from ..evolve import apply_heating, smear_array, smearing_width
from ..protocols import FOUR_OVER_PI2, WignerGrid, shot_rng
from ..qstate import (
    DensityMatrix,
    HilbertSpec,
    _displaced_parity_block,
    displacement_matrix,
    ecs_state,
    fidelity,
    min_eigenvalue,
    partial_transpose,
    purity,
)

__all__ = [
    "ModelParams",
    "FitResult",
    "FitError",
    "BootstrapResult",
    "model_density",
    "forward_model",
    "fit_density_model",
    "bootstrap_fit",
    "dominant_eigenstate",
    "state_functionals",
    "target_state",
    "PARAM_NAMES",
]

N_PARAMS = 9
_SCALE = np.array([1.0, 1.0, 0.1, 0.1, 10.0, 10.0, 500.0, 500.0, 0.01])
_LOWER = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
_UPPER = np.array([4.0, 4.0, 2.0, 2.0, 1e4, 1e4, 2e5, 2e5, 0.1])
PARAM_NAMES = ("alpha1", "alpha2", "nbar1", "nbar2", "heat1", "heat2", "dephase1", "dephase2", "c")


@dataclass(frozen=True)
class ModelParams:
    alpha: tuple = (1.2, 1.2)
    nbar: tuple = (0.03, 0.03)
    heat: tuple = (6.1, 39.0)
    dephase: tuple = (0.0, 0.0)
    detect_err_down: float = 0.0

    def __post_init__(self):
        for name in ("nbar", "heat", "dephase"):
            vals = getattr(self, name)
            if len(vals) != 2 or any(v < 0 for v in vals):
                raise ValueError(f"{name} must be two non-negative numbers")
        if len(self.alpha) != 2:
            raise ValueError("alpha must have two entries")
        if not 0.0 <= self.detect_err_down <= 0.1:
            raise ValueError("detect_err_down must lie in [0, 0.1]")

    def vector(self) -> np.ndarray:
        return np.array([abs(self.alpha[0]), abs(self.alpha[1]), *self.nbar, *self.heat,
                         *self.dephase, self.detect_err_down], dtype=float)

    def with_vector(self, x: Sequence[float]) -> "ModelParams":
        x = np.clip(np.asarray(x, dtype=float), _LOWER, _UPPER)
        # magnitudes are fitted, phases kept
        alpha = tuple(x[k] * (a / abs(a)) if a != 0 else float(x[k]) for k, a in enumerate(self.alpha))
        return ModelParams(alpha, (x[2], x[3]), (x[4], x[5]), (x[6], x[7]), float(x[8]))


@dataclass
class FitResult:
    params: ModelParams
    covariance: np.ndarray
    chi2_reduced: float
    rho_est: DensityMatrix
    parity: str = "even"
    stderr: np.ndarray | None = None
    at_bound: tuple = ()
    n_points: int = 0
    history: list = field(default_factory=list)


class FitError(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class BootstrapResult:
    param_std: np.ndarray
    fidelity_std: float
    purity_std: float
    eigenvalue_std: np.ndarray
    pt_min_std: float
    samples: dict
    failures: int


# ----------------------------------------------------------------------------
# forward channel chain


def _cropped_displacement(dim: int, alpha: complex) -> np.ndarray:
    r = abs(alpha)
    big = int(dim + np.ceil(r * r + 10 * r + 30))
    return displacement_matrix(big, alpha)[:dim, :dim]


def _thermal(dim: int, nbar: float) -> np.ndarray:
    n = np.arange(dim)
    p = (nbar / (nbar + 1.0)) ** n / (nbar + 1.0) if nbar > 0 else (n == 0).astype(float)
    return p / p.sum()


def _generated(params: ModelParams, parity: str, dim: int) -> np.ndarray:
    """Heralded state after ideal spin-dependent displacements of a thermal state."""
    blocks = []
    for j in range(2):
        p = _thermal(dim, params.nbar[j])
        Dp = _cropped_displacement(dim, params.alpha[j])
        Dm = _cropped_displacement(dim, -params.alpha[j])
        rho = np.diag(p)
        blocks.append({(s, t): (Ds @ rho @ Dt.conj().T)
                       for s, Ds in ((1, Dp), (-1, Dm)) for t, Dt in ((1, Dp), (-1, Dm))})
    out = np.zeros((dim * dim, dim * dim), dtype=complex)
    for (s, t), X1 in blocks[0].items():
        w = 1.0 if parity == "even" else float(s * t)
        out += w * np.kron(X1, blocks[1][(s, t)])
    out /= np.trace(out).real
    return 0.5 * (out + out.conj().T)


def _work_dim(params: ModelParams, n_max: int) -> int:
    r = max(abs(a) for a in params.alpha)
    return max(n_max + 1, int(np.ceil(r * r + 6 * r + 8)))


def model_density(params: ModelParams, parity: str = "even", *, n_max: int = 7,
                  t_eff: float = 75e-6, generation_time: float = 350e-6,
                  measurement_time: float = 550e-6, n_smear: int = 20,
                  crop: bool = True) -> DensityMatrix:
    """Motional density matrix at the end of the model chain.

    The chain runs in a padded Fock space; with ``crop`` the result is cut to
    ``n_max`` phonons per mode and renormalized.
    """
    if parity not in ("even", "odd"):
        raise ValueError("parity must be 'even' or 'odd'")
    d = _work_dim(params, n_max)
    space = HilbertSpec((d, d), spin_dim=1)
    rho = _generated(params, parity, d)
    sig = [smearing_width(x, t_eff) for x in params.dephase]
    rho = smear_array(rho, space, sig, n_smear)
    # equal-rate heating is phase covariant, so it commutes with the
    # smearing and both windows collapse into one application
    rho = apply_heating(rho, params.heat, generation_time + measurement_time, space)
    if not crop or d == n_max + 1:
        return DensityMatrix.from_array(space, rho)
    k = n_max + 1
    sub = rho.reshape(d, d, d, d)[:k, :k, :k, :k].reshape(k * k, k * k)
    kept = np.trace(sub).real
    if kept < 0.999:
        warnings.warn(f"only {kept:.4f} of the model state lies below the Fock cutoff", RuntimeWarning,
                      stacklevel=2)
    return DensityMatrix.from_array(HilbertSpec((k, k), spin_dim=1), sub / kept)


def _parity_stack(dim: int, values: np.ndarray) -> np.ndarray:
    return np.stack([_displaced_parity_block(dim, complex(v)) for v in values])


def _wigner_many(rho: np.ndarray, dim: int, betas: np.ndarray) -> np.ndarray:
    b1, inv1 = np.unique(betas[:, 0], return_inverse=True)
    b2, inv2 = np.unique(betas[:, 1], return_inverse=True)
    A1 = _parity_stack(dim, b1)
    A2 = _parity_stack(dim, b2)
    T = rho.reshape(dim, dim, dim, dim)
    # Tr[rho (A1 (x) A2)] for every unique pair, then gather
    M = np.einsum("ikjl,aji,blk->ab", T, A1, A2, optimize=True)
    return FOUR_OVER_PI2 * np.real(M[inv1, inv2])


def forward_model(params: ModelParams, betas, *, parity: str = "even", n_max: int = 7,
                  t_eff: float = 75e-6, generation_time: float = 350e-6,
                  measurement_time: float = 550e-6, n_smear: int = 20) -> np.ndarray:
    """Predicted measured Wigner values at ``betas`` (shape ``(..., 2)`` complex)."""
    betas = np.asarray(betas, dtype=complex)
    shape = betas.shape[:-1]
    flat = betas.reshape(-1, 2)
    rho = model_density(params, parity, n_max=n_max, t_eff=t_eff, generation_time=generation_time,
                        measurement_time=measurement_time, n_smear=n_smear, crop=False)
    d = rho.space.mode_dims[0]
    pops = np.real(np.diag(rho.matrix)).reshape(d, d)
    if pops[-1].sum() + pops[:, -1].sum() > 1e-6:
        warnings.warn("model state has weight at the top of the working Fock space", RuntimeWarning,
                      stacklevel=2)
    W = _wigner_many(rho.matrix, d, flat)
    c = params.detect_err_down
    if c:
        p_up = 0.5 * (1.0 - W / FOUR_OVER_PI2)
        W = FOUR_OVER_PI2 * (1.0 - 2.0 * (1.0 - c) * p_up)
    return W.reshape(shape)


# ----------------------------------------------------------------------------
# fitting


def _data(grids: Sequence[WignerGrid]):
    betas, vals, sig, shots = [], [], [], []
    for g in grids:
        betas.append(g.betas.reshape(-1, 2))
        v = g.values.reshape(-1)
        n = g.shot_counts.reshape(-1)
        p = np.clip(0.5 * (1.0 - v / FOUR_OVER_PI2), 0.0, 1.0)
        var_p = np.where(n > 0, p * (1 - p) / np.maximum(n, 1), 0.0)
        var_p = np.maximum(var_p, 1e-6)
        sig.append(2 * FOUR_OVER_PI2 * np.sqrt(var_p))
        vals.append(v)
        shots.append(n)
    return np.concatenate(betas), np.concatenate(vals), np.concatenate(sig), np.concatenate(shots)


def fit_density_model(grids: Sequence[WignerGrid], init: ModelParams, *, parity: str = "even",
                      n_starts: int = 5, seed: int = 0, n_max: int = 7, t_eff: float = 75e-6,
                      max_evals: int = 800, polish_only: bool = False) -> FitResult:
    """Weighted least-squares fit of the model chain to Wigner slices.

    Multi-start simplex search (``max_evals`` model evaluations per start)
    followed by a bounded Gauss-Newton polish of the best start.
    Covariance is ``(J^T J)^{-1}`` of the weighted residuals at the optimum.
    """
    if not grids:
        raise ValueError("need at least one grid")
    betas, vals, sig, _ = _data(grids)
    n_pts = vals.size
    if n_pts <= N_PARAMS:
        raise ValueError("more data points than parameters are required")
    kw = dict(parity=parity, n_max=n_max, t_eff=t_eff)
    trace: list = []

    def resid(z):
        x = z * _SCALE
        p = init.with_vector(x)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return (forward_model(p, betas, **kw) - vals) / sig

    def cost(z):
        if np.any(z * _SCALE < _LOWER) or np.any(z * _SCALE > _UPPER):
            return 1e30
        r = resid(z)
        val = float(r @ r)
        trace.append(val)
        return val / norm

    z0 = init.vector() / _SCALE
    # simplex tolerances are absolute, so work with chi2 relative to the start
    r0 = resid(z0)
    norm = max(float(r0 @ r0), 1e-300)
    starts = [z0]
    rng = shot_rng(seed, 10_000)
    for _ in range(n_starts - 1):
        starts.append(np.clip(z0 * (1 + 0.2 * rng.standard_normal(z0.size)) + 0.05 * rng.random(z0.size),
                              _LOWER / _SCALE, _UPPER / _SCALE))
    best = None
    if not polish_only:
        for z in starts:
            res = minimize(cost, z, method="Nelder-Mead",
                           options={"maxfev": max_evals, "xatol": 1e-4, "fatol": 1e-6, "adaptive": True})
            if best is None or res.fun < best.fun:
                best = res
        zb = best.x
    else:
        zb = z0
    lsq = least_squares(resid, np.clip(zb, _LOWER / _SCALE, _UPPER / _SCALE),
                        bounds=(_LOWER / _SCALE, _UPPER / _SCALE), x_scale=1.0, max_nfev=400,
                        ftol=1e-12, xtol=1e-12, gtol=1e-12)
    if not np.all(np.isfinite(lsq.x)) or (lsq.status <= 0 and (best is None or not best.success)):
        raise FitError(f"fit did not converge: {lsq.message}", trace)
    chi2 = float(lsq.fun @ lsq.fun)
    J = lsq.jac / _SCALE[None, :]
    with np.errstate(all="ignore"):
        cov = np.linalg.pinv(J.T @ J)
    x = lsq.x * _SCALE
    params = init.with_vector(x)
    at_bound = tuple(n for n, v, lo, hi in zip(PARAM_NAMES, x, _LOWER, _UPPER)
                     if (v - lo) < 1e-6 * max(1.0, abs(lo)) or (hi - v) < 1e-6 * max(1.0, abs(hi)))
    rho = model_density(params, parity, n_max=n_max, t_eff=t_eff)
    return FitResult(params, cov, chi2 / (n_pts - N_PARAMS), rho, parity,
                     np.sqrt(np.clip(np.diag(cov), 0, None)), at_bound, n_pts, trace)


# ----------------------------------------------------------------------------
# functionals and bootstrap


def state_functionals(rho: DensityMatrix, target: DensityMatrix, n_eig: int = 4) -> dict:
    vals = np.sort(np.linalg.eigvalsh(rho.matrix))[::-1]
    return {
        "fidelity": fidelity(rho, target),
        "purity": purity(rho),
        "eigenvalues": vals[:n_eig],
        "pt_min": min_eigenvalue(partial_transpose(rho, 0)),
    }


def target_state(fit: FitResult, target_alpha=None) -> DensityMatrix:
    """Pure ECS of the fitted parity (amplitudes ``target_alpha`` or the fitted ones)."""
    d = fit.rho_est.space.mode_dims
    alpha = target_alpha if target_alpha is not None else fit.params.alpha
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        psi = ecs_state(HilbertSpec(d, spin_dim=1), alpha[0], alpha[1], fit.parity)
    return psi.dm()


def bootstrap_fit(grids: Sequence[WignerGrid], fit: FitResult, n_resamples: int = 50, *,
                  seed: int = 0, target_alpha=None, n_max: int = 7, t_eff: float = 75e-6) -> BootstrapResult:
    """Resample every grid point from its binomial distribution and refit.

    Each refit starts from the original optimum.  Returns standard
    deviations of the parameters and of fidelity, purity, leading
    eigenvalues and the minimum partial-transpose eigenvalue.
    """
    for g in grids:
        if np.any(g.shot_counts <= 0):
            raise ValueError("bootstrap needs shot counts on every grid point")
    target = target_state(fit, target_alpha)
    samples = {"params": [], "fidelity": [], "purity": [], "eigenvalues": [], "pt_min": []}
    failures = 0
    for k in range(n_resamples):
        rng = shot_rng(seed, k)
        new = []
        for g in grids:
            p = np.clip(0.5 * (1.0 - g.values / FOUR_OVER_PI2), 0.0, 1.0)
            kb = rng.binomial(g.shot_counts, p)
            vals = FOUR_OVER_PI2 * (1.0 - 2.0 * kb / g.shot_counts)
            new.append(replace(g, values=vals))
        try:
            res = fit_density_model(new, fit.params, parity=fit.parity, n_max=n_max, t_eff=t_eff,
                                    polish_only=True)
        except (FitError, np.linalg.LinAlgError, ValueError):
            failures += 1
            continue
        f = state_functionals(res.rho_est, target)
        samples["params"].append(res.params.vector())
        for key in ("fidelity", "purity", "eigenvalues", "pt_min"):
            samples[key].append(f[key])
    if failures > 0.2 * n_resamples:
        raise FitError(f"{failures} of {n_resamples} bootstrap fits failed", [])
    arr = {k: np.array(v) for k, v in samples.items()}
    return BootstrapResult(arr["params"].std(axis=0, ddof=1), float(arr["fidelity"].std(ddof=1)),
                           float(arr["purity"].std(ddof=1)), arr["eigenvalues"].std(axis=0, ddof=1),
                           float(arr["pt_min"].std(ddof=1)), arr, failures)


def dominant_eigenstate(rho: DensityMatrix | np.ndarray, n_max: int | None = None):
    """Largest eigenvalue and the Fock populations of its eigenvector.

    Populations are indexed by ``i = n1 (n_max + 1) + n2``.  Among
    eigenvalues equal to within 1e-12 the eigenvector whose most populated
    basis index is smallest is returned.
    """
    m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho)
    w, V = np.linalg.eigh(m)
    top = w.max()
    cands = [k for k in range(w.size) if top - w[k] <= 1e-12]
    pops = [np.abs(V[:, k]) ** 2 for k in cands]
    k = min(range(len(cands)), key=lambda i: (int(np.argmax(pops[i])), i))
    return float(w[cands[k]]), pops[k]
