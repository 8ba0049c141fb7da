"""Fock-population estimates from Wigner slices by non-negative least squares."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from ..protocols import shot_rng

__all__ = ["FockFit", "fit_fock_populations", "IllConditionedBasis"]


class IllConditionedBasis(ValueError):
    def __init__(self, cond: float):
        super().__init__(f"basis slices are ill-conditioned (condition number {cond:.3g})")
        self.condition_number = cond


@dataclass
class FockFit:
    labels: list
    coefficients: np.ndarray
    errors: np.ndarray | None
    residual: float
    condition_number: float

    def as_dict(self) -> dict:
        return dict(zip(self.labels, self.coefficients))


def fit_fock_populations(wigner_slice, basis_slices, labels=None, *, stderr=None,
                         n_bootstrap: int = 0, seed: int = 0, max_condition: float = 1e8,
                         sum_tol: float = 0.05) -> FockFit:
    """Express a measured slice as a non-negative mix of per-Fock-state slices.

    ``basis_slices`` has one row per basis state, each simulated with the
    same pipeline as the data.  With ``n_bootstrap`` and ``stderr`` the data
    are resampled with Gaussian noise to give coefficient error bars.
    """
    y = np.asarray(wigner_slice, dtype=float).reshape(-1)
    A = np.asarray(basis_slices, dtype=float).reshape(len(basis_slices), -1).T
    if A.shape[0] != y.size:
        raise ValueError("basis slices and data differ in length")
    labels = list(labels) if labels is not None else list(range(A.shape[1]))
    s = np.linalg.svd(A, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
    if cond > max_condition:
        raise IllConditionedBasis(cond)
    coef, rnorm = nnls(A, y)
    if coef.sum() > 1.0 + sum_tol:
        # the data carry more weight than any physical mixture can explain
        coef = coef / coef.sum()
    errors = None
    if n_bootstrap > 0:
        if stderr is None:
            raise ValueError("bootstrap needs per-point standard errors")
        sd = np.broadcast_to(np.asarray(stderr, dtype=float).reshape(-1), y.shape)
        rng = shot_rng(seed, 0)
        draws = np.array([nnls(A, y + sd * rng.standard_normal(y.size))[0] for _ in range(n_bootstrap)])
        errors = draws.std(axis=0, ddof=1)
    return FockFit(labels, coef, errors, float(rnorm), cond)
