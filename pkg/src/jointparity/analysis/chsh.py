"""CHSH parameter from displaced joint-parity measurements."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from ..protocols import FOUR_OVER_PI2, WignerGrid

__all__ = ["ChshResult", "chsh_value", "chsh_maximize"]

_PLANE_UNITS = {"imag-imag": (1j, 1j), "real-real": (1.0, 1.0), "real-imag": (1.0, 1j),
                "imag-real": (1j, 1.0)}


@dataclass
class ChshResult:
    betas: tuple          # (beta1^(1), beta1^(2), beta2^(1), beta2^(2))
    S: float
    S_grid: float
    grid_betas: tuple
    symmetric: bool


def chsh_value(parity: Callable[[complex, complex], float], b11, b12, b21, b22) -> float:
    """``P(a1,b1) - P(a1,b2) + P(a2,b1) + P(a2,b2)`` with ``a = beta1``, ``b = beta2`` settings."""
    return (parity(b11, b21) - parity(b11, b22) + parity(b12, b21) + parity(b12, b22))


def _grid_search(P: np.ndarray, symmetric: bool):
    """Best settings on a parity table ``P[i, j] = <P(x_i, y_j)>``."""
    n = P.shape[0]
    if symmetric:
        # a1 = b2 = u, a2 = b1 = v
        u = np.arange(n)[:, None]
        v = np.arange(n)[None, :]
        S = P[u, v] - P[u, u] + P[v, v] + P[v, u]
        k = np.unravel_index(np.argmax(S), S.shape)
        i, j = int(k[0]), int(k[1])
        return float(S[i, j]), (i, j, j, i)
    # for fixed (b1, b2) the a1 and a2 choices separate
    best = (-np.inf, None)
    for b1 in range(n):
        diff = P[:, b1][:, None] - P            # P(a1,b1) - P(a1,b2), shape (a1, b2)
        summ = P[:, b1][:, None] + P            # P(a2,b1) + P(a2,b2)
        tot = diff.max(axis=0) + summ.max(axis=0)
        b2 = int(np.argmax(tot))
        if tot[b2] > best[0]:
            best = (float(tot[b2]), (int(np.argmax(diff[:, b2])), int(np.argmax(summ[:, b2])), b1, b2))
    return best


def chsh_maximize(W_source, search_domain: float = 2.0, *, step: float = 0.1,
                  plane: str = "imag-imag", symmetric: bool = True, refine: bool = True,
                  tol: float = 1e-6) -> ChshResult:
    """Largest CHSH parameter over displacement settings on a line per mode.

    ``W_source`` is either a callable ``W(beta1, beta2)`` or a
    :class:`WignerGrid` (grid-limited search only).  Settings are real
    coordinates along the plane's axes within ``[-search_domain,
    search_domain]``.  A coarse grid search is followed, for callables, by a
    simplex refinement.
    """
    u1, u2 = _PLANE_UNITS[plane]
    if isinstance(W_source, WignerGrid):
        x = W_source.beta1_axis
        if not np.allclose(x, W_source.beta2_axis):
            raise ValueError("CHSH search needs identical axes for both modes")
        P = W_source.values / FOUR_OVER_PI2
        fn = None
    else:
        x = np.arange(-search_domain, search_domain + 0.5 * step, step)
        fn = W_source
        P = np.array([[fn(u1 * a, u2 * b) for b in x] for a in x]) / FOUR_OVER_PI2
    S_grid, idx = _grid_search(P, symmetric)
    grid_settings = tuple(float(x[i]) for i in idx)
    settings = grid_settings
    S = S_grid
    if refine and fn is not None:
        def par(a, b):
            return fn(u1 * a, u2 * b) / FOUR_OVER_PI2

        if symmetric:
            def neg(z):
                return -chsh_value(par, z[0], z[1], z[1], z[0])
            seeds = [np.array(grid_settings[:2])]
        else:
            def neg(z):
                return -chsh_value(par, *z)
            # the symmetric optimum is a feasible point, so start there as well
            _, sidx = _grid_search(P, True)
            seeds = [np.array(grid_settings), np.array([x[i] for i in sidx])]
        for z0 in seeds:
            for _ in range(2):   # one restart shakes off a collapsed simplex
                res = minimize(neg, z0, method="Nelder-Mead",
                               options={"xatol": tol, "fatol": tol * 1e-2, "maxfev": 4000})
                z0 = res.x
            if -res.fun > S:
                S = float(-res.fun)
                z = res.x
                settings = (z[0], z[1], z[1], z[0]) if symmetric else tuple(z)
    betas = (u1 * settings[0], u1 * settings[1], u2 * settings[2], u2 * settings[3])
    gb = (u1 * grid_settings[0], u1 * grid_settings[1], u2 * grid_settings[2], u2 * grid_settings[3])
    return ChshResult(tuple(complex(b) for b in betas), S, S_grid, tuple(complex(b) for b in gb), symmetric)
