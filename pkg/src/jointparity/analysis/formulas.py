"""Closed-form references: beam-splitter parity populations and the
Wigner function of a pure entangled coherent state."""

from __future__ import annotations

import numpy as np
from scipy.special import comb

__all__ = ["analytic_parity_population", "ideal_ecs_wigner", "coherent_cross_wigner"]


def analytic_parity_population(n: int, g: float, t) -> np.ndarray | float:
    """Spin-up probability after a beam-splitter pulse of area ``g t`` on ``|down, n, 0>``.

    ``sum over odd k of C(n, k) cos^{2(n-k)}(gt/2) sin^{2k}(gt/2)``.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    t = np.asarray(t, dtype=float)
    c2 = np.cos(0.5 * g * t) ** 2
    s2 = np.sin(0.5 * g * t) ** 2
    out = np.zeros_like(t)
    for k in range(1, n + 1, 2):
        out = out + comb(n, k, exact=True) * c2 ** (n - k) * s2 ** k
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def coherent_cross_wigner(a, c, beta):
    """Single-mode Wigner transform of ``|a><c|`` at ``beta`` (without the ``2/pi``).

    ``<c| D(beta) P D(-beta) |a>`` for coherent states; broadcasts over ``beta``.
    """
    beta = np.asarray(beta, dtype=complex)
    u = c - beta
    v = beta - a
    overlap = np.exp(-0.5 * abs(u) ** 2 - 0.5 * abs(v) ** 2 + np.conj(u) * v)
    phase = np.exp(0.5 * (beta * np.conj(c) - np.conj(beta) * c)
                   + 0.5 * (np.conj(beta) * a - beta * np.conj(a)))
    return phase * overlap


def ideal_ecs_wigner(alpha1: complex, alpha2: complex, parity: str, beta1, beta2):
    """Two-mode Wigner function of ``N(|a1,a2> +/- |-a1,-a2>)``; broadcasts over betas."""
    if parity not in ("even", "odd"):
        raise ValueError("parity must be 'even' or 'odd'")
    sign = 1.0 if parity == "even" else -1.0
    ov = np.exp(-2.0 * (abs(alpha1) ** 2 + abs(alpha2) ** 2))
    norm2 = 1.0 / (2.0 * (1.0 + sign * ov))
    total = 0.0
    for s, wa in ((1, 1.0), (-1, sign)):
        for t, wc in ((1, 1.0), (-1, sign)):
            total = total + wa * wc * coherent_cross_wigner(s * alpha1, t * alpha1, beta1) \
                * coherent_cross_wigner(s * alpha2, t * alpha2, beta2)
    W = (2.0 / np.pi) ** 2 * norm2 * total
    W = np.real(W)
    return float(W) if np.ndim(W) == 0 else W
