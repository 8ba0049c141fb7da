"""Contrast-loss budget for even entangled coherent states.

The contrast of a Wigner slice is its root-mean-square value over the grid,
and losses are fractions of the ideal state's contrast.  The chain has three
stages: G prepares the state with exact forces (read out with ideal
displacements and a direct parity), D adds the exact displacement forces,
and M replaces the direct parity with the exact beam-splitter pulse.  Each
noise source is switched on alone, and its loss is measured against the
same chain with all noise off, so the exact-dynamics corrections of the
noiseless chain are not charged to any source.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..evolve import NoiseModel, noise_phases
from ..protocols import WignerPipeline, plane_betas, prepare_ecs
from ..qstate import HilbertSpec, ecs_state

__all__ = ["BudgetConfig", "ErrorBudget", "error_budget", "rms_contrast"]


@dataclass(frozen=True)
class BudgetConfig:
    alpha: tuple = (1.2, 1.2)
    dims: tuple = (20, 20)
    lamb_dicke: tuple = (0.1, 0.087)
    plane: str = "imag-imag"
    extent: float = 2.5
    grid_points: int = 21
    n_phases: int = 8
    sdf_omega: float = 2 * np.pi * 100e3
    sbs_pi_time: float = 550e-6
    detection_time: float = 250e-6
    generation_time: float = 350e-6


@dataclass
class ErrorBudget:
    stage_loss: dict                 # 'G', 'D', 'M' -> fractional loss
    source_loss: dict                # (stage, source) -> fractional loss
    total: float
    contrast: dict = field(default_factory=dict)
    config: BudgetConfig | None = None
    elapsed: float = 0.0
    cascade: dict = field(default_factory=dict)   # 'G', 'GD', 'GDM' -> loss with all noise stacked

    def table(self) -> list[tuple[str, str, float]]:
        rows = []
        for stage in ("G", "D", "M"):
            for (st, src), v in self.source_loss.items():
                if st == stage:
                    rows.append((stage, src, v))
            if stage in self.stage_loss:
                rows.append((stage, "total", self.stage_loss[stage]))
        rows.append(("all", "total", self.total))
        return rows


def rms_contrast(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(values))))


def _g_states(cfg: BudgetConfig, space: HilbertSpec, noise: NoiseModel, on: set, phases):
    """Heralded motional states after generation, one per 60-Hz phase when needed."""
    kw = dict(include_nbar="temperature" in on, include_heating="heating" in on,
              include_dephasing="dephasing" in on, omega=cfg.sdf_omega,
              detection_time=cfg.detection_time, generation_time=cfg.generation_time)
    a1, a2 = cfg.alpha
    if "dephasing" in on and noise.noise_60hz is not None:
        return [prepare_ecs(space, a1, a2, "even", noise, phi_noise=p, **kw).motional for p in phases]
    return [prepare_ecs(space, a1, a2, "even", noise, **kw).motional]


def _stage_noise(noise: NoiseModel, on: set) -> NoiseModel | None:
    if not on:
        return None
    return NoiseModel(heat_rates=noise.heat_rates if "heating" in on else (0.0, 0.0),
                      noise_60hz=noise.noise_60hz if "dephasing" in on else None)


def error_budget(noise: NoiseModel, stages: Sequence[str] = ("G", "GD", "GDM"),
                 config: BudgetConfig | None = None, *,
                 cascade: bool = False,
                 progress: Callable[[str], None] | None = None) -> ErrorBudget:
    """Per-stage and per-source contrast losses of the full measurement chain.

    Stage totals are sums of their source losses and the overall total is
    the sum of the stages.  With ``cascade`` the losses of the stacked
    G, GD and GDM chains (all noise on) are also computed.
    """
    cfg = config or BudgetConfig()
    for s in stages:
        if s not in ("G", "GD", "GDM"):
            raise ValueError(f"unknown stage {s!r}")
    t_start = time.perf_counter()
    space = HilbertSpec(cfg.dims, cfg.lamb_dicke)
    axis = np.linspace(-cfg.extent, cfg.extent, cfg.grid_points)
    betas = plane_betas(cfg.plane, axis, axis)
    phases = noise_phases(cfg.n_phases)
    clock = cfg.generation_time
    say = progress or (lambda _m: None)

    pipes: dict = {}

    def pipeline(readout: str, d_on: frozenset = frozenset(), m_on: frozenset = frozenset()) -> WignerPipeline:
        key = (readout, d_on, m_on)
        if key not in pipes:
            pipes[key] = WignerPipeline(space, readout, _stage_noise(noise, d_on), _stage_noise(noise, m_on),
                                        cfg.sdf_omega, cfg.sbs_pi_time, clock)
        return pipes[key]

    g_cache: dict = {}

    def g_states(on: frozenset):
        if on not in g_cache:
            g_cache[on] = _g_states(cfg, space, noise, set(on), phases)
        return g_cache[on]

    def contrast(g_on, readout="ideal", d_on=frozenset(), m_on=frozenset()) -> float:
        states = g_states(frozenset(g_on))
        pipe = pipeline(readout, frozenset(d_on), frozenset(m_on))
        if "dephasing" in d_on and noise.noise_60hz is not None:
            W = np.mean([pipe.grid(states[k % len(states)], betas, p) for k, p in enumerate(phases)], axis=0)
        else:
            # linear in the state: average first
            W = pipe.grid(np.mean(states, axis=0), betas)
        return rms_contrast(W)

    g_all = {"temperature", "heating", "dephasing"}
    d_all = {"heating", "dephasing"}
    c = {}
    say("ideal")
    mspace = HilbertSpec(cfg.dims, cfg.lamb_dicke, spin_dim=1)
    ideal = ecs_state(mspace, cfg.alpha[0], cfg.alpha[1], "even").dm().matrix
    c["ideal"] = rms_contrast(pipeline("ideal").grid(ideal, betas))

    def loss(key):
        return 1.0 - c[key] / c["ideal"]

    source: dict = {}
    stage: dict = {}
    # each source alone, against the same chain with that stage's noise off
    if "G" in stages:
        c["G:none"] = contrast(set())
        for src in ("temperature", "heating", "dephasing"):
            say(f"G {src}")
            c[f"G:{src}"] = contrast({src})
            source[("G", src)] = loss(f"G:{src}") - loss("G:none")
    if "GD" in stages:
        c["D:none"] = contrast(set(), "direct")
        for src in ("heating", "dephasing"):
            say(f"D {src}")
            c[f"D:{src}"] = contrast(set(), "direct", {src})
            source[("D", src)] = loss(f"D:{src}") - loss("D:none")
    if "GDM" in stages:
        say("M heating")
        c["M:none"] = contrast(set(), "exact")
        c["M:heating"] = contrast(set(), "exact", m_on={"heating"})
        source[("M", "heating")] = loss("M:heating") - loss("M:none")
    for (st, _src), v in source.items():
        stage[st] = stage.get(st, 0.0) + v
    total = sum(stage.values())

    if cascade:
        say("cascade")
        c["G"] = contrast(g_all)
        c["GD"] = contrast(g_all, "direct", d_all)
        c["GDM"] = contrast(g_all, "exact", d_all, {"heating"})
    cascade_loss = {k: loss(k) for k in ("G", "GD", "GDM") if k in c}
    return ErrorBudget(stage, source, total, c, cfg, time.perf_counter() - t_start, cascade_loss)
