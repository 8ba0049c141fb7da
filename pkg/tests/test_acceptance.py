"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line (also collected in the
terminal summary) and asserts at the stated tolerance.
"""

import time
import warnings

import numpy as np
import pytest

from jointparity import cli
from jointparity import protocols as pr
from jointparity import qstate as q
from jointparity.analysis import estimation as est
from jointparity.analysis.budget import BudgetConfig, error_budget
from jointparity.analysis.chsh import chsh_maximize
from jointparity.analysis.formulas import analytic_parity_population
from jointparity.evolve import NoiseModel, propagate_lindblad, propagate_unitary
from jointparity.hamiltonian import (DrivePhases, NoiseDrive, StaticTerm, bichromatic_carrier, carrier_period,
                                     ideal_sbs_generator, ideal_sbs_unitary, sbs_pi_time)
from jointparity.qstate import HilbertSpec

pytestmark = pytest.mark.filterwarnings("ignore::jointparity.qstate.TruncationWarning")

TWO_PI = 2 * np.pi
TABLE_I_NOISE = NoiseModel(nbar_init=(0.03, 0.03), heat_rates=(6.1, 39.0), noise_60hz=NoiseDrive(TWO_PI * 150))


def test_parity_mapping(acceptance):
    t0 = time.perf_counter()
    s = HilbertSpec((5, 5))
    phases = DrivePhases.from_spin_motion(0.0, 0.0)
    U = ideal_sbs_unitary(s, np.pi, phases)
    worst_overlap, spin_ok = 1.0, True
    for n1 in range(5):
        for n2 in range(5 - n1):
            out = U @ q.fock_state(s, "down", (n1, n2)).amplitudes
            spin = (n1 + n2) % 2
            p_up = np.sum(np.abs(out[s.motional_dim:]) ** 2)
            spin_ok &= bool(np.isclose(p_up, spin, atol=1e-12))
            target = q.fock_state(s, "up" if spin else "down", (n2, n1)).amplitudes
            worst_overlap = min(worst_overlap, abs(np.vdot(target, out)) ** 2)
    dt = time.perf_counter() - t0
    acceptance(1, "parity mapping n1+n2<=4", spin_ok and worst_overlap > 1 - 1e-6 and dt < 10,
               f"min overlap {worst_overlap:.12f}, spin flips on odd parity: {spin_ok}, {dt:.2f} s")


def test_analytic_oracle(acceptance):
    t0 = time.perf_counter()
    eta, omega = (0.1, 0.087), TWO_PI * 103e3
    g = eta[0] * eta[1] * omega
    t = np.linspace(0, 2 * sbs_pi_time(*eta, omega), 200)
    s = HilbertSpec((4, 4))
    H = [StaticTerm(ideal_sbs_generator(s, DrivePhases.from_spin_motion()), g)]
    worst = 0.0
    for n in (1, 2, 3):
        res = propagate_unitary(H, q.fock_state(s, "down", (n, 0)), t[-1], t, rtol=1e-11, atol=1e-12)
        worst = max(worst, np.abs(res.expectations["p_up"] - analytic_parity_population(n, g, t)).max())
    dt = time.perf_counter() - t0
    acceptance(2, "analytic beam-splitter oracle", worst < 1e-6 and dt < 30, f"max deviation {worst:.2e}, {dt:.2f} s")


@pytest.mark.slow
def test_table_i(acceptance):
    res = error_budget(TABLE_I_NOISE, config=BudgetConfig(dims=(20, 20), grid_points=21))
    ref = {"G": 0.172, "D": 0.0069, "M": 0.0815}
    devs = {k: abs(res.stage_loss[k] - v) for k, v in ref.items()}
    devs["total"] = abs(res.total - 0.2602)
    ok = all(d <= 0.010 for d in devs.values())
    detail = ", ".join(f"{k} {100 * res.stage_loss[k]:.2f}%" for k in ("G", "D", "M"))
    acceptance(3, "contrast-loss budget", ok,
               f"{detail}, total {100 * res.total:.2f}% (max |dev| {100 * max(devs.values()):.2f} pp), "
               f"{res.elapsed:.0f} s")


def test_pipeline_equivalence(acceptance):
    t0 = time.perf_counter()
    s = HilbertSpec((14, 14))
    x = np.linspace(-2, 2, 9)
    states = {"|1,1>": q.fock_state(s, "down", (1, 1)).dm(), "|2,1>": q.fock_state(s, "down", (2, 1)).dm(),
              "even ECS": q.ecs_state(s, 1.2, 1.2, "even").dm(), "odd ECS": q.ecs_state(s, 1.2, 1.2, "odd").dm()}
    worst = 0.0
    for rho in states.values():
        for plane in ("real-imag", "imag-imag"):
            grid = pr.scan_wigner(rho, plane, (x, x))
            ref = np.array([q.wigner_point(rho, tuple(b)) for b in grid.betas.reshape(-1, 2)])
            worst = max(worst, np.abs(grid.values.reshape(-1) - ref).max())
    dt = time.perf_counter() - t0
    acceptance(4, "Wigner pipeline equivalence", worst < 1e-3 and dt < 300, f"max |dW| {worst:.2e}, {dt:.1f} s")


@pytest.mark.slow
def test_chsh(acceptance):
    t0 = time.perf_counter()
    text = """
[run]
experiment = chsh
[physics]
mode_dims = 12, 12
[noise]
nbar_init = 0.03, 0.03
heat_rates = 6.1, 39
noise_60hz_hz = 150
"""
    cfg = cli.parse_config(text)
    S = {src: chsh_maximize(cli.chsh_source(cfg, src, (1.2, 1.2))).S for src in ("ideal", "g-stage", "gdm")}
    dt = time.perf_counter() - t0
    ok = S["ideal"] > 2 and S["g-stage"] > 2 and S["gdm"] <= 2 and dt < 600
    acceptance(5, "CHSH", ok, f"S ideal {S['ideal']:.4f}, G {S['g-stage']:.4f}, GDM {S['gdm']:.4f}, {dt:.0f} s")


def test_parity_filter(acceptance):
    t0 = time.perf_counter()
    res = pr.parity_filter_experiment(NoiseModel(heat_rates=(5.3, 17.0)), 10e-3, readout="exact")
    unfiltered, filtered = res.populations["A2"][1, 1], res.populations["A3"][1, 1]
    dt = time.perf_counter() - t0
    ok = unfiltered <= 0.7 and filtered >= 0.8 and filtered - unfiltered >= 0.15 and dt < 300
    acceptance(6, "parity filtering", ok,
               f"P11 unfiltered {unfiltered:.4f}, post-selected {filtered:.4f}, kept {res.keep_probability:.3f}, "
               f"{dt:.1f} s")


@pytest.mark.slow
def test_estimator_round_trip(acceptance):
    t0 = time.perf_counter()
    truth = est.ModelParams((1.31, 1.26), (0.03, 0.05), (11.0, 52.0), (1307.0, 378.0), 0.009)
    axis = np.linspace(-3, 3, 61)
    grids = []
    for k, plane in enumerate(("real-real", "imag-imag")):
        b = pr.plane_betas(plane, axis, axis)
        grids.append(pr.sample_wigner_grid(est.forward_model(truth, b), plane, (axis, axis), 300, None, 7 + k, b))
    init = est.ModelParams((1.2, 1.2), (0.03, 0.03), (6.1, 39.0), (750.0, 750.0), 0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit = est.fit_density_model(grids, init)
        bs = est.bootstrap_fit(grids, fit, 50, seed=7)
    v = fit.params.vector()
    da = np.abs(v[:2] - [1.31, 1.26]).max()
    dn = np.abs(v[2:4] - [0.03, 0.05]).max()
    dc = abs(v[8] - 0.009)
    dt = time.perf_counter() - t0
    ok = (da <= 0.05 and dn <= 0.03 and dc <= 0.005 and 0.8 <= fit.chi2_reduced <= 1.5
          and 1e-3 <= bs.fidelity_std <= 1e-1 and dt < 1800)
    acceptance(7, "estimator round trip", ok,
               f"|dalpha| {da:.4f}, |dnbar| {dn:.4f}, |dc| {dc:.4f}, chi2_red {fit.chi2_reduced:.3f}, "
               f"fidelity std {bs.fidelity_std:.4f} ({bs.failures} failed resamples), {dt:.0f} s")


def test_heating_law(acceptance):
    rate = 17.0
    s = HilbertSpec((12, 12), spin_dim=1)
    t = np.linspace(0, 10e-3, 11)
    res = propagate_lindblad([], q.thermal_density(s, (0.0, 0.0)), NoiseModel(heat_rates=(rate, rate)), t[-1], t,
                             rtol=1e-10, atol=1e-12)
    slopes = [np.polyfit(t, res.expectations[k], 1)[0] for k in ("n1", "n2")]
    rel = max(abs(x / rate - 1) for x in slopes)
    acceptance(8, "heating law", rel < 5e-3, f"slopes {slopes[0]:.4f}, {slopes[1]:.4f} quanta/s, rel dev {rel:.1e}")


def test_off_resonant_carrier(acceptance):
    s = HilbertSpec((3, 3))
    delta, omega = TWO_PI * 360e3, TWO_PI * 120e3
    td = carrier_period(delta)
    t = td * np.arange(1, 6)
    H = [bichromatic_carrier(s, omega, delta, DrivePhases.from_spin_motion())]
    res = propagate_unitary(H, q.fock_state(s, "down", (0, 0)), t[-1], t, rtol=1e-11, atol=1e-13)
    worst = float(np.max(res.expectations["p_up"]))
    acceptance(9, "off-resonant carrier returns", worst < 1e-3, f"max P_up at n*2pi/delta {worst:.2e}")


def test_lamb_dicke_breakdown(acceptance):
    t0 = time.perf_counter()
    sdf = pr.sdf_breakdown_study([2, 4, 6, 8], eta=0.1, dim=200)
    sbs = pr.sbs_breakdown_study(range(1, 9))
    fid = sdf["fidelity"]
    t1 = sbs["t_map"][0]
    late = all(tm > t1 for n, tm in zip(sbs["n"], sbs["t_map"]) if n >= 6)
    ok = sdf["nbar"][-1] < 64 and bool(np.all(np.diff(fid) < 0)) and late
    dt = time.perf_counter() - t0
    acceptance(10, "Lamb-Dicke breakdown", ok,
               f"nbar at alpha=8: {sdf['nbar'][-1]:.2f}, fidelities {np.round(fid, 4).tolist()}, "
               f"t_map/t_map(n=1) for n>=6: {np.round(np.asarray(sbs['t_map'][5:]) / t1, 3).tolist()}, {dt:.1f} s")


def test_coherence_signature(acceptance):
    r = pr.ramsey_scan("bsb", np.linspace(0, 3e-3, 31), shot_sigma=(TWO_PI * 80.0, 0.0))
    ratio = r.fits["gaussian"]["residual"] / r.fits["exponential"]["residual"]
    fid = pr.common_mode_fidelity(lambda t: TWO_PI * 150 * np.sin(TWO_PI * 60 * t + 0.4), 2e-3)
    acceptance(11, "coherence-model signature", ratio < 0.8 and fid > 1 - 1e-8,
               f"residual ratio gauss/exp {ratio:.3f}, common-mode fidelity 1-{1 - fid:.1e}")
