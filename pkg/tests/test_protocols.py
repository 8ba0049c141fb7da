import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointparity import protocols as pr
from jointparity import qstate as q
from jointparity.analysis.formulas import ideal_ecs_wigner
from jointparity.evolve import NoiseModel
from jointparity.hamiltonian import (DrivePhases, NoiseDrive, StaticTerm, carrier_period,
                                     ideal_sbs_generator, sbs_pi_time)
from jointparity.qstate import DensityMatrix, HilbertSpec, StateVector

FOUR_OVER_PI2 = 4 / np.pi ** 2
TWO_PI = 2 * np.pi

pytestmark = pytest.mark.filterwarnings("ignore::jointparity.qstate.TruncationWarning")


@pytest.fixture(scope="module")
def space12():
    return HilbertSpec((12, 12))


def random_motional(dims, rank, rng):
    s = HilbertSpec(dims, spin_dim=1)
    g = rng.normal(size=(s.dim, rank)) + 1j * rng.normal(size=(s.dim, rank))
    m = g @ g.conj().T
    return DensityMatrix(s, m / np.trace(m).real)


# ---------------------------------------------------------------- sequences

class TestSequences:
    def test_negative_duration(self):
        with pytest.raises(ValueError):
            pr.PulseSequence().add(pr.Wait(-1.0))

    def test_bad_herald(self):
        with pytest.raises(ValueError):
            pr.Measure("maybe")

    def test_herald_renormalizes(self):
        s = HilbertSpec((3, 3))
        seq = pr.PulseSequence([pr.SpinRotate(0.0, np.pi / 2), pr.Measure("keep_up")])
        res = pr.run_sequence(seq, q.fock_state(s, "down", (0, 0)).dm())
        assert res.kept_probability == pytest.approx(0.5)
        assert res.state.matrix[s.basis_index(1, (0, 0)), s.basis_index(1, (0, 0))].real == pytest.approx(1)

    def test_zero_acceptance(self):
        s = HilbertSpec((3, 3))
        seq = pr.PulseSequence([pr.Measure("keep_up")])
        with pytest.raises(ValueError):
            pr.run_sequence(seq, q.fock_state(s, "down", (0, 0)).dm())

    def test_record_dephases_spin(self):
        s = HilbertSpec((2, 2))
        seq = pr.PulseSequence([pr.SpinRotate(0.0, np.pi / 2), pr.Measure("record")])
        res = pr.run_sequence(seq, q.fock_state(s, "down", (0, 0)).dm())
        assert res.kept_probability == 1.0
        assert res.records[0][2] == pytest.approx(0.5)
        assert abs(res.state.matrix[0, s.basis_index(1, (0, 0))]) < 1e-14

    def test_shared_clock(self):
        s = HilbertSpec((2, 2))
        seq = pr.PulseSequence([pr.Wait(1e-3), pr.Measure("record", 2e-4), pr.Wait(5e-4)], clock_origin=1.0)
        res = pr.run_sequence(seq, q.fock_state(s, "down", (0, 0)).dm())
        assert res.end_time == pytest.approx(1.0017)
        assert seq.duration == pytest.approx(1.7e-3)

    def test_pulse_matches_direct_propagation(self):
        s = HilbertSpec((3, 3))
        term = StaticTerm(ideal_sbs_generator(s, DrivePhases.from_spin_motion()), 1.0)
        seq = pr.PulseSequence([pr.Pulse((term,), np.pi)])
        res = pr.run_sequence(seq, q.fock_state(s, "down", (1, 0)).dm())
        assert res.state.matrix[s.basis_index(1, (0, 1)), s.basis_index(1, (0, 1))].real == pytest.approx(1)


# ---------------------------------------------------------------- shots

class TestShots:
    def test_reproducible(self):
        a = pr.sample_shots(0.3, 500, None, seed=4, index=9)
        b = pr.sample_shots(0.3, 500, None, seed=4, index=9)
        assert a == b

    def test_streams_differ(self):
        assert pr.sample_shots(0.5, 1000, None, 4, 0) != pr.sample_shots(0.5, 1000, None, 4, 1)

    def test_records(self):
        k, recs = pr.sample_shots(0.4, 50, None, 1, records=True, timestamp=2.0)
        assert len(recs) == 50 and sum(r.outcome for r in recs) == k
        assert all(r.rng_seed == 1 and r.timestamp == 2.0 for r in recs)

    def test_rejects_zero_shots(self):
        with pytest.raises(ValueError):
            pr.sample_shots(0.4, 0, None, 1)

    def test_herald_accounting(self, space12):
        prep = pr.prepare_ecs(space12, 1.2, 1.2)
        shots = 4000
        _, recs = pr.sample_shots(1 - prep.herald_probability, shots, None, 3, records=True)
        kept = sum(1 for r in recs if r.outcome == 0)
        discarded = sum(1 for r in recs if r.outcome == 1)
        assert kept + discarded == shots
        p = (2 + 2 * math.exp(-5.76)) / 4
        assert abs(kept / shots - p) < 3 * math.sqrt(p * (1 - p) / shots)


# ---------------------------------------------------------------- preparation

class TestFockPreparation:
    def test_vacuum(self):
        s = HilbertSpec((4, 4))
        rho = pr.prepare_fock(s, 0, 0)
        assert q.fidelity(rho, q.fock_state(s, "down", (0, 0)).dm()) == pytest.approx(1)

    @pytest.mark.parametrize("n", [(1, 0), (1, 1), (2, 1)])
    def test_noiseless_targets(self, n):
        s = HilbertSpec((5, 5))
        rho = pr.prepare_fock(s, *n)
        assert q.fidelity(rho, q.fock_state(s, "down", n).dm()) > 1 - 1e-6

    def test_sequence_shape(self):
        seq = pr.fock_preparation_sequence(HilbertSpec((5, 5)), 1, 0)
        assert [getattr(x, "label", "") for x in seq.segments] == ["bsb1", "carrier", "detect"]

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            pr.prepare_fock(HilbertSpec((3, 3)), 3, 0)

    def test_noise_reduces_parity(self):
        s = HilbertSpec((6, 6))
        noise = NoiseModel(nbar_init=(0.03, 0.03), heat_rates=(6.1, 39.0))
        rho = pr.prepare_fock(s, 1, 1, noise, detection_time=250e-6)
        P = q.parity_operator(s).expect(rho).real
        assert P < 1 - 1e-3


class TestEcsPreparation:
    def test_vacuum(self, space12):
        prep = pr.prepare_ecs(space12, 0, 0)
        assert prep.herald_probability == pytest.approx(1)
        assert prep.state.matrix[0, 0].real == pytest.approx(1)

    @pytest.mark.parametrize("parity", ["even", "odd"])
    def test_noiseless_fidelity(self, space12, parity):
        prep = pr.prepare_ecs(space12, 1.2, 1.2, parity)
        target = q.ecs_state(space12, 1.2, 1.2, parity).dm()
        assert q.fidelity(prep.state, target) > 0.999

    def test_herald_probability(self, space12):
        prep = pr.prepare_ecs(space12, 1.2, 1.2)
        assert prep.herald_probability == pytest.approx(0.5016, abs=1e-3)

    def test_timing(self, space12):
        prep = pr.prepare_ecs(space12, 1.2, 1.2)
        assert prep.end_time == pytest.approx(350e-6)
        t1, t2 = prep.sdf_durations
        assert t1 == pytest.approx(38.2e-6, rel=2e-2)
        # calibration includes the exact Debye-Waller factor, so only roughly 1/eta
        assert t2 / t1 == pytest.approx(0.1 / 0.087, rel=5e-3)

    def test_low_herald_rejected(self):
        s = HilbertSpec((4, 4))
        with pytest.raises(ValueError):
            pr.prepare_ecs(s, 1e-3, 1e-3, "odd")

    def test_noise_lowers_origin_value(self, space12):
        noise = NoiseModel(nbar_init=(0.03, 0.03), heat_rates=(6.1, 39.0))
        rho = pr.prepare_ecs(space12, 1.2, 1.2, noise=noise).state
        assert q.wigner_point(rho, (0, 0)) < FOUR_OVER_PI2 * 0.95


# ---------------------------------------------------------------- Wigner measurement

class TestWignerPoint:
    def test_vacuum(self):
        s = HilbertSpec((4, 4))
        w, err = pr.measure_wigner_point(q.fock_state(s, "down", (0, 0)).dm(), (0, 0))
        assert w == pytest.approx(FOUR_OVER_PI2, abs=1e-12) and err == 0

    def test_fock_11_grid(self):
        s = HilbertSpec((6, 6))
        rho = q.fock_state(s, "down", (1, 1)).dm()
        x = np.linspace(-1.5, 1.5, 7)
        grid = pr.scan_wigner(rho, "real-imag", (x, x))
        ref = np.array([[q.wigner_point(rho, (a, 1j * b)) for b in x] for a in x])
        assert np.abs(grid.values - ref).max() < 1e-3
        assert grid.values[3, 3] == pytest.approx(FOUR_OVER_PI2)
        # moving along one axis crosses a node of the single-phonon Wigner function
        assert grid.values[3, 0] < 0 and grid.values[0, 3] < 0

    def test_sampled_stderr(self):
        s = HilbertSpec((4, 4))
        rho = q.fock_state(s, "down", (0, 0)).dm()
        beta = (0.4, 0.0)
        w, err = pr.measure_wigner_point(rho, beta, 300, None, "sampled", seed=5)
        p = 0.5 * (1 - q.wigner_point(rho, beta) / FOUR_OVER_PI2)
        assert err == pytest.approx(2 * FOUR_OVER_PI2 * math.sqrt(p * (1 - p) / 300), rel=0.15)
        assert abs(w - q.wigner_point(rho, beta)) < 4 * err

    def test_detection_correction_unbiased(self):
        s = HilbertSpec((4, 4))
        rho = q.fock_state(s, "down", (0, 0)).dm()
        noise = NoiseModel(detect_up_given_up=0.95, detect_up_given_down=0.01)
        vals = [pr.measure_wigner_point(rho, (0.3, 0.2j), 2000, noise, "sampled", seed=k)[0] for k in range(20)]
        assert np.mean(vals) == pytest.approx(q.wigner_point(rho, (0.3, 0.2j)), abs=0.01)

    def test_bad_mode(self):
        s = HilbertSpec((3, 3))
        with pytest.raises(ValueError):
            pr.measure_wigner_point(q.fock_state(s, "down", (0, 0)).dm(), (0, 0), mode="fast")
        with pytest.raises(ValueError):
            pr.measure_wigner_point(q.fock_state(s, "down", (0, 0)).dm(), (0, 0), mode="sampled")

    def test_pipeline_equivalence_random_states(self):
        rng = np.random.default_rng(2024)
        pipe = pr.WignerPipeline(HilbertSpec((5, 5)))
        worst = 0.0
        for k in range(50):
            rho = random_motional((5, 5), 1 + k % 3, rng)
            beta = tuple(rng.normal(scale=0.7, size=2) + 1j * rng.normal(scale=0.7, size=2))
            worst = max(worst, abs(pipe.value(rho, beta) - q.wigner_point(rho, beta)))
        assert worst < 1e-8

    def test_spin_up_input_rejected(self):
        s = HilbertSpec((3, 3))
        with pytest.raises(ValueError):
            pr.WignerPipeline(s).value(q.fock_state(s, "up", (0, 0)).dm(), (0, 0))


class TestScan:
    def test_even_ecs_diagonal(self, space12):
        rho = q.ecs_state(space12, 1.2, 1.2).dm()
        x = np.linspace(-2, 2, 9)
        grid = pr.scan_wigner(rho, "real-real", (x, x))
        ref = ideal_ecs_wigner(1.2, 1.2, "even", grid.betas[..., 0], grid.betas[..., 1])
        assert np.abs(grid.values - ref).max() < 1e-3

    def test_odd_origin(self, space12):
        rho = q.ecs_state(space12, 1.2, 1.2, "odd").dm()
        grid = pr.scan_wigner(rho, "imag-imag", ([0.0], [0.0]))
        assert grid.values[0, 0] == pytest.approx(-FOUR_OVER_PI2, abs=1e-9)

    def test_seeded_reproducibility(self):
        s = HilbertSpec((4, 4))
        rho = q.fock_state(s, "down", (1, 0)).dm()
        x = np.linspace(-1, 1, 5)
        a = pr.scan_wigner(rho, "real-real", (x, x), 100, mode="sampled", seed=8)
        b = pr.scan_wigner(rho, "real-real", (x, x), 100, mode="sampled", seed=8, workers=3)
        assert np.array_equal(a.values, b.values) and np.array_equal(a.std_errors, b.std_errors)

    def test_grid_bounds(self):
        s = HilbertSpec((4, 4))
        rho = q.fock_state(s, "down", (1, 1)).dm()
        x = np.linspace(-1.5, 1.5, 7)
        g = pr.scan_wigner(rho, "real-real", (x, x), 50, mode="sampled", seed=2)
        assert np.all(np.abs(g.values) <= FOUR_OVER_PI2 + 3 * g.std_errors + 1e-12)
        assert np.all(g.shot_counts == 50)

    def test_plane_betas(self):
        b = pr.plane_betas("real-imag", [1.0, 2.0], [3.0])
        assert b.shape == (2, 1, 2)
        assert b[1, 0, 0] == 2.0 and b[1, 0, 1] == 3j
        with pytest.raises(ValueError):
            pr.plane_betas("diagonal", [0.0], [0.0])

    def test_phase_list_needs_matching_states(self):
        s = HilbertSpec((3, 3))
        rho = q.fock_state(s, "down", (0, 0)).dm()
        with pytest.raises(ValueError):
            pr.scan_wigner([rho, rho], "real-real", ([0.0], [0.0]), phi_noises=[0.0])


class TestExactPipeline:
    def test_noiseless_exact_close_to_ideal(self, space12):
        rho = q.ecs_state(space12, 1.2, 1.2).dm()
        ideal = pr.WignerPipeline(space12)
        exact = pr.WignerPipeline(space12, "exact")
        pts = [(0, 0), (0.5j, -0.3j), (1.0j, 1.0j)]
        for b in pts:
            assert abs(exact.value(rho, b) - ideal.value(rho, b)) < 0.03

    def test_direct_readout_at_origin(self, space12):
        rho = q.ecs_state(space12, 1.2, 1.2).dm()
        direct = pr.WignerPipeline(space12, "direct")
        assert direct.value(rho, (0, 0)) == pytest.approx(FOUR_OVER_PI2, abs=1e-9)

    def test_heating_lowers_contrast(self, space12):
        rho = q.ecs_state(space12, 1.2, 1.2).dm()
        cold = pr.WignerPipeline(space12, "exact")
        hot = pr.WignerPipeline(space12, "exact", m_noise=NoiseModel(heat_rates=(6.1, 39.0)))
        assert hot.value(rho, (0, 0)) < cold.value(rho, (0, 0)) - 1e-3

    def test_calibrated_pi_time(self):
        s = HilbertSpec((4, 4))
        omega = pr.calibrated_sbs_omega(s, 550e-6)
        r = pr.sbs_time_scan(1, 0, [550e-6], omega=omega, dims=(4, 4))
        assert r["p_up"][0] == pytest.approx(1, abs=1e-6)


# ---------------------------------------------------------------- parity readout

class TestJointParity:
    def test_single_phonon(self):
        s = HilbertSpec((4, 4))
        p_even, even, odd = pr.joint_parity_readout(q.fock_state(s, "down", (1, 0)).dm())
        assert p_even == pytest.approx(0, abs=1e-12) and even is None
        assert q.fidelity(odd, q.fock_state(s, "up", (0, 1)).dm()) == pytest.approx(1)

    def test_vacuum(self):
        s = HilbertSpec((3, 3))
        assert pr.joint_parity_readout(q.fock_state(s, "down", (0, 0)).dm())[0] == pytest.approx(1)

    def test_cat_transfer(self):
        s = HilbertSpec((14, 14))
        a = 1.3
        cat = q.coherent_amplitudes(14, a) + q.coherent_amplitudes(14, -a)
        vac = np.eye(14)[0]
        psi = q.product_state(s, "down", [vac, cat])
        p_even, even, _ = pr.joint_parity_readout(psi.dm(), 0.0)
        assert p_even == pytest.approx(1, abs=1e-10)
        moved = q.coherent_amplitudes(14, 1j * a) + q.coherent_amplitudes(14, -1j * a)
        ref = q.product_state(s, "down", [moved, vac])
        assert q.fidelity(even, ref.dm()) > 1 - 1e-8

    @pytest.mark.parametrize("phi_M", [0.0, 0.3, -1.1])
    @pytest.mark.parametrize("parity", [0, 1])
    def test_rotation_form(self, phi_M, parity):
        # post-state = modes swapped, then exp(i(pi/2 - phi_M) n1) exp(i(pi/2 + phi_M) n2)
        d = 6
        s = HilbertSpec((d, d))
        rng = np.random.default_rng(parity + 10)
        n1, n2 = np.indices((d, d))
        sel = ((n1 + n2) % 2 == parity) & (n1 + n2 < d)
        m = np.where(sel, rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)), 0)
        psi = StateVector(s, np.concatenate([m.ravel(), np.zeros(d * d)]))
        _, even, odd = pr.joint_parity_readout(psi.dm(), phi_M)
        post = even if parity == 0 else odd
        rot = m.T * np.exp(1j * (np.pi / 2 - phi_M) * n1) * np.exp(1j * (np.pi / 2 + phi_M) * n2)
        full = np.zeros(2 * d * d, complex)
        full[parity * d * d:(parity + 1) * d * d] = rot.ravel()
        assert q.fidelity(post, StateVector(s, full).dm()) > 1 - 1e-8

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_probabilities_sum(self, seed):
        s = HilbertSpec((3, 3))
        rng = np.random.default_rng(seed)
        v = np.concatenate([rng.normal(size=9) + 1j * rng.normal(size=9), np.zeros(9)])
        rho = StateVector(s, v).dm()
        p_even, _, _ = pr.joint_parity_readout(rho)
        pops = np.abs(v[:9].reshape(3, 3)) ** 2
        pops /= pops.sum()
        n1, n2 = np.indices((3, 3))
        # truncation boundary: the block n1 + n2 <= 2 is mapped exactly
        inside = (n1 + n2) <= 2
        expected_even = pops[((n1 + n2) % 2 == 0) & inside].sum()
        assert p_even >= expected_even - 1e-10


class TestMultimode:
    def test_four_modes_even(self):
        s = HilbertSpec((4, 4, 4, 4))
        res = pr.multimode_parity(q.fock_state(s, "down", (1, 0, 1, 0)).dm(), max_dim=1024)
        assert res["down"] == pytest.approx(1, abs=1e-10)

    def test_vacuum(self):
        s = HilbertSpec((2, 2, 2, 2))
        assert pr.multimode_parity(q.fock_state(s, "down", (0, 0, 0, 0)).dm())["down"] == pytest.approx(1)

    def test_single_excitation(self):
        s = HilbertSpec((2, 2, 2, 2))
        assert pr.multimode_parity(q.fock_state(s, "down", (1, 0, 0, 0)).dm())["up"] == pytest.approx(1)

    def test_odd_count_gets_auxiliary(self):
        s = HilbertSpec((3, 3, 3))
        assert pr.multimode_parity(q.fock_state(s, "down", (1, 1, 1)).dm())["up"] == pytest.approx(1)

    def test_cap(self):
        s = HilbertSpec((3, 3, 3, 3))
        with pytest.raises(ValueError):
            pr.multimode_parity(q.fock_state(s, "down", (0, 0, 0, 0)).dm(), max_dim=100)


# ---------------------------------------------------------------- experiments

class TestParityFilter:
    def test_noiseless_stages_equal(self):
        res = pr.parity_filter_experiment(NoiseModel(), dims=(5, 5), beta2_axis=np.linspace(-1, 1, 5),
                                          readout="ideal")
        for k in ("A2", "A3"):
            assert np.allclose(res.populations[k], res.populations["A1"], atol=1e-8)
            assert np.allclose(res.slices[k], res.slices["A1"], atol=1e-8)
        assert res.keep_probability == pytest.approx(1)


class TestSbsScan:
    def test_matches_analytic(self):
        from jointparity.analysis.formulas import analytic_parity_population
        om = TWO_PI * 103e3
        t = np.linspace(0, 2 * sbs_pi_time(0.1, 0.087, om), 30)
        r = pr.sbs_time_scan(2, 0, t, omega=om, readout="ideal", dims=(3, 3))
        g = 0.1 * 0.087 * om
        assert np.abs(r["p_up"] - analytic_parity_population(2, g, t)).max() < 1e-8

    def test_carrier_rounding(self):
        delta, om = TWO_PI * 360e3, TWO_PI * 120e3
        td = carrier_period(delta)
        t = np.linspace(0.05, 1.0, 10) * 2 * sbs_pi_time(0.1, 0.087, om)
        rounded = pr.sbs_time_scan(1, 0, t, omega=om, carrier_detuning=delta, dims=(3, 3))
        ideal = pr.sbs_time_scan(1, 0, rounded["t"], omega=om, dims=(3, 3))
        assert np.abs(rounded["p_up"] - ideal["p_up"]).max() < 1e-2
        # a quarter period off the grid the carrier rotation is largest
        tq = (np.round(t / td) + 0.25) * td
        off = pr.sbs_time_scan(1, 0, tq, omega=om, carrier_detuning=delta, round_times=False, dims=(3, 3))
        ref = pr.sbs_time_scan(1, 0, tq, omega=om, dims=(3, 3))
        assert np.abs(off["p_up"] - ref["p_up"]).max() > 5e-2


class TestRamsey:
    def test_noiseless_full_contrast(self):
        for kind in ("bsb", "sbs"):
            r = pr.ramsey_scan(kind, [0.0, 1e-3, 2e-3])
            assert np.allclose(r.contrast, 1, atol=1e-10)

    def test_gaussian_signature(self):
        r = pr.ramsey_scan("bsb", np.linspace(0, 3e-3, 13), shot_sigma=(TWO_PI * 80.0, 0.0))
        assert r.fits["gaussian"]["residual"] < 0.8 * r.fits["exponential"]["residual"]

    def test_common_mode_sbs_immune(self):
        nd = NoiseDrive(TWO_PI * 150)
        r = pr.ramsey_scan("sbs", [2e-3], sinusoid=nd, sinusoid_modes=(1, 1))
        assert r.contrast[0] == pytest.approx(1, abs=1e-10)

    def test_differential_reduces_contrast(self):
        nd = NoiseDrive(TWO_PI * 150)
        r0 = pr.ramsey_scan("sbs", [2e-3])
        r1 = pr.ramsey_scan("sbs", [2e-3], sinusoid=nd, sinusoid_modes=(1, -1))
        assert r1.contrast[0] < r0.contrast[0] - 1e-3

    def test_common_mode_fidelity(self):
        f = lambda t: TWO_PI * 150 * math.sin(TWO_PI * 60 * t + 0.3)
        assert pr.common_mode_fidelity(f, 1e-3) > 1 - 1e-8
        assert pr.common_mode_fidelity(f, 1e-3, weights=(1, -1)) < 1 - 1e-4

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            pr.ramsey_scan("rsb", [0.0])


class TestThermometry:
    def test_recovers_nbar(self):
        res = pr.sideband_thermometry(0.05, np.linspace(0, 1e-3, 101), 400, seed=2)
        assert abs(res.nbar - 0.05) < 4 * res.nbar_error + 0.005

    def test_heating_rate_scan(self):
        out = pr.heating_rate_scan(16.5, [0.0, 5e-3, 10e-3, 20e-3], shots=400, seed=3,
                                   t_axis=np.linspace(0, 6e-4, 61))
        assert out["rate"] == pytest.approx(16.5, abs=4 * out["rate_error"] + 1.0)


class TestBreakdown:
    def test_sdf_saturates(self):
        out = pr.sdf_breakdown_study([2, 4], dim=120)
        assert out["nbar"][1] < 16
        assert out["fidelity"][1] < out["fidelity"][0]

    def test_sbs_mapping_shifts(self):
        out = pr.sbs_breakdown_study([1, 7], n_times=401)
        assert out["t_map"][1] > out["t_map"][0]
