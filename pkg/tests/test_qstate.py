import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from jointparity import qstate as q
from jointparity.qstate import HilbertSpec, DensityMatrix, StateVector

FOUR_OVER_PI2 = 4 / np.pi ** 2


@pytest.fixture(scope="module")
def space20():
    return HilbertSpec((20, 20))


@pytest.fixture(scope="module")
def small():
    return HilbertSpec((6, 5))


def random_density(space, rank, rng):
    g = rng.normal(size=(space.dim, rank)) + 1j * rng.normal(size=(space.dim, rank))
    m = g @ g.conj().T
    return DensityMatrix(space, m / np.trace(m).real)


# ---------------------------------------------------------------- types

class TestHilbertSpec:
    def test_dimension(self):
        s = HilbertSpec((3, 4))
        assert s.dim == 24
        assert s.subsystem_dims == (2, 3, 4)

    def test_default_lamb_dicke(self):
        assert HilbertSpec((4, 4)).lamb_dicke == (0.1, 0.087)

    @pytest.mark.parametrize("kw", [dict(mode_dims=(1, 4)), dict(mode_dims=(4, 4), lamb_dicke=(0.1, 1.0)),
                                    dict(mode_dims=(4, 4), lamb_dicke=(0.1,)),
                                    dict(mode_dims=(4,), spin_dim=3)])
    def test_rejects_bad_fields(self, kw):
        with pytest.raises(ValueError):
            HilbertSpec(**kw)

    def test_basis_order_spin_slowest(self):
        s = HilbertSpec((3, 4))
        assert s.basis_index(1, (0, 0)) == 12
        assert s.basis_index(0, (1, 0)) == 4
        assert s.basis_index(0, (0, 1)) == 1


class TestContainers:
    def test_state_normalized(self, small):
        v = StateVector(small, np.arange(small.dim) + 1.0)
        assert abs(v.norm - 1) < 1e-10

    def test_state_is_immutable(self, small):
        v = q.fock_state(small, "down", (0, 0))
        with pytest.raises(ValueError):
            v.amplitudes[0] = 0

    def test_density_rejects_non_hermitian(self, small):
        m = np.zeros((small.dim, small.dim), complex)
        m[0, 0] = 1
        m[0, 1] = 0.1
        with pytest.raises(ValueError):
            DensityMatrix(small, m)

    def test_density_rejects_bad_trace(self, small):
        with pytest.raises(ValueError):
            DensityMatrix(small, 2 * np.eye(small.dim) / small.dim)

    def test_validate_catches_negative_eigenvalue(self, small):
        m = np.diag([1.5, -0.5] + [0.0] * (small.dim - 2)).astype(complex)
        with pytest.raises(ValueError):
            DensityMatrix(small, m).validate()


# ---------------------------------------------------------------- operators

class TestOperators:
    def test_commutator_below_truncation(self, space20):
        a = q.annihilation(space20, 0).matrix
        ad = q.creation(space20, 0).matrix
        comm = (a @ ad - ad @ a).reshape(2, 20, 20, 2, 20, 20)
        # drop the top Fock level of mode 1, where truncation breaks the algebra
        diff = comm[:, :-1, :, :, :-1, :] - np.eye(space20.dim).reshape(2, 20, 20, 2, 20, 20)[:, :-1, :, :, :-1, :]
        assert np.abs(diff).max() < 1e-12

    @pytest.mark.parametrize("ctor", [q.number, lambda s, m: q.parity_operator(s)])
    def test_hermitian(self, space20, ctor):
        assert ctor(space20, 0).is_hermitian()

    def test_spin_operators(self, small):
        sx, sy, sz = q.sigma_x(small).matrix, q.sigma_y(small).matrix, q.sigma_z(small).matrix
        assert np.allclose(sx @ sy - sy @ sx, 2j * sz)
        down = q.fock_state(small, "down", (0, 0))
        assert q.sigma_z(small).expect(down).real == pytest.approx(-1)
        assert np.allclose(q.sigma_phi(small, 0).matrix, sx)

    def test_spin_rotation_pi_flips(self):
        R = q.spin_rotation(np.pi, 0.0)
        assert abs(abs(R[1, 0]) - 1) < 1e-12

    @pytest.mark.parametrize("n,expected", [((1, 1), 1), ((2, 1), -1), ((0, 0), 1), ((1, 0), -1)])
    def test_parity_diagonal(self, space20, n, expected):
        P = q.parity_operator(space20)
        psi = q.fock_state(space20, "down", n)
        assert P.expect(psi).real == expected

    def test_parity_squares_to_identity(self, space20):
        P = q.parity_operator(space20).matrix
        assert np.array_equal(P @ P, np.eye(space20.dim))

    def test_displacement_identity_and_inverse(self, space20):
        assert np.allclose(q.displacement_operator(space20, 0, 0).matrix, np.eye(space20.dim))
        D = q.displacement_operator(space20, 0, 1.2).matrix
        Dm = q.displacement_operator(space20, 0, -1.2).matrix
        assert np.abs(D @ Dm - np.eye(space20.dim)).max() < 1e-8
        assert np.abs(D.conj().T @ D - np.eye(space20.dim)).max() < 1e-8

    def test_displacement_matches_expm(self):
        d = 20
        a = np.diag(np.sqrt(np.arange(1, d)), 1)
        ref = expm(1.2 * a.T - 1.2 * a)
        assert np.abs(q.displacement_matrix(d, 1.2) - ref).max() < 1e-10

    def test_displacement_builds_coherent_state(self, space20):
        vac = q.fock_state(space20, "down", (0, 0))
        displaced = q.displacement_operator(space20, 0, 1.2) @ vac
        coh = q.coherent_state(space20, 0, 1.2)
        assert abs(displaced.overlap(coh)) ** 2 > 1 - 1e-8

    def test_rotation(self, space20):
        assert np.allclose(q.rotation_operator(space20, 1, 0).matrix, np.eye(space20.dim))
        assert np.allclose(q.rotation_operator(space20, 0, np.pi).matrix,
                           q.parity_operator(space20, [0]).matrix)
        rotated = q.rotation_operator(space20, 0, np.pi / 2) @ q.coherent_state(space20, 0, 1.2)
        target = q.coherent_state(space20, 0, 1.2j)
        assert abs(rotated.overlap(target)) ** 2 > 1 - 1e-8


# ---------------------------------------------------------------- states

class TestStates:
    def test_fock_out_of_range(self, small):
        with pytest.raises(IndexError):
            q.fock_state(small, "down", (6, 0))

    def test_coherent_vacuum(self, space20):
        assert np.allclose(q.coherent_state(space20, 0, 0).amplitudes,
                           q.fock_state(space20, "down", (0, 0)).amplitudes)

    def test_coherent_mean_number(self, space20):
        psi = q.coherent_state(space20, 0, 1.2)
        assert q.number(space20, 0).expect(psi).real == pytest.approx(1.44, abs=1e-6)

    def test_coherent_vacuum_overlap(self):
        c = q.coherent_amplitudes(20, 1.2)
        assert c[0].real == pytest.approx(math.exp(-0.72), abs=1e-9)
        assert c[0].real == pytest.approx(0.48675, abs=1e-5)

    def test_coherent_truncation_warns(self):
        with pytest.warns(q.TruncationWarning):
            q.coherent_amplitudes(6, 2.0)

    def test_ecs_vacuum_limit(self, space20):
        assert np.allclose(q.ecs_state(space20, 0, 0).amplitudes,
                           q.fock_state(space20, "down", (0, 0)).amplitudes)

    def test_ecs_normalization_constant(self, space20):
        # unnormalized superposition norm equals N_+ computed from the overlap
        psi = q.ecs_state(space20, 1.2, 1.2)
        c = np.kron(q.coherent_amplitudes(20, 1.2), q.coherent_amplitudes(20, 1.2))
        raw = np.linalg.norm(c + np.kron(q.coherent_amplitudes(20, -1.2), q.coherent_amplitudes(20, -1.2)))
        assert raw == pytest.approx(math.sqrt(2 + 2 * math.exp(-5.76)), abs=1e-9)
        assert raw == pytest.approx(1.41643, abs=1e-5)
        assert psi.norm == pytest.approx(1.0)

    @pytest.mark.parametrize("parity,sign", [("even", 1), ("odd", -1)])
    def test_ecs_parity(self, space20, parity, sign):
        psi = q.ecs_state(space20, 1.2, 1.2, parity)
        assert q.parity_operator(space20).expect(psi).real == pytest.approx(sign, abs=1e-9)

    def test_odd_ecs_vanishing(self, space20):
        with pytest.raises(ValueError):
            q.ecs_state(space20, 0, 0, "odd")

    def test_thermal(self, space20):
        rho = q.thermal_density(space20, (0.03, 0.03))
        i = space20.basis_index(0, (0, 0))
        assert rho.matrix[i, i].real == pytest.approx(1 / 1.03 ** 2, abs=1e-9)
        assert rho.matrix[i, i].real == pytest.approx(0.9426, abs=1e-4)
        assert q.purity(q.thermal_density(space20, (0, 0))) == pytest.approx(1)

    def test_thermal_single_mode_purity(self):
        s = HilbertSpec((20,), spin_dim=1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", q.TruncationWarning)
            assert q.purity(q.thermal_density(s, (1.0,))) == pytest.approx(1 / 3, abs=1e-4)

    def test_thermal_rejects_negative(self, small):
        with pytest.raises(ValueError):
            q.thermal_density(small, (-0.1, 0))


# ---------------------------------------------------------------- Wigner

class TestWigner:
    def test_vacuum_origin(self, small):
        rho = q.fock_state(small, "down", (0, 0)).dm()
        assert q.wigner_point(rho, (0, 0)) == pytest.approx(FOUR_OVER_PI2, abs=1e-12)
        assert FOUR_OVER_PI2 == pytest.approx(0.40528, abs=1e-5)

    def test_single_phonon_origin(self, small):
        rho = q.fock_state(small, "down", (1, 0)).dm()
        assert q.wigner_point(rho, (0, 0)) == pytest.approx(-FOUR_OVER_PI2, abs=1e-12)

    def test_even_ecs_origin(self, space20):
        rho = q.ecs_state(space20, 1.2, 1.2).dm()
        assert q.wigner_point(rho, (0, 0)) == pytest.approx(FOUR_OVER_PI2, abs=1e-6)

    def test_vacuum_gaussian(self, small):
        # closed form (2/pi)^2 exp(-2|b1|^2 - 2|b2|^2)
        rho = q.fock_state(small, "down", (0, 0)).dm()
        b = (0.3 - 0.2j, -0.4j)
        expected = FOUR_OVER_PI2 * math.exp(-2 * (abs(b[0]) ** 2 + abs(b[1]) ** 2))
        assert q.wigner_point(rho, b) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.filterwarnings("ignore::jointparity.qstate.TruncationWarning")
    def test_matches_operator_definition(self, small):
        rng = np.random.default_rng(3)
        rho = random_density(small, 2, rng)
        b = (0.2 + 0.1j, -0.15 + 0.05j)
        # evaluate Tr[rho D P D^dag] with displacements from a padded space, then crop
        big = HilbertSpec((40, 40))
        D = (q.displacement_operator(big, 0, b[0]) @ q.displacement_operator(big, 1, b[1])).matrix
        O = (D @ q.parity_operator(big).matrix @ D.conj().T).reshape(2, 40, 40, 2, 40, 40)
        O = O[:, :6, :5, :, :6, :5].reshape(small.dim, small.dim)
        ref = FOUR_OVER_PI2 * np.trace(rho.matrix @ O).real
        assert q.wigner_point(rho, b) == pytest.approx(ref, abs=1e-10)

    @pytest.mark.filterwarnings("ignore::jointparity.qstate.TruncationWarning")
    def test_parity_decomposition(self, small):
        rng = np.random.default_rng(11)
        rho = random_density(small, 3, rng)
        pops = np.real(np.diag(q.motional_matrix(rho))).reshape(small.mode_dims)
        n1, n2 = np.indices(small.mode_dims)
        even = pops[(n1 + n2) % 2 == 0].sum()
        assert q.wigner_point(rho, (0, 0)) == pytest.approx(FOUR_OVER_PI2 * (2 * even - 1), abs=1e-10)

    def test_vacuum_normalization(self):
        # 4-D integral of the vacuum Wigner function on a coarse product grid
        s = HilbertSpec((4, 4))
        rho = q.fock_state(s, "down", (0, 0)).dm()
        x = np.arange(-3, 3.001, 0.5)
        pts = np.array([complex(a, b) for a in x for b in x])
        w = np.array([q.wigner_point(rho, (p, 0)) for p in pts])
        # the vacuum factorises: W(b, 0) = W_1(b) W_1(0) with W_1(0) = 2/pi
        single = w.sum() * 0.25 / (2 / np.pi)
        assert single ** 2 == pytest.approx(1.0, rel=0.02)

    def test_truncation_warning(self):
        s = HilbertSpec((3, 3))
        rho = q.fock_state(s, "down", (2, 0)).dm()
        with pytest.warns(q.TruncationWarning):
            q.wigner_point(rho, (0, 0))


# ---------------------------------------------------------------- functionals

class TestFunctionals:
    def test_fidelity_self(self, small):
        rho = random_density(small, 2, np.random.default_rng(0))
        assert q.fidelity(rho, rho) == pytest.approx(1, abs=1e-8)

    def test_fidelity_orthogonal(self, small):
        a = q.fock_state(small, "down", (0, 0)).dm()
        b = q.fock_state(small, "down", (1, 0)).dm()
        assert q.fidelity(a, b) == pytest.approx(0, abs=1e-12)

    def test_fidelity_vacuum_coherent(self, space20):
        a = q.fock_state(space20, "down", (0, 0)).dm()
        b = q.coherent_state(space20, 0, 1.0).dm()
        assert q.fidelity(a, b) == pytest.approx(math.exp(-1), abs=1e-8)
        assert q.fidelity(a, b) == pytest.approx(0.36788, abs=1e-5)

    def test_fidelity_rejects_non_positive(self, small):
        m = np.diag([1.5, -0.5] + [0.0] * (small.dim - 2)).astype(complex)
        bad = DensityMatrix(small, m)
        with pytest.raises(ValueError):
            q.fidelity(bad, bad)

    def test_fidelity_pure_states(self, small):
        rng = np.random.default_rng(5)
        u = StateVector(small, rng.normal(size=small.dim) + 1j * rng.normal(size=small.dim))
        v = StateVector(small, rng.normal(size=small.dim) + 1j * rng.normal(size=small.dim))
        assert q.fidelity(u.dm(), v.dm()) == pytest.approx(abs(u.overlap(v)) ** 2, abs=1e-10)

    def test_purity_pure(self, small):
        assert q.purity(q.coherent_state(small, 0, 0.3).dm()) == pytest.approx(1)

    def test_partial_transpose_product_is_ppt(self, space20):
        rho = q.fock_state(space20, "down", (1, 2)).dm()
        assert q.min_eigenvalue(q.partial_transpose(rho, 0)) >= -1e-10

    def test_partial_transpose_ecs_negative(self, space20):
        rho = q.partial_trace(q.ecs_state(space20, 1.2, 1.2).dm(), [0, 1])
        assert q.min_eigenvalue(q.partial_transpose(rho, 0)) < -0.1

    def test_partial_trace_spin(self, small):
        rho = q.fock_state(small, "down", (0, 0)).dm()
        red = q.partial_trace(rho, ["spin"])
        assert np.allclose(red.matrix, np.diag([1, 0]))

    def test_partial_trace_entangled_is_mixed(self, space20):
        rho = q.ecs_state(space20, 1.2, 1.2).dm()
        assert q.purity(q.partial_trace(rho, [0])) < 1 - 1e-3

    def test_spin_marginal_of_spin_motion_superposition(self, space20):
        # (|down>(|a,a> + |-a,-a>) + |up>(|a,a> - |-a,-a>))/2: p_down = N_+^2 / 4
        ca = np.kron(q.coherent_amplitudes(20, 1.2), q.coherent_amplitudes(20, 1.2))
        cm = np.kron(q.coherent_amplitudes(20, -1.2), q.coherent_amplitudes(20, -1.2))
        psi = StateVector(space20, np.concatenate([ca + cm, ca - cm]) / 2)
        red = q.partial_trace(psi.dm(), ["spin"])
        assert red.matrix[0, 0].real == pytest.approx((2 + 2 * math.exp(-5.76)) / 4, abs=1e-9)
        assert red.matrix[0, 0].real == pytest.approx(0.50157, abs=1e-5)


# ---------------------------------------------------------------- properties

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4))
def test_random_density_invariants(seed, rank):
    s = HilbertSpec((3, 4))
    rho = random_density(s, rank, np.random.default_rng(seed))
    assert q.purity(rho) <= 1 + 1e-12
    pt = q.partial_transpose(rho, 1)
    assert np.allclose(pt, pt.conj().T)
    red = q.partial_trace(rho, [0, 1])
    assert abs(np.trace(red.matrix) - 1) < 1e-10
    red.validate()


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_displacement_unitary(re, im):
    D = q.displacement_matrix(20, complex(re, im))
    assert np.abs(D.conj().T @ D - np.eye(20)).max() < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_wigner_bounded(a, b, c, d):
    s = HilbertSpec((4, 4))
    rho = q.fock_state(s, "down", (1, 2)).dm()
    assert abs(q.wigner_point(rho, (complex(a, b), complex(c, d)))) <= FOUR_OVER_PI2 + 1e-12
