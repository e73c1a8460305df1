import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nmqsd.model import (
    SystemSpec,
    angular_momentum,
    pauli,
    qubit_decay_system,
    sigma_minus,
    spin_boson_system,
    three_level_system,
    validate_system,
)


def comm(a, b):
    return a @ b - b @ a


class TestAngularMomentum:
    def test_spin_half_is_pauli_over_two(self):
        jx, jy, jz, jm = angular_momentum(1)
        sx, sy, sz = pauli()
        assert np.allclose(jx, sx / 2) and np.allclose(jy, sy / 2)
        assert np.array_equal(jz, np.diag([0.5, -0.5]))

    def test_spin_one_jz(self):
        _, _, jz, _ = angular_momentum(2)
        assert np.array_equal(jz, np.diag([1.0, 0.0, -1.0]))

    def test_spin_one_lowering_elements(self):
        # ladder formula <m-1|J-|m> = sqrt(j(j+1) - m(m-1)), j = 1
        _, _, _, jm = angular_momentum(2)
        expected = np.zeros((3, 3), dtype=complex)
        for col, m in enumerate([1.0, 0.0]):
            expected[col + 1, col] = math.sqrt(1 * 2 - m * (m - 1))
        assert np.allclose(jm, expected)
        assert jm[1, 0] == pytest.approx(math.sqrt(2))
        assert jm[2, 1] == pytest.approx(math.sqrt(2))

    def test_jminus_is_jx_minus_i_jy(self):
        for two_j in range(0, 9):
            jx, jy, jz, jm = angular_momentum(two_j)
            assert np.abs(jm - (jx - 1j * jy)).max() < 1e-12

    @pytest.mark.parametrize("two_j", range(1, 9))
    def test_su2_commutators(self, two_j):
        jx, jy, jz, _ = angular_momentum(two_j)
        assert np.abs(comm(jx, jy) - 1j * jz).max() < 1e-12
        assert np.abs(comm(jy, jz) - 1j * jx).max() < 1e-12
        assert np.abs(comm(jz, jx) - 1j * jy).max() < 1e-12

    @pytest.mark.parametrize("two_j", range(1, 9))
    def test_casimir(self, two_j):
        jx, jy, jz, _ = angular_momentum(two_j)
        j = two_j / 2
        total = jx @ jx + jy @ jy + jz @ jz
        assert np.abs(total - j * (j + 1) * np.eye(two_j + 1)).max() < 1e-12

    def test_deterministic(self):
        a = angular_momentum(5)
        b = angular_momentum(5)
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            angular_momentum(-1)


class TestValidateSystem:
    def test_clean_qubit_passes(self):
        _, _, sz = pauli()
        spec = SystemSpec(
            dim=2, hamiltonian=sz, lindblad=sigma_minus(),
            initial_state=[1.0, 0.0], observables={"sz": sz},
        )
        report = validate_system(spec)
        assert report.ok
        assert not report.lindblad_self_adjoint

    def test_self_adjoint_flag(self):
        _, _, sz = pauli()
        spec = SystemSpec(dim=2, hamiltonian=sz, lindblad=sz, initial_state=[1, 0])
        assert validate_system(spec).lindblad_self_adjoint

    def test_norm_failure_deviation(self):
        _, _, sz = pauli()
        spec = SystemSpec(dim=2, hamiltonian=sz, lindblad=sz, initial_state=[1, 1])
        report = validate_system(spec)
        assert not report.ok
        bad = [c for c in report.failures if "norm" in c.name]
        assert len(bad) == 1
        assert bad[0].deviation == pytest.approx(math.sqrt(2) - 1)

    def test_nonhermitian_hamiltonian_reported(self):
        spec = SystemSpec(
            dim=2, hamiltonian=[[0, 1], [0, 0]], lindblad=np.eye(2),
            initial_state=[1, 0],
        )
        report = validate_system(spec)
        assert not report.ok
        assert any("hamiltonian" in c.name for c in report.failures)
        # reporting never raises
        assert "FAIL" in report.summary()

    def test_nonhermitian_observable_reported(self):
        spec = SystemSpec(
            dim=2, hamiltonian=np.eye(2), lindblad=np.eye(2),
            initial_state=[1, 0], observables={"bad": [[0, 1], [0, 0]]},
        )
        assert not validate_system(spec).ok


class TestSystemSpec:
    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            SystemSpec(dim=2, hamiltonian=np.eye(3), lindblad=np.eye(2),
                       initial_state=[1, 0])
        with pytest.raises(ValueError):
            SystemSpec(dim=2, hamiltonian=np.eye(2), lindblad=np.eye(2),
                       initial_state=[1, 0, 0])

    def test_arrays_frozen(self):
        spec = three_level_system()
        with pytest.raises(ValueError):
            spec.hamiltonian[0, 0] = 99.0

    def test_presets_validate(self):
        for spec in (three_level_system(), spin_boson_system(), qubit_decay_system()):
            assert validate_system(spec).ok

    def test_three_level_shape(self):
        spec = three_level_system(omega=2.0)
        assert spec.dim == 3
        assert np.array_equal(spec.hamiltonian, np.diag([2.0, 0.0, -2.0]))
        assert set(spec.observables) == {"Jx", "Jy", "Jz"}

    def test_spin_boson_self_adjoint_coupling(self):
        assert validate_system(spin_boson_system()).lindblad_self_adjoint


@given(st.integers(min_value=0, max_value=12))
def test_angular_momentum_dimensions(two_j):
    mats = angular_momentum(two_j)
    for a in mats:
        assert a.shape == (two_j + 1, two_j + 1)
