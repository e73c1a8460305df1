import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmqsd.hierarchy_general import (
    GeneralHierarchyEngine,
    GeometricClosure,
    canonicalize,
    enumerate_keys,
    general_rhs,
    key_weight,
    subset_terms,
)
from nmqsd.hierarchy_ou import OUHierarchyEngine, hierarchy_rhs
from nmqsd.model import spin_boson_system, three_level_system
from nmqsd.noise import CorrelationKernel, sample_path, zero_path


def brute_force_keys(order):
    """Every (j0, .., jk) with weight <= order, canonicalized and deduplicated."""
    found = set()
    for k in range(order + 1):
        # any entry exceeding order - k would already break the weight bound
        for full in itertools.product(range(order - k + 1), repeat=k + 1):
            if k + sum(full) <= order:
                found.add(canonicalize(full))
    return sorted(found, key=lambda key: (len(key) - 1, key))


def noncanonical_keys(order):
    found = set()
    for k in range(order + 1):
        for full in itertools.product(range(order - k + 1), repeat=k + 1):
            if k + sum(full) <= order:
                found.add(full)
    return found


class ReferenceStore:
    """Zero-truncated store over all index vectors, no symmetry exploited."""

    def __init__(self, sys, kernel, order):
        self.sys = sys
        self.kernel = kernel
        self.order = order
        self.keys = sorted(noncanonical_keys(order))
        self.d = sys.dim

    def zero_state(self):
        return {k: np.zeros((self.d, self.d), dtype=complex) for k in self.keys}

    def rhs(self, state, ztil):
        L = self.sys.lindblad
        Ld = self.sys.lindblad_dagger
        H = self.sys.hamiltonian
        zero = np.zeros((self.d, self.d), dtype=complex)

        def get(key):
            return state.get(key, zero)

        out = {}
        for key in self.keys:
            j0, tail = key[0], key[1:]
            k = len(tail)
            acc = np.zeros((self.d, self.d), dtype=complex)
            if k == 0:
                acc += self.kernel.alpha_derivative0(j0) * L
            for pos in range(k):
                child = (j0, *tail[:pos], *tail[pos + 1:])
                q = get(child)
                acc += self.kernel.alpha_derivative0(tail[pos]) * (L @ q - q @ L)
            for slot in range(k + 1):
                lifted = list(key)
                lifted[slot] += 1
                acc += get(tuple(lifted))
            acc -= Ld @ get((0, j0, *tail))
            drift = -1j * H + ztil * L
            acc += drift @ get(key) - get(key) @ drift
            for i in range(k + 1):
                for c, cbar in subset_terms(tail, i):
                    a = Ld @ get((0, *c))
                    b = get((j0, *cbar))
                    acc -= a @ b - b @ a
            out[key] = acc
        return out


def rk4_store(rhs, state, z_samples, dt, n_steps, axpy, copy):
    """Generic RK4 over an opaque store given axpy/copy helpers."""
    for i in range(n_steps):
        z0, z1, z2 = z_samples[2 * i], z_samples[2 * i + 1], z_samples[2 * i + 2]
        k1 = rhs(state, z0)
        k2 = rhs(axpy(state, k1, dt / 2), z1)
        k3 = rhs(axpy(state, k2, dt / 2), z1)
        k4 = rhs(axpy(state, k3, dt), z2)
        state = copy(state, k1, k2, k3, k4, dt)
    return state


class TestKeys:
    def test_order_zero(self):
        assert enumerate_keys(0) == [(0,)]

    def test_order_one(self):
        assert enumerate_keys(1) == [(0,), (1,), (0, 0)]

    def test_order_two_has_seven(self):
        assert len(enumerate_keys(2)) == 7

    @pytest.mark.parametrize("order", range(0, 9))
    def test_matches_brute_force(self, order):
        assert enumerate_keys(order) == brute_force_keys(order)

    @pytest.mark.parametrize("order", range(2, 9))
    def test_canonical_store_is_smaller(self, order):
        # permutation dedup first bites at order 3 (tails of length >= 2
        # with distinct entries); below that the two counts coincide
        if order < 3:
            assert len(enumerate_keys(order)) == len(noncanonical_keys(order))
        else:
            assert len(enumerate_keys(order)) < len(noncanonical_keys(order))

    def test_weight(self):
        assert key_weight((0,)) == 0
        assert key_weight((2, 1, 3)) == 2 + 6

    @given(st.lists(st.integers(min_value=0, max_value=9), min_size=1, max_size=7))
    @settings(max_examples=200)
    def test_canonicalize_idempotent(self, key):
        key = tuple(key)
        once = canonicalize(key)
        assert canonicalize(once) == once
        assert once[0] == key[0]
        assert sorted(once[1:]) == list(once[1:])


class TestSubsetTerms:
    def test_named_example(self):
        pairs = subset_terms((1, 2, 3, 4, 5), 2)
        assert ((1, 4), (2, 3, 5)) in pairs

    def test_choose_none(self):
        assert subset_terms((3, 1, 2), 0) == [((), (3, 1, 2))]

    def test_count_is_binomial(self):
        assert len(subset_terms((1, 2, 3, 4, 5), 2)) == 10

    @given(
        st.lists(st.integers(min_value=0, max_value=4), min_size=0, max_size=6),
        st.integers(min_value=0, max_value=6),
    )
    @settings(max_examples=200)
    def test_counts_and_complements(self, tail, i):
        tail = tuple(tail)
        if i > len(tail):
            with pytest.raises(ValueError):
                subset_terms(tail, i)
            return
        pairs = subset_terms(tail, i)
        assert len(pairs) == math.comb(len(tail), i)
        for c, cbar in pairs:
            assert len(c) == i and len(c) + len(cbar) == len(tail)
            assert sorted(c + cbar) == sorted(tail)


class TestGeneralRhs:
    def test_source_only_from_zero(self):
        sys = spin_boson_system()
        kern = CorrelationKernel.ou(1.0, 2.0)
        out = general_rhs({}, sys, kern, 0.1j, order=2)
        for key, mat in out.items():
            if len(key) == 1:  # level zero
                expected = kern.alpha_derivative0(key[0]) * sys.lindblad
                assert np.allclose(mat, expected)
            else:
                assert np.abs(mat).max() == 0.0

    def test_level_zero_equation_closed_form(self):
        # dQ0^(j0) = a^(j0)(0) L + Q0^(j0+1) - Ldag Q1^((0, j0))
        #            + [-iH + L z - Ldag Q0^(0), Q0^(j0)]
        rng = np.random.default_rng(5)
        sys = spin_boson_system()
        kern = CorrelationKernel.ou(1.0, 2.0)
        order = 3
        keys = enumerate_keys(order)
        store = {
            k: rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
            for k in keys
        }
        z = 0.4 - 0.2j
        out = general_rhs(store, sys, kern, z, order=order)
        L, Ld, H = sys.lindblad, sys.lindblad_dagger, sys.hamiltonian
        for j0 in range(order + 1):
            q = store[(j0,)]
            up = store.get((j0 + 1,), np.zeros((2, 2)))
            low = store.get(canonicalize((0, j0)), np.zeros((2, 2)))
            drift = -1j * H + z * L - Ld @ store[(0,)]
            expected = (
                kern.alpha_derivative0(j0) * L + up - Ld @ low
                + drift @ q - q @ drift
            )
            assert np.abs(out[(j0,)] - expected).max() < 1e-12

    def test_out_of_range_key_rejected(self):
        sys = spin_boson_system()
        kern = CorrelationKernel.ou(1.0, 2.0)
        with pytest.raises(KeyError):
            general_rhs({(9, 9): np.zeros((2, 2))}, sys, kern, 0.0, order=2)

    def test_ou_scaling_relation(self):
        # with the geometric closure, a store built from a chain state by
        # Q_k^(j) = (-gamma)^{sum j} Q_k has a derivative with the same scaling
        rng = np.random.default_rng(8)
        sys = spin_boson_system()
        Gamma, gamma = 1.1, 0.7
        kern = CorrelationKernel.ou(Gamma, gamma)
        order, j_max = 3, 2
        chain = rng.standard_normal((order + 1, 2, 2)) + 1j * rng.standard_normal(
            (order + 1, 2, 2)
        )
        eng = GeneralHierarchyEngine(
            sys, kern, order, closure=GeometricClosure(a=-gamma, j_max=j_max)
        )
        qs = np.zeros((1, eng.n_keys, 2, 2), dtype=complex)
        for i, key in enumerate(eng.keys):
            k = len(key) - 1
            qs[0, i] = (-gamma) ** sum(key) * chain[k]
        z = 0.31 + 0.12j
        dq = eng.rhs_store(qs, np.array([z]))[0]
        dchain = hierarchy_rhs(chain, sys, kern, z)
        for i, key in enumerate(eng.keys):
            k = len(key) - 1
            expected = (-gamma) ** sum(key) * dchain[k]
            assert np.abs(dq[i] - expected).max() < 1e-12


class TestAgainstNonCanonicalReference:
    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_store_dynamics_match_and_permutations_coincide(self, order):
        sys = spin_boson_system()
        kern = CorrelationKernel.ou(0.9, 0.8)
        dt, n_steps = 0.02, 25
        path = sample_path(kern, dt * n_steps, dt, seed=21)
        z = path.values

        ref = ReferenceStore(sys, kern, order)

        def axpy_dict(state, deriv, h):
            return {k: state[k] + h * deriv[k] for k in state}

        def step_dict(state, k1, k2, k3, k4, h):
            return {
                k: state[k] + h / 6.0 * (k1[k] + 2 * k2[k] + 2 * k3[k] + k4[k])
                for k in state
            }

        ref_final = rk4_store(ref.rhs, ref.zero_state(), z, dt, n_steps,
                              axpy_dict, step_dict)

        eng = GeneralHierarchyEngine(sys, kern, order)
        qs = np.zeros((1, eng.n_keys, 2, 2), dtype=complex)

        def rhs_arr(state, zt):
            return eng.rhs_store(state, np.array([zt]))

        def axpy_arr(state, deriv, h):
            return state + h * deriv

        def step_arr(state, k1, k2, k3, k4, h):
            return state + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

        got_final = rk4_store(rhs_arr, qs, z, dt, n_steps, axpy_arr, step_arr)[0]

        # permutation symmetry in the blind reference
        for key in ref.keys:
            canon = canonicalize(key)
            assert np.abs(ref_final[key] - ref_final[canon]).max() < 1e-10

        # canonical engine reproduces the reference
        for i, key in enumerate(eng.keys):
            assert np.abs(got_final[i] - ref_final[key]).max() < 1e-10


class TestPropagateGeneral:
    def test_no_bath_store_stays_zero(self):
        sys = spin_boson_system()
        kern = CorrelationKernel.ou(0.0, 1.0)
        eng = GeneralHierarchyEngine(sys, kern, order=2)
        res = eng.propagate(zero_path(1.0, 0.01))
        assert np.abs(res.store).max() == 0.0

    def test_geometric_closure_reproduces_chain_engine(self):
        sys = spin_boson_system()
        Gamma, gamma = 0.5, 0.4
        kern = CorrelationKernel.ou(Gamma, gamma)
        path = sample_path(kern, 3.0, 0.01, seed=22)
        sz = sys.observables["sigma_z"]
        gen = GeneralHierarchyEngine(
            sys, kern, order=5, closure=GeometricClosure(a=-gamma, j_max=1)
        )
        chain = OUHierarchyEngine(sys, kern, order=5)
        a = gen.propagate(path)
        b = chain.propagate(path)
        assert np.abs(a.expectations(sz) - b.expectations(sz)).max() < 1e-10
        for k in range(3):
            assert np.abs(a.q((0,) * (k + 1)) - b.q[:, k]).max() < 1e-10

    def test_exact_three_level_reduction_via_geometric_closure(self):
        sys = three_level_system()
        gamma = 1.0
        kern = CorrelationKernel.ou(1.0, gamma)
        path = sample_path(kern, 3.0, 0.01, seed=23)
        gen = GeneralHierarchyEngine(
            sys, kern, order=3, closure=GeometricClosure(a=-gamma, j_max=0)
        )
        res = gen.propagate(path)
        from nmqsd.oracles import exact_three_level
        exact = exact_three_level(1.0, 1.0, gamma, path)
        jz = sys.observables["Jz"]
        assert np.abs(res.expectations(jz) - exact.expectations(jz)).max() < 1e-10

    def test_zero_noise_deterministic_and_reproducible(self):
        sys = spin_boson_system()
        kern = CorrelationKernel.ou(0.8, 1.0)
        path = zero_path(1.0, 0.01)
        eng = GeneralHierarchyEngine(sys, kern, order=3)
        a = eng.propagate(path)
        b = eng.propagate(path)
        assert a.store.tobytes() == b.store.tobytes()
        assert np.abs(a.store).max() > 0.0  # bath still drives the store

    def test_geometric_with_multi_term_kernel_rejected(self):
        sys = spin_boson_system()
        kern = CorrelationKernel(terms=((0.3, 1.0), (0.2, 2.0)))
        with pytest.raises(ValueError):
            GeneralHierarchyEngine(
                sys, kern, order=2, closure=GeometricClosure(a=-1.0, j_max=1)
            )

    def test_multi_term_kernel_zero_truncation_runs(self):
        sys = spin_boson_system()
        kern = CorrelationKernel(terms=((0.3, 1.0), (0.2, 2.0)))
        path = sample_path(kern, 1.0, 0.01, seed=24)
        res = GeneralHierarchyEngine(sys, kern, order=3).propagate(path)
        assert np.isfinite(res.psi).all()

    def test_complex_rate_kernel_runs_on_given_path(self):
        # deterministic equivalence only: drive with a frozen real-kernel path
        sys = spin_boson_system()
        kern = CorrelationKernel(terms=((0.3, 1.0 + 0.4j),))
        driving = sample_path(CorrelationKernel.ou(0.5, 1.0), 1.0, 0.01, seed=25)
        res = GeneralHierarchyEngine(sys, kern, order=3).propagate(driving)
        assert np.isfinite(res.psi).all() and np.isfinite(res.store).all()
