import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from nmqsd.noise import (
    CorrelationKernel,
    GirsanovMemory,
    NoisePath,
    NoiseSamplingError,
    girsanov_shift,
    sample_path,
    sample_paths,
    trajectory_seed,
    zero_path,
)

OU = CorrelationKernel.ou


class TestKernel:
    def test_ou_alpha_at_zero(self):
        assert OU(1.0, 1.0).alpha(0.0) == pytest.approx(0.5)

    def test_zero_coupling(self):
        k = OU(0.0, 1.0)
        for tau in (0.0, 0.3, 2.0):
            assert k.alpha(tau) == 0.0

    def test_alpha_log2(self):
        assert OU(1.0, 1.0).alpha(math.log(2.0)) == pytest.approx(0.25)

    def test_alpha_rejects_negative_lag(self):
        with pytest.raises(ValueError):
            OU(1.0, 1.0).alpha(-0.1)

    def test_derivative_ou_first_order(self):
        assert OU(1.0, 1.0).alpha_derivative(1, 0.0) == pytest.approx(-0.5)

    def test_derivative_zero_order_matches_alpha(self):
        k = CorrelationKernel(terms=((0.3 + 0.1j, 1.0 + 0.5j), (0.2, 2.0)))
        for tau in np.linspace(0.0, 5.0, 100):
            assert k.alpha_derivative(0, tau) == pytest.approx(k.alpha(tau), abs=1e-14)

    def test_two_term_second_derivative(self):
        k = CorrelationKernel(terms=((1.0, 1.0), (2.0, 3.0)))
        assert k.alpha_derivative(2, 0.0) == pytest.approx(19.0)

    @pytest.mark.parametrize("j", [1, 2, 3])
    def test_derivative_matches_finite_differences(self, j):
        # Richardson-extrapolated central differences in t of alpha(t - s)
        k = CorrelationKernel(terms=((0.7, 0.9), (0.4, 2.1)))
        tau0 = 0.8

        def central(h):
            stencil = [(-1) ** (j - i) * math.comb(j, i) for i in range(j + 1)]
            taus = tau0 + (np.arange(j + 1) - j / 2.0) * h
            return sum(c * k.alpha(t) for c, t in zip(stencil, taus)) / h**j

        h = 5e-3
        approx = (4.0 * central(h / 2) - central(h)) / 3.0
        assert abs(approx - k.alpha_derivative(j, tau0)) < 1e-5

    def test_derivative_beyond_jmax_rejected(self):
        k = CorrelationKernel(terms=((1.0, 1.0),), j_max=2)
        with pytest.raises(ValueError):
            k.alpha_derivative(3, 0.0)

    def test_unstable_rate_rejected(self):
        with pytest.raises(ValueError):
            CorrelationKernel(terms=((1.0, -0.5),))

    def test_running_integral(self):
        k = OU(1.0, 2.0)
        for t in (0.0, 0.3, 1.7):
            expected = 0.5 * (1.0 - math.exp(-2.0 * t))
            assert k.integral(t) == pytest.approx(expected, abs=1e-14)

    def test_sampling_support_flags(self):
        assert OU(1.0, 1.0).sampling_supported
        assert not CorrelationKernel(terms=((1.0, 1.0 + 1j),)).sampling_supported
        assert not CorrelationKernel(terms=((1j, 1.0),)).sampling_supported


class TestSamplePath:
    def test_sample_count(self):
        path = sample_path(OU(1, 1), T=3.0, dt=0.01, seed=1)
        assert path.values.size == 2 * 300 + 1
        assert path.n_steps == 300

    def test_reproducible(self):
        a = sample_path(OU(1, 1), 2.0, 0.01, seed=42)
        b = sample_path(OU(1, 1), 2.0, 0.01, seed=42)
        assert a.values.tobytes() == b.values.tobytes()

    def test_zero_coupling_gives_zero(self):
        path = sample_path(OU(0.0, 1.0), 1.0, 0.01, seed=5)
        assert np.all(path.values == 0.0)

    def test_batch_matches_single(self):
        seeds = [trajectory_seed(99, i) for i in range(5)]
        batch = sample_paths(OU(1, 0.7), 1.0, 0.02, seeds)
        for i, s in enumerate(seeds):
            single = sample_path(OU(1, 0.7), 1.0, 0.02, seed=s)
            assert batch[i].tobytes() == single.values.tobytes()

    def test_complex_rate_refused(self):
        with pytest.raises(NoiseSamplingError):
            sample_path(CorrelationKernel(terms=((1.0, 1.0 + 0.5j),)), 1.0, 0.1, 1)

    def test_subsample_points_match(self):
        fine = sample_path(OU(1, 1), 2.0, 0.0025, seed=3)
        coarse = fine.subsample(4)
        assert coarse.dt == pytest.approx(0.01)
        assert np.array_equal(coarse.values, fine.values[::4])
        with pytest.raises(ValueError):
            fine.subsample(3)

    def test_bad_grid_rejected(self):
        with pytest.raises(ValueError):
            sample_path(OU(1, 1), T=1.005, dt=0.01, seed=1)
        with pytest.raises(ValueError):
            NoisePath(dt=0.1, values=np.zeros(4, dtype=complex), seed=0)

    def test_zero_path(self):
        p = zero_path(1.0, 0.1)
        assert p.values.size == 21 and np.all(p.values == 0)


_STATS_M = 4000


@pytest.fixture(scope="module")
def paths():
    seeds = [trajectory_seed(2024, i) for i in range(_STATS_M)]
    return np.conj(sample_paths(OU(1.0, 1.0), 3.0, 0.05, seeds))  # z_t samples


class TestPathStatistics:
    # Full-scale statistics run in the acceptance suite; this is a smaller
    # smoke version of the same estimators.
    M = _STATS_M

    def test_mean_zero_everywhere(self, paths):
        mean = paths.mean(axis=0)
        se = paths.std(axis=0, ddof=1) / math.sqrt(self.M)
        assert np.all(np.abs(mean.real) <= 3 * se)
        assert np.all(np.abs(mean.imag) <= 3 * se)

    def test_autocovariance_lags(self, paths):
        i_end = paths.shape[1] - 1
        per_lag = {0.0: i_end, 1.0: i_end - 40, 2.0: i_end - 80}  # dt/2 = 0.025
        for lag, j in per_lag.items():
            prod = paths[:, i_end] * np.conj(paths[:, j])
            est = prod.mean()
            se = prod.std(ddof=1) / math.sqrt(self.M)
            assert abs(est - 0.5 * math.exp(-lag)) <= 3 * se

    def test_pseudo_covariance_vanishes(self, paths):
        i_end = paths.shape[1] - 1
        for j in (i_end, i_end - 40):
            prod = paths[:, i_end] * paths[:, j]
            est = prod.mean()
            se = prod.std(ddof=1) / math.sqrt(self.M)
            assert abs(est) <= 3 * abs(se)

    def test_stationary_variance(self, paths):
        var = np.abs(paths) ** 2
        est = var.mean(axis=0)
        se = var.std(axis=0, ddof=1) / math.sqrt(self.M)
        assert np.all(np.abs(est - 0.5) <= 3 * se)


class TestGirsanovShift:
    def test_zero_signal_stays_zero(self):
        k = OU(1.0, 1.0)
        mem = GirsanovMemory.zero(k)
        for _ in range(100):
            mem, shift = girsanov_shift(mem, k, 0.0, 0.01)
        assert shift == 0.0

    def test_constant_signal_closed_form(self):
        # m(t) = (Gamma/2)(1 - e^{-gamma t}) for <Ldag> = 1
        k = OU(1.0, 1.0)
        mem = GirsanovMemory.zero(k)
        for _ in range(1000):
            mem, shift = girsanov_shift(mem, k, 1.0, 1e-3)
        assert abs(shift - 0.5 * (1 - math.exp(-1.0))) < 1e-9

    def test_stationary_limit(self):
        k = OU(0.8, 2.5)
        c_sig = 0.7 - 0.2j
        mem = GirsanovMemory.zero(k)
        t, h = 0.0, 0.01
        while t < 20.0 / 2.5:
            mem, shift = girsanov_shift(mem, k, c_sig, h)
            t += h
        assert abs(shift - c_sig * 0.8 / 2.0) < 1e-6

    def test_matches_adaptive_quadrature_for_cubic_signal(self):
        # midpoint-sampled exponential integrator against scipy quad
        Gamma, gamma = 1.3, 0.9
        k = OU(Gamma, gamma)

        def signal(s):
            return 1.0 + s - 2.0 * s**2 + 0.5 * s**3

        t_end, h = 1.0, 1e-4
        mem = GirsanovMemory.zero(k)
        n = round(t_end / h)
        for i in range(n):
            mem, shift = girsanov_shift(mem, k, signal((i + 0.5) * h), h)
        exact, _ = quad(
            lambda s: (Gamma * gamma / 2.0) * math.exp(-gamma * (t_end - s)) * signal(s),
            0.0, t_end, epsabs=1e-12, epsrel=1e-12,
        )
        assert abs(shift - exact) < 1e-8

    def test_multi_term_accumulators(self):
        k = CorrelationKernel(terms=((0.5, 1.0), (0.25, 3.0)))
        mem = GirsanovMemory.zero(k)
        for _ in range(2000):
            mem, shift = girsanov_shift(mem, k, 1.0, 1e-3)
        expected = 0.5 * (1 - math.exp(-2.0)) + (0.25 / 3.0) * (1 - math.exp(-6.0))
        assert abs(shift - expected) < 1e-8


class TestTrajectorySeed:
    def test_deterministic(self):
        assert trajectory_seed(123, 45) == trajectory_seed(123, 45)

    @given(st.integers(min_value=0, max_value=2**63), st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=200)
    def test_in_64_bit_range(self, master, idx):
        s = trajectory_seed(master, idx)
        assert 0 <= s < 2**64

    def test_no_collisions_in_prefix(self):
        seeds = {trajectory_seed(7, i) for i in range(20000)}
        assert len(seeds) == 20000
