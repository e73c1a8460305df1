"""Colored Gaussian bath noise: correlation kernels, path sampling, drift shift.

The bath enters the dynamics only through its correlation function
``alpha(t, s) = sum_m c_m exp(-nu_m (t - s))`` (t >= s) and the sampled
realizations of the complex Gaussian process ``z*_t`` with
``<<z_t z*_s>> = alpha(|t - s|)`` and ``<<z_t z_s>> = 0``.

Paths are sampled on a half-step grid (spacing dt/2) so a fixed-step
fourth-order integrator with step dt reads exact samples at every substep;
nothing is ever interpolated.  Sampling uses the exact one-step
discretization of the Ornstein-Uhlenbeck process, per real quadrature:

    x_{n+1} = x_n e^{-gamma h} + sigma sqrt(1 - e^{-2 gamma h}) xi_n

with stationary initial condition, so the sampled marginals are exact at
any step size.  The complex process is built from two independent real
quadratures each carrying half the variance, which makes
``<<z z>> = 0`` hold exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CorrelationKernel",
    "NoisePath",
    "GirsanovMemory",
    "girsanov_shift",
    "sample_path",
    "sample_paths",
    "trajectory_seed",
    "NoiseSamplingError",
]


class NoiseSamplingError(ValueError):
    """Raised when a kernel admits no trajectory sampling scheme."""


@dataclass(frozen=True)
class CorrelationKernel:
    """Bath correlation function as a finite sum of complex exponentials.

    ``alpha(tau) = sum_m c_m exp(-nu_m tau)`` for tau >= 0, with
    Re(nu_m) > 0 so the kernel is integrable.  Callers needing
    ``alpha(s, t)`` with s < t apply ``conj`` themselves.

    ``j_max`` declares how many time derivatives of the kernel the owner
    is willing to vouch for; requests beyond it are rejected.
    """

    terms: tuple[tuple[complex, complex], ...]
    j_max: int = 32

    def __post_init__(self):
        terms = tuple((complex(c), complex(nu)) for c, nu in self.terms)
        if not terms:
            raise ValueError("kernel requires at least one (c, nu) term")
        for _, nu in terms:
            if nu.real <= 0:
                raise ValueError(f"every decay rate needs Re(nu) > 0, got {nu}")
        if self.j_max < 0:
            raise ValueError("j_max must be nonnegative")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def ou(cls, Gamma: float, gamma: float, j_max: int = 32) -> "CorrelationKernel":
        """Ornstein-Uhlenbeck kernel alpha(tau) = (Gamma*gamma/2) exp(-gamma*tau).

        gamma -> infinity at fixed Gamma approaches the memoryless limit with
        total relaxation rate Gamma (the full-line integral of alpha is Gamma).
        """
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        return cls(terms=((Gamma * gamma / 2.0, gamma),), j_max=j_max)

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def weights(self) -> np.ndarray:
        return np.array([c for c, _ in self.terms], dtype=np.complex128)

    @property
    def rates(self) -> np.ndarray:
        return np.array([nu for _, nu in self.terms], dtype=np.complex128)

    def alpha(self, tau: float) -> complex:
        """alpha(tau) for tau >= 0."""
        if tau < 0:
            raise ValueError("alpha is defined for tau >= 0; pass |t - s|")
        return complex(sum(c * np.exp(-nu * tau) for c, nu in self.terms))

    def alpha0(self) -> complex:
        """alpha(0) = sum of the term weights."""
        return complex(sum(c for c, _ in self.terms))

    def alpha_derivative(self, j: int, tau: float) -> complex:
        """j-th time derivative d^j/dt^j alpha(t, s) at t - s = tau >= 0."""
        if j < 0 or j > self.j_max:
            raise ValueError(f"derivative order {j} outside [0, j_max={self.j_max}]")
        if tau < 0:
            raise ValueError("alpha_derivative is defined for tau >= 0")
        return complex(sum(c * (-nu) ** j * np.exp(-nu * tau) for c, nu in self.terms))

    def alpha_derivative0(self, j: int) -> complex:
        return self.alpha_derivative(j, 0.0)

    def integral(self, t: float) -> complex:
        """Closed form of the running integral int_0^t alpha(t, s) ds."""
        return complex(sum(c * (1.0 - np.exp(-nu * t)) / nu for c, nu in self.terms))

    @property
    def is_single_real(self) -> bool:
        """True when the kernel is one real-exponential term (OU form)."""
        if len(self.terms) != 1:
            return False
        c, nu = self.terms[0]
        return c.imag == 0.0 and nu.imag == 0.0 and c.real >= 0.0

    @property
    def sampling_supported(self) -> bool:
        """Paths can be sampled iff every term is a real nonneg-weight OU term."""
        return all(
            c.imag == 0.0 and nu.imag == 0.0 and c.real >= 0.0 for c, nu in self.terms
        )


@dataclass(frozen=True)
class NoisePath:
    """One realization of z*_t sampled on the half-step grid.

    ``values[i]`` is z* at time i*dt/2, for i = 0 .. 2*(T/dt); a horizon T
    with step dt therefore yields ``2*(T/dt) + 1`` samples.
    """

    dt: float
    values: np.ndarray
    seed: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim != 1 or v.size % 2 == 0:
            raise ValueError("half-grid sample count must be odd (2*(T/dt) + 1)")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def n_steps(self) -> int:
        return (self.values.size - 1) // 2

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.size) * (self.dt / 2.0)

    def subsample(self, stride: int) -> "NoisePath":
        """View of the same underlying path on a grid coarsened by ``stride``.

        Used for step-refinement studies: because the sampler is an exact
        discretization, the strided samples are pointwise identical to the
        fine ones, so runs at different dt see the same realization.
        """
        if stride < 1 or (self.values.size - 1) % (2 * stride) != 0:
            raise ValueError(f"stride {stride} does not evenly coarsen this grid")
        return NoisePath(dt=self.dt * stride, values=self.values[::stride], seed=self.seed)


def trajectory_seed(master_seed: int, index: int) -> int:
    """Derive the 64-bit path seed for one trajectory.

    A splitmix64-style counter hash of (master_seed, index): trajectory
    streams are independent of each other and of iteration order, so an
    ensemble decomposes identically no matter how work is scheduled.
    """
    mask = (1 << 64) - 1
    x = (master_seed & mask) ^ ((index & mask) * 0x9E3779B97F4A7C15 & mask)
    x = (x + 0x9E3779B97F4A7C15) & mask
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & mask
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & mask
    return x ^ (x >> 31)


def _n_half(T: float, dt: float) -> int:
    n_steps = round(T / dt)
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"horizon T={T} must be a positive multiple of dt={dt}")
    return 2 * n_steps + 1


def _draw_normals(seed: int, n_terms: int, n_half: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=seed))
    return rng.standard_normal((n_terms, 2, n_half))


def sample_paths(kernel: CorrelationKernel, T: float, dt: float, seeds) -> np.ndarray:
    """Sample one z*-path per seed; returns an (n_paths, n_half) array.

    Multi-term kernels are sampled as a sum of independent complex OU
    components, one per term.  Each path is generated from its own
    counter-based stream, so path i is bit-identical however the batch is
    chunked.  The per-path recursion is vectorized across the whole batch.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not kernel.sampling_supported:
        raise NoiseSamplingError(
            "path sampling needs real positive-weight exponential terms; "
            "complex-frequency kernels are usable only with externally supplied paths"
        )
    seeds = list(seeds)
    nh = _n_half(T, dt)
    nt = kernel.n_terms
    h = dt / 2.0
    rho = np.array([math.exp(-nu.real * h) for _, nu in kernel.terms])
    sig = np.array([math.sqrt(c.real / 2.0) for c, _ in kernel.terms])
    q = np.sqrt(1.0 - rho * rho)

    xi = np.empty((len(seeds), nt, 2, nh))
    for i, s in enumerate(seeds):
        xi[i] = _draw_normals(s, nt, nh)

    x = np.empty_like(xi)
    x[..., 0] = sig[None, :, None] * xi[..., 0]
    scale = (sig * q)[None, :, None]
    for k in range(1, nh):
        x[..., k] = x[..., k - 1] * rho[None, :, None] + scale * xi[..., k]
    z = x[:, :, 0, :] + 1j * x[:, :, 1, :]
    return np.conj(z.sum(axis=1))


def sample_path(kernel: CorrelationKernel, T: float, dt: float, seed: int) -> NoisePath:
    """Sample a single realization of z*_t on the half-step grid."""
    values = sample_paths(kernel, T, dt, [seed])[0]
    return NoisePath(dt=dt, values=values, seed=seed)


def zero_path(T: float, dt: float) -> NoisePath:
    """The identically-zero noise realization (deterministic runs)."""
    return NoisePath(dt=dt, values=np.zeros(_n_half(T, dt), dtype=np.complex128), seed=0)


@dataclass(frozen=True)
class GirsanovMemory:
    """Per-kernel-term accumulators of the drift shift integral.

    ``m[k]`` tracks ``conj(c_k) int_0^t e^{-conj(nu_k)(t-s)} <Ldag>_s ds``;
    the full shift added to z*_t is ``m.sum()``.  Starts at zero.
    """

    m: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.m, dtype=np.complex128)
        v.setflags(write=False)
        object.__setattr__(self, "m", v)

    @classmethod
    def zero(cls, kernel: CorrelationKernel) -> "GirsanovMemory":
        return cls(m=np.zeros(kernel.n_terms, dtype=np.complex128))

    @property
    def shift(self) -> complex:
        return complex(self.m.sum())


def girsanov_shift(
    memory: GirsanovMemory,
    kernel: CorrelationKernel,
    expectation_Ldag: complex,
    dt_sub: float,
) -> tuple[GirsanovMemory, complex]:
    """Advance the shift accumulators by one substep and return the shift.

    Exponential one-step integrator for dm_k/dt = conj(c_k)<Ldag> - conj(nu_k) m_k,
    exact when <Ldag> is constant over the substep.  The propagation engines
    instead integrate the same rate equation inside their joint RK4 step,
    which keeps the overall scheme fourth order; this standalone update is
    the reference recursion used by tests and lightweight consumers.
    """
    c = np.conj(kernel.weights)
    nu = np.conj(kernel.rates)
    decay = np.exp(-nu * dt_sub)
    m_new = memory.m * decay + c * expectation_Ldag * (1.0 - decay) / nu
    mem = GirsanovMemory(m=m_new)
    return mem, mem.shift


def girsanov_rate(
    kernel: CorrelationKernel, m: np.ndarray, expectation_Ldag
) -> np.ndarray:
    """dm/dt for the shift accumulators; broadcasts over leading batch axes."""
    c = np.conj(kernel.weights)
    nu = np.conj(kernel.rates)
    return c * np.asarray(expectation_Ldag)[..., None] - nu * m
