"""Independent reference engines used to cross-validate the production chain.

Four oracles, each with a deliberately separate code path:

* :class:`SdeHierarchyOracle` -- the doubly-indexed operator hierarchy
  Q_m^(n) (noise order n, convolution order m), integrated jointly with the
  production chain on one shared noise realization.  The two towers are
  related level by level by Q_k = sum_{n=k}^{N} n!/(n-k)! Q_k^(n).
* HOPS reconstruction -- the pure-state hierarchy, built from the chain
  operators via |psi_k> = sum_i C(k-1, i) Q_i |psi_{k-1-i}>, plus an
  independent closed-form expansion of that recursion for checking it.
* :func:`exact_three_level` -- the closed two-operator system that solves
  the spin-1 ladder model exactly (its functional expansion stops at first
  order), written out verbatim rather than routed through the generic chain.
* :func:`lindblad_oracle` -- a memoryless master-equation integrator used as
  the large-bandwidth limit check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .hierarchy_ou import OUHierarchyEngine, TrajectoryResult, Truncation
from .integrate import rk4_propagate
from .model import SystemSpec, angular_momentum
from .noise import CorrelationKernel, NoisePath, girsanov_rate

__all__ = [
    "SdeHierarchyOracle",
    "JointSdeResult",
    "propagate_joint_sde",
    "sde_keys",
    "reconstruction_weights",
    "hops_states",
    "hops_states_direct",
    "ExactThreeLevelEngine",
    "exact_three_level",
    "lindblad_oracle",
    "LindbladResult",
]


# ---------------------------------------------------------------------------
# SDE hierarchy
# ---------------------------------------------------------------------------

def sde_keys(order: int) -> list[tuple[int, int]]:
    """All stored (m, n) pairs: 0 <= m <= n <= order, ordered by (n, m).

    The count is (order+1)(order+2)/2, the advertised size of the
    doubly-indexed system.
    """
    if order < 0:
        raise ValueError("order must be >= 0")
    return [(m, n) for n in range(order + 1) for m in range(n + 1)]


def reconstruction_weights(k: int, order: int) -> list[tuple[int, int]]:
    """Exact integer weights n!/(n-k)! pairing Q_k^(n) into chain level k.

    Returns (n, weight) for n = k .. order; weights are exact Python ints
    (product form), valid for any order the store supports.
    """
    out = []
    for n in range(k, order + 1):
        w = 1
        for f in range(n - k + 1, n + 1):
            w *= f
        out.append((n, w))
    return out


class _SdePlan:
    """Index/coefficient tables for the doubly-indexed hierarchy."""

    def __init__(self, order: int, alpha0: float, gamma: float):
        self.order = order
        self.alpha0 = alpha0
        self.gamma = gamma
        keys = sde_keys(order)
        self.keys = keys
        self.index = {kn: i for i, kn in enumerate(keys)}
        n_keys = len(keys)
        self.n_keys = n_keys

        self.relax = np.array(
            [-(m + 1) * gamma for m, _ in keys], dtype=np.complex128
        )[:, None, None]
        # source alpha(0) L lands only in (0, 0)
        self.source_index = self.index[(0, 0)]

        # gather tables: dst gets coeff * [L, Q_src] (deterministic part) and
        # coeff * ztil [L, Q_src] (noise part)
        a_dst, a_src, a_w = [], [], []
        z_dst, z_src, z_w = [], [], []
        low_src = np.full(n_keys, -1, dtype=np.intp)
        low_w = np.zeros(n_keys, dtype=np.float64)
        for i, (m, n) in enumerate(keys):
            mx = max(1, n)
            if m >= 1:
                a_dst.append(i)
                a_src.append(self.index[(m - 1, n - 1)])
                a_w.append(m / mx * alpha0)
            if n - m > 0:
                z_dst.append(i)
                z_src.append(self.index[(m, n - 1)])
                z_w.append((n - m) / mx)
            if n + 1 <= order:
                low_src[i] = self.index[(m + 1, n + 1)]
                low_w[i] = n + 1.0
        self.a_dst = np.array(a_dst, dtype=np.intp)
        self.a_src = np.array(a_src, dtype=np.intp)
        self.a_w = np.array(a_w, dtype=np.complex128)[:, None, None]
        self.z_dst = np.array(z_dst, dtype=np.intp)
        self.z_src = np.array(z_src, dtype=np.intp)
        self.z_w = np.array(z_w, dtype=np.complex128)[:, None, None]
        self.low_mask = low_src >= 0
        self.low_src = np.where(self.low_mask, low_src, 0)
        self.low_w = low_w[:, None, None]

        # nonlinear: dst -= w * [Ldag Q_a, Q_b], weights are exact rationals
        nl_dst, nl_a, nl_b, nl_w = [], [], [], []
        for i, (k, n) in enumerate(keys):
            for p in range(n + 1):
                for l in range(max(0, p - k), min(p, n - k) + 1):
                    w = Fraction(
                        math.comb(p, l) * math.comb(n - p, n - k - l), math.comb(n, k)
                    )
                    nl_dst.append(i)
                    nl_a.append(self.index[(p - l, p)])
                    nl_b.append(self.index[(k - p + l, n - p)])
                    nl_w.append(float(w))
        self.nl_dst = np.array(nl_dst, dtype=np.intp)
        self.nl_a = np.array(nl_a, dtype=np.intp)
        self.nl_b = np.array(nl_b, dtype=np.intp)
        self.nl_w = np.array(nl_w, dtype=np.float64)[:, None, None]

    @staticmethod
    def binomial_ratio(n: int, k: int, p: int, l: int) -> Fraction:
        """Exact rational C(p,l) C(n-p, n-k-l) / C(n,k)."""
        return Fraction(math.comb(p, l) * math.comb(n - p, n - k - l), math.comb(n, k))


class SdeHierarchyOracle:
    """Integrates the doubly-indexed hierarchy on a supplied shifted noise.

    Stands alone as a matrix ODE system: given ztil(t) it needs no wave
    function of its own, which is exactly what makes it an independent
    check of the production chain when both are driven by the same
    realization.
    """

    def __init__(self, sys: SystemSpec, kernel: CorrelationKernel, order: int):
        if not kernel.is_single_real:
            raise ValueError("the doubly-indexed hierarchy is defined for OU kernels")
        c, nu = kernel.terms[0]
        self.sys = sys
        self.kernel = kernel
        self.order = int(order)
        self.d = sys.dim
        self.plan = _SdePlan(self.order, c.real, nu.real)
        self._L = sys.lindblad
        self._Ld = sys.lindblad_dagger
        self._neg_iH = -1j * sys.hamiltonian

    @property
    def n_keys(self) -> int:
        return self.plan.n_keys

    def index(self, m: int, n: int) -> int:
        return self.plan.index[(m, n)]

    def rhs_store(self, qs: np.ndarray, ztil: np.ndarray) -> np.ndarray:
        """dQ_m^(n)/dt for a (B, n_keys, d, d) store at shifted noise (B,)."""
        plan = self.plan
        L, Ld = self._L, self._Ld
        dq = np.matmul(self._neg_iH, qs) - np.matmul(qs, self._neg_iH)
        dq += plan.relax * qs
        dq[:, plan.source_index] += plan.alpha0 * L

        # deterministic + noise-weighted commutator feeds
        w_comm = np.zeros_like(qs)
        np.add.at(
            w_comm.transpose(1, 0, 2, 3),
            plan.a_dst,
            (plan.a_w * qs[:, plan.a_src]).transpose(1, 0, 2, 3),
        )
        gathered = plan.z_w * qs[:, plan.z_src] * ztil[:, None, None, None]
        np.add.at(
            w_comm.transpose(1, 0, 2, 3), plan.z_dst, gathered.transpose(1, 0, 2, 3)
        )
        dq += np.matmul(L, w_comm) - np.matmul(w_comm, L)

        # downward coupling -(n+1) Ldag Q_{m+1}^{(n+1)}
        lower = qs[:, plan.low_src] * plan.low_w
        lower[:, ~plan.low_mask] = 0.0
        dq -= np.matmul(Ld, lower)

        # bilinear terms
        g = np.matmul(Ld, qs)
        a = g[:, plan.nl_a]
        b = qs[:, plan.nl_b]
        comm = np.matmul(a, b) - np.matmul(b, a)
        comm *= plan.nl_w
        np.add.at(
            dq.transpose(1, 0, 2, 3), plan.nl_dst, -comm.transpose(1, 0, 2, 3)
        )
        return dq

    def reconstruct(self, qs: np.ndarray, k: int) -> np.ndarray:
        """Chain level k from the store via the factorial pairing."""
        out = np.zeros(qs.shape[:-3] + (self.d, self.d), dtype=np.complex128)
        for n, w in reconstruction_weights(k, self.order):
            out += float(w) * qs[..., self.index(k, n), :, :]
        return out


@dataclass
class JointSdeResult:
    """Synchronized samples of the chain engine and the doubly-indexed store."""

    times: np.ndarray
    psi: np.ndarray            # (n_t, d)
    q_chain: np.ndarray        # (n_t, N+1, d, d)
    q_store: np.ndarray        # (n_t, n_keys, d, d)
    oracle: SdeHierarchyOracle

    def reconstructed(self, k: int) -> np.ndarray:
        return self.oracle.reconstruct(self.q_store, k)

    def identity_deviation(self, k: int) -> float:
        """max entrywise |reconstruction - chain| over all sampled times."""
        return float(np.abs(self.reconstructed(k) - self.q_chain[:, k]).max())


def propagate_joint_sde(
    sys: SystemSpec,
    kernel: CorrelationKernel,
    path: NoisePath,
    order: int,
    truncation: Truncation = Truncation.ZERO,
) -> JointSdeResult:
    """Propagate chain + doubly-indexed store on one noise realization.

    The trajectory, its shift accumulators and the chain follow the
    production equations; the store sees the identical shifted noise at
    every RK4 stage.  Everything advances in one joint step.
    """
    engine = OUHierarchyEngine(sys, kernel, order, truncation=truncation)
    oracle = SdeHierarchyOracle(sys, kernel, order)
    d = sys.dim
    n_base = engine.state_size
    n_store = oracle.n_keys * d * d
    n_state = n_base + n_store

    def unpack_store(y: np.ndarray) -> np.ndarray:
        return y[:, n_base:].reshape(y.shape[0], oracle.n_keys, d, d)

    def rhs(t: float, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        dy = np.empty_like(y)
        dy[:, :n_base] = engine.rhs(t, y[:, :n_base], z)
        _, m, _ = engine.unpack(y[:, :n_base])
        ztil = z + m.sum(axis=1)
        unpack_store(dy)[:] = oracle.rhs_store(unpack_store(y), ztil)
        return dy

    def renorm(y: np.ndarray) -> None:
        psi = y[:, :d]
        psi /= np.linalg.norm(psi, axis=1, keepdims=True)

    n_steps = path.n_steps
    n_t = n_steps + 1
    psi_out = np.empty((n_t, d), dtype=np.complex128)
    q_chain = np.empty((n_t, order + 1, d, d), dtype=np.complex128)
    q_store = np.empty((n_t, oracle.n_keys, d, d), dtype=np.complex128)

    def grab(idx: int, t: float, y: np.ndarray) -> None:
        psi, _, q = engine.unpack(y[:, :n_base])
        psi_out[idx] = psi[0]
        q_chain[idx] = q[0]
        q_store[idx] = unpack_store(y)[0]

    y0 = np.zeros((1, n_state), dtype=np.complex128)
    y0[:, :d] = sys.initial_state
    rk4_propagate(rhs, y0, path.values[None, :], path.dt, n_steps,
                  renormalize=renorm, on_sample=grab)
    return JointSdeResult(
        times=np.arange(n_t) * path.dt,
        psi=psi_out,
        q_chain=q_chain,
        q_store=q_store,
        oracle=oracle,
    )


# ---------------------------------------------------------------------------
# HOPS reconstruction
# ---------------------------------------------------------------------------

def hops_states(q_series: np.ndarray, psi_series: np.ndarray, depth: int) -> np.ndarray:
    """Pure-state hierarchy |psi_0..K> built from chain operators.

    |psi_0> is the trajectory itself and
    |psi_k> = sum_{i=0}^{k-1} C(k-1, i) Q_i(t) |psi_{k-1-i}>.

    Parameters
    ----------
    q_series : (n_t, N+1, d, d)
        Chain operators sampled along one trajectory.
    psi_series : (n_t, d)
        The trajectory samples.
    depth : int
        Largest k to build; needs Q_0 .. Q_{depth-1}, so depth <= N+1.

    Returns
    -------
    (n_t, depth+1, d) complex ndarray
    """
    n_t, n_levels = q_series.shape[:2]
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if depth > n_levels:
        raise ValueError(
            f"depth {depth} needs chain levels up to {depth - 1}; only "
            f"{n_levels} available"
        )
    d = psi_series.shape[1]
    out = np.zeros((n_t, depth + 1, d), dtype=np.complex128)
    out[:, 0] = psi_series
    for k in range(1, depth + 1):
        acc = np.zeros((n_t, d), dtype=np.complex128)
        for i in range(k):
            w = math.comb(k - 1, i)
            acc += w * np.einsum("tij,tj->ti", q_series[:, i], out[:, k - 1 - i])
        out[:, k] = acc
    return out


def _hops_words(k: int) -> list[tuple[int, tuple[int, ...]]]:
    """Closed-form expansion of the recursion: weighted operator words.

    Returns (weight, (i_1, .., i_m)) terms meaning
    weight * Q_{i_1} Q_{i_2} ... Q_{i_m} |psi_0>, derived by unrolling the
    recursion symbolically; independent of the numeric path above.
    """
    if k == 0:
        return [(1, ())]
    terms: dict[tuple[int, ...], int] = {}
    for i in range(k):
        w = math.comb(k - 1, i)
        for wt, word in _hops_words(k - 1 - i):
            key = (i,) + word
            terms[key] = terms.get(key, 0) + w * wt
    return [(w, word) for word, w in sorted(terms.items())]


def hops_states_direct(q_series: np.ndarray, psi_series: np.ndarray, depth: int) -> np.ndarray:
    """Same states as :func:`hops_states` via the unrolled word expansion."""
    n_t = q_series.shape[0]
    d = psi_series.shape[1]
    out = np.zeros((n_t, depth + 1, d), dtype=np.complex128)
    for k in range(depth + 1):
        acc = np.zeros((n_t, d), dtype=np.complex128)
        for w, word in _hops_words(k):
            vec = psi_series
            for idx in reversed(word):
                vec = np.einsum("tij,tj->ti", q_series[:, idx], vec)
            acc += w * vec
        out[:, k] = acc
    return out


# ---------------------------------------------------------------------------
# Exact three-level reduction
# ---------------------------------------------------------------------------

class ExactThreeLevelEngine:
    """Exactly-closing two-operator propagation of the spin-1 ladder model.

    H = omega Jz, L = J- on the spin-1 triplet.  The tower stops after the
    second member, so only two operators evolve:

        dQ0/dt = a0 L - gamma Q0 - Ldag Q1
                 + [-i H + L ztil - Ldag Q0, Q0]
        dQ1/dt = a0 [L, Q0] - 2 gamma Q1 + [-i H + L ztil, Q1]
                 - [Ldag Q0, Q1] - [Ldag Q1, Q0]

    together with the standard normalized trajectory equation.  This is an
    independent code path kept deliberately free of the generic chain
    machinery; it satisfies the same batched-engine protocol as the
    production engines so ensembles can run on it directly.
    """

    order = 1

    def __init__(self, omega: float, Gamma: float, gamma: float,
                 initial_state: Optional[np.ndarray] = None):
        _, _, jz, jminus = angular_momentum(2)
        self._L = jminus
        self._Ld = jminus.conj().T
        self._neg_iH = -1j * omega * jz
        self.gamma = float(gamma)
        self.alpha0 = Gamma * gamma / 2.0
        self.d = 3
        self.n_terms = 1
        psi0 = (
            np.ones(3, dtype=np.complex128) / math.sqrt(3.0)
            if initial_state is None
            else np.asarray(initial_state, dtype=np.complex128)
        )
        self._psi0 = psi0 / np.linalg.norm(psi0)
        self.state_size = self.d + 1 + 2 * self.d * self.d

    def initial_state(self, batch: int) -> np.ndarray:
        y = np.zeros((batch, self.state_size), dtype=np.complex128)
        y[:, : self.d] = self._psi0
        return y

    def unpack(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = self.d
        psi = y[:, :d]
        m = y[:, d : d + 1]
        q = y[:, d + 1 :].reshape(-1, 2, d, d)
        return psi, m, q

    def level_matrices(self, q: np.ndarray) -> np.ndarray:
        return q

    def rhs(self, t: float, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        L, Ld, neg_iH = self._L, self._Ld, self._neg_iH
        a0, gamma = self.alpha0, self.gamma
        psi, m, q = self.unpack(y)
        q0, q1 = q[:, 0], q[:, 1]
        dy = np.empty_like(y)
        dpsi, dm, dq = self.unpack(dy)
        ztil = z + m[:, 0]
        nrm2 = np.einsum("bi,bi->b", psi.conj(), psi).real
        l_psi = psi @ L.T
        exp_l = np.einsum("bi,bi->b", psi.conj(), l_psi) / nrm2
        exp_ld = exp_l.conj()
        q0_psi = np.einsum("bij,bj->bi", q0, psi)
        ld_q0_psi = q0_psi @ L.conj()
        exp_q0 = np.einsum("bi,bi->b", psi.conj(), q0_psi) / nrm2
        exp_ld_q0 = np.einsum("bi,bi->b", psi.conj(), ld_q0_psi) / nrm2
        dpsi[:] = (
            psi @ neg_iH.T
            + ztil[:, None] * (l_psi - exp_l[:, None] * psi)
            - (ld_q0_psi - exp_ld[:, None] * q0_psi)
            + (exp_ld_q0 - exp_ld * exp_q0)[:, None] * psi
        )
        dm[:, 0] = a0 * exp_ld - gamma * m[:, 0]
        ld_q0 = np.matmul(Ld, q0)
        ld_q1 = np.matmul(Ld, q1)
        drift0 = neg_iH + ztil[:, None, None] * L - ld_q0
        dq[:, 0] = (
            a0 * L
            - gamma * q0
            - ld_q1
            + np.matmul(drift0, q0)
            - np.matmul(q0, drift0)
        )
        drift1 = neg_iH + ztil[:, None, None] * L
        dq[:, 1] = (
            a0 * (np.matmul(L, q0) - np.matmul(q0, L))
            - 2.0 * gamma * q1
            + np.matmul(drift1, q1)
            - np.matmul(q1, drift1)
            - (np.matmul(ld_q0, q1) - np.matmul(q1, ld_q0))
            - (np.matmul(ld_q1, q0) - np.matmul(q0, ld_q1))
        )
        return dy

    def _renorm(self, y: np.ndarray) -> None:
        psi = y[:, : self.d]
        psi /= np.linalg.norm(psi, axis=1, keepdims=True)

    def propagate_batch(self, zstar, dt, n_steps, on_sample=None):
        y0 = self.initial_state(zstar.shape[0])
        return rk4_propagate(
            self.rhs, y0, zstar, dt, n_steps,
            renormalize=self._renorm, on_sample=on_sample,
        )


def exact_three_level(
    omega: float,
    Gamma: float,
    gamma: float,
    path: NoisePath,
    initial_state: Optional[np.ndarray] = None,
) -> TrajectoryResult:
    """Propagate one trajectory of the exactly-closing spin-1 ladder model."""
    engine = ExactThreeLevelEngine(omega, Gamma, gamma, initial_state)
    n_steps = path.n_steps
    n_t = n_steps + 1
    d = engine.d
    psi_out = np.empty((n_t, d), dtype=np.complex128)
    m_out = np.empty((n_t, 1), dtype=np.complex128)
    q_out = np.empty((n_t, 2, d, d), dtype=np.complex128)

    def grab(idx, t, y):
        psi, m, q = engine.unpack(y)
        psi_out[idx] = psi[0]
        m_out[idx] = m[0]
        q_out[idx] = q[0]

    engine.propagate_batch(path.values[None, :], path.dt, n_steps, on_sample=grab)
    return TrajectoryResult(
        times=np.arange(n_t) * path.dt, psi=psi_out, q=q_out, girsanov=m_out
    )


# ---------------------------------------------------------------------------
# Memoryless master-equation limit
# ---------------------------------------------------------------------------

@dataclass
class LindbladResult:
    times: np.ndarray
    rho: np.ndarray  # (n_t, d, d)

    def expectations(self, a: np.ndarray) -> np.ndarray:
        return np.einsum("tij,ji->t", self.rho, a).real


def lindblad_oracle(sys: SystemSpec, Gamma: float, dt: float, T: float) -> LindbladResult:
    """Integrate drho/dt = -i[H, rho] + Gamma (L rho Ldag - {Ldag L, rho}/2).

    Fourth-order fixed step; the rate convention matches the kernel whose
    full-line integral equals Gamma, which is the limit the trajectory
    ensemble approaches as the bath bandwidth grows.
    """
    d = sys.dim
    H = sys.hamiltonian
    L = sys.lindblad
    Ld = sys.lindblad_dagger
    LdL = Ld @ L
    n_steps = round(T / dt)
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError("T must be a positive multiple of dt")

    def rhs(t, y, z):
        rho = y.reshape(-1, d, d)
        drho = (
            -1j * (np.matmul(H, rho) - np.matmul(rho, H))
            + Gamma * (
                np.matmul(np.matmul(L, rho), Ld)
                - 0.5 * (np.matmul(LdL, rho) + np.matmul(rho, LdL))
            )
        )
        return drho.reshape(y.shape)

    rho0 = np.outer(sys.initial_state, sys.initial_state.conj())
    y0 = rho0.reshape(1, d * d)
    out = np.empty((n_steps + 1, d, d), dtype=np.complex128)

    def grab(idx, t, y):
        out[idx] = y.reshape(d, d)

    zeros = np.zeros((1, 2 * n_steps + 1), dtype=np.complex128)
    rk4_propagate(rhs, y0, zeros, dt, n_steps, on_sample=grab)
    return LindbladResult(times=np.arange(n_steps + 1) * dt, rho=out)
