"""Production engine: one coupled hierarchy of operators per trajectory.

For a single-exponential (OU-type) kernel the tower of kernel-weighted
functional derivatives of the driving operator closes into a chain
Q_0 .. Q_N of d x d matrices obeying

    dQ_k/dt = k a0 [L, Q_{k-1}] + delta_{k,0} a0 L - (k+1) gamma Q_k
              + [-i H + L ztil, Q_k] - Ldag Q_{k+1}
              - sum_{i=0}^{k} C(k, i) [Ldag Q_i, Q_{k-i}],

with a0 = alpha(0), all Q_k(0) = 0, and ztil the shift-corrected noise.
The normalized trajectory follows

    dpsi/dt = [-i H + (L - <L>) ztil - (Ldag - <Ldag>) Q_0
               + <(Ldag - <Ldag>) Q_0>] psi.

The chain is closed at order N either by zeroing Q_{N+1} or by the
commutator ansatz Q_{N+1} = A(t) [L, Q_N] with A(t) = int_0^t alpha(t,s) ds
kept in closed form.  psi, the shift accumulators and all Q_k advance in a
single joint RK4 step so that the scheme stays fourth order end to end.

All right-hand sides are vectorized over a leading batch axis; an ensemble
of trajectories advances in lockstep as (B, ...) arrays.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .integrate import rk4_propagate
from .model import SystemSpec
from .noise import CorrelationKernel, NoisePath, girsanov_rate

__all__ = [
    "Truncation",
    "OUHierarchyEngine",
    "TrajectoryResult",
    "expectation",
    "hierarchy_rhs",
    "trajectory_rhs",
    "trace_norm",
    "trace_norms",
]


class Truncation(enum.Enum):
    ZERO = "zero"
    COMMUTATOR = "commutator"


def expectation(psi: np.ndarray, a: np.ndarray) -> complex:
    """<psi|A|psi> / <psi|psi>; rejects the zero vector."""
    psi = np.asarray(psi, dtype=np.complex128)
    nrm2 = np.vdot(psi, psi).real
    if nrm2 == 0.0:
        raise ValueError("expectation of a zero vector is undefined")
    return complex(np.vdot(psi, a @ psi) / nrm2)


def trace_norm(q: np.ndarray) -> float:
    """Sum of singular values of a single matrix."""
    return float(np.linalg.svd(np.asarray(q), compute_uv=False).sum())


def trace_norms(q: np.ndarray) -> np.ndarray:
    """Trace norms over the last two axes of a stacked array.

    Uses a closed form for 2 x 2 blocks (cheap enough to run inside the
    ensemble sampling loop) and LAPACK otherwise.
    """
    q = np.asarray(q)
    d = q.shape[-1]
    if d == 1:
        return np.abs(q[..., 0, 0])
    if d == 2:
        g = np.einsum("...ji,...jk->...ik", q.conj(), q)
        tr = (g[..., 0, 0] + g[..., 1, 1]).real
        det = np.abs(q[..., 0, 0] * q[..., 1, 1] - q[..., 0, 1] * q[..., 1, 0]) ** 2
        disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
        s1 = np.sqrt(np.maximum((tr + disc) / 2.0, 0.0))
        s2 = np.sqrt(np.maximum((tr - disc) / 2.0, 0.0))
        return s1 + s2
    return np.linalg.svd(q, compute_uv=False).sum(axis=-1)


def binomial_row(k: int) -> np.ndarray:
    """Exact binomial coefficients C(k, 0..k) as float64."""
    return np.array([math.comb(k, i) for i in range(k + 1)], dtype=np.float64)


class _OUPlan:
    """Precomputed index/coefficient tables for one truncation order."""

    def __init__(self, order: int, alpha0: complex, gamma: float):
        if order < 0:
            raise ValueError("truncation order must be >= 0")
        self.order = order
        self.alpha0 = complex(alpha0)
        self.gamma = float(gamma)
        k = np.arange(order + 1)
        self.relax = (-(k + 1) * gamma).astype(np.complex128)[:, None, None]
        self.ksrc = (k * alpha0).astype(np.complex128)[:, None, None]
        nl_i, nl_j, nl_w, starts = [], [], [], []
        for kk in range(order + 1):
            starts.append(len(nl_i))
            row = binomial_row(kk)
            for i in range(kk + 1):
                nl_i.append(i)
                nl_j.append(kk - i)
                nl_w.append(row[i])
        self.nl_i = np.array(nl_i, dtype=np.intp)
        self.nl_j = np.array(nl_j, dtype=np.intp)
        self.nl_w = np.array(nl_w, dtype=np.float64)[:, None, None]
        self.nl_starts = np.array(starts, dtype=np.intp)


def _hierarchy_rhs_batch(
    q: np.ndarray,
    ztil: np.ndarray,
    L: np.ndarray,
    Ld: np.ndarray,
    neg_iH: np.ndarray,
    plan: _OUPlan,
    truncation: Truncation,
    closure_weight: complex,
) -> np.ndarray:
    """dQ/dt for a (B, N+1, d, d) stack driven by the shifted noise (B,)."""
    comm_L = np.matmul(L, q) - np.matmul(q, L)
    g = np.matmul(Ld, q)
    drift = neg_iH + ztil[:, None, None] * L
    dq = np.matmul(drift[:, None], q) - np.matmul(q, drift[:, None])
    dq += plan.relax * q
    dq[:, 1:] += plan.ksrc[1:] * comm_L[:, :-1]
    dq[:, 0] += plan.alpha0 * L
    dq[:, :-1] -= g[:, 1:]
    if truncation is Truncation.COMMUTATOR:
        dq[:, plan.order] -= closure_weight * np.matmul(Ld, comm_L[:, plan.order])
    prod_a = g[:, plan.nl_i]
    prod_b = q[:, plan.nl_j]
    comm = np.matmul(prod_a, prod_b) - np.matmul(prod_b, prod_a)
    comm *= plan.nl_w
    dq -= np.add.reduceat(comm, plan.nl_starts, axis=1)
    return dq


def _psi_rhs_batch(
    psi: np.ndarray,
    q0: np.ndarray,
    ztil: np.ndarray,
    L: np.ndarray,
    Lconj: np.ndarray,
    neg_iH_T: np.ndarray,
    linear: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """(dpsi, <Ldag>) for a batch; row-vector matvec convention psi @ A.T."""
    l_psi = psi @ L.T
    q0_psi = np.einsum("bij,bj->bi", q0, psi)
    ld_q0_psi = q0_psi @ Lconj
    if linear:
        dpsi = psi @ neg_iH_T + ztil[:, None] * l_psi - ld_q0_psi
        return dpsi, np.zeros(psi.shape[0], dtype=np.complex128)
    nrm2 = np.einsum("bi,bi->b", psi.conj(), psi).real
    exp_l = np.einsum("bi,bi->b", psi.conj(), l_psi) / nrm2
    exp_ld = exp_l.conj()
    exp_q0 = np.einsum("bi,bi->b", psi.conj(), q0_psi) / nrm2
    exp_ld_q0 = np.einsum("bi,bi->b", psi.conj(), ld_q0_psi) / nrm2
    exp_delta = exp_ld_q0 - exp_ld * exp_q0
    dpsi = (
        psi @ neg_iH_T
        + ztil[:, None] * (l_psi - exp_l[:, None] * psi)
        - (ld_q0_psi - exp_ld[:, None] * q0_psi)
        + exp_delta[:, None] * psi
    )
    return dpsi, exp_ld


@dataclass
class TrajectoryResult:
    """Full-step samples of one propagated trajectory."""

    times: np.ndarray
    psi: np.ndarray                 # (n_t, d)
    q: Optional[np.ndarray]         # (n_t, N+1, d, d) or None
    girsanov: np.ndarray            # (n_t, n_terms) shift accumulators

    @property
    def shift(self) -> np.ndarray:
        return self.girsanov.sum(axis=1)

    def expectations(self, a: np.ndarray) -> np.ndarray:
        vals = np.einsum("ti,ij,tj->t", self.psi.conj(), a, self.psi)
        nrm = np.einsum("ti,ti->t", self.psi.conj(), self.psi).real
        return vals / nrm


class OUHierarchyEngine:
    """Joint propagator for (psi, shift accumulators, Q_0..Q_N).

    Parameters
    ----------
    sys : SystemSpec
    kernel : CorrelationKernel
        Must be a single real-exponential term.
    order : int
        Truncation order N >= 0 (N = 0 is the lowest admissible closure).
    truncation : Truncation
        How Q_{N+1} is supplied.
    renormalize : bool
        Rescale psi to unit norm after every step (default).  The
        norm-preservation property of the drift is tested with this off.
    linear : bool
        Debug mode: propagate the unnormalized equation with the raw noise
        and no shift.  Not a production path.
    """

    def __init__(
        self,
        sys: SystemSpec,
        kernel: CorrelationKernel,
        order: int,
        truncation: Truncation = Truncation.ZERO,
        renormalize: bool = True,
        linear: bool = False,
    ):
        if not kernel.is_single_real:
            raise ValueError("this engine requires a single real-exponential kernel")
        if order < 0:
            raise ValueError("truncation order must be >= 0")
        self.sys = sys
        self.kernel = kernel
        self.order = int(order)
        self.truncation = truncation
        self.renormalize = renormalize
        self.linear = linear
        self.d = sys.dim
        self.n_terms = kernel.n_terms
        c, nu = kernel.terms[0]
        self.gamma = nu.real
        self.alpha0 = complex(c)
        self._L = sys.lindblad
        self._Ld = sys.lindblad_dagger
        self._Lconj = sys.lindblad.conj()
        self._neg_iH = -1j * sys.hamiltonian
        self._neg_iH_T = self._neg_iH.T.copy()
        self._plan = _OUPlan(self.order, self.alpha0, self.gamma)
        self._n_levels = self.order + 1
        self._q_offset = self.d + self.n_terms
        self.state_size = self._q_offset + self._n_levels * self.d * self.d

    # -- state packing ------------------------------------------------------

    def initial_state(self, batch: int) -> np.ndarray:
        y = np.zeros((batch, self.state_size), dtype=np.complex128)
        y[:, : self.d] = self.sys.initial_state
        return y

    def unpack(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views (psi, m, q) into a (B, state_size) array."""
        b = y.shape[0]
        psi = y[:, : self.d]
        m = y[:, self.d : self._q_offset]
        q = y[:, self._q_offset :].reshape(b, self._n_levels, self.d, self.d)
        return psi, m, q

    def level_matrices(self, q: np.ndarray) -> np.ndarray:
        """The hierarchy level operators Q_0..Q_N (here: the stack itself)."""
        return q

    # -- dynamics ------------------------------------------------------------

    def rhs(self, t: float, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        psi, m, q = self.unpack(y)
        dy = np.empty_like(y)
        dpsi, dm, dq = self.unpack(dy)
        if self.linear:
            ztil = z
        else:
            ztil = z + m.sum(axis=1)
        dpsi[:], exp_ld = _psi_rhs_batch(
            psi, q[:, 0], ztil, self._L, self._Lconj, self._neg_iH_T, self.linear
        )
        if self.linear:
            dm[:] = 0.0
        else:
            dm[:] = girsanov_rate(self.kernel, m, exp_ld)
        closure_weight = (
            self.kernel.integral(t) if self.truncation is Truncation.COMMUTATOR else 0.0
        )
        dq[:] = _hierarchy_rhs_batch(
            q, ztil, self._L, self._Ld, self._neg_iH, self._plan,
            self.truncation, closure_weight,
        )
        return dy

    def _renorm(self, y: np.ndarray) -> None:
        psi = y[:, : self.d]
        psi /= np.linalg.norm(psi, axis=1, keepdims=True)

    def _diagnostic(self, y: np.ndarray) -> str:
        _, _, q = self.unpack(y)
        with np.errstate(invalid="ignore"):
            peak = np.nanmax(np.abs(q)) if q.size else 0.0
        return f"max |Q| entry {peak:.3e} at order {self.order}"

    def propagate_batch(
        self,
        zstar: np.ndarray,
        dt: float,
        n_steps: int,
        on_sample: Optional[Callable[[int, float, np.ndarray], None]] = None,
    ) -> np.ndarray:
        """Advance a batch over its noise grid; returns the final state."""
        y0 = self.initial_state(zstar.shape[0])
        return rk4_propagate(
            self.rhs,
            y0,
            zstar,
            dt,
            n_steps,
            renormalize=None if self.linear or not self.renormalize else self._renorm,
            on_sample=on_sample,
            diagnostic=self._diagnostic,
        )

    def propagate(self, path: NoisePath, record_hierarchy: bool = True) -> TrajectoryResult:
        """Propagate one trajectory, sampling at every full step."""
        n_steps = path.n_steps
        n_t = n_steps + 1
        psi_out = np.empty((n_t, self.d), dtype=np.complex128)
        m_out = np.empty((n_t, self.n_terms), dtype=np.complex128)
        q_out = (
            np.empty((n_t, self._n_levels, self.d, self.d), dtype=np.complex128)
            if record_hierarchy
            else None
        )

        def grab(idx: int, t: float, y: np.ndarray) -> None:
            psi, m, q = self.unpack(y)
            psi_out[idx] = psi[0]
            m_out[idx] = m[0]
            if q_out is not None:
                q_out[idx] = q[0]

        self.propagate_batch(path.values[None, :], path.dt, n_steps, on_sample=grab)
        times = np.arange(n_t) * path.dt
        return TrajectoryResult(times=times, psi=psi_out, q=q_out, girsanov=m_out)


# ---------------------------------------------------------------------------
# Single-state convenience wrappers
# ---------------------------------------------------------------------------

def hierarchy_rhs(
    q: np.ndarray,
    sys: SystemSpec,
    kernel: CorrelationKernel,
    z_shifted: complex,
    truncation: Truncation = Truncation.ZERO,
    t: float = 0.0,
) -> np.ndarray:
    """dQ_k/dt for one (N+1, d, d) stack at shift-corrected noise value."""
    q = np.asarray(q, dtype=np.complex128)
    if q.ndim != 3 or q.shape[1] != sys.dim or q.shape[2] != sys.dim:
        raise ValueError(f"expected (N+1, {sys.dim}, {sys.dim}) stack, got {q.shape}")
    if not kernel.is_single_real:
        raise ValueError("the chain closure requires a single real-exponential kernel")
    order = q.shape[0] - 1
    c, nu = kernel.terms[0]
    plan = _OUPlan(order, complex(c), nu.real)
    closure_weight = kernel.integral(t) if truncation is Truncation.COMMUTATOR else 0.0
    out = _hierarchy_rhs_batch(
        q[None],
        np.array([z_shifted], dtype=np.complex128),
        sys.lindblad,
        sys.lindblad_dagger,
        -1j * sys.hamiltonian,
        plan,
        truncation,
        closure_weight,
    )
    return out[0]


def trajectory_rhs(
    psi: np.ndarray,
    q: np.ndarray,
    girsanov_m: np.ndarray,
    sys: SystemSpec,
    kernel: CorrelationKernel,
    z_raw: complex,
    truncation: Truncation = Truncation.ZERO,
    t: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dpsi, dq, dm) for one trajectory state at raw noise value ``z_raw``."""
    psi = np.asarray(psi, dtype=np.complex128)
    m = np.asarray(girsanov_m, dtype=np.complex128)
    ztil = complex(z_raw) + complex(m.sum())
    dq = hierarchy_rhs(q, sys, kernel, ztil, truncation=truncation, t=t)
    dpsi_b, exp_ld = _psi_rhs_batch(
        psi[None],
        np.asarray(q, dtype=np.complex128)[None, 0],
        np.array([ztil], dtype=np.complex128),
        sys.lindblad,
        sys.lindblad.conj(),
        (-1j * sys.hamiltonian).T.copy(),
        linear=False,
    )
    dm = girsanov_rate(kernel, m[None], exp_ld)[0]
    return dpsi_b[0], dq, dm
