"""General-kernel engine: multi-indexed operator hierarchy.

For an arbitrary sum-of-exponentials kernel, the operator tower carries a
multi-index: level k holds operators Q_k^(j) labeled by an integer vector
j = (j_0, j_1, .., j_k) of kernel-derivative orders.  They obey

    dQ_k^(j)/dt = sum_{i=1..k} a^(j_i)(0) [L, Q_{k-1}^(drop(j, i))]
                  + sum_{i=0..k} Q_k^(j + e_i)
                  - Ldag Q_{k+1}^((0, j))
                  + [-i H + L ztil, Q_k^(j)]
                  + delta_{k,0} a^(j_0)(0) L
                  - sum_{i=0..k} sum_{subsets c of the tail, |c| = i}
                        [Ldag Q_i^((0, c)), Q_{k-i}^((j_0, cbar))]

where a^(j)(0) is the j-th kernel derivative at zero lag, drop(j, i)
removes tail slot i, and (x, v) prepends x.  Operators are invariant under
permutations of the tail (j_1 .. j_k), so only canonically sorted tails are
stored; every referenced index is canonicalized before lookup.

Two closures are offered:

* zero truncation -- keys with k + sum(j) <= N are stored, the rest vanish;
* geometric -- raising a slot past j_max substitutes a * (the slot pinned at
  j_max), exact for a single-exponential kernel with a = -nu, while the
  level index itself is capped at N.  Stored keys then form the box
  {k <= N, all j_i <= j_max}.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .integrate import rk4_propagate
from .model import SystemSpec
from .noise import CorrelationKernel, NoisePath, girsanov_rate

__all__ = [
    "GeometricClosure",
    "canonicalize",
    "key_weight",
    "enumerate_keys",
    "subset_terms",
    "GeneralHierarchyEngine",
    "general_rhs",
    "GeneralTrajectoryResult",
]

Key = tuple[int, ...]


@dataclass(frozen=True)
class GeometricClosure:
    """Close the derivative direction by Q^(.., j_max+1, ..) = a Q^(.., j_max, ..)."""

    a: complex
    j_max: int

    def __post_init__(self):
        if self.j_max < 0:
            raise ValueError("j_max must be >= 0")


def canonicalize(key: Key) -> Key:
    """Sort the tail (j_1..j_k); the head j_0 is distinguished and stays put."""
    if len(key) == 0:
        raise ValueError("a key needs at least the head entry j_0")
    return (key[0], *sorted(key[1:]))


def key_weight(key: Key) -> int:
    """k + sum_i j_i, the truncation weight of a key."""
    return (len(key) - 1) + sum(key)


def enumerate_keys(order: int) -> list[Key]:
    """All canonical keys of weight <= order, in (k, lexicographic) order."""
    if order < 0:
        raise ValueError("order must be >= 0")
    keys: list[Key] = []
    for k in range(order + 1):
        for j0 in range(order - k + 1):
            budget = order - k - j0
            for tail in _sorted_tails(k, budget):
                keys.append((j0, *tail))
    keys.sort(key=lambda key: (len(key) - 1, key))
    return keys


def _sorted_tails(k: int, budget: int, floor: int = 0):
    """Nondecreasing k-tuples with sum <= budget, entries >= floor."""
    if k == 0:
        yield ()
        return
    for first in range(floor, budget // k + 1):
        for rest in _sorted_tails(k - 1, budget - first, first):
            yield (first, *rest)


def _box_keys(order: int, j_max: int) -> list[Key]:
    """Canonical keys with k <= order and every entry <= j_max."""
    keys: list[Key] = []
    for k in range(order + 1):
        for j0 in range(j_max + 1):
            for tail in itertools.combinations_with_replacement(range(j_max + 1), k):
                keys.append((j0, *tail))
    keys.sort(key=lambda key: (len(key) - 1, key))
    return keys


def subset_terms(j_tail: tuple[int, ...], i: int) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """All C(k, i) position-subsets of the tail, with their complements.

    Both the chosen entries and the complement preserve the original
    relative order.  Duplicated values yield repeated pairs: the sum in the
    equation of motion runs over positions, not values.
    """
    k = len(j_tail)
    if i < 0 or i > k:
        raise ValueError(f"cannot choose {i} elements from a tail of length {k}")
    out = []
    for chosen in itertools.combinations(range(k), i):
        chosen_set = set(chosen)
        c = tuple(j_tail[p] for p in chosen)
        cbar = tuple(j_tail[p] for p in range(k) if p not in chosen_set)
        out.append((c, cbar))
    return out


class _GeneralPlan:
    """Static index/coefficient tables for one (kernel, order, closure)."""

    def __init__(self, sys: SystemSpec, kernel: CorrelationKernel, order: int,
                 closure: Optional[GeometricClosure]):
        if order < 0:
            raise ValueError("order must be >= 0")
        if closure is not None and kernel.n_terms != 1:
            raise ValueError("geometric closure requires a single-exponential kernel")
        self.order = order
        self.closure = closure
        if closure is None:
            self.keys = enumerate_keys(order)
        else:
            self.keys = _box_keys(order, closure.j_max)
        self.index = {key: i for i, key in enumerate(self.keys)}
        self.n_keys = len(self.keys)
        d = sys.dim

        max_j = max((max(key) for key in self.keys), default=0) + 1
        if max_j > kernel.j_max:
            raise ValueError(
                f"hierarchy needs kernel derivatives up to order {max_j}, "
                f"but kernel.j_max = {kernel.j_max}"
            )
        alpha_d0 = [kernel.alpha_derivative0(j) for j in range(max_j + 1)]

        # accumulate (dst, src, coeff) triples per linear term family
        comm_triples: dict[tuple[int, int], complex] = {}
        raise_triples: dict[tuple[int, int], complex] = {}
        low_src = np.zeros(self.n_keys, dtype=np.intp)
        low_w = np.zeros(self.n_keys, dtype=np.complex128)
        source = np.zeros((self.n_keys, d, d), dtype=np.complex128)
        nl_dst, nl_a, nl_b = [], [], []

        def resolve_raise(key: Key, slot: int) -> tuple[Optional[Key], complex]:
            lifted = list(key)
            lifted[slot] += 1
            child = canonicalize(tuple(lifted))
            if closure is None:
                if key_weight(child) > order:
                    return None, 0.0
                return child, 1.0
            if lifted[slot] > closure.j_max:
                return canonicalize(key), closure.a
            return child, 1.0

        for dst_i, key in enumerate(self.keys):
            j0, tail = key[0], key[1:]
            k = len(tail)
            # kernel-derivative commutator feeds from level k-1
            for pos in range(k):
                child = canonicalize((j0, *tail[:pos], *tail[pos + 1:]))
                src_i = self.index[child]
                comm_triples[(dst_i, src_i)] = (
                    comm_triples.get((dst_i, src_i), 0.0) + alpha_d0[tail[pos]]
                )
            # raising in every slot (head included)
            for slot in range(k + 1):
                child, coeff = resolve_raise(key, slot)
                if child is not None:
                    src_i = self.index[child]
                    raise_triples[(dst_i, src_i)] = (
                        raise_triples.get((dst_i, src_i), 0.0) + coeff
                    )
            # lowering into level k+1
            low = canonicalize((0, j0, *tail))
            in_store = (
                key_weight(low) <= order if closure is None else len(low) - 1 <= order
            )
            if in_store:
                low_src[dst_i] = self.index[low]
                low_w[dst_i] = 1.0
            # source term on level zero
            if k == 0:
                source[dst_i] += alpha_d0[j0] * sys.lindblad
            # bilinear subset terms
            for i in range(k + 1):
                for c, cbar in subset_terms(tail, i):
                    a_key = canonicalize((0, *c))
                    b_key = canonicalize((j0, *cbar))
                    nl_dst.append(dst_i)
                    nl_a.append(self.index[a_key])
                    nl_b.append(self.index[b_key])

        def to_arrays(triples: dict[tuple[int, int], complex]):
            items = sorted(triples.items())
            dst = np.array([k[0] for k, _ in items], dtype=np.intp)
            src = np.array([k[1] for k, _ in items], dtype=np.intp)
            w = np.array([v for _, v in items], dtype=np.complex128)[:, None, None]
            return dst, src, w

        self.comm_dst, self.comm_src, self.comm_w = to_arrays(comm_triples)
        self.raise_dst, self.raise_src, self.raise_w = to_arrays(raise_triples)
        self.low_src = low_src
        self.low_w = low_w[:, None, None]
        self.source = source
        self.nl_dst = np.array(nl_dst, dtype=np.intp)
        self.nl_a = np.array(nl_a, dtype=np.intp)
        self.nl_b = np.array(nl_b, dtype=np.intp)


def _scatter_add(target: np.ndarray, dst: np.ndarray, values: np.ndarray) -> None:
    """target[:, dst[p]] += values[:, p] with repeated destinations allowed."""
    np.add.at(target.transpose(1, 0, 2, 3), dst, values.transpose(1, 0, 2, 3))


@dataclass
class GeneralTrajectoryResult:
    times: np.ndarray
    psi: np.ndarray            # (n_t, d)
    store: np.ndarray          # (n_t, n_keys, d, d)
    girsanov: np.ndarray       # (n_t, n_terms)
    keys: list[Key]
    index: dict[Key, int]

    def q(self, key: Key) -> np.ndarray:
        """Time series of one stored operator; the key is canonicalized."""
        return self.store[:, self.index[canonicalize(key)]]

    def expectations(self, a: np.ndarray) -> np.ndarray:
        vals = np.einsum("ti,ij,tj->t", self.psi.conj(), a, self.psi)
        nrm = np.einsum("ti,ti->t", self.psi.conj(), self.psi).real
        return vals / nrm


class GeneralHierarchyEngine:
    """Joint propagator for (psi, shift accumulators, multi-index store)."""

    def __init__(
        self,
        sys: SystemSpec,
        kernel: CorrelationKernel,
        order: int,
        closure: Optional[GeometricClosure] = None,
        renormalize: bool = True,
    ):
        self.sys = sys
        self.kernel = kernel
        self.order = int(order)
        self.closure = closure
        self.renormalize = renormalize
        self.d = sys.dim
        self.n_terms = kernel.n_terms
        self.plan = _GeneralPlan(sys, kernel, self.order, closure)
        self._L = sys.lindblad
        self._Ld = sys.lindblad_dagger
        self._Lconj = sys.lindblad.conj()
        self._neg_iH = -1j * sys.hamiltonian
        self._neg_iH_T = self._neg_iH.T.copy()
        self._q0_index = self.plan.index[(0,)]
        self._level_idx = np.array(
            [self.plan.index[(0,) * (k + 1)] for k in range(self.order + 1)],
            dtype=np.intp,
        )
        self._store_offset = self.d + self.n_terms
        self.state_size = self._store_offset + self.plan.n_keys * self.d * self.d

    @property
    def keys(self) -> list[Key]:
        return self.plan.keys

    @property
    def n_keys(self) -> int:
        return self.plan.n_keys

    def initial_state(self, batch: int) -> np.ndarray:
        y = np.zeros((batch, self.state_size), dtype=np.complex128)
        y[:, : self.d] = self.sys.initial_state
        return y

    def unpack(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        b = y.shape[0]
        psi = y[:, : self.d]
        m = y[:, self.d : self._store_offset]
        qs = y[:, self._store_offset :].reshape(b, self.plan.n_keys, self.d, self.d)
        return psi, m, qs

    def level_matrices(self, qs: np.ndarray) -> np.ndarray:
        """The level operators Q_k^(0..0), k = 0..N, gathered from the store."""
        return qs[:, self._level_idx]

    def rhs_store(self, qs: np.ndarray, ztil: np.ndarray) -> np.ndarray:
        """dQ/dt for a (B, n_keys, d, d) store at shifted noise (B,)."""
        plan = self.plan
        L, Ld = self._L, self._Ld
        drift = self._neg_iH + ztil[:, None, None] * L
        dq = np.matmul(drift[:, None], qs) - np.matmul(qs, drift[:, None])
        dq += plan.source[None]

        w_comm = np.zeros_like(qs)
        _scatter_add(w_comm, plan.comm_dst, plan.comm_w * qs[:, plan.comm_src])
        dq += np.matmul(L, w_comm) - np.matmul(w_comm, L)

        _scatter_add(dq, plan.raise_dst, plan.raise_w * qs[:, plan.raise_src])

        lower = plan.low_w * qs[:, plan.low_src]
        dq -= np.matmul(Ld, lower)

        g = np.matmul(Ld, qs)
        a = g[:, plan.nl_a]
        b = qs[:, plan.nl_b]
        comm = np.matmul(a, b) - np.matmul(b, a)
        _scatter_add(dq, plan.nl_dst, -comm)
        return dq

    def rhs(self, t: float, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        psi, m, qs = self.unpack(y)
        dy = np.empty_like(y)
        dpsi, dm, dqs = self.unpack(dy)
        ztil = z + m.sum(axis=1)
        q0 = qs[:, self._q0_index]
        nrm2 = np.einsum("bi,bi->b", psi.conj(), psi).real
        l_psi = psi @ self._L.T
        exp_l = np.einsum("bi,bi->b", psi.conj(), l_psi) / nrm2
        exp_ld = exp_l.conj()
        q0_psi = np.einsum("bij,bj->bi", q0, psi)
        ld_q0_psi = q0_psi @ self._Lconj
        exp_q0 = np.einsum("bi,bi->b", psi.conj(), q0_psi) / nrm2
        exp_ld_q0 = np.einsum("bi,bi->b", psi.conj(), ld_q0_psi) / nrm2
        dpsi[:] = (
            psi @ self._neg_iH_T
            + ztil[:, None] * (l_psi - exp_l[:, None] * psi)
            - (ld_q0_psi - exp_ld[:, None] * q0_psi)
            + (exp_ld_q0 - exp_ld * exp_q0)[:, None] * psi
        )
        dm[:] = girsanov_rate(self.kernel, m, exp_ld)
        dqs[:] = self.rhs_store(qs, ztil)
        return dy

    def _renorm(self, y: np.ndarray) -> None:
        psi = y[:, : self.d]
        psi /= np.linalg.norm(psi, axis=1, keepdims=True)

    def _diagnostic(self, y: np.ndarray) -> str:
        _, _, qs = self.unpack(y)
        with np.errstate(invalid="ignore"):
            peak = np.nanmax(np.abs(qs)) if qs.size else 0.0
        return f"max |Q| entry {peak:.3e} over {self.plan.n_keys} stored operators"

    def propagate_batch(
        self,
        zstar: np.ndarray,
        dt: float,
        n_steps: int,
        on_sample: Optional[Callable[[int, float, np.ndarray], None]] = None,
    ) -> np.ndarray:
        y0 = self.initial_state(zstar.shape[0])
        return rk4_propagate(
            self.rhs,
            y0,
            zstar,
            dt,
            n_steps,
            renormalize=self._renorm if self.renormalize else None,
            on_sample=on_sample,
            diagnostic=self._diagnostic,
        )

    def propagate(self, path: NoisePath) -> GeneralTrajectoryResult:
        n_steps = path.n_steps
        n_t = n_steps + 1
        psi_out = np.empty((n_t, self.d), dtype=np.complex128)
        m_out = np.empty((n_t, self.n_terms), dtype=np.complex128)
        store_out = np.empty((n_t, self.plan.n_keys, self.d, self.d), dtype=np.complex128)

        def grab(idx, t, y):
            psi, m, qs = self.unpack(y)
            psi_out[idx] = psi[0]
            m_out[idx] = m[0]
            store_out[idx] = qs[0]

        self.propagate_batch(path.values[None, :], path.dt, n_steps, on_sample=grab)
        return GeneralTrajectoryResult(
            times=np.arange(n_t) * path.dt,
            psi=psi_out,
            store=store_out,
            girsanov=m_out,
            keys=self.plan.keys,
            index=self.plan.index,
        )


def general_rhs(
    store: dict[Key, np.ndarray],
    sys: SystemSpec,
    kernel: CorrelationKernel,
    z_shifted: complex,
    order: int,
    closure: Optional[GeometricClosure] = None,
) -> dict[Key, np.ndarray]:
    """Derivative of a store given as a {key: matrix} map.

    Missing stored keys are treated as zero; lookups canonicalize, so the
    input map may use unsorted tails.  Returns a fully populated canonical
    map.  Convenience wrapper over the array engine for tests and
    exploratory use.
    """
    engine = GeneralHierarchyEngine(sys, kernel, order, closure=closure)
    qs = np.zeros((1, engine.n_keys, sys.dim, sys.dim), dtype=np.complex128)
    for key, mat in store.items():
        ck = canonicalize(key)
        if ck not in engine.plan.index:
            raise KeyError(f"key {key} is outside the stored set for order {order}")
        qs[0, engine.plan.index[ck]] = np.asarray(mat, dtype=np.complex128)
    dq = engine.rhs_store(qs, np.array([z_shifted], dtype=np.complex128))[0]
    return {key: dq[i] for i, key in enumerate(engine.keys)}
