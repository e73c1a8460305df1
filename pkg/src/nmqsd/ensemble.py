"""Monte Carlo driver: many trajectories, one reduced density matrix.

Trajectories are propagated in lockstep batches of a fixed size.  Batch
boundaries depend only on the trajectory index, never on the worker count,
and batch partial sums are merged by a fixed pairwise tree, so the result
is bit-identical for any ``workers`` setting.  Each trajectory draws its
noise from its own counter-based stream keyed by (master_seed, index).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hierarchy_ou import trace_norms
from .integrate import PropagationError
from .model import SystemSpec
from .noise import CorrelationKernel, sample_paths, trajectory_seed

__all__ = [
    "BATCH_SIZE",
    "EnsembleResult",
    "EnsembleError",
    "run_ensemble",
    "count_equations",
    "termination_report",
    "TerminationReport",
]

BATCH_SIZE = 256

TRACE_TOL = 1e-10
HERMITICITY_TOL = 1e-10
POSITIVITY_SLACK = 1e-6


class EnsembleError(RuntimeError):
    """An ensemble run failed (bad trajectory or violated sanity bound)."""


@dataclass
class EnsembleMeta:
    trajectories: int
    master_seed: int
    order: int
    dt: float
    horizon: float
    engine: str
    truncation: str
    workers: int
    wall_time: float
    trace_deviation: float = 0.0
    hermiticity_deviation: float = 0.0
    min_eigenvalue: float = 0.0


@dataclass
class EnsembleResult:
    """Reduced state, observable statistics and hierarchy-size diagnostics.

    ``observables`` maps name -> (mean, standard error) arrays over the
    sample grid; ``qnorms[t, k]`` is the ensemble mean of the trace norm of
    hierarchy level k.
    """

    times: np.ndarray
    rho: np.ndarray                                   # (n_t, d, d)
    observables: dict[str, tuple[np.ndarray, np.ndarray]]
    qnorms: np.ndarray                                # (n_t, n_levels)
    meta: EnsembleMeta

    def observable(self, name: str) -> np.ndarray:
        return self.observables[name][0]

    def stderr(self, name: str) -> np.ndarray:
        return self.observables[name][1]


def count_equations(order: int) -> tuple[int, int]:
    """Coupled-equation counts (chain, doubly-indexed) at a truncation order.

    The chain solves order+1 operator equations; the doubly-indexed system
    solves one per stored (m, n) pair, (order+1)(order+2)/2 in total.
    """
    if order < 0:
        raise ValueError("order must be >= 0")
    return order + 1, (order + 1) * (order + 2) // 2


@dataclass
class TerminationReport:
    n_c: Optional[int]
    order: int
    tol: float
    peak_norms: np.ndarray
    annotation: str = ""

    def __str__(self) -> str:
        if self.annotation:
            return f"N_c = {self.n_c} ({self.annotation})"
        if self.n_c is None:
            return f"no termination <= {self.order}"
        return f"N_c = {self.n_c}"


def termination_report(result: EnsembleResult, tol: float = 1e-6) -> TerminationReport:
    """Detect where the hierarchy closes on its own.

    Reports the smallest k whose successor level stays below
    ``tol * max_t mean||Q_0||`` for all sampled times; an identically silent
    bath (all norms zero) is flagged rather than divided by.
    """
    peaks = result.qnorms.max(axis=0)
    order = peaks.size - 1
    scale = peaks[0]
    if scale == 0.0:
        return TerminationReport(
            n_c=0, order=order, tol=tol, peak_norms=peaks, annotation="trivial bath"
        )
    for k in range(order):
        if peaks[k + 1] < tol * scale:
            return TerminationReport(n_c=k, order=order, tol=tol, peak_norms=peaks)
    return TerminationReport(n_c=None, order=order, tol=tol, peak_norms=peaks)


@dataclass
class _BatchPartial:
    count: int
    proj_sum: np.ndarray          # (n_t, d, d)
    obs_sum: np.ndarray           # (n_obs, n_t)
    obs_sq_sum: np.ndarray        # (n_obs, n_t)
    qnorm_sum: np.ndarray         # (n_t, n_levels)


def _pairwise_merge(parts: list[_BatchPartial]) -> _BatchPartial:
    """Fixed-shape pairwise reduction; independent of worker scheduling."""
    items = list(parts)
    while len(items) > 1:
        merged = []
        for i in range(0, len(items) - 1, 2):
            a, b = items[i], items[i + 1]
            merged.append(
                _BatchPartial(
                    count=a.count + b.count,
                    proj_sum=a.proj_sum + b.proj_sum,
                    obs_sum=a.obs_sum + b.obs_sum,
                    obs_sq_sum=a.obs_sq_sum + b.obs_sq_sum,
                    qnorm_sum=a.qnorm_sum + b.qnorm_sum,
                )
            )
        if len(items) % 2 == 1:
            merged.append(items[-1])
        items = merged
    return items[0]


def run_ensemble(
    sys: SystemSpec,
    kernel: CorrelationKernel,
    engine,
    trajectories: int,
    dt: float,
    T: float,
    master_seed: int,
    workers: int = 1,
    engine_name: str = "",
) -> EnsembleResult:
    """Average ``trajectories`` independent runs of a batched engine.

    ``engine`` must expose ``unpack``, ``level_matrices`` and
    ``propagate_batch(zstar, dt, n_steps, on_sample)`` (the chain,
    multi-index and exactly-closing engines all do).  Engines hold only
    immutable tables, so one instance serves every worker.

    Any non-finite trajectory aborts the whole run with the offending
    trajectory indices and seeds: silently dropping samples would bias the
    average.  The returned density matrix is checked for unit trace,
    Hermiticity and positivity before this function returns.
    """
    if trajectories < 1:
        raise ValueError("need at least one trajectory")
    t_start = time.perf_counter()
    n_steps = round(T / dt)
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError("T must be a positive multiple of dt")
    n_t = n_steps + 1
    d = sys.dim
    obs_names = list(sys.observables)
    obs_mats = [sys.observables[n] for n in obs_names]
    n_levels = getattr(engine, "order", 0) + 1

    batches = [
        range(lo, min(lo + BATCH_SIZE, trajectories))
        for lo in range(0, trajectories, BATCH_SIZE)
    ]

    def run_batch(idx_range: range) -> _BatchPartial:
        seeds = [trajectory_seed(master_seed, i) for i in idx_range]
        zstar = sample_paths(kernel, T, dt, seeds)
        b = len(seeds)
        proj = np.zeros((n_t, d, d), dtype=np.complex128)
        obs = np.zeros((len(obs_mats), n_t))
        obs_sq = np.zeros((len(obs_mats), n_t))
        qn = np.zeros((n_t, n_levels))

        def on_sample(t_idx: int, t: float, y: np.ndarray) -> None:
            psi, _, q = engine.unpack(y)
            nrm2 = np.einsum("bi,bi->b", psi.conj(), psi).real
            proj[t_idx] = np.einsum("bi,bj->ij", psi / nrm2[:, None], psi.conj())
            for oi, a in enumerate(obs_mats):
                vals = np.einsum("bi,ij,bj->b", psi.conj(), a, psi).real / nrm2
                obs[oi, t_idx] = vals.sum()
                obs_sq[oi, t_idx] = (vals * vals).sum()
            qn[t_idx] = trace_norms(engine.level_matrices(q)).sum(axis=0)

        try:
            engine.propagate_batch(zstar, dt, n_steps, on_sample=on_sample)
        except PropagationError as err:
            bad = [idx_range[i] for i in err.bad_indices]
            bad_seeds = [seeds[i] for i in err.bad_indices]
            raise EnsembleError(
                f"trajectories {bad} (seeds {bad_seeds}) became non-finite "
                f"at t={err.time:.6g}: {err.diagnostic}"
            ) from err
        return _BatchPartial(
            count=b, proj_sum=proj, obs_sum=obs, obs_sq_sum=obs_sq, qnorm_sum=qn
        )

    if workers <= 1 or len(batches) == 1:
        parts = [run_batch(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_batch, batches))

    total = _pairwise_merge(parts)
    m = float(total.count)
    rho = total.proj_sum / m
    observables: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for oi, name in enumerate(obs_names):
        mean = total.obs_sum[oi] / m
        if total.count > 1:
            var = (total.obs_sq_sum[oi] - total.obs_sum[oi] ** 2 / m) / (m - 1.0)
            stderr = np.sqrt(np.maximum(var, 0.0) / m)
        else:
            stderr = np.zeros(n_t)
        observables[name] = (mean, stderr)
    qnorms = total.qnorm_sum / m

    trace_dev = float(np.abs(np.einsum("tii->t", rho) - 1.0).max())
    herm_dev = float(np.abs(rho - rho.conj().transpose(0, 2, 1)).max())
    min_eig = float(np.linalg.eigvalsh(rho).min())
    if trace_dev > TRACE_TOL:
        raise EnsembleError(f"density matrix trace off by {trace_dev:.3e}")
    if herm_dev > HERMITICITY_TOL:
        raise EnsembleError(f"density matrix non-Hermitian by {herm_dev:.3e}")
    if min_eig < -POSITIVITY_SLACK:
        raise EnsembleError(f"density matrix eigenvalue {min_eig:.3e} below slack")

    truncation = getattr(engine, "truncation", None)
    meta = EnsembleMeta(
        trajectories=trajectories,
        master_seed=master_seed,
        order=getattr(engine, "order", -1),
        dt=dt,
        horizon=T,
        engine=engine_name,
        truncation=getattr(truncation, "value", str(truncation)),
        workers=workers,
        wall_time=time.perf_counter() - t_start,
        trace_deviation=trace_dev,
        hermiticity_deviation=herm_dev,
        min_eigenvalue=min_eig,
    )
    return EnsembleResult(
        times=np.arange(n_t) * dt,
        rho=rho,
        observables=observables,
        qnorms=qnorms,
        meta=meta,
    )
