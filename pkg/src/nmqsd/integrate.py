"""Fixed-step fourth-order propagation of flat complex state vectors.

Every engine packs its per-trajectory state (wave function, shift
accumulators, hierarchy matrices, ...) into one complex row, and a batch of
trajectories into a (B, n) array.  The classical RK4 step reads the driving
noise at t, t + dt/2 and t + dt; those values come straight off the
half-step sample grid, never from interpolation.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

__all__ = ["PropagationError", "rk4_propagate"]


class PropagationError(RuntimeError):
    """Propagation produced a non-finite state.

    Attributes carry the failure time, the batch-local indices of the bad
    trajectories, and a short diagnostic supplied by the engine.
    """

    def __init__(self, time: float, bad_indices: np.ndarray, diagnostic: str):
        self.time = time
        self.bad_indices = bad_indices
        self.diagnostic = diagnostic
        super().__init__(
            f"non-finite state at t={time:.6g} for batch trajectories "
            f"{bad_indices.tolist()}; {diagnostic}"
        )


def rk4_propagate(
    rhs: Callable[[float, np.ndarray, np.ndarray], np.ndarray],
    y0: np.ndarray,
    zstar: np.ndarray,
    dt: float,
    n_steps: int,
    renormalize: Optional[Callable[[np.ndarray], None]] = None,
    on_sample: Optional[Callable[[int, float, np.ndarray], None]] = None,
    diagnostic: Optional[Callable[[np.ndarray], str]] = None,
) -> np.ndarray:
    """Propagate ``y0`` over ``n_steps`` steps of size ``dt``.

    Parameters
    ----------
    rhs : callable(t, y, z) -> dy
        Time derivative; ``z`` is the (B,) raw noise sample at the stage time.
    y0 : (B, n) complex ndarray
        Initial batch state (not modified).
    zstar : (B, 2*n_steps+1) complex ndarray
        Noise samples on the half-step grid, one row per trajectory.
    renormalize : callable(y) or None
        Applied in place after every accepted step (state normalization).
    on_sample : callable(step_index, t, y) or None
        Called with the accepted state at step_index = 0 .. n_steps
        (index 0 is the initial state).
    diagnostic : callable(y) -> str or None
        Formats engine-specific context for a non-finite failure.

    Returns
    -------
    (B, n) complex ndarray
        Final state.
    """
    y = np.array(y0, dtype=np.complex128)
    if zstar.shape != (y.shape[0], 2 * n_steps + 1):
        raise ValueError(
            f"noise grid shape {zstar.shape} does not match "
            f"batch {y.shape[0]} x half-grid {2 * n_steps + 1}"
        )
    if on_sample is not None:
        on_sample(0, 0.0, y)
    half = 0.5 * dt
    sixth = dt / 6.0
    for i in range(n_steps):
        t = i * dt
        z0 = zstar[:, 2 * i]
        z1 = zstar[:, 2 * i + 1]
        z2 = zstar[:, 2 * i + 2]
        k1 = rhs(t, y, z0)
        k2 = rhs(t + half, y + half * k1, z1)
        k3 = rhs(t + half, y + half * k2, z1)
        k4 = rhs(t + dt, y + dt * k3, z2)
        y = y + sixth * (k1 + 2.0 * (k2 + k3) + k4)
        if renormalize is not None:
            renormalize(y)
        if not np.isfinite(y).all():
            bad = np.where(~np.isfinite(y).all(axis=1))[0]
            detail = diagnostic(y) if diagnostic is not None else ""
            raise PropagationError((i + 1) * dt, bad, detail)
        if on_sample is not None:
            on_sample(i + 1, (i + 1) * dt, y)
    return y
