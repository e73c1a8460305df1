"""System definitions: Hamiltonians, coupling operators, states, observables.

Everything here is a plain dense ``complex128`` numpy array.  Matrices are
small (d <= 16 in practice), so no sparse machinery is used.  A
:class:`SystemSpec` is immutable after construction and can be shared freely
across concurrent trajectory workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

HERMITICITY_TOL = 1e-12
UNIT_NORM_TOL = 1e-12


def _as_complex_matrix(a, dim: int, name: str) -> np.ndarray:
    out = np.array(a, dtype=np.complex128)
    if out.shape != (dim, dim):
        raise ValueError(f"{name} must be a {dim}x{dim} matrix, got shape {out.shape}")
    out.setflags(write=False)
    return out


def pauli() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return the Pauli matrices (sigma_x, sigma_y, sigma_z)."""
    sx = np.array([[0, 1], [1, 0]], dtype=np.complex128)
    sy = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
    sz = np.array([[1, 0], [0, -1]], dtype=np.complex128)
    return sx, sy, sz


def sigma_minus() -> np.ndarray:
    """Lowering operator |g><e| in the (|e>, |g>) basis."""
    return np.array([[0, 0], [1, 0]], dtype=np.complex128)


def angular_momentum(two_j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Spin-(two_j/2) operators (Jx, Jy, Jz, Jminus) in the Jz eigenbasis.

    Basis states are ordered by descending magnetic quantum number
    m = j, j-1, ..., -j, so ``Jz = diag(j, j-1, ..., -j)``.  The lowering
    operator has the standard ladder elements
    ``<m-1|J-|m> = sqrt(j(j+1) - m(m-1))`` on the first subdiagonal, and
    ``Jminus = Jx - i Jy`` holds exactly.

    Parameters
    ----------
    two_j : int
        Twice the spin quantum number (0 for a trivial system, 1 for a
        qubit, 2 for a three-level spin-1 system, ...).
    """
    if two_j < 0 or int(two_j) != two_j:
        raise ValueError(f"two_j must be a nonnegative integer, got {two_j!r}")
    two_j = int(two_j)
    j = two_j / 2.0
    dim = two_j + 1
    m = j - np.arange(dim)
    jz = np.diag(m).astype(np.complex128)
    jminus = np.zeros((dim, dim), dtype=np.complex128)
    for col in range(dim - 1):
        # J- |m> = sqrt(j(j+1) - m(m-1)) |m-1>; column col holds m = j - col
        mm = j - col
        jminus[col + 1, col] = math.sqrt(j * (j + 1) - mm * (mm - 1))
    jplus = jminus.conj().T
    jx = (jplus + jminus) / 2.0
    jy = (jplus - jminus) / 2.0j
    for a in (jx, jy, jz, jminus):
        a.setflags(write=False)
    return jx, jy, jz, jminus


@dataclass(frozen=True)
class SystemSpec:
    """An open system: Hamiltonian, coupling operator, initial state, observables.

    The constructor only enforces shapes and dtypes; the physics invariants
    (Hermiticity, unit norm) are checked by :func:`validate_system`, which
    reports rather than raises so a CLI can show every violation at once.

    Attributes
    ----------
    dim : int
        Hilbert-space dimension d.
    hamiltonian : (d, d) complex ndarray
        System Hamiltonian H (hbar = 1).
    lindblad : (d, d) complex ndarray
        Coupling operator L.  May be non-self-adjoint; self-adjointness is
        what makes a kernel-only finite-temperature treatment applicable.
    initial_state : (d,) complex ndarray
        Initial pure state.
    observables : dict[str, ndarray]
        Named Hermitian operators whose expectations are tracked.
    """

    dim: int
    hamiltonian: np.ndarray
    lindblad: np.ndarray
    initial_state: np.ndarray
    observables: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        d = int(self.dim)
        if d <= 0:
            raise ValueError("dim must be a positive integer")
        object.__setattr__(self, "dim", d)
        object.__setattr__(
            self, "hamiltonian", _as_complex_matrix(self.hamiltonian, d, "hamiltonian")
        )
        object.__setattr__(
            self, "lindblad", _as_complex_matrix(self.lindblad, d, "lindblad")
        )
        psi = np.array(self.initial_state, dtype=np.complex128)
        if psi.shape != (d,):
            raise ValueError(f"initial_state must have shape ({d},), got {psi.shape}")
        psi.setflags(write=False)
        object.__setattr__(self, "initial_state", psi)
        obs = {
            name: _as_complex_matrix(a, d, f"observable {name!r}")
            for name, a in self.observables.items()
        }
        object.__setattr__(self, "observables", obs)

    @property
    def lindblad_dagger(self) -> np.ndarray:
        return self.lindblad.conj().T

    def validate(self) -> "ValidationReport":
        return validate_system(self)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    deviation: float
    tolerance: float


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]
    lindblad_self_adjoint: bool

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> tuple[CheckResult, ...]:
        return tuple(c for c in self.checks if not c.passed)

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            status = "ok" if c.passed else "FAIL"
            lines.append(f"{status:4s} {c.name}: deviation {c.deviation:.3e} (tol {c.tolerance:.1e})")
        lines.append(f"     lindblad self-adjoint: {self.lindblad_self_adjoint}")
        return "\n".join(lines)


def _hermiticity_deviation(a: np.ndarray) -> float:
    return float(np.abs(a - a.conj().T).max())


def validate_system(spec: SystemSpec) -> ValidationReport:
    """Check every invariant of ``spec`` and report pass/fail per check.

    Never raises on a physics violation; callers inspect ``report.ok``.
    The self-adjointness of the coupling operator is recorded as a flag
    (it is a capability marker, not an error).
    """
    checks = [
        CheckResult(
            "hamiltonian hermitian",
            _hermiticity_deviation(spec.hamiltonian) <= HERMITICITY_TOL,
            _hermiticity_deviation(spec.hamiltonian),
            HERMITICITY_TOL,
        ),
        CheckResult(
            "initial_state unit norm",
            abs(np.linalg.norm(spec.initial_state) - 1.0) <= UNIT_NORM_TOL,
            float(abs(np.linalg.norm(spec.initial_state) - 1.0)),
            UNIT_NORM_TOL,
        ),
    ]
    for name, a in spec.observables.items():
        dev = _hermiticity_deviation(a)
        checks.append(
            CheckResult(f"observable {name} hermitian", dev <= HERMITICITY_TOL, dev, HERMITICITY_TOL)
        )
    self_adjoint = _hermiticity_deviation(spec.lindblad) <= HERMITICITY_TOL
    return ValidationReport(checks=tuple(checks), lindblad_self_adjoint=self_adjoint)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def three_level_system(omega: float = 1.0, initial_state=None) -> SystemSpec:
    """Dissipative three-level (spin-1) system: H = omega*Jz, L = J-.

    The hierarchy closes exactly for this model, which makes it the
    reference workload for cross-engine checks.  The default initial state
    is the uniform superposition of the three Jz eigenstates so that all
    of <Jx>, <Jy>, <Jz> evolve nontrivially.
    """
    jx, jy, jz, jminus = angular_momentum(2)
    if initial_state is None:
        initial_state = np.ones(3, dtype=np.complex128) / math.sqrt(3.0)
    return SystemSpec(
        dim=3,
        hamiltonian=omega * jz,
        lindblad=jminus,
        initial_state=initial_state,
        observables={"Jx": jx, "Jy": jy, "Jz": jz},
    )


def spin_boson_system(tunneling: float = 1.0, bias: float = 0.0, initial_state=None) -> SystemSpec:
    """Unbiased/biased two-level system with dephasing-type coupling L = sigma_z.

    H = (tunneling/2) sigma_x + (bias/2) sigma_z.  The coupling operator is
    self-adjoint, so a finite-temperature treatment via a modified kernel
    applies.  Tunneling and bias are free parameters of the run.
    """
    sx, _, sz = pauli()
    if initial_state is None:
        initial_state = np.array([1.0, 0.0], dtype=np.complex128)
    return SystemSpec(
        dim=2,
        hamiltonian=0.5 * tunneling * sx + 0.5 * bias * sz,
        lindblad=sz,
        initial_state=initial_state,
        observables={"sigma_z": sz, "sigma_x": sx},
    )


def qubit_decay_system(omega: float = 1.0) -> SystemSpec:
    """Damped qubit: H = (omega/2) sigma_z, L = sigma_-, started in |e>."""
    sx, _, sz = pauli()
    return SystemSpec(
        dim=2,
        hamiltonian=0.5 * omega * sz,
        lindblad=sigma_minus(),
        initial_state=np.array([1.0, 0.0], dtype=np.complex128),
        observables={"sigma_z": sz, "sigma_x": sx},
    )


PRESETS = {
    "three_level": three_level_system,
    "spin_boson": spin_boson_system,
    "qubit_decay": qubit_decay_system,
}
