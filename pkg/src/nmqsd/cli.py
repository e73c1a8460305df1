"""Command-line entry point: sectioned config in, CSV results out.

A run is described by an INI-style config with three sections::

    [system]
    preset = three_level      ; or spin_boson / qubit_decay, or explicit
    omega = 1.0               ; preset parameter

    [bath]
    Gamma = 1.0               ; OU kernel shorthand ...
    gamma = 1.0
    ; terms = 0.5 0.0 1.0 0.0 ; ... or explicit rows: re_c im_c re_nu im_nu

    [run]
    mode = ou-hfd
    order = 10
    dt = 0.01
    horizon = 10.0
    trajectories = 1000
    master_seed = 1
    out_dir = runs

Unknown keys are rejected with a line reference (typo safety).  Every run
creates one fresh directory named by timestamp and seed under ``out_dir``
and writes ``observables.csv``, ``qnorms.csv``, ``rho.csv`` and
``meta.txt`` (plus ``report.csv`` for comparison modes).  All floats are
written with 17 significant digits so downstream comparisons are exact.
"""

from __future__ import annotations

import argparse
import configparser
import io
import sys as _sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .ensemble import EnsembleResult, count_equations, run_ensemble, termination_report
from .hierarchy_general import GeneralHierarchyEngine, GeometricClosure
from .hierarchy_ou import OUHierarchyEngine, Truncation
from .model import PRESETS, SystemSpec, validate_system
from .noise import CorrelationKernel, sample_path, trajectory_seed
from .oracles import (
    ExactThreeLevelEngine,
    hops_states,
    hops_states_direct,
    lindblad_oracle,
    propagate_joint_sde,
)

MODES = (
    "ou-hfd",
    "general-hfd",
    "sde-oracle",
    "hops-check",
    "exact3",
    "lindblad",
    "compare",
    "counts",
)

_KNOWN_KEYS = {
    "system": {
        "preset", "omega", "tunneling", "bias", "dim",
        "hamiltonian", "lindblad", "initial_state",
    },
    "bath": {"Gamma", "gamma", "terms", "j_max"},
    "run": {
        "mode", "order", "truncation", "closure", "closure_a", "closure_jmax",
        "dt", "horizon", "trajectories", "master_seed", "workers", "out_dir",
        "compare", "dump_noise", "hops_depth",
    },
}


class ConfigError(ValueError):
    """Collected configuration problems, each with a line reference."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("\n".join(errors))


@dataclass
class RunConfig:
    """A fully resolved run description.

    Presets are expanded to explicit matrices at parse time so that system
    validation always sees concrete operators; the preset name and its
    parameters are kept for faithful re-emission.
    """

    system: SystemSpec
    kernel: CorrelationKernel
    mode: str = "ou-hfd"
    order: int = 10
    truncation: str = "zero"
    closure: str = "zero"
    closure_a: complex = 0.0
    closure_jmax: int = 0
    dt: float = 0.01
    horizon: float = 10.0
    trajectories: int = 1000
    master_seed: int = 1
    workers: int = 1
    out_dir: str = "runs"
    compare: Optional[tuple[str, str]] = None
    dump_noise: bool = False
    hops_depth: int = 6
    preset: Optional[str] = None
    preset_params: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, RunConfig):
            return NotImplemented
        if not (
            self.system.dim == other.system.dim
            and np.array_equal(self.system.hamiltonian, other.system.hamiltonian)
            and np.array_equal(self.system.lindblad, other.system.lindblad)
            and np.array_equal(self.system.initial_state, other.system.initial_state)
            and list(self.system.observables) == list(other.system.observables)
            and all(
                np.array_equal(a, other.system.observables[n])
                for n, a in self.system.observables.items()
            )
        ):
            return False
        simple = (
            "mode", "order", "truncation", "closure", "closure_a", "closure_jmax",
            "dt", "horizon", "trajectories", "master_seed", "workers", "out_dir",
            "compare", "dump_noise", "hops_depth", "preset",
        )
        return (
            all(getattr(self, f) == getattr(other, f) for f in simple)
            and self.kernel.terms == other.kernel.terms
            and self.kernel.j_max == other.kernel.j_max
            and self.preset_params == other.preset_params
        )


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) to its 1-based line number in the raw text."""
    out = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if section is not None and ("=" in line or ":" in line):
            sep = min((i for i in (line.find("="), line.find(":")) if i >= 0))
            key = line[:sep].strip()
            if key and (section, key) not in out:
                out[(section, key)] = lineno
    return out


def _parse_complex(token: str) -> complex:
    return complex(token.replace(" ", ""))


def _parse_matrix(text: str, dim: int, name: str, errors: list, where: str) -> np.ndarray:
    tokens = text.split()
    if len(tokens) != dim * dim:
        errors.append(f"{where}: {name} needs {dim * dim} entries, got {len(tokens)}")
        return np.zeros((dim, dim), dtype=np.complex128)
    try:
        vals = [_parse_complex(t) for t in tokens]
    except ValueError as exc:
        errors.append(f"{where}: malformed complex number in {name}: {exc}")
        return np.zeros((dim, dim), dtype=np.complex128)
    return np.array(vals, dtype=np.complex128).reshape(dim, dim)


def parse_config(text: str) -> RunConfig:
    """Parse and validate a config; raises :class:`ConfigError` on problems."""
    errors: list[str] = []
    lines = _key_lines(text)

    def where(section: str, key: str) -> str:
        ln = lines.get((section, key))
        return f"line {ln}" if ln is not None else f"[{section}] {key}"

    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep case (Gamma vs gamma)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"config syntax: {exc}"]) from exc

    for section in cp.sections():
        if section not in _KNOWN_KEYS:
            errors.append(f"unknown section [{section}]")
            continue
        for key in cp[section]:
            if section == "system" and key.startswith("observable."):
                continue
            if key not in _KNOWN_KEYS[section]:
                errors.append(f"{where(section, key)}: unknown key {key!r} in [{section}]")

    def get(section, key, default=None, cast=str, required=False):
        if cp.has_option(section, key):
            raw = cp.get(section, key)
            try:
                return cast(raw)
            except (TypeError, ValueError) as exc:
                errors.append(f"{where(section, key)}: bad value for {key}: {exc}")
                return default
        if required:
            errors.append(f"missing required field {key!r} in [{section}]")
        return default

    # --- bath ---------------------------------------------------------------
    kernel = None
    if not cp.has_section("bath"):
        errors.append("kernel required: missing [bath] section")
    else:
        has_ou = cp.has_option("bath", "Gamma") or cp.has_option("bath", "gamma")
        has_terms = cp.has_option("bath", "terms")
        j_max = get("bath", "j_max", 32, int)
        if has_terms and has_ou:
            errors.append("[bath]: give either Gamma/gamma or explicit terms, not both")
        elif has_terms:
            rows = [r for r in cp.get("bath", "terms").splitlines() if r.strip()]
            terms = []
            for r in rows:
                toks = r.split()
                if len(toks) != 4:
                    errors.append(f"{where('bath', 'terms')}: each term row needs 4 numbers, got {r!r}")
                    continue
                try:
                    c = complex(float(toks[0]), float(toks[1]))
                    nu = complex(float(toks[2]), float(toks[3]))
                    terms.append((c, nu))
                except ValueError as exc:
                    errors.append(f"{where('bath', 'terms')}: malformed term row {r!r}: {exc}")
            if terms and not errors:
                try:
                    kernel = CorrelationKernel(terms=tuple(terms), j_max=j_max)
                except ValueError as exc:
                    errors.append(f"[bath]: {exc}")
        elif has_ou:
            Gamma = get("bath", "Gamma", None, float, required=True)
            gamma = get("bath", "gamma", None, float, required=True)
            if Gamma is not None and gamma is not None:
                try:
                    kernel = CorrelationKernel.ou(Gamma, gamma, j_max=j_max)
                except ValueError as exc:
                    errors.append(f"[bath]: {exc}")
        else:
            errors.append("kernel required: [bath] needs Gamma/gamma or terms")

    # --- system ---------------------------------------------------------------
    system = None
    preset = None
    preset_params: dict = {}
    if not cp.has_section("system"):
        errors.append("missing [system] section")
    else:
        preset = get("system", "preset", None)
        explicit_keys = {"dim", "hamiltonian", "lindblad", "initial_state"}
        has_explicit = any(cp.has_option("system", k) for k in explicit_keys)
        has_obs = any(k.startswith("observable.") for k in cp["system"])
        if preset is not None:
            if has_explicit or has_obs:
                errors.append("[system]: preset and explicit matrices are mutually exclusive")
            if preset not in PRESETS:
                errors.append(
                    f"{where('system', 'preset')}: unknown preset {preset!r} "
                    f"(choose from {sorted(PRESETS)})"
                )
            else:
                params = {}
                for pname in ("omega", "tunneling", "bias"):
                    if cp.has_option("system", pname):
                        params[pname] = get("system", pname, None, float)
                try:
                    system = PRESETS[preset](**params)
                    preset_params = params
                except TypeError as exc:
                    errors.append(f"[system]: preset {preset!r} rejected parameters: {exc}")
        elif has_explicit:
            dim = get("system", "dim", None, int, required=True)
            if dim is not None and dim > 0:
                h = _parse_matrix(get("system", "hamiltonian", "", required=True) or "",
                                  dim, "hamiltonian", errors, where("system", "hamiltonian"))
                L = _parse_matrix(get("system", "lindblad", "", required=True) or "",
                                  dim, "lindblad", errors, where("system", "lindblad"))
                psi_text = get("system", "initial_state", "", required=True) or ""
                toks = psi_text.split()
                if len(toks) != dim:
                    errors.append(f"{where('system', 'initial_state')}: initial_state needs {dim} entries")
                    psi = np.zeros(dim, dtype=np.complex128)
                else:
                    try:
                        psi = np.array([_parse_complex(t) for t in toks], dtype=np.complex128)
                    except ValueError as exc:
                        errors.append(f"{where('system', 'initial_state')}: {exc}")
                        psi = np.zeros(dim, dtype=np.complex128)
                obs = {}
                for key in cp["system"]:
                    if key.startswith("observable."):
                        name = key[len("observable."):]
                        obs[name] = _parse_matrix(
                            cp.get("system", key), dim, key, errors, where("system", key)
                        )
                if not errors:
                    system = SystemSpec(
                        dim=dim, hamiltonian=h, lindblad=L, initial_state=psi,
                        observables=obs,
                    )
        else:
            errors.append("[system]: give a preset or explicit matrices")

    # --- run ------------------------------------------------------------------
    mode = get("run", "mode", "ou-hfd")
    if mode not in MODES:
        errors.append(f"{where('run', 'mode')}: unknown mode {mode!r} (choose from {MODES})")
    truncation = get("run", "truncation", "zero")
    if truncation not in ("zero", "commutator"):
        errors.append(f"{where('run', 'truncation')}: truncation must be zero or commutator")
    closure = get("run", "closure", "zero")
    if closure not in ("zero", "geometric"):
        errors.append(f"{where('run', 'closure')}: closure must be zero or geometric")
    compare_raw = get("run", "compare", None)
    compare = None
    if compare_raw is not None:
        parts = compare_raw.split()
        ok_engines = {"ou-hfd", "general-hfd", "exact3", "lindblad"}
        if len(parts) != 2 or not set(parts) <= ok_engines:
            errors.append(
                f"{where('run', 'compare')}: compare needs two of {sorted(ok_engines)}"
            )
        else:
            compare = (parts[0], parts[1])

    def as_bool(raw: str) -> bool:
        low = raw.strip().lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")

    cfg_kwargs = dict(
        mode=mode,
        order=get("run", "order", 10, int),
        truncation=truncation,
        closure=closure,
        closure_a=get("run", "closure_a", 0j, _parse_complex),
        closure_jmax=get("run", "closure_jmax", 0, int),
        dt=get("run", "dt", 0.01, float),
        horizon=get("run", "horizon", 10.0, float),
        trajectories=get("run", "trajectories", 1000, int),
        master_seed=get("run", "master_seed", 1, int),
        workers=get("run", "workers", 1, int),
        out_dir=get("run", "out_dir", "runs"),
        compare=compare,
        dump_noise=get("run", "dump_noise", False, as_bool),
        hops_depth=get("run", "hops_depth", 6, int),
    )
    if mode == "compare" and compare is None:
        errors.append("mode compare needs a 'compare = <engine> <engine>' line in [run]")

    if errors:
        raise ConfigError(errors)
    assert system is not None and kernel is not None

    report = validate_system(system)
    if not report.ok:
        raise ConfigError(
            [f"system validation: {c.name} failed (deviation {c.deviation:.3e})"
             for c in report.failures]
        )
    return RunConfig(
        system=system, kernel=kernel, preset=preset, preset_params=preset_params,
        **cfg_kwargs,
    )


def _fmt(x) -> str:
    if isinstance(x, (complex, np.complexfloating)):
        return f"{x.real:.17g}{x.imag:+.17g}j"
    if isinstance(x, (float, np.floating)):
        return f"{x:.17g}"
    return str(x)


def emit_config(cfg: RunConfig) -> str:
    """Serialize a RunConfig so that ``parse_config(emit_config(c)) == c``."""
    out = io.StringIO()
    out.write("[system]\n")
    if cfg.preset is not None:
        out.write(f"preset = {cfg.preset}\n")
        for k, v in cfg.preset_params.items():
            out.write(f"{k} = {_fmt(v)}\n")
    else:
        s = cfg.system
        out.write(f"dim = {s.dim}\n")
        out.write("hamiltonian = " + " ".join(_fmt(v) for v in s.hamiltonian.ravel()) + "\n")
        out.write("lindblad = " + " ".join(_fmt(v) for v in s.lindblad.ravel()) + "\n")
        out.write("initial_state = " + " ".join(_fmt(v) for v in s.initial_state) + "\n")
        for name, a in s.observables.items():
            out.write(f"observable.{name} = " + " ".join(_fmt(v) for v in a.ravel()) + "\n")
    out.write("\n[bath]\n")
    rows = [
        f"    {_fmt(c.real)} {_fmt(c.imag)} {_fmt(nu.real)} {_fmt(nu.imag)}"
        for c, nu in cfg.kernel.terms
    ]
    out.write("terms =\n" + "\n".join(rows) + "\n")
    out.write(f"j_max = {cfg.kernel.j_max}\n")
    out.write("\n[run]\n")
    out.write(f"mode = {cfg.mode}\n")
    out.write(f"order = {cfg.order}\n")
    out.write(f"truncation = {cfg.truncation}\n")
    out.write(f"closure = {cfg.closure}\n")
    out.write(f"closure_a = {_fmt(complex(cfg.closure_a))}\n")
    out.write(f"closure_jmax = {cfg.closure_jmax}\n")
    out.write(f"dt = {_fmt(cfg.dt)}\n")
    out.write(f"horizon = {_fmt(cfg.horizon)}\n")
    out.write(f"trajectories = {cfg.trajectories}\n")
    out.write(f"master_seed = {cfg.master_seed}\n")
    out.write(f"workers = {cfg.workers}\n")
    out.write(f"out_dir = {cfg.out_dir}\n")
    if cfg.compare is not None:
        out.write(f"compare = {cfg.compare[0]} {cfg.compare[1]}\n")
    out.write(f"dump_noise = {'true' if cfg.dump_noise else 'false'}\n")
    out.write(f"hops_depth = {cfg.hops_depth}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header: list[str], columns: list[np.ndarray]) -> None:
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        n = len(columns[0])
        for i in range(n):
            fh.write(",".join(f"{col[i]:.17g}" for col in columns) + "\n")


def _write_observables(path: Path, result: EnsembleResult) -> None:
    header = ["t"]
    cols = [result.times]
    for name, (mean, stderr) in result.observables.items():
        header += [f"{name}_mean", f"{name}_stderr"]
        cols += [mean, stderr]
    _write_csv(path, header, cols)


def _write_qnorms(path: Path, result: EnsembleResult) -> None:
    n_levels = result.qnorms.shape[1]
    header = ["t"] + [f"qnorm_{k}" for k in range(n_levels)]
    cols = [result.times] + [result.qnorms[:, k] for k in range(n_levels)]
    _write_csv(path, header, cols)


def _write_rho(path: Path, times: np.ndarray, rho: np.ndarray) -> None:
    d = rho.shape[1]
    header = ["t"]
    cols = [times]
    for i in range(d):
        for j in range(d):
            header += [f"rho_re_{i}{j}", f"rho_im_{i}{j}"]
            cols += [rho[:, i, j].real, rho[:, i, j].imag]
    _write_csv(path, header, cols)


def _write_meta(path: Path, cfg: RunConfig, wall_time: float, extra: dict) -> None:
    with path.open("w") as fh:
        fh.write(f"package = nmqsd {__version__}\n")
        fh.write(f"numpy = {np.__version__}\n")
        fh.write(f"python = {_sys.version.split()[0]}\n")
        fh.write(f"timestamp_utc = {datetime.now(timezone.utc).isoformat()}\n")
        fh.write(f"wall_time_s = {wall_time:.17g}\n")
        for k, v in extra.items():
            fh.write(f"{k} = {v}\n")
        fh.write("\n# full configuration (re-runnable)\n")
        fh.write(emit_config(cfg))


def _make_run_dir(cfg: RunConfig) -> Path:
    base = Path(cfg.out_dir)
    base.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    candidate = base / f"{stamp}-seed{cfg.master_seed}"
    n = 1
    while candidate.exists():
        candidate = base / f"{stamp}-seed{cfg.master_seed}-{n}"
        n += 1
    candidate.mkdir()
    return candidate


# ---------------------------------------------------------------------------
# Mode execution
# ---------------------------------------------------------------------------

def _build_engine(cfg: RunConfig, name: str):
    if name == "ou-hfd":
        return OUHierarchyEngine(
            cfg.system, cfg.kernel, cfg.order,
            truncation=Truncation(cfg.truncation),
        )
    if name == "general-hfd":
        closure = (
            GeometricClosure(a=cfg.closure_a, j_max=cfg.closure_jmax)
            if cfg.closure == "geometric"
            else None
        )
        return GeneralHierarchyEngine(cfg.system, cfg.kernel, cfg.order, closure=closure)
    if name == "exact3":
        if cfg.preset != "three_level":
            raise ConfigError(["mode exact3 requires the three_level preset"])
        if not cfg.kernel.is_single_real:
            raise ConfigError(["mode exact3 requires an OU kernel"])
        c, nu = cfg.kernel.terms[0]
        gamma = nu.real
        Gamma = 2.0 * c.real / gamma
        omega = cfg.preset_params.get("omega", 1.0)
        return ExactThreeLevelEngine(omega, Gamma, gamma,
                                     initial_state=cfg.system.initial_state)
    raise ConfigError([f"no trajectory engine named {name!r}"])


def _run_trajectory_ensemble(cfg: RunConfig, engine_name: str) -> EnsembleResult:
    if not cfg.kernel.sampling_supported:
        raise ConfigError(
            ["ensemble sampling is only defined for real exponential kernels; "
             "complex-frequency kernels admit deterministic runs only"]
        )
    engine = _build_engine(cfg, engine_name)
    return run_ensemble(
        cfg.system, cfg.kernel, engine,
        trajectories=cfg.trajectories, dt=cfg.dt, T=cfg.horizon,
        master_seed=cfg.master_seed, workers=cfg.workers, engine_name=engine_name,
    )


def _dump_noise(cfg: RunConfig, run_dir: Path) -> None:
    path = sample_path(cfg.kernel, cfg.horizon, cfg.dt,
                       trajectory_seed(cfg.master_seed, 0))
    _write_csv(
        run_dir / "noise.csv",
        ["t", "re_zstar", "im_zstar"],
        [path.times, path.values.real, path.values.imag],
    )


def run(cfg: RunConfig, echo=print) -> Path:
    """Execute one configured run; returns the directory with the results."""
    t0 = time.perf_counter()
    if cfg.mode == "counts":
        hfd, sde = count_equations(cfg.order)
        echo(f"HFD: {hfd}, SDE: {sde}")
        return Path(cfg.out_dir)

    run_dir = _make_run_dir(cfg)
    extra = {"mode": cfg.mode}

    if cfg.mode in ("ou-hfd", "general-hfd", "exact3"):
        result = _run_trajectory_ensemble(cfg, cfg.mode)
        _write_observables(run_dir / "observables.csv", result)
        _write_qnorms(run_dir / "qnorms.csv", result)
        _write_rho(run_dir / "rho.csv", result.times, result.rho)
        report = termination_report(result)
        extra["termination"] = str(report)
        extra["min_eigenvalue"] = f"{result.meta.min_eigenvalue:.17g}"
        echo(f"{cfg.mode}: {cfg.trajectories} trajectories, {report}")
        if cfg.dump_noise:
            _dump_noise(cfg, run_dir)

    elif cfg.mode == "lindblad":
        c, nu = cfg.kernel.terms[0]
        Gamma = 2.0 * c.real / nu.real
        res = lindblad_oracle(cfg.system, Gamma, cfg.dt, cfg.horizon)
        header = ["t"]
        cols = [res.times]
        for name, a in cfg.system.observables.items():
            header += [f"{name}_mean", f"{name}_stderr"]
            cols += [res.expectations(a), np.zeros_like(res.times)]
        _write_csv(run_dir / "observables.csv", header, cols)
        _write_rho(run_dir / "rho.csv", res.times, res.rho)
        echo(f"lindblad: relaxation rate {Gamma:.6g}, horizon {cfg.horizon}")

    elif cfg.mode == "sde-oracle":
        if not cfg.kernel.is_single_real:
            raise ConfigError(["sde-oracle requires an OU kernel"])
        path = sample_path(cfg.kernel, cfg.horizon, cfg.dt,
                           trajectory_seed(cfg.master_seed, 0))
        joint = propagate_joint_sde(cfg.system, cfg.kernel, path, cfg.order,
                                    truncation=Truncation(cfg.truncation))
        ks = list(range(min(cfg.order, 3) + 1))
        header = ["t"] + [f"identity_dev_k{k}" for k in ks]
        cols = [joint.times]
        for k in ks:
            dev = np.abs(joint.reconstructed(k) - joint.q_chain[:, k]).reshape(
                len(joint.times), -1
            ).max(axis=1)
            cols.append(dev)
        _write_csv(run_dir / "report.csv", header, cols)
        worst = {k: joint.identity_deviation(k) for k in ks}
        extra["identity_max_dev"] = " ".join(f"k{k}:{v:.3e}" for k, v in worst.items())
        echo("sde-oracle identity deviations: "
             + ", ".join(f"k={k}: {v:.3e}" for k, v in worst.items()))
        if cfg.dump_noise:
            _dump_noise(cfg, run_dir)

    elif cfg.mode == "hops-check":
        if not cfg.kernel.is_single_real:
            raise ConfigError(["hops-check requires an OU kernel"])
        path = sample_path(cfg.kernel, cfg.horizon, cfg.dt,
                           trajectory_seed(cfg.master_seed, 0))
        joint = propagate_joint_sde(cfg.system, cfg.kernel, path, cfg.order,
                                    truncation=Truncation(cfg.truncation))
        depth = min(cfg.hops_depth, cfg.order)
        states = hops_states(joint.q_chain, joint.psi, depth)
        direct = hops_states_direct(joint.q_chain, joint.psi, depth)
        q_sde = np.stack(
            [joint.reconstructed(k) for k in range(cfg.order + 1)], axis=1
        )
        states_sde = hops_states(q_sde, joint.psi, depth)
        header = ["t"]
        cols = [joint.times]
        for k in range(1, depth + 1):
            header += [f"recursion_vs_direct_k{k}", f"chain_vs_sde_route_k{k}"]
            cols.append(np.linalg.norm(states[:, k] - direct[:, k], axis=1))
            cols.append(np.linalg.norm(states[:, k] - states_sde[:, k], axis=1))
        _write_csv(run_dir / "report.csv", header, cols)
        dev_direct = float(np.linalg.norm(states - direct, axis=2).max())
        dev_sde = float(np.linalg.norm(states - states_sde, axis=2).max())
        extra["recursion_vs_direct"] = f"{dev_direct:.3e}"
        extra["chain_vs_sde_route"] = f"{dev_sde:.3e}"
        echo(f"hops-check: recursion-vs-direct {dev_direct:.3e}, "
             f"chain-vs-sde-route {dev_sde:.3e}")

    elif cfg.mode == "compare":
        assert cfg.compare is not None
        results = {}
        for name in cfg.compare:
            if name == "lindblad":
                c, nu = cfg.kernel.terms[0]
                Gamma = 2.0 * c.real / nu.real
                res = lindblad_oracle(cfg.system, Gamma, cfg.dt, cfg.horizon)
                results[name] = {
                    "times": res.times,
                    "obs": {n: (res.expectations(a), np.zeros_like(res.times))
                            for n, a in cfg.system.observables.items()},
                    "rho": res.rho,
                }
            else:
                res = _run_trajectory_ensemble(cfg, name)
                results[name] = {
                    "times": res.times, "obs": res.observables, "rho": res.rho,
                }
        a, b = cfg.compare
        ra, rb = results[a], results[b]
        header = ["t"]
        cols = [ra["times"]]
        worst = 0.0
        for name in cfg.system.observables:
            dev = np.abs(ra["obs"][name][0] - rb["obs"][name][0])
            header.append(f"{name}_absdev")
            cols.append(dev)
            err = np.hypot(ra["obs"][name][1], rb["obs"][name][1])
            header.append(f"{name}_stderr")
            cols.append(err)
            worst = max(worst, float(dev.max()))
        if cfg.trajectories == 1:
            # pure states: fidelity-based overlap deficit per time sample
            tr = np.einsum("tij,tji->t", ra["rho"], rb["rho"]).real
            header.append("overlap_deficit")
            cols.append(1.0 - np.sqrt(np.clip(tr, 0.0, None)))
        _write_csv(run_dir / "report.csv", header, cols)
        extra["compared"] = f"{a} vs {b}"
        extra["max_observable_dev"] = f"{worst:.17g}"
        echo(f"compare {a} vs {b}: max observable deviation {worst:.3e}")

    _write_meta(run_dir / "meta.txt", cfg, time.perf_counter() - t0, extra)
    return run_dir


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------

def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates = {}
    if args.mode is not None:
        updates["mode"] = args.mode
    if args.seed is not None:
        updates["master_seed"] = args.seed
    if args.trajectories is not None:
        updates["trajectories"] = args.trajectories
    if args.order is not None:
        updates["order"] = args.order
    if args.out_dir is not None:
        updates["out_dir"] = args.out_dir
    if args.dump_noise:
        updates["dump_noise"] = True
    if not updates:
        return cfg
    fields = {
        "system": cfg.system, "kernel": cfg.kernel, "mode": cfg.mode,
        "order": cfg.order, "truncation": cfg.truncation, "closure": cfg.closure,
        "closure_a": cfg.closure_a, "closure_jmax": cfg.closure_jmax,
        "dt": cfg.dt, "horizon": cfg.horizon, "trajectories": cfg.trajectories,
        "master_seed": cfg.master_seed, "workers": cfg.workers,
        "out_dir": cfg.out_dir, "compare": cfg.compare,
        "dump_noise": cfg.dump_noise, "hops_depth": cfg.hops_depth,
        "preset": cfg.preset, "preset_params": cfg.preset_params,
    }
    fields.update(updates)
    return RunConfig(**fields)


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="nmqsd",
        description="Non-Markovian quantum trajectory simulator",
    )
    parser.add_argument("--config", type=Path, help="run configuration file")
    parser.add_argument("--mode", choices=MODES, help="override the config mode")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--trajectories", type=int, help="override the ensemble size")
    parser.add_argument("--order", type=int, help="override the truncation order")
    parser.add_argument("--out-dir", dest="out_dir", help="override the output directory")
    parser.add_argument("--dump-noise", dest="dump_noise", action="store_true",
                        help="also write the first trajectory's noise samples")
    args = parser.parse_args(argv)

    try:
        if args.config is not None:
            cfg = parse_config(args.config.read_text())
        elif args.mode == "counts":
            # counts needs no physical configuration
            cfg = RunConfig(
                system=PRESETS["three_level"](),
                kernel=CorrelationKernel.ou(1.0, 1.0),
                mode="counts",
                preset="three_level",
            )
        else:
            parser.error("--config is required (except for --mode counts)")
        cfg = _apply_overrides(cfg, args)
        run(cfg)
    except ConfigError as exc:
        for line in exc.errors:
            print(f"config error: {line}", file=_sys.stderr)
        return 1
    except Exception as exc:  # engine failures exit nonzero, with the reason
        print(f"run failed: {exc}", file=_sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
