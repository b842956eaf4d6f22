"""
cli.py
Command-line surface: run, sweep, oracle-compare, export-mpo, inspect-kernel.

Pipeline per run:
    bath → kernel table → gates → uniform MPO (cached) → propagator → task

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
Outputs are written only after the task finished, so a failed run leaves no
partial files behind. Every output embeds the fully resolved configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import struct
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from src.bathkernel import (
    BcfModel,
    ExponentialSumBcf,
    ExpTerm,
    KernelTable,
    discretize_kernel,
    make_damped_mode_bcf,
    make_lattice_bcf,
    make_thermal_jc_bcf,
    ohmic_spectral_density,
    tabulated_spectral_density,
)
from src.config import CACHE_DIR, CODE_VERSION, LOG_LEVEL, WORKERS
from src.couplings import PRESETS, CouplingSet, analyze_couplings, build_layout
from src.errors import ConfigError, NumericalError
from src.evolve import (
    Boundaries,
    EffectivePropagator,
    SystemChannel,
    Trajectory,
    assemble_q,
    propagate,
    spectra,
    steady_state,
)
from src.ifcore import build_gates
from src.oracle import LindbladModel, LindbladOracle, VolterraOracle, lindblad_steady_state
from src.run_config import STATE_PRESETS, RunConfig, load_config, parse_matrix
from src.tempo import TruncationPolicy, UniformInfluenceMPO, contract_influence

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# LinAlgError subclasses ValueError, so it must be matched before any config branch
NUMERICAL_FAILURES = (NumericalError, np.linalg.LinAlgError)
CONFIG_FAILURES = (ConfigError, ValidationError)


# ── Builders ──────────────────────────────────────────────────────────────────

def build_bcf(cfg: RunConfig) -> BcfModel:
    bath = cfg.bath
    if bath.type == "exponential_sum":
        scale = cfg.frequency_unit ** 2
        return ExponentialSumBcf([ExpTerm(scale * parse_matrix(t.coeff), cfg.rate(t.omega), cfg.rate(t.gamma))
                                  for t in bath.terms])
    if bath.type == "damped_mode":
        return make_damped_mode_bcf(cfg.rate(bath.g), cfg.rate(bath.omega), cfg.rate(bath.gamma), bath.nbar)
    if bath.type == "ohmic":
        density = ohmic_spectral_density(bath.alpha_s, cfg.rate(bath.omega_c))
        return make_thermal_jc_bcf(density, cfg.time(bath.beta))
    if bath.type == "tabulated":
        density = tabulated_spectral_density([cfg.rate(w) for w in bath.grid], [cfg.rate(v) for v in bath.values])
        return make_thermal_jc_bcf(density, cfg.time(bath.beta))
    return make_lattice_bcf(bath.dim, cfg.rate(bath.j_hop), cfg.rate(bath.g), bath.emitters)


def bath_beta(cfg: RunConfig) -> float:
    if cfg.task.beta is not None:
        return cfg.time(cfg.task.beta)
    beta = getattr(cfg.bath, "beta", None)
    return cfg.time(beta) if beta is not None else np.inf


def build_hamiltonian(cfg: RunConfig, dim: int) -> np.ndarray:
    h = np.zeros((dim, dim), dtype=complex)
    for term in cfg.system.hamiltonian:
        op = parse_matrix(term.op)
        if op.shape != (dim, dim):
            raise ConfigError(f"Hamiltonian term has shape {op.shape}, expected ({dim}, {dim})")
        h += cfg.rate(term.coeff) * op
    return h


def build_couplings(cfg: RunConfig, bcf: BcfModel) -> CouplingSet:
    ops = [parse_matrix(op) for op in cfg.system.couplings]
    if len(ops) != bcf.num_channels:
        raise ConfigError(f"bath has {bcf.num_channels} channels but {len(ops)} coupling operators were given")
    return analyze_couplings(ops, merge_degenerate=cfg.system.merge_degenerate)


def build_policy(cfg: RunConfig) -> TruncationPolicy:
    n = cfg.numerics
    return TruncationPolicy(chi_max=n.chi_max, eps_rel=n.eps_rel, randomized=n.randomized,
                            sketch_oversample=n.sketch_oversample, sketch_power_iters=n.sketch_power_iters,
                            seed=n.seed)


def cache_key(kernel: KernelTable, cs: CouplingSet, policy: TruncationPolicy, cfg: RunConfig) -> str:
    h = hashlib.sha256()
    h.update(kernel.to_bytes())
    for vals, projs in zip(cs.eigenvalues, cs.projectors):
        h.update(np.ascontiguousarray(vals, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(projs, dtype="<c16").tobytes())
    h.update(json.dumps({"policy": policy.to_dict(), "corrections": cfg.numerics.trotter_corrections,
                         "boundary": cfg.numerics.boundary, "version": CODE_VERSION}, sort_keys=True).encode())
    return h.hexdigest()


def _write_atomic(path: Path, blob: bytes) -> None:
    """Write through a temporary file in the same directory, then rename over `path`."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


@dataclass
class Pipeline:
    config: RunConfig
    bcf: BcfModel
    kernel: KernelTable
    couplings: CouplingSet
    mpo: UniformInfluenceMPO
    propagator: EffectivePropagator
    system: SystemChannel
    boundaries: Boundaries
    cache_hit: bool = False


def build_pipeline(cfg: RunConfig, cache_dir: str | Path | None = CACHE_DIR) -> Pipeline:
    dt = cfg.time(cfg.numerics.dt)
    bcf = build_bcf(cfg)
    if cfg.numerics.n_c is not None:
        kernel = discretize_kernel(bcf, dt, n_c=cfg.numerics.n_c)
    else:
        kernel = discretize_kernel(bcf, dt, tol_mem=cfg.numerics.tol_mem)
    cs = build_couplings(cfg, bcf)
    policy = build_policy(cfg)

    mpo, hit = None, False
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{cache_key(kernel, cs, policy, cfg)}.utmp"
        if path.exists():
            try:
                mpo = UniformInfluenceMPO.from_bytes(path.read_bytes())
                hit = True
                logger.info(f"[cli] MPO cache hit {path.name[:12]}")
            except (ValueError, struct.error) as e:
                logger.warning(f"[cli] unreadable cache entry {path.name[:12]} ({e}), rebuilding")
    if mpo is None:
        gates = build_gates(kernel, build_layout(cs), augment_zero_index=True,
                            trotter_corrections=cfg.numerics.trotter_corrections)
        mpo = contract_influence(gates, policy, boundary=cfg.numerics.boundary, couplings=cs)
        if path is not None:
            _write_atomic(path, mpo.to_bytes())

    system = SystemChannel.from_hamiltonian(build_hamiltonian(cfg, cs.dim), dt)
    return Pipeline(config=cfg, bcf=bcf, kernel=kernel, couplings=cs, mpo=mpo,
                    propagator=assemble_q(mpo, cs), system=system, boundaries=Boundaries.from_mpo(mpo),
                    cache_hit=hit)


def _observables(cfg: RunConfig, dim: int) -> dict[str, np.ndarray]:
    out = {}
    for name, spec in cfg.task.named_observables().items():
        op = parse_matrix(spec)
        if op.shape != (dim, dim):
            raise ConfigError(f"observable {name} has shape {op.shape}, expected ({dim}, {dim})")
        out[name] = op
    return out


def _initial_state(cfg: RunConfig) -> np.ndarray:
    return parse_matrix(cfg.system.rho0, STATE_PRESETS)


def _n_double_steps(cfg: RunConfig) -> int:
    return max(1, int(round(cfg.time(cfg.task.t_end) / (2.0 * cfg.time(cfg.numerics.dt)))))


# ── Oracles ───────────────────────────────────────────────────────────────────

def build_oracle(cfg: RunConfig, pipe: Pipeline, observable: np.ndarray):
    kind = cfg.task.oracle.kind if cfg.task.oracle else "lindblad"
    if kind == "lindblad":
        bath = cfg.bath
        if bath.type != "damped_mode":
            raise ConfigError("the Lindblad oracle needs a damped_mode bath")
        model = LindbladModel(omega_drive=0.0, g=cfg.rate(bath.g), omega=cfg.rate(bath.omega),
                              gamma=cfg.rate(bath.gamma), nbar=bath.nbar, h_spin=pipe.system.h_sys)
        return LindbladOracle(model, observable, rho_spin0=_initial_state(cfg))
    h = pipe.system.h_sys
    if h.shape != (2, 2) or abs(h[0, 1]) > 0:
        raise ConfigError("the Volterra oracle needs an undriven two-level emitter (diagonal H_sys)")
    return VolterraOracle(pipe.bcf, delta=float((h[0, 0] - h[1, 1]).real))


def compare_with_oracle(cfg: RunConfig, pipe: Pipeline, traj: Trajectory) -> dict:
    kind = cfg.task.oracle.kind if cfg.task.oracle else "lindblad"
    if kind == "volterra":
        ours = 0.5 * (1.0 + traj.expectation(PRESETS["sigma_z"]))
        oracle = build_oracle(cfg, pipe, PRESETS["sigma_z"])
        name = "occupation"
    else:
        named = cfg.task.named_observables()
        if not named:
            raise ConfigError("the Lindblad comparison needs at least one observable")
        name, spec = next(iter(named.items()))
        ours = traj.observables[name]
        oracle = build_oracle(cfg, pipe, parse_matrix(spec))
    step = traj.times[1] - traj.times[0] if traj.times.size > 1 else 2.0 * pipe.system.dt
    dt_fine = cfg.task.oracle.dt_fine if cfg.task.oracle else None
    ratio = max(1, int(round(step / cfg.time(dt_fine)))) if dt_fine else 1
    times, ref = oracle.expectation(step / ratio, float(traj.times[-1]))
    times, ref = times[::ratio], ref[::ratio]
    n = min(times.size, ours.size)
    diff = np.abs(ours[:n] - ref[:n])
    return {"oracle": oracle.name, "observable": name, "max_abs_diff": float(diff.max()),
            "times": times[:n].tolist(), "reference": [float(v.real) for v in ref[:n]]}


# ── Tasks ─────────────────────────────────────────────────────────────────────

def _steady_error(cfg: RunConfig, pipe: Pipeline, rho: np.ndarray) -> float | None:
    if cfg.bath.type != "damped_mode":
        return None
    bath = cfg.bath
    model = LindbladModel(omega_drive=0.0, g=cfg.rate(bath.g), omega=cfg.rate(bath.omega),
                          gamma=cfg.rate(bath.gamma), nbar=bath.nbar, h_spin=pipe.system.h_sys)
    return float(np.linalg.norm(rho - lindblad_steady_state(model), 2))


def execute(cfg: RunConfig, cache_dir: str | Path | None = CACHE_DIR) -> tuple[dict, dict]:
    """Run the configured task; returns (summary, artifacts) without touching the output directory."""
    pipe = build_pipeline(cfg, cache_dir)
    kind = cfg.task.kind
    summary = {
        "task": kind,
        "chi": pipe.mpo.chi,
        "n_c": pipe.kernel.n_c,
        "dt": pipe.system.dt,
        "discarded_weight": pipe.mpo.meta.get("discarded_weight"),
        "mpo_cache_hit": pipe.cache_hit,
    }
    artifacts: dict = {}
    if kind in ("propagate", "oracle_compare"):
        traj = propagate(_initial_state(cfg), pipe.propagator, pipe.system, _n_double_steps(cfg),
                         pipe.boundaries, observables=_observables(cfg, pipe.couplings.dim))
        summary["max_trace_deviation"] = float(traj.diagnostics["trace_deviation"].max())
        summary["min_eigenvalue"] = float(traj.diagnostics["min_eigenvalue"].min())
        artifacts["trajectory"] = traj
        if kind == "oracle_compare":
            report = compare_with_oracle(cfg, pipe, traj)
            summary["metric"] = report["max_abs_diff"]
            artifacts["oracle"] = report
    elif kind == "steady_state":
        ss = steady_state(pipe.propagator, pipe.system, pipe.boundaries)
        summary["iterations"] = ss.iterations
        summary["rho_ss"] = [[[v.real, v.imag] for v in row] for row in ss.rho]
        summary["metric"] = _steady_error(cfg, pipe, ss.rho)
    else:
        omega = np.linspace(cfg.rate(cfg.task.omega_min), cfg.rate(cfg.task.omega_max), cfg.task.omega_points)
        spec = spectra(pipe.propagator, pipe.system, pipe.boundaries, omega,
                       op=parse_matrix(cfg.task.spectrum_op), beta=bath_beta(cfg))
        finite = spec.fdt_residual[np.isfinite(spec.fdt_residual)]
        summary["max_fdt_residual"] = float(np.max(np.abs(finite))) if finite.size else None
        artifacts["spectra"] = spec
    return summary, artifacts


def write_outputs(cfg: RunConfig, out_dir: Path, summary: dict, artifacts: dict, deterministic: bool) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved()
    comment = "config: " + json.dumps(resolved, sort_keys=True)
    prefix = cfg.output.prefix
    written = []
    for key in ("trajectory", "spectra"):
        item = artifacts.get(key)
        if item is None:
            continue
        item.metadata["config"] = resolved
        if "csv" in cfg.output.formats:
            written.append(out_dir / f"{prefix}_{key}.csv")
            item.to_csv(written[-1], comment=comment)
        if "json" in cfg.output.formats:
            written.append(out_dir / f"{prefix}_{key}.json")
            item.to_json(written[-1])
    if "oracle" in artifacts:
        written.append(out_dir / f"{prefix}_oracle.json")
        written[-1].write_text(json.dumps({"config": resolved, **artifacts["oracle"]}, indent=2))
    doc = {"code_version": CODE_VERSION, "config": resolved, "summary": summary}
    if not deterministic:
        doc["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    written.append(out_dir / f"{prefix}_summary.json")
    written[-1].write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return written


def run(config_path: str | Path, out_dir: str | Path | None = None, *, seed: int | None = None,
        deterministic: bool = False, cache_dir: str | Path | None = CACHE_DIR) -> dict:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.with_updates("numerics", seed=seed)
    summary, artifacts = execute(cfg, cache_dir)
    written = write_outputs(cfg, Path(out_dir or cfg.output.dir), summary, artifacts, deterministic)
    logger.info(f"[cli] run finished, wrote {len(written)} files")
    return summary


# ── Sweeps ────────────────────────────────────────────────────────────────────

def _sweep_point(cfg: RunConfig, axis: str, value: float, cache_dir) -> dict:
    if axis == "dt":
        point = cfg.with_updates("numerics", dt=float(value))
    elif axis == "chi":
        point = cfg.with_updates("numerics", chi_max=int(value))
    else:
        point = cfg.with_updates("numerics", n_c=int(value), tol_mem=None)
    try:
        summary, _ = execute(point, cache_dir)
    except (*NUMERICAL_FAILURES, *CONFIG_FAILURES) as e:
        failure = "numerical" if isinstance(e, NUMERICAL_FAILURES) else "config"
        logger.warning(f"[cli] sweep point {axis}={value} failed ({failure}): {e}")
        return {"value": value, "status": "error", "failure": failure, "error": f"{type(e).__name__}: {e}"}
    return {"value": value, "status": "ok", "metric": summary.get("metric"), "chi": summary["chi"],
            "discarded_weight": summary["discarded_weight"]}


def fit_slope(values, metrics) -> float | None:
    """Slope of log(metric) against log(value); None with fewer than two usable points."""
    pairs = [(v, m) for v, m in zip(values, metrics) if m is not None and m > 0 and v > 0]
    if len(pairs) < 2:
        return None
    x, y = np.log([p[0] for p in pairs]), np.log([p[1] for p in pairs])
    return float(np.polyfit(x, y, 1)[0])


def is_monotone(values, metrics, decreasing: bool) -> bool | None:
    pairs = sorted((v, m) for v, m in zip(values, metrics) if m is not None)
    if len(pairs) < 2:
        return None
    ms = np.array([m for _, m in pairs])
    steps = np.diff(ms)
    return bool(np.all(steps <= 0) if decreasing else np.all(steps >= 0))


def sweep(config_path: str | Path, axis: str | None = None, values=None, *, out_dir=None,
          workers: int = WORKERS, seed: int | None = None, deterministic: bool = False,
          cache_dir: str | Path | None = CACHE_DIR) -> dict:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.with_updates("numerics", seed=seed)
    if axis is None or values is None:
        if cfg.sweep is None:
            raise ConfigError("no sweep axis given on the command line or in the config")
        axis, values = cfg.sweep.axis, list(cfg.sweep.values)
    if axis not in ("dt", "chi", "n_c"):
        raise ConfigError(f"unknown sweep axis {axis!r}")
    values = [float(v) for v in values]
    logger.info(f"[cli] sweep {axis} over {len(values)} points with {workers} workers")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        points = list(pool.map(lambda v: _sweep_point(cfg, axis, v, cache_dir), values))
    ok = [p for p in points if p["status"] == "ok"]
    metrics = [p["metric"] for p in ok]
    xs = [p["value"] for p in ok]
    report = {
        "code_version": CODE_VERSION,
        "config": cfg.resolved(),
        "axis": axis,
        "points": points,
        "slope": fit_slope(xs, metrics),
        # error shrinks with χ and N_c, grows with δt
        "monotone": is_monotone(xs, metrics, decreasing=axis != "dt"),
        "failed": len(points) - len(ok),
    }
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{cfg.output.prefix}_sweep_{axis}.json").write_text(json.dumps(report, indent=2, default=str))
    with open(out / f"{cfg.output.prefix}_sweep_{axis}.csv", "w") as fh:
        fh.write("# config: " + json.dumps(cfg.resolved(), sort_keys=True) + "\n")
        fh.write(f"{axis},status,metric,chi,discarded_weight\n")
        for p in points:
            fh.write(f"{p['value']!r},{p['status']},{p.get('metric')!r},{p.get('chi')!r},"
                     f"{p.get('discarded_weight')!r}\n")
    return report


# ── Other commands ────────────────────────────────────────────────────────────

def oracle_compare(config_path: str | Path, out_dir=None, **kwargs) -> dict:
    cfg = load_config(config_path)
    if cfg.task.kind != "oracle_compare":
        raise ConfigError("oracle-compare needs task.kind = 'oracle_compare'")
    return run(config_path, out_dir, **kwargs)


def export_mpo(config_path: str | Path, out_dir=None, cache_dir=CACHE_DIR) -> Path:
    cfg = load_config(config_path)
    pipe = build_pipeline(cfg, cache_dir)
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{cfg.output.prefix}.utmp"
    path.write_bytes(pipe.mpo.to_bytes())
    summary = {"config": cfg.resolved(), **json.loads(pipe.mpo.to_json())}
    (out / f"{cfg.output.prefix}_mpo.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return path


def inspect_kernel(config_path: str | Path) -> dict:
    cfg = load_config(config_path)
    bcf = build_bcf(cfg)
    dt = cfg.time(cfg.numerics.dt)
    if cfg.numerics.n_c is not None:
        kernel = discretize_kernel(bcf, dt, n_c=cfg.numerics.n_c)
    else:
        kernel = discretize_kernel(bcf, dt, tol_mem=cfg.numerics.tol_mem)
    norms = np.max(np.abs(kernel.eta), axis=(1, 2))
    sample = sorted({1, 2, max(1, kernel.n_c // 2), kernel.n_c})
    return {
        "representation": kernel.meta.get("representation"),
        "dt": kernel.dt,
        "n_c": kernel.n_c,
        "num_channels": kernel.num_channels,
        "eta0_max": float(np.max(np.abs(kernel.eta0))),
        "eta0_tilde_max": float(np.max(np.abs(kernel.eta0_tilde))),
        "eta_k_max": {str(k): float(norms[k - 1]) for k in sample},
    }


# ── Entry point ───────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unitempo", description="Uniform influence-functional simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, outputs=True):
        p.add_argument("--config", required=True, help="TOML or JSON run configuration")
        if outputs:
            p.add_argument("--out-dir", default=None, help="output directory (default: output.dir)")
            p.add_argument("--seed", type=int, default=None, help="override numerics.seed")
            p.add_argument("--deterministic", action="store_true", help="no timestamps, sequential sweeps")
            p.add_argument("--no-cache", action="store_true", help="do not read or write the MPO cache")

    common(sub.add_parser("run", help="execute the configured task"))
    p = sub.add_parser("sweep", help="convergence sweep over dt, chi or n_c")
    common(p)
    p.add_argument("--axis", choices=["dt", "chi", "n_c"], default=None)
    p.add_argument("--values", type=float, nargs="+", default=None)
    p.add_argument("--workers", type=int, default=WORKERS)
    common(sub.add_parser("oracle-compare", help="compare a trajectory with its reference oracle"))
    p = sub.add_parser("export-mpo", help="contract and export the uniform MPO")
    common(p, outputs=False)
    p.add_argument("--out-dir", default=None)
    common(sub.add_parser("inspect-kernel", help="print the discretized memory kernel summary"), outputs=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "inspect-kernel":
            print(json.dumps(inspect_kernel(args.config), indent=2), flush=True)
        elif args.command == "export-mpo":
            path = export_mpo(args.config, args.out_dir)
            print(f"[cli] MPO written to {path}", flush=True)
        else:
            cache = None if args.no_cache else CACHE_DIR
            kwargs = {"seed": args.seed, "deterministic": args.deterministic, "cache_dir": cache}
            if args.command == "run":
                result = run(args.config, args.out_dir, **kwargs)
            elif args.command == "oracle-compare":
                result = oracle_compare(args.config, args.out_dir, **kwargs)
            else:
                workers = 1 if args.deterministic else args.workers
                result = sweep(args.config, args.axis, args.values, out_dir=args.out_dir, workers=workers, **kwargs)
            print(json.dumps(result, indent=2, default=str), flush=True)
    except NUMERICAL_FAILURES as e:
        print(f"[cli] numerical failure in {type(e).__module__}.{type(e).__name__}: {e}",
              file=sys.stderr, flush=True)
        return EXIT_NUMERICAL
    except CONFIG_FAILURES as e:
        print(f"[cli] configuration error: {e}", file=sys.stderr, flush=True)
        return EXIT_CONFIG
    return EXIT_OK
