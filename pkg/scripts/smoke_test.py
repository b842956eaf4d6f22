#!/usr/bin/env python3
"""
smoke_test.py
Quick sanity check of the whole pipeline: kernel → influence MPO → propagation → stationary state.

Usage:
  python scripts/smoke_test.py                 # built-in closed-system, MPO and lossy-cavity checks
  python scripts/smoke_test.py --config run.toml  # also runs a config through the CLI

Nothing is cached and outputs go to a temporary directory.
"""
from __future__ import annotations
import argparse
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src import cli  # noqa: E402
from src.bathkernel import ExponentialSumBcf, ExpTerm, discretize_kernel, make_damped_mode_bcf  # noqa: E402
from src.couplings import SIGMA_X, SIGMA_Y, SIGMA_Z, analyze_couplings, build_layout  # noqa: E402
from src.evolve import Boundaries, SystemChannel, assemble_q, propagate, steady_state  # noqa: E402
from src.ifcore import build_gates, influence_entries  # noqa: E402
from src.oracle import LindbladModel, lindblad_steady_state  # noqa: E402
from src.tempo import TruncationPolicy, contract_influence, mpo_evaluate  # noqa: E402

UP = np.diag([1.0, 0.0]).astype(complex)


def _system(bcf, ops, h_sys, dt, n_c, policy):
    kernel = discretize_kernel(bcf, dt, n_c=n_c)
    cs = analyze_couplings(ops)
    gates = build_gates(kernel, build_layout(cs))
    mpo = contract_influence(gates, policy, couplings=cs)
    return kernel, cs, mpo, assemble_q(mpo, cs), SystemChannel.from_hamiltonian(h_sys, dt), Boundaries.from_mpo(mpo)


def run_tests(config: str | None) -> bool:
    results = []
    all_pass = True

    def check(name: str, passed: bool, detail: str = ""):
        nonlocal all_pass
        icon = "✅" if passed else "❌"
        print(f"  {icon}  {name}", end="")
        if detail:
            print(f"  →  {detail}", end="")
        print()
        results.append(passed)
        if not passed:
            all_pass = False

    print("\n🔍  Smoke testing the influence pipeline\n")
    exact = TruncationPolicy(chi_max=4096, eps_rel=1e-13)

    # 1. Closed system: no bath, plain Rabi oscillation
    zero = ExponentialSumBcf([ExpTerm(np.zeros((1, 1)), 0.0, 1.0)])
    *_, mpo, prop, u, bnd = _system(zero, [SIGMA_Z], 0.5 * SIGMA_X, 0.05, 2, exact)
    traj = propagate(UP, prop, u, 20, bnd, observables={"z": SIGMA_Z})
    err = float(np.max(np.abs(traj.observables["z"] - np.cos(traj.times))))
    check("zero bath gives χ = 1 and cos(Ωt)", mpo.chi == 1 and err < 1e-10, f"χ={mpo.chi} err={err:.1e}")

    # 2. MPO vs direct influence on random sequences
    rng = np.random.default_rng(0)
    bcf = make_damped_mode_bcf(0.6, 1.0, 0.7, 0.0)
    kernel, cs, mpo, *_ = _system(bcf, [SIGMA_X, SIGMA_Y], np.zeros((2, 2)), 0.1, 2, exact)
    layout = build_layout(cs)
    seqs = rng.integers(0, layout.size, size=(8, 4))
    direct = influence_entries(kernel, layout, seqs)
    ours = np.array([mpo_evaluate(mpo, s) for s in seqs])
    rel = float(np.max(np.abs(ours - direct) / np.abs(direct)))
    check("uniform MPO reproduces the influence functional", rel < 1e-8, f"χ={mpo.chi} rel={rel:.1e}")

    # 3. Lossy cavity: steady state against the master equation
    t0 = time.time()
    bcf = make_damped_mode_bcf(0.5, 0.0, 1.0, 0.0)
    *_, mpo, prop, u, bnd = _system(bcf, [SIGMA_X, SIGMA_Y], 0.5 * SIGMA_X, 0.05, 128,
                                    TruncationPolicy(chi_max=64, eps_rel=1e-10))
    ss = steady_state(prop, u, bnd)
    ref = lindblad_steady_state(LindbladModel(omega_drive=1.0, g=0.5, omega=0.0, gamma=1.0, nbar=0.0))
    dist = float(np.linalg.norm(ss.rho - ref, 2))
    elapsed = round(time.time() - t0, 1)
    check("steady state close to the Lindblad reference", dist < 1e-2,
          f"{elapsed}s  χ={mpo.chi} iterations={ss.iterations} ‖Δρ‖={dist:.1e}")

    # 4. Optional config through the CLI
    if config:
        with tempfile.TemporaryDirectory() as out:
            code = cli.main(["run", "--config", config, "--out-dir", out, "--no-cache", "--deterministic"])
            written = sorted(p.name for p in Path(out).iterdir()) if code == cli.EXIT_OK else []
        check(f"cli run {config}", code == cli.EXIT_OK, f"exit={code} files={written}")

    print(f"\n{'✅  All tests passed' if all_pass else '❌  Some tests failed'}  ({sum(results)}/{len(results)})\n")
    return all_pass


def main():
    parser = argparse.ArgumentParser(description="unitempo pipeline smoke test")
    parser.add_argument("--config", default=None, help="Optional TOML/JSON run config to push through the CLI")
    args = parser.parse_args()
    success = run_tests(args.config)
    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
