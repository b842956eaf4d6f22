from __future__ import annotations

import numpy as np
import pytest

from src.bathkernel import ExponentialSumBcf, ExpTerm, discretize_kernel
from src.couplings import analyze_couplings, build_layout
from src.evolve import Boundaries, SystemChannel, assemble_q
from src.ifcore import build_gates
from src.tempo import TruncationPolicy, contract_influence

EXACT = TruncationPolicy(chi_max=4096, eps_rel=1e-13)


def single_exponential(coeff: float = 0.2, omega: float = 0.0, gamma: float = 1.0) -> ExponentialSumBcf:
    return ExponentialSumBcf([ExpTerm(np.array([[coeff]]), omega, gamma)])


def build_system(bcf, ops, h_sys, dt, n_c, *, policy=EXACT, merge_degenerate=True,
                 trotter_corrections=True, boundary="product"):
    """Kernel → MPO → propagator, returned as (propagator, system channel, boundaries, mpo, kernel, couplings)."""
    kernel = discretize_kernel(bcf, dt, n_c=n_c)
    cs = analyze_couplings(ops, merge_degenerate=merge_degenerate)
    gates = build_gates(kernel, build_layout(cs), trotter_corrections=trotter_corrections)
    mpo = contract_influence(gates, policy, boundary=boundary, couplings=cs)
    return (assemble_q(mpo, cs), SystemChannel.from_hamiltonian(h_sys, dt), Boundaries.from_mpo(mpo),
            mpo, kernel, cs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
