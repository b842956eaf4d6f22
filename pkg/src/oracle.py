"""
oracle.py
Independent reference solvers for certifying the influence-functional pipeline.

- lindblad_reference          full spin + damped mode master equation (Fock space)
- volterra_single_excitation  amplitude equation of one emitter in the single-excitation sector
- displacement_brute_force    exact Trotter sequence of a finite mode set via coherent-state labels

All three are plain functions; LindbladOracle / VolterraOracle wrap the first
two behind one interface so comparisons can iterate over them uniformly.
"""
from __future__ import annotations

import itertools
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.optimize import nnls
from scipy.sparse.linalg import expm_multiply, spsolve

from src.bathkernel import BcfModel, ExponentialSumBcf, ExpTerm, _phi1, _phi2
from src.config import FOCK_MAX_DIM, FOCK_POPULATION_TOL, MODE_FIT_TOL, VOLTERRA_TOL
from src.couplings import SIGMA_MINUS, SIGMA_PLUS, SIGMA_X, CouplingSet, build_layout
from src.errors import ConfigError, NumericalError
from src.evolve import Trajectory, check_state

logger = logging.getLogger(__name__)

MAX_ORACLE_STEPS = 4
MAX_MODES = 6


class FockTruncationError(NumericalError):
    def __init__(self, n_max: int, population: float):
        super().__init__(f"Fock space of dimension {n_max} too small (top populations {population:.3e})")
        self.n_max = n_max
        self.population = population


class VolterraConvergenceError(NumericalError):
    def __init__(self, disagreement: float):
        super().__init__(f"Volterra step refinement disagrees by {disagreement:.3e}")
        self.disagreement = disagreement


class ModeFitError(NumericalError):
    def __init__(self, residual: float):
        super().__init__(f"finite mode set misses the bath correlation by {residual:.3e}")
        self.residual = residual


# ── Full Lindblad model ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class LindbladModel:
    """Spin + one damped, pumped mode; h_spin defaults to Ω σ_x / 2."""

    omega_drive: float
    g: float
    omega: float
    gamma: float
    nbar: float
    n_max: int = 16
    h_spin: np.ndarray | None = None

    def __post_init__(self):
        if self.gamma < 0 or self.nbar < 0:
            raise ConfigError("gamma and nbar must be ≥ 0")
        if self.n_max < 2:
            raise ConfigError(f"n_max must be ≥ 2, got {self.n_max}")

    def spin_hamiltonian(self) -> np.ndarray:
        if self.h_spin is not None:
            return np.asarray(self.h_spin, dtype=complex)
        return 0.5 * self.omega_drive * SIGMA_X

    def with_fock(self, n_max: int) -> "LindbladModel":
        return LindbladModel(self.omega_drive, self.g, self.omega, self.gamma, self.nbar, n_max, self.h_spin)

    def operators(self) -> tuple[np.ndarray, list[np.ndarray]]:
        """Full Hamiltonian and jump operators on spin ⊗ mode."""
        n = self.n_max
        a = np.diag(np.sqrt(np.arange(1, n)), 1).astype(complex)
        eye_s, eye_m = np.eye(2), np.eye(n)
        h = (np.kron(self.spin_hamiltonian(), eye_m)
             + self.g * (np.kron(SIGMA_MINUS, a.conj().T) + np.kron(SIGMA_PLUS, a))
             + self.omega * np.kron(eye_s, a.conj().T @ a))
        jumps = []
        if self.gamma > 0:
            jumps.append(np.sqrt(self.gamma * (1.0 + self.nbar)) * np.kron(eye_s, a))
            if self.nbar > 0:
                jumps.append(np.sqrt(self.gamma * self.nbar) * np.kron(eye_s, a.conj().T))
        return h, jumps

    def generator(self) -> sp.csr_matrix:
        """Row-major vec generator with D[L]ρ = 2LρL† − {L†L, ρ}."""
        h, jumps = self.operators()
        dim = h.shape[0]
        eye = sp.identity(dim, format="csr", dtype=complex)
        hs = sp.csr_matrix(h)
        gen = -1j * (sp.kron(hs, eye) - sp.kron(eye, hs.T))
        for jump in jumps:
            js = sp.csr_matrix(jump)
            ldl = js.conj().T @ js
            gen = gen + 2.0 * sp.kron(js, js.conj()) - sp.kron(ldl, eye) - sp.kron(eye, ldl.T)
        return sp.csr_matrix(gen)

    def thermal_mode(self) -> np.ndarray:
        k = np.arange(self.n_max)
        pops = (self.nbar / (1.0 + self.nbar)) ** k / (1.0 + self.nbar)
        return np.diag(pops / pops.sum()).astype(complex)


def _reduce(states: np.ndarray, n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Spin reduced states and mode populations of row-major vectorized spin⊗mode states."""
    full = states.reshape(-1, 2, n_max, 2, n_max)
    spin = np.einsum("tikjk->tij", full)
    pops = np.einsum("tikik->tk", full).real
    return spin, pops


def _check_fock(pops: np.ndarray) -> float:
    return float(np.max(pops[..., -2:]))


def lindblad_reference(model: LindbladModel, dt_fine: float, t_end: float, *, rho_spin0=None,
                       observables: dict | None = None, auto_expand: bool = True) -> Trajectory:
    """Spin trajectory sampled every dt_fine up to t_end; the mode starts thermal."""
    rho_spin0 = check_state(rho_spin0 if rho_spin0 is not None else np.diag([1.0, 0.0]))
    n_out = int(round(t_end / dt_fine))
    times = dt_fine * np.arange(n_out + 1)
    current = model
    while True:
        rho0 = np.kron(rho_spin0, current.thermal_mode())
        vecs = expm_multiply(current.generator(), rho0.ravel(), start=0.0, stop=times[-1],
                             num=n_out + 1, endpoint=True)
        spin, pops = _reduce(np.asarray(vecs), current.n_max)
        top = _check_fock(pops)
        if top < FOCK_POPULATION_TOL:
            break
        if not auto_expand or 2 * current.n_max > FOCK_MAX_DIM:
            raise FockTruncationError(current.n_max, top)
        logger.info(f"[oracle] Fock dimension {current.n_max} too small ({top:.2e}), doubling")
        current = current.with_fock(2 * current.n_max)
    observables = dict(observables or {})
    return Trajectory(
        times=times,
        states=spin,
        observables={name: np.einsum("ab,nba->n", np.asarray(op, dtype=complex), spin)
                     for name, op in observables.items()},
        diagnostics={"fock_top_population": np.max(pops[:, -2:], axis=1)},
        metadata={"oracle": "lindblad", "n_max": current.n_max, "g": model.g, "omega": model.omega,
                  "gamma": model.gamma, "nbar": model.nbar, "omega_drive": model.omega_drive},
    )


def _full_steady_state(model: LindbladModel) -> tuple[LindbladModel, np.ndarray]:
    current = model
    while True:
        gen = current.generator().tolil()
        dim = current.n_max * 2
        gen[0, :] = np.eye(dim, dtype=complex).ravel()
        rhs = np.zeros(dim * dim, dtype=complex)
        rhs[0] = 1.0
        vec = spsolve(sp.csr_matrix(gen), rhs)
        _, pops = _reduce(vec[None, :], current.n_max)
        top = _check_fock(pops[0])
        if top < FOCK_POPULATION_TOL:
            rho = vec.reshape(dim, dim)
            return current, 0.5 * (rho + rho.conj().T)
        if 2 * current.n_max > FOCK_MAX_DIM:
            raise FockTruncationError(current.n_max, top)
        current = current.with_fock(2 * current.n_max)


def lindblad_steady_state(model: LindbladModel) -> np.ndarray:
    current, rho = _full_steady_state(model)
    spin, _ = _reduce(rho.ravel()[None, :], current.n_max)
    return spin[0]


def lindblad_correlator(model: LindbladModel, a, b, dt: float, n_points: int) -> np.ndarray:
    """⟨A(t)B(0)⟩ in the stationary state by quantum regression, t = 0, dt, …"""
    current, rho = _full_steady_state(model)
    eye_m = np.eye(current.n_max)
    a_full = np.kron(np.asarray(a, dtype=complex), eye_m)
    b_full = np.kron(np.asarray(b, dtype=complex), eye_m)
    start = (b_full @ rho).ravel()
    vecs = expm_multiply(current.generator(), start, start=0.0, stop=dt * (n_points - 1),
                         num=n_points, endpoint=True)
    dim = a_full.shape[0]
    return np.einsum("ab,tba->t", a_full, np.asarray(vecs).reshape(n_points, dim, dim))


# ── Single-excitation Volterra solver ─────────────────────────────────────────

class VolterraResult(NamedTuple):
    times: np.ndarray
    amplitude: np.ndarray
    occupation: np.ndarray
    disagreement: float


def single_excitation_kernel(bcf: BcfModel, t: np.ndarray) -> np.ndarray:
    """K(t) = 4 α¹¹(t) for a zero-temperature (σ_x, σ_y) emitter bath."""
    if bcf.num_channels != 2:
        raise ConfigError(f"single-excitation kernel needs a two-channel (σ_x, σ_y) bath, got L={bcf.num_channels}")
    alpha = bcf(np.asarray(t, dtype=float))
    plus = 4.0 * alpha[..., 0, 0]
    minus = 4.0j * alpha[..., 0, 1]
    scale = max(float(np.max(np.abs(plus))), 1e-300)
    if np.max(np.abs(plus - minus)) > 1e-10 * scale:
        raise ConfigError("single-excitation solver needs a zero-temperature bath (α₊ = α₋)")
    return plus


def _trapezoid_volterra(kernel: np.ndarray, delta: float, h: float, n_steps: int) -> np.ndarray:
    """ċ = −iΔc − ∫₀^t K(t−s)c(s)ds, c(0) = 1; implicit trapezoid in time and memory."""
    c = np.zeros(n_steps + 1, dtype=complex)
    c[0] = 1.0
    deriv = -1j * delta
    denom = 1.0 + 0.5 * h * (1j * delta + 0.5 * h * kernel[0])
    memory = 0.0
    for n in range(n_steps):
        f_n = deriv * c[n] - memory
        history = 0.5 * kernel[n + 1] * c[0] + np.dot(kernel[n:0:-1], c[1:n + 1])
        c[n + 1] = (c[n] + 0.5 * h * f_n - 0.5 * h * h * history) / denom
        memory = h * (history + 0.5 * kernel[0] * c[n + 1])
    return c


def volterra_single_excitation(bcf: BcfModel, delta: float, t_end: float, dt: float, *,
                               tol: float = VOLTERRA_TOL) -> VolterraResult:
    """Excited-state occupation of an undriven emitter, sampled every dt."""
    n_out = int(round(t_end / dt))
    solutions = []
    for refine in (4, 8, 16):
        h = dt / refine
        n_steps = n_out * refine
        kernel = single_excitation_kernel(bcf, h * np.arange(n_steps + 1))
        solutions.append(_trapezoid_volterra(kernel, delta, h, n_steps)[::refine])
    coarse = (4.0 * solutions[1] - solutions[0]) / 3.0
    fine = (4.0 * solutions[2] - solutions[1]) / 3.0
    disagreement = float(np.max(np.abs(np.abs(fine) ** 2 - np.abs(coarse) ** 2)))
    if disagreement > tol:
        raise VolterraConvergenceError(disagreement)
    logger.info(f"[oracle] Volterra solved to t={t_end:g} (refinement disagreement {disagreement:.2e})")
    return VolterraResult(times=dt * np.arange(n_out + 1), amplitude=fine,
                          occupation=np.abs(fine) ** 2, disagreement=disagreement)


# ── Finite mode sets and the displacement brute force ─────────────────────────

@dataclass(frozen=True)
class ModeSet:
    """α^{lo}(t) ≈ Σ_λ g^l_λ g^{o*}_λ e^{−iω_λ t}."""

    frequencies: np.ndarray     # (M,)
    couplings: np.ndarray       # (M, L)
    fit_error: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def num_modes(self) -> int:
        return self.frequencies.size

    def correlation(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        phases = np.exp(-1j * np.outer(t, self.frequencies))
        return np.einsum("tm,ml,mo->tlo", phases, self.couplings, self.couplings.conj())

    def to_bcf(self) -> ExponentialSumBcf:
        return ExponentialSumBcf([ExpTerm(np.outer(g, g.conj()), float(w), 0.0)
                                  for w, g in zip(self.frequencies, self.couplings)])

    def influence_error_bound(self, n_steps: int, dt: float) -> float:
        """Scale of the log-influence error over n_steps from the sampled fit residual; zero for exact modes."""
        return (n_steps * dt) ** 2 * self.fit_error


def _exact_modes(bcf: ExponentialSumBcf) -> ModeSet:
    freqs, gs = [], []
    for term in bcf.terms:
        vals, vecs = np.linalg.eigh(0.5 * (term.coeff + term.coeff.conj().T))
        for val, vec in zip(vals, vecs.T):
            if val > 1e-14 * max(1.0, float(np.max(np.abs(vals)))):
                freqs.append(term.omega)
                gs.append(np.sqrt(val) * vec)
    if not freqs:
        return ModeSet(frequencies=np.zeros(0), couplings=np.zeros((0, bcf.num_channels), dtype=complex))
    return ModeSet(frequencies=np.array(freqs), couplings=np.array(gs), meta={"method": "exact"})


def _fit_modes(bcf: BcfModel, window: float, n_candidates: int, tol: float) -> ModeSet:
    if bcf.num_channels != 1:
        raise ConfigError("mode fitting supports single-channel baths; give undamped exponential sums otherwise")
    t = np.linspace(0.0, window, 200)
    target = bcf(t)[:, 0, 0]
    span = 20.0 / max(window, 1e-12)
    candidates = np.linspace(-span, span, n_candidates)
    basis = np.exp(-1j * np.outer(t, candidates))
    design = np.vstack([basis.real, basis.imag])
    rhs = np.concatenate([target.real, target.imag])
    weights, _ = nnls(design, rhs)
    keep = np.argsort(weights)[::-1][:MAX_MODES]
    keep = keep[weights[keep] > 0]
    sub, _ = nnls(design[:, keep], rhs)
    approx = basis[:, keep] @ sub
    residual = float(np.max(np.abs(approx - target)))
    if residual > tol:
        raise ModeFitError(residual)
    return ModeSet(frequencies=candidates[keep], couplings=np.sqrt(sub)[:, None].astype(complex),
                   fit_error=residual, meta={"method": "nnls"})


def mode_set_from_bcf(bcf: BcfModel, window: float, *, tol: float = MODE_FIT_TOL,
                      n_candidates: int = 401) -> ModeSet:
    """Finite modes reproducing α on [0, window]: exact for undamped exponential sums, NNLS fit otherwise."""
    if isinstance(bcf, ExponentialSumBcf) and all(term.gamma == 0.0 for term in bcf.terms):
        modes = _exact_modes(bcf)
    else:
        modes = _fit_modes(bcf, window, n_candidates, tol)
    if modes.num_modes > MAX_MODES:
        raise ModeFitError(float("inf"))
    return modes


def _coherent_labels(modes: ModeSet, values: np.ndarray, n_steps: int, dt: float):
    """ln M and z for every forward path of projector eigenvalues (rows: f_1 … f_N, f_1 slowest)."""
    size, num_channels = values.shape
    paths = np.array(list(itertools.product(range(size), repeat=n_steps)), dtype=int).reshape(-1, n_steps)
    w = modes.frequencies
    g = modes.couplings
    e_cell = dt * _phi1(-1j * w * dt)
    self_term = np.einsum("ml,m->l", np.abs(g) ** 2, dt ** 2 * _phi2(-1j * w * dt))
    ln_m = np.zeros(paths.shape[0], dtype=complex)
    z = np.zeros((paths.shape[0], w.size), dtype=complex)
    for n in range(1, n_steps + 1):
        e_minus = np.exp(-1j * w * (n - 1) * dt) * e_cell
        order = range(num_channels) if n % 2 else reversed(range(num_channels))
        for l in order:
            s = values[paths[:, n - 1], l]
            ln_m += -1j * s * (z @ (g[:, l] * e_minus)) - s ** 2 * self_term[l]
            z += -1j * s[:, None] * (g[:, l].conj() * e_minus.conj())[None, :]
    return ln_m, z


def displacement_brute_force(modes: ModeSet, cs: CouplingSet, n_steps: int, dt: float) -> np.ndarray:
    """Dense influence tensor (axis n−1 carries μ_n) from the exact Trotter sequence of the modes."""
    if not 1 <= n_steps <= MAX_ORACLE_STEPS:
        raise ValueError(f"brute force supports 1..{MAX_ORACLE_STEPS} steps, got {n_steps}")
    if modes.num_modes > MAX_MODES:
        raise ValueError(f"at most {MAX_MODES} modes, got {modes.num_modes}")
    if modes.num_modes and modes.couplings.shape[1] != cs.num_channels:
        raise ConfigError(f"mode set has {modes.couplings.shape[1]} channels, couplings have {cs.num_channels}")
    layout = build_layout(cs)
    size = layout.forward_size
    values = layout.forward_values[:size]
    if modes.num_modes == 0:
        return np.ones((layout.size,) * n_steps, dtype=complex)
    bound = modes.influence_error_bound(n_steps, dt)
    logger.info(f"[oracle] brute force over {n_steps} steps with {modes.num_modes} modes, "
                f"mode-fit influence bound {bound:.2e}")
    ln_m, z = _coherent_labels(modes, values, n_steps, dt)
    paths = np.exp(ln_m[:, None] + ln_m.conj()[None, :] + z @ z.conj().T)
    # (f_1..f_N, g_1..g_N) → (g_1 f_1, …, g_N f_N) so that μ_n = f_n + R g_n
    tensor = paths.reshape((size,) * (2 * n_steps))
    order = [axis for n in range(n_steps) for axis in (n_steps + n, n)]
    return tensor.transpose(order).reshape((layout.size,) * n_steps)


# ── Common interface ──────────────────────────────────────────────────────────

class ReferenceOracle(ABC):
    name: str

    @abstractmethod
    def expectation(self, dt: float, t_end: float) -> tuple[np.ndarray, np.ndarray]:
        """(times, ⟨observable⟩) sampled every dt."""


class LindbladOracle(ReferenceOracle):
    name = "lindblad"

    def __init__(self, model: LindbladModel, observable: np.ndarray, rho_spin0=None):
        self.model = model
        self.observable = np.asarray(observable, dtype=complex)
        self.rho_spin0 = rho_spin0

    def expectation(self, dt: float, t_end: float) -> tuple[np.ndarray, np.ndarray]:
        traj = lindblad_reference(self.model, dt, t_end, rho_spin0=self.rho_spin0,
                                  observables={"obs": self.observable})
        return traj.times, traj.observables["obs"]


class VolterraOracle(ReferenceOracle):
    """Excited-state occupation ⟨(1 + σ_z)/2⟩ of an undriven emitter starting in |↑⟩."""

    name = "volterra"

    def __init__(self, bcf: BcfModel, delta: float = 0.0):
        self.bcf = bcf
        self.delta = delta

    def expectation(self, dt: float, t_end: float) -> tuple[np.ndarray, np.ndarray]:
        res = volterra_single_excitation(self.bcf, self.delta, t_end, dt)
        return res.times, res.occupation.astype(complex)


ORACLES: dict[str, type[ReferenceOracle]] = {
    LindbladOracle.name: LindbladOracle,
    VolterraOracle.name: VolterraOracle,
}
