"""
evolve.py
Reduced-system dynamics from the uniform influence MPO.

One double step (2δt) acts on the combined bond ⊗ system state ψ[a, s]
(s = row-major vec ρ) as

    ψ ← u · Q_e · Q_o · u · ψ,    Q_{e/o}[a, s', b, s] = Σ_μ f_{e/o}[a, μ, b] K_{e/o}[μ, s', s]

with K[μ] the projector pair ρ ↦ A(i) ρ A(j)† of one step and u = e^{−iHδt} ⊗ e^{+iHδt}.
The chain starts from v_r ⊗ vec ρ₀ and is closed with v_l and the trace.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, eigs

from src.bathkernel import bose_occupation
from src.config import (
    CODE_VERSION,
    EIGEN_GAP_TOL,
    EPS_REL,
    SPECTRAL_DENSE_LIMIT,
    STABILITY_TOL,
    STATE_TOL,
    STEADY_MAX_ITERS,
    STEADY_TOL,
)
from src.couplings import SIGMA_Z, CouplingSet, build_layout, projector_superoperators
from src.errors import ConfigError, InvalidParameterError, NumericalError
from src.tempo import UniformInfluenceMPO

logger = logging.getLogger(__name__)

# eigenvectors kept by the iterative spectral path
SPECTRAL_MODES = 128
# |λ − 1| below this marks a stationary eigenvalue
STATIONARY_TOL = 1e-6
# FDT residual is masked within this many grid bins of ω = 0
FDT_MASK_BINS = 3


class PropagationError(NumericalError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class SteadyStateError(NumericalError):
    pass


class SpectralStabilityError(NumericalError):
    def __init__(self, modulus: float):
        super().__init__(f"transfer eigenvalue outside the unit disk (|λ| = {modulus:.12f})")
        self.modulus = modulus


# ── System channel ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SystemChannel:
    u: np.ndarray        # (d², d²)
    h_sys: np.ndarray
    dt: float

    @classmethod
    def from_hamiltonian(cls, h_sys, dt: float) -> "SystemChannel":
        h = np.atleast_2d(np.asarray(h_sys, dtype=complex))
        if h.shape[0] != h.shape[1]:
            raise ConfigError(f"H_sys must be square, got {h.shape}")
        if np.max(np.abs(h - h.conj().T)) > 1e-12 * max(1.0, float(np.max(np.abs(h)))):
            raise ConfigError("H_sys must be hermitian")
        if not dt > 0:
            raise InvalidParameterError(f"dt must be > 0, got {dt}")
        v = scipy.linalg.expm(-1j * dt * h)
        return cls(u=np.kron(v, v.conj()), h_sys=h, dt=float(dt))

    @property
    def dim(self) -> int:
        return self.h_sys.shape[0]


class Boundaries(NamedTuple):
    v_l: np.ndarray
    v_r: np.ndarray

    @classmethod
    def from_mpo(cls, mpo: UniformInfluenceMPO) -> "Boundaries":
        if not mpo.has_boundaries:
            raise ConfigError("MPO has no boundary vectors attached")
        return cls(mpo.v_l, mpo.v_r)


# ── Effective propagator ──────────────────────────────────────────────────────

@dataclass(frozen=True)
class EffectivePropagator:
    q_odd: np.ndarray    # (χ, d², χ, d²)
    q_even: np.ndarray
    dim: int
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def chi(self) -> int:
        return self.q_odd.shape[0]

    @property
    def q(self) -> np.ndarray:
        """Both half steps fused: q = Q_e · Q_o."""
        return np.einsum("asct,ctbr->asbr", self.q_even, self.q_odd, optimize=True)

    def apply(self, psi: np.ndarray) -> np.ndarray:
        psi = np.tensordot(self.q_odd, psi, axes=([2, 3], [0, 1]))
        return np.tensordot(self.q_even, psi, axes=([2, 3], [0, 1]))

    def double_step(self, psi: np.ndarray, u: SystemChannel) -> np.ndarray:
        psi = psi @ u.u.T
        return self.apply(psi) @ u.u.T

    def transfer_matrix(self, u: SystemChannel) -> np.ndarray:
        """T = (1 ⊗ u) q (1 ⊗ u) as a (χd², χd²) matrix."""
        n = self.chi * self.dim ** 2
        t = np.einsum("xs,asbr,ry->axby", u.u, self.q, u.u, optimize=True)
        return t.reshape(n, n)


def assemble_q(mpo: UniformInfluenceMPO, cs: CouplingSet) -> EffectivePropagator:
    layout = build_layout(cs)
    f_e, f_o = mpo.physical()
    if f_e.shape[1] != layout.size:
        raise ConfigError(f"MPO index dimension {f_e.shape[1]} does not match ∏ r_l² = {layout.size}")
    k_odd = projector_superoperators(cs, layout, "odd")
    k_even = projector_superoperators(cs, layout, "even")
    q_odd = np.einsum("amb,mst->asbt", f_o, k_odd, optimize=True)
    q_even = np.einsum("amb,mst->asbt", f_e, k_even, optimize=True)
    logger.info(f"[evolve] propagator: χ={f_e.shape[0]} d={cs.dim} D_μ={layout.size}")
    return EffectivePropagator(q_odd=q_odd, q_even=q_even, dim=cs.dim,
                               meta={"n_c": mpo.n_c, "dt": mpo.dt})


# ── Trajectories ──────────────────────────────────────────────────────────────

def check_state(rho: np.ndarray, tol: float = STATE_TOL) -> np.ndarray:
    rho = np.atleast_2d(np.asarray(rho, dtype=complex))
    if rho.shape[0] != rho.shape[1]:
        raise InvalidParameterError(f"density matrix must be square, got {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise InvalidParameterError("density matrix is not hermitian")
    if abs(np.trace(rho) - 1.0) > tol:
        raise InvalidParameterError(f"density matrix trace is {np.trace(rho).real:.12f}, expected 1")
    if np.min(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))) < -tol:
        raise InvalidParameterError("density matrix is not positive semidefinite")
    return rho


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray                                  # (N+1, d, d)
    observables: dict[str, np.ndarray] = field(default_factory=dict)
    diagnostics: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def expectation(self, op: np.ndarray) -> np.ndarray:
        return np.einsum("ab,nba->n", np.asarray(op, dtype=complex), self.states)

    def to_csv(self, path: str | Path, comment: str | None = None) -> None:
        names = list(self.observables)
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"{n}_{part}" for n in names for part in ("re", "im")])
            for i, t in enumerate(self.times):
                row = [repr(float(t))]
                for n in names:
                    v = self.observables[n][i]
                    row += [repr(float(v.real)), repr(float(v.imag))]
                writer.writerow(row)

    def to_json(self, path: str | Path) -> None:
        doc = {
            "code_version": CODE_VERSION,
            "metadata": self.metadata,
            "times": self.times.tolist(),
            "observables": {n: [[v.real, v.imag] for v in vals] for n, vals in self.observables.items()},
            "diagnostics": {n: np.asarray(v).tolist() for n, v in self.diagnostics.items()},
        }
        Path(path).write_text(json.dumps(doc, indent=2, default=str))


def propagate(rho0, prop: EffectivePropagator, u: SystemChannel, n_double_steps: int,
              boundaries: Boundaries, observables: Mapping[str, np.ndarray] | None = None) -> Trajectory:
    """ρ(n·2δt) for n = 0..N; each double step is u · q · u."""
    rho0 = check_state(rho0)
    d = prop.dim
    if rho0.shape != (d, d) or u.dim != d:
        raise ConfigError(f"state/system dimension mismatch: ρ₀ {rho0.shape}, propagator d={d}, H d={u.dim}")
    if n_double_steps < 0:
        raise ValueError(f"number of steps must be ≥ 0, got {n_double_steps}")
    observables = dict(observables or {})

    psi = boundaries.v_r[:, None] * rho0.reshape(1, d * d)
    states = np.empty((n_double_steps + 1, d, d), dtype=complex)
    states[0] = rho0
    for n in range(1, n_double_steps + 1):
        psi = prop.double_step(psi, u)
        rho = (boundaries.v_l @ psi).reshape(d, d)
        if not np.all(np.isfinite(rho)):
            raise PropagationError("non-finite density matrix", n)
        states[n] = rho

    trace_dev = np.abs(np.einsum("naa->n", states) - 1.0)
    herm_dev = np.max(np.abs(states - np.conj(np.swapaxes(states, 1, 2))), axis=(1, 2))
    min_eig = np.array([np.linalg.eigvalsh(0.5 * (r + r.conj().T))[0] for r in states])
    alert = 1e3 * EPS_REL * max(n_double_steps, 1)
    if trace_dev.max() > alert:
        logger.warning(f"[evolve] trace deviation {trace_dev.max():.3e} exceeds {alert:.3e}")
    if min_eig.min() < -1e-8:
        logger.info(f"[evolve] density matrix not positive (min eigenvalue {min_eig.min():.3e})")

    times = 2.0 * u.dt * np.arange(n_double_steps + 1)
    traj = Trajectory(
        times=times,
        states=states,
        observables={name: np.einsum("ab,nba->n", np.asarray(op, dtype=complex), states)
                     for name, op in observables.items()},
        diagnostics={"trace_deviation": trace_dev, "hermiticity_deviation": herm_dev, "min_eigenvalue": min_eig},
        metadata={"dt": u.dt, "chi": prop.chi, **prop.meta},
    )
    logger.info(f"[evolve] propagated {n_double_steps} double steps, max trace deviation {trace_dev.max():.2e}")
    return traj


# ── Steady state ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SteadyState:
    rho: np.ndarray
    bond_state: np.ndarray    # (χ, d²), normalized so the trace closure is 1
    iterations: int
    residual: float


def _closure(boundaries: Boundaries, d: int) -> np.ndarray:
    return np.kron(boundaries.v_l, np.eye(d, dtype=complex).ravel())


def steady_state(prop: EffectivePropagator, u: SystemChannel, boundaries: Boundaries, *,
                 tol: float = STEADY_TOL, max_iters: int = STEADY_MAX_ITERS, rho0=None) -> SteadyState:
    """Power iteration of the double step with trace-closure normalization."""
    d = prop.dim
    n = prop.chi * d * d
    if n <= SPECTRAL_DENSE_LIMIT:
        w = np.linalg.eigvals(prop.transfer_matrix(u))
        mods = np.sort(np.abs(w))[::-1]
        if n > 1 and mods[0] - mods[1] <= EIGEN_GAP_TOL * mods[0]:
            raise SteadyStateError(f"no unique fixed point: |λ₁| = {mods[0]:.12f}, |λ₂| = {mods[1]:.12f}")
        if mods[0] - mods[1] < 1e-4 * mods[0]:
            logger.warning(f"[evolve] small spectral gap {mods[0] - mods[1]:.3e}, convergence will be slow")

    rho = check_state(rho0) if rho0 is not None else np.eye(d, dtype=complex) / d
    psi = boundaries.v_r[:, None] * rho.reshape(1, d * d)
    for it in range(1, max_iters + 1):
        psi = prop.double_step(psi, u)
        rho_new = (boundaries.v_l @ psi).reshape(d, d)
        tr = np.trace(rho_new)
        if not np.isfinite(tr) or abs(tr) == 0.0:
            raise SteadyStateError(f"trace closure vanished at iteration {it}")
        psi = psi / tr
        rho_new = rho_new / tr
        residual = float(np.linalg.norm(rho_new - rho, 2))
        rho = rho_new
        if residual < tol:
            logger.info(f"[evolve] steady state after {it} double steps (residual {residual:.2e})")
            return SteadyState(rho=0.5 * (rho + rho.conj().T), bond_state=psi, iterations=it, residual=residual)
    raise SteadyStateError(f"steady state not converged after {max_iters} iterations (residual {residual:.3e})")


# ── Correlators and spectra ───────────────────────────────────────────────────

def _left_insert(op: np.ndarray, d: int) -> np.ndarray:
    return np.kron(op, np.eye(d))          # ρ ↦ B ρ


def _right_insert(op: np.ndarray, d: int) -> np.ndarray:
    return np.kron(np.eye(d), op.T)        # ρ ↦ ρ B


def two_time_correlator(a, b, prop: EffectivePropagator, u: SystemChannel, boundaries: Boundaries,
                        n_steps: int, steady: SteadyState | None = None, *, order: str = "AB") -> np.ndarray:
    """⟨A(t)B(0)⟩ (order="AB") or ⟨B(0)A(t)⟩ (order="BA") at t = n·2δt, n = 0..n_steps."""
    if steady is None:
        raise SteadyStateError("two-time correlators need the stationary bond state")
    d = prop.dim
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    insert = _left_insert(b, d) if order == "AB" else _right_insert(b, d)
    psi = steady.bond_state @ insert.T
    close = np.kron(boundaries.v_l, a.T.ravel())
    out = np.empty(n_steps + 1, dtype=complex)
    out[0] = close @ psi.ravel()
    for n in range(1, n_steps + 1):
        psi = prop.double_step(psi, u)
        out[n] = close @ psi.ravel()
    return out


@dataclass
class Spectra:
    omega: np.ndarray
    s_zz: np.ndarray
    chi_zz: np.ndarray
    fdt_residual: np.ndarray
    eigenvalues: np.ndarray
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["omega", "S_re", "chi_re", "chi_im", "fdt_residual"])
            for w, s, c, r in zip(self.omega, self.s_zz, self.chi_zz, self.fdt_residual):
                writer.writerow([repr(float(w)), repr(float(s)), repr(float(c.real)), repr(float(c.imag)),
                                 repr(float(r))])

    def to_json(self, path: str | Path) -> None:
        doc = {
            "code_version": CODE_VERSION,
            "metadata": self.metadata,
            "omega": self.omega.tolist(),
            "S_zz": self.s_zz.tolist(),
            "chi_zz": [[c.real, c.imag] for c in self.chi_zz],
            "fdt_residual": [None if np.isnan(r) else float(r) for r in self.fdt_residual],
        }
        Path(path).write_text(json.dumps(doc, indent=2, default=str))


def _spectral_decomposition(t: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    n = t.shape[0]
    if n <= SPECTRAL_DENSE_LIMIT:
        w, r = scipy.linalg.eig(t)
        return w, r, True
    k = min(SPECTRAL_MODES, n - 2)
    op = LinearOperator((n, n), matvec=lambda x: t @ x, dtype=complex)
    try:
        w, r = eigs(op, k=k, which="LM", tol=1e-12)
    except (ArpackNoConvergence, ArpackError) as e:
        raise NumericalError(f"dominant transfer subspace did not converge: {e}") from e
    return w, r, False


def _geometric_sums(coeffs: np.ndarray, lam: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Σ_n Σ_k c_k λ_k^n z^n = Σ_k c_k / (1 − λ_k z) on each z."""
    return np.sum(coeffs[None, :] / (1.0 - lam[None, :] * z[:, None]), axis=1)


def fdt_residual(omega, s_zz, chi_zz, beta: float) -> np.ndarray:
    """S − 2(1 + n_B) Im χ relative to max S; NaN within FDT_MASK_BINS bins of ω = 0."""
    omega = np.asarray(omega, dtype=float)
    s_zz = np.asarray(s_zz, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = 2.0 * (1.0 + bose_occupation(omega, beta))
        res = (s_zz - factor * np.imag(chi_zz)) / np.max(np.abs(s_zz))
    if omega.size > 1:
        bin_width = float(np.min(np.abs(np.diff(omega))))
        res[np.abs(omega) <= FDT_MASK_BINS * bin_width] = np.nan
    return res


def spectra(prop: EffectivePropagator, u: SystemChannel, boundaries: Boundaries, omega_grid, *,
            op=SIGMA_Z, beta: float = np.inf, steady: SteadyState | None = None) -> Spectra:
    """Symmetrized power spectrum, susceptibility and FDT residual of `op` by geometric resummation."""
    d = prop.dim
    op = np.asarray(op, dtype=complex)
    omega = np.asarray(omega_grid, dtype=float)
    step = 2.0 * u.dt
    lam, right, dense = _spectral_decomposition(prop.transfer_matrix(u))
    if np.max(np.abs(lam)) > 1.0 + STABILITY_TOL:
        raise SpectralStabilityError(float(np.max(np.abs(lam))))

    trace_close = _closure(boundaries, d)
    if steady is None:
        k0 = int(np.argmin(np.abs(lam - 1.0)))
        if abs(lam[k0] - 1.0) > STATIONARY_TOL:
            raise SteadyStateError(f"no stationary eigenvalue (closest {lam[k0]:.6f})")
        psi_ss = right[:, k0] / (trace_close @ right[:, k0])
    else:
        psi_ss = steady.bond_state.ravel()

    close = np.kron(boundaries.v_l, op.T.ravel())
    psi_ab = psi_ss @ np.kron(np.eye(prop.chi), _left_insert(op, d)).T
    psi_ba = psi_ss @ np.kron(np.eye(prop.chi), _right_insert(op, d)).T
    if dense:
        amp_ab, amp_ba = np.linalg.solve(right, np.stack([psi_ab, psi_ba], axis=1)).T
    else:
        amp_ab, amp_ba = np.linalg.lstsq(right, np.stack([psi_ab, psi_ba], axis=1), rcond=None)[0].T
    weights = close @ right
    c_ab, c_ba = weights * amp_ab, weights * amp_ba

    # the stationary part ⟨A⟩⟨B⟩ would give a δ(ω); it cancels in the commutator
    stationary = np.abs(lam - 1.0) <= STATIONARY_TOL
    conn_ab = np.where(stationary, 0.0, c_ab)
    conn_ba = np.where(stationary, 0.0, c_ba)
    z = np.exp(1j * omega * step)
    c0_ab, c0_ba = np.sum(conn_ab), np.sum(conn_ba)
    s_zz = 2.0 * np.real(step * (_geometric_sums(conn_ab, lam, z) - 0.5 * c0_ab))
    chi_zz = 1j * step * (_geometric_sums(conn_ab - conn_ba, lam, z) - 0.5 * (c0_ab - c0_ba))
    residual = fdt_residual(omega, s_zz, chi_zz, beta)
    logger.info(f"[evolve] spectra on {omega.size} frequencies from {lam.size} modes "
                f"({'dense' if dense else 'iterative'})")
    return Spectra(omega=omega, s_zz=s_zz, chi_zz=chi_zz, fdt_residual=residual, eigenvalues=lam,
                   metadata={"dt": u.dt, "chi": prop.chi, "beta": beta, "dense": dense})
