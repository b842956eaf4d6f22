"""
bathkernel.py
Bath correlation function (BCF) models and their discretized memory kernels.

A Gaussian bath enters the dynamics only through its matrix-valued two-time
correlation α^{lm}(t) = ⟨B^l(t) B^m(0)⟩. Three representations are supported:

- exponential_sum  → α(t) = Σ_j C_j exp(−iΩ_j t − γ_j t), closed-form kernels
- quadrature       → spectral density + temperature, frequency integrals by
                     adaptive Gauss–Kronrod
- lattice_bessel   → emitters on a d-dimensional tight-binding lattice,
                     α built from products of Bessel functions

Models implement t ≥ 0 only. Negative times always go through
α(−t) = α(t)† (channel transpose + conjugate).

discretize_kernel() integrates α over the Trotter cells:
    η_k  = ∫_{kδt}^{(k+1)δt} dt ∫_0^{δt} ds α(t−s)      k = 0..N_c
    η̃₀  = ∫_0^{δt} dt ∫_0^t ds α(t−s)                    (causal triangle)
with η₀ = η̃₀ + η̃₀† by construction.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import integrate, special

from src.config import MAX_N_C, QUAD_MAX_ORDER, QUAD_MIN_ORDER, QUAD_REL_TOL
from src.errors import ConfigError, InvalidParameterError, NumericalError

logger = logging.getLogger(__name__)

EXPONENTIAL_SUM = "exponential_sum"
QUADRATURE = "quadrature"
LATTICE_BESSEL = "lattice_bessel"

KERNEL_MAGIC = b"UTKT"
KERNEL_VERSION = 1

# k-grid points per dimension for the density-of-states histogram
_DOS_K_POINTS = {1: 2 ** 20, 2: 1024, 3: 128}


class KernelQuadratureError(NumericalError):
    def __init__(self, worst_cell: int, error: float):
        super().__init__(f"kernel quadrature did not converge (worst cell k={worst_cell}, est. error {error:.3e})")
        self.worst_cell = worst_cell
        self.error = error


class KernelCutoffError(NumericalError):
    pass


# ── Small helpers ─────────────────────────────────────────────────────────────

def bose_occupation(omega, beta: float):
    """n_B(ω) = 1/(e^{βω} − 1), via expm1. beta = inf gives zero."""
    omega = np.asarray(omega, dtype=float)
    if math.isinf(beta):
        return np.zeros_like(omega)
    with np.errstate(divide="ignore"):
        return 1.0 / np.expm1(beta * omega)


def _phi1(x: np.ndarray) -> np.ndarray:
    """(e^x − 1)/x, series near zero."""
    x = np.asarray(x, dtype=complex)
    out = np.empty_like(x)
    small = np.abs(x) < 0.1
    xs = x[small]
    acc = np.zeros_like(xs)
    term = np.ones_like(xs)
    for n in range(1, 14):
        acc += term
        term = term * xs / (n + 1)
    out[small] = acc
    xl = x[~small]
    out[~small] = (np.exp(xl) - 1.0) / xl
    return out


def _phi2(x: np.ndarray) -> np.ndarray:
    """(e^x − 1 − x)/x², series near zero."""
    x = np.asarray(x, dtype=complex)
    out = np.empty_like(x)
    small = np.abs(x) < 0.1
    xs = x[small]
    acc = np.zeros_like(xs)
    term = np.full_like(xs, 0.5)
    for n in range(2, 15):
        acc += term
        term = term * xs / (n + 1)
    out[small] = acc
    xl = x[~small]
    out[~small] = (np.exp(xl) - 1.0 - xl) / (xl * xl)
    return out


def jc_matrix(alpha_plus: np.ndarray, alpha_minus: np.ndarray) -> np.ndarray:
    """Assemble (1/4)[[α₊, −iα₋], [iα₋, α₊]] for the (σ_x, σ_y) channel pair."""
    alpha_plus = np.asarray(alpha_plus, dtype=complex)
    alpha_minus = np.asarray(alpha_minus, dtype=complex)
    out = np.empty(alpha_plus.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = alpha_plus
    out[..., 1, 1] = alpha_plus
    out[..., 0, 1] = -1j * alpha_minus
    out[..., 1, 0] = 1j * alpha_minus
    return 0.25 * out


def complex_to_pairs(arr: np.ndarray) -> list:
    flat = np.asarray(arr, dtype=complex).ravel()
    return [[float(z.real), float(z.imag)] for z in flat]


def pairs_to_complex(pairs: list, shape: Sequence[int]) -> np.ndarray:
    data = np.asarray(pairs, dtype=float).reshape(-1, 2)
    return (data[:, 0] + 1j * data[:, 1]).reshape(tuple(shape))


# ── Models ────────────────────────────────────────────────────────────────────

class BcfModel(ABC):
    """Matrix-valued bath correlation function α^{lm}(t)."""

    num_channels: int
    representation: str

    @abstractmethod
    def _evaluate_forward(self, t: np.ndarray) -> np.ndarray:
        """α(t) for t ≥ 0; shape (len(t), L, L)."""

    def evaluate(self, t) -> np.ndarray:
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((t_arr.size, self.num_channels, self.num_channels), dtype=complex)
        neg = t_arr < 0
        if np.any(~neg):
            out[~neg] = self._evaluate_forward(t_arr[~neg])
        if np.any(neg):
            out[neg] = np.conj(np.swapaxes(self._evaluate_forward(-t_arr[neg]), -1, -2))
        if np.ndim(t) == 0:
            return out[0]
        return out.reshape(np.shape(t) + (self.num_channels, self.num_channels))

    def __call__(self, t) -> np.ndarray:
        return self.evaluate(t)


class ExpTerm(NamedTuple):
    coeff: np.ndarray     # L×L complex
    omega: float
    gamma: float


class ExponentialSumBcf(BcfModel):
    representation = EXPONENTIAL_SUM

    def __init__(self, terms: Sequence[ExpTerm]):
        if not terms:
            raise InvalidParameterError("exponential sum needs at least one term")
        coeffs = [np.atleast_2d(np.asarray(term.coeff, dtype=complex)) for term in terms]
        size = coeffs[0].shape[0]
        for coeff, term in zip(coeffs, terms):
            if coeff.shape != (size, size):
                raise InvalidParameterError(f"coefficient shape {coeff.shape} != ({size}, {size})")
            if term.gamma < 0:
                raise InvalidParameterError(f"decay rate must be ≥ 0, got {term.gamma}")
        alpha0 = sum(coeffs)
        scale = max(1.0, float(np.max(np.abs(alpha0))))
        if np.max(np.abs(alpha0 - alpha0.conj().T)) > 1e-12 * scale:
            raise InvalidParameterError("Σ_j C_j must be hermitian (α(0) = α(0)†)")
        if np.min(np.linalg.eigvalsh(0.5 * (alpha0 + alpha0.conj().T))) < -1e-12 * scale:
            raise InvalidParameterError("Σ_j C_j must be positive semidefinite")
        self.terms = tuple(ExpTerm(c, float(t.omega), float(t.gamma)) for c, t in zip(coeffs, terms))
        self.num_channels = size

    @property
    def rates(self) -> np.ndarray:
        """z_j = γ_j + iΩ_j."""
        return np.array([t.gamma + 1j * t.omega for t in self.terms])

    def _evaluate_forward(self, t: np.ndarray) -> np.ndarray:
        coeffs = np.stack([term.coeff for term in self.terms])
        phases = np.exp(-np.outer(t, self.rates))
        return np.einsum("tj,jlm->tlm", phases, coeffs)


class SumBcf(BcfModel):
    """Real linear combination of arbitrary models; discretized by quadrature."""

    representation = QUADRATURE

    def __init__(self, models: Sequence[BcfModel], weights: Sequence[float]):
        if len(models) != len(weights) or not models:
            raise InvalidParameterError("models and weights must be non-empty and of equal length")
        sizes = {m.num_channels for m in models}
        if len(sizes) != 1:
            raise InvalidParameterError(f"channel counts differ: {sorted(sizes)}")
        self.models = tuple(models)
        self.weights = tuple(float(w) for w in weights)
        self.num_channels = sizes.pop()

    def _evaluate_forward(self, t: np.ndarray) -> np.ndarray:
        return sum(w * m._evaluate_forward(t) for m, w in zip(self.models, self.weights))


def combine(models: Sequence[BcfModel], weights: Sequence[float]) -> BcfModel:
    """Σ c_i α_i for real c_i. Stays closed-form when every input is an exponential sum."""
    if all(isinstance(m, ExponentialSumBcf) for m in models):
        terms = [ExpTerm(w * t.coeff, t.omega, t.gamma) for m, w in zip(models, weights) for t in m.terms]
        return ExponentialSumBcf(terms)
    return SumBcf(models, weights)


# ── Spectral densities ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SpectralDensity:
    """J(ω) ≥ 0 on [0, omega_max]; ohmic_exp_cutoff or tabulated."""

    form: str
    alpha_s: float = 0.0
    omega_c: float = 0.0
    grid: np.ndarray | None = None
    values: np.ndarray | None = None

    def __call__(self, omega) -> np.ndarray:
        omega = np.asarray(omega, dtype=float)
        if self.form == "ohmic_exp_cutoff":
            return np.where(omega > 0, self.alpha_s * omega * np.exp(-omega / self.omega_c), 0.0)
        return np.interp(omega, self.grid, self.values, left=0.0, right=0.0)

    @property
    def omega_min(self) -> float:
        if self.form == "ohmic_exp_cutoff":
            return 0.0
        return float(max(self.grid[0], 0.0))

    @property
    def omega_max(self) -> float:
        if self.form == "ohmic_exp_cutoff":
            return self.omega_c * math.log(1.0 / np.finfo(float).eps)
        return float(self.grid[-1])


def ohmic_spectral_density(alpha_s: float, omega_c: float) -> SpectralDensity:
    """J(ω) = α_s ω e^{−ω/ω_c}."""
    if alpha_s < 0 or omega_c <= 0:
        raise InvalidParameterError(f"need alpha_s ≥ 0 and omega_c > 0, got {alpha_s}, {omega_c}")
    return SpectralDensity(form="ohmic_exp_cutoff", alpha_s=float(alpha_s), omega_c=float(omega_c))


def tabulated_spectral_density(grid, values) -> SpectralDensity:
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    if grid.ndim != 1 or grid.shape != values.shape or grid.size < 2:
        raise InvalidParameterError("tabulated spectral density needs matching 1-D grid and values")
    if np.any(np.diff(grid) <= 0):
        raise InvalidParameterError("spectral density grid must be strictly increasing")
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise InvalidParameterError("spectral density must be finite and non-negative")
    return SpectralDensity(form="tabulated", grid=grid, values=values)


class QuadratureBcf(BcfModel):
    """Jaynes–Cummings pair (σ_x, σ_y) coupled to a thermal reservoir J(ω) at inverse temperature β."""

    representation = QUADRATURE
    num_channels = 2

    def __init__(self, density: SpectralDensity, beta: float, tol: float | None = None, block: int = 2048):
        self.density = density
        self.beta = float(beta)
        self.block = block
        self.alpha_plus0 = self._static_integral()
        self.tol = tol if tol is not None else 1e-10 * max(self.alpha_plus0, 1e-300)

    def _static_integral(self) -> float:
        a, b = self.density.omega_min, self.density.omega_max

        def integrand(w):
            return float(self.density(w) * (1.0 + 2.0 * bose_occupation(w, self.beta)))

        value, _ = integrate.quad(integrand, a, b, limit=500)
        if not np.isfinite(value):
            raise ConfigError("spectral density is not integrable against the Bose factor")
        return value

    def alpha_pm(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """α₊(t), α₋(t) for t ≥ 0."""
        t = np.asarray(t, dtype=float)
        plus = np.empty(t.size, dtype=complex)
        minus = np.empty(t.size, dtype=complex)
        for start in range(0, t.size, self.block):
            chunk = t[start:start + self.block]
            p, m = self._integrate_chunk(chunk)
            plus[start:start + chunk.size] = p + m
            minus[start:start + chunk.size] = p - m
        return plus, minus

    def _integrate_chunk(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        def integrand(w):
            j = float(self.density(w))
            n = float(bose_occupation(w, self.beta))
            c, s = np.cos(w * t), np.sin(w * t)
            return np.concatenate([j * (1 + n) * c, j * (1 + n) * s, j * n * c, j * n * s])

        res, _ = integrate.quad_vec(integrand, self.density.omega_min, self.density.omega_max,
                                    epsabs=self.tol, epsrel=0.0, limit=20000)
        jc, js, nc, ns = np.split(res, 4)
        # P = ∫J(1+n)e^{−iωt},  M = ∫J n e^{+iωt}
        return jc - 1j * js, nc + 1j * ns

    def _evaluate_forward(self, t: np.ndarray) -> np.ndarray:
        plus, minus = self.alpha_pm(t)
        return jc_matrix(plus, minus)


def lattice_propagator(t, offset: Sequence[int], j_hop: float) -> np.ndarray:
    """G(t, Δx) = ∏_i i^{Δx_i} J_{Δx_i}(2 J t)."""
    t = np.asarray(t, dtype=float)
    out = np.ones(t.shape, dtype=complex)
    for dx in offset:
        out = out * (1j ** (int(dx) % 4)) * special.jv(int(dx), 2.0 * j_hop * t)
    return out


def lattice_propagator_bz(t: float, offset: Sequence[int], j_hop: float, n_points: int = 64) -> complex:
    """Brute-force Brillouin-zone trapezoid of (2π)^{−d} ∫ e^{−iω(k)t} e^{ik·Δx} d^dk."""
    dim = len(offset)
    k = 2.0 * np.pi * np.arange(n_points) / n_points - np.pi
    grids = np.meshgrid(*([k] * dim), indexing="ij")
    dispersion = -2.0 * j_hop * sum(np.cos(g) for g in grids)
    phase = sum(g * int(dx) for g, dx in zip(grids, offset))
    return complex(np.mean(np.exp(-1j * dispersion * t + 1j * phase)))


class LatticeBcf(BcfModel):
    """Emitters with (σ_x, σ_y) channel pairs at integer sites of a d-dim lattice, zero temperature."""

    representation = LATTICE_BESSEL

    def __init__(self, dim: int, j_hop: float, g: float, emitters: Sequence[Sequence[int]]):
        if dim not in (1, 2, 3):
            raise InvalidParameterError(f"lattice dimension must be 1, 2 or 3, got {dim}")
        sites = []
        for site in emitters:
            if len(site) != dim:
                raise InvalidParameterError(f"emitter offset {site} does not have length {dim}")
            if any(int(x) != x for x in site):
                raise InvalidParameterError(f"emitter offset {site} is not integer")
            sites.append(tuple(int(x) for x in site))
        if not sites:
            raise InvalidParameterError("need at least one emitter")
        self.dim = dim
        self.j_hop = float(j_hop)
        self.g = float(g)
        self.emitters = tuple(sites)
        self.num_channels = 2 * len(sites)

    def _evaluate_forward(self, t: np.ndarray) -> np.ndarray:
        n = len(self.emitters)
        out = np.empty((t.size, self.num_channels, self.num_channels), dtype=complex)
        for a in range(n):
            for b in range(n):
                offset = np.subtract(self.emitters[a], self.emitters[b])
                amp = self.g ** 2 * lattice_propagator(t, offset, self.j_hop)
                out[:, 2 * a:2 * a + 2, 2 * b:2 * b + 2] = jc_matrix(amp, amp)
        return out


# ── Constructors ──────────────────────────────────────────────────────────────

def make_damped_mode_bcf(g: float, omega: float, gamma: float, nbar: float) -> ExponentialSumBcf:
    """Damped, pumped single mode seen through σ_x, σ_y: α_± = g²(1+n̄)e^{−iωt−γ|t|} ± g²n̄e^{iωt−γ|t|}."""
    if gamma < 0:
        raise InvalidParameterError(f"gamma must be ≥ 0, got {gamma}")
    if nbar < 0:
        raise InvalidParameterError(f"nbar must be ≥ 0, got {nbar}")
    emit = 0.25 * g ** 2 * (1.0 + nbar) * np.array([[1.0, -1j], [1j, 1.0]])
    absorb = 0.25 * g ** 2 * nbar * np.array([[1.0, 1j], [-1j, 1.0]])
    return ExponentialSumBcf([ExpTerm(emit, omega, gamma), ExpTerm(absorb, -omega, gamma)])


def make_thermal_jc_bcf(density: SpectralDensity, beta: float, tol: float | None = None) -> QuadratureBcf:
    if not beta > 0:
        raise InvalidParameterError(f"beta must be > 0 (use inf for zero temperature), got {beta}")
    logger.info(f"[kernel] thermal JC bath: form={density.form} beta={beta}")
    return QuadratureBcf(density, beta, tol=tol)


def make_lattice_bcf(dim: int, j_hop: float, g: float, emitters: Sequence[Sequence[int]]) -> LatticeBcf:
    return LatticeBcf(dim, j_hop, g, emitters)


def local_spectral_density(dim: int, j_hop: float, g: float, omega_grid) -> np.ndarray:
    """Histogram estimate of J(ω) = g²(2π)^{−d}∫δ(ω − ω(k))d^dk on a uniform ω grid (bin centers)."""
    if dim not in (1, 2, 3):
        raise InvalidParameterError(f"lattice dimension must be 1, 2 or 3, got {dim}")
    grid = np.asarray(omega_grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise InvalidParameterError("omega grid must be 1-D with at least two points")
    steps = np.diff(grid)
    if np.any(steps <= 0) or np.max(np.abs(steps - steps[0])) > 1e-9 * abs(steps[0]):
        raise InvalidParameterError("omega grid must be uniform and increasing")
    h = steps[0]
    m = _DOS_K_POINTS[dim]
    k = 2.0 * np.pi * (np.arange(m) + 0.5) / m - np.pi
    cos_k = np.cos(k)
    # accumulate the dispersion one axis at a time to keep memory at m^d floats
    dispersion = -2.0 * j_hop * cos_k
    for _ in range(dim - 1):
        dispersion = (dispersion[..., None] - 2.0 * j_hop * cos_k).ravel()
    edges = np.concatenate([grid - 0.5 * h, [grid[-1] + 0.5 * h]])
    counts, _ = np.histogram(dispersion, bins=edges)
    return g ** 2 * counts / (dispersion.size * h)


# ── Kernel table ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class KernelTable:
    dt: float
    n_c: int
    eta: np.ndarray          # (n_c, L, L), entry k-1 ↔ η_k
    eta0: np.ndarray         # (L, L)
    eta0_tilde: np.ndarray   # (L, L)
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def num_channels(self) -> int:
        return self.eta0.shape[0]

    def eta_k(self, k: int) -> np.ndarray:
        if k == 0:
            return self.eta0
        if not 1 <= k <= self.n_c:
            raise IndexError(f"k={k} outside kernel table 0..{self.n_c}")
        return self.eta[k - 1]

    # ── serialization ──
    def to_bytes(self) -> bytes:
        header = struct.pack("<4sIdqq", KERNEL_MAGIC, KERNEL_VERSION, self.dt, self.n_c, self.num_channels)
        body = b"".join(np.ascontiguousarray(a, dtype="<c16").tobytes()
                        for a in (self.eta0, self.eta0_tilde, self.eta))
        return header + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "KernelTable":
        size = struct.calcsize("<4sIdqq")
        magic, version, dt, n_c, num = struct.unpack("<4sIdqq", blob[:size])
        if magic != KERNEL_MAGIC or version != KERNEL_VERSION:
            raise ValueError(f"not a kernel table blob (magic={magic!r}, version={version})")
        data = np.frombuffer(blob[size:], dtype="<c16")
        sq = num * num
        if data.size != (2 + n_c) * sq:
            raise ValueError("kernel table blob is truncated")
        eta0 = data[:sq].reshape(num, num).astype(complex)
        eta0_tilde = data[sq:2 * sq].reshape(num, num).astype(complex)
        eta = data[2 * sq:].reshape(n_c, num, num).astype(complex)
        return cls(dt=dt, n_c=int(n_c), eta=eta, eta0=eta0, eta0_tilde=eta0_tilde)

    def to_json(self) -> str:
        return json.dumps({
            "format": "unitempo.kernel",
            "version": KERNEL_VERSION,
            "dt": self.dt,
            "n_c": self.n_c,
            "num_channels": self.num_channels,
            "eta0": complex_to_pairs(self.eta0),
            "eta0_tilde": complex_to_pairs(self.eta0_tilde),
            "eta": complex_to_pairs(self.eta),
            "meta": self.meta,
        })

    @classmethod
    def from_json(cls, text: str) -> "KernelTable":
        doc = json.loads(text)
        num, n_c = doc["num_channels"], doc["n_c"]
        return cls(
            dt=float(doc["dt"]),
            n_c=int(n_c),
            eta=pairs_to_complex(doc["eta"], (n_c, num, num)),
            eta0=pairs_to_complex(doc["eta0"], (num, num)),
            eta0_tilde=pairs_to_complex(doc["eta0_tilde"], (num, num)),
            meta=doc.get("meta", {}),
        )


def _closed_form_cells(bcf: ExponentialSumBcf, dt: float, n_c: int) -> tuple[np.ndarray, np.ndarray]:
    coeffs = np.stack([term.coeff for term in bcf.terms])
    x = -bcf.rates * dt
    tilde = np.einsum("j,jlm->lm", dt ** 2 * _phi2(x), coeffs)
    k = np.arange(1, n_c + 1)
    decay = np.exp(np.outer(k - 1, x)) * (dt ** 2 * _phi1(x) ** 2)[None, :]
    eta = np.einsum("kj,jlm->klm", decay, coeffs)
    return eta, tilde


def _interval_moments(bcf: BcfModel, dt: float, n_intervals: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """A_j = ∫_{jδt}^{(j+1)δt} α(u)(u − jδt)du and B_j = ∫ α(u)((j+1)δt − u)du."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    s = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    times = (np.arange(n_intervals)[:, None] + s[None, :]) * dt
    alpha = bcf.evaluate(times.ravel()).reshape(n_intervals, order, bcf.num_channels, bcf.num_channels)
    a = dt ** 2 * np.einsum("q,jqlm->jlm", w * s, alpha)
    b = dt ** 2 * np.einsum("q,jqlm->jlm", w * (1.0 - s), alpha)
    return a, b


def _quadrature_cells(bcf: BcfModel, dt: float, n_c: int) -> tuple[np.ndarray, np.ndarray]:
    # each cell's double integral reduces to a hat-weighted single integral over two intervals
    def assemble(order):
        a, b = _interval_moments(bcf, dt, n_c + 1, order)
        return a[:-1] + b[1:], b[0]

    order = QUAD_MIN_ORDER
    eta, tilde = assemble(order)
    while True:
        finer_eta, finer_tilde = assemble(2 * order)
        scale = max(float(np.max(np.abs(finer_eta[0]))) if n_c else 0.0, float(np.max(np.abs(finer_tilde))))
        cell_err = np.max(np.abs(finer_eta - eta), axis=(1, 2)) if n_c else np.zeros(0)
        tilde_err = float(np.max(np.abs(finer_tilde - tilde)))
        worst = float(max(cell_err.max(initial=0.0), tilde_err))
        if worst <= QUAD_REL_TOL * max(scale, 1e-300) or scale == 0.0:
            return finer_eta, finer_tilde
        if 2 * order >= QUAD_MAX_ORDER:
            worst_cell = int(np.argmax(cell_err)) + 1 if cell_err.size and cell_err.max() >= tilde_err else 0
            raise KernelQuadratureError(worst_cell, worst)
        order *= 2
        eta, tilde = finer_eta, finer_tilde


def _cells(bcf: BcfModel, dt: float, n_c: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(bcf, ExponentialSumBcf):
        return _closed_form_cells(bcf, dt, n_c)
    return _quadrature_cells(bcf, dt, n_c)


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def _cutoff_from_tolerance(bcf: BcfModel, dt: float, tol_mem: float, max_n_c: int) -> int:
    window = 64
    while window <= max_n_c:
        eta, _ = _cells(bcf, dt, window)
        norms = np.max(np.abs(eta), axis=(1, 2))
        peak = float(norms.max())
        if peak == 0.0:
            return 1
        # tail[i] = max_{j ≥ i} ‖η_{j+1}‖
        tail = np.maximum.accumulate(norms[::-1])[::-1]
        below = np.nonzero(tail < tol_mem * peak)[0]
        if below.size and below[0] <= window // 2:
            return _next_pow2(max(int(below[0]), 1))
        window *= 2
    raise KernelCutoffError(f"memory did not decay below tol={tol_mem:g} within {max_n_c} steps")


def discretize_kernel(bcf: BcfModel, dt: float, *, n_c: int | None = None,
                      tol_mem: float | None = None, max_n_c: int = MAX_N_C) -> KernelTable:
    """Integrate α over the Trotter cells; exactly one of n_c / tol_mem selects the cutoff."""
    if not dt > 0:
        raise InvalidParameterError(f"dt must be > 0, got {dt}")
    if (n_c is None) == (tol_mem is None):
        raise InvalidParameterError("give exactly one of n_c or tol_mem")
    if n_c is None:
        n_c = _cutoff_from_tolerance(bcf, dt, tol_mem, max_n_c)
    if n_c < 1:
        raise InvalidParameterError(f"n_c must be ≥ 1, got {n_c}")
    eta, tilde = _cells(bcf, dt, n_c)
    eta0 = tilde + tilde.conj().T
    logger.info(f"[kernel] {bcf.representation}: L={bcf.num_channels} dt={dt:g} N_c={n_c} "
                f"|η₀|={np.max(np.abs(eta0)):.3e} |η_Nc|={np.max(np.abs(eta[-1])):.3e}")
    return KernelTable(dt=float(dt), n_c=int(n_c), eta=eta, eta0=eta0, eta0_tilde=tilde,
                       meta={"representation": bcf.representation})
