"""
ifcore.py
Influence-functional building blocks on the Keldysh multi-index layout.

    I(k)^{μ_n}_{μ_m} = exp(−Σ_{lo} ΔS^l_n (η_k^{lo} S^o_{i_m} − η_k^{lo*} S^o_{j_m}))     k = n − m ≥ 1
    I_{e/o}(0)^μ     = exp(time-local exponent of one even/odd step)

The time-local exponent of the symmetric Trotter split (odd steps apply
channels 1..L, even steps L..1):

    ln I₀ = −Σ_{lo} [ R_{lo} (S^l_i η₀^{lo} S^o_i + S^l_j η₀^{lo*} S^o_j)
                      + δ_{lo} (S^l_i η̃₀^{ll} S^l_i + S^l_j η̃₀^{ll*} S^l_j)
                      − S^l_j η̃₀^{lo} S^o_i − S^l_i η̃₀^{lo*} S^o_j ]

R_{lo} = 1 iff channel l acts after channel o within the step. With L = 1 this
is the familiar −(S_i − S_j)(η̃₀ S_i − η̃₀* S_j).

Gates follow the network picture: b(k) swaps two lines and weights them with
I(k)^β_α (β = later step, α = earlier step); b_{e/o}(0) fuses the two lines of
one time step. Rows of I(k) depend on μ only through its difference class, so
gates are stored as (#classes × D) tables and expanded on demand.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from src.bathkernel import KernelTable
from src.couplings import KeldyshLayout
from src.errors import NumericalError

logger = logging.getLogger(__name__)

# R^n_{l−o} = Θ_{l−o} on odd steps and Θ_{o−l} on even steps when True.
# Pinned by the displacement-operator oracle in tests/test_oracle.py.
PARITY_ODD_FORWARD = True

DENSE_LIMIT = 2 ** 24
MAX_DENSE_STEPS = 8


class InfluenceSizeError(NumericalError):
    pass


def parity_matrix(num_channels: int, parity: str, odd_forward: bool = PARITY_ODD_FORWARD) -> np.ndarray:
    """R_{lo} ∈ {0, 1}: 1 iff channel l is applied after channel o in a step of the given parity."""
    if parity not in ("even", "odd"):
        raise ValueError(f"parity must be 'even' or 'odd', got {parity!r}")
    idx = np.arange(num_channels)
    diff = idx[:, None] - idx[None, :]
    ascending = (parity == "odd") == odd_forward
    return (diff > 0 if ascending else diff < 0).astype(float)


def build_ik_compressed(kernel: KernelTable, layout: KeldyshLayout, k: int) -> np.ndarray:
    """I(k) with rows indexed by difference class: shape (#classes, D_μ)."""
    if not 1 <= k <= kernel.n_c:
        raise IndexError(f"k={k} outside kernel table 1..{kernel.n_c}")
    eta = kernel.eta_k(k)
    exponent = -(layout.class_diffs @ eta @ layout.forward_values.T
                 - layout.class_diffs @ eta.conj() @ layout.backward_values.T)
    return np.exp(exponent)


def build_Ik(kernel: KernelTable, layout: KeldyshLayout, k: int) -> np.ndarray:
    return build_ik_compressed(kernel, layout, k)[layout.class_of]


def build_I0(kernel: KernelTable, layout: KeldyshLayout, parity: str, *,
             trotter_corrections: bool = True, odd_forward: bool = PARITY_ODD_FORWARD) -> np.ndarray:
    si, sj = layout.forward_values, layout.backward_values
    eta0, tilde = kernel.eta0, kernel.eta0_tilde
    if not trotter_corrections:
        # continuous-time (commuting-coupling) form, first-order in the Trotter error
        diff = si - sj
        return np.exp(-(np.einsum("ml,lo,mo->m", diff, tilde, si)
                        - np.einsum("ml,lo,mo->m", diff, tilde.conj(), sj)))
    r = parity_matrix(layout.num_channels, parity, odd_forward)
    same_step = (np.einsum("ml,lo,mo->m", si, r * eta0, si)
                 + np.einsum("ml,lo,mo->m", sj, r * eta0.conj(), sj))
    diagonal = si ** 2 @ np.diag(tilde) + sj ** 2 @ np.diag(tilde).conj()
    cross = (np.einsum("ml,lo,mo->m", sj, tilde, si)
             + np.einsum("ml,lo,mo->m", si, tilde.conj(), sj))
    return np.exp(-(same_step + diagonal - cross))


# ── Gate set ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class InfluenceGateSet:
    layout: KeldyshLayout
    n_c: int
    ik: np.ndarray            # (n_c, #classes, D), entry k-1 ↔ I(k)
    class_of: np.ndarray      # (D,) class of each (possibly augmented) index
    i0_even: np.ndarray       # (D,)
    i0_odd: np.ndarray        # (D,)
    augmented: bool
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def dim(self) -> int:
        """Physical index dimension of the network (D_μ, +1 when augmented)."""
        return self.ik.shape[2]

    @property
    def num_classes(self) -> int:
        return self.ik.shape[1]

    @property
    def x(self) -> np.ndarray:
        return np.ones(self.dim, dtype=complex)

    @property
    def gate_count(self) -> int:
        return self.n_c + 2

    def expanded_ik(self, k: int) -> np.ndarray:
        return self.ik[k - 1][self.class_of]

    def gate(self, k: int) -> np.ndarray:
        """Dense b(k) indexed [μ, β, ν, α] = δ_{αμ} δ_{βν} I(k)^β_α (small layouts only)."""
        d = self.dim
        eye = np.eye(d)
        weights = self.expanded_ik(k)
        return np.einsum("am,bn,ba->mbna", eye, eye, weights)


def build_gates(kernel: KernelTable, layout: KeldyshLayout, *, augment_zero_index: bool = True,
                trotter_corrections: bool = True, odd_forward: bool = PARITY_ODD_FORWARD) -> InfluenceGateSet:
    ik = np.stack([build_ik_compressed(kernel, layout, k) for k in range(1, kernel.n_c + 1)])
    i0_even = build_I0(kernel, layout, "even", trotter_corrections=trotter_corrections, odd_forward=odd_forward)
    i0_odd = build_I0(kernel, layout, "odd", trotter_corrections=trotter_corrections, odd_forward=odd_forward)
    class_of = layout.class_of
    if augment_zero_index:
        # index 0 decouples: (I(k))^0_μ = (I(k))^μ_0 = 1 and I₀^0 = 1
        ones = np.ones(ik.shape[:2] + (1,), dtype=complex)
        ik = np.concatenate([ones, ik], axis=2)
        class_of = np.concatenate([[layout.zero_class], class_of])
        i0_even = np.concatenate([[1.0 + 0j], i0_even])
        i0_odd = np.concatenate([[1.0 + 0j], i0_odd])
    logger.info(f"[ifcore] gates: N_c={kernel.n_c} D={ik.shape[2]} classes={ik.shape[1]} "
                f"augmented={augment_zero_index} corrections={trotter_corrections}")
    return InfluenceGateSet(layout=layout, n_c=kernel.n_c, ik=ik, class_of=np.asarray(class_of, dtype=int),
                            i0_even=i0_even, i0_odd=i0_odd, augmented=augment_zero_index,
                            meta={"dt": kernel.dt, "trotter_corrections": trotter_corrections})


# ── Direct evaluation ─────────────────────────────────────────────────────────

def dense_influence(kernel: KernelTable, layout: KeldyshLayout, n_steps: int, *,
                    trotter_corrections: bool = True, odd_forward: bool = PARITY_ODD_FORWARD) -> np.ndarray:
    """F(μ_1, …, μ_N) for every index assignment; axis n−1 carries μ_n."""
    if n_steps < 2 or n_steps % 2 or n_steps > MAX_DENSE_STEPS:
        raise ValueError(f"N must be even and between 2 and {MAX_DENSE_STEPS}, got {n_steps}")
    d = layout.size
    if d ** n_steps > DENSE_LIMIT:
        raise InfluenceSizeError(f"dense influence needs D_μ^N = {d}^{n_steps} > {DENSE_LIMIT} entries")
    i0 = {p: build_I0(kernel, layout, p, trotter_corrections=trotter_corrections, odd_forward=odd_forward)
          for p in ("even", "odd")}
    out = np.ones((d,) * n_steps, dtype=complex)
    for n in range(1, n_steps + 1):
        shape = [1] * n_steps
        shape[n - 1] = d
        out *= i0["odd" if n % 2 else "even"].reshape(shape)
        for m in range(1, n):
            k = n - m
            if k > kernel.n_c:
                continue
            shape = [1] * n_steps
            shape[m - 1] = d
            shape[n - 1] = d
            out *= build_Ik(kernel, layout, k).T.reshape(shape)
    return out


def influence_entries(kernel: KernelTable, layout: KeldyshLayout, sequences, *,
                      trotter_corrections: bool = True, odd_forward: bool = PARITY_ODD_FORWARD) -> np.ndarray:
    """F on explicit index sequences (rows of `sequences`, time order μ_1 first); no size guard."""
    seqs = np.atleast_2d(np.asarray(sequences, dtype=int))
    n_steps = seqs.shape[1]
    i0 = {p: build_I0(kernel, layout, p, trotter_corrections=trotter_corrections, odd_forward=odd_forward)
          for p in ("even", "odd")}

    @lru_cache(maxsize=None)
    def ik(k: int) -> np.ndarray:
        return build_ik_compressed(kernel, layout, k)

    log_f = np.zeros(seqs.shape[0], dtype=complex)
    for n in range(1, n_steps + 1):
        mu_n = seqs[:, n - 1]
        log_f += np.log(i0["odd" if n % 2 else "even"][mu_n])
        for m in range(max(1, n - kernel.n_c), n):
            log_f += np.log(ik(n - m)[layout.class_of[mu_n], seqs[:, m - 1]])
    return np.exp(log_f)


def influence_entry(kernel: KernelTable, layout: KeldyshLayout, sequence: Sequence[int], **kwargs) -> complex:
    return complex(influence_entries(kernel, layout, [list(sequence)], **kwargs)[0])
