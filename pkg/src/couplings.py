"""
couplings.py
Spectral analysis of the hermitian coupling operators S^l and the Keldysh
multi-index layout shared by every influence tensor.

Each channel is reduced to its r_l distinct eigenvalues S^l_i and eigenspace
projectors P^l_i. A time step carries one forward index i^l and one backward
index j^l per channel; they are flattened into a single multi-index μ with
channel 1 fastest, forward indices first:

    μ = (i^1, …, i^L, j^1, …, j^L)   dimension D_μ = ∏_l r_l²

Memory tensors only see the eigenvalue differences S^l_i − S^l_j, so μ values
sharing a difference vector form a "difference class".
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np

from src.config import CLASS_TOL, DEGENERACY_TOL, HERMITIAN_TOL
from src.errors import ConfigError

logger = logging.getLogger(__name__)

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_PLUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_MINUS = SIGMA_PLUS.T.copy()

PRESETS = {
    "sigma_x": SIGMA_X,
    "sigma_y": SIGMA_Y,
    "sigma_z": SIGMA_Z,
    "occupation": SIGMA_PLUS @ SIGMA_MINUS,
    "identity": np.eye(2, dtype=complex),
}

# two-emitter register: emitter a is the left tensor factor
EMITTER_SITES = ("a", "b")


def embed(op: np.ndarray, site: int, n_sites: int) -> np.ndarray:
    """`op` acting on emitter `site` of a register of two-level emitters."""
    if not 0 <= site < n_sites:
        raise ValueError(f"site {site} outside 0..{n_sites - 1}")
    factors = [np.eye(2, dtype=complex)] * n_sites
    factors[site] = np.asarray(op, dtype=complex)
    return reduce(np.kron, factors)


PRESETS.update({
    f"{name}_{tag}": embed(op, site, len(EMITTER_SITES))
    for name, op in list(PRESETS.items()) if name != "identity"
    for site, tag in enumerate(EMITTER_SITES)
})


class NonHermitianCouplingError(ConfigError):
    def __init__(self, channel: int, violation: float):
        super().__init__(f"coupling operator {channel} is not hermitian (‖S − S†‖_max = {violation:.3e})")
        self.channel = channel
        self.violation = violation


def hermitian_pair(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(C + C†)/2 and i(C − C†)/2, the hermitian channels of a non-hermitian coupling C."""
    c = np.asarray(c, dtype=complex)
    return 0.5 * (c + c.conj().T), 0.5j * (c - c.conj().T)


@dataclass(frozen=True)
class CouplingSet:
    dim: int
    operators: tuple[np.ndarray, ...]
    eigenvalues: tuple[np.ndarray, ...]    # descending, per channel
    projectors: tuple[np.ndarray, ...]     # (r_l, d, d) per channel
    tol: float

    @property
    def num_channels(self) -> int:
        return len(self.operators)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(len(ev) for ev in self.eigenvalues)

    def reconstruct(self, channel: int) -> np.ndarray:
        return np.einsum("i,iab->ab", self.eigenvalues[channel], self.projectors[channel])


def _cluster(values: np.ndarray, gap: float) -> list[list[int]]:
    """Single-linkage clusters of values sorted in descending order."""
    clusters = [[0]]
    for idx in range(1, len(values)):
        if values[idx - 1] - values[idx] > gap:
            clusters.append([idx])
        else:
            clusters[-1].append(idx)
    return clusters


def analyze_couplings(ops: Sequence[np.ndarray], tol: float = DEGENERACY_TOL,
                      merge_degenerate: bool = True) -> CouplingSet:
    if not ops:
        raise ConfigError("need at least one coupling operator")
    mats = [np.atleast_2d(np.asarray(op, dtype=complex)) for op in ops]
    dim = mats[0].shape[0]
    eigenvalues, projectors = [], []
    for channel, s in enumerate(mats):
        if s.shape != (dim, dim):
            raise ConfigError(f"coupling operator {channel} has shape {s.shape}, expected ({dim}, {dim})")
        violation = float(np.max(np.abs(s - s.conj().T)))
        if violation > HERMITIAN_TOL:
            raise NonHermitianCouplingError(channel, violation)
        vals, vecs = np.linalg.eigh(0.5 * (s + s.conj().T))
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
        if merge_degenerate:
            gap = tol * max(1.0, float(np.max(np.abs(s))))
            groups = _cluster(vals, gap)
        else:
            groups = [[i] for i in range(dim)]
        eigenvalues.append(np.array([vals[g].mean() for g in groups]))
        projectors.append(np.stack([vecs[:, g] @ vecs[:, g].conj().T for g in groups]))
    logger.info(f"[couplings] d={dim} L={len(mats)} ranks={[len(e) for e in eigenvalues]}")
    return CouplingSet(dim=dim, operators=tuple(mats), eigenvalues=tuple(eigenvalues),
                       projectors=tuple(projectors), tol=tol)


@dataclass(frozen=True)
class KeldyshLayout:
    ranks: tuple[int, ...]
    forward: np.ndarray          # (D, L) index i^l of each μ
    backward: np.ndarray         # (D, L) index j^l of each μ
    forward_values: np.ndarray   # (D, L) S^l_{i^l}
    backward_values: np.ndarray  # (D, L) S^l_{j^l}
    class_of: np.ndarray         # (D,) difference class of each μ
    class_diffs: np.ndarray      # (C, L) representative difference vector per class
    zero_class: int

    @property
    def size(self) -> int:
        return self.forward.shape[0]

    @property
    def num_channels(self) -> int:
        return len(self.ranks)

    @property
    def num_classes(self) -> int:
        return self.class_diffs.shape[0]

    @property
    def forward_size(self) -> int:
        return int(np.prod(self.ranks))

    def class_members(self, c: int) -> np.ndarray:
        return np.nonzero(self.class_of == c)[0]

    def flatten(self, forward: Sequence[int], backward: Sequence[int]) -> int:
        digits = tuple(forward) + tuple(backward)
        return int(np.ravel_multi_index(digits, self.ranks + self.ranks, order="F"))

    def unflatten(self, mu: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        digits = np.unravel_index(int(mu), self.ranks + self.ranks, order="F")
        n = len(self.ranks)
        return tuple(int(d) for d in digits[:n]), tuple(int(d) for d in digits[n:])


def build_layout(cs: CouplingSet) -> KeldyshLayout:
    ranks = cs.ranks
    n = len(ranks)
    size = int(np.prod(ranks)) ** 2
    digits = np.array(np.unravel_index(np.arange(size), ranks + ranks, order="F")).T
    forward, backward = digits[:, :n], digits[:, n:]
    fwd_vals = np.stack([cs.eigenvalues[l][forward[:, l]] for l in range(n)], axis=1)
    bwd_vals = np.stack([cs.eigenvalues[l][backward[:, l]] for l in range(n)], axis=1)
    diffs = fwd_vals - bwd_vals

    class_of = np.empty(size, dtype=int)
    reps: list[np.ndarray] = []
    for mu in range(size):
        for c, rep in enumerate(reps):
            if np.max(np.abs(rep - diffs[mu])) <= CLASS_TOL:
                class_of[mu] = c
                break
        else:
            class_of[mu] = len(reps)
            reps.append(diffs[mu])
    class_diffs = np.array(reps)
    zero_class = int(np.argmin(np.max(np.abs(class_diffs), axis=1)))
    return KeldyshLayout(ranks=ranks, forward=forward, backward=backward, forward_values=fwd_vals,
                         backward_values=bwd_vals, class_of=class_of, class_diffs=class_diffs,
                         zero_class=zero_class)


def projector_superoperators(cs: CouplingSet, layout: KeldyshLayout, parity: str) -> np.ndarray:
    """K[μ] acting on row-major vec(ρ): ρ ↦ A(i) ρ A(j)†, shape (D_μ, d², d²).

    Odd steps apply channels 1..L (A = P^L ⋯ P^1), even steps L..1 (A = P^1 ⋯ P^L).
    """
    if parity not in ("even", "odd"):
        raise ValueError(f"parity must be 'even' or 'odd', got {parity!r}")
    d = cs.dim
    fwd = layout.forward[:layout.forward_size]       # μ < R_f enumerates forward digits with j = 0
    channels = range(cs.num_channels) if parity == "odd" else reversed(range(cs.num_channels))
    ops = np.broadcast_to(np.eye(d, dtype=complex), (layout.forward_size, d, d)).copy()
    for l in channels:
        ops = np.einsum("fab,fbc->fac", cs.projectors[l][fwd[:, l]], ops)
    size = layout.forward_size
    return np.einsum("fab,gcd->gfacbd", ops, ops.conj()).reshape(size * size, d * d, d * d)
