"""
tempo.py
Contraction of the translationally invariant influence network into a uniform
two-site MPO with infinite time-evolving block decimation.

The network is read as an infinite MPS with a two-site unit cell (A, B). Every
line of the network carries either a full multi-index (α-type, dimension D) or,
after it has crossed its partner, only a difference class (β-type, dimension C).
Layer k applies b(k) on bond AB when k is even and on bond BA when k is odd,
from k = N_c down to k = 1:

    θ'[a, β, α, c] = I(k)^β_α · θ[a, α, β, c]

followed by a truncated SVD and a return to canonical form. After layer 1 the
cell is fused with b_{e/o}(0) into the MPO tensors

    f_{e/o}[a, ν, b] = I_{e/o}(0)^ν · Γ_A[a, ν] λ_AB Γ_B[class(ν)] λ_BA

The left tensor of each pair belongs to the later time step, so a sequence
μ_1 … μ_N is evaluated as v_lᵀ f_e[μ_N] f_o[μ_{N−1}] ⋯ f_e[μ_2] f_o[μ_1] v_r.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, eigs

from src.config import (
    BOUNDARY_MAX_ITERS,
    BOUNDARY_TOL,
    CHI_MAX,
    DENSE_EIG_LIMIT,
    EIGEN_GAP_TOL,
    EPS_REL,
    SKETCH_OVERSAMPLE,
    SKETCH_POWER_ITERS,
    SVD_FLOOR,
)
from src.couplings import CouplingSet, build_layout, projector_superoperators
from src.errors import ConfigError, NumericalError
from src.ifcore import InfluenceGateSet

logger = logging.getLogger(__name__)

_MPO_MAGIC = b"UTMP"
_MPO_VERSION = 1
_MPO_HEADER = struct.Struct("<4sIqqqdI")

# transfer fixed points are found densely up to this bond dimension
_DENSE_FIXED_POINT_CHI = 16


class TruncationError(NumericalError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class CanonicalizationError(NumericalError):
    pass


class BoundaryError(NumericalError):
    pass


# ── Truncation ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TruncationPolicy:
    chi_max: int = CHI_MAX
    eps_rel: float = EPS_REL
    randomized: bool = False
    sketch_oversample: int = SKETCH_OVERSAMPLE
    sketch_power_iters: int = SKETCH_POWER_ITERS
    seed: int = 0
    recanonicalize: bool = True

    def __post_init__(self):
        if self.chi_max < 1:
            raise ConfigError(f"chi_max must be ≥ 1, got {self.chi_max}")
        if not 0.0 <= self.eps_rel < 1.0:
            raise ConfigError(f"eps_rel must lie in [0, 1), got {self.eps_rel}")
        if self.sketch_oversample < 0 or self.sketch_power_iters < 0:
            raise ConfigError("sketch oversampling and power iterations must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TruncatedSvd:
    u: np.ndarray
    s: np.ndarray
    vh: np.ndarray
    discarded_weight: float    # Σ discarded σ² / Σ σ²

    @property
    def rank(self) -> int:
        return self.s.size


def _full_svd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        logger.warning(f"[tempo] gesdd failed on {m.shape}, retrying with gesvd")
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")


def _randomized_svd(m: np.ndarray, rank: int, power_iters: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Range finder with QR-stabilised power iterations, then an exact SVD of the projection."""
    n = m.shape[1]
    omega = rng.standard_normal((n, rank))
    if np.iscomplexobj(m):
        omega = omega + 1j * rng.standard_normal((n, rank))
    q, _ = np.linalg.qr(m @ omega)
    for _ in range(power_iters):
        z, _ = np.linalg.qr(m.conj().T @ q)
        q, _ = np.linalg.qr(m @ z)
    ub, s, vh = _full_svd(q.conj().T @ m)
    return q @ ub, s, vh


def truncated_svd(m: np.ndarray, policy: TruncationPolicy, rng: np.random.Generator | None = None,
                  layer: int | None = None) -> TruncatedSvd:
    """Keep σ_i ≥ max(eps_rel, SVD_FLOOR)·σ_1, at most chi_max of them."""
    if not np.all(np.isfinite(m)):
        raise TruncationError("matrix holds non-finite entries", layer)
    total = float(np.vdot(m, m).real)
    if total == 0.0:
        raise TruncationError("all singular values below cutoff", layer)
    sketch = policy.chi_max + policy.sketch_oversample
    if policy.randomized and min(m.shape) > sketch:
        rng = rng if rng is not None else np.random.default_rng(policy.seed)
        u, s, vh = _randomized_svd(m, sketch, policy.sketch_power_iters, rng)
    else:
        u, s, vh = _full_svd(m)
    if not np.all(np.isfinite(s)):
        raise TruncationError("SVD produced non-finite singular values", layer)
    if s.size == 0 or s[0] == 0.0:
        raise TruncationError("all singular values below cutoff", layer)
    cutoff = max(policy.eps_rel, SVD_FLOOR) * s[0]
    keep = min(policy.chi_max, int(np.count_nonzero(s >= cutoff)))
    kept = float(np.sum(s[:keep] ** 2))
    discarded = max(total - kept, 0.0) / total
    return TruncatedSvd(u=u[:, :keep], s=s[:keep], vh=vh[:keep], discarded_weight=discarded)


# ── Canonical form ────────────────────────────────────────────────────────────

def _hermitian_fix(x: np.ndarray) -> np.ndarray:
    """Strip the arbitrary phase of an eigen-matrix and return its hermitian, trace-positive part."""
    tr = np.trace(x)
    ref = tr if abs(tr) > 1e-300 else x.flat[np.argmax(np.abs(x))]
    x = x * (abs(ref) / ref)
    x = 0.5 * (x + x.conj().T)
    return x if np.trace(x).real >= 0 else -x


def _transfer_fixed_point(g: np.ndarray, side: str, guess: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Dominant fixed point of X ↦ Σ_s G_s X G_s† (right) or X ↦ Σ_s G_s† X G_s (left)."""
    chi = g.shape[0]
    n = chi * chi
    if chi <= _DENSE_FIXED_POINT_CHI:
        if side == "right":
            t = np.einsum("asb,dsc->adbc", g, g.conj()).reshape(n, n)
        else:
            t = np.einsum("asb,csd->bdac", g.conj(), g).reshape(n, n)
        w, v = np.linalg.eig(t)
        i = int(np.argmax(np.abs(w)))
        value, vec = w[i], v[:, i]
    else:
        if side == "right":
            def matvec(x):
                return np.einsum("asb,bc,dsc->ad", g, x.reshape(chi, chi), g.conj(), optimize=True).ravel()
        else:
            def matvec(x):
                return np.einsum("asb,ac,csd->bd", g.conj(), x.reshape(chi, chi), g, optimize=True).ravel()
        op = LinearOperator((n, n), matvec=matvec, dtype=complex)
        v0 = (guess if guess is not None and guess.shape == (chi, chi) else np.eye(chi)).astype(complex).ravel()
        try:
            w, v = eigs(op, k=1, which="LM", v0=v0, tol=1e-13, maxiter=10 * n)
        except (ArpackNoConvergence, ArpackError) as e:
            raise CanonicalizationError(f"transfer fixed point did not converge at χ={chi}: {e}") from e
        value, vec = w[0], v[:, 0]
    if not np.isfinite(value) or abs(value) == 0.0:
        raise CanonicalizationError(f"degenerate transfer operator at χ={chi} (eigenvalue {value})")
    return float(abs(value)), _hermitian_fix(vec.reshape(chi, chi))


def _psd_factor(x: np.ndarray, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    """X = F F† restricted to eigenvalues above cutoff·max; returns (F, F⁺)."""
    vals, vecs = np.linalg.eigh(x)
    keep = vals > cutoff * vals.max()
    if not np.any(keep):
        raise CanonicalizationError("fixed point has no positive spectrum")
    root = np.sqrt(vals[keep])
    vecs = vecs[:, keep]
    return vecs * root[None, :], (vecs.conj().T) / root[:, None]


def _canonicalize(gammas: list[np.ndarray], lams: list[np.ndarray]) -> None:
    """Restore Vidal form of the two-site cell in place (λ_AB = lams[0], λ_BA = lams[1])."""
    ga, gb = gammas
    chi, d_a, _ = ga.shape
    d_b = gb.shape[1]
    g = np.einsum("asb,b,btc->astc", ga, lams[0], gb).reshape(chi, d_a * d_b, chi) * lams[1][None, None, :]

    eta, right = _transfer_fixed_point(g, "right")
    _, left = _transfer_fixed_point(g, "left")
    x, x_inv = _psd_factor(right, SVD_FLOOR)
    y_dag, y_dag_inv = _psd_factor(left, SVD_FLOOR)
    y, y_inv = y_dag.conj().T, y_dag_inv.conj().T

    u, lam, vh = _full_svd(y @ x)
    keep = lam > SVD_FLOOR * lam[0]
    u, lam, vh = u[:, keep], lam[keep], vh[keep]
    gamma = np.einsum("ij,jsk,kl->isl", vh @ x_inv, g, y_inv @ u, optimize=True) / np.sqrt(eta)

    chi_new = lam.size
    theta = (lam[:, None, None] * gamma * lam[None, None, :]).reshape(chi_new * d_a, d_b * chi_new)
    ua, s, vb = _full_svd(theta)
    keep = s > SVD_FLOOR * s[0]
    ua, s, vb = ua[:, keep], s[keep], vb[keep]
    r = s.size
    inv = 1.0 / lam
    gammas[0] = inv[:, None, None] * ua.reshape(chi_new, d_a, r)
    gammas[1] = vb.reshape(r, d_b, chi_new) * inv[None, None, :]
    lams[0] = s / np.linalg.norm(s)
    lams[1] = lam / np.linalg.norm(lam)


# ── Layers ────────────────────────────────────────────────────────────────────

def _apply_layer(gammas: list[np.ndarray], lams: list[np.ndarray], left: int, weights: np.ndarray,
                 policy: TruncationPolicy, layer: int) -> float:
    """Apply one b(k) layer on the bond to the right of site `left`; returns the discarded weight."""
    right = 1 - left
    outer = lams[right]
    theta = np.einsum("a,asb,b,btc,c->astc", outer, gammas[left], lams[left], gammas[right], outer,
                      optimize=True)
    theta = theta.transpose(0, 2, 1, 3) * weights[None, :, :, None]
    chi_out, d_beta, d_alpha, _ = theta.shape
    rng = np.random.default_rng(policy.seed + layer)
    svd = truncated_svd(theta.reshape(chi_out * d_beta, d_alpha * chi_out), policy, rng, layer=layer)
    inv = 1.0 / np.maximum(outer, SVD_FLOOR * outer.max())
    gammas[left] = inv[:, None, None] * svd.u.reshape(chi_out, d_beta, svd.rank)
    gammas[right] = svd.vh.reshape(svd.rank, d_alpha, chi_out) * inv[None, None, :]
    lams[left] = svd.s / np.linalg.norm(svd.s)
    return svd.discarded_weight


# ── Uniform MPO ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class UniformInfluenceMPO:
    f_e: np.ndarray                  # (χ, D, χ) even steps
    f_o: np.ndarray                  # (χ, D, χ) odd steps
    v_l: np.ndarray | None
    v_r: np.ndarray | None
    n_c: int
    dt: float
    carries_zero_index: bool         # index 0 of f is the decoupled line
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def chi(self) -> int:
        return self.f_e.shape[0]

    @property
    def dim(self) -> int:
        return self.f_e.shape[1] - int(self.carries_zero_index)

    @property
    def has_boundaries(self) -> bool:
        return self.v_l is not None and self.v_r is not None

    def physical(self) -> tuple[np.ndarray, np.ndarray]:
        if self.carries_zero_index:
            return self.f_e[:, 1:, :], self.f_o[:, 1:, :]
        return self.f_e, self.f_o

    def to_bytes(self) -> bytes:
        if not self.has_boundaries:
            raise ValueError("attach boundary vectors before serializing")
        meta = json.dumps({"carries_zero_index": self.carries_zero_index, **self.meta},
                          sort_keys=True, default=str).encode()
        header = _MPO_HEADER.pack(_MPO_MAGIC, _MPO_VERSION, self.chi, self.f_e.shape[1], self.n_c,
                                  self.dt, len(meta))
        arrays = [np.ascontiguousarray(a, dtype="<c16").tobytes()
                  for a in (self.f_e, self.f_o, self.v_l, self.v_r)]
        return header + meta + b"".join(arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "UniformInfluenceMPO":
        magic, version, chi, dim, n_c, dt, meta_len = _MPO_HEADER.unpack_from(blob)
        if magic != _MPO_MAGIC:
            raise ValueError(f"not a uniform MPO file (magic {magic!r})")
        if version != _MPO_VERSION:
            raise ValueError(f"unsupported MPO format version {version}")
        offset = _MPO_HEADER.size
        meta = json.loads(blob[offset:offset + meta_len].decode())
        offset += meta_len

        def take(shape):
            nonlocal offset
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<c16", count=count, offset=offset).reshape(shape)
            offset += 16 * count
            return arr.astype(complex)

        f_e, f_o = take((chi, dim, chi)), take((chi, dim, chi))
        v_l, v_r = take((chi,)), take((chi,))
        zero = bool(meta.pop("carries_zero_index"))
        return cls(f_e=f_e, f_o=f_o, v_l=v_l, v_r=v_r, n_c=n_c, dt=dt, carries_zero_index=zero, meta=meta)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def to_json(self) -> str:
        """Human-readable summary; tensors are not included."""
        return json.dumps({"chi": self.chi, "dim": self.dim, "n_c": self.n_c, "dt": self.dt,
                           "has_boundaries": self.has_boundaries, **self.meta},
                          indent=2, sort_keys=True, default=str)


def itebd_contract(gates: InfluenceGateSet, policy: TruncationPolicy | None = None) -> UniformInfluenceMPO:
    """Contract the gate network layer by layer into the uniform two-site MPO (no boundaries yet)."""
    policy = policy or TruncationPolicy()
    d_full, d_cls = gates.dim, gates.num_classes
    dims = (d_full, d_cls) if gates.n_c % 2 == 0 else (d_cls, d_full)
    gammas = [np.ones((1, dims[0], 1), dtype=complex), np.ones((1, dims[1], 1), dtype=complex)]
    lams = [np.ones(1), np.ones(1)]

    layer_weights: list[float] = []
    max_chi = 1
    for k in range(gates.n_c, 0, -1):
        left = 0 if k % 2 == 0 else 1
        layer_weights.append(_apply_layer(gammas, lams, left, gates.ik[k - 1], policy, layer=k))
        if policy.recanonicalize:
            _canonicalize(gammas, lams)
        max_chi = max(max_chi, lams[0].size, lams[1].size)
        logger.debug(f"[tempo] layer {k}: χ_AB={lams[0].size} χ_BA={lams[1].size} "
                     f"discarded={layer_weights[-1]:.3e}")

    ga, gb = gammas
    m = np.einsum("anb,b,bnc,c->anc", ga, lams[0], gb[:, gates.class_of, :], lams[1], optimize=True)
    f_e = gates.i0_even[None, :, None] * m
    f_o = gates.i0_odd[None, :, None] * m

    if gates.augmented:
        scale, _, _ = dominant_eigenpair(m[:, 0, :])
        f_e, f_o = f_e / scale, f_o / scale
    else:
        z = int(np.nonzero(gates.class_of == gates.layout.zero_class)[0][0])
        scale, _, _ = dominant_eigenpair(f_e[:, z, :] @ f_o[:, z, :])
        root = np.sqrt(scale)
        f_e, f_o = f_e / root, f_o / root

    total = float(np.sum(layer_weights))
    logger.info(f"[tempo] iTEBD done: N_c={gates.n_c} χ={m.shape[0]} (peak {max_chi}) "
                f"discarded={total:.3e}")
    meta = {
        "policy": policy.to_dict(),
        "layer_discarded": layer_weights[::-1],     # entry k-1 ↔ layer k
        "discarded_weight": total,
        "scale": complex(scale),
        "peak_chi": max_chi,
        **gates.meta,
    }
    return UniformInfluenceMPO(f_e=f_e, f_o=f_o, v_l=None, v_r=None, n_c=gates.n_c,
                               dt=float(gates.meta.get("dt", 0.0)), carries_zero_index=gates.augmented,
                               meta=meta)


# ── Boundaries ────────────────────────────────────────────────────────────────

def power_iteration(mat: np.ndarray, tol: float = BOUNDARY_TOL, max_iters: int = BOUNDARY_MAX_ITERS,
                    v0: np.ndarray | None = None) -> tuple[complex, np.ndarray]:
    n = mat.shape[0]
    v = (np.ones(n, dtype=complex) if v0 is None else np.asarray(v0, dtype=complex)).copy()
    v /= np.linalg.norm(v)
    for _ in range(max_iters):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm == 0.0 or not np.isfinite(norm):
            raise BoundaryError("power iteration collapsed")
        value = np.vdot(v, w)
        w = w / norm
        overlap = np.vdot(v, w)
        if abs(overlap) > 0:
            w = w * (abs(overlap) / overlap)
        if np.linalg.norm(w - v) < tol:
            return complex(value), w
        v = w
    raise BoundaryError(f"power iteration did not converge in {max_iters} iterations")


def dominant_eigenpair(mat: np.ndarray, *, dense: bool | None = None) -> tuple[complex, np.ndarray, np.ndarray]:
    """(λ, left, right) of the largest-modulus eigenvalue with leftᵀ·right = 1."""
    mat = np.asarray(mat, dtype=complex)
    n = mat.shape[0]
    if dense is None:
        dense = n <= DENSE_EIG_LIMIT
    if dense:
        w, vl, vr = scipy.linalg.eig(mat, left=True, right=True)
        order = np.argsort(-np.abs(w))
        if n > 1 and abs(w[order[0]]) - abs(w[order[1]]) <= EIGEN_GAP_TOL * abs(w[order[0]]):
            raise BoundaryError(f"dominant eigenvalue is degenerate: |λ₁|={abs(w[order[0]]):.6e}, "
                                f"|λ₂|={abs(w[order[1]]):.6e}")
        value = w[order[0]]
        left, right = vl[:, order[0]].conj(), vr[:, order[0]]
    else:
        value, right = power_iteration(mat)
        _, left = power_iteration(mat.T)
    overlap = left @ right
    if abs(overlap) < 1e-300:
        raise BoundaryError("left and right dominant eigenvectors are orthogonal")
    return complex(value), left / overlap, right


def _system_traced_transfer(mpo: UniformInfluenceMPO, couplings: CouplingSet) -> np.ndarray:
    layout = build_layout(couplings)
    f_e, f_o = mpo.physical()
    if f_e.shape[1] != layout.size:
        raise BoundaryError(f"MPO index dimension {f_e.shape[1]} does not match couplings ({layout.size})")
    d = couplings.dim
    vec_id = np.eye(d, dtype=complex).ravel()
    k_o = projector_superoperators(couplings, layout, "odd")
    k_e = projector_superoperators(couplings, layout, "even")
    x_o = np.einsum("amb,mst,t->asb", f_o, k_o, vec_id, optimize=True)
    return np.einsum("amc,mut,u,ctb->ab", f_e, k_e, vec_id, x_o, optimize=True) / d


def boundary_vectors(mpo: UniformInfluenceMPO, mode: str = "product", *,
                     couplings: CouplingSet | None = None, dense: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
    """v_l, v_r with v_l·v_r = 1.

    product:    dominant eigenvectors of the decoupled-index slice (bath starts uncorrelated)
    stationary: dominant eigenvectors of the system-traced double step q
    """
    if mode == "product":
        if not mpo.carries_zero_index:
            raise BoundaryError("product boundaries need the zero index (build gates with augment_zero_index)")
        _, left, right = dominant_eigenpair(mpo.f_e[:, 0, :], dense=dense)
    elif mode == "stationary":
        if couplings is None:
            raise BoundaryError("stationary boundaries need the coupling set")
        _, left, right = dominant_eigenpair(_system_traced_transfer(mpo, couplings), dense=dense)
    else:
        raise ConfigError(f"unknown boundary mode {mode!r}")
    return left, right


def with_boundaries(mpo: UniformInfluenceMPO, v_l: np.ndarray, v_r: np.ndarray) -> UniformInfluenceMPO:
    """Attach boundaries and drop the decoupled index."""
    f_e, f_o = mpo.physical()
    return UniformInfluenceMPO(f_e=np.ascontiguousarray(f_e), f_o=np.ascontiguousarray(f_o),
                               v_l=np.asarray(v_l, dtype=complex), v_r=np.asarray(v_r, dtype=complex),
                               n_c=mpo.n_c, dt=mpo.dt, carries_zero_index=False, meta=dict(mpo.meta))


def contract_influence(gates: InfluenceGateSet, policy: TruncationPolicy | None = None, *,
                       boundary: str = "product", couplings: CouplingSet | None = None) -> UniformInfluenceMPO:
    mpo = itebd_contract(gates, policy)
    v_l, v_r = boundary_vectors(mpo, boundary, couplings=couplings)
    out = with_boundaries(mpo, v_l, v_r)
    out.meta["boundary"] = boundary
    return out


def mpo_evaluate(mpo: UniformInfluenceMPO, sequence: Sequence[int]) -> complex:
    """F(μ_1, …, μ_N) from the MPO; `sequence` is in time order and N must be even."""
    if not mpo.has_boundaries:
        raise BoundaryError("MPO has no boundary vectors")
    seq = [int(mu) for mu in sequence]
    if len(seq) % 2:
        raise ValueError(f"sequence length must be even, got {len(seq)}")
    f_e, f_o = mpo.physical()
    if any(mu < 0 or mu >= f_e.shape[1] for mu in seq):
        raise IndexError(f"index outside 0..{f_e.shape[1] - 1}")
    w = mpo.v_r
    for n, mu in enumerate(seq, start=1):
        w = (f_o if n % 2 else f_e)[:, mu, :] @ w
    return complex(mpo.v_l @ w)
