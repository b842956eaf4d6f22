from __future__ import annotations
import os

# ── Truncation ───────────────────────────────────────────────────────────────
EPS_REL = float(os.getenv("UNITEMPO_EPS_REL", "1e-10"))
CHI_MAX = int(os.getenv("UNITEMPO_CHI_MAX", "512"))
SKETCH_OVERSAMPLE = int(os.getenv("UNITEMPO_SKETCH_OVERSAMPLE", "8"))
SKETCH_POWER_ITERS = int(os.getenv("UNITEMPO_SKETCH_POWER_ITERS", "2"))
SVD_FLOOR = float(os.getenv("UNITEMPO_SVD_FLOOR", "1e-14"))   # numerical zero, relative to σ_1

# ── Spectral analysis of couplings ───────────────────────────────────────────
DEGENERACY_TOL = float(os.getenv("UNITEMPO_DEGENERACY_TOL", "1e-9"))
HERMITIAN_TOL = float(os.getenv("UNITEMPO_HERMITIAN_TOL", "1e-12"))
CLASS_TOL = 1e-12

# ── Kernel discretization ────────────────────────────────────────────────────
QUAD_REL_TOL = float(os.getenv("UNITEMPO_QUAD_REL_TOL", "1e-10"))
QUAD_MIN_ORDER = 16
QUAD_MAX_ORDER = 256
MAX_N_C = int(os.getenv("UNITEMPO_MAX_N_C", str(2 ** 17)))

# ── Fixed points ─────────────────────────────────────────────────────────────
BOUNDARY_TOL = float(os.getenv("UNITEMPO_BOUNDARY_TOL", "1e-12"))
BOUNDARY_MAX_ITERS = int(os.getenv("UNITEMPO_BOUNDARY_MAX_ITERS", "100000"))
DENSE_EIG_LIMIT = 256                # χ above this → power iteration only
SPECTRAL_DENSE_LIMIT = 4096          # χ·d² above this → iterative dominant subspace
EIGEN_GAP_TOL = 1e-10

# ── Evolution ────────────────────────────────────────────────────────────────
STEADY_TOL = float(os.getenv("UNITEMPO_STEADY_TOL", "1e-10"))
STEADY_MAX_ITERS = int(os.getenv("UNITEMPO_STEADY_MAX_ITERS", "200000"))
STATE_TOL = 1e-10
STABILITY_TOL = 1e-8

# ── Oracles ──────────────────────────────────────────────────────────────────
FOCK_POPULATION_TOL = 1e-10
FOCK_MAX_DIM = int(os.getenv("UNITEMPO_FOCK_MAX_DIM", "128"))
VOLTERRA_TOL = float(os.getenv("UNITEMPO_VOLTERRA_TOL", "1e-8"))
MODE_FIT_TOL = 1e-6

# ── CLI ──────────────────────────────────────────────────────────────────────
CACHE_DIR = os.getenv("UNITEMPO_CACHE_DIR", ".unitempo_cache")
WORKERS = int(os.getenv("UNITEMPO_WORKERS", "4"))
LOG_LEVEL = os.getenv("UNITEMPO_LOG_LEVEL", "INFO")
CODE_VERSION = "0.3.0"
