from __future__ import annotations

import numpy as np
import pytest

from src.bathkernel import ExponentialSumBcf, ExpTerm, discretize_kernel, make_damped_mode_bcf
from src.couplings import SIGMA_X, SIGMA_Y, SIGMA_Z, analyze_couplings, build_layout
from src.ifcore import (
    InfluenceSizeError,
    build_gates,
    build_I0,
    build_Ik,
    dense_influence,
    influence_entries,
    influence_entry,
    parity_matrix,
)
from tests.conftest import single_exponential


@pytest.fixture
def jc_setup():
    kernel = discretize_kernel(make_damped_mode_bcf(0.9, 1.1, 0.5, 0.3), 0.1, n_c=3)
    return kernel, build_layout(analyze_couplings([SIGMA_X, SIGMA_Y]))


def test_parity_matrix_orders():
    odd = parity_matrix(3, "odd")
    np.testing.assert_array_equal(odd, np.tril(np.ones((3, 3)), -1))
    np.testing.assert_array_equal(parity_matrix(3, "even"), odd.T)
    np.testing.assert_array_equal(parity_matrix(3, "odd", odd_forward=False), odd.T)
    with pytest.raises(ValueError):
        parity_matrix(2, "sideways")


def test_memory_gate_is_one_without_difference(jc_setup):
    kernel, layout = jc_setup
    ik = build_Ik(kernel, layout, 2)
    zero = layout.class_members(layout.zero_class)
    np.testing.assert_allclose(ik[zero], 1.0)


def test_memory_gate_rows_follow_classes(jc_setup):
    kernel, layout = jc_setup
    ik = build_Ik(kernel, layout, 1)
    for c in range(layout.num_classes):
        members = layout.class_members(c)
        np.testing.assert_array_equal(ik[members], np.broadcast_to(ik[members[0]], ik[members].shape))


def test_single_channel_local_term_needs_no_correction():
    kernel = discretize_kernel(single_exponential(0.4, 0.7, 1.0), 0.2, n_c=2)
    layout = build_layout(analyze_couplings([SIGMA_Z]))
    for parity in ("odd", "even"):
        np.testing.assert_allclose(build_I0(kernel, layout, parity),
                                   build_I0(kernel, layout, parity, trotter_corrections=False), rtol=1e-14)


def test_local_term_is_one_on_population_indices():
    kernel = discretize_kernel(single_exponential(0.4, 0.7, 1.0), 0.2, n_c=2)
    layout = build_layout(analyze_couplings([SIGMA_Z]))
    i0 = build_I0(kernel, layout, "odd")
    for i in range(2):
        assert i0[layout.flatten((i,), (i,))] == pytest.approx(1.0, abs=1e-15)


def test_non_commuting_parities_differ(jc_setup):
    kernel, layout = jc_setup
    assert not np.allclose(build_I0(kernel, layout, "odd"), build_I0(kernel, layout, "even"))


def test_augmented_gates(jc_setup):
    kernel, layout = jc_setup
    gates = build_gates(kernel, layout)
    assert gates.dim == layout.size + 1
    assert gates.gate_count == kernel.n_c + 2
    np.testing.assert_allclose(gates.ik[:, :, 0], 1.0)
    assert gates.i0_even[0] == 1.0 and gates.i0_odd[0] == 1.0
    plain = build_gates(kernel, layout, augment_zero_index=False)
    np.testing.assert_array_equal(plain.expanded_ik(2), build_Ik(kernel, layout, 2))


def test_dense_gate_layout(jc_setup):
    kernel, layout = jc_setup
    gates = build_gates(kernel, layout, augment_zero_index=False)
    b = gates.gate(1)
    ik = gates.expanded_ik(1)
    assert b[3, 5, 5, 3] == ik[5, 3]
    assert b[3, 5, 3, 5] == 0.0


def test_dense_matches_entries(jc_setup, rng):
    kernel, layout = jc_setup
    dense = dense_influence(kernel, layout, 4)
    seqs = rng.integers(0, layout.size, size=(20, 4))
    np.testing.assert_allclose(influence_entries(kernel, layout, seqs), dense[tuple(seqs.T)], rtol=1e-12)


def test_zero_bath_is_trivial():
    bcf = ExponentialSumBcf([ExpTerm(np.zeros((1, 1)), 0.0, 1.0)])
    kernel = discretize_kernel(bcf, 0.1, n_c=2)
    layout = build_layout(analyze_couplings([SIGMA_Z]))
    np.testing.assert_allclose(dense_influence(kernel, layout, 4), 1.0)


def test_memory_beyond_cutoff_is_dropped():
    bcf = single_exponential(0.5, 0.0, 0.2)
    layout = build_layout(analyze_couplings([SIGMA_Z]))
    short = discretize_kernel(bcf, 0.1, n_c=1)
    long = discretize_kernel(bcf, 0.1, n_c=3)
    seq = [2, 1, 2, 1]
    assert influence_entry(short, layout, seq) != pytest.approx(influence_entry(long, layout, seq))
    # with a single step apart only η₁ enters
    assert influence_entry(short, layout, seq[:2]) == pytest.approx(influence_entry(long, layout, seq[:2]))


def test_dense_size_guards(jc_setup):
    kernel, layout = jc_setup
    with pytest.raises(ValueError):
        dense_influence(kernel, layout, 3)
    with pytest.raises(InfluenceSizeError):
        dense_influence(kernel, layout, 8)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_weak_memory_gates_approach_swaps(k):
    cs = analyze_couplings([SIGMA_Z])
    layout = build_layout(cs)
    kernel = discretize_kernel(single_exponential(1e-3, 0.4, 1.0), 0.1, n_c=4)
    eta_max = float(np.max(np.abs(kernel.eta_k(k))))
    spread = float(np.ptp(np.linalg.eigvalsh(SIGMA_Z)))
    bound = 2 * layout.size * eta_max * spread ** 2 * np.exp(2 * eta_max * spread ** 2)
    ik = build_Ik(kernel, layout, k)
    assert np.linalg.norm(ik - 1.0, 2) <= bound
    gates = build_gates(kernel, layout, augment_zero_index=False)
    d = gates.dim
    eye = np.eye(d)
    swap = np.einsum("am,bn->mbna", eye, eye).reshape(d * d, d * d)
    assert np.linalg.norm(gates.gate(k).reshape(d * d, d * d) - swap, 2) <= bound


def test_ones_pass_through_gates_beyond_memory():
    layout = build_layout(analyze_couplings([SIGMA_Z]))
    # correlations die within one step
    kernel = discretize_kernel(single_exponential(1.0, 0.0, 400.0), 0.1, n_c=4)
    gates = build_gates(kernel, layout)
    x = gates.x
    for k in range(2, kernel.n_c + 1):
        np.testing.assert_allclose(np.einsum("mbna,n,a->mb", gates.gate(k), x, x), 1.0, atol=1e-12)
    assert np.max(np.abs(np.einsum("mbna,n,a->mb", gates.gate(1), x, x) - 1.0)) > 1e-8
