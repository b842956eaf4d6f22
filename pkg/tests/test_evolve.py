from __future__ import annotations

import json

import numpy as np
import pytest

from src.bathkernel import ExponentialSumBcf, ExpTerm, make_damped_mode_bcf, make_lattice_bcf
from src.couplings import SIGMA_X, SIGMA_Y, SIGMA_Z, build_layout, embed
from src.errors import ConfigError
from src.evolve import (
    SteadyStateError,
    SystemChannel,
    check_state,
    fdt_residual,
    propagate,
    spectra,
    steady_state,
    two_time_correlator,
)
from src.ifcore import influence_entry
from src.tempo import TruncationPolicy
from tests.conftest import build_system, single_exponential

UP = np.diag([1.0, 0.0]).astype(complex)
PLUS = 0.5 * np.ones((2, 2), dtype=complex)


def _zero_bath():
    return ExponentialSumBcf([ExpTerm(np.zeros((1, 1)), 0.0, 1.0)])


class TestStates:
    def test_check_state(self):
        check_state(UP)
        with pytest.raises(ValueError):
            check_state(2 * UP)
        with pytest.raises(ValueError):
            check_state(np.array([[0.5, 1.0], [0.0, 0.5]]))
        with pytest.raises(ValueError):
            check_state(np.diag([1.5, -0.5]))

    def test_system_channel_validation(self):
        with pytest.raises(ConfigError):
            SystemChannel.from_hamiltonian(SIGMA_Y + 1j * np.eye(2), 0.1)
        with pytest.raises(ValueError):
            SystemChannel.from_hamiltonian(SIGMA_X, 0.0)


class TestPropagation:
    def test_free_rabi_oscillation(self):
        omega = 1.3
        prop, u, bnd, *_ = build_system(_zero_bath(), [SIGMA_Z], 0.5 * omega * SIGMA_X, 0.05, 2)
        assert prop.chi == 1
        traj = propagate(UP, prop, u, 40, bnd, observables={"sigma_z": SIGMA_Z})
        np.testing.assert_allclose(traj.observables["sigma_z"].real, np.cos(omega * traj.times), atol=1e-10)
        assert traj.times[1] == pytest.approx(0.1)

    def test_pure_dephasing_keeps_populations(self):
        prop, u, bnd, *_ = build_system(single_exponential(0.4, 0.3, 1.0), [SIGMA_Z], np.zeros((2, 2)), 0.1, 4)
        traj = propagate(UP, prop, u, 20, bnd, observables={"sigma_z": SIGMA_Z})
        np.testing.assert_allclose(traj.observables["sigma_z"], 1.0, atol=1e-8)
        assert traj.diagnostics["trace_deviation"].max() < 1e-8

    def test_dephasing_coherence_matches_influence(self):
        bcf = single_exponential(0.4, 0.3, 1.0)
        prop, u, bnd, _, kernel, cs = build_system(bcf, [SIGMA_Z], np.zeros((2, 2)), 0.1, 4)
        traj = propagate(PLUS, prop, u, 6, bnd)
        mu = build_layout(cs).flatten((0,), (1,))
        for n in (1, 3, 6):
            expected = 0.5 * influence_entry(kernel, build_layout(cs), [mu] * (2 * n))
            assert traj.states[n, 0, 1] == pytest.approx(expected, abs=1e-8)

    def test_commuting_channels_collapse(self):
        # two copies of σ_z coupled to correlated noise behave as one channel with the summed correlation
        c = np.array([[0.2, 0.05], [0.05, 0.1]])
        two = ExponentialSumBcf([ExpTerm(c, 0.4, 1.0)])
        one = single_exponential(float(c.sum()), 0.4, 1.0)
        h = 0.5 * SIGMA_X
        a = build_system(two, [SIGMA_Z, SIGMA_Z], h, 0.1, 3, trotter_corrections=False)
        b = build_system(one, [SIGMA_Z], h, 0.1, 3, trotter_corrections=False)
        ta = propagate(UP, *a[:2], 10, a[2])
        tb = propagate(UP, *b[:2], 10, b[2])
        np.testing.assert_allclose(ta.states, tb.states, atol=1e-8)

    def test_degenerate_couplings_merge_invisibly(self):
        s = np.diag([1.0, 1.0, -1.0]).astype(complex)
        h = np.array([[0.0, 0.3, 0.1], [0.3, 0.2, 0.4], [0.1, 0.4, -0.1]], dtype=complex)
        psi = np.ones(3) / np.sqrt(3)
        rho0 = np.outer(psi, psi).astype(complex)
        bcf = single_exponential(0.3, 0.2, 1.0)
        merged = build_system(bcf, [s], h, 0.1, 2)
        split = build_system(bcf, [s], h, 0.1, 2, merge_degenerate=False)
        assert merged[5].ranks == (2,) and split[5].ranks == (3,)
        ta = propagate(rho0, *merged[:2], 8, merged[2])
        tb = propagate(rho0, *split[:2], 8, split[2])
        np.testing.assert_allclose(ta.states, tb.states, atol=1e-12)

    def test_two_emitters_exchange_through_lattice(self):
        ops = [embed(op, site, 2) for site in (0, 1) for op in (SIGMA_X, SIGMA_Y)]
        rho0 = np.kron(UP, np.diag([0.0, 1.0])).astype(complex)
        policy = TruncationPolicy(chi_max=16, eps_rel=1e-10)
        pop_b = {}
        for separation in (1, 3):
            bcf = make_lattice_bcf(1, 1.0, 0.5, [[0], [separation]])
            prop, u, bnd, *_ = build_system(bcf, ops, np.zeros((4, 4)), 0.2, 2, policy=policy)
            traj = propagate(rho0, prop, u, 6, bnd, observables={"pop_b": embed(UP, 1, 2)})
            assert np.max(traj.diagnostics["trace_deviation"]) < 1e-3
            pop_b[separation] = float(np.max(traj.observables["pop_b"].real))
        # the hopping amplitude to a site n away starts at order t^n
        assert pop_b[1] > 1e-5
        assert pop_b[1] > 10 * pop_b[3]

    def test_dimension_mismatch(self):
        prop, _, bnd, *_ = build_system(_zero_bath(), [SIGMA_Z], np.zeros((2, 2)), 0.1, 2)
        u3 = SystemChannel.from_hamiltonian(np.zeros((3, 3)), 0.1)
        with pytest.raises(ConfigError):
            propagate(UP, prop, u3, 2, bnd)

    def test_outputs(self, tmp_path):
        prop, u, bnd, *_ = build_system(_zero_bath(), [SIGMA_Z], 0.5 * SIGMA_X, 0.1, 2)
        traj = propagate(UP, prop, u, 3, bnd, observables={"sigma_z": SIGMA_Z})
        traj.to_csv(tmp_path / "t.csv", comment="config: {}")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "# config: {}"
        assert lines[1] == "t,sigma_z_re,sigma_z_im"
        assert len(lines) == 2 + 4
        traj.to_json(tmp_path / "t.json")
        doc = json.loads((tmp_path / "t.json").read_text())
        assert len(doc["times"]) == 4


class TestStationary:
    @pytest.fixture
    def relaxing(self):
        # weakly damped σ_x, σ_y coupling to a single lossy mode, driven spin
        return build_system(make_damped_mode_bcf(0.5, 0.0, 1.0, 0.0), [SIGMA_X, SIGMA_Y], 0.5 * SIGMA_X, 0.1, 8)

    def test_steady_state_is_a_fixed_point(self, relaxing):
        prop, u, bnd, *_ = relaxing
        ss = steady_state(prop, u, bnd)
        assert np.trace(ss.rho) == pytest.approx(1.0, abs=1e-10)
        again = prop.double_step(ss.bond_state, u)
        np.testing.assert_allclose(bnd.v_l @ again, bnd.v_l @ ss.bond_state, atol=1e-8)

    def test_conserved_populations_have_no_unique_steady_state(self):
        prop, u, bnd, *_ = build_system(single_exponential(0.4, 0.3, 1.0), [SIGMA_Z], np.zeros((2, 2)), 0.1, 2)
        with pytest.raises(SteadyStateError):
            steady_state(prop, u, bnd)

    def test_closed_system_has_no_unique_steady_state(self):
        prop, u, bnd, *_ = build_system(_zero_bath(), [SIGMA_Z], 0.5 * SIGMA_Z, 0.1, 2)
        with pytest.raises(SteadyStateError):
            steady_state(prop, u, bnd)

    def test_correlator_at_equal_times(self, relaxing):
        prop, u, bnd, *_ = relaxing
        ss = steady_state(prop, u, bnd)
        a, b = SIGMA_Z, SIGMA_X
        ab = two_time_correlator(a, b, prop, u, bnd, 3, ss)
        ba = two_time_correlator(a, b, prop, u, bnd, 3, ss, order="BA")
        assert ab[0] == pytest.approx(np.trace(a @ b @ ss.rho), abs=1e-9)
        assert ba[0] == pytest.approx(np.trace(b @ a @ ss.rho), abs=1e-9)

    def test_correlator_needs_steady_state(self, relaxing):
        prop, u, bnd, *_ = relaxing
        with pytest.raises(SteadyStateError):
            two_time_correlator(SIGMA_Z, SIGMA_Z, prop, u, bnd, 3)

    def test_spectra_sum_rule(self, relaxing):
        prop, u, bnd, *_ = relaxing
        ss = steady_state(prop, u, bnd)
        step = 2 * u.dt
        omega = np.linspace(-np.pi / step, np.pi / step, 2001)[:-1]
        spec = spectra(prop, u, bnd, omega, op=SIGMA_Z, steady=ss)
        # ∫ S dω / 2π over the Brillouin zone returns the connected equal-time value
        connected = np.trace(SIGMA_Z @ SIGMA_Z @ ss.rho).real - np.trace(SIGMA_Z @ ss.rho).real ** 2
        assert np.mean(spec.s_zz) / step == pytest.approx(connected, rel=1e-6)
        assert np.all(np.abs(spec.eigenvalues) <= 1.0 + 1e-8)

    def test_weakly_damped_spectrum_peaks_at_transition(self):
        # H = 0.5 σ_x splits the levels by 1; σ_z only connects the two eigenstates
        prop, u, bnd, *_ = build_system(make_damped_mode_bcf(0.1, 0.0, 1.0, 0.0), [SIGMA_X, SIGMA_Y],
                                        0.5 * SIGMA_X, 0.1, 8)
        omega = np.linspace(-2.0, 2.0, 81)
        spec = spectra(prop, u, bnd, omega, op=SIGMA_Z)
        bin_width = omega[1] - omega[0]
        for sign in (1.0, -1.0):
            side = sign * omega > 0.5
            peak = omega[side][np.argmax(spec.s_zz[side])]
            assert abs(peak - sign) <= bin_width + 1e-12

    def test_fdt_residual_masks_zero_frequency(self):
        omega = np.linspace(-1.0, 1.0, 21)
        s = np.ones_like(omega)
        chi = 0.5j * np.ones_like(omega)
        res = fdt_residual(omega, s, chi, np.inf)
        assert np.all(np.isnan(res[np.abs(omega) < 0.25]))
        assert res[-1] == pytest.approx(0.0)
        assert np.all(np.isfinite(res[np.abs(omega) > 0.35]))
