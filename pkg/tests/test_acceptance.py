"""Desk-scale reproductions against the reference solvers. Run with `pytest -m slow`."""
from __future__ import annotations

import numpy as np
import pytest

from src.bathkernel import make_damped_mode_bcf, make_lattice_bcf, make_thermal_jc_bcf, ohmic_spectral_density
from src.couplings import SIGMA_X, SIGMA_Y, SIGMA_Z
from src.evolve import propagate, spectra, steady_state, two_time_correlator
from src.oracle import (
    LindbladModel,
    lindblad_correlator,
    lindblad_reference,
    lindblad_steady_state,
    volterra_single_excitation,
)
from src.tempo import TruncationPolicy
from tests.conftest import build_system

pytestmark = pytest.mark.slow

UP = np.diag([1.0, 0.0]).astype(complex)
JC = [SIGMA_X, SIGMA_Y]

# driven emitter coupled to a lossy, incoherently pumped cavity mode (Ω = 1)
RABI = 1.0
G = OMEGA = GAMMA = 2.0
NBAR = 0.25


def _pumped_cavity():
    bcf = make_damped_mode_bcf(G, OMEGA, GAMMA, NBAR)
    model = LindbladModel(omega_drive=RABI, g=G, omega=OMEGA, gamma=GAMMA, nbar=NBAR)
    return bcf, model


def _slope(dts, errors) -> float:
    return float(np.polyfit(np.log(dts), np.log(errors), 1)[0])


def test_quench_matches_master_equation():
    bcf, model = _pumped_cavity()
    dt, t_end = 0.02, 20.0
    prop, u, bnd, *_ = build_system(bcf, JC, 0.5 * RABI * SIGMA_X, dt, 256,
                                    policy=TruncationPolicy(chi_max=48, eps_rel=1e-9))
    assert prop.chi <= 48
    n = int(round(t_end / (2 * dt)))
    ours = propagate(UP, prop, u, n, bnd, observables={"z": SIGMA_Z})
    ref = lindblad_reference(model, 2 * dt, t_end, observables={"z": SIGMA_Z})
    np.testing.assert_allclose(ours.times, ref.times)
    assert np.max(np.abs(ours.observables["z"] - ref.observables["z"])) <= 5e-3


@pytest.mark.parametrize("corrections, band", [(True, (1.8, 2.2)), (False, (0.8, 1.2))])
def test_steady_state_error_scaling(corrections, band):
    bcf, model = _pumped_cavity()
    exact = lindblad_steady_state(model)
    dts = [0.08, 0.04, 0.02, 0.01]
    errors = []
    for dt in dts:
        # memory window of ~10 time units, several bath decay times
        n_c = int(round(10.24 / dt))
        prop, u, bnd, *_ = build_system(bcf, JC, 0.5 * RABI * SIGMA_X, dt, n_c,
                                        policy=TruncationPolicy(chi_max=160, eps_rel=1e-11),
                                        trotter_corrections=corrections)
        ss = steady_state(prop, u, bnd, tol=1e-12)
        errors.append(np.linalg.norm(ss.rho - exact, 2))
    assert band[0] <= _slope(dts, errors) <= band[1]


def test_stationary_correlator_matches_regression():
    bcf = make_damped_mode_bcf(0.5, 0.0, 1.0, 0.0)
    model = LindbladModel(omega_drive=1.0, g=0.5, omega=0.0, gamma=1.0, nbar=0.0)
    dt = 0.02
    prop, u, bnd, *_ = build_system(bcf, JC, 0.5 * SIGMA_X, dt, 512,
                                    policy=TruncationPolicy(chi_max=64, eps_rel=1e-10))
    ss = steady_state(prop, u, bnd)
    ours = two_time_correlator(SIGMA_Z, SIGMA_Z, prop, u, bnd, 100, ss)
    ref = lindblad_correlator(model, SIGMA_Z, SIGMA_Z, 2 * dt, 101)
    assert np.max(np.abs(ours - ref)) <= 1e-3


def test_pumped_cavity_is_not_gibbs():
    bcf, model = _pumped_cavity()
    h = 0.5 * SIGMA_Z
    prop, u, bnd, *_ = build_system(bcf, JC, h, 0.05, 256, policy=TruncationPolicy(chi_max=64, eps_rel=1e-10))
    ss = steady_state(prop, u, bnd)
    gibbs = np.diag(np.exp(-np.diag(h).real))
    gibbs /= np.trace(gibbs)
    assert np.linalg.norm(ss.rho - gibbs, 2) > 10 * 1e-9


class TestDetailedBalance:
    omega = np.linspace(-4.0, 4.0, 161)
    band = (np.abs(omega) >= 0.3) & (np.abs(omega) <= 3.0)

    def _residual(self, bcf, dt, n_c, chi, h_sys=0.5 * SIGMA_Z):
        prop, u, bnd, *_ = build_system(bcf, JC, h_sys, dt, n_c,
                                        policy=TruncationPolicy(chi_max=chi, eps_rel=1e-10))
        ss = steady_state(prop, u, bnd)
        spec = spectra(prop, u, bnd, self.omega, op=SIGMA_Z, beta=1.0, steady=ss)
        return np.nanmax(np.abs(spec.fdt_residual[self.band]))

    @pytest.fixture(scope="class")
    def ohmic(self):
        return make_thermal_jc_bcf(ohmic_spectral_density(0.05, 5.0), beta=1.0)

    @pytest.fixture(scope="class")
    def thermal(self, ohmic):
        return self._residual(ohmic, 0.05, 4096, 96)

    def test_ohmic_bath_obeys_fdt(self, thermal):
        assert thermal <= 0.05

    def test_transverse_field_stays_in_equilibrium(self, ohmic):
        # a static σ_x term keeps the total Hamiltonian time independent
        h_sys = 0.5 * SIGMA_Z + 0.5 * RABI * SIGMA_X
        assert self._residual(ohmic, 0.05, 4096, 96, h_sys=h_sys) <= 0.05

    def test_pumped_cavity_breaks_fdt(self, thermal):
        pumped = self._residual(make_damped_mode_bcf(G, OMEGA, GAMMA, NBAR), 0.05, 256, 96)
        assert pumped >= 10 * thermal


class TestLatticeEmitter:
    dt = 0.025
    t_end = 20.0

    @pytest.fixture(scope="class")
    def reference(self):
        bcf = make_lattice_bcf(3, 1.0, np.sqrt(0.1), [(0, 0, 0)])
        return bcf, volterra_single_excitation(bcf, 0.0, self.t_end, 2 * self.dt)

    def _error(self, bcf, reference, chi, eps_rel):
        prop, u, bnd, *_ = build_system(bcf, JC, np.zeros((2, 2)), self.dt, 2048,
                                        policy=TruncationPolicy(chi_max=chi, eps_rel=eps_rel))
        traj = propagate(UP, prop, u, int(round(self.t_end / (2 * self.dt))), bnd)
        occupation = traj.states[:, 0, 0].real
        return float(np.max(np.abs(occupation - reference.occupation)))

    def test_occupation_matches_volterra(self, reference):
        bcf, ref = reference
        assert self._error(bcf, ref, 128, 1e-9) <= 1e-2

    def test_error_falls_with_bond_dimension(self, reference):
        bcf, ref = reference
        errors = [self._error(bcf, ref, chi, 0.0) for chi in (16, 32, 64)]
        assert errors[0] > errors[1] > errors[2]
