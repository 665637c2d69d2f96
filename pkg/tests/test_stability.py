"""Stability criteria: the hesitation inequality and the mode analysis.

The closed-form mode solution is checked against an independent oracle:
the linearized single-mode dynamics form a constant-coefficient 2x2 ODE
in the scaled time eta, so the two-point problem (unit initial density
amplitude, zero terminal total amplitude) can be solved exactly with a
matrix exponential and a one-unknown linear solve.  No formula from the
implementation is reused here.
"""

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.optimize import brentq

from ringflow import (
    DomainError,
    ModelParams,
    ResonanceError,
    arz_linear_stable,
    mfg_boundedness_scan,
    mfg_mode_solution,
    mode_energy,
    reduced_mfg_rhs_check,
    scan_lambdas,
    solve_mfg,
)
from ringflow.core import GridSpec
import ringflow.stability as stability


# --------------------------------------------------- hesitation criterion

def test_criterion_paper_density(params):
    # 40% of jam sits squarely in the unstable band
    assert not arz_linear_stable(0.4 * params.rho_jam, params)


def test_criterion_near_jam(params):
    assert arz_linear_stable(0.99 * params.rho_jam, params)


def test_criterion_domain(params):
    for bad in (0.0, -0.01, params.rho_jam, 1.1 * params.rho_jam):
        with pytest.raises(DomainError):
            arz_linear_stable(bad, params)


def test_criterion_band_edges(params):
    """The unstable band is {s : s(1-s)^3 > (9/60)^2}; bisection on that
    polynomial must agree with the criterion's own sign changes."""
    f = lambda s: s * (1.0 - s) ** 3 - 0.0225
    lo = brentq(f, 1e-4, 0.2, xtol=1e-14)
    hi = brentq(f, 0.4, 0.9, xtol=1e-14)
    assert 0.02 < lo < 0.03 and 0.6 < hi < 0.7
    eps = 1e-10
    assert arz_linear_stable((lo - eps) * params.rho_jam, params)
    assert not arz_linear_stable((lo + eps) * params.rho_jam, params)
    assert not arz_linear_stable((hi - eps) * params.rho_jam, params)
    assert arz_linear_stable((hi + eps) * params.rho_jam, params)


def test_criterion_depends_only_on_occupancy():
    # rescaling rho_jam rescales the band, not the normalized verdicts
    a = ModelParams(rho_jam=1.0 / 7.5)
    b = ModelParams(rho_jam=0.5)
    for s in (0.1, 0.3, 0.5, 0.7, 0.9):
        assert arz_linear_stable(s * a.rho_jam, a) == arz_linear_stable(s * b.rho_jam, b)


# ------------------------------------------------------------ mode oracle

def mode_oracle(rho_bar, lam, eta):
    """Fundamental-matrix solution of the linearized mode dynamics.

    d/deta [rho, u] = M [rho, u],  M = -i [[1-rb, rb], [rb-1, 1-2rb]],
    with rho(0) = 1 and rho(lam) + u(lam) = 0 fixing u(0).
    """
    rb = rho_bar
    M = -1j * np.array([[1.0 - rb, rb], [rb - 1.0, 1.0 - 2.0 * rb]])
    phi_T = expm(M * lam)
    num = phi_T[0, 0] + phi_T[1, 0]
    den = phi_T[0, 1] + phi_T[1, 1]
    u0 = -num / den
    out = np.empty((len(eta), 2), dtype=complex)
    for k, e in enumerate(eta):
        out[k] = expm(M * e) @ np.array([1.0, u0])
    return out[:, 0], out[:, 1]


@pytest.mark.parametrize("rho_bar", [0.15, 0.45, 0.8, 0.92])
@pytest.mark.parametrize("lam", [-6.0, -0.8, 1.3, 7.0])
def test_mode_solution_matches_oracle(rho_bar, lam):
    eta = np.linspace(0.0, lam, 11)
    pair = mfg_mode_solution(rho_bar, lam, eta=eta)
    rho_ref, u_ref = mode_oracle(rho_bar, lam, eta)
    scale = 1.0 + np.abs(rho_ref) + np.abs(u_ref)
    assert np.max(np.abs(pair.rho_hat - rho_ref) / scale) < 1e-8
    assert np.max(np.abs(pair.u_hat - u_ref) / scale) < 1e-8


def test_mode_initial_amplitude():
    for rb, lam in [(0.3, 5.0), (0.8, -2.0), (0.97, 40.0)]:
        pair = mfg_mode_solution(rb, lam, eta=np.array([0.0]))
        assert abs(pair.rho_hat[0] - 1.0) < 1e-12


def test_mode_terminal_condition():
    for rb, lam in [(0.2, 3.0), (0.8, 11.0), (0.7, -9.0)]:
        pair = mfg_mode_solution(rb, lam, eta=np.array([lam]))
        assert abs(pair.rho_hat[0] + pair.u_hat[0]) < 1e-10


def test_mode_branch_continuity():
    """The dedicated double-root branch must join the generic one."""
    eta = np.linspace(0.0, 3.0, 50)
    deg = mfg_mode_solution(0.8, 3.0, eta=eta)
    for rb in (0.8 - 1e-6, 0.8 + 1e-6):
        gen = mfg_mode_solution(rb, 3.0, eta=eta)
        assert np.max(np.abs(gen.rho_hat - deg.rho_hat)) < 1e-4
        assert np.max(np.abs(gen.u_hat - deg.u_hat)) < 1e-4


def test_mode_domain_checks():
    with pytest.raises(DomainError):
        mfg_mode_solution(0.0, 1.0)
    with pytest.raises(DomainError):
        mfg_mode_solution(1.0, 1.0)
    with pytest.raises(DomainError):
        mfg_mode_solution(0.5, 1.0, eta=np.array([-0.5]))
    with pytest.raises(DomainError):
        mfg_mode_solution(0.5, 1.0, eta=np.array([1.5]))


# ------------------------------------------------------------ mode energy

def test_mode_energy_degenerate_horizon():
    # lam = 0 forces u(0) = -rho(0), so the energy is exactly 2
    for rb in (0.25, 0.8, 0.6):
        assert mode_energy(rb, 0.0) == pytest.approx(2.0, abs=1e-12)


def test_mode_energy_at_least_one(rng):
    for _ in range(30):
        rb = rng.uniform(0.05, 0.95)
        lam = rng.uniform(-30.0, 30.0)
        assert mode_energy(rb, lam) >= 1.0 - 1e-12


def test_mode_energy_sign_symmetry(rng):
    """Negative wavenumbers conjugate the mode, leaving energies alone."""
    for _ in range(20):
        rb = rng.uniform(0.05, 0.95)
        lam = rng.uniform(0.1, 50.0)
        assert abs(mode_energy(rb, lam) - mode_energy(rb, -lam)) < 1e-8


def test_mode_energy_eta_refinement(rng):
    for rb, lam in [(0.3, 12.0), (0.8, 35.0), (0.65, -20.0)]:
        e200 = mode_energy(rb, lam, n_eta=200)
        e400 = mode_energy(rb, lam, n_eta=400)
        assert abs(e400 - e200) <= 0.01 * e200


# ------------------------------------------------------- boundedness scan

def test_scan_lambda_grid():
    lams = scan_lambdas(lam_max=100.0, n_log=50, n_lin=11)
    assert np.all(np.diff(lams) > 0)
    assert lams[0] == -100.0 and lams[-1] == 100.0
    assert np.any(lams == 0.0)
    with pytest.raises(DomainError):
        scan_lambdas(lam_max=1e-3)


def test_small_scan_bounded():
    scan = mfg_boundedness_scan([0.3, 0.8], lam_max=100.0,
                                n_log=60, n_lin=11, n_eta=200)
    assert scan.bounded.all()
    assert not scan.skipped.any()
    assert np.nanmax(scan.energies) >= 2.0
    rows = list(scan.as_rows())
    assert len(rows) == scan.energies.size


def test_scan_flags_growing_mode(monkeypatch):
    """A synthetic exponentially growing mode must flip the verdict."""
    monkeypatch.setattr(
        stability, "mode_energy",
        lambda rb, lam, n_eta=400: 2.0 * np.exp(0.01 * abs(lam)),
    )
    scan = stability.mfg_boundedness_scan([0.5], lam_max=1e3,
                                          n_log=40, n_lin=5, n_eta=50)
    assert not scan.bounded.any()


def test_scan_skips_resonances(monkeypatch):
    real_energy = stability.mode_energy

    def spiky(rb, lam, n_eta=400):
        if 3.0 < abs(lam) < 4.0:
            raise ResonanceError("synthetic resonance")
        return real_energy(rb, lam, n_eta=n_eta)

    monkeypatch.setattr(stability, "mode_energy", spiky)
    scan = stability.mfg_boundedness_scan([0.4], lam_max=50.0,
                                          n_log=40, n_lin=5, n_eta=100)
    assert scan.skipped.any()
    assert np.isnan(scan.energies[scan.skipped]).all()
    assert scan.bounded[0]
    # flagged samples never reach the CSV row dump
    assert len(list(scan.as_rows())) == scan.energies.size - scan.skipped.sum()


# --------------------------------------------- reduced-system consistency

def test_reduced_rhs_zero_on_constants():
    rho = np.full((4, 16), 0.37)
    u = np.full((4, 16), 0.63)
    r1, r2 = reduced_mfg_rhs_check(rho, u, dx=0.1, dt=0.05)
    np.testing.assert_array_equal(r1, np.zeros((3, 16)))
    np.testing.assert_array_equal(r2, np.zeros((3, 16)))


def test_reduced_rhs_shape_guard():
    with pytest.raises(DomainError):
        reduced_mfg_rhs_check(np.zeros((3, 8)), np.zeros((4, 8)), 0.1, 0.1)
    with pytest.raises(DomainError):
        reduced_mfg_rhs_check(np.zeros(8), np.zeros(8), 0.1, 0.1)


def _dimensionless_residual(nx):
    """Max reduced-system residual of a converged dimensionless solve."""
    p = ModelParams(u_max=1.0, rho_jam=1.0, tau=3.0)
    grid = GridSpec.build(1.0, 1.0, nx, p)
    rho0 = 0.35 * (1.0 + 0.05 * np.sin(2 * np.pi * np.arange(nx) / nx))
    traj, report = solve_mfg(rho0, grid, p, tol=1e-10)
    assert report.converged
    r1, r2 = reduced_mfg_rhs_check(traj.density, traj.velocity, grid.dx, grid.dt)
    return max(np.max(np.abs(r1)), np.max(np.abs(r2)))


def test_reduced_rhs_consistent_with_solver():
    """The solver's own stencil differs from the centered check, so the
    residual is pure truncation error and must shrink roughly linearly
    under grid refinement."""
    coarse = _dimensionless_residual(24)
    fine = _dimensionless_residual(48)
    assert fine < coarse
    assert coarse / fine > 1.4
