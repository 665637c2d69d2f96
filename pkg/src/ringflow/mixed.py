"""Coupled two-class traffic on the ring, solved as one system.

Autonomous vehicles follow the game dynamics of `mfg`, human drivers
the relaxation dynamics of `arz`, and the two couple through the total
density: the AV speed and running cost see rho_tot = rho_av + rho_hv,
and the HV hesitation and desired speed are evaluated at rho_tot as
well.  The running cost additionally carries beta * rho_hv / rho_jam,
the penalty for riding along dense human platoons.

Four residual blocks per time level - AV continuity, value equation,
HV continuity, HV momentum - are compressed into one Newton vector
interleaved by level, [rho_av(1), V(0), rho_hv(1), y(1)], ... so the
Jacobian stays block tridiagonal.  Discretizations match the pure
solvers exactly: classical Lax-Friedrichs for the AV continuity, the
frozen-dissipation flux of `arz` with the same budget rule for both HV
equations, implicit relaxation in the momentum.  With one class absent
the Newton iterates reproduce the corresponding pure solver bit for
bit, which is the reduction property the tests pin down.

The HV speed inside residuals is the raw recovery y/rho_hv - h(rho_tot)
without the export clamp, keeping the system smooth; trajectories clamp
on the way out, and runs that actually bite the clamp are logged by the
marching solver used for pure-HV sweeps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix

from .arz import CflViolationError, dissipation_speed
from .core import (
    VACUUM_FRACTION,
    ClassTrajectory,
    DomainError,
    GridSpec,
    ModelParams,
    av_running_cost,
    clamp_speed,
    desired_speed,
    hesitation,
    hesitation_deriv,
)
from .mfg import control_field
from .newton import NewtonReport, newton_solve
from .stability import arz_linear_stable

log = logging.getLogger(__name__)


@dataclass
class MixedUnknowns:
    """Full space-time fields; level 0 (and level nt of V) are data.

    All four arrays have shape (nt+1, nx).  y is the conservative HV
    momentum rho_hv * (u_hv + h(rho_tot)).
    """

    rho_av: np.ndarray
    V: np.ndarray
    rho_hv: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        shapes = {self.rho_av.shape, self.V.shape, self.rho_hv.shape, self.y.shape}
        if len(shapes) != 1 or self.rho_av.ndim != 2:
            raise DomainError("all mixed fields must share an (nt+1, nx) shape")

    @property
    def rho_tot(self) -> np.ndarray:
        return self.rho_av + self.rho_hv


def hv_speed(rho_hv, y, rho_tot, params: ModelParams):
    """Raw HV speed recovery with the vacuum guard, no clamp.

    Returns (u_hv, vac): vacuum cells report u_max and are flagged so
    Jacobian assembly can zero their speed sensitivities.
    """
    vac = rho_hv < VACUUM_FRACTION * params.rho_jam
    safe = np.where(vac, 1.0, rho_hv)
    u = np.where(vac, params.u_max, y / safe - hesitation(rho_tot, params))
    return u, vac


def pack_unknowns(unk: MixedUnknowns, grid: GridSpec) -> np.ndarray:
    view = np.empty((grid.nt, 4, grid.nx))
    view[:, 0, :] = unk.rho_av[1:]
    view[:, 1, :] = unk.V[:-1]
    view[:, 2, :] = unk.rho_hv[1:]
    view[:, 3, :] = unk.y[1:]
    return view.reshape(-1)


def unpack_vector(x, rho_av0, v_terminal, rho_hv0, y0, grid: GridSpec) -> MixedUnknowns:
    view = x.reshape(grid.nt, 4, grid.nx)

    def full(level0, body):
        arr = np.empty((grid.nt + 1, grid.nx))
        arr[0] = level0
        arr[1:] = body
        return arr

    V = np.empty((grid.nt + 1, grid.nx))
    V[:-1] = view[:, 1, :]
    V[-1] = v_terminal
    return MixedUnknowns(
        rho_av=full(rho_av0, view[:, 0, :]),
        V=V,
        rho_hv=full(rho_hv0, view[:, 2, :]),
        y=full(y0, view[:, 3, :]),
    )


def assemble_mixed_residual(
    unk: MixedUnknowns,
    grid: GridSpec,
    params: ModelParams,
    a_star: float,
    u_hv0=None,
) -> np.ndarray:
    """Residual of the coupled discrete system, four blocks per level.

    u_hv0 overrides the level-0 HV speed with the given initial speed
    (the stored y[0] already encodes it; passing it avoids a division).
    """
    if unk.rho_av.shape != (grid.nt + 1, grid.nx):
        raise DomainError("unknowns do not match the grid")
    lam = grid.dt / grid.dx
    nu_a = a_star * lam
    b = grid.dt / params.tau
    out = np.empty((grid.nt, 4, grid.nx))
    rho_tot = unk.rho_tot

    for n in range(grid.nt):
        ra, rh, y = unk.rho_av[n], unk.rho_hv[n], unk.y[n]
        tot = rho_tot[n]
        u_av, _, p = control_field(tot, unk.V[n + 1], grid, params)
        if n == 0 and u_hv0 is not None:
            u_hv = u_hv0
        else:
            u_hv, _ = hv_speed(rh, y, tot, params)

        fa = ra * u_av
        out[n, 0] = (
            unk.rho_av[n + 1]
            - ra
            + 0.5 * lam * (np.roll(fa, -1) - np.roll(fa, 1))
            - 0.5 * (np.roll(ra, -1) - 2.0 * ra + np.roll(ra, 1))
        )

        ham = u_av * p + av_running_cost(u_av, tot, rh, params)
        out[n, 1] = unk.V[n] - unk.V[n + 1] - grid.dt * ham

        fh = rh * u_hv
        out[n, 2] = (
            unk.rho_hv[n + 1]
            - rh
            + 0.5 * lam * (np.roll(fh, -1) - np.roll(fh, 1))
            - 0.5 * nu_a * (np.roll(rh, -1) - 2.0 * rh + np.roll(rh, 1))
        )

        gh = y * u_hv
        sweep_y = (
            y
            - 0.5 * lam * (np.roll(gh, -1) - np.roll(gh, 1))
            + 0.5 * nu_a * (np.roll(y, -1) - 2.0 * y + np.roll(y, 1))
        )
        tot_next = rho_tot[n + 1]
        w_eq = desired_speed(tot_next, params) + hesitation(tot_next, params)
        out[n, 3] = (1.0 + b) * unk.y[n + 1] - sweep_y - b * unk.rho_hv[n + 1] * w_eq
    return out.reshape(-1)


def assemble_mixed_jacobian(
    unk: MixedUnknowns,
    grid: GridSpec,
    params: ModelParams,
    a_star: float,
    u_hv0=None,
) -> coo_matrix:
    """Exact sparse Jacobian of assemble_mixed_residual, packed layout."""
    nx, nt = grid.nx, grid.nt
    lam = grid.dt / grid.dx
    nu_a = a_star * lam
    b = grid.dt / params.tau
    um, rj = params.u_max, params.rho_jam
    j = np.arange(nx)
    jp, jm, jpp = (j + 1) % nx, (j - 1) % nx, (j + 2) % nx
    rho_tot = unk.rho_tot
    rows, cols, vals = [], [], []

    def put(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(np.broadcast_to(v, r.shape).astype(float, copy=False))

    blk = 4 * nx

    def i_ra(n):
        return (n - 1) * blk + j

    def i_v(n):
        return n * blk + nx + j

    def i_rh(n):
        return (n - 1) * blk + 2 * nx + j

    def i_y(n):
        return (n - 1) * blk + 3 * nx + j

    for n in range(nt):
        ra, rh, y = unk.rho_av[n], unk.rho_hv[n], unk.y[n]
        tot = rho_tot[n]
        u_av, interior, _ = control_field(tot, unk.V[n + 1], grid, params)
        if n == 0 and u_hv0 is not None:
            u_hv = u_hv0
            vac = np.zeros(nx, dtype=bool)
        else:
            u_hv, vac = hv_speed(rh, y, tot, params)
        h_n = hesitation(tot, params)
        hp_n = hesitation_deriv(tot, params)

        du_dr = np.where(interior, -um / rj, 0.0)
        du_dp = np.where(interior, -um * um, 0.0)
        dfa_dra = u_av + ra * du_dr
        dfa_drh = ra * du_dr
        cgrad = ra * du_dp / grid.dx

        r_ce = n * blk + j
        put(r_ce, i_ra(n + 1), np.ones(nx))
        if n >= 1:
            put(r_ce, i_ra(n)[jp], 0.5 * lam * dfa_dra[jp] - 0.5)
            put(r_ce, i_ra(n)[jm], -0.5 * lam * dfa_dra[jm] - 0.5)
            put(r_ce, i_rh(n)[jp], 0.5 * lam * dfa_drh[jp])
            put(r_ce, i_rh(n)[jm], -0.5 * lam * dfa_drh[jm])
        if n + 1 <= nt - 1:
            bv = i_v(n + 1)
            put(r_ce, bv[jp], -0.5 * lam * cgrad[jp])
            put(r_ce, bv[jpp], 0.5 * lam * cgrad[jp])
            put(r_ce, bv[jm], 0.5 * lam * cgrad[jm])
            put(r_ce, bv[j], -0.5 * lam * cgrad[jm])

        r_hj = n * blk + nx + j
        put(r_hj, i_v(n), np.ones(nx))
        if n + 1 <= nt - 1:
            bv = i_v(n + 1)
            put(r_hj, bv[j], -1.0 + lam * u_av)
            put(r_hj, bv[jp], -lam * u_av)
        if n >= 1:
            put(r_hj, i_ra(n), -grid.dt * u_av / (um * rj))
            put(r_hj, i_rh(n), -grid.dt * (u_av / (um * rj) + params.beta / rj))

        dfh_drh = np.where(vac, um, -h_n - rh * hp_n)
        dfh_dy = np.where(vac, 0.0, 1.0)
        dfh_dra = np.where(vac, 0.0, -rh * hp_n)
        dgh_dy = np.where(vac, um, 2.0 * u_hv + h_n)
        dgh_drh = np.where(vac, 0.0, -((u_hv + h_n) ** 2) - y * hp_n)
        dgh_dra = np.where(vac, 0.0, -y * hp_n)

        r_cehv = n * blk + 2 * nx + j
        put(r_cehv, i_rh(n + 1), np.ones(nx))
        if n >= 1:
            put(r_cehv, i_rh(n), np.full(nx, nu_a - 1.0))
            put(r_cehv, i_rh(n)[jp], 0.5 * lam * dfh_drh[jp] - 0.5 * nu_a)
            put(r_cehv, i_rh(n)[jm], -0.5 * lam * dfh_drh[jm] - 0.5 * nu_a)
            put(r_cehv, i_y(n)[jp], 0.5 * lam * dfh_dy[jp])
            put(r_cehv, i_y(n)[jm], -0.5 * lam * dfh_dy[jm])
            put(r_cehv, i_ra(n)[jp], 0.5 * lam * dfh_dra[jp])
            put(r_cehv, i_ra(n)[jm], -0.5 * lam * dfh_dra[jm])

        tot_next = rho_tot[n + 1]
        w_eq = desired_speed(tot_next, params) + hesitation(tot_next, params)
        wp = -um / rj + hesitation_deriv(tot_next, params)

        r_me = n * blk + 3 * nx + j
        put(r_me, i_y(n + 1), np.full(nx, 1.0 + b))
        put(r_me, i_rh(n + 1), -b * (w_eq + unk.rho_hv[n + 1] * wp))
        put(r_me, i_ra(n + 1), -b * unk.rho_hv[n + 1] * wp)
        if n >= 1:
            put(r_me, i_y(n), np.full(nx, nu_a - 1.0))
            put(r_me, i_y(n)[jp], 0.5 * lam * dgh_dy[jp] - 0.5 * nu_a)
            put(r_me, i_y(n)[jm], -0.5 * lam * dgh_dy[jm] - 0.5 * nu_a)
            put(r_me, i_rh(n)[jp], 0.5 * lam * dgh_drh[jp])
            put(r_me, i_rh(n)[jm], -0.5 * lam * dgh_drh[jm])
            put(r_me, i_ra(n)[jp], 0.5 * lam * dgh_dra[jp])
            put(r_me, i_ra(n)[jm], -0.5 * lam * dgh_dra[jm])

    size = 4 * nt * nx
    return coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size),
    )


def uniform_guess(rho_av0, rho_hv0, grid: GridSpec, params: ModelParams) -> MixedUnknowns:
    """Uniform flow at the mean densities, the Newton starting point."""
    ra = float(np.mean(rho_av0))
    rh = float(np.mean(rho_hv0))
    tot = ra + rh
    u_bar = float(desired_speed(tot, params))
    c = float(av_running_cost(u_bar, tot, rh, params))
    shape = (grid.nt + 1, grid.nx)
    rho_av = np.full(shape, ra)
    rho_av[0] = rho_av0
    rho_hv = np.full(shape, rh)
    rho_hv[0] = rho_hv0
    y = np.full(shape, rh * (u_bar + float(hesitation(tot, params))))
    V = c * (grid.horizon - grid.t)[:, None] * np.ones(grid.nx)
    return MixedUnknowns(rho_av=rho_av, V=V, rho_hv=rho_hv, y=y)


def solve_mixed(
    rho0_av,
    rho0_hv,
    u0_hv,
    grid: GridSpec,
    params: ModelParams,
    tol: float = 1e-8,
    max_iter: int = 50,
    a_star: float | None = None,
):
    """Solve the coupled system; terminal cost zero.

    Returns (ClassTrajectory AV, ClassTrajectory HV, NewtonReport).  The
    HV dissipation budget defaults to the same envelope rule the pure
    marching solver uses, so single-class initial data reduces exactly.
    """
    rho0_av = np.asarray(rho0_av, dtype=float)
    rho0_hv = np.asarray(rho0_hv, dtype=float)
    u0_hv = np.asarray(u0_hv, dtype=float)
    for name, arr in (("rho0_av", rho0_av), ("rho0_hv", rho0_hv), ("u0_hv", u0_hv)):
        if arr.shape != (grid.nx,):
            raise DomainError(f"{name} must have shape ({grid.nx},)")
    if np.any(rho0_av < 0.0) or np.any(rho0_hv < 0.0):
        raise DomainError("initial class densities must be nonnegative")
    tot0 = rho0_av + rho0_hv
    if np.any(tot0 <= 0.0) or np.any(tot0 >= params.rho_jam):
        raise DomainError("initial total density must lie inside (0, rho_jam)")

    if a_star is None:
        mean_tot = float(np.mean(tot0))
        growth = not bool(arz_linear_stable(mean_tot, params))
        a_star = dissipation_speed(rho0_hv, params, growth, rho_other=rho0_av)
    if a_star * grid.dt / grid.dx > 1.0 + 1e-12:
        raise CflViolationError(
            f"dissipation budget {a_star:g} m/s exceeds dx/dt={grid.dx / grid.dt:g}; "
            "rebuild the grid with speed_budget set"
        )

    u_hv0 = np.asarray(clamp_speed(u0_hv, params), dtype=float)
    y0 = rho0_hv * (u_hv0 + hesitation(tot0, params))
    v_terminal = np.zeros(grid.nx)
    guess = uniform_guess(rho0_av, rho0_hv, grid, params)

    def resfn(x):
        unk = unpack_vector(x, rho0_av, v_terminal, rho0_hv, y0, grid)
        return assemble_mixed_residual(unk, grid, params, a_star, u_hv0)

    def jacfn(x):
        unk = unpack_vector(x, rho0_av, v_terminal, rho0_hv, y0, grid)
        return assemble_mixed_jacobian(unk, grid, params, a_star, u_hv0)

    x, report = newton_solve(resfn, jacfn, pack_unknowns(guess, grid), tol, max_iter,
                             reuse_jacobian=True)
    if not report.converged:
        log.warning(
            "solve_mixed: stalled at residual %.3e after %d iterations",
            report.residual_norms[-1], report.iterations,
        )
    unk = unpack_vector(x, rho0_av, v_terminal, rho0_hv, y0, grid)

    u_av = np.empty_like(unk.rho_av)
    for n in range(grid.nt + 1):
        v_next = unk.V[min(n + 1, grid.nt)]
        u_av[n], _, _ = control_field(unk.rho_tot[n], v_next, grid, params)
    u_av = clamp_speed(u_av, params)

    u_hv = np.empty_like(unk.rho_hv)
    u_hv[0] = u_hv0
    for n in range(1, grid.nt + 1):
        raw, _ = hv_speed(unk.rho_hv[n], unk.y[n], unk.rho_tot[n], params)
        u_hv[n] = clamp_speed(raw, params)

    traj_av = ClassTrajectory(
        density=_scrub(unk.rho_av, params), velocity=u_av, value=unk.V.copy()
    )
    traj_hv = ClassTrajectory(density=_scrub(unk.rho_hv, params), velocity=u_hv)
    return traj_av, traj_hv, report


def _scrub(rho: np.ndarray, params: ModelParams) -> np.ndarray:
    """Zero out sub-roundoff negative densities; real ones still raise."""
    out = rho.copy()
    tiny = (out < 0.0) & (out > -1e-12 * params.rho_jam)
    out[tiny] = 0.0
    return out
