"""Pure autonomous-vehicle game on the ring, solved as one system.

The equilibrium couples a forward continuity equation for the density
to a backward Hamilton-Jacobi equation for the value function, with
the speed eliminated through the optimality condition:

    rho_t + (rho u)_x = 0            rho(x, 0) given
    V_t + u V_x + f(u, rho) = 0      V(x, T) given
    u = clamp(u_max (1 - rho/rho_jam - u_max V_x))

Discretely the continuity part takes a Lax-Friedrichs step forward and
the value part an upwind step backward; the speed at level n pairs with
the value gradient at level n+1 (the known side of the backward march),
so the terminal speed identity u(x,T) = clamp(u_max(1 - rho/rho_jam))
holds exactly.  V_x uses the forward difference: the clamp keeps speeds
nonnegative, so value information propagates from downstream.

Everything is compressed into one vector over interior time levels and
solved by damped Newton with an analytically assembled sparse Jacobian.
Unknowns interleave as [rho(1), V(0)], [rho(2), V(1)], ... so the
matrix is block tridiagonal and factorizes with modest fill.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix

from .core import (
    ClassTrajectory,
    DomainError,
    GridSpec,
    ModelParams,
    av_running_cost,
    clamp_speed,
    desired_speed,
)
from .newton import NewtonReport, newton_solve

log = logging.getLogger(__name__)


@dataclass
class MfgUnknowns:
    """Full space-time fields; level 0 of rho and level nt of V are data.

    rho and V have shape (nt+1, nx).  The speed is not stored: it is a
    function of (rho, V) evaluated where needed, which keeps the Newton
    vector at 2*nt*nx and the optimality condition exact by construction.
    """

    rho: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        if self.rho.shape != self.V.shape or self.rho.ndim != 2:
            raise DomainError("rho and V must share an (nt+1, nx) shape")


def control_field(rho_level, v_next, grid: GridSpec, params: ModelParams):
    """Speed at one time level from its density and the next value level.

    Returns (u, interior, p): the clamped speed, the mask where the
    clamp is inactive (boundary points count as interior, matching the
    one-sided derivative convention), and the value gradient p.
    """
    p = (np.roll(v_next, -1) - v_next) / grid.dx
    alpha = params.u_max * (1.0 - rho_level / params.rho_jam - params.u_max * p)
    u = np.clip(alpha, 0.0, params.u_max)
    interior = (alpha >= 0.0) & (alpha <= params.u_max)
    return u, interior, p


def pack_unknowns(unk: MfgUnknowns, grid: GridSpec) -> np.ndarray:
    """Interleave interior levels into the Newton vector."""
    view = np.empty((grid.nt, 2, grid.nx))
    view[:, 0, :] = unk.rho[1:]
    view[:, 1, :] = unk.V[:-1]
    return view.reshape(-1)


def unpack_vector(x: np.ndarray, rho0, v_terminal, grid: GridSpec) -> MfgUnknowns:
    """Rebuild full fields from the Newton vector and the fixed levels."""
    view = x.reshape(grid.nt, 2, grid.nx)
    rho = np.empty((grid.nt + 1, grid.nx))
    V = np.empty((grid.nt + 1, grid.nx))
    rho[0] = rho0
    rho[1:] = view[:, 0, :]
    V[:-1] = view[:, 1, :]
    V[-1] = v_terminal
    return MfgUnknowns(rho=rho, V=V)


def assemble_residual(unk: MfgUnknowns, grid: GridSpec, params: ModelParams) -> np.ndarray:
    """Residual of the discrete game, one block pair per time level.

    Level n contributes the continuity residual defining rho(n+1) and
    the value residual defining V(n); both vanish simultaneously exactly
    at the discrete equilibrium.
    """
    if unk.rho.shape != (grid.nt + 1, grid.nx):
        raise DomainError("unknowns do not match the grid")
    lam = grid.dt / grid.dx
    out = np.empty((grid.nt, 2, grid.nx))
    for n in range(grid.nt):
        rho_n = unk.rho[n]
        u, _, p = control_field(rho_n, unk.V[n + 1], grid, params)
        f = rho_n * u
        out[n, 0] = (
            unk.rho[n + 1]
            - rho_n
            + 0.5 * lam * (np.roll(f, -1) - np.roll(f, 1))
            - 0.5 * (np.roll(rho_n, -1) - 2.0 * rho_n + np.roll(rho_n, 1))
        )
        ham = u * p + av_running_cost(u, rho_n, 0.0, params)
        out[n, 1] = unk.V[n] - unk.V[n + 1] - grid.dt * ham
    return out.reshape(-1)


def assemble_jacobian(unk: MfgUnknowns, grid: GridSpec, params: ModelParams) -> coo_matrix:
    """Exact sparse Jacobian of assemble_residual in the packed layout.

    The clamp uses one-sided derivatives: cells where the raw speed
    leaves [0, u_max] contribute zero speed sensitivity.  The
    Hamiltonian needs no such case split - by optimality its value
    derivative is the speed itself and its density derivative passes
    through the cost term, clamped or not.
    """
    nx, nt = grid.nx, grid.nt
    lam = grid.dt / grid.dx
    um, rj = params.u_max, params.rho_jam
    j = np.arange(nx)
    jp, jm, jpp = (j + 1) % nx, (j - 1) % nx, (j + 2) % nx
    rows, cols, vals = [], [], []

    def put(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(np.broadcast_to(v, r.shape).astype(float, copy=False))

    def col_rho(n):
        return (n - 1) * 2 * nx + j

    def col_v(n):
        return n * 2 * nx + nx + j

    for n in range(nt):
        rho_n = unk.rho[n]
        u, interior, _ = control_field(rho_n, unk.V[n + 1], grid, params)
        du_drho = np.where(interior, -um / rj, 0.0)
        du_dp = np.where(interior, -um * um, 0.0)
        dfdr = u + rho_n * du_drho
        cgrad = rho_n * du_dp / grid.dx

        r_ce = n * 2 * nx + j
        put(r_ce, col_rho(n + 1), np.ones(nx))
        if n >= 1:
            put(r_ce, col_rho(n)[jp], 0.5 * lam * dfdr[jp] - 0.5)
            put(r_ce, col_rho(n)[jm], -0.5 * lam * dfdr[jm] - 0.5)
        if n + 1 <= nt - 1:
            bv = col_v(n + 1)
            put(r_ce, bv[jp], -0.5 * lam * cgrad[jp])
            put(r_ce, bv[jpp], 0.5 * lam * cgrad[jp])
            put(r_ce, bv[jm], 0.5 * lam * cgrad[jm])
            put(r_ce, bv[j], -0.5 * lam * cgrad[jm])

        r_hj = n * 2 * nx + nx + j
        put(r_hj, col_v(n), np.ones(nx))
        if n + 1 <= nt - 1:
            bv = col_v(n + 1)
            put(r_hj, bv[j], -1.0 + lam * u)
            put(r_hj, bv[jp], -lam * u)
        if n >= 1:
            put(r_hj, col_rho(n), -grid.dt * u / (um * rj))

    size = 2 * nt * nx
    return coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size),
    )


def uniform_guess(rho0, grid: GridSpec, params: ModelParams) -> MfgUnknowns:
    """Exact uniform solution at the mean density, the Newton start.

    V falls linearly to the terminal zero at the uniform running-cost
    rate, which solves the discrete system exactly when rho0 itself is
    uniform.
    """
    rho_bar = float(np.mean(rho0))
    u_bar = float(desired_speed(rho_bar, params))
    c = float(av_running_cost(u_bar, rho_bar, 0.0, params))
    rho = np.full((grid.nt + 1, grid.nx), rho_bar)
    rho[0] = rho0
    V = c * (grid.horizon - grid.t)[:, None] * np.ones(grid.nx)
    return MfgUnknowns(rho=rho, V=V)


def solve_mfg(
    rho0,
    grid: GridSpec,
    params: ModelParams,
    tol: float = 1e-8,
    max_iter: int = 50,
):
    """Solve the game for the given initial density; terminal cost zero.

    Returns (ClassTrajectory, NewtonReport).  Non-convergence is
    reported through the NewtonReport, with the best iterate still
    returned, so sweep drivers can mark the point unresolved.
    """
    rho0 = np.asarray(rho0, dtype=float)
    if rho0.shape != (grid.nx,):
        raise DomainError(f"rho0 must have shape ({grid.nx},)")
    if np.any(rho0 <= 0.0) or np.any(rho0 >= params.rho_jam):
        raise DomainError("rho0 must lie strictly inside (0, rho_jam)")
    v_terminal = np.zeros(grid.nx)

    guess = uniform_guess(rho0, grid, params)

    def resfn(x):
        return assemble_residual(unpack_vector(x, rho0, v_terminal, grid), grid, params)

    def jacfn(x):
        return assemble_jacobian(unpack_vector(x, rho0, v_terminal, grid), grid, params)

    x, report = newton_solve(resfn, jacfn, pack_unknowns(guess, grid), tol, max_iter,
                             reuse_jacobian=True)
    if not report.converged:
        log.warning(
            "solve_mfg: stalled at residual %.3e after %d iterations",
            report.residual_norms[-1], report.iterations,
        )
    unk = unpack_vector(x, rho0, v_terminal, grid)

    velocity = np.empty_like(unk.rho)
    for n in range(grid.nt + 1):
        v_next = unk.V[min(n + 1, grid.nt)]
        velocity[n], _, _ = control_field(unk.rho[n], v_next, grid, params)
    velocity = clamp_speed(velocity, params)

    traj = ClassTrajectory(density=unk.rho.copy(), velocity=velocity, value=unk.V.copy())
    return traj, report
