"""Shared types and closures for macroscopic traffic on a periodic ring.

Two vehicle classes live on the same road: human-driven vehicles (HV)
following a second-order relaxation model and autonomous vehicles (AV)
whose speed comes from an optimal-control value function.  Everything
downstream (solvers, stability scans, sweeps) builds on the closures and
containers defined here.

Units are SI throughout: densities in veh/m, speeds in m/s.  Public
configuration surfaces use the normalized density s = rho/rho_jam; the
conversion happens at the boundary, not inside the numerics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

# Cells below VACUUM_FRACTION * rho_jam count as empty road: the velocity
# there is reported as free flow instead of dividing by ~0.
VACUUM_FRACTION = 1e-12

# The hesitation function diverges at the jam density, so densities are
# capped at CEILING_FRACTION * rho_jam before it is evaluated.  Cap hits
# are counted by the solvers; a clean run never triggers one.
CEILING_FRACTION = 1.0 - 1e-9


class DomainError(ValueError):
    """A physical quantity left its admissible range."""


@dataclass(frozen=True)
class ModelParams:
    """Road-level model constants.

    u_max    free-flow speed (m/s)
    rho_jam  jam density (veh/m)
    tau      HV relaxation time towards the desired speed (s)
    beta     weight of the HV-avoidance term in the AV running cost
    """

    u_max: float = 30.0
    rho_jam: float = 1.0 / 7.5
    tau: float = 3.0
    beta: float = 0.0

    def __post_init__(self):
        if not self.u_max > 0.0:
            raise DomainError(f"u_max must be positive, got {self.u_max}")
        if not self.rho_jam > 0.0:
            raise DomainError(f"rho_jam must be positive, got {self.rho_jam}")
        if not self.tau > 0.0:
            raise DomainError(f"tau must be positive, got {self.tau}")
        if self.beta < 0.0:
            raise DomainError(f"beta must be nonnegative, got {self.beta}")


@dataclass(frozen=True)
class GridSpec:
    """Uniform space-time grid on the ring [0, length) x [0, horizon].

    Space has nx cells, x_j = j*dx with dx = length/nx, periodic wrap.
    Time has nt steps of dt = horizon/nt (nt+1 stored levels).
    """

    length: float
    horizon: float
    nx: int
    nt: int
    cfl_factor: float = 0.5

    def __post_init__(self):
        if not self.length > 0.0:
            raise DomainError(f"length must be positive, got {self.length}")
        if not self.horizon > 0.0:
            raise DomainError(f"horizon must be positive, got {self.horizon}")
        if self.nx < 3:
            raise DomainError(f"need at least 3 cells, got nx={self.nx}")
        if self.nt < 1:
            raise DomainError(f"need at least one time step, got nt={self.nt}")
        if not 0.0 < self.cfl_factor <= 1.0:
            raise DomainError(f"cfl_factor must lie in (0, 1], got {self.cfl_factor}")

    @property
    def dx(self) -> float:
        return self.length / self.nx

    @property
    def dt(self) -> float:
        return self.horizon / self.nt

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.nx) * self.dx

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt

    def assert_cfl(self, params: ModelParams) -> None:
        """Check dt <= cfl_factor * dx / u_max for the parameters in use."""
        limit = self.cfl_factor * self.dx / params.u_max
        if self.dt > limit * (1.0 + 1e-12):
            raise DomainError(
                f"dt={self.dt:g} violates the CFL budget {limit:g} "
                f"(cfl_factor={self.cfl_factor}, dx={self.dx:g}, u_max={params.u_max})"
            )

    @classmethod
    def build(
        cls,
        length: float,
        horizon: float,
        nx: int,
        params: ModelParams,
        cfl_factor: float = 0.5,
        speed_budget: float | None = None,
    ) -> "GridSpec":
        """Grid with nt chosen as small as the CFL budget allows.

        speed_budget overrides u_max as the wave-speed bound, for runs
        where backward-moving characteristics are expected to be faster
        than the traffic itself.
        """
        v = max(params.u_max, speed_budget or 0.0)
        dx = length / nx
        # The (1 - 1e-12) guard keeps an exactly-resonant horizon (e.g.
        # T*v a whole multiple of cfl*dx) from rounding up a step.
        nt = int(np.ceil(horizon * v / (cfl_factor * dx) * (1.0 - 1e-12)))
        grid = cls(length=length, horizon=horizon, nx=nx, nt=max(nt, 1), cfl_factor=cfl_factor)
        if speed_budget is None:
            grid.assert_cfl(params)
        return grid


@dataclass(frozen=True)
class UniformFlow:
    """Spatially uniform reference state both solvers preserve exactly.

    u_bar is the equilibrium speed U(rho_tot); each class moves at u_bar.
    """

    rho_av: float
    rho_hv: float
    u_bar: float

    @property
    def rho_tot(self) -> float:
        return self.rho_av + self.rho_hv

    @classmethod
    def from_densities(cls, rho_av: float, rho_hv: float, params: ModelParams) -> "UniformFlow":
        if rho_av < 0.0 or rho_hv < 0.0:
            raise DomainError("class densities must be nonnegative")
        rho_tot = rho_av + rho_hv
        if not 0.0 < rho_tot < params.rho_jam:
            raise DomainError(
                f"total density {rho_tot:g} outside (0, rho_jam={params.rho_jam:g})"
            )
        return cls(rho_av=rho_av, rho_hv=rho_hv, u_bar=desired_speed(rho_tot, params))


@dataclass
class ClassTrajectory:
    """Space-time fields of one vehicle class.

    density and velocity have shape (nt+1, nx); value carries the AV
    value function on the same layout and stays None for HV classes.
    """

    density: np.ndarray
    velocity: np.ndarray
    value: np.ndarray | None = None

    def __post_init__(self):
        if self.density.shape != self.velocity.shape:
            raise DomainError("density and velocity shapes differ")
        if self.value is not None and self.value.shape != self.density.shape:
            raise DomainError("value field shape differs from density")
        if np.any(self.density < 0.0):
            raise DomainError("negative density in trajectory")
        if not np.all(np.isfinite(self.density)) or not np.all(np.isfinite(self.velocity)):
            raise DomainError("non-finite entries in trajectory")


def desired_speed(rho, params: ModelParams):
    """Equilibrium speed U(rho) = u_max (1 - rho/rho_jam)."""
    return params.u_max * (1.0 - np.asarray(rho) / params.rho_jam)


def desired_speed_deriv(rho, params: ModelParams):
    """U'(rho) = -u_max/rho_jam, constant for the linear speed law."""
    return np.full_like(np.asarray(rho, dtype=float), -params.u_max / params.rho_jam)


def hesitation(rho, params: ModelParams):
    """Hesitation h(rho) = 9 m/s * sqrt(s/(1-s)) with s = rho/rho_jam.

    Grows without bound towards the jam density, which is what makes
    dense human traffic sluggish to speed back up.
    """
    s = np.clip(np.asarray(rho, dtype=float) / params.rho_jam, 0.0, CEILING_FRACTION)
    return 9.0 * np.sqrt(s / (1.0 - s))


def hesitation_deriv(rho, params: ModelParams):
    """h'(rho) = 9/(2 rho_jam) sqrt((1-s)/s) / (1-s)^2.

    Diverges at both ends: empty road (s -> 0) and jam (s -> 1).
    """
    s = np.clip(np.asarray(rho, dtype=float) / params.rho_jam, 0.0, CEILING_FRACTION)
    with np.errstate(divide="ignore"):
        out = 9.0 / (2.0 * params.rho_jam) * np.sqrt((1.0 - s) / s) / (1.0 - s) ** 2
    return out


def clamp_speed(u, params: ModelParams):
    """Project a speed onto the admissible interval [0, u_max]."""
    return np.clip(u, 0.0, params.u_max)


def av_running_cost(u, rho_sum, rho_hv, params: ModelParams):
    """AV running cost: kinetic penalty, efficiency reward, congestion terms.

    f = 1/2 (u/u_max)^2 - u/u_max + u rho_sum/(u_max rho_jam)
        + beta rho_hv/rho_jam

    The first three pieces trade off comfort against progress against
    surrounding traffic; the beta term penalizes riding along dense
    human-driven platoons.
    """
    u = np.asarray(u, dtype=float)
    return (
        0.5 * (u / params.u_max) ** 2
        - u / params.u_max
        + u * np.asarray(rho_sum) / (params.u_max * params.rho_jam)
        + params.beta * np.asarray(rho_hv) / params.rho_jam
    )


def error_function(
    traj_av: ClassTrajectory | None,
    traj_hv: ClassTrajectory | None,
    uf: UniformFlow,
    grid: GridSpec,
    params: ModelParams,
) -> np.ndarray:
    """Deviation E(t) of a run from its uniform flow, one value per level.

    Per class the deviation is the mean absolute density error in units
    of rho_jam plus the mean absolute speed error in units of u_max.
    Measuring both fields in their natural scales keeps the two terms
    comparable, so the doubling test E(t) >= 2 E(0) reads the same for
    the density wave and for the speed wave it drags along.
    """
    pieces = []
    for traj, rho_bar in ((traj_av, uf.rho_av), (traj_hv, uf.rho_hv)):
        if traj is None:
            continue
        drho = np.mean(np.abs(traj.density - rho_bar), axis=1) / params.rho_jam
        du = np.mean(np.abs(traj.velocity - uf.u_bar), axis=1) / params.u_max
        pieces.append(drho + du)
    if not pieces:
        raise DomainError("error_function needs at least one trajectory")
    total = pieces[0]
    for p in pieces[1:]:
        total = total + p
    return total
