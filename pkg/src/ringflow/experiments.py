"""Scenario setup, the doubling criterion, and the phase-diagram sweeps.

A scenario is a uniform two-class mix plus its discretization.  This
layer perturbs the mix, hands it to whichever solver the class split
calls for, and compresses the run into one stable/unstable verdict.
The sweep drivers map that verdict over parameter grids; each point is
independent, so a sweep is embarrassingly parallel.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .arz import CflViolationError, NegativeDensityError, dissipation_speed, solve_arz
from .core import (
    ClassTrajectory,
    DomainError,
    GridSpec,
    ModelParams,
    UniformFlow,
    desired_speed,
    error_function,
)
from .mfg import solve_mfg
from .mixed import solve_mixed
from .newton import SingularJacobianError
from .stability import arz_linear_stable

log = logging.getLogger(__name__)

# Cap on the summed normalized class densities.  Above it the perturbed
# total flirts with the jam density, where the speed laws degenerate;
# sweeps skip such pairs and single runs refuse them outright.
DENSITY_SUM_CAP = 0.75


class UnresolvedScenarioError(RuntimeError):
    """The run produced no trustworthy verdict (solver gave up)."""


@dataclass(frozen=True)
class ScenarioSpec:
    """One experiment: class densities, coupling weight, discretization.

    Densities are normalized by the jam density.  beta is authoritative
    here and overrides params.beta when the scenario runs, so a sweep
    over beta does not need to rebuild params by hand.  grid acts as a
    template: sweep points rebuild the step count from their own wave
    speed budget but keep length, horizon, nx, and cfl_factor.
    """

    rho_bar_av: float
    rho_bar_hv: float
    grid: GridSpec
    params: ModelParams
    beta: float = 0.0
    perturbation_rel_amplitude: float = 0.1

    def __post_init__(self):
        if not (np.isfinite(self.rho_bar_av) and self.rho_bar_av >= 0.0):
            raise DomainError(f"rho_bar_av must be finite and >= 0, got {self.rho_bar_av}")
        if not (np.isfinite(self.rho_bar_hv) and self.rho_bar_hv >= 0.0):
            raise DomainError(f"rho_bar_hv must be finite and >= 0, got {self.rho_bar_hv}")
        total = self.rho_bar_av + self.rho_bar_hv
        if total <= 0.0:
            raise DomainError("at least one class needs a positive density")
        mixed = self.rho_bar_av > 0.0 and self.rho_bar_hv > 0.0
        if mixed and total > DENSITY_SUM_CAP + 1e-12:
            raise DomainError(
                f"rho_bar_av + rho_bar_hv = {total:g} exceeds {DENSITY_SUM_CAP}; "
                "denser mixes push the perturbed total toward the jam density"
            )
        if not (0.0 <= self.perturbation_rel_amplitude < 1.0):
            raise DomainError("perturbation_rel_amplitude must lie in [0, 1)")
        # Single-class runs skip the mixed-traffic cap, but nothing may
        # start at or above the jam density once perturbed.
        peak = total * (1.0 + self.perturbation_rel_amplitude)
        if peak >= 1.0 - 1e-9:
            raise DomainError(
                f"perturbed total density would peak at {peak:g} of jam; "
                "the speed laws degenerate there"
            )
        if not (np.isfinite(self.beta) and self.beta >= 0.0):
            raise DomainError(f"beta must be finite and >= 0, got {self.beta}")


@dataclass(frozen=True)
class StabilityVerdict:
    """Outcome of the doubling test max E(t) >= 2 E(0) on one run.

    unperturbed flags the E(0) = 0 control case, stable by convention.
    partial flags a verdict salvaged from a truncated run: the march
    died but the error had already doubled, which settles the question.
    """

    stable: bool
    e0: float
    e_max: float
    t_of_max: float
    trace: np.ndarray
    unperturbed: bool = False
    partial: bool = False


@dataclass
class PhaseDiagram:
    """Verdict matrix over a two-parameter grid.

    verdicts[i][j] belongs to (axis1[i], axis2[j]); None marks a point
    that was skipped (density cap) or did not resolve, never a silent
    default.  metadata carries the full provenance needed to re-run.
    """

    axis_names: tuple[str, str]
    axis1: np.ndarray
    axis2: np.ndarray
    verdicts: list
    metadata: dict

    def rows(self):
        """Yield (axis1 value, axis2 value, verdict-or-None) per point."""
        for i, a in enumerate(self.axis1):
            for j, b in enumerate(self.axis2):
                yield float(a), float(b), self.verdicts[i][j]


def build_initial_conditions(spec: ScenarioSpec):
    """Perturbed class densities and the uniform HV speed for a scenario.

    Each class gets the same relative sine wave on top of its uniform
    state, so an empty class stays identically empty.  The HV speed
    starts on the equilibrium curve of the unperturbed total density.
    """
    x = spec.grid.x
    rj = spec.params.rho_jam
    wave = 1.0 + spec.perturbation_rel_amplitude * np.sin(
        2.0 * np.pi * x / spec.grid.length
    )
    rho0_av = spec.rho_bar_av * rj * wave
    rho0_hv = spec.rho_bar_hv * rj * wave
    rho_tot_bar = (spec.rho_bar_av + spec.rho_bar_hv) * rj
    u0_hv = np.full(spec.grid.nx, float(desired_speed(rho_tot_bar, spec.params)))
    return rho0_av, rho0_hv, u0_hv


def classify_stability(
    traj_av, traj_hv, uf: UniformFlow, grid: GridSpec, params: ModelParams
) -> StabilityVerdict:
    """Apply the doubling criterion to one run.

    Works on truncated trajectories too (the trace is then shorter than
    the grid's time axis); the caller decides whether a truncated trace
    is conclusive.
    """
    trace = error_function(traj_av, traj_hv, uf, grid, params)
    imax = int(np.argmax(trace))
    e0 = float(trace[0])
    e_max = float(trace[imax])
    t_of_max = float(grid.t[imax])
    if e0 == 0.0:
        return StabilityVerdict(
            stable=True, e0=e0, e_max=e_max, t_of_max=t_of_max,
            trace=trace, unperturbed=True,
        )
    return StabilityVerdict(
        stable=bool(e_max < 2.0 * e0), e0=e0, e_max=e_max,
        t_of_max=t_of_max, trace=trace,
    )


def _point_grid(template: GridSpec, params: ModelParams, speed_budget=None) -> GridSpec:
    return GridSpec.build(
        template.length, template.horizon, template.nx, params,
        cfl_factor=template.cfl_factor, speed_budget=speed_budget,
    )


def run_scenario(spec: ScenarioSpec, tol: float = 1e-8, max_iter: int = 50):
    """Solve one scenario end to end and judge it.

    Returns (traj_av, traj_hv, verdict, grid); an empty class comes back
    as None.  The class split picks the solver: both classes present is
    the coupled system, a single class falls back to its pure solver
    rather than dragging a vacuum block through the coupled one.

    Raises UnresolvedScenarioError when the run cannot support a verdict
    (non-convergence, or a wave outran its budget before the error
    doubled).  A truncated run whose error already doubled still counts:
    growth past the threshold is growth, however the march ends.
    """
    params = dataclasses.replace(spec.params, beta=spec.beta)
    rho0_av, rho0_hv, u0_hv = build_initial_conditions(spec)
    rj = params.rho_jam
    uf = UniformFlow.from_densities(
        spec.rho_bar_av * rj, spec.rho_bar_hv * rj, params
    )
    rho_tot_bar = (spec.rho_bar_av + spec.rho_bar_hv) * rj

    if spec.rho_bar_hv == 0.0:
        grid = _point_grid(spec.grid, params)
        traj_av, report = solve_mfg(rho0_av, grid, params, tol=tol, max_iter=max_iter)
        if not report.converged:
            raise UnresolvedScenarioError(
                f"pure-AV solve stalled at residual {report.residual_norms[-1]:.3e}"
            )
        return traj_av, None, classify_stability(traj_av, None, uf, grid, params), grid

    expect_growth = not bool(arz_linear_stable(rho_tot_bar, params))
    if spec.rho_bar_av == 0.0:
        a_star = dissipation_speed(rho0_hv, params, expect_growth)
        grid = _point_grid(spec.grid, params, speed_budget=max(params.u_max, a_star))
        try:
            traj_hv = solve_arz(rho0_hv, u0_hv, grid, params, a_star=a_star)
        except CflViolationError as err:
            if err.partial is None:
                raise UnresolvedScenarioError(str(err)) from err
            verdict = classify_stability(None, err.partial, uf, grid, params)
            if verdict.e0 > 0.0 and verdict.e_max >= 2.0 * verdict.e0:
                verdict = dataclasses.replace(verdict, stable=False, partial=True)
                return None, err.partial, verdict, grid
            raise UnresolvedScenarioError(
                f"wave outran its budget at step {err.step} before the "
                "error doubled; no verdict"
            ) from err
        return None, traj_hv, classify_stability(None, traj_hv, uf, grid, params), grid

    a_star = dissipation_speed(rho0_hv, params, expect_growth, rho_other=rho0_av)
    grid = _point_grid(spec.grid, params, speed_budget=max(params.u_max, a_star))
    traj_av, traj_hv, report = solve_mixed(
        rho0_av, rho0_hv, u0_hv, grid, params,
        tol=tol, max_iter=max_iter, a_star=a_star,
    )
    if not report.converged:
        raise UnresolvedScenarioError(
            f"coupled solve stalled at residual {report.residual_norms[-1]:.3e}"
        )
    return traj_av, traj_hv, classify_stability(traj_av, traj_hv, uf, grid, params), grid


def _sweep_point(args):
    """Worker for one sweep point; maps failures to None (unresolved)."""
    spec, tol, max_iter = args
    try:
        _, _, verdict, _ = run_scenario(spec, tol=tol, max_iter=max_iter)
        return verdict
    except (UnresolvedScenarioError, CflViolationError, NegativeDensityError,
            SingularJacobianError, DomainError) as err:
        log.warning(
            "sweep point (av=%g, hv=%g, beta=%g) unresolved: %s",
            spec.rho_bar_av, spec.rho_bar_hv, spec.beta, err,
        )
        return None


def _run_sweep(point_specs, grid, params, tol, max_iter, jobs):
    """Evaluate verdicts for a list of (key, spec-or-None) sweep points.

    Duplicate keys are solved once.  Points whose spec is None (density
    cap) stay None.  Order of the returned list matches the input.
    """
    unique = {}
    for key, spec in point_specs:
        if spec is not None and key not in unique:
            unique[key] = spec
    keys = list(unique)
    tasks = [(unique[k], tol, max_iter) for k in keys]
    if jobs and jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    by_key = dict(zip(keys, results))
    return [by_key[key] if spec is not None else None for key, spec in point_specs]


def _point_key(rho_bar_av, rho_bar_hv, beta):
    # beta is irrelevant when a class is empty: it only weighs the HV
    # density inside the AV running cost.  Collapsing the key lets a
    # beta sweep reuse its single-class solves.
    if rho_bar_av == 0.0 or rho_bar_hv == 0.0:
        beta = 0.0
    return (round(float(rho_bar_av), 12), round(float(rho_bar_hv), 12),
            round(float(beta), 12))


def _sweep_metadata(group, grid, params, tol, max_iter, extra=None):
    meta = {
        "group": group,
        "penetration_semantics": "p = rho_bar_av / rho_bar_tot (density share)",
        "grid_template": {
            "length": grid.length, "horizon": grid.horizon,
            "nx": grid.nx, "cfl_factor": grid.cfl_factor,
        },
        "params": dataclasses.asdict(params),
        "tol": tol,
        "max_iter": max_iter,
        "perturbation_rel_amplitude": 0.1,
        "density_sum_cap": DENSITY_SUM_CAP,
    }
    if extra:
        meta.update(extra)
    return meta


def run_group1(av_grid, hv_grid, grid: GridSpec, params: ModelParams,
               tol: float = 1e-8, max_iter: int = 50, jobs: int | None = None
               ) -> PhaseDiagram:
    """Verdicts over (normalized AV density) x (normalized HV density).

    Pairs above the density cap are skipped and left as None in the
    matrix; their indices land in metadata["skipped"].
    """
    av_grid = np.asarray(av_grid, dtype=float)
    hv_grid = np.asarray(hv_grid, dtype=float)
    specs, skipped = [], []
    for i, av in enumerate(av_grid):
        for j, hv in enumerate(hv_grid):
            if av + hv > DENSITY_SUM_CAP + 1e-12 or av + hv <= 0.0:
                specs.append(((None, i, j), None))
                skipped.append([int(i), int(j)])
            else:
                specs.append((_point_key(av, hv, 0.0),
                              ScenarioSpec(float(av), float(hv), grid, params)))
    flat = _run_sweep(specs, grid, params, tol, max_iter, jobs)
    n2 = len(hv_grid)
    verdicts = [list(flat[i * n2:(i + 1) * n2]) for i in range(len(av_grid))]
    meta = _sweep_metadata("group1", grid, params, tol, max_iter,
                           {"beta": 0.0, "skipped": skipped})
    return PhaseDiagram(("rho_bar_av", "rho_bar_hv"), av_grid, hv_grid,
                        verdicts, meta)


def run_group2(penetration_grid, rho_tot_grid, grid: GridSpec, params: ModelParams,
               tol: float = 1e-8, max_iter: int = 50, jobs: int | None = None
               ) -> PhaseDiagram:
    """Verdicts over (AV penetration) x (normalized total density)."""
    p_grid = np.asarray(penetration_grid, dtype=float)
    rt_grid = np.asarray(rho_tot_grid, dtype=float)
    if np.any((p_grid < 0.0) | (p_grid > 1.0)):
        raise DomainError("penetration values must lie in [0, 1]")
    if np.any(rt_grid > DENSITY_SUM_CAP + 1e-12) or np.any(rt_grid <= 0.0):
        raise DomainError(
            f"total densities must lie in (0, {DENSITY_SUM_CAP}]"
        )
    specs = []
    for i, p in enumerate(p_grid):
        for j, rt in enumerate(rt_grid):
            av, hv = float(p * rt), float((1.0 - p) * rt)
            specs.append((_point_key(av, hv, 0.0),
                          ScenarioSpec(av, hv, grid, params)))
    flat = _run_sweep(specs, grid, params, tol, max_iter, jobs)
    n2 = len(rt_grid)
    verdicts = [list(flat[i * n2:(i + 1) * n2]) for i in range(len(p_grid))]
    meta = _sweep_metadata("group2", grid, params, tol, max_iter, {"beta": 0.0})
    return PhaseDiagram(("penetration", "rho_bar_tot"), p_grid, rt_grid,
                        verdicts, meta)


def run_group3(beta_grid, penetration_grid, grid: GridSpec, params: ModelParams,
               rho_bar_tot: float = 0.5, tol: float = 1e-8, max_iter: int = 50,
               jobs: int | None = None) -> PhaseDiagram:
    """Verdicts over (beta) x (AV penetration) at a fixed total density."""
    b_grid = np.asarray(beta_grid, dtype=float)
    p_grid = np.asarray(penetration_grid, dtype=float)
    if np.any(b_grid < 0.0):
        raise DomainError("beta values must be >= 0")
    if np.any((p_grid < 0.0) | (p_grid > 1.0)):
        raise DomainError("penetration values must lie in [0, 1]")
    if not (0.0 < rho_bar_tot <= DENSITY_SUM_CAP + 1e-12):
        raise DomainError(
            f"rho_bar_tot must lie in (0, {DENSITY_SUM_CAP}], got {rho_bar_tot}"
        )
    specs = []
    for i, b in enumerate(b_grid):
        for j, p in enumerate(p_grid):
            av = float(p * rho_bar_tot)
            hv = float((1.0 - p) * rho_bar_tot)
            specs.append((_point_key(av, hv, b),
                          ScenarioSpec(av, hv, grid, params, beta=float(b))))
    flat = _run_sweep(specs, grid, params, tol, max_iter, jobs)
    n2 = len(p_grid)
    verdicts = [list(flat[i * n2:(i + 1) * n2]) for i in range(len(b_grid))]
    meta = _sweep_metadata("group3", grid, params, tol, max_iter,
                           {"rho_bar_tot": rho_bar_tot})
    return PhaseDiagram(("beta", "penetration"), b_grid, p_grid, verdicts, meta)
