"""Damped Newton iteration on sparse nonlinear systems.

Both game solvers assemble their residual and Jacobian over the whole
space-time grid and hand them here.  The linear step is a direct sparse
LU factorization: system sizes stay at desk scale, where robustness is
worth more than iterative-solver speed, and the space-time Jacobians
are nearly block tridiagonal, which direct factorization handles well.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

log = logging.getLogger(__name__)


class SingularJacobianError(RuntimeError):
    """The Jacobian factorization failed or produced a useless step."""


@dataclass
class NewtonReport:
    """What happened during one newton_solve call.

    residual_norms holds the accepted sup-norms, starting with the
    initial residual, so it is strictly decreasing whenever the run
    converged.  damping_used records whether any step had to backtrack,
    and factorizations counts sparse LU decompositions, which dominate
    the cost once the grid is large.
    """

    iterations: int = 0
    residual_norms: list[float] = field(default_factory=list)
    converged: bool = False
    damping_used: bool = False
    factorizations: int = 0


# With a reused factorization the iteration contracts linearly.  Once the
# contraction per step is worse than this, a fresh Jacobian is cheaper
# than the extra stale iterations it would take to finish.
_STALE_CONTRACTION_LIMIT = 0.8


def _factor(jacobian_fn, x):
    try:
        return splu(csc_matrix(jacobian_fn(x)))
    except RuntimeError as err:
        raise SingularJacobianError(f"sparse LU failed: {err}") from err


def newton_solve(residual_fn, jacobian_fn, x0, tol: float = 1e-8, max_iter: int = 50,
                 reuse_jacobian: bool = False):
    """Drive residual_fn to below tol in sup-norm, starting from x0.

    jacobian_fn must return a scipy sparse matrix.  Full steps are tried
    first; when a step fails to reduce the residual norm it is halved,
    up to 8 times, before the iteration gives up.  Returns the final
    iterate and a NewtonReport; convergence failure is reported, not
    raised, so callers can decide what a dead end means for them.

    With reuse_jacobian the LU factors are kept across iterations and
    only refreshed when the stale step stops contracting well (or stops
    descending at all).  That trades the quadratic tail of plain Newton
    for many cheap triangular solves, which wins decisively when a
    single factorization costs seconds.
    """
    x = np.array(x0, dtype=float, copy=True)
    r = residual_fn(x)
    norm = float(np.max(np.abs(r)))
    report = NewtonReport(residual_norms=[norm])
    if not np.isfinite(norm):
        raise SingularJacobianError("non-finite residual at the initial guess")
    if norm <= tol:
        report.converged = True
        return x, report

    lu = None
    fresh = False
    for _ in range(max_iter):
        if lu is None or not reuse_jacobian:
            lu = _factor(jacobian_fn, x)
            fresh = True
            report.factorizations += 1
        step = lu.solve(r)
        if not np.all(np.isfinite(step)):
            raise SingularJacobianError("LU solve produced non-finite step")

        scale = 1.0
        accepted = False
        for _ in range(9):  # full step plus 8 halvings
            x_try = x - scale * step
            r_try = residual_fn(x_try)
            norm_try = float(np.max(np.abs(r_try)))
            if np.isfinite(norm_try) and norm_try < norm:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            if not fresh:
                lu = None  # stale factors stalled; retry this point fresh
                continue
            log.warning("newton_solve: no descent after 8 halvings, stopping")
            break
        if scale < 1.0:
            report.damping_used = True

        contraction = norm_try / norm
        x, r, norm = x_try, r_try, norm_try
        report.iterations += 1
        report.residual_norms.append(norm)
        if norm <= tol:
            report.converged = True
            break
        if reuse_jacobian and (contraction > _STALE_CONTRACTION_LIMIT or scale < 1.0):
            lu = None  # too slow for the factorization to be worth keeping
        else:
            fresh = False

    return x, report
