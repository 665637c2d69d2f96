"""Linear stability tools for both traffic models.

Two separate questions are answered here.

For the human-driver model, uniform flow at density rho is linearly
stable exactly when the hesitation stiffens faster than the desired
speed drops, h'(rho) > -U'(rho); `arz_linear_stable` evaluates that
inequality directly.

For the autonomous-vehicle game the linearized dynamics of a single
spatial Fourier mode reduce, after nondimensionalizing by u_max and
rho_jam, to a two-point boundary value problem in the rescaled time
eta = xi t with horizon parameter lambda = xi T:

    rho_t + i xi (1 - rho_bar) rho + i xi rho_bar u = 0
    u_t   + i xi (rho_bar - 1) rho + i xi (1 - 2 rho_bar) u = 0

with rho(0) = 1 and rho(lambda) + u(lambda) = 0.  `mfg_mode_solution`
evaluates its closed form, `mode_energy` the worst amplification over
the horizon, and `mfg_boundedness_scan` sweeps lambda over decades to
certify that no horizon resonates - the computer-assisted half of the
no-amplification argument.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import DomainError, ModelParams, desired_speed_deriv, hesitation_deriv

log = logging.getLogger(__name__)

# Below this distance from rho_bar = 4/5 the generic closed form loses
# accuracy (its two exponents collide) and the dedicated branch is used.
_DEGENERATE_TOL = 1e-9

# Denominators smaller than this are treated as a resonant horizon.
_RESONANCE_TOL = 1e-12


class ResonanceError(RuntimeError):
    """The mode boundary value problem is (numerically) unsolvable."""


def arz_linear_stable(rho_bar, params: ModelParams):
    """True where uniform HV flow at density rho_bar is linearly stable.

    The criterion is h'(rho_bar) > -U'(rho_bar); with the closures used
    here it fails on a band of intermediate densities and holds again
    near the empty road and near the jam.
    """
    rho_bar = np.asarray(rho_bar, dtype=float)
    if np.any(rho_bar <= 0.0) or np.any(rho_bar >= params.rho_jam):
        raise DomainError("rho_bar must lie strictly inside (0, rho_jam)")
    hp = hesitation_deriv(rho_bar, params)
    out = hp > -desired_speed_deriv(rho_bar, params)
    return bool(out) if out.ndim == 0 else out


@dataclass
class FourierModePair:
    """Complex mode amplitudes along the rescaled time grid."""

    rho_bar: float
    lam: float
    eta: np.ndarray
    rho_hat: np.ndarray
    u_hat: np.ndarray
    resonant: bool = False


def _mode_degenerate(lam: float, eta: np.ndarray):
    """Closed form at the double-root density rho_bar = 4/5."""
    den = 5j + 2.0 * lam
    phase = np.exp(1j * eta / 5.0)
    rho_hat = phase * (5j - 2.0 * eta + 2.0 * lam) / den
    u_hat = -phase * (5j - eta + lam) / den
    return rho_hat, u_hat, abs(den)


def _mode_generic(rho_bar: float, lam: float, eta: np.ndarray):
    """Closed form away from rho_bar = 4/5, organised so every complex
    exponential has a nonpositive real part for either sign of lambda."""
    r = np.sqrt(complex(rho_bar * (5.0 * rho_bar - 4.0)))
    a1 = r + rho_bar
    a2 = r - rho_bar
    b1 = r + 3.0 * rho_bar - 2.0
    b2 = r - 3.0 * rho_bar + 2.0
    phase = np.exp(1j * eta * (3.0 * rho_bar - 2.0) / 2.0)

    if lam >= 0.0:
        e_half = np.exp(1j * r * eta / 2.0)
        e_tail = np.exp(1j * r * (lam - eta / 2.0))
        den = a1 + a2 * np.exp(1j * r * lam)
    else:
        e_half = np.exp(1j * r * (eta / 2.0 - lam))
        e_tail = np.exp(-1j * r * eta / 2.0)
        den = a1 * np.exp(-1j * r * lam) + a2

    rho_hat = phase * (a1 * e_half + a2 * e_tail) / den
    u_hat = -phase * (b1 * e_half + b2 * e_tail) / den
    return rho_hat, u_hat, abs(den)


def mfg_mode_solution(rho_bar: float, lam: float, eta=None, n_eta: int = 400) -> FourierModePair:
    """Solve the mode boundary value problem along eta between 0 and lam.

    rho_bar is the dimensionless uniform density in (0, 1); lam may take
    either sign (negative wavenumbers).  Raises ResonanceError when the
    horizon denominator vanishes.
    """
    if not 0.0 < rho_bar < 1.0:
        raise DomainError(f"rho_bar must lie in (0, 1), got {rho_bar}")
    if eta is None:
        eta = np.linspace(0.0, lam, n_eta)
    else:
        eta = np.asarray(eta, dtype=float)
        lo, hi = min(0.0, lam), max(0.0, lam)
        if np.any(eta < lo - 1e-9 * (1 + abs(lam))) or np.any(eta > hi + 1e-9 * (1 + abs(lam))):
            raise DomainError("eta samples must lie between 0 and lam")

    if abs(5.0 * rho_bar - 4.0) < _DEGENERATE_TOL:
        rho_hat, u_hat, den = _mode_degenerate(lam, eta)
    else:
        rho_hat, u_hat, den = _mode_generic(rho_bar, lam, eta)

    if den < _RESONANCE_TOL:
        raise ResonanceError(
            f"mode denominator {den:.3e} at rho_bar={rho_bar}, lambda={lam}"
        )
    return FourierModePair(rho_bar=rho_bar, lam=lam, eta=eta, rho_hat=rho_hat, u_hat=u_hat)


def mode_energy(rho_bar: float, lam: float, n_eta: int = 400) -> float:
    """Worst |rho_hat|^2 + |u_hat|^2 over the horizon of one mode."""
    pair = mfg_mode_solution(rho_bar, lam, n_eta=n_eta)
    return float(np.max(np.abs(pair.rho_hat) ** 2 + np.abs(pair.u_hat) ** 2))


@dataclass
class ModeEnergyScan:
    """Energy landscape over (rho_bar, lambda) with per-density verdicts."""

    rho_bars: np.ndarray
    lambdas: np.ndarray
    energies: np.ndarray          # shape (len(rho_bars), len(lambdas)), NaN where skipped
    skipped: np.ndarray           # bool, resonant samples
    bounded: np.ndarray           # bool per rho_bar

    def as_rows(self):
        """Yield (rho_bar, lambda, energy) rows, skipping resonances."""
        for i, rb in enumerate(self.rho_bars):
            for j, lm in enumerate(self.lambdas):
                if not self.skipped[i, j]:
                    yield float(rb), float(lm), float(self.energies[i, j])


def scan_lambdas(lam_max: float = 1e3, n_log: int = 200, n_lin: int = 50) -> np.ndarray:
    """Sampling of lambda: log-spaced per sign plus a linear patch at 0."""
    if lam_max <= 1e-2:
        raise DomainError("lam_max must exceed the 1e-2 log-grid floor")
    logs = np.logspace(-2.0, np.log10(lam_max), n_log)
    lin = np.linspace(-1e-2, 1e-2, n_lin)
    return np.unique(np.concatenate([-logs[::-1], lin, logs]))


def mfg_boundedness_scan(
    rho_bars,
    lam_max: float = 1e3,
    n_log: int = 200,
    n_lin: int = 50,
    n_eta: int = 400,
    headroom: float = 1.05,
) -> ModeEnergyScan:
    """Scan mode energies over horizons up to |lambda| = lam_max.

    A density passes ("bounded") when the energy max over the largest
    |lambda| decade stays within `headroom` of the max over all smaller
    |lambda|: growth that has stopped by the last decade is treated as
    saturated.  Resonant samples are skipped and flagged, never folded
    into a verdict silently.
    """
    rho_bars = np.atleast_1d(np.asarray(rho_bars, dtype=float))
    lambdas = scan_lambdas(lam_max, n_log, n_lin)
    energies = np.full((rho_bars.size, lambdas.size), np.nan)
    skipped = np.zeros_like(energies, dtype=bool)
    bounded = np.zeros(rho_bars.size, dtype=bool)
    decade_cut = lam_max / 10.0

    for i, rb in enumerate(rho_bars):
        for j, lm in enumerate(lambdas):
            try:
                energies[i, j] = mode_energy(float(rb), float(lm), n_eta=n_eta)
            except ResonanceError:
                skipped[i, j] = True
        if np.any(skipped[i]):
            log.warning(
                "boundedness scan: %d resonant horizons skipped at rho_bar=%g",
                int(np.count_nonzero(skipped[i])), rb,
            )
        small = np.abs(lambdas) <= decade_cut
        e_small = np.nanmax(energies[i, small])
        e_last = np.nanmax(energies[i, ~small])
        bounded[i] = e_last <= headroom * e_small
    return ModeEnergyScan(
        rho_bars=rho_bars, lambdas=lambdas, energies=energies,
        skipped=skipped, bounded=bounded,
    )


def reduced_mfg_rhs_check(rho: np.ndarray, u: np.ndarray, dx: float, dt: float):
    """Discrete residuals of the control-eliminated game dynamics.

    On dimensionless fields (u_max = rho_jam = 1) the value function can
    be eliminated from the game, leaving

        rho_t + (rho u)_x = 0
        u_t + u u_x - (rho u)_x = 0.

    Residuals use forward differences in time and centered differences
    in space, independent of any solver stencil, so a trajectory that
    honours the dynamics shows O(dx + dt) residuals on smooth regions.
    Returns (r1, r2) of shape (nt, nx) for fields of shape (nt+1, nx).
    """
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(u, dtype=float)
    if rho.shape != u.shape or rho.ndim != 2 or rho.shape[0] < 2:
        raise DomainError("need matching (nt+1, nx) fields with nt >= 1")

    def ddx(f):
        return (np.roll(f, -1, axis=1) - np.roll(f, 1, axis=1)) / (2.0 * dx)

    q = rho * u
    rho_t = (rho[1:] - rho[:-1]) / dt
    u_t = (u[1:] - u[:-1]) / dt
    r1 = rho_t + ddx(q)[:-1]
    r2 = u_t + (u * ddx(u))[:-1] - ddx(q)[:-1]
    return r1, r2
