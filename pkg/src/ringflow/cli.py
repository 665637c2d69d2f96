"""Command-line surface: JSON config in, CSV/JSON results out.

The config schema is flat groups of scalars; unknown keys are rejected
so a typo cannot silently fall back to a default.  Every emitted file
name embeds a hash of the canonical config, which makes re-runs land on
byte-identical outputs and lets a directory hold many runs without
collisions.  All numbers are written with 17 significant digits.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arz import CflViolationError, NegativeDensityError
from .core import DomainError, GridSpec, ModelParams
from .experiments import (
    ScenarioSpec,
    UnresolvedScenarioError,
    run_group1,
    run_group2,
    run_group3,
    run_scenario,
)
from .newton import SingularJacobianError
from .stability import arz_linear_stable, mfg_boundedness_scan

log = logging.getLogger(__name__)

MODES = (
    "simulate-arz", "simulate-mfg", "simulate-mixed",
    "stability-arz", "stability-mfg-scan",
    "sweep-group1", "sweep-group2", "sweep-group3",
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4


class ConfigError(ValueError):
    """The configuration document is malformed or inconsistent."""


def _fmt(v) -> str:
    """One number, 17 significant digits, no locale surprises."""
    return format(float(v), ".17g")


def _default_horizon(length: float, u_max: float) -> float:
    return 2.0 * length / u_max


def _grid_range(start: float, stop: float, step: float) -> tuple:
    n = int(round((stop - start) / step)) + 1
    return tuple(round(start + k * step, 10) for k in range(n))


# Default sweep axes; steps chosen to resolve the diagrams' structure
# at desk scale.
GROUP1_AXIS = _grid_range(0.05, 0.75, 0.05)
GROUP2_P_AXIS = _grid_range(0.0, 1.0, 0.1)
GROUP2_RT_AXIS = _grid_range(0.1, 0.75, 0.05)
GROUP3_BETA_AXIS = _grid_range(0.0, 1.0, 0.1)
GROUP3_P_AXIS = _grid_range(0.0, 1.0, 0.1)


@dataclass(frozen=True)
class RunConfig:
    """Everything one invocation needs, defaults already applied."""

    mode: str | None
    params: ModelParams
    length: float
    horizon: float
    nx: int
    cfl_factor: float
    rho_bar_av: float
    rho_bar_hv: float
    perturbation_rel_amplitude: float
    tol: float
    max_iter: int
    sweep_axis1: tuple | None
    sweep_axis2: tuple | None
    rho_bar_tot: float
    jobs: int | None
    stability_rho_bars: tuple | None
    lam_max: float
    n_log: int
    n_lin: int
    n_eta: int
    headroom: float
    out_dir: str
    traces: bool


def _take(group: dict, section: str, key: str, default, kind):
    """Pop one typed value from a config section, or its default."""
    if key not in group:
        return default
    v = group.pop(key)
    if v is None:
        return default
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number, got {v!r}")
        return float(v)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{section}.{key} must be an integer, got {v!r}")
        return int(v)
    if kind is bool:
        if not isinstance(v, bool):
            raise ConfigError(f"{section}.{key} must be true/false, got {v!r}")
        return v
    if kind is str:
        if not isinstance(v, str):
            raise ConfigError(f"{section}.{key} must be a string, got {v!r}")
        return v
    if kind is tuple:  # list of numbers
        if not isinstance(v, list) or not v or any(
            isinstance(e, bool) or not isinstance(e, (int, float)) for e in v
        ):
            raise ConfigError(f"{section}.{key} must be a non-empty list of numbers")
        return tuple(float(e) for e in v)
    raise AssertionError(kind)


def _section(doc: dict, name: str) -> dict:
    sec = doc.pop(name, None)
    if sec is None:
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section '{name}' must be an object")
    return dict(sec)


def _reject_unknown(section: str, group: dict):
    if group:
        raise ConfigError(
            f"unknown key{'s' if len(group) > 1 else ''} in '{section}': "
            + ", ".join(sorted(group))
        )


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON config document, applying defaults.

    Unknown keys anywhere are an error.  Scenario-level constraints
    (density cap, jam-density headroom) are checked here for the
    simulate modes so a bad config dies before any solve starts.
    """
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as err:
        raise ConfigError(
            f"config is not valid JSON: {err.msg} at line {err.lineno} "
            f"column {err.colno}"
        ) from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    doc = dict(doc)

    mode = _take(doc, "<root>", "mode", None, str)
    if mode is not None and mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}; got '{mode}'")

    g = _section(doc, "params")
    u_max = _take(g, "params", "u_max", 30.0, float)
    rho_jam = _take(g, "params", "rho_jam", 1.0 / 7.5, float)
    tau = _take(g, "params", "tau", 3.0, float)
    beta = _take(g, "params", "beta", 0.0, float)
    _reject_unknown("params", g)
    try:
        params = ModelParams(u_max=u_max, rho_jam=rho_jam, tau=tau, beta=beta)
    except DomainError as err:
        raise ConfigError(f"params: {err}") from None

    g = _section(doc, "grid")
    length = _take(g, "grid", "length", 1000.0, float)
    horizon = _take(g, "grid", "horizon", None, float)
    nx = _take(g, "grid", "nx", 100, int)
    cfl_factor = _take(g, "grid", "cfl_factor", 0.5, float)
    _reject_unknown("grid", g)
    if horizon is None:
        horizon = _default_horizon(length, params.u_max)

    g = _section(doc, "scenario")
    rho_bar_av = _take(g, "scenario", "rho_bar_av", 0.12, float)
    rho_bar_hv = _take(g, "scenario", "rho_bar_hv", 0.28, float)
    amp = _take(g, "scenario", "perturbation_rel_amplitude", 0.1, float)
    _reject_unknown("scenario", g)

    g = _section(doc, "solver")
    tol = _take(g, "solver", "tol", 1e-8, float)
    max_iter = _take(g, "solver", "max_iter", 50, int)
    _reject_unknown("solver", g)
    if tol <= 0 or not np.isfinite(tol):
        raise ConfigError("solver.tol must be positive and finite")
    if max_iter < 1:
        raise ConfigError("solver.max_iter must be >= 1")

    g = _section(doc, "sweep")
    sweep_axis1 = _take(g, "sweep", "axis1", None, tuple)
    sweep_axis2 = _take(g, "sweep", "axis2", None, tuple)
    rho_bar_tot = _take(g, "sweep", "rho_bar_tot", 0.5, float)
    jobs = _take(g, "sweep", "jobs", None, int)
    _reject_unknown("sweep", g)
    if jobs is not None and jobs < 1:
        raise ConfigError("sweep.jobs must be >= 1")

    g = _section(doc, "stability")
    stability_rho_bars = _take(g, "stability", "rho_bars", None, tuple)
    lam_max = _take(g, "stability", "lam_max", 1e3, float)
    n_log = _take(g, "stability", "n_log", 200, int)
    n_lin = _take(g, "stability", "n_lin", 50, int)
    n_eta = _take(g, "stability", "n_eta", 400, int)
    headroom = _take(g, "stability", "headroom", 1.05, float)
    _reject_unknown("stability", g)

    g = _section(doc, "output")
    out_dir = _take(g, "output", "directory", ".", str)
    traces = _take(g, "output", "traces", False, bool)
    _reject_unknown("output", g)

    _reject_unknown("<root>", doc)

    cfg = RunConfig(
        mode=mode, params=params, length=length, horizon=horizon, nx=nx,
        cfl_factor=cfl_factor, rho_bar_av=rho_bar_av, rho_bar_hv=rho_bar_hv,
        perturbation_rel_amplitude=amp, tol=tol, max_iter=max_iter,
        sweep_axis1=sweep_axis1, sweep_axis2=sweep_axis2,
        rho_bar_tot=rho_bar_tot, jobs=jobs,
        stability_rho_bars=stability_rho_bars, lam_max=lam_max,
        n_log=n_log, n_lin=n_lin, n_eta=n_eta, headroom=headroom,
        out_dir=out_dir, traces=traces,
    )
    if cfg.mode in ("simulate-arz", "simulate-mfg", "simulate-mixed"):
        _scenario_for(cfg)  # validates densities and grid before any solve
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Canonical JSON for a RunConfig: sorted keys, 17-digit floats.

    parse_config(serialize_config(cfg)) reproduces cfg exactly; the
    config hash in file names is the digest of this string.
    """
    doc = {
        "mode": cfg.mode,
        "params": {
            "u_max": cfg.params.u_max, "rho_jam": cfg.params.rho_jam,
            "tau": cfg.params.tau, "beta": cfg.params.beta,
        },
        "grid": {
            "length": cfg.length, "horizon": cfg.horizon,
            "nx": cfg.nx, "cfl_factor": cfg.cfl_factor,
        },
        "scenario": {
            "rho_bar_av": cfg.rho_bar_av, "rho_bar_hv": cfg.rho_bar_hv,
            "perturbation_rel_amplitude": cfg.perturbation_rel_amplitude,
        },
        "solver": {"tol": cfg.tol, "max_iter": cfg.max_iter},
        "sweep": {
            "axis1": list(cfg.sweep_axis1) if cfg.sweep_axis1 else None,
            "axis2": list(cfg.sweep_axis2) if cfg.sweep_axis2 else None,
            "rho_bar_tot": cfg.rho_bar_tot, "jobs": cfg.jobs,
        },
        "stability": {
            "rho_bars": list(cfg.stability_rho_bars) if cfg.stability_rho_bars else None,
            "lam_max": cfg.lam_max, "n_log": cfg.n_log, "n_lin": cfg.n_lin,
            "n_eta": cfg.n_eta, "headroom": cfg.headroom,
        },
        "output": {"directory": cfg.out_dir, "traces": cfg.traces},
    }
    return _to_json(doc)


def _to_json(obj, indent: int = 0) -> str:
    """JSON text with every float at 17 significant digits, keys sorted."""
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = (
            f'{inner}"{k}": {_to_json(obj[k], indent + 1)}'
            for k in sorted(obj)
        )
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        seq = list(obj)
        if not seq:
            return "[]"
        items = (f"{inner}{_to_json(v, indent + 1)}" for v in seq)
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not np.isfinite(v):
            return f'"{v!r}"'  # nan/inf are not JSON; keep them readable
        return _fmt(v)
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj)!r}")


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:12]


# --------------------------------------------------------------------
# result emission


class _Emitter:
    """Collects the files of one run and writes the manifest last."""

    def __init__(self, cfg: RunConfig, out_dir: Path):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.stem = f"{cfg.mode}_{self.hash}"
        self.out_dir = out_dir
        self.files: list[str] = []
        self.notes: list[str] = []

    def path(self, suffix: str) -> Path:
        name = f"{self.stem}{suffix}"
        self.files.append(name)
        return self.out_dir / name

    def write_text(self, suffix: str, text: str):
        self.path(suffix).write_text(text)

    def write_json(self, suffix: str, obj):
        self.write_text(suffix, _to_json(obj) + "\n")

    def finish(self):
        manifest = {
            "mode": self.cfg.mode,
            "config_hash": self.hash,
            "files": sorted(self.files),
            "notes": self.notes,
            "config": json.loads(serialize_config(self.cfg)),
        }
        (self.out_dir / "manifest.json").write_text(_to_json(manifest) + "\n")


def _csv_lines(header: str, rows) -> str:
    return "\n".join([header] + [",".join(r) for r in rows]) + "\n"


def _field_csv(t, x, field) -> str:
    header = "t," + ",".join(f"x={_fmt(v)}" for v in x)
    rows = (
        [_fmt(t[k])] + [_fmt(v) for v in field[k]]
        for k in range(field.shape[0])
    )
    return _csv_lines(header, rows)


def _trace_csv(t, trace) -> str:
    rows = ([_fmt(t[k]), _fmt(trace[k])] for k in range(len(trace)))
    return _csv_lines("t,E", rows)


def _verdict_json(verdict, grid: GridSpec) -> dict:
    return {
        "stable": verdict.stable,
        "e0": verdict.e0,
        "e_max": verdict.e_max,
        "t_of_max": verdict.t_of_max,
        "unperturbed": verdict.unperturbed,
        "partial": verdict.partial,
        "grid": {"nx": grid.nx, "nt": grid.nt, "dx": grid.dx, "dt": grid.dt},
    }


def _scenario_for(cfg: RunConfig) -> ScenarioSpec:
    av, hv = cfg.rho_bar_av, cfg.rho_bar_hv
    if cfg.mode == "simulate-arz" and av != 0.0:
        raise ConfigError("simulate-arz needs scenario.rho_bar_av = 0")
    if cfg.mode == "simulate-mfg" and hv != 0.0:
        raise ConfigError("simulate-mfg needs scenario.rho_bar_hv = 0")
    if cfg.mode == "simulate-mixed" and (av == 0.0 or hv == 0.0):
        raise ConfigError("simulate-mixed needs both class densities positive")
    try:
        template = GridSpec.build(cfg.length, cfg.horizon, cfg.nx, cfg.params,
                                  cfl_factor=cfg.cfl_factor)
        return ScenarioSpec(
            av, hv, template, cfg.params, beta=cfg.params.beta,
            perturbation_rel_amplitude=cfg.perturbation_rel_amplitude,
        )
    except DomainError as err:
        raise ConfigError(str(err)) from None


def _render_figures(cfg: RunConfig, em: _Emitter, traj_av, traj_hv,
                    verdict, grid: GridSpec):
    """Density heatmaps and the deviation trace, next to the CSVs.

    Rendering is best effort: a box without matplotlib still gets the
    full delimited output, with the skip noted in the manifest.
    """
    try:
        import matplotlib
        matplotlib.use("Agg", force=True)
        import matplotlib.pyplot as plt
    except ImportError:
        em.notes.append("figures skipped: matplotlib is not importable")
        return

    for name, traj in (("av", traj_av), ("hv", traj_hv)):
        if traj is None:
            continue
        steps = traj.density.shape[0]
        fig, ax = plt.subplots(figsize=(7.0, 4.0), constrained_layout=True)
        im = ax.imshow(
            traj.density / cfg.params.rho_jam,
            origin="lower", aspect="auto", cmap="viridis", vmin=0.0,
            extent=(0.0, grid.length, 0.0, float(grid.t[steps - 1])),
        )
        fig.colorbar(im, ax=ax, label="density / jam density")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("t [s]")
        ax.set_title(f"{name} class density")
        fig.savefig(em.path(f"_rho_{name}.png"), dpi=150)
        plt.close(fig)

    trace = np.asarray(verdict.trace)
    fig, ax = plt.subplots(figsize=(6.0, 3.5), constrained_layout=True)
    ax.plot(grid.t[: trace.size], trace, lw=1.5)
    ax.axhline(2.0 * verdict.e0, ls="--", color="0.4", lw=1.0,
               label="doubling threshold")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("E(t)")
    ax.set_title("stable" if verdict.stable else "unstable")
    ax.legend(loc="best")
    fig.savefig(em.path("_trace.png"), dpi=150)
    plt.close(fig)


def _run_simulate(cfg: RunConfig, em: _Emitter):
    spec = _scenario_for(cfg)
    traj_av, traj_hv, verdict, grid = run_scenario(
        spec, tol=cfg.tol, max_iter=cfg.max_iter
    )
    rho_tot = None
    for name, traj in (("av", traj_av), ("hv", traj_hv)):
        if traj is None:
            continue
        steps = traj.density.shape[0]
        em.write_text(f"_rho_{name}.csv",
                      _field_csv(grid.t[:steps], grid.x, traj.density))
        rho_tot = traj.density if rho_tot is None else rho_tot + traj.density
    em.write_text("_rho_tot_norm.csv",
                  _field_csv(grid.t[: rho_tot.shape[0]], grid.x,
                             rho_tot / cfg.params.rho_jam))
    em.write_text("_trace.csv", _trace_csv(grid.t, verdict.trace))
    em.write_json("_verdict.json", _verdict_json(verdict, grid))
    _render_figures(cfg, em, traj_av, traj_hv, verdict, grid)


def _run_stability_arz(cfg: RunConfig, em: _Emitter):
    rho_bars = cfg.stability_rho_bars or _grid_range(0.01, 0.99, 0.01)
    rows = []
    for rb in rho_bars:
        stable = bool(arz_linear_stable(rb * cfg.params.rho_jam, cfg.params))
        rows.append([_fmt(rb), str(int(stable))])
    em.write_text(".csv", _csv_lines("rho_bar,stable", rows))
    em.write_json(".json", {
        "rho_bars": list(rho_bars),
        "params": dataclasses.asdict(cfg.params),
    })


def _run_stability_scan(cfg: RunConfig, em: _Emitter):
    rho_bars = np.asarray(cfg.stability_rho_bars or _grid_range(0.1, 0.9, 0.1))
    scan = mfg_boundedness_scan(rho_bars, lam_max=cfg.lam_max, n_log=cfg.n_log,
                                n_lin=cfg.n_lin, n_eta=cfg.n_eta,
                                headroom=cfg.headroom)
    rows = ([_fmt(rb), _fmt(lam), _fmt(e)] for rb, lam, e in scan.as_rows())
    em.write_text(".csv", _csv_lines("rho_bar,lambda,energy", rows))
    ii, jj = np.nonzero(scan.skipped)
    em.write_json(".json", {
        "rho_bars": list(scan.rho_bars),
        "bounded": [bool(b) for b in scan.bounded],
        "skipped_samples": [
            [float(scan.rho_bars[i]), float(scan.lambdas[j])]
            for i, j in zip(ii, jj)
        ],
        "lam_max": cfg.lam_max, "headroom": cfg.headroom,
        "n_eta": cfg.n_eta, "params": dataclasses.asdict(cfg.params),
    })


def _run_sweep(cfg: RunConfig, em: _Emitter):
    template = GridSpec.build(cfg.length, cfg.horizon, cfg.nx, cfg.params,
                              cfl_factor=cfg.cfl_factor)
    kwargs = dict(tol=cfg.tol, max_iter=cfg.max_iter, jobs=cfg.jobs)
    if cfg.mode == "sweep-group1":
        axis1 = cfg.sweep_axis1 or GROUP1_AXIS
        axis2 = cfg.sweep_axis2 or GROUP1_AXIS
        diagram = run_group1(axis1, axis2, template, cfg.params, **kwargs)
    elif cfg.mode == "sweep-group2":
        axis1 = cfg.sweep_axis1 or GROUP2_P_AXIS
        axis2 = cfg.sweep_axis2 or GROUP2_RT_AXIS
        diagram = run_group2(axis1, axis2, template, cfg.params, **kwargs)
    else:
        axis1 = cfg.sweep_axis1 or GROUP3_BETA_AXIS
        axis2 = cfg.sweep_axis2 or GROUP3_P_AXIS
        diagram = run_group3(axis1, axis2, template, cfg.params,
                             rho_bar_tot=cfg.rho_bar_tot, **kwargs)

    name1, name2 = diagram.axis_names
    rows = []
    for i, a in enumerate(diagram.axis1):
        for j, b in enumerate(diagram.axis2):
            v = diagram.verdicts[i][j]
            if v is None:
                rows.append([_fmt(a), _fmt(b), "0", "nan", "nan", "nan", "0"])
            else:
                rows.append([
                    _fmt(a), _fmt(b), str(int(v.stable)), _fmt(v.e0),
                    _fmt(v.e_max), _fmt(v.t_of_max), "1",
                ])
            if cfg.traces and v is not None:
                # sweep points rebuild their own step counts, so the
                # portable trace key is the step index, not a time
                trace_rows = (
                    [str(k), _fmt(v.trace[k])] for k in range(len(v.trace))
                )
                em.write_text(f"_trace_i{i}_j{j}.csv",
                              _csv_lines("step,E", trace_rows))
    em.write_text(".csv", _csv_lines(
        f"{name1},{name2},stable,e0,e_max,t_of_max,resolved", rows))
    em.write_json(".json", {
        "axis_names": list(diagram.axis_names),
        "axis1": list(diagram.axis1),
        "axis2": list(diagram.axis2),
        "metadata": diagram.metadata,
    })


def run(cfg: RunConfig, out_dir: Path) -> int:
    """Execute one parsed config; returns the process exit code."""
    if cfg.mode is None:
        log.error("no mode given (set --mode or the config's 'mode' key)")
        return EXIT_CONFIG
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        em = _Emitter(cfg, out_dir)
        if cfg.mode.startswith("simulate-"):
            _run_simulate(cfg, em)
        elif cfg.mode == "stability-arz":
            _run_stability_arz(cfg, em)
        elif cfg.mode == "stability-mfg-scan":
            _run_stability_scan(cfg, em)
        else:
            _run_sweep(cfg, em)
        em.finish()
    except ConfigError as err:
        log.error("config error: %s", err)
        return EXIT_CONFIG
    except DomainError as err:
        log.error("invalid run values: %s", err)
        return EXIT_CONFIG
    except (UnresolvedScenarioError, SingularJacobianError,
            CflViolationError, NegativeDensityError) as err:
        log.error("solver failed: %s", err)
        return EXIT_SOLVER
    except OSError as err:
        log.error("I/O failure on %s: %s", getattr(err, "filename", "?"), err)
        return EXIT_IO
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ringflow",
        description="Two-class ring-road stability runs: simulations, "
                    "analytic checks, and phase-diagram sweeps.",
    )
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--mode", choices=MODES, help="overrides config mode")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--traces", action="store_true",
                        help="emit per-point E(t) traces for sweeps")
    parser.add_argument("--jobs", type=int, help="parallel sweep workers")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    try:
        text = args.config.read_text() if args.config else ""
    except OSError as err:
        log.error("cannot read config: %s", err)
        return EXIT_IO
    try:
        cfg = parse_config(text)
        if args.mode:
            cfg = dataclasses.replace(cfg, mode=args.mode)
            if cfg.mode.startswith("simulate-"):
                _scenario_for(cfg)
        if args.traces:
            cfg = dataclasses.replace(cfg, traces=True)
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            cfg = dataclasses.replace(cfg, jobs=args.jobs)
    except ConfigError as err:
        log.error("config error: %s", err)
        return EXIT_CONFIG
    out_dir = args.out if args.out else Path(cfg.out_dir)
    return run(cfg, out_dir)


if __name__ == "__main__":
    sys.exit(main())
