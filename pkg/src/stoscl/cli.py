"""Command-line front end.

Science parameters come from a TOML config; flags only choose paths,
worker count and verbosity. Exit codes: 0 success, 1 invalid config or
arguments, 2 runtime failure (blow-up, integrity, missing data), 3 a
verification check failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
import uuid
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .config import RunConfig, load_config, parse_config, render_config
from .ensemble import sine_initial, zero_initial, run_ensemble
from .errors import ArgumentError, ConfigError, IntegrityError, StosclError
from .flux import nondegeneracy_sweep
from .io import Manifest, read_csv, read_snapshots, write_csv, write_snapshots
from .kinetic import dissipation_balance
from .solver import _Scheme, run
from .spectral import History, XiGrid, decompose
from .verify import run_checks

__all__ = ["main", "default_config_text"]

log = logging.getLogger("stoscl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


def default_config_text() -> str:
    return resources.files("stoscl").joinpath("data/default.toml").read_text()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load(path) -> tuple[RunConfig, str]:
    if path is None:
        text = default_config_text()
    else:
        p = Path(path)
        if not p.is_file():
            raise ArgumentError(f"config file {p} not found")
        text = p.read_text()
    return parse_config(text), text


def _outdir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for p in out.iterdir():
        if p.is_file() and p.name in (Manifest.NAME,):
            p.unlink()
    return out


def _manifest(cfg, command, started, outdir, paths=(), **extra):
    m = Manifest(uuid.uuid4().hex, __version__, command, _config_dict(cfg), cfg.seed_root,
                 started, _now(), list(paths), {}, extra)
    m.hash_outputs(outdir)
    m.write(outdir)
    return m


def _config_dict(cfg):
    return tomli.loads(render_config(cfg))


# --- subcommands ---------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg, _ = _load(args.config)
    started = _now()
    out = _outdir(args, cfg)
    grid, flux = cfg.build_grid(), cfg.build_flux()
    noise = cfg.build_noise()
    path = noise.path(args.path) if noise.K else None
    scfg = cfg.solver_config()
    rec = run(cfg.initial_state(grid), scfg, flux, path, snapshots=True)
    (out / "config.toml").write_text(render_config(cfg))
    write_snapshots(out / "trajectory.tscl", rec.times, np.asarray(rec.snapshots), grid.N, grid.M)
    names = ["mean", "L1", "L2", "min", "max"]
    write_csv(out / "observables.csv", ["time"] + names,
              zip(rec.times, *(rec.observables[k] for k in names)))
    write_csv(out / "steps.csv", ["step", "dt"], enumerate(rec.step_dts))
    _manifest(cfg, "simulate", started, out, [{"path": args.path, "status": "ok"}],
              increment_hash=rec.increment_hash, steps=rec.steps, eta=rec.eta, path_index=args.path)
    log.info("simulate: %d steps to t=%.4g, output in %s", rec.steps, rec.final.time, out)
    return EXIT_OK


def cmd_ensemble(args) -> int:
    cfg, _ = _load(args.config)
    started = _now()
    out = _outdir(args, cfg)
    grid, flux, noise = cfg.build_grid(), cfg.build_flux(), cfg.build_noise()
    ecfg = cfg.ensemble_config(args.workers)
    gen = zero_initial if cfg.initial.kind == "zero" else sine_initial(cfg.initial.amplitude)
    m = run_ensemble(ecfg, cfg.solver_config(), noise if noise.K else None, gen, grid, flux, kinetic={})
    (out / "config.toml").write_text(render_config(cfg))
    write_csv(out / "summary.csv", ["observable", "mean", "stderr", "n"], m.summary())
    for name, counts in m.counts.items():
        e = m.edges[name]
        write_csv(out / f"hist_{name}.csv", ["lo", "hi", "count"], zip(e[:-1], e[1:], counts))
    m.kinetic.to_csv(out / "kinetic.csv")
    bal = dissipation_balance(m.kinetic, noise.l2_input_rate, cfg.ensemble.burn_in)
    write_csv(out / "balance.csv", ["lhs", "rhs", "ratio"], [(bal.lhs, bal.rhs, bal.ratio)])
    status = [{"path": i, "status": "ok" if ok else "blown-up"} for i, ok in enumerate(m.valid)]
    write_csv(out / "paths.csv", ["path", "status"], [(s["path"], s["status"]) for s in status])
    _manifest(cfg, "ensemble", started, out, status, n_blown=m.n_blown, balance_ratio=bal.ratio)
    log.info("ensemble: %d paths, balance ratio %.4f, output in %s", ecfg.paths, bal.ratio, out)
    return EXIT_OK


def cmd_decompose(args) -> int:
    run_dir = Path(args.run)
    man = Manifest.read(run_dir)
    if man.command != "simulate":
        raise ArgumentError(f"{run_dir} holds a '{man.command}' run; decompose needs a simulate run")
    traj = run_dir / "trajectory.tscl"
    if not traj.exists():
        raise ArgumentError(f"{run_dir} has no trajectory.tscl; re-run simulate")
    cfg = load_config(run_dir / "config.toml")
    if cfg.solver.record_every != 1:
        raise ArgumentError("decompose replays every step: re-run simulate with solver.record_every = 1")
    started = _now()
    times, u, N, M = read_snapshots(traj)
    grid, flux, noise = cfg.build_grid(), cfg.build_flux(), cfg.build_noise()
    if (N, M) != (grid.N, grid.M):
        raise ArgumentError("trajectory grid does not match its config")
    scfg = cfg.solver_config()
    eta = scfg.viscosity(grid)
    dt = np.diff(times)
    steps_file = run_dir / "steps.csv"
    if steps_file.exists():
        # exact step sizes; differences of the recorded times lose the last bits
        dt = np.array([float(r[1]) for r in read_csv(steps_file)[1]])
        if len(dt) != len(times) - 1:
            raise IntegrityError("steps.csv does not match the trajectory")
    sch = _Scheme(flux, grid, eta, scfg.flux_scheme)
    mid = sch.update(u[:-1], dt) if len(dt) else np.zeros((0,) + grid.shape)
    pidx = int(man.extra.get("path_index", 0))
    path = noise.path(pidx) if noise.K else None
    hist = History(grid, eta, times, dt, u, mid, man.extra.get("increment_hash", ""),
                   noise if noise.K else None, pidx)
    d = cfg.decomposition
    xi = XiGrid(1.05 * max(float(np.max(np.abs(u))), 1e-3), d.J)
    res = decompose(cfg.semigroup(), hist, flux, path, None, xi)
    out = Path(args.out) if args.out else run_dir / "decomposition"
    out.mkdir(parents=True, exist_ok=True)
    keep = np.unique(np.concatenate([np.arange(0, len(res.times), d.output_every), [len(res.times) - 1]]))
    for name, series in res.parts().items():
        write_snapshots(out / f"part_{name}.tscl", res.times[keep], series.real()[keep], N, M)
    write_csv(out / "residual.csv", ["time", "relative_l1_residual"], zip(res.times, res.residual))
    (out / "config.toml").write_text(render_config(cfg))
    _manifest(cfg, "decompose", started, out, [{"path": pidx, "status": "ok"}], source_run=man.run_id,
              median_residual=float(np.median(res.residual[1:])) if len(res.residual) > 1 else 0.0)
    log.info("decompose: %d record times, median residual %.3g", len(res.times), np.median(res.residual))
    return EXIT_OK


def cmd_nondegeneracy(args) -> int:
    cfg, _ = _load(args.config)
    started = _now()
    out = _outdir(args, cfg)
    f = cfg.flux
    rep = nondegeneracy_sweep(cfg.build_flux(), f.eps_samples, f.n_xi, f.n_beta)
    write_csv(out / "nondeg.csv", ["eps", "iota", "eta"],
              [(r["eps"], r["iota"], r["eta"]) for r in rep.rows()])
    write_csv(out / "fit.csv", ["quantity", "b", "c1"],
              [("iota", rep.b_fit, rep.c1_fit), ("eta", rep.b_eta_fit, rep.c1_eta_fit)])
    (out / "config.toml").write_text(render_config(cfg))
    _manifest(cfg, "nondegeneracy", started, out, degenerate=rep.degenerate)
    log.info("nondegeneracy: b = %s", rep.b_fit)
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg, _ = _load(args.config)
    results = run_checks(cfg)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_default_config(args) -> int:
    sys.stdout.write(default_config_text())
    return EXIT_OK


# --- entry point ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stoscl", description="Stochastic scalar conservation laws on the torus.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, required=True):
        if required:
            sp.add_argument("config", help="TOML run configuration")
        else:
            sp.add_argument("config", nargs="?", help="TOML run configuration (default: shipped config)")
        sp.add_argument("-o", "--out", help="output directory (default: output_dir from the config)")

    sp = sub.add_parser("simulate", help="one path with full snapshot recording")
    with_config(sp)
    sp.add_argument("--path", type=int, default=0, help="noise stream index")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("ensemble", help="independent paths and their empirical measure")
    with_config(sp)
    sp.add_argument("-j", "--workers", type=int, default=1, help="worker processes")
    sp.set_defaults(fn=cmd_ensemble)

    sp = sub.add_parser("decompose", help="split a simulate run into its kinetic parts")
    sp.add_argument("run", help="directory written by simulate")
    sp.add_argument("-o", "--out", help="output directory (default: RUN/decomposition)")
    sp.set_defaults(fn=cmd_decompose)

    sp = sub.add_parser("nondegeneracy", help="iota and eta sweep with power-law fits")
    with_config(sp)
    sp.set_defaults(fn=cmd_nondegeneracy)

    sp = sub.add_parser("verify", help="run the invariant suite")
    with_config(sp, required=False)
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("default-config", help="print the shipped configuration")
    sp.set_defaults(fn=cmd_default_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        for prob in exc.problems:
            print(f"config error: {prob}", file=sys.stderr)
        return EXIT_CONFIG
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StosclError as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FloatingPointError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
