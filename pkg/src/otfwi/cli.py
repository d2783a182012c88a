"""Command-line entry point.

Every subcommand writes ``manifest.json`` into its output directory, on
success and on failure. Exit codes: 0 success, 2 configuration, 3 numerical
failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .gridio import GridFormatError, read_grid, write_grid
from .monge_ampere import MaConfig, MaDomainError, MaNonConvergence, MaProblem, dump_solution, ma_solve, w2_squared_2d
from .optimize import MISFITS, ShotError
from .scenarios import PRESETS, Scenario, ScenarioError
from .wave import ConfigError, ShotRecord

log = logging.getLogger("otfwi")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(ConfigError):
    pass


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.data = {
            "command": command,
            "scenario": getattr(args, "scenario", None),
            "config_hash": None,
            "seed": getattr(args, "seed", None),
            "start": _now(),
            "end": None,
            "outputs": [],
            "version": version_string(),
            "status": "running",
            "exit_code": None,
            "error": None,
            "diagnostics": {},
        }

    def add(self, *paths):
        for p in paths:
            self.data["outputs"].append(str(p))

    def write(self, out_dir: Path, code: int, error: str | None = None) -> Path:
        self.data.update(end=_now(), exit_code=code, error=error, status="ok" if code == 0 else "failed")
        self.data["outputs"] = [p for p in self.data["outputs"] if Path(p).exists()]
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2, default=_jsonable))
        return path


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


# ------------------------------------------------------------------ helpers


def load_scenario(args) -> tuple[Scenario, str]:
    """Scenario from a file path, or a built-in preset by name; returns it with its serialized text."""
    if not args.scenario:
        raise UsageError("--scenario is required")
    path = Path(args.scenario)
    if path.exists():
        if args.full_scale:
            log.warning("--full-scale only applies to built-in presets; using %s as written", path)
        s = Scenario.load(path)
    elif args.scenario in PRESETS:
        s = PRESETS[args.scenario](full_scale=args.full_scale)
    else:
        raise ScenarioError(f"scenario file not found: {path}")
    if getattr(args, "snapshot_every", None) is not None:
        s.output.snapshot_every = args.snapshot_every
    if getattr(args, "threads", None):
        s.output.threads = args.threads
    if getattr(args, "seed", None) is not None:
        s.output.seed = args.seed
    return s, s.to_text()


def _hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def shot_path(directory: Path, k: int) -> Path:
    return directory / f"shot_{k:04d}.bin"


def read_observed(directory: Path, acq) -> list[ShotRecord]:
    axis = acq.axis
    out = []
    for k in range(len(acq.sources)):
        p = shot_path(directory, k)
        if not p.exists():
            raise FileNotFoundError(f"observed record for shot {k} missing: {p}")
        data = read_grid(p)
        if data.shape != (len(acq.receivers), axis.nt):
            raise ConfigError(f"observed record for shot {k} has shape {data.shape}, "
                              f"expected {(len(acq.receivers), axis.nt)}")
        out.append(ShotRecord(data, axis, k))
    return out


# ------------------------------------------------------------------ commands


def cmd_simulate(args, man: Manifest, out: Path) -> None:
    from .wave import simulate_shots

    s, text = load_scenario(args)
    man.data["config_hash"] = _hash(text)
    truth, _, acq = s.build()
    out.mkdir(parents=True, exist_ok=True)
    man.add(s.save(out / "scenario.ini"))
    recs = simulate_shots(truth, acq, s.sim_config(), s.output.threads)
    for k, rec in enumerate(recs):
        man.add(write_grid(shot_path(out, k), rec.data))
    log.info("wrote %d shot records to %s", len(recs), out)


def cmd_invert(args, man: Manifest, out: Path) -> None:
    from .optimize import lbfgs_minimize

    s, text = load_scenario(args)
    misfit = args.misfit or s.inversion.misfit
    if misfit not in MISFITS:
        raise UsageError(f"--misfit must be one of {MISFITS}")
    man.data["config_hash"] = _hash(text + misfit)
    truth, initial, acq = s.build()
    if not args.observed:
        raise UsageError("--observed DIR is required")
    observed = read_observed(Path(args.observed), acq)
    overrides = {"out_dir": str(out)}
    if args.max_iters is not None:
        overrides["max_iters"] = args.max_iters
    if args.dump_ma:
        overrides["ma"] = MaConfig(dump_dir=str(out / "ma_dump"))
    cfg = s.inversion_config(misfit, **overrides)
    out.mkdir(parents=True, exist_ok=True)
    state = lbfgs_minimize(initial, acq, observed, cfg, truth=truth, error_region=s.error_region())
    man.add(*sorted(out.glob("model_*.bin")), out / f"convergence_{misfit}.csv", out / f"final_model_{misfit}.bin")
    if args.dump_ma:
        man.add(*sorted((out / "ma_dump").glob("*.bin")))
    diag = {"status": state.status, "iterations": state.iteration, "evaluations": state.evaluations,
            "misfit_initial": state.misfit[0], "misfit_final": state.misfit[-1]}
    if misfit == "w2d":
        diag["monge_ampere"] = [{k: d.get(k) for k in ("newton_iters", "residual_norm", "filter_fraction", "fallback")}
                                for d in state.diagnostics]
    man.data["diagnostics"] = diag


def cmd_landscape(args, man: Manifest, out: Path) -> None:
    from .analysis import landscape_gaussian, landscape_shift, two_ricker_signal

    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "gaussian":
        sweep = landscape_gaussian(np.linspace(-3, 3, 21), np.linspace(0.2, 3, 21))
        man.add(sweep.to_csv(out / "landscape_gaussian.csv"))
        return
    tags = {"both": ("l2", "j3"), "l2": ("l2",), "w1d": ("w1d",), "j3": ("j3",)}.get(args.misfit or "both")
    if tags is None:
        raise UsageError("--misfit for landscapes must be l2, w1d, j3 or both")
    sweep = landscape_shift(two_ricker_signal(), np.linspace(-0.6, 0.6, 121), tags)
    man.add(sweep.to_csv(out / "landscape_shift.csv"))


def cmd_noise_study(args, man: Manifest, out: Path) -> None:
    from .analysis import write_csv, noise_reference_signal, noise_scaling

    pieces = [10, 20, 40, 80, 160]
    f = noise_reference_signal()
    seed = 0 if args.seed is None else args.seed
    w2 = noise_scaling(f, pieces, args.trials, seed, tag="w2")
    l2 = noise_scaling(f, pieces, args.trials, seed, tag="l2")
    man.add(write_csv(out / "noise_study.csv", ["pieces", "w2", "l2"], zip(pieces, w2.values, l2.values)))
    man.data["diagnostics"] = {"slope_w2": w2.slope, "slope_l2": l2.slope, "degenerate": w2.degenerate}


def cmd_ma_solve(args, man: Manifest, out: Path) -> None:
    if args.f and args.g:
        f, g = read_grid(args.f), read_grid(args.g)
    elif args.uniform:
        f = g = np.ones((args.uniform, args.uniform))
    else:
        raise UsageError("give --f and --g density grids, or --uniform N")
    if f.shape != g.shape:
        raise UsageError(f"--f grid {f.shape} and --g grid {g.shape} differ")
    prob = MaProblem.from_densities(f, g)
    sol = ma_solve(prob, MaConfig())
    w2 = w2_squared_2d(sol, prob)
    x = prob.coords()
    out.mkdir(parents=True, exist_ok=True)
    man.add(*dump_solution(sol, prob, out))
    man.data["diagnostics"] = {"w2_squared": w2, "newton_iters": sol.newton_iters,
                               "residual_norm": sol.residual_norm, "filter_fraction": sol.filter_fraction,
                               "map_minus_identity_max": float(np.max(np.abs(sol.map - x)))}
    print(f"W2^2 = {w2:.6e}  newton iterations = {sol.newton_iters}")


def cmd_thickness_study(args, man: Manifest, out: Path) -> None:
    from .analysis import thickness_study

    s, text = load_scenario(args)
    man.data["config_hash"] = _hash(text)
    th = [float(x) for x in args.thicknesses.split(",")]
    st = thickness_study(s, th, args.reference, threads=s.output.threads)
    man.add(st.to_csv(out / "thickness_study.csv"))
    man.data["diagnostics"] = {"linf": st.linf, "quiet_until_s": st.quiet_until}


COMMANDS = {
    "simulate": cmd_simulate,
    "invert": cmd_invert,
    "landscape": cmd_landscape,
    "noise-study": cmd_noise_study,
    "ma-solve": cmd_ma_solve,
    "thickness-study": cmd_thickness_study,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario file, or a preset name: " + ", ".join(PRESETS))
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--misfit", help=f"misfit tag: {', '.join(MISFITS)}")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--seed", type=int)
    common.add_argument("--full-scale", action="store_true", help="use full-scale preset counts")
    common.add_argument("--dump-ma", action="store_true", help="dump Monge-Ampere potentials, maps and residuals")
    common.add_argument("--snapshot-every", type=int, help="write the model every K iterations")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="otfwi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="forward-model one record per shot")
    inv = sub.add_parser("invert", parents=[common], help="L-BFGS inversion of observed records")
    inv.add_argument("--observed", help="directory of shot_NNNN.bin records")
    inv.add_argument("--max-iters", type=int)
    land = sub.add_parser("landscape", parents=[common], help="misfit landscape sweeps")
    land.add_argument("--kind", choices=("shift", "gaussian"), default="shift")
    noise = sub.add_parser("noise-study", parents=[common], help="misfit versus number of noise pieces")
    noise.add_argument("--trials", type=int, default=20)
    ma = sub.add_parser("ma-solve", parents=[common], help="solve one Monge-Ampere transport problem")
    ma.add_argument("--f", help="source density grid")
    ma.add_argument("--g", help="target density grid")
    ma.add_argument("--uniform", type=int, help="use uniform N x N densities for both")
    th = sub.add_parser("thickness-study", parents=[common], help="third-layer thickness residuals")
    th.add_argument("--thicknesses", default="0.25,0.5,1.0,2.5", help="comma-separated km")
    th.add_argument("--reference", type=float, default=4.0, help="reference thickness (km)")
    return p


def _classify(exc: BaseException) -> int:
    if isinstance(exc, (GridFormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, ShotError):
        return _classify(exc.__cause__) if exc.__cause__ is not None else EXIT_NUMERIC
    if isinstance(exc, (MaNonConvergence, MaDomainError, FloatingPointError, ArithmeticError,
                        np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, ValueError, KeyError)):
        return EXIT_CONFIG
    return EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    out = Path(args.out)
    man = Manifest(args.command, args)
    if args.threads is not None and args.threads < 1:
        man.write(out, EXIT_CONFIG, "--threads must be >= 1")
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](args, man, out)
    except Exception as exc:  # noqa: BLE001 - every failure still gets a manifest
        code = _classify(exc)
        msg = f"{type(exc).__name__}: {exc}"
        print(f"error: {msg}", file=sys.stderr)
        try:
            man.write(out, code, msg)
        except OSError:
            return EXIT_IO
        return code
    man.write(out, EXIT_OK)
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
