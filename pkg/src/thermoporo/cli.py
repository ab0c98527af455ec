"""Command line front end: config ingestion, dispatch, artifact output.

Subcommands
-----------
run
    Execute one ready-made experiment and write its CSV bundle.
convergence
    Mesh/time refinement study with a printed rate table.
pod
    Compress one training trajectory and report the mode spectrum.
rom
    Train a reduced model at a chosen rank and report its errors.
info
    List experiments, defaults, and the config file schema.

Settings come from defaults, then an optional TOML config file, then
command line flags, in that order.  The output directory resolves as
``--out`` flag, then the THERMOPORO_OUT environment variable, then the
``out_dir`` config key.  Exit codes: 0 success, 1 numerical failure
(invalid material parameters, singular systems, an empty basis), 2 usage
or config schema errors.  Fixed-stress steps that hit the sweep cap do
not fail a run; they are recorded in the CSV bundle.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import experiments as ex
from .assembly import CoefficientField, PhysicalParams, build_operator_set
from .hf import FIXED_STRESS, MONOLITHIC, HfProblem, run_hf
from .linalg import LinalgError
from .meshing import FIELDS, BcSpec, build_spaces, build_unit_square_mesh
from .pod import (PodError, export_spectrum_csv, orthonormality_defect,
                  pod_spectrum_report)
from .rom import (
    FS_ROM,
    M_ROM,
    RomOperators,
    lift_trajectory,
    project_blocks,
    project_initial_condition,
    project_loads,
    run_rom,
)

__all__ = ["CliInvocation", "ConfigError", "parse_and_validate", "dispatch",
           "main"]

logger = logging.getLogger("thermoporo.cli")

OUT_ENV_VAR = "THERMOPORO_OUT"

_EXPERIMENT_BLURBS = {
    "1a": "mesh/time refinement study of both solvers and their reduced models",
    "1b": "reduced-model accuracy versus rank on a fixed mesh",
    "1c": "time extrapolation beyond the training window",
    "1d": "online time steps larger than the training step",
    "2": "two-region parametric problem with affine reduced operators",
}

# Config file schema: top-level keys mirror ExperimentConfig fields.
_INT_KEYS = ("n", "cycles", "max_iter", "max_snapshots", "workers")
_FLOAT_KEYS = ("dt_train", "dt_online", "T_train", "T_online", "tol", "L",
               "eig_floor", "conductivity")
_PARAM_KEYS = ("mu", "lam", "c0", "alpha", "alpha_T", "alpha_m", "C_d",
               "theta0")
_GRID_INT_KEYS = ("n_train", "n_test")
_GRID_BOX_KEYS = ("train_box", "test_box")


class ConfigError(Exception):
    """Config file or invocation problem; maps to exit code 2."""


@dataclass(frozen=True)
class CliInvocation:
    """One validated command, ready for dispatch."""

    subcommand: str
    config: ex.ExperimentConfig | None = None
    params_section: dict | None = None
    smoke: bool = False
    verbose: int = 0
    rank: int | None = None
    scheme: str = "both"
    info_experiment: str | None = None


def _parse_r_values(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thermoporo",
        description="Thermo-poroelastic solvers and reduced-order models.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_shared(p, experiment_flag=True):
        if experiment_flag:
            p.add_argument("--experiment", choices=ex.EXAMPLE_IDS,
                           help="which ready-made study to configure")
        p.add_argument("--config", metavar="PATH",
                       help="TOML config file (flags override its keys)")
        p.add_argument("--out", metavar="DIR",
                       help=f"output directory (or set {OUT_ENV_VAR})")
        p.add_argument("--workers", type=int,
                       help="worker processes (default: number of cores)")
        p.add_argument("-v", "--verbose", action="count", default=0,
                       help="log one line per time step; repeat for debug")
        p.add_argument("--n", type=int, help="mesh subdivisions per side")
        p.add_argument("--cycles", type=int, help="refinement cycles")
        p.add_argument("--dt-train", dest="dt_train", type=float,
                       help="training time step")
        p.add_argument("--dt-online", dest="dt_online", type=float,
                       help="online time step")
        p.add_argument("--t-train", dest="T_train", type=float,
                       help="training horizon")
        p.add_argument("--t-online", dest="T_online", type=float,
                       help="online horizon")
        p.add_argument("--tol", type=float, help="fixed-stress tolerance")
        p.add_argument("--max-iter", dest="max_iter", type=int,
                       help="fixed-stress sweep cap")
        p.add_argument("--stabilization", dest="L", type=float,
                       help="fixed-stress stabilization constant")
        p.add_argument("--r-values", dest="r_values", type=_parse_r_values,
                       metavar="R1,R2,...", help="reduced ranks to evaluate")
        p.add_argument("--eig-floor", dest="eig_floor", type=float,
                       help="normalized eigenvalue floor for POD truncation")
        p.add_argument("--max-snapshots", dest="max_snapshots", type=int,
                       help="snapshot cap before decimation")
        p.add_argument("--conductivity", type=float,
                       help="hydraulic and thermal conductivity override")
        p.add_argument("--n-train", dest="n_train", type=int,
                       help="training grid points per parameter direction")
        p.add_argument("--n-test", dest="n_test", type=int,
                       help="test grid points per parameter direction")

    p_run = sub.add_parser("run", help="run one experiment end to end")
    add_shared(p_run)
    p_run.add_argument("--smoke", action="store_true",
                       help="zero-forcing solver check on the configured mesh")

    p_conv = sub.add_parser("convergence",
                            help="refinement study with a printed rate table")
    add_shared(p_conv, experiment_flag=False)

    p_pod = sub.add_parser("pod", help="snapshot compression report")
    add_shared(p_pod)
    p_pod.add_argument("--scheme", choices=("m", "fs"), default="fs",
                       help="training solver (default fs)")

    p_rom = sub.add_parser("rom", help="train and evaluate a reduced model")
    add_shared(p_rom)
    p_rom.add_argument("--rank", type=int, required=True,
                       help="number of modes per field")
    p_rom.add_argument("--scheme", choices=("m", "fs", "both"),
                       default="both", help="scheme pair to evaluate")

    p_info = sub.add_parser("info", help="experiments and config schema")
    p_info.add_argument("--experiment", choices=ex.EXAMPLE_IDS,
                        help="print this experiment's default config")
    p_info.add_argument("-v", "--verbose", action="count", default=0,
                        help=argparse.SUPPRESS)
    return parser


# --------------------------------------------------------------------------
# Config file validation
# --------------------------------------------------------------------------

def _want_int(path: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    return value


def _want_float(path: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _want_box(path: str, value) -> tuple:
    ok = (isinstance(value, list) and len(value) == 2
          and all(isinstance(side, list) and len(side) == 2 for side in value))
    if not ok:
        raise ConfigError(f"{path}: expected [[lo, hi], [lo, hi]]")
    return tuple(tuple(_want_float(path, v) for v in side) for side in value)


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}")


def _validate_file_data(raw: dict) -> dict:
    """Check key names and value types; returns casted settings.

    The result maps ExperimentConfig field names to values, with the
    special keys ``experiment``, ``smoke``, ``out_dir``, ``grid`` (dict of
    ParamGrid overrides) and ``params`` (dict of material constants).
    """
    out: dict = {}
    for key, value in raw.items():
        if key == "experiment":
            if value not in ex.EXAMPLE_IDS:
                raise ConfigError(f"experiment: unknown id {value!r}; "
                                  f"expected one of {ex.EXAMPLE_IDS}")
            out[key] = value
        elif key == "smoke":
            if not isinstance(value, bool):
                raise ConfigError(f"smoke: expected true or false, "
                                  f"got {value!r}")
            out[key] = value
        elif key == "out_dir":
            if not isinstance(value, str):
                raise ConfigError(f"out_dir: expected a string, got {value!r}")
            out[key] = value
        elif key in _INT_KEYS:
            out[key] = _want_int(key, value)
        elif key in _FLOAT_KEYS:
            out[key] = _want_float(key, value)
        elif key == "r_values":
            if not isinstance(value, list) or not value:
                raise ConfigError("r_values: expected a non-empty list "
                                  "of integers")
            out[key] = tuple(_want_int(f"r_values[{i}]", v)
                             for i, v in enumerate(value))
        elif key == "grid":
            if not isinstance(value, dict):
                raise ConfigError("grid: expected a table")
            grid = {}
            for gkey, gval in value.items():
                if gkey in _GRID_INT_KEYS:
                    grid[gkey] = _want_int(f"grid.{gkey}", gval)
                elif gkey in _GRID_BOX_KEYS:
                    grid[gkey] = _want_box(f"grid.{gkey}", gval)
                else:
                    raise ConfigError(f"grid.{gkey}: unknown key")
            out[key] = grid
        elif key == "params":
            if not isinstance(value, dict):
                raise ConfigError("params: expected a table")
            params = {}
            for pkey, pval in value.items():
                if pkey == "L":
                    raise ConfigError("params.L: set the top-level L key "
                                      "instead")
                if pkey not in _PARAM_KEYS:
                    raise ConfigError(f"params.{pkey}: unknown key; expected "
                                      f"one of {_PARAM_KEYS}")
                params[pkey] = _want_float(f"params.{pkey}", pval)
            out[key] = params
        else:
            raise ConfigError(f"{key}: unknown key")
    return out


# --------------------------------------------------------------------------
# parse_and_validate
# --------------------------------------------------------------------------

def parse_and_validate(argv: list[str]) -> CliInvocation:
    """Turn an argv into a validated invocation.

    Raises ConfigError for schema problems; argparse itself exits with
    code 2 on unknown flags or malformed values.
    """
    args = _build_parser().parse_args(argv)
    sub = args.subcommand

    if sub == "info":
        return CliInvocation(subcommand=sub, verbose=args.verbose,
                             info_experiment=args.experiment)

    file_data = _validate_file_data(_load_config_file(args.config)) \
        if args.config else {}

    if sub == "convergence":
        experiment = file_data.get("experiment", "1a")
        if experiment != "1a":
            raise ConfigError("convergence always runs experiment 1a; "
                              "adjust it with --n, --dt-train, --cycles")
    else:
        experiment = args.experiment or file_data.get("experiment")
        if experiment is None:
            raise ConfigError("experiment is required (flag --experiment "
                              "or config key)")
    if sub in ("pod", "rom") and experiment == "2":
        raise ConfigError(f"{sub}: needs one of the closed-form experiments "
                          "1a, 1b, 1c, 1d")
    if sub == "rom" and args.rank < 1:
        raise ConfigError(f"rank must be >= 1, got {args.rank}")
    if sub != "run" and file_data.get("smoke"):
        raise ConfigError("smoke: only applies to the run subcommand")

    params_section = file_data.pop("params", None)
    if experiment == "2":
        if params_section is not None:
            raise ConfigError("params: not applicable to experiment 2 "
                              "(materials come from the parameter grid)")
        if "conductivity" in file_data or args.conductivity is not None:
            raise ConfigError("conductivity: not applicable to experiment 2")

    overrides = {k: v for k, v in file_data.items()
                 if k not in ("experiment", "smoke", "out_dir", "grid")}
    for key in (*_INT_KEYS, *_FLOAT_KEYS, "r_values"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value

    grid_overrides = dict(file_data.get("grid", {}))
    for key in _GRID_INT_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            grid_overrides[key] = value

    out_dir = args.out or os.environ.get(OUT_ENV_VAR) \
        or file_data.get("out_dir")
    if out_dir:
        overrides["out_dir"] = out_dir
    if "workers" not in overrides:
        overrides["workers"] = os.cpu_count() or 1

    try:
        config = ex.default_config(experiment, **overrides)
        if grid_overrides:
            config = replace(config, grid=replace(config.grid,
                                                  **grid_overrides))
        if config.experiment == "1c":
            ex.integral_steps(config.T_train, config.dt_train)
            if config.T_online < config.T_train:
                raise ValueError("T_online must contain the training window")
        if config.experiment == "1d":
            ex.integral_steps(config.dt_online, config.dt_train)
    except ValueError as err:
        raise ConfigError(str(err))

    smoke = bool(getattr(args, "smoke", False) or file_data.get("smoke"))
    return CliInvocation(subcommand=sub, config=config,
                         params_section=params_section, smoke=smoke,
                         verbose=args.verbose,
                         rank=getattr(args, "rank", None),
                         scheme=getattr(args, "scheme", "both"))


# --------------------------------------------------------------------------
# Subcommand bodies
# --------------------------------------------------------------------------

def _scheme_pairs(choice: str) -> list[tuple[str, str]]:
    pairs = {"m": [(MONOLITHIC, M_ROM)], "fs": [(FIXED_STRESS, FS_ROM)]}
    return pairs["m"] + pairs["fs"] if choice == "both" else pairs[choice]


def _training_pieces(config: ex.ExperimentConfig):
    """Problem, operators, and loads for this config's training window."""
    case = ex.configured_case(config)
    problem, spaces, ops = ex.build_manufactured_problem(case, config.n)
    n_steps = ex.integral_steps(config.T_train, config.dt_train)
    loads = ex.assemble_loads(spaces, case.body_force, case.fluid_source,
                              case.heat_source, config.dt_train, n_steps)
    return case, problem, spaces, ops, loads


def _cmd_run(invocation: CliInvocation) -> int:
    config = invocation.config
    t0 = time.perf_counter()
    result = ex.run_config(config)
    elapsed = time.perf_counter() - t0
    print(f"experiment {config.experiment} finished in {elapsed:.1f}s")
    if result.out_dir:
        print(f"wrote {len(result.files)} files to {result.out_dir}")
    else:
        print(f"no output directory configured (flag --out, {OUT_ENV_VAR}, "
              "or config key out_dir); tables were discarded")
    return 0


def _cmd_convergence(invocation: CliInvocation) -> int:
    config = invocation.config
    result = ex.run_config(config)
    study = result.data["study"]
    ns = " ".join(str(c.n) for c in study.cycles)
    print(f"refinement study over meshes n = {ns}, "
          f"dt = {study.cycles[0].dt:g} quartered per cycle")
    print(f"{'scheme':>10s} {'field':>6s} {'L2 rate':>8s} {'H1 rate':>8s}")
    for scheme in sorted(study.rates):
        for name in FIELDS:
            rate = study.rates[scheme][name]
            print(f"{scheme:>10s} {name:>6s} "
                  f"{rate['l2_true']['fit']:8.3f} "
                  f"{rate['h1_true']['fit']:8.3f}")
    if result.out_dir:
        print(f"wrote {len(result.files)} files to {result.out_dir}")
    return 0


def _cmd_pod(invocation: CliInvocation) -> int:
    config = invocation.config
    label = MONOLITHIC if invocation.scheme == "m" else FIXED_STRESS
    case, problem, spaces, ops, loads = _training_pieces(config)
    traj, report = run_hf(problem, label, config.dt_train, config.T_train,
                          config.stopping, ops=ops)
    basis = ex.basis_from_trajectory(traj, ops, r_max=None,
                                     eig_floor=config.eig_floor,
                                     max_snapshots=config.max_snapshots)
    spectra = pod_spectrum_report(basis)
    grams = {"u": ops.GRAM_U, "p": ops.GRAM_P, "theta": ops.GRAM_T}
    print(f"training run: {label}, {report.n_steps} steps, "
          f"{traj.n_states} states")
    for name in FIELDS:
        defect = orthonormality_defect(basis.field(name).modes, grams[name])
        head = ", ".join(f"{v:.2e}" for v in spectra[name][:8])
        print(f"{name}: rank {basis.r(name)}, orthonormality defect "
              f"{defect:.2e}")
        print(f"   normalized eigenvalues: {head}"
              + (", ..." if len(spectra[name]) > 8 else ""))
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        path = os.path.join(config.out_dir, "eigenvalues.csv")
        export_spectrum_csv(basis, path)
        print(f"wrote {path}")
    return 0


def _cmd_rom(invocation: CliInvocation) -> int:
    config = invocation.config
    case, problem, spaces, ops, loads = _training_pieces(config)
    rows = []
    for hf_label, rom_label in _scheme_pairs(invocation.scheme):
        traj, _ = run_hf(problem, hf_label, config.dt_train, config.T_train,
                         config.stopping, ops=ops)
        basis = ex.basis_from_trajectory(traj, ops, r_max=invocation.rank,
                                         eig_floor=config.eig_floor,
                                         max_snapshots=config.max_snapshots)
        rom_ops = RomOperators(project_blocks(basis, ops), config.dt_train,
                               project_loads(basis, loads))
        initial = project_initial_condition(basis, problem.initial_state(),
                                            ops)
        rom_traj, _ = run_rom(rom_label, rom_ops, initial=initial,
                              stopping=config.stopping)
        lifted = lift_trajectory(rom_traj, basis)
        errors = ex.manufactured_errors(lifted, case, spaces, ops)
        distance = ex.trajectory_distance(lifted, traj, ops)
        for name in FIELDS:
            rows.append((rom_label, name, basis.r(name),
                         errors[name]["h1_rel"], distance[name]))
    print(f"{'scheme':>8s} {'field':>6s} {'rank':>4s} "
          f"{'rel H1 error':>13s} {'vs HF':>10s}")
    for scheme, name, r, err, dist in rows:
        print(f"{scheme:>8s} {name:>6s} {r:4d} {err:13.3e} {dist:10.3e}")
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        path = os.path.join(config.out_dir, "errors.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(ex.ERRORS_HEADER)
            for scheme, name, r, err, dist in rows:
                writer.writerow((config.experiment, scheme, name, "h1_rel",
                                 r, f"{err:.17g}"))
                writer.writerow((config.experiment, scheme, name,
                                 "h1_rel_vs_hf", r, f"{dist:.17g}"))
        print(f"wrote {path}")
    return 0


def _cmd_smoke(invocation: CliInvocation) -> int:
    """Zero-forcing run of both solvers; all states must stay zero."""
    config = invocation.config
    params = config.params if config.params is not None \
        else ex.EXAMPLE1_PARAMS
    params = replace(params, L=config.L)
    kd = config.conductivity
    if kd is None:
        kd = ex.EXAMPLE1_CONDUCTIVITY
    coeffs = CoefficientField.constant(K=kd, D=kd)
    spaces = build_spaces(build_unit_square_mesh(config.n), BcSpec())
    problem = HfProblem(spaces=spaces, params=params, coeffs=coeffs,
                        static_loads=True)
    ops = build_operator_set(spaces, params, coeffs)
    worst = 0.0
    for label in (MONOLITHIC, FIXED_STRESS):
        traj, report = run_hf(problem, label, config.dt_train,
                              config.T_train, config.stopping, ops=ops)
        peak = {"u": np.abs(traj.U).max(), "p": np.abs(traj.P).max(),
                "theta": np.abs(traj.TH).max()}
        worst = max(worst, *peak.values())
        print(f"smoke {label}: {report.n_steps} steps, "
              f"max |u| = {peak['u']:.1e}, max |p| = {peak['p']:.1e}, "
              f"max |theta| = {peak['theta']:.1e}")
    print("smoke result:",
          "zero trajectories" if worst == 0.0 else f"nonzero peak {worst:.3e}")
    return 0


def _print_info(experiment: str | None) -> None:
    if experiment is not None:
        config = ex.default_config(experiment)
        print(f"# defaults for experiment {experiment}")
        print(f'experiment = "{experiment}"')
        for key in ("n", "cycles", "dt_train", "dt_online", "T_train",
                    "T_online", "tol", "max_iter", "L", "eig_floor",
                    "max_snapshots", "workers"):
            print(f"{key} = {getattr(config, key)!r}")
        print(f"r_values = {list(config.r_values)}")
        if experiment == "2":
            grid = config.grid
            print("\n[grid]")
            print(f"n_train = {grid.n_train}")
            print(f"n_test = {grid.n_test}")
            print(f"train_box = {[list(side) for side in grid.train_box]}")
            print(f"test_box = {[list(side) for side in grid.test_box]}")
        return
    print("experiments:")
    for exp_id in ex.EXAMPLE_IDS:
        print(f"  {exp_id:3s} {_EXPERIMENT_BLURBS[exp_id]}")
    print("\nconfig file keys (TOML; `thermoporo info --experiment ID` "
          "prints defaults):")
    print(f"  experiment, out_dir, smoke, {', '.join(_INT_KEYS)},")
    print(f"  {', '.join(_FLOAT_KEYS)}, r_values,")
    print(f"  [grid] {', '.join(_GRID_INT_KEYS + _GRID_BOX_KEYS)} "
          "(experiment 2),")
    print(f"  [params] {', '.join(_PARAM_KEYS)} (experiments 1a-1d)")
    print(f"\noutput directory: --out flag, {OUT_ENV_VAR} env var, "
          "or out_dir key")


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def dispatch(invocation: CliInvocation) -> int:
    """Execute a validated invocation; returns the process exit code."""
    if invocation.verbose:
        level = logging.INFO if invocation.verbose == 1 else logging.DEBUG
        logging.basicConfig(level=level, stream=sys.stderr,
                            format="%(name)s: %(message)s")
    if invocation.subcommand == "info":
        _print_info(invocation.info_experiment)
        return 0

    try:
        config = invocation.config
        if invocation.params_section is not None:
            merged = {key: getattr(ex.EXAMPLE1_PARAMS, key)
                      for key in _PARAM_KEYS}
            merged.update(invocation.params_section)
            config = replace(config, params=PhysicalParams(**merged))
            invocation = replace(invocation, config=config)
        if invocation.subcommand == "run" and invocation.smoke:
            return _cmd_smoke(invocation)
        body = {"run": _cmd_run, "convergence": _cmd_convergence,
                "pod": _cmd_pod, "rom": _cmd_rom}[invocation.subcommand]
        return body(invocation)
    except (ValueError, LinalgError, PodError,
            np.linalg.LinAlgError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main(argv: list[str] | None = None) -> int:
    try:
        invocation = parse_and_validate(
            sys.argv[1:] if argv is None else argv)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    try:
        return dispatch(invocation)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
