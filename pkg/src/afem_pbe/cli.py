"""``afem-pbe`` command line."""
from __future__ import annotations

import argparse
import logging
import sys

from . import experiments
from .afem import DIAGNOSTICS
from .problems import ExperimentId
from .solver import SolverConfig, SolverError

EXIT_OK = 0
EXIT_SOLVER = 2
EXIT_BUDGET = 3
EXIT_CONFIG = 4

# config-file key -> (argparse dest, converter)
CONFIG_KEYS = {
    "problem": ("problem", str),
    "mode": ("mode", str),
    "theta": ("theta", float),
    "max_vertices": ("max_vertices", int),
    "out": ("out", str),
    "dump_meshes": ("dump_meshes", lambda v: v.strip().lower() in ("1", "true", "yes", "on")),
    "diagnostics": ("diagnostics", str),
    "tol": ("tol", float),
    "seed": ("seed", int),
    "kappa2": ("kappa2", float),
    "rhs": ("rhs", float),
    "corner_variant": ("corner_variant", str),
    "interface": ("interface", str),
    "reference_multiplier": ("reference_multiplier", float),
    "cg_rel_tol": ("cg_rel_tol", float),
}

DEFAULTS = dict(
    mode="both",
    theta=0.5,
    max_vertices=200_000,
    out="results",
    dump_meshes=False,
    diagnostics="linf",
    tol=1e-8,
    seed=0,
    kappa2=1.0,
    rhs=1.0,
    corner_variant="xyz",
    interface="cube",
    reference_multiplier=10.0,
    cg_rel_tol=1e-10,
)


class ConfigError(ValueError):
    pass


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file (``#`` starts a comment)."""
    values = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            dest, conv = CONFIG_KEYS[key]
            try:
                values[dest] = conv(value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for '{key}': {value}") from exc
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afem-pbe", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every level")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment and write CSV/plot data")
    # defaults are None so config-file values can be told apart from CLI flags
    run.add_argument("--problem", choices=[e.value for e in ExperimentId])
    run.add_argument("--mode", choices=["exact", "inexact", "both"])
    run.add_argument("--theta", type=float)
    run.add_argument("--max-vertices", type=int)
    run.add_argument("--out")
    run.add_argument("--dump-meshes", action="store_true", default=None)
    run.add_argument("--diagnostics", help="comma list from " + ",".join(sorted(DIAGNOSTICS)))
    run.add_argument("--tol", type=float, help="Newton residual tolerance")
    run.add_argument("--seed", type=int, help="recorded only; the algorithm is deterministic")
    run.add_argument("--kappa2", type=float, help="corner problem kappa^2")
    run.add_argument("--rhs", type=float, help="PBE constant source")
    run.add_argument("--corner-variant", choices=["xyz", "xxy"])
    run.add_argument("--interface", choices=["cube", "slab"])
    run.add_argument("--reference-multiplier", type=float)
    run.add_argument("--config", help="flat key = value file; flags win")
    return parser


def resolve(args) -> dict:
    """Merge defaults < config file < CLI flags and validate."""
    opts = dict(DEFAULTS)
    if args.config:
        opts.update(read_config(args.config))
    for key in CONFIG_KEYS.values():
        dest = key[0]
        value = getattr(args, dest, None)
        if value is not None:
            opts[dest] = value
    if "problem" not in opts:
        raise ConfigError("--problem is required (flag or config)")
    try:
        ExperimentId.parse(opts["problem"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if opts["mode"] not in ("exact", "inexact", "both"):
        raise ConfigError(f"bad mode '{opts['mode']}'")
    if not 0.0 < opts["theta"] <= 1.0:
        raise ConfigError("theta must lie in (0, 1]")
    if opts["max_vertices"] < 1:
        raise ConfigError("max_vertices must be positive")
    if not (opts["tol"] > 0 and opts["cg_rel_tol"] > 0):
        raise ConfigError("tolerances must be positive")
    if opts["reference_multiplier"] < 1:
        raise ConfigError("reference_multiplier must be >= 1")
    if opts["corner_variant"] not in ("xyz", "xxy") or opts["interface"] not in ("cube", "slab"):
        raise ConfigError("bad corner_variant or interface")
    diags = frozenset(d.strip() for d in str(opts["diagnostics"]).split(",") if d.strip())
    if diags - DIAGNOSTICS:
        raise ConfigError(f"unknown diagnostics {sorted(diags - DIAGNOSTICS)}")
    opts["diagnostics"] = diags
    return opts


def _problem_kwargs(opts) -> dict:
    if ExperimentId.parse(opts["problem"]) is ExperimentId.CornerSingularity:
        return dict(kappa2=opts["kappa2"], corner_variant=opts["corner_variant"])
    return dict(rhs=opts["rhs"], interface=opts["interface"])


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        opts = resolve(args)
    except ConfigError as exc:
        print(f"afem-pbe: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    modes = ("exact", "inexact") if opts["mode"] == "both" else (opts["mode"],)
    try:
        out = experiments.run(
            opts["problem"],
            modes,
            theta=opts["theta"],
            max_vertices=opts["max_vertices"],
            out_dir=opts["out"],
            diagnostics=opts["diagnostics"],
            solver=SolverConfig(newton_tol=opts["tol"], cg_rel_tol=opts["cg_rel_tol"]),
            reference_multiplier=opts["reference_multiplier"],
            dump_meshes=opts["dump_meshes"],
            **_problem_kwargs(opts),
        )
    except SolverError as exc:
        print(f"afem-pbe: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except experiments.BudgetExceeded as exc:
        print(f"afem-pbe: budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    for mode, slope in out.slopes.items():
        table = out.tables[mode]
        slope_txt = "n/a" if slope is None else f"{slope:.4f}"
        print(
            f"{opts['problem']} {mode}: {len(table)} levels, N={int(table.vertices[-1])}, "
            f"error={table.energy_error[-1]:.4e}, slope={slope_txt}"
        )
    for path in out.files:
        print(f"wrote {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
