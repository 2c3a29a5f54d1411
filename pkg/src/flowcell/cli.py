"""Command-line interface: config parsing, dispatch, seeding, output.

Configuration is flat INI-style text with one section per concern
(covariance, sampler, mesh, qoi, mc, mlmc, run); command-line --set
overrides beat file values, and every key is validated before any
computation starts.  All randomness derives from a single 64-bit master
seed through counter-based streams keyed by (level, sample, purpose), so
outputs are byte-identical for a fixed config regardless of worker count.

Exit codes: 0 success, 1 validation error, 2 compute failure.
"""

import argparse
import configparser
import os
import sys

import numpy as np

from flowcell import harness, mlmc
from flowcell import mesh as fmesh
from flowcell import mfem
from flowcell import qoi as fqoi
from flowcell import randfield as rf

OUTPUT_DIR_ENV = "FLOWCELL_OUTPUT_DIR"

SUBCOMMANDS = ("sample-field", "solve", "qoi", "mc", "mlmc", "convergence",
               "moment-decay", "cost-compare", "track")

# section -> key -> (parser, constraint description, default)
_SCHEMA = {
    "covariance": {
        "kind": (str, "one of: exponential, matern", "exponential"),
        "sigma2": (float, "> 0", 1.0),
        "lambda": (float, "> 0", 1.0),
        "nu": (float, "> 0 (matern only)", None),
    },
    "sampler": {
        "kind": (str, "one of: circulant, kle", "circulant"),
        "kle_modes": (int, ">= 1 (kle only)", None),
    },
    "mesh": {
        "n": (int, ">= 1", 16),
        "n0": (int, ">= 1", 4),
        "levels": (int, ">= 0", 3),
        "n_ref": (int, "nested refinement of the finest level", 64),
    },
    "qoi": {
        "kind": (str, f"one of: {', '.join(fqoi.KINDS)}", fqoi.K_EFF),
        "x0": (str, "comma-separated point in [0,1]^2", "0.0,0.5"),
    },
    "mc": {
        "samples": (int, ">= 2", 200),
    },
    "mlmc": {
        "eps": (float, "> 0", 0.01),
        "pilot": (int, ">= 10", 50),
        "level_cap": (int, ">= 1", 10),
    },
    "run": {
        "seed": (int, ">= 0", 0),
        "workers": (str, "positive integer or 'auto'", "auto"),
        "output_dir": (str, "writable directory", None),
    },
}


class ConfigError(ValueError):
    pass


class RunConfig:
    """Validated settings; typed accessors build the module-level objects."""

    def __init__(self, values):
        self.values = values

    def get(self, section, key):
        return self.values[section][key]

    def covariance_spec(self):
        kind = self.get("covariance", "kind")
        return rf.CovarianceSpec(kind=kind,
                                 sigma2=self.get("covariance", "sigma2"),
                                 lam=self.get("covariance", "lambda"),
                                 nu=self.get("covariance", "nu"))

    def qoi_kind(self):
        kind = self.get("qoi", "kind")
        x0 = None
        if kind == fqoi.TRAVEL_TIME:
            x0 = self.x0()
        return fqoi.QoiKind(kind, x0=x0)

    def x0(self):
        raw = self.get("qoi", "x0")
        try:
            parts = [float(p) for p in raw.split(",")]
            if len(parts) != 2:
                raise ValueError
        except ValueError:
            raise ConfigError(
                f"qoi.x0 must be 'x,y' with two numbers, got {raw!r}")
        return tuple(parts)

    def workers(self):
        raw = self.get("run", "workers")
        if raw == "auto":
            return os.cpu_count() or 1
        try:
            w = int(raw)
        except ValueError:
            w = 0
        if w < 1:
            raise ConfigError(
                f"run.workers must be a positive integer or 'auto', got {raw!r}")
        return w

    def output_dir(self):
        out = self.get("run", "output_dir")
        if out is None:
            out = os.environ.get(OUTPUT_DIR_ENV, ".")
        return out

    def kle_basis_or_none(self):
        if self.get("sampler", "kind") == "kle":
            return rf.kle_build(self.covariance_spec(),
                                K=self.get("sampler", "kle_modes"))
        return None


def _parse_value(section, key, raw):
    parser, constraint, _ = _SCHEMA[section][key]
    try:
        return parser(raw)
    except (TypeError, ValueError):
        raise ConfigError(
            f"{section}.{key} must be {constraint}, got {raw!r}")


def _validate(values):
    """Cross-field checks; every message names the key and its range."""
    def fail(section, key):
        _, constraint, _ = _SCHEMA[section][key]
        raise ConfigError(f"{section}.{key} must be {constraint}, "
                          f"got {values[section][key]!r}")

    cov = values["covariance"]
    if cov["kind"] not in ("exponential", "matern"):
        fail("covariance", "kind")
    if cov["sigma2"] is None or cov["sigma2"] <= 0:
        fail("covariance", "sigma2")
    if cov["lambda"] is None or cov["lambda"] <= 0:
        fail("covariance", "lambda")
    if cov["kind"] == "matern" and (cov["nu"] is None or cov["nu"] <= 0):
        fail("covariance", "nu")
    if cov["kind"] == "exponential" and cov["nu"] is not None:
        raise ConfigError(
            "covariance.nu is only valid with covariance.kind=matern")

    smp = values["sampler"]
    if smp["kind"] not in ("circulant", "kle"):
        fail("sampler", "kind")
    if smp["kind"] == "kle" and (smp["kle_modes"] is None
                                 or smp["kle_modes"] < 1):
        fail("sampler", "kle_modes")

    mesh = values["mesh"]
    for key, low in (("n", 1), ("n0", 1), ("levels", 0)):
        if mesh[key] < low:
            fail("mesh", key)
    finest = mesh["n0"] * 2 ** mesh["levels"]
    if mesh["n_ref"] <= finest or mesh["n_ref"] % finest != 0:
        raise ConfigError(
            f"mesh.n_ref must be a strict nested refinement of the finest "
            f"level n={finest}, got {mesh['n_ref']}")

    if values["qoi"]["kind"] not in fqoi.KINDS:
        fail("qoi", "kind")
    if values["mc"]["samples"] < 2:
        fail("mc", "samples")
    if values["mlmc"]["eps"] <= 0:
        fail("mlmc", "eps")
    if values["mlmc"]["pilot"] < 10:
        fail("mlmc", "pilot")
    if values["mlmc"]["level_cap"] < 1:
        fail("mlmc", "level_cap")
    if values["run"]["seed"] < 0:
        fail("run", "seed")


def parse_config(path=None, overrides=()):
    """Config file plus 'section.key=value' overrides -> validated RunConfig."""
    values = {s: {k: spec[2] for k, spec in keys.items()}
              for s, keys in _SCHEMA.items()}

    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as f:
                parser.read_file(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}")
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}")
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(
                    f"unknown config section [{section}]; expected one of "
                    f"{', '.join(_SCHEMA)}")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(
                        f"unknown key {section}.{key}; expected one of "
                        f"{', '.join(_SCHEMA[section])}")
                values[section][key] = _parse_value(section, key, raw)

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(
                f"override {item!r} must have the form section.key=value")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        values[section][key] = _parse_value(section, key, raw)

    _validate(values)
    config = RunConfig(values)
    config.workers()          # validate eagerly
    if config.get("qoi", "kind") == fqoi.TRAVEL_TIME:
        config.qoi_kind()     # validates x0
    return config


# ---------------------------------------------------------------------------
# Subcommand implementations.  Each returns the path(s) written.

def _sample_realization(config, mesh):
    spec = config.covariance_spec()
    seed = config.get("run", "seed")
    if config.get("sampler", "kind") == "circulant":
        return rf.sample_circulant(spec, mesh, (seed, 0, 0))
    return rf.sample_kle(config.kle_basis_or_none(), mesh, (seed, 0, 0))


def _cmd_sample_field(config, out_dir):
    mesh = fmesh.build_uniform_mesh(config.get("mesh", "n"))
    field = _sample_realization(config, mesh)
    path = os.path.join(out_dir, f"field_{config.get('run', 'seed')}.csv")
    rf.dump_field_csv(field, mesh, path)
    return [path]


def _cmd_solve(config, out_dir):
    mesh = fmesh.build_uniform_mesh(config.get("mesh", "n"))
    field = _sample_realization(config, mesh)
    sol = mfem.solve_hybridized(mesh, field)
    path = os.path.join(out_dir, f"solution_{config.get('run', 'seed')}.csv")
    mfem.dump_solution_csv(mesh, sol, path)
    with open(path, "a") as f:
        f.write("[qoi]\nname,value\n")
        f.write(f"k_eff,{fqoi.effective_permeability(mesh, sol)!r}\n")
        f.write(f"inflow_flux,{-mfem.boundary_flux(mesh, sol, fmesh.DIRICHLET_IN)!r}\n")
        f.write(f"outflow_flux,{mfem.boundary_flux(mesh, sol, fmesh.DIRICHLET_OUT)!r}\n")
    return [path]


def _cmd_qoi(config, out_dir):
    mesh = fmesh.build_uniform_mesh(config.get("mesh", "n"))
    field = _sample_realization(config, mesh)
    sol = mfem.solve_hybridized(mesh, field)
    path = os.path.join(out_dir, f"qoi_{config.get('run', 'seed')}.csv")
    with open(path, "w") as f:
        f.write("name,value\n")
        for kind in (fqoi.VELOCITY_L2, fqoi.VELOCITY_HDIV, fqoi.PRESSURE_L2,
                     fqoi.RECOVERED_PRESSURE_L2, fqoi.K_EFF):
            value = fqoi.evaluate_qoi(fqoi.QoiKind(kind), mesh, sol)
            f.write(f"{kind},{value!r}\n")
        tau = fqoi.evaluate_qoi(
            fqoi.QoiKind(fqoi.TRAVEL_TIME, x0=config.x0()), mesh, sol)
        f.write(f"travel_time,{tau!r}\n")
    return [path]


def _estimator(config, n0=None):
    return mlmc.Estimator(
        config.qoi_kind(), config.covariance_spec(),
        n0=n0 if n0 is not None else config.get("mesh", "n0"),
        master_seed=config.get("run", "seed"),
        sampler=config.get("sampler", "kind"),
        kle_basis=config.kle_basis_or_none())


def _cmd_mc(config, out_dir):
    est = _estimator(config, n0=config.get("mesh", "n"))
    stats = mlmc.mc_run(est, level=0, N=config.get("mc", "samples"),
                        workers=config.workers())
    path = os.path.join(out_dir, f"mc_{config.get('run', 'seed')}.csv")
    se = float(np.sqrt(stats.var_q / stats.n_samples))
    with open(path, "w") as f:
        f.write("qoi,n,N,mean,variance,std_error,cost_units\n")
        f.write(f"{config.get('qoi', 'kind')},{config.get('mesh', 'n')},"
                f"{stats.n_samples},{stats.mean_q!r},{stats.var_q!r},"
                f"{se!r},{stats.cost_units!r}\n")
    return [path]


def _cmd_mlmc(config, out_dir):
    est = _estimator(config)
    result = mlmc.mlmc_run(est, eps=config.get("mlmc", "eps"),
                           pilot=config.get("mlmc", "pilot"),
                           level_cap=config.get("mlmc", "level_cap"),
                           workers=config.workers())
    path = os.path.join(out_dir, f"mlmc_{config.get('run', 'seed')}.csv")
    mlmc.dump_mlmc_csv(result, path)
    return [path]


def _convergence_config(config):
    return harness.ConvergenceConfig(
        spec=config.covariance_spec(),
        n0=config.get("mesh", "n0"),
        L=config.get("mesh", "levels"),
        n_ref=config.get("mesh", "n_ref"),
        N=config.get("mc", "samples"),
        seed=config.get("run", "seed"),
        sampler=config.get("sampler", "kind"),
        kle_modes=config.get("sampler", "kle_modes"),
        qois=(config.qoi_kind(),),
        workers=config.workers())


def _cmd_convergence(config, out_dir):
    report = harness.run_fe_convergence(_convergence_config(config))
    return [harness.write_report_csv(report, out_dir)]


def _cmd_moment_decay(config, out_dir):
    report = harness.run_moment_decay(_convergence_config(config))
    return [harness.write_report_csv(report, out_dir)]


def _cmd_cost_compare(config, out_dir):
    n0 = config.get("mesh", "n0")
    finest = [n0 * 2**level
              for level in range(config.get("mesh", "levels") + 1)]
    rows = harness.run_cost_comparison(
        config.qoi_kind(), config.covariance_spec(),
        eps=config.get("mlmc", "eps"), finest_ns=finest, n0=n0,
        seed=config.get("run", "seed"), pilot=config.get("mlmc", "pilot"),
        workers=config.workers(), sampler=config.get("sampler", "kind"),
        kle_basis=config.kle_basis_or_none())
    return [harness.write_cost_csv(rows, out_dir, config.get("run", "seed"))]


def _cmd_track(config, out_dir):
    mesh = fmesh.build_uniform_mesh(config.get("mesh", "n"))
    field = _sample_realization(config, mesh)
    sol = mfem.solve_hybridized(mesh, field)
    result = fqoi.travel_time(mesh, sol, config.x0())
    if result.termination != fqoi.EXITED:
        raise fqoi.TrackingError(
            f"track terminated as {result.termination} "
            f"(seed_id {field.seed_id})")
    path = os.path.join(out_dir, f"track_{config.get('run', 'seed')}.csv")
    fqoi.dump_track_csv(result, path)
    print(f"travel_time={result.travel_time!r}")
    return [path]


_DISPATCH = {
    "sample-field": _cmd_sample_field,
    "solve": _cmd_solve,
    "qoi": _cmd_qoi,
    "mc": _cmd_mc,
    "mlmc": _cmd_mlmc,
    "convergence": _cmd_convergence,
    "moment-decay": _cmd_moment_decay,
    "cost-compare": _cmd_cost_compare,
    "track": _cmd_track,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowcell",
        description="Mass-conservative Darcy flow cell solver with "
                    "lognormal random permeability and MC/MLMC estimation.")
    sub = parser.add_subparsers(dest="subcommand")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="INI-style config file")
        p.add_argument("--set", action="append", default=[], metavar="S.K=V",
                       help="override a config value (section.key=value)")
        p.add_argument("--output-dir", default=None,
                       help=f"output directory (default ${OUTPUT_DIR_ENV} or .)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args, unknown = parser.parse_known_args(argv)
    except SystemExit:
        # argparse already printed usage (e.g. unknown subcommand).
        return 1
    if unknown:
        print(f"error: unrecognized arguments: {' '.join(unknown)}",
              file=sys.stderr)
        return 1
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        return 1

    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"run.workers={args.workers}")
    if args.output_dir is not None:
        overrides.append(f"run.output_dir={args.output_dir}")

    try:
        config = parse_config(args.config, overrides)
        out_dir = config.output_dir()
        os.makedirs(out_dir, exist_ok=True)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        paths = _DISPATCH[args.subcommand](config, out_dir)
    except (mfem.SolverError, fqoi.TrackingError) as exc:
        print(f"compute error: {exc}", file=sys.stderr)
        return 2
    for path in paths:
        print(path)
    return 0


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
