"""``fluctfem`` command line.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from ..assembly import AssemblyError
from ..decorrelate import DecorrelationError
from ..fourth_order import ConstraintError
from ..integrator import IntegratorError, StabilityError
from ..mesh import MeshError
from ..noise import NoiseError
from ..oracle import OracleError
from . import commands
from .config import RUN_KEYS, SWEEP_KEYS, ConfigError, load_run_config, load_sweep_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("fluctfem")


def _add_keys(parser, keys):
    group = parser.add_argument_group("configuration keys (override the file)")
    for key in keys:
        group.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None)


def _overrides(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluctfem", description="Stochastic finite elements for fluctuating diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate and write spectra")
    p.add_argument("config", nargs="?", help="key = value configuration file")
    _add_keys(p, RUN_KEYS)

    p = sub.add_parser("verify", help="oracle checks on a small mesh")
    p.add_argument("config", nargs="?")
    _add_keys(p, RUN_KEYS)

    p = sub.add_parser("sweep", help="parameter sweep (comma-separated axes)")
    p.add_argument("config", nargs="?")
    _add_keys(p, RUN_KEYS + ("dx_over_ell0",) + SWEEP_KEYS)

    p = sub.add_parser("analyze", help="recompute spectra from a stored trajectory")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None, help="write spectra here instead of the run directory")
    return parser


def _dispatch(args) -> int:
    if args.command == "run":
        cfg = load_run_config(args.config, _overrides(args, RUN_KEYS))
        res = commands.cmd_run(cfg)
        d = res.diagnostics
        print(f"wrote {res.directory}")
        print(f"e_FE raw {d['e_FE_raw']:.4g}  mapped {d['e_FE_mapped']:.4g}  mass std {d['mass_std']:.3g}")
        if not d["reliable"]:
            print(f"warning: only {d['n_batches']} batches, error bars are unreliable")
        return EXIT_OK
    if args.command == "verify":
        cfg = load_run_config(args.config, _overrides(args, RUN_KEYS))
        report = commands.cmd_verify(cfg)
        text = report.text()
        print(text, end="")
        if cfg.output:
            out = cfg.run_dir()
            out.mkdir(parents=True, exist_ok=True)
            (out / "verify.txt").write_text(text)
        if not report.passed:
            print("failed checks: " + ", ".join(report.failed), file=sys.stderr)
            return EXIT_VERIFY
        return EXIT_OK
    if args.command == "sweep":
        keys = RUN_KEYS + ("dx_over_ell0",) + SWEEP_KEYS
        sweep = load_sweep_config(args.config, _overrides(args, keys))
        path = commands.cmd_sweep(sweep)
        print(f"wrote {path}")
        return EXIT_OK
    res = commands.cmd_analyze(args.run_dir, args.out)
    print(f"e_FE raw {res['e_FE_raw']:.4g}  mapped {res['e_FE_mapped']:.4g}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, MeshError, StabilityError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        IntegratorError, OracleError, ConstraintError, DecorrelationError, NoiseError,
        AssemblyError, np.linalg.LinAlgError, FloatingPointError,
    ) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
