"""Command-line driver.

    conformal-deform run CONFIG [--output-dir DIR] [--snapshot-every N] [--quiet]
    conformal-deform compare CONFIG [CONFIG ...] [--output-dir DIR]
    conformal-deform compare --from-artifacts RUN_DIR [RUN_DIR ...] [--output-dir DIR]
    conformal-deform configs [--show NAME]

CONFIG is a TOML path or ``bundled:NAME``. Exit codes: 0 success, 2 bad
configuration, 3 mesh problem, 4 solver failure, 5 line-search failure or
degenerated mesh.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import ConfigError, bundled_config_names, load_config, read_config_text
from .mesh import MeshError
from .optimizer import LINE_SEARCH_FAILED, MESH_DEGENERATED
from .pipeline import (
    check_comparable,
    comparison_row,
    execute,
    execute_sweep,
    row_from_artifacts,
    write_artifacts,
    write_comparison_csv,
)
from .stokes import StokesError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MESH = 3
EXIT_SOLVER = 4
EXIT_LINE_SEARCH = 5

THREADS_ENV = "CONFORMAL_DEFORM_THREADS"

log = logging.getLogger("conformal_deform")


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _out_dir(arg: str | None, default: str) -> Path:
    return Path(arg if arg is not None else default)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args.output_dir, cfg.output.directory)
    if cfg.sweep is not None:
        rows = execute_sweep(cfg, out)
        for r in rows:
            log.info("%-10s status=%s iterations=%d eta_max=%.3f frac>2=%.4f", r["label"], r["status"],
                     r["iterations"], r["eta_max"], r["eta_frac_gt2"])
        log.info("sweep table written to %s", out / "sweep.csv")
        return EXIT_OK
    result = execute(cfg, args.snapshot_every)
    write_artifacts(result, out)
    s = result.summary
    log.info("%s: status=%s iterations=%d J=%.8g eta_max=%.3f frac>2=%.4f", cfg.name, s["status"],
             s["iterations"], s["J_final"], s["eta_max"], s["eta_frac_gt2"])
    if "constraints" in s:
        c = s["constraints"]
        log.info("volume residual %.2e (relative), barycentre residual %.2e", c["volume_rel_residual"],
                 c["barycentre_residual"])
    log.info("artifacts written to %s", out)
    if s["status"] in (LINE_SEARCH_FAILED, MESH_DEGENERATED):
        print(f"run stopped early: {s['status']}: {s['message']}", file=sys.stderr)
        return EXIT_LINE_SEARCH
    return EXIT_OK


def cmd_compare(args) -> int:
    out = _out_dir(args.output_dir, "runs/comparison")
    if args.from_artifacts:
        rows = [row_from_artifacts(Path(d)) for d in args.inputs]
    else:
        configs = [load_config(c) for c in args.inputs]
        try:
            check_comparable(configs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        names = [c.name for c in configs]
        if len(set(names)) != len(names):
            raise ConfigError("compared configs need distinct names")
        rows = []
        for cfg in configs:
            result = execute(cfg)
            write_artifacts(result, out / cfg.name)
            rows.append(comparison_row(cfg.name, result.summary))
    out.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(out / "comparison.csv", rows)
    for r in rows:
        log.info("%-24s %-32s %-20s it=%4d eta_max=%.3g frac>2=%.4f", r["name"], r["metric"], r["status"],
                 r["iterations"], r["eta_max"], r["eta_frac_gt2"])
    log.info("comparison written to %s", out / "comparison.csv")
    return EXIT_OK


def cmd_configs(args) -> int:
    if args.show:
        print(read_config_text(f"bundled:{args.show}")[0], end="")
    else:
        print("\n".join(bundled_config_names()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="conformal-deform", description="Nearly conformal shape-gradient experiments.")
    ap.add_argument("--quiet", action="store_true", help="only report warnings and errors")
    sub = ap.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", help="artifact directory (overrides output.directory)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help=argparse.SUPPRESS)

    p = sub.add_parser("run", parents=[common], help="run one configuration")
    p.add_argument("config")
    p.add_argument("--snapshot-every", type=int, default=None, metavar="N",
                   help="write a VTK snapshot every N iterations")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", parents=[common], help="tabulate several runs of one problem")
    p.add_argument("inputs", nargs="+", metavar="CONFIG")
    p.add_argument("--from-artifacts", action="store_true",
                   help="inputs are run directories; rebuild the table from their summary.json")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("configs", help="list bundled configurations")
    p.add_argument("--show", metavar="NAME", help="print one bundled configuration")
    p.set_defaults(func=cmd_configs)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if getattr(args, "snapshot_every", None) is not None and args.snapshot_every < 0:
        print("error: --snapshot-every must be nonnegative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MeshError as exc:
        print(f"mesh error: {exc}", file=sys.stderr)
        return EXIT_MESH
    except (StokesError, np.linalg.LinAlgError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
