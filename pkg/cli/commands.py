"""
Command tree: couple, mixcheck and bounds <sub>. Results go to stdout (or
--output) as JSON; matrices and plot data go to CSV files on request.
"""
import argparse
import logging
import sys
from typing import List, Optional

import numpy as np

from cli.config import RunConfig, apply_overrides, load_config
from core import bounds, couplings, mixability
from core.engine import RearrangementMatrix, is_sigma_countermonotonic
from core.errors import ConfigError, InfeasibleError, InputValidationError
from core.marginals import discretize_all, support_summary
from core.utils import matrix_to_json, write_json, write_matrix_csv, write_plot_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2
EXIT_NOT_MIXABLE = 3
EXIT_UNDECIDED = 4

VERDICT_EXIT = {"mixable": EXIT_OK, "not_mixable": EXIT_NOT_MIXABLE, "undecided": EXIT_UNDECIDED}

BOUND_COMMANDS = ("worst-var", "best-var", "tail-prob", "spearman", "pearson",
                  "min-product", "supermodular-max", "supermodular-min")

SIGMA_CM_SUMMARY_MAX_D = 12
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(verbosity: int):
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def _emit_matrix(args, matrix: Optional[RearrangementMatrix]) -> bool:
    if matrix is None:
        return True
    ok = True
    if args.emit_matrix:
        ok = write_matrix_csv(args.emit_matrix, matrix.values) and ok
    if args.emit_plot:
        ok = write_plot_csv(args.emit_plot, matrix.values) and ok
    return ok


def _require_margins(config: RunConfig, count: Optional[int] = None):
    if not config.margins:
        raise ConfigError("config lists no margins")
    if count is not None and len(config.margins) != count:
        raise ConfigError(f"this command needs exactly {count} margins, got {len(config.margins)}")


def _require(config: RunConfig, name: str):
    if getattr(config, name) is None:
        raise ConfigError(f"this command needs '{name}' (config field or --{name.replace('_', '-')})")


def cmd_couple(config: RunConfig, args) -> int:
    _require_margins(config)
    kind = config.kind or "comonotone"
    logger.info("couple %s: %d margins, n=%d (%s)", kind, len(config.margins), config.n, config.grid_mode)
    existence = None
    if kind == "pairwise_countermonotone":
        existence = couplings.pcm_check(config.margins)
        if not existence.exists:
            raise InfeasibleError(
                f"no pairwise countermonotone vector (da1 sum {existence.da1_sum:.6g}, "
                f"da2 sum {existence.da2_sum:.6g})")
    coupling = couplings.build(kind, config.margins, config.n, config.grid_mode,
                               config.ra_options, config.tolerance)
    matrix = coupling.matrix
    sums = matrix.row_sums()
    summary = {
        "command": "couple",
        "kind": kind,
        "n": matrix.n,
        "d": matrix.d,
        "grid_mode": config.grid_mode,
        "row_sum_mean": float(np.mean(sums)),
        "row_sum_variance": float(np.var(sums)),
        "row_sum_range": float(np.max(sums) - np.min(sums)),
        "notes": coupling.notes,
        "config": config,
    }
    if existence is not None:
        summary["pcm"] = existence
    if matrix.d <= SIGMA_CM_SUMMARY_MAX_D:
        summary["sigma_countermonotone"] = is_sigma_countermonotonic(matrix)
    if args.inline_matrix:
        summary["matrix"] = matrix_to_json(matrix.values)
    for note in coupling.notes:
        logger.warning(note)
    if not _emit_matrix(args, matrix):
        return EXIT_CONFIG
    write_json(args.output, summary)
    return EXIT_OK


def cmd_mixcheck(config: RunConfig, args) -> int:
    _require_margins(config)
    grids = discretize_all(config.margins, config.n, config.grid_mode)
    report = mixability.analyze(config.margins, grids, config.ra_options, config.tolerance)
    logger.info("mixcheck verdict: %s", report.verdict)
    if not _emit_matrix(args, report.certificate):
        return EXIT_CONFIG
    payload = {"command": "mixcheck", "n": config.n, "grid_mode": config.grid_mode,
               "report": report, "config": config,
               "supports": [support_summary(m) for m in config.margins]}
    if len(config.margins) == 3 and all(m.family == "normal" for m in config.margins):
        payload["normal_joint_mix"] = couplings.normal_joint_mix_cov([m.param("sigma") for m in config.margins])
    write_json(args.output, payload)
    return VERDICT_EXIT[report.verdict]


def _run_bound(sub: str, config: RunConfig):
    opts = config.ra_options
    if sub == "spearman":
        d = config.d or len(config.margins)
        if d < 2:
            raise ConfigError("spearman needs d >= 2 ('d' field or a margin list)")
        found = bounds.spearman_min_product(d, config.n, opts, config.grid_mode)
        rho_min, rho_max = bounds.spearman_extremes(d, found.value)
        return {"d": d, "rho_min": rho_min, "rho_max": rho_max, "min_product": found}, found

    _require_margins(config, 2 if sub == "pearson" else None)
    if sub == "pearson":
        rho_min, rho_max = bounds.pearson_extremes(*config.margins, config.n, config.grid_mode)
        return {"rho_min": rho_min, "rho_max": rho_max}, None
    if sub in ("worst-var", "best-var"):
        _require(config, "alpha")
        procedure = bounds.worst_var if sub == "worst-var" else bounds.best_var
        result = procedure(config.margins, config.alpha, config.n, opts)
        result.diagnostics["comonotone_var"] = bounds.comonotone_var(config.margins, config.alpha)
        return result, result
    if sub == "tail-prob":
        _require(config, "k")
        result = bounds.tail_prob_max(config.margins, config.k, config.n, opts)
        return result, result

    grids = discretize_all(config.margins, config.n, config.grid_mode)
    if sub == "min-product":
        result = bounds.min_product_expectation(grids, opts)
    elif sub == "supermodular-max":
        result = bounds.supermodular_max(grids, config.cost_spec())
    else:
        result = bounds.supermodular_min(grids, config.cost_spec(), opts)
    return result, result


def cmd_bounds(config: RunConfig, args) -> int:
    sub = args.bound
    logger.info("bounds %s: n=%d", sub, config.n)
    payload, result = _run_bound(sub, config)
    certificate = result.certificate if result is not None else None
    if not _emit_matrix(args, certificate):
        return EXIT_CONFIG
    write_json(args.output, {"command": "bounds", "bound": sub, "result": payload, "config": config})
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="JSON config file ('-' or absent: stdin)")
    p.add_argument("--n", type=int, default=None, help="grid size")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--grid-mode", dest="grid_mode", default=None,
                   choices=("lower", "upper", "midpoint", "shifted"))
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--emit-matrix", dest="emit_matrix", default=None, metavar="PATH",
                   help="write the result matrix as CSV")
    p.add_argument("--emit-plot", dest="emit_plot", default=None, metavar="PATH",
                   help="write rank plot data (u, f1, ..., fd) as CSV")
    p.add_argument("--output", default=None, metavar="PATH", help="JSON result file (default stdout)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="frechetkit",
        description="Extremal dependence couplings and dependence-uncertainty bounds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("couple", help="build an extremal coupling")
    _add_common(p)
    p.add_argument("--kind", default=None, choices=couplings.COUPLING_KINDS)
    p.add_argument("--inline-matrix", dest="inline_matrix", action="store_true",
                   help="include the matrix in the JSON summary")

    p = sub.add_parser("mixcheck", help="joint mixability analysis")
    _add_common(p)

    p = sub.add_parser("bounds", help="dependence-uncertainty bounds")
    p.add_argument("bound", choices=BOUND_COMMANDS)
    _add_common(p)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--k", type=float, default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    overrides = {name: getattr(args, name, None)
                 for name in ("n", "seed", "restarts", "grid_mode", "tolerance", "alpha", "k", "kind")}
    try:
        config = apply_overrides(load_config(args.config), overrides)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG

    handlers = {"couple": cmd_couple, "mixcheck": cmd_mixcheck, "bounds": cmd_bounds}
    try:
        return handlers[args.command](config, args)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except (InfeasibleError, InputValidationError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_INFEASIBLE
