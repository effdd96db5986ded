"""`effects` and `aggregate` commands over a fitted run."""
import argparse
import logging

import numpy as np

from app.cli.common import (
    add_data_args,
    add_output_arg,
    comma_floats,
    load_dataset,
    run_directory,
    stored_run_config,
    target_directory,
)
from app.core.config import settings
from app.core.exceptions import EXIT_OK, ConfigurationError
from app.services.io_service import load_run, write_rows
from app.services.posterior import DEFAULT_PERCENTILES, aggregate_pseudo_posterior, conditional_effects


logger = logging.getLogger(__name__)


def effects_command(args: argparse.Namespace) -> int:
    run_dir = run_directory(args)
    draws, manifest = load_run(run_dir)
    dataset = load_dataset(stored_run_config(manifest.config, args))
    table = conditional_effects(
        draws, dataset, args.vary,
        percentiles=args.percentiles,
        grid=args.grid,
        offset=args.offset,
        include_intercept=args.include_intercept,
        level=args.level,
        n_grid=args.grid_points,
    )
    out = target_directory(args, run_dir)
    extra = {"vary": table.vary, "conditioning": table.conditioning}
    path = write_rows(table.rows, out / f"effects_{args.vary}.csv", extra=extra)
    logger.info(f"Wrote {path}")
    return EXIT_OK


def aggregate_command(args: argparse.Namespace) -> int:
    run_dir = run_directory(args)
    draws, manifest = load_run(run_dir)
    dataset = load_dataset(stored_run_config(manifest.config, args))
    first = args.first_year if args.first_year is not None else int(dataset.years[0])
    last = args.window_end if args.window_end is not None else int(dataset.years[-1])
    if last < first:
        raise ConfigurationError(f"Empty year window {first}..{last}")
    table = aggregate_pseudo_posterior(draws, dataset, (first, last), level=args.level)
    out = target_directory(args, run_dir)
    path = write_rows(table.rows, out / "aggregate.csv")
    if table.excluded_sections:
        logger.warning(f"Excluded sections: {', '.join(table.excluded_sections)}")
    logger.info(f"Wrote {path}")
    return EXIT_OK


def register(subparsers: argparse._SubParsersAction) -> None:
    effects = subparsers.add_parser("effects", help="conditional-effects curves of turbidity or marsh")
    effects.add_argument("--run-dir", dest="run_dir", required=True, help="directory written by `fit`")
    effects.add_argument("--vary", choices=["turbidity", "marsh"], required=True)
    effects.add_argument("--percentiles", type=comma_floats, default=list(DEFAULT_PERCENTILES),
                         help="percentiles of the conditioning covariate (default 1,20,40,60,80,99)")
    effects.add_argument("--grid", type=comma_floats, help="explicit grid of the varying covariate")
    effects.add_argument("--grid-points", dest="grid_points", type=int, default=50)
    effects.add_argument("--offset", type=float, default=float(np.log(1000.0)), help="log offset (default ln 1000)")
    effects.add_argument("--include-intercept", dest="include_intercept", action="store_true")
    effects.add_argument("--level", type=float, default=settings.credible_level)
    add_data_args(effects)
    add_output_arg(effects)
    effects.set_defaults(handler=effects_command)

    aggregate = subparsers.add_parser("aggregate", help="pseudo-posterior of inter-annual mean expected counts")
    aggregate.add_argument("--run-dir", dest="run_dir", required=True, help="directory written by `fit`")
    aggregate.add_argument("--first-year", dest="first_year", type=int, help="window start (default first year)")
    aggregate.add_argument("--window-end", dest="window_end", type=int, help="window end (default last fitted year)")
    aggregate.add_argument("--level", type=float, default=settings.credible_level)
    add_data_args(aggregate)
    add_output_arg(aggregate)
    aggregate.set_defaults(handler=aggregate_command)
