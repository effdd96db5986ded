"""`fit` and `summarize` commands."""
import argparse
import logging

from app.cli.common import (
    add_config_arg,
    add_data_args,
    add_output_arg,
    add_sampler_args,
    build_run_config,
    comma_list,
    input_paths,
    load_dataset,
    model_variant,
    output_directory,
    run_directory,
    target_directory,
)
from app.core.config import settings
from app.core.exceptions import EXIT_OK
from app.services.diagnostics import sampler_report
from app.services.io_service import (
    layout_record,
    load_run,
    new_manifest,
    write_chains,
    write_manifest,
    write_rows,
)
from app.services.posterior import compare_coefficients, summarize
from app.services.sampler import run_inference


logger = logging.getLogger(__name__)


def fit_command(args: argparse.Namespace) -> int:
    config = build_run_config(args, model=args.model)
    dataset = load_dataset(config)
    spec = config.model_spec()
    out = output_directory(config)

    draws = run_inference(spec, dataset, config.sampler)
    outputs = write_chains(draws, out)
    table = summarize(draws, level=config.level)
    outputs.append(write_rows(table.rows, out / "summary.csv"))

    manifest = new_manifest("fit", config, input_paths(config))
    manifest.chain_seeds = list(draws.seeds)
    manifest.layout = layout_record(draws)
    manifest.parameter_names = draws.names
    manifest.preprocessing = dict(dataset.preprocessing)
    manifest.diagnostics = sampler_report(draws, config.sampler.max_tree_depth)
    manifest.outputs = sorted(p.name for p in outputs)
    write_manifest(manifest, out)
    logger.info(f"Fit of model {spec.variant.value} complete; outputs in {out}")
    return EXIT_OK


def summarize_command(args: argparse.Namespace) -> int:
    run_dir = run_directory(args)
    draws, manifest = load_run(run_dir)
    out = target_directory(args, run_dir)
    parameters = comma_list(args.parameters) if args.parameters else None
    table = summarize(draws, parameters=parameters, level=args.level)
    write_rows(table.rows, out / "summary.csv")
    if args.compare:
        path = out / "comparisons.csv"
        compare_coefficients(draws, args.compare).to_csv(
            path, index=False, float_format=settings.csv_float_format, lineterminator="\n"
        )
        logger.info(f"Wrote {path}")
    logger.info(f"Summarized {len(table.rows)} parameter(s) from {run_dir}")
    return EXIT_OK


def register(subparsers: argparse._SubParsersAction) -> None:
    fit = subparsers.add_parser("fit", help="fit one model variant and write chains, summary and manifest")
    add_config_arg(fit)
    fit.add_argument("--model", type=model_variant, help="model variant: 1, 2, 3a, 3b or 4")
    fit.add_argument("--level", type=float, help="credible level of the summary HPDIs")
    add_data_args(fit)
    add_sampler_args(fit)
    add_output_arg(fit)
    fit.set_defaults(handler=fit_command)

    summary = subparsers.add_parser("summarize", help="summary table (and coefficient comparisons) of a fitted run")
    summary.add_argument("--run-dir", dest="run_dir", required=True, help="directory written by `fit`")
    summary.add_argument("--parameters", help="comma-separated parameter names (default: all but random effects)")
    summary.add_argument("--level", type=float, default=settings.credible_level)
    summary.add_argument("--compare", action="append", metavar="A>B",
                         help="posterior probability that A exceeds B, e.g. beta_york>beta_james (repeatable)")
    add_output_arg(summary)
    summary.set_defaults(handler=summarize_command)
