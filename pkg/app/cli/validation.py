"""`cv`, `simulate` and `sbc` commands."""
import argparse
import json
import logging
from pathlib import Path
from typing import List, Tuple

import pandas as pd
from pydantic import ValidationError

from app.cli.common import (
    add_config_arg,
    add_data_args,
    add_output_arg,
    add_sampler_args,
    build_run_config,
    comma_floats,
    comma_ints,
    comma_list,
    input_paths,
    load_dataset,
    model_list,
    model_variant,
    output_directory,
)
from app.core.config import settings
from app.core.exceptions import EXIT_OK, EXIT_SAMPLER, ConfigurationError
from app.models.schemas import ModelSpec, SamplerConfig, SimConfig
from app.services.forecast_cv import run_lfo
from app.services.io_service import new_manifest, write_dataset, write_json, write_manifest, write_rows
from app.services.synth import sbc_priors, sbc_run, simulate_dataset


logger = logging.getLogger(__name__)


def cv_command(args: argparse.Namespace) -> int:
    config = build_run_config(args, models=args.models)
    if config.holdout_year is None:
        raise ConfigurationError("cv needs --holdout-year")
    dataset = load_dataset(config)
    specs = [config.model_spec(variant) for variant in config.models]
    result = run_lfo(specs, dataset, config.holdout_year, config.sampler, config.level, config.interval_method)

    out = output_directory(config)
    rows = []
    for name, report in result.reports.items():
        for row in report.rows:
            rows.append({"model": name, **row.model_dump(), "width": row.width})

    columns = ["model", "section_id", "observed", "low", "high", "inside", "median", "width"]
    report_path = out / "cv_report.csv"
    pd.DataFrame(rows, columns=columns).to_csv(
        report_path, index=False, float_format=settings.csv_float_format, lineterminator="\n"
    )
    summary = {
        "holdout_year": result.holdout_year,
        "level": result.level,
        "models": {
            name: {
                "coverage": report.coverage,
                "n_inside": sum(r.inside for r in report.rows),
                "n_evaluated": report.n_evaluated,
                "mean_width": report.mean_width,
                "skipped_sections": report.skipped_sections,
            }
            for name, report in result.reports.items()
        },
        "failures": result.failures,
        "ranking": result.ranking,
    }
    summary_path = write_json(summary, out / "cv_summary.json")

    manifest = new_manifest("cv", config, input_paths(config))
    manifest.preprocessing = dict(dataset.preprocessing)
    manifest.outputs = sorted([report_path.name, summary_path.name])
    write_manifest(manifest, out)
    if result.failures and not result.reports:
        logger.error("Every model failed during cross-validation")
        return EXIT_SAMPLER
    return EXIT_OK


def _missing_cells(text: str) -> List[Tuple[int, int]]:
    cells = []
    for item in comma_list(text):
        try:
            k, t = item.split(":")
            cells.append((int(k), int(t)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"missing cells look like 'k:t,k:t', got '{text}'")
    return cells


def _sim_config(args: argparse.Namespace, **overrides) -> SimConfig:
    values = {
        "variant": args.model,
        "group_sizes": args.group_sizes,
        "group_names": args.group_names,
        "n_years": args.years,
        "first_year": args.first_year,
        "seed": args.seed,
        "missing_cells": args.missing or [],
    }
    if args.tow_range:
        values["tow_distance_range"] = tuple(args.tow_range)
    if getattr(args, "truth", None):
        try:
            values["true_parameters"] = json.loads(Path(args.truth).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read truth file {args.truth}: {e}")
    values.update(overrides)
    try:
        return SimConfig(**{k: v for k, v in values.items() if v is not None})
    except ValidationError as e:
        raise ConfigurationError(f"Invalid simulation configuration: {e}")


def simulate_command(args: argparse.Namespace) -> int:
    config = _sim_config(args)
    dataset, truth = simulate_dataset(config)
    out = Path(args.output_dir)
    paths = write_dataset(dataset, out, truth)
    manifest = new_manifest("simulate", config)
    manifest.outputs = sorted(p.name for p in paths)
    write_manifest(manifest, out)
    return EXIT_OK


def sbc_command(args: argparse.Namespace) -> int:
    config = _sim_config(args, priors=sbc_priors())
    sampler = SamplerConfig.desk().model_dump()
    for name in ("n_chains", "warmup_iters", "sampling_iters", "target_accept", "max_tree_depth",
                 "executor", "max_workers"):
        if getattr(args, name, None) is not None:
            sampler[name] = getattr(args, name)
    try:
        sampler_config = SamplerConfig(**sampler)
        spec = ModelSpec(variant=args.model, priors=config.priors, rate_multiplier=args.rate_multiplier)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid SBC configuration: {e}")

    report = sbc_run(spec, config, args.reps, sampler_config)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows_path = write_rows(report.rows, out / "sbc_summary.csv")
    ranks_path = out / "sbc_ranks.csv"
    pd.DataFrame(report.ranks).rename_axis("replication").to_csv(ranks_path, lineterminator="\n")
    manifest = new_manifest("sbc", config)
    manifest.config["sampler"] = sampler_config.model_dump(mode="json")
    manifest.config["rate_multiplier"] = args.rate_multiplier
    manifest.diagnostics = report.model_dump(mode="json", exclude={"rows", "ranks"})
    manifest.outputs = sorted([rows_path.name, ranks_path.name])
    write_manifest(manifest, out)
    return EXIT_OK


def _add_sim_args(parser: argparse.ArgumentParser, group_sizes: List[int], years: int) -> None:
    parser.add_argument("--model", type=model_variant, required=True, help="generating model variant")
    parser.add_argument("--group-sizes", dest="group_sizes", type=comma_ints, default=group_sizes,
                        help="sections per tributary chain")
    parser.add_argument("--group-names", dest="group_names", type=comma_list,
                        default=["James", "Rappahannock", "York"], help="tributary names, baseline first")
    parser.add_argument("--years", type=int, default=years)
    parser.add_argument("--first-year", dest="first_year", type=int, default=1996)
    parser.add_argument("--tow-range", dest="tow_range", type=comma_floats,
                        help="low,high summed tow distance in metres")
    parser.add_argument("--missing", type=_missing_cells, help="unsampled cells as section:year indices")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--output-dir", dest="output_dir", required=True)


def register(subparsers: argparse._SubParsersAction) -> None:
    cv = subparsers.add_parser("cv", help="leave-future-out coverage comparison of model variants")
    add_config_arg(cv)
    cv.add_argument("--models", type=model_list, help="comma-separated variants (default all five)")
    cv.add_argument("--holdout-year", dest="holdout_year", type=int)
    cv.add_argument("--level", type=float, help="nominal prediction level (default 0.80)")
    cv.add_argument("--interval", dest="interval_method", choices=["hpd", "equal_tail"])
    add_data_args(cv)
    add_sampler_args(cv)
    add_output_arg(cv)
    cv.set_defaults(handler=cv_command)

    simulate = subparsers.add_parser("simulate", help="write a synthetic dataset in the ingest schema")
    _add_sim_args(simulate, [14, 13, 10], 21)
    simulate.add_argument("--truth", help="JSON file of fixed true parameters (default: draw from the prior)")
    simulate.set_defaults(handler=simulate_command)

    sbc = subparsers.add_parser("sbc", help="simulation-based calibration of one variant")
    _add_sim_args(sbc, [4, 4, 4], 6)
    sbc.add_argument("--reps", type=int, default=100)
    sbc.add_argument("--rate-multiplier", dest="rate_multiplier", type=float, default=1.0,
                     help="multiply mu in the fitted likelihood (values other than 1 give a negative control)")
    sbc.add_argument("--chains", dest="n_chains", type=int)
    sbc.add_argument("--warmup", dest="warmup_iters", type=int)
    sbc.add_argument("--samples", dest="sampling_iters", type=int)
    sbc.add_argument("--target-accept", dest="target_accept", type=float)
    sbc.add_argument("--max-tree-depth", dest="max_tree_depth", type=int)
    sbc.add_argument("--executor", choices=["process", "thread", "serial"])
    sbc.add_argument("--workers", dest="max_workers", type=int)
    sbc.set_defaults(handler=sbc_command)
