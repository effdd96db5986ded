"""Arguments and helpers shared by the command modules."""
import argparse
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from app.core.exceptions import ConfigurationError
from app.models.domain import Dataset
from app.models.schemas import ModelVariant, RunConfig, SamplerConfig
from app.services.io_service import load_inputs


logger = logging.getLogger(__name__)


def comma_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def comma_ints(text: str) -> List[int]:
    try:
        return [int(item) for item in comma_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def comma_floats(text: str) -> List[float]:
    try:
        return [float(item) for item in comma_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def model_list(text: str) -> List[ModelVariant]:
    try:
        return [ModelVariant.parse(item) for item in comma_list(text)]
    except ConfigurationError as e:
        raise argparse.ArgumentTypeError(str(e))


def model_variant(text: str) -> ModelVariant:
    try:
        return ModelVariant.parse(text)
    except ConfigurationError as e:
        raise argparse.ArgumentTypeError(str(e))


def add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration; explicit flags override it")


def add_data_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("data")
    group.add_argument("--records", dest="records_path", help="section-year records CSV")
    group.add_argument("--adjacency", dest="adjacency_path", help="edge list CSV (id_a,id_b)")
    group.add_argument("--sections", dest="sections_path", help="section metadata CSV (section_id,tributary)")
    group.add_argument("--preprocess", choices=["none", "center", "standardize"],
                       help="covariate preprocessing (default none)")
    group.add_argument("--last-year", dest="last_year", type=int, help="use years up to and including this one")


def add_sampler_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("sampler")
    group.add_argument("--preset", choices=["desk", "full"], help="4 x 1,500 + 1,500 or 4 x 15,000 + 15,000")
    group.add_argument("--chains", dest="n_chains", type=int)
    group.add_argument("--warmup", dest="warmup_iters", type=int)
    group.add_argument("--samples", dest="sampling_iters", type=int)
    group.add_argument("--seed", type=int)
    group.add_argument("--target-accept", dest="target_accept", type=float)
    group.add_argument("--max-tree-depth", dest="max_tree_depth", type=int)
    group.add_argument("--executor", choices=["process", "thread", "serial"])
    group.add_argument("--workers", dest="max_workers", type=int)
    group.add_argument("--parameterization", choices=["centered", "noncentered"])


def add_output_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--output-dir", dest="output_dir", help="directory receiving outputs")


SAMPLER_FLAGS = ("n_chains", "warmup_iters", "sampling_iters", "seed", "target_accept",
                 "max_tree_depth", "executor", "max_workers")
RUN_FLAGS = ("records_path", "adjacency_path", "sections_path", "preprocess", "last_year",
             "parameterization", "output_dir", "holdout_year", "level", "interval_method")


def _flag(args: argparse.Namespace, name: str) -> Any:
    return getattr(args, name, None)


def build_run_config(args: argparse.Namespace, **overrides: Any) -> RunConfig:
    """Config file (if any), then explicit flags, then `overrides`"""
    data: Dict[str, Any] = {}
    if _flag(args, "config"):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigurationError(f"Config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {e}")

    sampler: Dict[str, Any] = dict(data.get("sampler") or {})
    preset = _flag(args, "preset")
    if preset:
        sampler = (SamplerConfig.full() if preset == "full" else SamplerConfig.desk()).model_dump() | {
            k: v for k, v in sampler.items() if k not in ("n_chains", "warmup_iters", "sampling_iters")
        }
    for name in SAMPLER_FLAGS:
        if _flag(args, name) is not None:
            sampler[name] = _flag(args, name)
    if sampler:
        data["sampler"] = sampler

    for name in RUN_FLAGS:
        if _flag(args, name) is not None:
            data[name] = _flag(args, name)
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run configuration: {e}")


def load_dataset(config: RunConfig) -> Dataset:
    config.check_paths()
    return load_inputs(config.records_path, config.adjacency_path, config.sections_path,
                       config.preprocess, config.last_year)


def input_paths(config: RunConfig) -> List[str]:
    return [p for p in (config.records_path, config.adjacency_path, config.sections_path) if p]


def output_directory(config: RunConfig) -> Path:
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_directory(args: argparse.Namespace) -> Path:
    path = Path(args.run_dir)
    if not path.is_dir():
        raise ConfigurationError(f"Run directory not found: {path}")
    return path


def stored_run_config(manifest_config: Dict[str, Any], args: argparse.Namespace) -> RunConfig:
    """The fit's RunConfig with any data flags given on this command line applied"""
    data = dict(manifest_config)
    for name in ("records_path", "adjacency_path", "sections_path", "preprocess", "last_year"):
        if _flag(args, name) is not None:
            data[name] = _flag(args, name)
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigurationError(f"Stored run configuration is invalid: {e}")


def target_directory(args: argparse.Namespace, default: Path) -> Path:
    path = Path(_flag(args, "output_dir") or default)
    path.mkdir(parents=True, exist_ok=True)
    return path
