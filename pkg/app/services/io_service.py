"""
File formats: section-year record ingestion, synthetic dataset export, chain
persistence and run manifests.

records.csv    section_id, year, count, tow_distance_m, secchi_m, rsa, rma,
               log_predator, management, tributary (one row per sampled section-year)
adjacency.csv  id_a, id_b (one undirected edge per row)
sections.csv   section_id, tributary (defines the section order)
"""
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pydantic
import scipy
from pydantic import BaseModel

from app.core.config import settings
from app.core.exceptions import DataValidationError, StructuralError
from app.models.domain import Dataset, Parameters, PosteriorDraws, covariate_names_for
from app.models.schemas import ModelVariant, Parameterization, Preprocessing, RunManifest
from app.services.areal_graph import build_graph
from app.services.model_core import ParameterLayout
from app.services.sampler import STAT_NAMES


logger = logging.getLogger(__name__)

RECORD_COLUMNS = [
    "section_id", "year", "count", "tow_distance_m", "secchi_m", "rsa", "rma",
    "log_predator", "management", "tributary",
]
NUMERIC_COLUMNS = ["year", "count", "tow_distance_m", "secchi_m", "rsa", "rma", "log_predator", "management"]
PREPROCESSED_COVARIATES = ("turbidity", "seagrass", "marsh", "predator")

PathLike = Union[str, Path]


def _line(row_index: int) -> int:
    # header is line 1
    return row_index + 2


def _read_csv(path: PathLike, required: Sequence[str], what: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataValidationError(f"{what} file is empty: {path}")
    except FileNotFoundError:
        raise DataValidationError(f"{what} file not found: {path}")
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataValidationError(f"{what} file {path} lacks column(s): {', '.join(missing)}")
    if frame.empty:
        raise DataValidationError(f"{what} file has no rows: {path}")
    return frame.apply(lambda column: column.str.strip())


def _group_order(labels: Sequence[str], baseline: str) -> List[str]:
    order: List[str] = []
    for label in labels:
        if label not in order:
            order.append(label)
    if baseline in order:
        order.remove(baseline)
        order.insert(0, baseline)
    else:
        logger.warning(f"Baseline tributary '{baseline}' not present; using '{order[0]}' as baseline")
    return order


def _apply_preprocessing(covariates: np.ndarray, names: Sequence[str], observed: np.ndarray,
                         method: Preprocessing) -> Dict[str, Any]:
    """Center or standardize the continuous covariates in place; rebuild the interaction"""
    record: Dict[str, Any] = {"method": Preprocessing(method).value}
    if Preprocessing(method) == Preprocessing.NONE:
        return record
    shifts, scales = {}, {}
    for name in PREPROCESSED_COVARIATES:
        j = names.index(name)
        values = covariates[..., j][observed]
        shift = float(values.mean())
        scale = float(values.std(ddof=1)) if Preprocessing(method) == Preprocessing.STANDARDIZE else 1.0
        if not scale > 0:
            scale = 1.0
        covariates[..., j] = (covariates[..., j] - shift) / scale
        shifts[name], scales[name] = shift, scale
    covariates[..., names.index("marsh_x_turbidity")] = (
        covariates[..., names.index("marsh")] * covariates[..., names.index("turbidity")]
    )
    record.update(shift=shifts, scale=scales)
    return record


def ingest(records_path: PathLike, adjacency_path: PathLike, sections_path: PathLike,
           preprocess: Preprocessing = Preprocessing.NONE,
           baseline: str = settings.baseline_group) -> Dataset:
    """
    Validate the three input files and assemble a Dataset.

    Every offending record is reported with its file line number. Section-years
    without a record become masked cells.
    """
    sections = _read_csv(sections_path, ["section_id", "tributary"], "Sections")
    edges_frame = _read_csv(adjacency_path, ["id_a", "id_b"], "Adjacency")
    records = _read_csv(records_path, RECORD_COLUMNS, "Records")

    section_ids = list(sections["section_id"])
    labels = dict(zip(sections["section_id"], sections["tributary"]))
    groups = _group_order(list(sections["tributary"]), baseline)
    graph = build_graph(section_ids, zip(edges_frame["id_a"], edges_frame["id_b"]), labels, group_order=groups)

    problems: List[str] = []
    numeric = records[NUMERIC_COLUMNS].apply(pd.to_numeric, errors="coerce")
    index_of = {sid: k for k, sid in enumerate(graph.section_ids)}
    seen = set()
    valid_rows = []
    for i in range(len(records)):
        line = _line(i)
        row = records.iloc[i]
        values = numeric.iloc[i]
        row_problems = []
        sid = row["section_id"]
        if sid not in index_of:
            row_problems.append(f"line {line}: unknown section id '{sid}'")
        bad = [c for c in NUMERIC_COLUMNS if not np.isfinite(values[c])]
        if bad:
            row_problems.append(f"line {line}: non-numeric or missing {', '.join(bad)}")
        else:
            if values["year"] != math.floor(values["year"]):
                row_problems.append(f"line {line}: year {row['year']} is not an integer")
            if values["count"] < 0 or values["count"] != math.floor(values["count"]):
                row_problems.append(f"line {line}: count {row['count']} is not a non-negative integer")
            if values["tow_distance_m"] <= 0 and values["count"] > 0:
                row_problems.append(f"line {line}: count {row['count']} with tow distance {row['tow_distance_m']} <= 0")
            if values["secchi_m"] <= 0:
                row_problems.append(f"line {line}: Secchi depth must be positive")
            for column in ("rsa", "rma"):
                if not 0.0 <= values[column] <= 1.0:
                    row_problems.append(f"line {line}: {column} {row[column]} outside [0, 1]")
            if values["management"] not in (0.0, 1.0):
                row_problems.append(f"line {line}: management must be 0 or 1")
        if sid in index_of and labels[sid] != row["tributary"]:
            row_problems.append(
                f"line {line}: tributary '{row['tributary']}' disagrees with sections file ('{labels[sid]}')"
            )
        if not row_problems:
            key = (sid, int(values["year"]))
            if key in seen:
                row_problems.append(f"line {line}: duplicate record for section {sid} in {key[1]}")
            seen.add(key)
        if row_problems:
            problems.extend(row_problems)
        else:
            valid_rows.append(i)
    if problems:
        raise DataValidationError(f"Rejected {records_path}", problems)

    years_seen = numeric["year"].astype(int)
    years = np.arange(int(years_seen.min()), int(years_seen.max()) + 1)
    K, T = graph.n_sections, len(years)
    names = covariate_names_for(list(graph.group_names))
    covariates = np.full((K, T, len(names)), np.nan)
    counts = np.full((K, T), np.nan)
    tow_distance = np.full((K, T), np.nan)
    observed = np.zeros((K, T), dtype=bool)
    unsampled = 0
    for i in valid_rows:
        values = numeric.iloc[i]
        k, t = index_of[records.iloc[i]["section_id"]], int(values["year"]) - years[0]
        if values["tow_distance_m"] <= 0:
            unsampled += 1
            continue
        turbidity = -values["secchi_m"]
        row = [turbidity, values["rsa"], values["rma"], values["rma"] * turbidity,
               values["log_predator"], values["management"]]
        row += [float(graph.group_index[k] == g) for g in range(1, graph.n_groups)]
        covariates[k, t] = row
        counts[k, t] = values["count"]
        tow_distance[k, t] = values["tow_distance_m"]
        observed[k, t] = True
    if unsampled:
        logger.warning(f"{unsampled} zero-count record(s) with tow distance <= 0 treated as unsampled")

    preprocessing = _apply_preprocessing(covariates, names, observed, preprocess)
    dataset = Dataset(graph=graph, years=years, counts=counts, observed=observed, tow_distance=tow_distance,
                      covariates=covariates, covariate_names=names, preprocessing=preprocessing)
    logger.info(
        f"Ingested {len(valid_rows)} records: {K} sections x {T} years ({years[0]}..{years[-1]}), "
        f"{K * T - dataset.n_observed} masked cell(s)"
    )
    return dataset


def load_inputs(records_path: PathLike, adjacency_path: PathLike, sections_path: PathLike,
                preprocess: Preprocessing = Preprocessing.NONE,
                last_year: Optional[int] = None) -> Dataset:
    dataset = ingest(records_path, adjacency_path, sections_path, preprocess)
    if last_year is not None:
        dataset = dataset.through_year(last_year)
        logger.info(f"Restricted to years <= {last_year}")
    return dataset


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format=settings.csv_float_format, lineterminator="\n")
    return path


def write_dataset(dataset: Dataset, directory: PathLike, truth: Optional[Parameters] = None) -> List[Path]:
    """Write a Dataset in the ingest schema (plus truth.json when the truth is known)"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    graph = dataset.graph
    if dataset.preprocessing.get("method", "none") != "none":
        raise StructuralError("Only raw (unpreprocessed) datasets can be written in the ingest schema")

    idx = {name: dataset.covariate_index(name) for name in ("turbidity", "seagrass", "marsh", "predator", "management")}
    records = []
    for k, section_id in enumerate(graph.section_ids):
        for t, year in enumerate(dataset.years):
            if not dataset.observed[k, t]:
                continue
            x = dataset.covariates[k, t]
            records.append({
                "section_id": section_id,
                "year": int(year),
                "count": int(dataset.counts[k, t]),
                "tow_distance_m": float(dataset.tow_distance[k, t]),
                "secchi_m": float(-x[idx["turbidity"]]),
                "rsa": float(x[idx["seagrass"]]),
                "rma": float(x[idx["marsh"]]),
                "log_predator": float(x[idx["predator"]]),
                "management": int(x[idx["management"]]),
                "tributary": graph.group_names[graph.group_index[k]],
            })
    paths = [
        _write_frame(pd.DataFrame(records, columns=RECORD_COLUMNS), directory / "records.csv"),
        _write_frame(
            pd.DataFrame([(graph.section_ids[i], graph.section_ids[j]) for i, j in sorted(graph.edges)],
                         columns=["id_a", "id_b"]),
            directory / "adjacency.csv",
        ),
        _write_frame(
            pd.DataFrame({"section_id": list(graph.section_ids),
                          "tributary": [graph.group_names[g] for g in graph.group_index]}),
            directory / "sections.csv",
        ),
    ]
    if truth is not None:
        paths.append(write_json(parameters_to_dict(truth), directory / "truth.json"))
    logger.info(f"Wrote dataset ({len(records)} records) to {directory}")
    return paths


def parameters_to_dict(params: Parameters) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for name, value in vars(params).items():
        if value is None:
            continue
        out[name] = np.asarray(value).tolist() if isinstance(value, np.ndarray) else value
    return out


def _json_safe(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def write_json(payload: Union[BaseModel, Dict[str, Any]], path: PathLike) -> Path:
    path = Path(path)
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="python")
    path.write_text(json.dumps(_json_safe(payload), indent=2, sort_keys=True) + "\n")
    return path


def canonical_hash(payload: Union[BaseModel, Dict[str, Any]]) -> str:
    """sha256 of the key-sorted compact JSON form"""
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    text = json.dumps(_json_safe(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def library_versions() -> Dict[str, str]:
    return {
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
    }


def new_manifest(command: str, config: BaseModel, inputs: Sequence[PathLike] = ()) -> RunManifest:
    return RunManifest(
        command=command,
        app_version=settings.app_version,
        library_versions=library_versions(),
        config=config.model_dump(mode="json"),
        config_hash=canonical_hash(config),
        inputs={str(p): file_sha256(p) for p in inputs if p is not None},
    )


def write_manifest(manifest: RunManifest, directory: PathLike) -> Path:
    path = write_json(manifest, Path(directory) / "manifest.json")
    logger.info(f"Wrote {path}")
    return path


def read_manifest(directory: PathLike) -> RunManifest:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise DataValidationError(f"No manifest.json in {directory}")
    return RunManifest(**json.loads(path.read_text()))


def layout_record(draws: PosteriorDraws) -> Dict[str, Any]:
    layout: ParameterLayout = draws.layout
    return {
        "variant": layout.variant.value,
        "coefficient_names": list(layout.coefficient_names),
        "n_sections": layout.K,
        "n_years": layout.T,
        "n_groups": layout.G,
        "parameterization": layout.parameterization.value,
    }


def stat_column(name: str) -> str:
    return f"{name}__"


def write_chains(draws: PosteriorDraws, directory: PathLike) -> List[Path]:
    """chain_<i>.csv: sampler statistics (suffixed `__`) then constrained parameters"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (chain, stats) in enumerate(zip(draws.chains, draws.stats), start=1):
        frame = pd.DataFrame({stat_column(name): stats[name] for name in STAT_NAMES})
        for name in ("treedepth", "n_leapfrog", "divergent"):
            frame[stat_column(name)] = frame[stat_column(name)].astype(int)
        frame = pd.concat([frame, pd.DataFrame(chain, columns=draws.names)], axis=1)
        paths.append(_write_frame(frame, directory / f"chain_{i}.csv"))
    logger.info(f"Wrote {len(paths)} chain file(s) to {directory}")
    return paths


def load_run(directory: PathLike) -> Tuple[PosteriorDraws, RunManifest]:
    """Re-read chain files written by `write_chains` using the manifest's layout record"""
    directory = Path(directory)
    manifest = read_manifest(directory)
    record = manifest.layout
    if not record:
        raise DataValidationError(f"Manifest in {directory} carries no parameter layout")
    layout = ParameterLayout(
        ModelVariant(record["variant"]), record["coefficient_names"], record["n_sections"],
        record["n_years"], record["n_groups"], Parameterization(record["parameterization"]),
    )
    chains, stats = [], []
    i = 1
    while (directory / f"chain_{i}.csv").is_file():
        frame = pd.read_csv(directory / f"chain_{i}.csv")
        missing = [name for name in layout.constrained_names if name not in frame.columns]
        if missing:
            raise DataValidationError(f"chain_{i}.csv lacks columns such as {missing[0]}")
        chains.append(frame[layout.constrained_names].to_numpy(float))
        stats.append({name: frame[stat_column(name)].to_numpy() for name in STAT_NAMES
                      if stat_column(name) in frame.columns})
        i += 1
    if not chains:
        raise DataValidationError(f"No chain_<i>.csv files in {directory}")
    draws = PosteriorDraws(variant=layout.variant, layout=layout, chains=chains, stats=stats,
                           seeds=list(manifest.chain_seeds))
    logger.info(f"Loaded {draws.n_chains} chain(s) x {draws.n_draws} draws of model {layout.variant.value}")
    return draws, manifest


def write_rows(rows: Sequence[BaseModel], path: PathLike, extra: Optional[Dict[str, Any]] = None) -> Path:
    """One CSV row per pydantic row model, optionally with constant extra columns"""
    records = [row.model_dump(mode="json") for row in rows]
    if extra:
        records = [{**extra, **record} for record in records]
    return _write_frame(pd.DataFrame(records), Path(path))
