import json

import numpy as np
import pytest

from app.core.exceptions import DataValidationError, GraphValidationError, StructuralError
from app.models.schemas import ModelVariant, Preprocessing, RunConfig
from app.services.io_service import (
    canonical_hash,
    file_sha256,
    ingest,
    layout_record,
    load_inputs,
    load_run,
    new_manifest,
    read_manifest,
    write_chains,
    write_dataset,
    write_manifest,
)
from app.services.sampler import STAT_NAMES
from app.services.synth import simulate_dataset
from tests.conftest import constant_draws, fixture_config


HEADER = "section_id,year,count,tow_distance_m,secchi_m,rsa,rma,log_predator,management,tributary"


def _write_inputs(directory, records, sections=None, edges=None):
    sections = sections or ["1,James", "2,James", "3,York", "4,York"]
    edges = edges or ["1,2", "3,4"]
    (directory / "sections.csv").write_text("\n".join(["section_id,tributary"] + sections) + "\n")
    (directory / "adjacency.csv").write_text("\n".join(["id_a,id_b"] + edges) + "\n")
    (directory / "records.csv").write_text("\n".join([HEADER] + records) + "\n")
    return directory / "records.csv", directory / "adjacency.csv", directory / "sections.csv"


def _row(section, year, count=3, tow=2500.0, tributary=None, management=0):
    tributary = tributary or ("James" if section in ("1", "2") else "York")
    return f"{section},{year},{count},{tow},1.2,0.05,0.2,3.1,{management},{tributary}"


GOOD_RECORDS = [_row(s, y) for s in "1234" for y in (2010, 2011)]


@pytest.fixture(scope="module")
def written(tmp_path_factory):
    dataset, truth = simulate_dataset(fixture_config(ModelVariant.M2, missing_cells=[(1, 2)]))
    directory = tmp_path_factory.mktemp("dataset")
    write_dataset(dataset, directory, truth)
    return dataset, truth, directory


def test_written_dataset_ingests_back_exactly(written):
    dataset, _, directory = written
    loaded = ingest(directory / "records.csv", directory / "adjacency.csv", directory / "sections.csv")
    assert loaded.graph.section_ids == dataset.graph.section_ids
    assert loaded.graph.edges == dataset.graph.edges
    assert loaded.graph.group_names == dataset.graph.group_names
    assert loaded.covariate_names == dataset.covariate_names
    np.testing.assert_array_equal(loaded.years, dataset.years)
    np.testing.assert_array_equal(loaded.observed, dataset.observed)
    np.testing.assert_array_equal(loaded.counts, dataset.counts)
    np.testing.assert_array_equal(loaded.tow_distance, dataset.tow_distance)
    np.testing.assert_array_equal(loaded.covariates, dataset.covariates)


def test_truth_is_written_alongside(written):
    _, truth, directory = written
    stored = json.loads((directory / "truth.json").read_text())
    assert stored["lam"] == pytest.approx(truth.lam)
    np.testing.assert_allclose(stored["phi"], truth.phi)


def test_rewriting_gives_identical_bytes(written, tmp_path):
    dataset, truth, directory = written
    write_dataset(dataset, tmp_path, truth)
    for name in ("records.csv", "adjacency.csv", "sections.csv", "truth.json"):
        assert file_sha256(tmp_path / name) == file_sha256(directory / name)


def test_missing_section_years_become_masked_cells(tmp_path):
    records = [r for r in GOOD_RECORDS if not r.startswith("4,2011")]
    dataset = ingest(*_write_inputs(tmp_path, records))
    assert dataset.counts.shape == (4, 2)
    assert not dataset.observed[3, 1]
    assert np.isnan(dataset.counts[3, 1])
    assert dataset.covariate_names[-1] == "york"


def test_zero_count_without_tow_is_unsampled(tmp_path, caplog):
    records = GOOD_RECORDS[:-1] + [_row("4", 2011, count=0, tow=0)]
    dataset = ingest(*_write_inputs(tmp_path, records))
    assert not dataset.observed[3, 1]
    assert "treated as unsampled" in caplog.text


def test_every_bad_record_is_reported_with_its_line(tmp_path):
    records = list(GOOD_RECORDS)
    records[0] = _row("9", 2010)
    records[2] = "2,2010,abc,2500,1.2,0.05,0.2,3.1,0,James"
    records[3] = _row("2", 2011, tributary="York")
    records.append(_row("3", 2010))
    records.append(_row("4", 2012, count=5, tow=0))
    records.append(_row("4", 2013, management=2))
    with pytest.raises(DataValidationError) as caught:
        ingest(*_write_inputs(tmp_path, records))
    problems = caught.value.problems
    assert any(p.startswith("line 2: unknown section id '9'") for p in problems)
    assert any(p.startswith("line 4: non-numeric or missing count") for p in problems)
    assert any(p.startswith("line 5: tributary 'York' disagrees") for p in problems)
    assert any(p.startswith("line 10: duplicate record for section 3 in 2010") for p in problems)
    assert any(p.startswith("line 11: count 5 with tow distance") for p in problems)
    assert any(p.startswith("line 12: management must be 0 or 1") for p in problems)
    assert len(problems) == 6
    assert "line 4" in str(caught.value)


def test_missing_columns_and_files(tmp_path):
    paths = _write_inputs(tmp_path, GOOD_RECORDS)
    paths[0].write_text("section_id,year,count\n1,2010,3\n")
    with pytest.raises(DataValidationError, match="lacks column"):
        ingest(*paths)
    with pytest.raises(DataValidationError, match="not found"):
        ingest(tmp_path / "nowhere.csv", paths[1], paths[2])


def test_bad_adjacency_is_a_graph_error(tmp_path):
    with pytest.raises(GraphValidationError):
        ingest(*_write_inputs(tmp_path, GOOD_RECORDS, edges=["1,2", "2,3"]))


def test_baseline_tributary_comes_first(tmp_path):
    sections = ["1,York", "2,York", "3,James", "4,James"]
    records = [_row(s, 2010, tributary="York" if s in "12" else "James") for s in "1234"]
    dataset = ingest(*_write_inputs(tmp_path, records, sections=sections))
    assert dataset.graph.group_names == ("James", "York")
    york = dataset.covariates[..., dataset.covariate_index("york")]
    np.testing.assert_array_equal(york[:, 0], [1.0, 1.0, 0.0, 0.0])


@pytest.mark.parametrize("method", [Preprocessing.CENTER, Preprocessing.STANDARDIZE])
def test_preprocessing_of_continuous_covariates(written, method):
    _, _, directory = written
    dataset = ingest(directory / "records.csv", directory / "adjacency.csv", directory / "sections.csv", method)
    obs = dataset.observed
    for name in ("turbidity", "seagrass", "marsh", "predator"):
        values = dataset.covariates[..., dataset.covariate_index(name)][obs]
        assert values.mean() == pytest.approx(0.0, abs=1e-12)
        if method == Preprocessing.STANDARDIZE:
            assert values.std(ddof=1) == pytest.approx(1.0)
    interaction = dataset.covariates[..., dataset.covariate_index("marsh_x_turbidity")][obs]
    np.testing.assert_allclose(
        interaction,
        dataset.covariates[..., dataset.covariate_index("marsh")][obs]
        * dataset.covariates[..., dataset.covariate_index("turbidity")][obs],
    )
    assert dataset.preprocessing["method"] == method.value
    assert set(dataset.preprocessing["shift"]) == {"turbidity", "seagrass", "marsh", "predator"}


def test_preprocessed_dataset_cannot_be_exported(written, tmp_path):
    _, _, directory = written
    dataset = ingest(directory / "records.csv", directory / "adjacency.csv", directory / "sections.csv",
                     Preprocessing.CENTER)
    with pytest.raises(StructuralError):
        write_dataset(dataset, tmp_path)


def test_load_inputs_truncates_years(written):
    dataset, _, directory = written
    loaded = load_inputs(directory / "records.csv", directory / "adjacency.csv", directory / "sections.csv",
                         last_year=2007)
    assert list(loaded.years) == [2006, 2007]
    np.testing.assert_array_equal(loaded.counts, dataset.counts[:, :2])


def test_chains_round_trip_through_csv(written, tmp_path):
    dataset, truth, _ = written
    draws = constant_draws(ModelVariant.M2, dataset, truth, n_chains=2, n_draws=5)
    rng = np.random.default_rng(0)
    draws.chains = [chain + rng.normal(scale=1e-3, size=chain.shape) for chain in draws.chains]
    draws.stats = [{name: rng.integers(0, 5, size=5).astype(float) for name in STAT_NAMES} for _ in range(2)]
    draws.seeds = [101, 202]
    paths = write_chains(draws, tmp_path)
    assert [p.name for p in paths] == ["chain_1.csv", "chain_2.csv"]
    header = (tmp_path / "chain_1.csv").read_text().splitlines()[0].split(",")
    assert header[:len(STAT_NAMES)] == [f"{name}__" for name in STAT_NAMES]
    assert header[len(STAT_NAMES):] == draws.names

    manifest = new_manifest("fit", RunConfig())
    manifest.layout = layout_record(draws)
    manifest.chain_seeds = draws.seeds
    write_manifest(manifest, tmp_path)
    loaded, stored = load_run(tmp_path)
    assert stored.config_hash == manifest.config_hash
    assert loaded.seeds == [101, 202]
    assert loaded.names == draws.names
    for a, b in zip(loaded.chains, draws.chains):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(loaded.stat("treedepth"), draws.stat("treedepth"))


def test_load_run_needs_a_manifest_and_chains(tmp_path):
    with pytest.raises(DataValidationError, match="manifest"):
        load_run(tmp_path)
    manifest = new_manifest("fit", RunConfig())
    write_manifest(manifest, tmp_path)
    with pytest.raises(DataValidationError, match="layout"):
        load_run(tmp_path)


def test_manifest_records_inputs_and_hash(written, tmp_path):
    _, _, directory = written
    config = RunConfig(records_path=str(directory / "records.csv"))
    manifest = new_manifest("fit", config, [directory / "records.csv"])
    assert manifest.inputs == {str(directory / "records.csv"): file_sha256(directory / "records.csv")}
    assert manifest.config_hash == canonical_hash(config)
    assert manifest.config_hash != canonical_hash(RunConfig())
    assert set(manifest.library_versions) == {"numpy", "scipy", "pandas", "pydantic"}
    write_manifest(manifest, tmp_path)
    assert read_manifest(tmp_path) == manifest


def test_canonical_hash_ignores_key_order():
    assert canonical_hash({"a": 1, "b": [1.0, 2.0]}) == canonical_hash({"b": [1.0, 2.0], "a": 1})
    assert canonical_hash({"a": float("nan")}) == canonical_hash({"a": None})
