from dataclasses import replace

import numpy as np
import pytest

from app.core.exceptions import ConfigurationError, SamplerError, StructuralError
from app.models.domain import Parameters
from app.models.schemas import (
    ForecastReport,
    ForecastRow,
    IntervalMethod,
    ModelSpec,
    ModelVariant,
)
from app.services import forecast_cv
from app.services.forecast_cv import (
    coverage,
    evaluate_forecast,
    forecast_year,
    prediction_interval,
    rank_models,
    run_lfo,
)
from app.services.model_core import linear_predictor_grid
from app.services.synth import simulate_dataset
from tests.conftest import constant_draws, fixture_config


def _truncate(truth: Parameters, n_years: int) -> Parameters:
    phi = truth.phi
    if phi is not None and np.ndim(phi) == 2:
        phi = phi[:, :n_years]
    eta = truth.eta
    if eta is not None:
        eta = eta[..., :n_years]
    return Parameters(**{**truth.__dict__, "phi": phi, "eta": eta})


def _report(name, flags, widths):
    rows = [ForecastRow(section_id=str(i), observed=1, low=0, high=w, median=1.0, inside=f)
            for i, (f, w) in enumerate(zip(flags, widths))]
    return ForecastReport(model=name, year=2009, level=0.8, rows=rows)


def test_hpd_interval_on_uniform_counts():
    assert prediction_interval(np.arange(100), 0.8) == (0, 79)


def test_equal_tail_interval_uses_inverted_cdf():
    assert prediction_interval(np.arange(100), 0.8, IntervalMethod.EQUAL_TAIL) == (9, 89)


def test_hpd_interval_is_narrower_on_skewed_counts():
    counts = np.array([0] * 50 + [1] * 30 + [5] * 10 + [20] * 10)
    assert prediction_interval(counts, 0.8) == (0, 1)
    assert prediction_interval(counts, 0.8, IntervalMethod.EQUAL_TAIL) == (0, 5)


def test_interval_ignores_missing_draws_and_rejects_empty_input():
    counts = np.concatenate([np.arange(100.0), [np.nan] * 5])
    assert prediction_interval(counts, 0.8) == (0, 79)
    with pytest.raises(StructuralError):
        prediction_interval(np.full(10, np.nan))
    with pytest.raises(ConfigurationError):
        prediction_interval(np.arange(100), 1.0)


def test_small_predictive_samples_warn(caplog):
    prediction_interval(np.arange(100), 0.8)
    assert "predictive draws" in caplog.text


@pytest.fixture(scope="module")
def m4_fixture():
    return simulate_dataset(fixture_config(ModelVariant.M4, missing_cells=[(2, 3)]))


def test_evaluate_forecast_scores_each_section(m4_fixture):
    dataset, _ = m4_fixture
    predictive = np.tile(np.arange(100.0)[:, None], (1, dataset.n_sections))
    predictive[:, 5] = np.nan
    report = evaluate_forecast(ModelVariant.M4, predictive, dataset, 2009, level=0.8)
    assert report.skipped_sections == ["3", "6"]
    assert report.n_evaluated == 4
    for row in report.rows:
        k = dataset.graph.index_of(row.section_id)
        assert (row.low, row.high) == (0, 79)
        assert row.observed == int(dataset.counts[k, 3])
        assert row.inside == (row.observed <= 79)
        assert row.width == 79
    assert coverage(report) == pytest.approx(np.mean([row.inside for row in report.rows]))
    assert report.mean_width == 79


def test_coverage_needs_evaluated_sections():
    with pytest.raises(StructuralError):
        coverage(ForecastReport(model=ModelVariant.M1, year=2009, level=0.8, rows=[]))


def test_rank_models_prefers_nominal_coverage_then_sharpness():
    reports = {
        "1": _report("1", [True] * 10, [9] * 10),
        "2": _report("2", [True] * 8 + [False] * 2, [5] * 10),
        "4": _report("4", [True] * 8 + [False] * 2, [3] * 10),
        "3a": _report("3a", [True] * 5 + [False] * 5, [1] * 10),
    }
    assert rank_models(reports, 0.8) == ["4", "2", "1", "3a"]


@pytest.mark.parametrize("variant", list(ModelVariant), ids=lambda v: f"model{v.value}")
def test_forecast_shapes_and_missing_sections(variant):
    dataset, truth = simulate_dataset(fixture_config(variant))
    training = dataset.through_year(2008)
    draws = constant_draws(variant, training, _truncate(truth, 3), n_chains=1, n_draws=30)
    X, O, _, _ = dataset.year_slice(2009)
    X = X.copy()
    X[4] = np.nan
    counts = forecast_year(ModelSpec(variant=variant), draws, training, X, O, np.random.default_rng(0))
    assert counts.shape == (30, dataset.n_sections)
    assert np.all(np.isnan(counts[:, 4]))
    usable = np.delete(counts, 4, axis=1)
    assert np.all(usable >= 0) and np.all(usable == np.round(usable))


def test_static_model_forecast_mean_matches_rate():
    dataset, truth = simulate_dataset(fixture_config(ModelVariant.M1))
    training = dataset.through_year(2008)
    draws = constant_draws(ModelVariant.M1, training, truth, n_chains=1, n_draws=4000)
    X, O, _, _ = dataset.year_slice(2009)
    counts = forecast_year(ModelSpec(variant=ModelVariant.M1), draws, training, X, O, np.random.default_rng(1))
    mu = np.exp(linear_predictor_grid(truth, dataset)[:, 3])
    se = np.sqrt(mu / 4000)
    assert np.all(np.abs(counts.mean(axis=0) - mu) < 5 * se)


def test_forecast_checks_its_inputs(m4_dataset):
    dataset, truth = m4_dataset
    training = dataset.through_year(2008)
    draws = constant_draws(ModelVariant.M4, training, _truncate(truth, 3), n_chains=1, n_draws=10)
    X, O, _, _ = dataset.year_slice(2009)
    rng = np.random.default_rng(2)
    with pytest.raises(StructuralError):
        forecast_year(ModelSpec(variant=ModelVariant.M2), draws, training, X, O, rng)
    with pytest.raises(StructuralError):
        forecast_year(ModelSpec(variant=ModelVariant.M4), draws, training, X[:, :3], O, rng)


@pytest.mark.parametrize("holdout", [2006, 2020])
def test_lfo_rejects_unusable_holdout_years(m4_fixture, quick_sampler, holdout):
    dataset, _ = m4_fixture
    with pytest.raises(ConfigurationError):
        run_lfo([ModelSpec(variant=ModelVariant.M1)], dataset, holdout, quick_sampler)


def test_lfo_records_failures_and_keeps_going(m4_fixture, quick_sampler, monkeypatch):
    dataset, truth = m4_fixture
    m1_truth = Parameters(beta=truth.beta, sigma2_theta=0.3, theta=np.zeros(dataset.n_sections))
    m4_truth = _truncate(truth, 3)

    def fake_inference(spec, training, config):
        if spec.variant == ModelVariant.M2:
            raise SamplerError("all chains diverged")
        params = m1_truth if spec.variant == ModelVariant.M1 else m4_truth
        return constant_draws(spec.variant, training, params, n_chains=2, n_draws=300)

    monkeypatch.setattr(forecast_cv, "run_inference", fake_inference)
    specs = [ModelSpec(variant=v) for v in (ModelVariant.M1, ModelVariant.M2, ModelVariant.M4)]
    result = run_lfo(specs, dataset, 2009, quick_sampler, level=0.8)
    assert set(result.reports) == {"1", "4"}
    assert "diverged" in result.failures["2"]
    assert sorted(result.ranking) == ["1", "4"]
    assert result.reports["4"].skipped_sections == ["3"]
    again = run_lfo(specs, dataset, 2009, quick_sampler, level=0.8)
    assert again.reports["4"].rows == result.reports["4"].rows


def test_lfo_end_to_end(m4_fixture, quick_sampler):
    dataset, _ = m4_fixture
    specs = [ModelSpec(variant=ModelVariant.M1), ModelSpec(variant=ModelVariant.M2)]
    result = run_lfo(specs, dataset, 2009, quick_sampler)
    assert not result.failures
    for report in result.reports.values():
        assert report.n_evaluated == dataset.n_sections - 1
        assert 0.0 <= report.coverage <= 1.0
        assert all(row.low <= row.median <= row.high for row in report.rows)


def _next_effects(variant, params, dataset, n, seed=0):
    rng = np.random.default_rng(seed)
    return np.stack([forecast_cv._next_random_effect(variant, params, dataset, rng) for _ in range(n)])


@pytest.mark.parametrize("rho", [0.0, 0.6])
def test_spatiotemporal_forecast_field_shrinks_towards_zero_by_rho(m4_dataset, rho):
    dataset, truth = m4_dataset
    last = np.linspace(-3.0, 3.0, dataset.n_sections)
    params = replace(truth, rho=rho, phi=np.column_stack([np.zeros(dataset.n_sections), last]))
    fields = _next_effects(ModelVariant.M4, params, dataset, 4000)
    sigma = params.sigma2_phi * np.linalg.inv(
        np.diag(dataset.graph.degrees.astype(float)) - params.lam * dataset.graph.adjacency.toarray()
    )
    se = np.sqrt(np.diag(sigma) / len(fields))
    assert np.all(np.abs(fields.mean(axis=0) - rho * last) < 4 * se)
    np.testing.assert_allclose(np.cov(fields, rowvar=False), sigma, atol=0.1 * sigma.max())
    lag_one = np.corrcoef(fields.ravel(), np.tile(last, len(fields)))[0, 1]
    if rho == 0.0:
        assert abs(lag_one) < 0.05
    else:
        assert lag_one > 0.5


def test_unit_dependence_with_vanishing_innovations_repeats_the_last_field(m4_dataset):
    dataset, truth = m4_dataset
    last = np.linspace(-1.0, 2.0, dataset.n_sections)
    params = replace(truth, rho=1.0, sigma2_phi=1e-14, phi=np.column_stack([np.ones(dataset.n_sections), last]))
    fields = _next_effects(ModelVariant.M4, params, dataset, 5)
    np.testing.assert_allclose(fields, np.tile(last, (5, 1)), atol=1e-5)


def test_tributary_trends_use_their_own_dependence():
    dataset, truth = simulate_dataset(fixture_config(ModelVariant.M3B))
    params = replace(truth, sigma2_eta=1e-14, P=0.5, r=np.array([1.5, -0.5, -1.0]),
                     eta=np.column_stack([np.zeros(3), np.ones(3)]))
    fields = _next_effects(ModelVariant.M3B, params, dataset, 3)
    expected = np.asarray(params.phi) + params.rho_g[dataset.graph.group_index]
    assert len(set(np.round(params.rho_g, 6))) == 3
    np.testing.assert_allclose(fields, np.tile(expected, (3, 1)), atol=1e-6)


def test_common_trend_carries_the_shared_dependence():
    dataset, truth = simulate_dataset(fixture_config(ModelVariant.M3A))
    params = replace(truth, sigma2_eta=1e-14, rho=0.3, eta=np.array([0.0, 2.0]))
    fields = _next_effects(ModelVariant.M3A, params, dataset, 3)
    np.testing.assert_allclose(fields, np.tile(np.asarray(params.phi) + 0.6, (3, 1)), atol=1e-6)
