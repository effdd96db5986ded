from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from app.core.exceptions import ConfigurationError, InsufficientDrawsError, StructuralError
from app.models.domain import PosteriorDraws
from app.models.schemas import ModelVariant
from app.services.model_core import ParameterLayout, linear_predictor_grid
from app.services.posterior import (
    aggregate_pseudo_posterior,
    compare_coefficients,
    compare_models,
    conditional_effects,
    equal_tail,
    hpdi,
    parse_comparison,
    prob_greater,
    summarize,
)
from app.services.synth import simulate_dataset
from tests.conftest import FIXTURE_BETA, constant_draws, fixture_config


def _m1_draws(chains):
    layout = ParameterLayout(ModelVariant.M1, ("intercept",), 1, 1, 1)
    return PosteriorDraws(variant=ModelVariant.M1, layout=layout, chains=chains, stats=[],
                          seeds=list(range(len(chains))))


@pytest.fixture
def normal_draws():
    rng = np.random.default_rng(10)
    return _m1_draws([
        np.column_stack([rng.normal(2.0, 1.0, 500), rng.gamma(5.0, 0.1, 500), rng.standard_normal(500)])
        for _ in range(2)
    ])


def test_hpdi_of_standard_normal():
    draws = np.random.default_rng(0).standard_normal(100_000)
    low, high = hpdi(draws, 0.8)
    assert low == pytest.approx(-1.2816, abs=0.02)
    assert high == pytest.approx(1.2816, abs=0.02)


def test_hpdi_counts_exactly_ceil_level_n():
    # 0.8 * 100 is 80.00000000000001 in floating point
    assert hpdi(np.arange(100.0), 0.8) == (0.0, 79.0)


def test_hpdi_is_never_wider_than_equal_tail():
    rng = np.random.default_rng(1)
    for _ in range(20):
        draws = rng.exponential(size=100)
        low, high = hpdi(draws, 0.8)
        et_low, et_high = equal_tail(draws, 0.8)
        assert high - low <= et_high - et_low + 1e-12


def test_hpdi_hugs_the_mode_of_skewed_draws():
    draws = np.random.default_rng(2).exponential(size=5000)
    low, _ = hpdi(draws, 0.8)
    assert low < 0.01


def test_hpdi_needs_fifty_draws():
    with pytest.raises(InsufficientDrawsError):
        hpdi(np.zeros(49))
    assert hpdi(np.zeros(50)) == (0.0, 0.0)


@pytest.mark.parametrize("level", [0.0, 1.0, 1.5])
def test_credible_level_must_be_a_probability(level):
    with pytest.raises(ConfigurationError):
        hpdi(np.arange(100.0), level)


def test_summary_leaves_out_random_effects_by_default(normal_draws):
    table = summarize(normal_draws, level=0.8)
    assert [row.parameter for row in table.rows] == ["beta_intercept", "sigma2_theta"]
    row = table.row("beta_intercept")
    assert row.mean == pytest.approx(2.0, abs=0.15)
    assert row.sd == pytest.approx(1.0, abs=0.1)
    assert row.q10 < row.median < row.q90
    assert row.hpdi_low < row.median < row.hpdi_high
    assert row.excludes_zero
    assert row.rhat == pytest.approx(1.0, abs=0.05)
    assert row.ess_bulk > 100


def test_summary_flags_intervals_covering_zero(normal_draws):
    row = summarize(normal_draws, parameters=["theta[1]"]).row("theta[1]")
    assert not row.excludes_zero


def test_summary_without_chain_diagnostics():
    rng = np.random.default_rng(3)
    table = summarize(_m1_draws([rng.standard_normal((100, 3))]))
    assert all(row.rhat is None and row.ess_bulk is None for row in table.rows)


def test_prob_greater_counts_ties_as_half():
    assert prob_greater([1.0, 2.0, 3.0], [0.0, 2.0, 4.0]) == pytest.approx(0.5)
    assert prob_greater([5.0, 6.0], [1.0, 1.0]) == 1.0
    with pytest.raises(StructuralError):
        prob_greater([1.0, 2.0], [1.0])


@pytest.mark.parametrize("expression, expected", [
    ("beta_york>beta_james", ("beta_york", "beta_james")),
    (" beta_marsh > beta_turbidity ", ("beta_marsh", "beta_turbidity")),
])
def test_parse_comparison(expression, expected):
    assert parse_comparison(expression) == expected


@pytest.mark.parametrize("expression", ["beta_york", "a>b>c", ">b", "a>"])
def test_malformed_comparisons_are_rejected(expression):
    with pytest.raises(ConfigurationError):
        parse_comparison(expression)


def test_compare_coefficients(normal_draws):
    frame = compare_coefficients(normal_draws, ["beta_intercept>theta[1]", "theta[1]>beta_intercept"])
    assert list(frame.columns) == ["comparison", "probability"]
    assert frame["probability"].sum() == pytest.approx(1.0)
    assert frame.loc[0, "probability"] > 0.85


@pytest.fixture(scope="module")
def m2_fixture():
    return simulate_dataset(fixture_config(ModelVariant.M2, missing_cells=[(0, 1), (0, 2)]))


def test_compare_models_uses_shared_coefficients(m2_fixture):
    dataset, truth = m2_fixture
    m2 = constant_draws(ModelVariant.M2, dataset, truth)
    m1_truth = type(truth)(beta=truth.beta, sigma2_theta=0.3, theta=np.zeros(dataset.n_sections))
    m1 = constant_draws(ModelVariant.M1, dataset, m1_truth)
    frame = compare_models({"1": m1, "2": m2}, level=0.8)
    assert len(frame) == 2 * len(FIXTURE_BETA)
    assert set(frame["model"]) == {"1", "2"}
    first = frame[frame["parameter"] == "beta_intercept"]
    np.testing.assert_allclose(first["median"], FIXTURE_BETA[0])
    assert compare_models({}).empty


def _expected_effect(dataset, x, percentile, include_intercept=False):
    marsh = dataset.covariates[..., dataset.covariate_index("marsh")][dataset.observed]
    c = np.percentile(marsh, percentile)
    b = dict(zip(dataset.coefficient_names, FIXTURE_BETA))
    mu = np.log(1000.0) + x * b["turbidity"] + c * b["marsh"] + c * x * b["marsh_x_turbidity"] + b["management"]
    if include_intercept:
        mu += b["intercept"]
    return np.exp(mu)


@pytest.mark.parametrize("include_intercept", [False, True])
def test_conditional_effects_match_hand_computation(m2_fixture, include_intercept):
    dataset, truth = m2_fixture
    draws = constant_draws(ModelVariant.M2, dataset, truth)
    table = conditional_effects(draws, dataset, "turbidity", percentiles=[20, 80], grid=[-1.5, -0.5],
                                include_intercept=include_intercept)
    assert table.conditioning == "marsh"
    assert len(table.rows) == 4
    for row in table.rows:
        expected = _expected_effect(dataset, row.x, row.conditioning_percentile, include_intercept)
        assert row.median == pytest.approx(expected, rel=1e-10)
        assert row.low == pytest.approx(expected, rel=1e-10)
        assert row.high == pytest.approx(expected, rel=1e-10)


def test_conditional_effects_default_grid(m2_fixture):
    dataset, truth = m2_fixture
    table = conditional_effects(constant_draws(ModelVariant.M2, dataset, truth), dataset, "marsh")
    assert table.conditioning == "turbidity"
    assert len(table.rows) == 6 * 50
    marsh = dataset.covariates[..., dataset.covariate_index("marsh")][dataset.observed]
    xs = sorted({row.x for row in table.rows})
    assert xs[0] == pytest.approx(marsh.min()) and xs[-1] == pytest.approx(marsh.max())


def test_conditional_effects_fall_back_to_equal_tail_bands(m2_fixture):
    dataset, truth = m2_fixture
    draws = constant_draws(ModelVariant.M2, dataset, truth, n_chains=1, n_draws=20)
    table = conditional_effects(draws, dataset, "turbidity", percentiles=[50], grid=[-1.0])
    assert table.rows[0].low == pytest.approx(table.rows[0].high)


def test_conditional_effects_reject_unknown_inputs(m2_fixture):
    dataset, truth = m2_fixture
    with pytest.raises(ConfigurationError):
        conditional_effects(constant_draws(ModelVariant.M2, dataset, truth), dataset, "seagrass")
    layout = ParameterLayout(ModelVariant.M1, ("intercept", "turbidity"), 1, 1, 1)
    narrow = PosteriorDraws(variant=ModelVariant.M1, layout=layout, chains=[np.zeros((60, 4))], stats=[], seeds=[0])
    with pytest.raises(StructuralError):
        conditional_effects(narrow, dataset, "turbidity")


def _with_coefficients(dataset, truth, **values):
    b = dict(zip(dataset.coefficient_names, FIXTURE_BETA))
    b.update(values)
    return replace(truth, beta=np.array([b[name] for name in dataset.coefficient_names]))


def _curves(table):
    curves = {}
    for row in table.rows:
        curves.setdefault(row.conditioning_percentile, []).append((row.x, row.median))
    return {pct: np.array(sorted(points))[:, 1] for pct, points in curves.items()}


@pytest.mark.parametrize("slope", [0.8, -0.8])
def test_effect_curves_follow_the_sign_of_the_coefficient(m2_fixture, slope):
    dataset, truth = m2_fixture
    params = _with_coefficients(dataset, truth, turbidity=slope, marsh_x_turbidity=0.0)
    table = conditional_effects(constant_draws(ModelVariant.M2, dataset, params), dataset, "turbidity", n_grid=20)
    for curve in _curves(table).values():
        steps = np.diff(curve)
        assert np.all(steps > 0) if slope > 0 else np.all(steps < 0)


def test_interaction_flips_the_marsh_slope_across_turbidity(m2_fixture):
    dataset, truth = m2_fixture
    turbidity = dataset.covariates[..., dataset.covariate_index("turbidity")][dataset.observed]
    # slope in marsh is b_marsh + turbidity * b_interaction, zero at the median turbidity
    params = _with_coefficients(dataset, truth, marsh=-float(np.median(turbidity)), marsh_x_turbidity=1.0)
    table = conditional_effects(constant_draws(ModelVariant.M2, dataset, params), dataset, "marsh",
                                percentiles=[1, 20, 80, 99], n_grid=20)
    curves = _curves(table)
    for pct in (1, 20):
        assert np.all(np.diff(curves[pct]) < 0)
    for pct in (80, 99):
        assert np.all(np.diff(curves[pct]) > 0)


def test_aggregate_matches_log_scale_average(m2_fixture):
    dataset, truth = m2_fixture
    table = aggregate_pseudo_posterior(constant_draws(ModelVariant.M2, dataset, truth), dataset, (2006, 2009))
    log_mu = np.where(dataset.observed, linear_predictor_grid(truth, dataset), np.nan)
    expected = np.exp(np.nanmean(log_mu, axis=1))
    assert [row.section_id for row in table.rows] == list(dataset.graph.section_ids)
    assert table.rows[0].n_years == 2 and table.rows[1].n_years == 4
    for k, row in enumerate(table.rows):
        assert row.median == pytest.approx(expected[k], rel=1e-10)
        assert row.hpdi_low == pytest.approx(row.hpdi_high)
        assert row.observed_mean == pytest.approx(np.nanmean(dataset.counts[k]))
    assert table.excluded_sections == []


def test_aggregate_excludes_sections_without_observed_years(m2_fixture):
    dataset, truth = m2_fixture
    table = aggregate_pseudo_posterior(constant_draws(ModelVariant.M2, dataset, truth), dataset, (2007, 2008))
    assert table.excluded_sections == ["1"]
    rows = {row.section_id: row for row in table.rows}
    assert "1" not in rows
    # the other James section is alone in its tributary now
    assert rows["2"].group == "James" and rows["2"].standardized_median is None
    for a, b in (("3", "4"), ("5", "6")):
        z = sorted([rows[a].standardized_median, rows[b].standardized_median])
        np.testing.assert_allclose(z, [-1 / np.sqrt(2), 1 / np.sqrt(2)])


def test_aggregate_rejects_reversed_window(m2_fixture):
    dataset, truth = m2_fixture
    with pytest.raises(ConfigurationError):
        aggregate_pseudo_posterior(constant_draws(ModelVariant.M2, dataset, truth), dataset, (2009, 2006))


def test_aggregate_table_exports_to_frame(m2_fixture):
    dataset, truth = m2_fixture
    table = aggregate_pseudo_posterior(constant_draws(ModelVariant.M2, dataset, truth), dataset, (2006, 2009))
    frame = pd.DataFrame([row.model_dump() for row in table.rows])
    assert len(frame) == dataset.n_sections
    assert frame.groupby("group")["standardized_median"].sum().abs().max() < 1e-9
