"""
One-step-ahead leave-future-out cross-validation.

Each variant is fitted on the years before the holdout year; random effects are
propagated one year forward per posterior draw, counts are drawn from the Poisson
predictive, and the withheld counts are scored against prediction intervals.
"""
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import ConfigurationError, ModelingError, StructuralError
from app.models.domain import Dataset, Parameters, PosteriorDraws
from app.models.schemas import (
    ForecastReport,
    ForecastRow,
    IntervalMethod,
    LfoResult,
    ModelSpec,
    ModelVariant,
    SamplerConfig,
)
from app.services.areal_graph import sample_car
from app.services.sampler import run_inference


logger = logging.getLogger(__name__)

MAX_LOG_RATE = 40.0
MIN_PREDICTIVE_DRAWS = 500


def _next_random_effect(variant: ModelVariant, params: Parameters, dataset: Dataset,
                        rng: np.random.Generator) -> np.ndarray:
    """Random-effect contribution for the year after the last fitted year (length K)"""
    graph = dataset.graph
    if variant == ModelVariant.M1:
        return np.asarray(params.theta, float)
    if variant == ModelVariant.M2:
        return np.asarray(params.phi, float)
    if variant == ModelVariant.M3A:
        eta = np.asarray(params.eta, float)
        eta_next = params.rho * eta[-1] + rng.normal(0.0, math.sqrt(params.sigma2_eta))
        return np.asarray(params.phi, float) + eta_next
    if variant == ModelVariant.M3B:
        eta = np.asarray(params.eta, float)
        eta_next = params.rho_g * eta[:, -1] + rng.normal(0.0, math.sqrt(params.sigma2_eta), size=graph.n_groups)
        return np.asarray(params.phi, float) + eta_next[graph.group_index]
    phi = np.asarray(params.phi, float)
    return params.rho * phi[:, -1] + sample_car(graph, params.lam, params.sigma2_phi, rng)


def forecast_year(spec: ModelSpec, draws: PosteriorDraws, dataset: Dataset,
                  new_covariates: np.ndarray, new_offsets: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    """
    Posterior-predictive counts for the year after `dataset`'s last year.

    Returns an (n_draws x K) array; columns of sections whose covariates or offset
    are missing are NaN.
    """
    variant = ModelVariant(spec.variant)
    if ModelVariant(draws.variant) != variant:
        raise StructuralError(f"Draws come from model {draws.variant}, not {variant.value}")
    K = dataset.n_sections
    new_covariates = np.asarray(new_covariates, float)
    new_offsets = np.asarray(new_offsets, float)
    if new_covariates.shape != (K, dataset.n_covariates) or new_offsets.shape != (K,):
        raise StructuralError(f"Forecast inputs must have shapes ({K}, {dataset.n_covariates}) and ({K},)")

    usable = np.all(np.isfinite(new_covariates), axis=1) & np.isfinite(new_offsets)
    skipped = [dataset.graph.section_ids[k] for k in np.flatnonzero(~usable)]
    if skipped:
        logger.warning(f"Skipping sections without forecast covariates: {', '.join(skipped)}")
    X = np.nan_to_num(new_covariates)
    O = np.nan_to_num(new_offsets) + np.log(spec.rate_multiplier)

    counts = np.full((draws.n_total, K), np.nan)
    n_clipped = 0
    for d, params in enumerate(draws.iter_parameters()):
        beta = np.asarray(params.beta, float)
        log_mu = beta[0] + X @ beta[1:] + O + _next_random_effect(variant, params, dataset, rng)
        clipped = log_mu > MAX_LOG_RATE
        n_clipped += int(clipped[usable].sum())
        mu = np.exp(np.minimum(log_mu, MAX_LOG_RATE))
        counts[d, usable] = rng.poisson(mu[usable])
    if n_clipped:
        logger.warning(f"Clipped {n_clipped} forecast rates at ln mu = {MAX_LOG_RATE}")
    return counts


def prediction_interval(count_draws: np.ndarray, level: float = settings.credible_level,
                        method: IntervalMethod = IntervalMethod.HPD) -> Tuple[int, int]:
    """
    Integer prediction interval from predictive count draws. The HPD form is the
    narrowest [low, high] holding at least ceil(level * n) of the draws.
    """
    if not 0.0 < level < 1.0:
        raise ConfigurationError(f"Prediction level must lie in (0, 1), got {level}")
    x = np.sort(np.asarray(count_draws, float).ravel())
    x = x[np.isfinite(x)]
    n = len(x)
    if not n:
        raise StructuralError("No predictive draws")
    if n < MIN_PREDICTIVE_DRAWS:
        logger.warning(f"Only {n} predictive draws; interval endpoints will be noisy")
    if IntervalMethod(method) == IntervalMethod.EQUAL_TAIL:
        low, high = np.quantile(x, [(1.0 - level) / 2.0, (1.0 + level) / 2.0], method="inverted_cdf")
        return int(low), int(high)
    m = min(n, max(1, math.ceil(level * n - 1e-9)))
    widths = x[m - 1:] - x[:n - m + 1]
    i = int(np.argmin(widths))
    return int(x[i]), int(x[i + m - 1])


def evaluate_forecast(variant: ModelVariant, predictive: np.ndarray, dataset: Dataset, year: int,
                      level: float = settings.credible_level,
                      method: IntervalMethod = IntervalMethod.HPD) -> ForecastReport:
    """Score predictive draws against the observed counts of `year` in `dataset`"""
    _, _, observed_counts, observed = dataset.year_slice(year)
    rows, skipped = [], []
    for k, section_id in enumerate(dataset.graph.section_ids):
        column = predictive[:, k]
        if not observed[k] or not np.all(np.isfinite(column)):
            skipped.append(section_id)
            continue
        low, high = prediction_interval(column, level, method)
        y = int(observed_counts[k])
        rows.append(ForecastRow(
            section_id=section_id, observed=y, low=low, high=high,
            median=float(np.median(column)), inside=bool(low <= y <= high),
        ))
    report = ForecastReport(model=variant, year=year, level=level, rows=rows, skipped_sections=skipped)
    logger.info(
        f"Model {ModelVariant(variant).value}: {year} coverage {report.coverage:.3f} "
        f"({sum(r.inside for r in rows)}/{report.n_evaluated} sections)"
    )
    return report


def coverage(report: ForecastReport) -> float:
    if not report.n_evaluated:
        raise StructuralError("Coverage needs at least one evaluated section")
    return report.coverage


def rank_models(reports: Dict[str, ForecastReport], level: float) -> List[str]:
    """Closest coverage to the nominal level first; narrower intervals break ties"""
    return sorted(reports, key=lambda name: (abs(reports[name].coverage - level), reports[name].mean_width))


def run_lfo(specs: Sequence[ModelSpec], dataset: Dataset, holdout_year: int, config: SamplerConfig,
            level: float = settings.credible_level,
            method: IntervalMethod = IntervalMethod.HPD) -> LfoResult:
    """Fit every variant on the years before `holdout_year` and score its forecast"""
    if holdout_year not in set(int(y) for y in dataset.years):
        raise ConfigurationError(f"Holdout year {holdout_year} is not in the dataset")
    if holdout_year == int(dataset.years[0]):
        raise ConfigurationError("Holdout year must leave at least one year to fit on")
    training = dataset.through_year(holdout_year - 1)
    new_covariates, new_offsets, _, _ = dataset.year_slice(holdout_year)

    result = LfoResult(holdout_year=holdout_year, level=level)
    for i, spec in enumerate(specs):
        name = ModelVariant(spec.variant).value
        try:
            draws = run_inference(spec, training, config)
            rng = np.random.default_rng([config.seed, i])
            predictive = forecast_year(spec, draws, training, new_covariates, new_offsets, rng)
            result.reports[name] = evaluate_forecast(spec.variant, predictive, dataset, holdout_year, level, method)
        except ModelingError as e:
            logger.error(f"Model {name} failed during LFO: {e}")
            result.failures[name] = str(e)
    if len(specs) > 1 and result.reports:
        result.ranking = rank_models(result.reports, level)
        logger.info(f"LFO ranking: {', '.join(result.ranking)}")
    return result
