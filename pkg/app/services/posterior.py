"""
Posterior summaries: HPDIs, summary tables, coefficient comparisons, conditional
effects and the pseudo-posterior of temporally aggregated expected counts.
"""
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.config import settings
from app.core.exceptions import ConfigurationError, InsufficientDrawsError, StructuralError
from app.models.domain import Dataset, PosteriorDraws
from app.models.schemas import (
    AggregateRow,
    AggregateTable,
    EffectsRow,
    EffectsTable,
    SummaryRow,
    SummaryTable,
)
from app.services.diagnostics import effective_sample_size, split_rhat_array
from app.services.model_core import random_effect_grid


logger = logging.getLogger(__name__)

MIN_HPDI_DRAWS = 50
RANDOM_EFFECT_PREFIXES = ("theta[", "phi[", "eta[")
EFFECT_COVARIATES = ("turbidity", "marsh")
DEFAULT_PERCENTILES = (1, 20, 40, 60, 80, 99)


def _check_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise ConfigurationError(f"Credible level must lie in (0, 1), got {level}")


def _n_inside(level: float, n: int) -> int:
    # Guards against 0.8 * 100 evaluating to 80.00000000000001
    return min(n, max(1, math.ceil(level * n - 1e-9)))


def hpdi(draws: np.ndarray, level: float = 0.80) -> Tuple[float, float]:
    """Shortest interval spanning ceil(level * n) of the sorted draws"""
    _check_level(level)
    x = np.sort(np.asarray(draws, float).ravel())
    n = len(x)
    if n < MIN_HPDI_DRAWS:
        raise InsufficientDrawsError(f"HPDI needs at least {MIN_HPDI_DRAWS} draws, got {n}")
    m = _n_inside(level, n)
    widths = x[m - 1:] - x[:n - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])


def equal_tail(draws: np.ndarray, level: float = 0.80) -> Tuple[float, float]:
    _check_level(level)
    x = np.asarray(draws, float).ravel()
    if not len(x):
        raise InsufficientDrawsError("No draws to summarize")
    low, high = np.quantile(x, [(1.0 - level) / 2.0, (1.0 + level) / 2.0])
    return float(low), float(high)


def _band(values: np.ndarray, level: float) -> Tuple[float, float]:
    if len(values) < MIN_HPDI_DRAWS:
        return equal_tail(values, level)
    return hpdi(values, level)


def default_summary_parameters(draws: PosteriorDraws) -> List[str]:
    return [name for name in draws.names if not name.startswith(RANDOM_EFFECT_PREFIXES)]


def summarize(draws: PosteriorDraws, parameters: Optional[Sequence[str]] = None,
              level: float = settings.credible_level) -> SummaryTable:
    """
    One row per parameter: mean, sd, 10/50/90% quantiles, HPDI and its excludes-zero
    flag, plus split R-hat and bulk ESS when at least two chains are available.
    Random-effect fields are left out unless named explicitly.
    """
    names = list(parameters) if parameters is not None else default_summary_parameters(draws)
    with_diagnostics = draws.n_chains >= 2 and draws.n_draws >= 4
    rows = []
    for name in names:
        matrix = draws.chain_matrix(name)
        pooled = matrix.ravel()
        q10, median, q90 = np.quantile(pooled, [0.10, 0.50, 0.90])
        low, high = hpdi(pooled, level)
        rows.append(SummaryRow(
            parameter=name,
            mean=float(pooled.mean()),
            sd=float(pooled.std(ddof=1)) if len(pooled) > 1 else 0.0,
            q10=float(q10),
            median=float(median),
            q90=float(q90),
            hpdi_low=low,
            hpdi_high=high,
            excludes_zero=not (low <= 0.0 <= high),
            rhat=split_rhat_array(matrix) if with_diagnostics else None,
            ess_bulk=effective_sample_size(matrix) if with_diagnostics else None,
        ))
    return SummaryTable(level=level, rows=rows)


def prob_greater(draws_a: np.ndarray, draws_b: np.ndarray) -> float:
    """P(a > b) over draw-aligned pairs; ties count one half"""
    a = np.asarray(draws_a, float).ravel()
    b = np.asarray(draws_b, float).ravel()
    if a.shape != b.shape:
        raise StructuralError(f"Draw vectors must be aligned: {len(a)} vs {len(b)}")
    if not len(a):
        raise InsufficientDrawsError("No draws to compare")
    return float(np.mean((a > b) + 0.5 * (a == b)))


def parse_comparison(expression: str) -> Tuple[str, str]:
    """'beta_york>beta_james' -> ('beta_york', 'beta_james')"""
    parts = [part.strip() for part in expression.split(">")]
    if len(parts) != 2 or not all(parts):
        raise ConfigurationError(f"Comparison must look like 'a>b', got '{expression}'")
    return parts[0], parts[1]


def compare_coefficients(draws: PosteriorDraws, expressions: Sequence[str]) -> pd.DataFrame:
    records = []
    for expression in expressions:
        a, b = parse_comparison(expression)
        records.append({"comparison": f"{a}>{b}", "probability": prob_greater(draws.pooled(a), draws.pooled(b))})
    return pd.DataFrame(records, columns=["comparison", "probability"])


def compare_models(draws_by_variant: Dict[str, PosteriorDraws],
                   level: float = settings.credible_level) -> pd.DataFrame:
    """Medians and HPDIs of the fixed effects shared by all fitted variants"""
    if not draws_by_variant:
        return pd.DataFrame(columns=["parameter", "model", "median", "hpdi_low", "hpdi_high"])
    shared = None
    for draws in draws_by_variant.values():
        betas = [name for name in draws.names if name.startswith("beta_")]
        shared = betas if shared is None else [name for name in shared if name in betas]
    records = []
    for name in shared:
        for variant, draws in draws_by_variant.items():
            pooled = draws.pooled(name)
            low, high = hpdi(pooled, level)
            records.append({
                "parameter": name, "model": str(variant),
                "median": float(np.median(pooled)), "hpdi_low": low, "hpdi_high": high,
            })
    return pd.DataFrame(records)


def _coefficient_draws(draws: PosteriorDraws, covariate: str) -> Optional[np.ndarray]:
    name = f"beta_{covariate}"
    return draws.pooled(name) if name in draws.names else None


def conditional_effects(draws: PosteriorDraws, dataset: Dataset, vary: str,
                        percentiles: Sequence[float] = DEFAULT_PERCENTILES,
                        grid: Optional[Sequence[float]] = None,
                        offset: float = float(np.log(1000.0)),
                        include_intercept: bool = False,
                        level: float = settings.credible_level,
                        n_grid: int = 50) -> EffectsTable:
    """
    exp(mu_cond) over a grid of the varying covariate, with the other of turbidity /
    marsh held at empirical percentiles of the observed cells:

        mu_cond = x_T b_T + x_M b_M + x_M x_T b_MxT + b_Management + offset

    Every other continuous covariate sits at 0 and the tributary at the baseline.
    """
    if vary not in EFFECT_COVARIATES:
        raise ConfigurationError(f"vary must be one of {', '.join(EFFECT_COVARIATES)}, got '{vary}'")
    conditioning = "marsh" if vary == "turbidity" else "turbidity"
    for covariate in (vary, conditioning):
        if covariate not in dataset.covariate_names or f"beta_{covariate}" not in draws.names:
            raise StructuralError(f"Covariate '{covariate}' is not part of this model")

    observed = dataset.observed
    vary_values = dataset.covariates[..., dataset.covariate_index(vary)][observed]
    cond_values = dataset.covariates[..., dataset.covariate_index(conditioning)][observed]
    if grid is None:
        grid = np.linspace(vary_values.min(), vary_values.max(), n_grid)
    grid = np.asarray(grid, float)
    cond_levels = np.percentile(cond_values, list(percentiles))

    b_vary = _coefficient_draws(draws, vary)
    b_cond = _coefficient_draws(draws, conditioning)
    zeros = np.zeros_like(b_vary)
    b_inter = _coefficient_draws(draws, "marsh_x_turbidity")
    b_inter = zeros if b_inter is None else b_inter
    b_mgmt = _coefficient_draws(draws, "management")
    base = offset + (zeros if b_mgmt is None else b_mgmt)
    if include_intercept:
        base = base + draws.pooled("beta_intercept")

    rows = []
    for pct, c in zip(percentiles, cond_levels):
        # draws x grid
        mu = base[:, None] + grid[None, :] * b_vary[:, None] + c * b_cond[:, None] + c * grid[None, :] * b_inter[:, None]
        values = np.exp(mu)
        medians = np.median(values, axis=0)
        for j, x in enumerate(grid):
            low, high = _band(values[:, j], level)
            rows.append(EffectsRow(
                conditioning_percentile=float(pct), conditioning_value=float(c),
                x=float(x), median=float(medians[j]), low=low, high=high,
            ))
    logger.info(f"Conditional effects of {vary}: {len(grid)} grid points x {len(cond_levels)} percentiles")
    return EffectsTable(vary=vary, conditioning=conditioning, level=level,
                        include_intercept=include_intercept, rows=rows)


def _standardize(values: np.ndarray, groups: np.ndarray) -> List[Optional[float]]:
    out: List[Optional[float]] = [None] * len(values)
    for g in np.unique(groups):
        members = np.flatnonzero(groups == g)
        if len(members) < 2:
            continue
        sd = values[members].std(ddof=1)
        if not sd > 0:
            continue
        mean = values[members].mean()
        for i in members:
            out[i] = float((values[i] - mean) / sd)
    return out


def aggregate_pseudo_posterior(draws: PosteriorDraws, dataset: Dataset, year_window: Tuple[int, int],
                               level: float = settings.credible_level) -> AggregateTable:
    """
    Pseudo-posterior of each section's inter-annual expected count.

    Covariates, log offsets and each draw's random effect are averaged over the
    section's observed years in the window (on the log scale) before
    exponentiating. Sections with no observed year in the window are excluded.
    """
    first, last = int(year_window[0]), int(year_window[1])
    if last < first:
        raise ConfigurationError(f"Empty year window {first}..{last}")
    t_start, t_stop = dataset.year_index(first), dataset.year_index(last) + 1
    observed = dataset.observed[:, t_start:t_stop]
    counts = dataset.counts[:, t_start:t_stop]
    covariates = dataset.covariates[:, t_start:t_stop, :]
    offsets = dataset.log_offset[:, t_start:t_stop]
    graph = dataset.graph

    n_years = observed.sum(axis=1)
    kept = np.flatnonzero(n_years > 0)
    excluded = [graph.section_ids[k] for k in np.flatnonzero(n_years == 0)]
    if excluded:
        logger.warning(f"No observed years in {first}..{last} for sections: {', '.join(excluded)}")
    if not len(kept):
        return AggregateTable(first_year=first, last_year=last, level=level, rows=[], excluded_sections=excluded)

    weights = observed[kept] / n_years[kept, None]
    x_bar = np.einsum("kt,ktp->kp", weights, np.nan_to_num(covariates[kept]))
    o_bar = (weights * np.nan_to_num(offsets[kept])).sum(axis=1)
    y_bar = (weights * np.nan_to_num(counts[kept])).sum(axis=1)

    n_total = draws.n_total
    mu_bar = np.empty((n_total, len(kept)))
    for d, params in enumerate(draws.iter_parameters()):
        beta = np.asarray(params.beta, float)
        R = random_effect_grid(params, dataset.n_sections, dataset.n_years, graph.group_index)
        r_bar = (weights * R[kept, t_start:t_stop]).sum(axis=1)
        mu_bar[d] = np.exp(beta[0] + x_bar @ beta[1:] + o_bar + r_bar)

    medians = np.median(mu_bar, axis=0)
    groups = graph.group_index[kept]
    standardized = _standardize(medians, groups)
    observed_standardized = _standardize(y_bar, groups)
    rows = []
    for i, k in enumerate(kept):
        low, high = _band(mu_bar[:, i], level)
        rows.append(AggregateRow(
            section_id=graph.section_ids[k],
            group=graph.group_names[graph.group_index[k]],
            n_years=int(n_years[k]),
            observed_mean=float(y_bar[i]),
            observed_standardized=observed_standardized[i],
            median=float(medians[i]),
            hpdi_low=low,
            hpdi_high=high,
            standardized_median=standardized[i],
        ))
    logger.info(f"Aggregated {len(kept)} sections over {first}..{last} from {n_total} draws")
    return AggregateTable(first_year=first, last_year=last, level=level, rows=rows, excluded_sections=excluded)
