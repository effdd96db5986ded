from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Optional, List, Dict, Any, Tuple
from enum import Enum
from pathlib import Path

from app.core.config import settings
from app.core.exceptions import ConfigurationError


class ModelVariant(str, Enum):
    M1 = "1"
    M2 = "2"
    M3A = "3a"
    M3B = "3b"
    M4 = "4"

    @classmethod
    def parse(cls, value: str) -> "ModelVariant":
        cleaned = str(value).strip().lower()
        if cleaned.startswith("m"):
            cleaned = cleaned[1:]
        try:
            return cls(cleaned)
        except ValueError:
            raise ConfigurationError(f"Unknown model variant '{value}' (expected one of 1, 2, 3a, 3b, 4)")


class Parameterization(str, Enum):
    CENTERED = "centered"
    NONCENTERED = "noncentered"


class ChainExecutor(str, Enum):
    PROCESS = "process"
    THREAD = "thread"
    SERIAL = "serial"


class Preprocessing(str, Enum):
    NONE = "none"
    CENTER = "center"
    STANDARDIZE = "standardize"


class IntervalMethod(str, Enum):
    HPD = "hpd"
    EQUAL_TAIL = "equal_tail"


class PriorConfig(BaseModel):
    beta_variance: float = Field(100.0, gt=0, description="Variance of the N(0, v) prior on every regression coefficient")
    inv_gamma_shape: float = Field(1.0, gt=0, description="Shape of the inverse-Gamma prior on variance parameters")
    inv_gamma_scale: float = Field(1.0, gt=0, description="Scale of the inverse-Gamma prior on variance parameters")
    r_variance: float = Field(0.25, gt=0, description="Variance of the N(0, v) prior on free tributary offsets r_g")


class ModelSpec(BaseModel):
    variant: ModelVariant = Field(..., description="Model variant: 1, 2, 3a, 3b or 4")
    priors: PriorConfig = Field(default_factory=PriorConfig, description="Prior hyperparameters")
    parameterization: Parameterization = Field(
        Parameterization.NONCENTERED, description="Centered or non-centered random effects on the sampling scale"
    )
    rate_multiplier: float = Field(
        1.0, gt=0, description="Multiplies the Poisson rate inside the likelihood only (negative controls for calibration)"
    )

    model_config = {"frozen": True}


class SamplerConfig(BaseModel):
    n_chains: int = Field(settings.n_chains, ge=1, description="Number of independent chains")
    warmup_iters: int = Field(settings.warmup_iters, gt=0, description="Warm-up iterations per chain (discarded)")
    sampling_iters: int = Field(settings.sampling_iters, gt=0, description="Retained iterations per chain")
    seed: int = Field(20240101, ge=0, description="Master seed; chain seeds are spawned from it")
    target_accept: float = Field(settings.target_accept, gt=0, lt=1, description="Dual-averaging acceptance target")
    max_tree_depth: int = Field(settings.max_tree_depth, ge=1, le=15, description="Maximum trajectory doubling depth")
    init_jitter: float = Field(0.5, ge=0, description="Half-width of uniform jitter around prior medians at initialization")
    init_retries: int = Field(100, ge=1, description="Attempts to find a finite initial log density")
    adapt_init_buffer: int = Field(75, ge=1, description="Initial fast adaptation window")
    adapt_term_buffer: int = Field(50, ge=1, description="Terminal fast adaptation window")
    adapt_base_window: int = Field(25, ge=1, description="First slow (metric) adaptation window")
    executor: ChainExecutor = Field(ChainExecutor(settings.chain_executor), description="How chains are scheduled")
    max_workers: Optional[int] = Field(settings.max_workers, description="Worker count for process/thread executors")

    @classmethod
    def full(cls, **overrides) -> "SamplerConfig":
        """Four chains of 15,000 warm-up and 15,000 sampling iterations"""
        values = dict(n_chains=4, warmup_iters=15000, sampling_iters=15000)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def desk(cls, **overrides) -> "SamplerConfig":
        """Four chains of 1,500 warm-up and 1,500 sampling iterations"""
        values = dict(n_chains=4, warmup_iters=1500, sampling_iters=1500)
        values.update(overrides)
        return cls(**values)


class SimConfig(BaseModel):
    variant: ModelVariant = Field(..., description="Generating model variant")
    group_sizes: List[int] = Field(default_factory=lambda: [14, 13, 10], description="Sections per tributary chain")
    group_names: List[str] = Field(
        default_factory=lambda: ["James", "Rappahannock", "York"], description="Tributary labels, baseline first"
    )
    n_years: int = Field(21, ge=1, description="Number of consecutive years")
    first_year: int = Field(1996, description="Calendar year of the first simulated year")
    true_parameters: Optional[Dict[str, Any]] = Field(
        None, description="Fixed truth (beta list and hyperparameters); random effects are simulated when absent. None draws everything from the prior"
    )
    priors: PriorConfig = Field(default_factory=PriorConfig, description="Prior used when drawing the truth")
    secchi_range: Tuple[float, float] = Field((0.26, 2.34), description="Secchi depth range in metres")
    rsa_range: Tuple[float, float] = Field((0.0, 0.17), description="Relative seagrass area range")
    rma_range: Tuple[float, float] = Field((0.01, 0.48), description="Relative marsh area range")
    predator_range: Tuple[float, float] = Field((0.0, 2838.0), description="Predator count range before log1p")
    tow_distance_range: Tuple[float, float] = Field((1000.0, 10000.0), description="Summed tow distance range in metres")
    management_start_year: int = Field(settings.management_start_year, description="First year under the new management")
    missing_cells: List[Tuple[int, int]] = Field(
        default_factory=list, description="(section index, year index) cells left unsampled"
    )
    seed: int = Field(0, ge=0, description="Simulation seed")

    @model_validator(mode="after")
    def check_groups(self):
        if len(self.group_sizes) != len(self.group_names):
            raise ValueError("group_sizes and group_names must have the same length")
        if any(size < 2 for size in self.group_sizes):
            raise ValueError("every tributary chain needs at least two sections")
        for low, high in (self.secchi_range, self.rsa_range, self.rma_range, self.tow_distance_range):
            if low > high:
                raise ValueError("covariate ranges must be ordered (low, high)")
        if not (0 <= self.rsa_range[0] and self.rsa_range[1] <= 1 and 0 <= self.rma_range[0] and self.rma_range[1] <= 1):
            raise ValueError("relative area ranges must lie in [0, 1]")
        if self.secchi_range[0] <= 0 or self.tow_distance_range[0] <= 0:
            raise ValueError("Secchi depth and tow distance must be positive")
        return self


class RunConfig(BaseModel):
    model: ModelVariant = Field(ModelVariant.M4, description="Variant fitted by `fit`")
    models: List[ModelVariant] = Field(
        default_factory=lambda: list(ModelVariant), description="Variants compared by `cv`"
    )
    records_path: Optional[str] = Field(None, description="Section-year records CSV")
    adjacency_path: Optional[str] = Field(None, description="Edge list, one `id_a,id_b` pair per line")
    sections_path: Optional[str] = Field(None, description="Section metadata CSV (section_id, tributary)")
    sampler: SamplerConfig = Field(default_factory=SamplerConfig.desk, description="Sampler settings")
    priors: PriorConfig = Field(default_factory=PriorConfig, description="Prior hyperparameters")
    parameterization: Parameterization = Field(Parameterization.NONCENTERED, description="Random-effect parameterization")
    preprocess: Preprocessing = Field(Preprocessing.NONE, description="Covariate preprocessing")
    last_year: Optional[int] = Field(None, description="Fit on years up to and including this one")
    holdout_year: Optional[int] = Field(None, description="Year withheld for leave-future-out CV")
    level: float = Field(settings.credible_level, gt=0, lt=1, description="Credible / prediction level")
    interval_method: IntervalMethod = Field(IntervalMethod.HPD, description="Prediction interval convention")
    output_dir: str = Field(settings.output_dir, description="Directory receiving all outputs")

    def model_spec(self, variant: Optional[ModelVariant] = None) -> ModelSpec:
        return ModelSpec(
            variant=variant or self.model,
            priors=self.priors,
            parameterization=self.parameterization,
        )

    def check_paths(self) -> None:
        missing = []
        for name in ("records_path", "adjacency_path", "sections_path"):
            value = getattr(self, name)
            if value is None:
                missing.append(f"{name} not set")
            elif not Path(value).is_file():
                missing.append(f"{name} does not exist: {value}")
        if missing:
            raise ConfigurationError("Invalid run configuration: " + "; ".join(missing))


class SummaryRow(BaseModel):
    parameter: str = Field(..., description="Parameter name")
    mean: float = Field(..., description="Posterior mean")
    sd: float = Field(..., description="Posterior standard deviation")
    q10: float = Field(..., description="10% quantile")
    median: float = Field(..., description="Posterior median")
    q90: float = Field(..., description="90% quantile")
    hpdi_low: float = Field(..., description="Lower HPDI bound")
    hpdi_high: float = Field(..., description="Upper HPDI bound")
    excludes_zero: bool = Field(..., description="Whether 0 lies outside the HPDI")
    rhat: Optional[float] = Field(None, description="Split R-hat (None with a single chain)")
    ess_bulk: Optional[float] = Field(None, description="Multi-chain effective sample size")


class SummaryTable(BaseModel):
    level: float = Field(..., description="Credible level of the HPDI")
    rows: List[SummaryRow] = Field(..., description="One row per parameter")

    def row(self, parameter: str) -> SummaryRow:
        for row in self.rows:
            if row.parameter == parameter:
                return row
        raise KeyError(parameter)


class EffectsRow(BaseModel):
    conditioning_percentile: float = Field(..., description="Percentile of the conditioning covariate")
    conditioning_value: float = Field(..., description="Value of the conditioning covariate")
    x: float = Field(..., description="Value of the varying covariate")
    median: float = Field(..., description="Pointwise posterior median of exp(mu_cond)")
    low: float = Field(..., description="Lower pointwise band")
    high: float = Field(..., description="Upper pointwise band")


class EffectsTable(BaseModel):
    vary: str = Field(..., description="Varying covariate")
    conditioning: str = Field(..., description="Covariate held at percentiles")
    level: float = Field(..., description="Band level")
    include_intercept: bool = Field(False, description="Whether beta_0 entered mu_cond")
    rows: List[EffectsRow] = Field(..., description="Grid rows")


class AggregateRow(BaseModel):
    section_id: str = Field(..., description="Section identifier")
    group: str = Field(..., description="Tributary")
    n_years: int = Field(..., description="Observed years averaged")
    observed_mean: float = Field(..., description="Inter-annual mean observed count")
    observed_standardized: Optional[float] = Field(None, description="Within-tributary standardized observed mean")
    median: float = Field(..., description="Pseudo-posterior median of the aggregated expected count")
    hpdi_low: float = Field(..., description="Lower HPDI bound")
    hpdi_high: float = Field(..., description="Upper HPDI bound")
    standardized_median: Optional[float] = Field(None, description="Within-tributary standardized median")


class AggregateTable(BaseModel):
    first_year: int = Field(..., description="First calendar year of the window")
    last_year: int = Field(..., description="Last calendar year of the window")
    level: float = Field(..., description="HPDI level")
    rows: List[AggregateRow] = Field(..., description="One row per retained section")
    excluded_sections: List[str] = Field(default_factory=list, description="Sections without observed years in the window")


class ForecastRow(BaseModel):
    section_id: str = Field(..., description="Section identifier")
    observed: int = Field(..., description="Withheld observed count")
    low: int = Field(..., description="Lower prediction bound")
    high: int = Field(..., description="Upper prediction bound")
    median: float = Field(..., description="Predictive median")
    inside: bool = Field(..., description="Whether the observed count lies in [low, high]")

    @property
    def width(self) -> int:
        return self.high - self.low


class ForecastReport(BaseModel):
    model: ModelVariant = Field(..., description="Forecasting variant")
    year: int = Field(..., description="Forecast calendar year")
    level: float = Field(..., description="Nominal prediction level")
    rows: List[ForecastRow] = Field(..., description="One row per evaluated section")
    skipped_sections: List[str] = Field(default_factory=list, description="Sections without usable holdout data")

    @property
    def n_evaluated(self) -> int:
        return len(self.rows)

    @property
    def coverage(self) -> float:
        if not self.rows:
            return float("nan")
        return sum(row.inside for row in self.rows) / len(self.rows)

    @property
    def mean_width(self) -> float:
        if not self.rows:
            return float("nan")
        return sum(row.width for row in self.rows) / len(self.rows)


class LfoResult(BaseModel):
    holdout_year: int = Field(..., description="Withheld year")
    level: float = Field(..., description="Nominal prediction level")
    reports: Dict[str, ForecastReport] = Field(default_factory=dict, description="Report per fitted variant")
    failures: Dict[str, str] = Field(default_factory=dict, description="Variant -> failure message")
    ranking: Optional[List[str]] = Field(None, description="Variants ordered by |coverage - level| then sharpness")


class RhatRow(BaseModel):
    parameter: str
    rhat: float
    degenerate: bool = False


class SbcRow(BaseModel):
    parameter: str = Field(..., description="Parameter or parameter group")
    n_ranks: int = Field(..., description="Ranks contributing to the test")
    chi2: Optional[float] = Field(None, description="Chi-square statistic of rank uniformity")
    p_value: Optional[float] = Field(None, description="Uniformity p-value (None when untestable)")


class SbcReport(BaseModel):
    variant: ModelVariant
    n_reps: int = Field(..., description="Requested replications")
    n_used: int = Field(..., description="Replications entering the rank tables")
    n_posterior_draws: int = Field(..., description="Thinned draws per replication (ranks lie in 0..L)")
    n_bins: int = Field(..., description="Histogram bins of the uniformity test")
    excluded_nonconverged: int = Field(0, description="Replications excluded for R-hat >= threshold")
    redrawn_overflow: int = Field(0, description="Prior draws redrawn because of the overflow guard")
    rows: List[SbcRow] = Field(default_factory=list)
    ranks: Dict[str, List[int]] = Field(default_factory=dict, description="Rank of the truth per parameter and replication")


class RunManifest(BaseModel):
    command: str
    app_version: str = settings.app_version
    library_versions: Dict[str, str] = Field(default_factory=dict)
    config: Dict[str, Any] = Field(default_factory=dict)
    config_hash: str = ""
    inputs: Dict[str, str] = Field(default_factory=dict, description="Input path -> sha256")
    chain_seeds: List[int] = Field(default_factory=list)
    layout: Dict[str, Any] = Field(default_factory=dict, description="Variant and dimensions needed to re-read chain files")
    parameter_names: List[str] = Field(default_factory=list)
    diagnostics: Dict[str, Any] = Field(default_factory=dict)
    preprocessing: Dict[str, Any] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)


class ErrorResponse(BaseModel):
    error: str = Field(..., description="Error message")
    detail: Optional[str] = Field(None, description="Detailed error information")
    exit_code: int = Field(..., description="Process exit code")
