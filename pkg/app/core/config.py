from pydantic_settings import BaseSettings
from typing import Optional


class Settings(BaseSettings):
    # Application
    app_name: str = "Spatiotemporal CAR Count Models"
    app_version: str = "0.1.0"
    debug: bool = False
    log_level: str = "INFO"

    # Sampler defaults (four chains of 15,000 warm-up + 15,000 sampling iterations)
    n_chains: int = 4
    warmup_iters: int = 15000
    sampling_iters: int = 15000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    chain_executor: str = "process"
    max_workers: Optional[int] = None

    # Data conventions
    baseline_group: str = "James"
    management_start_year: int = 2009

    # Reporting
    credible_level: float = 0.80
    output_dir: str = "runs"
    csv_float_format: str = "%.17g"

    class Config:
        env_file = ".env"
        env_file_encoding = 'utf-8'
        env_prefix = "STCAR_"
        case_sensitive = False


# Global settings instance
settings = Settings()
