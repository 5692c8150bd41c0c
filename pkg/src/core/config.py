import os
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    THREADS: Optional[int] = None
    DEFAULT_SEED: int = 2019
    LOG_LEVEL: str = "INFO"
    ESS_DT: float = 0.25
    PSD_TOL: float = 1e-10
    THINNING_EPS: float = 1e-12
    QUADRATURE_TAIL_MASS: float = 1e-12
    INVERSE_CDF_CELLS: int = 8192
    BOOTSTRAP_RESAMPLES: int = 200
    OUTPUT_DIR: str = "."

    model_config = SettingsConfigDict(env_prefix="PDMP_LAB_", env_file=".env", extra="ignore")


settings = Settings()


def resolve_threads(flag: Optional[int] = None) -> int:
    """
    Worker pool size: explicit flag, then PDMP_LAB_THREADS, then available parallelism.
    """
    if flag is not None and flag > 0:
        return flag
    if settings.THREADS is not None and settings.THREADS > 0:
        return settings.THREADS
    return os.cpu_count() or 1
