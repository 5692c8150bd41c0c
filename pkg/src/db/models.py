import math
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.config import settings


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BpsConfig(_Strict):
    lambda_ref: float = Field(..., ge=0)          # 0 disables refreshment (speed-conservation checks)
    alpha: float = Field(0.0, ge=0, lt=1)
    horizon: float = Field(math.inf, gt=0)
    max_events: Optional[int] = Field(None, gt=0)
    thinning_slice: Optional[float] = Field(None, gt=0)  # None: 1 / (|v| sqrt(M) + eps) per window

    @model_validator(mode="after")
    def _bounded_run(self):
        if math.isinf(self.horizon) and self.max_events is None:
            raise ValueError("either a finite horizon or max_events is required")
        return self


class FlowSpec(_Strict):
    kind: Literal["exact_isotropic", "exact_gaussian", "leapfrog", "frozen"]  # frozen: no motion between refreshments
    step: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _step_for_leapfrog(self):
        if self.kind == "leapfrog" and self.step is None:
            raise ValueError("leapfrog flow requires a step h > 0")
        return self


class RhmcConfig(_Strict):
    lambda_ref: float = Field(..., ge=0)
    alpha: float = Field(0.0, ge=0, lt=1)
    horizon: float = Field(math.inf, gt=0)
    max_events: Optional[int] = Field(None, gt=0)
    flow: FlowSpec

    @model_validator(mode="after")
    def _bounded_run(self):
        if math.isinf(self.horizon) and self.max_events is None:
            raise ValueError("either a finite horizon or max_events is required")
        return self


class CertificateMargins(_Strict):
    """Named smallest-eigenvalue (or normalised slack) margins of every checked condition."""
    values: Dict[str, float] = Field(default_factory=dict)

    @property
    def minimum(self) -> float:
        return min(self.values.values()) if self.values else math.inf


class TuningCertificate(_Strict):
    kind: Literal["wasserstein", "gaussian", "hypocoercive"]
    m: float = Field(..., gt=0)
    M: float = Field(..., gt=0)
    alpha: float = Field(..., ge=0, lt=1)
    lambda_ref: float = Field(..., gt=0)
    mu: float = Field(..., gt=0)
    a: float = Field(..., gt=0)
    b: float
    c: float = Field(..., gt=0)
    C: float = Field(..., gt=1)
    certified: bool
    min_margin: float
    margins: CertificateMargins = Field(default_factory=CertificateMargins)
    tolerance: float = 1e-10
    a_matrix_source: Optional[Literal["explicit", "searched"]] = None

    @model_validator(mode="after")
    def _metric_conditions(self):
        if self.M < self.m:
            raise ValueError("M must be >= m")
        if not self.b ** 2 < self.a * self.c:
            raise ValueError("b^2 < ac is required for d_A to be a metric")
        if self.certified and self.min_margin < -self.tolerance:
            raise ValueError("certified certificate with negative margin")
        return self


class EssReport(_Strict):
    function_id: str
    d: int = Field(..., ge=1)
    lambda_ref_policy: Literal["const1", "sqrtd"]
    replicate: int = 0
    n_events: int = Field(..., ge=0)
    n_samples: int = Field(..., ge=1)
    ess: float = Field(..., gt=0)
    events_per_ess: float
    stderr: float = 0.0

    @model_validator(mode="after")
    def _ess_bounded(self):
        if self.ess > self.n_samples * (1 + 1e-12):
            raise ValueError("ess cannot exceed the number of samples")
        return self


class ScalingFit(_Strict):
    function_id: str
    policy: Literal["const1", "sqrtd"]
    dims: List[int]
    values: List[float]
    slope: float
    slope_ci: Tuple[float, float]

    @model_validator(mode="after")
    def _aligned(self):
        if len(self.dims) != len(self.values):
            raise ValueError("dims and values must have equal length")
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            raise ValueError("dims must be strictly increasing")
        return self


class ExperimentConfig(_Strict):
    """Fields shared by every CLI command; command configs extend it."""
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED)
    stream: int = Field(0, ge=0)
    out: Optional[str] = None
    replicates: int = Field(1, ge=1)
    threads: Optional[int] = Field(None, ge=1)


class SampleConfig(ExperimentConfig):
    process: Literal["bps", "rhmc"]
    target: str = "gaussian"
    d: int = Field(..., ge=1)
    lambda_ref: float = Field(1.0, ge=0)
    alpha: float = Field(0.0, ge=0, lt=1)
    horizon: Optional[float] = Field(None, gt=0)
    events: Optional[int] = Field(None, gt=0)
    step: float = Field(1e-3, gt=0)

    @model_validator(mode="after")
    def _run_length(self):
        if self.horizon is None and self.events is None:
            raise ValueError("one of horizon or events is required")
        return self


class CertifyConfig(ExperimentConfig):
    m: float = Field(1.0, gt=0)
    M: Optional[float] = Field(None, gt=0)      # defaults to m
    alpha: float = Field(0.0, ge=0, lt=1)
    gaussian: bool = False
    grid: bool = False
    grid_ratios: int = Field(100, ge=2)
    grid_alphas: int = Field(20, ge=2)

    @model_validator(mode="after")
    def _ordered(self):
        if self.M is None:
            self.M = self.m
        if self.M < self.m:
            raise ValueError("M must be >= m")
        return self


class CoupleConfig(ExperimentConfig):
    replicates: int = Field(1000, ge=1)
    target: str = "gaussian"
    d: int = Field(2, ge=1)
    alpha: float = Field(0.0, ge=0, lt=1)
    horizon: float = Field(10.0, gt=0)
    grid_dt: float = Field(0.1, gt=0)
    gaussian: bool = True
    identical: bool = False
    step: float = Field(1e-3, gt=0)


class ScalingConfig(ExperimentConfig):
    replicates: int = Field(20, ge=1)
    f: str = "f1"
    dims: List[int] = Field(default_factory=lambda: [10, 100, 1000])
    policy: Literal["const1", "sqrtd"] = "const1"
    events: int = Field(100_000, ge=1)
    dt: Optional[float] = Field(None, gt=0)


class WeakLimitConfig(ExperimentConfig):
    replicates: int = Field(2000, ge=2)
    b: float = Field(2.0, ge=2)
    dims: List[int] = Field(default_factory=lambda: [10, 100, 1000])
    T: float = Field(5.0, gt=0)
    alpha: float = Field(0.0, ge=0, lt=1)
    lambda_ref: float = Field(1.0, gt=0)
    step: float = Field(1e-3, gt=0)               # leapfrog step for b = 4
    permutations: int = Field(0, ge=0)
    lag: float = Field(0.25, gt=0)               # window of the flow residual, lag <= T


class EssBenchConfig(ExperimentConfig):
    d: int = Field(10, ge=2)
    policy: Literal["const1", "sqrtd"] = "const1"
    events: int = Field(100_000, ge=1)
    dt: Optional[float] = Field(None, gt=0)
