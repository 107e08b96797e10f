"""Request/response models for the HTTP service."""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class HealthResponse(BaseModel):
    status: Literal["ok"]
    version: str


class ScenarioValidateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    scenario_path: Optional[str] = None
    scenario: Optional[dict] = None


class ScenarioSummary(BaseModel):
    name: str
    seed: int
    duration_s: float
    capacity_mbps: float
    rtt_ms: float
    buffer_bytes: int
    n_flows: int
    n_controlled: int
    n_fixed_events: int
    has_random_events: bool
    config_hash: str


class ScenarioValidateResponse(BaseModel):
    valid: bool
    errors: list[str] = Field(default_factory=list)
    summary: Optional[ScenarioSummary] = None


class TrainRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    scenario_path: str
    out_dir: str
    seed: Optional[int] = None
    iters: Optional[int] = None
    agents: Optional[int] = None
    transport: Literal["mem", "tcp"] = "mem"
    hyper_overrides: Optional[dict[str, float]] = None


class EvalRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    scenario_path: str
    out_dir: str
    checkpoint_path: Optional[str] = None
    baseline: Optional[Literal["vanilla"]] = None
    seed: Optional[int] = None
    accuracy_threshold_ms: float = 5.0
    online: Optional[bool] = None


class JobCreated(BaseModel):
    job_id: str


class JobProgress(BaseModel):
    iteration: int = 0
    total: int = 0
    mean_reward: Optional[float] = None


class JobStatus(BaseModel):
    job_id: str
    kind: Literal["train", "eval"]
    status: Literal["queued", "running", "done", "error"]
    progress: Optional[JobProgress] = None
    error: Optional[str] = None
    error_kind: Optional[Literal["config", "runtime"]] = None
    result: Optional[dict[str, Any]] = None


class CompareRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    report_a: str
    report_b: str
    out_csv: Optional[str] = None


class CompareRow(BaseModel):
    metric: str
    a: float
    b: float
    delta_or_ratio: float


class CompareResponse(BaseModel):
    rows: list[CompareRow]
    text: str


class PlotRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    trace_path: str
    report_path: Optional[str] = None
    out_dir: str


class PlotResponse(BaseModel):
    files: list[str]
