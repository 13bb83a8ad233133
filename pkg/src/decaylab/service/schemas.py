"""Pydantic request/response models for the HTTP API.

Experiment configs travel as raw JSON objects and are validated by the core
parsers (which reject unknown keys); the schemas here shape the transport
envelope.
"""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field


class RunRequest(BaseModel):
    config: dict[str, Any] = Field(..., description="RunConfig document")
    out_dir: Optional[str] = Field(None, description="directory to persist record/snapshots into")


class ProbeRow(BaseModel):
    step: int
    train_loss: float
    reg_loss: float
    test_metric: float
    param_norm: float
    grad_norm: float
    noise_scale: float
    eff_lr: float
    trace_estimate: float
    trace_stderr: float
    flags: list[str]


class RunResponse(BaseModel):
    records: list[ProbeRow]
    flags: list[str]
    divergence_onset: int
    final_step: int
    terminal: dict[str, float]
    sigma2_estimate: Optional[float]
    out_dir: Optional[str]


class SweepRequest(BaseModel):
    config: dict[str, Any]
    grid: dict[str, list[Any]]
    workers: int = 1


class SweepResponse(BaseModel):
    rows: list[dict[str, Any]]
    csv: str


class FinetuneRequest(BaseModel):
    run_dir: str
    steps: Optional[int] = None
    lr: Optional[float] = None


class FinetuneRow(BaseModel):
    step: int
    train_loss: float
    test_metric: float
    trace_estimate: float
    trace_stderr: float


class FinetuneResponse(BaseModel):
    rows: list[FinetuneRow]


class QuadScheduleModel(BaseModel):
    kind: str = "constant"
    base_lr: float = 0.1
    warmup_steps: int = 0
    total_steps: int = 1
    floor_ratio: float = 1.0
    decay_step: int = 0
    post_decay_lr: float = 1e-4


class SaLabRequest(BaseModel):
    problem: dict[str, Any]
    schedule: dict[str, Any]
    steps: int
    replicas: int = 0  # 0 = exact only
    seed: int = 0
    equivalence: Optional[dict[str, float]] = Field(
        None, description='optional {"lr": ..., "lambda_wd": ...} to run the folding comparison'
    )


class SaLabResponse(BaseModel):
    csv: str
    bound_ok: bool
    equivalence: Optional[dict[str, Any]]


class PrecisionCase(BaseModel):
    name: str
    got: str
    expected: str
    ok: bool


class PrecisionCheckResponse(BaseModel):
    cases: list[PrecisionCase]
    bf16_patterns_total: int
    bf16_patterns_exact: int
    all_ok: bool


class PlotRequest(BaseModel):
    kind: str
    source: str = Field(..., description="path to record.jsonl, sweep CSV, or risk-curve CSV")
    out_path: Optional[str] = None


class ErrorResponse(BaseModel):
    error: str
