"""Request/response bodies for the HTTP surface.

Every request is self-contained: configuration travels as config text plus
dotted overrides, artifacts are referenced by filesystem path. Responses
echo enough provenance (paths, resolved values) for a client to chain
calls without holding server state.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class ConfigBody(BaseModel):
    config_text: str = ""
    overrides: list[str] = Field(default_factory=list)


class TrainRequest(ConfigBody):
    run_name: str | None = None


class EvalRecordModel(BaseModel):
    step: int
    loss: float
    loss_lm: float
    loss_diff: float
    ter_teacher_forced: float
    ter_free_running: float
    lr: float


class TrainResponse(BaseModel):
    run_dir: str
    best_checkpoint: str
    final_checkpoint: str
    log_path: str
    status: str
    stage: int
    steps_run: int
    best_step: int
    best_metric: float
    evals: list[EvalRecordModel]


class GenerateRequest(BaseModel):
    checkpoint: str
    text: list[int]
    speaker_seed: int | None = None
    speaker: list[float] | None = None
    out_path: str | None = None
    temperature: float | None = None
    steps: int | None = None
    guidance: float | None = None
    max_frames: int | None = None
    force_frames: int | None = None  # exact duration instead of <eos> stopping
    seed: int | None = None


class GenerateResponse(BaseModel):
    frameseq_path: str
    n_frames: int
    stop_reason: str
    decisions: list[str]
    sequence: list[str]
    decoded: list[int]


class EvalRequest(BaseModel):
    checkpoint: str
    split: str = "val"
    overrides: list[str] = Field(default_factory=list)
    out_path: str | None = None
    with_drift: bool = True
    seed: int | None = None


class EvalResponse(BaseModel):
    report: dict
    report_path: str | None
    split: str
    n_utterances: int


class AblateRequest(ConfigBody):
    axis: str
    values: list | None = None
    seeds: list[int] = Field(default_factory=lambda: [101, 102, 103])
    eval_on: str = "val"
    out_dir: str | None = None


class AblateResponse(BaseModel):
    axis: str
    rows: list[dict]
    aggregate: list[dict]
    out_dir: str | None


class ScheduleRequest(BaseModel):
    T: int = 1000
    s: float = 0.008
    K: int | None = None


class ScheduleResponse(BaseModel):
    csv: str
    rows: int


class GradCheckRequest(BaseModel):
    n_cases: int = 20
    seed0: int = 100


class GradCheckResponse(BaseModel):
    passed: bool
    max_error: float
    tolerance: float
    n_cases: int
    per_case: list[float]
    elapsed_s: float


class HealthResponse(BaseModel):
    status: str
    version: str
