"""Request and response models shared by the HTTP service and the CLI."""

from __future__ import annotations

from typing import Any

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import DelayConfig, ExperimentSpec, SimConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RunRequest(_Strict):
    config: SimConfig
    out_dir: str | None = None
    write_matrices: bool = False
    include_metrics: bool = False


class RunResponse(_Strict):
    summary: dict[str, Any]
    out_dir: str | None = None
    metrics: list[dict[str, Any]] | None = None


class SweepRequest(_Strict):
    spec: ExperimentSpec
    out_dir: str | None = None
    jobs: int | None = Field(default=None, ge=1)
    force_large_sweep: bool = False


class SweepRowOut(_Strict):
    axes: dict[str, Any]
    config_hash: str
    run_dir: str
    status: str
    resumed: bool
    error: str | None = None
    final_loss: float | None = None
    best_loss: float | None = None


class SweepResponse(_Strict):
    runs: int
    csv_path: str
    rows: list[SweepRowOut]


class DiagnoseRequest(_Strict):
    """Either a config to simulate W from, or W itself as 1-based triplets."""

    config: SimConfig | None = None
    w_path: str | None = None
    w_triplets: list[tuple[int, int, float]] | None = None
    horizon: int | None = Field(default=None, ge=1)
    beta: float = Field(default=0.9, ge=0, lt=1)
    cohort: int = Field(default=1, ge=1)
    with_projection: bool = True
    delay_table: bool = False
    delay_table_delays: dict[str, DelayConfig] | None = None
    p_grid: list[float] | None = None
    out_dir: str | None = None
    include_records: bool = False

    @model_validator(mode="after")
    def _one_source(self) -> "DiagnoseRequest":
        given = sum(x is not None for x in (self.config, self.w_path, self.w_triplets))
        if given != 1:
            raise ValueError("give exactly one of config, w_path or w_triplets")
        if self.delay_table and self.config is None:
            raise ValueError("the delay table is simulated and needs a config")
        return self


class DiagnoseResponse(_Strict):
    summary: dict[str, Any]
    records: list[dict[str, Any]] | None = None
    delay_table: list[dict[str, Any]] | None = None
    out_dir: str | None = None


class ReportRequest(_Strict):
    path: str


class ReportResponse(_Strict):
    report: dict[str, Any]
    text: str


class ErrorResponse(_Strict):
    error: str
    detail: str
