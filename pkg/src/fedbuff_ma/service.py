"""HTTP service around the simulator.

The ``handle_*`` functions carry all the logic and are called directly by
the CLI; the FastAPI routes are thin wrappers that map package errors to
HTTP status codes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException

from . import __version__
from .engine import run
from .errors import FedBuffMAError, InvalidInput
from .runner import (
    DEFAULT_P_GRID,
    DELAY_TABLE_FILE,
    _clean,
    delay_table,
    diagnose_config,
    diagnose_matrix,
    format_report,
    read_jsonl,
    report,
    run_to_dir,
    sweep,
    write_jsonl,
)
from .schemas import (
    DiagnoseRequest,
    DiagnoseResponse,
    ReportRequest,
    ReportResponse,
    RunRequest,
    RunResponse,
    SweepRequest,
    SweepResponse,
    SweepRowOut,
)
from .staleness import read_triplets


def handle_run(req: RunRequest) -> RunResponse:
    if req.out_dir is None:
        result = run(req.config)
        summary = dict(result.summary, config_hash=req.config.content_hash())
        metrics = result.metrics if req.include_metrics else None
        return RunResponse(summary=_clean(summary), metrics=_clean(metrics))
    summary = run_to_dir(req.config, req.out_dir, write_matrices=req.write_matrices)
    summary = {k: v for k, v in summary.items() if k != "config"}
    metrics = read_jsonl(Path(req.out_dir) / "metrics.jsonl") if req.include_metrics else None
    return RunResponse(summary=_clean(summary), out_dir=req.out_dir, metrics=metrics)


def handle_sweep(req: SweepRequest) -> SweepResponse:
    out_dir = Path(req.out_dir or req.spec.out_dir or "sweep-out")
    rows = sweep(req.spec, out_dir, jobs=req.jobs, force=req.force_large_sweep)
    out = []
    for r in rows:
        s = r.summary or {}
        status = "failed" if r.summary is None else ("diverged" if s.get("diverged") else "ok")
        out.append(
            SweepRowOut(
                axes=_clean(r.axes),
                config_hash=r.config.content_hash(),
                run_dir=str(r.run_dir),
                status=status,
                resumed=r.resumed,
                error=r.error,
                final_loss=s.get("final_loss"),
                best_loss=s.get("best_loss"),
            )
        )
    return SweepResponse(runs=len(rows), csv_path=str(out_dir / "sweep.csv"), rows=out)


def _triplets_to_dense(triplets: list[tuple[int, int, float]], horizon: int | None) -> np.ndarray:
    n = horizon or max((max(i, j) for i, j, _ in triplets), default=0)
    w = np.zeros((n, n))
    for i, j, v in triplets:
        if not (1 <= i <= n and 1 <= j <= n):
            raise InvalidInput(f"triplet ({i}, {j}) outside a {n}x{n} matrix")
        w[i - 1, j - 1] = v
    return w


def handle_diagnose(req: DiagnoseRequest) -> DiagnoseResponse:
    if req.config is not None:
        records, summary = diagnose_config(req.config, with_projection=req.with_projection)
    else:
        w = read_triplets(req.w_path, req.horizon) if req.w_path else _triplets_to_dense(req.w_triplets, req.horizon)
        records, summary = diagnose_matrix(w, req.beta, req.cohort, with_projection=req.with_projection)
    table = None
    if req.delay_table:
        table = delay_table(req.config, req.delay_table_delays, req.p_grid or DEFAULT_P_GRID)
    if req.out_dir is not None:
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(out / "diagnostics.jsonl", records)
        with open(out / "diagnostics_summary.json", "w", encoding="utf-8") as fh:
            json.dump(_clean(summary), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
        if table is not None:
            write_jsonl(out / DELAY_TABLE_FILE, table)
    return DiagnoseResponse(
        summary=_clean(summary),
        records=_clean(records) if req.include_records else None,
        delay_table=_clean(table),
        out_dir=req.out_dir,
    )


def handle_report(req: ReportRequest) -> ReportResponse:
    doc = report(req.path)
    return ReportResponse(report=_clean(doc), text=format_report(doc))


def create_app() -> FastAPI:
    app = FastAPI(title="fedbuff-ma", version=__version__)

    def guarded(fn, req):
        try:
            return fn(req)
        except InvalidInput as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except (FedBuffMAError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"{type(exc).__name__}: {exc}") from exc

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/run", response_model=RunResponse)
    def post_run(req: RunRequest) -> RunResponse:
        return guarded(handle_run, req)

    @app.post("/sweep", response_model=SweepResponse)
    def post_sweep(req: SweepRequest) -> SweepResponse:
        return guarded(handle_sweep, req)

    @app.post("/diagnose", response_model=DiagnoseResponse)
    def post_diagnose(req: DiagnoseRequest) -> DiagnoseResponse:
        return guarded(handle_diagnose, req)

    @app.post("/report", response_model=ReportResponse)
    def post_report(req: ReportRequest) -> ReportResponse:
        return guarded(handle_report, req)

    return app


app = create_app()
