"""FastAPI service exposing the experiment lab over HTTP.

Every endpoint wraps a core-library call; configuration errors surface as
HTTP 400 with a message, so thin clients can map them onto exit codes.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import Response

from .. import harness, plots, quadlab
from ..optim import Schedule
from ..precision import conformance_table
from ..quadlab import QuadProblem
from .schemas import (
    FinetuneRequest,
    FinetuneResponse,
    PlotRequest,
    PrecisionCheckResponse,
    RunRequest,
    RunResponse,
    SaLabRequest,
    SaLabResponse,
    SweepRequest,
    SweepResponse,
)

app = FastAPI(title="decaylab", description="weight-decay dynamics laboratory")


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(status_code=400, detail=f"{type(exc).__name__}: {exc}")


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.post("/runs", response_model=RunResponse)
def create_run(req: RunRequest) -> RunResponse:
    try:
        config = harness.RunConfig.from_dict(req.config)
    except (ValueError, KeyError, TypeError) as exc:
        raise _bad_request(exc)
    record = harness.run(config)
    if req.out_dir:
        harness.save_run(record, req.out_dir)
    return RunResponse(
        records=[r.to_dict() for r in record.records],
        flags=record.flags,
        divergence_onset=record.divergence_onset,
        final_step=record.final_step,
        terminal=record.terminal,
        sigma2_estimate=record.sigma2_estimate,
        out_dir=req.out_dir,
    )


@app.post("/sweeps", response_model=SweepResponse)
def create_sweep(req: SweepRequest) -> SweepResponse:
    try:
        config = harness.RunConfig.from_dict(req.config)
        rows = harness.sweep(config, req.grid, workers=req.workers)
    except (ValueError, KeyError, TypeError) as exc:
        raise _bad_request(exc)
    return SweepResponse(rows=rows, csv=harness.sweep_table_to_csv(rows))


@app.post("/finetune", response_model=FinetuneResponse)
def run_finetune(req: FinetuneRequest) -> FinetuneResponse:
    run_dir = Path(req.run_dir)
    config_path = run_dir / "config.json"
    if not config_path.is_file():
        raise HTTPException(status_code=400, detail=f"no config.json under {req.run_dir}")
    try:
        config = harness.load_config(config_path)
    except (ValueError, KeyError, TypeError) as exc:
        raise _bad_request(exc)
    snap_paths = sorted((run_dir / "snapshots").glob("step_*.npz"))
    if len(snap_paths) < 2:
        raise HTTPException(status_code=400, detail="need at least two persisted snapshots")
    snapshots = [harness.load_snapshot(p, config) for p in snap_paths]
    ft = config.finetune
    steps = req.steps if req.steps is not None else (ft.steps if ft else 0)
    lr = req.lr if req.lr is not None else (ft.lr if ft else None)
    if lr is None or lr <= 0:
        raise HTTPException(status_code=400, detail="finetune lr missing (config has no finetune block)")
    rows = harness.finetune_along_trajectory(config, snapshots, steps, lr)
    return FinetuneResponse(rows=rows)


@app.post("/sa-lab", response_model=SaLabResponse)
def run_sa_lab(req: SaLabRequest) -> SaLabResponse:
    try:
        problem = QuadProblem.from_dict(req.problem)
        schedule = Schedule.from_dict(req.schedule)
        if req.replicas > 0:
            curve = quadlab.simulate_sgd(problem, schedule, req.steps, req.replicas, req.seed)
        else:
            curve = quadlab.exact_risk(problem, schedule, req.steps)
        bound_ok = quadlab.risk_bound_ok(problem, schedule, curve)
        equivalence = None
        if req.equivalence is not None:
            eq = req.equivalence
            report = quadlab.effective_lr_equivalence_demo(
                problem, float(eq["lr"]), float(eq.get("lambda_wd", 0.0)), req.steps
            )
            equivalence = report.to_dict()
    except (ValueError, KeyError, TypeError) as exc:
        raise _bad_request(exc)
    return SaLabResponse(csv=quadlab.risk_curve_to_csv(curve), bound_ok=bound_ok, equivalence=equivalence)


@app.get("/precision/check", response_model=PrecisionCheckResponse)
def precision_check() -> PrecisionCheckResponse:
    return PrecisionCheckResponse(**conformance_table())


def _series_for_plot(kind: str, source: Path) -> dict:
    text = source.read_text()
    if source.suffix == ".jsonl":
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        return plots.series_from_records(records, kind)
    rows = list(csv.DictReader(io.StringIO(text)))
    if kind == "ushape":
        return plots.series_from_sweep(rows)
    if kind == "risk_curve":
        out = {}
        for col in ("exact_total", "bias", "variance", "empirical_mean"):
            pts = [(int(r["step"]), float(r[col])) for r in rows if r.get(col)]
            if pts:
                out[col] = ([p[0] for p in pts[1:]], [p[1] for p in pts[1:]])
        return out
    # generic CSV: expect step plus the field the kind needs
    field = {"loss_curve": "train_loss", "norm_curve": "param_norm", "elr_curve": "eff_lr",
             "trace_trend": "trace_estimate"}[kind]
    return {"series": ([int(r["step"]) for r in rows], [float(r[field]) for r in rows])}


@app.post("/plots")
def render(req: PlotRequest) -> Response:
    source = Path(req.source)
    if not source.is_file():
        raise HTTPException(status_code=400, detail=f"no such input file: {req.source}")
    try:
        series = _series_for_plot(req.kind, source)
        data = plots.render_plot(req.kind, series, req.out_path)
    except (ValueError, KeyError) as exc:
        raise _bad_request(exc)
    return Response(content=data, media_type="image/svg+xml")
