"""FastAPI service wrapping the harness.

Long work (training, evaluation) runs as background jobs polled through
``/jobs/{job_id}``; cheap operations (validation, comparison, plotting)
answer synchronously.  The CLI is a thin client of exactly this API.
"""

from __future__ import annotations

import csv
import threading
import uuid
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..errors import ConfigError
from ..harness import compare_reports, evaluate, load_scenario, train, validate_scenario
from ..harness.metrics import MetricsReport
from ..harness.plots import emit_plots
from ..harness.runner import write_comparison_csv
from ..harness.scenario import ScenarioSpec
from .schemas import (
    CompareRequest,
    CompareResponse,
    CompareRow,
    EvalRequest,
    HealthResponse,
    JobCreated,
    JobProgress,
    JobStatus,
    PlotRequest,
    PlotResponse,
    ScenarioSummary,
    ScenarioValidateRequest,
    ScenarioValidateResponse,
    TrainRequest,
)


class Job:
    def __init__(self, kind: str):
        self.id = uuid.uuid4().hex
        self.kind = kind
        self.status = "queued"
        self.progress = JobProgress()
        self.error = None
        self.error_kind = None
        self.result = None
        self.lock = threading.Lock()

    def to_status(self) -> JobStatus:
        with self.lock:
            return JobStatus(
                job_id=self.id, kind=self.kind, status=self.status,
                progress=self.progress, error=self.error,
                error_kind=self.error_kind, result=self.result)


class JobRegistry:
    def __init__(self):
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()

    def create(self, kind: str) -> Job:
        job = Job(kind)
        with self._lock:
            self._jobs[job.id] = job
        return job

    def get(self, job_id: str) -> Job:
        with self._lock:
            job = self._jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no such job {job_id}")
        return job


def _scenario_summary(spec: ScenarioSpec) -> ScenarioSummary:
    return ScenarioSummary(
        name=spec.name,
        seed=spec.seed,
        duration_s=spec.duration_s,
        capacity_mbps=spec.link.capacity_bps / 1e6,
        rtt_ms=spec.link.prop_delay_us * 2 / 1000,
        buffer_bytes=spec.link.buffer_bytes,
        n_flows=len(spec.flows),
        n_controlled=len(spec.controlled_flow_ids()),
        n_fixed_events=len(spec.fixed_events),
        has_random_events=spec.random_events is not None,
        config_hash=spec.config_hash(),
    )


def _run_job(job: Job, fn) -> None:
    with job.lock:
        job.status = "running"
    try:
        result = fn(job)
    except ConfigError as exc:
        with job.lock:
            job.status = "error"
            job.error = str(exc)
            job.error_kind = "config"
    except Exception as exc:  # noqa: BLE001 - job boundary
        with job.lock:
            job.status = "error"
            job.error = f"{type(exc).__name__}: {exc}"
            job.error_kind = "runtime"
    else:
        with job.lock:
            job.status = "done"
            job.result = result


def create_app() -> FastAPI:
    app = FastAPI(title="bbrtune", version=__version__)
    registry = JobRegistry()
    app.state.jobs = registry

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/scenario/validate", response_model=ScenarioValidateResponse)
    def scenario_validate(req: ScenarioValidateRequest) -> ScenarioValidateResponse:
        if (req.scenario_path is None) == (req.scenario is None):
            raise HTTPException(status_code=400,
                                detail="pass exactly one of scenario_path or scenario")
        try:
            spec = (load_scenario(req.scenario_path) if req.scenario_path
                    else validate_scenario(req.scenario))
        except ConfigError as exc:
            return ScenarioValidateResponse(valid=False, errors=[str(exc)])
        return ScenarioValidateResponse(valid=True, summary=_scenario_summary(spec))

    @app.post("/jobs/train", response_model=JobCreated)
    def submit_train(req: TrainRequest) -> JobCreated:
        job = registry.create("train")

        def work(job: Job):
            def progress(p: dict):
                with job.lock:
                    job.progress = JobProgress(**p)

            res = train(req.scenario_path, req.out_dir, seed=req.seed,
                        iters=req.iters, n_agents=req.agents,
                        transport=req.transport,
                        hyper_overrides=req.hyper_overrides, progress=progress)
            return {
                "checkpoint_path": res.checkpoint_path,
                "stats_path": res.stats_path,
                "manifest_path": res.manifest_path,
                "iterations": res.iterations,
                "final_mean_reward": res.final_mean_reward,
            }

        threading.Thread(target=_run_job, args=(job, work), daemon=True).start()
        return JobCreated(job_id=job.id)

    @app.post("/jobs/eval", response_model=JobCreated)
    def submit_eval(req: EvalRequest) -> JobCreated:
        job = registry.create("eval")

        def work(job: Job):
            res = evaluate(req.scenario_path, req.out_dir,
                           checkpoint=req.checkpoint_path, baseline=req.baseline,
                           seed=req.seed,
                           accuracy_threshold_ms=req.accuracy_threshold_ms,
                           online=req.online)
            return {
                "trace_path": res.trace_path,
                "steps_path": res.steps_path,
                "report_path": res.report_path,
                "manifest_path": res.manifest_path,
                "estimation_accuracy": res.report.estimation_accuracy,
                "peak_rtt_ms": res.report.peak_rtt_ms,
                "mean_throughput_bps": res.report.mean_throughput_bps,
            }

        threading.Thread(target=_run_job, args=(job, work), daemon=True).start()
        return JobCreated(job_id=job.id)

    @app.get("/jobs/{job_id}", response_model=JobStatus)
    def job_status(job_id: str) -> JobStatus:
        return registry.get(job_id).to_status()

    @app.post("/compare", response_model=CompareResponse)
    def compare(req: CompareRequest) -> CompareResponse:
        for path in (req.report_a, req.report_b):
            if not Path(path).exists():
                raise HTTPException(status_code=400, detail=f"report not found: {path}")
        try:
            cmp = compare_reports(req.report_a, req.report_b)
        except ConfigError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        if req.out_csv:
            write_comparison_csv(cmp, req.out_csv)
        return CompareResponse(
            rows=[CompareRow(metric=m, a=a, b=b, delta_or_ratio=d)
                  for m, a, b, d in cmp.rows],
            text=cmp.text)

    @app.post("/plot", response_model=PlotResponse)
    def plot(req: PlotRequest) -> PlotResponse:
        trace_path = Path(req.trace_path)
        if not trace_path.exists():
            raise HTTPException(status_code=400, detail=f"trace not found: {trace_path}")
        rows = _read_trace(trace_path)
        if req.report_path:
            report = MetricsReport.from_csv(req.report_path)
        else:
            report = MetricsReport(scenario_name="", scenario_hash="", seed=0, mode="")
        files = emit_plots(report, rows, req.out_dir)
        return PlotResponse(files=files)

    return app


def _read_trace(path) -> list[tuple]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for rec in reader:
            rows.append((
                int(rec[0]), int(rec[1]), float(rec[2]), float(rec[3]), float(rec[4]),
                int(rec[5]), float(rec[6]), int(rec[7]), float(rec[8]), float(rec[9]),
                float(rec[10]), float(rec[11]), rec[12], int(rec[13]), float(rec[14]),
            ))
    return rows
