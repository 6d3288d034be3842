"""FastAPI service exposing the experiment runner.

Each endpoint accepts a full experiment configuration and runs the
corresponding experiment synchronously.  Config problems return 422 with
the list of offending fields; numerical failures return 500 with a
structured error body that clients can persist as a diagnostic.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse

from ..errors import ConvergenceError, InvalidInputError, SingularMatrixError
from ..experiments import (
    ExperimentConfig,
    bench_csv,
    comm_csv,
    run_comm_table,
    run_fed_experiment,
    run_rftca_bench,
    run_validation,
    validate_config,
)
from .schemas import (
    BenchResponse,
    BenchRowModel,
    CommRowModel,
    CommTableResponse,
    FedRunResponse,
    HealthResponse,
    RegularizationModel,
    SeedRunModel,
    ValidateResponse,
)

__all__ = ["create_app", "app"]

_NUMERICAL_ERRORS = (
    ConvergenceError,
    SingularMatrixError,
    InvalidInputError,
    np.linalg.LinAlgError,
    FloatingPointError,
)


def _config_problems(cfg: ExperimentConfig) -> JSONResponse | None:
    problems = validate_config(cfg)
    if problems:
        return JSONResponse(status_code=422, content={"errors": problems})
    return None


def _numerical_failure(exc: Exception) -> JSONResponse:
    return JSONResponse(
        status_code=500,
        content={
            "error": "numerical-failure",
            "kind": type(exc).__name__,
            "detail": str(exc),
        },
    )


def create_app() -> FastAPI:
    app = FastAPI(
        title="rftca",
        description="Random-features domain alignment: benchmarks, federated "
                    "training simulation, communication accounting.",
        version="0.1.0",
    )

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse()

    @app.post("/rftca-bench", response_model=BenchResponse)
    def rftca_bench(cfg: ExperimentConfig):
        bad = _config_problems(cfg)
        if bad:
            return bad
        try:
            rows = run_rftca_bench(cfg)
        except _NUMERICAL_ERRORS as exc:
            return _numerical_failure(exc)
        models = [BenchRowModel(method=r.method, n_features=r.n_features,
                                accuracy=r.accuracy, seconds=r.seconds) for r in rows]
        return BenchResponse(rows=models, csv=bench_csv(rows))

    @app.post("/fed-run", response_model=FedRunResponse)
    def fed_run(cfg: ExperimentConfig, with_baseline: bool = False):
        bad = _config_problems(cfg)
        if bad:
            return bad
        try:
            runs = run_fed_experiment(cfg, with_baseline=with_baseline)
        except _NUMERICAL_ERRORS as exc:
            return _numerical_failure(exc)
        models = [SeedRunModel(
            seed=r.seed,
            final_accuracy=r.final_accuracy,
            initial_mmd=r.initial_mmd,
            final_mmd=r.final_mmd,
            source_only_accuracy=r.source_only_accuracy,
            metrics_jsonl=r.metrics_jsonl,
            ledger_csv=r.ledger_csv,
        ) for r in runs]
        mean_acc = float(np.mean([r.final_accuracy for r in runs]))
        return FedRunResponse(runs=models, mean_accuracy=mean_acc)

    @app.post("/comm-table", response_model=CommTableResponse)
    def comm_table(cfg: ExperimentConfig):
        bad = _config_problems(cfg)
        if bad:
            return bad
        try:
            rows = run_comm_table(cfg)
        except _NUMERICAL_ERRORS as exc:
            return _numerical_failure(exc)
        return CommTableResponse(rows=[CommRowModel(**row) for row in rows],
                                 csv=comm_csv(rows))

    @app.post("/validate", response_model=ValidateResponse)
    def validate(cfg: ExperimentConfig):
        try:
            report = run_validation(cfg)
        except _NUMERICAL_ERRORS as exc:
            return _numerical_failure(exc)
        reg = None
        if report.reg_value is not None:
            reg = RegularizationModel(lower=report.reg_lower, upper=report.reg_upper,
                                      value=report.reg_value)
        return ValidateResponse(
            errors=report.errors,
            warnings=report.warnings,
            hints=report.hints,
            resolved=report.resolved,
            eigen_gap=report.eigen_gap,
            regularization=reg,
        )

    return app


app = create_app()
