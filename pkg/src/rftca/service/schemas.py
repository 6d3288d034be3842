"""Pydantic response models for the experiment service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel

__all__ = [
    "BenchRowModel",
    "BenchResponse",
    "SeedRunModel",
    "FedRunResponse",
    "CommRowModel",
    "CommTableResponse",
    "RegularizationModel",
    "ValidateResponse",
    "HealthResponse",
]


class HealthResponse(BaseModel):
    status: str = "ok"


class BenchRowModel(BaseModel):
    method: str
    n_features: int
    accuracy: float
    seconds: float


class BenchResponse(BaseModel):
    rows: list[BenchRowModel]
    csv: str


class SeedRunModel(BaseModel):
    seed: int
    final_accuracy: float
    initial_mmd: float
    final_mmd: float
    source_only_accuracy: Optional[float] = None
    metrics_jsonl: str
    ledger_csv: str


class FedRunResponse(BaseModel):
    runs: list[SeedRunModel]
    mean_accuracy: float


class CommRowModel(BaseModel):
    n: int
    K: int
    N: int
    m: int
    feature_exchange: int
    encrypted_exchange: int
    fedrf_measured: int


class CommTableResponse(BaseModel):
    rows: list[CommRowModel]
    csv: str


class RegularizationModel(BaseModel):
    lower: float
    upper: float
    value: float


class ValidateResponse(BaseModel):
    errors: list[str]
    warnings: list[str]
    hints: list[str]
    resolved: dict
    eigen_gap: Optional[float] = None
    regularization: Optional[RegularizationModel] = None
