"""Pydantic request/response models for the HTTP service.

Matrices travel as row-major nested lists of float64; JSON float
round-tripping is exact, so scores survive the wire bit-for-bit.
"""

from __future__ import annotations

import numpy as np
from pydantic import BaseModel, Field

from ..errors import ShapeMismatchError


class MatrixPayload(BaseModel):
    rows: int = Field(ge=1)
    cols: int = Field(ge=1)
    data: list[list[float]]

    def to_array(self) -> np.ndarray:
        if len(self.data) != self.rows or any(len(r) != self.cols for r in self.data):
            raise ShapeMismatchError(
                f"payload claims {self.rows}x{self.cols} but data disagrees"
            )
        return np.asarray(self.data, dtype=np.float64)

    @classmethod
    def from_array(cls, m: np.ndarray) -> "MatrixPayload":
        return cls(rows=m.shape[0], cols=m.shape[1], data=m.tolist())


class HealthResponse(BaseModel):
    status: str
    model_loaded: bool


class ScoreRequest(BaseModel):
    images: MatrixPayload | None = None
    texts: MatrixPayload
    branch: str = "image-text"  # or "text-text"


class ScoreResponse(BaseModel):
    scores: MatrixPayload


class RerankRequest(BaseModel):
    s_it: MatrixPayload
    s_tt: MatrixPayload | None = None
    top_k: int = Field(default=15, ge=1)
    text_neighbors: int = Field(default=5, ge=1)
    fallback_position: int | None = None


class RerankResponse(BaseModel):
    i2t: list[list[int]]
    t2i: list[list[int]]


class EvalRequest(BaseModel):
    s_it: MatrixPayload
    group_map: list[int]
    folds: int | None = None


class MetricsPayload(BaseModel):
    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    mr: float


class EvalResponse(BaseModel):
    metrics: MetricsPayload
    per_fold: list[MetricsPayload] | None = None


class EnsembleRequest(BaseModel):
    matrices: list[MatrixPayload]


class EnsembleResponse(BaseModel):
    mean: MatrixPayload
