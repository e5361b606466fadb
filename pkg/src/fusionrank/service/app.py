"""FastAPI service exposing the query-time operations.

The service wraps the core package for multi-client use: scoring with a
checkpoint loaded at startup, re-ranking of similarity matrices (ours or
any external system's), metric evaluation, and ensembling. Training and
dataset generation are offline jobs and stay on the CLI.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import dataio, evaluation, reranking
from ..errors import ConfigError, DataFormatError, ShapeMismatchError
from ..evaluation import GroundTruth, RetrievalMetrics
from ..model import score_matrix
from .schemas import (
    EnsembleRequest,
    EnsembleResponse,
    EvalRequest,
    EvalResponse,
    HealthResponse,
    MatrixPayload,
    MetricsPayload,
    RerankRequest,
    RerankResponse,
    ScoreRequest,
    ScoreResponse,
)

_CLIENT_ERRORS = (ConfigError, ShapeMismatchError, DataFormatError)


def _metrics_payload(m: RetrievalMetrics) -> MetricsPayload:
    return MetricsPayload(
        i2t_r1=m.i2t_r1, i2t_r5=m.i2t_r5, i2t_r10=m.i2t_r10,
        t2i_r1=m.t2i_r1, t2i_r5=m.t2i_r5, t2i_r10=m.t2i_r10, mr=m.mr,
    )


def create_app(checkpoint: str | Path | None = None) -> FastAPI:
    app = FastAPI(
        title="fusionrank",
        description="Cross-modal similarity scoring, re-ranking and evaluation",
    )
    params = dataio.load_checkpoint(checkpoint) if checkpoint else None

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", model_loaded=params is not None)

    @app.post("/score", response_model=ScoreResponse)
    def score(req: ScoreRequest) -> ScoreResponse:
        if params is None:
            raise HTTPException(
                status_code=409,
                detail="no checkpoint loaded; start the service with one",
            )
        try:
            texts = req.texts.to_array()
            if req.branch == "image-text":
                if req.images is None:
                    raise ConfigError("image-text scoring needs 'images'")
                out = score_matrix(params.image_text,
                                   req.images.to_array(), texts)
            elif req.branch == "text-text":
                out = score_matrix(params.text_text, texts, texts)
            else:
                raise ConfigError(f"unknown branch {req.branch!r}")
        except _CLIENT_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        return ScoreResponse(scores=MatrixPayload.from_array(out))

    @app.post("/rerank", response_model=RerankResponse)
    def rerank(req: RerankRequest) -> RerankResponse:
        try:
            cfg = reranking.RerankConfig(
                top_k=req.top_k,
                text_neighbors=req.text_neighbors,
                fallback_position=req.fallback_position,
            )
            s_tt = req.s_tt.to_array() if req.s_tt is not None else None
            i2t, t2i = reranking.rerank_all(req.s_it.to_array(), s_tt, cfg)
        except _CLIENT_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        return RerankResponse(
            i2t=[[int(x) for x in row] for row in i2t],
            t2i=[[int(x) for x in row] for row in t2i],
        )

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest) -> EvalResponse:
        try:
            gt = GroundTruth.from_group_map(req.group_map)
            s_it = req.s_it.to_array()
            if req.folds and req.folds > 1:
                per_fold, m = evaluation.metrics_by_fold(s_it, gt, req.folds)
                return EvalResponse(
                    metrics=_metrics_payload(m),
                    per_fold=[_metrics_payload(f) for f in per_fold],
                )
            m = evaluation.metrics_from_sim(s_it, gt)
        except _CLIENT_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        return EvalResponse(metrics=_metrics_payload(m))

    @app.post("/ensemble", response_model=EnsembleResponse)
    def ensemble(req: EnsembleRequest) -> EnsembleResponse:
        try:
            mats = [p.to_array() for p in req.matrices]
            mean = evaluation.ensemble_average(mats)
        except _CLIENT_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        return EnsembleResponse(mean=MatrixPayload.from_array(mean))

    return app
