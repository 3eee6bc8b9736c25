from fastapi import FastAPI, HTTPException, Request, status
from fastapi.responses import JSONResponse
from fastapi.exceptions import RequestValidationError
from pydantic import ValidationError
from api_models import FramePrediction, HealthResponse, PredictRequest, PredictResponse
from pipeline.errors import PipelineError
from pipeline.nn_core import Model, load_model
from pipeline.skeleton_model import validate_frame
from service.service import StreamingPredictor
from dotenv import load_dotenv
import logging
import os
from functools import lru_cache
from typing import Optional

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)


app = FastAPI(
    title="Manual Process Action Recognition API",
    description="Per-frame motion class predictions from hand skeleton frames",
    version="1.0.0"
)


def error_response(status_code: int, message: str, exc: Exception, **extra) -> JSONResponse:
    """The error body shared by every handler."""
    return JSONResponse(
        status_code=status_code,
        content={"status": "error", "message": message, **extra, "detail": str(exc)},
    )


@app.exception_handler(RequestValidationError)
async def request_error_handler(request: Request, exc: RequestValidationError):
    return error_response(status.HTTP_422_UNPROCESSABLE_ENTITY, "Request validation failed", exc,
                          errors=[{k: v for k, v in e.items() if k != "ctx"} for e in exc.errors()])


@app.exception_handler(ValidationError)
async def model_error_handler(request: Request, exc: ValidationError):
    return error_response(status.HTTP_422_UNPROCESSABLE_ENTITY, "Validation error", exc,
                          errors=exc.errors(include_url=False, include_context=False))


@app.exception_handler(PipelineError)
async def pipeline_error_handler(request: Request, exc: PipelineError):
    """Invalid frames or an unusable model."""
    return error_response(status.HTTP_400_BAD_REQUEST, "Invalid input", exc, type=type(exc).__name__)


@app.exception_handler(Exception)
async def unhandled_error_handler(request: Request, exc: Exception):
    logger.exception("Unhandled error")
    return error_response(status.HTTP_500_INTERNAL_SERVER_ERROR, "Internal server error", exc,
                          type=type(exc).__name__)


def model_path() -> Optional[str]:
    return os.getenv("MPAR_MODEL_PATH") or None


@lru_cache(maxsize=4)
def get_model(path: str) -> Model:
    """Load a model container once per path."""
    logger.info("Loading model from %s", path)
    return load_model(path)


def require_model() -> Model:
    path = model_path()
    if not path:
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail={
                "status": "error",
                "message": "No model configured",
                "detail": "Set MPAR_MODEL_PATH in your .env file or environment variables."
            }
        )
    return get_model(path)


@app.get("/")
async def root():
    return {"service": app.title, "version": app.version, "endpoints": ["/health", "/predict"]}


@app.get("/health", response_model=HealthResponse)
async def health():
    path = model_path()
    if not path or not os.path.exists(path):
        return HealthResponse(status="no_model", model_loaded=False, model_path=path)
    model = get_model(path)
    return HealthResponse(status="ok", model_loaded=True, model_path=path, param_count=model.param_count)


@app.post("/predict", response_model=PredictResponse)
async def predict(request: PredictRequest):
    """
    Predict a motion class for every frame.

    Frames are validated like rows of a frame file and fed in order through a
    rolling window. The first W - 1 kept frames of each video report
    insufficient_history; frames skipped by the model's frame rate repeat the
    latest prediction with status held.
    """
    model = require_model()
    predictor = StreamingPredictor(model)
    predictions = []
    for raw in request.frames:
        result = predictor.push(validate_frame(raw))
        predictions.append(FramePrediction(
            video_id=result.video_id,
            frame_index=result.frame_index,
            status=result.status,
            predicted=result.predicted,
            probabilities=(
                [float(p) for p in result.probabilities]
                if request.include_probabilities and result.probabilities is not None else None
            ),
        ))
    return PredictResponse(
        model_fps=predictor.manifest.fps,
        window_len=predictor.manifest.window_len,
        predictions=predictions,
    )


if __name__ == "__main__":
    import uvicorn
    logging.basicConfig(level=os.getenv("MPAR_LOG_LEVEL", "INFO").upper())
    uvicorn.run(app, host=os.getenv("MPAR_HOST", "0.0.0.0"), port=int(os.getenv("MPAR_PORT", "8000")))
