from pydantic import BaseModel, Field, field_validator
from typing import List, Dict, Optional, Any, Literal


# Request Models
class PredictRequest(BaseModel):
    """Frames of one or more videos, in frame-file column layout and frame order."""
    frames: List[Dict[str, Any]] = Field(..., description="Rows keyed by frame-file columns")
    include_probabilities: Optional[bool] = False

    @field_validator('frames')
    @classmethod
    def validate_frames(cls, v):
        """At least one frame is required."""
        if not v:
            raise ValueError("frames must contain at least one frame")
        return v


# Response Models
class FramePrediction(BaseModel):
    """Prediction for one input frame."""
    video_id: str
    frame_index: int
    status: Literal["ok", "held", "insufficient_history"]
    predicted: Optional[int] = None
    probabilities: Optional[List[float]] = None


class PredictResponse(BaseModel):
    """Response of the predict endpoint."""
    status: str = "success"
    model_fps: int
    window_len: int
    predictions: List[FramePrediction]

    class Config:
        json_schema_extra = {
            "example": {
                "status": "success",
                "model_fps": 30,
                "window_len": 60,
                "predictions": [
                    {"video_id": "v1", "frame_index": 0, "status": "insufficient_history",
                     "predicted": None, "probabilities": None},
                ],
            }
        }


class HealthResponse(BaseModel):
    """Service health."""
    status: str
    model_loaded: bool
    model_path: Optional[str] = None
    param_count: Optional[int] = None
