"""
Common Pydantic schemas used across the commands.
"""
from datetime import datetime
from typing import Any, Dict, Optional

from pydantic import BaseModel, Field


class RunManifest(BaseModel):
    """Written by every command next to its outputs."""
    command: str
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    tool_version: str
    started_at: datetime
    duration_seconds: float = 0.0


class ErrorResponse(BaseModel):
    """Error summary printed by the CLI on failure."""
    error: str
    message: Optional[str] = None
    exit_code: int = 1
