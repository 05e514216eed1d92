"""
Response envelopes shared by every HTTP endpoint.
"""
from typing import Generic, Optional, TypeVar

from pydantic import BaseModel, ConfigDict

T = TypeVar("T")


class StandardResponse(BaseModel, Generic[T]):
    """``{"message": ..., "data": ...}``; ``data`` carries the payload of the call."""
    message: str
    data: Optional[T] = None

    model_config = ConfigDict(from_attributes=True)


class ErrorDetail(BaseModel):
    """Payload of a failed pipeline command: the error class and its CLI exit code."""
    error: str
    exit_code: int
