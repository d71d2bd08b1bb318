from .base import (
    Backend,
    BackendError,
    BackendMisbehavior,
    FinishReason,
    GenerationRequest,
    GenerationResult,
    ScoreParseFailure,
    TransportError,
    VerificationRequest,
    count_new_prompt_tokens,
    extract_score,
)
from .http import OpenAICompletionsBackend
from .simulated import SimulatedBackend

__all__ = [
    "Backend",
    "BackendError",
    "BackendMisbehavior",
    "FinishReason",
    "GenerationRequest",
    "GenerationResult",
    "OpenAICompletionsBackend",
    "ScoreParseFailure",
    "SimulatedBackend",
    "TransportError",
    "VerificationRequest",
    "count_new_prompt_tokens",
    "extract_score",
]
