"""Backend contract shared by the HTTP client and the deterministic simulator."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum

from ..core import BackendProfile, UtilityScore
from ..prompts import count_tokens


class FinishReason(str, Enum):
    STOP = "Stop"
    LENGTH = "Length"
    END_THINK = "EndThink"


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    """Network failure or server error that survived bounded retries."""


class BackendMisbehavior(BackendError):
    """Response violated the completion contract (e.g. empty text with Stop)."""


class ScoreParseFailure(BackendError):
    """No digit 0-9 could be extracted from a verification response."""


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int
    temperature: float = 0.0
    stop: tuple[str, ...] = ()
    want_top_logprobs: bool = False
    seed_hint: int | None = None

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if not isinstance(self.stop, tuple):
            object.__setattr__(self, "stop", tuple(self.stop))


@dataclass(frozen=True)
class GenerationResult:
    text: str
    token_count: int
    finish_reason: FinishReason
    top_logprobs: dict[str, float] | None = None
    measured_latency_s: float = 0.0

    def __post_init__(self) -> None:
        if self.token_count < 0:
            raise ValueError("token_count must be >= 0")


@dataclass(frozen=True)
class VerificationRequest:
    """Inputs for one prefill-only scoring pass over a candidate step."""

    problem: str
    cot_prefix: str
    candidate_step: str

    def __post_init__(self) -> None:
        if not self.candidate_step:
            raise ValueError("candidate_step must be non-empty")


class Backend(ABC):
    """A model server handle: step generation plus single-digit step scoring.

    Backends are sharable services; implementations must be safe for
    concurrent calls from many trajectories.
    """

    profile: BackendProfile
    simulated: bool = False

    @abstractmethod
    def generate_step(self, request: GenerationRequest) -> GenerationResult:
        """Generate text for one step (or the final answer) from a prompt."""

    @abstractmethod
    def score_step(self, request: VerificationRequest) -> UtilityScore:
        """Score a candidate step 0-9 in a single prefill-plus-one-token pass.

        Only backends with the Base role can score. Raises ScoreParseFailure
        when no digit can be extracted; the engine maps that to a rejection.
        """

    def count_tokens(self, text: str) -> int:
        return count_tokens(text)


_DIGIT_CHARS = "0123456789"


def extract_score(top_logprobs: dict[str, float] | None, text: str) -> UtilityScore:
    """Pull a 0-9 score out of a completion.

    Preference order: argmax over single-digit token strings in the first
    position's top_logprobs (non-digit tokens ignored), then the first digit
    character in the sampled text. Anything else is a ScoreParseFailure, never
    a silently wrapped or clamped value.
    """
    if top_logprobs:
        best: tuple[int, float] | None = None
        for token, logprob in top_logprobs.items():
            stripped = token.strip()
            if len(stripped) == 1 and stripped in _DIGIT_CHARS:
                if best is None or logprob > best[1]:
                    best = (int(stripped), logprob)
        if best is not None:
            return UtilityScore(best[0])
    for char in text:
        if char in _DIGIT_CHARS:
            return UtilityScore(int(char))
    raise ScoreParseFailure(f"no digit found in score response {text!r}")


def count_new_prompt_tokens(prev_prompt: str, new_prompt: str, backend: Backend) -> int:
    """Tokens a prefix-caching server must newly prefill for ``new_prompt``
    after having served ``prev_prompt``: the suffix when the old prompt is a
    prefix of the new one, the full prompt otherwise.
    """
    if new_prompt.startswith(prev_prompt):
        return backend.count_tokens(new_prompt[len(prev_prompt):])
    return backend.count_tokens(new_prompt)
