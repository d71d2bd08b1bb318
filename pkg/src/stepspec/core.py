"""Shared domain types: scores, thresholds, steps, trajectories, configs, profiles.

Everything here is a plain value type with JSON round-trip support and no I/O.
The only mutable type is ``TrajectoryState``, which is owned and mutated by a
single run loop; all other types are frozen and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

END_THINK_MARKER = "</think>"
THINK_OPEN_MARKER = "<think>"

MAX_UTILITY_SCORE = 9


class StepProducer(str, Enum):
    SPECULATOR = "Speculator"
    BASE = "Base"
    BASE_FORCED = "BaseForced"


class Phase(str, Enum):
    THINKING = "Thinking"
    ANSWERING = "Answering"
    DONE = "Done"


class Decision(str, Enum):
    ACCEPT = "Accept"
    REJECT = "Reject"


class BackendRole(str, Enum):
    SMALL = "Small"
    BASE = "Base"


class Scheme(str, Enum):
    BASE_ONLY = "BaseOnly"
    SMALL_ONLY = "SmallOnly"
    SPEC_DECODE = "SpecDecode"
    SPEC_REASON = "SpecReason"
    SPEC_REASON_DECODE = "SpecReasonDecode"


#: Schemes that speculate (at step or token level) and therefore report an
#: acceptance fraction.
SPECULATIVE_SCHEMES = frozenset(
    {Scheme.SPEC_DECODE, Scheme.SPEC_REASON, Scheme.SPEC_REASON_DECODE}
)


def _require_int(name: str, value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError(f"{name} must be an int, got {type(value).__name__}")
    return value


@dataclass(frozen=True, order=True)
class UtilityScore:
    """Single-digit quality judgment of a candidate step: 0 (worst) to 9 (best)."""

    value: int

    def __post_init__(self) -> None:
        _require_int("score", self.value)
        if not 0 <= self.value <= MAX_UTILITY_SCORE:
            raise ValueError(f"utility score must be in [0, 9], got {self.value}")


@dataclass(frozen=True, order=True)
class AcceptanceThreshold:
    """Minimum utility score a speculated step must reach to be retained.

    0 accepts everything; 10 sits strictly above the score range, so it
    rejects everything and forces pure base-model fallback.
    """

    value: int

    def __post_init__(self) -> None:
        _require_int("threshold", self.value)
        if not 0 <= self.value <= MAX_UTILITY_SCORE + 1:
            raise ValueError(f"threshold must be in [0, 10], got {self.value}")


def decide_acceptance(score: UtilityScore, threshold: AcceptanceThreshold) -> Decision:
    """Accept iff score >= threshold (the boundary score is accepted)."""
    return Decision.ACCEPT if score.value >= threshold.value else Decision.REJECT


@dataclass(frozen=True)
class LatencyBreakdown:
    """Seconds spent on one step slot, split by phase.

    ``fallback_s`` holds base-model generation time: regeneration after a
    rejection, a forced step, or vanilla decoding in baseline runs.
    """

    speculate_s: float = 0.0
    verify_s: float = 0.0
    fallback_s: float = 0.0

    def __post_init__(self) -> None:
        for name in ("speculate_s", "verify_s", "fallback_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def total_s(self) -> float:
        return self.speculate_s + self.verify_s + self.fallback_s

    def to_dict(self) -> dict[str, float]:
        return {
            "speculate_s": self.speculate_s,
            "verify_s": self.verify_s,
            "fallback_s": self.fallback_s,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LatencyBreakdown":
        return cls(
            speculate_s=data["speculate_s"],
            verify_s=data["verify_s"],
            fallback_s=data["fallback_s"],
        )


def total_latency(step: "ReasoningStep") -> float:
    """Total seconds charged to a step: the sum of its breakdown components."""
    return step.latency.total_s


@dataclass(frozen=True)
class ReasoningStep:
    """One semantically self-contained unit of chain-of-thought text."""

    index: int
    text: str
    token_count: int
    producer: StepProducer
    score: UtilityScore | None
    accepted: bool
    latency: LatencyBreakdown

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("step index must be >= 0")
        if self.text and self.token_count < 1:
            raise ValueError("non-empty step text must count at least one token")
        if self.token_count < 0:
            raise ValueError("token_count must be >= 0")
        # Scores only ever come from verifying a speculated candidate.
        if self.score is not None and self.producer is not StepProducer.SPECULATOR:
            raise ValueError("only speculator-produced steps carry a score")

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "text": self.text,
            "token_count": self.token_count,
            "producer": self.producer.value,
            "score": None if self.score is None else self.score.value,
            "accepted": self.accepted,
            "latency": self.latency.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ReasoningStep":
        return cls(
            index=data["index"],
            text=data["text"],
            token_count=data["token_count"],
            producer=StepProducer(data["producer"]),
            score=None if data["score"] is None else UtilityScore(data["score"]),
            accepted=data["accepted"],
            latency=LatencyBreakdown.from_dict(data["latency"]),
        )


@dataclass
class TrajectoryState:
    """The evolving chain of retained steps for one problem.

    Mutated only by its owning run loop (single writer); budget covers
    thinking tokens only, never the final answer.
    """

    problem: str
    retained_steps: list[ReasoningStep] = field(default_factory=list)
    thinking_tokens_used: int = 0
    phase: Phase = Phase.THINKING
    budget: int = 8192
    final_answer: str | None = None

    def cot_text(self) -> str:
        return "".join(step.text for step in self.retained_steps)

    def to_dict(self) -> dict[str, Any]:
        return {
            "problem": self.problem,
            "retained_steps": [s.to_dict() for s in self.retained_steps],
            "thinking_tokens_used": self.thinking_tokens_used,
            "phase": self.phase.value,
            "budget": self.budget,
            "final_answer": self.final_answer,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrajectoryState":
        return cls(
            problem=data["problem"],
            retained_steps=[ReasoningStep.from_dict(s) for s in data["retained_steps"]],
            thinking_tokens_used=data["thinking_tokens_used"],
            phase=Phase(data["phase"]),
            budget=data["budget"],
            final_answer=data["final_answer"],
        )


DEFAULT_STEP_STOP_MARKERS: tuple[str, ...] = ("\n\n", ".\n", "!\n", "?\n")


@dataclass(frozen=True)
class EngineConfig:
    """All run knobs. Defaults follow the standard evaluation setup:
    threshold 7, 8192-token thinking budget, temperature 0.6, draft length 5.
    """

    threshold: AcceptanceThreshold = AcceptanceThreshold(7)
    force_first_n: int = 0
    token_budget: int = 8192
    temperature: float = 0.6
    draft_length: int = 5
    hierarchical: bool = False
    seed: int = 0
    max_step_tokens: int = 256
    step_stop_markers: tuple[str, ...] = DEFAULT_STEP_STOP_MARKERS

    def __post_init__(self) -> None:
        if self.force_first_n < 0:
            raise ValueError("force_first_n must be >= 0")
        if self.token_budget < 1:
            raise ValueError("token_budget must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.draft_length < 1:
            raise ValueError("draft_length must be >= 1")
        if self.max_step_tokens < 1:
            raise ValueError("max_step_tokens must be >= 1")
        if not isinstance(self.step_stop_markers, tuple):
            object.__setattr__(self, "step_stop_markers", tuple(self.step_stop_markers))

    def to_dict(self) -> dict[str, Any]:
        return {
            "threshold": self.threshold.value,
            "force_first_n": self.force_first_n,
            "token_budget": self.token_budget,
            "temperature": self.temperature,
            "draft_length": self.draft_length,
            "hierarchical": self.hierarchical,
            "seed": self.seed,
            "max_step_tokens": self.max_step_tokens,
            "step_stop_markers": list(self.step_stop_markers),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EngineConfig":
        return cls(
            threshold=AcceptanceThreshold(data["threshold"]),
            force_first_n=data["force_first_n"],
            token_budget=data["token_budget"],
            temperature=data["temperature"],
            draft_length=data["draft_length"],
            hierarchical=data["hierarchical"],
            seed=data["seed"],
            max_step_tokens=data["max_step_tokens"],
            step_stop_markers=tuple(data["step_stop_markers"]),
        )


@dataclass(frozen=True)
class BackendProfile:
    """A backend's identity plus the two-parameter latency model used for
    simulation and accounting: decode seconds/token and prefill tokens/second.
    """

    name: str
    role: BackendRole
    decode_s_per_token: float
    prefill_tokens_per_s: float

    def __post_init__(self) -> None:
        if self.decode_s_per_token <= 0:
            raise ValueError("decode_s_per_token must be > 0")
        if self.prefill_tokens_per_s <= 0:
            raise ValueError("prefill_tokens_per_s must be > 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "role": self.role.value,
            "decode_s_per_token": self.decode_s_per_token,
            "prefill_tokens_per_s": self.prefill_tokens_per_s,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BackendProfile":
        return cls(
            name=data["name"],
            role=BackendRole(data["role"]),
            decode_s_per_token=data["decode_s_per_token"],
            prefill_tokens_per_s=data["prefill_tokens_per_s"],
        )


@dataclass(frozen=True)
class RunMetrics:
    """Per-trajectory measurements aggregated by the benchmark runner."""

    latency_s: float
    thinking_tokens: int
    accepted_fraction: float | None
    rejected_count: int
    correct: bool
    scheme: Scheme
    budget_exhausted: bool

    def __post_init__(self) -> None:
        if self.latency_s < 0:
            raise ValueError("latency_s must be >= 0")
        if self.thinking_tokens < 0:
            raise ValueError("thinking_tokens must be >= 0")
        if self.rejected_count < 0:
            raise ValueError("rejected_count must be >= 0")
        if self.scheme not in SPECULATIVE_SCHEMES:
            if self.accepted_fraction is not None:
                raise ValueError(
                    f"accepted_fraction is undefined for scheme {self.scheme.value}"
                )
        elif self.accepted_fraction is not None and not 0 <= self.accepted_fraction <= 1:
            raise ValueError("accepted_fraction must be in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "latency_s": self.latency_s,
            "thinking_tokens": self.thinking_tokens,
            "accepted_fraction": self.accepted_fraction,
            "rejected_count": self.rejected_count,
            "correct": self.correct,
            "scheme": self.scheme.value,
            "budget_exhausted": self.budget_exhausted,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunMetrics":
        return cls(
            latency_s=data["latency_s"],
            thinking_tokens=data["thinking_tokens"],
            accepted_fraction=data["accepted_fraction"],
            rejected_count=data["rejected_count"],
            correct=data["correct"],
            scheme=Scheme(data["scheme"]),
            budget_exhausted=data["budget_exhausted"],
        )
