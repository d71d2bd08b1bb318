"""Step-level speculate/verify/fallback control loop, plus vanilla baselines.

One trajectory is one strictly sequential loop: the small model drafts a
step, the base model scores it in a prefill-only pass, and the step is either
retained or discarded and regenerated by the base model from the same prefix
(rejected text never conditions later generation, matching cache-discard
semantics). The base model always produces the final answer.

Latency accounting: simulated backends are priced by the profile model
(modeled prefill of newly-seen prompt tokens plus decode), HTTP backends by
measured wall clock. Rejected candidates cost time but never budget; their
speculate/verify seconds are carried on the retained regeneration step, and
the audit copy in ``rejected_steps`` mirrors them for inspection.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

from .backends.base import (
    Backend,
    BackendError,
    FinishReason,
    GenerationRequest,
    ScoreParseFailure,
    VerificationRequest,
    count_new_prompt_tokens,
)
from .core import (
    END_THINK_MARKER,
    BackendRole,
    Decision,
    EngineConfig,
    LatencyBreakdown,
    Phase,
    ReasoningStep,
    RunMetrics,
    Scheme,
    StepProducer,
    TrajectoryState,
    UtilityScore,
    decide_acceptance,
)
from .prompts import (
    VERIFY_HEAD_TOKENS,
    VERIFY_TAIL_TOKENS,
    count_tokens,
    render_generation_prompt,
    truncate_tokens,
)
from .seeding import derive_rng
from .specdecode import rounds_latency, simulate_regen_rounds

ANSWER_MAX_TOKENS = 256


class StepAction(str, Enum):
    ACCEPTED_SPECULATION = "AcceptedSpeculation"
    REJECTED_THEN_REGENERATED = "RejectedThenRegenerated"
    FORCED_BASE = "ForcedBase"


@dataclass(frozen=True)
class StepOutcome:
    step: ReasoningStep
    action: StepAction

    def __post_init__(self) -> None:
        is_accepted_spec = (
            self.step.producer is StepProducer.SPECULATOR and self.step.accepted
        )
        if (self.action is StepAction.ACCEPTED_SPECULATION) != is_accepted_spec:
            raise ValueError("action AcceptedSpeculation must match the step producer")

    def trace_record(self) -> dict:
        record = {
            "kind": "step",
            "index": self.step.index,
            "producer": self.step.producer.value,
            "score": None if self.step.score is None else self.step.score.value,
            "action": self.action.value,
            "token_count": self.step.token_count,
            "speculate_s": self.step.latency.speculate_s,
            "verify_s": self.step.latency.verify_s,
            "fallback_s": self.step.latency.fallback_s,
        }
        return record


@dataclass
class TrajectoryResult:
    state: TrajectoryState
    outcomes: list[StepOutcome]
    metrics: RunMetrics
    rejected_steps: list[ReasoningStep]
    answer_latency_s: float
    trace: list[dict] = field(default_factory=list)


def force_first_n(config: EngineConfig, step_index: int) -> bool:
    """True when the step at this index must be generated by the base model."""
    return step_index < config.force_first_n


@dataclass(frozen=True)
class SegmentedStep:
    text: str
    end_think: bool
    truncated: bool


def segment_step(text: str, config: EngineConfig) -> SegmentedStep:
    """Cut one reasoning step off the front of generated text.

    The step ends at the end-of-thinking marker, at the first configured
    boundary (boundary text kept, with any immediately following newline run
    absorbed), or at ``max_step_tokens`` when nothing matched.
    """
    marker_at = text.find(END_THINK_MARKER)
    boundary: tuple[int, int] | None = None
    for marker in config.step_stop_markers:
        found = text.find(marker)
        if found >= 0 and (boundary is None or found < boundary[0]):
            boundary = (found, found + len(marker))
    if marker_at >= 0 and (boundary is None or marker_at < boundary[0]):
        return SegmentedStep(text[:marker_at], True, False)
    if boundary is not None:
        end = boundary[1]
        while end < len(text) and text[end] == "\n":
            end += 1
        return SegmentedStep(text[:end], False, False)
    if count_tokens(text) > config.max_step_tokens:
        return SegmentedStep(truncate_tokens(text, config.max_step_tokens), False, True)
    return SegmentedStep(text, False, False)


@dataclass(frozen=True)
class _Piece:
    """A segmented generation with its token count and merged finish flags."""

    text: str
    token_count: int
    end_think: bool
    truncated: bool


def _generate_piece(backend: Backend, request: GenerationRequest, config: EngineConfig):
    result = backend.generate_step(request)
    seg = segment_step(result.text, config)
    end_think = seg.end_think or result.finish_reason is FinishReason.END_THINK
    if seg.text != result.text:
        tokens = backend.count_tokens(seg.text)
    else:
        tokens = result.token_count
    truncated = seg.truncated or result.finish_reason is FinishReason.LENGTH
    return result, _Piece(seg.text, tokens, end_think, truncated)


class _PrefixLedger:
    """Logical per-trajectory prefix-cache state for modeled prefill charges.

    One stream per cache line: the small model's generation prompt, the base
    model's generation prompt, and the shared problem+prefix region of the
    verification prompt. Generated text extends a stream only when retained;
    rejected candidates are discarded, so their tokens are never reusable.
    """

    def __init__(self) -> None:
        self._cached: dict[str, str] = {}

    def seen(self, stream: str) -> bool:
        return stream in self._cached

    def charge(self, stream: str, content: str, backend: Backend) -> int:
        previous = self._cached.get(stream, "")
        fresh = count_new_prompt_tokens(previous, content, backend)
        if len(content) > len(previous):
            self._cached[stream] = content
        return fresh

    def extend(self, stream: str, content: str) -> None:
        if len(content) > len(self._cached.get(stream, "")):
            self._cached[stream] = content


def _charge_generation(
    ledger: _PrefixLedger,
    stream: str,
    backend: Backend,
    prompt: str,
    result,
) -> float:
    """Seconds charged for one generation call: modeled prefill of fresh
    prompt tokens plus the backend's decode cost (simulated), or measured
    wall clock (HTTP).
    """
    if backend.simulated:
        fresh = ledger.charge(stream, prompt, backend)
        return fresh / backend.profile.prefill_tokens_per_s + result.measured_latency_s
    return result.measured_latency_s


def _charge_verification(
    ledger: _PrefixLedger,
    base: Backend,
    problem: str,
    cot: str,
    candidate_tokens: int,
) -> float:
    """Modeled verification cost: prefill over whatever the shared region
    newly gained plus the candidate and the template tail, then one decoded
    token for the score digit.
    """
    shared = problem + "\n" + cot
    first = not ledger.seen("base-verify")
    fresh = ledger.charge("base-verify", shared, base)
    overhead = VERIFY_TAIL_TOKENS + (VERIFY_HEAD_TOKENS if first else 0)
    prefill = (fresh + candidate_tokens + overhead) / base.profile.prefill_tokens_per_s
    return prefill + base.profile.decode_s_per_token


def _fit_budget(piece: _Piece, remaining: int) -> tuple[str, int, bool]:
    """Trim a step so it never straddles the budget; returns (text, tokens, hit)."""
    if piece.token_count <= remaining:
        return piece.text, piece.token_count, False
    return truncate_tokens(piece.text, remaining), remaining, True


def _regen_fallback_seconds(
    ledger: _PrefixLedger,
    config: EngineConfig,
    small: Backend,
    base: Backend,
    prompt: str,
    result,
    step_index: int,
    trace: list[dict],
) -> float:
    """Base-model regeneration cost, optionally priced through decode-level
    speculation rounds when running hierarchically over simulated backends.
    """
    if not base.simulated:
        return result.measured_latency_s
    fresh = ledger.charge("base-gen", prompt, base)
    prefill_s = fresh / base.profile.prefill_tokens_per_s
    agreement = getattr(base, "token_agreement_prob", None)
    if config.hierarchical and agreement is not None:
        rng = derive_rng("regen-rounds", base.profile.name, config.seed, step_index)
        rounds = simulate_regen_rounds(
            result.token_count, config.draft_length, agreement, rng
        )
        trace.append({"kind": "rounds", "step_index": step_index, "rounds": rounds})
        return prefill_s + rounds_latency(rounds, small.profile, base.profile)
    return prefill_s + result.measured_latency_s


def _build_request(prompt: str, config: EngineConfig) -> GenerationRequest:
    return GenerationRequest(
        prompt=prompt,
        max_tokens=config.max_step_tokens,
        temperature=config.temperature,
        stop=config.step_stop_markers,
        seed_hint=config.seed,
    )


def _with_context(exc: BackendError, problem: str, step_index: int | None) -> BackendError:
    """Re-wrap a backend error with where in the trajectory it happened."""
    summary = problem.splitlines()[0][:60] if problem else ""
    where = f"step {step_index} of " if step_index is not None else ""
    return type(exc)(f"{where}problem {summary!r}: {exc}")


def _score_candidate(
    base: Backend, request: VerificationRequest
) -> tuple[UtilityScore | None, float | None]:
    """Score a candidate; a parse failure maps to (None, elapsed) = reject.

    Returns measured seconds for HTTP backends, None for simulated ones
    (their verification cost is modeled by the ledger).
    """
    if base.simulated:
        try:
            return base.score_step(request), None
        except ScoreParseFailure:
            return None, None
    started = time.monotonic()
    try:
        score = base.score_step(request)
    except ScoreParseFailure:
        score = None
    return score, time.monotonic() - started


def run_trajectory(
    config: EngineConfig,
    problem: str,
    small: Backend,
    base: Backend,
) -> TrajectoryResult:
    """Run one full speculate/verify/fallback trajectory to a final answer.

    Budget exhaustion mid-thinking is not fatal: thinking is truncated at the
    budget and answering proceeds, flagged in the metrics. Backend failures
    propagate with the trajectory position attached.
    """
    if small.profile.role is not BackendRole.SMALL:
        raise ValueError(f"small backend has role {small.profile.role.value}")
    if base.profile.role is not BackendRole.BASE:
        raise ValueError(f"base backend has role {base.profile.role.value}")

    scheme = Scheme.SPEC_REASON_DECODE if config.hierarchical else Scheme.SPEC_REASON
    state = TrajectoryState(problem=problem, budget=config.token_budget)
    ledger = _PrefixLedger()
    outcomes: list[StepOutcome] = []
    rejected: list[ReasoningStep] = []
    trace: list[dict] = []
    answer_latency = 0.0
    budget_exhausted = False
    step_index = 0

    try:
        answer_latency, budget_exhausted = _thinking_loop(
            config, state, small, base, ledger, outcomes, rejected, trace
        )
        answer_latency += _generate_answer(config, state, base, ledger)
    except BackendError as exc:
        raise _with_context(exc, problem, len(state.retained_steps)) from exc

    retained = state.retained_steps
    speculator_steps = sum(
        1 for s in retained if s.producer is StepProducer.SPECULATOR
    )
    accepted_fraction = speculator_steps / len(retained) if retained else None
    total_latency_s = sum(s.latency.total_s for s in retained) + answer_latency
    metrics = RunMetrics(
        latency_s=total_latency_s,
        thinking_tokens=state.thinking_tokens_used,
        accepted_fraction=accepted_fraction,
        rejected_count=len(rejected),
        correct=False,
        scheme=scheme,
        budget_exhausted=budget_exhausted,
    )
    return TrajectoryResult(
        state=state,
        outcomes=outcomes,
        metrics=metrics,
        rejected_steps=rejected,
        answer_latency_s=answer_latency,
        trace=trace,
    )


def _thinking_loop(
    config: EngineConfig,
    state: TrajectoryState,
    small: Backend,
    base: Backend,
    ledger: _PrefixLedger,
    outcomes: list[StepOutcome],
    rejected: list[ReasoningStep],
    trace: list[dict],
) -> tuple[float, bool]:
    """Drive the thinking phase; returns (pre-answer latency, budget flag)."""
    problem = state.problem
    answer_latency = 0.0
    budget_exhausted = False
    step_index = 0

    while state.phase is Phase.THINKING:
        remaining = state.budget - state.thinking_tokens_used
        if remaining <= 0:
            budget_exhausted = True
            state.phase = Phase.ANSWERING
            break
        cot = state.cot_text()
        prompt = render_generation_prompt(problem, cot)
        request = _build_request(prompt, config)

        if force_first_n(config, step_index):
            result, piece = _generate_piece(base, request, config)
            seconds = _charge_generation(ledger, "base-gen", base, prompt, result)
            if piece.end_think and not piece.text:
                answer_latency += seconds
                state.phase = Phase.ANSWERING
                break
            text, tokens, hit_budget = _fit_budget(piece, remaining)
            ledger.extend("base-gen", prompt + text)
            step = ReasoningStep(
                index=step_index,
                text=text,
                token_count=tokens,
                producer=StepProducer.BASE_FORCED,
                score=None,
                accepted=True,
                latency=LatencyBreakdown(fallback_s=seconds),
            )
            _retain(state, step, outcomes, trace, StepAction.FORCED_BASE)
            if hit_budget:
                budget_exhausted = True
                state.phase = Phase.ANSWERING
            elif piece.end_think:
                state.phase = Phase.ANSWERING
            step_index += 1
            continue

        candidate_result, candidate = _generate_piece(small, request, config)
        speculate_s = _charge_generation(ledger, "small-gen", small, prompt, candidate_result)

        if candidate.end_think and not candidate.text:
            # End-of-thinking proposal: the base model confirms or continues.
            confirm_result, confirm = _generate_piece(base, request, config)
            confirm_s = _charge_generation(ledger, "base-gen", base, prompt, confirm_result)
            if confirm.end_think and not confirm.text:
                answer_latency += speculate_s + confirm_s
                state.phase = Phase.ANSWERING
                break
            text, tokens, hit_budget = _fit_budget(confirm, remaining)
            ledger.extend("base-gen", prompt + text)
            step = ReasoningStep(
                index=step_index,
                text=text,
                token_count=tokens,
                producer=StepProducer.BASE,
                score=None,
                accepted=True,
                latency=LatencyBreakdown(speculate_s=speculate_s, fallback_s=confirm_s),
            )
            _retain(state, step, outcomes, trace, StepAction.REJECTED_THEN_REGENERATED)
            if hit_budget:
                budget_exhausted = True
                state.phase = Phase.ANSWERING
            elif confirm.end_think:
                state.phase = Phase.ANSWERING
            step_index += 1
            continue

        verification = VerificationRequest(
            problem=problem, cot_prefix=cot, candidate_step=candidate.text
        )
        score, measured_verify_s = _score_candidate(base, verification)
        if measured_verify_s is None:
            verify_s = _charge_verification(ledger, base, problem, cot, candidate.token_count)
        else:
            verify_s = measured_verify_s

        decision = (
            Decision.REJECT
            if score is None
            else decide_acceptance(score, config.threshold)
        )

        if decision is Decision.ACCEPT:
            text, tokens, hit_budget = _fit_budget(candidate, remaining)
            if small.simulated:
                ledger.extend("small-gen", prompt + text)
            step = ReasoningStep(
                index=step_index,
                text=text,
                token_count=tokens,
                producer=StepProducer.SPECULATOR,
                score=score,
                accepted=True,
                latency=LatencyBreakdown(speculate_s=speculate_s, verify_s=verify_s),
            )
            _retain(state, step, outcomes, trace, StepAction.ACCEPTED_SPECULATION)
            if hit_budget:
                budget_exhausted = True
                state.phase = Phase.ANSWERING
            elif candidate.end_think:
                state.phase = Phase.ANSWERING
            step_index += 1
            continue

        # Rejected: keep the audit copy, regenerate from the same prefix.
        rejected.append(
            ReasoningStep(
                index=step_index,
                text=candidate.text,
                token_count=candidate.token_count,
                producer=StepProducer.SPECULATOR,
                score=score,
                accepted=False,
                latency=LatencyBreakdown(speculate_s=speculate_s, verify_s=verify_s),
            )
        )
        regen_result, regen = _generate_piece(base, request, config)
        fallback_s = _regen_fallback_seconds(
            ledger, config, small, base, prompt, regen_result, step_index, trace
        )
        if regen.end_think and not regen.text:
            answer_latency += speculate_s + verify_s + fallback_s
            state.phase = Phase.ANSWERING
            break
        text, tokens, hit_budget = _fit_budget(regen, remaining)
        ledger.extend("base-gen", prompt + text)
        step = ReasoningStep(
            index=step_index,
            text=text,
            token_count=tokens,
            producer=StepProducer.BASE,
            score=None,
            accepted=True,
            latency=LatencyBreakdown(
                speculate_s=speculate_s, verify_s=verify_s, fallback_s=fallback_s
            ),
        )
        _retain(state, step, outcomes, trace, StepAction.REJECTED_THEN_REGENERATED)
        trace[-1]["rejected_token_count"] = candidate.token_count
        trace[-1]["rejected_score"] = None if score is None else score.value
        if hit_budget:
            budget_exhausted = True
            state.phase = Phase.ANSWERING
        elif regen.end_think:
            state.phase = Phase.ANSWERING
        step_index += 1

    return answer_latency, budget_exhausted


def _retain(
    state: TrajectoryState,
    step: ReasoningStep,
    outcomes: list[StepOutcome],
    trace: list[dict],
    action: StepAction,
) -> None:
    outcome = StepOutcome(step, action)
    state.retained_steps.append(step)
    state.thinking_tokens_used += step.token_count
    outcomes.append(outcome)
    trace.append(outcome.trace_record())


def _generate_answer(
    config: EngineConfig,
    state: TrajectoryState,
    backend: Backend,
    ledger: _PrefixLedger,
) -> float:
    """Answer phase: generate the post-thinking answer; its tokens do not
    count against the thinking budget.
    """
    state.phase = Phase.ANSWERING
    prompt = render_generation_prompt(state.problem, state.cot_text(), thinking_done=True)
    request = GenerationRequest(
        prompt=prompt,
        max_tokens=ANSWER_MAX_TOKENS,
        temperature=config.temperature,
        seed_hint=config.seed,
    )
    result = backend.generate_step(request)
    seconds = _charge_generation(ledger, "base-gen", backend, prompt, result)
    ledger.extend("base-gen", prompt + result.text)
    state.final_answer = result.text
    state.phase = Phase.DONE
    return seconds


def run_vanilla(
    config: EngineConfig,
    problem: str,
    backend: Backend,
    draft: Backend | None = None,
    token_speculative: bool = False,
) -> TrajectoryResult:
    """Vanilla single-model inference: the given backend produces every step
    and the answer, with no scoring. With ``token_speculative`` (simulated
    backends only), decode cost is priced through speculation rounds using
    ``draft`` as the drafter; the text is unchanged (lossless).
    """
    try:
        return _run_vanilla(config, problem, backend, draft, token_speculative)
    except BackendError as exc:
        raise _with_context(exc, problem, None) from exc


def _run_vanilla(
    config: EngineConfig,
    problem: str,
    backend: Backend,
    draft: Backend | None,
    token_speculative: bool,
) -> TrajectoryResult:
    if token_speculative and draft is None:
        raise ValueError("token_speculative runs need a draft backend")
    if token_speculative:
        scheme = Scheme.SPEC_DECODE
    elif backend.profile.role is BackendRole.SMALL:
        scheme = Scheme.SMALL_ONLY
    else:
        scheme = Scheme.BASE_ONLY
    producer = (
        StepProducer.SPECULATOR
        if backend.profile.role is BackendRole.SMALL
        else StepProducer.BASE
    )

    state = TrajectoryState(problem=problem, budget=config.token_budget)
    ledger = _PrefixLedger()
    outcomes: list[StepOutcome] = []
    trace: list[dict] = []
    answer_latency = 0.0
    budget_exhausted = False
    step_index = 0
    drafted_total = 0
    accepted_total = 0

    agreement = getattr(backend, "token_agreement_prob", None)
    use_rounds = token_speculative and backend.simulated and agreement is not None

    def generation_seconds(prompt: str, result) -> float:
        nonlocal drafted_total, accepted_total
        if not backend.simulated:
            return result.measured_latency_s
        fresh = ledger.charge("gen", prompt, backend)
        prefill_s = fresh / backend.profile.prefill_tokens_per_s
        if use_rounds and result.token_count > 0:
            rng = derive_rng(
                "vanilla-rounds", backend.profile.name, config.seed, step_index
            )
            rounds = simulate_regen_rounds(
                result.token_count, config.draft_length, agreement, rng
            )
            trace.append({"kind": "rounds", "step_index": step_index, "rounds": rounds})
            drafted_total += sum(d for d, _a in rounds)
            accepted_total += sum(a for _d, a in rounds)
            return prefill_s + rounds_latency(rounds, draft.profile, backend.profile)
        return prefill_s + result.measured_latency_s

    while state.phase is Phase.THINKING:
        remaining = state.budget - state.thinking_tokens_used
        if remaining <= 0:
            budget_exhausted = True
            state.phase = Phase.ANSWERING
            break
        prompt = render_generation_prompt(problem, state.cot_text())
        request = _build_request(prompt, config)
        result, piece = _generate_piece(backend, request, config)
        seconds = generation_seconds(prompt, result)
        if piece.end_think and not piece.text:
            answer_latency += seconds
            state.phase = Phase.ANSWERING
            break
        text, tokens, hit_budget = _fit_budget(piece, remaining)
        ledger.extend("gen", prompt + text)
        if producer is StepProducer.SPECULATOR:
            latency = LatencyBreakdown(speculate_s=seconds)
            action = StepAction.ACCEPTED_SPECULATION
        else:
            latency = LatencyBreakdown(fallback_s=seconds)
            action = StepAction.FORCED_BASE
        step = ReasoningStep(
            index=step_index,
            text=text,
            token_count=tokens,
            producer=producer,
            score=None,
            accepted=True,
            latency=latency,
        )
        _retain(state, step, outcomes, trace, action)
        if hit_budget:
            budget_exhausted = True
            state.phase = Phase.ANSWERING
        elif piece.end_think:
            state.phase = Phase.ANSWERING
        step_index += 1

    # Answer comes from the same backend in vanilla runs.
    state.phase = Phase.ANSWERING
    prompt = render_generation_prompt(problem, state.cot_text(), thinking_done=True)
    request = GenerationRequest(
        prompt=prompt,
        max_tokens=ANSWER_MAX_TOKENS,
        temperature=config.temperature,
        seed_hint=config.seed,
    )
    result = backend.generate_step(request)
    step_index += 1
    answer_latency += generation_seconds(prompt, result)
    ledger.extend("gen", prompt + result.text)
    state.final_answer = result.text
    state.phase = Phase.DONE

    if scheme is Scheme.SPEC_DECODE:
        accepted_fraction = accepted_total / drafted_total if drafted_total else None
    else:
        accepted_fraction = None
    total_latency_s = (
        sum(s.latency.total_s for s in state.retained_steps) + answer_latency
    )
    metrics = RunMetrics(
        latency_s=total_latency_s,
        thinking_tokens=state.thinking_tokens_used,
        accepted_fraction=accepted_fraction,
        rejected_count=0,
        correct=False,
        scheme=scheme,
        budget_exhausted=budget_exhausted,
    )
    return TrajectoryResult(
        state=state,
        outcomes=outcomes,
        metrics=metrics,
        rejected_steps=[],
        answer_latency_s=answer_latency,
        trace=trace,
    )


def validate_trajectory(result: TrajectoryResult, config: EngineConfig) -> None:
    """Check the run invariants; raises ValueError on the first violation.

    Covers budget safety, token accounting, outcome ordering, audit
    completeness, score/producer coherence for speculation schemes, and the
    exact latency identity (retained step totals plus answer phase).
    """
    state = result.state
    if state.phase is not Phase.DONE:
        raise ValueError(f"trajectory ended in phase {state.phase.value}")
    if state.thinking_tokens_used > state.budget:
        raise ValueError("thinking tokens exceed the budget")
    if state.thinking_tokens_used != sum(s.token_count for s in state.retained_steps):
        raise ValueError("thinking_tokens_used disagrees with retained steps")
    if [o.step for o in result.outcomes] != state.retained_steps:
        raise ValueError("outcome ordering disagrees with retained steps")
    retained_ids = {id(s) for s in state.retained_steps}
    for step in result.rejected_steps:
        if id(step) in retained_ids:
            raise ValueError("a rejected step appears in the retained list")
        if step.accepted:
            raise ValueError("rejected steps must have accepted=False")
    for step in state.retained_steps:
        if not step.accepted:
            raise ValueError("retained steps must have accepted=True")
    if result.metrics.scheme in (Scheme.SPEC_REASON, Scheme.SPEC_REASON_DECODE):
        for step in state.retained_steps:
            if step.producer is StepProducer.SPECULATOR and step.score is None:
                raise ValueError("retained speculator steps must carry a score")
        rejected_count = sum(
            1 for o in result.outcomes if o.action is StepAction.REJECTED_THEN_REGENERATED
        )
        # A final rejection may end thinking without a retained regeneration.
        if len(result.rejected_steps) > rejected_count + 1:
            raise ValueError("more audit rejections than regeneration outcomes")
    expected_total = (
        sum(s.latency.total_s for s in state.retained_steps) + result.answer_latency_s
    )
    if abs(expected_total - result.metrics.latency_s) > 1e-9:
        raise ValueError("latency total disagrees with step breakdowns plus answer")
