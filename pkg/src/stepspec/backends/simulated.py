"""Deterministic simulated backends over the synthetic chain world.

A simulated backend is a pure function of its construction seed and the
request: randomness is keyed by (backend name, seed, request seed_hint, claim
index), never by call order, so concurrent trajectories and repeated calls
are bit-reproducible. Generation parses the chain task and prior claims out
of the prompt itself; judging recomputes ground truth from the problem text.
"""

from __future__ import annotations

from ..core import BackendRole, UtilityScore
from ..prompts import split_generation_prompt, truncate_tokens
from ..seeding import derive_rng
from ..simlab import (
    ChainTask,
    SimJudgeSpec,
    SimModelSpec,
    ground_truth,
    parse_claims,
    simulate_answer_text,
    simulate_judge_score,
    simulate_step_text,
)
from .base import (
    Backend,
    FinishReason,
    GenerationRequest,
    GenerationResult,
    VerificationRequest,
)


class SimulatedBackend(Backend):
    """Simulated model server for chain tasks.

    ``token_agreement_prob`` is the per-position chance a draft token matches
    this model's next token, used by the decode-level speculation latency
    model when this backend acts as the regeneration target.
    """

    simulated = True

    def __init__(
        self,
        model_spec: SimModelSpec,
        judge_spec: SimJudgeSpec | None = None,
        seed: int = 0,
        token_agreement_prob: float = 0.8,
    ) -> None:
        self.profile = model_spec.profile
        self.model_spec = model_spec
        self.judge_spec = judge_spec
        self.seed = seed
        if not 0 <= token_agreement_prob <= 1:
            raise ValueError("token_agreement_prob must be in [0, 1]")
        self.token_agreement_prob = token_agreement_prob

    def generate_step(self, request: GenerationRequest) -> GenerationResult:
        if not request.prompt:
            raise ValueError("prompt must be non-empty")
        problem, _cot, answering = split_generation_prompt(request.prompt)
        task = ChainTask.from_problem_text(problem)
        claims = parse_claims(request.prompt)
        last_index, last_value = claims[-1] if claims else (0, task.start)

        if answering:
            text = simulate_answer_text(last_index, last_value)
        else:
            next_claim = last_index + 1
            if next_claim > task.length:
                return GenerationResult(
                    text="",
                    token_count=0,
                    finish_reason=FinishReason.END_THINK,
                    measured_latency_s=0.0,
                )
            rng = derive_rng(
                "sim-gen", self.profile.name, self.seed, request.seed_hint, next_claim
            )
            text, _correct = simulate_step_text(
                self.model_spec, task, next_claim - 1, last_value, rng
            )

        finish = FinishReason.STOP
        token_count = self.count_tokens(text)
        if token_count > request.max_tokens:
            text = truncate_tokens(text, request.max_tokens)
            token_count = request.max_tokens
            finish = FinishReason.LENGTH
        return GenerationResult(
            text=text,
            token_count=token_count,
            finish_reason=finish,
            measured_latency_s=token_count * self.profile.decode_s_per_token,
        )

    def score_step(self, request: VerificationRequest) -> UtilityScore:
        if self.profile.role is not BackendRole.BASE or self.judge_spec is None:
            raise ValueError(f"backend {self.profile.name} cannot score steps")
        task = ChainTask.from_problem_text(request.problem)
        context_claims = parse_claims(request.problem + "\n" + request.cot_prefix)
        expected_index = (context_claims[-1][0] + 1) if context_claims else 1

        candidate_claims = parse_claims(request.candidate_step)
        correct = False
        if candidate_claims and expected_index <= task.length:
            claim_index, claim_value = candidate_claims[-1]
            correct = (
                claim_index == expected_index
                and claim_value == ground_truth(task, claim_index)
            )
        rng = derive_rng(
            "sim-judge",
            self.profile.name,
            self.seed,
            request.problem,
            expected_index,
            request.candidate_step,
        )
        return simulate_judge_score(self.judge_spec, correct, rng)
