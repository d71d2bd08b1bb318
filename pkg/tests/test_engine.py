"""Engine loop: segmentation, forcing, fallback equivalence, budget, accounting."""

import dataclasses
import statistics

import pytest

from stepspec.backends.base import (
    Backend,
    GenerationRequest,
    GenerationResult,
    ScoreParseFailure,
)
from stepspec.backends.simulated import SimulatedBackend
from stepspec.core import (
    AcceptanceThreshold,
    EngineConfig,
    Phase,
    Scheme,
    StepProducer,
)
from stepspec.engine import (
    StepAction,
    force_first_n,
    run_trajectory,
    run_vanilla,
    segment_step,
    validate_trajectory,
)
from stepspec.simlab import DEFAULT_SMALL_SPEC, make_tasks, parse_claims

CONFIG = EngineConfig()


class TestSegmentStep:
    def test_first_boundary_wins_and_keeps_trailing_newlines(self):
        seg = segment_step("Compute 2+3 = 5.\n\nNext,", CONFIG)
        assert seg.text == "Compute 2+3 = 5.\n\n"
        assert not seg.end_think
        assert not seg.truncated

    def test_no_boundary_truncates_at_max_step_tokens(self):
        config = dataclasses.replace(CONFIG, max_step_tokens=4)
        seg = segment_step("one two three four five six", config)
        assert seg.text == "one two three four"
        assert seg.truncated

    def test_end_think_marker_ends_the_step(self):
        seg = segment_step("last point.</think>\nanswer text", CONFIG)
        assert seg.text == "last point."
        assert seg.end_think

    def test_boundary_before_marker_wins(self):
        seg = segment_step("a.\nb</think>", CONFIG)
        assert seg.text == "a.\n"
        assert not seg.end_think

    def test_simulated_step_is_one_line(self, small_backend, tasks):
        from stepspec.prompts import render_generation_prompt

        prompt = render_generation_prompt(tasks[0].problem_text(), "")
        result = small_backend.generate_step(
            GenerationRequest(prompt=prompt, max_tokens=256, seed_hint=1)
        )
        seg = segment_step(result.text, CONFIG)
        assert seg.text == result.text
        assert seg.text.count("\n") == 1


class TestForceFirstN:
    def test_zero_never_forces(self):
        assert not any(force_first_n(CONFIG, i) for i in range(50))

    def test_boundary_at_n(self):
        config = dataclasses.replace(CONFIG, force_first_n=10)
        assert force_first_n(config, 9)
        assert not force_first_n(config, 10)

    @pytest.mark.parametrize("n", [0, 3, 10, 40])
    def test_forced_step_count_matches_min_n_steps(self, n, small_backend, base_backend, tasks):
        config = EngineConfig(seed=5, force_first_n=n)
        result = run_trajectory(config, tasks[0].problem_text(), small_backend, base_backend)
        forced = sum(1 for o in result.outcomes if o.action is StepAction.FORCED_BASE)
        assert forced == min(n, len(result.outcomes))


class TestFallbackEquivalence:
    def test_threshold_ten_matches_pure_base(self, small_backend, base_backend, tasks):
        for i, task in enumerate(tasks[:10]):
            config = EngineConfig(seed=100 + i, threshold=AcceptanceThreshold(10))
            spec = run_trajectory(config, task.problem_text(), small_backend, base_backend)
            pure = run_vanilla(config, task.problem_text(), base_backend)
            assert spec.state.cot_text() == pure.state.cot_text()
            assert spec.state.final_answer == pure.state.final_answer
            assert all(
                o.action is StepAction.REJECTED_THEN_REGENERATED for o in spec.outcomes
            )

    def test_threshold_zero_retains_only_speculator_steps(
        self, small_backend, base_backend, tasks
    ):
        for i, task in enumerate(tasks[:10]):
            config = EngineConfig(seed=200 + i, threshold=AcceptanceThreshold(0))
            result = run_trajectory(config, task.problem_text(), small_backend, base_backend)
            assert result.state.retained_steps
            assert all(
                s.producer is StepProducer.SPECULATOR for s in result.state.retained_steps
            )
            assert result.rejected_steps == []


class TestThresholdCoupling:
    def test_accepted_count_non_increasing_in_threshold(
        self, small_backend, base_backend, tasks
    ):
        # reflection off (the default specs), so candidates are identical
        # across thresholds and the acceptance sets are nested
        for seed in range(8):
            counts = []
            for value in (0, 3, 5, 7, 9, 10):
                config = EngineConfig(seed=seed, threshold=AcceptanceThreshold(value))
                result = run_trajectory(
                    config, tasks[seed % len(tasks)].problem_text(), small_backend, base_backend
                )
                counts.append(
                    sum(
                        1
                        for o in result.outcomes
                        if o.action is StepAction.ACCEPTED_SPECULATION
                    )
                )
            assert all(a >= b for a, b in zip(counts, counts[1:])), counts


class TestAcceptanceCalibration:
    def test_accepted_fraction_tracks_error_rate(self, base_backend):
        # small-step acceptance configured at 0.70; retained-speculator share
        # across 200 seeded trajectories stays within +/-0.05
        small = SimulatedBackend(DEFAULT_SMALL_SPEC, seed=0)
        tasks = make_tasks(200, 12, seed=31)
        fractions = []
        for i, task in enumerate(tasks):
            config = EngineConfig(seed=i)
            result = run_trajectory(config, task.problem_text(), small, base_backend)
            fractions.append(result.metrics.accepted_fraction)
        assert 0.65 <= statistics.fmean(fractions) <= 0.75


class TestBudget:
    def test_tight_budget_truncates_and_flags(self, small_backend, base_backend, tasks):
        config = EngineConfig(seed=3, token_budget=40)
        result = run_trajectory(config, tasks[0].problem_text(), small_backend, base_backend)
        validate_trajectory(result, config)
        assert result.metrics.budget_exhausted
        assert result.state.thinking_tokens_used <= 40
        assert result.state.phase is Phase.DONE
        assert result.state.final_answer  # answering proceeded anyway

    def test_no_retained_step_straddles_budget(self, small_backend, base_backend, tasks):
        for budget in (10, 55, 120):
            config = EngineConfig(seed=9, token_budget=budget)
            result = run_trajectory(
                config, tasks[1].problem_text(), small_backend, base_backend
            )
            assert result.state.thinking_tokens_used <= budget
            running = 0
            for step in result.state.retained_steps:
                running += step.token_count
                assert running <= budget


class TestAuditAndAccounting:
    def test_every_candidate_retained_or_rejected(self, small_backend, base_backend, tasks):
        config = EngineConfig(seed=17, threshold=AcceptanceThreshold(7))
        result = run_trajectory(config, tasks[2].problem_text(), small_backend, base_backend)
        accepted = [
            o.step for o in result.outcomes if o.action is StepAction.ACCEPTED_SPECULATION
        ]
        regenerated = [
            o for o in result.outcomes if o.action is StepAction.REJECTED_THEN_REGENERATED
        ]
        assert len(result.rejected_steps) == len(regenerated)
        assert all(not s.accepted for s in result.rejected_steps)
        assert all(s.accepted for s in accepted)

    def test_latency_identity_exact(self, small_backend, base_backend, tasks):
        config = EngineConfig(seed=23)
        result = run_trajectory(config, tasks[3].problem_text(), small_backend, base_backend)
        step_sum = sum(s.latency.total_s for s in result.state.retained_steps)
        assert result.metrics.latency_s == step_sum + result.answer_latency_s

    def test_validator_passes_all_schemes(self, small_backend, base_backend, tasks):
        problem = tasks[4].problem_text()
        for scheme_run in (
            lambda c: run_trajectory(c, problem, small_backend, base_backend),
            lambda c: run_vanilla(c, problem, base_backend),
            lambda c: run_vanilla(c, problem, small_backend),
            lambda c: run_vanilla(
                c, problem, base_backend, draft=small_backend, token_speculative=True
            ),
        ):
            config = EngineConfig(seed=31)
            validate_trajectory(scheme_run(config), config)

    def test_rejected_tokens_do_not_consume_budget(self, small_backend, base_backend, tasks):
        config = EngineConfig(seed=37, threshold=AcceptanceThreshold(10))
        result = run_trajectory(config, tasks[5].problem_text(), small_backend, base_backend)
        assert result.rejected_steps
        retained_tokens = sum(s.token_count for s in result.state.retained_steps)
        assert result.state.thinking_tokens_used == retained_tokens

    def test_trace_records_cover_outcomes(self, small_backend, base_backend, tasks):
        config = EngineConfig(seed=41)
        result = run_trajectory(config, tasks[6].problem_text(), small_backend, base_backend)
        steps = [t for t in result.trace if t["kind"] == "step"]
        assert len(steps) == len(result.outcomes)
        for record, outcome in zip(steps, result.outcomes):
            assert record["index"] == outcome.step.index
            assert record["action"] == outcome.action.value
            assert record["token_count"] == outcome.step.token_count


class _ParseFailingJudge(Backend):
    """Base-role stub whose scoring always fails to parse."""

    simulated = True

    def __init__(self, inner: SimulatedBackend):
        self.inner = inner
        self.profile = inner.profile

    def generate_step(self, request: GenerationRequest) -> GenerationResult:
        return self.inner.generate_step(request)

    def score_step(self, request):
        raise ScoreParseFailure("always fails")


class TestScoreParseFailure:
    def test_parse_failure_maps_to_reject(self, small_backend, base_backend, tasks):
        judge = _ParseFailingJudge(base_backend)
        config = EngineConfig(seed=43)
        result = run_trajectory(config, tasks[7].problem_text(), small_backend, judge)
        validate_trajectory(result, config)
        assert result.state.retained_steps
        assert all(
            s.producer is not StepProducer.SPECULATOR for s in result.state.retained_steps
        )
        assert all(s.score is None for s in result.rejected_steps)


class TestRoleChecks:
    def test_backends_must_match_roles(self, small_backend, base_backend, tasks):
        with pytest.raises(ValueError):
            run_trajectory(CONFIG, tasks[0].problem_text(), base_backend, base_backend)
        with pytest.raises(ValueError):
            run_trajectory(CONFIG, tasks[0].problem_text(), small_backend, small_backend)


class _FailingAfter(Backend):
    """Base-role stub that fails transport after a fixed number of calls."""

    simulated = True

    def __init__(self, inner, failures_start_at: int):
        self.inner = inner
        self.profile = inner.profile
        self.calls = 0
        self.failures_start_at = failures_start_at

    def generate_step(self, request):
        self.calls += 1
        if self.calls >= self.failures_start_at:
            from stepspec.backends.base import TransportError

            raise TransportError("connection reset")
        return self.inner.generate_step(request)

    def score_step(self, request):
        return self.inner.score_step(request)


class TestErrorContext:
    def test_backend_errors_carry_trajectory_position(
        self, small_backend, base_backend, tasks
    ):
        from stepspec.backends.base import TransportError

        flaky = _FailingAfter(base_backend, failures_start_at=2)
        config = EngineConfig(seed=67, threshold=AcceptanceThreshold(10))
        with pytest.raises(TransportError, match="step .* of problem"):
            run_trajectory(config, tasks[0].problem_text(), small_backend, flaky)


class TestVanillaRuns:
    def test_small_only_uses_small_for_answer(self, small_backend, tasks):
        config = EngineConfig(seed=47)
        result = run_vanilla(config, tasks[8].problem_text(), small_backend)
        assert result.metrics.scheme is Scheme.SMALL_ONLY
        assert result.metrics.accepted_fraction is None
        assert all(
            s.producer is StepProducer.SPECULATOR for s in result.state.retained_steps
        )

    def test_spec_decode_is_lossless_and_cheaper(self, small_backend, base_backend, tasks):
        config = EngineConfig(seed=53)
        plain = run_vanilla(config, tasks[9].problem_text(), base_backend)
        spec = run_vanilla(
            config,
            tasks[9].problem_text(),
            base_backend,
            draft=small_backend,
            token_speculative=True,
        )
        assert spec.state.cot_text() == plain.state.cot_text()
        assert spec.state.final_answer == plain.state.final_answer
        assert spec.metrics.latency_s < plain.metrics.latency_s
        assert spec.metrics.scheme is Scheme.SPEC_DECODE
        assert 0 < spec.metrics.accepted_fraction <= 1

    def test_spec_decode_requires_draft(self, base_backend, tasks):
        with pytest.raises(ValueError):
            run_vanilla(CONFIG, tasks[0].problem_text(), base_backend, token_speculative=True)


class TestHierarchical:
    def test_lossless_with_lower_or_equal_latency(self, small_backend, base_backend, tasks):
        for i, task in enumerate(tasks[:10]):
            config = EngineConfig(seed=300 + i)
            flat = run_trajectory(config, task.problem_text(), small_backend, base_backend)
            hier = run_trajectory(
                dataclasses.replace(config, hierarchical=True),
                task.problem_text(),
                small_backend,
                base_backend,
            )
            assert hier.state.cot_text() == flat.state.cot_text()
            assert hier.state.final_answer == flat.state.final_answer
            assert hier.metrics.latency_s <= flat.metrics.latency_s
            assert hier.metrics.scheme is Scheme.SPEC_REASON_DECODE

    def test_round_trace_emitted_on_rejections(self, small_backend, base_backend, tasks):
        config = EngineConfig(seed=59, hierarchical=True, threshold=AcceptanceThreshold(10))
        result = run_trajectory(config, tasks[0].problem_text(), small_backend, base_backend)
        rounds = [t for t in result.trace if t["kind"] == "rounds"]
        assert rounds  # every step was rejected, so every step regenerated in rounds
        for record in rounds:
            for drafted, accepted in record["rounds"]:
                assert 1 <= drafted <= config.draft_length
                assert 0 <= accepted <= drafted


class TestChainSemantics:
    def test_retained_chain_claims_are_sequential(self, small_backend, base_backend, tasks):
        config = EngineConfig(seed=61)
        result = run_trajectory(config, tasks[0].problem_text(), small_backend, base_backend)
        claims = parse_claims(result.state.cot_text())
        indexes = [i for i, _v in claims]
        assert indexes == list(range(1, len(indexes) + 1))
