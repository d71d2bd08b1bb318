"""Step-level speculative reasoning: a small model drafts reasoning steps, a
base model scores each one with a single digit, and rejected steps fall back
to base-model regeneration (optionally accelerated by token-level
speculation). Ships with a deterministic simulator and a sweep harness.
"""

from .backends import (
    Backend,
    BackendError,
    BackendMisbehavior,
    GenerationRequest,
    GenerationResult,
    OpenAICompletionsBackend,
    ScoreParseFailure,
    SimulatedBackend,
    TransportError,
    VerificationRequest,
)
from .bench import (
    Knob,
    MismatchedRunSets,
    MissingSamples,
    RunRecord,
    SweepSpec,
    pass_at_1,
    run_scheme,
    run_sweep,
    speedup,
)
from .core import (
    AcceptanceThreshold,
    BackendProfile,
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
    total_latency,
)
from .engine import (
    StepAction,
    StepOutcome,
    TrajectoryResult,
    force_first_n,
    run_trajectory,
    run_vanilla,
    segment_step,
    validate_trajectory,
)
from .simlab import (
    ChainTask,
    SimJudgeSpec,
    SimModelSpec,
    expected_step_latency,
    ground_truth,
    make_tasks,
    simulate_judge_score,
    simulate_step_text,
    step_latency,
)
from .specdecode import (
    DraftRound,
    SyntheticTokenModel,
    UnsupportedBackend,
    greedy_decode,
    speculative_decode,
)

__version__ = "0.1.0"
