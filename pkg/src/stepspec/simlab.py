"""Synthetic reasoning world with exact ground truth, plus the latency model.

Tasks are iterated affine chains s[k+1] = (a_k * s[k] + b_k) mod m, so every
intermediate step has a checkable value. That makes the simulated judge exact,
grading exact, and whole runs pure functions of (config, task, seed) - the
desk-scale stand-in for benchmarks whose steps cannot be machine-checked.

Latency is a two-parameter model per backend: decode seconds/token plus
prefill tokens/second. Absolute times are modeling choices; only ratios are
meaningful, and the ``profile`` CLI verb can calibrate the parameters against
a live server.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .core import BackendProfile, BackendRole, UtilityScore
from .prompts import VERIFY_TAIL_TOKENS
from .seeding import derive_rng

# Structural tokens in a normal step line: "Step k: sk = v."
CLAIM_TOKENS = 5

# A state claim as it appears in problem statements and step lines.
CLAIM_RE = re.compile(r"\bs(\d+) = (-?\d+)[.,]")
ANSWER_RE = re.compile(r"final answer is (-?\d+)")

_PROBLEM_RE = re.compile(
    r"Iterated affine chain modulo (\d+)\. Start: s0 = (-?\d+)\.", re.DOTALL
)
_COEFF_RE = re.compile(r"\((\d+),(\d+)\)")


@dataclass(frozen=True)
class ChainTask:
    """An affine-recurrence task: s[k+1] = (a_k * s[k] + b_k) mod modulus.

    The modulus must be at least 2 so a wrong claim can differ from the truth.
    """

    modulus: int
    start: int
    coefficients: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if self.modulus < 2:
            raise ValueError("modulus must be >= 2")
        if not 0 <= self.start < self.modulus:
            raise ValueError("start must lie in [0, modulus)")
        if not self.coefficients:
            raise ValueError("a chain needs at least one step")
        object.__setattr__(
            self, "coefficients", tuple((int(a), int(b)) for a, b in self.coefficients)
        )

    @property
    def length(self) -> int:
        return len(self.coefficients)

    def final_answer(self) -> int:
        return ground_truth(self, self.length)

    def problem_text(self) -> str:
        rules = " ".join(f"({a},{b})" for a, b in self.coefficients)
        return (
            f"Iterated affine chain modulo {self.modulus}. Start: s0 = {self.start}. "
            f"Each step k maps the previous state through (a,b): new state = "
            f"(a*old + b) mod {self.modulus}. Per-step coefficients: {rules} . "
            f"Report s{self.length}."
        )

    @classmethod
    def from_problem_text(cls, text: str) -> "ChainTask":
        match = _PROBLEM_RE.search(text)
        if match is None:
            raise ValueError("text does not describe a chain task")
        coefficients = tuple(
            (int(a), int(b)) for a, b in _COEFF_RE.findall(text)
        )
        return cls(modulus=int(match.group(1)), start=int(match.group(2)), coefficients=coefficients)

    def to_dict(self) -> dict:
        return {
            "modulus": self.modulus,
            "start": self.start,
            "coefficients": [list(pair) for pair in self.coefficients],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChainTask":
        return cls(
            modulus=data["modulus"],
            start=data["start"],
            coefficients=tuple(tuple(pair) for pair in data["coefficients"]),
        )


def ground_truth(task: ChainTask, i: int) -> int:
    """State s_i of the chain, 0 <= i <= length."""
    if not 0 <= i <= task.length:
        raise ValueError(f"state index {i} out of range [0, {task.length}]")
    state = task.start
    for a, b in task.coefficients[:i]:
        state = (a * state + b) % task.modulus
    return state


def ground_truth_states(task: ChainTask) -> list[int]:
    """All states s_0 .. s_N."""
    states = [task.start]
    for a, b in task.coefficients:
        states.append((a * states[-1] + b) % task.modulus)
    return states


def parse_claims(text: str) -> list[tuple[int, int]]:
    """All (index, value) state claims in the text, in order of appearance."""
    return [(int(i), int(v)) for i, v in CLAIM_RE.findall(text)]


@dataclass(frozen=True)
class SimModelSpec:
    """Behavior of one simulated model on chain tasks.

    ``per_step_error_prob`` is the chance a step claims a perturbed value;
    ``verbosity`` is the expected filler-token count per step (the small model
    defaults lower than the base); ``reflection_prob`` is the chance a step
    following a wrong retained claim corrects it instead.
    """

    per_step_error_prob: float
    verbosity: float
    profile: BackendProfile
    reflection_prob: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.per_step_error_prob <= 1:
            raise ValueError("per_step_error_prob must be in [0, 1]")
        if not 0 <= self.reflection_prob <= 1:
            raise ValueError("reflection_prob must be in [0, 1]")
        if self.verbosity < 1:
            raise ValueError("verbosity must be >= 1")


@dataclass(frozen=True)
class SimJudgeSpec:
    """Scoring behavior of the simulated judge.

    Correct steps always score ``correct_score``; wrong steps score uniformly
    in [0, wrong_score_max], except with probability ``noise`` they are
    mistaken for correct (false accepts at high thresholds).
    """

    correct_score: UtilityScore = UtilityScore(9)
    wrong_score_max: int = 3
    noise: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.wrong_score_max < self.correct_score.value:
            raise ValueError("wrong_score_max must be in [0, correct_score)")
        if not 0 <= self.noise <= 1:
            raise ValueError("noise must be in [0, 1]")


_FILLER = (
    "so", "the", "running", "value", "carries", "through", "after",
    "applying", "this", "rule", "and", "reducing", "by", "the", "modulus",
    "we", "keep", "track", "of", "terms",
)


def _filler_suffix(rng: np.random.Generator, verbosity: float) -> str:
    count = int(rng.poisson(verbosity))
    if count == 0:
        return ""
    picks = rng.integers(0, len(_FILLER), size=count)
    return " " + " ".join(_FILLER[i] for i in picks) + "."


def simulate_step_text(
    spec: SimModelSpec,
    task: ChainTask,
    step_index: int,
    prior_state_claimed: int,
    rng: np.random.Generator,
) -> tuple[str, bool]:
    """One step line claiming state s_{step_index+1}, plus a correctness flag.

    The claim is wrong with probability ``per_step_error_prob`` (value shifted
    by a seeded nonzero offset mod m). If the prior claimed state was wrong,
    the step instead emits a correction to the true state with probability
    ``reflection_prob``.
    """
    if not 0 <= step_index < task.length:
        raise ValueError(f"step index {step_index} out of range")
    claim_index = step_index + 1
    true_prior = ground_truth(task, step_index)
    true_next = ground_truth(task, claim_index)

    reflecting = (
        prior_state_claimed != true_prior
        and spec.reflection_prob > 0.0
        and rng.random() < spec.reflection_prob
    )
    if reflecting:
        claimed, correct = true_next, True
        head = (
            f"Wait, s{step_index} looks off; correcting from the true chain: "
            f"s{claim_index} = {claimed}."
        )
    else:
        if spec.per_step_error_prob > 0.0 and rng.random() < spec.per_step_error_prob:
            offset = int(rng.integers(1, task.modulus))
            claimed = (true_next + offset) % task.modulus
            correct = False
        else:
            claimed, correct = true_next, True
        head = f"Step {claim_index}: s{claim_index} = {claimed}."

    text = head + _filler_suffix(rng, spec.verbosity) + "\n"
    return text, correct


def simulate_answer_text(last_claim_index: int, last_claim_value: int) -> str:
    """Post-thinking answer: reports the last computed state as the result."""
    return (
        f"Combining the chain of steps, the last computed state is "
        f"s{last_claim_index} with value {last_claim_value}; "
        f"final answer is {last_claim_value}.\n"
    )


def simulate_judge_score(
    judge: SimJudgeSpec, step_correct: bool, rng: np.random.Generator
) -> UtilityScore:
    if step_correct:
        return judge.correct_score
    if judge.noise > 0.0 and rng.random() < judge.noise:
        return judge.correct_score
    return UtilityScore(int(rng.integers(0, judge.wrong_score_max + 1)))


def step_latency(profile: BackendProfile, decoded_tokens: float, prefilled_tokens: float) -> float:
    """Modeled seconds for decoding plus prefilling the given token counts."""
    if decoded_tokens < 0 or prefilled_tokens < 0:
        raise ValueError("token counts must be >= 0")
    return (
        decoded_tokens * profile.decode_s_per_token
        + prefilled_tokens / profile.prefill_tokens_per_s
    )


def expected_step_latency(
    alpha: float,
    small: SimModelSpec,
    base: SimModelSpec,
    verify_overhead_tokens: int = VERIFY_TAIL_TOKENS,
) -> float:
    """Closed-form steady-state cost of one step slot at acceptance rate alpha:
    speculate + verify + (1 - alpha) * regenerate, each term priced by
    :func:`step_latency` over expected token counts.
    """
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    mean_small = CLAIM_TOKENS + small.verbosity
    mean_base = CLAIM_TOKENS + base.verbosity
    mean_prev = alpha * mean_small + (1 - alpha) * mean_base
    t_speculate = step_latency(small.profile, mean_small, mean_prev)
    t_verify = step_latency(base.profile, 1, mean_prev + mean_small + verify_overhead_tokens)
    t_regen = step_latency(base.profile, mean_base, 0)
    return t_speculate + t_verify + (1 - alpha) * t_regen


def sample_step_latencies(
    alpha: float,
    n_steps: int,
    seed: int,
    small: SimModelSpec,
    base: SimModelSpec,
    verify_overhead_tokens: int = VERIFY_TAIL_TOKENS,
) -> np.ndarray:
    """Monte-Carlo per-step latencies matching :func:`expected_step_latency`
    in expectation (same token distributions, same pricing).
    """
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    rng = derive_rng("step-latency-mc", seed, alpha)
    prev_small = CLAIM_TOKENS + rng.poisson(small.verbosity, n_steps)
    prev_base = CLAIM_TOKENS + rng.poisson(base.verbosity, n_steps)
    prev = np.where(rng.random(n_steps) < alpha, prev_small, prev_base)
    candidate = CLAIM_TOKENS + rng.poisson(small.verbosity, n_steps)
    regen = CLAIM_TOKENS + rng.poisson(base.verbosity, n_steps)
    rejected = rng.random(n_steps) >= alpha

    speculate = (
        candidate * small.profile.decode_s_per_token
        + prev / small.profile.prefill_tokens_per_s
    )
    verify = base.profile.decode_s_per_token + (
        prev + candidate + verify_overhead_tokens
    ) / base.profile.prefill_tokens_per_s
    fallback = np.where(rejected, regen * base.profile.decode_s_per_token, 0.0)
    return speculate + verify + fallback


def make_tasks(count: int, length: int, modulus: int = 97, seed: int = 0) -> list[ChainTask]:
    """Seeded batch of random chain tasks of a fixed length."""
    if count < 1 or length < 1:
        raise ValueError("count and length must be >= 1")
    rng = derive_rng("tasks", seed, count, length, modulus)
    tasks = []
    for _ in range(count):
        start = int(rng.integers(0, modulus))
        coefficients = tuple(
            (int(rng.integers(1, modulus)), int(rng.integers(0, modulus)))
            for _ in range(length)
        )
        tasks.append(ChainTask(modulus=modulus, start=start, coefficients=coefficients))
    return tasks


# Default cost profiles. The decode-speed ratio between base and small models
# follows a 32B/1.5B parameter-count scaling assumption for memory-bound
# decode; treat absolute seconds as arbitrary units and calibrate real
# deployments with the `profile` CLI verb.
DECODE_SPEED_RATIO = 21.3

DEFAULT_BASE_PROFILE = BackendProfile(
    name="sim-base-32b",
    role=BackendRole.BASE,
    decode_s_per_token=0.05,
    prefill_tokens_per_s=2000.0,
)
DEFAULT_SMALL_PROFILE = BackendProfile(
    name="sim-small-1b5",
    role=BackendRole.SMALL,
    decode_s_per_token=0.05 / DECODE_SPEED_RATIO,
    prefill_tokens_per_s=2000.0 * DECODE_SPEED_RATIO,
)

DEFAULT_SMALL_SPEC = SimModelSpec(
    per_step_error_prob=0.3,
    verbosity=15.0,
    profile=DEFAULT_SMALL_PROFILE,
    reflection_prob=0.0,
)
DEFAULT_BASE_SPEC = SimModelSpec(
    per_step_error_prob=0.0,
    verbosity=24.0,
    profile=DEFAULT_BASE_PROFILE,
    reflection_prob=0.0,
)
DEFAULT_JUDGE_SPEC = SimJudgeSpec()
