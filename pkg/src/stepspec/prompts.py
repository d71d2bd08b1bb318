"""Prompt templates and the token-count scheme shared by backends and accounting.

Token counting is deliberately simple: one token per whitespace-delimited
unit. Simulated runs use it as the tokenizer; HTTP runs use it only as an
accounting approximation (the server's reported usage wins where available).
"""

from __future__ import annotations

from .core import END_THINK_MARKER, THINK_OPEN_MARKER


def count_tokens(text: str) -> int:
    return len(text.split())


def truncate_tokens(text: str, max_tokens: int) -> str:
    """First ``max_tokens`` whitespace-delimited units of ``text``."""
    if max_tokens <= 0:
        return ""
    parts = text.split()
    if len(parts) <= max_tokens:
        return text
    return " ".join(parts[:max_tokens])


def render_generation_prompt(problem: str, cot: str, thinking_done: bool = False) -> str:
    prompt = f"{problem}\n{THINK_OPEN_MARKER}\n{cot}"
    if thinking_done:
        prompt += f"{END_THINK_MARKER}\n"
    return prompt


def split_generation_prompt(prompt: str) -> tuple[str, str, bool]:
    """Invert :func:`render_generation_prompt` -> (problem, cot, answering)."""
    opener = f"\n{THINK_OPEN_MARKER}\n"
    if opener in prompt:
        problem, cot = prompt.split(opener, 1)
    else:
        problem, cot = prompt, ""
    answering = END_THINK_MARKER in cot
    if answering:
        cot = cot.split(END_THINK_MARKER, 1)[0]
    return problem, cot, answering


# Verification prompt. The wording is versioned because prefill accounting
# (the "new tokens per verification" figure) depends on it; override via the
# HTTP backend constructor if a deployment needs different phrasing, but keep
# the final literal line so single-digit extraction stays reliable.
VERIFY_PROMPT_VERSION = "v1"
VERIFY_PROMPT_V1 = """You are grading one candidate step of a running solution.

Problem:
{problem}

Reasoning so far:
{cot_prefix}

Candidate next step:
{candidate_step}

Judge only the candidate step. A high score means the step is correct,
relevant, and moves the reasoning forward; a low score means it is wrong,
redundant, or off-track.
Respond with a single digit 0-9:"""


def render_verification_prompt(
    problem: str,
    cot_prefix: str,
    candidate_step: str,
    template: str = VERIFY_PROMPT_V1,
) -> str:
    return template.format(
        problem=problem, cot_prefix=cot_prefix, candidate_step=candidate_step
    )


def verification_sections(template: str = VERIFY_PROMPT_V1) -> tuple[str, str, str, str]:
    """Split a verification template into (head, mid1, mid2, tail) around its
    three placeholders, in order: problem, cot_prefix, candidate_step.
    """
    head, rest = template.split("{problem}", 1)
    mid1, rest = rest.split("{cot_prefix}", 1)
    mid2, tail = rest.split("{candidate_step}", 1)
    return head, mid1, mid2, tail


def verification_overhead_tokens(template: str = VERIFY_PROMPT_V1) -> tuple[int, int]:
    """(head_tokens, tail_tokens) of template text charged around the shared
    problem+prefix region: head once per trajectory, tail on every call.
    """
    head, mid1, mid2, tail = verification_sections(template)
    return count_tokens(head) + count_tokens(mid1), count_tokens(mid2) + count_tokens(tail)


VERIFY_HEAD_TOKENS, VERIFY_TAIL_TOKENS = verification_overhead_tokens()
