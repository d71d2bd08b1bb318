"""Token-level draft/verify decoding (greedy, lossless) and its latency model.

``speculative_decode`` runs the real algorithm over objects exposing a
token-level ``greedy_next`` interface and is bit-identical to target-only
greedy decoding by construction. For step regeneration inside simulated runs,
``simulate_regen_rounds`` reproduces only the round *structure* (drafted and
accepted counts per round) so the latency model can price a regeneration
whose text is already fixed; the text itself never changes.

HTTP backends expose no token-level verification hooks, so decode-level
speculation there is a serving-engine concern (a config pass-through), and
passing one to ``speculative_decode`` raises ``UnsupportedBackend``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BackendProfile


class UnsupportedBackend(RuntimeError):
    """The given object exposes no token-level next-token interface."""


@dataclass(frozen=True)
class DraftRound:
    """One speculation round: drafted tokens, how many led the target's own
    greedy choice, and the target's bonus token.

    In steady state a round appends ``accepted_prefix_len + 1`` tokens; the
    final round of a sequence may omit the bonus (``bonus_token`` None) when a
    stop token or the length cap ends generation first.
    """

    drafted: tuple[int, ...]
    accepted_prefix_len: int
    bonus_token: int | None

    def __post_init__(self) -> None:
        if not 0 <= self.accepted_prefix_len <= len(self.drafted):
            raise ValueError("accepted_prefix_len must be in [0, len(drafted)]")


def _hash_token(*parts: object) -> int:
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big")


class SyntheticTokenModel:
    """Deterministic pseudo-random next-token map over a small vocabulary."""

    def __init__(self, vocab_size: int, seed: int) -> None:
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        self.vocab_size = vocab_size
        self.seed = seed

    def greedy_next(self, prefix: tuple[int, ...]) -> int:
        return _hash_token("synth", self.seed, prefix) % self.vocab_size


class AgreementDraftModel:
    """Draft that matches a target's greedy choice with a fixed probability.

    With ``agree_prob`` 1.0 the draft is indistinguishable from the target;
    with 0.0 it disagrees at every position.
    """

    def __init__(self, target: SyntheticTokenModel, agree_prob: float, seed: int = 0) -> None:
        if not 0 <= agree_prob <= 1:
            raise ValueError("agree_prob must be in [0, 1]")
        self.target = target
        self.agree_prob = agree_prob
        self.seed = seed
        self.vocab_size = target.vocab_size

    def greedy_next(self, prefix: tuple[int, ...]) -> int:
        target_token = self.target.greedy_next(prefix)
        draw = _hash_token("agree", self.seed, prefix) / float(2**64)
        if draw < self.agree_prob:
            return target_token
        offset = 1 + _hash_token("miss", self.seed, prefix) % (self.vocab_size - 1)
        return (target_token + offset) % self.vocab_size


def _require_token_model(model: object) -> None:
    if not hasattr(model, "greedy_next"):
        raise UnsupportedBackend(
            f"{type(model).__name__} exposes no token-level greedy_next interface"
        )


def greedy_decode(
    model,
    prefix: Sequence[int],
    max_new_tokens: int,
    stop_token: int | None = None,
) -> tuple[int, ...]:
    """Target-only greedy decoding; the independence oracle for losslessness."""
    _require_token_model(model)
    context = list(prefix)
    produced: list[int] = []
    while len(produced) < max_new_tokens:
        token = model.greedy_next(tuple(context))
        produced.append(token)
        context.append(token)
        if stop_token is not None and token == stop_token:
            break
    return tuple(produced)


def speculative_decode(
    draft,
    target,
    prefix: Sequence[int],
    gamma: int,
    max_new_tokens: int,
    stop_token: int | None = None,
) -> tuple[tuple[int, ...], list[DraftRound]]:
    """Greedy draft/verify decoding.

    Per round the draft proposes up to ``gamma`` tokens; the target accepts
    the longest prefix matching its own greedy choices and contributes one
    bonus token. Output is identical to :func:`greedy_decode` on the target.
    """
    _require_token_model(draft)
    _require_token_model(target)
    if gamma < 1:
        raise ValueError("gamma must be >= 1")

    context = list(prefix)
    produced: list[int] = []
    rounds: list[DraftRound] = []

    def finished() -> bool:
        if len(produced) >= max_new_tokens:
            return True
        return stop_token is not None and bool(produced) and produced[-1] == stop_token

    while not finished():
        draft_context = list(context)
        drafted: list[int] = []
        for _ in range(gamma):
            token = draft.greedy_next(tuple(draft_context))
            drafted.append(token)
            draft_context.append(token)

        accepted = 0
        bonus: int | None = None
        mismatch: int | None = None
        for token in drafted:
            if finished():
                break
            expected = target.greedy_next(tuple(context))
            if expected != token:
                mismatch = expected
                break
            context.append(token)
            produced.append(token)
            accepted += 1

        appended_bonus: int | None = None
        if not finished():
            bonus = mismatch if mismatch is not None else target.greedy_next(tuple(context))
            context.append(bonus)
            produced.append(bonus)
            appended_bonus = bonus
        rounds.append(DraftRound(tuple(drafted), accepted, appended_bonus))
    return tuple(produced), rounds


def simulate_regen_rounds(
    total_tokens: int,
    gamma: int,
    agreement_prob: float,
    rng: np.random.Generator,
) -> list[tuple[int, int]]:
    """Round structure (drafted, accepted) for regenerating a step whose
    length is already known, with per-position draft agreement drawn
    Bernoulli(``agreement_prob``). Every round makes progress: each appends
    at least one token.
    """
    if total_tokens < 0:
        raise ValueError("total_tokens must be >= 0")
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if not 0 <= agreement_prob <= 1:
        raise ValueError("agreement_prob must be in [0, 1]")
    rounds: list[tuple[int, int]] = []
    remaining = total_tokens
    while remaining > 0:
        drafted = min(gamma, remaining)
        accepted = 0
        while accepted < drafted and rng.random() < agreement_prob:
            accepted += 1
        rounds.append((drafted, accepted))
        remaining -= min(accepted + 1, remaining)
    return rounds


def rounds_latency(
    rounds: Sequence[tuple[int, int]],
    draft_profile: BackendProfile,
    target_profile: BackendProfile,
) -> float:
    """Seconds for a round sequence: per round, the draft decodes its drafted
    tokens and the target runs one verification pass, priced as a prefill over
    the drafted tokens plus one decoded token.
    """
    total = 0.0
    for drafted, _accepted in rounds:
        total += drafted * draft_profile.decode_s_per_token
        total += (
            drafted / target_profile.prefill_tokens_per_s
            + target_profile.decode_s_per_token
        )
    return total
