"""Token, step and trajectory data model shared by every other module."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# Step index assigned to tokens at or after the end of the reasoning region.
SUMMARY = -1

Span = tuple[int, int]


@dataclass(frozen=True)
class Vocab:
    """Integer vocabulary layout.

    Digit tokens occupy ids ``0 .. n_digits-1``. Operation tokens and the
    query terminator are optional so that tiny test vocabularies stay valid.
    """

    size: int
    n_digits: int
    delim: int
    answer: int
    think_end: int
    eot: int
    wait: int
    qend: Optional[int] = None
    ops: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.size < 8:
            raise ValueError(f"vocab size must be >= 8, got {self.size}")
        reserved = self.reserved_ids()
        if len(set(reserved)) != len(reserved):
            raise ValueError("reserved token ids must be distinct")
        if any(t < 0 or t >= self.size for t in reserved):
            raise ValueError("reserved token ids must lie in [0, size)")
        if any(t < self.n_digits for t in reserved):
            raise ValueError("reserved ids overlap the digit range")

    def reserved_ids(self) -> tuple[int, ...]:
        ids = (self.delim, self.answer, self.think_end, self.eot, self.wait)
        if self.qend is not None:
            ids += (self.qend,)
        return ids + tuple(self.ops)

    def is_digit(self, token: int) -> bool:
        return 0 <= token < self.n_digits

    @classmethod
    def default(cls) -> "Vocab":
        # digits 0-9, ops +,-,*, then structural tokens
        return cls(
            size=19,
            n_digits=10,
            ops=(10, 11, 12),
            qend=13,
            delim=14,
            answer=15,
            think_end=16,
            eot=17,
            wait=18,
        )

    def describe(self, token: int) -> str:
        names = {
            self.delim: "|",
            self.answer: "ANS",
            self.think_end: "</think>",
            self.eot: "EOT",
            self.wait: "WAIT",
        }
        if self.qend is not None:
            names[self.qend] = "?"
        for sym, t in zip("+-*", self.ops):
            names[t] = sym
        if self.is_digit(token):
            return str(token)
        return names.get(token, f"<{token}>")

    def render(self, tokens: Sequence[int]) -> str:
        return " ".join(self.describe(int(t)) for t in tokens)


@dataclass(frozen=True)
class Query:
    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    meta: dict = field(default_factory=dict, compare=False)
    query_id: int = 0

    def answer_body(self, eot: int) -> tuple[int, ...]:
        """Answer tokens with the terminal EOT stripped."""
        if self.answer and self.answer[-1] == eot:
            return self.answer[:-1]
        return self.answer


@dataclass(frozen=True)
class TokenTrajectory:
    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    reasoning_end: int
    steps: tuple[Span, ...]
    reward: int = 0
    query_id: int = 0
    truncated: bool = False

    def __post_init__(self) -> None:
        if len(self.logprobs) != len(self.tokens):
            raise ValueError("logprobs and tokens differ in length")
        if self.reward not in (0, 1):
            raise ValueError(f"reward must be 0 or 1, got {self.reward}")
        if not 0 <= self.reasoning_end <= len(self.tokens):
            raise ValueError("reasoning_end out of range")
        pos = 0
        for start, end in self.steps:
            if start != pos or end <= start:
                raise ValueError(f"steps do not tile [0, {self.reasoning_end})")
            pos = end
        if pos != self.reasoning_end:
            raise ValueError(f"steps do not tile [0, {self.reasoning_end})")

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def step_lengths(self) -> list[int]:
        return [e - s for s, e in self.steps]

    def with_reward(self, reward: int) -> "TokenTrajectory":
        return TokenTrajectory(
            self.tokens,
            self.logprobs,
            self.reasoning_end,
            self.steps,
            int(reward),
            self.query_id,
            self.truncated,
        )


def segment_steps(tokens: Sequence[int], reasoning_end: int, delim: int) -> list[Span]:
    """Split ``tokens[:reasoning_end]`` into half-open spans ending after each delimiter.

    A trailing run without a delimiter is kept as the final step.
    """
    if reasoning_end > len(tokens):
        raise ValueError("reasoning_end exceeds token count")
    spans: list[Span] = []
    start = 0
    for i in range(reasoning_end):
        if tokens[i] == delim:
            spans.append((start, i + 1))
            start = i + 1
    if start < reasoning_end:
        spans.append((start, reasoning_end))
    return spans


def find_reasoning_end(tokens: Sequence[int], think_end: int) -> int:
    for i, t in enumerate(tokens):
        if t == think_end:
            return i
    return len(tokens)


def make_trajectory(
    tokens: Sequence[int],
    logprobs: Sequence[float],
    vocab: Vocab,
    reward: int = 0,
    query_id: int = 0,
    truncated: bool = False,
) -> TokenTrajectory:
    tokens = tuple(int(t) for t in tokens)
    end = find_reasoning_end(tokens, vocab.think_end)
    return TokenTrajectory(
        tokens=tokens,
        logprobs=tuple(float(x) for x in logprobs),
        reasoning_end=end,
        steps=tuple(segment_steps(tokens, end, vocab.delim)),
        reward=int(reward),
        query_id=query_id,
        truncated=truncated,
    )


def map_token_to_step(trajectory: TokenTrajectory) -> np.ndarray:
    """Per-token 1-based step index; ``SUMMARY`` for tokens past the reasoning region."""
    out = np.full(len(trajectory.tokens), SUMMARY, dtype=np.int64)
    for k, (start, end) in enumerate(trajectory.steps, start=1):
        out[start:end] = k
    return out
