"""Modular-arithmetic chain task with an exact-match verifier.

A prompt reads ``s op1 a1 op2 a2 ... opL aL ?`` and the answer is the chain
result modulo ``M`` followed by EOT. A well-formed response writes one value
per step (``v |``), may re-check with ``WAIT v |`` steps, then closes with
``</think> ANS v EOT``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Query, TokenTrajectory, Vocab

OP_NAMES = ("add", "sub", "mul")


class MalformedPrompt(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    modulus: int = 10
    chain_length: int = 4
    ops: tuple[str, ...] = OP_NAMES

    def validate(self, vocab: Vocab) -> None:
        if self.modulus < 2:
            raise ValueError(f"modulus must be >= 2, got {self.modulus}")
        if self.modulus > vocab.n_digits:
            raise ValueError(
                f"modulus {self.modulus} exceeds digit capacity {vocab.n_digits}"
            )
        if self.chain_length < 1:
            raise ValueError("chain_length must be >= 1")
        if not self.ops or any(op not in OP_NAMES for op in self.ops):
            raise ValueError(f"ops must be a non-empty subset of {OP_NAMES}")
        if len(vocab.ops) < len(OP_NAMES) or vocab.qend is None:
            raise ValueError("vocab has no operation/query tokens")

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            modulus=int(d.get("modulus", 10)),
            chain_length=int(d.get("chain_length", 4)),
            ops=tuple(d.get("ops", OP_NAMES)),
        )

    def to_dict(self) -> dict:
        return {"modulus": self.modulus, "chain_length": self.chain_length, "ops": list(self.ops)}


@dataclass(frozen=True)
class VerifierResult:
    reward: int
    extracted_answer: Optional[tuple[int, ...]] = None


def apply_op(op: str, value: int, arg: int, modulus: int) -> int:
    if op == "add":
        return (value + arg) % modulus
    if op == "sub":
        return (value - arg) % modulus
    if op == "mul":
        return (value * arg) % modulus
    raise ValueError(f"unknown op {op!r}")


def make_query(
    start: int,
    chain: Sequence[tuple[str, int]],
    spec: TaskSpec,
    vocab: Vocab,
    query_id: int = 0,
    seed: Optional[int] = None,
) -> Query:
    """Build a query from an explicit chain such as ``[("add", 4)]``."""
    prompt = [start % spec.modulus]
    value = start % spec.modulus
    for op, arg in chain:
        prompt += [vocab.ops[OP_NAMES.index(op)], arg]
        value = apply_op(op, value, arg, spec.modulus)
    prompt.append(vocab.qend)
    meta = {"modulus": spec.modulus, "chain_length": len(chain), "seed": seed}
    return Query(tuple(prompt), (value, vocab.eot), meta, query_id)


def generate_query(
    seed: int, spec: TaskSpec, vocab: Optional[Vocab] = None, query_id: int = 0
) -> Query:
    vocab = vocab or Vocab.default()
    spec.validate(vocab)
    rng = np.random.default_rng(seed)
    start = int(rng.integers(spec.modulus))
    chain = [
        (spec.ops[int(rng.integers(len(spec.ops)))], int(rng.integers(spec.modulus)))
        for _ in range(spec.chain_length)
    ]
    return make_query(start, chain, spec, vocab, query_id=query_id, seed=seed)


def parse_prompt(prompt: Sequence[int], vocab: Vocab) -> tuple[int, list[tuple[str, int]]]:
    """Return ``(start, [(op, arg), ...])`` or raise :class:`MalformedPrompt`."""
    if vocab.qend is None or not prompt or prompt[-1] != vocab.qend:
        raise MalformedPrompt("prompt must end with the query terminator")
    body = list(prompt[:-1])
    if len(body) % 2 != 1 or not vocab.is_digit(body[0]):
        raise MalformedPrompt("prompt must be a start digit followed by (op, arg) pairs")
    chain = []
    for op_tok, arg in zip(body[1::2], body[2::2]):
        if op_tok not in vocab.ops or not vocab.is_digit(arg):
            raise MalformedPrompt(f"bad operation pair ({op_tok}, {arg})")
        chain.append((OP_NAMES[vocab.ops.index(op_tok)], int(arg)))
    return int(body[0]), chain


def chain_values(query: Query, vocab: Vocab) -> list[int]:
    """Partial results ``v_0 .. v_L`` of the query's chain."""
    start, chain = parse_prompt(query.prompt, vocab)
    modulus = int(query.meta.get("modulus", vocab.n_digits))
    values = [start]
    for op, arg in chain:
        values.append(apply_op(op, values[-1], arg, modulus))
    return values


def solve_reference(query: Query, vocab: Optional[Vocab] = None) -> tuple[int, ...]:
    vocab = vocab or Vocab.default()
    return (chain_values(query, vocab)[-1], vocab.eot)


def step_states(trajectory: TokenTrajectory, vocab: Vocab) -> list[tuple[int, Optional[int]]]:
    """For each step: (chain operations consumed so far, running value after the step).

    A step consumes an operation unless it contains WAIT; the first
    non-check step restates the start value and consumes nothing.
    """
    out = []
    solved_steps = 0
    value: Optional[int] = None
    for start, end in trajectory.steps:
        span = trajectory.tokens[start:end]
        for t in span:
            if vocab.is_digit(t):
                value = int(t)
        if vocab.wait not in span:
            solved_steps += 1
        out.append((max(solved_steps - 1, 0), value))
    return out


def solving_step(query: Query, trajectory: TokenTrajectory, vocab: Optional[Vocab] = None) -> Optional[int]:
    """Oracle solving step k_GT (1-based), or None if the trajectory never gets there.

    The first step at which every chain operation has been applied and the
    running value equals the chain result.
    """
    vocab = vocab or Vocab.default()
    values = chain_values(query, vocab)
    n_ops, final = len(values) - 1, values[-1]
    for k, (consumed, value) in enumerate(step_states(trajectory, vocab), start=1):
        if consumed >= n_ops and value == final:
            return k
    return None


def verify(trajectory: TokenTrajectory, query: Query, vocab: Optional[Vocab] = None) -> VerifierResult:
    vocab = vocab or Vocab.default()
    summary = trajectory.tokens[trajectory.reasoning_end:]
    last = None
    for i, t in enumerate(summary):
        if t == vocab.answer:
            last = i
    if last is None:
        return VerifierResult(0, None)
    tail = summary[last + 1:]
    if vocab.eot not in tail:
        return VerifierResult(0, None)
    extracted = tuple(tail[: tail.index(vocab.eot)])
    reward = int(extracted == query.answer_body(vocab.eot))
    return VerifierResult(reward, extracted)
