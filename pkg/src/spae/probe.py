"""Training-free step probing: confidence and correctness after each reasoning step."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Query, TokenTrajectory
from .policy import (
    ContextState,
    DecodeConfig,
    PolicyOracle,
    TabularPolicy,
    decode_batch,
    entropy_rows,
    filtered_probs,
    sample_from,
)


@dataclass(frozen=True)
class ProbeConfig:
    n_samples: int = 5
    max_continuation_tokens: int = 3
    decode: DecodeConfig = field(default_factory=DecodeConfig.rollout)

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.max_continuation_tokens < 1:
            raise ValueError("max_continuation_tokens must be >= 1")


@dataclass(frozen=True)
class ProbeRecord:
    k: int
    confidence: float
    correctness: float
    entropies: tuple[float, ...]
    sample_confidences: tuple[float, ...]
    sample_correctness: tuple[float, ...]

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "conf": self.confidence,
            "acc": self.correctness,
            "entropies": list(self.entropies),
            "confs": list(self.sample_confidences),
            "accs": list(self.sample_correctness),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ProbeRecord":
        ents = tuple(float(x) for x in d.get("entropies", ()))
        return cls(
            k=int(d["k"]),
            confidence=float(d["conf"]),
            correctness=float(d["acc"]),
            entropies=ents,
            sample_confidences=tuple(float(x) for x in d.get("confs", [np.exp(-h) for h in ents])),
            sample_correctness=tuple(float(x) for x in d.get("accs", ())),
        )


def probe_rng(seed: int, trajectory_id: int, k: int) -> np.random.Generator:
    """Independent stream per (trajectory, step) so probing never shifts other draws."""
    return np.random.default_rng([seed, trajectory_id, k])


def token_entropy(dist: Sequence[float]) -> float:
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    return float(entropy_rows(np.asarray(dist, dtype=np.float64)[None])[0])


def build_probe_context(query: Query, trajectory: TokenTrajectory, k: int, answer_token: int) -> list[int]:
    if not 1 <= k <= trajectory.num_steps:
        raise IndexError(f"step {k} outside 1..{trajectory.num_steps}")
    end = trajectory.steps[k - 1][1]
    return list(query.prompt) + list(trajectory.tokens[:end]) + [answer_token]


def _decode_probs(policy: PolicyOracle, context: Sequence[int], decode: DecodeConfig) -> np.ndarray:
    if isinstance(policy, TabularPolicy):
        row = policy.logits[policy.row_index(context)]
        return filtered_probs(row, decode.temperature, decode.top_k, decode.top_p)
    with np.errstate(divide="ignore"):
        lp = np.log(policy.next_token_distribution(context))
    return filtered_probs(np.where(np.isfinite(lp), lp, -1e30), decode.temperature, decode.top_k, decode.top_p)


def _length_normalized(entropies: list[float], eot_entropy: float) -> float:
    # an immediate EOT is scored by the entropy of that single decision
    return float(np.mean(entropies)) if entropies else eot_entropy


def probe_confidence(
    policy: PolicyOracle,
    context: Sequence[int],
    cfg: ProbeConfig,
    rng: np.random.Generator,
) -> tuple[float, list[float]]:
    """Mean over N continuations of ``exp(-mean token entropy)``.

    Returns the confidence and each continuation's length-normalized entropy.
    """
    eot = policy.vocab.eot
    per_sample = []
    for _ in range(cfg.n_samples):
        ctx = list(context)
        u = rng.random(cfg.max_continuation_tokens)
        hs: list[float] = []
        first_h = None
        for t in range(cfg.max_continuation_tokens):
            p = _decode_probs(policy, ctx, cfg.decode)
            h = token_entropy(p)
            tok = int(sample_from(p[None], u[t : t + 1])[0])
            if tok == eot:
                first_h = h if first_h is None else first_h
                break
            hs.append(h)
            first_h = h if first_h is None else first_h
            ctx.append(tok)
        per_sample.append(_length_normalized(hs, first_h))
    conf = float(np.mean(np.exp(-np.asarray(per_sample))))
    return conf, per_sample


def probe_correctness(
    policy: PolicyOracle,
    context: Sequence[int],
    answer: Sequence[int],
    cfg: Optional[ProbeConfig] = None,
) -> float:
    """Teacher-forced mean probability of the ground-truth answer tokens."""
    if len(answer) == 0:
        raise ValueError("answer must be non-empty")
    decode = cfg.decode if cfg is not None else DecodeConfig.rollout()
    ctx = list(context)
    probs = []
    for tok in answer:
        probs.append(float(_decode_probs(policy, ctx, decode)[tok]))
        ctx.append(int(tok))
    return float(np.mean(probs))


def probe_step(
    policy: PolicyOracle,
    query: Query,
    trajectory: TokenTrajectory,
    k: int,
    cfg: ProbeConfig,
    rng: np.random.Generator,
) -> ProbeRecord:
    vocab = policy.vocab
    ctx = build_probe_context(query, trajectory, k, vocab.answer)
    conf, ents = probe_confidence(policy, ctx, cfg, rng)
    acc = probe_correctness(policy, ctx, query.answer_body(vocab.eot), cfg)
    return ProbeRecord(
        k=k,
        confidence=conf,
        correctness=acc,
        entropies=tuple(ents),
        sample_confidences=tuple(float(np.exp(-h)) for h in ents),
        sample_correctness=(acc,) * cfg.n_samples,
    )


def probe_trajectory(
    policy: PolicyOracle,
    query: Query,
    trajectory: TokenTrajectory,
    cfg: ProbeConfig,
    seed: int,
    trajectory_id: int,
) -> list[ProbeRecord]:
    return [
        probe_step(policy, query, trajectory, k, cfg, probe_rng(seed, trajectory_id, k))
        for k in range(1, trajectory.num_steps + 1)
    ]


# ---------------------------------------------------------------- batched


def probe_contexts_batch(
    policy: TabularPolicy,
    items: Sequence[tuple[Query, TokenTrajectory, int]],
    cfg: ProbeConfig,
    uniforms: np.ndarray,
) -> list[ProbeRecord]:
    """Vectorized probing of many ``(query, trajectory, k)`` triples at once.

    ``uniforms`` has shape ``(len(items), n_samples, max_continuation_tokens)``
    and must come from the same per-step streams the scalar path would use.
    """
    if not items:
        return []
    vocab = policy.vocab
    N, cap = cfg.n_samples, cfg.max_continuation_tokens
    contexts = [build_probe_context(q, tr, k, vocab.answer) for q, tr, k in items]
    base = ContextState.from_contexts(vocab, policy.context_order, contexts)
    n = len(items)

    # correctness: teacher-force each answer body
    answers = [q.answer_body(vocab.eot) for q, _, _ in items]
    width = max(len(a) for a in answers)
    st = base.copy()
    acc_sum = np.zeros(n)
    for m in range(width):
        live = np.array([m < len(a) for a in answers])
        tok = np.array([a[m] if m < len(a) else 0 for a in answers], dtype=np.int64)
        p = policy.row_probs(policy.state_rows(st), cfg.decode)
        acc_sum += np.where(live, p[np.arange(n), tok], 0.0)
        st.advance(tok, live)
    acc = acc_sum / np.array([len(a) for a in answers])

    # confidence: N continuations per item, flattened item-major
    rep = np.repeat(np.arange(n), N)
    st = base.select(rep)
    out = decode_batch(policy, st, uniforms.reshape(n * N, cap), cfg.decode, max_len=cap)
    h_bar = np.empty(n * N)
    for i, (toks, ents) in enumerate(zip(out.tokens, out.entropies)):
        keep = toks != vocab.eot
        h_bar[i] = ents[keep].mean() if keep.any() else ents[0]
    h_bar = h_bar.reshape(n, N)
    sample_conf = np.exp(-h_bar)
    records = []
    for i, (_, _, k) in enumerate(items):
        records.append(
            ProbeRecord(
                k=k,
                confidence=float(sample_conf[i].mean()),
                correctness=float(acc[i]),
                entropies=tuple(float(x) for x in h_bar[i]),
                sample_confidences=tuple(float(x) for x in sample_conf[i]),
                sample_correctness=(float(acc[i]),) * N,
            )
        )
    return records


def probe_uniforms(cfg: ProbeConfig, seed: int, trajectory_id: int, k: int) -> np.ndarray:
    """Uniforms consumed by the scalar path for one (trajectory, step) probe."""
    rng = probe_rng(seed, trajectory_id, k)
    return rng.random((cfg.n_samples, cfg.max_continuation_tokens))


def probe_many(
    policy: TabularPolicy,
    jobs: Sequence[tuple[Query, TokenTrajectory, int]],
    cfg: ProbeConfig,
    seed: int,
) -> list[list[ProbeRecord]]:
    """Probe every step of every ``(query, trajectory, trajectory_id)`` job."""
    items, uni, owner = [], [], []
    for j, (q, tr, tid) in enumerate(jobs):
        for k in range(1, tr.num_steps + 1):
            items.append((q, tr, k))
            uni.append(probe_uniforms(cfg, seed, tid, k))
            owner.append(j)
    out: list[list[ProbeRecord]] = [[] for _ in jobs]
    if not items:
        return out
    recs = probe_contexts_batch(policy, items, cfg, np.stack(uni))
    for j, r in zip(owner, recs):
        out[j].append(r)
    return out
