"""RLVR training loop for the tabular policy, plus probe-truncated decoding."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .advantage import (
    AdvantageTensor,
    SpaeConfig,
    batch_normalize,
    group_advantage,
    grpo_advantage,
    rfb_advantages,
    spae_token_advantages,
)
from .core import Query, TokenTrajectory, Vocab, make_trajectory, map_token_to_step
from .policy import (
    ContextState,
    DecodeConfig,
    OverCheckPrior,
    TabularPolicy,
    decode_batch,
    filtered_probs,
    sample_from,
)
from .potential import PotentialSeries
from .probe import ProbeConfig, ProbeRecord, probe_contexts_batch, probe_many, probe_step, probe_rng, probe_uniforms
from .toy_env import TaskSpec, generate_query, verify

log = logging.getLogger(__name__)

ESTIMATORS = ("GRPO", "DAPO", "RFB", "SPAE")


@dataclass(frozen=True)
class TrainConfig:
    estimator: str = "SPAE"
    xi: float = 0.5
    alpha: float = 0.5
    eps_sat: float = 0.9
    group_size: int = 8
    batch_queries: int = 64
    mini_batch: int = 8
    eps_low: float = 0.2
    eps_high: float = 0.28
    lr: float = 1e-2
    max_len: int = 48
    seed: int = 0
    iterations: int = 300
    probe_samples: int = 5
    probe_tokens: int = 3
    checkpoint_every: int = 0
    modulus: int = 10
    chain_length: int = 4
    ops: tuple[str, ...] = ("add", "sub", "mul")

    def __post_init__(self) -> None:
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; choose from {ESTIMATORS}")
        if self.eps_low <= 0 or self.eps_high <= 0:
            raise ValueError("clip bounds must be positive")
        if self.group_size < 2:
            raise ValueError("group estimators need group_size >= 2")
        if self.batch_queries < 1 or self.mini_batch < 1:
            raise ValueError("batch sizes must be positive")
        SpaeConfig(self.xi, self.alpha, self.eps_sat)  # validates ranges

    @property
    def task(self) -> TaskSpec:
        return TaskSpec(self.modulus, self.chain_length, tuple(self.ops))

    @property
    def spae(self) -> SpaeConfig:
        return SpaeConfig(self.xi, self.alpha, self.eps_sat)

    @property
    def decode(self) -> DecodeConfig:
        return DecodeConfig.rollout(self.max_len)

    @property
    def probe(self) -> ProbeConfig:
        return ProbeConfig(self.probe_samples, self.probe_tokens, self.decode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ops"] = list(self.ops)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "ops" in d:
            d["ops"] = tuple(d["ops"])
        return cls(**d)


@dataclass
class Rollout:
    query: Query
    trajectory: TokenTrajectory
    rows: np.ndarray
    entropies: np.ndarray
    probes: list[ProbeRecord] = field(default_factory=list)


@dataclass
class RolloutGroup:
    query: Query
    rollouts: list[Rollout]

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.trajectory.reward for r in self.rollouts], dtype=np.float64)


@dataclass
class UpdateReport:
    iteration: int
    mean_reward: float
    mean_length: float
    entropy: float
    clip_fraction: float
    loss: float
    groups_kept: int
    skipped: bool = False


# ---------------------------------------------------------------- sampling


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def probe_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration, 1]).generate_state(1)[0])


def rollout_batch(
    policy: TabularPolicy,
    queries: Sequence[Query],
    decode: DecodeConfig,
    uniforms: np.ndarray,
) -> list[Rollout]:
    """Decode one rollout per query (queries may repeat); rewards are verified."""
    vocab = policy.vocab
    state = ContextState.from_contexts(vocab, policy.context_order, [q.prompt for q in queries])
    out = decode_batch(policy, state, uniforms, decode)
    rollouts = []
    for b, q in enumerate(queries):
        traj = make_trajectory(out.tokens[b], out.logprobs[b], vocab, 0, q.query_id, bool(out.truncated[b]))
        traj = traj.with_reward(verify(traj, q, vocab).reward)
        rollouts.append(Rollout(q, traj, out.rows[b], out.entropies[b]))
    return rollouts


def sample_groups(
    policy: TabularPolicy,
    queries: Sequence[Query],
    G: int,
    decode: DecodeConfig,
    rng: np.random.Generator,
) -> list[RolloutGroup]:
    if G < 1:
        raise ValueError("group size must be >= 1")
    flat = [q for q in queries for _ in range(G)]
    uniforms = rng.random((len(flat), decode.max_len))
    rolls = rollout_batch(policy, flat, decode, uniforms)
    return [RolloutGroup(q, rolls[i * G : (i + 1) * G]) for i, q in enumerate(queries)]


def dynamic_sampling_filter(groups: Sequence[RolloutGroup]) -> list[RolloutGroup]:
    """Keep only groups whose rewards are not all equal."""
    return [g for g in groups if g.rewards.size and g.rewards.min() != g.rewards.max()]


def probe_groups(policy: TabularPolicy, groups: Sequence[RolloutGroup], cfg: ProbeConfig, seed: int) -> None:
    """Attach probe records to every rollout (trajectory ids are batch positions)."""
    rolls = [r for g in groups for r in g.rollouts]
    jobs = [(r.query, r.trajectory, i) for i, r in enumerate(rolls)]
    for r, recs in zip(rolls, probe_many(policy, jobs, cfg, seed)):
        r.probes = recs


# ---------------------------------------------------------------- objective


def clipped_surrogate_term(ratio, advantage, eps_low: float, eps_high: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps_low, 1.0 + eps_high) * advantage)


@dataclass
class MiniBatch:
    """Flattened tokens of a frozen mini-batch with per-token aggregation weights."""

    rows: np.ndarray
    tokens: np.ndarray
    old_logprobs: np.ndarray
    advantages: np.ndarray
    weights: np.ndarray


def make_minibatch(rollouts: Sequence[Rollout], advantages: Sequence[np.ndarray], token_mean: bool) -> MiniBatch:
    lengths = np.array([len(r.trajectory.tokens) for r in rollouts])
    if token_mean:
        w = [np.full(n, 1.0 / max(lengths.sum(), 1)) for n in lengths]
    else:
        w = [np.full(n, 1.0 / (len(rollouts) * n)) for n in lengths]
    return MiniBatch(
        rows=np.concatenate([r.rows for r in rollouts]),
        tokens=np.concatenate([np.asarray(r.trajectory.tokens, dtype=np.int64) for r in rollouts]),
        old_logprobs=np.concatenate([np.asarray(r.trajectory.logprobs) for r in rollouts]),
        advantages=np.concatenate(advantages),
        weights=np.concatenate(w),
    )


def surrogate_and_grad(
    logits: np.ndarray,
    mb: MiniBatch,
    decode: DecodeConfig,
    eps_low: float,
    eps_high: float,
) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Objective, its gradient on the touched rows, those row ids, and the clipped fraction."""
    p = filtered_probs(logits[mb.rows], decode.temperature, decode.top_k, decode.top_p)
    n = len(mb.rows)
    p_tok = p[np.arange(n), mb.tokens]
    ratio = np.exp(np.log(p_tok) - mb.old_logprobs)
    A = mb.advantages
    obj = float(np.sum(mb.weights * clipped_surrogate_term(ratio, A, eps_low, eps_high)))
    clipped = ((A > 0) & (ratio > 1 + eps_high)) | ((A < 0) & (ratio < 1 - eps_low))
    coef = np.where(clipped, 0.0, mb.weights * A * ratio)
    g_tok = -p * coef[:, None]
    g_tok[np.arange(n), mb.tokens] += coef
    g_tok /= decode.temperature
    uniq, inv = np.unique(mb.rows, return_inverse=True)
    grad = np.zeros((len(uniq), logits.shape[1]))
    np.add.at(grad, inv, g_tok)
    return obj, grad, uniq, float(clipped.mean()) if n else 0.0


def surrogate_value(logits: np.ndarray, mb: MiniBatch, decode: DecodeConfig, eps_low: float, eps_high: float) -> float:
    p = filtered_probs(logits[mb.rows], decode.temperature, decode.top_k, decode.top_p)
    p_tok = p[np.arange(len(mb.rows)), mb.tokens]
    ratio = np.exp(np.log(p_tok) - mb.old_logprobs)
    return float(np.sum(mb.weights * clipped_surrogate_term(ratio, mb.advantages, eps_low, eps_high)))


# ---------------------------------------------------------------- advantages


def compute_advantages(groups: Sequence[RolloutGroup], cfg: TrainConfig) -> AdvantageTensor:
    rolls = [r for g in groups for r in g.rollouts]
    lengths = [len(r.trajectory.tokens) for r in rolls]
    if cfg.estimator in ("GRPO", "DAPO"):
        per = np.concatenate([grpo_advantage(g.rewards) for g in groups])
        return AdvantageTensor([np.full(n, a) for a, n in zip(per, lengths)], "FINAL")
    group_adv = np.concatenate([group_advantage(g.rewards) for g in groups])
    if cfg.estimator == "RFB":
        return rfb_advantages(group_adv, lengths)
    spae = cfg.spae
    series = [PotentialSeries.from_probes(r.probes, spae.eps_sat) for r in rolls]
    maps = [map_token_to_step(r.trajectory) for r in rolls]
    raw = spae_token_advantages(group_adv, series, maps, spae)
    return batch_normalize(raw, spae.eps_norm)


def iteration_batch(policy: TabularPolicy, cfg: TrainConfig, iteration: int, vocab: Optional[Vocab] = None):
    """Sample, verify and filter one iteration's batch; returns (all groups, kept groups)."""
    vocab = policy.vocab
    rng = iteration_rng(cfg.seed, iteration)
    qseeds = rng.integers(0, 2**31, size=cfg.batch_queries)
    queries = [generate_query(int(s), cfg.task, vocab, query_id=i) for i, s in enumerate(qseeds)]
    groups = sample_groups(policy, queries, cfg.group_size, cfg.decode, rng)
    kept = groups if cfg.estimator == "GRPO" else dynamic_sampling_filter(groups)
    return groups, kept


def train_iteration(policy: TabularPolicy, cfg: TrainConfig, iteration: int) -> UpdateReport:
    """One sample -> filter -> probe -> advantage -> update pass; mutates ``policy.logits``."""
    groups, kept = iteration_batch(policy, cfg, iteration)
    rolls_all = [r for g in groups for r in g.rollouts]
    mean_reward = float(np.mean([r.trajectory.reward for r in rolls_all]))
    mean_len = float(np.mean([len(r.trajectory.tokens) for r in rolls_all]))
    ents = np.concatenate([r.entropies for r in rolls_all])
    entropy = float(ents.mean()) if ents.size else 0.0
    if not kept:
        log.info("iteration %d: every group had constant reward; skipping update", iteration)
        return UpdateReport(iteration, mean_reward, mean_len, entropy, 0.0, 0.0, 0, skipped=True)
    if cfg.estimator == "SPAE":
        probe_groups(policy, kept, cfg.probe, seed=probe_seed(cfg.seed, iteration))
    adv = compute_advantages(kept, cfg)
    rolls = [r for g in kept for r in g.rollouts]
    eps_hi = cfg.eps_low if cfg.estimator == "GRPO" else cfg.eps_high
    token_mean = cfg.estimator != "GRPO"
    losses, clips = [], []
    G = cfg.group_size
    for start in range(0, len(kept), cfg.mini_batch):
        sl = slice(start * G, (start + cfg.mini_batch) * G)
        mb = make_minibatch(rolls[sl], adv.values[sl], token_mean)
        obj, grad, uniq, clip = surrogate_and_grad(policy.logits, mb, cfg.decode, cfg.eps_low, eps_hi)
        policy.logits[uniq] += cfg.lr * grad
        losses.append(-obj)
        clips.append(clip)
    return UpdateReport(
        iteration,
        mean_reward,
        mean_len,
        entropy,
        float(np.mean(clips)),
        float(np.mean(losses)),
        len(kept),
    )


def initial_policy(cfg: TrainConfig, prior: Optional[OverCheckPrior] = None) -> TabularPolicy:
    return (prior or OverCheckPrior()).build(cfg.task)


def train(
    cfg: TrainConfig,
    policy: Optional[TabularPolicy] = None,
    start_iteration: int = 0,
    callback=None,
) -> tuple[TabularPolicy, list[UpdateReport]]:
    policy = policy or initial_policy(cfg)
    reports = []
    for it in range(start_iteration, cfg.iterations):
        rep = train_iteration(policy, cfg, it)
        reports.append(rep)
        if callback is not None:
            callback(policy, rep)
    return policy, reports


# ---------------------------------------------------------------- truncation


@dataclass
class TruncatedDecode:
    trajectory: TokenTrajectory
    probes: list[ProbeRecord]
    truncated_at: Optional[int]


def _finish(vocab: Vocab, query: Query, toks: list[int], lps: list[float], hit_eot: bool) -> TokenTrajectory:
    traj = make_trajectory(toks, lps, vocab, 0, query.query_id, not hit_eot)
    return traj.with_reward(verify(traj, query, vocab).reward)


def probe_truncated_decode(
    policy: TabularPolicy,
    query: Query,
    cfg: ProbeConfig,
    rng: np.random.Generator,
    eps_sat: float = 0.9,
    probe_seed: int = 0,
    trajectory_id: int = 0,
) -> TruncatedDecode:
    """Decode, probing at each step boundary; close reasoning as soon as a step saturates.

    Token draws come from ``rng`` exactly as in :func:`~spae.policy.sample_trajectory`,
    so a shared seed gives the standard decode up to the cut.
    """
    vocab = policy.vocab
    decode = cfg.decode
    u = rng.random(decode.max_len)
    ctx = list(query.prompt)
    toks: list[int] = []
    lps: list[float] = []
    probes: list[ProbeRecord] = []
    force = False
    cut = None
    reasoning = True
    for t in range(decode.max_len):
        p = filtered_probs(policy.logits[policy.row_index(ctx)], decode.temperature, decode.top_k, decode.top_p)
        tok = vocab.think_end if force else int(sample_from(p[None], u[t : t + 1])[0])
        force = False
        toks.append(tok)
        lps.append(float(np.log(max(p[tok], 1e-300))))
        ctx.append(tok)
        if tok == vocab.eot:
            return TruncatedDecode(_finish(vocab, query, toks, lps, True), probes, cut)
        if tok == vocab.think_end:
            reasoning = False
        if reasoning and tok == vocab.delim:
            partial = make_trajectory(toks, lps, vocab)
            k = partial.num_steps
            rec = probe_step(policy, query, partial, k, cfg, probe_rng(probe_seed, trajectory_id, k))
            probes.append(rec)
            if PotentialSeries.from_probes([rec], eps_sat).phi[0] > eps_sat:
                force = True
                cut = k
    return TruncatedDecode(_finish(vocab, query, toks, lps, False), probes, cut)


def truncated_decode_batch(
    policy: TabularPolicy,
    queries: Sequence[Query],
    cfg: ProbeConfig,
    uniforms: np.ndarray,
    eps_sat: float = 0.9,
    probe_seed: int = 0,
    trajectory_ids: Optional[Sequence[int]] = None,
) -> list[TruncatedDecode]:
    """Lockstep version of :func:`probe_truncated_decode` over many queries."""
    vocab = policy.vocab
    decode = cfg.decode
    B = len(queries)
    tids = list(range(B)) if trajectory_ids is None else list(trajectory_ids)
    state = ContextState.from_contexts(vocab, policy.context_order, [q.prompt for q in queries])
    toks = [[] for _ in range(B)]
    lps = [[] for _ in range(B)]
    probes = [[] for _ in range(B)]
    cut: list[Optional[int]] = [None] * B
    alive = np.ones(B, dtype=bool)
    force = np.zeros(B, dtype=bool)
    reasoning = np.ones(B, dtype=bool)
    done_eot = np.zeros(B, dtype=bool)
    for t in range(decode.max_len):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        sub = state.select(idx)
        p = policy.row_probs(policy.state_rows(sub), decode)
        tok = sample_from(p, uniforms[idx, t])
        tok = np.where(force[idx], vocab.think_end, tok)
        force[idx] = False
        full = np.zeros(B, dtype=np.int64)
        full[idx] = tok
        state.advance(full, alive)
        pending = []
        for j, b in enumerate(idx):
            tb = int(tok[j])
            toks[b].append(tb)
            lps[b].append(float(np.log(max(p[j, tb], 1e-300))))
            if tb == vocab.eot:
                alive[b] = False
                done_eot[b] = True
            elif tb == vocab.think_end:
                reasoning[b] = False
            elif reasoning[b] and tb == vocab.delim:
                pending.append(b)
        if pending:
            items, uni = [], []
            for b in pending:
                partial = make_trajectory(toks[b], lps[b], vocab)
                k = partial.num_steps
                items.append((queries[b], partial, k))
                uni.append(probe_uniforms(cfg, probe_seed, tids[b], k))
            recs = probe_contexts_batch(policy, items, cfg, np.stack(uni))
            for b, rec in zip(pending, recs):
                probes[b].append(rec)
                if PotentialSeries.from_probes([rec], eps_sat).phi[0] > eps_sat:
                    force[b] = True
                    cut[b] = rec.k
    return [
        TruncatedDecode(_finish(vocab, queries[b], toks[b], lps[b], bool(done_eot[b])), probes[b], cut[b])
        for b in range(B)
    ]
