"""Behavioral metrics: solve/check token split, reflection counts, R2W rate,
@k evaluation, alignment with the oracle solving step and probe-variance bins."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Query, TokenTrajectory, Vocab
from .policy import DecodeConfig, TabularPolicy
from .potential import Phase, PotentialSeries, classify_phases, detect_r2w, first_saturation
from .probe import ProbeConfig, ProbeRecord, probe_many
from .toy_env import solving_step

BIN_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
BIN_LABELS = ("[0,0.2)", "[0.2,0.4)", "[0.4,0.6)", "[0.6,0.8)", "[0.8,1.0]")


@dataclass
class BehaviorSummary:
    acc: float
    solve: float
    check: float
    reflect: float
    r2w: float
    acc_at_k: float = 0.0
    len_at_k: float = 0.0
    pass_at_k: float = 0.0
    n_correct: int = 0
    n_incorrect: int = 0


@dataclass
class VarianceBins:
    var_conf: list[float]
    var_acc: list[float]
    counts: list[int]
    labels: tuple[str, ...] = BIN_LABELS

    @property
    def empty(self) -> list[bool]:
        return [c == 0 for c in self.counts]


def solve_check_split(trajectory: TokenTrajectory, phases: Sequence[Phase]) -> tuple[int, int]:
    if len(phases) != trajectory.num_steps:
        raise ValueError("one phase label per step is required")
    solve = check = 0
    for (s, e), ph in zip(trajectory.steps, phases):
        if ph == Phase.CHECKING:
            check += e - s
        else:
            solve += e - s
    return solve, check


def reflect_count(trajectory: TokenTrajectory, wait_token: int) -> int:
    """Number of steps containing at least one reflective token."""
    return sum(1 for s, e in trajectory.steps if wait_token in trajectory.tokens[s:e])


def r2w_rate(items: Sequence[tuple[TokenTrajectory, PotentialSeries]]) -> float:
    """Share of incorrect trajectories that had saturated; 0 when none are incorrect."""
    wrong = [s for t, s in items if t.reward == 0]
    if not wrong:
        return 0.0
    return sum(detect_r2w(s, 0) for s in wrong) / len(wrong)


def at_k_metrics(rewards: np.ndarray, lengths: np.ndarray) -> tuple[float, float, float]:
    """``rewards``/``lengths`` have shape (queries, k)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        return 0.0, 0.0, 0.0
    return float(rewards.mean()), float(np.mean(lengths)), float((rewards.max(axis=1) > 0).mean())


def alignment_displacement(series: PotentialSeries, k_gt: Optional[int]) -> Optional[int]:
    k_probe = first_saturation(series)
    if k_probe is None or k_gt is None:
        return None
    return k_probe - k_gt


def progress_bin(k: int, K: int) -> int:
    r = k / K
    return min(int(np.searchsorted(BIN_EDGES, r, side="right")) - 1, len(BIN_LABELS) - 1)


def population_variance(samples: Sequence[float]) -> float:
    """Divide-by-N variance; exactly 0 for constant samples despite mean rounding."""
    a = np.asarray(samples, dtype=np.float64)
    if a.size == 0 or np.all(a == a[0]):
        return 0.0
    return float(np.var(a))


def variance_bins(probes: Sequence[Sequence[ProbeRecord]]) -> VarianceBins:
    """Mean within-step (population) variance of per-sample Conf and Acc by relative progress.

    ``probes`` holds one list of records per trajectory; K is that list's length.
    """
    sums_c = np.zeros(5)
    sums_a = np.zeros(5)
    counts = np.zeros(5, dtype=np.int64)
    for recs in probes:
        K = len(recs)
        for rec in recs:
            if len(rec.sample_confidences) < 2:
                continue
            b = progress_bin(rec.k, K)
            sums_c[b] += population_variance(rec.sample_confidences)
            accs = rec.sample_correctness or (rec.correctness,) * len(rec.sample_confidences)
            sums_a[b] += population_variance(accs)
            counts[b] += 1
    # empty bins report 0 and are flagged through ``counts``
    vc = sums_c / np.maximum(counts, 1)
    va = sums_a / np.maximum(counts, 1)
    return VarianceBins([float(x) for x in vc], [float(x) for x in va], [int(c) for c in counts])


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    queries: list[Query]
    trajectories: list[list[TokenTrajectory]]
    probes: list[list[list[ProbeRecord]]] = field(default_factory=list)
    eps_sat: float = 0.9

    def flat(self):
        for qi, trajs in enumerate(self.trajectories):
            for j, t in enumerate(trajs):
                recs = self.probes[qi][j] if self.probes else []
                yield self.queries[qi], t, recs

    def series(self) -> list[PotentialSeries]:
        return [PotentialSeries.from_probes(r, self.eps_sat) for _, _, r in self.flat()]


def eval_rollouts(
    policy: TabularPolicy,
    queries: Sequence[Query],
    k: int,
    decode: DecodeConfig,
    rng: np.random.Generator,
) -> list[list[TokenTrajectory]]:
    from .trainer import rollout_batch  # deferred: trainer imports this module's siblings

    if k < 1:
        raise ValueError("k must be >= 1")
    flat = [q for q in queries for _ in range(k)]
    if not flat:
        return []
    rolls = rollout_batch(policy, flat, decode, rng.random((len(flat), decode.max_len)))
    return [[r.trajectory for r in rolls[i * k : (i + 1) * k]] for i in range(len(queries))]


def eval_at_k(
    policy: TabularPolicy,
    queries: Sequence[Query],
    k: int,
    decode: DecodeConfig,
    rng: np.random.Generator,
) -> tuple[float, float, float]:
    trajs = eval_rollouts(policy, queries, k, decode, rng)
    rewards = np.array([[t.reward for t in row] for row in trajs])
    lengths = np.array([[len(t.tokens) for t in row] for row in trajs])
    return at_k_metrics(rewards, lengths)


def evaluate(
    policy: TabularPolicy,
    queries: Sequence[Query],
    k: int,
    decode: DecodeConfig,
    seed: int,
    probe_cfg: Optional[ProbeConfig] = None,
    eps_sat: float = 0.9,
) -> EvalResult:
    """Decode ``k`` responses per query and probe every step with the same decode settings."""
    rng = np.random.default_rng([seed, 0])
    trajs = eval_rollouts(policy, queries, k, decode, rng)
    probe_cfg = probe_cfg or ProbeConfig(decode=decode)
    jobs = [(q, t, i * k + j) for i, (q, row) in enumerate(zip(queries, trajs)) for j, t in enumerate(row)]
    recs = probe_many(policy, jobs, probe_cfg, seed + 1)
    probes = [recs[i * k : (i + 1) * k] for i in range(len(queries))]
    return EvalResult(list(queries), trajs, probes, eps_sat)


def behavior_summary(
    trajectories: Sequence[TokenTrajectory],
    series: Sequence[PotentialSeries],
    wait_token: int,
) -> BehaviorSummary:
    """Solve/check/reflect averages over correct responses; R2W over incorrect ones.

    The @k fields group responses by ``query_id``.
    """
    if len(trajectories) != len(series):
        raise ValueError("one potential series per trajectory is required")
    solve, check, reflect = [], [], []
    for t, s in zip(trajectories, series):
        if t.reward == 1:
            a, b = solve_check_split(t, classify_phases(s))
            solve.append(a)
            check.append(b)
            reflect.append(reflect_count(t, wait_token))
    by_query: dict[int, list[TokenTrajectory]] = {}
    for t in trajectories:
        by_query.setdefault(t.query_id, []).append(t)
    rewards = [float(t.reward) for t in trajectories]
    acc = float(np.mean(rewards)) if rewards else 0.0
    ln = float(np.mean([len(t.tokens) for t in trajectories])) if trajectories else 0.0
    pas = float(np.mean([max(t.reward for t in ts) for ts in by_query.values()])) if by_query else 0.0
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
    n_wrong = sum(1 for t in trajectories if t.reward == 0)
    return BehaviorSummary(
        acc=acc,
        solve=mean(solve),
        check=mean(check),
        reflect=mean(reflect),
        r2w=r2w_rate(list(zip(trajectories, series))),
        acc_at_k=acc,
        len_at_k=ln,
        pass_at_k=pas,
        n_correct=len(trajectories) - n_wrong,
        n_incorrect=n_wrong,
    )


def summarize(result: EvalResult, vocab: Vocab) -> BehaviorSummary:
    trajs = [t for _, t, _ in result.flat()]
    return behavior_summary(trajs, result.series(), vocab.wait)


@dataclass
class AlignmentStats:
    deltas: list[int]
    n_trajectories: int

    @property
    def n(self) -> int:
        return len(self.deltas)

    def frac(self, pred) -> float:
        return sum(1 for d in self.deltas if pred(d)) / self.n if self.n else 0.0

    @property
    def exact(self) -> float:
        return self.frac(lambda d: d == 0)

    @property
    def late(self) -> float:
        return self.frac(lambda d: d > 0)

    @property
    def early(self) -> float:
        return self.frac(lambda d: d < 0)

    @property
    def mean_abs(self) -> float:
        return float(np.mean(np.abs(self.deltas))) if self.deltas else 0.0

    def histogram(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for d in sorted(self.deltas):
            out[d] = out.get(d, 0) + 1
        return out


def alignment_stats(items: Sequence[tuple[Query, TokenTrajectory, PotentialSeries]], vocab: Vocab) -> AlignmentStats:
    deltas = []
    for q, t, s in items:
        d = alignment_displacement(s, solving_step(q, t, vocab))
        if d is not None:
            deltas.append(d)
    return AlignmentStats(deltas, len(items))
