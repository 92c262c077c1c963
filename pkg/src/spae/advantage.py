"""Advantage estimators: GRPO, RF-B and step-potential-aware (SPAE) advantages."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import SUMMARY
from .potential import DEFAULT_EPS_SAT, PotentialSeries, saturation_counts

RAW_SPAE = "RAW_SPAE"
FINAL = "FINAL"


@dataclass(frozen=True)
class SpaeConfig:
    xi: float = 0.5
    alpha: float = 0.5
    eps_sat: float = DEFAULT_EPS_SAT
    eps_norm: float = 1e-8

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.xi < 0:
            raise ValueError(f"xi must be >= 0, got {self.xi}")
        if self.eps_norm <= 0:
            raise ValueError("eps_norm must be positive")


@dataclass
class AdvantageTensor:
    values: list[np.ndarray]
    stage: str

    def flat(self) -> np.ndarray:
        if not self.values:
            return np.zeros(0)
        return np.concatenate(self.values)


# ---------------------------------------------------------------- outcome


def group_advantage(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    return r - r.mean()


def grpo_advantage(rewards: Sequence[float]) -> np.ndarray:
    """Group-standardized rewards (population std); a constant group gets zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) < 2:
        raise ValueError("GRPO needs a group of at least two rollouts")
    std = r.std()
    if std == 0:
        return np.zeros_like(r)
    return (r - r.mean()) / std


# ---------------------------------------------------------------- potential terms


def saturation_penalty_factor(c_sat, alpha: float):
    """``1 - alpha * (1 - exp(-c_sat))``; 1 before saturation, tends to ``1 - alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return 1.0 - alpha * (1.0 - np.exp(-np.asarray(c_sat, dtype=np.float64)))


def potential_deltas(series: PotentialSeries) -> np.ndarray:
    """``phi[k] - phi[k-1]`` for k = 2..K; the first step has no delta."""
    return np.diff(np.asarray(series.phi, dtype=np.float64))


def shape_deltas(deltas: np.ndarray) -> np.ndarray:
    """Min-max normalize across the batch, exponentiate, then center."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size == 0:
        return deltas.copy()
    lo, hi = deltas.min(), deltas.max()
    if hi == lo:
        return np.zeros_like(deltas)
    e = np.exp((deltas - lo) / (hi - lo))
    return e - e.mean()


def shaping_signal(batch: Sequence[PotentialSeries]) -> list[np.ndarray]:
    """Per-step shaping values for every trajectory in the batch.

    First steps are left out of the normalization population and get 0.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    deltas = [potential_deltas(s) for s in batch]
    flat = shape_deltas(np.concatenate(deltas) if deltas else np.zeros(0))
    out, pos = [], 0
    for s, d in zip(batch, deltas):
        g = np.zeros(len(s))
        g[1:] = flat[pos : pos + len(d)]
        pos += len(d)
        out.append(g)
    return out


# ---------------------------------------------------------------- token level


def spae_token_advantages(
    group_adv: Sequence[float],
    series: Sequence[PotentialSeries],
    step_maps: Sequence[np.ndarray],
    cfg: SpaeConfig,
) -> AdvantageTensor:
    if not (len(group_adv) == len(series) == len(step_maps)):
        raise ValueError("group advantages, potential series and step maps differ in length")
    shaping = shaping_signal(series) if series else []
    values = []
    for a, s, smap, g in zip(group_adv, series, step_maps, shaping):
        smap = np.asarray(smap)
        K = len(s)
        if smap.size and smap.max() > K:
            raise ValueError("step map refers to a step without a potential")
        f = saturation_penalty_factor(saturation_counts(s), cfg.alpha)
        # summary tokens keep plain outcome credit
        f_tok = np.ones(len(smap))
        g_tok = np.zeros(len(smap))
        reasoning = smap != SUMMARY
        f_tok[reasoning] = f[smap[reasoning] - 1]
        g_tok[reasoning] = g[smap[reasoning] - 1]
        values.append(float(a) * f_tok + cfg.xi * g_tok)
    return AdvantageTensor(values, RAW_SPAE)


def batch_normalize(tensor: AdvantageTensor, eps_norm: float = 1e-8) -> AdvantageTensor:
    """Standardize every token advantage in the batch with population statistics."""
    flat = tensor.flat()
    if flat.size == 0:
        raise ValueError("cannot normalize an empty batch")
    mu = flat.mean()
    sd = flat.std()
    return AdvantageTensor([(v - mu) / (sd + eps_norm) for v in tensor.values], FINAL)


def rfb_advantages(group_adv: Sequence[float], lengths: Sequence[int], eps_norm: float = 1e-8) -> AdvantageTensor:
    """Outcome advantage broadcast to tokens, standardized over the whole batch."""
    if len(group_adv) < 2:
        raise ValueError("RF-B needs at least two rollouts in the batch")
    raw = AdvantageTensor([np.full(n, float(a)) for a, n in zip(group_adv, lengths)], RAW_SPAE)
    return batch_normalize(raw, eps_norm)
