"""Step Potential, solving/checking phases, Right-to-Wrong detection and saturation counts."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

DEFAULT_EPS_SAT = 0.9


class Phase(str, Enum):
    SOLVING = "S"
    CHECKING = "C"


def step_potential(acc: float, conf: float) -> float:
    """Combine correctness and confidence into a score in [-1, 1].

    Corners: (1, 1) -> 1 (correct and confident), (0, 1) -> -1 (confidently
    wrong), low confidence -> near 0 whatever the correctness.
    """
    if not (0.0 <= acc <= 1.0 and 0.0 <= conf <= 1.0):
        raise ValueError(f"acc and conf must lie in [0, 1], got ({acc}, {conf})")
    return 1.5 * acc * conf + 0.5 * acc - conf


@dataclass(frozen=True)
class PotentialSeries:
    phi: tuple[float, ...]
    eps_sat: float = DEFAULT_EPS_SAT

    def __post_init__(self) -> None:
        if any(not -1.0 - 1e-12 <= p <= 1.0 + 1e-12 for p in self.phi):
            raise ValueError("potential values must lie in [-1, 1]")

    @classmethod
    def from_probes(cls, records, eps_sat: float = DEFAULT_EPS_SAT) -> "PotentialSeries":
        return cls(tuple(step_potential(r.correctness, r.confidence) for r in records), eps_sat)

    def __len__(self) -> int:
        return len(self.phi)

    def saturated(self) -> np.ndarray:
        return np.asarray(self.phi, dtype=np.float64) > self.eps_sat


def classify_phases(series: PotentialSeries) -> list[Phase]:
    """A step is checking once some strictly earlier step has saturated."""
    labels = []
    seen = False
    for p in series.phi:
        labels.append(Phase.CHECKING if seen else Phase.SOLVING)
        seen = seen or p > series.eps_sat
    return labels


def detect_r2w(series: PotentialSeries, reward: int) -> bool:
    return bool(series.phi) and max(series.phi) > series.eps_sat and reward == 0


def saturation_count(series: PotentialSeries, k: int) -> int:
    """Number of saturated steps strictly before step ``k`` (1-based)."""
    if not 1 <= k <= len(series):
        raise IndexError(f"step {k} outside 1..{len(series)}")
    return int(series.saturated()[: k - 1].sum())


def saturation_counts(series: PotentialSeries) -> np.ndarray:
    """``saturation_count`` for every step at once."""
    sat = series.saturated().astype(np.int64)
    return np.concatenate([[0], np.cumsum(sat)[:-1]]) if len(sat) else sat


def first_saturation(series: PotentialSeries) -> int | None:
    for k, p in enumerate(series.phi, start=1):
        if p > series.eps_sat:
            return k
    return None


def phase_string(labels: Sequence[Phase]) -> list[str]:
    return [p.value for p in labels]
