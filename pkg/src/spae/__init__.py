"""Step-potential advantage estimation (SPAE) on a toy chain-arithmetic task."""

from .advantage import (
    AdvantageTensor,
    SpaeConfig,
    batch_normalize,
    group_advantage,
    grpo_advantage,
    rfb_advantages,
    saturation_penalty_factor,
    shape_deltas,
    shaping_signal,
    spae_token_advantages,
)
from .core import SUMMARY, Query, TokenTrajectory, Vocab, make_trajectory, map_token_to_step, segment_steps
from .policy import DecodeConfig, OverCheckPrior, TabularPolicy
from .potential import Phase, PotentialSeries, classify_phases, detect_r2w, saturation_count, step_potential
from .probe import ProbeConfig, ProbeRecord, probe_confidence, probe_correctness, probe_step
from .toy_env import TaskSpec, generate_query, solve_reference, verify
from .trainer import TrainConfig, train, train_iteration

__all__ = [
    "AdvantageTensor", "DecodeConfig", "OverCheckPrior", "Phase", "PotentialSeries", "ProbeConfig",
    "ProbeRecord", "Query", "SUMMARY", "SpaeConfig", "TabularPolicy", "TaskSpec", "TokenTrajectory",
    "TrainConfig", "Vocab", "batch_normalize", "classify_phases", "detect_r2w", "generate_query",
    "group_advantage", "grpo_advantage", "make_trajectory", "map_token_to_step", "probe_confidence",
    "probe_correctness", "probe_step", "rfb_advantages", "saturation_count", "saturation_penalty_factor",
    "segment_steps", "shape_deltas", "shaping_signal", "solve_reference", "spae_token_advantages",
    "step_potential", "train", "train_iteration", "verify",
]
