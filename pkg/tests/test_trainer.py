import logging

import numpy as np
import pytest

from spae.core import Vocab
from spae.policy import DecodeConfig, OverCheckPrior, filtered_probs, sample_trajectory
from spae.probe import ProbeConfig
from spae.toy_env import TaskSpec, generate_query
from spae.trainer import (
    Rollout,
    RolloutGroup,
    TrainConfig,
    clipped_surrogate_term,
    compute_advantages,
    dynamic_sampling_filter,
    initial_policy,
    iteration_batch,
    make_minibatch,
    probe_groups,
    probe_truncated_decode,
    sample_groups,
    surrogate_and_grad,
    surrogate_value,
    train,
    train_iteration,
    truncated_decode_batch,
)

V = Vocab.default()
SMALL = dict(batch_queries=6, group_size=4, mini_batch=2, lr=1.0, iterations=3)


def test_clip_examples():
    assert clipped_surrogate_term(1.0, 0.37, 0.2, 0.28) == pytest.approx(0.37)
    assert clipped_surrogate_term(1.5, 1.0, 0.2, 0.28) == pytest.approx(1.28)
    assert clipped_surrogate_term(0.5, -1.0, 0.2, 0.28) == pytest.approx(-0.8)


def _group(rewards):
    rolls = []
    for r in rewards:
        t = type("T", (), {"reward": r})()
        rolls.append(Rollout(None, t, np.zeros(0), np.zeros(0)))
    return RolloutGroup(None, rolls)


def test_dynamic_sampling():
    groups = [_group([1, 1, 1, 1]), _group([1, 0, 1, 0]), _group([0, 0])]
    kept = dynamic_sampling_filter(groups)
    assert [g.rewards.tolist() for g in kept] == [[1, 0, 1, 0]]


def test_all_groups_filtered_skips_update(prior_policy, caplog):
    pol = prior_policy.copy()
    pol.logits *= 1e3  # deterministic: every group has constant reward
    cfg = TrainConfig(estimator="RFB", **SMALL)
    digest = pol.digest()
    with caplog.at_level(logging.INFO, logger="spae.trainer"):
        rep = train_iteration(pol, cfg, 0)
    assert rep.skipped and rep.groups_kept == 0
    assert pol.digest() == digest
    assert any("skipping" in m for m in caplog.messages)


def test_deterministic_policy_gives_identical_group(prior_policy):
    pol = prior_policy.copy()
    pol.logits *= 1e3
    q = generate_query(0, TaskSpec(), V)
    (g,) = sample_groups(pol, [q], 8, DecodeConfig.rollout(), np.random.default_rng(0))
    assert len(g.rollouts) == 8
    assert len({r.trajectory.tokens for r in g.rollouts}) == 1


def test_groups_are_verified(prior_policy):
    from spae.toy_env import verify

    qs = [generate_query(i, TaskSpec(), V, i) for i in range(4)]
    for g in sample_groups(prior_policy, qs, 4, DecodeConfig.rollout(), np.random.default_rng(1)):
        for r in g.rollouts:
            assert r.trajectory.reward == verify(r.trajectory, g.query, V).reward


def test_on_policy_objective_equals_advantage_sum(prior_policy):
    cfg = TrainConfig(estimator="SPAE", **SMALL)
    _, kept = iteration_batch(prior_policy, cfg, 0)
    probe_groups(prior_policy, kept, cfg.probe, 5)
    adv = compute_advantages(kept, cfg)
    rolls = [r for g in kept for r in g.rollouts]
    mb = make_minibatch(rolls, adv.values, token_mean=True)
    p = filtered_probs(prior_policy.logits[mb.rows], cfg.decode.temperature)
    ratio = np.exp(np.log(p[np.arange(len(mb.rows)), mb.tokens]) - mb.old_logprobs)
    np.testing.assert_allclose(ratio, 1.0, rtol=1e-12)
    obj = surrogate_value(prior_policy.logits, mb, cfg.decode, 0.2, 0.28)
    assert obj == pytest.approx(float(np.sum(mb.weights * mb.advantages)), abs=1e-12)


def _frozen_minibatch(policy, estimator, iteration):
    cfg = TrainConfig(estimator=estimator, **SMALL)
    _, kept = iteration_batch(policy, cfg, iteration)
    if estimator == "SPAE":
        probe_groups(policy, kept, cfg.probe, 11)
    adv = compute_advantages(kept, cfg)
    rolls = [r for g in kept for r in g.rollouts]
    return cfg, make_minibatch(rolls, adv.values, token_mean=estimator != "GRPO")


@pytest.mark.parametrize("estimator", ["GRPO", "DAPO", "RFB", "SPAE"])
def test_gradient_matches_finite_differences(prior_policy, estimator):
    cfg, mb = _frozen_minibatch(prior_policy, estimator, 1)
    logits = prior_policy.logits.copy()
    # move off-policy so some ratios leave 1 (but stay within the clip band mostly)
    rng = np.random.default_rng(0)
    touched = np.unique(mb.rows)
    logits[touched] += rng.normal(0, 0.05, (len(touched), logits.shape[1]))
    eps_hi = cfg.eps_low if estimator == "GRPO" else cfg.eps_high
    _, grad, uniq, _ = surrogate_and_grad(logits, mb, cfg.decode, cfg.eps_low, eps_hi)
    h = 1e-5
    for _ in range(20):
        i = int(rng.integers(len(uniq)))
        j = int(rng.integers(logits.shape[1]))
        saved = logits[uniq[i], j]
        logits[uniq[i], j] = saved + h
        up = surrogate_value(logits, mb, cfg.decode, cfg.eps_low, eps_hi)
        logits[uniq[i], j] = saved - h
        down = surrogate_value(logits, mb, cfg.decode, cfg.eps_low, eps_hi)
        logits[uniq[i], j] = saved
        fd = (up - down) / (2 * h)
        assert abs(fd - grad[i, j]) <= 1e-5 * max(1e-3, abs(grad[i, j])) + 1e-10


def test_rfb_and_zero_weight_spae_update_identically(prior_policy):
    a, b = prior_policy.copy(), prior_policy.copy()
    ra = train_iteration(a, TrainConfig(estimator="RFB", **SMALL), 0)
    rb = train_iteration(b, TrainConfig(estimator="SPAE", xi=0.0, alpha=0.0, **SMALL), 0)
    assert a.logits.tobytes() == b.logits.tobytes()
    assert ra == rb


def test_training_is_deterministic(prior_policy):
    cfg = TrainConfig(estimator="SPAE", **SMALL)
    p1, r1 = train(cfg, prior_policy.copy())
    p2, r2 = train(cfg, prior_policy.copy())
    assert r1 == r2 and p1.digest() == p2.digest()


def test_resume_matches_uninterrupted(prior_policy):
    cfg = TrainConfig(estimator="DAPO", **SMALL)
    full, reps = train(cfg, prior_policy.copy())
    half, first = train(TrainConfig(estimator="DAPO", **{**SMALL, "iterations": 1}), prior_policy.copy())
    resumed, rest = train(cfg, half, start_iteration=1)
    assert first + rest == reps and resumed.digest() == full.digest()


def test_grpo_keeps_constant_groups(prior_policy):
    cfg = TrainConfig(estimator="GRPO", **SMALL)
    groups, kept = iteration_batch(prior_policy, cfg, 0)
    assert kept == groups


def test_grpo_uses_sequence_mean_weights(prior_policy):
    cfg, mb = _frozen_minibatch(prior_policy, "GRPO", 0)
    n_seq = SMALL["batch_queries"] * SMALL["group_size"]
    assert mb.weights.sum() == pytest.approx(1.0)
    _, mb2 = _frozen_minibatch(prior_policy, "DAPO", 0)
    assert np.ptp(mb2.weights) == 0
    assert len(np.unique(mb.weights)) > 1 or n_seq == 1


def test_report_fields_are_sane(prior_policy):
    rep = train_iteration(prior_policy.copy(), TrainConfig(estimator="SPAE", **SMALL), 0)
    assert rep.mean_length > 0 and rep.entropy >= 0 and 0 <= rep.clip_fraction <= 1
    assert 0 <= rep.mean_reward <= 1


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        TrainConfig(estimator="PPO")
    with pytest.raises(ValueError):
        TrainConfig(eps_low=0)
    with pytest.raises(ValueError):
        TrainConfig(group_size=1)
    with pytest.raises(ValueError):
        TrainConfig(alpha=2)
    cfg = TrainConfig(estimator="DAPO", ops=("add",), lr=0.3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})


def test_paper_defaults():
    cfg = TrainConfig()
    assert (cfg.group_size, cfg.eps_low, cfg.eps_high) == (8, 0.2, 0.28)
    assert (cfg.xi, cfg.alpha, cfg.probe_samples, cfg.eps_sat) == (0.5, 0.5, 5, 0.9)
    assert cfg.decode.temperature == 1.0


# ---------------------------------------------------------------- truncation


def test_unsaturating_truncation_is_standard_decoding(prior_policy):
    cfg = ProbeConfig(decode=DecodeConfig.evaluation())
    for s in range(5):
        q = generate_query(s, TaskSpec(), V)
        std = sample_trajectory(prior_policy, q, cfg.decode, np.random.default_rng(s))
        tr = probe_truncated_decode(prior_policy, q, cfg, np.random.default_rng(s), eps_sat=1.0)
        assert tr.truncated_at is None
        assert tr.trajectory.tokens == std.tokens


def test_truncation_cuts_at_saturation(prior_policy):
    cfg = ProbeConfig(decode=DecodeConfig.evaluation())
    seen = 0
    for s in range(40):
        q = generate_query(s, TaskSpec(), V)
        std = sample_trajectory(prior_policy, q, cfg.decode, np.random.default_rng(s))
        tr = probe_truncated_decode(prior_policy, q, cfg, np.random.default_rng(s), 0.9, 3, s)
        assert len(tr.trajectory.tokens) <= len(std.tokens)
        if tr.truncated_at is None:
            continue
        seen += 1
        t = tr.trajectory
        assert t.num_steps == tr.truncated_at
        end = t.reasoning_end
        assert t.tokens[:end] == std.tokens[:end]
        assert t.tokens[end] == V.think_end
        if std.num_steps > tr.truncated_at:
            assert len(t.tokens) < len(std.tokens)
    assert seen > 10


def test_batched_truncation_matches_scalar(prior_policy):
    cfg = ProbeConfig(decode=DecodeConfig.evaluation())
    qs = [generate_query(s, TaskSpec(), V, s) for s in range(10)]
    u = np.stack([np.random.default_rng(s).random(cfg.decode.max_len) for s in range(10)])
    batched = truncated_decode_batch(prior_policy, qs, cfg, u, 0.9, 3, list(range(10)))
    for s, (q, b) in enumerate(zip(qs, batched)):
        a = probe_truncated_decode(prior_policy, q, cfg, np.random.default_rng(s), 0.9, 3, s)
        assert a.trajectory.tokens == b.trajectory.tokens
        assert a.truncated_at == b.truncated_at
        assert [r.k for r in a.probes] == [r.k for r in b.probes]
        np.testing.assert_allclose([r.confidence for r in a.probes], [r.confidence for r in b.probes], rtol=1e-12)


def test_initial_policy_uses_prior():
    cfg = TrainConfig()
    assert initial_policy(cfg).digest() == OverCheckPrior().build(cfg.task).digest()
