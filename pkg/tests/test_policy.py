import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spae.core import Vocab
from spae.policy import (
    ContextState,
    DecodeConfig,
    OverCheckPrior,
    TabularPolicy,
    decode_batch,
    filtered_probs,
    sample_from,
    sample_trajectory,
    scan_features,
    softmax,
)
from spae.toy_env import TaskSpec, generate_query, make_query, verify

from conftest import random_policy

V = Vocab.default()
SPEC = TaskSpec()


class ScriptedPolicy:
    """Emits a fixed response one-hot, position by position."""

    def __init__(self, vocab, prompt_len, script):
        self.vocab, self.prompt_len, self.script = vocab, prompt_len, script

    def next_token_distribution(self, context):
        p = np.zeros(self.vocab.size)
        p[self.script[len(context) - self.prompt_len]] = 1.0
        return p

    def sample(self, context, temperature=1.0, top_k=0, top_p=1.0, rng=None):
        return int(np.argmax(self.next_token_distribution(context)))

    def logprob(self, context, token):
        return float(np.log(self.next_token_distribution(context)[token]))


def test_zero_row_is_uniform(small_vocab):
    pol = TabularPolicy(small_vocab)
    np.testing.assert_allclose(pol.next_token_distribution([1, 2]), np.full(10, 0.1))


def test_large_logit_is_one_hot():
    p = softmax(np.array([500.0, 0, 0, 0]))
    assert p[0] == pytest.approx(1.0) and p[1:].max() < 1e-200


def test_hand_softmax():
    np.testing.assert_allclose(softmax(np.array([np.log(3.0), 0.0])), [0.75, 0.25])


def test_scripted_trajectory_one_step():
    q = make_query(3, [("add", 4)], SPEC, V)
    script = [3, V.delim, V.think_end, V.answer, 7, V.eot]
    t = sample_trajectory(ScriptedPolicy(V, len(q.prompt), script), q, DecodeConfig(), np.random.default_rng(0))
    assert list(t.tokens) == script
    assert t.num_steps == 1 and t.steps == ((0, 2),)
    assert not t.truncated
    assert verify(t, q, V).reward == 1


def test_without_think_end_the_tail_is_a_reasoning_step():
    q = make_query(3, [("add", 4)], SPEC, V)
    script = [3, V.delim, V.answer, 7, V.eot]
    t = sample_trajectory(ScriptedPolicy(V, len(q.prompt), script), q, DecodeConfig(), np.random.default_rng(0))
    assert t.steps == ((0, 2), (2, 5))
    assert verify(t, q, V).reward == 0


def test_max_len_one_truncates(prior_policy):
    q = generate_query(0, SPEC, V)
    t = sample_trajectory(prior_policy, q, DecodeConfig(max_len=1), np.random.default_rng(0))
    assert len(t.tokens) == 1 and t.truncated


def test_sampling_is_seed_deterministic(prior_policy):
    q = generate_query(3, SPEC, V)
    a = sample_trajectory(prior_policy, q, DecodeConfig(), np.random.default_rng(5))
    b = sample_trajectory(prior_policy, q, DecodeConfig(), np.random.default_rng(5))
    assert a == b


def test_uniform_logprob_and_grad(small_vocab):
    pol = TabularPolicy(small_vocab)
    lp, g = pol.logprob_and_grad([0, 1], 3)
    assert lp == pytest.approx(np.log(0.1))
    expected = -0.1 * np.ones(10)
    expected[3] += 1
    np.testing.assert_allclose(g, expected)


def test_saturated_row_has_zero_grad(small_vocab):
    pol = TabularPolicy(small_vocab)
    pol.logits[pol.row_index([0, 1]), 2] = 60.0
    _, g = pol.logprob_and_grad([0, 1], 2)
    assert np.abs(g).max() < 1e-20


def test_logprob_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    pol = random_policy(V, 1)
    h = 1e-5
    for _ in range(100):
        ctx = [int(x) for x in rng.integers(0, V.size, size=rng.integers(1, 6))]
        tok = int(rng.integers(V.size))
        row = pol.row_index(ctx)
        _, g = pol.logprob_and_grad(ctx, tok)
        j = int(rng.integers(V.size))
        saved = pol.logits[row, j]
        pol.logits[row, j] = saved + h
        up = pol.logprob(ctx, tok)
        pol.logits[row, j] = saved - h
        down = pol.logprob(ctx, tok)
        pol.logits[row, j] = saved
        fd = (up - down) / (2 * h)
        assert abs(fd - g[j]) <= 1e-6 * max(1.0, abs(g[j]))


def test_low_temperature_sampling_is_argmax():
    pol = random_policy(V, 2)
    rng = np.random.default_rng(0)
    for _ in range(100):
        ctx = [int(x) for x in rng.integers(0, V.size, size=3)]
        tok = pol.sample(ctx, temperature=1e-3, rng=rng)
        assert tok == int(np.argmax(pol.logits[pol.row_index(ctx)]))


def test_rows_normalize():
    pol = random_policy(V, 3, scale=5.0)
    rows = np.arange(0, pol.table_rows, 997)
    p = filtered_probs(pol.logits[rows])
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_top_k_and_top_p_filtering():
    z = np.log(np.array([0.5, 0.3, 0.15, 0.05]))
    np.testing.assert_allclose(filtered_probs(z, top_k=2), [0.625, 0.375, 0, 0])
    np.testing.assert_allclose(filtered_probs(z, top_p=0.79), [0.625, 0.375, 0, 0])
    np.testing.assert_allclose(filtered_probs(z, top_p=0.81), [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0])
    # temperature sharpens
    assert filtered_probs(z, temperature=0.5)[0] > 0.5


def test_inverse_cdf_sampling():
    p = np.array([[0.2, 0.0, 0.8]])
    assert sample_from(p, np.array([0.1]))[0] == 0
    assert sample_from(p, np.array([0.2]))[0] == 0
    assert sample_from(p, np.array([0.21]))[0] == 2
    assert sample_from(p, np.array([0.999999]))[0] == 2


@given(st.lists(st.integers(0, V.size - 1), max_size=25), st.integers(0, 2**31 - 1))
def test_incremental_features_match_scan(response, seed):
    q = generate_query(seed, SPEC, V)
    ctx = list(q.prompt) + response
    st_ = ContextState.from_contexts(V, 2, [ctx, list(q.prompt)])
    st_.advance(np.array([0, response[0] if response else 0]), np.array([False, bool(response)]))
    last, ptr, reg = scan_features(V, 2, ctx)
    assert tuple(st_.last[0]) == last
    assert st_.pointer_codes()[0] == ptr
    assert st_.reg[0] == reg
    last1, ptr1, reg1 = scan_features(V, 2, list(q.prompt) + response[:1])
    assert (tuple(st_.last[1]), st_.pointer_codes()[1], st_.reg[1]) == (last1, ptr1, reg1)


def test_row_keys_are_collision_free():
    pol = TabularPolicy(V)
    rows = np.arange(0, pol.key_space, 131)
    last, ptr, reg = pol.decode_key(rows)
    np.testing.assert_array_equal(pol.encode(last, ptr, reg), rows)


def test_small_table_folds_modulo():
    pol = TabularPolicy(V, table_rows=4096)
    assert pol.logits.shape == (4096, V.size)
    ctx = list(generate_query(0, SPEC, V).prompt) + [3, V.delim]
    assert 0 <= pol.row_index(ctx) < 4096


def test_batched_decode_matches_scalar(prior_policy):
    decode = DecodeConfig.evaluation()
    queries = [generate_query(s, SPEC, V, i) for i, s in enumerate(range(12))]
    rngs = [np.random.default_rng([9, i]) for i in range(12)]
    scalar = [sample_trajectory(prior_policy, q, decode, r) for q, r in zip(queries, rngs)]
    uniforms = np.stack([np.random.default_rng([9, i]).random(decode.max_len) for i in range(12)])
    state = ContextState.from_contexts(V, 2, [q.prompt for q in queries])
    out = decode_batch(prior_policy, state, uniforms, decode)
    for t, toks, lps in zip(scalar, out.tokens, out.logprobs):
        assert list(t.tokens) == toks.tolist()
        np.testing.assert_allclose(t.logprobs, lps, rtol=1e-12)


def test_logprobs_use_filtered_distribution(prior_policy):
    decode = DecodeConfig(temperature=0.6, top_k=3)
    q = generate_query(1, SPEC, V)
    t = sample_trajectory(prior_policy, q, decode, np.random.default_rng(0))
    ctx = list(q.prompt)
    for tok, lp in zip(t.tokens, t.logprobs):
        p = filtered_probs(prior_policy.logits[prior_policy.row_index(ctx)], 0.6, 3)
        assert lp == pytest.approx(np.log(p[tok]))
        ctx.append(tok)


def test_checkpoint_roundtrip(tmp_path, prior_policy):
    path = tmp_path / "p.npz"
    prior_policy.save(path, {"iteration": 3})
    pol, extra = TabularPolicy.load(path)
    assert extra == {"iteration": 3}
    assert pol.digest() == prior_policy.digest()
    assert pol.vocab == prior_policy.vocab and pol.context_order == 2


def test_prior_parameter_validation():
    with pytest.raises(ValueError):
        OverCheckPrior(flip_prob=1.5)
    with pytest.raises(ValueError):
        OverCheckPrior(loop_prob=-0.1)


def test_prior_behaviour(prior_policy):
    """Stepwise solving, WAIT loops after the chain is done, occasional flips."""
    decode = DecodeConfig.rollout()
    queries = [generate_query(s, SPEC, V, s) for s in range(400)]
    uniforms = np.random.default_rng(0).random((400, decode.max_len))
    out = decode_batch(prior_policy, ContextState.from_contexts(V, 2, [q.prompt for q in queries]), uniforms, decode)
    waits = [int((t == V.wait).sum()) for t in out.tokens]
    starts_right = np.mean([t[0] == q.prompt[0] for t, q in zip(out.tokens, queries)])
    assert starts_right > 0.9
    assert np.mean(waits) > 1.0
    assert np.mean([w == 0 for w in waits]) > 0.15
    from spae.core import make_trajectory

    rewards = [verify(make_trajectory(t, np.zeros(len(t)), V), q, V).reward for t, q in zip(out.tokens, queries)]
    assert 0.5 < np.mean(rewards) < 0.95


def test_policy_rejects_bad_logits():
    with pytest.raises(ValueError):
        TabularPolicy(V, table_rows=10, logits=np.zeros((9, V.size)))
    bad = np.zeros((10, V.size))
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        TabularPolicy(V, table_rows=10, logits=bad)
