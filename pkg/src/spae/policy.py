"""Autoregressive policies: the oracle interface and a tabular-softmax reference policy.

The tabular policy keys each position on a small feature tuple:

* the last ``C`` tokens (padded at the left),
* the pending chain operation read off the prompt (``START s``, ``op a`` or ``DONE``),
* the most recent digit written in the reasoning region (the working value).

The tuple is mixed-radix encoded into a row index; a table smaller than the
full key space folds indices modulo ``table_rows``.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .core import Query, TokenTrajectory, Vocab, make_trajectory
from .toy_env import OP_NAMES, MalformedPrompt, TaskSpec, apply_op, parse_prompt

PTR_NONE = 0
PTR_DONE = 1


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 1.0
    top_k: int = 0  # 0 disables
    top_p: float = 1.0
    max_len: int = 48

    @classmethod
    def rollout(cls, max_len: int = 48) -> "DecodeConfig":
        return cls(1.0, 0, 1.0, max_len)

    @classmethod
    def evaluation(cls, max_len: int = 48) -> "DecodeConfig":
        return cls(0.6, 50, 1.0, max_len)


class PolicyOracle(Protocol):
    vocab: Vocab

    def next_token_distribution(self, context: Sequence[int]) -> np.ndarray: ...

    def sample(
        self,
        context: Sequence[int],
        temperature: float,
        top_k: int,
        top_p: float,
        rng: np.random.Generator,
    ) -> int: ...

    def logprob(self, context: Sequence[int], token: int) -> float: ...


# ---------------------------------------------------------------- filtering


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def filtered_probs(logits: np.ndarray, temperature: float = 1.0, top_k: int = 0, top_p: float = 1.0) -> np.ndarray:
    """Sampling distribution after temperature, top-k and top-p, renormalized.

    Works on a single row or a ``(B, V)`` batch.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64)) / temperature
    V = z.shape[-1]
    if 0 < top_k < V:
        kth = np.partition(z, V - top_k, axis=-1)[:, V - top_k][:, None]
        z = np.where(z >= kth, z, -np.inf)
    p = softmax(z)
    if top_p < 1.0:
        order = np.argsort(-p, axis=-1, kind="stable")
        sorted_p = np.take_along_axis(p, order, axis=-1)
        cum = np.cumsum(sorted_p, axis=-1)
        # keep tokens until the cumulative mass first reaches top_p
        keep_sorted = (cum - sorted_p) < top_p
        keep = np.zeros_like(keep_sorted)
        np.put_along_axis(keep, order, keep_sorted, axis=-1)
        p = np.where(keep, p, 0.0)
        p = p / p.sum(axis=-1, keepdims=True)
    return p if np.ndim(logits) > 1 else p[0]


def entropy_rows(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def sample_from(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling: one uniform per row, so paired streams stay aligned."""
    cum = np.cumsum(p, axis=-1)
    idx = (cum < u[:, None] * cum[:, -1:]).sum(axis=-1)
    # guard against landing on a zero-probability tail through rounding
    idx = np.minimum(idx, p.shape[-1] - 1)
    bad = p[np.arange(len(idx)), idx] <= 0
    if bad.any():
        idx[bad] = np.argmax(p[bad], axis=-1)
    return idx


# ---------------------------------------------------------------- features


class ContextState:
    """Incremental feature state for a batch of sequences.

    ``advance`` and :func:`scan_features` implement the same update rules;
    the tests hold them to agreement.
    """

    def __init__(self, vocab: Vocab, context_order: int, batch: int, max_ops: int = 0):
        self.vocab = vocab
        self.C = context_order
        self.last = np.full((batch, context_order), vocab.size, dtype=np.int64)
        self.n_solve = np.zeros(batch, dtype=np.int64)
        self.in_check = np.zeros(batch, dtype=bool)
        self.reg = np.full(batch, vocab.n_digits, dtype=np.int64)
        self.phase = np.zeros(batch, dtype=np.int64)
        self.has_prompt = np.zeros(batch, dtype=bool)
        self.start = np.zeros(batch, dtype=np.int64)
        self.n_ops = np.zeros(batch, dtype=np.int64)
        self.op_codes = np.zeros((batch, max(max_ops, 1)), dtype=np.int64)

    @classmethod
    def from_contexts(cls, vocab: Vocab, context_order: int, contexts: Sequence[Sequence[int]]) -> "ContextState":
        parsed = [_split_context(vocab, c) for c in contexts]
        max_ops = max((len(p[1]) for p in parsed if p[0] is not None), default=0)
        st = cls(vocab, context_order, len(contexts), max_ops)
        for b, (start, chain, prompt, response) in enumerate(parsed):
            if start is not None:
                st.has_prompt[b] = True
                st.start[b] = start
                st.n_ops[b] = len(chain)
                for i, (op, arg) in enumerate(chain):
                    st.op_codes[b, i] = OP_NAMES.index(op) * vocab.n_digits + arg
            tail = list(prompt)[-context_order:]
            for j, t in enumerate(tail):
                st.last[b, context_order - len(tail) + j] = t
        # replay responses token by token, masked to each sequence's length
        width = max((len(p[3]) for p in parsed), default=0)
        for pos in range(width):
            live = np.array([pos < len(p[3]) for p in parsed])
            toks = np.array([p[3][pos] if pos < len(p[3]) else 0 for p in parsed], dtype=np.int64)
            st.advance(toks, live)
        return st

    def copy(self) -> "ContextState":
        new = object.__new__(ContextState)
        new.__dict__ = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        return new

    def select(self, idx: np.ndarray) -> "ContextState":
        new = object.__new__(ContextState)
        new.__dict__ = {k: (v[idx] if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        return new

    def advance(self, tokens: np.ndarray, live: Optional[np.ndarray] = None) -> None:
        v = self.vocab
        tokens = np.asarray(tokens, dtype=np.int64)
        live = np.ones(len(tokens), dtype=bool) if live is None else live
        shifted = np.concatenate([self.last[:, 1:], tokens[:, None]], axis=1)
        self.last = np.where(live[:, None], shifted, self.last)
        reasoning = live & (self.phase == 0)
        is_delim = reasoning & (tokens == v.delim)
        self.n_solve = self.n_solve + (is_delim & ~self.in_check)
        self.in_check = np.where(is_delim, False, self.in_check)
        self.in_check = self.in_check | (reasoning & (tokens == v.wait))
        self.reg = np.where(reasoning & (tokens < v.n_digits), tokens, self.reg)
        self.phase = np.where(live & (tokens == v.think_end), 1, self.phase)

    def pointer_codes(self) -> np.ndarray:
        nd = self.vocab.n_digits
        idx = np.clip(self.n_solve - 1, 0, self.op_codes.shape[1] - 1)
        op_code = self.op_codes[np.arange(len(idx)), idx]
        code = np.where(
            self.n_solve == 0,
            2 + self.start,
            np.where(self.n_solve <= self.n_ops, 2 + nd + op_code, PTR_DONE),
        )
        return np.where(self.has_prompt, code, PTR_NONE)


def _split_context(vocab: Vocab, context: Sequence[int]):
    """Return (start, chain, prompt_tokens, response_tokens); start is None without a prompt."""
    context = [int(t) for t in context]
    if vocab.qend is not None and vocab.qend in context:
        cut = context.index(vocab.qend) + 1
        prompt, response = context[:cut], context[cut:]
        try:
            start, chain = parse_prompt(prompt, vocab)
            return start, chain, prompt, response
        except MalformedPrompt:
            return None, [], prompt, response
    return None, [], [], context


def scan_features(vocab: Vocab, context_order: int, context: Sequence[int]) -> tuple[tuple[int, ...], int, int]:
    """Scalar reference for the feature tuple ``(last C tokens, pointer code, register)``."""
    start, chain, prompt, response = _split_context(vocab, context)
    full = list(prompt) + list(response)
    last = [vocab.size] * context_order + full
    last = tuple(last[len(last) - context_order:])
    n_solve, in_check, reg, phase = 0, False, vocab.n_digits, 0
    for t in response:
        if phase == 0:
            if t == vocab.delim:
                if not in_check:
                    n_solve += 1
                in_check = False
            elif t == vocab.wait:
                in_check = True
            elif t < vocab.n_digits:
                reg = t
        if t == vocab.think_end:
            phase = 1
    if start is None:
        ptr = PTR_NONE
    elif n_solve == 0:
        ptr = 2 + start
    elif n_solve <= len(chain):
        op, arg = chain[n_solve - 1]
        ptr = 2 + vocab.n_digits + OP_NAMES.index(op) * vocab.n_digits + arg
    else:
        ptr = PTR_DONE
    return last, ptr, reg


# ---------------------------------------------------------------- policy


class TabularPolicy:
    def __init__(
        self,
        vocab: Optional[Vocab] = None,
        context_order: int = 2,
        table_rows: Optional[int] = None,
        logits: Optional[np.ndarray] = None,
        temperature: float = 1.0,
    ):
        self.vocab = vocab or Vocab.default()
        self.context_order = context_order
        V = self.vocab.size
        self.n_ptr = 2 + self.vocab.n_digits + len(self.vocab.ops) * self.vocab.n_digits
        self.n_reg = self.vocab.n_digits + 1
        self.key_space = (V + 1) ** context_order * self.n_ptr * self.n_reg
        self.table_rows = table_rows or self.key_space
        self.temperature = temperature
        if logits is None:
            logits = np.zeros((self.table_rows, V))
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != (self.table_rows, V):
            raise ValueError(f"logits shape {logits.shape} != {(self.table_rows, V)}")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        self.logits = logits

    # -- indexing

    def encode(self, last: np.ndarray, ptr: np.ndarray, reg: np.ndarray) -> np.ndarray:
        key = np.zeros(len(ptr), dtype=np.int64)
        for j in range(self.context_order):
            key = key * (self.vocab.size + 1) + last[:, j]
        key = (key * self.n_ptr + ptr) * self.n_reg + reg
        return key % self.table_rows

    def decode_key(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Inverse of :meth:`encode` for a collision-free table."""
        rows = np.asarray(rows, dtype=np.int64)
        reg = rows % self.n_reg
        rest = rows // self.n_reg
        ptr = rest % self.n_ptr
        rest = rest // self.n_ptr
        last = np.zeros((len(rows), self.context_order), dtype=np.int64)
        for j in reversed(range(self.context_order)):
            last[:, j] = rest % (self.vocab.size + 1)
            rest = rest // (self.vocab.size + 1)
        return last, ptr, reg

    def state_rows(self, state: ContextState) -> np.ndarray:
        return self.encode(state.last, state.pointer_codes(), state.reg)

    def row_index(self, context: Sequence[int]) -> int:
        last, ptr, reg = scan_features(self.vocab, self.context_order, context)
        return int(self.encode(np.array([last]), np.array([ptr]), np.array([reg]))[0])

    # -- oracle interface

    def next_token_distribution(self, context: Sequence[int]) -> np.ndarray:
        return softmax(self.logits[self.row_index(context)] / self.temperature)

    def sample(self, context, temperature=None, top_k=0, top_p=1.0, rng=None) -> int:
        rng = rng if rng is not None else np.random.default_rng()
        t = self.temperature if temperature is None else temperature
        p = filtered_probs(self.logits[self.row_index(context)], t, top_k, top_p)
        return int(sample_from(p[None], np.array([rng.random()]))[0])

    def logprob(self, context: Sequence[int], token: int) -> float:
        return float(np.log(self.next_token_distribution(context)[token]))

    def logprob_and_grad(self, context: Sequence[int], token: int) -> tuple[float, np.ndarray]:
        """Log-probability of ``token`` and its gradient w.r.t. the context's logit row."""
        if not 0 <= token < self.vocab.size:
            raise ValueError(f"token {token} outside vocab")
        p = self.next_token_distribution(context)
        grad = -p.copy()
        grad[token] += 1.0
        return float(np.log(p[token])), grad / self.temperature

    # -- batched helpers used by the trainer

    def row_probs(self, rows: np.ndarray, decode: DecodeConfig) -> np.ndarray:
        return filtered_probs(self.logits[rows], decode.temperature, decode.top_k, decode.top_p)

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.vocab, self.context_order, self.table_rows, self.logits.copy(), self.temperature)

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(self.logits.tobytes()).hexdigest()

    # -- checkpoints

    def header(self) -> dict:
        return {
            "context_order": self.context_order,
            "table_rows": self.table_rows,
            "vocab_size": self.vocab.size,
            "vocab": asdict(self.vocab),
            "temperature": self.temperature,
        }

    def save(self, path: str | Path, extra: Optional[dict] = None) -> None:
        header = self.header()
        if extra:
            header["extra"] = extra
        arrays = {
            "header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
            "logits": self.logits,
        }
        # fixed zip timestamps keep checkpoint bytes reproducible
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            for name, arr in arrays.items():
                buf = io.BytesIO()
                np.save(buf, arr, allow_pickle=False)
                info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
                info.compress_type = zipfile.ZIP_DEFLATED
                zf.writestr(info, buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> tuple["TabularPolicy", dict]:
        with np.load(path) as data:
            header = json.loads(data["header"].tobytes().decode())
            logits = data["logits"]
        vd = dict(header["vocab"])
        vd["ops"] = tuple(vd["ops"])
        vocab = Vocab(**vd)
        if logits.shape != (header["table_rows"], header["vocab_size"]):
            raise ValueError("checkpoint header does not match logits shape")
        pol = cls(vocab, header["context_order"], header["table_rows"], logits, header.get("temperature", 1.0))
        return pol, header.get("extra", {})


# ---------------------------------------------------------------- prior


@dataclass(frozen=True)
class OverCheckPrior:
    """Logit initialization for a policy that solves stepwise, then over-checks.

    ``loop_prob`` is the chance of opening another WAIT check once every
    operation is applied; ``flip_prob`` is the chance a check rewrites the
    working value to a wrong digit.
    """

    step_accuracy: float = 0.95
    loop_prob: float = 0.7
    flip_prob: float = 0.06
    probe_mid_answer: float = 0.6
    probe_mid_stop: float = 0.5
    probe_done_answer: float = 0.99
    floor: float = 1e-6

    def __post_init__(self) -> None:
        for name in ("step_accuracy", "loop_prob", "flip_prob", "probe_mid_answer", "probe_mid_stop", "probe_done_answer"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def build(self, spec: TaskSpec, vocab: Optional[Vocab] = None, context_order: int = 2) -> TabularPolicy:
        vocab = vocab or Vocab.default()
        spec.validate(vocab)
        pol = TabularPolicy(vocab, context_order)
        V, nd, M = vocab.size, vocab.n_digits, spec.modulus
        rows = np.arange(pol.table_rows)
        last, ptr, reg = pol.decode_key(rows)
        t2, t1 = last[:, -1], (last[:, -2] if context_order >= 2 else np.full(len(rows), V))
        P = np.full((pol.table_rows, V), 1.0 / V)  # unreachable rows stay uniform
        digits = np.arange(V) < M
        has_reg = reg < nd
        is_op = ptr >= 2 + nd
        is_start = (ptr >= 2) & (ptr < 2 + nd)
        done = ptr == PTR_DONE

        def spread(mask_rows, target, p_target, others=digits):
            """Put ``p_target`` on ``target`` and share the rest over ``others``."""
            n = int(mask_rows.sum())
            if n == 0:
                return
            block = np.zeros((n, V))
            tgt = target[mask_rows]
            oth = np.broadcast_to(others, (n, V)).copy()
            oth[np.arange(n), tgt] = False
            k = np.maximum(oth.sum(axis=1, keepdims=True), 1)
            block += oth * (1.0 - p_target) / k
            block[np.arange(n), tgt] += p_target
            P[mask_rows] = block

        def fixed(mask_rows, dist):
            P[mask_rows] = dist

        # first step restates the start value
        m = (t2 == vocab.qend) & is_start
        spread(m, ptr - 2, self.step_accuracy)
        # solving step: compute the next value
        op_code = np.where(is_op, ptr - 2 - nd, 0)
        op_idx, arg = op_code // nd, op_code % nd
        nxt = np.zeros(len(rows), dtype=np.int64)
        for i, name in enumerate(OP_NAMES):
            sel = is_op & has_reg & (op_idx == i)
            nxt[sel] = [apply_op(name, int(r) % M, int(a), M) for r, a in zip(reg[sel], arg[sel])]
        m = (t2 == vocab.delim) & is_op & has_reg
        spread(m, nxt, self.step_accuracy)
        # all operations applied: check again or close the reasoning block
        m = (t2 == vocab.delim) & done
        d = np.zeros(V)
        d[vocab.wait], d[vocab.think_end] = self.loop_prob, 1.0 - self.loop_prob
        fixed(m, d)
        # a value is followed by the delimiter
        is_digit2 = t2 < nd
        m = is_digit2 & (t1 != vocab.answer) & ~((t1 < nd))
        d = np.zeros(V)
        d[vocab.delim] = 1.0
        fixed(m, d)
        # a check restates the working value, occasionally flipping it
        m = (t2 == vocab.wait) & has_reg
        spread(m, reg, 1.0 - self.flip_prob)
        d = np.zeros(V)
        d[vocab.answer] = 1.0
        fixed(t2 == vocab.think_end, d)
        # final summary answer
        m = (t2 == vocab.answer) & (t1 == vocab.think_end) & has_reg
        spread(m, reg, 1.0)
        # probe trigger after a step: confident once the chain is done
        probe = (t2 == vocab.answer) & (t1 != vocab.think_end) & has_reg
        spread(probe & done, reg, self.probe_done_answer)
        spread(probe & ~done, reg, self.probe_mid_answer)
        # answer digit then EOT; hesitant continuations mid-chain
        after_ans = is_digit2 & (t1 == vocab.answer)
        d = np.zeros(V)
        d[vocab.eot] = 1.0
        fixed(after_ans & done, d)
        mid = np.where(np.arange(V) < nd, (1.0 - self.probe_mid_stop) / nd, 0.0)
        mid[vocab.eot] = self.probe_mid_stop
        fixed(after_ans & ~done, mid)
        m = is_digit2 & (t1 < nd)
        d = np.where(np.arange(V) < nd, 0.3 / nd, 0.0)
        d[vocab.eot] = 0.7
        fixed(m, d)

        P = np.maximum(P, self.floor)
        P /= P.sum(axis=1, keepdims=True)
        pol.logits = np.log(P)
        return pol


# ---------------------------------------------------------------- decoding


@dataclass
class DecodeOutput:
    tokens: list[np.ndarray]
    logprobs: list[np.ndarray]
    rows: list[np.ndarray]
    entropies: list[np.ndarray]
    truncated: np.ndarray


def decode_batch(
    policy: TabularPolicy,
    state: ContextState,
    uniforms: np.ndarray,
    decode: DecodeConfig,
    stop_token: Optional[int] = None,
    max_len: Optional[int] = None,
) -> DecodeOutput:
    """Sample all sequences in lockstep; ``uniforms[b, t]`` drives token ``t`` of sequence ``b``."""
    stop = policy.vocab.eot if stop_token is None else stop_token
    L = decode.max_len if max_len is None else max_len
    B = uniforms.shape[0]
    toks = np.zeros((B, L), dtype=np.int64)
    lps = np.zeros((B, L))
    rows_out = np.zeros((B, L), dtype=np.int64)
    ents = np.zeros((B, L))
    length = np.zeros(B, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    state = state.copy()
    for t in range(L):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        sub = state.select(idx)
        rows = policy.state_rows(sub)
        p = policy.row_probs(rows, decode)
        tok = sample_from(p, uniforms[idx, t])
        toks[idx, t] = tok
        lps[idx, t] = np.log(p[np.arange(len(idx)), tok])
        rows_out[idx, t] = rows
        ents[idx, t] = entropy_rows(p)
        length[idx] = t + 1
        full_tok = np.zeros(B, dtype=np.int64)
        full_tok[idx] = tok
        state.advance(full_tok, alive)
        alive[idx[tok == stop]] = False
    truncated = alive.copy()
    return DecodeOutput(
        tokens=[toks[b, : length[b]] for b in range(B)],
        logprobs=[lps[b, : length[b]] for b in range(B)],
        rows=[rows_out[b, : length[b]] for b in range(B)],
        entropies=[ents[b, : length[b]] for b in range(B)],
        truncated=truncated,
    )


def sample_trajectory(
    policy: PolicyOracle,
    query: Query,
    decode: DecodeConfig,
    rng: np.random.Generator,
) -> TokenTrajectory:
    """Generic autoregressive sampler over the oracle interface.

    Draws ``decode.max_len`` uniforms up front so the stream position of each
    token is fixed; the reward is left at 0 for the verifier to fill in.
    """
    if decode.max_len <= 0:
        raise ValueError("max_len must be positive")
    vocab = policy.vocab
    u = rng.random(decode.max_len)
    context = list(query.prompt)
    out, lps = [], []
    for t in range(decode.max_len):
        if isinstance(policy, TabularPolicy):
            row = policy.logits[policy.row_index(context)]
            p = filtered_probs(row, decode.temperature, decode.top_k, decode.top_p)
        else:
            # generic oracles only expose probabilities; temperature acts on log-probs
            with np.errstate(divide="ignore"):
                lp = np.log(policy.next_token_distribution(context))
            p = filtered_probs(np.where(np.isfinite(lp), lp, -1e30), decode.temperature, decode.top_k, decode.top_p)
        tok = int(sample_from(p[None], u[t : t + 1])[0])
        out.append(tok)
        lps.append(float(np.log(p[tok])))
        context.append(tok)
        if tok == vocab.eot:
            break
    truncated = not out or out[-1] != vocab.eot
    return make_trajectory(out, lps, vocab, 0, query.query_id, truncated)
