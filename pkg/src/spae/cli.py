"""Command-line entry point: ``spae {gen,train,eval,diagnose,truncate-eval,replay}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Vocab
from .diagnostics import (
    BIN_LABELS,
    alignment_stats,
    behavior_summary,
    eval_rollouts,
    variance_bins,
)
from .io import (
    ALIGNMENT_HEADER,
    BEHAVIOR_HEADER,
    CURVES_HEADER,
    EVAL_HEADER,
    VARIANCE_HEADER,
    DataError,
    TrajectoryRecord,
    annotate,
    read_queries,
    read_trajectories,
    write_csv,
    write_queries,
    write_trajectories,
)
from .policy import DecodeConfig, TabularPolicy
from .potential import PotentialSeries
from .probe import ProbeConfig, probe_many
from .toy_env import TaskSpec, generate_query
from .trainer import TrainConfig, initial_policy, rollout_batch, train_iteration, truncated_decode_batch

log = logging.getLogger("spae")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
SEED_ENV = "SPAE_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; 2 is reserved for data errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- manifest


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Everything needed to re-run a command and check that its outputs match."""

    command: str
    argv: list[str]
    config: dict
    seed: int
    input_hash: str
    outputs: dict[str, str] = field(default_factory=dict)

    @staticmethod
    def hash_inputs(paths: Sequence[str]) -> str:
        h = hashlib.sha256()
        for p in paths:
            h.update(sha256_file(p).encode())
        return h.hexdigest()

    def record_outputs(self, paths: Sequence[str | Path]) -> None:
        self.outputs = {str(p): sha256_file(p) for p in paths}

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(**d)
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"invalid manifest {path}: {exc}") from None


# ---------------------------------------------------------------- helpers


TRAIN_KEYS = [f.name for f in fields(TrainConfig)]


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--modulus", type=int)
    p.add_argument("--chain-length", type=int)
    p.add_argument("--ops", nargs="+")


def _add_seed(p: argparse.ArgumentParser, default: int = 0) -> None:
    p.add_argument("--seed", type=int, default=default, help=f"overridden by ${SEED_ENV}")


def _add_manifest(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="write a RunManifest JSON here")


def resolve_seed(value: Optional[int]) -> Optional[int]:
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return value
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _load_json_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON ({exc.msg})", exc.lineno) from None
    if not isinstance(d, dict):
        raise DataError(f"config {path} must hold a JSON object")
    return d


def _task_from_args(args) -> TaskSpec:
    d = TaskSpec().to_dict()
    for key in ("modulus", "chain_length", "ops"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    spec = TaskSpec.from_dict(d)
    spec.validate(Vocab.default())
    return spec


def _load_policy(path: str) -> tuple[TabularPolicy, dict]:
    try:
        return TabularPolicy.load(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from None


def _load_queries(path: str):
    try:
        return read_queries(path)
    except FileNotFoundError:
        raise DataError(f"query file not found: {path}") from None


def _decode_from_args(args) -> DecodeConfig:
    return DecodeConfig(args.temperature, args.top_k, args.top_p, args.max_len)


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    ev = DecodeConfig.evaluation()
    p.add_argument("--temperature", type=float, default=ev.temperature)
    p.add_argument("--top-k", type=int, default=ev.top_k)
    p.add_argument("--top-p", type=float, default=ev.top_p)
    p.add_argument("--max-len", type=int, default=ev.max_len)
    p.add_argument("--probe-samples", type=int, default=5)
    p.add_argument("--probe-tokens", type=int, default=3)
    p.add_argument("--eps-sat", type=float, default=0.9)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> tuple[dict, list[str], list[Path]]:
    spec = _task_from_args(args)
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    rng = np.random.default_rng(args.seed)
    seeds = rng.integers(0, 2**31, size=args.n)
    vocab = Vocab.default()
    queries = [generate_query(int(s), spec, vocab, query_id=i) for i, s in enumerate(seeds)]
    out = Path(args.out)
    write_queries(out, queries)
    return {"task": spec.to_dict(), "n": args.n}, [], [out]


def _curve_row(rep) -> list:
    return [rep.iteration, rep.entropy, rep.mean_reward, rep.mean_length]


def cmd_train(args) -> tuple[dict, list[str], list[Path]]:
    d = _load_json_config(args.config)
    for key in TRAIN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        cfg = TrainConfig.from_dict(d)
        cfg.task.validate(Vocab.default())
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = [args.config] if args.config else []

    curves: list[list] = []
    start = 0
    if args.resume:
        policy, extra = _load_policy(args.resume)
        inputs.append(args.resume)
        # the iteration budget may grow on resume; everything else must match
        same = lambda c: {k: v for k, v in c.items() if k not in ("iterations", "checkpoint_every")}  # noqa: E731
        if same(extra.get("config", {})) != same(cfg.to_dict()):
            raise UsageError("checkpoint was written under a different configuration")
        start = int(extra["iteration"])
        curves = [list(r) for r in extra.get("curves", [])]
    else:
        policy = initial_policy(cfg)

    written: list[Path] = []

    def checkpoint(next_it: int, name: str) -> Path:
        path = out_dir / name
        policy.save(path, {"iteration": next_it, "config": cfg.to_dict(), "curves": curves})
        return path

    for it in range(start, cfg.iterations):
        rep = train_iteration(policy, cfg, it)
        curves.append(_curve_row(rep))
        log.info("iter %d reward=%.3f len=%.1f entropy=%.3f", it, rep.mean_reward, rep.mean_length, rep.entropy)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            written.append(checkpoint(it + 1, f"ckpt_{it + 1:06d}.npz"))
    written.append(checkpoint(cfg.iterations, "final.npz"))
    curves_path = out_dir / "curves.csv"
    write_csv(curves_path, CURVES_HEADER, curves)
    written.append(curves_path)
    return cfg.to_dict(), inputs, written


def _probe_cfg(args, decode: DecodeConfig) -> ProbeConfig:
    return ProbeConfig(args.probe_samples, args.probe_tokens, decode)


def cmd_eval(args) -> tuple[dict, list[str], list[Path]]:
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    policy, _ = _load_policy(args.checkpoint)
    queries = _load_queries(args.queries)
    decode = _decode_from_args(args)
    pcfg = _probe_cfg(args, decode)
    trajs = eval_rollouts(policy, queries, args.k, decode, np.random.default_rng([args.seed, 0]))
    flat = [(q, t) for q, row in zip(queries, trajs) for t in row]
    jobs = [(q, t, i) for i, (q, t) in enumerate(flat)]
    probes = probe_many(policy, jobs, pcfg, args.seed + 1)
    series = [PotentialSeries.from_probes(r, args.eps_sat) for r in probes]
    s = behavior_summary([t for _, t in flat], series, policy.vocab.wait)
    out = Path(args.out)
    write_csv(out, EVAL_HEADER, [[args.method, args.k, s.acc_at_k, s.len_at_k, s.pass_at_k, s.r2w]])
    written = [out]
    if args.trajectories:
        recs = [
            annotate(TrajectoryRecord(t, q.prompt, q.answer, list(p)), args.eps_sat)
            for (q, t), p in zip(flat, probes)
        ]
        write_trajectories(args.trajectories, recs)
        written.append(Path(args.trajectories))
    config = {"k": args.k, "decode": asdict(decode), "method": args.method}
    return config, [args.checkpoint, args.queries], written


def diagnose_rows(records: Sequence[TrajectoryRecord], method: str, eps_sat: float, vocab: Vocab):
    """Rows for behavior.csv, variance_bins.csv and alignment.csv."""
    if not records:
        return [], [], []
    series = [r.series(eps_sat) for r in records]
    s = behavior_summary([r.trajectory for r in records], series, vocab.wait)
    behavior = [[method, s.acc, s.solve, s.check, s.reflect, s.r2w]]
    vb = variance_bins([r.probes for r in records])
    var_rows = [[lab, c, a] for lab, c, a in zip(BIN_LABELS, vb.var_conf, vb.var_acc)]
    items = [(r.query, r.trajectory, sr) for r, sr in zip(records, series) if r.query is not None]
    al = alignment_stats(items, vocab)
    align = [["delta", d, n] for d, n in al.histogram().items()]
    align += [
        ["summary", "n", al.n],
        ["summary", "exact", al.exact],
        ["summary", "early", al.early],
        ["summary", "late", al.late],
        ["summary", "mean_abs", al.mean_abs],
    ]
    return behavior, var_rows, align


def cmd_diagnose(args) -> tuple[dict, list[str], list[Path]]:
    try:
        records = read_trajectories(args.trajectories)
    except FileNotFoundError:
        raise DataError(f"trajectory file not found: {args.trajectories}") from None
    behavior, var_rows, align = diagnose_rows(records, args.method, args.eps_sat, Vocab.default())
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "behavior.csv", out_dir / "variance_bins.csv", out_dir / "alignment.csv"]
    write_csv(paths[0], BEHAVIOR_HEADER, behavior)
    write_csv(paths[1], VARIANCE_HEADER, var_rows)
    write_csv(paths[2], ALIGNMENT_HEADER, align)
    return {"method": args.method, "eps_sat": args.eps_sat}, [args.trajectories], paths


def paired_decodes(policy: TabularPolicy, queries, k: int, pcfg: ProbeConfig, seed: int, eps_sat: float):
    """Standard and probe-truncated decodes sharing one uniform stream per response.

    Probe streams are keyed by (seed, response index, step), so both decodes see
    identical probe results on their common prefix.
    """
    flat = [q for q in queries for _ in range(k)]
    decode = pcfg.decode
    if not flat:
        return [], [], []
    uniforms = np.random.default_rng([seed, 0]).random((len(flat), decode.max_len))
    pseed = seed + 1
    std = [r.trajectory for r in rollout_batch(policy, flat, decode, uniforms)]
    std_probes = probe_many(policy, [(q, t, i) for i, (q, t) in enumerate(zip(flat, std))], pcfg, pseed)
    trunc = truncated_decode_batch(policy, flat, pcfg, uniforms, eps_sat, pseed, list(range(len(flat))))
    return flat, list(zip(std, std_probes)), trunc


def cmd_truncate_eval(args) -> tuple[dict, list[str], list[Path]]:
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    policy, _ = _load_policy(args.checkpoint)
    queries = _load_queries(args.queries)
    decode = _decode_from_args(args)
    pcfg = _probe_cfg(args, decode)
    _, std, trunc = paired_decodes(policy, queries, args.k, pcfg, args.seed, args.eps_sat)
    rows = []
    for name, trajs, probes in (
        ("standard", [t for t, _ in std], [p for _, p in std]),
        ("truncated", [d.trajectory for d in trunc], [d.probes for d in trunc]),
    ):
        series = [PotentialSeries.from_probes(p, args.eps_sat) for p in probes]
        s = behavior_summary(trajs, series, policy.vocab.wait)
        rows.append([name, s.acc_at_k, s.len_at_k, s.r2w])
    out = Path(args.out)
    write_csv(out, ("method", "acc_at_k", "len_at_k", "r2w"), rows)
    return {"k": args.k, "eps_sat": args.eps_sat}, [args.checkpoint, args.queries], [out]


def cmd_replay(args) -> tuple[dict, list[str], list[Path]]:
    m = RunManifest.load(args.manifest_file)
    code = main(m.argv, _replaying=True)
    if code != EXIT_OK:
        raise DataError(f"replayed command exited with {code}")
    bad = [p for p, h in m.outputs.items() if not Path(p).exists() or sha256_file(p) != h]
    if bad:
        raise DataError("outputs differ from the manifest: " + ", ".join(bad))
    print(f"replay ok: {len(m.outputs)} outputs match")
    return {}, [], []


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spae", description="Step-potential credit assignment on a toy reasoning task.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a deterministic query set")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--out", required=True)
    _add_task_flags(g)
    _add_seed(g)
    _add_manifest(g)

    t = sub.add_parser("train", help="train a tabular policy")
    t.add_argument("--config", help="JSON file with TrainConfig keys")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    types = {f.name: f.type for f in fields(TrainConfig)}
    for key in TRAIN_KEYS:
        if key == "ops":
            t.add_argument("--ops", nargs="+")
        elif key == "seed":
            t.add_argument("--seed", type=int)
        else:
            kind = {"int": int, "float": float, "str": str}[str(types[key]).split("[")[0]]
            t.add_argument(_flag(key), type=kind, dest=key)
    _add_manifest(t)

    e = sub.add_parser("eval", help="acc/len/pass@k and R2W of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--queries", required=True)
    e.add_argument("--k", type=int, default=16)
    e.add_argument("--out", required=True)
    e.add_argument("--method", default="policy")
    e.add_argument("--trajectories", help="also write probed trajectories as JSONL")
    _add_decode_flags(e)
    _add_seed(e)
    _add_manifest(e)

    d = sub.add_parser("diagnose", help="behavior, variance and alignment tables from probed trajectories")
    d.add_argument("--trajectories", required=True)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--method", default="policy")
    d.add_argument("--eps-sat", type=float, default=0.9)
    _add_manifest(d)

    tr = sub.add_parser("truncate-eval", help="standard vs probe-truncated decoding")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--queries", required=True)
    tr.add_argument("--k", type=int, default=16)
    tr.add_argument("--out", required=True)
    _add_decode_flags(tr)
    _add_seed(tr)
    _add_manifest(tr)

    r = sub.add_parser("replay", help="re-run a RunManifest and compare output hashes")
    r.add_argument("manifest_file")
    return p


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "truncate-eval": cmd_truncate_eval,
    "replay": cmd_replay,
}


def main(argv: Optional[Sequence[str]] = None, _replaying: bool = False) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if hasattr(args, "seed") and not _replaying:
            args.seed = resolve_seed(args.seed)
        config, inputs, outputs = COMMANDS[args.command](args)
        manifest_path = getattr(args, "manifest", None)
        if manifest_path and not _replaying:
            # pin the resolved seed so a replay ignores the environment
            recorded = list(argv)
            seed = getattr(args, "seed", None)
            if seed is not None:
                recorded += ["--seed", str(seed)]
            else:
                seed = int(config.get("seed", 0))
            m = RunManifest(args.command, recorded, config, seed, RunManifest.hash_inputs([str(p) for p in inputs]))
            m.record_outputs(outputs)
            m.save(manifest_path)
    except UsageError as exc:
        print(f"spae {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"spae {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, TypeError) as exc:
        # invalid task or decode parameters surface as ValueError from the constructors
        print(f"spae {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"spae {args.command}: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
