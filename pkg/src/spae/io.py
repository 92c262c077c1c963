"""JSONL and CSV serialization.

Floats are written with ``repr`` precision by :mod:`json`, so a load/dump cycle
reproduces the input bytes exactly.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Query, TokenTrajectory
from .potential import PotentialSeries, classify_phases, phase_string
from .probe import ProbeRecord


class DataError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


@dataclass
class TrajectoryRecord:
    trajectory: TokenTrajectory
    prompt: Optional[tuple[int, ...]] = None
    answer: Optional[tuple[int, ...]] = None
    probes: list[ProbeRecord] = field(default_factory=list)
    phi: Optional[list[float]] = None
    phases: Optional[list[str]] = None
    adv_raw: Optional[list[float]] = None
    adv_final: Optional[list[float]] = None

    @property
    def query(self) -> Optional[Query]:
        if self.prompt is None or self.answer is None:
            return None
        return Query(self.prompt, self.answer, {}, self.trajectory.query_id)

    def series(self, eps_sat: float = 0.9) -> PotentialSeries:
        if self.probes:
            return PotentialSeries.from_probes(self.probes, eps_sat)
        return PotentialSeries(tuple(self.phi or ()), eps_sat)

    def to_json(self) -> dict:
        t = self.trajectory
        d = {
            "query_id": t.query_id,
            "tokens": list(t.tokens),
            "logprobs": [float(x) for x in t.logprobs],
            "reasoning_end": t.reasoning_end,
            "steps": [list(s) for s in t.steps],
            "reward": t.reward,
        }
        if t.truncated:
            d["truncated"] = True
        if self.prompt is not None:
            d["prompt"] = list(self.prompt)
        if self.answer is not None:
            d["answer"] = list(self.answer)
        if self.probes:
            d["probe"] = [p.to_json() for p in self.probes]
        for key in ("phi", "phases", "adv_raw", "adv_final"):
            val = getattr(self, key)
            if val is not None:
                d[key] = list(val)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrajectoryRecord":
        traj = TokenTrajectory(
            tokens=tuple(int(x) for x in d["tokens"]),
            logprobs=tuple(float(x) for x in d["logprobs"]),
            reasoning_end=int(d["reasoning_end"]),
            steps=tuple((int(a), int(b)) for a, b in d["steps"]),
            reward=int(d["reward"]),
            query_id=int(d["query_id"]),
            truncated=bool(d.get("truncated", False)),
        )
        opt = lambda k, f: None if k not in d else [f(x) for x in d[k]]  # noqa: E731
        return cls(
            trajectory=traj,
            prompt=None if "prompt" not in d else tuple(int(x) for x in d["prompt"]),
            answer=None if "answer" not in d else tuple(int(x) for x in d["answer"]),
            probes=[ProbeRecord.from_json(p) for p in d.get("probe", [])],
            phi=opt("phi", float),
            phases=opt("phases", str),
            adv_raw=opt("adv_raw", float),
            adv_final=opt("adv_final", float),
        )


def annotate(record: TrajectoryRecord, eps_sat: float = 0.9) -> TrajectoryRecord:
    """Fill ``phi`` and ``phases`` from the probe records."""
    s = PotentialSeries.from_probes(record.probes, eps_sat)
    record.phi = list(s.phi)
    record.phases = phase_string(classify_phases(s))
    return record


def query_to_json(q: Query) -> dict:
    return {"query_id": q.query_id, "prompt": list(q.prompt), "answer": list(q.answer), "meta": q.meta}


def query_from_json(d: dict) -> Query:
    return Query(
        tuple(int(x) for x in d["prompt"]),
        tuple(int(x) for x in d["answer"]),
        dict(d.get("meta", {})),
        int(d["query_id"]),
    )


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")


def _parse_rows(path, parse) -> list:
    items = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise TypeError("expected a JSON object")
            items.append(parse(obj))
        except (ValueError, KeyError, TypeError) as exc:
            msg = exc.msg if isinstance(exc, json.JSONDecodeError) else str(exc)
            raise DataError(f"malformed record: {msg}", n) from None
    return items


def read_jsonl(path: str | Path) -> list[dict]:
    return _parse_rows(path, lambda d: d)


def read_trajectories(path: str | Path) -> list[TrajectoryRecord]:
    return _parse_rows(path, TrajectoryRecord.from_json)


def write_trajectories(path: str | Path, records: Iterable[TrajectoryRecord]) -> None:
    write_jsonl(path, (r.to_json() for r in records))


def read_queries(path: str | Path) -> list[Query]:
    return _parse_rows(path, query_from_json)


def write_queries(path: str | Path, queries: Iterable[Query]) -> None:
    write_jsonl(path, (query_to_json(q) for q in queries))


# ---------------------------------------------------------------- CSV


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    # a bare carriage return is not quoted under a "\n" terminator
    w_all = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_ALL)
    for row in [list(header), *rows]:
        cells = [fmt(x) for x in row]
        (w_all if any("\r" in c for c in cells) else w).writerow(cells)
    return buf.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).write_text(csv_text(header, rows), encoding="utf-8")


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError("empty CSV file")
    return rows[0], rows[1:]


BEHAVIOR_HEADER = ("method", "acc", "solve", "check", "reflect", "r2w")
VARIANCE_HEADER = ("bin", "var_conf", "var_acc")
ALIGNMENT_HEADER = ("kind", "key", "value")
CURVES_HEADER = ("iteration", "entropy", "acc", "len")
EVAL_HEADER = ("method", "k", "acc_at_k", "len_at_k", "pass_at_k", "r2w")
