"""Coverage scores from reconstructed transitions, majority voting, and benchmark metrics."""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

REPORT_HEADER = ("method", "mean_count", "sweep_count", "vote", "mse", "correlation", "crucial_errors")
SCORES_HEADER = ("input_id", "score", "oracle_score")


def score_keys(keys: Iterable[Hashable], omega: frozenset) -> tuple[int, frozenset]:
    """Count keys not yet in ``omega`` (each counted once) and return the grown set."""
    new = []
    seen = set(omega)
    for k in keys:
        if k not in seen:
            seen.add(k)
            new.append(k)
    return len(new), omega.union(new)


def score_input(table, omega: frozenset, **key_args) -> tuple[int, frozenset]:
    """Score one T_CFG table against the transitions seen so far."""
    from .cfg import transition_keys

    keys, _ = transition_keys(table, **key_args)
    return score_keys(keys, omega)


def vote_scores(candidate_scores: Sequence[int]) -> int:
    """Most frequent score; ties go to the smallest."""
    if len(candidate_scores) == 0:
        raise ValueError("nothing to vote on")
    counts = Counter(int(s) for s in candidate_scores)
    top = max(counts.values())
    return min(s for s, c in counts.items() if c == top)


def vote_keys(candidates: Sequence[Sequence[Hashable]], omega: frozenset) -> tuple[int, frozenset, int]:
    """Majority vote over several key lists for one input.

    Each candidate is scored against the same ``omega``; the winner is the
    earliest candidate whose score equals the voted value, and only its keys
    enter the set. Returns (score, omega', winner index).
    """
    scored = [score_keys(keys, omega) for keys in candidates]
    s = vote_scores([sc for sc, _ in scored])
    winner = next(i for i, (sc, _) in enumerate(scored) if sc == s)
    return s, scored[winner][1], winner


@dataclass(frozen=True)
class Metrics:
    mse: float
    correlation: float
    crucial_errors: int


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    a = a - a.mean()
    b = b - b.mean()
    return float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))


def evaluate(result, oracle) -> Metrics:
    r = np.asarray(result, dtype=np.float64)
    o = np.asarray(oracle, dtype=np.float64)
    if r.shape != o.shape:
        raise ValueError(f"result trace has {len(r)} scores, oracle {len(o)}")
    m = float(np.mean((r - o) ** 2)) if len(r) else 0.0
    crucial = int(np.sum((o > 0) & (r == 0)))
    return Metrics(m, pearson(r, o), crucial)


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    method: str
    mean_count: int
    sweep_count: int
    vote: str
    mse: float
    correlation: float
    crucial_errors: int | None
    error: str = ""

    @property
    def ok(self):
        return not self.error


def _fmt(v):
    return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))


def report_to_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        if r.ok:
            w.writerow([r.method, r.mean_count, r.sweep_count, r.vote, _fmt(r.mse), _fmt(r.correlation), r.crucial_errors])
        else:
            w.writerow([r.method, r.mean_count, r.sweep_count, r.vote, "", "", f"error: {r.error}"])
    return buf.getvalue()


def report_from_csv(text: str) -> list[ReportRow]:
    rd = csv.reader(io.StringIO(text))
    head = next(rd, None)
    if tuple(head or ()) != REPORT_HEADER:
        raise ValueError(f"unexpected report header {head}")
    rows = []
    for rec in rd:
        method, m, s, vote, e, c, crucial = rec
        if crucial.startswith("error: "):
            rows.append(ReportRow(method, int(m), int(s), vote, None, None, None, crucial[7:]))
        else:
            rows.append(ReportRow(method, int(m), int(s), vote, float(e), float(c), int(crucial)))
    return rows


def scores_to_csv(scores: Sequence[int], oracle: Sequence[int]) -> str:
    if len(scores) != len(oracle):
        raise ValueError("scores and oracle differ in length")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORES_HEADER)
    for i, (s, o) in enumerate(zip(scores, oracle)):
        w.writerow([i, int(s), int(o)])
    return buf.getvalue()


def scores_from_csv(text: str) -> tuple[list[int], list[int]]:
    rd = csv.reader(io.StringIO(text))
    head = next(rd, None)
    if tuple(head or ()) != SCORES_HEADER:
        raise ValueError(f"unexpected scores header {head}")
    scores, oracle = [], []
    for i, (idx, s, o) in enumerate(rd):
        if int(idx) != i:
            raise ValueError(f"scores file row {i} carries input id {idx}")
        scores.append(int(s))
        oracle.append(int(o))
    return scores, oracle


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
