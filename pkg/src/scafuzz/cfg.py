"""Per-input control-flow reconstruction (the T_CFG table).

CFG-RI turns branch distances and slice lengths into (offset, length)
vectors; CFG-RII keeps the slice fingerprints themselves.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .features import FeatureScaler, Fingerprint

RI = "RI"
RII = "RII"
START = "start"


@dataclass(frozen=True)
class TCfgEntry:
    """One table row. ``branch_id`` is None for the RII start entry."""

    branch_id: int | None
    offset: int | None = None
    length: int | None = None
    distance: int | None = None
    print: Fingerprint | None = None

    @property
    def kind(self):
        return RII if self.print is not None else RI


@dataclass(frozen=True)
class TCfgTable:
    input_id: int
    method: str
    entries: tuple[TCfgEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.method not in (RI, RII):
            raise ValueError(f"unknown reconstruction method {self.method!r}")
        if any(e.kind != self.method for e in self.entries):
            raise ValueError("a table holds exactly one payload kind")
        if self.method == RI:
            offs = [e.offset for e in self.entries]
            if any(o < 0 for o in offs) or any(b <= a for a, b in zip(offs, offs[1:])):
                raise ValueError("RI offsets must be nonnegative and strictly increasing")

    def __len__(self):
        return len(self.entries)


def reconstruct_ri(locations, distances, segment_lengths, input_id=0) -> TCfgTable:
    """Branch i sits after all earlier slices and skipped distances: B_offset(i+1) = B_offset(i) + C_length(i) + d(i).

    ``segment_lengths`` are instruction counts of the slices around the
    branches, so there is one more of them than there are branches.
    """
    n = len(locations)
    if len(distances) != n:
        raise ValueError(f"{n} branch locations but {len(distances)} distances")
    if len(segment_lengths) != n + 1:
        raise ValueError(f"{n} branches need {n + 1} segment lengths, got {len(segment_lengths)}")
    entries = []
    offset = int(segment_lengths[0])
    for i in range(n):
        length = int(segment_lengths[i + 1])
        entries.append(TCfgEntry(i, offset, length, int(distances[i])))
        offset += int(distances[i]) + length
    return TCfgTable(input_id, RI, entries)


def reconstruct_rii(prints: Sequence[Fingerprint], input_id=0) -> TCfgTable:
    if not prints:
        raise ValueError("RII needs at least the fingerprint of the initial slice")
    entries = [TCfgEntry(None if i == 0 else i - 1, print=p) for i, p in enumerate(prints)]
    return TCfgTable(input_id, RII, entries)


def ri_block_starts(table: TCfgTable) -> list[int]:
    """Start address (in instructions) of every block after a branch."""
    return [e.offset + e.distance for e in table.entries]


def transition_keys(table: TCfgTable, quantize=None):
    """Keys of the block transitions in table order, plus the count of skipped ones.

    RI: a transition is the branch address together with the start and length
    of the block it lands in. RII: the ordered pair of neighbouring quantised
    fingerprints, where ``quantize`` maps a fingerprint to a hashable value
    (default: 2-decimal rounding of z-scores fitted on this table); pairs
    touching an invalid fingerprint are skipped.
    """
    keys = []
    skipped = 0
    if table.method == RI:
        for e in table.entries:
            keys.append((e.offset, e.offset + e.distance, e.length))
        return keys, skipped
    if quantize is None:
        quantize = FeatureScaler.fit([e.print for e in table.entries]).key
    q = [quantize(e.print) for e in table.entries]
    for a, b in zip(q, q[1:]):
        if a is None or b is None:
            skipped += 1
        else:
            keys.append((a, b))
    return keys, skipped


# --------------------------------------------------------------------------
# text export: one line per entry, "<branch id> <payload>"
# --------------------------------------------------------------------------


def table_to_text(table: TCfgTable) -> str:
    lines = [f"# T_CFG input={table.input_id} method={table.method}"]
    for e in table.entries:
        bid = START if e.branch_id is None else str(e.branch_id)
        if table.method == RI:
            lines.append(f"{bid} {e.offset},{e.length} d={e.distance}")
        else:
            p = e.print
            lines.append(f"{bid} ({p.length},{p.peaks},{p.mean!r},{p.skewness!r})")
    return "\n".join(lines) + "\n"


def table_from_text(text: str) -> TCfgTable:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# T_CFG"):
        raise ValueError("missing T_CFG header line")
    meta = dict(tok.split("=") for tok in lines[0].split()[2:])
    method = meta["method"]
    entries = []
    for ln in lines[1:]:
        bid, payload = ln.split(" ", 1)
        branch_id = None if bid == START else int(bid)
        if method == RI:
            vec, d = payload.split()
            off, length = vec.split(",")
            entries.append(TCfgEntry(branch_id, int(off), int(length), int(d.removeprefix("d="))))
        else:
            f = payload.strip("()").split(",")
            entries.append(TCfgEntry(branch_id, print=Fingerprint(int(f[0]), int(f[1]), float(f[2]), float(f[3]))))
    return TCfgTable(int(meta["input"]), method, entries)


def write_table(path, table: TCfgTable):
    Path(path).write_text(table_to_text(table))


def read_table(path) -> TCfgTable:
    return table_from_text(Path(path).read_text())
