"""Firmware under test: the synthetic decision-stage programs and an AES-like target.

Block layout uses a flat instruction address space. A branch at the end of
block ``p`` that transfers to block ``s`` skips ``start(s) - end(p)``
instructions; every such distance is a multiple of ``DISTANCE_STEP`` within
``DISTANCE_RANGE`` so that distances form a small set of classes.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .device import BODY_KINDS, DISTANCE_RANGE, Kind

INPUT_WIDTH = 16
LENGTH_RANGE = (10, 110)
DISTANCE_STEP = 10
DISTANCE_CLASSES = tuple(range(DISTANCE_RANGE[0], DISTANCE_RANGE[1] + 1, DISTANCE_STEP))
SYNTHETIC_BLOCKS = 48
SYNTHETIC_TRANSITIONS = 60
AES_TRANSITIONS = 41

# Probability that a stage takes its "low" successor, per program version.
VERSION_BIAS = {1: 0.5, 2: 0.6, 3: 0.7, 4: 0.8, 5: 0.9}
# Stages 0..12 alternate if/else diamonds (even) and plain ifs (odd); 13..15 form a tree.
DIAMOND_STAGES = frozenset(range(0, 13, 2))


@dataclass(frozen=True)
class BasicBlock:
    id: int
    instructions: tuple[Kind, ...]
    name: str = ""

    def __len__(self):
        return len(self.instructions)


@dataclass(frozen=True)
class Program:
    """Blocks plus per-block successor lists.

    A block with two successors reads input byte ``stage[b]``: values below
    ``threshold[b]`` take ``succ[b][0]`` ("low"), others ``succ[b][1]``.
    """

    name: str
    blocks: tuple[BasicBlock, ...]
    succ: tuple[tuple[int, ...], ...]
    dist: tuple[tuple[int, ...], ...]
    stage: tuple[int | None, ...]
    threshold: tuple[int | None, ...]
    address: tuple[int, ...]
    version_id: int | None = None
    decision_bias: float | None = None
    input_width: int = INPUT_WIDTH
    length_range: tuple[int, int] = LENGTH_RANGE
    distance_range: tuple[int, int] = DISTANCE_RANGE

    def __post_init__(self):
        self.validate()

    def __len__(self):
        return len(self.blocks)

    def end(self, b):
        return self.address[b] + len(self.blocks[b])

    @property
    def edges(self):
        return [(b, s, d) for b in range(len(self.blocks)) for s, d in zip(self.succ[b], self.dist[b])]

    @property
    def distances(self):
        return {(b, s): d for b, s, d in self.edges}

    def validate(self):
        n = len(self.blocks)
        lo, hi = self.length_range
        dlo, dhi = self.distance_range
        if not (len(self.succ) == len(self.dist) == len(self.stage) == len(self.threshold) == len(self.address) == n):
            raise ValueError("per-block tables must all have one entry per block")
        for b, blk in enumerate(self.blocks):
            if blk.id != b:
                raise ValueError(f"block {b} carries id {blk.id}")
            if Kind.BRANCH in blk.instructions:
                raise ValueError(f"block {b}: branches may only terminate a block")
            if not lo <= len(blk) <= hi:
                raise ValueError(f"block {b}: length {len(blk)} outside {self.length_range}")
            if len(self.succ[b]) != len(self.dist[b]) or len(self.succ[b]) > 2:
                raise ValueError(f"block {b}: bad successor list")
            if len(self.succ[b]) == 2:
                if self.stage[b] is None or not 0 <= self.stage[b] < self.input_width:
                    raise ValueError(f"block {b}: two-way block needs a stage in [0, {self.input_width})")
                if self.succ[b][0] == self.succ[b][1]:
                    raise ValueError(f"block {b}: both outcomes lead to block {self.succ[b][0]}")
            for s, d in zip(self.succ[b], self.dist[b]):
                if not 0 <= s < n:
                    raise ValueError(f"edge {b}->{s}: unknown block")
                if not dlo <= d <= dhi:
                    raise ValueError(f"edge {b}->{s}: distance {d} outside {self.distance_range}")
                if self.address[s] - self.end(b) != d:
                    raise ValueError(f"edge {b}->{s}: distance {d} disagrees with the layout")
        spans = sorted((self.address[b], self.end(b)) for b in range(n))
        for (_, e0), (s1, _) in zip(spans, spans[1:]):
            if s1 < e0:
                raise ValueError("blocks overlap in the address layout")

    def walk(self, data):
        """Ground-truth block path and (branch address, distance) list for an input."""
        data = bytes(data)
        if len(data) != self.input_width:
            raise ValueError(f"{self.name}: input must be {self.input_width} bytes, got {len(data)}")
        path = [0]
        branches = []
        b = 0
        while self.succ[b]:
            if len(self.succ[b]) == 1:
                k = 0
            else:
                k = 0 if data[self.stage[b]] < self.threshold[b] else 1
            branches.append((self.end(b), self.dist[b][k]))
            b = self.succ[b][k]
            path.append(b)
            if len(path) > 10 * len(self.blocks):
                raise RuntimeError(f"{self.name}: path does not terminate")
        return path, branches


def transition_inventory(program: Program) -> set[tuple[int, int]]:
    """(block, successor) edges reachable from the entry block, by graph search."""
    seen = {0}
    todo = deque([0])
    edges = set()
    while todo:
        b = todo.popleft()
        for s in program.succ[b]:
            edges.add((b, s))
            if s not in seen:
                seen.add(s)
                todo.append(s)
    return edges


def static_transition_count(program: Program) -> int:
    return len(transition_inventory(program))


def transition_union(programs) -> set[tuple[str, int, int]]:
    """Edges of several firmware images, qualified by image name (images share no code)."""
    return {(p.name, b, s) for p in programs for b, s in transition_inventory(p)}


def single_block_program(length=10, seed=0) -> Program:
    rng = np.random.default_rng(seed)
    body = tuple(rng.choice(BODY_KINDS, size=length))
    return Program("single", (BasicBlock(0, body, "only"),), ((),), ((),), (None,), (None,), (0,))


# --------------------------------------------------------------------------
# layout
# --------------------------------------------------------------------------


def _layout(order, lengths, preds, rng, step=DISTANCE_STEP, dist_range=DISTANCE_RANGE, slack=2, tight=()):
    """Assign start addresses in ``order`` so every edge distance is a class value.

    Blocks in ``tight`` get no random extra gap. Returns None when the greedy
    placement cannot satisfy the range.
    """
    dlo, dhi = dist_range
    start = {}
    end = {}
    cursor = 0
    for b in order:
        ps = preds[b]
        if not ps:
            x = cursor
        else:
            ends = [end[p] for p in ps]
            if len({e % step for e in ends}) != 1:
                return None
            x = max(cursor, max(ends) + dlo)
            x += (ends[0] - x) % step
            if b not in tight:
                x += step * int(rng.integers(0, slack + 1))
            if x - min(ends) > dhi:
                x -= step * ((x - min(ends) - dhi + step - 1) // step)
                if x < cursor or x - max(ends) < dlo:
                    return None
        start[b] = x
        end[b] = x + lengths[b]
        cursor = end[b]
    return start


def _body(rng, length, weights):
    w = rng.dirichlet(8.0 * np.asarray(weights))
    return tuple(BODY_KINDS[i] for i in rng.choice(len(BODY_KINDS), size=length, p=w))


def _assemble(
    name, names, lengths, succ, stage, threshold, order, rng, weights, version=None, bias=None, attempts=200, tight=()
):
    n = len(names)
    preds = {b: [] for b in range(n)}
    for b, ss in enumerate(succ):
        for s in ss:
            preds[s].append(b)
    for _ in range(attempts):
        start = _layout(order, lengths, preds, rng, tight=tight)
        if start is not None:
            break
    else:
        raise RuntimeError(f"{name}: could not lay out blocks within the distance range")
    address = tuple(start[b] for b in range(n))
    dist = tuple(tuple(address[s] - address[b] - lengths[b] for s in succ[b]) for b in range(n))
    w = weights if callable(weights) else (lambda _b: weights)
    blocks = tuple(BasicBlock(b, _body(rng, lengths[b], w(b)), names[b]) for b in range(n))
    return Program(name, blocks, tuple(map(tuple, succ)), dist, tuple(stage), tuple(threshold), address, version, bias)


# --------------------------------------------------------------------------
# synthetic decision-stage program
# --------------------------------------------------------------------------


def _synthetic_topology():
    """Names, successor lists (low first), stage per block, layout order."""
    names, succ, stage = [], [], []

    def add(name, st=None):
        names.append(name)
        succ.append([])
        stage.append(st)
        return len(names) - 1

    order = []
    join = add("C0", 0)
    order.append(join)
    for i in range(13):
        then = add(f"T{i}")
        order.append(then)
        if i in DIAMOND_STAGES:
            other = add(f"E{i}")
            order.append(other)
        nxt = add(f"C{i + 1}", i + 1)
        order.append(nxt)
        if i in DIAMOND_STAGES:
            succ[join] = [then, other]
            succ[then] = [nxt]
            succ[other] = [nxt]
        else:
            succ[join] = [then, nxt]
            succ[then] = [nxt]
        join = nxt
    # stages 13..15: binary tree below C13 ending in 8 exit handlers
    x, y = add("X", 14), add("Y", 14)
    p, q, r, s = add("P", 15), add("Q", 15), add("R", 15), add("S", 15)
    leaves = [add(f"H{j}") for j in range(8)]
    succ[join] = [x, y]
    succ[x], succ[y] = [p, q], [r, s]
    for k, blk in enumerate((p, q, r, s)):
        succ[blk] = [leaves[2 * k], leaves[2 * k + 1]]
    h = leaves
    # this order keeps at most four blocks under any skip of the tree
    order += [x, p, h[0], h[1], y, q, h[2], h[3], r, s, h[4], h[5], h[6], h[7]]
    return names, succ, stage, order


def _synthetic_lengths(rng, names):
    """Distinct block lengths; if/else arms congruent, plain-if bodies multiples of the step."""
    lo, hi = LENGTH_RANGE
    n = len(names)
    idx = {nm: b for b, nm in enumerate(names)}
    lengths = [0] * n
    used = set()
    tail = [idx[nm] for nm in ("X", "Y", "P", "Q", "R", "S")] + [idx[f"H{j}"] for j in range(8)]
    # short tree blocks keep the tree's skip distances within range; C13 is part of it
    tail_vals = rng.permutation(np.arange(lo, lo + 18))[: len(tail) + 1]
    tail_vals = [lo] + [int(v) for v in tail_vals if v != lo][: len(tail)]
    for b, v in zip([idx["C13"]] + tail, tail_vals):
        lengths[b] = v
        used.add(v)
    free = [v for v in range(lo, hi + 1) if v not in used]

    def take(pred):
        cands = [v for v in free if pred(v)]
        if not cands:
            raise RuntimeError("ran out of distinct block lengths")
        v = int(rng.choice(cands))
        free.remove(v)
        return v

    # the longest block of every program is exactly at the upper bound
    lengths[idx["T1"]] = hi
    free.remove(hi)
    for i in range(3, 13, 2):
        lengths[idx[f"T{i}"]] = take(lambda v: v % DISTANCE_STEP == 0)
    for i in sorted(DIAMOND_STAGES):
        t = idx[f"T{i}"]
        lengths[t] = take(lambda v: True)
        lengths[idx[f"E{i}"]] = take(lambda v, r=lengths[t] % DISTANCE_STEP: v % DISTANCE_STEP == r)
    for i in range(13):
        lengths[idx[f"C{i}"]] = take(lambda v: True)
    return lengths


# base instruction mix: ALU, LOAD, STORE, MUL, NOP
SYNTHETIC_MIX = (0.40, 0.20, 0.15, 0.10, 0.15)


def generate_synthetic_program(version_id: int, seed: int = 0) -> Program:
    if version_id not in VERSION_BIAS:
        raise ValueError(f"version_id must be one of 1..5, got {version_id!r}")
    bias = VERSION_BIAS[version_id]
    threshold = int(round(256 * bias))
    rng = np.random.default_rng([seed, version_id])
    names, succ, stage, order = _synthetic_topology()
    tight = frozenset(order[order.index(names.index("C13")) + 1 :])
    for _ in range(100):
        try:
            lengths = _synthetic_lengths(rng, names)
            prog = _assemble(
                f"synthetic-v{version_id}",
                names,
                lengths,
                succ,
                stage,
                [threshold if st is not None else None for st in stage],
                order,
                rng,
                SYNTHETIC_MIX,
                version_id,
                bias,
                attempts=20,
                tight=tight,
            )
            break
        except RuntimeError:
            continue
    else:
        raise RuntimeError(f"could not generate synthetic v{version_id} for seed {seed}")
    if len(prog.blocks) != SYNTHETIC_BLOCKS or static_transition_count(prog) != SYNTHETIC_TRANSITIONS:
        raise AssertionError(
            f"synthetic topology has {len(prog.blocks)} blocks / {static_transition_count(prog)} transitions"
        )
    return prog


# --------------------------------------------------------------------------
# AES-like target
# --------------------------------------------------------------------------

# role -> (length range, instruction weights ALU, LOAD, STORE, MUL, NOP)
_AES_ROLES = {
    "setup": ((60, 90), (0.30, 0.40, 0.25, 0.00, 0.05)),
    "sub": ((40, 70), (0.25, 0.55, 0.15, 0.00, 0.05)),
    "shift": ((10, 30), (0.35, 0.30, 0.30, 0.00, 0.05)),
    "mix": ((70, 110), (0.45, 0.05, 0.05, 0.45, 0.00)),
    "ark": ((20, 45), (0.55, 0.25, 0.15, 0.00, 0.05)),
    "out": ((10, 110), (0.20, 0.35, 0.40, 0.00, 0.05)),
}


def _aes_schedule():
    sched = [("setup", "KeyLoad"), ("ark", "ARK0")]
    for r in range(1, 11):
        sched.append(("sub", f"SubBytes{r}"))
        sched.append(("shift", f"ShiftRows{r}"))
        if r < 10:
            sched.append(("mix", f"MixColumns{r}"))
        sched.append(("ark", f"ARK{r}"))
    sched.append(("out", "Store"))
    return sched


def aes_target(seed: int = 2020) -> Program:
    """Unrolled ten-round block schedule; the path never depends on the input."""
    sched = _aes_schedule()
    rng = np.random.default_rng(seed)
    lengths = []
    used = set()
    for role, _ in sched:
        lo, hi = _AES_ROLES[role][0]
        cands = [v for v in range(lo, hi + 1) if v not in used]
        v = int(rng.choice(cands))
        used.add(v)
        lengths.append(v)
    n = len(sched)
    succ = [[b + 1] for b in range(n - 1)] + [[]]
    names = [nm for _, nm in sched]
    prog = _assemble(
        "aes",
        names,
        lengths,
        succ,
        [None] * n,
        [None] * n,
        list(range(n)),
        rng,
        lambda b: _AES_ROLES[sched[b][0]][1],
    )
    if static_transition_count(prog) != AES_TRANSITIONS:
        raise AssertionError(f"aes target has {static_transition_count(prog)} transitions")
    return prog


# --------------------------------------------------------------------------
# manifest: one "block" line per block, then one "edge" line per transition
# --------------------------------------------------------------------------

_KIND_BY_NAME = {k.value: k for k in Kind}


def _rle(kinds):
    out = []
    for k in kinds:
        if out and out[-1][0] == k:
            out[-1][1] += 1
        else:
            out.append([k, 1])
    return " ".join(f"{k.value}*{c}" for k, c in out)


def program_to_manifest(program: Program) -> str:
    head = [
        "# scafuzz program manifest v1",
        f"program {program.name}",
        f"version {program.version_id if program.version_id is not None else '-'}",
        f"bias {program.decision_bias if program.decision_bias is not None else '-'}",
        f"input_width {program.input_width}",
        f"length_range {program.length_range[0]} {program.length_range[1]}",
        f"distance_range {program.distance_range[0]} {program.distance_range[1]}",
    ]
    blocks = [
        f"block {b.id} {b.name or '-'} @{program.address[b.id]} {_rle(b.instructions)}" for b in program.blocks
    ]
    edges = []
    for b in range(len(program)):
        for k, (s, d) in enumerate(zip(program.succ[b], program.dist[b])):
            line = f"edge {b} {s} {d}"
            if len(program.succ[b]) == 2:
                op = "lt" if k == 0 else "ge"
                line += f" byte={program.stage[b]} {op}={program.threshold[b]}"
            edges.append(line)
    return "\n".join(head + blocks + edges) + "\n"


def program_from_manifest(text: str) -> Program:
    meta = {}
    blocks = []
    address = []
    edges = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tag, *rest = line.split()
        try:
            if tag == "block":
                bid, name, addr, *runs = rest
                kinds = []
                for run in runs:
                    k, c = run.split("*")
                    kinds += [_KIND_BY_NAME[k]] * int(c)
                blocks.append(BasicBlock(int(bid), tuple(kinds), "" if name == "-" else name))
                address.append(int(addr.lstrip("@")))
            elif tag == "edge":
                src, dst, d, *cond = rest
                info = dict(c.split("=") for c in cond)
                edges.append((int(src), int(dst), int(d), info))
            else:
                meta[tag] = rest
        except (ValueError, KeyError) as exc:
            raise ValueError(f"manifest line {lineno}: cannot parse {raw!r}") from exc
    missing = [k for k in ("program", "input_width", "length_range", "distance_range") if k not in meta]
    if missing or not blocks:
        raise ValueError(f"not a program manifest (missing {', '.join(missing) or 'blocks'})")
    if any(b.id != i for i, b in enumerate(blocks)):
        raise ValueError("manifest block ids must be 0..n-1 in order")
    n = len(blocks)
    succ = [[] for _ in range(n)]
    dist = [[] for _ in range(n)]
    stage = [None] * n
    thr = [None] * n
    for src, dst, d, info in edges:
        if not (0 <= src < n and 0 <= dst < n):
            raise ValueError(f"manifest edge {src}->{dst} references an unknown block")
        succ[src].append(dst)
        dist[src].append(d)
        if "byte" in info:
            stage[src] = int(info["byte"])
            thr[src] = int(info.get("lt", info.get("ge")))
    ver = meta.get("version", ["-"])[0]
    bias = meta.get("bias", ["-"])[0]
    return Program(
        meta["program"][0],
        tuple(blocks),
        tuple(map(tuple, succ)),
        tuple(map(tuple, dist)),
        tuple(stage),
        tuple(thr),
        tuple(address),
        None if ver == "-" else int(ver),
        None if bias == "-" else float(bias),
        int(meta["input_width"][0]),
        tuple(map(int, meta["length_range"])),
        tuple(map(int, meta["distance_range"])),
    )


def write_manifest(path, program: Program):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(program_to_manifest(program))


def read_manifest(path) -> Program:
    return program_from_manifest(Path(path).read_text())

