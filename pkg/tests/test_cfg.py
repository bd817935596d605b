import pytest
from hypothesis import given
from hypothesis import strategies as st

from scafuzz.cfg import (
    RI,
    RII,
    TCfgEntry,
    TCfgTable,
    read_table,
    reconstruct_ri,
    reconstruct_rii,
    ri_block_starts,
    table_from_text,
    table_to_text,
    transition_keys,
    write_table,
)
from scafuzz.device import execute, synthesize_trace
from scafuzz.features import FeatureScaler, Fingerprint
from scafuzz.pipeline import extract, random_inputs

lengths = st.integers(1, 200)
dists = st.integers(0, 150)


@st.composite
def ri_inputs(draw):
    n = draw(st.integers(0, 30))
    return [0] * n, draw(st.lists(dists, min_size=n, max_size=n)), draw(st.lists(lengths, min_size=n + 1, max_size=n + 1))


prints = st.builds(
    Fingerprint, st.integers(1, 500), st.integers(0, 60), st.floats(-5, 5), st.floats(-3, 3)
)


def test_ri_paper_example():
    t = reconstruct_ri([0, 0], [20, 0], [10, 15, 30])
    assert [(e.offset, e.length) for e in t.entries] == [(10, 15), (45, 30)]
    assert len(reconstruct_ri([], [], [12])) == 0
    with pytest.raises(ValueError):
        reconstruct_ri([0], [], [1, 2])
    with pytest.raises(ValueError):
        reconstruct_ri([0], [5], [1])


@given(ri_inputs())
def test_ri_telescoping(args):
    t = reconstruct_ri(*args)
    for a, b in zip(t.entries, t.entries[1:]):
        assert b.offset == a.offset + a.length + a.distance


@given(ri_inputs(), st.data())
def test_ri_error_propagates_downstream(args, data):
    loc, d, seg = args
    if not d:
        return
    j = data.draw(st.integers(0, len(d) - 1))
    delta = data.draw(st.integers(1, 50))
    good = reconstruct_ri(loc, d, seg)
    bad_d = list(d)
    bad_d[j] += delta
    bad = reconstruct_ri(loc, bad_d, seg)
    for i, (g, b) in enumerate(zip(good.entries, bad.entries)):
        assert b.offset - g.offset == (delta if i > j else 0)
    gk, _ = transition_keys(good)
    bk, _ = transition_keys(bad)
    # the corrupted transition and every one after it are different keys
    assert all(gk[i] != bk[i] for i in range(j, len(gk)))
    assert gk[:j] == bk[:j]


@given(st.lists(prints, min_size=1, max_size=30), st.data())
def test_rii_corruption_is_local(ps, data):
    j = data.draw(st.integers(0, len(ps) - 1))
    q = list(ps)
    q[j] = Fingerprint(q[j].length + 1000, q[j].peaks, q[j].mean, q[j].skewness)
    scaler = FeatureScaler.fit(ps)  # same quantiser for both tables
    gk, _ = transition_keys(reconstruct_rii(ps), lambda p: scaler.key(p))
    bk, _ = transition_keys(reconstruct_rii(q), lambda p: scaler.key(p))
    assert len(gk) == len(bk) == len(ps) - 1
    assert sum(a != b for a, b in zip(gk, bk)) <= 2


def test_rii_structure():
    a, b = Fingerprint(10, 1, 0.5, 0.1), Fingerprint(20, 2, 0.7, -0.2)
    t = reconstruct_rii([a])
    assert len(t) == 1 and t.entries[0].branch_id is None
    t = reconstruct_rii([a, b, a])
    assert [e.branch_id for e in t.entries] == [None, 0, 1]
    keys, _ = transition_keys(t, lambda p: p)
    assert keys == [(a, b), (b, a)]
    with pytest.raises(ValueError):
        reconstruct_rii([])


def test_invalid_prints_skipped():
    a, z = Fingerprint(10, 1, 0.5, 0.1), Fingerprint(0, 0, 0.0, 0.0)
    keys, skipped = transition_keys(reconstruct_rii([a, z, a, a]))
    assert skipped == 2 and len(keys) == 1


def test_table_invariants():
    with pytest.raises(ValueError):
        TCfgTable(0, RI, [TCfgEntry(0, 5, 1, 0), TCfgEntry(1, 5, 1, 0)])
    with pytest.raises(ValueError):
        TCfgTable(0, RI, [TCfgEntry(0, print=Fingerprint(1, 0, 0.0, 0.0))])
    with pytest.raises(ValueError):
        TCfgTable(0, "RX", [])


def test_noise_free_tables_match_ground_truth(clean_device, clean_models, v1):
    seqs = {}
    for i, data in enumerate(random_inputs(100, 8)):
        rec = execute(v1, data)
        f = extract(synthesize_trace(clean_device, rec, 0), clean_device, clean_models)
        t = f.ri_table(i)
        # offsets are block end addresses, branch targets are block start addresses
        assert [e.offset for e in t.entries] == [v1.end(b) for b in rec.block_ids[:-1]]
        assert ri_block_starts(t) == [v1.address[b] for b in rec.block_ids[1:]]
        assert [e.length for e in t.entries] == [len(v1.blocks[b]) for b in rec.block_ids[1:]]
        r = f.rii_table(i)
        assert len(r) == len(f.locations) + 1
        seq = tuple(e.print for e in r.entries)
        assert seqs.setdefault(seq, rec.block_ids) == rec.block_ids


@given(ri_inputs(), st.integers(0, 10**6))
def test_ri_text_roundtrip(args, input_id):
    t = reconstruct_ri(*args, input_id=input_id)
    assert table_from_text(table_to_text(t)) == t


@given(st.lists(prints, min_size=1, max_size=20), st.integers(0, 10**6))
def test_rii_text_roundtrip(ps, input_id):
    t = reconstruct_rii(ps, input_id)
    text = table_to_text(t)
    assert table_from_text(text) == t
    assert text.splitlines()[1].startswith("start ")


def test_table_file(tmp_path):
    t = reconstruct_ri([0, 0], [20, 40], [10, 15, 30])
    write_table(tmp_path / "t.txt", t)
    assert read_table(tmp_path / "t.txt") == t
    assert (tmp_path / "t.txt").read_text().splitlines() == [
        "# T_CFG input=0 method=RI",
        "0 10,15 d=20",
        "1 45,30 d=40",
    ]
    assert t.method == RI and reconstruct_rii([Fingerprint(1, 0, 0.0, 0.0)]).method == RII
    with pytest.raises(ValueError):
        table_from_text("0 1,2 d=3\n")
