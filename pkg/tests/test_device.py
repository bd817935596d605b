import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scafuzz.device import (
    BODY_KINDS,
    ISA,
    DeviceModel,
    ExecutionRecord,
    Kind,
    PowerTrace,
    default_device,
    execute,
    read_trace,
    render,
    synthesize_trace,
    theoretical_scores,
    timeline,
    trace_from_bytes,
    trace_to_bytes,
    write_trace,
)
from scafuzz.pipeline import random_inputs
from scafuzz.preprocess import mse


def _straight(bodies, dists, spc=8):
    spans = timeline(bodies, len(dists), spc)
    return ExecutionRecord(tuple(range(len(bodies))), tuple((0, d) for d in dists), spans, tuple(bodies), spc)


def test_templates_have_declared_lengths_and_differ(clean_device):
    d = clean_device
    for k, tpl in d.templates.items():
        assert len(tpl) == ISA[k].cycles * d.samples_per_cycle
    kinds = [k for k in Kind if k != Kind.BRANCH]
    for a in kinds:
        for b in kinds:
            if a != b:
                assert mse(d.templates[a], d.templates[b]) > 0


def test_nop_only_trace_is_baseline_plus_template(clean_device):
    rec = _straight([(Kind.NOP,) * 5], [])
    tr = synthesize_trace(clean_device, rec, 0)
    want = np.tile(clean_device.templates[Kind.NOP], 5) + clean_device.baseline
    np.testing.assert_array_equal(tr.samples, want.astype(np.float32))


def test_distance_component_confined_to_branch_window(clean_device):
    d = clean_device
    body = (Kind.ALU, Kind.LOAD, Kind.MUL)
    a = render(d, _straight([body, body], [10]))
    b = render(d, _straight([body, body], [150]))
    s = 3 * d.samples_per_cycle
    w = d.branch_window
    outside = np.r_[np.arange(s), np.arange(s + w, len(a))]
    np.testing.assert_array_equal(a[outside], b[outside])
    # oracle: the additive ramp at full scale
    want = d.distance_gain * (d.encode(150) - d.encode(10)) * d.distance_ramp()
    np.testing.assert_allclose(b[s : s + w] - a[s : s + w], want, atol=1e-12)


def test_zero_noise_branch_window_exact(clean_device, v1):
    rec = execute(v1, bytes(range(16)))
    x = render(clean_device, rec)
    for (s, e), (_, dist) in zip(rec.branch_spans, rec.branches):
        np.testing.assert_array_equal(x[s:e], clean_device.branch_signal(dist) + clean_device.baseline)


@given(st.binary(min_size=16, max_size=16), st.integers(0, 2**63))
def test_span_bookkeeping(data, seed):
    from scafuzz.targets import generate_synthetic_program

    p = generate_synthetic_program(1, 42)
    rec = execute(p, data)
    spans = rec.sample_spans
    assert spans[0][0] == 0
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert len(rec.branches) == len(rec.block_ids) - 1
    tr = synthesize_trace(default_device(0.1), rec, seed)
    assert len(tr) == spans[-1][1] == sum(e - s for s, e in spans)


def test_determinism_and_seed_dependence(noisy_device, v1):
    rec = execute(v1, bytes(16))
    a = synthesize_trace(noisy_device, rec, 5)
    assert a == synthesize_trace(noisy_device, rec, 5)
    assert a != synthesize_trace(noisy_device, rec, 6)
    clean = default_device()
    assert synthesize_trace(clean, rec, 1).samples.tobytes() == synthesize_trace(clean, rec, 2).samples.tobytes()


def test_noise_level_matches_sigma(v1):
    d = default_device(0.2)
    rec = execute(v1, bytes(16))
    r = synthesize_trace(d, rec, 3).samples - render(d, rec)
    assert abs(r.std() - 0.2) < 0.01


def test_snr_calibration():
    d = default_device().with_snr(10.0)
    assert d.snr_db() == pytest.approx(10.0)
    assert d.noise_sigma**2 == pytest.approx(d.signal_power() / 10)


def test_rejections(clean_device):
    with pytest.raises(ValueError):
        DeviceModel(noise_sigma=-1.0)
    with pytest.raises(ValueError):
        DeviceModel(templates={Kind.ALU: np.zeros(3)})
    partial = {k: v for k, v in clean_device.templates.items() if k != Kind.MUL}
    dev = DeviceModel(templates=partial)
    with pytest.raises(KeyError):
        render(dev, _straight([(Kind.MUL,)], []))
    with pytest.raises(ValueError):
        PowerTrace(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        PowerTrace(np.zeros(3), seed=-1)


def test_theoretical_scores_oracle(v1):
    ins = random_inputs(100, 9)
    s = theoretical_scores(v1, ins)
    assert sum(s) <= 60
    assert theoretical_scores(v1, [ins[0], ins[0]])[1] == 0
    first = execute(v1, ins[0]).block_ids
    assert s[0] == len(set(zip(first, first[1:])))


@given(st.integers(0, 2**64 - 1), st.lists(st.floats(-1e3, 1e3, width=32), max_size=200))
def test_trace_bytes_roundtrip(seed, values):
    tr = PowerTrace(np.array(values, dtype=np.float32), 8, seed)
    buf = trace_to_bytes(tr)
    back = trace_from_bytes(buf)
    assert back == tr
    assert trace_to_bytes(back) == buf


def test_trace_file_roundtrip(tmp_path, noisy_device, v1):
    tr = synthesize_trace(noisy_device, execute(v1, bytes(16)), 77)
    write_trace(tmp_path / "t.ptrc", tr)
    assert read_trace(tmp_path / "t.ptrc") == tr
    raw = (tmp_path / "t.ptrc").read_bytes()
    assert raw[:4] == b"PTRC"
    for bad in (raw[:10], b"XXXX" + raw[4:], raw[:-4]):
        with pytest.raises(ValueError):
            trace_from_bytes(bad)


def test_body_kinds_one_cycle():
    assert {ISA[k].cycles for k in BODY_KINDS} == {1}
