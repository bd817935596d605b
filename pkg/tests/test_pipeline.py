import pytest
from hypothesis import given
from hypothesis import strategies as st

from scafuzz.config import ConfigError, RunConfig
from scafuzz.device import theoretical_scores
from scafuzz.pipeline import (
    METHODS,
    Preprocessing,
    Quantization,
    SessionSpec,
    analyze_session,
    derive_seed,
    held_out_quality,
    random_inputs,
    report_grid,
    run_session,
    worker_count,
)


def test_derive_seed():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert len({derive_seed(1, i) for i in range(100)}) == 100
    assert 0 <= derive_seed(5) < 2**64


def test_worker_count(monkeypatch):
    monkeypatch.setenv("SCAFUZZ_WORKERS", "3")
    assert worker_count() == 3
    assert worker_count(2) == 2
    monkeypatch.delenv("SCAFUZZ_WORKERS")
    assert worker_count() == 1


@pytest.mark.parametrize("method", METHODS)
def test_noise_free_session_equals_oracle(clean_device, clean_models, v1, method):
    ins = random_inputs(40, 3)
    spec = SessionSpec(clean_device, clean_models, Preprocessing())
    scores, oracle = run_session(v1, ins, spec, method)
    assert scores == oracle == theoretical_scores(v1, ins)


def test_duplicates_score_zero(noisy_device, noisy_models, v1):
    ins = random_inputs(6, 4)
    ins = ins[:3] + [ins[1]] + ins[3:]
    spec = SessionSpec(noisy_device, noisy_models, Preprocessing(10, 1))
    an = analyze_session(spec, v1, ins)
    assert an[3].duplicate_of == 1
    assert [a.duplicate_of for a in an].count(None) == 6
    scores, oracle = run_session(v1, ins, spec, "RI")
    assert scores[3] == 0 == oracle[3]


def test_worker_count_does_not_change_results(noisy_device, noisy_models, v1):
    ins = random_inputs(12, 6)
    spec = SessionSpec(noisy_device, noisy_models, Preprocessing(1, 1), groups=3)
    for method in METHODS:
        a = run_session(v1, ins, spec, method, "majority", workers=1)
        b = run_session(v1, ins, spec, method, "majority", workers=3)
        assert a == b


def test_report_grid_layout_and_cell_failures(clean_device, clean_models, v1):
    ins = random_inputs(15, 2)
    rows, oracle = report_grid(v1, ins, clean_device, clean_models, groups=2)
    assert len(rows) == 24
    assert all(r.ok and r.mse == 0 and r.correlation == 1.0 and r.crucial_errors == 0 for r in rows)
    assert oracle == theoretical_scores(v1, ins)
    rows, _ = report_grid(v1, ins, clean_device, clean_models, cells=[(0, 1), (1, 1)], methods=["RI"], votes=["single"])
    assert [r.ok for r in rows] == [False, True]
    assert "mean_count" in rows[0].error


def test_held_out_quality_noise_free(clean_device, clean_models):
    mcc, acc = held_out_quality(clean_device, clean_models, n_branches=200)
    assert mcc == 1.0 and acc == 1.0


# -- configuration -------------------------------------------------------------


def test_config_roundtrip_and_validation(tmp_path):
    c = RunConfig()
    c.write(tmp_path / "c.json")
    assert RunConfig.read(tmp_path / "c.json") == c
    for bad in ({"k": 4}, {"dedup_threshold": 0}, {"version": 9}, {"alpha": 0}, {"method": "RIII"}, {"nope": 1}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({**RunConfig().__dict__, **bad})
    with pytest.raises(ConfigError):
        RunConfig.from_json("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.from_json("{")


@given(
    st.integers(1, 5),
    st.integers(0, 2**31),
    st.integers(1, 500),
    st.sampled_from(METHODS),
    st.sampled_from(["majority", "single"]),
    st.one_of(st.none(), st.floats(0, 2)),
    st.floats(0.01, 1),
    st.integers(1, 10).map(lambda k: 2 * k - 1),
)
def test_config_file_roundtrip(version, seed, n, method, vote, sigma, alpha, k):
    c = RunConfig(
        version=version, program_seed=seed, n_inputs=n, method=method, vote=vote, noise_sigma=sigma, alpha=alpha, k=k
    ).validate()
    assert RunConfig.from_json(c.to_json()) == c


def test_config_builders():
    c = RunConfig(noise_sigma=0.0, vote="single", groups=5)
    assert c.device().noise_sigma == 0.0
    assert RunConfig().device().snr_db() == pytest.approx(10.0)
    assert c.session(c.device(), None).groups == 1
    assert RunConfig(vote="majority", groups=4).session(None, None).groups == 4
    assert c.quant() == Quantization("tolerance", 2, 8.0)
    assert len(c.program()) == 48 and len(RunConfig(target="aes").program()) == 42
    ins = c.inputs(16)
    assert len(ins) == 100 and all(len(x) == 16 for x in ins) and ins == c.inputs(16)
