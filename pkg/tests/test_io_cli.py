import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sivphot import io as sio
from sivphot.cli import EXIT_CONVERGENCE, EXIT_INPUT, EXIT_IO, EXIT_OK, OUTPUT_ENV, main
from sivphot.correlation import correlate
from sivphot.emitter_sim import SimConfig, TimestampStream, simulate
from sivphot.errors import FileFormatError
from sivphot.rate_model import shape_from_rates
from sivphot.reference import DESHELVING_FITS


@pytest.fixture
def stream():
    rc = DESHELVING_FITS["ND3"].rates
    return simulate(SimConfig(rc, 105.0, 5e-3, eta_detect=0.2, background_rate=1e4, seed=1))


def _series_file(path, name):
    ref = DESHELVING_FITS[name]
    P = np.geomspace(0.05, 10, 8) * ref.Psat
    shapes = [shape_from_rates(ref.rates, p) for p in P]
    sio.write_table(path, {"power": P, "a": [s.a for s in shapes],
                           "tau1": [s.tau1 for s in shapes], "tau2": [s.tau2 for s in shapes]},
                    {"power": "uW", "tau1": "ns", "tau2": "ns"})
    return path


# --- file formats -------------------------------------------------------------

def test_binary_timestamps_round_trip(tmp_path, stream):
    p = tmp_path / "s.sivt"
    sio.write_timestamps(p, stream)
    back = sio.read_timestamps(p)
    np.testing.assert_array_equal(back.channel_a, stream.channel_a)
    np.testing.assert_array_equal(back.channel_b, stream.channel_b)
    assert back.duration_ticks == stream.duration_ticks
    assert back.metadata["power_uW"] == stream.metadata["power_uW"]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 10**9), max_size=50), st.lists(st.integers(0, 10**9), max_size=50))
def test_text_timestamps_round_trip(tmp_path_factory, a, b):
    p = tmp_path_factory.mktemp("txt") / "s.txt"
    lines = ["# duration_ns: 1000001"]
    lines += [f"a\t{t / 1000:.3f}" for t in a] + [f"1\t{t / 1000:.3f}" for t in b]
    p.write_text("\n".join(lines) + "\n")
    s = sio.read_timestamps(p)
    np.testing.assert_array_equal(s.channel_a, np.unique(a))
    np.testing.assert_array_equal(s.channel_b, np.unique(b))
    assert s.duration_ticks == 10**9 + 1000


def test_table_round_trip(tmp_path):
    p = tmp_path / "t.tsv"
    cols = {"x": np.array([1, 2, 3]), "y": np.array([0.1, 1e-300, -2.5e10])}
    sio.write_table(p, cols, {"y": "ns"}, {"seed": 3, "note": "hi"})
    back, units, meta = sio.read_table(p)
    np.testing.assert_array_equal(back["y"], cols["y"])
    assert units == {"y": "ns"} and meta == {"seed": 3, "note": "hi"}


def test_histogram_round_trip(tmp_path, stream):
    h = correlate(stream, 50.0, 0.5)
    p = tmp_path / "h.tsv"
    sio.write_histogram(p, h)
    back = sio.read_histogram(p)
    np.testing.assert_array_equal(back.counts, h.counts)
    np.testing.assert_allclose(back.bin_edges, h.bin_edges, rtol=0, atol=1e-12)
    assert back.norm_constant == h.norm_constant


def test_json_handles_numpy_and_nan(tmp_path):
    p = tmp_path / "r.json"
    sio.write_json(p, {"a": np.arange(3), "b": math.nan, "c": np.float32(1.5), "d": 1 + 2j})
    assert sio.read_json(p) == {"a": [0, 1, 2], "b": None, "c": 1.5, "d": {"re": 1, "im": 2}}


@pytest.mark.parametrize("cut", [3, 20, 50, -4])
def test_truncated_binary_is_rejected(tmp_path, stream, cut):
    p = tmp_path / "s.sivt"
    sio.write_timestamps(p, stream)
    data = p.read_bytes()
    p.write_bytes(data[:cut] if cut > 0 else data + b"\0" * -cut)
    with pytest.raises(FileFormatError):
        sio.read_timestamps(p)


def test_unsorted_binary_is_rejected(tmp_path):
    s = TimestampStream(np.array([5, 3]), np.array([1]), 10)
    p = tmp_path / "s.sivt"
    sio.write_timestamps(p, s)
    with pytest.raises(FileFormatError):
        sio.read_timestamps(p)


@pytest.mark.parametrize("text", ["x\t1.0\n", "a\tabc\n", "a 1 2\n"])
def test_bad_text_timestamps(tmp_path, text):
    p = tmp_path / "s.txt"
    p.write_text(text)
    with pytest.raises(FileFormatError):
        sio.read_timestamps(p)


def test_bad_tables(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("1\t2\n")
    with pytest.raises(FileFormatError):
        sio.read_table(p)
    p.write_text("# x\ty\n1\tfoo\n")
    with pytest.raises(FileFormatError):
        sio.read_table(p)
    p.write_text("# x\ty\n1\n")
    with pytest.raises(FileFormatError):
        sio.read_table(p)
    p.write_text("{not json")
    with pytest.raises(FileFormatError):
        sio.read_json(p)


# --- command line ----------------------------------------------------------------

def _sim(tmp_path, name="s.sivt", *extra):
    out = tmp_path / name
    code = main(["simulate", "--emitter", "ND3", "--power", "105", "--duration", "0.005",
                 "--eta-detect", "0.2", "-q", "-o", str(out), *extra])
    return code, out


def test_simulate_is_deterministic(tmp_path):
    code, out = _sim(tmp_path)
    assert code == EXIT_OK
    first = out.read_bytes()
    assert _sim(tmp_path)[0] == EXIT_OK
    assert out.read_bytes() == first
    _sim(tmp_path, "s.sivt", "--seed", "1")
    assert out.read_bytes() != first


def test_stamp_adds_creation_time(tmp_path):
    _, out = _sim(tmp_path, "s.sivt", "--stamp")
    assert "created" in sio.read_timestamps(out).metadata["cli"]
    _, out = _sim(tmp_path, "u.sivt")
    assert "created" not in sio.read_timestamps(out).metadata["cli"]


def test_pipeline_correlate_and_fit(tmp_path):
    _, ts = _sim(tmp_path)
    g2 = tmp_path / "g2.tsv"
    assert main(["correlate", str(ts), "--max-tau", "40", "--bin-width", "0.25", "-q",
                 "-o", str(g2)]) == EXIT_OK
    h = sio.read_histogram(g2)
    assert h.bin_width == pytest.approx(0.25, rel=1e-2)
    fit = tmp_path / "fit.json"
    assert main(["fit-g2", str(g2), "--format", "structured", "-q", "-o", str(fit)]) == EXIT_OK
    doc = sio.read_json(fit)
    assert doc["meta"]["command"] == "fit-g2"
    assert set(doc["result"]["parameters"]) == {"a", "tau1", "tau2"}


def test_trace_command(tmp_path):
    _, ts = _sim(tmp_path)
    out = tmp_path / "tr.tsv"
    assert main(["trace", str(ts), "--window", "1", "-q", "-o", str(out)]) == EXIT_OK
    cols, units, meta = sio.read_table(out)
    assert units["rate"] == "cps" and cols["counts"].size == 5


def test_zero_efficiency_writes_header_only_histogram(tmp_path):
    code, ts = _sim(tmp_path, "z.sivt", "--eta-detect", "0", "--background", "0")
    assert code == EXIT_OK
    assert sio.read_timestamps(ts).n_events == 0
    # an empty channel cannot be normalized: input error, not a crash
    assert main(["correlate", str(ts), "--max-tau", "10", "--bin-width", "1", "-q",
                 "-o", str(tmp_path / "g.tsv")]) == EXIT_INPUT


def test_fit_power_and_analyze_series(tmp_path, monkeypatch):
    series = _series_file(tmp_path / "nd2.tsv", "ND2")
    out = tmp_path / "p.json"
    assert main(["fit-power", str(series), "--format", "structured", "-q",
                 "-o", str(out)]) == EXIT_OK
    res = sio.read_json(out)["result"]
    assert res["rates"]["k21"] == pytest.approx(DESHELVING_FITS["ND2"].rates.k21, rel=1e-3)
    env_dir = tmp_path / "env"
    env_dir.mkdir()
    monkeypatch.setenv(OUTPUT_ENV, str(env_dir))
    assert main(["analyze", str(series), "--I-inf", "5e5", "-q"]) == EXIT_OK
    _, _, meta = sio.read_table(env_dir / "analysis_power.tsv")
    assert 0 < meta["result"]["eta_qe"] < 1
    assert (env_dir / "analysis_series.tsv").is_file()


def test_convergence_failure_exit_code(tmp_path):
    series = _series_file(tmp_path / "nd4.tsv", "ND4")
    assert main(["fit-power", str(series), "-q", "-o", str(tmp_path / "x")]) == EXIT_CONVERGENCE


def test_input_and_io_exit_codes(tmp_path):
    assert main(["qe", "--emitter", "XX1", "-q", "-o", str(tmp_path / "q")]) == EXIT_INPUT
    assert main(["qe", "--rates", "1,2", "-q", "-o", str(tmp_path / "q")]) == EXIT_INPUT
    assert main(["simulate", "--emitter", "ND3", "-q"]) == EXIT_INPUT
    assert main(["fit-g2", str(tmp_path / "missing.tsv"), "-q"]) == EXIT_IO
    assert main(["qe", "--emitter", "ND1", "-q", "-o", str(tmp_path / "no" / "q")]) == EXIT_IO
    bad = tmp_path / "bad.tsv"
    bad.write_text("garbage\n")
    assert main(["fit-sat", str(bad), "-q", "-o", str(tmp_path / "s")]) == EXIT_INPUT
    assert main(["no-such-command"]) == 2


def test_qe_reference_emitter(tmp_path):
    out = tmp_path / "q.json"
    assert main(["qe", "--emitter", "ND1", "--eta-coll", "0.28", "--format", "structured",
                 "-q", "-o", str(out)]) == EXIT_OK
    assert sio.read_json(out)["result"]["eta_qe"] == pytest.approx(0.022, abs=0.002)


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"emitter": "ND1", "eta_coll": 0.28}))
    out = tmp_path / "q.json"
    assert main(["qe", "--config", str(cfg), "--format", "structured", "-q",
                 "-o", str(out)]) == EXIT_OK
    low = sio.read_json(out)["result"]["eta_qe"]
    assert main(["qe", "--eta-coll", "0.78", "--config", str(cfg), "--format", "structured",
                 "-q", "-o", str(out)]) == EXIT_OK
    assert sio.read_json(out)["result"]["eta_qe"] == pytest.approx(low * 0.28 / 0.78)
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["qe", "--config", str(cfg), "-q", "-o", str(out)]) == EXIT_INPUT


def test_fit_sat_command(tmp_path):
    P = np.geomspace(10, 5000, 12)
    I = 5e5 * P / (P + 300) + 20 * P
    src = tmp_path / "sat.tsv"
    sio.write_table(src, {"power": P, "rate": I})
    out = tmp_path / "fit.json"
    assert main(["fit-sat", str(src), "--format", "structured", "-q", "-o", str(out)]) == EXIT_OK
    res = sio.read_json(out)["result"]
    assert res["parameters"]["I_inf"] == pytest.approx(5e5, rel=1e-6)
    assert res["parameters"]["Psat"] == pytest.approx(300, rel=1e-6)


def test_dipole_free_space_is_flat(tmp_path):
    stem = tmp_path / "d"
    assert main(["dipole", "--epsilon", "1+0j", "--z-min", "20", "--z-max", "200", "--n-z", "4",
                 "--pattern-z", "80", "-q", "-o", str(stem)]) == EXIT_OK
    cols, units, _ = sio.read_table(tmp_path / "d_perpendicular.tsv")
    np.testing.assert_allclose(cols["gamma_tot_rel"], 1.0, atol=1e-6)
    assert units["z"] == "nm"
    pat, _, _ = sio.read_table(tmp_path / "d_parallel_pattern.tsv")
    assert set(pat) == {"theta", "z80nm"}
