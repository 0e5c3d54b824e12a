import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptac import config as config_io
from adaptac.rng import stream, stream_key, stream_seed
from adaptac.traces import (
    TraceRecord,
    load_traces,
    phase_summary,
    read_trace,
    write_summary_csv,
    write_trace,
)
from adaptac.validation import check_array, check_choice, check_nonnegative, check_positive_int


# ---------------------------------------------------------------- rng streams

def test_streams_are_reproducible_and_distinct():
    a = stream(7, "train/batch").random(5)
    assert a.tobytes() == stream(7, "train/batch").random(5).tobytes()
    assert a.tobytes() != stream(7, "train/pi").random(5).tobytes()
    assert a.tobytes() != stream(8, "train/batch").random(5).tobytes()


def test_adding_a_stream_does_not_shift_others():
    before = stream(3, "eval").random(4)
    stream(3, "new/consumer").random(100)
    assert before.tobytes() == stream(3, "eval").random(4).tobytes()


def test_stream_key_and_seed_ranges():
    assert stream_key("x") == stream_key("x") != stream_key("y")
    s = stream_seed(0, "demo/episode/0")
    assert 0 <= s < 2**63 - 1 and s == stream_seed(0, "demo/episode/0")
    with pytest.raises(ValueError):
        stream(-1, "x")


# ---------------------------------------------------------------- config files

def test_parse_config_literals_and_comments():
    cfg = config_io.parse_config("# note\nseed = 3\nmode = 'full'\nwidths = (32, 64)\nflag = True\nname = bare\n\n")
    assert cfg == {"seed": 3, "mode": "full", "widths": (32, 64), "flag": True, "name": "bare"}


@pytest.mark.parametrize("text", ["seed 3", "bad key = 1", "= 4"])
def test_parse_config_rejects_malformed_lines(text):
    with pytest.raises(config_io.ConfigError):
        config_io.parse_config(text)


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.from_regex(r"[a-z][a-z_]{0,8}", fullmatch=True),
                       st.one_of(st.integers(), st.floats(allow_nan=False, allow_infinity=False),
                                 st.booleans(), st.tuples(st.integers(), st.integers()),
                                 st.text("abc xyz", min_size=1).map(lambda s: "s" + s.strip())),
                       max_size=6))
def test_config_dump_parse_round_trip(cfg):
    assert config_io.parse_config(config_io.dump_config(cfg)) == cfg


def test_merge_later_sources_win_and_none_is_skipped():
    assert config_io.merge({"a": 1, "b": 2}, {"b": 3}, {"a": None, "c": 4}) == {"a": 1, "b": 3, "c": 4}


# ---------------------------------------------------------------- validation helpers

def test_validation_helpers():
    assert check_positive_int(3, "x") == 3
    with pytest.raises(TypeError):
        check_positive_int(True, "x")
    with pytest.raises(TypeError):
        check_positive_int(2.0, "x")
    with pytest.raises(ValueError):
        check_positive_int(0, "x")
    assert check_positive_int(0, "x", minimum=0) == 0
    with pytest.raises(ValueError):
        check_nonnegative(float("inf"), "x")
    with pytest.raises(ValueError):
        check_choice("c", "x", ("a", "b"))
    with pytest.raises(ValueError):
        check_array([[1.0, np.nan]], "x")
    with pytest.raises(ValueError):
        check_array(np.zeros((2, 3)), "x", last=4)
    assert check_array([1, 2], "x", ndim=1).dtype == np.float64


# ---------------------------------------------------------------- traces

def make_trace():
    return [TraceRecord(0, 0.8, 0.2, 0.0, "REACH"), TraceRecord(1, 0.6, 0.4, 0.0, "REACH"),
            TraceRecord(2, 0.3, 0.7, 2.0, "PRESS"), TraceRecord(3, 0.1, 0.9, 2.5, "FLIP"),
            TraceRecord(4, 0.5, 0.5, 0.0, "RETREAT")]


def test_trace_round_trip_is_exact(tmp_path):
    recs = make_trace() + [TraceRecord(5, None, None, 0.1 + 0.2, "RETREAT")]
    write_trace(tmp_path / "t.csv", recs)
    assert read_trace(tmp_path / "t.csv") == recs
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "step,alpha_pc,alpha_tac,force_norm,phase"


def test_trace_rejects_bad_header(tmp_path):
    (tmp_path / "t.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_trace(tmp_path / "t.csv")


def test_phase_summary_hand_values():
    s = phase_summary([make_trace(), [TraceRecord(0, 0.0, 1.0, 3.0, "FLIP")]])
    assert s["mean_alpha_tac"] == pytest.approx({"REACH": 0.3, "PRESS": 0.7, "FLIP": 0.95, "RETREAT": 0.5})
    assert s["counts"] == {"FLIP": 2, "PRESS": 1, "REACH": 2, "RETREAT": 1}
    assert s["contact_alpha_tac"] == pytest.approx((0.7 + 0.9 + 1.0) / 3)
    assert s["reach_to_contact_delta"] == pytest.approx((0.7 + 0.9 + 1.0) / 3 - 0.3)
    assert s["reach_to_flip_delta"] == pytest.approx(0.65)
    assert s["overall_alpha_tac"] == pytest.approx((0.2 + 0.4 + 0.7 + 0.9 + 0.5 + 1.0) / 6)


def test_phase_summary_without_weights():
    s = phase_summary([[TraceRecord(0, None, None, 0.0, "REACH")]])
    assert s["mean_alpha_tac"] == {} and s["overall_alpha_tac"] is None
    assert s["reach_to_contact_delta"] is None


def test_load_traces_sorted_and_summary_csv(tmp_path):
    write_trace(tmp_path / "episode_0001.csv", make_trace()[:2])
    write_trace(tmp_path / "episode_0000.csv", make_trace())
    traces = load_traces(tmp_path)
    assert [len(t) for t in traces] == [5, 2]
    write_summary_csv(tmp_path / "s.out", phase_summary(traces))
    lines = (tmp_path / "s.out").read_text().splitlines()
    assert lines[0] == "phase,count,mean_alpha_tac" and len(lines) == 5
