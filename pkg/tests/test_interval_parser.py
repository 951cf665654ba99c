import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import reference_frame_extractor
from tal_llm.dataset import FrameIndex, FrameRef
from tal_llm.interval_parser import (
    IntervalPrediction,
    ParseMethod,
    parse_interval,
    render_prediction,
    to_seconds,
)

CORPUS = Path(__file__).parent / "fixtures" / "parser_corpus"
CASES = sorted(p.name[: -len(".txt")] for p in CORPUS.glob("*.txt"))


def load_case(name):
    text = (CORPUS / f"{name}.txt").read_text(encoding="utf-8")
    expected = json.loads((CORPUS / f"{name}.expected.json").read_text())
    return text, expected


def frame_index(n: int, duration: float | None = None) -> FrameIndex:
    frames = tuple(FrameRef(k, float(k - 1), Path(f"frame_{k:06d}.jpg")) for k in range(1, n + 1))
    return FrameIndex("V", frames, float(duration if duration is not None else n))


def test_corpus_size():
    assert len(CASES) >= 20


@pytest.mark.parametrize("name", CASES)
def test_corpus(name):
    text, expected = load_case(name)
    pred = parse_interval(text, expected.get("n_frames", 31), unit=expected.get("unit", "frames"))
    assert pred.outcome() == expected["outcome"]
    assert pred.method.value == expected["method"]
    assert pred.raw_response == text


@pytest.mark.parametrize("name", CASES)
def test_corpus_against_reference_extractor(name):
    # the reference only knows "Frame A to Frame B"; where it is the sole
    # interval form present it must agree with the pattern stage
    text, expected = load_case(name)
    pred = parse_interval(text, 31)
    if pred.method is not ParseMethod.PATTERN_HEURISTIC or pred.kind != "frames":
        return
    ref = reference_frame_extractor(text, 31)
    if ref is not None:
        assert (pred.start, pred.end) == ref


def test_qwen_response():
    text, _ = load_case("qwen7b_fenced")
    pred = parse_interval(text, 31)
    assert (pred.kind, pred.start, pred.end, pred.method) == ("frames", 16, 28, ParseMethod.FENCED_JSON)


def test_strict_json_wins_over_heuristics():
    pred = parse_interval('{"start_frame": 2, "end_frame": 9, "note": "Frame 20 to Frame 25"}', 31)
    assert pred.method is ParseMethod.STRICT_JSON and (pred.start, pred.end) == (2, 9)


def test_seconds_unit_for_video_answers():
    pred = parse_interval("start: 15, end: 28", 1, unit="seconds")
    assert (pred.kind, pred.start, pred.end) == ("seconds", 15.0, 28.0)
    assert parse_interval("The action happens around 12.5 - 18 seconds.", 1, unit="seconds").outcome() == {
        "kind": "seconds", "start": 12.5, "end": 18.0}
    assert parse_interval("0:12 to 0:19", 1, unit="seconds").outcome() == {"kind": "seconds", "start": 12.0, "end": 19.0}
    assert parse_interval("The action takes place 4-9.", 1, unit="seconds").start == 4.0
    assert parse_interval('{"start": 3.5, "end": 7}', 1, unit="seconds").kind == "seconds"


def test_non_finite_json_rejected():
    assert parse_interval('{"start_frame": NaN, "end_frame": Infinity}', 31).is_undefined
    assert parse_interval("[1e999, 2]", 31).is_undefined


def test_n_frames_validated():
    with pytest.raises(ValueError):
        parse_interval("{}", 0)


def test_undefined_iff_none():
    with pytest.raises(ValueError):
        IntervalPrediction("frames", 1, 2, ParseMethod.NONE)
    with pytest.raises(ValueError):
        IntervalPrediction("undefined", None, None, ParseMethod.STRICT_JSON)


def _check_valid(pred: IntervalPrediction, n: int) -> None:
    assert pred.is_undefined == (pred.method is ParseMethod.NONE)
    if pred.kind == "frames":
        assert 1 <= pred.start <= pred.end <= n
        assert isinstance(pred.start, int) and isinstance(pred.end, int)
    elif pred.kind == "seconds":
        assert 0 <= pred.start <= pred.end


@given(st.text(max_size=300), st.integers(1, 200))
def test_fuzz_text(text, n):
    _check_valid(parse_interval(text, n), n)
    _check_valid(parse_interval(text, n, unit="seconds"), n)


_tokens = st.sampled_from(
    ["Frame", "frames", " to ", "-", "–", "from", "start", "end", ":", "=", '"', "{", "}", "[", "]", ",",
     "```", "json", "\n", " ", "00:", "seconds", "and", "begin", "stop", "start_frame", "end_frame"]
)
_nums = st.integers(-5, 10**30).map(str) | st.floats(allow_nan=True, allow_infinity=True).map(str)


@given(st.lists(_tokens | _nums, max_size=40).map("".join), st.integers(1, 60))
def test_fuzz_structured(text, n):
    _check_valid(parse_interval(text, n), n)


@given(st.integers(1, 500), st.data())
def test_render_parse_idempotent(n, data):
    a = data.draw(st.integers(1, n))
    b = data.draw(st.integers(a, n))
    pred = IntervalPrediction("frames", a, b, ParseMethod.STRICT_JSON)
    again = parse_interval(render_prediction(pred), n)
    assert (again.kind, again.start, again.end) == ("frames", a, b)


@given(st.floats(0, 1e4), st.floats(0, 1e4))
def test_render_seconds_idempotent(x, y):
    a, b = sorted((x, y))
    pred = IntervalPrediction("seconds", a, b, ParseMethod.STRICT_JSON)
    again = parse_interval(render_prediction(pred), 1)
    assert (again.kind, again.start, again.end) == ("seconds", a, b)


# --- frames to seconds ----------------------------------------------------------


def test_to_seconds_full_span():
    pred = IntervalPrediction("frames", 1, 31, ParseMethod.STRICT_JSON)
    assert to_seconds(pred, frame_index(31)) == (0.0, 31.0)


def test_to_seconds_paper_example():
    # frame k covers [k-1, k]
    pred = IntervalPrediction("frames", 16, 28, ParseMethod.FENCED_JSON)
    assert to_seconds(pred, frame_index(31)) == (15.0, 28.0)


def test_to_seconds_undefined():
    assert to_seconds(IntervalPrediction.undefined(), frame_index(5)) is None


def test_to_seconds_clamps_to_duration():
    fi = frame_index(31, duration=30.4)
    assert to_seconds(IntervalPrediction("frames", 30, 31, ParseMethod.STRICT_JSON), fi) == (29.0, 30.4)
    assert to_seconds(IntervalPrediction("seconds", 25.0, 80.0, ParseMethod.PATTERN_HEURISTIC), fi) == (25.0, 30.4)
    assert to_seconds(IntervalPrediction("seconds", 40.0, 80.0, ParseMethod.PATTERN_HEURISTIC), fi) == (30.4, 30.4)


@given(st.integers(1, 80), st.data(), st.floats(0.1, 100))
def test_to_seconds_bounds(n, data, duration):
    a = data.draw(st.integers(1, n))
    b = data.draw(st.integers(a, n))
    fi = frame_index(n, duration)
    for pred in (
        IntervalPrediction("frames", a, b, ParseMethod.STRICT_JSON),
        IntervalPrediction("seconds", float(a) * 1.7, float(b) * 1.7, ParseMethod.STRICT_JSON),
    ):
        s, e = to_seconds(pred, fi)
        assert 0 <= s <= e <= duration


def test_time_format_recorded():
    assert parse_interval("From 00:15 to 00:28.", 1, unit="seconds").time_format == "clock"
    assert parse_interval("start: 15, end: 28", 1, unit="seconds").time_format == "plain"
    assert parse_interval('{"start_frame": 2, "end_frame": 5}', 31).time_format is None
    assert parse_interval("nothing", 31).time_format is None
