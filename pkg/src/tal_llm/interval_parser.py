"""Pull a start/end interval out of a free-form LLM answer.

Stages run in a fixed order and the first one that yields a pair wins:

1. the whole response is JSON
2. JSON inside the first fenced code block
3. ``key: value`` pairs whose key is a start/end alias
4. free-text ranges ("Frame 7 to Frame 12", "frames 3-5", "from 4 to 9",
   "00:15 - 00:28")

When a stage sees several candidates, the one closest to the end of the text
is used. Nothing here raises on bad input; an answer without a usable
interval is ``Undefined``.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Literal

from tal_llm.dataset import FrameIndex

PARSER_VERSION = "1"

FRAME_START_KEYS = ("start_frame", "starting_frame", "begin_frame", "start", "begin", "from", "start_frame_number")
FRAME_END_KEYS = ("end_frame", "ending_frame", "stop_frame", "end", "stop", "to", "end_frame_number")
TIME_START_KEYS = ("start_time", "start_timestamp", "start_sec", "start_seconds", "begin_time")
TIME_END_KEYS = ("end_time", "end_timestamp", "end_sec", "end_seconds", "stop_time")

Kind = Literal["frames", "seconds", "undefined"]
Unit = Literal["frames", "seconds"]


class ParseMethod(str, enum.Enum):
    STRICT_JSON = "strict_json"
    FENCED_JSON = "fenced_json"
    KEYWORD_HEURISTIC = "keyword_heuristic"
    PATTERN_HEURISTIC = "pattern_heuristic"
    NONE = "none"


@dataclass(frozen=True)
class IntervalPrediction:
    kind: Kind
    start: float | None
    end: float | None
    method: ParseMethod
    raw_response: str = ""
    # for seconds: "clock" if any endpoint was written as mm:ss, else "plain"
    time_format: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if (self.kind == "undefined") != (self.method is ParseMethod.NONE):
            raise ValueError("undefined outcome iff method is NONE")
        if self.kind != "undefined" and not (self.start is not None and self.end is not None and self.start <= self.end):
            raise ValueError(f"bad interval {self.start}..{self.end}")

    @classmethod
    def undefined(cls, raw: str = "") -> "IntervalPrediction":
        return cls("undefined", None, None, ParseMethod.NONE, raw)

    @property
    def is_undefined(self) -> bool:
        return self.kind == "undefined"

    def outcome(self) -> dict[str, Any]:
        if self.is_undefined:
            return {"kind": "undefined"}
        return {"kind": self.kind, "start": self.start, "end": self.end}


# --- value coercion ----------------------------------------------------------

_CLOCK = r"\d{1,2}:\d{2}(?::\d{2})?(?:\.\d+)?"
_NUM = r"\d+(?:\.\d+)?"
_NUM_IN_STR = re.compile(rf"({_CLOCK}|{_NUM})")


def clock_to_seconds(text: str) -> float:
    parts = [float(p) for p in text.split(":")]
    total = 0.0
    for p in parts:
        total = total * 60 + p
    return total


def _coerce(value: Any) -> tuple[float, bool] | None:
    """(number, is_clock) from a JSON value or a matched token."""
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        number = float(value)
        return (number, False) if math.isfinite(number) and number >= 0 else None
    if isinstance(value, str):
        m = _NUM_IN_STR.search(value)
        if not m:
            return None
        token = m.group(1)
        if ":" in token:
            return clock_to_seconds(token), True
        number = float(token)
        return (number, False) if math.isfinite(number) else None
    return None


def _finish(
    start: tuple[float, bool],
    end: tuple[float, bool],
    seconds: bool,
    method: ParseMethod,
    raw: str,
    n_frames: int,
) -> IntervalPrediction:
    a, b = start[0], end[0]
    if seconds or start[1] or end[1]:
        a, b = max(0.0, a), max(0.0, b)
        if a > b:
            a, b = b, a
        fmt = "clock" if start[1] or end[1] else "plain"
        return IntervalPrediction("seconds", a, b, method, raw, time_format=fmt)
    fa = min(max(int(round(a)), 1), n_frames)
    fb = min(max(int(round(b)), 1), n_frames)
    if fa > fb:
        fa, fb = fb, fa
    return IntervalPrediction("frames", fa, fb, method, raw)


# --- JSON stages -------------------------------------------------------------


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-finite constant {name}")


def _loads(text: str) -> Any:
    return json.loads(text, parse_constant=_reject_constant)


def _norm_key(key: str) -> str:
    return re.sub(r"[\s\-]+", "_", key.strip().lower())


def _pair_from_json(obj: Any, unit: Unit, depth: int = 0) -> tuple[tuple[float, bool], tuple[float, bool], bool] | None:
    if depth > 8:
        return None
    if isinstance(obj, list):
        if len(obj) == 2:
            a, b = _coerce(obj[0]), _coerce(obj[1])
            if a and b:
                return a, b, unit == "seconds"
        for item in obj:
            found = _pair_from_json(item, unit, depth + 1)
            if found:
                return found
        return None
    if not isinstance(obj, dict):
        return None
    keys = {_norm_key(str(k)): v for k, v in obj.items()}
    for start_keys, end_keys, timed in (
        (TIME_START_KEYS, TIME_END_KEYS, True),
        (FRAME_START_KEYS, FRAME_END_KEYS, False),
    ):
        s = next((keys[k] for k in start_keys if k in keys), None)
        e = next((keys[k] for k in end_keys if k in keys), None)
        if s is not None and e is not None:
            a, b = _coerce(s), _coerce(e)
            if a and b:
                return a, b, timed or unit == "seconds"
    for value in obj.values():
        if isinstance(value, (dict, list)):
            found = _pair_from_json(value, unit, depth + 1)
            if found:
                return found
    return None


_FENCE = re.compile(r"```[ \t]*[A-Za-z0-9_+\-]*[ \t]*\r?\n?(.*?)```", re.DOTALL)
_TRAILING_COMMA = re.compile(r",\s*([\]}])")
_LINE_COMMENT = re.compile(r"//[^\n]*")


def _lenient_loads(text: str) -> Any:
    try:
        return _loads(text)
    except ValueError:
        pass
    repaired = _TRAILING_COMMA.sub(r"\1", _LINE_COMMENT.sub("", text))
    if "'" in repaired and '"' not in repaired:
        repaired = repaired.replace("'", '"')
    return _loads(repaired)


# --- text heuristics ---------------------------------------------------------

_SEP = r"[ \t]*(?:[:=]|\bis\b|\bat\b)[ \t]*"
_KV_VALUE = rf"[\"']?(?:frame[ \t]*#?[ \t]*)?(?P<val>{_CLOCK}|{_NUM})"
_START_KEY = r"start(?:ing)?[ \t_-]*(?:frame|time(?:stamp)?)?|begin(?:ning)?[ \t_-]*(?:frame|time)?"
_END_KEY = r"end(?:ing)?[ \t_-]*(?:frame|time(?:stamp)?)?|stop[ \t_-]*(?:frame|time)?"
_KV_START = re.compile(rf"(?<![A-Za-z])[\"']?(?P<key>{_START_KEY})(?![A-Za-z])[\"']?{_SEP}{_KV_VALUE}", re.IGNORECASE)
_KV_END = re.compile(rf"(?<![A-Za-z])[\"']?(?P<key>{_END_KEY})(?![A-Za-z])[\"']?{_SEP}{_KV_VALUE}", re.IGNORECASE)

_DASH = r"(?:-|–|—|to|through|until|till|and)"
_SEC_UNIT = r"(?:s|secs?|seconds?)\b"
_FRAME_RANGE = re.compile(
    rf"\bframes?[ \t]*#?[ \t]*(?P<a>\d+)[ \t]*{_DASH}[ \t]*(?:frames?[ \t]*#?[ \t]*)?(?P<b>\d+)(?![\d:.]\d)",
    re.IGNORECASE,
)
_FROM_TO = re.compile(
    rf"\bfrom[ \t]+(?:(?:the[ \t]+)?(?:frames?|second)[ \t]*#?[ \t]*)?(?P<a>{_NUM})[ \t]*(?:{_SEC_UNIT})?[ \t]*"
    rf"(?:to|until|till|through)[ \t]+(?:(?:frames?|second)[ \t]*#?[ \t]*)?(?P<b>{_NUM})(?![\d:])"
    rf"(?P<unit>[ \t]*{_SEC_UNIT})?",
    re.IGNORECASE,
)
_SECONDS_RANGE = re.compile(
    rf"(?<![\d.:])(?P<a>{_NUM})[ \t]*(?:{_SEC_UNIT})?[ \t]*{_DASH}[ \t]*(?P<b>{_NUM})[ \t]*{_SEC_UNIT}",
    re.IGNORECASE,
)
_CLOCK_RANGE = re.compile(rf"(?P<a>{_CLOCK})[ \t]*{_DASH}[ \t]*(?P<b>{_CLOCK})", re.IGNORECASE)
_BARE_RANGE = re.compile(rf"(?<![\d.:])(?P<a>{_NUM})[ \t]*(?:-|–|—|to)[ \t]*(?P<b>{_NUM})(?![\d:])")
_ANY_CLOCK = re.compile(rf"(?<![\d:]){_CLOCK}(?![\d:])")


def _token(text: str) -> tuple[float, bool] | None:
    if ":" in text:
        return clock_to_seconds(text), True
    number = float(text)
    return (number, False) if math.isfinite(number) else None


def _is_time_key(key: str) -> bool:
    return "time" in key.lower()


def _keyword_pair(text: str, unit: Unit) -> tuple[tuple[float, bool], tuple[float, bool], bool] | None:
    ends = list(_KV_END.finditer(text))
    if not ends:
        return None
    end = ends[-1]
    starts = list(_KV_START.finditer(text))
    if not starts:
        return None
    before = [m for m in starts if m.start() < end.start()]
    start = before[-1] if before else starts[-1]
    a, b = _token(start.group("val")), _token(end.group("val"))
    if not (a and b):
        return None
    timed = _is_time_key(start.group("key")) or _is_time_key(end.group("key"))
    return a, b, timed or unit == "seconds"


def _pattern_pair(text: str, unit: Unit) -> tuple[tuple[float, bool], tuple[float, bool], bool] | None:
    candidates: list[tuple[int, tuple[float, bool], tuple[float, bool], bool]] = []

    def add(m: re.Match, seconds: bool) -> None:
        a, b = _token(m.group("a")), _token(m.group("b"))
        if a and b:
            candidates.append((m.end(), a, b, seconds))

    if unit == "frames":
        for m in _FRAME_RANGE.finditer(text):
            add(m, False)
    for m in _FROM_TO.finditer(text):
        fractional = "." in m.group("a") or "." in m.group("b")
        add(m, unit == "seconds" or bool(m.group("unit")) or fractional)
    for m in _SECONDS_RANGE.finditer(text):
        add(m, True)
    for m in _CLOCK_RANGE.finditer(text):
        add(m, True)
    if unit == "seconds":
        for m in _BARE_RANGE.finditer(text):
            add(m, True)
    if candidates:
        _, a, b, seconds = max(candidates, key=lambda c: c[0])
        return a, b, seconds
    clocks = _ANY_CLOCK.findall(text)
    if len(clocks) >= 2:
        return (clock_to_seconds(clocks[-2]), True), (clock_to_seconds(clocks[-1]), True), True
    return None


def parse_interval(response_text: str, n_frames: int, unit: Unit = "frames") -> IntervalPrediction:
    """Best-effort interval extraction.

    ``unit="frames"`` is for the frame-numbered Stage-2 answers; frame values are
    clamped to ``[1, n_frames]``. ``unit="seconds"`` reads plain numbers as
    seconds (video-model answers). Clock times always give seconds.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    raw = response_text
    text = response_text.strip()

    try:
        found = _pair_from_json(_loads(text), unit) if text else None
    except (ValueError, RecursionError):
        found = None
    if found:
        return _finish(*found, ParseMethod.STRICT_JSON, raw, n_frames)

    fence = _FENCE.search(text)
    if fence:
        try:
            found = _pair_from_json(_lenient_loads(fence.group(1).strip()), unit)
        except (ValueError, RecursionError):
            found = None
        if found:
            return _finish(*found, ParseMethod.FENCED_JSON, raw, n_frames)

    found = _keyword_pair(text, unit)
    if found:
        return _finish(*found, ParseMethod.KEYWORD_HEURISTIC, raw, n_frames)

    found = _pattern_pair(text, unit)
    if found:
        return _finish(*found, ParseMethod.PATTERN_HEURISTIC, raw, n_frames)
    return IntervalPrediction.undefined(raw)


def render_prediction(pred: IntervalPrediction) -> str:
    """Canonical JSON answer for a prediction; parses back to the same outcome."""
    if pred.kind == "frames":
        return json.dumps({"start_frame": int(pred.start), "end_frame": int(pred.end)})
    if pred.kind == "seconds":
        return json.dumps({"start_time": pred.start, "end_time": pred.end})
    return "undefined"


def to_seconds(
    pred: IntervalPrediction, frame_index: FrameIndex | None = None, duration_sec: float | None = None
) -> tuple[float, float] | None:
    """Frames(a, b) covers seconds [a-1, b]; results are clamped to the video length."""
    if duration_sec is None:
        if frame_index is None:
            raise ValueError("need a frame index or a duration")
        duration_sec = frame_index.duration_sec
    if pred.is_undefined:
        return None
    if pred.kind == "frames":
        start, end = float(pred.start) - 1.0, float(pred.end)
    else:
        start, end = float(pred.start), float(pred.end)
    start = min(max(start, 0.0), duration_sec)
    end = min(max(end, 0.0), duration_sec)
    return (start, end) if start <= end else (end, start)
