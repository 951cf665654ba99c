"""Charades-STA style annotations, on-disk frame layout and evaluation subsets."""

from __future__ import annotations

import json
import math
import random
import re
import shlex
import subprocess
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

FRAME_PATTERN = re.compile(r"^frame_(\d{6})\.jpg$")
FRAME_NAME = "frame_{:06d}.jpg"
DEFAULT_EXTRACT_COMMAND = (
    "ffmpeg -hide_banner -loglevel error -i {input} -vf fps=1 -start_number 1 -q:v 2 {output_pattern}"
)


class DatasetError(ValueError):
    pass


class MalformedLine(DatasetError):
    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: malformed annotation{': ' + reason if reason else ''}")


class InvalidInterval(DatasetError):
    def __init__(self, line_no: int, start: float, end: float):
        self.line_no = line_no
        super().__init__(f"line {line_no}: invalid interval [{start}, {end}]")


class MissingFrames(DatasetError):
    def __init__(self, video_id: str, gaps: list[int]):
        self.video_id = video_id
        self.gaps = gaps
        super().__init__(f"{video_id}: missing frame indices {gaps}")


class EmptyVideo(DatasetError):
    def __init__(self, video_id: str):
        self.video_id = video_id
        super().__init__(f"{video_id}: no frames found")


class InsufficientVideos(DatasetError):
    pass


class ExtractionFailed(RuntimeError):
    def __init__(self, exit_code: int, stderr_excerpt: str):
        self.exit_code = exit_code
        self.stderr_excerpt = stderr_excerpt
        super().__init__(f"frame extraction exited with {exit_code}: {stderr_excerpt}")


@dataclass(frozen=True, order=True)
class Annotation:
    video_id: str
    gt_start_sec: float
    gt_end_sec: float
    query: str

    def __post_init__(self) -> None:
        if not self.video_id or any(c.isspace() for c in self.video_id):
            raise ValueError(f"video_id must be non-empty without whitespace: {self.video_id!r}")
        if not (0 <= self.gt_start_sec < self.gt_end_sec):
            raise ValueError(f"invalid interval [{self.gt_start_sec}, {self.gt_end_sec}]")
        if not self.query.strip() or "\n" in self.query or "\r" in self.query:
            raise ValueError("query must be a non-empty single line")

    @property
    def interval(self) -> tuple[float, float]:
        return (self.gt_start_sec, self.gt_end_sec)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FrameRef:
    index: int
    timestamp_sec: float
    image_path: Path


@dataclass(frozen=True)
class FrameIndex:
    video_id: str
    frames: tuple[FrameRef, ...]
    duration_sec: float

    def __post_init__(self) -> None:
        if not self.frames:
            raise EmptyVideo(self.video_id)
        for k, frame in enumerate(self.frames, start=1):
            if frame.index != k or frame.timestamp_sec != k - 1:
                raise ValueError(f"{self.video_id}: frame {frame.index} out of 1 fps order")
        if not self.duration_sec > 0:
            raise ValueError("duration_sec must be positive")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class SubsetSpec:
    n_videos: int
    seed: int = 0
    one_annotation_per_video: bool = True


def _parse_seconds(token: str, line_no: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise MalformedLine(line_no, f"not a number: {token!r}") from None
    if not math.isfinite(value):
        raise MalformedLine(line_no, f"not a finite number: {token!r}")
    return value


def parse_annotations(text: str) -> list[Annotation]:
    """Parse ``<video_id> <start> <end>##<sentence>`` lines; blank lines are skipped."""
    annotations = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if "##" not in line:
            raise MalformedLine(line_no, "missing '##' separator")
        info, query = line.split("##", 1)
        parts = info.split()
        if len(parts) != 3:
            raise MalformedLine(line_no, "expected '<video_id> <start> <end>' before '##'")
        query = query.strip()
        if not query:
            raise MalformedLine(line_no, "empty query")
        video_id = parts[0]
        start = _parse_seconds(parts[1], line_no)
        end = _parse_seconds(parts[2], line_no)
        if start < 0 or start >= end:
            raise InvalidInterval(line_no, start, end)
        annotations.append(Annotation(video_id, start, end, query))
    return annotations


def load_annotations(path: str | Path) -> list[Annotation]:
    return parse_annotations(Path(path).read_text(encoding="utf-8"))


def serialize_annotations(annotations: Iterable[Annotation]) -> str:
    return "".join(
        f"{a.video_id} {a.gt_start_sec!r} {a.gt_end_sec!r}##{a.query}\n" for a in annotations
    )


def build_frame_index(
    video_id: str, frames_dir: str | Path, duration_sec: float | None = None
) -> FrameIndex:
    """Index ``frames_dir/<video_id>/frame_NNNNNN.jpg`` files as a 1 fps sequence.

    ``duration_sec`` defaults to the number of frames.
    """
    video_dir = Path(frames_dir) / video_id
    indices: dict[int, Path] = {}
    if video_dir.is_dir():
        for path in video_dir.iterdir():
            m = FRAME_PATTERN.match(path.name)
            if m and path.is_file():
                indices[int(m.group(1))] = path
    if not indices:
        raise EmptyVideo(video_id)
    last = max(indices)
    gaps = [k for k in range(1, last + 1) if k not in indices]
    if gaps:
        raise MissingFrames(video_id, gaps)
    frames = tuple(FrameRef(k, float(k - 1), indices[k]) for k in range(1, last + 1))
    if duration_sec is None:
        duration_sec = float(last)
    return FrameIndex(video_id, frames, float(duration_sec))


def select_subset(annotations: Sequence[Annotation], spec: SubsetSpec) -> list[Annotation]:
    """Seeded draw of ``spec.n_videos`` videos, independent of input order.

    Output is ordered by video id.
    """
    by_video: dict[str, list[Annotation]] = defaultdict(list)
    for a in sorted(annotations):
        by_video[a.video_id].append(a)
    video_ids = sorted(by_video)
    if spec.n_videos < 1 or spec.n_videos > len(video_ids):
        raise InsufficientVideos(
            f"requested {spec.n_videos} videos, source has {len(video_ids)} distinct videos"
        )
    rng = random.Random(spec.seed)
    chosen = sorted(rng.sample(video_ids, spec.n_videos))
    subset = []
    for vid in chosen:
        if spec.one_annotation_per_video:
            subset.append(rng.choice(by_video[vid]))
        else:
            subset.extend(by_video[vid])
    return subset


def write_subset_manifest(annotations: Iterable[Annotation], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [a.to_dict() for a in annotations]
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def read_subset_manifest(path: str | Path) -> list[Annotation]:
    return [Annotation(**row) for row in json.loads(Path(path).read_text(encoding="utf-8"))]


def extract_frames(
    video_path: str | Path,
    out_dir: str | Path,
    command_template: str = DEFAULT_EXTRACT_COMMAND,
    video_id: str | None = None,
    timeout: float | None = None,
) -> FrameIndex:
    """Run an external decoder that writes 1 fps frames into ``out_dir/<video_id>/``.

    The template is split shell-style and must contain ``{input}`` and
    ``{output_pattern}``; the pattern expands to ``.../frame_%06d.jpg``.
    """
    if "{input}" not in command_template or "{output_pattern}" not in command_template:
        raise ValueError("command_template needs both {input} and {output_pattern} placeholders")
    video_path = Path(video_path)
    video_id = video_id or video_path.stem
    target = Path(out_dir) / video_id
    target.mkdir(parents=True, exist_ok=True)
    pattern = str(target / "frame_%06d.jpg")
    argv = [
        token.replace("{input}", str(video_path)).replace("{output_pattern}", pattern)
        for token in shlex.split(command_template)
    ]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except FileNotFoundError as exc:
        raise ExtractionFailed(127, str(exc)) from exc
    if proc.returncode != 0:
        raise ExtractionFailed(proc.returncode, (proc.stderr or "").strip()[-500:])
    return build_frame_index(video_id, out_dir)
