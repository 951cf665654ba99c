"""Independent reference implementations and mock backends used by the tests."""

from __future__ import annotations

import json
import random
import re
import string
from pathlib import Path

import numpy as np
from PIL import Image

from tal_llm.backends import ALL_CAPABILITIES, IMAGE, TEXT, VIDEO, ChatBackend, ChatRequest, ChatResponse
from tal_llm.dataset import Annotation


# --- IoU by counting 1 ms bins ------------------------------------------------


def iou_bins_ms(pairs_ms: np.ndarray, horizon_ms: int) -> np.ndarray:
    """IoU for integer-millisecond intervals by counting covered 1 ms bins.

    ``pairs_ms`` has shape (n, 4): pred_start, pred_end, gt_start, gt_end.
    A bin [t, t+1) belongs to [s, e) when s <= t < e.
    """
    t = np.arange(horizon_ms)[None, :]
    out = np.empty(len(pairs_ms))
    for lo in range(0, len(pairs_ms), 256):
        chunk = pairs_ms[lo : lo + 256]
        in_p = (chunk[:, 0:1] <= t) & (t < chunk[:, 1:2])
        in_g = (chunk[:, 2:3] <= t) & (t < chunk[:, 3:4])
        inter = (in_p & in_g).sum(axis=1)
        union = (in_p | in_g).sum(axis=1)
        same = (chunk[:, 0] == chunk[:, 2]) & (chunk[:, 1] == chunk[:, 3])
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(union > 0, inter / np.maximum(union, 1), np.where(same, 1.0, 0.0))
        out[lo : lo + 256] = ratio
    return out


# --- a second, deliberately simple interval extractor -------------------------

_REF_FRAME_TO_FRAME = re.compile(r"frame (\d+) to frame (\d+)", re.IGNORECASE)


def reference_frame_extractor(text: str, n_frames: int) -> tuple[int, int] | None:
    """Last "Frame A to Frame B" in the text, clamped and ordered; nothing else."""
    matches = _REF_FRAME_TO_FRAME.findall(text)
    if not matches:
        return None
    a, b = (min(max(int(x), 1), n_frames) for x in matches[-1])
    return (min(a, b), max(a, b))


# --- synthetic frames and datasets ---------------------------------------------


def write_frames(frames_root: Path, video_id: str, n: int, size: tuple[int, int] = (16, 12)) -> Path:
    """Solid-colour JPEGs, distinct per frame and per video."""
    video_dir = frames_root / video_id
    video_dir.mkdir(parents=True, exist_ok=True)
    salt = sum(map(ord, video_id)) % 200
    for k in range(1, n + 1):
        colour = ((k * 7) % 256, salt, (k * 13 + salt) % 256)
        Image.new("RGB", size, colour).save(video_dir / f"frame_{k:06d}.jpg", quality=95)
    return video_dir


# (video_id, n_frames, gt_start, gt_end, query)
SYNTHETIC_VIDEOS = (
    ("SYN01", 31, 3.0, 12.0, "person puts on shoes"),
    ("SYN02", 24, 5.4, 14.7, "person opens a door"),
    ("SYN03", 40, 0.0, 9.0, "person drinks from a cup"),
    ("SYN04", 18, 2.6, 10.2, "person sits on the sofa"),
    ("SYN05", 35, 20.0, 35.0, "person turns off the light"),
)


def synthetic_dataset(root: Path) -> tuple[Path, Path, list[Annotation]]:
    frames_root = root / "frames"
    annotations = []
    for vid, n, s, e, q in SYNTHETIC_VIDEOS:
        write_frames(frames_root, vid, n)
        annotations.append(Annotation(vid, s, e, q))
    ann_path = root / "annotations.txt"
    ann_path.write_text("".join(f"{a.video_id} {a.gt_start_sec} {a.gt_end_sec}##{a.query}\n" for a in annotations))
    return ann_path, frames_root, annotations


def synthetic_sta_file(n_videos: int = 1334, n_annotations: int = 3720, seed: int = 7) -> str:
    """Annotation text with the test split's video/annotation counts."""
    rng = random.Random(seed)
    ids = set()
    while len(ids) < n_videos:
        ids.add("".join(rng.choice(string.ascii_uppercase + string.digits) for _ in range(5)))
    ids = sorted(ids)
    per_video = [1] * n_videos
    for _ in range(n_annotations - n_videos):
        per_video[rng.randrange(n_videos)] += 1
    lines = []
    for vid, count in zip(ids, per_video):
        for _ in range(count):
            s = round(rng.uniform(0, 25), 1)
            e = round(s + rng.uniform(1, 12), 1)
            lines.append(f"{vid} {s} {e}##person does activity {rng.randrange(1000)}.")
    rng.shuffle(lines)
    return "\n".join(lines) + "\n"


# --- oracle backends -------------------------------------------------------------

_FRAME_FILE = re.compile(r"frame_(\d{6})\.jpg$")


class OracleStage1(ChatBackend):
    """Describes a frame with the query verbatim exactly when the frame's second
    is mostly inside that query's ground truth."""

    def __init__(self, annotations, model_id: str = "oracle-vision"):
        self.model_id = model_id
        self.capabilities = frozenset({TEXT, IMAGE})
        self.by_video: dict[str, list[Annotation]] = {}
        for a in annotations:
            self.by_video.setdefault(a.video_id, []).append(a)

    def generate(self, request: ChatRequest) -> ChatResponse:
        path = Path(request.image.path)
        k = int(_FRAME_FILE.search(path.name).group(1))
        mid = k - 0.5
        candidates = self.by_video.get(path.parent.name, [])
        in_prompt = [a for a in candidates if a.query in request.text]
        relevant = in_prompt or candidates
        hits = [a.query for a in relevant if a.gt_start_sec <= mid <= a.gt_end_sec]
        text = "A person is standing in a room."
        if hits:
            text += " The person: " + "; ".join(hits) + "."
        return ChatResponse(text, self.model_id)


_LINE = re.compile(r"^\* Frame (\d+): (.*)$", re.MULTILINE)
_QUERY = re.compile(r"The action (.*) has occurred in the video clip\.")


class OracleStage2(ChatBackend):
    """Answers with the contiguous span of frames whose description names the query."""

    def __init__(self, model_id: str = "oracle-text"):
        self.model_id = model_id
        self.capabilities = frozenset({TEXT})

    def generate(self, request: ChatRequest) -> ChatResponse:
        query = _QUERY.search(request.text).group(1)
        frames = [int(k) for k, text in _LINE.findall(request.text) if query in text]
        if not frames:
            return ChatResponse("I cannot tell from these descriptions.", self.model_id)
        return ChatResponse(json.dumps({"start_frame": min(frames), "end_frame": max(frames)}), self.model_id)


def universal_echo(model_id: str = "echo") -> ChatBackend:
    from tal_llm.backends import EchoBackend

    return EchoBackend(model_id, ALL_CAPABILITIES)


# --- factories resolvable as ``py:oracles:<name>:<arg>`` from the CLI ----------------

LIVE_CALLS = {"vision": 0, "text": 0, "video": 0}


class _Tally(ChatBackend):
    def __init__(self, inner: ChatBackend, key: str):
        self.inner, self.key = inner, key
        self.model_id, self.capabilities = inner.model_id, inner.capabilities

    def generate(self, request: ChatRequest) -> ChatResponse:
        LIVE_CALLS[self.key] += 1
        return self.inner.generate(request)


def oracle_vision(annotations_path: str) -> ChatBackend:
    from tal_llm.dataset import load_annotations

    return _Tally(OracleStage1(load_annotations(annotations_path)), "vision")


def oracle_text(model_id: str = "oracle-text") -> ChatBackend:
    return _Tally(OracleStage2(model_id), "text")


class OracleVideo(ChatBackend):
    """Answers the video prompt with the ground-truth seconds for its query."""

    def __init__(self, annotations, model_id: str = "oracle-video"):
        self.model_id = model_id
        self.capabilities = frozenset({TEXT, VIDEO})
        self.by_query = {(a.video_id, a.query): a for a in annotations}

    def generate(self, request: ChatRequest) -> ChatResponse:
        query = _QUERY.search(request.text).group(1)
        vid = Path(request.video).stem
        a = self.by_query[(vid, query)]
        return ChatResponse(f"start: {a.gt_start_sec}, end: {a.gt_end_sec}", self.model_id)


def oracle_video(annotations_path: str) -> ChatBackend:
    from tal_llm.dataset import load_annotations

    return _Tally(OracleVideo(load_annotations(annotations_path)), "video")


def tuning_vision(model_id: str = "tuning-vision") -> ChatBackend:
    """Fixed description and two Q&A pairs for every frame."""
    from tal_llm.backends import ScriptedBackend

    qa = json.dumps([{"question": "What is the person doing?", "answer": "Standing."},
                     {"question": "Is anything held?", "answer": "No."}])

    def fn(request: ChatRequest) -> str:
        return qa if "question and answer" in request.text else "A person stands in a room."

    return ScriptedBackend(fn, model_id=model_id, capabilities={TEXT, IMAGE})
