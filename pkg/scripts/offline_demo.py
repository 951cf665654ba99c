#!/usr/bin/env python3
"""Offline walk-through of the two-stage pipeline on generated data.

Builds a handful of solid-colour "videos", answers Stage 1 with a backend
that peeks at the ground truth, and answers Stage 2 by reading the
descriptions back. Useful as a smoke test of the plumbing and output files
without any model endpoint.

    python3 scripts/offline_demo.py --out-dir runs/demo
"""

from __future__ import annotations

import argparse
import json
import re
import tempfile
from pathlib import Path

from PIL import Image

from tal_llm.backends import IMAGE, TEXT, ScriptedBackend
from tal_llm.dataset import Annotation, serialize_annotations
from tal_llm.evaluator import markdown_table
from tal_llm.pipeline import Pipeline, RunConfig

VIDEOS = [
    ("DEMO1", 30, Annotation("DEMO1", 4.0, 13.0, "person opens the fridge")),
    ("DEMO2", 22, Annotation("DEMO2", 10.5, 21.0, "person sits on a chair")),
    ("DEMO3", 41, Annotation("DEMO3", 0.0, 6.2, "person picks up a book")),
]


def make_frames(root: Path) -> None:
    for vid, n, _ in VIDEOS:
        d = root / vid
        d.mkdir(parents=True, exist_ok=True)
        for k in range(1, n + 1):
            Image.new("RGB", (64, 48), (k * 5 % 256, 90, 160)).save(d / f"frame_{k:06d}.jpg")


def peeking_vision(annotations: list[Annotation]) -> ScriptedBackend:
    by_video = {a.video_id: a for a in annotations}

    def describe(request):
        path = Path(request.image.path)
        k = int(re.search(r"(\d+)\.jpg$", path.name).group(1))
        a = by_video[path.parent.name]
        if a.gt_start_sec <= k - 0.5 <= a.gt_end_sec:
            return f"The person is doing this: {a.query}."
        return "A person stands in a kitchen."

    return ScriptedBackend(describe, model_id="peeking-vision", capabilities={TEXT, IMAGE})


def reading_text() -> ScriptedBackend:
    def answer(request):
        query = re.search(r"The action (.*) has occurred", request.text).group(1)
        hits = [int(k) for k, d in re.findall(r"^\* Frame (\d+): (.*)$", request.text, re.M) if query in d]
        if not hits:
            return "I am not able to determine this."
        return "```json\n" + json.dumps({"start_frame": min(hits), "end_frame": max(hits)}) + "\n```"

    return ScriptedBackend(answer, model_id="reading-text")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out-dir", type=Path, default=Path("runs/demo"))
    parser.add_argument("--strategy", choices=("activity", "general"), default="activity")
    args = parser.parse_args()

    annotations = [a for _, _, a in VIDEOS]
    with tempfile.TemporaryDirectory() as tmp:
        frames_root = Path(tmp) / "frames"
        make_frames(frames_root)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "annotations.txt").write_text(serialize_annotations(annotations), encoding="utf-8")
        config = RunConfig(
            strategy=args.strategy,
            stage1_backend=peeking_vision(annotations),
            stage2_backend=reading_text(),
            frames_root=frames_root,
            out_dir=args.out_dir,
            stage1_label="peeking-vision",
            stage2_label="reading-text",
        )
        report = Pipeline(config).run_experiment(annotations)

    print(markdown_table([("peeking-vision", "reading-text", report.metrics)]), end="")
    for s in report.samples:
        print(f"{s.annotation.video_id}  gt={s.annotation.interval}  pred={s.prediction_sec}  iou={s.iou:.3f}")
    print(f"outputs in {args.out_dir}")


if __name__ == "__main__":
    main()
