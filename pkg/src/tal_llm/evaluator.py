"""Temporal IoU, R@1 at IoU thresholds, and mIoU."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from tal_llm.dataset import Annotation

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)

Interval = tuple[float, float]


class EmptySampleSet(ValueError):
    pass


def temporal_iou(pred: Interval, gt: Interval) -> float:
    """Length of the intersection over the length of the union (set measure)."""
    ps, pe = pred
    gs, ge = gt
    if ps > pe or gs > ge:
        raise ValueError(f"intervals must have start <= end: {pred}, {gt}")
    inter = max(0.0, min(pe, ge) - max(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    if union <= 0:
        return 1.0 if (ps, pe) == (gs, ge) else 0.0
    return min(1.0, max(0.0, inter / union))


@dataclass(frozen=True)
class SampleResult:
    annotation: Annotation
    prediction_sec: Interval | None
    parse_method: str = "none"
    iou: float = field(default=-1.0)
    raw_response: str = field(default="", compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.prediction_sec is None:
            iou = 0.0
        else:
            iou = temporal_iou(self.prediction_sec, self.annotation.interval)
        object.__setattr__(self, "iou", iou)

    def to_record(self) -> dict:
        a = self.annotation
        return {
            "video_id": a.video_id,
            "query": a.query,
            "gt": [a.gt_start_sec, a.gt_end_sec],
            "pred": list(self.prediction_sec) if self.prediction_sec is not None else None,
            "iou": self.iou,
            "parse_method": self.parse_method,
        }

    @classmethod
    def from_record(cls, record: dict) -> "SampleResult":
        gs, ge = record["gt"]
        pred = record.get("pred")
        return cls(
            Annotation(record["video_id"], float(gs), float(ge), record["query"]),
            (float(pred[0]), float(pred[1])) if pred is not None else None,
            record.get("parse_method", "none"),
        )


@dataclass(frozen=True)
class MetricTable:
    thresholds: tuple[float, ...]
    recall_at: dict[float, float]
    mean_iou: float
    n_samples: int

    def __post_init__(self) -> None:
        values = [self.recall_at[t] for t in sorted(self.thresholds)]
        if any(a < b for a, b in zip(values, values[1:])):
            raise AssertionError(f"recall increases with threshold: {values}")

    def recall_mean(self) -> float:
        """Average of the R@IoU values (the alternate reading of mIoU, diagnostics only)."""
        return sum(self.recall_at.values()) / len(self.recall_at)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "thresholds": list(self.thresholds),
            "recall_at": {f"{t:g}": self.recall_at[t] for t in self.thresholds},
            "mean_iou": self.mean_iou,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricTable":
        thresholds = tuple(float(t) for t in data["thresholds"])
        recall = {float(k): float(v) for k, v in data["recall_at"].items()}
        return cls(thresholds, recall, float(data["mean_iou"]), int(data["n_samples"]))


def evaluate(samples: Sequence[SampleResult | float], thresholds: Iterable[float] = DEFAULT_THRESHOLDS) -> MetricTable:
    """R@1,IoU=m in percent for each threshold and mean IoU in percent.

    ``samples`` may be :class:`SampleResult` objects or bare IoU values.
    Undefined predictions already carry IoU 0.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if not samples:
        raise EmptySampleSet("no samples to evaluate")
    if not thresholds or any(not 0 < t < 1 for t in thresholds):
        raise ValueError(f"thresholds must lie in (0, 1): {thresholds}")
    ious = [s.iou if isinstance(s, SampleResult) else float(s) for s in samples]
    n = len(ious)
    recall = {t: 100.0 * sum(1 for v in ious if v >= t) / n for t in thresholds}
    return MetricTable(thresholds, recall, 100.0 * sum(ious) / n, n)


def normalized_interval(pred: Interval, duration_sec: float) -> tuple[float, float]:
    if duration_sec <= 0:
        raise ValueError("duration must be positive")
    s, e = pred
    return (min(max(s / duration_sec, 0.0), 1.0), min(max(e / duration_sec, 0.0), 1.0))


# --- files and reports -------------------------------------------------------


def write_samples_jsonl(results: Iterable[SampleResult], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
    return path


def read_samples_jsonl(path: str | Path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def _pct(value: float) -> str:
    return f"{value:.1f}"


def markdown_table(rows: Sequence[tuple[str, str, MetricTable]]) -> str:
    """Rows of (multimodal LLM, text-based LLM, metrics) as a markdown table.

    Columns are R@IoU per threshold then mIoU, one decimal place.
    """
    if not rows:
        raise ValueError("no rows")
    thresholds = rows[0][2].thresholds
    header = ["Multimodal LLM", "Text-based LLM", *[f"R@{t:g}" for t in thresholds], "mIoU"]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join(["---", "---"] + ["---:"] * (len(thresholds) + 1)) + "|",
    ]
    for stage1, stage2, table in rows:
        if table.thresholds != thresholds:
            raise ValueError("all rows must share thresholds")
        cells = [stage1, stage2, *[_pct(table.recall_at[t]) for t in thresholds], _pct(table.mean_iou)]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# Two-stage comparison on the 128-video subset with the activity prompt, as
# reported for the original method (R@0.3, R@0.5, R@0.7, mIoU). Reference only.
REFERENCE_SUBSET_RESULTS: tuple[tuple[str, str, tuple[float, float, float, float]], ...] = (
    ("LLaVA 7B", "GPT-4", (38.3, 14.8, 5.5, 26.3)),
    ("LLaVA 7B", "Qwen 14B", (36.7, 17.2, 5.5, 24.8)),
    ("LLaVA 7B", "Qwen 7B", (31.3, 10.9, 1.6, 20.3)),
    ("LLaVA 7B", "Gemma 7B", (35.2, 11.7, 3.1, 23.1)),
    ("LLaVA 16B", "GPT-4", (28.1, 12.5, 4.7, 21.3)),
    ("LLaVA 16B", "Qwen 14B", (24.2, 9.4, 1.6, 18.2)),
    ("LLaVA 16B", "Qwen 7B", (28.1, 11.7, 3.9, 19.2)),
    ("LLaVA 16B", "Gemma 7B", (29.7, 16.4, 3.1, 21.0)),
    ("GPT-4 Vision", "GPT-4", (44.5, 18.0, 7.0, 29.8)),
    ("GPT-4 Vision", "Qwen 14B", (33.6, 12.5, 4.7, 22.9)),
    ("GPT-4 Vision", "Qwen 7B", (40.6, 16.4, 5.5, 25.1)),
    ("GPT-4 Vision", "Gemma 7B", (28.9, 11.7, 3.9, 19.1)),
    ("Gemini 1.5 Pro (Video)", "", (34.4, 16.4, 7.8, 25.0)),
    ("ViGA (VGG)", "", (56.2, 35.2, 14.8, 35.8)),
    ("ViGA (I3D)", "", (72.7, 45.3, 15.6, 43.9)),
)


def reference_rows() -> list[tuple[str, str, MetricTable]]:
    rows = []
    for stage1, stage2, (r3, r5, r7, miou) in REFERENCE_SUBSET_RESULTS:
        table = MetricTable(DEFAULT_THRESHOLDS, {0.3: r3, 0.5: r5, 0.7: r7}, miou, 128)
        rows.append((stage1 + " [ref]", stage2, table))
    return rows
