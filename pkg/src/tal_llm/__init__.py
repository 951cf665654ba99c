"""Two-stage LLM temporal activity localization and its evaluation harness."""

from tal_llm.dataset import (
    Annotation,
    FrameIndex,
    FrameRef,
    SubsetSpec,
    build_frame_index,
    parse_annotations,
    select_subset,
)
from tal_llm.evaluator import MetricTable, evaluate, temporal_iou
from tal_llm.interval_parser import IntervalPrediction, ParseMethod, parse_interval, to_seconds

__all__ = [
    "Annotation",
    "FrameIndex",
    "FrameRef",
    "IntervalPrediction",
    "MetricTable",
    "ParseMethod",
    "SubsetSpec",
    "build_frame_index",
    "evaluate",
    "parse_annotations",
    "parse_interval",
    "select_subset",
    "temporal_iou",
    "to_seconds",
]

__version__ = "0.1.0"
