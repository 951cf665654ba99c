"""Two-stage grounding runs, the single-stage video variant, and tuning-data generation."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import random
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from tal_llm.backends import (
    IMAGE,
    VIDEO,
    BackendError,
    CachedBackend,
    CapabilityMismatch,
    ChatBackend,
    ChatRequest,
    ChatResponse,
    ContextOverflow,
    ImageInput,
    ResponseCache,
    RetryPolicy,
    complete,
    complete_batch,
)
from tal_llm.dataset import (
    Annotation,
    FrameIndex,
    FrameRef,
    SubsetSpec,
    build_frame_index,
    select_subset,
    write_subset_manifest,
)
from tal_llm.evaluator import (
    DEFAULT_THRESHOLDS,
    MetricTable,
    SampleResult,
    evaluate,
    markdown_table,
    write_samples_jsonl,
)
from tal_llm.interval_parser import PARSER_VERSION, IntervalPrediction, parse_interval, to_seconds
from tal_llm.prompting import (
    FrameDescription,
    PromptStrategy,
    TemplateSet,
    load_templates,
    render_stage1,
    render_stage2,
    render_tuning_prompts,
    render_video_prompt,
)

logger = logging.getLogger(__name__)

NO_DESCRIPTION = "(no description available)"


@dataclass
class RunConfig:
    strategy: PromptStrategy
    stage1_backend: ChatBackend
    stage2_backend: ChatBackend
    frames_root: Path | None = None
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    subset: SubsetSpec | None = None
    max_in_flight: int = 4
    cache_dir: Path | None = None
    out_dir: Path | None = None
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    templates: TemplateSet = field(default_factory=load_templates)
    stage1_max_tokens: int = 512
    stage2_max_tokens: int = 512
    temperature: float = 0.0
    image_long_edge: int | None = 512
    stage1_label: str | None = None
    stage2_label: str | None = None
    durations: dict[str, float] | None = None

    def __post_init__(self) -> None:
        self.strategy = PromptStrategy(self.strategy)
        self.thresholds = tuple(self.thresholds)
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")

    def check_two_stage(self) -> None:
        if IMAGE not in self.stage1_backend.capabilities:
            raise CapabilityMismatch(f"stage-1 backend {self.stage1_backend.model_id!r} cannot take images")

    def describe(self) -> dict[str, Any]:
        """Result-relevant settings; output and cache locations are left out."""
        return {
            "strategy": self.strategy.value,
            "stage1": {"label": self.stage1_label or self.stage1_backend.model_id, "model_id": self.stage1_backend.model_id},
            "stage2": {"label": self.stage2_label or self.stage2_backend.model_id, "model_id": self.stage2_backend.model_id},
            "thresholds": list(self.thresholds),
            "subset": None if self.subset is None else vars(self.subset).copy(),
            "stage1_max_tokens": self.stage1_max_tokens,
            "stage2_max_tokens": self.stage2_max_tokens,
            "temperature": self.temperature,
            "image_long_edge": self.image_long_edge,
            "parser_version": PARSER_VERSION,
        }


@dataclass
class EvalReport:
    samples: list[SampleResult]
    metrics: MetricTable
    diagnostics: dict[str, Any]
    files: dict[str, Path] = field(default_factory=dict)


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


class Pipeline:
    """Holds the wrapped backends, the per-run description memo and counters."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.stage1 = self._wrap(config.stage1_backend)
        self.stage2 = self._wrap(config.stage2_backend)
        self._memo: dict[tuple, str] = {}
        self._lock = threading.Lock()
        self.diagnostics: dict[str, Any] = {
            "sentinel_descriptions": 0,
            "stage1_errors": [],
            "stage2_errors": [],
            "context_overflows": [],
            "undefined_predictions": 0,
            "time_formats": {"clock": 0, "plain": 0},
        }

    def _wrap(self, backend: ChatBackend) -> ChatBackend:
        if self.config.cache_dir is None:
            return backend
        return CachedBackend(backend, ResponseCache(self.config.cache_dir))

    def _frame_request(self, frame: FrameRef, text: str) -> ChatRequest:
        return ChatRequest(
            model_id=self.stage1.model_id,
            text=text,
            image=ImageInput(Path(frame.image_path), self.config.image_long_edge),
            max_tokens=self.config.stage1_max_tokens,
            temperature=self.config.temperature,
        )

    def run_stage1(self, annotation: Annotation, frame_index: FrameIndex) -> list[FrameDescription]:
        """One description per frame, in frame order.

        General-prompt descriptions are shared across annotations of a video;
        activity prompts embed the query, so every (frame, query) pair is asked.
        """
        cfg = self.config
        general = cfg.strategy is PromptStrategy.GENERAL
        text = render_stage1(cfg.strategy, None if general else annotation.query, cfg.templates)
        template_digest = cfg.templates.digest(cfg.strategy.value)
        texts: dict[int, str] = {}
        pending: list[FrameRef] = []
        for frame in frame_index.frames:
            key = (frame_index.video_id, frame.index, template_digest, self.stage1.model_id)
            if general and key in self._memo:
                texts[frame.index] = self._memo[key]
            else:
                pending.append(frame)
        requests = [self._frame_request(f, text) for f in pending]
        results = complete_batch(self.stage1, requests, cfg.max_in_flight, retry=cfg.retry)
        for frame, result in zip(pending, results):
            if isinstance(result, BackendError):
                logger.warning("%s frame %d: %s", frame_index.video_id, frame.index, result)
                with self._lock:
                    self.diagnostics["sentinel_descriptions"] += 1
                    self.diagnostics["stage1_errors"].append(
                        {"video_id": frame_index.video_id, "frame": frame.index, "error": str(result)}
                    )
                texts[frame.index] = NO_DESCRIPTION
                continue
            texts[frame.index] = result.text
            if general:
                key = (frame_index.video_id, frame.index, template_digest, self.stage1.model_id)
                self._memo[key] = result.text
        return [FrameDescription(k, texts[k]) for k in range(1, frame_index.n_frames + 1)]

    def run_stage2(
        self, descriptions: Sequence[FrameDescription], annotation: Annotation, frame_index: FrameIndex
    ) -> SampleResult:
        cfg = self.config
        prompt = render_stage2(descriptions, annotation.query, cfg.templates)
        request = ChatRequest(
            model_id=self.stage2.model_id,
            text=prompt.text,
            max_tokens=cfg.stage2_max_tokens,
            temperature=cfg.temperature,
        )
        try:
            response = complete(self.stage2, request, retry=cfg.retry)
        except ContextOverflow as exc:
            exc.prompt_chars = len(prompt.text)
            raise
        pred = parse_interval(response.text, frame_index.n_frames, unit="frames")
        return self._score(annotation, pred, to_seconds(pred, frame_index))

    def run_video_variant(
        self, annotation: Annotation, video_ref: str, backend: ChatBackend, duration_sec: float | None = None
    ) -> SampleResult:
        if VIDEO not in backend.capabilities:
            raise CapabilityMismatch(f"backend {backend.model_id!r} cannot take video input")
        cfg = self.config
        request = ChatRequest(
            model_id=backend.model_id,
            text=render_video_prompt(annotation.query, cfg.templates),
            video=video_ref,
            max_tokens=cfg.stage2_max_tokens,
            temperature=cfg.temperature,
        )
        response = complete(backend, request, retry=cfg.retry)
        pred = parse_interval(response.text, 1, unit="seconds")
        if pred.time_format is not None:
            with self._lock:
                self.diagnostics["time_formats"][pred.time_format] += 1
        duration = duration_sec if duration_sec is not None else math.inf
        return self._score(annotation, pred, to_seconds(pred, duration_sec=duration))

    def _score(
        self, annotation: Annotation, pred: IntervalPrediction, interval: tuple[float, float] | None
    ) -> SampleResult:
        if pred.is_undefined:
            with self._lock:
                self.diagnostics["undefined_predictions"] += 1
        return SampleResult(annotation, interval, pred.method.value, raw_response=pred.raw_response)

    def _failed(self, annotation: Annotation, exc: BackendError) -> SampleResult:
        kind = "context_overflow" if isinstance(exc, ContextOverflow) else "backend_error"
        entry = {"video_id": annotation.video_id, "query": annotation.query, "error": str(exc)}
        if isinstance(exc, ContextOverflow):
            entry["prompt_chars"] = exc.prompt_chars
            self.diagnostics["context_overflows"].append(entry)
        else:
            self.diagnostics["stage2_errors"].append(entry)
        return SampleResult(annotation, None, kind)

    def frame_index_for(self, video_id: str) -> FrameIndex:
        cfg = self.config
        if cfg.frames_root is None:
            raise ValueError("frames_root is required for the two-stage run")
        duration = (cfg.durations or {}).get(video_id)
        return build_frame_index(video_id, cfg.frames_root, duration)

    def run_experiment(self, annotations: Sequence[Annotation]) -> EvalReport:
        cfg = self.config
        cfg.check_two_stage()
        if cfg.subset is not None:
            annotations = select_subset(annotations, cfg.subset)
        annotations = list(annotations)
        indexes: dict[str, FrameIndex] = {}
        for a in annotations:
            if a.video_id not in indexes:
                indexes[a.video_id] = self.frame_index_for(a.video_id)
        results = []
        for a in annotations:
            frame_index = indexes[a.video_id]
            descriptions = self.run_stage1(a, frame_index)
            try:
                results.append(self.run_stage2(descriptions, a, frame_index))
            except BackendError as exc:
                logger.warning("%s %r: stage 2 failed: %s", a.video_id, a.query, exc)
                results.append(self._failed(a, exc))
        return self._report(results, annotations)

    def run_video_experiment(
        self, annotations: Sequence[Annotation], backend: ChatBackend, video_ref: Callable[[Annotation], str]
    ) -> EvalReport:
        cfg = self.config
        if VIDEO not in backend.capabilities:
            raise CapabilityMismatch(f"backend {backend.model_id!r} cannot take video input")
        backend = self._wrap(backend)
        if cfg.subset is not None:
            annotations = select_subset(annotations, cfg.subset)
        annotations = list(annotations)
        results = []
        for a in annotations:
            duration = (cfg.durations or {}).get(a.video_id)
            if duration is None and cfg.frames_root is not None:
                try:
                    duration = self.frame_index_for(a.video_id).duration_sec
                except ValueError:
                    duration = None
            try:
                results.append(self.run_video_variant(a, video_ref(a), backend, duration))
            except BackendError as exc:
                results.append(self._failed(a, exc))
        return self._report(results, annotations, video=True)

    def _report(self, results: list[SampleResult], annotations: list[Annotation], video: bool = False) -> EvalReport:
        cfg = self.config
        metrics = evaluate(results, cfg.thresholds)
        diagnostics = {
            "undefined_predictions": self.diagnostics["undefined_predictions"],
            "sentinel_descriptions": self.diagnostics["sentinel_descriptions"],
            "stage2_failures": len(self.diagnostics["stage2_errors"]) + len(self.diagnostics["context_overflows"]),
            "context_overflows": self.diagnostics["context_overflows"],
            "recall_mean_diagnostic": metrics.recall_mean(),
        }
        if video:
            diagnostics["time_formats"] = dict(self.diagnostics["time_formats"])
        report = EvalReport(results, metrics, diagnostics)
        if cfg.out_dir is not None:
            report.files = self._write(report, annotations, video)
        return report

    def _write(self, report: EvalReport, annotations: list[Annotation], video: bool) -> dict[str, Path]:
        cfg = self.config
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "samples": write_samples_jsonl(report.samples, out / "samples.jsonl"),
            "manifest": write_subset_manifest(annotations, out / "subset_manifest.json"),
        }
        with (out / "responses.jsonl").open("w", encoding="utf-8") as fh:
            for r in report.samples:
                row = {"video_id": r.annotation.video_id, "query": r.annotation.query,
                       "parse_method": r.parse_method, "response": r.raw_response}
                fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
        files["responses"] = out / "responses.jsonl"

        described = cfg.describe()
        stage1_label = described["stage1"]["label"]
        stage2_label = "" if video else described["stage2"]["label"]
        if video:
            described["mode"] = "video"
        template_names = ["video"] if video else [cfg.strategy.value, "stage2"]
        summary = {
            "label": {"multimodal": stage1_label, "text": stage2_label},
            "metrics": report.metrics.to_dict(),
            "diagnostics": report.diagnostics,
            "provenance": {
                "config": described,
                "config_sha256": _sha256(_canonical(described)),
                "template_sha256": {n: cfg.templates.digest(n) for n in template_names},
                "annotations_sha256": _sha256(_canonical([a.to_dict() for a in annotations])),
            },
        }
        files["summary"] = out / "summary.json"
        files["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
        files["markdown"] = out / "summary.md"
        files["markdown"].write_text(markdown_table([(stage1_label, stage2_label, report.metrics)]), encoding="utf-8")

        stats = {"stage1": _backend_stats(self.stage1), "stage2": _backend_stats(self.stage2),
                 "stage1_errors": self.diagnostics["stage1_errors"],
                 "stage2_errors": self.diagnostics["stage2_errors"]}
        files["run_stats"] = out / "run_stats.json"
        files["run_stats"].write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return files


def _backend_stats(backend: ChatBackend) -> dict[str, Any]:
    if isinstance(backend, CachedBackend):
        return {"model_id": backend.model_id, "cache_hits": backend.hits, "cache_misses": backend.misses}
    return {"model_id": backend.model_id}


# Module-level entry points; each builds a fresh Pipeline (no memo sharing).


def run_stage1(annotation: Annotation, frame_index: FrameIndex, config: RunConfig) -> list[FrameDescription]:
    return Pipeline(config).run_stage1(annotation, frame_index)


def run_stage2(
    descriptions: Sequence[FrameDescription], annotation: Annotation, frame_index: FrameIndex, config: RunConfig
) -> SampleResult:
    return Pipeline(config).run_stage2(descriptions, annotation, frame_index)


def run_video_variant(
    annotation: Annotation, video_ref: str, config: RunConfig, backend: ChatBackend | None = None,
    duration_sec: float | None = None,
) -> SampleResult:
    return Pipeline(config).run_video_variant(annotation, video_ref, backend or config.stage1_backend, duration_sec)


def run_experiment(annotations: Sequence[Annotation], config: RunConfig) -> EvalReport:
    return Pipeline(config).run_experiment(annotations)


def rescore(records: Iterable[dict], thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> tuple[list[SampleResult], MetricTable]:
    """Recompute IoU and metrics from per-sample records (``eval`` subcommand)."""
    results = [SampleResult.from_record(r) for r in records]
    return results, evaluate(results, thresholds)


# --- instruction-tuning data ---------------------------------------------------


class Role(str, enum.Enum):
    HUMAN = "human"
    MODEL = "model"


# conversation-JSON loaders (LLaVA and friends) expect "gpt" for the model turn
_WIRE_ROLE = {Role.HUMAN: "human", Role.MODEL: "gpt"}
IMAGE_TOKEN = "<image>"


@dataclass(frozen=True)
class TuningRecord:
    id: str
    image: str
    conversations: tuple[tuple[Role, str], ...]

    def __post_init__(self) -> None:
        turns = self.conversations
        if len(turns) < 2 or len(turns) % 2:
            raise ValueError("a record needs an even number of turns, at least two")
        for i, (role, _) in enumerate(turns):
            if role is not (Role.HUMAN if i % 2 == 0 else Role.MODEL):
                raise ValueError("turns must alternate human/model starting with human")

    def to_dict(self) -> dict:
        convs = []
        for i, (role, text) in enumerate(self.conversations):
            value = f"{IMAGE_TOKEN}\n{text}" if i == 0 else text
            convs.append({"from": _WIRE_ROLE[role], "value": value})
        return {"id": self.id, "image": self.image, "conversations": convs}


class QAParseError(ValueError):
    pass


_QA_TEXT = re.compile(
    r"(?:^|\n)\s*(?:\d+[.)]\s*)?(?:\*\*)?Q(?:uestion)?\s*\d*(?:\*\*)?\s*[:.]\s*(?:\*\*)?\s*(?P<q>.+?)\s*\n\s*(?:\*\*)?A(?:nswer)?\s*\d*(?:\*\*)?\s*[:.]\s*(?:\*\*)?\s*(?P<a>.+?)(?=\n\s*(?:\d+[.)]\s*)?(?:\*\*)?Q(?:uestion)?\s*\d*(?:\*\*)?\s*[:.]|\Z)",
    re.DOTALL | re.IGNORECASE,
)
_FENCED = re.compile(r"```[ \t]*[A-Za-z]*[ \t]*\r?\n?(.*?)```", re.DOTALL)


def parse_qa_pairs(text: str) -> list[tuple[str, str]]:
    """Question/answer pairs from a JSON array (bare or fenced) or ``Q:``/``A:`` text."""
    candidates = [text.strip()]
    fence = _FENCED.search(text)
    if fence:
        candidates.append(fence.group(1).strip())
    for candidate in candidates:
        try:
            data = json.loads(candidate)
        except ValueError:
            continue
        if isinstance(data, dict):
            data = next((v for v in data.values() if isinstance(v, list)), None)
        if not isinstance(data, list):
            raise QAParseError("JSON answer is not a list of pairs")
        pairs = []
        for item in data:
            if not isinstance(item, dict):
                raise QAParseError("pair is not an object")
            q = item.get("question", item.get("q"))
            a = item.get("answer", item.get("a"))
            if not isinstance(q, str) or not isinstance(a, str) or not q.strip() or not a.strip():
                raise QAParseError("pair without question/answer text")
            pairs.append((q.strip(), a.strip()))
        return pairs
    pairs = [(m.group("q").strip(), m.group("a").strip()) for m in _QA_TEXT.finditer(text)]
    if not pairs:
        raise QAParseError("no question/answer pairs found")
    return pairs


def frame_record_id(frame: FrameRef) -> str:
    path = Path(frame.image_path)
    return f"{path.parent.name}_{frame.index:06d}"


def generate_tuning_records(
    frames: Sequence[FrameRef],
    vision_backend: ChatBackend,
    qa_parser: Callable[[str], list[tuple[str, str]]] = parse_qa_pairs,
    templates: TemplateSet | None = None,
    image_root: str | Path | None = None,
    max_in_flight: int = 4,
    retry: RetryPolicy | None = None,
    max_tokens: int = 1024,
    image_long_edge: int | None = 512,
) -> tuple[list[TuningRecord], list[dict]]:
    """One conversation record per frame: description turn pair, then parsed Q&A pairs.

    Returns ``(records, diagnostics)``. A frame whose description request fails
    is dropped; a malformed Q&A answer leaves a description-only record.
    """
    if IMAGE not in vision_backend.capabilities:
        raise CapabilityMismatch(f"backend {vision_backend.model_id!r} cannot take images")
    templates = templates or load_templates()
    requests = []
    for frame in frames:
        desc_prompt, qa_prompt = render_tuning_prompts(frame, templates)
        image = ImageInput(Path(frame.image_path), image_long_edge)
        for prompt in (desc_prompt, qa_prompt):
            requests.append(ChatRequest(vision_backend.model_id, prompt, image=image, max_tokens=max_tokens))
    responses = complete_batch(vision_backend, requests, max_in_flight, retry=retry)
    records, diagnostics = [], []
    for i, frame in enumerate(frames):
        desc_prompt, qa_prompt = render_tuning_prompts(frame, templates)
        desc, qa = responses[2 * i], responses[2 * i + 1]
        rid = frame_record_id(frame)
        if isinstance(desc, BackendError) or not desc.text.strip():
            diagnostics.append({"id": rid, "error": f"description failed: {desc if isinstance(desc, BackendError) else 'empty'}"})
            continue
        turns: list[tuple[Role, str]] = [(Role.HUMAN, desc_prompt), (Role.MODEL, desc.text.strip())]
        if isinstance(qa, BackendError):
            diagnostics.append({"id": rid, "error": f"Q&A request failed: {qa}"})
        else:
            try:
                for q, a in qa_parser(qa.text):
                    turns += [(Role.HUMAN, q), (Role.MODEL, a)]
            except ValueError as exc:
                diagnostics.append({"id": rid, "error": f"Q&A parse failed: {exc}"})
        path = Path(frame.image_path)
        image = str(path.relative_to(image_root)) if image_root is not None else f"{path.parent.name}/{path.name}"
        records.append(TuningRecord(rid, image, tuple(turns)))
    return records, diagnostics


def write_tuning_records(records: Iterable[TuningRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.to_dict() for r in records], indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def sample_frames(indexes: Sequence[FrameIndex], n_frames: int, seed: int = 0) -> list[FrameRef]:
    """Seeded draw of frames across videos, returned in (video, frame) order."""
    pool = [(fi.video_id, f) for fi in sorted(indexes, key=lambda fi: fi.video_id) for f in fi.frames]
    if n_frames > len(pool):
        raise ValueError(f"asked for {n_frames} frames, only {len(pool)} available")
    chosen = random.Random(seed).sample(range(len(pool)), n_frames)
    return [pool[i][1] for i in sorted(chosen)]
