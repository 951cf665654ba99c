"""Command line: ``tal-llm <subcommand>`` (or ``python -m tal_llm``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from tal_llm import backends as bk
from tal_llm.dataset import (
    DEFAULT_EXTRACT_COMMAND,
    DatasetError,
    ExtractionFailed,
    SubsetSpec,
    build_frame_index,
    extract_frames,
    load_annotations,
)
from tal_llm.evaluator import DEFAULT_THRESHOLDS, MetricTable, markdown_table, read_samples_jsonl, reference_rows
from tal_llm.interval_parser import parse_interval
from tal_llm.pipeline import (
    Pipeline,
    RunConfig,
    generate_tuning_records,
    rescore,
    sample_frames,
    write_tuning_records,
)
from tal_llm.prompting import load_templates

logger = logging.getLogger("tal_llm")


class ConfigError(Exception):
    pass


def _thresholds(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad thresholds: {text!r}") from None
    if any(not 0 < t < 1 for t in values):
        raise argparse.ArgumentTypeError("thresholds must lie in (0, 1)")
    return values


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--annotations", type=Path, required=True, help="Charades-STA style annotation file")
    p.add_argument("--frames-root", type=Path, help="<root>/<video_id>/frame_NNNNNN.jpg")
    p.add_argument("--subset-n", type=int, help="evaluate a seeded subset of this many videos")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--all-annotations", action="store_true", help="keep every annotation of a subset video")
    p.add_argument("--thresholds", type=_thresholds, default=DEFAULT_THRESHOLDS)
    p.add_argument("--cache-dir", type=Path)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--max-in-flight", type=_positive, default=4)
    p.add_argument("--max-attempts", type=_positive, default=4)
    p.add_argument("--replay-dir", type=Path, help="replay (or record) backend responses here")
    p.add_argument("--replay-mode", choices=("replay", "record"), default="replay")
    p.add_argument("--templates-dir", type=Path, help="override prompt templates")
    p.add_argument("--durations", type=Path, help="JSON map video_id -> duration in seconds")
    p.add_argument("--stage1-label")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tal-llm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="two-stage experiment")
    _add_common(p)
    p.add_argument("--strategy", choices=("activity", "general"), default="activity")
    p.add_argument("--stage1", required=True, help="image-capable backend spec")
    p.add_argument("--stage2", required=True, help="text backend spec")
    p.add_argument("--stage2-label")

    p = sub.add_parser("run-video", help="single-stage video-model variant")
    _add_common(p)
    p.add_argument("--stage1", required=True, help="video-capable backend spec")
    p.add_argument("--video-template", default="{video_id}.mp4", help="video reference per annotation")

    p = sub.add_parser("eval", help="re-score a per-sample JSONL file")
    p.add_argument("samples", type=Path)
    p.add_argument("--thresholds", type=_thresholds, default=DEFAULT_THRESHOLDS)
    p.add_argument("--out", type=Path, help="write summary JSON here")
    p.add_argument("--label", nargs=2, default=("", ""), metavar=("MULTIMODAL", "TEXT"))

    p = sub.add_parser("parse", help="parse one model response from stdin")
    p.add_argument("--n-frames", type=_positive, default=10_000)
    p.add_argument("--unit", choices=("frames", "seconds"), default="frames")

    p = sub.add_parser("gen-tuning-data", help="build conversation records from frames")
    p.add_argument("--frames-root", type=Path, required=True)
    p.add_argument("--annotations", type=Path, help="restrict to videos in this file")
    p.add_argument("--n-frames", type=_positive, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage1", required=True, help="image-capable backend spec")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--cache-dir", type=Path)
    p.add_argument("--max-in-flight", type=_positive, default=4)
    p.add_argument("--templates-dir", type=Path)

    p = sub.add_parser("extract-frames", help="1 fps frame extraction through an external command")
    p.add_argument("videos", type=Path, nargs="+")
    p.add_argument("--frames-root", type=Path, required=True)
    p.add_argument("--command-template", default=DEFAULT_EXTRACT_COMMAND)

    p = sub.add_parser("report", help="markdown table from summary JSON files")
    p.add_argument("summaries", type=Path, nargs="+")
    p.add_argument("--with-reference", action="store_true", help="append the published subset results")
    return parser


def _backend(spec: str) -> bk.ChatBackend:
    try:
        return bk.resolve_backend(spec)
    except (ValueError, OSError, ImportError, AttributeError, KeyError) as exc:
        raise ConfigError(f"backend {spec!r}: {exc}") from exc


def _with_replay(backend: bk.ChatBackend, args: argparse.Namespace) -> bk.ChatBackend:
    if args.replay_dir is None:
        return backend
    if args.replay_mode == "record":
        return bk.record_replay_session(backend, args.replay_dir)
    return bk.ReplayBackend(args.replay_dir, model_id=backend.model_id, capabilities=backend.capabilities)


def _config(args: argparse.Namespace, stage1: bk.ChatBackend, stage2: bk.ChatBackend, strategy: str) -> RunConfig:
    subset = None
    if args.subset_n is not None:
        subset = SubsetSpec(args.subset_n, args.seed, not args.all_annotations)
    durations = None
    if args.durations is not None:
        durations = {k: float(v) for k, v in json.loads(args.durations.read_text()).items()}
    return RunConfig(
        strategy=strategy,
        stage1_backend=stage1,
        stage2_backend=stage2,
        frames_root=args.frames_root,
        thresholds=args.thresholds,
        subset=subset,
        max_in_flight=args.max_in_flight,
        cache_dir=args.cache_dir,
        out_dir=args.out_dir,
        retry=bk.RetryPolicy(max_attempts=args.max_attempts),
        templates=load_templates(args.templates_dir),
        stage1_label=args.stage1_label or args.stage1,
        stage2_label=getattr(args, "stage2_label", None) or getattr(args, "stage2", None),
        durations=durations,
    )


def _print_report(report) -> None:
    md = report.files.get("markdown")
    if md is not None:
        sys.stdout.write(Path(md).read_text(encoding="utf-8"))
    d = report.diagnostics
    logger.info(
        "%d samples, %d undefined, %d sentinel descriptions, %d stage-2 failures",
        report.metrics.n_samples, d["undefined_predictions"], d["sentinel_descriptions"], d["stage2_failures"],
    )


def cmd_run(args: argparse.Namespace) -> int:
    if args.frames_root is None:
        raise ConfigError("--frames-root is required for run")
    stage1 = _with_replay(_backend(args.stage1), args)
    stage2 = _with_replay(_backend(args.stage2), args)
    config = _config(args, stage1, stage2, args.strategy)
    try:
        config.check_two_stage()
    except bk.CapabilityMismatch as exc:
        raise ConfigError(str(exc)) from exc
    annotations = load_annotations(args.annotations)
    report = Pipeline(config).run_experiment(annotations)
    _print_report(report)
    return 0


def cmd_run_video(args: argparse.Namespace) -> int:
    backend = _with_replay(_backend(args.stage1), args)
    if bk.VIDEO not in backend.capabilities:
        raise ConfigError(f"backend {args.stage1!r} does not advertise video input")
    config = _config(args, backend, backend, "general")
    annotations = load_annotations(args.annotations)
    template = args.video_template
    report = Pipeline(config).run_video_experiment(
        annotations, backend, lambda a: template.format(video_id=a.video_id)
    )
    _print_report(report)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    import jsonschema

    schema = json.loads((resources.files("tal_llm") / "schemas" / "sample_record.schema.json").read_text())
    records = read_samples_jsonl(args.samples)
    for i, record in enumerate(records, start=1):
        try:
            jsonschema.validate(record, schema)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"{args.samples}:{i}: {exc.message}") from exc
    _, metrics = rescore(records, args.thresholds)
    if args.out is not None:
        summary = {"label": {"multimodal": args.label[0], "text": args.label[1]}, "metrics": metrics.to_dict()}
        args.out.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    sys.stdout.write(markdown_table([(args.label[0], args.label[1], metrics)]))
    return 0


def cmd_parse(args: argparse.Namespace) -> int:
    pred = parse_interval(sys.stdin.read(), args.n_frames, unit=args.unit)
    json.dump({"outcome": pred.outcome(), "method": pred.method.value}, sys.stdout)
    sys.stdout.write("\n")
    return 0


def cmd_gen_tuning(args: argparse.Namespace) -> int:
    backend = _backend(args.stage1)
    if bk.IMAGE not in backend.capabilities:
        raise ConfigError(f"backend {args.stage1!r} cannot take images")
    if args.cache_dir is not None:
        backend = bk.CachedBackend(backend, args.cache_dir)
    if args.annotations is not None:
        video_ids = sorted({a.video_id for a in load_annotations(args.annotations)})
    else:
        video_ids = sorted(p.name for p in args.frames_root.iterdir() if p.is_dir())
    indexes = []
    for vid in video_ids:
        try:
            indexes.append(build_frame_index(vid, args.frames_root))
        except DatasetError as exc:
            logger.warning("skipping %s: %s", vid, exc)
    frames = sample_frames(indexes, args.n_frames, args.seed)
    records, diagnostics = generate_tuning_records(
        frames, backend, templates=load_templates(args.templates_dir),
        image_root=args.frames_root, max_in_flight=args.max_in_flight,
    )
    write_tuning_records(records, args.out)
    for d in diagnostics:
        logger.warning("%s: %s", d["id"], d["error"])
    print(f"wrote {len(records)} records to {args.out} ({len(diagnostics)} diagnostics)")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    failures = 0
    for video in args.videos:
        try:
            index = extract_frames(video, args.frames_root, args.command_template)
            print(f"{index.video_id}: {index.n_frames} frames")
        except (ExtractionFailed, DatasetError) as exc:
            failures += 1
            logger.error("%s: %s", video, exc)
    return 1 if failures else 0


def cmd_report(args: argparse.Namespace) -> int:
    rows = []
    for path in args.summaries:
        summary = json.loads(path.read_text(encoding="utf-8"))
        label = summary.get("label", {})
        rows.append((label.get("multimodal", path.parent.name), label.get("text", ""), MetricTable.from_dict(summary["metrics"])))
    if args.with_reference:
        rows.extend(reference_rows())
    sys.stdout.write(markdown_table(rows))
    return 0


COMMANDS = {
    "run": cmd_run,
    "run-video": cmd_run_video,
    "eval": cmd_eval,
    "parse": cmd_parse,
    "gen-tuning-data": cmd_gen_tuning,
    "extract-frames": cmd_extract,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
