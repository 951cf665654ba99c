"""Prompt templates for the description stage, the interval stage and tuning-data generation.

Templates are plain text files with ``{query}`` / ``{frame_lines}`` placeholders.
The packaged set lives in ``tal_llm/templates``; a directory with the same file
names can be swapped in through :func:`load_templates`.
"""

from __future__ import annotations

import enum
import hashlib
import math
import re
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

from tal_llm.dataset import FrameRef

TEMPLATE_NAMES = ("activity", "general", "stage2", "video", "tuning_description", "tuning_qa")
_NEWLINES = re.compile(r"\s*[\r\n]+\s*")


class MissingQuery(ValueError):
    pass


class NonContiguousDescriptions(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class PromptStrategy(str, enum.Enum):
    ACTIVITY = "activity"
    GENERAL = "general"


@dataclass(frozen=True)
class FrameDescription:
    index: int
    text: str


@dataclass(frozen=True)
class Stage2Prompt:
    text: str
    n_frames: int


@dataclass(frozen=True)
class TemplateSet:
    texts: dict[str, str]

    def __getitem__(self, name: str) -> str:
        return self.texts[name]

    def digest(self, name: str) -> str:
        return hashlib.sha256(self.texts[name].encode("utf-8")).hexdigest()

    def digests(self) -> dict[str, str]:
        return {name: self.digest(name) for name in sorted(self.texts)}


def _read_template(text: str) -> str:
    # files end with one newline that is not part of the prompt
    return text[:-1] if text.endswith("\n") else text


@lru_cache(maxsize=None)
def _packaged_templates() -> TemplateSet:
    root = resources.files("tal_llm") / "templates"
    return TemplateSet(
        {name: _read_template((root / f"{name}.txt").read_text(encoding="utf-8")) for name in TEMPLATE_NAMES}
    )


def load_templates(directory: str | Path | None = None) -> TemplateSet:
    """Packaged templates, overridden by any ``<name>.txt`` found in ``directory``."""
    base = dict(_packaged_templates().texts)
    if directory is not None:
        for name in TEMPLATE_NAMES:
            path = Path(directory) / f"{name}.txt"
            if path.exists():
                base[name] = _read_template(path.read_text(encoding="utf-8"))
    return TemplateSet(base)


def _require_query(query: str | None) -> str:
    if query is None or not query.strip():
        raise MissingQuery("a non-empty activity query is required")
    return query


def render_stage1(
    strategy: PromptStrategy | str, query: str | None = None, templates: TemplateSet | None = None
) -> str:
    templates = templates or _packaged_templates()
    strategy = PromptStrategy(strategy)
    if strategy is PromptStrategy.GENERAL:
        return templates["general"]
    return templates["activity"].format_map({"query": _require_query(query)})


def flatten_description(text: str) -> str:
    return _NEWLINES.sub(" ", text).strip()


def render_stage2(
    descriptions: Sequence[FrameDescription], query: str, templates: TemplateSet | None = None
) -> Stage2Prompt:
    templates = templates or _packaged_templates()
    if not descriptions:
        raise NonContiguousDescriptions("no frame descriptions given")
    indices = [d.index for d in descriptions]
    if indices != list(range(1, len(descriptions) + 1)):
        raise NonContiguousDescriptions(f"frame indices must run 1..{len(descriptions)}, got {indices}")
    lines = "\n".join(f"* Frame {d.index}: {flatten_description(d.text)}" for d in descriptions)
    text = templates["stage2"].format_map({"frame_lines": lines, "query": _require_query(query)})
    return Stage2Prompt(text, len(descriptions))


def render_video_prompt(query: str, templates: TemplateSet | None = None) -> str:
    templates = templates or _packaged_templates()
    return templates["video"].format_map({"query": _require_query(query)})


def render_tuning_prompts(frame: FrameRef, templates: TemplateSet | None = None) -> tuple[str, str]:
    """(description request, Q&A request) for one frame.

    The texts do not depend on the frame; the image travels next to them.
    """
    templates = templates or _packaged_templates()
    return templates["tuning_description"], templates["tuning_qa"]


def compose_frame_grid(
    frames: Sequence[FrameRef], columns: int, out_path: str | Path | None = None
) -> Path:
    """Tile frames row-major into one image. Optional input mode, off by default."""
    from PIL import Image

    if len(frames) < 2:
        raise ValueError("a frame grid needs at least two frames")
    if columns < 1:
        raise ValueError("columns must be positive")
    images = [Image.open(f.image_path) for f in frames]
    try:
        size = images[0].size
        if any(im.size != size for im in images):
            raise DimensionMismatch(f"frame sizes differ: {sorted({im.size for im in images})}")
        w, h = size
        rows = math.ceil(len(images) / columns)
        cols = min(columns, len(images))
        grid = Image.new("RGB", (cols * w, rows * h))
        for i, im in enumerate(images):
            grid.paste(im.convert("RGB"), ((i % columns) * w, (i // columns) * h))
    finally:
        for im in images:
            im.close()
    if out_path is None:
        handle = tempfile.NamedTemporaryFile(prefix="grid_", suffix=".png", delete=False)
        handle.close()
        out_path = handle.name
    out_path = Path(out_path)
    grid.save(out_path)
    return out_path
