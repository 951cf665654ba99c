import re
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from oracles import write_frames
from tal_llm.dataset import build_frame_index
from tal_llm.prompting import (
    DimensionMismatch,
    FrameDescription,
    MissingQuery,
    NonContiguousDescriptions,
    PromptStrategy,
    compose_frame_grid,
    load_templates,
    render_stage1,
    render_stage2,
    render_tuning_prompts,
    render_video_prompt,
)

GOLDEN = Path(__file__).parent / "golden"
FRAME_LINE = re.compile(r"^\* Frame (\d+): ")


def golden(name: str) -> str:
    return (GOLDEN / name).read_text(encoding="utf-8")


def test_general_prompt_verbatim():
    assert render_stage1(PromptStrategy.GENERAL) == "Describe what is happening in the frame."
    assert render_stage1("general", "ignored query") == golden("general.txt")


def test_activity_prompt_golden():
    text = render_stage1(PromptStrategy.ACTIVITY, "person put on shoes")
    assert text == golden("activity_person_put_on_shoes.txt")
    assert "described as person put on shoes however, the frame may or may not include this action" in text


@pytest.mark.parametrize("query", [None, "", "   "])
def test_activity_prompt_needs_query(query):
    with pytest.raises(MissingQuery):
        render_stage1(PromptStrategy.ACTIVITY, query)


def test_video_prompt_golden():
    assert render_video_prompt("person put on shoes") == golden("video_person_put_on_shoes.txt")


def test_video_prompt_keeps_trailing_period():
    text = render_video_prompt("person sits.")
    assert "The action person sits. has occurred" in text


def test_video_prompt_needs_query():
    with pytest.raises(MissingQuery):
        render_video_prompt("")


def test_stage2_three_frames_golden():
    descs = [
        FrameDescription(1, "A person walks into the hallway."),
        FrameDescription(2, "The person bends down\nand picks up a shoe."),
        FrameDescription(3, "The person ties the laces of the shoe.\n"),
    ]
    prompt = render_stage2(descs, "person put on shoes")
    assert prompt.text == golden("stage2_three_frames.txt")
    assert prompt.n_frames == 3
    lines = prompt.text.split("\n")
    assert [int(m.group(1)) for m in map(FRAME_LINE.match, lines) if m] == [1, 2, 3]
    assert prompt.text.endswith("start and end frame numbers in json format.")


def test_stage2_single_frame():
    prompt = render_stage2([FrameDescription(1, "x")], "person sits")
    assert prompt.text.count("* Frame ") == 1
    assert len(prompt.text.split("\n")) == 3


def test_stage2_non_contiguous():
    with pytest.raises(NonContiguousDescriptions):
        render_stage2([FrameDescription(2, "a"), FrameDescription(3, "b")], "q")
    with pytest.raises(NonContiguousDescriptions):
        render_stage2([], "q")


_desc_text = st.text(max_size=60)


@given(st.lists(_desc_text, min_size=1, max_size=40))
def test_stage2_line_count(texts):
    prompt = render_stage2([FrameDescription(i, t) for i, t in enumerate(texts, 1)], "person sits")
    lines = prompt.text.split("\n")
    assert len(lines) == len(texts) + 2
    assert [int(FRAME_LINE.match(l).group(1)) for l in lines[1:-1]] == list(range(1, len(texts) + 1))


_queries = st.text(min_size=1).filter(lambda q: q.strip() and "\n" not in q and "\r" not in q)


@given(_queries)
def test_query_substituted_verbatim(query):
    assert query in render_stage1(PromptStrategy.ACTIVITY, query)
    assert render_video_prompt(query).startswith(f"The action {query} has occurred")
    assert f"The action {query} has occurred" in render_stage2([FrameDescription(1, "x")], query).text


@pytest.mark.parametrize("query", ['the "big" {frame_lines} [box]', "ünïcödé 人 🎬", "{query}"])
def test_query_with_special_characters(query):
    assert query in render_stage1(PromptStrategy.ACTIVITY, query)
    assert query in render_stage2([FrameDescription(1, "d")], query).text


def test_tuning_prompts_deterministic(tmp_path):
    write_frames(tmp_path, "V", 2)
    fi = build_frame_index("V", tmp_path)
    first = render_tuning_prompts(fi.frames[0])
    assert first == render_tuning_prompts(fi.frames[0]) == render_tuning_prompts(fi.frames[1])
    assert first == (golden("tuning_description.txt"), golden("tuning_qa.txt"))


def test_template_override(tmp_path):
    (tmp_path / "general.txt").write_text("Say what you see.\n")
    templates = load_templates(tmp_path)
    assert render_stage1("general", templates=templates) == "Say what you see."
    assert templates.digest("general") != load_templates().digest("general")
    assert templates["stage2"] == load_templates()["stage2"]


def test_template_digests_cover_all():
    digests = load_templates().digests()
    assert set(digests) == {"activity", "general", "stage2", "video", "tuning_description", "tuning_qa"}
    assert all(len(d) == 64 for d in digests.values())


def test_frame_grid_geometry(tmp_path):
    write_frames(tmp_path, "V", 4, size=(16, 12))
    fi = build_frame_index("V", tmp_path)
    out = compose_frame_grid(fi.frames, columns=2, out_path=tmp_path / "grid.png")
    with Image.open(out) as im:
        assert im.size == (32, 24)
        with Image.open(fi.frames[1].image_path) as second:
            assert im.getpixel((16 + 8, 6)) == second.convert("RGB").getpixel((8, 6))


def test_frame_grid_temp_path(tmp_path):
    write_frames(tmp_path, "V", 3)
    out = compose_frame_grid(build_frame_index("V", tmp_path).frames, columns=2)
    try:
        with Image.open(out) as im:
            assert im.size == (32, 24)
    finally:
        out.unlink()


def test_frame_grid_needs_two_frames(tmp_path):
    write_frames(tmp_path, "V", 1)
    with pytest.raises(ValueError):
        compose_frame_grid(build_frame_index("V", tmp_path).frames, 2)


def test_frame_grid_mixed_sizes(tmp_path):
    write_frames(tmp_path, "V", 2, size=(16, 12))
    Image.new("RGB", (20, 12)).save(tmp_path / "V" / "frame_000003.jpg")
    with pytest.raises(DimensionMismatch):
        compose_frame_grid(build_frame_index("V", tmp_path).frames, 2)
