"""Golden tests: rendered prompts must match the pinned bytes exactly."""

from __future__ import annotations

from pathlib import Path

import pytest

from treesynth import templates
from treesynth.tree import llm_doc

from conftest import make_tree

GOLDEN = Path(__file__).parent / "fixtures" / "golden"

SIMPLE = make_tree(dims=[("behavior", ["sitting", "lying"])])


def golden(name: str) -> str:
    return (GOLDEN / f"{name}.txt").read_text(encoding="utf-8")


def test_image_description_golden():
    assert templates.render("image_description") == golden("image_description")


def test_batch_summarization_golden():
    rendered = templates.render(
        "batch_summarization",
        tree_example=templates.TREE_EXAMPLE,
        class_name="cat",
        captions="a cat sitting in a garden; a cat lying on a sofa",
    )
    assert rendered == golden("batch_summarization")


def test_self_refinement_golden():
    rendered = templates.render(
        "self_refinement",
        captions="a cat climbing a tree",
        concept_tree=llm_doc(SIMPLE),
    )
    assert rendered == golden("self_refinement")
    # literal braces must survive the format pass
    assert '{"hallucination": []}' in rendered


def test_easy_negative_golden():
    rendered = templates.render("easy_negative", concept_tree=llm_doc(SIMPLE))
    assert rendered == golden("easy_negative")


@pytest.mark.parametrize(
    "name,num",
    [("edit_add", 2), ("edit_remove", 1), ("edit_modify", 1)],
)
def test_edit_templates_golden(name, num):
    rendered = templates.render(name, num=num, concept_tree=llm_doc(SIMPLE))
    assert rendered == golden(name)


def test_prompt_generation_golden():
    rendered = templates.render(
        "prompt_generation", category="cat", concept_tree=llm_doc(SIMPLE)
    )
    assert rendered == golden("prompt_generation")
    # key phrases that downstream code and users rely on
    assert "a photo of attribute of dimension1" in rendered
    assert "Please generate at least 100 prompts" in rendered


def test_unknown_template_name():
    with pytest.raises(KeyError):
        templates.load("nonexistent")
