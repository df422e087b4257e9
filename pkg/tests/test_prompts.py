from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treesynth import templates
from treesynth.backends import MockChatBackend, user_message
from treesynth.errors import (
    MalformedResponse,
    ProvenanceMismatch,
    SchemaError,
)
from treesynth.prompts import (
    AttributeAssignment,
    PromptRole,
    enumerate_assignments,
    forest_prompts,
    llm_prompts,
    negative_prompts,
    positive_prompts,
    read_plan,
    render_prompt,
    write_plan,
)
from treesynth.tree import OverlapPolicy, Provenance, llm_doc, merge

from conftest import make_tree


# ── enumerate_assignments ─────────────────────────────────────────────────


def test_enumerate_full_product_when_limit_allows(cat_tree):
    assignments = enumerate_assignments(cat_tree, limit=10, seed=0)
    assert len(assignments) == 4
    assert len(set(assignments)) == 4
    for a in assignments:
        picks = a.picks_dict()
        assert set(picks) == {"behavior", "location"}
        assert picks["behavior"] in ("sitting", "lying")
        assert picks["location"] in ("garden", "sofa")


def test_enumerate_is_deterministic(cat_tree):
    first = enumerate_assignments(cat_tree, limit=2, seed=7)
    second = enumerate_assignments(cat_tree, limit=2, seed=7)
    assert first == second
    assert len(first) == 2


def test_enumerate_single_combination():
    tree = make_tree(dims=[("behavior", ["sitting"])])
    assignments = enumerate_assignments(tree, limit=5, seed=1)
    assert len(assignments) == 1
    assert assignments[0].picks == (("behavior", "sitting"),)


def test_enumerate_limit_precondition(cat_tree):
    with pytest.raises(ValueError):
        enumerate_assignments(cat_tree, limit=0, seed=0)


def test_enumerate_rejection_path(cat_tree, monkeypatch):
    monkeypatch.setattr("treesynth.prompts.EXHAUSTIVE_LIMIT", 2)
    assignments = enumerate_assignments(cat_tree, limit=3, seed=5)
    assert len(assignments) == 3
    assert len(set(assignments)) == 3
    assert assignments == enumerate_assignments(cat_tree, limit=3, seed=5)


# ── render_prompt ─────────────────────────────────────────────────────────


def test_render_prompt_basic():
    assignment = AttributeAssignment(
        "cat-1", (("behavior", "sitting"), ("location", "garden"))
    )
    assert render_prompt(assignment, "cat") == "a photo of sitting, garden, cat"


def test_render_prompt_empty_assignment():
    assert render_prompt(AttributeAssignment("cat-1", ()), "cat") == "a photo of cat"


def test_render_prompt_follows_dimension_order():
    tree = make_tree(
        dims=[("location", ["garden"]), ("behavior", ["sitting"])]
    )
    (assignment,) = enumerate_assignments(tree, limit=1, seed=0)
    assert render_prompt(assignment, "cat") == "a photo of garden, sitting, cat"


# ── positive_prompts ──────────────────────────────────────────────────────


def test_positive_prompts(cat_tree):
    specs = positive_prompts(cat_tree, "sks", 3)
    assert [s.text for s in specs] == ["a photo of sks cat"] * 3
    assert [s.seed for s in specs] == [0, 1, 2]
    assert all(s.role is PromptRole.POSITIVE for s in specs)
    assert all(s.assignments == () for s in specs)


def test_positive_prompts_preconditions(cat_tree):
    with pytest.raises(ValueError):
        positive_prompts(cat_tree, "", 3)
    with pytest.raises(ValueError):
        positive_prompts(cat_tree, "sks", 0)


# ── negative_prompts ──────────────────────────────────────────────────────


def test_hard_negative_prompts_keep_root(cat_tree):
    hard_tree = make_tree(provenance=Provenance.DERIVED_EDIT)
    specs = negative_prompts(hard_tree, PromptRole.HARD_NEGATIVE, limit=4, seed=0)
    assert len(specs) == 4
    assert all("cat" in s.text for s in specs)
    assert all(s.role is PromptRole.HARD_NEGATIVE for s in specs)
    assert all(len(s.assignments) == 1 for s in specs)


def test_hard_negative_requires_derived_edit(cat_tree):
    with pytest.raises(ProvenanceMismatch):
        negative_prompts(cat_tree, PromptRole.HARD_NEGATIVE, limit=4, seed=0)


def test_easy_negative_uses_new_root():
    easy = make_tree(
        concept_id="cat-1.easy",
        root="dog",
        provenance=Provenance.DERIVED_EASY_NEGATIVE,
    )
    specs = negative_prompts(easy, PromptRole.EASY_NEGATIVE, limit=4, seed=0)
    assert all(s.text.endswith("dog") for s in specs)
    assert all("cat" not in s.text for s in specs)


# ── forest_prompts ────────────────────────────────────────────────────────


def _small_forest():
    t1 = make_tree(concept_id="cat-1", dims=[("behavior", ["sitting", "lying"])])
    t2 = make_tree(
        concept_id="dog-1", root="dog", dims=[("breed", ["husky", "corgi"])]
    )
    return merge([t1, t2]).forest


def test_forest_prompts_full_product():
    specs = forest_prompts(_small_forest(), limit=10, seed=0)
    assert len(specs) == 4
    for s in specs:
        assert " and " in s.text
        assert s.text.startswith("a photo of ")
        assert len(s.assignments) == 2
        # no attribute repeats inside one prompt
        attrs = [a for asg in s.assignments for _, a in asg.picks]
        assert len(attrs) == len(set(attrs))


def test_forest_prompts_limit_one():
    assert len(forest_prompts(_small_forest(), limit=1, seed=0)) == 1


def test_forest_prompts_reject_unconstrained():
    t1 = make_tree(concept_id="cat-1")
    t2 = make_tree(concept_id="dog-1", root="dog", dims=[("breed", ["husky"])])
    forest = merge([t1, t2], policy=OverlapPolicy.UNCONSTRAINED).forest
    with pytest.raises(ProvenanceMismatch):
        forest_prompts(forest, limit=2, seed=0)


def test_forest_prompt_text_shape():
    specs = forest_prompts(_small_forest(), limit=10, seed=0)
    texts = {s.text for s in specs}
    assert "a photo of sitting, cat and husky, dog" in texts


# ── llm_prompts ───────────────────────────────────────────────────────────


def _prompt_request(tree):
    rendered = templates.render(
        "prompt_generation", category=tree.root, concept_tree=llm_doc(tree)
    )
    return [user_message(rendered)]


def test_llm_prompts_parses_lines(cat_tree):
    mock = MockChatBackend()
    mock.add(
        _prompt_request(cat_tree),
        "a photo of sitting, garden, cat\na photo of lying, sofa, cat\n",
    )
    specs = llm_prompts(cat_tree, mock, n=2)
    assert [s.text for s in specs] == [
        "a photo of sitting, garden, cat",
        "a photo of lying, sofa, cat",
    ]
    assert [s.seed for s in specs] == [0, 1]
    assert all(s.role is PromptRole.POSITIVE for s in specs)


def test_llm_prompts_dedupes_and_skips_blanks(cat_tree):
    mock = MockChatBackend()
    mock.add(
        _prompt_request(cat_tree),
        "a photo of cat\n\n  \na photo of cat\na photo of lying, cat\n",
    )
    specs = llm_prompts(cat_tree, mock, n=10)
    assert [s.text for s in specs] == ["a photo of cat", "a photo of lying, cat"]


def test_llm_prompts_empty_reply_is_malformed(cat_tree):
    mock = MockChatBackend()
    mock.add(_prompt_request(cat_tree), "\n\n")
    with pytest.raises(MalformedResponse):
        llm_prompts(cat_tree, mock, n=2)


def test_llm_prompts_role_follows_provenance():
    hard = make_tree(provenance=Provenance.DERIVED_EDIT)
    mock = MockChatBackend()
    mock.add(_prompt_request(hard), "a photo of sitting, cat")
    (spec,) = llm_prompts(hard, mock, n=1)
    assert spec.role is PromptRole.HARD_NEGATIVE


# ── plan files ────────────────────────────────────────────────────────────


def test_plan_round_trip(tmp_path, cat_tree):
    hard = make_tree(provenance=Provenance.DERIVED_EDIT)
    specs = positive_prompts(cat_tree, "sks", 2) + negative_prompts(
        hard, PromptRole.HARD_NEGATIVE, limit=3, seed=1
    )
    path = tmp_path / "plan.jsonl"
    write_plan(path, specs)
    assert read_plan(path) == specs


def test_plan_write_is_deterministic(tmp_path, cat_tree):
    specs = positive_prompts(cat_tree, "sks", 2)
    write_plan(tmp_path / "a.jsonl", specs)
    write_plan(tmp_path / "b.jsonl", specs)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_plan_bad_row_is_schema_error(tmp_path):
    path = tmp_path / "plan.jsonl"
    path.write_text('{"text": "x", "role": "positive"}\n')
    with pytest.raises(SchemaError):
        read_plan(path)


# ── properties ────────────────────────────────────────────────────────────

_names = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=6)


@st.composite
def small_trees(draw):
    from treesynth.tree import ConceptTree, Dimension

    dims = draw(
        st.lists(
            st.builds(
                Dimension,
                name=_names,
                attributes=st.lists(
                    _names, min_size=1, max_size=3, unique_by=str.casefold
                ).map(tuple),
            ),
            min_size=1,
            max_size=3,
            unique_by=lambda d: d.name.casefold(),
        )
    )
    return ConceptTree("c1", draw(_names), tuple(dims))


@settings(max_examples=50)
@given(small_trees(), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_property_enumerate_counts_and_distinct(tree, limit, seed):
    from treesynth.tree import attribute_space

    assignments = enumerate_assignments(tree, limit, seed)
    assert len(assignments) == min(limit, attribute_space(tree))
    assert len(set(assignments)) == len(assignments)
    assert assignments == enumerate_assignments(tree, limit, seed)
