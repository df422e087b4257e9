from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treesynth.errors import (
    DimensionEmptiedByDeconfliction,
    DuplicateConceptId,
    DuplicateDimension,
    EmptyTreeError,
    ParseError,
    SchemaError,
    UnknownDimension,
)
from treesynth.tree import (
    ConceptForest,
    ConceptTree,
    Dimension,
    OverlapPolicy,
    Provenance,
    TreeEdit,
    apply_edit,
    apply_edit_sequence,
    attribute_space,
    deserialize_document,
    deserialize_forest,
    deserialize_tree,
    merge,
    serialize_forest,
    serialize_tree,
    validate,
)

from conftest import make_tree


# ── validation ────────────────────────────────────────────────────────────


def test_minimal_tree_is_valid():
    tree = make_tree(dims=[("behavior", ["sitting"])])
    assert validate(tree).ok


def test_empty_root_is_a_violation():
    tree = make_tree(root="")
    report = validate(tree)
    assert not report.ok
    assert any("empty root" in v for v in report.violations)


def test_duplicate_dimension_names_case_and_trim():
    tree = make_tree(dims=[("behavior", ["a"]), ("Behavior ", ["b"])])
    report = validate(tree)
    assert not report.ok
    assert any("duplicate dimension name" in v for v in report.violations)


def test_dimension_without_attributes_is_a_violation():
    tree = make_tree(dims=[("behavior", [])])
    assert not validate(tree).ok


def test_duplicate_attributes_within_dimension():
    tree = make_tree(dims=[("behavior", ["sitting", "Sitting"])])
    report = validate(tree)
    assert not report.ok
    assert any("duplicate attribute" in v for v in report.violations)


def test_zero_dimension_tree_is_invalid():
    tree = ConceptTree("c", "cat", ())
    assert not validate(tree).ok


# ── edits ─────────────────────────────────────────────────────────────────


def test_add_grows_dimension_count_by_one(cat_tree):
    edited = apply_edit(cat_tree, TreeEdit.add(Dimension("mood", ("happy", "calm"))))
    assert len(edited.dimensions) == 3
    assert edited.dimension_names() == ("behavior", "location", "mood")
    assert edited.provenance is Provenance.DERIVED_EDIT
    # value semantics: the input tree is untouched
    assert cat_tree.dimension_names() == ("behavior", "location")
    assert cat_tree.provenance is Provenance.LLM_BUILT


def test_remove_shrinks_dimension_count_by_one(cat_tree):
    edited = apply_edit(cat_tree, TreeEdit.remove("location"))
    assert edited.dimension_names() == ("behavior",)


def test_modify_swaps_dimension_in_place():
    tree = make_tree(dims=[("action", ["running"]), ("location", ["garden"])])
    edited = apply_edit(
        tree, TreeEdit.modify("action", Dimension("outfit", ("dress", "coat")))
    )
    assert "action" not in edited.dimension_names()
    assert "outfit" in edited.dimension_names()
    assert len(edited.dimensions) == len(tree.dimensions)
    # replacement lands at the old position
    assert edited.dimension_names()[0] == "outfit"


def test_remove_unknown_dimension(cat_tree):
    with pytest.raises(UnknownDimension):
        apply_edit(cat_tree, TreeEdit.remove("mood"))


def test_add_duplicate_name_is_rejected_case_insensitively(cat_tree):
    with pytest.raises(DuplicateDimension):
        apply_edit(cat_tree, TreeEdit.add(Dimension(" Behavior", ("x",))))


def test_modify_cannot_collide_with_existing_dimension(cat_tree):
    with pytest.raises(DuplicateDimension):
        apply_edit(
            cat_tree, TreeEdit.modify("behavior", Dimension("location", ("x",)))
        )


def test_remove_last_dimension_is_an_error():
    tree = make_tree(dims=[("behavior", ["sitting"])])
    with pytest.raises(EmptyTreeError):
        apply_edit(tree, TreeEdit.remove("behavior"))


def test_edit_sequence_two_adds(cat_tree):
    edits = [
        TreeEdit.add(Dimension("x", ("a",))),
        TreeEdit.add(Dimension("y", ("b",))),
    ]
    assert len(apply_edit_sequence(cat_tree, edits).dimensions) == 4


def test_edit_sequence_add_then_remove_is_structural_identity(cat_tree):
    edits = [TreeEdit.add(Dimension("x", ("a",))), TreeEdit.remove("x")]
    out = apply_edit_sequence(cat_tree, edits)
    assert out.same_structure(cat_tree)
    assert out.provenance is Provenance.DERIVED_EDIT
    assert out != cat_tree  # provenance differs


def test_edit_sequence_reports_failing_index():
    tree = make_tree(dims=[("a", ["1"]), ("b", ["2"])])
    with pytest.raises(EmptyTreeError) as exc_info:
        apply_edit_sequence(tree, [TreeEdit.remove("a"), TreeEdit.remove("b")])
    assert exc_info.value.edit_index == 1
    assert "edit 1" in str(exc_info.value)


def test_edit_sequence_records_edit_count(cat_tree):
    edits = [
        TreeEdit.add(Dimension("x", ("a",))),
        TreeEdit.add(Dimension("y", ("b",))),
    ]
    out = apply_edit_sequence(cat_tree, edits)
    assert out.edit_count == 2
    assert apply_edit_sequence(cat_tree, []).edit_count == 0


# ── merge ─────────────────────────────────────────────────────────────────


def test_merge_disjoint_trees_keeps_inputs_byte_identical():
    t1 = make_tree(concept_id="cat-1")
    t2 = make_tree(
        concept_id="dog-1",
        root="dog",
        dims=[("breed", ["husky", "corgi"])],
    )
    result = merge([t1, t2])
    assert result.removals == ()
    direct = ConceptForest(result.forest.scene_id, (t1, t2))
    assert serialize_forest(result.forest) == serialize_forest(direct)


def test_merge_drops_contested_attribute_from_second_tree():
    t1 = make_tree(concept_id="cat-1")  # has location: garden, sofa
    t2 = make_tree(
        concept_id="dog-1",
        root="dog",
        dims=[("place", ["garden", "kennel"])],
    )
    result = merge([t1, t2])
    assert len(result.removals) == 1
    removal = result.removals[0]
    assert (removal.concept_id, removal.dimension, removal.attribute) == (
        "dog-1",
        "place",
        "garden",
    )
    merged_t2 = result.forest.trees[1]
    assert merged_t2.find("place").attributes == ("kennel",)
    # first tree keeps its claim
    assert result.forest.trees[0].find("location").attributes == ("garden", "sofa")


def test_merge_unconstrained_keeps_overlap():
    t1 = make_tree(concept_id="cat-1")
    t2 = make_tree(concept_id="dog-1", root="dog", dims=[("place", ["garden"])])
    result = merge([t1, t2], policy=OverlapPolicy.UNCONSTRAINED)
    assert result.removals == ()
    assert result.forest.trees[1].find("place").attributes == ("garden",)


def test_merge_duplicate_concept_id():
    t1 = make_tree(concept_id="same")
    t2 = make_tree(concept_id="same", root="dog", dims=[("breed", ["husky"])])
    with pytest.raises(DuplicateConceptId):
        merge([t1, t2])


def test_merge_single_tree_is_an_arity_error(cat_tree):
    with pytest.raises(ValueError):
        merge([cat_tree])


def test_merge_error_when_dimension_emptied():
    t1 = make_tree(concept_id="cat-1")
    t2 = make_tree(concept_id="dog-1", root="dog", dims=[("place", ["garden"])])
    with pytest.raises(DimensionEmptiedByDeconfliction):
        merge([t1, t2])


# ── serialization ─────────────────────────────────────────────────────────


def test_round_trip_tree(cat_tree):
    doc = serialize_tree(cat_tree)
    back = deserialize_tree(doc)
    assert back == cat_tree
    assert serialize_tree(back) == doc


def test_serialization_is_byte_deterministic(cat_tree):
    assert serialize_tree(cat_tree) == serialize_tree(cat_tree)


def test_document_missing_root_field():
    broken = '{"concept_id": "x", "dimensions": [], "provenance": "llm_built"}'
    with pytest.raises(SchemaError, match="root"):
        deserialize_tree(broken)


def test_document_with_extra_field(cat_tree):
    doc = serialize_tree(cat_tree)
    broken = doc.replace('"root"', '"color": 3,\n  "root"', 1)
    with pytest.raises(SchemaError):
        deserialize_tree(broken)


def test_truncated_document_is_a_parse_error(cat_tree):
    doc = serialize_tree(cat_tree)
    with pytest.raises(ParseError, match="line"):
        deserialize_tree(doc[: len(doc) // 2])


def test_unknown_provenance_is_a_schema_error(cat_tree):
    doc = serialize_tree(cat_tree).replace("llm_built", "grown")
    with pytest.raises(SchemaError, match="provenance"):
        deserialize_tree(doc)


def test_forest_round_trip(cat_tree):
    t2 = make_tree(concept_id="dog-1", root="dog", dims=[("breed", ["husky"])])
    forest = merge([cat_tree, t2]).forest
    doc = serialize_forest(forest)
    assert deserialize_forest(doc) == forest
    assert serialize_forest(deserialize_forest(doc)) == doc


def test_deserialize_document_dispatches(cat_tree):
    t2 = make_tree(concept_id="dog-1", root="dog", dims=[("breed", ["husky"])])
    forest = merge([cat_tree, t2]).forest
    assert isinstance(deserialize_document(serialize_tree(cat_tree)), ConceptTree)
    assert isinstance(deserialize_document(serialize_forest(forest)), ConceptForest)


# ── properties ────────────────────────────────────────────────────────────

_names = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8)


@st.composite
def dimensions_strategy(draw):
    name = draw(_names)
    attrs = draw(
        st.lists(_names, min_size=1, max_size=4, unique_by=str.casefold)
    )
    return Dimension(name, tuple(attrs))


@st.composite
def trees_strategy(draw):
    dims = draw(
        st.lists(
            dimensions_strategy(),
            min_size=1,
            max_size=5,
            unique_by=lambda d: d.name.casefold(),
        )
    )
    return ConceptTree(
        concept_id=draw(_names),
        root=draw(_names),
        dimensions=tuple(dims),
    )


@settings(max_examples=60)
@given(trees_strategy())
def test_property_round_trip(tree):
    assert deserialize_tree(serialize_tree(tree)) == tree


@settings(max_examples=60)
@given(trees_strategy(), dimensions_strategy())
def test_property_add_cardinality(tree, dim):
    fresh = Dimension("zq " + dim.name, dim.attributes)  # avoid collisions
    edited = apply_edit(tree, TreeEdit.add(fresh))
    assert len(edited.dimensions) == len(tree.dimensions) + 1
    assert attribute_space(edited) >= attribute_space(tree)


@settings(max_examples=60)
@given(trees_strategy())
def test_property_remove_cardinality(tree):
    if len(tree.dimensions) == 1:
        with pytest.raises(EmptyTreeError):
            apply_edit(tree, TreeEdit.remove(tree.dimensions[0].name))
        return
    edited = apply_edit(tree, TreeEdit.remove(tree.dimensions[0].name))
    assert len(edited.dimensions) == len(tree.dimensions) - 1
    assert attribute_space(edited) <= attribute_space(tree)


@settings(max_examples=60)
@given(trees_strategy(), dimensions_strategy())
def test_property_modify_round_trip_restores_dimensions(tree, dim):
    original = tree.dimensions[0]
    fresh = Dimension("zq " + dim.name, dim.attributes)
    once = apply_edit(tree, TreeEdit.modify(original.name, fresh))
    assert len(once.dimensions) == len(tree.dimensions)
    back = apply_edit(once, TreeEdit.modify(fresh.name, original))
    assert back.dimensions == tree.dimensions


@settings(max_examples=40)
@given(st.lists(trees_strategy(), min_size=2, max_size=4))
def test_property_merge_attributes_globally_unique(trees):
    distinct = [
        ConceptTree(f"c{i}", t.root, t.dimensions) for i, t in enumerate(trees)
    ]
    try:
        result = merge(distinct)
    except DimensionEmptiedByDeconfliction:
        return
    seen = set()
    for t in result.forest.trees:
        for d in t.dimensions:
            for a in d.attributes:
                key = a.strip().casefold()
                assert key not in seen
                seen.add(key)
