"""Concept trees: a three-layer description of a visual concept.

A tree has exactly three layers: a root class name, a set of named
dimensions, and string attributes inside each dimension. Trees are immutable
value objects; edits produce new trees and record how they were derived.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

from .errors import (
    DimensionEmptiedByDeconfliction,
    DuplicateConceptId,
    DuplicateDimension,
    EmptyTreeError,
    ParseError,
    SchemaError,
    TreeError,
    UnknownDimension,
)


class Provenance(str, Enum):
    """How a tree came to exist."""

    USER_BUILT = "user_built"
    LLM_BUILT = "llm_built"
    DERIVED_EDIT = "derived_edit"
    DERIVED_EASY_NEGATIVE = "derived_easy_negative"


class OverlapPolicy(str, Enum):
    """Whether trees in a forest may share attribute strings."""

    DISJOINT_ATTRIBUTES = "disjoint_attributes"
    UNCONSTRAINED = "unconstrained"


def _norm(name: str) -> str:
    # Identity for names: whitespace-trimmed, case-insensitive.
    return name.strip().casefold()


# ── value types ──────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Dimension:
    """A named axis of variation with at least one string attribute."""

    name: str
    attributes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))


@dataclass(frozen=True)
class ConceptTree:
    """Root class name plus its dimensions. Never mutated in place."""

    concept_id: str
    root: str
    dimensions: tuple[Dimension, ...]
    provenance: Provenance = Provenance.LLM_BUILT
    # Number of edits applied since the tree was first built. Metadata only:
    # excluded from equality and from the serialized document.
    edit_count: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(self.dimensions))
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    def dimension_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    def find(self, name: str) -> Dimension | None:
        """Look up a dimension by normalized name."""
        key = _norm(name)
        for dim in self.dimensions:
            if _norm(dim.name) == key:
                return dim
        return None

    def same_structure(self, other: "ConceptTree") -> bool:
        """True when root and dimensions match, ignoring provenance."""
        return self.root == other.root and self.dimensions == other.dimensions


@dataclass(frozen=True)
class ConceptForest:
    """Two or more trees composed into one scene."""

    scene_id: str
    trees: tuple[ConceptTree, ...]
    overlap_policy: OverlapPolicy = OverlapPolicy.DISJOINT_ATTRIBUTES

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "overlap_policy", OverlapPolicy(self.overlap_policy))


@dataclass(frozen=True)
class TreeEdit:
    """One of the three structural operations on a tree.

    kind "add" carries the new dimension; "remove" carries the target name;
    "modify" carries both the target name and its replacement dimension.
    """

    kind: str
    name: str | None = None
    dimension: Dimension | None = None

    _KINDS = ("add", "remove", "modify")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown edit kind {self.kind!r}")
        if self.kind == "add" and self.dimension is None:
            raise ValueError("add edit requires a dimension payload")
        if self.kind == "remove" and not self.name:
            raise ValueError("remove edit requires a dimension name")
        if self.kind == "modify" and (self.dimension is None or not self.name):
            raise ValueError("modify edit requires a name and a replacement")

    @classmethod
    def add(cls, dimension: Dimension) -> "TreeEdit":
        return cls(kind="add", dimension=dimension)

    @classmethod
    def remove(cls, name: str) -> "TreeEdit":
        return cls(kind="remove", name=name)

    @classmethod
    def modify(cls, name: str, dimension: Dimension) -> "TreeEdit":
        return cls(kind="modify", name=name, dimension=dimension)


@dataclass(frozen=True)
class AttributeRemoval:
    """Record of one attribute dropped while merging trees into a forest."""

    concept_id: str
    dimension: str
    attribute: str


@dataclass(frozen=True)
class MergeResult:
    forest: ConceptForest
    removals: tuple[AttributeRemoval, ...]


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...]


# ── validation ───────────────────────────────────────────────────────────────


def _dimension_violations(dim: Dimension, label: str) -> list[str]:
    out: list[str] = []
    if not isinstance(dim.name, str) or not dim.name.strip():
        out.append(f"{label}: empty dimension name")
    if len(dim.attributes) == 0:
        out.append(f"{label}: no attributes")
    seen: set[str] = set()
    for attr in dim.attributes:
        if not isinstance(attr, str) or not attr.strip():
            out.append(f"{label}: empty attribute")
            continue
        key = _norm(attr)
        if key in seen:
            out.append(f"{label}: duplicate attribute {attr!r}")
        seen.add(key)
    return out


def validate(tree: ConceptTree) -> ValidationReport:
    """Check the three-layer invariants. Never raises."""
    violations: list[str] = []
    if not isinstance(tree.concept_id, str) or not tree.concept_id.strip():
        violations.append("empty concept_id")
    if not isinstance(tree.root, str) or not tree.root.strip():
        violations.append("empty root")
    if len(tree.dimensions) == 0:
        violations.append("tree has no dimensions")
    seen: set[str] = set()
    for i, dim in enumerate(tree.dimensions):
        label = f"dimension[{i}] {dim.name!r}"
        violations.extend(_dimension_violations(dim, label))
        if isinstance(dim.name, str):
            key = _norm(dim.name)
            if key in seen:
                violations.append(f"{label}: duplicate dimension name")
            seen.add(key)
    return ValidationReport(ok=not violations, violations=tuple(violations))


def _require_valid(tree: ConceptTree) -> None:
    report = validate(tree)
    if not report.ok:
        raise ValueError("tree fails validation: " + "; ".join(report.violations))


def _require_valid_dimension(dim: Dimension) -> None:
    problems = _dimension_violations(dim, "payload")
    if problems:
        raise ValueError("invalid dimension payload: " + "; ".join(problems))


def attribute_space(tree: ConceptTree) -> int:
    """Size of the full attribute-combination space, one pick per dimension."""
    return math.prod(len(d.attributes) for d in tree.dimensions)


# ── edits ────────────────────────────────────────────────────────────────────


def apply_edit(tree: ConceptTree, edit: TreeEdit) -> ConceptTree:
    """Return a new tree with one edit applied. The input is untouched."""
    _require_valid(tree)
    dims = list(tree.dimensions)
    if edit.kind == "add":
        assert edit.dimension is not None
        _require_valid_dimension(edit.dimension)
        if tree.find(edit.dimension.name) is not None:
            raise DuplicateDimension(
                f"dimension {edit.dimension.name!r} already exists"
            )
        dims.append(edit.dimension)
    elif edit.kind == "remove":
        assert edit.name is not None
        if tree.find(edit.name) is None:
            raise UnknownDimension(f"no dimension named {edit.name!r}")
        if len(dims) == 1:
            raise EmptyTreeError("removing the last dimension is not allowed")
        dims = [d for d in dims if _norm(d.name) != _norm(edit.name)]
    else:  # modify
        assert edit.name is not None and edit.dimension is not None
        _require_valid_dimension(edit.dimension)
        if tree.find(edit.name) is None:
            raise UnknownDimension(f"no dimension named {edit.name!r}")
        new_key = _norm(edit.dimension.name)
        for d in dims:
            if _norm(d.name) == new_key and _norm(d.name) != _norm(edit.name):
                raise DuplicateDimension(
                    f"dimension {edit.dimension.name!r} already exists"
                )
        dims = [
            edit.dimension if _norm(d.name) == _norm(edit.name) else d for d in dims
        ]
    return replace(
        tree,
        dimensions=tuple(dims),
        provenance=Provenance.DERIVED_EDIT,
        edit_count=tree.edit_count + 1,
    )


def apply_edit_sequence(tree: ConceptTree, edits: Sequence[TreeEdit]) -> ConceptTree:
    """Fold edits left to right; a failure reports which edit broke."""
    current = tree
    for i, edit in enumerate(edits):
        try:
            current = apply_edit(current, edit)
        except TreeError as exc:
            exc.edit_index = i  # type: ignore[attr-defined]
            exc.args = (f"edit {i}: {exc.args[0]}",)
            raise
    return current


# ── merge ────────────────────────────────────────────────────────────────────


def merge(
    trees: Sequence[ConceptTree],
    policy: OverlapPolicy = OverlapPolicy.DISJOINT_ATTRIBUTES,
    scene_id: str | None = None,
) -> MergeResult:
    """Combine trees into a forest under the given overlap policy.

    Under disjoint_attributes, when two trees claim the same attribute the
    earliest tree keeps it and the later occurrence is dropped and reported.
    Dropping every attribute of a dimension is an error rather than a silent
    structural change. scene_id defaults to the joined concept_ids.
    """
    if len(trees) < 2:
        raise ValueError("merge requires at least two trees")
    policy = OverlapPolicy(policy)
    seen_ids: set[str] = set()
    for t in trees:
        _require_valid(t)
        if t.concept_id in seen_ids:
            raise DuplicateConceptId(f"concept_id {t.concept_id!r} appears twice")
        seen_ids.add(t.concept_id)
    if scene_id is None:
        scene_id = "+".join(t.concept_id for t in trees)

    if policy is OverlapPolicy.UNCONSTRAINED:
        return MergeResult(ConceptForest(scene_id, tuple(trees), policy), ())

    claimed: set[str] = set()
    merged: list[ConceptTree] = []
    removals: list[AttributeRemoval] = []
    for t in trees:
        new_dims: list[Dimension] = []
        changed = False
        for dim in t.dimensions:
            kept = tuple(a for a in dim.attributes if _norm(a) not in claimed)
            if not kept:
                raise DimensionEmptiedByDeconfliction(
                    f"{t.concept_id!r}/{dim.name!r} lost all attributes in merge"
                )
            if len(kept) != len(dim.attributes):
                for a in dim.attributes:
                    if _norm(a) in claimed:
                        removals.append(AttributeRemoval(t.concept_id, dim.name, a))
                new_dims.append(Dimension(dim.name, kept))
                changed = True
            else:
                new_dims.append(dim)
            claimed.update(_norm(a) for a in kept)
        merged.append(replace(t, dimensions=tuple(new_dims)) if changed else t)
    return MergeResult(ConceptForest(scene_id, tuple(merged), policy), tuple(removals))


# ── serialization ────────────────────────────────────────────────────────────

_TREE_FIELDS = {"concept_id", "root", "dimensions", "provenance"}
_DIM_FIELDS = {"name", "attributes"}


def _tree_payload(tree: ConceptTree) -> dict:
    return {
        "concept_id": tree.concept_id,
        "root": tree.root,
        "dimensions": [
            {"name": d.name, "attributes": list(d.attributes)}
            for d in tree.dimensions
        ],
        "provenance": tree.provenance.value,
    }


def _canonical(obj: dict) -> str:
    # Canonical form: sorted keys, two-space indent, trailing newline.
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def serialize_tree(tree: ConceptTree) -> str:
    return _canonical(_tree_payload(tree))


def serialize_forest(forest: ConceptForest) -> str:
    return _canonical(
        {
            "scene_id": forest.scene_id,
            "overlap_policy": forest.overlap_policy.value,
            "trees": [_tree_payload(t) for t in forest.trees],
        }
    )


def _expect_str(obj: dict, key: str, where: str) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise SchemaError(f"{where}: field {key!r} must be a string")
    return value


def _dim_from_obj(obj: object, where: str) -> Dimension:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: dimension must be an object")
    extra = set(obj) - _DIM_FIELDS
    if extra:
        raise SchemaError(f"{where}: unexpected field {sorted(extra)[0]!r}")
    name = _expect_str(obj, "name", where)
    attrs = obj.get("attributes")
    if not isinstance(attrs, list) or not all(isinstance(a, str) for a in attrs):
        raise SchemaError(f"{where}: 'attributes' must be a list of strings")
    return Dimension(name=name, attributes=tuple(attrs))


def _tree_from_obj(obj: object, where: str = "tree") -> ConceptTree:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: document must be an object")
    extra = set(obj) - _TREE_FIELDS
    if extra:
        raise SchemaError(f"{where}: unexpected field {sorted(extra)[0]!r}")
    missing = _TREE_FIELDS - set(obj)
    if missing:
        raise SchemaError(f"{where}: missing field {sorted(missing)[0]!r}")
    provenance = _expect_str(obj, "provenance", where)
    try:
        prov = Provenance(provenance)
    except ValueError:
        raise SchemaError(f"{where}: unknown provenance {provenance!r}") from None
    dims_obj = obj.get("dimensions")
    if not isinstance(dims_obj, list):
        raise SchemaError(f"{where}: 'dimensions' must be a list")
    dims = tuple(
        _dim_from_obj(d, f"{where}.dimensions[{i}]") for i, d in enumerate(dims_obj)
    )
    return ConceptTree(
        concept_id=_expect_str(obj, "concept_id", where),
        root=_expect_str(obj, "root", where),
        dimensions=dims,
        provenance=prov,
    )


def _parse_json(text: str) -> object:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc


def deserialize_tree(text: str) -> ConceptTree:
    return _tree_from_obj(_parse_json(text))


_FOREST_FIELDS = {"scene_id", "overlap_policy", "trees"}


def deserialize_forest(text: str) -> ConceptForest:
    obj = _parse_json(text)
    if not isinstance(obj, dict):
        raise SchemaError("forest: document must be an object")
    extra = set(obj) - _FOREST_FIELDS
    if extra:
        raise SchemaError(f"forest: unexpected field {sorted(extra)[0]!r}")
    missing = _FOREST_FIELDS - set(obj)
    if missing:
        raise SchemaError(f"forest: missing field {sorted(missing)[0]!r}")
    policy_raw = _expect_str(obj, "overlap_policy", "forest")
    try:
        policy = OverlapPolicy(policy_raw)
    except ValueError:
        raise SchemaError(f"forest: unknown overlap_policy {policy_raw!r}") from None
    trees_obj = obj["trees"]
    if not isinstance(trees_obj, list) or len(trees_obj) < 2:
        raise SchemaError("forest: 'trees' must be a list of at least two trees")
    trees = tuple(
        _tree_from_obj(t, f"trees[{i}]") for i, t in enumerate(trees_obj)
    )
    ids = [t.concept_id for t in trees]
    if len(set(ids)) != len(ids):
        raise SchemaError("forest: concept_ids must be distinct")
    return ConceptForest(_expect_str(obj, "scene_id", "forest"), trees, policy)


def deserialize_document(text: str) -> ConceptTree | ConceptForest:
    """Parse either a tree or a forest document, telling them apart by shape."""
    obj = _parse_json(text)
    if isinstance(obj, dict) and "trees" in obj:
        return deserialize_forest(text)
    return _tree_from_obj(obj)


# ── LLM-facing view ──────────────────────────────────────────────────────────


def llm_doc(tree: ConceptTree) -> str:
    """Compact JSON view used inside prompts: root plus dimensions only."""
    return json.dumps(
        {
            "root": tree.root,
            "dimensions": [
                {"name": d.name, "attributes": list(d.attributes)}
                for d in tree.dimensions
            ],
        },
        indent=2,
        ensure_ascii=False,
    )


def iter_attributes(tree: ConceptTree) -> Iterable[tuple[str, str]]:
    """Yield (dimension name, attribute) pairs in tree order."""
    for dim in tree.dimensions:
        for attr in dim.attributes:
            yield dim.name, attr
