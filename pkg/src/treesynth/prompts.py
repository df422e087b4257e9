"""Prompt synthesis: turn trees and forests into generation prompts.

Attribute combinations are sampled without replacement from the Cartesian
space of one-pick-per-dimension assignments, so a plan never repeats a
combination. All sampling is seeded and deterministic.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from . import templates
from .backends.base import ChatBackend, user_message
from .errors import MalformedResponse, ProvenanceMismatch, SchemaError
from .fsio import read_jsonl, write_jsonl
from .tree import ConceptForest, ConceptTree, OverlapPolicy, Provenance, llm_doc

logger = logging.getLogger(__name__)

# Above this assignment-space size, sampling switches from a full shuffled
# enumeration to rejection sampling to keep memory bounded.
EXHAUSTIVE_LIMIT = 10**6


class PromptRole(str, Enum):
    POSITIVE = "positive"
    EASY_NEGATIVE = "easy_negative"
    HARD_NEGATIVE = "hard_negative"


@dataclass(frozen=True)
class AttributeAssignment:
    """One attribute picked per dimension (picks keep tree dimension order)."""

    tree_ref: str
    picks: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "picks", tuple(tuple(p) for p in self.picks))

    def picks_dict(self) -> dict[str, str]:
        return dict(self.picks)


@dataclass(frozen=True)
class PromptSpec:
    """One prompt to send to the image backend.

    assignments is empty for positives, holds one entry for single-tree
    negatives, and one entry per tree for forest prompts.
    """

    text: str
    role: PromptRole
    assignments: tuple[AttributeAssignment, ...]
    source_tree: str
    seed: int

    def __post_init__(self):
        if not self.text:
            raise ValueError("prompt text must be non-empty")
        object.__setattr__(self, "role", PromptRole(self.role))
        object.__setattr__(self, "assignments", tuple(self.assignments))


# ── combinatorial enumeration ────────────────────────────────────────────────


def _space_size(tree: ConceptTree) -> int:
    return math.prod(len(d.attributes) for d in tree.dimensions)


def _decode(tree: ConceptTree, index: int) -> AttributeAssignment:
    # Mixed-radix decode; the first dimension varies fastest.
    picks: list[tuple[str, str]] = []
    for dim in tree.dimensions:
        count = len(dim.attributes)
        picks.append((dim.name, dim.attributes[index % count]))
        index //= count
    return AttributeAssignment(tree_ref=tree.concept_id, picks=tuple(picks))


def _sample_indices(total: int, limit: int, seed: int) -> list[int]:
    want = min(limit, total)
    if total <= EXHAUSTIVE_LIMIT:
        indices = list(range(total))
        random.Random(seed).shuffle(indices)
        return indices[:want]
    rng = random.Random(seed)
    seen: set[int] = set()
    out: list[int] = []
    while len(out) < want:
        index = rng.randrange(total)
        if index not in seen:
            seen.add(index)
            out.append(index)
    return out


def enumerate_assignments(
    tree: ConceptTree, limit: int, seed: int
) -> list[AttributeAssignment]:
    """min(limit, space size) distinct full assignments, seeded."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    return [_decode(tree, i) for i in _sample_indices(_space_size(tree), limit, seed)]


def render_prompt(assignment: AttributeAssignment, root: str) -> str:
    parts = [attr for _, attr in assignment.picks]
    parts.append(root)
    return "a photo of " + ", ".join(parts)


# ── role-specific plans ──────────────────────────────────────────────────────


def positive_prompts(
    tree: ConceptTree, subject_token: str, n: int
) -> list[PromptSpec]:
    """Prompts for the fine-tuned backend: the subject token plus the root."""
    if not subject_token:
        raise ValueError("subject_token must be non-empty")
    if n < 1:
        raise ValueError("n must be >= 1")
    text = f"a photo of {subject_token} {tree.root}"
    return [
        PromptSpec(
            text=text,
            role=PromptRole.POSITIVE,
            assignments=(),
            source_tree=tree.concept_id,
            seed=i,
        )
        for i in range(n)
    ]


_ROLE_PROVENANCE = {
    PromptRole.EASY_NEGATIVE: Provenance.DERIVED_EASY_NEGATIVE,
    PromptRole.HARD_NEGATIVE: Provenance.DERIVED_EDIT,
}


def negative_prompts(
    tree: ConceptTree, role: PromptRole, limit: int, seed: int
) -> list[PromptSpec]:
    role = PromptRole(role)
    expected = _ROLE_PROVENANCE.get(role)
    if expected is None:
        raise ValueError("negative_prompts handles negative roles only")
    if tree.provenance is not expected:
        raise ProvenanceMismatch(
            f"role {role.value} needs a {expected.value} tree, "
            f"got {tree.provenance.value}"
        )
    specs = []
    for i, assignment in enumerate(enumerate_assignments(tree, limit, seed)):
        specs.append(
            PromptSpec(
                text=render_prompt(assignment, tree.root),
                role=role,
                assignments=(assignment,),
                source_tree=tree.concept_id,
                seed=i,
            )
        )
    return specs


def forest_prompts(forest: ConceptForest, limit: int, seed: int) -> list[PromptSpec]:
    """Multi-subject prompts, one assignment per tree, joined with "and"."""
    if forest.overlap_policy is not OverlapPolicy.DISJOINT_ATTRIBUTES:
        raise ProvenanceMismatch("forest prompts require the disjoint policy")
    if limit < 1:
        raise ValueError("limit must be >= 1")
    seen_attrs: set[str] = set()
    for t in forest.trees:
        for d in t.dimensions:
            for a in d.attributes:
                key = a.strip().casefold()
                if key in seen_attrs:
                    raise ValueError(
                        f"forest shares attribute {a!r} across trees"
                    )
                seen_attrs.add(key)

    sizes = [_space_size(t) for t in forest.trees]
    total = math.prod(sizes)
    specs: list[PromptSpec] = []
    for i, joint in enumerate(_sample_indices(total, limit, seed)):
        fragments: list[str] = []
        assignments: list[AttributeAssignment] = []
        remainder = joint
        for t, size in zip(forest.trees, sizes):
            assignment = _decode(t, remainder % size)
            remainder //= size
            assignments.append(assignment)
            fragments.append(
                ", ".join([a for _, a in assignment.picks] + [t.root])
            )
        specs.append(
            PromptSpec(
                text="a photo of " + " and ".join(fragments),
                role=PromptRole.POSITIVE,
                assignments=tuple(assignments),
                source_tree=forest.scene_id,
                seed=i,
            )
        )
    return specs


# ── LLM-written prompts ──────────────────────────────────────────────────────


def _role_for_tree(tree: ConceptTree) -> PromptRole:
    if tree.provenance is Provenance.DERIVED_EASY_NEGATIVE:
        return PromptRole.EASY_NEGATIVE
    if tree.provenance is Provenance.DERIVED_EDIT:
        return PromptRole.HARD_NEGATIVE
    return PromptRole.POSITIVE


def llm_prompts(
    tree: ConceptTree,
    llm: ChatBackend,
    n: int = 100,
    role: PromptRole | None = None,
) -> list[PromptSpec]:
    """Ask the chat model for prompt lines; dedupe; report shortfalls.

    The template always asks for at least 100 prompts regardless of n; n
    only controls the shortfall warning and the returned cap.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rendered = templates.render(
        "prompt_generation", category=tree.root, concept_tree=llm_doc(tree)
    )
    reply = llm.chat([user_message(rendered)])
    lines: list[str] = []
    seen: set[str] = set()
    for raw in reply.splitlines():
        line = raw.strip()
        if not line or line in seen:
            continue
        seen.add(line)
        lines.append(line)
    if not lines:
        raise MalformedResponse("prompt generation reply had no usable lines")
    if len(lines) < n:
        logger.warning(
            "prompt generation returned %d distinct prompts, wanted %d",
            len(lines),
            n,
        )
    resolved = PromptRole(role) if role is not None else _role_for_tree(tree)
    return [
        PromptSpec(
            text=line,
            role=resolved,
            assignments=(),
            source_tree=tree.concept_id,
            seed=i,
        )
        for i, line in enumerate(lines[:n])
    ]


# ── plan files ───────────────────────────────────────────────────────────────


def write_plan(path, specs: Sequence[PromptSpec]) -> None:
    write_jsonl(
        path,
        (
            {
                "text": s.text,
                "role": s.role.value,
                "seed": s.seed,
                "source_tree": s.source_tree,
                "assignments": [
                    {"tree_ref": a.tree_ref, "picks": a.picks_dict()}
                    for a in s.assignments
                ],
            }
            for s in specs
        ),
    )


def read_plan(path) -> list[PromptSpec]:
    specs: list[PromptSpec] = []
    for i, row in enumerate(read_jsonl(path)):
        try:
            specs.append(
                PromptSpec(
                    text=row["text"],
                    role=PromptRole(row["role"]),
                    assignments=tuple(
                        AttributeAssignment(
                            tree_ref=a["tree_ref"],
                            picks=tuple(a["picks"].items()),
                        )
                        for a in row.get("assignments", [])
                    ),
                    source_tree=row["source_tree"],
                    seed=row["seed"],
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"plan row {i}: {exc}") from exc
    return specs
