"""Tree construction and LLM-mediated derivations.

The construction pipeline is: describe each image, summarize the captions
into a draft tree, then iteratively refine the draft against the captions.
Derivations (easy-negative trees, counted edit operations) send one of the
shipped templates and parse the tree out of the reply.

Replies must embed trees in a fenced code block; every operation gives the
model one automatic re-ask with a reminder before raising.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, replace
from typing import Sequence

from . import templates
from .backends.base import ChatBackend, ImageRef, Message, user_message
from .errors import (
    EditCountMismatch,
    MalformedResponse,
    SameClassReturned,
    TreeError,
    ValidationFailed,
)
from .tree import (
    ConceptTree,
    Dimension,
    Provenance,
    TreeEdit,
    apply_edit_sequence,
    llm_doc,
    validate,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BuilderOptions:
    """Knobs for construction; defaults documented in the README."""

    rounds: int = 3
    quorum: int = 2
    max_refine_iters: int = 5
    # How often a content-level parse failure re-sends the same request
    # (mirrors the transport retry budget of the HTTP backends).
    content_retries: int = 3

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 1 <= self.quorum <= self.rounds:
            raise ValueError("quorum must be between 1 and rounds")
        if self.max_refine_iters < 0:
            raise ValueError("max_refine_iters must be >= 0")
        if self.content_retries < 0:
            raise ValueError("content_retries must be >= 0")


DEFAULT_OPTIONS = BuilderOptions()


@dataclass(frozen=True)
class CaptionSet:
    concept_id: str
    captions: tuple[tuple[ImageRef, str], ...]
    class_name: str

    def texts(self) -> list[str]:
        return [text for _, text in self.captions]


@dataclass(frozen=True)
class RefineFeedback:
    kind: str  # hallucination | redundant | missing
    keywords: tuple[str, ...]

    _ARITY = {"hallucination": 0, "redundant": 1, "missing": 1}

    def __post_init__(self):
        if self.kind not in self._ARITY:
            raise ValueError(f"unknown feedback kind {self.kind!r}")
        object.__setattr__(self, "keywords", tuple(self.keywords))
        if len(self.keywords) != self._ARITY[self.kind]:
            raise ValueError(
                f"{self.kind} feedback needs {self._ARITY[self.kind]} keyword(s)"
            )


@dataclass(frozen=True)
class VoteResult:
    caption_ref: ImageRef | None
    rounds: tuple[dict[str, str], ...]
    winners: dict[str, str]
    consensus: bool


@dataclass(frozen=True)
class RefineResult:
    """refine() outcome; converged=False means max_iters ran out."""

    tree: ConceptTree
    converged: bool
    iterations: int


# ── reply parsing ────────────────────────────────────────────────────────────

_FENCE_RE = re.compile(r"```[a-zA-Z]*\s*\n(.*?)```", re.S)
_CLASS_RE = re.compile(
    r"class name(?:\s+in the image)?\s*(?:is|:)\s*([^.\n,;!?]+)", re.I
)

FORMAT_REMINDER = (
    "Please reply with only the tree as JSON inside a fenced code block "
    '(```json ... ```), with a "root" string and a "dimensions" list where '
    'each dimension has a "name" and a list of "attributes".'
)


def _extract_fenced(reply: str) -> str | None:
    match = _FENCE_RE.search(reply)
    return match.group(1) if match else None


def _extract_json_object(reply: str) -> dict | None:
    """First JSON object in the reply, fenced or inline."""
    fenced = _extract_fenced(reply)
    candidates = [fenced] if fenced is not None else []
    start = reply.find("{")
    if start != -1:
        candidates.append(reply[start : reply.rfind("}") + 1])
    for text in candidates:
        if not text:
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _tree_from_reply(
    reply: str, concept_id: str, provenance: Provenance
) -> ConceptTree | str:
    """Parse the LLM tree shape; returns a problem string on failure."""
    fenced = _extract_fenced(reply)
    if fenced is None:
        return "reply has no fenced code block"
    try:
        obj = json.loads(fenced)
    except json.JSONDecodeError as exc:
        return f"fenced block is not valid JSON ({exc.msg})"
    if not isinstance(obj, dict):
        return "fenced JSON is not an object"
    root = obj.get("root")
    dims_obj = obj.get("dimensions")
    if not isinstance(root, str) or not isinstance(dims_obj, list):
        return "tree JSON needs a 'root' string and a 'dimensions' list"
    dims: list[Dimension] = []
    for entry in dims_obj:
        if (
            not isinstance(entry, dict)
            or not isinstance(entry.get("name"), str)
            or not isinstance(entry.get("attributes"), list)
            or not all(isinstance(a, str) for a in entry["attributes"])
        ):
            return "each dimension needs a 'name' and string 'attributes'"
        dims.append(Dimension(entry["name"], tuple(entry["attributes"])))
    tree = ConceptTree(
        concept_id=concept_id,
        root=root,
        dimensions=tuple(dims),
        provenance=provenance,
    )
    report = validate(tree)
    if not report.ok:
        return "tree fails validation: " + "; ".join(report.violations)
    return tree


def _ask_tree(
    llm: ChatBackend,
    messages: list[Message],
    concept_id: str,
    provenance: Provenance,
    invalid_error: type[Exception],
    reminder: str = FORMAT_REMINDER,
) -> ConceptTree:
    """Ask for a tree; one automatic re-ask with a reminder, then raise."""
    reply = llm.chat(messages)
    result = _tree_from_reply(reply, concept_id, provenance)
    if isinstance(result, ConceptTree):
        return result
    retry = messages + [
        Message(role="assistant", text=reply),
        user_message(f"{result}. {reminder}"),
    ]
    second = llm.chat(retry)
    result = _tree_from_reply(second, concept_id, provenance)
    if isinstance(result, ConceptTree):
        return result
    if "validation" in result:
        raise invalid_error(result)
    raise MalformedResponse(result)


# ── describe ─────────────────────────────────────────────────────────────────


def extract_class_name(reply: str) -> str | None:
    match = _CLASS_RE.search(reply)
    if not match:
        return None
    name = match.group(1).strip().strip('"').strip()
    return name or None


def describe_images(
    images: Sequence[ImageRef],
    vlm: ChatBackend,
    options: BuilderOptions = DEFAULT_OPTIONS,
    concept_id: str | None = None,
) -> CaptionSet:
    """One caption per image; class name by majority vote across replies.

    Ties are broken lexicographically. A reply without a parseable class
    name is re-requested up to options.content_retries times.
    """
    if not images:
        raise ValueError("describe_images needs at least one image")
    prompt = templates.render("image_description")
    captions: list[tuple[ImageRef, str]] = []
    names: list[str] = []
    for ref in images:
        messages = [user_message(prompt, images=[ref])]
        name: str | None = None
        reply = ""
        for _ in range(options.content_retries + 1):
            reply = vlm.chat(messages)
            name = extract_class_name(reply)
            if name is not None:
                break
        if name is None:
            raise MalformedResponse(
                f"no class name parseable from description of {ref.address}"
            )
        captions.append((ref, reply))
        names.append(name)
    counts = Counter(n.casefold() for n in names)
    winner_key = min(counts, key=lambda k: (-counts[k], k))
    winner = next(n for n in names if n.casefold() == winner_key)
    if concept_id is None:
        concept_id = f"concept-{winner_key.replace(' ', '-')}"
    return CaptionSet(
        concept_id=concept_id, captions=tuple(captions), class_name=winner
    )


# ── summarize ────────────────────────────────────────────────────────────────


def summarize_batch(
    caps: CaptionSet,
    llm: ChatBackend,
    options: BuilderOptions = DEFAULT_OPTIONS,
) -> ConceptTree:
    """Draft tree from the caption batch; root is the voted class name."""
    if not caps.captions or not caps.class_name:
        raise ValueError("caption set is incomplete")
    prompt = templates.render(
        "batch_summarization",
        tree_example=templates.TREE_EXAMPLE,
        class_name=caps.class_name,
        captions="; ".join(caps.texts()),
    )
    tree = _ask_tree(
        llm,
        [user_message(prompt)],
        concept_id=caps.concept_id,
        provenance=Provenance.LLM_BUILT,
        invalid_error=ValidationFailed,
    )
    # the voted class name is authoritative for the root
    if tree.root.strip().casefold() != caps.class_name.strip().casefold():
        tree = replace(tree, root=caps.class_name)
    return tree


# ── classify / vote ──────────────────────────────────────────────────────────

_CLASSIFY_PROMPT = """\
Round {round}: Assign the caption to exactly one attribute per dimension of \
the concept tree. Reply with only JSON in a fenced code block mapping each \
dimension name to one of its attributes.
Caption: {caption}
Concept tree: {concept_tree}"""


def _parse_votes(reply: str, tree: ConceptTree) -> dict[str, str]:
    obj = _extract_json_object(reply)
    if obj is None:
        return {}
    votes: dict[str, str] = {}
    for dim_name, attr in obj.items():
        if not isinstance(dim_name, str) or not isinstance(attr, str):
            continue
        dim = tree.find(dim_name)
        if dim is None:
            continue
        matches = [a for a in dim.attributes if a.strip().casefold() == attr.strip().casefold()]
        if matches:
            votes[dim.name] = matches[0]
    return votes


def classify_caption(
    tree: ConceptTree,
    caption: str,
    llm: ChatBackend,
    rounds: int = DEFAULT_OPTIONS.rounds,
    quorum: int = DEFAULT_OPTIONS.quorum,
    caption_ref: ImageRef | None = None,
) -> VoteResult:
    """Multi-round voting: consensus iff every dimension has an attribute
    winning at least `quorum` rounds."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if not 1 <= quorum <= rounds:
        raise ValueError("quorum must be between 1 and rounds")
    all_votes: list[dict[str, str]] = []
    for round_index in range(1, rounds + 1):
        prompt = _CLASSIFY_PROMPT.format(
            round=round_index, caption=caption, concept_tree=llm_doc(tree)
        )
        reply = llm.chat([user_message(prompt)])
        all_votes.append(_parse_votes(reply, tree))
    winners: dict[str, str] = {}
    for dim in tree.dimensions:
        tally: Counter[str] = Counter()
        for votes in all_votes:
            if dim.name in votes:
                tally[votes[dim.name]] += 1
        if not tally:
            continue
        attr, count = min(tally.items(), key=lambda kv: (-kv[1], kv[0]))
        if count >= quorum:
            winners[dim.name] = attr
    consensus = len(winners) == len(tree.dimensions)
    return VoteResult(
        caption_ref=caption_ref,
        rounds=tuple(all_votes),
        winners=winners,
        consensus=consensus,
    )


# ── refine ───────────────────────────────────────────────────────────────────

_FEEDBACK_REMINDER = (
    "Please reply with exactly one JSON object in a fenced code block, one of: "
    '{"hallucination": []}, {"redundant": ["keyword"]}, {"missing": ["keyword"]}.'
)

_MISSING_DIM_PROMPT = """\
The attribute "{keyword}" is missing from the concept tree. Reply with only \
JSON in a fenced code block of the form {{"dimension": "name"}} naming the \
dimension that should hold it. You may name a new dimension.
Concept tree: {concept_tree}"""


def _parse_feedback(reply: str) -> RefineFeedback | str:
    obj = _extract_json_object(reply)
    if obj is None:
        return "reply has no JSON object"
    keys = [k for k in ("hallucination", "redundant", "missing") if k in obj]
    if len(keys) != 1:
        return "reply must contain exactly one feedback key"
    kind = keys[0]
    value = obj[kind]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        return f"{kind} value must be a list of strings"
    try:
        return RefineFeedback(kind=kind, keywords=tuple(value))
    except ValueError as exc:
        return str(exc)


def request_feedback(
    tree: ConceptTree, caption: str, llm: ChatBackend
) -> RefineFeedback:
    prompt = templates.render(
        "self_refinement", captions=caption, concept_tree=llm_doc(tree)
    )
    messages = [user_message(prompt)]
    reply = llm.chat(messages)
    result = _parse_feedback(reply)
    if isinstance(result, RefineFeedback):
        return result
    retry = messages + [
        Message(role="assistant", text=reply),
        user_message(f"{result}. {_FEEDBACK_REMINDER}"),
    ]
    result = _parse_feedback(llm.chat(retry))
    if isinstance(result, RefineFeedback):
        return result
    raise MalformedResponse(result)


def _norm(text: str) -> str:
    return text.strip().casefold()


def _keyword_matches(attribute: str, keyword: str) -> bool:
    a, k = _norm(attribute), _norm(keyword)
    if a == k:
        return True
    # whole-word containment either way
    return (
        re.search(rf"\b{re.escape(k)}\b", a) is not None
        or re.search(rf"\b{re.escape(a)}\b", k) is not None
    )


def apply_redundant(tree: ConceptTree, keyword: str) -> ConceptTree:
    """Collapse attributes matching the keyword into the keyword itself.

    The unified keyword lands in the dimension that held the most matches
    (ties: earliest in tree order); dimensions emptied by the merge are
    dropped. Provenance is preserved — refinement is part of construction.
    """
    match_counts = [
        sum(1 for a in dim.attributes if _keyword_matches(a, keyword))
        for dim in tree.dimensions
    ]
    if sum(match_counts) == 0:
        return tree
    host = match_counts.index(max(match_counts))
    new_dims: list[Dimension] = []
    for i, dim in enumerate(tree.dimensions):
        attrs = [a for a in dim.attributes if not _keyword_matches(a, keyword)]
        if i == host and not any(_norm(a) == _norm(keyword) for a in attrs):
            attrs.append(keyword)
        if attrs:
            new_dims.append(Dimension(dim.name, tuple(attrs)))
    if not new_dims:  # degenerate: keep the keyword alive in the host dimension
        new_dims = [Dimension(tree.dimensions[host].name, (keyword,))]
    return replace(tree, dimensions=tuple(new_dims))


def apply_missing(tree: ConceptTree, keyword: str, llm: ChatBackend) -> ConceptTree:
    """Add the keyword to an LLM-chosen dimension, creating it if needed."""
    prompt = _MISSING_DIM_PROMPT.format(keyword=keyword, concept_tree=llm_doc(tree))
    messages = [user_message(prompt)]
    for attempt in range(2):
        reply = llm.chat(messages)
        obj = _extract_json_object(reply)
        if obj is not None and isinstance(obj.get("dimension"), str):
            dim_name = obj["dimension"].strip()
            if dim_name:
                break
        messages = messages + [
            Message(role="assistant", text=reply),
            user_message(
                'Reply with only JSON in a fenced code block of the form '
                '{"dimension": "name"}.'
            ),
        ]
    else:
        raise MalformedResponse("no dimension name parseable from reply")
    existing = tree.find(dim_name)
    if existing is None:
        new_dims = tree.dimensions + (Dimension(dim_name, (keyword,)),)
    elif any(_norm(a) == _norm(keyword) for a in existing.attributes):
        return tree
    else:
        new_dims = tuple(
            Dimension(d.name, d.attributes + (keyword,)) if d is existing else d
            for d in tree.dimensions
        )
    return replace(tree, dimensions=new_dims)


def refine(
    tree: ConceptTree,
    caps: CaptionSet,
    llm: ChatBackend,
    options: BuilderOptions = DEFAULT_OPTIONS,
) -> RefineResult:
    """Iterate feedback on captions that fail classification consensus.

    Stops as soon as every caption reaches consensus; hitting the iteration
    cap returns the best tree with converged=False and a logged warning.
    """
    report = validate(tree)
    if not report.ok:
        raise ValueError("refine needs a valid tree: " + "; ".join(report.violations))
    current = tree
    for iteration in range(options.max_refine_iters):
        failing = [
            (ref, text)
            for ref, text in caps.captions
            if not classify_caption(
                current, text, llm, options.rounds, options.quorum, caption_ref=ref
            ).consensus
        ]
        if not failing:
            return RefineResult(tree=current, converged=True, iterations=iteration)
        for _, text in failing:
            feedback = request_feedback(current, text, llm)
            if feedback.kind == "redundant":
                current = apply_redundant(current, feedback.keywords[0])
            elif feedback.kind == "missing":
                current = apply_missing(current, feedback.keywords[0], llm)
            # hallucination: leave the tree alone
    logger.warning(
        "refine did not converge after %d iterations", options.max_refine_iters
    )
    return RefineResult(
        tree=current, converged=False, iterations=options.max_refine_iters
    )


# ── composition ──────────────────────────────────────────────────────────────


def build_tree(
    images: Sequence[ImageRef],
    vlm: ChatBackend,
    llm: ChatBackend,
    options: BuilderOptions = DEFAULT_OPTIONS,
    concept_id: str | None = None,
) -> ConceptTree:
    """describe -> summarize -> refine; returns an llm_built tree."""
    caps = describe_images(images, vlm, options, concept_id=concept_id)
    draft = summarize_batch(caps, llm, options)
    return refine(draft, caps, llm, options).tree


# ── derivations ──────────────────────────────────────────────────────────────


def derive_easy_negative_tree(
    tree: ConceptTree,
    llm: ChatBackend,
    options: BuilderOptions = DEFAULT_OPTIONS,
) -> ConceptTree:
    """New class name plus regenerated dimensions; same shape, other concept."""
    prompt = templates.render("easy_negative", concept_tree=llm_doc(tree))
    easy_id = f"{tree.concept_id}.easy"
    messages = [user_message(prompt)]
    result = _ask_tree(
        llm,
        messages,
        concept_id=easy_id,
        provenance=Provenance.DERIVED_EASY_NEGATIVE,
        invalid_error=MalformedResponse,
    )
    if _norm(result.root) != _norm(tree.root):
        return result
    retry = messages + [
        Message(role="assistant", text=f"```json\n{llm_doc(result)}\n```"),
        user_message(
            "The class name must differ from the original. Please choose a "
            "different class and output the new visual definition tree."
        ),
    ]
    result = _ask_tree(
        llm,
        retry,
        concept_id=easy_id,
        provenance=Provenance.DERIVED_EASY_NEGATIVE,
        invalid_error=MalformedResponse,
    )
    if _norm(result.root) == _norm(tree.root):
        raise SameClassReturned(f"easy-negative tree kept root {tree.root!r}")
    return result


_EDIT_TEMPLATES = {"add": "edit_add", "remove": "edit_remove", "modify": "edit_modify"}


def _recover_edits(
    old: ConceptTree, new: ConceptTree
) -> tuple[list[TreeEdit], dict[str, int]] | str:
    """Diff two trees into TreeEdits; returns a problem string when the
    reply cannot correspond to dimension-level edits."""
    if _norm(old.root) != _norm(new.root):
        return f"reply changed the class name to {new.root!r}"
    old_by_name = {_norm(d.name): d for d in old.dimensions}
    new_by_name = {_norm(d.name): d for d in new.dimensions}
    removed = [k for k in old_by_name if k not in new_by_name]
    added = [k for k in new_by_name if k not in old_by_name]
    changed = [
        k
        for k in old_by_name
        if k in new_by_name and old_by_name[k] != new_by_name[k]
    ]
    edits: list[TreeEdit] = []
    # in-place attribute/name changes are Modify
    for k in changed:
        edits.append(TreeEdit.modify(old_by_name[k].name, new_by_name[k]))
    # a removed name paired with an added name is one Modify
    pairs = min(len(removed), len(added))
    for old_key, new_key in zip(removed[:pairs], added[:pairs]):
        edits.append(TreeEdit.modify(old_by_name[old_key].name, new_by_name[new_key]))
    counts = {
        "modify": len(changed) + pairs,
        "remove": len(removed) - pairs,
        "add": len(added) - pairs,
    }
    for k in removed[pairs:]:
        edits.append(TreeEdit.remove(old_by_name[k].name))
    for k in added[pairs:]:
        edits.append(TreeEdit.add(new_by_name[k]))
    return edits, counts


def edit_tree_llm(
    tree: ConceptTree,
    kind: str,
    num: int,
    llm: ChatBackend,
    options: BuilderOptions = DEFAULT_OPTIONS,
) -> tuple[ConceptTree, list[TreeEdit]]:
    """LLM proposes the edited tree; the diff must be exactly `num` edits
    of the requested kind. One corrective re-ask, then EditCountMismatch."""
    kind = kind.lower()
    if kind not in _EDIT_TEMPLATES:
        raise ValueError(f"kind must be one of {sorted(_EDIT_TEMPLATES)}")
    if num < 1:
        raise ValueError("num must be >= 1")
    if kind == "remove" and num >= len(tree.dimensions):
        raise ValueError(
            f"cannot remove {num} of {len(tree.dimensions)} dimensions; "
            "at least one must remain"
        )
    prompt = templates.render(
        _EDIT_TEMPLATES[kind], num=num, concept_tree=llm_doc(tree)
    )
    messages = [user_message(prompt)]
    proposal = _ask_tree(
        llm,
        messages,
        concept_id=tree.concept_id,
        provenance=Provenance.DERIVED_EDIT,
        invalid_error=MalformedResponse,
    )
    outcome = _recover_edits(tree, proposal)
    problem = outcome if isinstance(outcome, str) else None
    if problem is None:
        edits, counts = outcome
        expected = {k: (num if k == kind else 0) for k in counts}
        if counts != expected:
            problem = f"diff found {counts}, wanted exactly {num} {kind}"
    if problem is not None:
        retry = messages + [
            Message(role="assistant", text=f"```json\n{llm_doc(proposal)}\n```"),
            user_message(
                f"{problem}. Please apply exactly {num} {kind} operation(s) "
                "to the dimensions, keep the class name unchanged, and only "
                "output the new visual definition tree."
            ),
        ]
        proposal = _ask_tree(
            llm,
            retry,
            concept_id=tree.concept_id,
            provenance=Provenance.DERIVED_EDIT,
            invalid_error=MalformedResponse,
        )
        outcome = _recover_edits(tree, proposal)
        if isinstance(outcome, str):
            raise EditCountMismatch(outcome)
        edits, counts = outcome
        expected = {k: (num if k == kind else 0) for k in counts}
        if counts != expected:
            raise EditCountMismatch(
                f"diff found {counts}, wanted exactly {num} {kind}"
            )
    try:
        result = apply_edit_sequence(tree, edits)
    except TreeError as exc:
        raise MalformedResponse(
            f"reply tree is not reachable by dimension edits: {exc}"
        ) from exc
    return result, edits
