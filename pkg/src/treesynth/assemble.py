"""Training-set assembly: union the four sample pools, attach instruction
pairs, and persist a versioned manifest.

The four roles are kept separate all the way into the manifest so sample
counts stay controllable per role. Synthetic entries must arrive with
kept=true from the filter stage; assembly enforces that rather than
assuming it.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace
from typing import Sequence

from .backends.base import ChatBackend, ImageRef, Message, user_message
from .errors import (
    DuplicateSample,
    MalformedResponse,
    RoleMismatch,
    SchemaError,
    UnfilteredEntry,
)
from .fsio import atomic_write_text, dump_jsonl, read_jsonl

ROLE_USER = "user_positive"
ROLE_SYN_POSITIVE = "syn_positive"
ROLE_EASY_NEGATIVE = "easy_negative"
ROLE_HARD_NEGATIVE = "hard_negative"
ROLES = (ROLE_USER, ROLE_SYN_POSITIVE, ROLE_EASY_NEGATIVE, ROLE_HARD_NEGATIVE)

MANIFEST_FORMAT = "treesynth-manifest"
MANIFEST_VERSION = 1

DEFAULT_N_PAIRS = 2


@dataclass(frozen=True)
class DatasetEntry:
    concept_id: str
    role: str
    sample_ref: ImageRef | None = None
    prompt: str | None = None
    pcs: float | None = None
    seed: int | None = None
    kept: bool | None = None
    instruction_pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise RoleMismatch(f"role must be one of {ROLES}, got {self.role!r}")
        if self.role == ROLE_USER and self.prompt is not None:
            raise RoleMismatch("user images carry no generation prompt")
        if self.role != ROLE_USER and self.seed is None:
            raise RoleMismatch(f"{self.role} entries carry their generation seed")
        object.__setattr__(
            self,
            "instruction_pairs",
            tuple((str(q), str(a)) for q, a in self.instruction_pairs),
        )


@dataclass(frozen=True)
class DatasetManifest:
    concept_ids: tuple[str, ...]
    entries: tuple[DatasetEntry, ...]
    counts: dict[str, int]
    config_digest: str


# ── assembly ─────────────────────────────────────────────────────────────────


def config_digest(config: dict | None) -> str:
    payload = json.dumps(config or {}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _check_group(entries: Sequence[DatasetEntry], role: str) -> None:
    for entry in entries:
        if entry.role != role:
            raise RoleMismatch(
                f"expected role {role}, got {entry.role} for "
                f"{entry.sample_ref.address if entry.sample_ref else '<text-only>'}"
            )
        if role != ROLE_USER and entry.kept is not True:
            raise UnfilteredEntry(
                f"{role} entry "
                f"{entry.sample_ref.address if entry.sample_ref else '<text-only>'} "
                "did not pass its filter"
            )


def assemble(
    user: Sequence[DatasetEntry],
    pos: Sequence[DatasetEntry],
    easy: Sequence[DatasetEntry],
    hard: Sequence[DatasetEntry],
    config: dict | None = None,
) -> DatasetManifest:
    """Union of the four pools with role tags and per-role counts."""
    groups = [
        (user, ROLE_USER),
        (pos, ROLE_SYN_POSITIVE),
        (easy, ROLE_EASY_NEGATIVE),
        (hard, ROLE_HARD_NEGATIVE),
    ]
    for entries, role in groups:
        _check_group(entries, role)
    combined: list[DatasetEntry] = [e for entries, _ in groups for e in entries]
    seen: set[str] = set()
    for entry in combined:
        if entry.sample_ref is None:
            continue
        if entry.sample_ref.address in seen:
            raise DuplicateSample(entry.sample_ref.address)
        seen.add(entry.sample_ref.address)
    counts = {role: len(entries) for entries, role in groups}
    concept_ids = tuple(dict.fromkeys(e.concept_id for e in combined))
    return DatasetManifest(
        concept_ids=concept_ids,
        entries=tuple(combined),
        counts=counts,
        config_digest=config_digest(config),
    )


# ── instruction pairs ────────────────────────────────────────────────────────

_PRESENCE = "Each answer must confirm the concept is present in the image."
_ABSENCE = "Each answer must state that the concept is not present in the image."

_PAIRS_PROMPT = """\
Generate {n} question and answer pairs about this image for the concept \
"{concept_id}". {stance} Reply with only JSON in a fenced code block: a list \
of objects with "question" and "answer" fields."""

_PAIRS_REMINDER = (
    "Please reply with only a JSON list in a fenced code block, each item an "
    'object with "question" and "answer" string fields.'
)

_FENCE_RE = re.compile(r"```[a-zA-Z]*\s*\n(.*?)```", re.S)


def _parse_pairs(reply: str, n_pairs: int) -> tuple[tuple[str, str], ...] | str:
    match = _FENCE_RE.search(reply)
    text = match.group(1) if match else reply[reply.find("[") :]
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return "reply has no parseable JSON list"
    if not isinstance(obj, list):
        return "reply JSON is not a list"
    pairs = []
    for item in obj:
        if (
            not isinstance(item, dict)
            or not isinstance(item.get("question"), str)
            or not isinstance(item.get("answer"), str)
        ):
            return "each item needs question and answer strings"
        pairs.append((item["question"], item["answer"]))
    if len(pairs) < n_pairs:
        return f"got {len(pairs)} pairs, need {n_pairs}"
    return tuple(pairs[:n_pairs])


def generate_instruction_pairs(
    entry: DatasetEntry,
    llm: ChatBackend,
    n_pairs: int = DEFAULT_N_PAIRS,
) -> DatasetEntry:
    """Attach question/answer pairs; negatives are steered to deny the
    concept, positives to confirm it."""
    if n_pairs == 0:
        return entry
    if n_pairs < 0:
        raise ValueError("n_pairs must be >= 0")
    if entry.sample_ref is None:
        raise ValueError("instruction pairs need an image to ask about")
    stance = (
        _PRESENCE
        if entry.role in (ROLE_USER, ROLE_SYN_POSITIVE)
        else _ABSENCE
    )
    prompt = _PAIRS_PROMPT.format(n=n_pairs, concept_id=entry.concept_id, stance=stance)
    messages = [user_message(prompt, images=[entry.sample_ref])]
    reply = llm.chat(messages)
    result = _parse_pairs(reply, n_pairs)
    if isinstance(result, str):
        retry = messages + [
            Message(role="assistant", text=reply),
            user_message(f"{result}. {_PAIRS_REMINDER}"),
        ]
        result = _parse_pairs(llm.chat(retry), n_pairs)
        if isinstance(result, str):
            raise MalformedResponse(result)
    return replace(entry, instruction_pairs=result)


# ── manifest io ──────────────────────────────────────────────────────────────


def _ref_obj(ref: ImageRef | None) -> dict | None:
    if ref is None:
        return None
    return {
        "address": ref.address,
        "width": ref.width,
        "height": ref.height,
        "pixel_format": ref.pixel_format,
    }


def _entry_row(entry: DatasetEntry) -> dict:
    return {
        "concept_id": entry.concept_id,
        "role": entry.role,
        "sample": _ref_obj(entry.sample_ref),
        "prompt": entry.prompt,
        "pcs": entry.pcs,
        "seed": entry.seed,
        "kept": entry.kept,
        "instruction_pairs": [list(p) for p in entry.instruction_pairs],
    }


def _entry_from_row(row: dict, index: int) -> DatasetEntry:
    try:
        sample = row["sample"]
        ref = None
        if sample is not None:
            ref = ImageRef(
                address=sample["address"],
                width=sample["width"],
                height=sample["height"],
                pixel_format=sample.get("pixel_format", "rgb8"),
            )
        return DatasetEntry(
            concept_id=row["concept_id"],
            role=row["role"],
            sample_ref=ref,
            prompt=row.get("prompt"),
            pcs=row.get("pcs"),
            seed=row.get("seed"),
            kept=row.get("kept"),
            instruction_pairs=tuple(
                (q, a) for q, a in row.get("instruction_pairs", [])
            ),
        )
    except (KeyError, TypeError, ValueError, RoleMismatch) as exc:
        raise SchemaError(f"manifest entry {index}: {exc}") from exc


def write_manifest(manifest: DatasetManifest, path) -> None:
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "concept_ids": list(manifest.concept_ids),
        "counts": manifest.counts,
        "config_digest": manifest.config_digest,
    }
    rows = [header] + [_entry_row(e) for e in manifest.entries]
    atomic_write_text(path, dump_jsonl(rows))


def read_manifest(path) -> DatasetManifest:
    rows = read_jsonl(path)
    if not rows:
        raise SchemaError("manifest file has no header record")
    header = rows[0]
    if header.get("format") != MANIFEST_FORMAT:
        raise SchemaError(f"not a {MANIFEST_FORMAT} file")
    if header.get("version") != MANIFEST_VERSION:
        raise SchemaError(f"unsupported manifest version {header.get('version')!r}")
    entries = tuple(_entry_from_row(row, i) for i, row in enumerate(rows[1:]))
    counts = {role: 0 for role in ROLES}
    for entry in entries:
        counts[entry.role] += 1
    declared = header.get("counts")
    if declared != counts:
        raise SchemaError(
            f"entry tally {counts} does not match declared counts {declared}"
        )
    return DatasetManifest(
        concept_ids=tuple(header.get("concept_ids", ())),
        entries=entries,
        counts=counts,
        config_digest=header.get("config_digest", ""),
    )
