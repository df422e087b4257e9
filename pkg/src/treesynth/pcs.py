"""Perturbation scoring and threshold filtering for generated images.

A sample's concept-specificity is measured by how much its similarity to
the reference images drops after a patch-level perturbation: score =
S_original - S_disturbed. Samples whose score clears the role threshold
are kept. Easy negatives use a plain text-to-image similarity gate
instead.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .backends.base import EmbeddingBackend, EmbeddingVector, ImageRef
from .backends.store import ContentStore
from .errors import (
    BadFraction,
    DimMismatch,
    EmptyInput,
    GridMismatch,
    SchemaError,
    ZeroVector,
)
from .fsio import read_jsonl, write_jsonl

SHUFFLE_SELF = "shuffle_self"
MIX_WITH_REFERENCE = "mix_with_reference"
PERTURB_MODES = (SHUFFLE_SELF, MIX_WITH_REFERENCE)

# default decision thresholds per sample role
DEFAULT_TAUS = {"positive": 0.3, "hard_negative": 0.1}
DEFAULT_TAU_TEXT = 0.2

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class PerturbConfig:
    patch_size: int = 14
    mode: str = SHUFFLE_SELF
    seed: int = 0
    shuffle_fraction: float = 0.5

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.mode not in PERTURB_MODES:
            raise ValueError(f"mode must be one of {PERTURB_MODES}")
        if not 0.0 <= self.shuffle_fraction <= 1.0:
            raise BadFraction(
                f"shuffle_fraction must be in [0, 1], got {self.shuffle_fraction}"
            )
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class ReferenceScore:
    reference: str  # store address
    s_original: float
    s_disturbed: float


@dataclass(frozen=True)
class PCSRecord:
    sample_ref: ImageRef
    s_original: float
    s_disturbed: float
    pcs: float
    threshold: float
    kept: bool
    per_reference: tuple[ReferenceScore, ...] = ()


@dataclass(frozen=True)
class EasyNegativeRecord:
    sample_ref: ImageRef
    prompt: str
    similarity: float
    threshold: float
    kept: bool


# ── perturbation ─────────────────────────────────────────────────────────────


def _pad_to_grid(pixels: np.ndarray, patch: int) -> np.ndarray:
    """Edge-replicate so both image dimensions are multiples of the patch."""
    h, w = pixels.shape[:2]
    pad_h = (-h) % patch
    pad_w = (-w) % patch
    if pad_h == 0 and pad_w == 0:
        return pixels
    return np.pad(pixels, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")


def _patch_grid(pixels: np.ndarray, patch: int) -> tuple[int, int]:
    return pixels.shape[0] // patch, pixels.shape[1] // patch


def _patch_view(pixels: np.ndarray, row: int, col: int, patch: int) -> np.ndarray:
    return pixels[row * patch : (row + 1) * patch, col * patch : (col + 1) * patch]


def sample_seed(global_seed: int, sample: ImageRef) -> int:
    """Per-sample seed so scoring is independent of batch order."""
    digest = hashlib.sha256(sample.address.encode("utf-8")).digest()
    return global_seed ^ int.from_bytes(digest[:8], "big")


def patch_shuffle(
    img: ImageRef,
    cfg: PerturbConfig,
    store: ContentStore,
    reference: ImageRef | None = None,
) -> ImageRef:
    """Permute (or replace, in mix mode) a seeded subset of patches.

    Images are padded by edge replication to a patch multiple first. With
    shuffle_fraction 0 the input ref is returned untouched.
    """
    if cfg.shuffle_fraction == 0.0:
        return img
    pixels = _pad_to_grid(store.load_image(img), cfg.patch_size)
    rows, cols = _patch_grid(pixels, cfg.patch_size)
    total = rows * cols
    count = math.ceil(cfg.shuffle_fraction * total)
    rng = np.random.default_rng(cfg.seed)
    chosen = np.sort(rng.choice(total, size=count, replace=False))

    out = pixels.copy()
    if cfg.mode == SHUFFLE_SELF:
        perm = rng.permutation(count)
        if count >= 2:
            # a do-nothing draw defeats the point of the perturbation
            while np.array_equal(perm, np.arange(count)):
                perm = rng.permutation(count)
        for dst_i, src_i in enumerate(perm):
            dst, src = int(chosen[dst_i]), int(chosen[src_i])
            out[
                (dst // cols) * cfg.patch_size : (dst // cols + 1) * cfg.patch_size,
                (dst % cols) * cfg.patch_size : (dst % cols + 1) * cfg.patch_size,
            ] = _patch_view(pixels, src // cols, src % cols, cfg.patch_size)
    else:
        if reference is None:
            raise GridMismatch("mix_with_reference needs a reference image")
        ref_pixels = _pad_to_grid(store.load_image(reference), cfg.patch_size)
        if ref_pixels.shape != pixels.shape:
            raise GridMismatch(
                f"reference grid {ref_pixels.shape[:2]} does not match "
                f"sample grid {pixels.shape[:2]}"
            )
        for pos in chosen:
            pos = int(pos)
            row, col = pos // cols, pos % cols
            out[
                row * cfg.patch_size : (row + 1) * cfg.patch_size,
                col * cfg.patch_size : (col + 1) * cfg.patch_size,
            ] = _patch_view(ref_pixels, row, col, cfg.patch_size)
    return store.put_image(out)


# ── similarity ───────────────────────────────────────────────────────────────


def cosine(f1: EmbeddingVector, f2: EmbeddingVector) -> float:
    if f1.dim != f2.dim:
        raise DimMismatch(f"dims differ: {f1.dim} vs {f2.dim}")
    a, b = f1.as_array(), f2.as_array()
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < _NORM_EPS or nb < _NORM_EPS:
        raise ZeroVector("cosine undefined for a (near-)zero vector")
    value = float(np.dot(a, b) / (na * nb))
    return max(-1.0, min(1.0, value))


# ── scoring ──────────────────────────────────────────────────────────────────


def pcs_score(
    sample: ImageRef,
    references: Sequence[ImageRef],
    encoder: EmbeddingBackend,
    cfg: PerturbConfig,
    store: ContentStore,
    threshold: float = DEFAULT_TAUS["positive"],
    mix_reference: ImageRef | None = None,
) -> PCSRecord:
    """Similarity drop under perturbation, aggregated over the references.

    The original and the disturbed variant are embedded on the same padded
    canvas so the comparison is apples to apples. The shuffle seed is
    derived per sample, so batch order cannot change any score.
    """
    if not references:
        raise EmptyInput("pcs_score needs at least one reference")
    if cfg.shuffle_fraction == 0.0:
        original_ref = disturbed_ref = sample
    else:
        padded = _pad_to_grid(store.load_image(sample), cfg.patch_size)
        original_ref = store.put_image(padded)
        per_sample = replace(cfg, seed=sample_seed(cfg.seed, sample))
        disturbed_ref = patch_shuffle(sample, per_sample, store, mix_reference)
    f_original = encoder.embed_image(original_ref)
    f_disturbed = encoder.embed_image(disturbed_ref)
    breakdown = []
    for ref in references:
        f_ref = encoder.embed_image(ref)
        breakdown.append(
            ReferenceScore(
                reference=ref.address,
                s_original=cosine(f_original, f_ref),
                s_disturbed=cosine(f_disturbed, f_ref),
            )
        )
    s_o = sum(b.s_original for b in breakdown) / len(breakdown)
    s_d = sum(b.s_disturbed for b in breakdown) / len(breakdown)
    pcs = s_o - s_d
    return PCSRecord(
        sample_ref=sample,
        s_original=s_o,
        s_disturbed=s_d,
        pcs=pcs,
        threshold=threshold,
        kept=pcs > threshold,
        per_reference=tuple(breakdown),
    )


# ── filtering ────────────────────────────────────────────────────────────────


def filter_pcs(
    records: Sequence[PCSRecord],
    role: str,
    tau_override: float | None = None,
) -> tuple[list[PCSRecord], list[PCSRecord]]:
    """Partition by pcs > tau, preserving input order on both sides."""
    role = getattr(role, "value", role)
    if tau_override is not None:
        tau = tau_override
    elif role in DEFAULT_TAUS:
        tau = DEFAULT_TAUS[role]
    else:
        raise ValueError(f"no default threshold for role {role!r}")
    kept: list[PCSRecord] = []
    rejected: list[PCSRecord] = []
    for record in records:
        decided = replace(record, threshold=tau, kept=record.pcs > tau)
        (kept if decided.kept else rejected).append(decided)
    return kept, rejected


def filter_easy_negative(
    samples: Sequence[tuple[ImageRef, str]],
    encoder: EmbeddingBackend,
    tau_text: float = DEFAULT_TAU_TEXT,
) -> tuple[list[EasyNegativeRecord], list[EasyNegativeRecord]]:
    """Keep samples whose image still matches their generating prompt."""
    kept: list[EasyNegativeRecord] = []
    rejected: list[EasyNegativeRecord] = []
    for ref, prompt in samples:
        similarity = cosine(encoder.embed_image(ref), encoder.embed_text(prompt))
        record = EasyNegativeRecord(
            sample_ref=ref,
            prompt=prompt,
            similarity=similarity,
            threshold=tau_text,
            kept=similarity >= tau_text,
        )
        (kept if record.kept else rejected).append(record)
    return kept, rejected


# ── report file ──────────────────────────────────────────────────────────────


def pcs_rows(records: Sequence[PCSRecord], role: str) -> list[dict]:
    return [
        {
            "sample": r.sample_ref.address,
            "role": role,
            "s_original": r.s_original,
            "s_disturbed": r.s_disturbed,
            "pcs": r.pcs,
            "threshold": r.threshold,
            "kept": r.kept,
        }
        for r in records
    ]


def easy_rows(records: Sequence[EasyNegativeRecord]) -> list[dict]:
    return [
        {
            "sample": r.sample_ref.address,
            "role": "easy_negative",
            "similarity": r.similarity,
            "threshold": r.threshold,
            "kept": r.kept,
        }
        for r in records
    ]


def write_report(path, rows: Sequence[dict]) -> None:
    write_jsonl(path, rows)


def read_report(path) -> list[dict]:
    rows = read_jsonl(path)
    for i, row in enumerate(rows):
        missing = {"sample", "role", "kept"} - set(row)
        if missing:
            raise SchemaError(f"report row {i} missing fields {sorted(missing)}")
    return rows
