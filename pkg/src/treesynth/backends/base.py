"""Shared backend types: messages, image refs, embedding vectors."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from ..errors import DimMismatch


@dataclass(frozen=True)
class ImageRef:
    """Handle to an image in the content store.

    address is a store-relative key, so documents that carry refs stay
    byte-identical when the store root moves.
    """

    address: str
    width: int
    height: int
    pixel_format: str = "rgb8"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    dim: int
    encoder: str

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.dim != len(self.values):
            raise DimMismatch(
                f"dim {self.dim} does not match {len(self.values)} values"
            )
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding values must be finite")

    @classmethod
    def from_array(cls, array: np.ndarray, encoder: str) -> "EmbeddingVector":
        flat = np.asarray(array, dtype=np.float64).reshape(-1)
        return cls(values=tuple(float(v) for v in flat), dim=flat.size, encoder=encoder)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class Message:
    """One chat turn. Image attachments ride along as refs."""

    role: str
    text: str
    images: tuple[ImageRef, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))


def user_message(text: str, images: Sequence[ImageRef] = ()) -> Message:
    return Message(role="user", text=text, images=tuple(images))


def message_digest(messages: Sequence[Message]) -> str:
    """Stable digest of a conversation; keys mock fixtures and logs."""
    payload = [
        {
            "role": m.role,
            "text": m.text,
            "images": [ref.address for ref in m.images],
        }
        for m in messages
    ]
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ── backend protocols ────────────────────────────────────────────────────────


class ChatBackend(Protocol):
    def chat(self, messages: Sequence[Message]) -> str: ...


class ImageBackend(Protocol):
    def generate_image(self, prompt: str, mode: str, seed: int) -> ImageRef: ...


class EmbeddingBackend(Protocol):
    def embed_image(self, img: ImageRef) -> EmbeddingVector: ...

    def embed_text(self, text: str) -> EmbeddingVector: ...


IMAGE_MODES = ("finetuned_subject", "base")
