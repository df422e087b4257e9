"""Deterministic offline backends.

Every mock here is a pure function of its inputs (plus registered fixtures),
so pipeline runs under --mock are byte-reproducible end to end. The mock
embedding encoder is "pixel-flatten": grayscale block means on a fixed 8x8
grid, flattened to a 64-dim vector. Its simple analytic form lets scoring
tests compute expected values independently.
"""

from __future__ import annotations

import hashlib
import threading
from typing import Sequence

import numpy as np

from ..errors import MockMissingFixture
from .base import (
    IMAGE_MODES,
    EmbeddingBackend,
    EmbeddingVector,
    ImageRef,
    Message,
    message_digest,
)
from .store import ContentStore

GRID = 8  # renderer cells and encoder blocks share this grid
EMBED_DIM = GRID * GRID
PIXEL_FLATTEN_TAG = f"pixel-flatten-{GRID}x{GRID}"


def _rng_from(*parts: object) -> np.random.Generator:
    blob = "\x00".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(blob).digest()
    seeds = np.frombuffer(digest, dtype=np.uint32)
    return np.random.default_rng(seeds.tolist())


def grid_bounds(size: int) -> np.ndarray:
    """Integer block boundaries splitting [0, size) into GRID runs."""
    return np.linspace(0, size, GRID + 1).astype(int)


class MockChatBackend:
    """Replies from a fixture map keyed by message digest.

    A fixture value may be a single string or a list of strings; lists are
    consumed one call at a time and the last entry then repeats, which lets
    tests script retry behavior for one identical request.
    """

    def __init__(self, fixtures: dict[str, str | list[str]] | None = None):
        self.fixtures: dict[str, str | list[str]] = dict(fixtures or {})
        self.calls = 0
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()

    def add(self, messages: Sequence[Message], reply: str | list[str]) -> str:
        """Register a reply for a conversation; returns the digest key."""
        digest = message_digest(messages)
        self.fixtures[digest] = reply
        return digest

    def chat(self, messages: Sequence[Message]) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        digest = message_digest(messages)
        with self._lock:
            self.calls += 1
            if digest not in self.fixtures:
                head = messages[-1].text[:80]
                raise MockMissingFixture(
                    f"no fixture for digest {digest[:12]} (last turn: {head!r})"
                )
            value = self.fixtures[digest]
            if isinstance(value, str):
                return value
            index = self._cursor.get(digest, 0)
            self._cursor[digest] = index + 1
            return value[min(index, len(value) - 1)]


class MockImageBackend:
    """Procedural renderer: hash of (prompt, mode, seed) picks an 8x8
    color grid, scaled to the configured output size."""

    def __init__(self, store: ContentStore, width: int = 224, height: int = 224):
        if width < GRID or height < GRID:
            raise ValueError(f"output size must be at least {GRID} pixels")
        self.store = store
        self.width = width
        self.height = height
        self.calls = 0

    def render(self, prompt: str, mode: str, seed: int) -> np.ndarray:
        """Pixels for a prompt without storing them."""
        rng = _rng_from(prompt, mode, seed)
        colors = rng.integers(0, 256, size=(GRID, GRID, 3), dtype=np.uint8)
        ys = grid_bounds(self.height)
        xs = grid_bounds(self.width)
        pixels = np.zeros((self.height, self.width, 3), dtype=np.uint8)
        for i in range(GRID):
            for j in range(GRID):
                pixels[ys[i] : ys[i + 1], xs[j] : xs[j + 1]] = colors[i, j]
        return pixels

    def generate_image(self, prompt: str, mode: str, seed: int) -> ImageRef:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        if mode not in IMAGE_MODES:
            raise ValueError(f"mode must be one of {IMAGE_MODES}")
        self.calls += 1
        return self.store.put_image(self.render(prompt, mode, seed))


def pixel_flatten(pixels: np.ndarray) -> np.ndarray:
    """Grayscale block means over the fixed grid, flattened row-major."""
    gray = np.asarray(pixels, dtype=np.float64).mean(axis=2)
    ys = grid_bounds(gray.shape[0])
    xs = grid_bounds(gray.shape[1])
    out = np.empty(EMBED_DIM, dtype=np.float64)
    for i in range(GRID):
        for j in range(GRID):
            block = gray[ys[i] : ys[i + 1], xs[j] : xs[j + 1]]
            out[i * GRID + j] = block.mean()
    return out


class MockEmbeddingBackend:
    """Pixel-flatten image encoder plus a hash-seeded text encoder."""

    def __init__(
        self,
        store: ContentStore,
        text_fixtures: dict[str, Sequence[float]] | None = None,
    ):
        self.store = store
        self.text_fixtures = {
            k: tuple(float(x) for x in v) for k, v in (text_fixtures or {}).items()
        }
        self.calls = 0

    def embed_image(self, img: ImageRef) -> EmbeddingVector:
        self.calls += 1
        pixels = self.store.load_image(img)
        return EmbeddingVector.from_array(pixel_flatten(pixels), PIXEL_FLATTEN_TAG)

    def embed_text(self, text: str) -> EmbeddingVector:
        if not text:
            raise ValueError("text must be non-empty")
        self.calls += 1
        if text in self.text_fixtures:
            values = self.text_fixtures[text]
            return EmbeddingVector(values, len(values), "text-fixture")
        rng = _rng_from("text", text)
        return EmbeddingVector.from_array(
            rng.standard_normal(EMBED_DIM), f"text-hash-{EMBED_DIM}"
        )


class CachedEncoder:
    """Insert-only embedding cache keyed by content address / text.

    hits counts calls answered without touching the wrapped backend; the
    wrapped backend's own call counter stays observable for tests.
    """

    def __init__(self, inner: EmbeddingBackend):
        self.inner = inner
        self.hits = 0
        self._cache: dict[tuple[str, str], EmbeddingVector] = {}
        self._lock = threading.Lock()

    def _get(self, key: tuple[str, str], compute) -> EmbeddingVector:
        with self._lock:
            if key in self._cache:
                self.hits += 1
                return self._cache[key]
        vector = compute()
        with self._lock:
            self._cache.setdefault(key, vector)
            return self._cache[key]

    def embed_image(self, img: ImageRef) -> EmbeddingVector:
        return self._get(("image", img.address), lambda: self.inner.embed_image(img))

    def embed_text(self, text: str) -> EmbeddingVector:
        return self._get(("text", text), lambda: self.inner.embed_text(text))
