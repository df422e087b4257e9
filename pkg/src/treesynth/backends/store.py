"""Digest-keyed local content store for generated and ingested images."""

from __future__ import annotations

import hashlib
import io
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ContentStoreError
from .base import ImageRef


class ContentStore:
    """Local directory keyed by content digest.

    Writes are atomic (temp file + rename) and idempotent: storing the same
    bytes twice produces the same key and touches the first object at most
    once, which keeps retried backend requests free of duplicate effects.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def put_bytes(self, data: bytes, suffix: str = ".png") -> str:
        digest = hashlib.sha256(data).hexdigest()
        key = f"{digest[:2]}/{digest}{suffix}"
        path = self.root / key
        if path.exists():
            return key
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(data)
            os.replace(tmp, path)
        except OSError as exc:
            raise ContentStoreError(f"cannot write object {key}: {exc}") from exc
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        return key

    def path_for(self, ref_or_key: ImageRef | str) -> Path:
        key = ref_or_key.address if isinstance(ref_or_key, ImageRef) else ref_or_key
        return self.root / key

    def get_bytes(self, ref_or_key: ImageRef | str) -> bytes:
        path = self.path_for(ref_or_key)
        try:
            return path.read_bytes()
        except OSError as exc:
            raise ContentStoreError(f"cannot read object {path}: {exc}") from exc

    def put_image(self, pixels: np.ndarray) -> ImageRef:
        """Encode an HxWx3 uint8 array as PNG and store it."""
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError("expected an HxWx3 pixel array")
        image = Image.fromarray(pixels.astype(np.uint8), mode="RGB")
        buffer = io.BytesIO()
        image.save(buffer, format="PNG")
        key = self.put_bytes(buffer.getvalue(), suffix=".png")
        height, width = pixels.shape[:2]
        return ImageRef(address=key, width=width, height=height)

    def load_image(self, ref_or_key: ImageRef | str) -> np.ndarray:
        """Decode a stored image to an HxWx3 uint8 array."""
        data = self.get_bytes(ref_or_key)
        try:
            with Image.open(io.BytesIO(data)) as img:
                return np.asarray(img.convert("RGB"), dtype=np.uint8)
        except Exception as exc:  # Pillow raises a zoo of types here
            raise ContentStoreError(f"cannot decode image: {exc}") from exc

    def ingest_file(self, path: str | os.PathLike) -> ImageRef:
        """Copy an existing image file into the store, keeping its bytes."""
        source = Path(path)
        try:
            data = source.read_bytes()
        except OSError as exc:
            raise ContentStoreError(f"cannot read {source}: {exc}") from exc
        suffix = source.suffix.lower() or ".png"
        try:
            with Image.open(io.BytesIO(data)) as img:
                width, height = img.size
        except Exception as exc:
            raise ContentStoreError(f"{source} is not a decodable image") from exc
        key = self.put_bytes(data, suffix=suffix)
        return ImageRef(address=key, width=width, height=height)
