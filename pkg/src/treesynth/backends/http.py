"""HTTP clients for the three model services.

Request and response shapes differ between providers, so each client goes
through a small per-provider mapping table instead of hardcoding one wire
format. All clients share the same retry/backoff loop and a per-backend
semaphore bounding concurrent requests.
"""

from __future__ import annotations

import base64
import io
import logging
import os
import threading
import time
from typing import Any, Callable, Sequence

import httpx
from PIL import Image

from ..errors import BackendError, BackendTimeout, DimMismatch
from .base import EmbeddingVector, ImageRef, Message
from .config import BackendConfig
from .store import ContentStore

logger = logging.getLogger(__name__)

# Seconds before retry attempt N. The last entry repeats.
BACKOFF_SECONDS = (0.2, 0.5, 1.0, 2.0)


def _openai_chat_request(model: str, messages: Sequence[Message], images_b64):
    payload = []
    for m in messages:
        entry: dict[str, Any] = {"role": m.role, "content": m.text}
        if m.images:
            entry["images"] = [images_b64[ref.address] for ref in m.images]
        payload.append(entry)
    return {"model": model, "messages": payload}


def _openai_chat_extract(data: dict) -> str:
    return data["choices"][0]["message"]["content"]


def _openai_image_request(model: str, prompt: str, mode: str, seed: int):
    return {"model": model, "prompt": prompt, "mode": mode, "seed": seed}


def _openai_image_extract(data: dict) -> bytes:
    return base64.b64decode(data["data"][0]["b64_json"])


def _openai_embed_request(model: str, content: str, kind: str):
    return {"model": model, "input": content, "input_type": kind}


def _openai_embed_extract(data: dict) -> list[float]:
    return list(data["data"][0]["embedding"])


# Mapping table; add a provider by supplying these six callables.
PROVIDERS: dict[str, dict[str, Callable]] = {
    "openai-style": {
        "chat_request": _openai_chat_request,
        "chat_extract": _openai_chat_extract,
        "image_request": _openai_image_request,
        "image_extract": _openai_image_extract,
        "embed_request": _openai_embed_request,
        "embed_extract": _openai_embed_extract,
    },
}


class _HttpBackend:
    def __init__(self, cfg: BackendConfig, transport: httpx.BaseTransport | None = None):
        if cfg.provider not in PROVIDERS:
            raise BackendError(f"unknown provider {cfg.provider!r}", kind="protocol")
        self.cfg = cfg
        self.provider = PROVIDERS[cfg.provider]
        self._semaphore = threading.Semaphore(cfg.max_in_flight)
        self._client = httpx.Client(timeout=cfg.timeout, transport=transport)

    def _credential(self) -> str:
        value = os.environ.get(self.cfg.credential_env, "")
        if not value:
            raise BackendError(
                f"credential env var {self.cfg.credential_env!r} is not set",
                kind="auth",
            )
        return value

    def _post(self, payload: dict) -> dict:
        headers = {"Authorization": f"Bearer {self._credential()}"}
        attempts = self.cfg.max_retries + 1
        last_error: BackendError | None = None
        for attempt in range(attempts):
            if attempt:
                delay = BACKOFF_SECONDS[min(attempt - 1, len(BACKOFF_SECONDS) - 1)]
                time.sleep(delay)
            try:
                with self._semaphore:
                    response = self._client.post(
                        self.cfg.endpoint, json=payload, headers=headers
                    )
            except httpx.TimeoutException as exc:
                last_error = BackendTimeout(f"request timed out: {exc}")
                logger.warning("backend timeout (attempt %d/%d)", attempt + 1, attempts)
                continue
            except httpx.TransportError as exc:
                last_error = BackendError(f"transport failure: {exc}", kind="transport")
                logger.warning("transport error (attempt %d/%d)", attempt + 1, attempts)
                continue
            if response.status_code in (401, 403):
                raise BackendError(
                    f"authentication rejected ({response.status_code})", kind="auth"
                )
            if response.status_code == 429:
                last_error = BackendError("rate limited", kind="rate_limit")
                logger.warning("rate limited (attempt %d/%d)", attempt + 1, attempts)
                continue
            if response.status_code >= 500:
                last_error = BackendError(
                    f"server error {response.status_code}", kind="server"
                )
                logger.warning(
                    "server error %d (attempt %d/%d)",
                    response.status_code,
                    attempt + 1,
                    attempts,
                )
                continue
            if response.status_code >= 400:
                raise BackendError(
                    f"request rejected ({response.status_code})", kind="protocol"
                )
            try:
                return response.json()
            except ValueError as exc:
                raise BackendError(f"non-JSON response: {exc}", kind="protocol")
        assert last_error is not None
        raise last_error


class HttpChatBackend(_HttpBackend):
    def __init__(
        self,
        cfg: BackendConfig,
        store: ContentStore | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        super().__init__(cfg, transport)
        self.store = store

    def chat(self, messages: Sequence[Message]) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        images_b64: dict[str, str] = {}
        for m in messages:
            for ref in m.images:
                if ref.address not in images_b64:
                    if self.store is None:
                        raise BackendError(
                            "image attachments need a content store", kind="protocol"
                        )
                    raw = self.store.get_bytes(ref)
                    images_b64[ref.address] = base64.b64encode(raw).decode("ascii")
        request = self.provider["chat_request"](self.cfg.model, messages, images_b64)
        data = self._post(request)
        try:
            return self.provider["chat_extract"](data)
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected chat response shape: {exc}", kind="protocol")


class HttpImageBackend(_HttpBackend):
    def __init__(
        self,
        cfg: BackendConfig,
        store: ContentStore,
        transport: httpx.BaseTransport | None = None,
    ):
        super().__init__(cfg, transport)
        self.store = store

    def generate_image(self, prompt: str, mode: str, seed: int) -> ImageRef:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        request = self.provider["image_request"](self.cfg.model, prompt, mode, seed)
        data = self._post(request)
        try:
            raw = self.provider["image_extract"](data)
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(
                f"unexpected image response shape: {exc}", kind="protocol"
            )
        try:
            with Image.open(io.BytesIO(raw)) as img:
                width, height = img.size
        except Exception as exc:
            raise BackendError(f"undecodable image payload: {exc}", kind="protocol")
        key = self.store.put_bytes(raw, suffix=".png")
        return ImageRef(address=key, width=width, height=height)


class HttpEmbeddingBackend(_HttpBackend):
    def __init__(
        self,
        cfg: BackendConfig,
        store: ContentStore | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        super().__init__(cfg, transport)
        self.store = store
        self._dim: int | None = None

    def _finish(self, values: list[float]) -> EmbeddingVector:
        if self._dim is None:
            self._dim = len(values)
        elif len(values) != self._dim:
            raise DimMismatch(
                f"encoder returned {len(values)} values, expected {self._dim}"
            )
        return EmbeddingVector(tuple(values), len(values), self.cfg.model)

    def embed_image(self, img: ImageRef) -> EmbeddingVector:
        if self.store is None:
            raise BackendError("image embedding needs a content store", kind="protocol")
        raw = self.store.get_bytes(img)
        content = base64.b64encode(raw).decode("ascii")
        request = self.provider["embed_request"](self.cfg.model, content, "image_b64")
        data = self._post(request)
        try:
            return self._finish(self.provider["embed_extract"](data))
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(
                f"unexpected embedding response shape: {exc}", kind="protocol"
            )

    def embed_text(self, text: str) -> EmbeddingVector:
        if not text:
            raise ValueError("text must be non-empty")
        request = self.provider["embed_request"](self.cfg.model, text, "text")
        data = self._post(request)
        try:
            return self._finish(self.provider["embed_extract"](data))
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(
                f"unexpected embedding response shape: {exc}", kind="protocol"
            )
