from .base import (
    IMAGE_MODES,
    ChatBackend,
    EmbeddingBackend,
    EmbeddingVector,
    ImageBackend,
    ImageRef,
    Message,
    message_digest,
    user_message,
)
from .config import DEFAULT_CREDENTIAL_ENVS, BackendConfig
from .http import HttpChatBackend, HttpEmbeddingBackend, HttpImageBackend
from .mock import (
    CachedEncoder,
    MockChatBackend,
    MockEmbeddingBackend,
    MockImageBackend,
    pixel_flatten,
)
from .store import ContentStore

__all__ = [
    "IMAGE_MODES",
    "BackendConfig",
    "CachedEncoder",
    "ChatBackend",
    "ContentStore",
    "DEFAULT_CREDENTIAL_ENVS",
    "EmbeddingBackend",
    "EmbeddingVector",
    "HttpChatBackend",
    "HttpEmbeddingBackend",
    "HttpImageBackend",
    "ImageBackend",
    "ImageRef",
    "Message",
    "MockChatBackend",
    "MockEmbeddingBackend",
    "MockImageBackend",
    "message_digest",
    "pixel_flatten",
    "user_message",
]
