"""Backend connection settings."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for one model service.

    credential_env names the environment variable holding the API key; the
    key itself never appears in config files or documents.
    """

    endpoint: str
    credential_env: str
    model: str
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    provider: str = "openai-style"

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")


DEFAULT_CREDENTIAL_ENVS = {
    "llm": "CAT_LLM_API_KEY",
    "image": "CAT_IMG_API_KEY",
    "embed": "CAT_EMBED_API_KEY",
}
