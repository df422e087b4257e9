"""Prompt templates shipped with the package.

The .txt files in this directory use str.format conventions: {name}
substitutes a field, doubled braces render as literal braces. The wording
is fixed; golden tests pin the rendered bytes.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

TEMPLATE_NAMES = (
    "image_description",
    "batch_summarization",
    "self_refinement",
    "easy_negative",
    "edit_add",
    "edit_remove",
    "edit_modify",
    "prompt_generation",
)

# Example tree document embedded in the batch-summarization prompt so the
# model knows the expected output shape.
TREE_EXAMPLE = json.dumps(
    {
        "root": "cat",
        "dimensions": [
            {"name": "behavior", "attributes": ["sitting", "lying", "climbing"]},
            {"name": "location", "attributes": ["garden", "sofa"]},
        ],
    },
    ensure_ascii=False,
)


@lru_cache(maxsize=None)
def load(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown template {name!r}")
    path = resources.files(__name__).joinpath(f"{name}.txt")
    return path.read_text(encoding="utf-8")


def render(name: str, **fields: str) -> str:
    return load(name).format(**fields)
