from __future__ import annotations

import json

import numpy as np
import pytest
from PIL import Image

from treesynth.tree import ConceptTree, Dimension, Provenance


class QueueChat:
    """Scripted chat double: replies pop in order, conversations are logged."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.log = []

    def chat(self, messages):
        self.log.append(list(messages))
        if not self.replies:
            raise AssertionError("QueueChat ran out of scripted replies")
        return self.replies.pop(0)


def fenced(obj) -> str:
    return "```json\n" + json.dumps(obj) + "\n```"


def make_tree(
    concept_id: str = "cat-1",
    root: str = "cat",
    dims: list[tuple[str, list[str]]] | None = None,
    provenance: Provenance = Provenance.LLM_BUILT,
) -> ConceptTree:
    if dims is None:
        dims = [
            ("behavior", ["sitting", "lying"]),
            ("location", ["garden", "sofa"]),
        ]
    return ConceptTree(
        concept_id=concept_id,
        root=root,
        dimensions=tuple(Dimension(n, tuple(a)) for n, a in dims),
        provenance=provenance,
    )


@pytest.fixture
def cat_tree() -> ConceptTree:
    return make_tree()


def write_png(path, array: np.ndarray) -> None:
    """Dump an HxWx3 uint8 array as a PNG."""
    Image.fromarray(array.astype(np.uint8), mode="RGB").save(path, format="PNG")


def solid_image(width: int, height: int, rgb: tuple[int, int, int]) -> np.ndarray:
    out = np.zeros((height, width, 3), dtype=np.uint8)
    out[:, :] = rgb
    return out
