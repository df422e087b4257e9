"""Rule-based chat backend for mock dry-runs.

Unlike the fixture-keyed mock, this backend recognizes each pipeline
prompt by its anchor text and synthesizes a well-formed reply on the fly,
so whole CLI runs work without pre-registered fixtures. Replies are pure
functions of the request, which keeps mock runs byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import re
from typing import Sequence

from ..errors import MockMissingFixture
from .base import Message

_TREE_ANCHOR = re.compile(r"concept tree:\s*", re.I)
_NUM_ADD = re.compile(r"randomly add (\d+) of its dimensions")
_NUM_DELETE = re.compile(r"randomly delete (\d+) of its dimensions")
_NUM_MODIFY = re.compile(r"randomly modify (\d+) of its dimensions")
_PAIRS = re.compile(r"Generate (\d+) question and answer pairs.*concept \"([^\"]+)\"", re.S)
_CLASS_IN_SUMMARY = re.compile(r"main object:\s*([^;]+);")
_MISSING_KEYWORD = re.compile(r'The attribute "([^"]+)" is missing')


def _fenced(obj) -> str:
    return "```json\n" + json.dumps(obj, indent=2) + "\n```"


def _parse_tree(text: str) -> dict:
    match = _TREE_ANCHOR.search(text)
    start = text.find("{", match.end() if match else 0)
    if start == -1:
        raise MockMissingFixture("prompt carries no tree JSON")
    obj, _ = json.JSONDecoder().raw_decode(text[start:])
    return obj


class SyntheticChatBackend:
    """Deterministic stand-in for the chat/vision backend."""

    def __init__(self):
        self.calls = 0

    def chat(self, messages: Sequence[Message]) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        self.calls += 1
        first = messages[0]
        text = first.text

        if text.startswith("Please identify the primary object class name"):
            return self._describe(first)
        if text.startswith("Task: I want to classify and organize captions"):
            return self._summarize(text)
        if text.startswith("Round "):
            return self._classify(text)
        if text.startswith("Task: I'm trying to classify the following captions"):
            return _fenced({"hallucination": []})
        if _MISSING_KEYWORD.search(text):
            return self._missing_dimension(text)
        if text.startswith(
            "Task: I want to modify the visual definition of a class to synthesize"
        ):
            return self._easy_negative(text)
        if text.startswith("Task: I want to modify the visual definition tree"):
            return self._edit(text)
        if _PAIRS.search(text):
            return self._pairs(text)
        raise MockMissingFixture(f"no scripted reply for prompt: {text[:80]!r}")

    # one class name per image, stable across runs
    def _describe(self, message: Message) -> str:
        if message.images:
            digest = hashlib.sha256(
                message.images[0].address.encode("utf-8")
            ).hexdigest()[:4]
        else:
            digest = "0000"
        name = f"thing{digest}"
        return (
            f"The primary object class name in the image is {name}. "
            f"The image shows a {name} in a plain style in an indoor setting."
        )

    def _summarize(self, text: str) -> str:
        match = _CLASS_IN_SUMMARY.search(text)
        root = match.group(1).strip() if match else "object"
        return _fenced(
            {
                "root": root,
                "dimensions": [
                    {"name": "style", "attributes": ["plain", "striped"]},
                    {"name": "setting", "attributes": ["indoor", "outdoor"]},
                ],
            }
        )

    def _classify(self, text: str) -> str:
        tree = _parse_tree(text)
        votes = {
            dim["name"]: dim["attributes"][0] for dim in tree.get("dimensions", [])
        }
        return _fenced(votes)

    def _missing_dimension(self, text: str) -> str:
        tree = _parse_tree(text)
        dims = tree.get("dimensions", [])
        name = dims[0]["name"] if dims else "extra"
        return _fenced({"dimension": name})

    def _easy_negative(self, text: str) -> str:
        tree = _parse_tree(text)
        tree["root"] = f"faux {tree['root']}"
        return _fenced(tree)

    def _edit(self, text: str) -> str:
        tree = _parse_tree(text)
        dims = list(tree.get("dimensions", []))
        if match := _NUM_ADD.search(text):
            num = int(match.group(1))
            taken = {d["name"] for d in dims}
            for i in range(1, num + 1):
                name = f"added {i}"
                while name in taken:
                    name += " x"
                taken.add(name)
                dims.append({"name": name, "attributes": ["alpha", "beta"]})
        elif match := _NUM_DELETE.search(text):
            num = int(match.group(1))
            dims = dims[: max(1, len(dims) - num)]
        elif match := _NUM_MODIFY.search(text):
            num = int(match.group(1))
            taken = {d["name"] for d in dims}
            for i in range(min(num, len(dims))):
                name = f"{dims[i]['name']} alt"
                while name in taken:
                    name += " x"
                taken.add(name)
                dims[i] = {"name": name, "attributes": ["new one", "new two"]}
        else:
            raise MockMissingFixture("edit prompt without an operation count")
        return _fenced({"root": tree["root"], "dimensions": dims})

    def _pairs(self, text: str) -> str:
        match = _PAIRS.search(text)
        n, concept = int(match.group(1)), match.group(2)
        absent = "not present" in text
        pairs = []
        for i in range(1, n + 1):
            if absent:
                answer = f"No, {concept} is not present in this image."
            else:
                answer = f"Yes, {concept} is present in this image."
            pairs.append(
                {"question": f"Question {i}: is {concept} in the image?", "answer": answer}
            )
        return _fenced(pairs)
