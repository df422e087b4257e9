"""Exception types shared across the pipeline.

Every error raised by this package derives from PipelineError so callers can
catch one family. The CLI maps families to exit codes: config problems exit 2,
backend failures exit 3, validation failures exit 4, IO failures exit 5.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


# ── configuration ────────────────────────────────────────────────────────────


class ConfigError(PipelineError):
    """Invalid or incomplete configuration (file, flags, or env)."""


# ── tree structure ───────────────────────────────────────────────────────────


class TreeError(PipelineError):
    """Base class for concept-tree structure errors."""


class UnknownDimension(TreeError):
    """An edit referenced a dimension name the tree does not contain."""


class DuplicateDimension(TreeError):
    """An edit would create two dimensions with the same normalized name."""


class EmptyTreeError(TreeError):
    """An edit would leave the tree with zero dimensions."""


class DuplicateConceptId(TreeError):
    """Two trees offered for merging share a concept_id."""


class DimensionEmptiedByDeconfliction(TreeError):
    """Merge deconfliction removed every attribute of some dimension."""


class ParseError(PipelineError):
    """Serialized document is not syntactically valid."""


class SchemaError(PipelineError):
    """Serialized document parsed but does not match the expected shape."""


# ── model backends ───────────────────────────────────────────────────────────


class BackendError(PipelineError):
    """A model backend call failed after exhausting retries.

    ``kind`` is one of: transport, auth, rate_limit, server, protocol.
    """

    def __init__(self, message: str, kind: str = "transport"):
        super().__init__(message)
        self.kind = kind


class BackendTimeout(BackendError):
    """A backend call exceeded its configured timeout."""

    def __init__(self, message: str):
        super().__init__(message, kind="timeout")


class MockMissingFixture(BackendError):
    """The mock chat backend has no reply registered for a message digest."""

    def __init__(self, message: str):
        super().__init__(message, kind="fixture")


class ContentStoreError(PipelineError):
    """The image content store could not read or write an object."""


# ── builder / LLM content ────────────────────────────────────────────────────


class MalformedResponse(PipelineError):
    """A backend reply could not be parsed into the expected structure."""


class ValidationFailed(PipelineError):
    """A parsed reply violated tree invariants after the automatic re-ask."""


class SameClassReturned(PipelineError):
    """The easy-negative derivation returned the original class name."""


class EditCountMismatch(PipelineError):
    """An LLM tree edit applied a different operation count than requested."""


# ── prompt synthesis ─────────────────────────────────────────────────────────


class ProvenanceMismatch(PipelineError):
    """A tree's provenance does not fit the requested prompt role."""


# ── embeddings / scoring ─────────────────────────────────────────────────────


class DimMismatch(PipelineError):
    """Vectors of different dimensionality were combined."""


class ZeroVector(PipelineError):
    """Cosine similarity requested against a (near-)zero vector."""


class GridMismatch(PipelineError):
    """Mix-mode perturbation lacks a usable reference image."""


class BadFraction(PipelineError):
    """Perturbation fraction outside [0, 1]."""


class EmptyInput(PipelineError):
    """An analysis routine received no vectors."""


# ── dataset assembly ─────────────────────────────────────────────────────────


class UnfilteredEntry(PipelineError):
    """A synthetic entry reached assembly without passing its filter."""


class DuplicateSample(PipelineError):
    """The same sample address appeared twice in one manifest."""


class RoleMismatch(PipelineError):
    """An entry's role does not match the bucket it was supplied in."""
