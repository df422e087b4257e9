"""Diversity measurement and report generation.

Diversity of an image set is the mean Euclidean distance from each
embedding to its K-means centroid, computed on L2-normalized vectors.
The clustering is written out here rather than imported because the
scores must be bit-reproducible: seeded farthest-point initialization,
lowest-index tie-breaks, and a fixed empty-cluster repair rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DimMismatch, EmptyInput, ZeroVector

_NORM_EPS = 1e-12

DEFAULT_MAX_ITERS = 100
DEFAULT_BANDS = (0.1, 0.3)


@dataclass(frozen=True)
class DiversityReport:
    k: int
    assignments: tuple[int, ...]
    centroids: tuple[tuple[float, ...], ...]
    distances: tuple[float, ...]
    score: float
    seed: int
    iterations: int
    normalized: bool


@dataclass(frozen=True)
class PCSHistogram:
    role: str
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    fraction_below: float  # pcs < 0.1
    fraction_mid: float  # 0.1 <= pcs <= 0.3
    fraction_above: float  # pcs > 0.3


# ── input handling ───────────────────────────────────────────────────────────


def _matrix(vectors: Sequence) -> np.ndarray:
    """Stack embeddings (or plain sequences) into an n x d float matrix."""
    if len(vectors) == 0:
        raise EmptyInput("need at least one vector")
    rows = []
    for v in vectors:
        values = getattr(v, "values", v)
        rows.append(np.asarray(values, dtype=np.float64))
    dims = {row.shape for row in rows}
    if len(dims) != 1 or rows[0].ndim != 1:
        raise DimMismatch(f"inconsistent vector shapes: {sorted(map(str, dims))}")
    return np.stack(rows)


def default_k(n: int) -> int:
    return min(8, math.ceil(n / 10), n)


# ── clustering ───────────────────────────────────────────────────────────────


def _init_farthest(mat: np.ndarray, k: int, seed: int) -> np.ndarray:
    """First centroid seeded at random, the rest greedily farthest away.

    Ties go to the lowest index so runs are reproducible.
    """
    n = mat.shape[0]
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    while len(chosen) < k:
        dists = np.min(
            np.linalg.norm(mat[:, None, :] - mat[chosen][None, :, :], axis=2), axis=1
        )
        chosen.append(int(np.argmax(dists)))
    return mat[chosen].copy()


def _lloyd(
    mat: np.ndarray, k: int, seed: int, max_iters: int
) -> tuple[np.ndarray, np.ndarray, int, list[float]]:
    """Lloyd iterations; returns (assignments, centroids, iterations run,
    objective after each assignment step)."""
    n = mat.shape[0]
    centroids = _init_farthest(mat, k, seed)
    assignments: np.ndarray | None = None
    objectives: list[float] = []
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        dists = np.linalg.norm(mat[:, None, :] - centroids[None, :, :], axis=2)
        new_assign = np.argmin(dists, axis=1)
        for j in range(k):
            if not np.any(new_assign == j):
                # revive an empty cluster at the worst-served point
                per_point = dists[np.arange(n), new_assign]
                far = int(np.argmax(per_point))
                new_assign[far] = j
                centroids[j] = mat[far]
                dists[:, j] = np.linalg.norm(mat - centroids[j], axis=1)
        objectives.append(
            float(np.sum(np.linalg.norm(mat - centroids[new_assign], axis=1) ** 2))
        )
        if assignments is not None and np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(k):
            centroids[j] = mat[assignments == j].mean(axis=0)
    assert assignments is not None
    return assignments, centroids, iterations, objectives


def kmeans(
    vectors: Sequence,
    k: int,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> tuple[list[int], np.ndarray]:
    mat = _matrix(vectors)
    if not 1 <= k <= mat.shape[0]:
        raise ValueError(f"k must be in [1, {mat.shape[0]}], got {k}")
    assignments, centroids, _, _ = _lloyd(mat, k, seed, max_iters)
    return [int(a) for a in assignments], centroids


def diversity_score(
    vectors: Sequence,
    k: int | None = None,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    normalize: bool = True,
) -> DiversityReport:
    """Mean distance to the assigned centroid; 0 means no spread at all."""
    mat = _matrix(vectors)
    if normalize:
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        if np.any(norms < _NORM_EPS):
            raise ZeroVector("cannot normalize a (near-)zero vector")
        mat = mat / norms
    n = mat.shape[0]
    if k is None:
        k = default_k(n)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    assignments, centroids, iterations, _ = _lloyd(mat, k, seed, max_iters)
    distances = np.linalg.norm(mat - centroids[assignments], axis=1)
    return DiversityReport(
        k=k,
        assignments=tuple(int(a) for a in assignments),
        centroids=tuple(tuple(float(x) for x in c) for c in centroids),
        distances=tuple(float(d) for d in distances),
        score=float(distances.mean()),
        seed=seed,
        iterations=iterations,
        normalized=normalize,
    )


# ── histograms ───────────────────────────────────────────────────────────────


def _pcs_values(records: Sequence) -> np.ndarray:
    values = []
    for r in records:
        if isinstance(r, dict):
            values.append(float(r["pcs"]))
        else:
            values.append(float(getattr(r, "pcs", r)))
    return np.asarray(values, dtype=np.float64)


def pcs_histogram(
    records: Sequence,
    buckets: Sequence[float] | None = None,
    role: str = "positive",
    bands: tuple[float, float] = DEFAULT_BANDS,
) -> PCSHistogram:
    """Bucket counts plus the three headline bands (<lo, lo..hi, >hi).

    Out-of-range values land in the end buckets so counts always sum to
    the sample count.
    """
    values = _pcs_values(records)
    if values.size == 0:
        raise EmptyInput("need at least one record")
    edges = (
        np.asarray(buckets, dtype=np.float64)
        if buckets is not None
        else np.linspace(-1.0, 1.0, 21)
    )
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("buckets must be a strictly increasing sequence of edges")
    clipped = np.clip(values, edges[0], edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    lo, hi = bands
    n = values.size
    below = float(np.sum(values < lo) / n)
    above = float(np.sum(values > hi) / n)
    mid = float(np.sum((values >= lo) & (values <= hi)) / n)
    return PCSHistogram(
        role=role,
        edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
        fraction_below=below,
        fraction_mid=mid,
        fraction_above=above,
    )


# ── edit-operation diversity table ───────────────────────────────────────────


def edit_diversity_table(
    plans: Sequence[tuple[str, int, Sequence]],
    k: int | None = None,
    seed: int = 0,
) -> list[dict]:
    """One row per (category, times, embeddings) plan."""
    if not plans:
        raise EmptyInput("need at least one plan")
    rows = []
    for category, times, vectors in plans:
        report = diversity_score(vectors, k=k, seed=seed)
        rows.append(
            {"category": category, "times": int(times), "diversity": report.score}
        )
    return rows


# ── rendering ────────────────────────────────────────────────────────────────


def render_diversity_table(rows: Sequence[dict]) -> str:
    header = ("Category", "Times", "Diversity")
    cells = [
        (str(r["category"]), str(r["times"]), f"{r['diversity']:.4f}") for r in rows
    ]
    widths = [
        max(len(header[i]), *(len(c[i]) for c in cells)) if cells else len(header[i])
        for i in range(3)
    ]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    for c in cells:
        lines.append("  ".join(c[i].ljust(widths[i]) for i in range(3)))
    return "\n".join(lines) + "\n"


def histogram_csv(hist: PCSHistogram) -> str:
    lines = ["bucket_edge,count"]
    for edge, count in zip(hist.edges[:-1], hist.counts):
        lines.append(f"{edge:.6g},{count}")
    return "\n".join(lines) + "\n"


def histogram_row(hist: PCSHistogram) -> dict:
    return {
        "role": hist.role,
        "edges": list(hist.edges),
        "counts": list(hist.counts),
        "fraction_below": hist.fraction_below,
        "fraction_mid": hist.fraction_mid,
        "fraction_above": hist.fraction_above,
    }


def diversity_row(report: DiversityReport, label: str = "") -> dict:
    return {
        "label": label,
        "k": report.k,
        "score": report.score,
        "seed": report.seed,
        "iterations": report.iterations,
        "normalized": report.normalized,
        "n": len(report.assignments),
    }


def render_histogram(hist: PCSHistogram) -> str:
    """Plain-text band summary mirroring the headline columns."""
    return (
        f"role={hist.role} n={sum(hist.counts)}\n"
        f"  pcs < 0.1:        {hist.fraction_below:6.1%}\n"
        f"  0.1 <= pcs <= 0.3: {hist.fraction_mid:6.1%}\n"
        f"  pcs > 0.3:        {hist.fraction_above:6.1%}\n"
    )


def normalized(vectors: Iterable) -> np.ndarray:
    """L2-normalize a vector batch; exposed for oracle checks in tests."""
    mat = _matrix(list(vectors))
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms < _NORM_EPS):
        raise ZeroVector("cannot normalize a (near-)zero vector")
    return mat / norms
