"""Adjacency construction over a video's region proposals.

All three graphs share one canonical node order: proposals sorted by frame,
ties kept in their original within-frame order (see :func:`canonical_order`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from regiongraph.linalg import ShapeError, matmul, softmax_rows
from regiongraph.regions import RegionProposal, iou_matrix

GraphKind = Literal["sim", "front", "back"]


@dataclass
class AdjacencyMatrix:
    kind: GraphKind
    m: np.ndarray

    @property
    def n(self) -> int:
        return self.m.shape[0]


@dataclass
class AffinityTransforms:
    """The two d x d maps whose images are compared by dot product."""

    w: np.ndarray
    w_prime: np.ndarray


def canonical_order(proposals: Sequence[RegionProposal]) -> list[int]:
    # sorted() is stable, so within-frame order is preserved
    return sorted(range(len(proposals)), key=lambda i: proposals[i].frame)


def affinity(x: np.ndarray, t: AffinityTransforms) -> np.ndarray:
    """F[i, j] = (w x_i) . (w' x_j) for all node pairs."""
    d = x.shape[1]
    if t.w.shape != (d, d) or t.w_prime.shape != (d, d):
        raise ShapeError("affinity", x.shape, t.w.shape, t.w_prime.shape)
    left = matmul(x, t.w.T)
    right = matmul(x, t.w_prime.T)
    return matmul(left, right.T)


def build_similarity_graph(x: np.ndarray, t: AffinityTransforms) -> AdjacencyMatrix:
    if x.shape[0] < 1:
        raise ValueError("similarity graph needs at least one node")
    return AdjacencyMatrix("sim", softmax_rows(affinity(x, t)))


def raw_front_overlaps(proposals: Sequence[RegionProposal]) -> np.ndarray:
    """Unnormalized IoU edges i -> j for i in frame t, j in frame t + 1.

    Nodes are indexed in the order given; callers pass canonically ordered
    proposals.
    """
    n = len(proposals)
    raw = np.zeros((n, n))
    by_frame: dict[int, list[int]] = {}
    for i, p in enumerate(proposals):
        by_frame.setdefault(p.frame, []).append(i)
    for frame, src in by_frame.items():
        dst = by_frame.get(frame + 1)
        if not dst:
            continue
        sigma = iou_matrix([proposals[i].box for i in src], [proposals[j].box for j in dst])
        raw[np.ix_(src, dst)] = sigma
    return raw


def normalize_rows(raw: np.ndarray) -> np.ndarray:
    """Divide each nonzero row by its sum; all-zero rows stay zero."""
    sums = raw.sum(axis=1, keepdims=True)
    out = np.zeros_like(raw)
    np.divide(raw, sums, out=out, where=sums > 0)
    return out


def build_front_graph(proposals: Sequence[RegionProposal]) -> AdjacencyMatrix:
    return AdjacencyMatrix("front", normalize_rows(raw_front_overlaps(proposals)))


def build_back_graph(proposals: Sequence[RegionProposal]) -> AdjacencyMatrix:
    # edge j -> i (frame t+1 to frame t) carries sigma_ij, stored at [j, i]
    return AdjacencyMatrix("back", normalize_rows(raw_front_overlaps(proposals).T))


def check_adjacency(a: AdjacencyMatrix, frames: Sequence[int] | None = None,
                    tol: float = 1e-9) -> list[str]:
    """Return a list of invariant violations (empty when the matrix is valid)."""
    problems = []
    m = a.m
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return [f"{a.kind}: not square, shape {m.shape}"]
    if not np.all(np.isfinite(m)):
        problems.append(f"{a.kind}: non-finite entries")
    sums = m.sum(axis=1)
    if a.kind == "sim":
        if np.any(m <= 0):
            problems.append("sim: non-positive entries")
        bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
        if bad.size:
            problems.append(f"sim: rows {bad.tolist()} do not sum to 1")
        return problems
    if np.any(m < 0) or np.any(m > 1):
        problems.append(f"{a.kind}: entries outside [0, 1]")
    zero_rows = ~np.any(m != 0, axis=1)
    bad = np.flatnonzero(~zero_rows & (np.abs(sums - 1.0) > tol))
    if bad.size:
        problems.append(f"{a.kind}: rows {bad.tolist()} neither zero nor summing to 1")
    if frames is not None:
        f = np.asarray(frames)
        step = 1 if a.kind == "front" else -1
        allowed = (f[None, :] - f[:, None]) == step
        if np.any((m != 0) & ~allowed):
            problems.append(f"{a.kind}: edge between non-consecutive frames or wrong direction")
    return problems
