"""Shared builders for tests."""

import numpy as np

from regiongraph.graphs import AdjacencyMatrix, canonical_order
from regiongraph.model import VideoGraphInput
from regiongraph.regions import BoundingBox, RegionProposal


def random_proposals(rng, frames, per_frame, d, size=20.0):
    props = []
    for t in range(frames):
        for k in range(per_frame):
            x, y = rng.uniform(0, size - 4, 2)
            w, h = rng.uniform(2, 8, 2)
            props.append(RegionProposal(t, BoundingBox(x, y, x + w, y + h), rng.normal(size=d), f"f{t}k{k}"))
    return props


def random_stochastic(rng, n, density=0.5):
    a = rng.random((n, n)) * (rng.random((n, n)) < density)
    a[np.arange(n), rng.integers(0, n, n)] += 0.1
    return a / a.sum(axis=1, keepdims=True)


def random_input(rng, n, d, with_sim=False):
    g_sim = AdjacencyMatrix("sim", random_stochastic(rng, n, 1.0)) if with_sim else None
    return VideoGraphInput(rng.normal(size=(n, d)), g_sim,
                           AdjacencyMatrix("front", random_stochastic(rng, n)),
                           AdjacencyMatrix("back", random_stochastic(rng, n)),
                           rng.normal(size=d))


def permute_input(inp, perm):
    p = np.asarray(perm)

    def pg(g):
        return None if g is None else AdjacencyMatrix(g.kind, g.m[np.ix_(p, p)])

    return VideoGraphInput(inp.node_features[p], pg(inp.g_sim), pg(inp.g_front), pg(inp.g_back),
                           inp.global_feature)


def ordered(props):
    return [props[i] for i in canonical_order(props)]
