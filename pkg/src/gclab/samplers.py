"""Context samplers: anchors, positives and negatives drawn from graph views."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .graph import Graph

SAMPLERS = ("line", "deepwalk", "dgi", "mvgrl", "gca", "graphcl")
AUGMENTATIONS = ("edge-drop", "attr-mask", "node-drop", "subgraph")
IN_BATCH = "in-batch"

ORIGINAL, SHUFFLED, DIFFUSION, AUGMENTED = "original", "feature-shuffled", "diffusion", "augmented"


class SamplerError(ValueError):
    pass


@dataclass
class AugmentationSpec:
    strategy: str
    rate: float
    seed: int

    def __post_init__(self):
        if self.strategy not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.strategy!r}")
        if not 0 <= self.rate <= 1:
            raise ValueError(f"augmentation rate must be in [0, 1], got {self.rate}")


@dataclass(eq=False)
class View:
    """A (possibly transformed) copy of one source graph.

    ``local_ids[i]`` is the source-graph node that node ``i`` of this view
    came from; lookup encoders use it to find their embedding rows.
    """
    kind: str
    graph: Graph
    source: int
    local_ids: np.ndarray
    dense_adjacency_override: Optional[np.ndarray] = None
    augmentation: Optional[AugmentationSpec] = None

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes


@dataclass(frozen=True)
class SampleRef:
    scope: str  # "node" | "graph"
    view_id: int
    index: int = -1


@dataclass
class ContrastBatch:
    """Anchor/positive pairs over a list of views.

    Pairs are stored column-wise: ``anchor_view[p]``, ``anchor_index[p]``
    (-1 for a graph-scope anchor), and likewise for positives. ``negatives``
    is either ``"in-batch"`` or a pair of [P, N] arrays (views, indices).
    """
    views: list[View]
    anchor_view: np.ndarray
    anchor_index: np.ndarray
    positive_view: np.ndarray
    positive_index: np.ndarray
    negatives: Union[str, tuple[np.ndarray, np.ndarray]] = IN_BATCH
    negatives_per_positive: int = 0
    # in-batch candidates also include the anchors themselves (GCA-style)
    anchors_as_candidates: bool = False
    # in-batch only: extra (views, indices) candidates, e.g. a corrupted view's nodes
    extra_candidates: Optional[tuple[np.ndarray, np.ndarray]] = None
    counts: dict = field(default_factory=dict)

    @property
    def num_pairs(self) -> int:
        return len(self.anchor_view)

    @property
    def explicit(self) -> bool:
        return not isinstance(self.negatives, str)

    def pairs(self) -> list[tuple[SampleRef, SampleRef]]:
        return [(_ref(v, i), _ref(pv, pi)) for v, i, pv, pi in
                zip(self.anchor_view.tolist(), self.anchor_index.tolist(),
                    self.positive_view.tolist(), self.positive_index.tolist())]

    def negative_refs(self) -> list[list[SampleRef]]:
        if not self.explicit:
            raise ValueError("in-batch negatives have no explicit references")
        nv, ni = self.negatives
        return [[_ref(v, i) for v, i in zip(rv, ri)] for rv, ri in zip(nv.tolist(), ni.tolist())]

    def validate(self) -> None:
        def check(views, idx):
            for v, i in zip(views.ravel().tolist(), idx.ravel().tolist()):
                if not 0 <= v < len(self.views):
                    raise SamplerError(f"reference to missing view {v}")
                if i >= self.views[v].num_nodes:
                    raise SamplerError(f"node {i} out of range for view {v}")

        check(self.anchor_view, self.anchor_index)
        check(self.positive_view, self.positive_index)
        if self.explicit:
            nv, ni = self.negatives
            if nv.shape != (self.num_pairs, self.negatives_per_positive):
                raise SamplerError(f"explicit negatives have shape {nv.shape}")
            check(nv, ni)

    def select(self, keep: np.ndarray) -> "ContrastBatch":
        """Restrict to the pairs at positions ``keep``."""
        neg = self.negatives
        if self.explicit:
            neg = (neg[0][keep], neg[1][keep])
        return ContrastBatch(self.views, self.anchor_view[keep], self.anchor_index[keep],
                             self.positive_view[keep], self.positive_index[keep], neg,
                             self.negatives_per_positive, self.anchors_as_candidates,
                             self.extra_candidates, self.counts)


def _ref(view: int, index: int) -> SampleRef:
    return SampleRef("graph", view) if index < 0 else SampleRef("node", view, index)


def _original(g: Graph, source: int = 0) -> View:
    return View(ORIGINAL, g, source, np.arange(g.num_nodes))


def _uniform_node_negatives(rng, pair_count: int, num_nodes: int, n_neg: int, view: int = 0):
    idx = rng.integers(0, num_nodes, size=(pair_count, n_neg))
    return np.full_like(idx, view), idx


def _finish(views, av, ai, pv, pi, mode, neg_fn, n_neg, **kw) -> ContrastBatch:
    av, ai, pv, pi = (np.asarray(x, dtype=np.int64) for x in (av, ai, pv, pi))
    if mode == "explicit":
        negatives = neg_fn(len(av))
        negatives = (np.asarray(negatives[0], np.int64), np.asarray(negatives[1], np.int64))
        batch = ContrastBatch(views, av, ai, pv, pi, negatives, n_neg, **kw)
    elif mode == IN_BATCH:
        batch = ContrastBatch(views, av, ai, pv, pi, IN_BATCH, 0, **kw)
    else:
        raise ValueError(f"unknown negative mode {mode!r}")
    return batch


# ----------------------------------------------------------------- LINE / DW


def sample_line(g: Graph, seed: int, mode: str = "explicit", num_negatives: int = 1) -> ContrastBatch:
    """Neighbouring nodes are positives; negatives are uniform random nodes."""
    if g.num_edges == 0:
        raise SamplerError("no positive pairs: graph has no edges")
    rng = np.random.default_rng(seed)
    u, v = g.edges[:, 0], g.edges[:, 1]
    anchors = np.r_[u, v]
    positives = np.r_[v, u]
    zeros = np.zeros(len(anchors), dtype=np.int64)
    return _finish([_original(g)], zeros, anchors, zeros, positives, mode,
                   lambda p: _uniform_node_negatives(rng, p, g.num_nodes, num_negatives),
                   num_negatives)


def random_walks(g: Graph, walks_per_node: int, walk_length: int, seed) -> list[list[int]]:
    """Uniform random walks, ``walks_per_node`` passes over a shuffled node order.

    ``seed`` may also be a Generator, which is advanced in place.
    """
    rng = np.random.default_rng(seed)
    nbrs = g.neighbors()
    walks = []
    for _ in range(walks_per_node):
        for start in rng.permutation(g.num_nodes).tolist():
            walk = [start]
            while len(walk) < walk_length:
                options = nbrs[walk[-1]]
                if len(options) == 0:
                    break
                walk.append(int(options[rng.integers(len(options))]))
            walks.append(walk)
    return walks


def window_pairs(walk: Sequence[int], window: int) -> tuple[np.ndarray, np.ndarray]:
    """Ordered (center, context) pairs with 1 <= |offset| <= window."""
    walk = np.asarray(walk, dtype=np.int64)
    centers, contexts = [], []
    for offset in range(1, window + 1):
        if offset >= len(walk):
            break
        centers += [walk[:-offset], walk[offset:]]
        contexts += [walk[offset:], walk[:-offset]]
    if not centers:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def sample_deepwalk(g: Graph, walks_per_node: int = 5, walk_length: int = 30, window: int = 5,
                    seed: int = 0, mode: str = "explicit", num_negatives: int = 1) -> ContrastBatch:
    if walk_length < 2 or window < 1:
        raise ValueError("deepwalk needs walk_length >= 2 and window >= 1")
    rng = np.random.default_rng(seed)
    walks = random_walks(g, walks_per_node, walk_length, rng)
    parts = [window_pairs(w, window) for w in walks]
    anchors = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, np.int64)
    positives = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.int64)
    if len(anchors) == 0:
        raise SamplerError("no positive pairs: random walks never left their start nodes")
    zeros = np.zeros(len(anchors), dtype=np.int64)
    return _finish([_original(g)], zeros, anchors, zeros, positives, mode,
                   lambda p: _uniform_node_negatives(rng, p, g.num_nodes, num_negatives),
                   num_negatives, counts={"walks": len(walks)})


# ------------------------------------------------------------- DGI / MVGRL


def shuffle_features(view: View, rng: np.random.Generator) -> View:
    """Row-permute the feature matrix (and lookup ids) over unchanged structure."""
    perm = rng.permutation(view.num_nodes)
    g = view.graph
    shuffled = Graph(num_nodes=g.num_nodes, edges=g.edges,
                     features=None if g.features is None else g.features[perm],
                     node_labels=g.node_labels)
    shuffled._cache.update({k: v for k, v in g._cache.items()})
    kind = SHUFFLED if view.kind == ORIGINAL else view.kind
    return View(kind, shuffled, view.source, view.local_ids[perm], view.dense_adjacency_override)


def _local_global(views, anchor_views, positive_views, negative_views_for, rng, mode,
                  num_negatives) -> ContrastBatch:
    """Graph anchors contrasted with their own nodes (positives) and foreign nodes (negatives)."""
    av, ai, pv, pi = [], [], [], []
    neg_v, neg_i = [], []
    for k, (anchor_view, pos_view) in enumerate(zip(anchor_views, positive_views)):
        n = views[pos_view].num_nodes
        av += [anchor_view] * n
        ai += [-1] * n
        pv += [pos_view] * n
        pi += list(range(n))
        if mode != "explicit":
            continue
        cand = negative_views_for(k)
        sizes = np.array([views[c].num_nodes for c in cand])
        if len(cand) == 1 and sizes[0] == n and num_negatives == 1:
            # aligned corruption: node i is paired with corrupted node i
            neg_v.append(np.full((n, 1), cand[0]))
            neg_i.append(np.arange(n).reshape(n, 1))
            continue
        flat = rng.integers(0, sizes.sum(), size=(n, num_negatives))
        bounds = np.cumsum(sizes)
        which = np.searchsorted(bounds, flat, side="right")
        neg_v.append(np.asarray(cand)[which])
        neg_i.append(flat - (bounds - sizes)[which])
    negatives = (np.concatenate(neg_v), np.concatenate(neg_i)) if mode == "explicit" else None
    extra = None
    if mode == IN_BATCH:
        corrupted = sorted({c for k in range(len(anchor_views)) for c in negative_views_for(k)}
                           - set(positive_views))
        if corrupted:
            extra = (np.concatenate([np.full(views[c].num_nodes, c) for c in corrupted]),
                     np.concatenate([np.arange(views[c].num_nodes) for c in corrupted]))
    return _finish(views, av, ai, pv, pi, mode, lambda p: negatives, num_negatives,
                   extra_candidates=extra)


def sample_dgi(batch_graphs: Sequence[Graph], seed: int, mode: str = "explicit",
               num_negatives: int = 1) -> ContrastBatch:
    if len(batch_graphs) == 0:
        raise SamplerError("dgi needs at least one graph")
    rng = np.random.default_rng(seed)
    originals = [_original(g, k) for k, g in enumerate(batch_graphs)]
    k = len(originals)
    if k == 1:
        views = [originals[0], shuffle_features(originals[0], rng)]
        return _local_global(views, [0], [0], lambda _: [1], rng, mode, num_negatives)
    own = list(range(k))
    return _local_global(originals, own, own, lambda j: [o for o in own if o != j], rng, mode,
                         num_negatives)


def ppr_diffusion(g: Graph, alpha: float = 0.2) -> np.ndarray:
    """Personalized-PageRank diffusion alpha * (I - (1 - alpha) T)^-1.

    T is the random-walk transition matrix D^-1 A; isolated nodes get a
    self-loop so every row of T, and therefore of the result, sums to one.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    key = ("ppr", float(alpha))
    if key in g._cache:
        return g._cache[key]
    n = g.num_nodes
    a = g.adjacency().toarray()
    isolated = a.sum(axis=1) == 0
    a[isolated, isolated] = 1.0
    t = a / a.sum(axis=1, keepdims=True)
    m = np.eye(n) - (1 - alpha) * t
    try:
        s = alpha * np.linalg.inv(m)
    except np.linalg.LinAlgError as err:
        raise SamplerError(f"diffusion matrix is singular: {err}") from None
    if not np.all(np.isfinite(s)):
        raise SamplerError("diffusion matrix is numerically singular")
    g._cache[key] = s
    return s


def diffusion_view(g: Graph, alpha: float, source: int = 0) -> View:
    return View(DIFFUSION, g, source, np.arange(g.num_nodes), ppr_diffusion(g, alpha))


def sample_mvgrl(batch_graphs: Union[Graph, Sequence[Graph]], alpha: float = 0.2, seed: int = 0,
                 mode: str = "explicit", num_negatives: int = 1) -> ContrastBatch:
    if isinstance(batch_graphs, Graph):
        batch_graphs = [batch_graphs]
    rng = np.random.default_rng(seed)
    originals = [_original(g, k) for k, g in enumerate(batch_graphs)]
    diffs = [diffusion_view(g, alpha, k) for k, g in enumerate(batch_graphs)]
    k = len(originals)
    if k == 1:
        views = [originals[0], diffs[0], shuffle_features(diffs[0], rng)]
        return _local_global(views, [0], [1], lambda _: [2], rng, mode, num_negatives)
    return _local_global(originals + diffs, list(range(k)), [k + j for j in range(k)],
                         lambda j: [k + o for o in range(k) if o != j], rng, mode, num_negatives)


# ------------------------------------------------------------- augmentation


def augment(g: Graph, spec: AugmentationSpec) -> tuple[Graph, np.ndarray]:
    """Augmented graph plus the source indices of its nodes."""
    rng = np.random.default_rng(spec.seed)
    n = g.num_nodes
    everyone = np.arange(n)
    if spec.rate == 0:
        return g, everyone
    if spec.strategy == "edge-drop":
        keep = rng.random(g.num_edges) >= spec.rate
        return Graph(n, g.edges[keep], g.features, g.node_labels), everyone
    if spec.strategy == "attr-mask":
        if g.features is None:
            return g, everyone
        f = g.features.copy()
        masked = np.flatnonzero(rng.random(f.shape[1]) < spec.rate)
        f[:, masked] = rng.standard_normal((n, len(masked)))
        return Graph(n, g.edges, f, g.node_labels), everyone
    if spec.strategy == "node-drop":
        kept = np.flatnonzero(rng.random(n) >= spec.rate)
    else:
        kept = _walk_subgraph(g, math.ceil((1 - spec.rate) * n), rng)
    if len(kept) == 0:
        kept = np.array([rng.integers(n)])
    kept = np.sort(kept)
    return g.induced(kept), kept


def _walk_subgraph(g: Graph, target: int, rng) -> np.ndarray:
    """Grow a node set by random-walk expansion; jump to a fresh node when stuck."""
    if target <= 0:
        return np.zeros(0, dtype=np.int64)
    nbrs = g.neighbors()
    chosen = {int(rng.integers(g.num_nodes))}
    frontier = set(nbrs[next(iter(chosen))].tolist()) - chosen
    while len(chosen) < target:
        if not frontier:
            rest = np.setdiff1d(np.arange(g.num_nodes), np.fromiter(chosen, np.int64))
            pick = int(rest[rng.integers(len(rest))])
        else:
            ordered = sorted(frontier)
            pick = ordered[rng.integers(len(ordered))]
        chosen.add(pick)
        frontier |= set(nbrs[pick].tolist())
        frontier -= chosen
    return np.fromiter(chosen, np.int64)


def augment_graph(g: Graph, spec: AugmentationSpec) -> Graph:
    return augment(g, spec)[0]


def augmented_view(g: Graph, spec: AugmentationSpec, source: int = 0) -> View:
    aug, kept = augment(g, spec)
    return View(AUGMENTED, aug, source, kept, augmentation=spec)


def sample_gca(g: Graph, rate: float = 0.2, seed: int = 0, mode: str = IN_BATCH,
               num_negatives: int = 1) -> ContrastBatch:
    """Node i of one augmented view against node i of another."""
    rng = np.random.default_rng(seed)
    strategies = rng.choice(["edge-drop", "attr-mask"], size=2)
    seeds = rng.integers(0, 2**31, size=2)
    views = [augmented_view(g, AugmentationSpec(str(s), rate, int(sd)))
             for s, sd in zip(strategies, seeds)]
    n = g.num_nodes
    idx = np.arange(n)

    def negatives(p):
        # uniform over the 2n - 2 nodes that are neither the anchor nor its positive
        draw = rng.integers(0, 2 * n - 2, size=(p, num_negatives))
        view = (draw >= n - 1).astype(np.int64)
        local = draw - view * (n - 1)
        local = local + (local >= idx[:, None])
        return view, local

    return _finish(views, np.zeros(n), idx, np.ones(n), idx, mode, negatives, num_negatives,
                   anchors_as_candidates=True)


def sample_graphcl(batch_graphs: Sequence[Graph], rate: float = 0.2, seed: int = 0,
                   mode: str = IN_BATCH, num_negatives: int = 1) -> ContrastBatch:
    """Two augmented views per graph; views of other graphs are negatives."""
    k = len(batch_graphs)
    if k < 2:
        raise SamplerError("GraphCL requires multi-graph batches")
    rng = np.random.default_rng(seed)
    view_a, view_b = [], []
    for j, g in enumerate(batch_graphs):
        s = rng.choice(AUGMENTATIONS, size=2)
        sd = rng.integers(0, 2**31, size=2)
        view_a.append(augmented_view(g, AugmentationSpec(str(s[0]), rate, int(sd[0])), j))
        view_b.append(augmented_view(g, AugmentationSpec(str(s[1]), rate, int(sd[1])), j))
    views = view_a + view_b
    anchors = np.arange(k)
    minus_one = np.full(k, -1)

    def negatives(p):
        draw = rng.integers(0, k - 1, size=(p, num_negatives))
        other = draw + (draw >= anchors[:, None])
        return k + other, np.full_like(other, -1)

    return _finish(views, anchors, minus_one, anchors + k, minus_one, mode, negatives,
                   num_negatives)
