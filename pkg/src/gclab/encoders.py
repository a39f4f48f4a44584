"""Node encoders (lookup, MLP, GCN, GAT, GIN), readouts and the projection head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, glorot
from .graph import symmetric_normalize
from .samplers import View

ENCODERS = ("lookup", "mlp", "gcn", "gat", "gin")
READOUTS = ("mean", "sum", "jknet", "none")
GAT_SLOPE = 0.2
PRELU_INIT = 0.25
ATTENTION_THRESHOLD = 1e-4


@dataclass
class EncoderConfig:
    kind: str = "gcn"
    layers: int = 2
    emb_dim: int = 64
    readout: str = "mean"
    projection_head: bool = False

    def __post_init__(self):
        if self.kind not in ENCODERS:
            raise ValueError(f"unknown encoder {self.kind!r}")
        if self.readout not in READOUTS:
            raise ValueError(f"unknown readout {self.readout!r}")
        if not 1 <= self.layers <= 4:
            raise ValueError(f"encoder layers must be in 1..4, got {self.layers}")
        if self.emb_dim < 1:
            raise ValueError("emb_dim must be positive")

    @property
    def depth(self) -> int:
        """Layers that actually produce hidden states (a lookup table has one)."""
        return 1 if self.kind == "lookup" else self.layers


@dataclass
class EmbeddingTable:
    node_embeddings: Tensor
    segments: np.ndarray  # view index of every row
    num_views: int
    per_layer: list = field(default_factory=list)
    graph_embedding: Optional[Tensor] = None


def init_params(cfg: EncoderConfig, params: ParamStore, feat_dim: int, lookup_rows: int,
                rng: np.random.Generator) -> ParamStore:
    d = cfg.emb_dim
    if cfg.kind == "lookup":
        params.add("enc.table", rng.standard_normal((lookup_rows, d)) / np.sqrt(d))
    else:
        for layer in range(cfg.layers):
            fan_in = feat_dim if layer == 0 else d
            p = f"enc.{layer}."
            if cfg.kind == "gin":
                params.add(p + "W1", glorot(rng, fan_in, d))
                params.add(p + "b1", np.zeros((1, d)))
                params.add(p + "W2", glorot(rng, d, d))
                params.add(p + "b2", np.zeros((1, d)))
            else:
                params.add(p + "W", glorot(rng, fan_in, d))
                params.add(p + "b", np.zeros((1, d)))
            if cfg.kind == "gat":
                params.add(p + "a_src", glorot(rng, d, 1))
                params.add(p + "a_dst", glorot(rng, d, 1))
    if cfg.readout == "jknet":
        params.add("readout.W", glorot(rng, cfg.depth * d, d))
        params.add("readout.slope", np.array([PRELU_INIT]))
    if cfg.projection_head:
        params.add("proj.W0", glorot(rng, d, d))
        params.add("proj.b0", np.zeros((1, d)))
        params.add("proj.W1", glorot(rng, d, d))
        params.add("proj.b1", np.zeros((1, d)))
    return params


# ------------------------------------------------------------ view structure


def _gcn_operator(view: View):
    if view.dense_adjacency_override is not None:
        return view.dense_adjacency_override
    return symmetric_normalize(view.graph)


def _gin_operator(view: View):
    """Sum aggregation (1 + eps) h_i + sum_j h_j with eps = 0, i.e. A + I."""
    if view.dense_adjacency_override is not None:
        return view.dense_adjacency_override
    g = view.graph
    if "gin_op" not in g._cache:
        g._cache["gin_op"] = (g.adjacency() + sp.identity(g.num_nodes, format="csr")).tocsr()
    return g._cache["gin_op"]


def _gat_edges(view: View) -> tuple[np.ndarray, np.ndarray]:
    """(src, dst) message pairs over N(i) plus i itself."""
    if view.dense_adjacency_override is not None:
        s = view.dense_adjacency_override
        dst, src = np.nonzero((s > ATTENTION_THRESHOLD) | np.eye(len(s), dtype=bool))
        return src, dst
    g = view.graph
    if "gat_edges" not in g._cache:
        a = (g.adjacency() + sp.identity(g.num_nodes, format="csr")).tocoo()
        g._cache["gat_edges"] = (a.col.astype(np.int64), a.row.astype(np.int64))
    return g._cache["gat_edges"]


def _union_operator(views: Sequence[View], kind: str):
    ops = [_gcn_operator(v) if kind == "gcn" else _gin_operator(v) for v in views]
    if len(ops) == 1:
        return ops[0]
    return sp.block_diag([sp.csr_matrix(o) if not sp.issparse(o) else o for o in ops], format="csr")


def _union_edges(views: Sequence[View]) -> tuple[np.ndarray, np.ndarray]:
    srcs, dsts, offset = [], [], 0
    for v in views:
        s, d = _gat_edges(v)
        srcs.append(s + offset)
        dsts.append(d + offset)
        offset += v.num_nodes
    return np.concatenate(srcs), np.concatenate(dsts)


def _features(views: Sequence[View]) -> np.ndarray:
    return np.concatenate([v.graph.features for v in views], axis=0)


# ----------------------------------------------------------------- encoders


def _linear(h, params, prefix) -> Tensor:
    return ad.add(ad.matmul(h, params[prefix + "W"]), params[prefix + "b"])


def _gat_layer(h, params, prefix, src, dst, n) -> Tensor:
    wh = ad.matmul(h, params[prefix + "W"])
    e = ad.add(ad.gather(ad.matmul(wh, params[prefix + "a_dst"]), dst),
               ad.gather(ad.matmul(wh, params[prefix + "a_src"]), src))
    alpha = ad.segment_softmax(ad.leaky_relu(e, GAT_SLOPE), dst, n)
    out = ad.segment_sum(ad.mul(alpha, ad.gather(wh, src)), dst, n)
    return ad.add(out, params[prefix + "b"])


def _encode_group(cfg: EncoderConfig, params: ParamStore, views: Sequence[View]) -> list[Tensor]:
    """Hidden states of every layer for the disjoint union of ``views``."""
    h = Tensor(_features(views))
    first = params["enc.0.W1"] if cfg.kind == "gin" else params["enc.0.W"]
    expected = first.shape[0]
    if h.shape[1] != expected:
        raise ad.ShapeError(f"encoder expects {expected} input features, view has {h.shape[1]}")
    n = h.shape[0]
    if cfg.kind in ("gcn", "gin"):
        op = _union_operator(views, cfg.kind)
    elif cfg.kind == "gat":
        src, dst = _union_edges(views)
    hidden = []
    for layer in range(cfg.layers):
        p = f"enc.{layer}."
        if cfg.kind == "mlp":
            h = ad.relu(_linear(h, params, p))
        elif cfg.kind == "gcn":
            h = ad.relu(ad.add(ad.spmm(op, ad.matmul(h, params[p + "W"])), params[p + "b"]))
        elif cfg.kind == "gin":
            agg = ad.spmm(op, h)
            inner = ad.relu(ad.add(ad.matmul(agg, params[p + "W1"]), params[p + "b1"]))
            h = ad.relu(ad.add(ad.matmul(inner, params[p + "W2"]), params[p + "b2"]))
        else:
            h = ad.relu(_gat_layer(h, params, p, src, dst, n))
        hidden.append(h)
    return hidden


def encode_nodes(cfg: EncoderConfig, params: ParamStore, views: Union[View, Sequence[View]],
                 lookup_offsets: Optional[Sequence[int]] = None) -> EmbeddingTable:
    """Node embeddings for each view, stacked in view order.

    ``lookup_offsets[source]`` is where the lookup rows of source graph
    ``source`` start; by default every view indexes the table from row 0.
    """
    if isinstance(views, View):
        views = [views]
    sizes = np.array([v.num_nodes for v in views])
    segments = np.repeat(np.arange(len(views)), sizes)
    if cfg.kind == "lookup":
        offsets = lookup_offsets if lookup_offsets is not None else [0] * (1 + max(v.source for v in views))
        rows = np.concatenate([v.local_ids + offsets[v.source] for v in views])
        table = params["enc.table"]
        if rows.size and rows.max() >= table.shape[0]:
            raise ad.ShapeError(f"lookup row {rows.max()} outside table of {table.shape[0]} rows")
        out = ad.gather(table, rows)
        return EmbeddingTable(out, segments, len(views), [out] if cfg.readout == "jknet" else [])
    # one group for all sparse views; each dense-override view is encoded on its own
    groups: list[list[int]] = [[i for i, v in enumerate(views) if v.dense_adjacency_override is None]]
    groups += [[i] for i, v in enumerate(views) if v.dense_adjacency_override is not None]
    groups = [g for g in groups if g]
    if len(groups) == 1:
        hidden = _encode_group(cfg, params, [views[i] for i in groups[0]])
    else:
        per_group = [_encode_group(cfg, params, [views[i] for i in grp]) for grp in groups]
        starts = np.r_[0, np.cumsum(sizes)]
        order = np.concatenate([np.arange(starts[i], starts[i + 1]) for grp in groups for i in grp])
        restore = np.argsort(order)
        hidden = [ad.gather(ad.concat([ph[layer] for ph in per_group], axis=0), restore)
                  for layer in range(cfg.layers)]
    # intermediate layers are only kept for the jknet readout
    return EmbeddingTable(hidden[-1], segments, len(views), hidden if cfg.readout == "jknet" else [])


def readout(table: EmbeddingTable, kind: str, params: ParamStore) -> Tensor:
    """One embedding per view: [num_views x d]."""
    seg, k = table.segments, table.num_views
    if kind == "mean":
        return ad.segment_mean(table.node_embeddings, seg, k)
    if kind == "sum":
        return ad.segment_sum(table.node_embeddings, seg, k)
    if kind == "jknet":
        if not table.per_layer:
            raise ValueError("jknet readout needs per-layer hidden states")
        sums = ad.concat([ad.segment_sum(h, seg, k) for h in table.per_layer], axis=1)
        return ad.prelu(ad.matmul(sums, params["readout.W"]), params["readout.slope"])
    raise ValueError(f"readout {kind!r} produces no graph embedding")


def project(embedding: Tensor, params: ParamStore, enabled: bool) -> Tensor:
    if not enabled:
        return embedding
    hidden = ad.relu(ad.add(ad.matmul(embedding, params["proj.W0"]), params["proj.b0"]))
    return ad.add(ad.matmul(hidden, params["proj.W1"]), params["proj.b1"])
