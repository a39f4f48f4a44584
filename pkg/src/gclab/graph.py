"""Graph and dataset model: ingestion, normalization, subsampling, batching, splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

NODE_TASK = "node"
GRAPH_TASK = "graph"


class DataError(ValueError):
    """Raised for malformed dataset files or inconsistent graph data."""


@dataclass(eq=False)
class Graph:
    num_nodes: int
    edges: np.ndarray  # (E, 2) int64, canonical u < v, sorted, unique
    features: Optional[np.ndarray] = None
    node_labels: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.num_nodes = int(self.num_nodes)
        self.edges = canonical_edges(self.edges, self.num_nodes)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != self.num_nodes:
                raise DataError(
                    f"features have shape {self.features.shape}, expected ({self.num_nodes}, d)"
                )
        if self.node_labels is not None:
            self.node_labels = np.asarray(self.node_labels, dtype=np.int64)
            if self.node_labels.shape != (self.num_nodes,):
                raise DataError(
                    f"node_labels has length {len(self.node_labels)}, expected {self.num_nodes}"
                )

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feat_dim(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency without self-loops."""
        if "adj" not in self._cache:
            n = self.num_nodes
            u, v = self.edges[:, 0], self.edges[:, 1]
            data = np.ones(2 * len(u))
            a = sp.coo_matrix((data, (np.r_[u, v], np.r_[v, u])), shape=(n, n)).tocsr()
            self._cache["adj"] = a
        return self._cache["adj"]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def neighbors(self) -> list[np.ndarray]:
        if "nbrs" not in self._cache:
            a = self.adjacency()
            self._cache["nbrs"] = [a.indices[a.indptr[i]:a.indptr[i + 1]] for i in range(self.num_nodes)]
        return self._cache["nbrs"]

    def induced(self, nodes: np.ndarray) -> "Graph":
        """Induced subgraph on ``nodes`` (re-indexed in the given order)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.num_nodes, -1, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        e = remap[self.edges] if len(self.edges) else np.zeros((0, 2), dtype=np.int64)
        e = e[(e >= 0).all(axis=1)] if len(e) else e
        return Graph(
            num_nodes=len(nodes),
            edges=e,
            features=None if self.features is None else self.features[nodes],
            node_labels=None if self.node_labels is None else self.node_labels[nodes],
        )

    def same_as(self, other: "Graph") -> bool:
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.edges, other.edges)
            and eq(self.features, other.features)
            and eq(self.node_labels, other.node_labels)
        )


def canonical_edges(edges, num_nodes: int) -> np.ndarray:
    """Symmetrize, drop self-loops and duplicates, store as sorted (u < v) rows."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2) if len(edges) else np.zeros((0, 2), np.int64)
    if len(e) and (e.min() < 0 or e.max() >= num_nodes):
        bad = int(np.flatnonzero((e < 0).any(axis=1) | (e >= num_nodes).any(axis=1))[0])
        raise DataError(f"edge {bad} {e[bad].tolist()} references a node outside [0, {num_nodes})")
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    if len(e):
        e = np.unique(e, axis=0)
    return e


@dataclass(eq=False)
class Dataset:
    task: str
    graphs: list[Graph]
    graph_labels: Optional[np.ndarray] = None
    name: str = "dataset"

    def __post_init__(self):
        if self.task not in (NODE_TASK, GRAPH_TASK):
            raise DataError(f"unknown task {self.task!r}")
        if self.task == NODE_TASK:
            if len(self.graphs) != 1:
                raise DataError(f"node task needs exactly one graph, got {len(self.graphs)}")
            if self.graphs[0].node_labels is None:
                raise DataError("node task graph has no node_labels")
        else:
            if self.graph_labels is None:
                raise DataError("graph task needs graph_labels")
            self.graph_labels = np.asarray(self.graph_labels, dtype=np.int64)
            if len(self.graph_labels) != len(self.graphs):
                raise DataError(
                    f"graph_labels has {len(self.graph_labels)} entries for {len(self.graphs)} graphs"
                )

    @property
    def labels(self) -> np.ndarray:
        return self.graphs[0].node_labels if self.task == NODE_TASK else self.graph_labels

    @property
    def num_items(self) -> int:
        return len(self.labels)

    def same_as(self, other: "Dataset") -> bool:
        if (self.task, self.name, len(self.graphs)) != (other.task, other.name, len(other.graphs)):
            return False
        if (self.graph_labels is None) != (other.graph_labels is None):
            return False
        if self.graph_labels is not None and not np.array_equal(self.graph_labels, other.graph_labels):
            return False
        return all(a.same_as(b) for a, b in zip(self.graphs, other.graphs))


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int


@dataclass
class BatchPlan:
    batches: list[list[int]]
    node_budget: int = 4096


# ---------------------------------------------------------------- ingestion


def _with_default_features(g: Graph) -> Graph:
    if g.features is None:
        g.features = np.ones((g.num_nodes, 1))
    return g


def apply_degree_features(d: Dataset) -> Dataset:
    """Replace features of every graph with a one-hot degree encoding."""
    max_deg = max(int(g.degrees().max(initial=0)) for g in d.graphs)
    for g in d.graphs:
        f = np.zeros((g.num_nodes, max_deg + 1))
        f[np.arange(g.num_nodes), g.degrees()] = 1.0
        g.features = f
    return d


def _parse_json_dataset(doc: dict, source: str) -> Dataset:
    def need(obj, key, where):
        if key not in obj:
            raise DataError(f"{source}: {where}: missing key {key!r}")
        return obj[key]

    task = need(doc, "task", "document")
    graphs = []
    for gi, gd in enumerate(need(doc, "graphs", "document")):
        where = f"graphs[{gi}]"
        try:
            g = Graph(
                num_nodes=need(gd, "num_nodes", where),
                edges=need(gd, "edges", where),
                features=gd.get("features"),
                node_labels=gd.get("node_labels"),
            )
        except DataError as err:
            raise DataError(f"{source}: {where}: {err}") from None
        except (TypeError, ValueError) as err:
            raise DataError(f"{source}: {where}: {err}") from None
        graphs.append(_with_default_features(g))
    try:
        return Dataset(task=task, graphs=graphs, graph_labels=doc.get("graph_labels"),
                       name=doc.get("name", Path(source).stem))
    except DataError as err:
        raise DataError(f"{source}: {err}") from None


def _read_edgelist(path: Path) -> Dataset:
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DataError(f"{path}:{lineno}: expected 'u v', got {line!r}")
        try:
            pairs.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
    labels_path = path.with_suffix(".labels")
    labels = None
    if labels_path.exists():
        labels = [int(x) for x in labels_path.read_text().split()]
    n = max([max(p) for p in pairs], default=-1) + 1
    if labels is not None:
        if len(labels) < n:
            raise DataError(f"{labels_path}: {len(labels)} labels for {n} nodes")
        n = len(labels)
    else:
        labels = [0] * n
    for lineno, (u, v) in enumerate(pairs, 1):
        if u < 0 or v < 0:
            raise DataError(f"{path}: edge #{lineno} has a negative node id")
    g = _with_default_features(Graph(num_nodes=n, edges=pairs, node_labels=labels))
    return Dataset(task=NODE_TASK, graphs=[g], name=path.stem)


def load_dataset(path, format: Optional[str] = None) -> Dataset:
    """Load a dataset from a JSON document or a whitespace edge list."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if format is None:
        format = "json" if path.suffix == ".json" else "edgelist"
    if format == "edgelist":
        return _read_edgelist(path)
    if format != "json":
        raise DataError(f"unknown dataset format {format!r}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DataError(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from None
    return _parse_json_dataset(doc, str(path))


def dataset_to_json(d: Dataset) -> dict:
    return {
        "name": d.name,
        "task": d.task,
        "graphs": [
            {
                "num_nodes": g.num_nodes,
                "edges": g.edges.tolist(),
                "features": None if g.features is None else g.features.tolist(),
                "node_labels": None if g.node_labels is None else g.node_labels.tolist(),
            }
            for g in d.graphs
        ],
        "graph_labels": None if d.graph_labels is None else d.graph_labels.tolist(),
    }


def save_dataset(d: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_json(d)), encoding="utf-8")


# ------------------------------------------------------------- normalization


def symmetric_normalize(g: Graph) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 as a sparse matrix."""
    if "sym_norm" not in g._cache:
        a = g.adjacency() + sp.identity(g.num_nodes, format="csr")
        d = np.asarray(a.sum(axis=1)).ravel()
        inv = sp.diags(1.0 / np.sqrt(d))
        g._cache["sym_norm"] = (inv @ a @ inv).tocsr()
    return g._cache["sym_norm"]


# ---------------------------------------------------------- sampling/batching


def sample_subgraph(g: Graph, max_nodes: int, seed: int) -> Graph:
    if max_nodes < 1:
        raise ValueError("max_nodes must be >= 1")
    if g.num_nodes <= max_nodes:
        return g
    rng = np.random.default_rng(seed)
    nodes = np.sort(rng.choice(g.num_nodes, size=max_nodes, replace=False))
    return g.induced(nodes)


def plan_batches(d: Dataset, node_budget: int = 4096, seed: int = 0) -> BatchPlan:
    if node_budget < 1:
        raise ValueError("node_budget must be >= 1")
    if d.task == NODE_TASK:
        return BatchPlan([[0]], node_budget)
    order = np.random.default_rng(seed).permutation(len(d.graphs))
    batches: list[list[int]] = []
    current: list[int] = []
    used = 0
    for gi in order.tolist():
        n = d.graphs[gi].num_nodes
        if n > node_budget:
            batches.append([gi])
            continue
        if used + n > node_budget:
            batches.append(current)
            current, used = [], 0
        current.append(gi)
        used += n
    if current:
        batches.append(current)
    return BatchPlan(batches, node_budget)


def make_split(d: Dataset, ratios: Sequence[float] = (0.2, 0.1, 0.7), seed: int = 0) -> Split:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    labeled = np.flatnonzero(d.labels >= 0)
    n = len(labeled)
    if n < 3:
        raise ValueError(f"need at least 3 labeled items to split, got {n}")
    perm = np.random.default_rng(seed).permutation(labeled)
    n_train = max(1, int(round(ratios[0] * n)))
    n_val = max(1, int(round(ratios[1] * n)))
    n_train = min(n_train, n - 2)
    n_val = min(n_val, n - n_train - 1)
    return Split(
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train:n_train + n_val]),
        test=np.sort(perm[n_train + n_val:]),
        seed=seed,
    )


# ---------------------------------------------------------------- synthetic


def generate_sbm(block_sizes, p_in: float, p_out: float, feat_dim: int = 16, seed: int = 0,
                 name: str = "sbm") -> Dataset:
    """Stochastic block model; features are the one-hot block id plus N(0, 1) noise."""
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise ValueError("probabilities must lie in [0, 1]")
    block_sizes = [int(b) for b in block_sizes]
    n = sum(block_sizes)
    k = len(block_sizes)
    if feat_dim < k:
        raise ValueError(f"feat_dim {feat_dim} cannot hold {k} block indicators")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), block_sizes)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    features = rng.standard_normal((n, feat_dim))
    features[np.arange(n), labels] += 1.0
    g = Graph(num_nodes=n, edges=edges, features=features, node_labels=labels)
    return Dataset(task=NODE_TASK, graphs=[g], name=name)


def cycle_graph(n: int) -> Graph:
    idx = np.arange(n)
    return Graph(num_nodes=n, edges=np.stack([idx, (idx + 1) % n], axis=1),
                 features=np.ones((n, 1)))


def generate_size_classes(sizes=(20, 40), graphs_per_class: int = 100,
                          name: str = "sizes") -> Dataset:
    """Graph-classification set where every graph is a cycle and the class is its size."""
    graphs, labels = [], []
    for label, n in enumerate(sizes):
        for _ in range(graphs_per_class):
            graphs.append(cycle_graph(n))
            labels.append(label)
    return Dataset(task=GRAPH_TASK, graphs=graphs, graph_labels=np.array(labels), name=name)

