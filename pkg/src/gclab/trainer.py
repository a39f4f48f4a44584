"""Assemble a module tuple into a trainable model and run the optimization protocol."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import contrast, encoders, samplers
from .autodiff import ParamStore, Tensor
from .contrast import DiscriminatorConfig, ScoredBatch
from .encoders import EncoderConfig
from .graph import GRAPH_TASK, NODE_TASK, Dataset, Graph, plan_batches, sample_subgraph

log = logging.getLogger(__name__)

GRAPH_SCOPE_SAMPLERS = ("dgi", "mvgrl", "graphcl")


class IncompatibleSpec(ValueError):
    """A module combination that cannot be assembled for a dataset."""

    def __init__(self, first: str, second: str, reason: str):
        super().__init__(f"{first} is incompatible with {second}: {reason}")
        self.pair = (first, second)


class TrainingError(RuntimeError):
    pass


@dataclass
class FrameworkSpec:
    encoder: str = "gcn"
    readout: str = "mean"
    sampler: str = "line"
    discriminator: str = "inner"
    estimator: str = "jsd"
    emb_dim: int = 64
    layers: int = 2
    lr: float = 0.01
    max_epochs: int = 500
    patience: int = 3
    node_budget: int = 4096
    subgraph_cap: int = 5000
    seed: int = 0
    negatives: int = 1
    projection_head: bool = False
    temperature: float = 1.0
    pair_cap: int = 16384
    # sampler-specific settings
    walks_per_node: int = 5
    walk_length: int = 30
    window: int = 5
    alpha: float = 0.2
    aug_rate: float = 0.2

    def __post_init__(self):
        checks = [
            ("encoder", encoders.ENCODERS), ("readout", encoders.READOUTS),
            ("sampler", samplers.SAMPLERS), ("discriminator", contrast.DISCRIMINATORS),
            ("estimator", contrast.ESTIMATORS),
        ]
        for name, allowed in checks:
            if getattr(self, name) not in allowed:
                raise ValueError(f"unknown {name} {getattr(self, name)!r}; choose from {', '.join(allowed)}")

    @property
    def modules(self) -> tuple[str, str, str, str, str]:
        return (self.encoder, self.readout, self.sampler, self.discriminator, self.estimator)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.encoder, self.layers, self.emb_dim, self.readout, self.projection_head)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FrameworkSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    stopped_epoch: int = 0
    epoch_ms: list = field(default_factory=list)
    snapshot: dict = field(default_factory=dict, repr=False)
    checksum: str = ""

    def to_json(self) -> dict:
        return {"losses": self.losses, "stopped_epoch": self.stopped_epoch,
                "epoch_ms": self.epoch_ms, "param_checksum": self.checksum}


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs each raised the loss; a non-increase resets."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.streak = 0
        self.last: Optional[float] = None

    def update(self, loss: float) -> bool:
        if self.last is not None and loss > self.last:
            self.streak += 1
        else:
            self.streak = 0
        self.last = loss
        return self.streak >= self.patience


def early_stop_epoch(losses, patience: int = 3, max_epochs: int = 500) -> int:
    """Epoch (1-based) at which training stops for a given loss sequence."""
    stopper = EarlyStopping(patience)
    for epoch, loss in enumerate(losses[:max_epochs], 1):
        if stopper.update(loss):
            return epoch
    return min(len(losses), max_epochs)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ------------------------------------------------------------------- model


class Model:
    """A module tuple with its parameters, bound to one (subsampled) dataset."""

    def __init__(self, spec: FrameworkSpec, dataset: Dataset):
        self.spec = spec
        self.dataset = dataset
        self.cfg = spec.encoder_config()
        self.offsets = np.r_[0, np.cumsum([g.num_nodes for g in dataset.graphs])]
        rng = np.random.default_rng(spec.seed)
        self.params = encoders.init_params(self.cfg, ParamStore(), dataset.graphs[0].features.shape[1],
                                           int(self.offsets[-1]), rng)
        bilinear = None
        if spec.discriminator == "bilinear":
            bilinear = self.params.add("disc.W", ad.glorot(rng, spec.emb_dim, spec.emb_dim))
        self.disc = DiscriminatorConfig(spec.discriminator, bilinear)

    @property
    def mode(self) -> str:
        return "explicit" if self.spec.estimator == "jsd" else samplers.IN_BATCH

    # -------------------------------------------------------------- sampling

    def sample(self, graph_ids: list[int], seed: int) -> samplers.ContrastBatch:
        """One contrast batch over the given dataset graphs."""
        s = self.spec
        graphs = [self.dataset.graphs[i] for i in graph_ids]
        mode, neg = self.mode, s.negatives
        if s.sampler == "dgi":
            batch = samplers.sample_dgi(graphs, seed, mode, neg)
        elif s.sampler == "mvgrl":
            batch = samplers.sample_mvgrl(graphs, s.alpha, seed, mode, neg)
        elif s.sampler == "graphcl":
            batch = samplers.sample_graphcl(graphs, s.aug_rate, seed, mode, neg)
        else:
            parts = []
            for k, g in enumerate(graphs):
                sub_seed = derive_seed(seed, k)
                try:
                    if s.sampler == "line":
                        part = samplers.sample_line(g, sub_seed, mode, neg)
                    elif s.sampler == "deepwalk":
                        part = samplers.sample_deepwalk(g, s.walks_per_node, s.walk_length, s.window,
                                                        sub_seed, mode, neg)
                    else:
                        part = samplers.sample_gca(g, s.aug_rate, sub_seed, mode, neg)
                except samplers.SamplerError:
                    if len(graphs) == 1:
                        raise
                    continue
                for v in part.views:
                    v.source = k
                parts.append(part)
            if not parts:
                raise samplers.SamplerError("no positive pairs in batch")
            batch = _merge(parts)
        for v in {id(v): v for v in batch.views}.values():
            v.source = graph_ids[v.source]
        if batch.num_pairs > s.pair_cap:
            rng = np.random.default_rng(derive_seed(seed, len(graphs), 7))
            batch = batch.select(np.sort(rng.choice(batch.num_pairs, s.pair_cap, replace=False)))
        return batch

    # ------------------------------------------------------------- forward

    def embed_views(self, views) -> tuple[Tensor, Optional[Tensor]]:
        table = encoders.encode_nodes(self.cfg, self.params, views, self.offsets)
        graph_emb = None
        if self.cfg.readout != "none":
            graph_emb = encoders.readout(table, self.cfg.readout, self.params)
        return table.node_embeddings, graph_emb

    def loss(self, batch: samplers.ContrastBatch) -> Tensor:
        """Negated estimator value for one contrast batch."""
        nodes, graphs = self.embed_views(batch.views)
        starts = np.r_[0, np.cumsum([v.num_nodes for v in batch.views])]
        pieces = [nodes]
        graph_base = nodes.shape[0]
        uses_graph = (batch.anchor_index < 0).any() or (batch.positive_index < 0).any()
        if batch.explicit:
            uses_graph = uses_graph or (batch.negatives[1] < 0).any()
        if uses_graph:
            if graphs is None:
                raise IncompatibleSpec(self.spec.sampler, "readout none", "graph-scope samples need a readout")
            pieces.append(graphs)
        emb = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
        emb = encoders.project(emb, self.params, self.cfg.projection_head)
        if self.spec.estimator == "infonce":
            emb = ad.l2_normalize(emb)

        def rows(view, index):
            return np.where(index < 0, graph_base + view, starts[view] + index)

        a_rows = rows(batch.anchor_view, batch.anchor_index)
        p_rows = rows(batch.positive_view, batch.positive_index)
        pos = contrast.score(self.disc, ad.gather(emb, a_rows), ad.gather(emb, p_rows))
        if batch.explicit:
            n_rows = rows(*batch.negatives)
            n_pairs, n_neg = n_rows.shape
            neg = contrast.score(self.disc, ad.gather(emb, np.repeat(a_rows, n_neg)),
                                 ad.gather(emb, n_rows.ravel()))
            scored = ScoredBatch(pos, negative=ad.reshape(neg, (n_pairs, n_neg)))
        else:
            extra = rows(*batch.extra_candidates) if batch.extra_candidates is not None else None
            scored = _in_batch(self.disc, emb, a_rows, p_rows, pos, batch.anchors_as_candidates, extra)
        if self.spec.estimator == "jsd":
            value = contrast.estimate_jsd(scored)
        else:
            value = contrast.estimate_infonce(scored, self.spec.temperature)
        return ad.scale(value, -1.0)

    # ------------------------------------------------------------- outputs

    def embed_for_task(self) -> np.ndarray:
        """Node embeddings (node task) or one readout per graph (graph task)."""
        with ad.no_grad():
            if self.dataset.task == NODE_TASK:
                view = samplers.View(samplers.ORIGINAL, self.dataset.graphs[0], 0,
                                     np.arange(self.dataset.graphs[0].num_nodes))
                nodes, _ = self.embed_views([view])
                return nodes.value.copy()
            out = []
            plan = plan_batches(self.dataset, self.spec.node_budget, 0)
            index = []
            for batch in plan.batches:
                views = [samplers.View(samplers.ORIGINAL, self.dataset.graphs[i], i,
                                       np.arange(self.dataset.graphs[i].num_nodes)) for i in batch]
                table = encoders.encode_nodes(self.cfg, self.params, views, self.offsets)
                out.append(encoders.readout(table, self.cfg.readout, self.params).value)
                index += batch
            emb = np.concatenate(out, axis=0)
            result = np.empty_like(emb)
            result[np.array(index)] = emb
            return result


def _in_batch(disc, emb, a_rows, p_rows, pos, anchors_as_candidates, extra=None) -> ScoredBatch:
    """Score every distinct anchor against every candidate and mask non-negatives.

    Candidates are the distinct positives, plus the anchors when requested and
    any extra rows the sampler supplied.
    A candidate is a negative for anchor ``a`` unless it is ``a`` itself or a
    positive of some pair anchored at ``a``.
    """
    anchors, pair_anchor = np.unique(a_rows, return_inverse=True)
    pool = [p_rows] + ([a_rows] if anchors_as_candidates else []) + ([extra] if extra is not None else [])
    cand_rows = np.unique(np.concatenate(pool))
    mask = anchors[:, None] != cand_rows[None, :]
    cand_pos = np.searchsorted(cand_rows, p_rows)
    mask[pair_anchor, cand_pos] = False
    matrix = contrast.score_matrix(disc, ad.gather(emb, anchors), ad.gather(emb, cand_rows))
    return ScoredBatch(pos, matrix=matrix, negative_mask=mask, pair_anchor=pair_anchor)


def _merge(parts: list[samplers.ContrastBatch]) -> samplers.ContrastBatch:
    if len(parts) == 1:
        return parts[0]
    views, offs = [], []
    for p in parts:
        offs.append(len(views))
        views += p.views
    cat = lambda name: np.concatenate([getattr(p, name) + (o if "view" in name else 0)
                                       for p, o in zip(parts, offs)])
    av, pv = cat("anchor_view"), cat("positive_view")
    ai, pi = cat("anchor_index"), cat("positive_index")
    negatives = samplers.IN_BATCH
    if parts[0].explicit:
        negatives = (np.concatenate([p.negatives[0] + o for p, o in zip(parts, offs)]),
                     np.concatenate([p.negatives[1] for p in parts]))
    extra = None
    if parts[0].extra_candidates is not None:
        extra = (np.concatenate([p.extra_candidates[0] + o for p, o in zip(parts, offs)]),
                 np.concatenate([p.extra_candidates[1] for p in parts]))
    return samplers.ContrastBatch(views, av, ai, pv, pi, negatives, parts[0].negatives_per_positive,
                                  parts[0].anchors_as_candidates, extra)


def prepare_dataset(dataset: Dataset, spec: FrameworkSpec) -> Dataset:
    """Subsample oversize graphs once per run."""
    graphs = [sample_subgraph(g, spec.subgraph_cap, spec.seed + i) for i, g in enumerate(dataset.graphs)]
    if all(a is b for a, b in zip(graphs, dataset.graphs)):
        return dataset
    return Dataset(dataset.task, graphs, dataset.graph_labels, dataset.name)


def assemble(spec: FrameworkSpec, dataset: Dataset) -> Model:
    s = spec
    if s.sampler == "graphcl" and len(dataset.graphs) < 2:
        raise IncompatibleSpec("sampler graphcl", f"{dataset.task} dataset with one graph",
                               "GraphCL requires multi-graph batches")
    if s.readout == "none" and s.sampler in GRAPH_SCOPE_SAMPLERS:
        raise IncompatibleSpec(f"sampler {s.sampler}", "readout none",
                               "graph-scope anchors need a readout")
    if s.readout == "none" and dataset.task == GRAPH_TASK:
        raise IncompatibleSpec("readout none", "graph task", "graph embeddings need a readout")
    if s.sampler in ("line",) and all(g.num_edges == 0 for g in dataset.graphs):
        raise IncompatibleSpec("sampler line", "edgeless dataset", "no positive pairs")
    feat_dims = {g.features.shape[1] for g in dataset.graphs}
    if len(feat_dims) != 1:
        raise ValueError(f"graphs disagree on feature dimension: {sorted(feat_dims)}")
    return Model(spec, prepare_dataset(dataset, spec))


def fit(model: Model, on_epoch=None) -> TrainReport:
    """Minimize the negated estimator with Adam until the epoch budget or early stop."""
    s = model.spec
    report = TrainReport()
    stopper = EarlyStopping(s.patience)
    for epoch in range(1, s.max_epochs + 1):
        start = time.perf_counter()
        plan = plan_batches(model.dataset, s.node_budget, s.seed + epoch)
        batch_losses = []
        for b, graph_ids in enumerate(plan.batches):
            batch = model.sample(graph_ids, derive_seed(s.seed, epoch, b))
            loss = model.loss(batch)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, batch {b}, modules {s.modules}")
            ad.backward(loss)
            ad.adam_step(model.params, s.lr)
            batch_losses.append(value)
        epoch_loss = float(np.mean(batch_losses))
        report.epoch_ms.append((time.perf_counter() - start) * 1000)
        report.losses.append(epoch_loss)
        report.stopped_epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        if stopper.update(epoch_loss):
            log.info("early stop at epoch %d", epoch)
            break
    report.snapshot = model.params.snapshot()
    report.checksum = model.params.checksum()
    return report


def embed_for_task(model: Model) -> np.ndarray:
    return model.embed_for_task()
