"""Controlled random search, rank/Comb analysis, presets, profiling and batch execution."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import os
import time
import tracemalloc
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import encoders, samplers
from .evaluation import evaluate
from .graph import GRAPH_TASK, Dataset, load_dataset, make_split
from .trainer import FrameworkSpec, assemble, derive_seed, fit

log = logging.getLogger(__name__)

MODULE_AXES = ("encoder", "readout", "sampler", "discriminator", "estimator")
HYPER_AXES = ("emb_dim", "layers")
TIE_THRESHOLD = 0.01
RESULT_FIELDS = ["encoder", "readout", "sampler", "discriminator", "estimator", "emb_dim", "layers",
                 "dataset", "seed", "pair_id", "varied_module", "score", "wall_time_ms", "status"]

DEFAULT_SPACE = {
    "encoder": ["lookup", "mlp", "gcn", "gat", "gin"],
    "readout": ["mean", "sum"],
    "sampler": ["deepwalk", "line", "dgi", "mvgrl", "gca", "graphcl"],
    "discriminator": ["inner", "bilinear"],
    "estimator": ["infonce", "jsd"],
    "emb_dim": [64, 128],
    "layers": [1, 2, 3, 4],
}

PRESETS = {
    "deepwalk": ("lookup", "none", "deepwalk", "inner", "jsd"),
    "line": ("lookup", "none", "line", "inner", "jsd"),
    "gae": ("gcn", "none", "line", "inner", "jsd"),
    "dgi": ("gcn", "mean", "dgi", "bilinear", "jsd"),
    "mvgrl": ("gcn", "jknet", "mvgrl", "inner", "jsd"),
    "infograph": ("gin", "sum", "dgi", "inner", "jsd"),
    "graphcl": ("gin", "sum", "graphcl", "inner", "infonce"),
    "gca": ("gcn", "none", "gca", "inner", "infonce"),
}


def preset(name: str, **overrides) -> FrameworkSpec:
    try:
        modules = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return FrameworkSpec(**dict(zip(MODULE_AXES, modules)), **overrides)


def preset_table() -> dict:
    return {name: dict(zip(MODULE_AXES, mods)) for name, mods in PRESETS.items()}


def presets_json() -> str:
    """Stable text form of the preset table, one preset per line."""
    lines = [f"  {json.dumps(name)}: {json.dumps(mods)}" for name, mods in preset_table().items()]
    return "{\n" + ",\n".join(lines) + "\n}\n"


# ------------------------------------------------------------------ configs


@dataclass
class ExperimentConfig:
    spec: FrameworkSpec
    dataset: str
    pair_id: Optional[str] = None
    varied_module: Optional[str] = None

    def to_json(self) -> dict:
        return {"spec": self.spec.to_dict(), "dataset": self.dataset,
                "pair_id": self.pair_id, "varied_module": self.varied_module}

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        return cls(FrameworkSpec.from_dict(doc["spec"]), doc["dataset"],
                   doc.get("pair_id"), doc.get("varied_module"))

    def key(self, blank: Optional[str] = None) -> str:
        """Content hash; ``blank`` names a spec field to leave out."""
        doc = self.to_json()
        if blank is not None:
            doc["spec"][blank] = None
            doc["varied_module"] = None
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def write_batch(configs: Iterable[ExperimentConfig], path) -> None:
    with open(path, "w") as fh:
        for c in configs:
            fh.write(json.dumps(c.to_json(), sort_keys=True) + "\n")


def read_batch(path) -> list[ExperimentConfig]:
    with open(path) as fh:
        return [ExperimentConfig.from_json(json.loads(line)) for line in fh if line.strip()]


def load_space(path=None) -> dict:
    if path is None:
        return {k: list(v) for k, v in DEFAULT_SPACE.items()}
    space = json.loads(Path(path).read_text())
    unknown = set(space) - set(MODULE_AXES) - set(HYPER_AXES) - {"datasets"}
    if unknown:
        raise ValueError(f"unknown search-space keys: {sorted(unknown)}")
    merged = {k: list(v) for k, v in DEFAULT_SPACE.items()}
    merged.update(space)
    return merged


def _draw(space: dict, rng: np.random.Generator) -> dict:
    return {axis: space[axis][int(rng.integers(len(space[axis])))]
            for axis in MODULE_AXES + HYPER_AXES if axis in space}


def generate_controlled_pairs(space: dict, axis: str, m: int, seed: int = 0,
                              datasets: Sequence[str] = ("dataset",), **spec_overrides
                              ) -> list[ExperimentConfig]:
    """``m`` random base configs, each cloned once per instantiation of ``axis``."""
    if not space or not any(space.get(a) for a in MODULE_AXES):
        raise ValueError("empty search space")
    values = space.get(axis, [])
    if len(values) < 2:
        raise ValueError(f"axis {axis!r} needs at least two instantiations, got {values}")
    if m < 1:
        raise ValueError("m must be >= 1")
    datasets = list(space.get("datasets", datasets))
    rng = np.random.default_rng(seed)
    configs = []
    for i in range(m):
        base = _draw(space, rng)
        dataset = datasets[int(rng.integers(len(datasets)))]
        run_seed = int(rng.integers(0, 2**31 - 1))
        pair_id = f"{axis}-{seed}-{i:04d}"
        for value in values:
            fields = dict(base, **{axis: value}, seed=run_seed, **spec_overrides)
            configs.append(ExperimentConfig(FrameworkSpec(**fields), dataset, pair_id, axis))
    return configs


# ------------------------------------------------------------------ results


@dataclass
class ResultRecord:
    config: ExperimentConfig
    score: float
    wall_time_ms: float
    status: str = "ok"

    def row(self) -> dict:
        s = self.config.spec
        return {"encoder": s.encoder, "readout": s.readout, "sampler": s.sampler,
                "discriminator": s.discriminator, "estimator": s.estimator, "emb_dim": s.emb_dim,
                "layers": s.layers, "dataset": self.config.dataset, "seed": s.seed,
                "pair_id": self.config.pair_id or "", "varied_module": self.config.varied_module or "",
                "score": f"{self.score:.6f}", "wall_time_ms": f"{self.wall_time_ms:.1f}",
                "status": self.status}

    @classmethod
    def from_row(cls, row: dict) -> "ResultRecord":
        spec = FrameworkSpec(**{a: row[a] for a in MODULE_AXES}, emb_dim=int(row["emb_dim"]),
                             layers=int(row["layers"]), seed=int(row["seed"]))
        cfg = ExperimentConfig(spec, row["dataset"], row["pair_id"] or None, row["varied_module"] or None)
        return cls(cfg, float(row["score"]), float(row["wall_time_ms"]), row["status"])


def write_results(records: Iterable[ResultRecord], path, append: bool = False) -> None:
    path = Path(path)
    exists = append and path.exists() and path.stat().st_size > 0
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, RESULT_FIELDS, lineterminator="\n")
        if not exists:
            writer.writeheader()
        for r in records:
            writer.writerow(r.row())


def read_results(path) -> list[ResultRecord]:
    with open(path, newline="") as fh:
        return [ResultRecord.from_row(row) for row in csv.DictReader(fh)]


def split_ratios(dataset: Dataset) -> tuple[float, float, float]:
    return (0.8, 0.1, 0.1) if dataset.task == GRAPH_TASK else (0.2, 0.1, 0.7)


def train_and_evaluate(spec: FrameworkSpec, dataset: Dataset):
    """Assemble, fit and evaluate one spec; returns (TrainReport, EvalReport)."""
    model = assemble(spec, dataset)
    report = fit(model)
    split = make_split(model.dataset, split_ratios(model.dataset), spec.seed)
    return report, evaluate(model, model.dataset, split)


def run_experiment(config: ExperimentConfig, dataset: Optional[Dataset] = None) -> ResultRecord:
    start = time.perf_counter()
    try:
        data = dataset if dataset is not None else load_dataset(config.dataset)
        _, ev = train_and_evaluate(config.spec, data)
        score, status = ev.test_accuracy, "ok"
    except Exception as err:  # a failed run is data, not a crash
        log.warning("run %s failed: %s", config.key(), err)
        score, status = 0.0, "failed"
    return ResultRecord(config, score, (time.perf_counter() - start) * 1000, status)


def _run_to_file(args) -> str:
    config_doc, part_path = args
    record = run_experiment(ExperimentConfig.from_json(config_doc))
    tmp = Path(str(part_path) + ".tmp")
    write_results([record], tmp)
    os.replace(tmp, part_path)
    return str(part_path)


def execute_batch(configs: Sequence[ExperimentConfig], out_path, workers: int = 1) -> list[ResultRecord]:
    """Run every config (skipping ones already finished) and merge into ``out_path``.

    Each run writes its own part file under ``<out_path>.parts/``; the merge
    reads them back in batch order, so an interrupted batch resumes cleanly.
    """
    out_path = Path(out_path)
    parts_dir = Path(str(out_path) + ".parts")
    parts_dir.mkdir(parents=True, exist_ok=True)
    part_of = {i: parts_dir / f"{i:06d}-{c.key()}.csv" for i, c in enumerate(configs)}
    todo = [(configs[i].to_json(), p) for i, p in part_of.items() if not p.exists()]
    log.info("%d of %d runs already complete", len(configs) - len(todo), len(configs))
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_run_to_file, todo))
    else:
        for item in todo:
            _run_to_file(item)
    records = []
    for i in range(len(configs)):
        records += read_results(part_of[i])
    write_results(records, out_path)
    return records


# ----------------------------------------------------------------- ranking


@dataclass
class RankingTable:
    ranks: dict  # axis -> instantiation -> Counter(rank -> count)
    mean_rank: dict  # axis -> instantiation -> float
    complete_groups: dict  # axis -> count
    excluded_groups: int = 0
    tie_threshold: float = TIE_THRESHOLD

    def rows(self) -> list[tuple]:
        out = []
        for axis in sorted(self.ranks):
            for inst in sorted(self.ranks[axis]):
                for rank, count in sorted(self.ranks[axis][inst].items()):
                    out.append((axis, inst, rank, count))
        return out


def competition_ranks(scores: Sequence[float], tie_threshold: float = TIE_THRESHOLD) -> list[int]:
    """Rank descending; a score within ``tie_threshold`` of its block leader shares the leader's rank."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    ranks = [0] * len(scores)
    leader = None
    for pos, i in enumerate(order, 1):
        if leader is None or scores[leader] - scores[i] >= tie_threshold:
            leader, block_rank = i, pos
        ranks[i] = block_rank
    return ranks


def rank_pairs(records: Sequence[ResultRecord], tie_threshold: float = TIE_THRESHOLD) -> RankingTable:
    groups: dict = defaultdict(list)
    for r in records:
        if r.config.pair_id:
            groups[(r.config.varied_module, r.config.pair_id)].append(r)
    expected = defaultdict(set)
    for (axis, _), members in groups.items():
        expected[axis] |= {getattr(m.config.spec, axis) for m in members}
    ranks: dict = defaultdict(lambda: defaultdict(Counter))
    complete: Counter = Counter()
    excluded = 0
    for (axis, _), members in sorted(groups.items(), key=lambda kv: kv[0]):
        values = [getattr(m.config.spec, axis) for m in members]
        ok = all(m.status == "ok" for m in members)
        if not ok or set(values) != expected[axis] or len(values) != len(set(values)):
            excluded += 1
            continue
        complete[axis] += 1
        for value, rank in zip(values, competition_ranks([m.score for m in members], tie_threshold)):
            ranks[axis][value][rank] += 1
    if excluded:
        log.warning("excluded %d incomplete or failed pair groups", excluded)
    mean_rank = {axis: {inst: sum(r * c for r, c in cnt.items()) / sum(cnt.values())
                        for inst, cnt in per.items()} for axis, per in ranks.items()}
    return RankingTable({a: dict(v) for a, v in ranks.items()}, mean_rank, dict(complete), excluded,
                        tie_threshold)


# -------------------------------------------------------------------- comb


@dataclass
class CombTable:
    t: float
    p: dict  # (x, y) -> p_t
    pool_sizes: dict = field(default_factory=dict)  # dataset -> (pool, n)

    def comb(self, x: str, y: str) -> Optional[float]:
        p = self.p.get((x, y))
        return None if p is None else p - self.t / 100

    def rows(self) -> list[tuple]:
        return [(x, y, p, p - self.t / 100) for (x, y), p in sorted(self.p.items())]


def pool_size(t: float, n: int) -> int:
    return math.ceil(Fraction(str(t)) * n / 100)


def best_pool_comb(records: Sequence[ResultRecord], t: float = 10) -> CombTable:
    """p_t(x, y): share of runs using modules x and y that land in their dataset's top-t% pool."""
    if not 0 < t < 100:
        raise ValueError("t must be a percentage in (0, 100)")
    by_dataset = defaultdict(list)
    for r in records:
        if r.status == "ok":
            by_dataset[r.config.dataset].append(r)
    pooled, total = Counter(), Counter()
    sizes = {}
    for name, runs in by_dataset.items():
        order = sorted(range(len(runs)), key=lambda i: -runs[i].score)
        k = pool_size(t, len(runs))
        in_pool = set(order[:k])
        sizes[name] = (k, len(runs))
        for i, r in enumerate(runs):
            mods = [getattr(r.config.spec, a) for a in MODULE_AXES]
            for x, y in itertools.combinations(sorted(mods), 2):
                total[(x, y)] += 1
                pooled[(x, y)] += i in in_pool
    return CombTable(t, {pair: pooled[pair] / total[pair] for pair in total}, sizes)


# ---------------------------------------------------------------- profiling


def profile_modules(dataset: Dataset, baseline: Optional[FrameworkSpec] = None,
                    repeats: int = 3) -> tuple[list[dict], list[dict]]:
    """Encoder cost and sampler cost, varying one module at a time from ``baseline``."""
    baseline = baseline or preset("line")
    enc_rows, samp_rows = [], []
    for enc in encoders.ENCODERS:
        spec = dataclasses.replace(baseline, encoder=enc)
        model = assemble(spec, dataset)
        views = [samplers.View(samplers.ORIGINAL, g, i, np.arange(g.num_nodes))
                 for i, g in enumerate(model.dataset.graphs[:64])]
        times = []
        tracemalloc.start()
        for _ in range(repeats):
            t0 = time.perf_counter()
            encoders.encode_nodes(model.cfg, model.params, views, model.offsets)
            times.append((time.perf_counter() - t0) * 1000)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        enc_rows.append({"dataset": dataset.name, "encoder": enc,
                         "params": model.params.num_values(),
                         "size_kb": model.params.num_values() * 8 / 1024,
                         "time_ms": float(np.mean(times)),
                         "memory_mb": peak / 2**20})
    for name in samplers.SAMPLERS:
        spec = dataclasses.replace(baseline, sampler=name)
        if name == "graphcl" and len(dataset.graphs) < 2:
            continue
        if spec.readout == "none" and name in ("dgi", "mvgrl", "graphcl"):
            spec = dataclasses.replace(spec, readout="mean")
        model = assemble(spec, dataset)
        ids = list(range(min(len(model.dataset.graphs), 64)))
        t0 = time.perf_counter()
        batch = model.sample(ids, derive_seed(spec.seed, 0))
        ms = (time.perf_counter() - t0) * 1000
        samp_rows.append({"dataset": dataset.name, "sampler": name, "time_ms": ms,
                          "samples": batch.num_pairs,
                          "time_per_sample_us": ms * 1000 / max(batch.num_pairs, 1)})
    return enc_rows, samp_rows


# ------------------------------------------------------------- best search


def best_model_search(space: dict, dataset: Dataset, budget: int, seed: int = 0,
                      dataset_name: Optional[str] = None, **spec_overrides):
    """Train ``budget`` random specs; return (best record, leaderboard sorted by score)."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(budget):
        fields = dict(_draw(space, rng), seed=int(rng.integers(0, 2**31 - 1)), **spec_overrides)
        cfg = ExperimentConfig(FrameworkSpec(**fields), dataset_name or dataset.name)
        records.append(run_experiment(cfg, dataset))
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        summary = Counter(tuple(r.config.spec.modules) for r in records)
        raise RuntimeError(f"all {budget} runs failed: {dict(summary)}")
    board = sorted(ok, key=lambda r: -r.score)
    return board[0], board


# ---------------------------------------------------------------- csv out


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_ranking_csv(table: RankingTable, path) -> None:
    write_csv(path, ["axis", "instantiation", "rank", "count"], table.rows())


def write_comb_csv(table: CombTable, path) -> None:
    write_csv(path, ["module_x", "module_y", "p_t", "comb"],
              [(x, y, f"{p:.6f}", f"{c:.6f}") for x, y, p, c in table.rows()])


def write_leaderboard_csv(records: Sequence[ResultRecord], path) -> None:
    board = sorted((r for r in records if r.status == "ok"), key=lambda r: -r.score)
    write_csv(path, ["rank"] + RESULT_FIELDS,
              [[i] + [r.row()[f] for f in RESULT_FIELDS] for i, r in enumerate(board, 1)])
