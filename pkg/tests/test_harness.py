import csv
import json
from pathlib import Path

import numpy as np
import pytest

from gclab import harness
from gclab.graph import cycle_graph, generate_sbm, save_dataset
from gclab.harness import (
    ExperimentConfig, ResultRecord, best_model_search, best_pool_comb, competition_ranks,
    generate_controlled_pairs, pool_size, preset, rank_pairs,
)
from gclab.trainer import FrameworkSpec

GOLDEN = Path(__file__).parent / "golden" / "presets.json"


def record(score, dataset="d", pair_id=None, axis=None, status="ok", **modules):
    cfg = ExperimentConfig(FrameworkSpec(**modules), dataset, pair_id, axis)
    return ResultRecord(cfg, score, 1.0, status)


# ------------------------------------------------------------------ ranking


@pytest.mark.parametrize("scores, ranks", [
    ([0.805, 0.801], [1, 1]),
    ([0.9, 0.7, 0.5], [1, 2, 3]),
    ([0.90, 0.895, 0.70], [1, 1, 3]),
    ([0.5, 0.9, 0.7], [3, 1, 2]),
    ([0.7, 0.7, 0.7], [1, 1, 1]),
])
def test_competition_ranks(scores, ranks):
    assert competition_ranks(scores) == ranks


def test_rank_pairs_aggregates():
    recs = [
        record(0.805, pair_id="p0", axis="estimator", estimator="jsd"),
        record(0.801, pair_id="p0", axis="estimator", estimator="infonce"),
        record(0.6, pair_id="p1", axis="estimator", estimator="jsd"),
        record(0.9, pair_id="p1", axis="estimator", estimator="infonce"),
    ]
    table = rank_pairs(recs)
    assert table.complete_groups == {"estimator": 2}
    assert table.ranks["estimator"]["jsd"] == {1: 1, 2: 1}
    assert table.mean_rank["estimator"] == {"jsd": 1.5, "infonce": 1.0}


def test_rank_pairs_excludes_incomplete_and_failed():
    recs = [
        record(0.8, pair_id="p0", axis="estimator", estimator="jsd"),
        record(0.7, pair_id="p0", axis="estimator", estimator="infonce"),
        record(0.8, pair_id="p1", axis="estimator", estimator="jsd"),
        record(0.8, pair_id="p2", axis="estimator", estimator="jsd"),
        record(0.0, pair_id="p2", axis="estimator", estimator="infonce", status="failed"),
    ]
    table = rank_pairs(recs)
    assert table.excluded_groups == 2 and table.complete_groups == {"estimator": 1}


# ------------------------------------------------------------ controlled pairs


def test_estimator_pairs_count():
    configs = generate_controlled_pairs(harness.DEFAULT_SPACE, "estimator", 100)
    assert len(configs) == 200
    assert len({c.pair_id for c in configs}) == 100


def test_encoder_pairs_count():
    configs = generate_controlled_pairs(harness.DEFAULT_SPACE, "encoder", 10, seed=4)
    groups = {}
    for c in configs:
        groups.setdefault(c.pair_id, []).append(c)
    assert len(configs) == 50 and len(groups) == 10
    assert all(len(g) == 5 for g in groups.values())


def _flat(c):
    doc = c.to_json()
    return {**{"spec." + k: v for k, v in doc.pop("spec").items()}, **doc}


@pytest.mark.parametrize("axis", harness.MODULE_AXES + harness.HYPER_AXES)
def test_pairs_differ_in_one_field(axis):
    configs = generate_controlled_pairs(harness.DEFAULT_SPACE, axis, 20, seed=1, datasets=["a", "b"])
    groups = {}
    for c in configs:
        groups.setdefault(c.pair_id, []).append(_flat(c))
    for members in groups.values():
        for other in members[1:]:
            diff = {k for k in members[0] if members[0][k] != other[k]}
            assert diff == {"spec." + axis}
        blanked = {ExperimentConfig.from_json(json.loads(json.dumps(
            {"spec": {k[5:]: v for k, v in m.items() if k.startswith("spec.")},
             "dataset": m["dataset"], "pair_id": m["pair_id"], "varied_module": m["varied_module"]}))
        ).key(blank=axis) for m in members}
        assert len(blanked) == 1


def test_pairs_reproducible_and_errors():
    a = generate_controlled_pairs(harness.DEFAULT_SPACE, "sampler", 5, seed=9)
    b = generate_controlled_pairs(harness.DEFAULT_SPACE, "sampler", 5, seed=9)
    assert [c.to_json() for c in a] == [c.to_json() for c in b]
    with pytest.raises(ValueError):
        generate_controlled_pairs({}, "encoder", 3)
    with pytest.raises(ValueError):
        generate_controlled_pairs(dict(harness.DEFAULT_SPACE, encoder=["gcn"]), "encoder", 3)


def test_batch_round_trip(tmp_path):
    configs = generate_controlled_pairs(harness.DEFAULT_SPACE, "readout", 3)
    harness.write_batch(configs, tmp_path / "b.jsonl")
    assert [c.to_json() for c in harness.read_batch(tmp_path / "b.jsonl")] == [c.to_json() for c in configs]


def test_load_space(tmp_path):
    p = tmp_path / "space.json"
    p.write_text(json.dumps({"encoder": ["gcn", "gin"]}))
    assert harness.load_space(p)["encoder"] == ["gcn", "gin"]
    p.write_text(json.dumps({"colour": ["red"]}))
    with pytest.raises(ValueError):
        harness.load_space(p)


# --------------------------------------------------------------------- comb


def _comb_table():
    # 100 runs on one dataset; t=10 pools the top 10.
    recs = []
    for i in range(100):
        enc = "gcn" if i < 10 else "mlp"
        samp = "line" if i < 10 else "dgi"
        score = 0.5
        if i in (0, 1):
            score = 0.99  # two gcn+line runs pooled
        elif 10 <= i < 18:
            score = 0.9  # eight mlp+dgi runs fill the rest of the pool
        recs.append(record(score, encoder=enc, sampler=samp, readout="mean"))
    return best_pool_comb(recs, t=10)


def test_comb_arithmetic():
    table = _comb_table()
    assert table.pool_sizes == {"d": (10, 100)}
    assert table.p[("gcn", "line")] == pytest.approx(0.2)
    assert table.comb("gcn", "line") == pytest.approx(0.1)


def test_comb_everywhere_pair():
    # every run uses inner + jsd, so the pool fraction is forced to t%
    assert _comb_table().comb("inner", "jsd") == pytest.approx(0.0)


def test_comb_never_pooled():
    recs = [record(0.9, encoder="gcn") for _ in range(9)] + [record(0.1, encoder="gin")]
    assert best_pool_comb(recs, t=10).comb("gin", "mean") == pytest.approx(-0.1)


def test_comb_absent_pair():
    assert _comb_table().comb("gat", "line") is None


def test_comb_bounds_and_pool_identity():
    rng = np.random.default_rng(0)
    encs = ["gcn", "gin", "mlp"]
    recs = [record(float(rng.random()), dataset=f"d{i % 3}", encoder=encs[i % 3],
                   estimator=["jsd", "infonce"][i % 2]) for i in range(90)]
    table = best_pool_comb(recs, t=20)
    for _, _, p, c in table.rows():
        assert 0 <= p <= 1 and -0.2 - 1e-12 <= c <= 0.8 + 1e-12
    # each run contributes once to the pair (discriminator, readout) it always uses
    assert table.p[("inner", "mean")] == pytest.approx(sum(k for k, _ in table.pool_sizes.values()) / 90)


def test_comb_excludes_failed_and_validates_t():
    recs = [record(0.9), record(0.0, status="failed")]
    assert best_pool_comb(recs, t=50).pool_sizes == {"d": (1, 1)}
    with pytest.raises(ValueError):
        best_pool_comb(recs, t=0)


def test_pool_size():
    assert pool_size(10, 100) == 10
    assert pool_size(10, 95) == 10
    assert pool_size(10, 1) == 1
    assert pool_size(33.3, 1000) == 333


# ------------------------------------------------------------------ presets


def test_presets_golden():
    assert harness.presets_json().encode() == GOLDEN.read_bytes()


def test_preset_examples():
    assert preset("dgi").modules == ("gcn", "mean", "dgi", "bilinear", "jsd")
    assert preset("graphcl").modules == ("gin", "sum", "graphcl", "inner", "infonce")
    assert preset("gae").sampler == preset("line").sampler
    assert preset("dgi", emb_dim=128).emb_dim == 128
    with pytest.raises(ValueError):
        preset("bert")


# ---------------------------------------------------------------- profiling


def test_profile_modules():
    data = generate_sbm([15, 15], 0.3, 0.05, feat_dim=4, seed=0)
    enc, samp = harness.profile_modules(data, repeats=1)
    lookup = next(r for r in enc if r["encoder"] == "lookup")
    assert lookup["params"] == 30 * 64
    assert {r["sampler"] for r in samp} == {"deepwalk", "line", "dgi", "mvgrl", "gca"}
    for r in samp:
        assert r["time_per_sample_us"] == pytest.approx(r["time_ms"] * 1000 / r["samples"], rel=1e-12)
    _, again = harness.profile_modules(data, repeats=1)
    assert [r["samples"] for r in again] == [r["samples"] for r in samp]


def test_profile_lookup_with_projection():
    data = generate_sbm([5, 5], 0.3, 0.05, feat_dim=4, seed=0)
    enc, _ = harness.profile_modules(data, preset("line", projection_head=True), repeats=1)
    lookup = next(r for r in enc if r["encoder"] == "lookup")
    assert lookup["params"] == 10 * 64 + 2 * (64 * 64 + 64)


# ------------------------------------------------------------ search / runs


SMALL = dict(harness.DEFAULT_SPACE, encoder=["gcn", "mlp"], sampler=["line", "dgi"],
             emb_dim=[8], layers=[1])


def test_best_model_search():
    data = generate_sbm([10, 10], 0.4, 0.05, feat_dim=4, seed=0)
    best, board = best_model_search(SMALL, data, 1, max_epochs=2)
    assert len(board) == 1 and best is board[0]
    best, board = best_model_search(SMALL, data, 4, seed=2, max_epochs=2)
    scores = [r.score for r in board]
    assert scores == sorted(scores, reverse=True) and best.score == scores[0]
    _, again = best_model_search(SMALL, data, 4, seed=2, max_epochs=2)
    assert [r.row() | {"wall_time_ms": 0} for r in again] == [r.row() | {"wall_time_ms": 0} for r in board]


def test_best_model_search_all_fail():
    data = generate_sbm([10, 10], 0.4, 0.05, feat_dim=4, seed=0)
    with pytest.raises(RuntimeError, match="all 2 runs failed"):
        best_model_search(dict(SMALL, sampler=["graphcl"]), data, 2, max_epochs=1)


def test_run_experiment_failure_is_recorded(tmp_path):
    rec = harness.run_experiment(ExperimentConfig(FrameworkSpec(), str(tmp_path / "missing.json")))
    assert rec.status == "failed" and rec.score == 0.0


def test_results_csv(tmp_path):
    recs = [record(0.5, pair_id="p", axis="encoder"), record(0.25)]
    path = tmp_path / "r.csv"
    harness.write_results(recs[:1], path)
    harness.write_results(recs[1:], path, append=True)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == harness.RESULT_FIELDS and len(rows) == 3
    back = harness.read_results(path)
    assert [r.row() for r in back] == [r.row() for r in recs]


def test_execute_batch_resume(tmp_path, monkeypatch):
    calls = []

    def fake(config, dataset=None):
        calls.append(config.key())
        return ResultRecord(config, 0.5, 1.0)
    monkeypatch.setattr(harness, "run_experiment", fake)
    configs = generate_controlled_pairs(harness.DEFAULT_SPACE, "estimator", 2)
    out = tmp_path / "out.csv"
    first = harness.execute_batch(configs, out)
    assert len(calls) == 4 and len(first) == 4
    parts = sorted((tmp_path / "out.csv.parts").glob("*.csv"))
    parts[1].unlink()
    calls.clear()
    second = harness.execute_batch(configs, out)
    assert calls == [configs[1].key()]
    assert [r.row() for r in second] == [r.row() for r in first]


def test_execute_batch_real_runs(tmp_path):
    path = tmp_path / "g.json"
    save_dataset(generate_sbm([8, 8], 0.5, 0.05, feat_dim=3, seed=0), path)
    configs = generate_controlled_pairs(SMALL, "discriminator", 1, datasets=[str(path)], max_epochs=2)
    recs = harness.execute_batch(configs, tmp_path / "r.csv", workers=2)
    assert [r.status for r in recs] == ["ok", "ok"]
    assert rank_pairs(recs).complete_groups == {"discriminator": 1}


def test_analysis_writers(tmp_path):
    recs = [record(0.8, pair_id="p", axis="estimator", estimator="jsd"),
            record(0.6, pair_id="p", axis="estimator", estimator="infonce")]
    harness.write_ranking_csv(rank_pairs(recs), tmp_path / "rank.csv")
    harness.write_comb_csv(best_pool_comb(recs), tmp_path / "comb.csv")
    harness.write_leaderboard_csv(recs, tmp_path / "lb.csv")
    assert (tmp_path / "rank.csv").read_text().splitlines()[0] == "axis,instantiation,rank,count"
    lb = list(csv.DictReader(open(tmp_path / "lb.csv")))
    assert [r["rank"] for r in lb] == ["1", "2"] and lb[0]["estimator"] == "jsd"
