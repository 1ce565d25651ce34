import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3ob import pipeline as pl
from m3ob.cli import main
from m3ob.config import resolve
from m3ob.evaluation import (
    Metrics,
    Predictions,
    acc_at_k,
    collect_predictions,
    evaluate_split,
    scenario_report,
    true_rank,
    write_report,
)
from m3ob.model import M3ob

from conftest import TINY_OVERRIDES
from oracles import rank_oracle


# ---------------------------------------------------------------------------
# acc@k


def test_max_logit_hits_every_k():
    logits = np.array([0.1, 3.0, -1.0, 0.5])
    assert [acc_at_k(logits, 1, k) for k in (1, 2, 4)] == [1, 1, 1]


def test_rank_eleven_of_twenty():
    logits = np.arange(20, 0, -1, dtype=float)  # index i has rank i
    assert rank_oracle(list(logits), 10) == 10
    assert acc_at_k(logits, 10, 10) == 0
    assert acc_at_k(logits, 10, 20) == 1


def test_all_equal_logits_use_smaller_index_rule():
    logits = np.zeros(6)
    assert [acc_at_k(logits, t, 3) for t in range(6)] == [1, 1, 1, 0, 0, 0]
    assert acc_at_k(logits, 5, 100) == 1  # k clamped


def test_acc_errors():
    with pytest.raises(ValueError):
        acc_at_k(np.zeros(3), 0, 0)
    with pytest.raises(ValueError):
        acc_at_k(np.array([0.0, np.nan]), 0, 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=12), st.data())
def test_vector_rank_matches_sort_oracle(values, data):
    target = data.draw(st.integers(0, len(values) - 1))
    logits = np.array(values, dtype=float)
    assert int(true_rank(logits, np.array(target))) == rank_oracle(values, target)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_are_monotone_in_k(seed):
    ranks = np.random.default_rng(seed).integers(0, 30, 50)
    m = Metrics.from_ranks(ranks, (1, 5, 10, 20), 30)
    accs = [m.acc(k) for k in (1, 5, 10, 20)]
    assert accs == sorted(accs) and all(0 <= a <= 1 for a in accs)


# ---------------------------------------------------------------------------
# Split evaluation


def oracle_scorer(n_locations):
    def scorer(batch):
        B, T = batch.locations.shape
        out = np.zeros((B, T, n_locations))
        np.put_along_axis(out, batch.target_location[..., None], 1.0, axis=-1)
        return out

    return scorer


def test_memorizing_scorer_is_perfect(tiny):
    ds = tiny.prep.dataset
    preds = collect_predictions(oracle_scorer(ds.sizes["locations"]), ds.splits["train"], 8)
    report = scenario_report(preds, ds.long_tail, ds.sizes["locations"])
    assert report.overall.acc(1) == 1.0
    # every position with a predecessor is evaluated exactly once
    assert report.overall.count == sum(len(s) - 1 for s in ds.splits["train"])


def test_random_scorer_near_chance():
    n = 50
    rng = np.random.default_rng(0)
    from m3ob.data import EncodedSequence

    seqs = []
    for u in range(40):
        L = 30
        locs = rng.integers(0, n, L)
        z = np.zeros(L, bool)
        seqs.append(EncodedSequence(u, locs, locs % 3, locs % 2, rng.integers(0, 48, L), z, z))
    preds = collect_predictions(pl.random_scores(n, seed=1), seqs, 32)
    m = Metrics.from_ranks(preds.ranks, (10,), n)
    assert m.count >= 1000
    assert abs(m.acc(10) - 0.2) <= 0.06


def test_slices_partition_predictions():
    rng = np.random.default_rng(2)
    n = 200
    preds = Predictions(rng.integers(0, 10, n), rng.integers(0, 8, n), rng.random(n) < 0.3, rng.random(n) < 0.2)
    rep = scenario_report(preds, rng.random(8) < 0.5, 8)
    s = rep.slices
    assert s["rainy"].count + s["non_rainy"].count == s["overall"].count == n
    assert s["cold"].count + s["non_cold"].count == n
    assert s["head"].count + s["tail"].count == n
    for k in (1, 5, 10, 20):
        assert s["head"].hits[k] + s["tail"].hits[k] == s["overall"].hits[k]


def test_evaluate_split_deterministic_and_checks_vocab(tiny, tmp_path):
    ds = tiny.prep.dataset
    model = M3ob(ds.sizes, tiny.config("model.dropout=0.3"), tiny.kg, tiny.graphs, tiny.prep.images)
    a = evaluate_split(model, ds, "test")
    b = evaluate_split(model, ds, "test")
    write_report(tmp_path / "a", a, tiny.cfg)
    write_report(tmp_path / "b", b, tiny.cfg)
    for name in ("metrics.json", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    model.sizes = dict(model.sizes, locations=model.sizes["locations"] + 1)
    with pytest.raises(ValueError, match="vocabulary mismatch"):
        evaluate_split(model, ds, "test")


def test_report_files_have_four_decimals(tiny, tmp_path):
    ds = tiny.prep.dataset
    preds = collect_predictions(pl.random_scores(ds.sizes["locations"]), ds.splits["test"], 8)
    write_report(tmp_path, scenario_report(preds, ds.long_tail, ds.sizes["locations"]), tiny.cfg)
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert set(doc["metrics"]) == {"overall", "rainy", "non_rainy", "cold", "non_cold", "head", "tail"}
    assert doc["config"] == tiny.cfg
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert rows[0]["slice"] == "overall"
    assert all(len(r["acc@10"].split(".")[1]) == 4 for r in rows)


# ---------------------------------------------------------------------------
# CLI


@pytest.fixture(scope="module")
def cli_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "c.json"
    doc = {}
    cfg = resolve(None, TINY_OVERRIDES)
    for item in TINY_OVERRIDES:
        key = item.split("=", 1)[0]
        node, src = doc, cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            src = src[p]
        node[parts[-1]] = src[parts[-1]]
    doc["fusion"] = {"alpha": 0.5}
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def trained_run(cli_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["synth", "--config", str(cli_config), "--out", str(out)]) == 0
    assert main(["train", "--config", str(cli_config), "--out", str(out), "--quiet"]) == 0
    assert main(["evaluate", "--config", str(cli_config), "--out", str(out)]) == 0
    return out


def test_full_pipeline_smoke(trained_run):
    for name in ("checkins.csv", "hierarchy.tsv", "images.txt", "weather.csv", "kg.bin", "train_log.csv",
                 "model.bin", "model.json", "metrics.json", "metrics.csv", "config.json"):
        assert (trained_run / name).exists(), name
    doc = json.loads((trained_run / "metrics.json").read_text())
    assert doc["split"] == "test" and doc["variant"] == "full"


def test_set_overrides_config_file(cli_config, trained_run, tmp_path):
    assert json.loads((trained_run / "config.json").read_text())["fusion"]["alpha"] == 0.5
    out = tmp_path / "o"
    assert main(["ingest", "--config", str(cli_config), "--set", "fusion.alpha=0.8",
                 "--set", f"data.dir={trained_run}", "--out", str(out)]) == 0
    assert json.loads((out / "config.json").read_text())["fusion"]["alpha"] == 0.8
    assert json.loads((out / "ingest.json").read_text())["records"] > 0


def test_stage_subcommands(cli_config, trained_run, tmp_path):
    base = ["--config", str(cli_config), "--set", f"data.dir={trained_run}", "--out", str(tmp_path)]
    assert main(["preprocess", *base]) == 0
    assert (tmp_path / "splits.csv").exists() and (tmp_path / "dataset.json").exists()
    assert main(["build-kg", *base]) == 0
    assert (tmp_path / "triplets.tsv").read_text().count("\n") > 10
    assert main(["pretrain-kg", *base]) == 0
    assert main(["build-graphs", *base]) == 0
    assert (tmp_path / "graphs.tsv").read_text().startswith("level\trow\tcol\tweight")


def test_ablate_strg_cascades(cli_config, trained_run, tmp_path):
    out = tmp_path / "strg"
    assert main(["ablate", "--variant", "strg", "--config", str(cli_config),
                 "--set", f"data.dir={trained_run}", "--set", "training.epochs=1", "--out", str(out)]) == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["variant"] == "strg"
    assert doc["config"]["ablation"]["strg"] is False and doc["config"]["ablation"]["irg"] is False


def test_ablation_config_variants():
    cfg = resolve()
    for flag in ("img", "text", "irg", "mup", "cma"):
        out = pl.ablation_config(cfg, flag)
        assert out["ablation"][flag] is False and out["run"]["variant"] == flag
        assert sum(not v for v in out["ablation"].values()) == 1
    assert pl.ablation_config(cfg, "full")["ablation"] == cfg["ablation"]


def fake_run(path, variant, seed, acc, k=20):
    cfg = resolve(None, [f"seed={seed}", f"graph.k={k}", f"run.variant={variant}"])
    path.mkdir(parents=True)
    metrics = {"overall": {"acc@1": acc / 4, "acc@5": acc / 2, "acc@10": acc, "acc@20": acc, "count": 10},
               "tail": {"acc@10": acc / 2}}
    doc = {"metrics": metrics, "config": cfg, "variant": variant, "seed": seed}
    (path / "metrics.json").write_text(json.dumps(doc))
    return path


def test_report_row_counts(tmp_path):
    one = fake_run(tmp_path / "one", "full", 0, 0.4)
    assert main(["report", str(one), "--out", str(tmp_path / "r1")]) == 0
    assert len(list(csv.DictReader((tmp_path / "r1" / "report.csv").open()))) == 1

    variants = ["full", "img", "text", "irg", "strg", "mup", "cma"]
    runs = [str(fake_run(tmp_path / f"v{v}", v, 0, 0.3)) for v in variants]
    assert main(["report", *runs, "--out", str(tmp_path / "r7")]) == 0
    rows = list(csv.DictReader((tmp_path / "r7" / "report.csv").open()))
    assert [r["variant"] for r in rows] == variants

    sweep = [str(fake_run(tmp_path / f"k{k}", "full", 0, 0.3, k)) for k in (5, 10, 20, 50, 100)]
    doc = pl.report(sweep, tmp_path / "rk")
    assert [r["graph_k"] for r in doc["runs"]] == [5, 10, 20, 50, 100]
    assert len(doc["summary"]) == 5


def test_report_aggregates_seeds(tmp_path):
    runs = [fake_run(tmp_path / f"s{s}", "full", s, acc) for s, acc in ((0, 0.4), (1, 0.5), (2, 0.6))]
    doc = pl.report(runs, tmp_path / "r")
    assert len(doc["summary"]) == 1
    entry = doc["summary"][0]
    assert entry["seeds"] == [0, 1, 2]
    assert entry["acc@10_mean"] == 0.5 and entry["acc@10_std"] == pytest.approx(0.0816, abs=1e-4)


def test_exit_codes(tmp_path, capsys):
    assert main(["bogus"]) == 1
    assert main(["train", "--out", str(tmp_path), "--unknown"]) == 1
    assert main(["train"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["ingest", "--out", str(tmp_path / "empty")]) == 2
    assert main(["train", "--out", str(tmp_path), "--set", "no.such=1"]) == 2
    assert main(["report", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 2
    assert "missing" in capsys.readouterr().err


def test_numerical_failure_exit_code(trained_run, cli_config, tmp_path):
    code = main(["train", "--config", str(cli_config), "--set", f"data.dir={trained_run}",
                 "--set", "training.lr=1e300", "--set", "training.epochs=2", "--out", str(tmp_path), "--quiet"])
    assert code == 3
