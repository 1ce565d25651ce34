"""Pipeline stages shared by the command line and the demos.

Every stage works inside one run directory.  A stage reuses artifacts an
earlier stage left there and otherwise recomputes them, so ``train`` on a
fresh directory runs everything it needs.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_hash, effective_flags
from .data import (
    CheckinRecord,
    DataError,
    DatasetSplit,
    EncodedDataset,
    HierarchyMap,
    ImageFeatureSet,
    ScenarioTags,
    Trajectory,
    encode_dataset,
    load_hierarchy,
    load_image_features,
    parse_checkins,
    preprocess,
    split_chronological,
    tag_scenarios,
    write_checkins,
)
from .evaluation import ScenarioReport, evaluate_split, write_report
from .stkg import EntitySizes, KGEmbeddings, TransEConfig, extract_triplets, freeze, transe_train, write_triplets
from .strg import RelationalGraph, build_graph, write_graphs
from .synth import SynthCorpus, synth_config_from_dict, synth_generate
from .training import TrainResult, load_model, train

DATA_FILES = {"checkins": "checkins.csv", "hierarchy": "hierarchy.tsv", "images": "images.txt", "weather": "weather.csv"}
LEVELS = ("location", "category", "activity")


def data_paths(cfg: dict, out_dir: str | Path | None = None) -> dict[str, Path | None]:
    """Resolve input files: explicit path, then ``data.dir``, then the run directory."""
    d = cfg["data"]
    out = {}
    for key, fname in DATA_FILES.items():
        if d[key]:
            out[key] = Path(d[key])
            continue
        out[key] = None
        for base in (d["dir"], out_dir):
            if base and (Path(base) / fname).exists():
                out[key] = Path(base) / fname
                break
    return out


def run_synth(cfg: dict, out_dir: str | Path) -> SynthCorpus:
    corpus = synth_generate(synth_config_from_dict(cfg["synth"]), seed=cfg["seed"])
    corpus.write(out_dir)
    return corpus


@dataclass
class Prepared:
    records: list[CheckinRecord]
    trajectories: list[Trajectory]
    split: DatasetSplit
    hierarchy: HierarchyMap
    tags: ScenarioTags
    dataset: EncodedDataset
    images: ImageFeatureSet | None


def ingest(cfg: dict, out_dir: str | Path | None = None) -> tuple[list[CheckinRecord], HierarchyMap, dict]:
    paths = data_paths(cfg, out_dir)
    if paths["checkins"] is None:
        raise DataError("no check-in file: set data.checkins or data.dir, or run synth into the output directory")
    if paths["hierarchy"] is None:
        raise DataError("no category hierarchy file: set data.hierarchy or data.dir")
    records = parse_checkins(paths["checkins"])
    hierarchy = load_hierarchy(paths["hierarchy"], records)
    return records, hierarchy, paths


def prepare(cfg: dict, out_dir: str | Path | None = None) -> Prepared:
    """Ingest, filter, split, tag and encode; loads image features when the image branch is on."""
    records, hierarchy, paths = ingest(cfg, out_dir)
    tz = cfg["data"]["timezone_offset_minutes"]
    survivors, trajectories = preprocess(records, tz, fixpoint=cfg["data"]["fixpoint_filter"])
    if not trajectories:
        raise DataError("no trajectories survive preprocessing")
    split = split_chronological(trajectories)
    tags = tag_scenarios(survivors, paths["weather"], split, tz)
    dataset = encode_dataset(split, hierarchy, tags, tz)
    images = None
    if effective_flags(cfg)["img"]:
        if paths["images"] is None:
            raise DataError("image branch is on but no image feature file was found (data.images)")
        images = load_image_features(paths["images"], dataset.locations.tokens, cfg["image"]["scales"])
    return Prepared(survivors, trajectories, split, hierarchy, tags, dataset, images)


def write_ingest(out_dir: str | Path, records: Sequence[CheckinRecord], hierarchy: HierarchyMap) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "records": len(records),
        "users": len({r.user for r in records}),
        "locations": len({r.location for r in records}),
        "categories": len(hierarchy.categories),
        "activities": len(hierarchy.activities),
    }
    (out / "ingest.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def write_prepared(out_dir: str | Path, prep: Prepared) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_checkins(out / "preprocessed.csv", prep.records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "user", "day", "length", "locations"])
    for name in ("train", "validation", "test"):
        for t in prep.split.trajectories(name):
            w.writerow([name, t.user, t.day.isoformat(), len(t.records), " ".join(r.location for r in t.records)])
    (out / "splits.csv").write_text(buf.getvalue())
    ds = prep.dataset
    tags = {
        "long_tail_locations": [p for p, flag in zip(ds.locations.tokens, ds.long_tail) if flag],
        "train_frequency": dict(zip(ds.locations.tokens, (int(v) for v in ds.train_frequency))),
        "sizes": ds.sizes,
        "evaluation_points": {
            name: int(sum(max(len(s) - 1, 0) for s in ds.splits[name])) for name in ("train", "validation", "test")
        },
    }
    (out / "dataset.json").write_text(json.dumps(tags, indent=2, sort_keys=True) + "\n")


def entity_sizes(dataset: EncodedDataset) -> EntitySizes:
    s = dataset.sizes
    return EntitySizes(s["users"], s["locations"], s["categories"], s["activities"])


def build_kg(prep: Prepared):
    ds = prep.dataset
    return extract_triplets(ds.splits["train"], ds.location_category, ds.category_activity)


def pretrain_kg(cfg: dict, prep: Prepared, out_dir: str | Path | None = None) -> KGEmbeddings:
    """Train TransE on the training triplets, freeze, and optionally write ``kg.bin``/``kg_log.csv``."""
    k = cfg["kg"]
    tcfg = TransEConfig(
        dim=cfg["model"]["dim"], margin=k["margin"], epochs=k["epochs"], lr=k["lr"],
        neg_per_pos=k["neg_per_pos"], batch_size=k["batch_size"], seed=cfg["seed"],
    )
    emb = freeze(transe_train(build_kg(prep), entity_sizes(prep.dataset), tcfg))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "kg.bin", emb.arrays())
        lines = ["epoch,margin_loss"] + [f"{i},{v:.6f}" for i, v in enumerate(emb.loss_history, start=1)]
        (out / "kg_log.csv").write_text("\n".join(lines) + "\n")
    return emb


def load_or_pretrain_kg(cfg: dict, prep: Prepared, out_dir: str | Path | None) -> KGEmbeddings:
    if out_dir is not None and (Path(out_dir) / "kg.bin").exists():
        kg = KGEmbeddings.from_arrays(load_checkpoint(Path(out_dir) / "kg.bin"), frozen=True)
        if kg.dim == cfg["model"]["dim"] and kg.sizes == entity_sizes(prep.dataset):
            return kg
    return pretrain_kg(cfg, prep, out_dir)


def build_graphs(kg: KGEmbeddings, cfg: dict) -> dict[str, RelationalGraph]:
    return {level: build_graph(kg, level, cfg["graph"]["k"]) for level in LEVELS}


def graphs_for(kg: KGEmbeddings, cfg: dict) -> dict[str, RelationalGraph] | None:
    return build_graphs(kg, cfg) if effective_flags(cfg)["strg"] else None


def write_graph_file(out_dir: str | Path, graphs: dict[str, RelationalGraph]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_graphs(out / "graphs.tsv", [graphs[level] for level in LEVELS])


def run_train(cfg: dict, out_dir: str | Path, progress=None) -> tuple[TrainResult, Prepared, KGEmbeddings]:
    prep = prepare(cfg, out_dir)
    kg = load_or_pretrain_kg(cfg, prep, out_dir)
    result = train(prep.dataset, cfg, kg, graphs_for(kg, cfg), prep.images, out_dir, progress)
    return result, prep, kg


def run_evaluate(cfg: dict, out_dir: str | Path, split: str = "test", model_dir: str | Path | None = None) -> ScenarioReport:
    """Evaluate the checkpoint in ``model_dir`` (default ``out_dir``) and write the reports."""
    model_dir = Path(model_dir or out_dir)
    if not (model_dir / "model.bin").exists():
        raise DataError(f"no trained model in {model_dir} (run train first)")
    trained_cfg = json.loads((model_dir / "model.json").read_text())["config"]
    prep = prepare(trained_cfg, model_dir)
    model, _ = load_model(model_dir, graphs_for, prep.images)
    report = evaluate_split(model, prep.dataset, split, cfg["eval"]["ks"])
    write_report(
        out_dir, report, trained_cfg,
        extra={
            "split": split,
            "variant": trained_cfg["run"]["variant"],
            "seed": trained_cfg["seed"],
            "config_hash": config_hash(trained_cfg),
        },
    )
    return report


def ablation_config(cfg: dict, variant: str) -> dict:
    """Copy of ``cfg`` with one module switched off and the run tagged with its name."""
    out = json.loads(json.dumps(cfg))
    if variant != "full":
        if variant not in out["ablation"]:
            raise ValueError(f"unknown ablation variant {variant!r}")
        out["ablation"][variant] = False
        if variant == "strg":
            out["ablation"]["irg"] = False
    out["run"]["variant"] = variant
    return out


# ---------------------------------------------------------------------------
# Cross-run reports


def _run_row(run_dir: Path) -> dict:
    path = run_dir / "metrics.json"
    if not path.exists():
        raise DataError(f"run {run_dir}: missing metrics.json")
    doc = json.loads(path.read_text())
    cfg = doc.get("config", {})
    row = {
        "run": str(run_dir),
        "variant": doc.get("variant", cfg.get("run", {}).get("variant", "full")),
        "seed": doc.get("seed", cfg.get("seed")),
        "config_hash": doc.get("config_hash", config_hash(cfg) if cfg else ""),
        "graph_k": cfg.get("graph", {}).get("k"),
    }
    overall = doc["metrics"]["overall"]
    for key, value in overall.items():
        row[key] = value
    tail = doc["metrics"].get("tail")
    if tail is not None:
        row["tail_acc@10"] = tail.get("acc@10")
    return row


def _group_key(run_dir: Path) -> tuple:
    cfg = json.loads((run_dir / "metrics.json").read_text()).get("config", {})
    cfg = dict(cfg)
    cfg.pop("seed", None)
    return (config_hash(cfg),)


def report(run_dirs: Sequence[str | Path], out_dir: str | Path) -> dict:
    """Write ``report.csv``/``report.json``: one row per run plus a mean/std row per seed group."""
    if not run_dirs:
        raise ValueError("report needs at least one run directory")
    runs = [Path(r) for r in run_dirs]
    rows = [_run_row(r) for r in runs]
    metric_keys = [k for k in rows[0] if k.startswith("acc@") or k == "tail_acc@10"]
    groups: dict[tuple, list[int]] = defaultdict(list)
    for i, r in enumerate(runs):
        groups[_group_key(r)].append(i)
    summary = []
    for _, idx in groups.items():
        first = rows[idx[0]]
        entry = {"variant": first["variant"], "graph_k": first["graph_k"], "seeds": [rows[i]["seed"] for i in idx]}
        for k in metric_keys:
            vals = [float(rows[i][k]) for i in idx if rows[i].get(k) is not None]
            entry[f"{k}_mean"] = round(statistics.fmean(vals), 4) if vals else None
            entry[f"{k}_std"] = round(statistics.pstdev(vals), 4) if len(vals) > 1 else 0.0
        summary.append(entry)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"runs": rows, "summary": summary}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    fields = list(rows[0])
    for r in rows[1:]:
        fields += [k for k in r if k not in fields]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    (out / "report.csv").write_text(buf.getvalue())
    return doc


def random_scores(n_locations: int, seed: int = 0):
    """A scorer returning i.i.d. normal logits; the chance-level baseline."""
    rng = np.random.default_rng(seed)

    def scorer(batch):
        B, T = batch.locations.shape
        return rng.normal(size=(B, T, n_locations))

    return scorer
