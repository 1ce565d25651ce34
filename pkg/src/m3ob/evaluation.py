"""Top-k accuracy with scenario slices, and report writing."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import EncodedDataset, EncodedSequence

DEFAULT_KS = (1, 5, 10, 20)
SLICES = ("overall", "rainy", "non_rainy", "cold", "non_cold", "head", "tail")


def true_rank(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Zero-based rank of the target; equal logits are ordered by smaller index first.

    ``logits`` is (..., N); ``target`` has the leading shape.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    true = np.take_along_axis(logits, target[..., None], axis=-1)
    idx = np.arange(logits.shape[-1])
    ahead = (logits > true) | ((logits == true) & (idx < target[..., None]))
    return ahead.sum(axis=-1)


def acc_at_k(logits, target: int, k: int) -> int:
    logits = np.asarray(logits, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be at least 1")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    k = min(k, logits.shape[-1])
    return int(true_rank(logits, np.asarray(target)) < k)


@dataclass
class Metrics:
    ks: tuple[int, ...] = DEFAULT_KS
    hits: dict[int, int] = field(default_factory=dict)
    count: int = 0

    @classmethod
    def from_ranks(cls, ranks: np.ndarray, ks: Sequence[int], n_classes: int) -> "Metrics":
        ranks = np.asarray(ranks)
        hits = {k: int((ranks < min(k, n_classes)).sum()) for k in ks}
        return cls(tuple(ks), hits, int(ranks.size))

    def acc(self, k: int) -> float:
        return self.hits[k] / self.count if self.count else 0.0

    def as_dict(self) -> dict:
        out = {f"acc@{k}": round(self.acc(k), 4) for k in self.ks}
        out["count"] = self.count
        return out


@dataclass
class ScenarioReport:
    slices: dict[str, Metrics]

    @property
    def overall(self) -> Metrics:
        return self.slices["overall"]

    def as_dict(self) -> dict:
        return {name: m.as_dict() for name, m in self.slices.items()}


@dataclass
class Predictions:
    """Flat arrays over every evaluated position."""

    ranks: np.ndarray
    targets: np.ndarray
    rainy: np.ndarray
    cold: np.ndarray


def collect_predictions(
    scorer: Callable, sequences: Sequence[EncodedSequence], max_len: int, batch_size: int = 128
) -> Predictions:
    """Score every position that has at least one preceding record.

    ``scorer`` maps a :class:`~m3ob.model.Batch` to (B, T, N_p) logits.
    """
    from .model import collate, windows

    wins = windows(sequences, max_len)
    ranks, targets, rainy, cold = [], [], [], []
    for start in range(0, len(wins), batch_size):
        batch = collate(wins[start : start + batch_size])
        logits = np.asarray(scorer(batch))
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite logits during evaluation")
        m = batch.target_mask
        ranks.append(true_rank(logits, batch.target_location)[m])
        targets.append(batch.target_location[m])
        rainy.append(batch.target_rainy[m])
        cold.append(batch.target_cold[m])
    cat = lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dtype=dt)  # noqa: E731
    return Predictions(cat(ranks, np.int64), cat(targets, np.int64), cat(rainy, bool), cat(cold, bool))


def scenario_report(preds: Predictions, long_tail: np.ndarray, n_classes: int, ks: Sequence[int] = DEFAULT_KS) -> ScenarioReport:
    tail = np.asarray(long_tail, dtype=bool)[preds.targets]
    masks = {
        "overall": np.ones(len(preds.ranks), dtype=bool),
        "rainy": preds.rainy,
        "non_rainy": ~preds.rainy,
        "cold": preds.cold,
        "non_cold": ~preds.cold,
        "head": ~tail,
        "tail": tail,
    }
    return ScenarioReport({name: Metrics.from_ranks(preds.ranks[m], ks, n_classes) for name, m in masks.items()})


def evaluate_split(
    model, dataset: EncodedDataset, split: str = "test", ks: Sequence[int] = DEFAULT_KS, batch_size: int = 128
) -> ScenarioReport:
    """Evaluate a model (anything with ``sizes``, ``location_scores`` and a max length) on one split."""
    if dict(model.sizes) != dataset.sizes:
        raise ValueError(f"vocabulary mismatch: model {dict(model.sizes)} vs dataset {dataset.sizes}")
    max_len = model.cfg["model"]["max_seq_len"]
    preds = collect_predictions(model.location_scores, dataset.splits[split], max_len, batch_size)
    return scenario_report(preds, dataset.long_tail, dataset.sizes["locations"], ks)


def metrics_rows(report: ScenarioReport) -> list[dict]:
    rows = []
    for name, m in report.slices.items():
        row = {"slice": name, "count": m.count}
        row.update({f"acc@{k}": f"{m.acc(k):.4f}" for k in m.ks})
        rows.append(row)
    return rows


def write_report(out_dir: str | Path, report: ScenarioReport, cfg: dict | None = None, extra: dict | None = None) -> None:
    """Write ``metrics.json`` (nested by slice, config echoed) and ``metrics.csv`` (flat)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"metrics": report.as_dict()}
    if extra:
        doc.update(extra)
    if cfg is not None:
        doc["config"] = cfg
    (out_dir / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    rows = metrics_rows(report)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out_dir / "metrics.csv").write_text(buf.getvalue())
