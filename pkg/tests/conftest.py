"""Shared fixtures: a tiny synthetic run small enough for unit tests."""

from __future__ import annotations

import dataclasses
import warnings

import pytest

from m3ob import pipeline as pl
from m3ob.config import resolve

TINY_OVERRIDES = [
    "seed=3",
    "synth.n_users=15",
    "synth.n_locations=20",
    "synth.n_categories=8",
    "synth.n_activities=4",
    "synth.days=12",
    "synth.image_dim=8",
    "kg.epochs=3",
    "graph.k=5",
    "model.dim=8",
    "model.layers=1",
    "model.heads=2",
    "model.time_dim=4",
    "model.max_seq_len=8",
    "model.dropout=0.0",
    "training.epochs=2",
    "training.batch_size=16",
]


@dataclasses.dataclass
class TinyRun:
    cfg: dict
    prep: object
    kg: object
    graphs: dict
    root: object

    def config(self, *overrides):
        return resolve(self.cfg, overrides)


def tiny_config(*overrides):
    return resolve(None, TINY_OVERRIDES + list(overrides))


@pytest.fixture(scope="session")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config()
    pl.run_synth(cfg, root)
    prep = pl.prepare(cfg, root)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        kg = pl.pretrain_kg(cfg, prep)
    return TinyRun(cfg, prep, kg, pl.build_graphs(kg, cfg), root)


# acceptance results, printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(name: str, passed: bool, detail: str = "", soft: bool = False) -> None:
    status = "PASS" if passed else ("WARN" if soft else "FAIL")
    ACCEPTANCE_LINES.append(f"[{status}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
