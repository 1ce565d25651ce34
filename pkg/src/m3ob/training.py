"""Multi-task objective, cross-modal alignment and the training loop."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import EncodedDataset, ImageFeatureSet
from .evaluation import evaluate_split
from .model import Batch, FusedRepresentations, M3ob, collate, windows
from .nn import Linear
from .optim import Adam
from .stkg import KGEmbeddings
from .strg import RelationalGraph

LOG_HEADER = (
    "epoch,loss_total,loss_p,loss_c,loss_a,loss_t,loss_con,val_acc1,val_acc5,val_acc10,val_acc20,seconds"
)
COMPONENTS = ("p", "c", "a", "t", "con")
LOG_KS = (1, 5, 10, 20)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, detail: str = ""):
        self.component = component
        super().__init__(f"non-finite value in loss component {component!r}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class LossWeights:
    lambda_t: float = 10.0
    lambda_con: float = 1.0

    def __post_init__(self):
        if self.lambda_t < 0 or self.lambda_con < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


def project_kg(ent_p: Tensor | np.ndarray, proj: Linear) -> Tensor:
    """Project the frozen location rows of the knowledge graph into the shared space."""
    ent_p = ent_p if isinstance(ent_p, Tensor) else ad.constant(np.asarray(ent_p, dtype=np.float64))
    return proj(ent_p)


def contrastive_align(z_kg: Tensor, z_img: Tensor) -> Tensor:
    """Symmetric InfoNCE with raw inner products and every location as a negative.

    Row i of each table is the positive for row i of the other.
    """
    if z_kg.ndim != 2 or z_kg.shape != z_img.shape:
        raise ad.ShapeError(f"contrastive_align: {z_kg.shape} vs {z_img.shape}")
    n = z_kg.shape[0]
    if n < 1:
        raise ValueError("contrastive_align needs at least one location")
    sim = ad.matmul(z_kg, z_img.T)
    diag = np.arange(n)
    return ad.cross_entropy(sim, diag) + ad.cross_entropy(sim.T, diag)


def total_loss(components: dict[str, Tensor | float | None], weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """L_p + L_c + L_a + lambda_t L_t + lambda_con L_con; ``None`` components are skipped."""
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    scale = {"p": 1.0, "c": 1.0, "a": 1.0, "t": weights.lambda_t, "con": weights.lambda_con}
    total = None
    values = {}
    for name in COMPONENTS:
        comp = components.get(name)
        if comp is None:
            values[name] = 0.0
            continue
        comp = comp if isinstance(comp, Tensor) else ad.constant(np.asarray(comp, dtype=np.float64))
        values[name] = float(comp.data)
        if scale[name] == 0.0:
            continue
        term = comp if scale[name] == 1.0 else comp * scale[name]
        total = term if total is None else total + term
    if total is None:
        total = ad.constant(np.array(0.0))
    values["total"] = float(total.data)
    return total, values


def _guard(component: str, fn):
    try:
        return fn()
    except FloatingPointError as exc:
        if isinstance(exc, NonFiniteLossError):
            raise
        raise NonFiniteLossError(component, str(exc)) from None


def loss_components(model: M3ob, batch: Batch, reps: FusedRepresentations | None = None) -> dict[str, Tensor | None]:
    """Each loss term for one batch, with ablated terms set to ``None``."""
    flags = model.flags
    reps = _guard("forward", lambda: reps if reps is not None else model.representations())
    out = _guard("forward", lambda: model.forward(batch, reps))
    m = batch.target_mask
    comps: dict[str, Tensor | None] = {}
    comps["p"] = _guard("p", lambda: ad.cross_entropy(out.location, batch.target_location, m))
    if flags["text"]:
        comps["c"] = _guard("c", lambda: ad.cross_entropy(out.category, batch.target_category, m))
        comps["a"] = _guard("a", lambda: ad.cross_entropy(out.activity, batch.target_activity, m))
    else:
        comps["c"] = comps["a"] = None
    comps["t"] = _guard("t", lambda: ad.mse(out.time, batch.target_time, m))
    if flags["img"] and flags["cma"]:
        comps["con"] = _guard("con", lambda: contrastive_align(model.kg_projection(), reps.image))
    else:
        comps["con"] = None
    return comps


def model_loss(model: M3ob, batch: Batch) -> tuple[Tensor, dict[str, float]]:
    t = model.cfg["training"]
    total, values = total_loss(loss_components(model, batch), LossWeights(t["lambda_t"], t["lambda_con"]))
    if not np.isfinite(values["total"]):
        raise NonFiniteLossError("total")
    return total, values


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    val: dict[int, float]
    seconds: float

    def line(self) -> str:
        l = self.losses
        parts = [str(self.epoch)] + [f"{l[k]:.6f}" for k in ("total",) + COMPONENTS]
        parts += [f"{self.val[k]:.4f}" for k in LOG_KS] + [f"{self.seconds:.3f}"]
        return ",".join(parts)


@dataclass
class TrainResult:
    model: M3ob
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc10: float = -1.0


def batches(sequences, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(sequences))
    for start in range(0, len(order), batch_size):
        yield [sequences[i] for i in order[start : start + batch_size]]


def train(
    dataset: EncodedDataset,
    cfg: dict,
    kg: KGEmbeddings,
    graphs: dict[str, RelationalGraph] | None,
    images: ImageFeatureSet | None,
    out_dir: str | Path | None = None,
    progress=None,
) -> TrainResult:
    """Train from scratch; writes ``train_log.csv``, ``model.bin`` and ``model.json`` under ``out_dir``."""
    tc = cfg["training"]
    model = M3ob(dataset.sizes, cfg, kg, graphs, images)
    params = model.parameters()
    opt = Adam(params, learning_rate=tc["lr"], l2_penalty=tc["l2"])
    shuffle_rng = np.random.default_rng([cfg["seed"], 1])
    train_seqs = [s for s in windows(dataset.splits["train"], cfg["model"]["max_seq_len"]) if len(s) > 1]
    if not train_seqs:
        raise ValueError("no training trajectories with at least two records")
    has_val = any(len(s) > 1 for s in dataset.splits.get("validation", []))

    result = TrainResult(model)
    best_state = None
    out = Path(out_dir) if out_dir is not None else None
    log_lines = [LOG_HEADER]
    for epoch in range(1, tc["epochs"] + 1):
        started = time.perf_counter()
        model.train()
        sums = {k: 0.0 for k in ("total",) + COMPONENTS}
        steps = 0
        for chunk in batches(train_seqs, tc["batch_size"], shuffle_rng):
            batch = collate(chunk, tc["last_position_only"])
            opt.zero_grad()
            loss, values = model_loss(model, batch)
            grads = ad.backward(loss, params)
            opt.step([grads[p] for p in params])
            for k in sums:
                sums[k] += values[k]
            steps += 1
        losses = {k: v / steps for k, v in sums.items()}
        if has_val:
            report = evaluate_split(model, dataset, "validation", LOG_KS)
            val = {k: report.overall.acc(k) for k in LOG_KS}
        else:
            val = {k: 0.0 for k in LOG_KS}
        rec = EpochRecord(epoch, losses, val, time.perf_counter() - started)
        result.history.append(rec)
        log_lines.append(rec.line())
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "train_log.csv").write_text("\n".join(log_lines) + "\n")
        if val[10] > result.best_val_acc10:
            result.best_val_acc10 = val[10]
            result.best_epoch = epoch
            best_state = model.state_dict()
        if progress is not None:
            progress(rec)

    if tc["select_best"] and best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if out is not None:
        save_model(out, model, kg, extra={"best_epoch": result.best_epoch})
    return result


def save_model(out_dir: str | Path, model: M3ob, kg: KGEmbeddings, extra: dict | None = None) -> None:
    """Binary checkpoint (parameters plus the knowledge-graph tables) and a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {f"param.{k}": v for k, v in model.state_dict().items()}
    arrays.update(kg.arrays())
    save_checkpoint(out / "model.bin", arrays)
    sidecar = {"config": model.cfg, "sizes": model.sizes, "flags": model.flags}
    if extra:
        sidecar.update(extra)
    (out / "model.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_model(
    out_dir: str | Path,
    graphs_fn=None,
    images: ImageFeatureSet | None = None,
) -> tuple[M3ob, KGEmbeddings]:
    """Rebuild a model from ``model.bin``/``model.json``.

    ``graphs_fn(kg, cfg)`` rebuilds the relational graphs from the stored
    knowledge graph (they are a deterministic function of it).
    """
    out = Path(out_dir)
    sidecar = json.loads((out / "model.json").read_text())
    arrays = load_checkpoint(out / "model.bin")
    kg = KGEmbeddings.from_arrays(arrays, frozen=True)
    cfg = sidecar["config"]
    graphs = graphs_fn(kg, cfg) if graphs_fn is not None else None
    model = M3ob(sidecar["sizes"], cfg, kg, graphs, images)
    model.load_state_dict({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    model.eval()
    return model, kg
