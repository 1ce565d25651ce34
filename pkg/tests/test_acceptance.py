"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL (or WARN for the soft ablation check) line that
is printed in the terminal summary, and prints it immediately as well.
"""

import datetime as dt
import time
import warnings
from collections import Counter
from pathlib import Path

import numpy as np

from m3ob import autodiff as ad
from m3ob import pipeline as pl
from m3ob.cli import main
from m3ob.config import ABLATION_FLAGS, resolve
from m3ob.data import preprocess, split_chronological, tag_scenarios
from m3ob.evaluation import evaluate_split
from m3ob.model import M3ob, collate, windows
from m3ob.stkg import (
    FUNCTIONAL,
    EntityId,
    EntitySizes,
    TransEConfig,
    Triplet,
    filtered_mean_rank,
    init_embeddings,
    margin_loss,
    transe_train,
    transition,
    triplet_arrays,
    visit,
)
from m3ob.strg import build_graph, pairwise_similarity
from m3ob.training import contrastive_align, model_loss

import oracles
from conftest import TINY_OVERRIDES, record_acceptance
from test_autodiff import PRIMITIVE_CASES, _param, _weighted


def report(name, passed, detail, soft=False):
    record_acceptance(name, passed, detail, soft)
    print(f"[{'PASS' if passed else ('WARN' if soft else 'FAIL')}] {name}: {detail}")


# ---------------------------------------------------------------------------
# 1. Gradient oracle


def test_gradient_oracle(tmp_path):
    started = time.perf_counter()
    prim_err = 0.0
    for name, (fn, shapes) in PRIMITIVE_CASES.items():
        params = [_param(s, seed=i) for i, s in enumerate(shapes)]
        prim_err = max(prim_err, ad.finite_difference_check(lambda: fn(*params), params))
    a, b = _param((3, 4), 0.5, 2.0), _param((3, 4), 0.5, 2.0, seed=1)
    prim_err = max(prim_err, ad.finite_difference_check(lambda: _weighted(ad.log(a)), [a]))
    prim_err = max(prim_err, ad.finite_difference_check(lambda: _weighted(a / b), [a, b]))

    # d=16 per block, and a record width of 16 (four 4-wide blocks) on length-4 windows
    full_err, n_tensors, active = 0.0, 0, True
    for dim, heads, length in ((16, 2, 8), (4, 4, 4)):
        cfg = resolve(None, TINY_OVERRIDES + [f"model.dim={dim}", f"model.heads={heads}", f"model.max_seq_len={length}"])
        data_dir = tmp_path / f"d{dim}"
        pl.run_synth(cfg, data_dir)
        prep = pl.prepare(cfg, data_dir)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            kg = pl.pretrain_kg(cfg, prep)
        model = M3ob(prep.dataset.sizes, cfg, kg, pl.build_graphs(kg, cfg), prep.images).eval()
        batch = collate(windows(prep.dataset.splits["train"][:2], length)[:3])
        _, values = model_loss(model, batch)
        active = active and all(values[k] > 0 for k in ("p", "c", "a", "t", "con"))
        params = model.parameters()
        n_tensors += len(params)
        full_err = max(full_err, ad.finite_difference_check(lambda: model_loss(model, batch)[0], params, max_entries=20))
    seconds = time.perf_counter() - started

    passed = active and prim_err < 1e-4 and full_err < 1e-3 and seconds < 60
    report(
        "gradient oracle", passed,
        f"primitives max rel err {prim_err:.2e} (<1e-4), full loss over {n_tensors} tensors in two models "
        f"max rel err {full_err:.2e} (<1e-3), five components active={active}, {seconds:.1f}s (<60s)",
    )
    assert passed


# ---------------------------------------------------------------------------
# 2. Graph structure suite


def test_graph_structure_suite():
    started = time.perf_counter()
    failures = []
    for seed in range(5):
        emb = init_embeddings(EntitySizes(3, 30, 8, 4), 8, np.random.default_rng(seed))
        for level in ("location", "category", "activity"):
            M = pairwise_similarity(emb, level).values
            if not (np.all(M > 0) and np.all(M <= 1)):
                failures.append(f"similarity bounds {level}")
            n = M.shape[0]
            for k in (1, 2, 5, n):
                G = build_graph(emb, level, k)
                nnz = G.row_nnz()
                if nnz.max() > k or nnz.min() < 1:
                    failures.append(f"row nnz {level} k={k}")
                dense = G.dense()
                peaks = dense.max(axis=1)[nnz > 0]
                if np.abs(peaks - 1.0).max() > 1e-12:
                    failures.append(f"row max {level} k={k}")
                if not np.array_equal(dense != 0, oracles.knn_oracle(M, k)):
                    failures.append(f"neighbours {level} k={k}")
                if level == "location":
                    img = G.share("image")
                    same = (np.array_equal(img.matrix.indptr, G.matrix.indptr)
                            and np.array_equal(img.matrix.indices, G.matrix.indices)
                            and np.array_equal(img.matrix.data, G.matrix.data))
                    if not same:
                        failures.append(f"image graph k={k}")
    seconds = time.perf_counter() - started
    passed = not failures and seconds < 10
    report("graph structure", passed, f"5 seeds x 3 levels x k in {{1,2,5,N}}; failures={failures[:3]}; {seconds:.2f}s (<10s)")
    assert passed


# ---------------------------------------------------------------------------
# 3. Preprocessing oracle


def _split_oracle(kept):
    out = {}
    for user, trajs in kept.items():
        n_train, n_val, _ = oracles.split_sizes_oracle(len(trajs))
        out[user] = (trajs[:n_train], trajs[n_train:n_train + n_val], trajs[n_train + n_val:])
    return out


def test_preprocessing_oracle():
    started = time.perf_counter()
    mismatches = []
    surviving = 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        records = oracles.random_corpus(rng, 500)
        tz = int(rng.choice([0, -300, 60]))
        weather = {
            dt.date(2012, 4, 2) + dt.timedelta(days=d): (bool(rng.random() < 0.3), bool(rng.random() < 0.2))
            for d in range(20) if rng.random() < 0.9
        }
        survivors, trajs = preprocess(records, tz)
        surviving += len(trajs)
        kept = oracles.preprocess_oracle(records, tz)
        got = {}
        for t in trajs:
            got.setdefault(t.user, []).append(list(t.records))
        if got != kept:
            mismatches.append(f"seed {seed}: filtering")
            continue
        split = split_chronological(trajs)
        expected = _split_oracle(kept)
        for user, (tr, va, te) in expected.items():
            parts = [[list(t.records) for t in split.part(name).get(user, [])] for name in ("train", "validation", "test")]
            if parts != [tr, va, te]:
                mismatches.append(f"seed {seed}: split {user}")
        tags = tag_scenarios(survivors, weather, split, tz)
        freq = oracles.long_tail_oracle([r for tr, _, _ in expected.values() for traj in tr for r in traj])
        for r in survivors:
            if tags.long_tail(r.location) != (freq.get(r.location, 0) < 20):
                mismatches.append(f"seed {seed}: long tail {r.location}")
                break
            flags = weather.get(oracles.date_of(r.timestamp, tz), (False, False))
            if (tags.rainy(r), tags.cold(r)) != flags:
                mismatches.append(f"seed {seed}: weather")
                break
    seconds = time.perf_counter() - started
    passed = not mismatches and surviving > 0 and seconds < 10
    report("preprocessing oracle", passed, f"20 corpora x 500 records ({surviving} surviving trajectories); mismatches={mismatches[:3]}; {seconds:.2f}s (<10s)")
    assert passed


# ---------------------------------------------------------------------------
# 4. TransE sanity


def transe_toy_kg(seed):
    """Fifty distinct triplets: the hierarchy, user routines and a location ring."""
    rng = np.random.default_rng(seed)
    sizes = EntitySizes(5, 20, 5, 3)
    trip = Counter()
    for p in range(20):
        trip[Triplet(EntityId("location", p), FUNCTIONAL, EntityId("category", p % 5))] += 1
    for c in range(5):
        trip[Triplet(EntityId("category", c), FUNCTIONAL, EntityId("activity", c % 3))] += 1
    while len(trip) < 50:
        u, k = int(rng.integers(5)), int(rng.integers(3))
        p = (4 * u + k) % 20
        trip[Triplet(EntityId("user", u), visit(8 + 4 * k), EntityId("location", p))] += 1
        if len(trip) < 50:
            trip[Triplet(EntityId("location", p), transition("location"), EntityId("location", (p + 1) % 20))] += 1
    return trip, sizes


def _fixed_negative_loss(entity, relation, pos, sizes, rng):
    h, r, t = pos
    # corrupt the tail within its own kind
    neg_t = t.copy()
    for i, ti in enumerate(t):
        for kind in ("user", "location", "category", "activity"):
            lo = sizes.offset(kind)
            if lo <= ti < lo + sizes.count(kind):
                neg_t[i] = lo + rng.integers(sizes.count(kind))
    loss = margin_loss(ad.constant(entity), ad.constant(relation), pos, (h, r, neg_t), 1.0)
    return loss.item() / len(h)


def test_transe_sanity():
    started = time.perf_counter()
    trip, sizes = transe_toy_kg(0)
    cfg = TransEConfig(dim=16, epochs=200, lr=0.01, batch_size=16, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        emb = transe_train(trip, sizes, cfg)
    init = init_embeddings(sizes, cfg.dim, np.random.default_rng(cfg.seed))
    pos = triplet_arrays(list(trip), sizes)
    init_loss = _fixed_negative_loss(init.entity, init.relation, pos, sizes, np.random.default_rng(5))
    final_loss = _fixed_negative_loss(emb.entity, emb.relation, pos, sizes, np.random.default_rng(5))
    random_rank = filtered_mean_rank(init_embeddings(sizes, cfg.dim, np.random.default_rng(99)), list(trip))
    trained_rank = filtered_mean_rank(emb, list(trip))
    seconds = time.perf_counter() - started
    passed = (
        len(trip) == 50 and final_loss < init_loss and emb.loss_history[-1] < emb.loss_history[0]
        and random_rank >= 2 * trained_rank and seconds < 30
    )
    report(
        "TransE sanity", passed,
        f"margin loss {init_loss:.4f} -> {final_loss:.4f} (epoch mean {emb.loss_history[0]:.4f} -> "
        f"{emb.loss_history[-1]:.4f}); filtered mean rank random {random_rank:.2f} vs trained {trained_rank:.2f} "
        f"(ratio {random_rank / trained_rank:.2f} >= 2); {seconds:.1f}s (<30s)",
    )
    assert passed


# ---------------------------------------------------------------------------
# 5. Contrastive identities


def test_contrastive_identities():
    single = contrastive_align(ad.tensor([[0.3, -1.2]]), ad.tensor([[2.0, 0.5]])).item() + 0.0
    sat = np.array([[20.0, 0.0], [0.0, 20.0]])
    saturated = contrastive_align(ad.tensor(sat), ad.tensor(sat)).item() + 0.0
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    oracle_gap = abs(contrastive_align(ad.tensor(x), ad.tensor(y)).item() - oracles.contrastive_oracle(x, y))
    minimum = 0.0 + min(
        contrastive_align(ad.tensor(a), ad.tensor(b)).item()
        for a, b in ((rng.normal(size=(n, 4)) * 3, rng.normal(size=(n, 4)) * 3) for n in rng.integers(1, 12, 100))
    )
    passed = single == 0.0 and saturated < 1e-8 and oracle_gap <= 1e-12 and minimum >= 0
    report(
        "contrastive identities", passed,
        f"N=1 loss {single:.1e}; saturated {saturated:.1e} (<1e-8); oracle gap {oracle_gap:.1e} (<=1e-12); "
        f"min over 100 random {minimum:.4f} (>=0)",
    )
    assert passed


# ---------------------------------------------------------------------------
# 6. Causality probe


def test_causality_probe(tiny):
    ds = tiny.prep.dataset
    model = M3ob(ds.sizes, tiny.config("model.dropout=0.3"), tiny.kg, tiny.graphs, tiny.prep.images).eval()
    seqs = [s for s in windows(ds.splits["train"], tiny.cfg["model"]["max_seq_len"]) if len(s) >= 3]
    rng = np.random.default_rng(0)
    violations = 0
    for _ in range(100):
        picks = [seqs[i] for i in rng.choice(len(seqs), size=3, replace=False)]
        batch = collate(picks)
        base = model(batch)
        j = int(rng.integers(len(picks)))
        n = len(picks[j])
        i = int(rng.integers(0, n - 1))  # positions <= i are kept
        pert = collate(picks)
        span = slice(i + 1, n)
        pert.locations[j, span] = rng.integers(0, ds.sizes["locations"], n - i - 1)
        pert.categories[j, span] = ds.location_category[pert.locations[j, span]]
        pert.activities[j, span] = ds.category_activity[pert.categories[j, span]]
        pert.slots[j, span] = rng.integers(0, 48, n - i - 1)
        out = model(pert)
        for a, b in zip(base, out):
            if not np.array_equal(a.data[j, : i + 1], b.data[j, : i + 1]):
                violations += 1
                break
            if not np.array_equal(np.delete(a.data, j, axis=0), np.delete(b.data, j, axis=0)):
                violations += 1
                break
    passed = violations == 0
    report("causality probe", passed, f"100 trials, {violations} with earlier head outputs changed")
    assert passed


# ---------------------------------------------------------------------------
# 7. Overfit regression

OVERFIT_OVERRIDES = ["seed=7", "training.epochs=200", "training.lr=0.001", "training.select_best=false"]


def test_overfit_regression(tmp_path):
    cfg = resolve(None, OVERFIT_OVERRIDES)
    started = time.perf_counter()
    pl.run_synth(cfg, tmp_path)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result, prep, _ = pl.run_train(cfg, tmp_path)
    train_acc1 = evaluate_split(result.model, prep.dataset, "train").overall.acc(1)
    test_acc10 = evaluate_split(result.model, prep.dataset, "test").overall.acc(10)
    seconds = time.perf_counter() - started
    sc = cfg["synth"]
    passed = train_acc1 >= 0.9 and test_acc10 >= 0.2 + 0.15 and seconds < 600
    report(
        "overfit regression", passed,
        f"seed 7, {sc['n_users']} users, {sc['n_locations']} locations, {sc['days']} days, 200 epochs: "
        f"train acc@1 {train_acc1:.4f} (>=0.9), test acc@10 {test_acc10:.4f} (>=0.35), {seconds:.0f}s (<600s)",
    )
    assert passed


# ---------------------------------------------------------------------------
# 8. Ablation direction (soft)

ABLATION_SEEDS = (7, 8, 9)
ABLATION_OVERRIDES = ["training.epochs=25", "training.lr=0.001"]


def test_ablation_direction_soft(tmp_path):
    started = time.perf_counter()
    acc = {v: [] for v in ("full",) + ABLATION_FLAGS}
    for seed in ABLATION_SEEDS:
        base = resolve(None, [f"seed={seed}"] + ABLATION_OVERRIDES)
        data_dir = tmp_path / f"data{seed}"
        pl.run_synth(base, data_dir)
        for variant in acc:
            cfg = pl.ablation_config(resolve(None, [f"seed={seed}", f"data.dir={data_dir}"] + ABLATION_OVERRIDES), variant)
            out = tmp_path / f"{variant}{seed}"
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                result, prep, _ = pl.run_train(cfg, out)
            acc[variant].append(evaluate_split(result.model, prep.dataset, "test").overall.acc(10))
    mean = {v: float(np.mean(a)) for v, a in acc.items()}
    behind = [v for v in ABLATION_FLAGS if mean["full"] < mean[v] - 0.02]
    seconds = time.perf_counter() - started
    detail = ", ".join(f"{v} {m:.4f}" for v, m in mean.items())
    report(
        "ablation direction (soft)", not behind,
        f"mean test acc@10 over seeds {list(ABLATION_SEEDS)}: {detail}; variants beating full by >0.02: {behind}; "
        f"{seconds:.0f}s",
        soft=True,
    )
    if behind:
        warnings.warn(f"full model trails ablation variant(s) {behind} on the synthetic corpus", UserWarning)


# ---------------------------------------------------------------------------
# 9. Determinism


def _run_all_stages(out: Path) -> None:
    sets = ["--set", "kg.epochs=5", "--set", "training.epochs=2"]
    for cmd in ("synth", "ingest", "preprocess", "build-kg", "pretrain-kg", "build-graphs", "train"):
        extra = ["--quiet"] if cmd == "train" else []
        assert main([cmd, *sets, "--out", str(out), *extra]) == 0, cmd
    assert main(["evaluate", *sets, "--out", str(out)]) == 0
    assert main(["report", str(out), "--out", str(out / "report")]) == 0


def _normalise(path: Path) -> bytes:
    data = path.read_bytes()
    if path.name == "train_log.csv":
        # wall-clock seconds are the only non-deterministic column
        lines = data.decode().splitlines()
        data = "\n".join(line.rsplit(",", 1)[0] for line in lines).encode()
    if path.name in ("report.json", "report.csv"):
        data = data.replace(str(path.parent.parent).encode(), b"RUN")
    return data


def test_determinism(tmp_path):
    started = time.perf_counter()
    a, b = tmp_path / "a", tmp_path / "b"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _run_all_stages(a)
        _run_all_stages(b)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    differing = [str(f) for f in files_a if _normalise(a / f) != _normalise(b / f)]
    seconds = time.perf_counter() - started
    passed = files_a == files_b and not differing and len(files_a) >= 15
    report(
        "determinism", passed,
        f"{len(files_a)} artifacts over 10 subcommands compared byte for byte (training log without the seconds "
        f"column); differing={differing}; {seconds:.0f}s",
    )
    assert passed
