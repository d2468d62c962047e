"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the recorded lines
appear in the "acceptance criteria" section of the terminal summary.  The
stability and ablation criteria train several hundred models and take about
an hour on one CPU core.
"""

import math
import time

import numpy as np
import pytest

from promptsep import tensor as T
from promptsep.diagnostics import check_seed
from promptsep.harness import ExperimentPlan, run_ablation, run_stability_hard, run_stability_soft
from promptsep.metrics import (GaussianFit, dump_embeddings, gaussian_kl, mmd_rbf, silhouette)
from promptsep.model import (INIT_STRATEGIES, VARIANTS, ModelConfig, attention_core, forward, init_model)
from promptsep.objectives import mlm_loss, supcon_loss, total_loss
from promptsep.taskgen import generate_task, split_batch
from promptsep.tensor import Tensor
from promptsep.trainer import TrainConfig, default_template, fresh_model, prepare_splits, train

from acceptance_report import record
from oracles import (loop_attention, loop_median_distance, loop_mlm, loop_mmd, loop_silhouette, loop_supcon,
                     mc_symmetric_kl)

TASK_SEEDS = (0, 1, 2)
SEEDS = list(range(10))


def check(number, title, passed, detail):
    line = record(number, title, bool(passed), detail)
    assert passed, line


# ------------------------------------------------------------ 1. gradients


def test_criterion_01_gradient_suite():
    start = time.perf_counter()
    results = [check_seed(seed) for seed in range(20)]
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    failing = [r.seed for r in results if r.max_rel_error >= 1e-4]
    check(1, "gradient suite", worst.max_rel_error < 1e-4 and elapsed < 120,
          f"max rel err {worst.max_rel_error:.2e} (seed {worst.seed}; seeds >= 1e-4: {failing}) "
          f"over {results[0].num_entries} entries x 20 seeds in {elapsed:.1f}s")


# ------------------------------------------------------------ 2. loss oracles


def test_criterion_02_loss_oracles():
    rng = np.random.default_rng(2024)
    sup_err = mlm_err = 0.0
    exact = True
    for _ in range(100):
        b, d = int(rng.integers(2, 9)), int(rng.integers(1, 9))
        tau = float(rng.choice([0.05, 0.1, 1.0]))
        z = rng.normal(size=(b, d))
        labels = rng.integers(0, 2, size=b)
        l_cl = supcon_loss(Tensor(z), labels, tau)
        sup_err = max(sup_err, abs(l_cl.item() - loop_supcon(z, labels, tau)))
        logits = rng.normal(size=(b, 128)) * 3
        l_mlm = mlm_loss(Tensor(logits), labels, (2, 3))
        mlm_err = max(mlm_err, abs(l_mlm.item() - loop_mlm(logits, labels, (2, 3))))
        exact &= total_loss(l_mlm, l_cl).l_total.item() == l_mlm.item() + l_cl.item()
    check(2, "loss oracles", sup_err < 1e-10 and mlm_err < 1e-12 and exact,
          f"supcon max err {sup_err:.1e} (< 1e-10), mlm max err {mlm_err:.1e} (< 1e-12), "
          f"total exact sum: {exact}")


# ------------------------------------------------------------ 3. attention oracles


def test_criterion_03_attention_oracles():
    rng = np.random.default_rng(3)
    sem_err = gen_err = 0.0
    for _ in range(50):
        b, o, d, l = (int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(2, 9)),
                      int(rng.integers(1, 5)))
        model = init_model(ModelConfig(max_seq_len=o, embed_dim=d, prompt_len=l), int(rng.integers(1 << 30)))
        x = rng.normal(size=(b, o, d))
        mask = rng.random((b, o)) < 0.7
        mask[np.arange(b), rng.integers(0, o, size=b)] = True
        s, g = model.sem, model.gen
        out, _ = attention_core(Tensor(x), Tensor(x), s["wq"], s["wk"], s["wv"], mask)
        ref = loop_attention(x, x, s["wq"].data, s["wk"].data, s["wv"].data, mask)
        sem_err = max(sem_err, np.abs(out.data - ref).max())
        prompt = rng.normal(size=(l, d))
        out, _ = attention_core(Tensor(prompt), Tensor(x), g["wq"], g["wk"], g["wv"], mask, shared_query=True)
        ref = loop_attention(prompt, x, g["wq"].data, g["wk"].data, g["wv"].data, mask)
        gen_err = max(gen_err, np.abs(out.data - ref).max())
    check(3, "attention oracles", sem_err < 1e-12 and gen_err < 1e-12,
          f"50 random shapes: semantic encoder max err {sem_err:.1e}, decoder max err {gen_err:.1e} (< 1e-12)")


# ------------------------------------------------------------ 4. input separation


def test_criterion_04_input_separation():
    task = generate_task(2, 0.0, 4, train_size=16, dev_size=16, test_size=32)
    cfg = TrainConfig(seed=4)
    model = fresh_model(task, cfg)
    batch = split_batch(task, "test", model.config, default_template(cfg))
    gd_batch = batch
    base = {p: forward(model, batch, "full", with_pooled=p).label_logits.data.copy() for p in (True, False)}
    gd_base = forward(model, gd_batch, "wo_gd").label_logits.data.copy()
    rng = np.random.default_rng(44)
    other = model.clone()
    other.soft_prompt.data[...] = rng.normal(0.0, 5.0, other.soft_prompt.shape)
    for p in other.gen.values():
        p.data[...] = rng.normal(0.0, 3.0, p.shape)
    same = all(np.array_equal(forward(other, batch, "full", with_pooled=p).label_logits.data, base[p])
               for p in (True, False))
    moved = int(np.sum(forward(other, gd_batch, "wo_gd").label_logits.data != gd_base))
    check(4, "input separation", same and moved > 0,
          f"full: logits bitwise unchanged under random prompt and decoder = {same}; "
          f"wo_gd: {moved} of {gd_base.size} logits changed")


# ------------------------------------------------------------ 5, 6, 7, 10: noise-free training runs


@pytest.fixture(scope="module")
def noise_free_runs():
    """Ten full-variant runs with the documented defaults on the noise-free task."""
    task = generate_task(2, 0.0, 0)
    runs = []
    for seed in SEEDS:
        cfg = TrainConfig(seed=seed)
        model = fresh_model(task, cfg)
        prepared = prepare_splits(model, task, default_template(cfg))
        before = dump_embeddings(model, prepared.test, "before_tuning").summary(seed)
        checksum = model.checksum("backbone")
        model, hist = train(model, task, cfg, prepared)
        after = dump_embeddings(model, prepared.test, "after_tuning").summary(seed)
        runs.append({"seed": seed, "hist": hist, "before": before, "after": after,
                     "frozen": checksum == model.checksum("backbone"), "prepared": prepared})
    return task, runs


def test_criterion_05_frozen_backbone(noise_free_runs):
    _, runs = noise_free_runs
    frozen = [r["frozen"] for r in runs]
    epochs = {len(r["hist"].epochs) for r in runs}
    check(5, "frozen backbone", all(frozen) and epochs == {100},
          f"backbone checksum identical before/after 100-epoch training in {sum(frozen)}/{len(runs)} runs")


def test_criterion_06_determinism(noise_free_runs):
    task, runs = noise_free_runs
    cfg = TrainConfig(seed=0)
    model = fresh_model(task, cfg)
    _, again = train(model, task, cfg, runs[0]["prepared"])
    same = again.to_json() == runs[0]["hist"].to_json()
    check(6, "determinism", same, f"repeated (config, seed=0) run gives bitwise-identical history JSON: {same}")


def test_criterion_07_learnability(noise_free_runs):
    _, runs = noise_free_runs
    accs = [r["hist"].test_accuracy for r in runs]
    slowest = max(r["hist"].wall_time for r in runs)
    hits = sum(a >= 0.95 for a in accs)
    check(7, "end-to-end learnability", hits >= 9 and slowest < 120,
          f"test accuracy >= 0.95 in {hits}/10 seeds (need 9), accuracies "
          f"{[round(a, 4) for a in accs]}, slowest run {slowest:.1f}s")


def test_criterion_10_metric_direction(noise_free_runs):
    _, runs = noise_free_runs
    ups = []
    for r in runs:
        b, a = r["before"], r["after"]
        ups.append(all(a[k] > b[k] for k in ("sc", "kl", "mmd")))
    mean = {k: (np.mean([r["before"][k] for r in runs]), np.mean([r["after"][k] for r in runs]))
            for k in ("sc", "kl", "mmd")}
    summary = ", ".join(f"{k} {v[0]:.3g} -> {v[1]:.3g}" for k, v in mean.items())
    check(10, "metric direction", sum(ups) >= 8,
          f"all three metrics larger after tuning in {sum(ups)}/10 seeds (need 8); mean {summary}")


# ------------------------------------------------------------ 8, 9: noisy-task protocols


@pytest.fixture(scope="module")
def protocol_tables():
    """Soft, hard and ablation tables per task instance; overlapping cells run once."""
    cache: dict = {}
    out = {}
    for t in TASK_SEEDS:
        base = dict(noise_level=0.15, task_seed=t, seeds=SEEDS)
        soft = run_stability_soft(ExperimentPlan(**base, variants=["full", "wo_gd"],
                                                 strategies=list(INIT_STRATEGIES)), cache=cache)
        hard = run_stability_hard(ExperimentPlan(**base, variants=["full", "wo_gd"],
                                                 template_ids=list(range(6))), cache=cache)
        ablation = run_ablation(ExperimentPlan(**base, variants=list(VARIANTS)), cache=cache)
        out[t] = {"soft": soft, "hard": hard, "ablation": ablation}
    return out


def _spread(table, variant):
    return table.aggregate("across", variant)["std"]


def test_criterion_08_stability_direction(protocol_tables):
    details, ok = [], True
    for axis in ("soft", "hard"):
        pairs = [(_spread(protocol_tables[t][axis], "full"), _spread(protocol_tables[t][axis], "wo_gd"))
                 for t in TASK_SEEDS]
        holds = sum(f <= g for f, g in pairs)
        ok &= holds >= 2
        details.append(f"{axis}: std(full) <= std(wo_gd) on {holds}/3 tasks "
                       + str([f"{f:.4f} vs {g:.4f}" for f, g in pairs]))
    check(8, "stability direction", ok, "; ".join(details))


def test_criterion_09_ablation_direction(protocol_tables):
    rows, holds = [], 0
    for t in TASK_SEEDS:
        table = protocol_tables[t]["ablation"]
        full, wo_cl, wo_gd = (table.aggregate("variant", v) for v in ("full", "wo_cl", "wo_gd"))
        good = full["mean"] >= wo_cl["mean"] and full["std"] <= wo_gd["std"]
        holds += good
        rows.append(f"task {t}: mean full {full['mean']:.4f} vs wo_cl {wo_cl['mean']:.4f}, "
                    f"std full {full['std']:.4f} vs wo_gd {wo_gd['std']:.4f}")
    check(9, "ablation direction", holds >= 2, f"holds on {holds}/3 tasks; " + "; ".join(rows))


# ------------------------------------------------------------ 11. metric oracles


def test_criterion_11_metric_oracles():
    rng = np.random.default_rng(11)
    sc_err = mmd_err = kl_rel = 0.0
    for _ in range(20):
        n = int(rng.integers(4, 10))
        x = rng.normal(size=(n, int(rng.integers(1, 4))))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        sc_err = max(sc_err, abs(silhouette(x, labels) - loop_silhouette(x.tolist(), labels.tolist())))

        a, b = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        p = GaussianFit(rng.normal(size=2), a @ a.T + 0.5 * np.eye(2))
        q = GaussianFit(rng.normal(size=2), b @ b.T + 0.5 * np.eye(2))
        exact = 0.5 * (gaussian_kl(p, q) + gaussian_kl(q, p))
        mc = mc_symmetric_kl(p.mean, p.cov, q.mean, q.cov, 1_000_000, rng)
        kl_rel = max(kl_rel, abs(mc - exact) / exact)

        u = rng.normal(size=(int(rng.integers(1, 6)), 3))
        v = rng.normal(size=(int(rng.integers(1, 6)), 3)) + 0.5
        pooled = np.vstack([u, v])
        sigma = loop_median_distance(pooled.tolist()) if len(pooled) > 1 else 1.0
        sigma = sigma if sigma > 0 else 1.0
        mmd_err = max(mmd_err, abs(mmd_rbf(u, v) - loop_mmd(u.tolist(), v.tolist(), sigma)))
    check(11, "metric oracles", sc_err < 1e-12 and kl_rel < 0.02 and mmd_err < 1e-12,
          f"20 instances each: silhouette max err {sc_err:.1e} (< 1e-12), KL vs Monte-Carlo max rel "
          f"{kl_rel:.2%} (< 2%), MMD max err {mmd_err:.1e} (< 1e-12)")
