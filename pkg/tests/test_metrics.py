import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptsep.errors import ContractError, NumericError
from promptsep.metrics import (EmbeddingDump, GaussianFit, accuracy_stats, dump_embeddings,
                               fit_gaussian, gaussian_kl, kl_gaussian, median_bandwidth, mmd_by_label,
                               mmd_rbf, pooled_embeddings, read_dump, silhouette, write_dump)
from promptsep.model import ModelConfig, init_model
from promptsep.taskgen import generate_task, split_batch

from oracles import loop_median_distance, loop_mmd, loop_silhouette, mc_symmetric_kl


# ------------------------------------------------------------ accuracy stats


def test_accuracy_stats_examples():
    assert accuracy_stats([0.8, 0.8, 0.8]) == (0.8, 0.0)
    mean, std = accuracy_stats([0.0, 1.0])
    assert mean == 0.5 and abs(std - math.sqrt(0.5)) < 1e-15
    with pytest.raises(ContractError):
        accuracy_stats([0.9])


def test_accuracy_stats_direct_formula():
    x = np.random.default_rng(0).random(10)
    mean, std = accuracy_stats(x)
    m = sum(x) / 10
    assert abs(mean - m) < 1e-12
    assert abs(std - math.sqrt(sum((v - m) ** 2 for v in x) / 9)) < 1e-12


# ------------------------------------------------------------ silhouette


def test_silhouette_matches_double_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(3, 9))
        x = rng.normal(size=(n, int(rng.integers(1, 4))))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        assert abs(silhouette(x, labels) - loop_silhouette(x.tolist(), labels.tolist())) < 1e-12


def test_silhouette_limits():
    x = np.array([[0.0], [1e-6], [100.0], [100.0 + 1e-6]])
    assert silhouette(x, [0, 0, 1, 1]) > 0.999
    assert silhouette(np.zeros((4, 2)), [0, 0, 1, 1]) == 0.0
    assert silhouette(np.array([[0.0], [5.0], [5.1]]), [0, 1, 1]) == pytest.approx(
        loop_silhouette([[0.0], [5.0], [5.1]], [0, 1, 1]), abs=1e-12)
    with pytest.raises(ContractError):
        silhouette(np.zeros((3, 2)), [1, 1, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_silhouette_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 3))
    labels = np.array([0, 1] * 4)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    moved = x @ q + rng.normal(size=3) * 10
    assert abs(silhouette(x, labels) - silhouette(moved, labels)) < 1e-10
    assert -1.0 <= silhouette(x, labels) <= 1.0


# ------------------------------------------------------------ KL


def test_kl_identical_classes_is_zero():
    x = np.random.default_rng(1).normal(size=(20, 3))
    data = np.vstack([x, x])
    assert abs(kl_gaussian(data, [0] * 20 + [1] * 20)) < 1e-10


def test_kl_one_dimensional_closed_form():
    p = GaussianFit(np.array([0.0]), np.array([[1.0]]))
    q = GaussianFit(np.array([1.0]), np.array([[1.0]]))
    assert abs(0.5 * (gaussian_kl(p, q) + gaussian_kl(q, p)) - 0.5) < 1e-15


def test_kl_closed_form_vs_monte_carlo():
    rng = np.random.default_rng(2)
    for _ in range(5):
        a, b = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        p = GaussianFit(rng.normal(size=2), a @ a.T + 0.5 * np.eye(2))
        q = GaussianFit(rng.normal(size=2), b @ b.T + 0.5 * np.eye(2))
        exact = 0.5 * (gaussian_kl(p, q) + gaussian_kl(q, p))
        mc = mc_symmetric_kl(p.mean, p.cov, q.mean, q.cov, 1_000_000, rng)
        assert abs(mc - exact) / exact < 0.02


def test_kl_symmetric_and_nonnegative():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 3))
    y = np.array([0] * 15 + [1] * 15)
    assert kl_gaussian(x, y) >= 0
    assert abs(kl_gaussian(x, y) - kl_gaussian(x, 1 - y)) < 1e-12


def test_kl_shrinkage_and_singular_covariance():
    x = np.random.default_rng(4).normal(size=(3, 5))       # fewer points than dims
    fit = fit_gaussian(x)
    assert np.all(np.linalg.eigvalsh(fit.cov) > 0)
    with pytest.raises(NumericError):
        kl_gaussian(np.zeros((4, 2)), [0, 0, 1, 1])


# ------------------------------------------------------------ MMD


def test_mmd_matches_double_sum():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.normal(size=(int(rng.integers(1, 6)), 3))
        y = rng.normal(size=(int(rng.integers(1, 6)), 3)) + 0.5
        pooled = np.vstack([x, y])
        sigma = loop_median_distance(pooled.tolist()) if len(pooled) > 1 else 1.0
        assert abs(mmd_rbf(x, y) - loop_mmd(x.tolist(), y.tolist(), sigma)) < 1e-12


def test_mmd_identity_and_limits():
    x = np.random.default_rng(6).normal(size=(6, 2))
    assert mmd_rbf(x, x) < 1e-12
    far = mmd_rbf(np.zeros((1, 1)), np.full((1, 1), 1e6), bandwidth=1.0)
    assert abs(far - 2.0) < 1e-12
    assert median_bandwidth(np.zeros((3, 2))) == 1.0
    with pytest.raises(ContractError):
        mmd_rbf(np.zeros((0, 2)), x)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_mmd_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert mmd_rbf(rng.normal(size=(4, 2)), rng.normal(size=(5, 2))) >= 0.0


# ------------------------------------------------------------ dumps


def _model_and_batch():
    task = generate_task(2, 0.0, 0, train_size=8, dev_size=8, test_size=16)
    model = init_model(ModelConfig(), 0, "random", task)
    return model, split_batch(task, "test", model.config, (5, 1, 6))


def test_export_round_trip_and_determinism(tmp_path):
    model, batch = _model_and_batch()
    dump = dump_embeddings(model, batch, "before_tuning", run_id="r0")
    a = write_dump(dump, tmp_path / "a.csv")
    b = write_dump(dump_embeddings(model, batch, "before_tuning", run_id="r0"), tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()
    back = read_dump(a)
    assert back.embeddings.shape[0] == len(batch)
    assert np.array_equal(back.embeddings, pooled_embeddings(model, batch))
    assert np.array_equal(back.labels, batch.labels)
    header = a.read_text().splitlines()[0].split(",")
    assert header[:4] == ["run_id", "phase", "label", "dim_0"] and header[-1] == "dim_31"


def test_export_rejects_wo_cl_and_bad_phase():
    model, batch = _model_and_batch()
    with pytest.raises(ContractError):
        dump_embeddings(model, batch, "before_tuning", variant="wo_cl")
    with pytest.raises(ContractError):
        EmbeddingDump(np.zeros((2, 2)), np.array([0, 1]), "midway")


def test_summary_has_all_metrics():
    model, batch = _model_and_batch()
    s = dump_embeddings(model, batch, "after_tuning").summary(seed=3)
    assert set(s) == {"sc", "kl", "mmd", "phase", "seed"}
    assert s["mmd"] == mmd_by_label(pooled_embeddings(model, batch), batch.labels)
