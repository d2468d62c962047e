"""Accuracy statistics and cluster-separability metrics over pooled prompt embeddings.

KL and MMD have no canonical recipe for embedding clouds; the ones here are a
Gaussian fit with symmetrized closed-form KL and a biased RBF MMD^2 with the
median-distance bandwidth.  Only before/after comparisons are meaningful.
"""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist, pdist

from . import tensor as T
from .errors import ContractError, NumericError
from .model import ModelState, TextBatch, forward

PHASES = ("before_tuning", "after_tuning")


def accuracy_stats(accuracies: Sequence[float]) -> tuple[float, float]:
    """(mean, sample standard deviation with an n-1 denominator).

    ``statistics`` works in exact rational arithmetic, so equal inputs give
    exactly their value and a zero deviation.
    """
    acc = [float(a) for a in accuracies]
    if len(acc) < 2:
        raise ContractError(f"accuracy_stats needs at least 2 runs, got {len(acc)}")
    return statistics.mean(acc), statistics.stdev(acc)


def _two_class(labels) -> np.ndarray:
    y = np.asarray(labels)
    if np.unique(y).size < 2:
        raise ContractError("need at least two classes")
    return y


def silhouette(embeddings, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Points in singleton classes score 0, as does a point with a = b = 0.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = _two_class(labels)
    if x.shape[0] != y.shape[0] or x.shape[0] < 2:
        raise ContractError("silhouette: need >= 2 points with one label each")
    dist = cdist(x, x)
    classes = np.unique(y)
    onehot = (y[:, None] == classes[None, :]).astype(np.float64)
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot                              # (n, C) distance mass per class
    own = np.searchsorted(classes, y)
    n_own = sizes[own] - 1
    a = np.where(n_own > 0, sums[np.arange(len(y)), own] / np.maximum(n_own, 1), 0.0)
    means = sums / sizes[None, :]
    means[np.arange(len(y)), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[n_own == 0] = 0.0
    return float(s.mean())


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray


def fit_gaussian(x: np.ndarray, shrinkage: float = 1e-3) -> GaussianFit:
    """Sample mean and covariance plus lambda*I with lambda = shrinkage * trace / d."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError("fit_gaussian needs >= 2 rows of a 2-D array")
    d = x.shape[1]
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    lam = shrinkage * np.trace(cov) / d
    return GaussianFit(x.mean(axis=0), cov + lam * np.eye(d))


def gaussian_kl(p: GaussianFit, q: GaussianFit) -> float:
    """KL(P || Q) for multivariate normals, closed form."""
    d = p.mean.shape[0]
    try:
        cq = cho_factor(q.cov)
        cp = cho_factor(p.cov)
    except LinAlgError as exc:
        raise NumericError("covariance is singular after shrinkage") from exc
    diff = q.mean - p.mean
    trace = np.trace(cho_solve(cq, p.cov))
    maha = diff @ cho_solve(cq, diff)
    logdet_q = 2.0 * np.log(np.diag(cq[0])).sum()
    logdet_p = 2.0 * np.log(np.diag(cp[0])).sum()
    return float(0.5 * (trace + maha - d + logdet_q - logdet_p))


def kl_gaussian(embeddings, labels, shrinkage: float = 1e-3) -> float:
    """Symmetrized KL, 0.5 * (KL(P||Q) + KL(Q||P)), between per-class Gaussian fits."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = _two_class(labels)
    classes = np.unique(y)
    if classes.size != 2:
        raise ContractError(f"kl_gaussian needs exactly 2 classes, got {classes.size}")
    p = fit_gaussian(x[y == classes[0]], shrinkage)
    q = fit_gaussian(x[y == classes[1]], shrinkage)
    return max(0.0, 0.5 * (gaussian_kl(p, q) + gaussian_kl(q, p)))


def median_bandwidth(pooled: np.ndarray) -> float:
    if pooled.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def mmd_rbf(x, y, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) MMD^2 with k(u, v) = exp(-|u - v|^2 / (2 sigma^2))."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ContractError("mmd_rbf needs two nonempty sets")
    sigma = median_bandwidth(np.vstack([x, y])) if bandwidth is None else bandwidth

    def k(u, v):
        return np.exp(-cdist(u, v, "sqeuclidean") / (2.0 * sigma * sigma))

    value = k(x, x).mean() + k(y, y).mean() - 2.0 * k(x, y).mean()
    return max(0.0, float(value))


def mmd_by_label(embeddings, labels) -> float:
    x = np.asarray(embeddings, dtype=np.float64)
    y = _two_class(labels)
    c0, c1 = np.unique(y)[:2]
    return mmd_rbf(x[y == c0], x[y == c1])


# ------------------------------------------------------------ embedding dumps


@dataclass
class EmbeddingDump:
    """Pooled prompt embeddings for one split at one phase of a run."""

    embeddings: np.ndarray
    labels: np.ndarray
    phase: str
    run_id: str = "run"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ContractError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.embeddings.shape[0] != len(self.labels):
            raise ContractError("one label per embedding row required")
        if not np.isfinite(self.embeddings).all():
            raise NumericError("embedding dump contains non-finite values")

    def summary(self, seed: int | None = None) -> dict:
        return {
            "sc": silhouette(self.embeddings, self.labels),
            "kl": kl_gaussian(self.embeddings, self.labels),
            "mmd": mmd_by_label(self.embeddings, self.labels),
            "phase": self.phase,
            "seed": seed,
        }


def pooled_embeddings(model: ModelState, batch: TextBatch, variant: str = "full") -> np.ndarray:
    """H-bar_sp rows for a batch, without recording gradients."""
    if variant == "wo_cl":
        raise ContractError("variant wo_cl has no contrastive head to export")
    with T.no_grad():
        out = forward(model, batch, variant, with_pooled=True)
    return out.pooled.data.copy()


def dump_embeddings(model: ModelState, batch: TextBatch, phase: str, variant: str = "full",
                    run_id: str = "run", metadata: dict | None = None) -> EmbeddingDump:
    return EmbeddingDump(pooled_embeddings(model, batch, variant), np.asarray(batch.labels),
                         phase, run_id, dict(metadata or {}))


def write_dump(dump: EmbeddingDump, path) -> Path:
    """CSV with header run_id, phase, label, dim_0..dim_{d-1}; floats use repr, so they round-trip."""
    out = Path(path)
    d = dump.embeddings.shape[1]
    try:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run_id", "phase", "label"] + [f"dim_{i}" for i in range(d)])
            for row, label in zip(dump.embeddings, dump.labels):
                w.writerow([dump.run_id, dump.phase, int(label)] + [repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write embedding dump to {out}: {exc}") from exc
    return out


def read_dump(path) -> EmbeddingDump:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    if not body:
        raise ContractError(f"{path}: embedding dump has no rows")
    emb = np.array([[float(v) for v in r[3:]] for r in body], dtype=np.float64)
    labels = np.array([int(r[2]) for r in body], dtype=np.int64)
    return EmbeddingDump(emb, labels, body[0][1], body[0][0])


def export_embeddings(model: ModelState, batch: TextBatch, phase: str, path, variant: str = "full",
                      run_id: str = "run") -> Path:
    return write_dump(dump_embeddings(model, batch, phase, variant, run_id), path)


def write_summary(summaries: Sequence[dict], path) -> Path:
    out = Path(path)
    out.write_text(json.dumps(list(summaries), indent=2, sort_keys=True) + "\n")
    return out
