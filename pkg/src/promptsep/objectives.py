"""Training objectives: supervised contrastive loss, verbalizer MLM loss, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


@dataclass
class LossBundle:
    l_cl: Tensor
    l_mlm: Tensor
    l_total: Tensor

    def values(self) -> tuple[float, float, float]:
        return self.l_total.item(), self.l_mlm.item(), self.l_cl.item()


def cosine_sim(u: Tensor, v: Tensor, eps: float = 1e-8) -> Tensor:
    if eps <= 0:
        raise ContractError("cosine_sim: eps must be positive")
    nu = T.l2_normalize_rows(u, eps)
    nv = T.l2_normalize_rows(v, eps)
    return T.sum_all(T.mul(nu, nv))


def positive_weights(labels, off_diagonal: np.ndarray | None = None) -> np.ndarray:
    """W[i, j] = 1/|P(i)| for j in P(i) = {j != i : y_j = y_i}, else 0."""
    y = np.asarray(labels)
    if off_diagonal is None:
        off_diagonal = ~np.eye(len(y), dtype=bool)
    same = (y[:, None] == y[None, :]) & off_diagonal
    counts = same.sum(axis=1, keepdims=True)
    return np.where(same, 1.0 / np.maximum(counts, 1), 0.0)


def supcon_loss(pooled: Tensor, labels, tau: float, eps: float = 1e-8) -> Tensor:
    """Supervised contrastive loss over row embeddings (b, d).

    Self pairs are excluded from both the positives and the normalizer; each
    anchor averages over its positives and the batch mean divides by b.
    Anchors without positives contribute zero.
    """
    b = pooled.shape[0]
    if b < 2:
        raise ContractError(f"supcon_loss needs at least 2 rows, got {b}")
    if tau <= 0:
        raise ContractError(f"supcon_loss: temperature must be positive, got {tau}")
    y = np.asarray(labels)
    if y.shape != (b,):
        raise ContractError(f"supcon_loss: {y.shape[0] if y.ndim else 0} labels for {b} rows")
    z = T.l2_normalize_rows(pooled, eps)
    sims = T.scale(T.matmul(z, T.transpose(z)), 1.0 / tau)
    off = ~np.eye(b, dtype=bool)
    logp = T.log_softmax_rows(sims, off)
    w = positive_weights(y, off)
    return T.scale(T.sum_all(T.mul(logp, T.constant(w))), -1.0 / b)


def mlm_loss(mask_logits: Tensor, labels, label_word_ids) -> Tensor:
    """Mean negative log-likelihood of the gold label word over the full vocabulary."""
    y = np.asarray(labels, dtype=np.int64)
    words = np.asarray(label_word_ids, dtype=np.int64)
    if y.shape != (mask_logits.shape[0],):
        raise ContractError("mlm_loss: one label per example required")
    if np.any(y < 0) or np.any(y >= len(words)):
        raise ContractError(f"mlm_loss: labels must lie in [0, {len(words)})")
    if np.any(words >= mask_logits.shape[1]):
        raise ContractError("mlm_loss: label word outside the vocabulary")
    logp = T.log_softmax_rows(mask_logits)
    return T.scale(T.sum_all(T.pick(logp, words[y])), -1.0 / len(y))


def contrastive_term(pooled: Tensor | None, labels, tau: float, variant: str) -> Tensor:
    """SupCon on a forward pass's pooled states; wo_cl has none to offer."""
    if variant == "wo_cl" or pooled is None:
        raise ContractError(f"variant {variant!r} has no contrastive head")
    return supcon_loss(pooled, labels, tau)


def total_loss(l_mlm: Tensor, l_cl: Tensor | None) -> LossBundle:
    if l_cl is None:
        l_cl = T.constant(0.0)
    return LossBundle(l_cl=l_cl, l_mlm=l_mlm, l_total=T.add(l_mlm, l_cl))
