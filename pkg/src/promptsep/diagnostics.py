"""Gradient checks of the total loss on small random problems."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import (ModelConfig, ModelState, TextBatch, attention_block, encode_ids, ffn_hidden, ffn_output,
                    forward, init_model, pool_prompt, verbalize)
from .objectives import mlm_loss, supcon_loss, total_loss


@dataclass
class GradCheckResult:
    seed: int
    max_rel_error: float
    num_entries: int
    seconds: float


def micro_problem(seed: int, b: int = 4, o: int = 16, d: int = 16, l: int = 4,
                  variant: str = "full") -> tuple[ModelState, TextBatch]:
    """Random model and micro-batch: random template/input ids, a random mask
    slot, padded tails and balanced labels so every anchor has a positive.

    The soft prompt is drawn from N(0, 1) rather than the small training-time
    init: near-zero decoder queries shrink the decoder's query/key gradients
    toward the finite-difference roundoff floor, which would test float64
    cancellation instead of the backward pass.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(max_seq_len=o, embed_dim=d, prompt_len=l, backbone_seed=seed)
    model = init_model(cfg, seed, "random")
    model.soft_prompt.data[...] = rng.normal(0.0, 1.0, model.soft_prompt.shape)
    ids = rng.integers(2, cfg.vocab_size, size=(b, o))
    lengths = rng.integers(o // 2, o + 1, size=b)
    valid = np.arange(o)[None, :] < lengths[:, None]
    ids[~valid] = cfg.pad_token_id
    pos = np.array([rng.integers(0, n) for n in lengths])
    if variant == "wo_hp":
        pos[:] = 0
    ids[np.arange(b), pos] = cfg.mask_token_id
    labels = rng.permutation(np.arange(b) % 2)
    batch = TextBatch(ids, valid, pos, labels)
    batch.embeddings = encode_ids(model, ids, valid)
    return model, batch


def loss_fn(model: ModelState, batch: TextBatch, variant: str = "full"):
    def f():
        out = forward(model, batch, variant)
        l_cl = None if out.pooled is None else supcon_loss(out.pooled, batch.labels,
                                                           model.config.temperature)
        l_mlm = mlm_loss(out.mask_logits, batch.labels, model.config.label_word_ids)
        return total_loss(l_mlm, l_cl).l_total

    return f


def staged_evaluators(model: ModelState, batch: TextBatch) -> dict[str, object]:
    """Per-parameter loss functions for the full variant that skip unaffected work.

    The full dataflow is a chain of six stages: semantic attention, semantic
    feed-forward hidden layer, semantic feed-forward output, then the same
    three for the decoder.  A parameter can only change its own stage and
    those after it, so earlier stage outputs are computed once at the
    unperturbed point and reused.  Each evaluator runs the same ops in the same
    order as :func:`loss_fn`, so its value is bitwise identical;
    ``finite_difference`` checks this.
    """
    cfg, eps = model.config, model.config.ln_eps
    mask = np.asarray(batch.attention_mask, dtype=bool)
    e_se = T.Tensor(batch.embeddings)
    sem, gen = model.sem, model.gen

    def text_tail(h1, hidden):
        h_se = ffn_output(h1, hidden, sem, eps)
        _, z = verbalize(model, h_se, batch.mask_positions)
        return h_se, mlm_loss(z, batch.labels, cfg.label_word_ids)

    def prompt_tail(g1, hidden, l_mlm):
        pooled = pool_prompt(ffn_output(g1, hidden, gen, eps))
        return total_loss(l_mlm, supcon_loss(pooled, batch.labels, cfg.temperature)).l_total

    def from_text(h1, hidden=None):
        h_se, l_mlm = text_tail(h1, ffn_hidden(h1, sem) if hidden is None else hidden)
        return from_prompt(h_se, l_mlm)

    def from_prompt(h_se, l_mlm, g1=None, hidden=None):
        g1 = attention_block(model.soft_prompt, h_se, gen, mask, eps) if g1 is None else g1
        return prompt_tail(g1, ffn_hidden(g1, gen) if hidden is None else hidden, l_mlm)

    with T.no_grad():
        h1 = attention_block(e_se, e_se, sem, mask, eps)
        s_hidden = ffn_hidden(h1, sem)
        h_se, l_mlm = text_tail(h1, s_hidden)
        g1 = attention_block(model.soft_prompt, h_se, gen, mask, eps)
        g_hidden = ffn_hidden(g1, gen)

    stages = {
        "sem_attention": lambda: from_text(attention_block(e_se, e_se, sem, mask, eps)),
        "sem_hidden": lambda: from_text(h1),
        "sem_output": lambda: from_text(h1, s_hidden),
        "gen_attention": lambda: from_prompt(h_se, l_mlm),
        "gen_hidden": lambda: from_prompt(h_se, l_mlm, g1),
        "gen_output": lambda: from_prompt(h_se, l_mlm, g1, g_hidden),
    }

    def stage_of(key: str) -> str:
        if key in ("w1", "b1"):
            return "hidden"
        if key in ("w2", "b2", "ln2_g", "ln2_b"):
            return "output"
        return "attention"

    out = {"soft_prompt": stages["gen_attention"]}
    for k in sem:
        out[f"sem.{k}"] = stages[f"sem_{stage_of(k)}"]
    for k in gen:
        out[f"gen.{k}"] = stages[f"gen_{stage_of(k)}"]
    return out


def check_seed(seed: int, variant: str = "full", **shape) -> GradCheckResult:
    """Max relative error over every trainable entry for one random micro-problem."""
    start = time.perf_counter()
    model, batch = micro_problem(seed, variant=variant, **shape)
    named = model.trainable()
    f = loss_fn(model, batch, variant)
    evaluators = None
    if variant == "full":
        staged = staged_evaluators(model, batch)
        evaluators = [staged[k] for k in named]
    a, n = T.finite_difference(f, list(named.values()), evaluators=evaluators)
    err = float(T.relative_errors(a, n).max())
    return GradCheckResult(seed, err, int(a.size), time.perf_counter() - start)
