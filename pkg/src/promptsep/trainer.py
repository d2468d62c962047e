"""AdamW training loop with dev-set model selection."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .model import VARIANTS, ModelState, TextBatch, forward, init_backbone, init_model, predict, template_for
from .objectives import contrastive_term, mlm_loss, total_loss
from .taskgen import FewShotTask, build_templates, split_batch
from .tensor import Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 8
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    variant: str = "full"
    init_strategy: str = "random"
    temperature: float = 0.1
    template_id: int = 0
    template_style_seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.variant != "wo_cl" and self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 when the contrastive loss is active")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float, weight_decay: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place AdamW update using each parameter's ``.grad``.

    Weight decay is decoupled: ``p *= 1 - lr * wd`` before the Adam step.
    """
    for name, p in params.items():
        if p.grad is None or not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite or missing gradient for parameter group {name!r}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class RunHistory:
    epochs: list[dict] = field(default_factory=list)
    selected_epoch: int | None = None
    test_accuracy: float | None = None
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time")
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True)


@dataclass
class PreparedSplits:
    """Tokenized, frozen-encoded splits for one (task, template, variant)."""

    template: tuple[int, ...]
    train: TextBatch
    dev: TextBatch
    test: TextBatch


def prepare_splits(model: ModelState, task: FewShotTask, template, variant: str = "full") -> PreparedSplits:
    from .model import encode_ids

    tpl = template_for(variant, template, model.config)
    out = {}
    for name in ("train", "dev", "test"):
        batch = split_batch(task, name, model.config, tpl)
        batch.embeddings = encode_ids(model, batch.token_ids, batch.attention_mask)
        out[name] = batch
    return PreparedSplits(tpl, out["train"], out["dev"], out["test"])


def default_template(config: TrainConfig) -> tuple[int, ...]:
    tpls = build_templates(max(6, config.template_id + 1), config.template_style_seed)
    return tpls[config.template_id].tokens


def evaluate(model: ModelState, batch: TextBatch, variant: str = "full") -> float:
    if len(batch) == 0:
        raise ContractError("cannot evaluate on an empty set")
    if batch.labels is None:
        raise ContractError("evaluation batch has no labels")
    with T.no_grad():
        out = forward(model, batch, variant, with_pooled=False)
    return float(np.mean(predict(out.label_logits.data) == batch.labels))


def batch_losses(model: ModelState, batch: TextBatch, variant: str, tau: float):
    out = forward(model, batch, variant)
    l_mlm = mlm_loss(out.mask_logits, batch.labels, model.config.label_word_ids)
    l_cl = None
    if variant != "wo_cl" and len(batch) >= 2:
        l_cl = contrastive_term(out.pooled, batch.labels, tau, variant)
    return total_loss(l_mlm, l_cl)


def train(model: ModelState, task: FewShotTask, config: TrainConfig,
          prepared: PreparedSplits | None = None,
          lr_schedule: Callable[[int, float], float] | None = None) -> tuple[ModelState, RunHistory]:
    """Train the trainable groups of ``model`` in place and return the dev-best state.

    ``lr_schedule(step, base_lr)`` overrides the constant learning rate.
    """
    if not task.train:
        raise ContractError("training split is empty")
    start = time.perf_counter()
    if prepared is None:
        prepared = prepare_splits(model, task, default_template(config), config.variant)
    params = model.trainable()
    opt = AdamWState()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(3,)))
    n = len(prepared.train)
    history = RunHistory(config=asdict(config))
    best_acc, best_state = -1.0, model.snapshot_trainable()
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n) if config.shuffle else np.arange(n)
        sums = np.zeros(3)
        nb = 0
        for s in range(0, n, config.batch_size):
            batch = prepared.train.subset(order[s:s + config.batch_size])
            losses = batch_losses(model, batch, config.variant, config.temperature)
            model.zero_grad()
            losses.l_total.backward()
            lr = config.learning_rate if lr_schedule is None else lr_schedule(opt.step, config.learning_rate)
            adamw_step(params, opt, lr, config.weight_decay, config.betas, config.eps)
            sums += losses.values()
            nb += 1
        dev_acc = evaluate(model, prepared.dev, config.variant)
        l_total, l_mlm, l_cl = sums / nb
        history.epochs.append({"epoch": epoch, "l_total": l_total, "l_mlm": l_mlm,
                               "l_cl": l_cl, "dev_accuracy": dev_acc})
        if dev_acc > best_acc:
            best_acc, best_state = dev_acc, model.snapshot_trainable()
            history.selected_epoch = epoch
    model.load_trainable(best_state)
    model.zero_grad()
    history.test_accuracy = evaluate(model, prepared.test, config.variant)
    history.wall_time = time.perf_counter() - start
    return model, history


def fresh_model(task: FewShotTask, config: TrainConfig, model_overrides: dict | None = None,
                backbone=None) -> ModelState:
    from .taskgen import config_for_task

    mcfg = config_for_task(task, temperature=config.temperature, **(model_overrides or {}))
    if backbone is None:
        backbone = init_backbone(mcfg)
    return init_model(mcfg, config.seed, config.init_strategy, task, backbone)
