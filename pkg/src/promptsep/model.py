"""Prompt-separated classifier.

Text (hard template spliced with the input) goes through a frozen toy
encoder and one trainable self-attention layer; the mask-position state is
scored against the tied embedding table.  The soft prompt never enters that
path: it only queries the trainable encoder's states through one
cross-attention layer, and the pooled result feeds the contrastive head.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError, TemplateError, VocabularyError
from .tensor import Tensor

VARIANTS = ("full", "wo_cl", "wo_gd", "wo_sp", "wo_hp")
INIT_STRATEGIES = ("random", "label", "vocab", "top1k", "task")
CHECKPOINT_SCHEMA = 1

_LAYER_KEYS = ("wq", "wk", "wv", "wo", "bo", "ln1_g", "ln1_b",
               "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 128
    max_seq_len: int = 32
    embed_dim: int = 32
    prompt_len: int = 10
    frozen_depth: int = 2
    num_classes: int = 2
    mask_token_id: int = 1
    pad_token_id: int = 0
    temperature: float = 0.1
    label_word_ids: tuple[int, ...] = (2, 3)
    ffn_dim: int | None = None   # 4 * embed_dim
    init_std: float | None = None
    backbone_seed: int = 0
    embedding_std: float = 1.0
    position_std: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "label_word_ids", tuple(int(i) for i in self.label_word_ids))
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.embed_dim)
        if self.prompt_len < 1:
            raise ContractError("prompt_len must be >= 1")
        if self.embed_dim < 2:
            raise ContractError("embed_dim must be >= 2")
        if self.mask_token_id == self.pad_token_id:
            raise ContractError("mask and pad tokens must differ")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        ids = self.label_word_ids
        if len(ids) != self.num_classes:
            raise ContractError("need exactly one label word per class")
        if len(set(ids)) != len(ids) or any(not 0 <= i < self.vocab_size for i in ids):
            raise ContractError(f"label words {ids} must be distinct ids below {self.vocab_size}")

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ModelState:
    """All parameter groups.  ``backbone`` is frozen and also serves as lm_head."""

    config: ModelConfig
    backbone: dict[str, Tensor]
    sem: dict[str, Tensor]
    gen: dict[str, Tensor]
    soft_prompt: Tensor

    @property
    def embeddings(self) -> Tensor:
        return self.backbone["tok_emb"]

    @property
    def lm_head(self) -> Tensor:
        """(d, V) projection tied to the token embedding table."""
        return Tensor(self.embeddings.data.T)

    def trainable(self) -> dict[str, Tensor]:
        out = {f"sem.{k}": v for k, v in self.sem.items()}
        out.update({f"gen.{k}": v for k, v in self.gen.items()})
        out["soft_prompt"] = self.soft_prompt
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.items()}
        out.update(self.trainable())
        return out

    def zero_grad(self) -> None:
        for p in self.trainable().values():
            p.zero_grad()

    def clone(self) -> ModelState:
        def dup(group):
            return {k: _as_param(v.data.copy(), v.requires_grad) for k, v in group.items()}

        return ModelState(self.config, dup(self.backbone), dup(self.sem), dup(self.gen),
                          _as_param(self.soft_prompt.data.copy(), True))

    def load_trainable(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self.trainable().items():
            np.copyto(p.data, values[name])

    def snapshot_trainable(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.trainable().items()}

    def checksum(self, group: str = "backbone") -> str:
        params = {"backbone": self.backbone, "sem": self.sem, "gen": self.gen,
                  "soft_prompt": {"p": self.soft_prompt}}[group]
        h = hashlib.sha256()
        for k in sorted(params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(params[k].data).tobytes())
        return h.hexdigest()


def _as_param(arr: np.ndarray, trainable: bool) -> Tensor:
    return Tensor(arr, requires_grad=trainable)


def _init_layer(rng: np.random.Generator, d: int, f: int, trainable: bool,
                std: float | None = None) -> dict[str, Tensor]:
    s = 1.0 / math.sqrt(d) if std is None else std
    raw = {
        "wq": rng.normal(0.0, s, (d, d)),
        "wk": rng.normal(0.0, s, (d, d)),
        "wv": rng.normal(0.0, s, (d, d)),
        "wo": rng.normal(0.0, s, (d, d)),
        "bo": np.zeros(d),
        "ln1_g": np.ones(d),
        "ln1_b": np.zeros(d),
        "w1": rng.normal(0.0, s, (d, f)),
        "b1": np.zeros(f),
        "w2": rng.normal(0.0, 1.0 / math.sqrt(f) if std is None else std, (f, d)),
        "b2": np.zeros(d),
        "ln2_g": np.ones(d),
        "ln2_b": np.zeros(d),
    }
    return {k: _as_param(raw[k], trainable) for k in _LAYER_KEYS}


def init_backbone(config: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.backbone_seed)
    d, V, o = config.embed_dim, config.vocab_size, config.max_seq_len
    out = {
        "tok_emb": _as_param(rng.normal(0.0, config.embedding_std, (V, d)), False),
        "pos_emb": _as_param(rng.normal(0.0, config.position_std, (o, d)), False),
    }
    for i in range(config.frozen_depth):
        layer = _init_layer(rng, d, config.ffn_dim, trainable=False)
        out.update({f"layer{i}.{k}": v for k, v in layer.items()})
    return out


def init_model(config: ModelConfig, seed: int, strategy: str = "random", task=None,
               backbone: dict[str, Tensor] | None = None) -> ModelState:
    """Fresh trainable groups from ``seed`` on top of the (shared) frozen backbone."""
    if backbone is None:
        backbone = init_backbone(config)
    ss = np.random.SeedSequence(seed)
    sem_ss, gen_ss, prompt_ss = ss.spawn(3)
    d, f = config.embed_dim, config.ffn_dim
    sem = _init_layer(np.random.default_rng(sem_ss), d, f, True, config.init_std)
    gen = _init_layer(np.random.default_rng(gen_ss), d, f, True, config.init_std)
    prompt = init_soft_prompt(strategy, config, task, prompt_ss, backbone["tok_emb"].data)
    return ModelState(config, backbone, sem, gen, _as_param(prompt, True))


def init_soft_prompt(strategy: str, config: ModelConfig, task, seed,
                     table: np.ndarray) -> np.ndarray:
    """Initial (l, d) soft prompt.

    random: i.i.d. N(0, 0.02^2).  label: label-word embeddings cycled to length
    l.  vocab / top1k / task: embeddings of l tokens drawn uniformly from the
    whole vocabulary, the min(1000, V) most frequent corpus tokens, or the
    tokens seen in the training split.
    """
    rng = np.random.default_rng(seed)
    l, d, V = config.prompt_len, config.embed_dim, config.vocab_size
    if strategy == "random":
        return rng.normal(0.0, 0.02, (l, d))
    if strategy == "label":
        ids = [config.label_word_ids[i % len(config.label_word_ids)] for i in range(l)]
        return table[np.array(ids)].copy()
    if strategy == "vocab":
        return table[rng.integers(0, V, size=l)].copy()
    if strategy == "top1k":
        if task is None:
            raise ContractError("top1k initialization needs a task corpus")
        counts = np.bincount(task.corpus_tokens(), minlength=V)[:V]
        order = np.argsort(-counts, kind="stable")
        pool = order[: min(1000, V)]
        pool = pool[counts[pool] > 0]
        return table[rng.choice(pool, size=l)].copy()
    if strategy == "task":
        if task is None:
            raise ContractError("task initialization needs a task")
        pool = np.unique(task.train_tokens())
        if pool.size == 0:
            raise ContractError("task initialization: training split is empty")
        return table[rng.choice(pool, size=l)].copy()
    raise ContractError(f"unknown init strategy {strategy!r}; expected one of {INIT_STRATEGIES}")


# ---------------------------------------------------------------- batches


@dataclass
class TextBatch:
    """Tokenized [template, input] sequences, optionally with cached frozen encodings."""

    token_ids: np.ndarray
    attention_mask: np.ndarray
    mask_positions: np.ndarray
    labels: np.ndarray | None = None
    embeddings: np.ndarray | None = None

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def subset(self, idx) -> TextBatch:
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return TextBatch(self.token_ids[idx], self.attention_mask[idx],
                         self.mask_positions[idx], pick(self.labels), pick(self.embeddings))


class ForwardOutput(NamedTuple):
    label_logits: Tensor
    mask_logits: Tensor
    pooled: Tensor | None


# ----------------------------------------------------------------- layers


def attention_core(q_in: Tensor, kv_in: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                   key_mask: np.ndarray, shared_query: bool = False) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V for one head.

    ``q_in`` is (b, n, d), or (n, d) with ``shared_query`` when one query set
    serves the whole batch.  ``kv_in`` is (b, o, d); ``key_mask`` (b, o) marks
    valid keys.  Returns (output, attention weights).
    """
    b = kv_in.shape[0]
    q = T.matmul(q_in, wq)
    if shared_query:
        q = T.expand(q, b)
    k = T.matmul(kv_in, wk)
    v = T.matmul(kv_in, wv)
    dk = wk.shape[1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dk))
    weights = T.softmax_rows(scores, np.asarray(key_mask, dtype=bool)[:, None, :])
    return T.matmul(weights, v), weights


def ffn_hidden(h: Tensor, p: dict[str, Tensor]) -> Tensor:
    return T.gelu(T.add(T.matmul(h, p["w1"]), p["b1"]))


def ffn_output(h: Tensor, hidden: Tensor, p: dict[str, Tensor], eps: float) -> Tensor:
    out = T.add(T.matmul(hidden, p["w2"]), p["b2"])
    return T.layer_norm(T.add(h, out), p["ln2_g"], p["ln2_b"], eps)


def ffn_block(h: Tensor, p: dict[str, Tensor], eps: float) -> Tensor:
    """Position-wise GELU feed-forward, residual, then layer norm."""
    return ffn_output(h, ffn_hidden(h, p), p, eps)


def attention_block(queries: Tensor, memory: Tensor, p: dict[str, Tensor], key_mask: np.ndarray,
                    eps: float) -> Tensor:
    """Attention, output projection, residual onto the queries, then layer norm.

    A 2-D ``queries`` is one (n, d) set shared by every example of ``memory``.
    """
    shared = queries.data.ndim == 2
    attn, _ = attention_core(queries, memory, p["wq"], p["wk"], p["wv"], key_mask,
                             shared_query=shared)
    proj = T.add(T.matmul(attn, p["wo"]), p["bo"])
    resid = T.expand(queries, memory.shape[0]) if shared else queries
    return T.layer_norm(T.add(resid, proj), p["ln1_g"], p["ln1_b"], eps)


def encoder_layer(x: Tensor, p: dict[str, Tensor], key_mask: np.ndarray, eps: float) -> Tensor:
    """Post-LN self-attention layer with a feed-forward block."""
    return ffn_block(attention_block(x, x, p, key_mask, eps), p, eps)


def encoder_layer_rows(x: Tensor, p: dict[str, Tensor], key_mask: np.ndarray, eps: float,
                       positions) -> Tensor:
    """:func:`encoder_layer` evaluated only at one query row per example.

    Keys and values still span every valid position; returns (b, d).
    """
    b, _, d = x.shape
    xq = T.reshape(T.take_positions(x, positions), (b, 1, d))
    return T.reshape(ffn_block(attention_block(xq, x, p, key_mask, eps), p, eps), (b, d))


def decoder_layer(queries: Tensor, memory: Tensor, p: dict[str, Tensor],
                  key_mask: np.ndarray, eps: float) -> Tensor:
    """Cross-attention only (no self-attention among queries), then FFN.

    ``queries`` is either a shared (l, d) prompt or per-example (b, n, d).
    """
    return ffn_block(attention_block(queries, memory, p, key_mask, eps), p, eps)


# -------------------------------------------------------------- operations


def encode_ids(model: ModelState, token_ids: np.ndarray, attention_mask: np.ndarray) -> np.ndarray:
    """Frozen backbone over already-tokenized ids; returns E_se as a plain array."""
    cfg = model.config
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] > cfg.max_seq_len:
        raise ShapeError(f"token ids must be (b, <= {cfg.max_seq_len}), got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise VocabularyError(f"token id outside vocabulary of size {cfg.vocab_size}")
    bb = model.backbone
    with T.no_grad():
        x = T.embedding(bb["tok_emb"], ids)
        x = T.add(x, T.expand(T.narrow(bb["pos_emb"], 0, 0, ids.shape[1]), ids.shape[0]))
        for i in range(cfg.frozen_depth):
            layer = {k: bb[f"layer{i}.{k}"] for k in _LAYER_KEYS}
            x = encoder_layer(x, layer, attention_mask, cfg.ln_eps)
    return x.data


def encode_text(model: ModelState, template: Sequence[int], inputs: Sequence[Sequence[int]]) -> TextBatch:
    """Tokenize ``[template, x]`` for each input and attach frozen encodings."""
    from .taskgen import tokenize_batch

    batch = tokenize_batch(inputs, model.config, template)
    batch.embeddings = encode_ids(model, batch.token_ids, batch.attention_mask)
    return batch


def _embedded(model: ModelState, batch: TextBatch) -> np.ndarray:
    if batch.embeddings is None:
        batch.embeddings = encode_ids(model, batch.token_ids, batch.attention_mask)
    return batch.embeddings


def sem_encode(model: ModelState, e_se: Tensor, attention_mask: np.ndarray) -> Tensor:
    mask = np.asarray(attention_mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ContractError("sem_encode: an example has every position padded")
    return encoder_layer(e_se, model.sem, mask, model.config.ln_eps)


def gen_decode(model: ModelState, prompt: Tensor, h_se: Tensor, attention_mask: np.ndarray) -> Tensor:
    d = model.config.embed_dim
    if prompt.shape[-1] != d or h_se.shape[-1] != d:
        raise ShapeError(f"gen_decode: prompt {prompt.shape} / states {h_se.shape} vs d={d}")
    return decoder_layer(prompt, h_se, model.gen, np.asarray(attention_mask, dtype=bool),
                         model.config.ln_eps)


def pool_prompt(h_sp: Tensor) -> Tensor:
    return T.mean_along(h_sp, axis=1)


def verbalize(model: ModelState, h_se: Tensor, mask_positions) -> tuple[Tensor, Tensor]:
    """(label_logits, full-vocabulary mask logits)."""
    pos = np.asarray(mask_positions)
    if np.any(pos < 0) or np.any(pos >= h_se.shape[1]):
        raise ContractError(f"mask position out of range for sequence length {h_se.shape[1]}")
    return _score_mask_states(model, T.take_positions(h_se, pos))


def _score_mask_states(model: ModelState, hm: Tensor) -> tuple[Tensor, Tensor]:
    z = T.matmul(hm, model.lm_head)
    return T.take_columns(z, model.config.label_word_ids), z


def forward(model: ModelState, batch: TextBatch, variant: str = "full",
            with_pooled: bool = True) -> ForwardOutput:
    """One pass of the chosen dataflow.

    ``wo_hp`` expects batches tokenized with the bare mask template (see
    :func:`template_for`).  ``with_pooled=False`` skips the contrastive branch,
    which is what evaluation does.
    """
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg = model.config
    mask = np.asarray(batch.attention_mask, dtype=bool)
    e_se = Tensor(_embedded(model, batch))
    pos = np.asarray(batch.mask_positions)
    if variant == "wo_hp" and np.any(pos != 0):
        raise TemplateError("wo_hp batches must start with a bare mask token")

    if variant == "wo_gd":
        l = cfg.prompt_len
        b = len(batch)
        x = T.concat([T.expand(model.soft_prompt, b), e_se], axis=1)
        ext = np.concatenate([np.ones((b, l), dtype=bool), mask], axis=1)
        if not with_pooled:
            return ForwardOutput(*_mask_row_logits(model, x, ext, pos + l), None)
        h = sem_encode(model, x, ext)
        label_logits, z = verbalize(model, h, pos + l)
        return ForwardOutput(label_logits, z, pool_prompt(T.narrow(h, 1, 0, l)))

    if not with_pooled or variant == "wo_cl":
        return ForwardOutput(*_mask_row_logits(model, e_se, mask, pos), None)
    h_se = sem_encode(model, e_se, mask)
    label_logits, z = verbalize(model, h_se, pos)
    if variant == "wo_sp":
        pooled = T.masked_mean(gen_decode(model, h_se, h_se, mask), mask)
    else:
        pooled = pool_prompt(gen_decode(model, model.soft_prompt, h_se, mask))
    return ForwardOutput(label_logits, z, pooled)


def _mask_row_logits(model: ModelState, x: Tensor, mask: np.ndarray, pos) -> tuple[Tensor, Tensor]:
    if not mask.any(axis=1).all():
        raise ContractError("sem_encode: an example has every position padded")
    if np.any(pos < 0) or np.any(pos >= x.shape[1]):
        raise ContractError(f"mask position out of range for sequence length {x.shape[1]}")
    hm = encoder_layer_rows(x, model.sem, mask, model.config.ln_eps, pos)
    return _score_mask_states(model, hm)


def template_for(variant: str, template: Sequence[int], config: ModelConfig) -> tuple[int, ...]:
    if variant == "wo_hp":
        return (config.mask_token_id,)
    return tuple(template)


def predict(label_logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class.
    return np.argmax(label_logits, axis=1)


# ------------------------------------------------------------- checkpoints


def save_checkpoint(model: ModelState, path) -> None:
    """JSON lines: a header with the schema version and config, then one
    parameter per line with its row-major values."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema_version": CHECKPOINT_SCHEMA, "config": asdict(model.config)}
        fh.write(json.dumps(header) + "\n")
        for name, p in model.named_parameters().items():
            rec = {"name": name, "shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            fh.write(json.dumps(rec) + "\n")


def load_checkpoint(path) -> ModelState:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema_version") != CHECKPOINT_SCHEMA:
            raise ContractError(f"{path}: unsupported checkpoint schema {header.get('schema_version')}")
        cfg = header["config"]
        cfg["label_word_ids"] = tuple(cfg["label_word_ids"])
        config = ModelConfig.from_dict(cfg)
        arrays = {}
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                arrays[rec["name"]] = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
    groups: dict[str, dict[str, Tensor]] = {"backbone": {}, "sem": {}, "gen": {}}
    prompt = None
    for name, arr in arrays.items():
        if name == "soft_prompt":
            prompt = _as_param(arr, True)
            continue
        group, key = name.split(".", 1)
        groups[group][key] = _as_param(arr, group != "backbone")
    if prompt is None:
        raise ContractError(f"{path}: checkpoint has no soft_prompt")
    return ModelState(config, groups["backbone"], groups["sem"], groups["gen"], prompt)
