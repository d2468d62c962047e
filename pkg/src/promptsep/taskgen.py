"""Synthetic few-shot binary classification tasks and hard templates.

Token ids are used directly; there is no text layer.  The vocabulary is
partitioned into special tokens, label words, a template pool, one signal
set per class and a distractor pool.  An example carries 2-4 signal tokens
from its class set (or, with probability ``noise_level``, from the other
class set) scattered among distractors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, TemplateError, VocabularyError
from .model import ModelConfig, TextBatch


@dataclass(frozen=True)
class VocabLayout:
    size: int = 128
    pad_id: int = 0
    mask_id: int = 1
    label_words: tuple[int, ...] = (2, 3)
    template_pool: tuple[int, int] = (4, 20)   # [start, stop)
    signal_size: int = 2
    signal_start: int = 20
    num_distractors: int | None = 4   # None: every remaining id

    def signal_set(self, c: int) -> np.ndarray:
        start = self.signal_start + c * self.signal_size
        return np.arange(start, start + self.signal_size)

    def distractors(self, num_classes: int) -> np.ndarray:
        start = self.signal_start + num_classes * self.signal_size
        stop = self.size if self.num_distractors is None else start + self.num_distractors
        return np.arange(start, min(stop, self.size))

    def template_tokens(self) -> np.ndarray:
        return np.arange(*self.template_pool)


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    label: int


@dataclass
class HardTemplate:
    tokens: tuple[int, ...]
    template_id: int


@dataclass
class FewShotTask:
    num_classes: int
    noise_level: float
    seed: int
    layout: VocabLayout
    train: list[Example]
    dev: list[Example]
    test: list[Example]
    sizes: tuple[int, int, int] = (64, 64, 512)
    label_word_ids: tuple[int, ...] = field(default=(2, 3))

    def corpus_tokens(self) -> np.ndarray:
        toks = [t for split in (self.train, self.dev, self.test) for ex in split for t in ex.tokens]
        return np.asarray(toks, dtype=np.int64)

    def train_tokens(self) -> np.ndarray:
        return np.asarray([t for ex in self.train for t in ex.tokens], dtype=np.int64)

    def split(self, name: str) -> list[Example]:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]

    def manifest(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "noise_level": self.noise_level,
            "seed": self.seed,
            "sizes": list(self.sizes),
            "layout": asdict(self.layout),
        }

    def save(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("train", "dev", "test"):
            with open(out / f"{name}.jsonl", "w", encoding="utf-8") as fh:
                for ex in self.split(name):
                    fh.write(json.dumps({"tokens": list(ex.tokens), "label": ex.label}) + "\n")
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return out


def _layout_from(d: dict) -> VocabLayout:
    return VocabLayout(**{**d, "label_words": tuple(d["label_words"]),
                          "template_pool": tuple(d["template_pool"])})


def load_task(directory) -> FewShotTask:
    src = Path(directory)
    man = json.loads((src / "manifest.json").read_text())
    layout = _layout_from(man["layout"])
    splits = {}
    for name in ("train", "dev", "test"):
        with open(src / f"{name}.jsonl", encoding="utf-8") as fh:
            splits[name] = [Example(tuple(r["tokens"]), int(r["label"]))
                            for r in map(json.loads, fh) if r]
    return FewShotTask(man["num_classes"], man["noise_level"], man["seed"], layout,
                       splits["train"], splits["dev"], splits["test"], tuple(man["sizes"]),
                       layout.label_words)


def task_from_manifest(manifest: dict) -> FewShotTask:
    """Regenerate a task exactly from its manifest."""
    n_train, n_dev, n_test = manifest["sizes"]
    return generate_task(manifest["num_classes"], manifest["noise_level"], manifest["seed"],
                         train_size=n_train, dev_size=n_dev, test_size=n_test,
                         layout=_layout_from(manifest["layout"]) if "layout" in manifest else None)


def generate_task(num_classes: int = 2, noise_level: float = 0.0, seed: int = 0,
                  train_size: int = 64, dev_size: int = 64, test_size: int = 512,
                  layout: VocabLayout | None = None) -> FewShotTask:
    if num_classes != 2:
        raise ContractError("only binary tasks are supported")
    if not 0.0 <= noise_level < 0.5:
        raise ContractError(f"noise_level must be in [0, 0.5), got {noise_level}")
    for n in (train_size, dev_size, test_size):
        if n % num_classes:
            raise ContractError(f"split size {n} is not divisible by {num_classes} classes")
    layout = layout or VocabLayout()
    if len(layout.distractors(num_classes)) < 1:
        raise VocabularyError("vocabulary leaves no room for distractor tokens")
    rng = np.random.default_rng(seed)
    signal = [layout.signal_set(c) for c in range(num_classes)]
    distract = layout.distractors(num_classes)
    seen: set[tuple[int, ...]] = set()

    def draw(label: int) -> Example:
        while True:
            length = int(rng.integers(8, 21))
            k = int(rng.integers(2, 5))
            source = label
            if rng.random() < noise_level:
                source = (label + 1 + int(rng.integers(0, num_classes - 1))) % num_classes
            toks = np.concatenate([rng.choice(signal[source], size=k),
                                   rng.choice(distract, size=length - k)])
            rng.shuffle(toks)
            key = tuple(int(t) for t in toks)
            if key not in seen:
                seen.add(key)
                return Example(key, label)

    def balanced(n: int) -> list[Example]:
        labels = np.repeat(np.arange(num_classes), n // num_classes)
        rng.shuffle(labels)
        return [draw(int(c)) for c in labels]

    train = balanced(train_size)
    dev = balanced(dev_size)
    test = balanced(test_size)
    return FewShotTask(num_classes, float(noise_level), seed, layout, train, dev, test,
                       (train_size, dev_size, test_size), layout.label_words)


def bag_of_words_predict(task: FewShotTask, tokens: Sequence[int]) -> int:
    """Class whose signal set is hit most often; ties go to the lowest class."""
    toks = np.asarray(tokens)
    hits = [np.isin(toks, task.layout.signal_set(c)).sum() for c in range(task.num_classes)]
    return int(np.argmax(hits))


def build_templates(n: int, style_seed: int = 0, layout: VocabLayout | None = None) -> list[HardTemplate]:
    """n distinct templates of 4-10 tokens, each with one mask at a varying slot."""
    if n < 1:
        raise ContractError("need at least one template")
    layout = layout or VocabLayout()
    pool = layout.template_tokens()
    rng = np.random.default_rng(style_seed)
    out: list[HardTemplate] = []
    seen: set[tuple[int, ...]] = set()
    while len(out) < n:
        length = int(rng.integers(4, 11))
        words = [int(w) for w in rng.choice(pool, size=length - 1)]
        words.insert(int(rng.integers(0, length)), layout.mask_id)
        key = tuple(words)
        if key in seen:
            continue
        seen.add(key)
        out.append(HardTemplate(key, len(out)))
    return out


def check_template(template: Sequence[int], mask_id: int, pad_id: int) -> int:
    """Return the mask index of a valid template."""
    toks = list(template)
    if toks.count(mask_id) != 1:
        raise TemplateError(f"template must contain exactly one mask token, got {toks.count(mask_id)}")
    if pad_id in toks:
        raise TemplateError("template must not contain pad tokens")
    return toks.index(mask_id)


def tokenize(tokens: Sequence[int], o: int, template: Sequence[int], pad_id: int = 0,
             mask_id: int = 1) -> tuple[np.ndarray, int, np.ndarray]:
    """Splice ``template ++ tokens``, truncate to o, pad.

    Returns (ids, mask index, validity mask).
    """
    mask_pos = check_template(template, mask_id, pad_id)
    if len(template) > o:
        raise TemplateError(f"template of length {len(template)} does not fit in {o} positions")
    seq = (list(template) + list(tokens))[:o]
    ids = np.full(o, pad_id, dtype=np.int64)
    ids[: len(seq)] = seq
    valid = np.zeros(o, dtype=bool)
    valid[: len(seq)] = True
    return ids, mask_pos, valid


def tokenize_batch(inputs: Sequence[Sequence[int]], config: ModelConfig, template: Sequence[int],
                   labels: Sequence[int] | None = None) -> TextBatch:
    rows = [tokenize(x, config.max_seq_len, template, config.pad_token_id, config.mask_token_id)
            for x in inputs]
    ids = np.stack([r[0] for r in rows])
    if ids.max() >= config.vocab_size:
        raise VocabularyError(f"token id {ids.max()} outside vocabulary of size {config.vocab_size}")
    return TextBatch(
        token_ids=ids,
        attention_mask=np.stack([r[2] for r in rows]),
        mask_positions=np.array([r[1] for r in rows], dtype=np.int64),
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
    )


def split_batch(task: FewShotTask, split: str, config: ModelConfig, template: Sequence[int]) -> TextBatch:
    exs = task.split(split)
    return tokenize_batch([e.tokens for e in exs], config, template, [e.label for e in exs])


def config_for_task(task: FewShotTask, **overrides) -> ModelConfig:
    lay = task.layout
    base = dict(vocab_size=lay.size, pad_token_id=lay.pad_id, mask_token_id=lay.mask_id,
                label_word_ids=lay.label_words, num_classes=task.num_classes)
    base.update(overrides)
    return ModelConfig(**base)
