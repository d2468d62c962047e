"""Experiment plans over (variant, strategy, template, prompt length, seed) and CSV reports.

Every plan cell is independently runnable.  A cell's training seed is derived
from ``(master_seed, seed)`` only, so the same seed gives the same trainable
initialization draw across variants, strategies and templates (paired
comparisons), and execution order cannot influence any result.
"""

from __future__ import annotations

import csv
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError
from .metrics import accuracy_stats
from .model import INIT_STRATEGIES, VARIANTS, init_backbone, init_model
from .taskgen import FewShotTask, build_templates, config_for_task, generate_task
from .trainer import PreparedSplits, TrainConfig, prepare_splits, train

ALLOWED_LENGTHS = (5, 10, 20, 50)
ROW_FIELDS = ("variant", "strategy", "template_id", "prompt_len", "seed",
              "test_accuracy", "selected_epoch", "wall_time")
AGG_FIELDS = ("level", "variant", "group", "n", "mean", "std")


def library_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:   # not installed as a distribution
        return "0.1.0"


@dataclass
class ExperimentPlan:
    """Cross product of the list fields; the task fields pin one task instance."""

    num_classes: int = 2
    noise_level: float = 0.15
    task_seed: int = 0
    sizes: tuple[int, int, int] = (64, 64, 512)
    variants: list[str] = field(default_factory=lambda: ["full", "wo_gd"])
    strategies: list[str] = field(default_factory=lambda: ["random"])
    template_ids: list[int] = field(default_factory=lambda: [0])
    prompt_lens: list[int] = field(default_factory=lambda: [10])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    master_seed: int = 0
    template_style_seed: int = 0
    out_dir: str = "results"
    train: dict = field(default_factory=dict)    # TrainConfig overrides
    model: dict = field(default_factory=dict)    # ModelConfig overrides

    def __post_init__(self):
        self.sizes = tuple(self.sizes)
        for name in ("variants", "strategies", "template_ids", "prompt_lens", "seeds"):
            vals = list(getattr(self, name))
            if not vals:
                raise ContractError(f"plan field {name} must be nonempty")
            setattr(self, name, vals)
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ContractError(f"unknown variants {bad}; expected a subset of {VARIANTS}")
        bad = [s for s in self.strategies if s not in INIT_STRATEGIES]
        if bad:
            raise ContractError(f"unknown init strategies {bad}; expected a subset of {INIT_STRATEGIES}")
        if any(l < 1 for l in self.prompt_lens):
            raise ContractError("prompt lengths must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentPlan:
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)

    def cells(self) -> list[Cell]:
        return [Cell(*c) for c in itertools.product(self.variants, self.strategies, self.template_ids,
                                                    self.prompt_lens, self.seeds)]

    def task_key(self) -> tuple:
        return (self.num_classes, self.noise_level, self.task_seed, self.sizes)

    def run_seed(self, seed: int) -> int:
        ss = np.random.SeedSequence([self.master_seed, seed])
        return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class Cell:
    variant: str
    strategy: str
    template_id: int
    prompt_len: int
    seed: int


@dataclass
class ResultsTable:
    """Raw per-run rows plus aggregates recomputed from them.

    Accuracies are stored rounded to 6 decimals, the precision written to CSV,
    so a parsed file reproduces the table and its aggregates exactly.
    """

    rows: list[dict] = field(default_factory=list)
    across: str = "strategy"    # the axis whose cell means feed the per-variant spread

    def add(self, row: dict) -> None:
        r = {k: row[k] for k in ROW_FIELDS}
        r["test_accuracy"] = round(float(r["test_accuracy"]), 6)
        r["wall_time"] = round(float(r["wall_time"]), 6)
        self.rows.append(r)

    def accuracies(self, **match) -> list[float]:
        return [r["test_accuracy"] for r in self.rows if all(r[k] == v for k, v in match.items())]

    def aggregates(self) -> list[dict]:
        """Per-cell (variant, axis value) mean/std over seeds, then per-variant
        std across the cell means and mean/std over all that variant's rows."""
        out = []
        variants = list(dict.fromkeys(r["variant"] for r in self.rows))
        for v in variants:
            vrows = [r for r in self.rows if r["variant"] == v]
            groups = list(dict.fromkeys(r[self.across] for r in vrows))
            means = []
            for g in groups:
                accs = [r["test_accuracy"] for r in vrows if r[self.across] == g]
                mean, std = _stats(accs)
                means.append(mean)
                out.append({"level": "cell", "variant": v, "group": f"{self.across}={g}",
                            "n": len(accs), "mean": mean, "std": std})
            spread = float(np.std(means, ddof=1)) if len(means) > 1 else 0.0
            out.append({"level": "across", "variant": v, "group": self.across,
                        "n": len(means), "mean": float(np.mean(means)), "std": spread})
            mean, std = _stats([r["test_accuracy"] for r in vrows])
            out.append({"level": "variant", "variant": v, "group": "all", "n": len(vrows),
                        "mean": mean, "std": std})
        return out

    def aggregate(self, level: str, variant: str, group: str | None = None) -> dict:
        for a in self.aggregates():
            if a["level"] == level and a["variant"] == variant and (group is None or a["group"] == group):
                return a
        raise KeyError((level, variant, group))


def _stats(accs: Sequence[float]) -> tuple[float, float]:
    if len(accs) >= 2:
        return accuracy_stats(accs)
    return float(accs[0]), 0.0


# ------------------------------------------------------------------ running


@lru_cache(maxsize=8)
def _task(key: tuple) -> FewShotTask:
    num_classes, noise, seed, (n_train, n_dev, n_test) = key
    return generate_task(num_classes, noise, seed, n_train, n_dev, n_test)


_PREPARED: dict = {}


def _prepared(plan: ExperimentPlan, model, task: FewShotTask, template, variant) -> PreparedSplits:
    # Frozen encodings depend on the task, template, variant and backbone only.
    key = (plan.task_key(), tuple(template), variant, json.dumps(plan.model, sort_keys=True))
    if key not in _PREPARED:
        if len(_PREPARED) > 32:
            _PREPARED.clear()
        _PREPARED[key] = prepare_splits(model, task, template, variant)
    return _PREPARED[key]


def train_config(plan: ExperimentPlan, cell: Cell) -> TrainConfig:
    base = dict(plan.train)
    base.update(seed=plan.run_seed(cell.seed), variant=cell.variant, init_strategy=cell.strategy,
                template_id=cell.template_id, template_style_seed=plan.template_style_seed)
    return TrainConfig.from_dict(base)


def run_cell(plan: ExperimentPlan, cell: Cell) -> dict:
    """Train one cell from scratch and return its raw row."""
    task = _task(plan.task_key())
    cfg = train_config(plan, cell)
    mcfg = config_for_task(task, temperature=cfg.temperature,
                           **{**plan.model, "prompt_len": cell.prompt_len})
    templates = build_templates(max(6, cell.template_id + 1), plan.template_style_seed, task.layout)
    model = init_model(mcfg, cfg.seed, cfg.init_strategy, task, _backbone(mcfg))
    prepared = _prepared(plan, model, task, templates[cell.template_id].tokens, cell.variant)
    model, hist = train(model, task, cfg, prepared)
    return {**asdict(cell), "test_accuracy": hist.test_accuracy,
            "selected_epoch": hist.selected_epoch, "wall_time": hist.wall_time}


_BACKBONES: dict = {}


def _backbone(mcfg):
    key = (mcfg.vocab_size, mcfg.max_seq_len, mcfg.embed_dim, mcfg.frozen_depth, mcfg.ffn_dim,
           mcfg.backbone_seed, mcfg.embedding_std, mcfg.position_std)
    if key not in _BACKBONES:
        _BACKBONES[key] = init_backbone(mcfg)
    return _BACKBONES[key]


def _run_one(args) -> dict:
    plan_dict, cell = args
    return run_cell(ExperimentPlan.from_dict(plan_dict), cell)


def run_plan(plan: ExperimentPlan, workers: int = 1, order: Iterable[int] | None = None,
             across: str = "strategy", cache: dict | None = None) -> ResultsTable:
    """Run every cell and return rows in canonical plan order.

    ``order`` permutes execution only.  ``cache`` maps a cell key to an
    already-computed row; it lets overlapping plans share runs.
    """
    cells = plan.cells()
    idx = list(range(len(cells))) if order is None else list(order)
    if sorted(idx) != list(range(len(cells))):
        raise ContractError("order must be a permutation of the plan cells")
    results: dict[int, dict] = {}
    todo = []
    for i in idx:
        key = _cache_key(plan, cells[i])
        if cache is not None and key in cache:
            results[i] = cache[key]
        else:
            todo.append(i)
    if workers > 1 and len(todo) > 1:
        plan_dict = plan.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, row in zip(todo, pool.map(_run_one, [(plan_dict, cells[i]) for i in todo])):
                results[i] = row
    else:
        for i in todo:
            results[i] = run_cell(plan, cells[i])
    if cache is not None:
        for i in todo:
            cache[_cache_key(plan, cells[i])] = results[i]
    table = ResultsTable(across=across)
    for i in range(len(cells)):
        table.add(results[i])
    return table


def _cache_key(plan: ExperimentPlan, cell: Cell) -> str:
    d = plan.to_dict()
    for k in ("variants", "strategies", "template_ids", "prompt_lens", "seeds", "out_dir"):
        d.pop(k)
    return json.dumps({"plan": d, "cell": asdict(cell)}, sort_keys=True)


def _require_variants(plan: ExperimentPlan, needed: Sequence[str]) -> None:
    missing = [v for v in needed if v not in plan.variants]
    if missing:
        raise ContractError(f"plan is missing required variants {missing}")


def run_stability_soft(plan: ExperimentPlan, workers: int = 1, cache: dict | None = None) -> ResultsTable:
    """Accuracy across soft-prompt initialization strategies (one template)."""
    _require_variants(plan, ("full", "wo_gd"))
    if len(plan.strategies) < 2:
        raise ContractError("stability over initializations needs >= 2 strategies")
    return run_plan(plan, workers, across="strategy", cache=cache)


def run_stability_hard(plan: ExperimentPlan, workers: int = 1, cache: dict | None = None) -> ResultsTable:
    """Accuracy across hard templates, with the soft prompt initialized randomly."""
    _require_variants(plan, ("full", "wo_gd"))
    if len(set(plan.template_ids)) < 6:
        raise ContractError("stability over hard prompts needs >= 6 templates")
    if plan.strategies != ["random"]:
        raise ContractError("stability over hard prompts fixes the soft init to 'random'")
    return run_plan(plan, workers, across="template_id", cache=cache)


def run_ablation(plan: ExperimentPlan, workers: int = 1, cache: dict | None = None) -> ResultsTable:
    if sorted(plan.variants) != sorted(VARIANTS):
        raise ContractError(f"ablation needs exactly the variants {VARIANTS}")
    return run_plan(plan, workers, across="variant", cache=cache)


def run_length_sweep(plan: ExperimentPlan, workers: int = 1, cache: dict | None = None) -> ResultsTable:
    if any(l < 1 for l in plan.prompt_lens):
        raise ContractError("prompt length must be >= 1")
    bad = [l for l in plan.prompt_lens if l not in ALLOWED_LENGTHS]
    if bad:
        raise ContractError(f"prompt lengths {bad} outside {ALLOWED_LENGTHS}")
    if plan.variants != ["full"]:
        raise ContractError("the length sweep runs the full variant only")
    return run_plan(plan, workers, across="prompt_len", cache=cache)


# ------------------------------------------------------------------- output


def _fmt_row(r: dict) -> list[str]:
    return [r["variant"], r["strategy"], str(r["template_id"]), str(r["prompt_len"]), str(r["seed"]),
            f"{r['test_accuracy']:.6f}", "" if r["selected_epoch"] is None else str(r["selected_epoch"]),
            f"{r['wall_time']:.6f}"]


def _fmt_agg(a: dict) -> list[str]:
    return [a["level"], a["variant"], a["group"], str(a["n"]), repr(a["mean"]), repr(a["std"])]


def sibling_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    return p.with_name(p.stem + "_aggregates.csv"), p.with_name(p.stem + "_manifest.json")


def emit_csv(table: ResultsTable, path, plan: ExperimentPlan | None = None) -> Path:
    """Raw rows at ``path``; aggregates and the manifest JSON alongside it."""
    out = Path(path)
    agg_path, man_path = sibling_paths(out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_rows(out, ROW_FIELDS, [_fmt_row(r) for r in table.rows])
        _write_rows(agg_path, AGG_FIELDS, [_fmt_agg(a) for a in table.aggregates()])
        manifest = {"version": library_version(), "across": table.across,
                    "plan": None if plan is None else plan.to_dict()}
        man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    return out


def _write_rows(path: Path, header: Sequence[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> ResultsTable:
    out = Path(path)
    _, man_path = sibling_paths(out)
    across = "strategy"
    if man_path.exists():
        across = json.loads(man_path.read_text())["across"]
    table = ResultsTable(across=across)
    with open(out, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ROW_FIELDS:
            raise ContractError(f"{out}: unexpected header {reader.fieldnames}")
        for r in reader:
            table.add({
                "variant": r["variant"], "strategy": r["strategy"], "template_id": int(r["template_id"]),
                "prompt_len": int(r["prompt_len"]), "seed": int(r["seed"]),
                "test_accuracy": float(r["test_accuracy"]),
                "selected_epoch": int(r["selected_epoch"]) if r["selected_epoch"] else None,
                "wall_time": float(r["wall_time"]),
            })
    return table


def read_aggregates(path) -> list[dict]:
    agg_path, _ = sibling_paths(path)
    with open(agg_path, newline="", encoding="utf-8") as fh:
        return [{"level": r["level"], "variant": r["variant"], "group": r["group"], "n": int(r["n"]),
                 "mean": float(r["mean"]), "std": float(r["std"])} for r in csv.DictReader(fh)]


def reproduce_row(manifest_path, row: dict) -> dict:
    """Re-run one raw row from a manifest in isolation."""
    man = json.loads(Path(manifest_path).read_text())
    plan = ExperimentPlan.from_dict(man["plan"])
    cell = Cell(row["variant"], row["strategy"], int(row["template_id"]), int(row["prompt_len"]),
                int(row["seed"]))
    return run_cell(plan, cell)
