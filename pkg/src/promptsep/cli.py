"""Command-line entry point.

Every subcommand writes into ``--out-dir``.  On failure the last line on
stderr is a single JSON object ``{"error": <type>, "message": <text>}`` and the
exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import ContractError
from .harness import (ExperimentPlan, emit_csv, run_ablation, run_length_sweep, run_stability_hard,
                      run_stability_soft)
from .model import VARIANTS, ModelConfig, load_checkpoint, save_checkpoint
from .taskgen import build_templates, generate_task, load_task, split_batch
from .trainer import TrainConfig, fresh_model, train

EXIT_ERROR = 2


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ContractError(f"{path}: config must be a JSON object")
    return data


def _split_config(cfg: dict) -> tuple[dict, dict, dict]:
    """Route flat config keys to TrainConfig, ModelConfig and ExperimentPlan fields."""
    train_keys = set(TrainConfig.__dataclass_fields__)
    model_keys = set(ModelConfig.__dataclass_fields__) - {"vocab_size", "num_classes", "label_word_ids",
                                                          "mask_token_id", "pad_token_id", "temperature"}
    plan_keys = set(ExperimentPlan.__dataclass_fields__) - {"train", "model"}
    unknown = set(cfg) - train_keys - model_keys - plan_keys
    if unknown:
        raise ContractError(f"unknown config keys: {sorted(unknown)}")
    pick = lambda keys: {k: v for k, v in cfg.items() if k in keys}
    return pick(train_keys), pick(model_keys), pick(plan_keys)


def _plan(args, defaults: dict) -> ExperimentPlan:
    train_cfg, model_cfg, plan_cfg = _split_config(_load_config(args.config))
    base = {**defaults, **plan_cfg}
    for flag in ("variants", "strategies", "template_ids", "prompt_lens", "seeds", "noise_level",
                 "task_seed"):
        val = getattr(args, flag, None)
        if val is not None:
            base[flag] = val
    train_cfg.pop("seed", None)
    base.update(master_seed=args.seed, out_dir=args.out_dir, train=train_cfg, model=model_cfg)
    return ExperimentPlan.from_dict(base)


def _emit(table, plan: ExperimentPlan, name: str) -> dict:
    path = emit_csv(table, Path(plan.out_dir) / f"{name}.csv", plan)
    summary = [a for a in table.aggregates() if a["level"] in ("across", "variant")]
    return {"csv": str(path), "aggregates": summary}


def cmd_gen_task(args) -> dict:
    task = generate_task(2, args.noise_level, args.task_seed if args.task_seed is not None else args.seed)
    out = task.save(Path(args.out_dir) / "task")
    return {"task_dir": str(out), "sizes": list(task.sizes)}


def _task_for(args):
    if args.task_dir:
        return load_task(args.task_dir)
    return generate_task(2, args.noise_level, args.task_seed if args.task_seed is not None else 0)


def cmd_train(args) -> dict:
    train_cfg, model_cfg, _ = _split_config(_load_config(args.config))
    train_cfg.update(seed=args.seed)
    for flag, key in (("variant", "variant"), ("strategy", "init_strategy"), ("template_id", "template_id"),
                      ("epochs", "epochs")):
        val = getattr(args, flag)
        if val is not None:
            train_cfg[key] = val
    cfg = TrainConfig.from_dict(train_cfg)
    task = _task_for(args)
    model = fresh_model(task, cfg, model_cfg)
    model, hist = train(model, task, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.json").write_text(hist.to_json() + "\n")
    save_checkpoint(model, out / "checkpoint.jsonl")
    return {"test_accuracy": hist.test_accuracy, "selected_epoch": hist.selected_epoch,
            "history": str(out / "history.json"), "checkpoint": str(out / "checkpoint.jsonl")}


def cmd_stability_soft(args) -> dict:
    plan = _plan(args, {"strategies": ["random", "label", "vocab", "top1k", "task"]})
    return _emit(run_stability_soft(plan, args.workers), plan, "stability_soft")


def cmd_stability_hard(args) -> dict:
    plan = _plan(args, {"template_ids": list(range(6))})
    return _emit(run_stability_hard(plan, args.workers), plan, "stability_hard")


def cmd_ablate(args) -> dict:
    plan = _plan(args, {"variants": list(VARIANTS)})
    return _emit(run_ablation(plan, args.workers), plan, "ablation")


def cmd_sweep_length(args) -> dict:
    plan = _plan(args, {"variants": ["full"], "prompt_lens": [5, 10, 20, 50]})
    return _emit(run_length_sweep(plan, args.workers), plan, "length_sweep")


def cmd_export_embeddings(args) -> dict:
    from .metrics import dump_embeddings, write_dump, write_summary

    train_cfg, model_cfg, _ = _split_config(_load_config(args.config))
    cfg = TrainConfig.from_dict({**train_cfg, "seed": args.seed,
                                 **({"variant": args.variant} if args.variant else {})})
    task = _task_for(args)
    if args.checkpoint:
        model, phase = load_checkpoint(args.checkpoint), "after_tuning"
    else:
        model, phase = fresh_model(task, cfg, model_cfg), "before_tuning"
    from .model import template_for

    tpl = template_for(cfg.variant, build_templates(max(6, cfg.template_id + 1),
                                                    cfg.template_style_seed)[cfg.template_id].tokens,
                       model.config)
    batch = split_batch(task, args.split, model.config, tpl)
    dump = dump_embeddings(model, batch, phase, cfg.variant, run_id=f"seed{args.seed}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_dump(dump, out / f"embeddings_{phase}.csv")
    summary = dump.summary(args.seed)
    write_summary([summary], out / f"metrics_{phase}.json")
    return {"csv": str(csv_path), **summary}


def cmd_grad_check(args) -> dict:
    from .diagnostics import check_seed

    results = [check_seed(s) for s in range(args.seed, args.seed + args.num_seeds)]
    worst = max(r.max_rel_error for r in results)
    report = {"max_rel_error": worst, "passed": worst < args.tolerance,
              "per_seed": [asdict(r) for r in results]}
    if not report["passed"]:
        raise ContractError(f"gradient check failed: max relative error {worst:.3e} >= {args.tolerance}")
    return report


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _str_list(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Subcommands repeat the global flags with suppressed defaults so a value
    # given before the subcommand is not overwritten by the subparser default.
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None),
                   help="JSON file of TrainConfig / ModelConfig / ExperimentPlan fields")
    p.add_argument("--seed", type=int, default=d(0), help="run seed, or master seed for plans")
    p.add_argument("--out-dir", default=d("results"))
    p.add_argument("--workers", type=int, default=d(1))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="promptsep", description=__doc__.splitlines()[0],
                                     parents=[_global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    def task_flags(p):
        p.add_argument("--noise-level", type=float, default=0.0)
        p.add_argument("--task-seed", type=int)
        p.add_argument("--task-dir", help="load a task saved by gen-task instead of generating one")

    p = sub.add_parser("gen-task", parents=[common], help="generate and save a synthetic task")
    p.add_argument("--noise-level", type=float, default=0.0)
    p.add_argument("--task-seed", type=int)
    p.set_defaults(func=cmd_gen_task)

    p = sub.add_parser("train", parents=[common], help="train one model")
    task_flags(p)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--strategy")
    p.add_argument("--template-id", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    plans = (("stability-soft", cmd_stability_soft, "accuracy spread across soft-prompt inits"),
             ("stability-hard", cmd_stability_hard, "accuracy spread across hard templates"),
             ("ablate", cmd_ablate, "all five variants over seeds"),
             ("sweep-length", cmd_sweep_length, "full variant over prompt lengths"))
    for name, func, text in plans:
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--noise-level", type=float)
        p.add_argument("--task-seed", type=int)
        p.add_argument("--variants", type=_str_list)
        p.add_argument("--strategies", type=_str_list)
        p.add_argument("--template-ids", type=_int_list)
        p.add_argument("--prompt-lens", type=_int_list)
        p.add_argument("--seeds", type=_int_list)
        p.set_defaults(func=func)

    p = sub.add_parser("export-embeddings", parents=[common],
                       help="dump pooled prompt embeddings and separability metrics")
    task_flags(p)
    p.add_argument("--checkpoint", help="trained checkpoint; omit for the before-tuning state")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the total loss")
    p.add_argument("--num-seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except Exception as exc:   # every failure becomes one parsable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
