"""Command-line entry point for reproducible experiments.

Subcommands: make-toy, sample, pretrain, train, ipet, distill, score,
eval, compare-decoding.  Every run directory receives a manifest (config
snapshot, seed, dataset hashes, artifact paths) sufficient to replay the
run; all randomness flows from the single --seed through named
sub-streams.

Values come from, in increasing precedence: built-in defaults, an INI
config file (sections [model], [train], [run]), explicit flags.  Errors
exit nonzero with one machine-parseable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

from . import __version__, rng
from .data import (
    Dataset,
    dataset_hash,
    evaluate,
    load_dataset,
    load_predictions,
    make_few_shot_splits,
    save_dataset,
    toy_kinds,
    write_toy_files,
)
from .mlm import TabularBackend, TinyTransformer, TinyTransformerConfig, load_checkpoint, save_checkpoint
from .pipeline import (
    EnsembleMember,
    GenerationPlan,
    PetSettings,
    checkpoint_loader,
    distill,
    ensemble_predict,
    ensemble_soft_label,
    run_ipet,
    run_pet,
    train_members,
    write_manifest,
)
from .pvp import TaskBundle, load_bundle
from .scoring import DecodingStrategy, score_example, table_to_json
from .training import TrainConfig, pretrain_mlm
from .vocab import Vocabulary


class CliError(RuntimeError):
    pass


def _read_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise CliError(f"config file not found: {path}")
    flat: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[f"{section}.{key}"] = value
    return flat


def _pick(args_value, config: dict[str, str], key: str, default, cast):
    if args_value is not None:
        return args_value
    if key in config:
        raw = config[key]
        return cast(raw) if cast is not bool else raw.lower() in ("1", "true", "yes")
    return default


def _load_task(task_dir: str) -> tuple[TaskBundle, Vocabulary]:
    root = Path(task_dir)
    bundle = load_bundle(root)
    vocab_path = root / "vocab.txt"
    if not vocab_path.exists():
        raise CliError(f"no vocab.txt under {task_dir}")
    return bundle, Vocabulary.load(vocab_path)


def _train_config(args, config: dict[str, str]) -> TrainConfig:
    return TrainConfig(
        learning_rate=_pick(args.learning_rate, config, "train.learning_rate", 1e-5, float),
        adam_epsilon=_pick(None, config, "train.adam_epsilon", 1e-8, float),
        weight_decay=_pick(None, config, "train.weight_decay", 0.01, float),
        max_grad_norm=_pick(None, config, "train.max_grad_norm", 1.0, float),
        batch_size=_pick(args.batch_size, config, "train.batch_size", 2, int),
        gradient_accumulation_steps=_pick(
            args.grad_accumulation, config, "train.gradient_accumulation_steps", 8, int
        ),
        max_steps=_pick(args.steps, config, "train.max_steps", 250, int),
        max_seq_length=_pick(args.max_seq_length, config, "train.max_seq_length", 256, int),
        distillation_temperature=_pick(
            None, config, "train.distillation_temperature", 2.0, float
        ),
        seed=_pick(args.seed, config, "run.seed", 0, int),
    )


def _model_config(args, config: dict[str, str], seed: int) -> TinyTransformerConfig:
    return TinyTransformerConfig(
        layers=_pick(args.layers, config, "model.layers", 2, int),
        model_dim=_pick(args.model_dim, config, "model.model_dim", 64, int),
        heads=_pick(args.heads, config, "model.heads", 4, int),
        ff_dim=_pick(args.ff_dim, config, "model.ff_dim", 128, int),
        max_positions=_pick(args.max_positions, config, "model.max_positions", 64, int),
        seed=seed,
    )


def _strategy(name: str) -> DecodingStrategy:
    return DecodingStrategy(name)


def _manifest_base(args, extra: dict) -> dict:
    return {
        "version": __version__,
        "command": args.command,
        "argv": sys.argv[1:],
        **extra,
    }


def _write_predictions(path: Path, preds: dict[str, int], bundle: TaskBundle) -> None:
    lines = [
        json.dumps({"id": i, "label": bundle.task.labels[y]}, sort_keys=True)
        for i, y in sorted(preds.items())
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_members(run_dir: Path) -> list[EnsembleMember]:
    payload = json.loads((run_dir / "members.json").read_text(encoding="utf-8"))
    members = []
    for row in payload:
        members.append(
            EnsembleMember(
                pvp_name=row["pvp"],
                seed_index=row["seed_index"],
                weight=row["weight"],
                checkpoint=run_dir / row["checkpoint"],
                kind=row.get("kind", "mlm"),
            )
        )
    return members


def _save_members(run_dir: Path, members: list[EnsembleMember]) -> None:
    payload = []
    for m in members:
        payload.append(
            {
                "pvp": m.pvp_name,
                "seed_index": m.seed_index,
                "weight": m.weight,
                "checkpoint": str(m.checkpoint.relative_to(run_dir)),
                "kind": m.kind,
            }
        )
    (run_dir / "members.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ----------------------------------------------------------------------
# subcommands


def cmd_make_toy(args, config) -> int:
    out = Path(args.out)
    write_toy_files(
        out,
        args.kind,
        size=args.size,
        seed=_pick(args.seed, config, "run.seed", 0, int),
        corpus_lines=args.corpus_lines,
        dev_size=args.dev_size,
        test_size=args.test_size,
        unlabeled_size=args.unlabeled_size,
    )
    print(f"toy task '{args.kind}' written to {out}")
    return 0


def cmd_sample(args, config) -> int:
    bundle, _ = _load_task(args.task)
    full = load_dataset(args.data, bundle.task, "train-full")
    seed = _pick(args.seed, config, "run.seed", 0, int)
    few, unlabeled = make_few_shot_splits(full, args.n, args.cap, seed, args.group_key)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "train.jsonl", few, bundle.task)
    save_dataset(out / "unlabeled.jsonl", unlabeled, bundle.task)
    write_manifest(
        out,
        _manifest_base(
            args,
            {
                "seed": seed,
                "n": args.n,
                "cap": args.cap,
                "source_hash": dataset_hash(full, bundle.task),
                "train_hash": dataset_hash(few, bundle.task),
                "unlabeled_hash": dataset_hash(unlabeled, bundle.task),
                "artifacts": ["train.jsonl", "unlabeled.jsonl"],
            },
        ),
    )
    print(f"sampled {len(few)} labeled + {len(unlabeled)} unlabeled into {out}")
    return 0


def cmd_pretrain(args, config) -> int:
    bundle, vocab = _load_task(args.task)
    corpus_path = Path(args.corpus) if args.corpus else Path(args.task) / "corpus.txt"
    corpus = [
        line for line in corpus_path.read_text(encoding="utf-8").splitlines() if line.strip()
    ]
    cfg = _train_config(args, config)
    model = TinyTransformer(_model_config(args, config, rng.derive(cfg.seed, "model-init")), vocab)
    trained = pretrain_mlm(model, corpus, vocab, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, trained)
    print(f"pretrained base model ({cfg.max_steps} steps) saved to {out}")
    return 0


def _prepare_run(args, config):
    bundle, vocab = _load_task(args.task)
    labeled = load_dataset(args.train, bundle.task, "train-few")
    base, _ = load_checkpoint(args.base, vocab)
    cfg = _train_config(args, config)
    settings = PetSettings(
        seeds_per_pvp=_pick(args.seeds_per_pvp, config, "run.seeds_per_pvp", 3, int),
        strategy=_strategy(_pick(args.strategy, config, "run.strategy", "max-first", str)),
        weighting=_pick(args.weights, config, "run.weights", "accuracy", str),
        distill=not args.no_distill,
        distill_steps=_pick(args.distill_steps, config, "run.distill_steps", 5000, int),
    )
    return bundle, vocab, labeled, base, cfg, settings


def cmd_train(args, config) -> int:
    bundle, vocab, labeled, base, cfg, settings = _prepare_run(args, config)
    pvps = bundle.pvps(vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    members = train_members(
        pvps, labeled, bundle.task, vocab, base, cfg,
        seeds_per_pvp=settings.seeds_per_pvp,
        weighting=settings.weighting,
        strategy=settings.strategy,
        run_dir=out,
    )
    _save_members(out, members)
    write_manifest(
        out,
        _manifest_base(
            args,
            {
                "seed": cfg.seed,
                "pvps": [p.name for p in pvps],
                "seeds_per_pvp": settings.seeds_per_pvp,
                "weights": {p.name: next(m.weight for m in members if m.pvp_name == p.name) for p in pvps},
                "train_hash": dataset_hash(labeled, bundle.task),
                "train_config": vars(cfg),
                "artifacts": ["members.json"],
            },
        ),
    )
    print(f"trained {len(members)} members into {out}")
    return 0


def cmd_distill(args, config) -> int:
    bundle, vocab = _load_task(args.task)
    run_dir = Path(args.run)
    members = _load_members(run_dir)
    unlabeled = load_dataset(args.unlabeled, bundle.task, "unlabeled")
    base, _ = load_checkpoint(args.base, vocab)
    cfg = _train_config(args, config)
    settings_strategy = _strategy(_pick(args.strategy, config, "run.strategy", "max-first", str))
    pvps = {p.name: p for p in bundle.pvps(vocab)}
    soft = ensemble_soft_label(
        members, pvps, unlabeled, bundle.task, vocab,
        strategy=settings_strategy, max_seq_length=cfg.max_seq_length,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    soft_lines = [
        json.dumps(
            {
                "id": e.example_id,
                "distribution": {
                    bundle.task.labels[y]: float(p) for y, p in enumerate(e.distribution) if p > 0
                },
            },
            sort_keys=True,
        )
        for e in soft.entries
    ]
    (out / "soft_labels.jsonl").write_text("\n".join(soft_lines) + "\n", encoding="utf-8")
    distill_steps = _pick(args.distill_steps, config, "run.distill_steps", 5000, int)
    distill_cfg = cfg.with_updates(max_steps=distill_steps, seed=rng.derive(cfg.seed, "distill"))
    classifier = distill(soft, unlabeled, bundle.task, vocab, base, distill_cfg, log_dir=out / "distill")
    save_checkpoint(out / "classifier.ckpt", classifier)
    write_manifest(
        out,
        _manifest_base(
            args,
            {
                "seed": cfg.seed,
                "members_run": str(run_dir),
                "unlabeled_hash": dataset_hash(unlabeled, bundle.task),
                "distill_steps": distill_steps,
                "artifacts": ["soft_labels.jsonl", "classifier.ckpt"],
            },
        ),
    )
    print(f"distilled classifier saved under {out}")
    return 0


def cmd_ipet(args, config) -> int:
    bundle, vocab, labeled, base, cfg, settings = _prepare_run(args, config)
    unlabeled = load_dataset(args.unlabeled, bundle.task, "unlabeled")
    plan = GenerationPlan(
        generations=_pick(args.generations, config, "run.generations", 3, int),
        growth_factor=_pick(args.growth_factor, config, "run.growth_factor", 5.0, float),
        subset_fraction=_pick(args.subset_fraction, config, "run.subset_fraction", 0.25, float),
    )
    pvps = bundle.pvps(vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_ipet(
        pvps, labeled, unlabeled, bundle.task, vocab, base, cfg,
        plan=plan, settings=settings, run_dir=out,
    )
    _save_members(out / f"gen{plan.generations}", result.members)
    write_manifest(
        out,
        _manifest_base(
            args,
            {
                "seed": cfg.seed,
                "pvps": [p.name for p in pvps],
                "plan": vars(plan),
                "train_hash": dataset_hash(labeled, bundle.task),
                "unlabeled_hash": dataset_hash(unlabeled, bundle.task),
                "train_config": vars(cfg),
                "generations": [
                    [f"{m.pvp_name}-s{m.seed_index}" for m in gen] for gen in result.generations
                ],
                "shortfalls": [{str(k): v for k, v in s.items()} for s in result.shortfalls],
                "distilled": result.classifier is not None,
            },
        ),
    )
    print(
        f"generational run finished: {plan.generations} generations, "
        f"distilled={'yes' if result.classifier is not None else 'no'}, artifacts in {out}"
    )
    return 0


def cmd_score(args, config) -> int:
    bundle, vocab = _load_task(args.task)
    dataset = load_dataset(args.data, bundle.task, "score-input")
    strategy = _strategy(_pick(args.strategy, config, "run.strategy", "max-first", str))
    max_seq_length = _pick(args.max_seq_length, config, "train.max_seq_length", 256, int)
    if args.backend == "tabular":
        model = TabularBackend(vocab, seed=_pick(args.seed, config, "run.seed", 0, int))
    else:
        if not args.checkpoint:
            raise CliError("--checkpoint required with the tiny backend")
        model, _ = load_checkpoint(args.checkpoint, vocab)
    pvps = bundle.pvps(vocab)
    chosen = [p for p in pvps if args.pvp in (None, p.name)]
    if not chosen:
        raise CliError(f"unknown pvp {args.pvp!r}; available: {[p.name for p in pvps]}")
    pvp = chosen[0]
    lines = []
    for x in dataset:
        table = score_example(pvp, model, x, bundle.task, strategy, max_seq_length, vocab)
        lines.append(table_to_json(x.id, table, bundle.task, strategy.value))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"scored {len(dataset)} examples with pvp {pvp.name!r} into {out}")
    return 0


def cmd_eval(args, config) -> int:
    bundle, _ = _load_task(args.task)
    gold = load_dataset(args.gold, bundle.task, "gold")
    predictions = load_predictions(args.predictions, bundle.task)
    metrics = tuple(args.metrics.split(",")) if args.metrics else bundle.task.metrics
    positive = (
        bundle.task.label_id(bundle.task.positive_label)
        if bundle.task.positive_label is not None
        else None
    )
    report = evaluate(predictions, gold, metrics, positive)
    payload = json.dumps(report.to_json(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return 0


def cmd_compare_decoding(args, config) -> int:
    bundle, vocab, labeled, base, cfg, settings = _prepare_run(args, config)
    test = load_dataset(args.test, bundle.task, "test")
    pvps = bundle.pvps(vocab)
    pvps_by = {p.name: p for p in pvps}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    members = train_members(
        pvps, labeled, bundle.task, vocab, base, cfg,
        seeds_per_pvp=settings.seeds_per_pvp,
        weighting=settings.weighting,
        strategy=settings.strategy,
        run_dir=out,
    )
    _save_members(out, members)
    untrained = [
        EnsembleMember(p.name, 0, 1.0, model=base) for p in pvps
    ]
    rows = []
    for label, member_set, strategy in [
        ("max-first", members, DecodingStrategy.MAX_FIRST),
        ("ltr", members, DecodingStrategy.LEFT_TO_RIGHT),
        ("parallel", members, DecodingStrategy.PARALLEL),
        ("untrained", untrained, DecodingStrategy.MAX_FIRST),
    ]:
        preds = ensemble_predict(
            member_set, pvps_by, test, bundle.task, vocab, strategy, cfg.max_seq_length
        )
        report = evaluate(
            {i: {"label": y} for i, y in preds.items()}, test, ("acc",)
        )
        rows.append({"row": label, "acc": report.values["acc"]})
    (out / "decoding_comparison.json").write_text(
        json.dumps(rows, indent=2) + "\n", encoding="utf-8"
    )
    write_manifest(
        out,
        _manifest_base(
            args,
            {
                "seed": cfg.seed,
                "train_hash": dataset_hash(labeled, bundle.task),
                "test_hash": dataset_hash(test, bundle.task),
                "rows": rows,
                "artifacts": ["decoding_comparison.json", "members.json"],
            },
        ),
    )
    width = max(len(r["row"]) for r in rows)
    for r in rows:
        print(f"{r['row']:<{width}}  acc={r['acc']:.3f}")
    return 0


# ----------------------------------------------------------------------
# parser


def _add_common(sub: argparse.ArgumentParser, *, task=True) -> None:
    sub.add_argument("--config", help="INI config file; flags override its values")
    sub.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    if task:
        sub.add_argument("--task", required=True, help="task bundle directory")


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--steps", type=int, default=None, help="optimizer steps")
    sub.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    sub.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sub.add_argument("--grad-accumulation", dest="grad_accumulation", type=int, default=None)
    sub.add_argument("--max-seq-length", dest="max_seq_length", type=int, default=None)
    sub.add_argument("--layers", type=int, default=None)
    sub.add_argument("--model-dim", dest="model_dim", type=int, default=None)
    sub.add_argument("--heads", type=int, default=None)
    sub.add_argument("--ff-dim", dest="ff_dim", type=int, default=None)
    sub.add_argument("--max-positions", dest="max_positions", type=int, default=None)


def _add_run_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--train", required=True, help="labeled training JSONL")
    sub.add_argument("--base", required=True, help="pretrained base checkpoint")
    sub.add_argument("--out", required=True, help="run directory")
    sub.add_argument("--seeds-per-pvp", dest="seeds_per_pvp", type=int, default=None)
    sub.add_argument(
        "--strategy", choices=[s.value for s in DecodingStrategy], default=None
    )
    sub.add_argument("--weights", choices=["accuracy", "uniform"], default=None)
    sub.add_argument("--no-distill", action="store_true", help="stop after the ensemble")
    sub.add_argument("--distill-steps", dest="distill_steps", type=int, default=None)
    _add_train_flags(sub)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clozefew",
        description="Few-shot cloze-pattern training on a self-contained backend",
    )
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("make-toy", help="generate a synthetic task bundle")
    _add_common(sub, task=False)
    sub.add_argument("--kind", choices=toy_kinds(), required=True)
    sub.add_argument("--size", type=int, default=1000, help="train pool size")
    sub.add_argument("--dev-size", dest="dev_size", type=int, default=100)
    sub.add_argument("--test-size", dest="test_size", type=int, default=200)
    sub.add_argument("--unlabeled-size", dest="unlabeled_size", type=int, default=1000)
    sub.add_argument("--corpus-lines", dest="corpus_lines", type=int, default=1500)
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_make_toy)

    sub = commands.add_parser("sample", help="draw a few-shot set and unlabeled pool")
    _add_common(sub)
    sub.add_argument("--data", required=True, help="full training JSONL")
    sub.add_argument("--n", type=int, default=32)
    sub.add_argument("--cap", type=int, default=20000)
    sub.add_argument("--group-key", dest="group_key", default=None)
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_sample)

    sub = commands.add_parser("pretrain", help="masked-token pretraining of the base model")
    _add_common(sub)
    sub.add_argument("--corpus", default=None, help="text file; default: task dir corpus.txt")
    sub.add_argument("--out", required=True, help="checkpoint path")
    _add_train_flags(sub)
    sub.set_defaults(func=cmd_pretrain)

    sub = commands.add_parser("train", help="finetune the pattern ensemble")
    _add_common(sub)
    _add_run_flags(sub)
    sub.set_defaults(func=cmd_train)

    sub = commands.add_parser("ipet", help="generational self-training run")
    _add_common(sub)
    _add_run_flags(sub)
    sub.add_argument("--unlabeled", required=True)
    sub.add_argument("--generations", type=int, default=None)
    sub.add_argument("--growth-factor", dest="growth_factor", type=float, default=None)
    sub.add_argument("--subset-fraction", dest="subset_fraction", type=float, default=None)
    sub.set_defaults(func=cmd_ipet)

    sub = commands.add_parser("distill", help="soft-label a pool and train the classifier")
    _add_common(sub)
    sub.add_argument("--run", required=True, help="run dir holding members.json")
    sub.add_argument("--unlabeled", required=True)
    sub.add_argument("--base", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument(
        "--strategy", choices=[s.value for s in DecodingStrategy], default=None
    )
    sub.add_argument("--distill-steps", dest="distill_steps", type=int, default=None)
    _add_train_flags(sub)
    sub.set_defaults(func=cmd_distill)

    sub = commands.add_parser("score", help="emit per-example score tables as JSONL")
    _add_common(sub)
    sub.add_argument("--data", required=True)
    sub.add_argument("--backend", choices=["tiny", "tabular"], default="tiny")
    sub.add_argument("--checkpoint", default=None)
    sub.add_argument("--pvp", default=None, help="pattern name (default: first)")
    sub.add_argument(
        "--strategy", choices=[s.value for s in DecodingStrategy], default=None
    )
    sub.add_argument("--max-seq-length", dest="max_seq_length", type=int, default=None)
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_score)

    sub = commands.add_parser("eval", help="score a predictions file against gold labels")
    _add_common(sub)
    sub.add_argument("--predictions", required=True)
    sub.add_argument("--gold", required=True)
    sub.add_argument("--metrics", default=None, help="comma-separated; default from task.json")
    sub.add_argument("--out", default=None)
    sub.set_defaults(func=cmd_eval)

    sub = commands.add_parser(
        "compare-decoding", help="train once, evaluate all decode orders plus untrained"
    )
    _add_common(sub)
    _add_run_flags(sub)
    sub.add_argument("--test", required=True)
    sub.set_defaults(func=cmd_compare_decoding)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _read_config(getattr(args, "config", None))
        return args.func(args, config)
    except Exception as exc:  # single-line machine-parseable error contract
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
