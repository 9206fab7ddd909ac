"""Command line: generate data, train, evaluate, check gradients, export embeddings."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import read_key_values
from .data import FormatError, SampleSet, SyntheticSpec, generate_synthetic, load_mdt, save_mdt
from .harness import DEFAULT_SEEDS, aggregate, export_embeddings, leave_one_out, per_seed_csv
from .network import CheckpointError, ModelConfig, init, load_checkpoint, save_checkpoint
from .tensor import NumericDomainError
from .trainer import TrainConfig, TrainingError, deepall_train, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

MODEL_KEYS = ("feature_dims", "metric_dims", "activation")


class UsageFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageFailure(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="masf", description=__doc__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, *, data=True, method=False, out_required=False):
        sp.add_argument("--config", type=Path, help="key=value config file")
        if data:
            sp.add_argument("--data", type=Path, help="MDT dataset (default: generate the synthetic benchmark)")
        sp.add_argument("--seed", type=int, help="seed (eval: run only this seed)")
        sp.add_argument("--grad-mode", choices=("first", "exact"))
        sp.add_argument("--out", type=Path, required=out_required)
        if method:
            sp.add_argument("--method", choices=("masf", "deepall"), action="append")
            sp.add_argument("--target-domain", type=int)

    common(sub.add_parser("generate", help="write a synthetic dataset"), data=False, out_required=True)
    common(sub.add_parser("train", help="train one model, write checkpoint and report"), method=True, out_required=True)
    common(sub.add_parser("eval", help="leave-one-domain-out comparison table"), method=True)
    common(sub.add_parser("gradcheck", help="finite-difference gradient suite"), data=False)
    ex = sub.add_parser("export-embeddings", help="dump features and metric embeddings as JSON lines")
    common(ex, method=True, out_required=True)
    ex.add_argument("--model", type=Path, required=True, help="checkpoint written by 'train'")
    return p


# ---------------------------------------------------------------------------


def _config_values(args) -> dict[str, str]:
    return read_key_values(args.config) if args.config else {}


def _train_config(args) -> TrainConfig:
    values = {k: v for k, v in _config_values(args).items() if k not in MODEL_KEYS}
    cfg = TrainConfig.from_mapping(values)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.grad_mode:
        cfg = cfg.replace(grad_mode=args.grad_mode)
    return cfg


def _model_config(args, datasets) -> ModelConfig:
    values = {k: v for k, v in _config_values(args).items() if k in MODEL_KEYS}
    cfg = ModelConfig.from_mapping({**values, "input_dim": str(datasets[0].input_dim),
                                    "num_classes": str(_num_classes(datasets))})
    return cfg


def _num_classes(datasets) -> int:
    return int(max(s.y.max() for d in datasets for s in (d.train, d.val, d.test) if len(s))) + 1


def _datasets(args):
    if args.data:
        return load_mdt(args.data)
    return generate_synthetic(SyntheticSpec())


def _sources(args, datasets):
    ids = [d.domain for d in datasets]
    if args.target_domain is None:
        return ids
    if args.target_domain not in ids:
        raise UsageFailure(f"--target-domain {args.target_domain} not in {ids}")
    return [d for d in ids if d != args.target_domain]


def cmd_generate(args) -> int:
    spec = SyntheticSpec.from_file(args.config) if args.config else SyntheticSpec()
    if args.seed is not None:
        spec = SyntheticSpec(**{**spec.__dict__, "seed": args.seed})
    datasets = generate_synthetic(spec)
    save_mdt(datasets, args.out, num_classes=len(set(spec.superclasses)) if spec.superclasses else spec.num_classes)
    print(f"wrote {args.out}: {len(datasets)} domains, {sum(len(d.train) + len(d.val) + len(d.test) for d in datasets)} samples")
    return EXIT_OK


def cmd_train(args) -> int:
    methods = args.method or ["masf"]
    if len(methods) != 1:
        raise UsageFailure("train takes a single --method")
    datasets = _datasets(args)
    cfg = _train_config(args)
    mcfg = _model_config(args, datasets)
    mcfg = ModelConfig(**{**mcfg.__dict__, "seed": cfg.seed})
    fit = train if methods[0] == "masf" else deepall_train
    report = fit(init(mcfg), datasets, cfg, _sources(args, datasets))
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(report.model, args.out / "model.mgm")
    report.write(args.out / "report.jsonl")
    print(f"{methods[0]}: stopped after {report.stop_iter} iterations, best source val acc {report.best_val_acc:.4f}")
    print(f"wrote {args.out / 'model.mgm'} and {args.out / 'report.jsonl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    methods = args.method or ["masf", "deepall"]
    datasets = _datasets(args)
    cfg = _train_config(args)
    mcfg = _model_config(args, datasets)
    seeds = [args.seed] if args.seed is not None else list(DEFAULT_SEEDS)
    targets = None if args.target_domain is None else [args.target_domain]
    if targets and targets[0] not in [d.domain for d in datasets]:
        raise UsageFailure(f"--target-domain {targets[0]} not in the dataset")
    results = {m: leave_one_out(datasets, m, cfg, mcfg, seeds, targets) for m in methods}
    outputs = {"per_seed.csv": per_seed_csv([r for m in methods for r in results[m]])}
    if len(methods) == 2:
        table = aggregate(results[methods[0]], results[methods[1]])
        outputs["table.txt"] = table.to_text()
        outputs["comparison.csv"] = table.to_csv()
        sys.stdout.write(outputs["table.txt"])
        sys.stdout.write("\n" + outputs["comparison.csv"])
    else:
        sys.stdout.write(outputs["per_seed.csv"])
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        for name, text in outputs.items():
            (args.out / name).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, seconds = gradcheck.timed_run(seed=args.seed or 0)
    text = gradcheck.report(results, seconds)
    sys.stdout.write(text)
    if args.out:
        args.out.write_text(text, encoding="utf-8")
    return EXIT_OK if max(results.values()) <= gradcheck.TOLERANCE else EXIT_NUMERIC


def cmd_export(args) -> int:
    model = load_checkpoint(args.model)
    datasets = _datasets(args)
    chosen = datasets if args.target_domain is None else [d for d in datasets if d.domain == args.target_domain]
    if not chosen:
        raise UsageFailure(f"--target-domain {args.target_domain} not in the dataset")
    if len(chosen) == 1:
        n = export_embeddings(model, chosen[0].test, chosen[0].domain, args.out)
    else:
        pooled = SampleSet(np.vstack([d.test.x for d in chosen]), np.concatenate([d.test.y for d in chosen]))
        domains = np.concatenate([[d.domain] * len(d.test) for d in chosen])
        n = export_embeddings(model, pooled, domains, args.out)
    print(f"wrote {n} records to {args.out}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-embeddings": cmd_export,
}


def _numeric_cause(exc: BaseException) -> BaseException | None:
    while exc is not None:
        if isinstance(exc, (NumericDomainError, TrainingError)):
            return exc
        exc = exc.__cause__
    return None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args)
    except UsageFailure as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CheckpointError, ValueError, OSError, RuntimeError, ArithmeticError) as e:
        if _numeric_cause(e) is not None:
            print(f"masf: numeric error: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"masf: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
