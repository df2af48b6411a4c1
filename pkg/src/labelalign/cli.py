"""Command-line surface.

Exit codes: 0 success, 1 usage or math-domain error, 2 data/format error,
3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import sys

from .encoders import ModelConfig, init_text_encoder
from .errors import DataError, DomainError, NumericError, UsageError
from .harness import (
    ALIGN_MODES,
    build_synthetic_suite,
    domain_shift_eval,
    evaluate,
    few_shot_sweep,
    run_ablation,
    run_incremental,
    zero_shot_eval,
)
from .losses import LossWeights
from .prompting import DEFAULT_TEMPLATE
from .store import (
    load_checkpoint,
    read_feature_file,
    read_vocab_file,
    save_checkpoint,
    validate,
    write_feature_file,
    write_json_report,
    write_sweep_csv,
    write_trace_csv,
    write_vocab_file,
)
from .training import TrainConfig, sample_few_shot, train


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage by default; the contract says 1."""

    def error(self, message):
        raise UsageError(message)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--encoder-seed", type=int, default=0,
                   help="seed of the frozen text encoder (default 0)")
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--d-feat", type=int, default=32)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--tau", type=float, default=0.01)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--shots", type=int, default=16)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lambda1", type=float, default=None,
                   help="WC weight; default 1/shots")
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--lambda3", type=float, default=0.05)
    p.add_argument("--kd-mode", choices=("literal", "swapped"), default="literal")
    p.add_argument("--init", choices=("word", "random"), default="word")
    p.add_argument("--context-len", type=int, default=0,
                   help="number of shared soft-context vectors; 0 disables")
    p.add_argument("--template", default=DEFAULT_TEMPLATE)


def _add_io_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--features", required=True, help="FeatureFile path")
    p.add_argument("--vocab", required=True, help="VocabFile path")


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        tau=args.tau,
        d_model=args.d_model,
        d_feat=args.d_feat,
        n_layers=args.layers,
        n_heads=args.heads,
        max_seq_len=args.max_len,
        seed=args.encoder_seed,
    )


def _train_config(args) -> TrainConfig:
    weights = LossWeights(
        shots=args.shots,
        lambda1=args.lambda1,   # None means the 1/shots default
        lambda2=args.lambda2,
        lambda3=args.lambda3,
    )
    return TrainConfig(
        shots=args.shots,
        seed=args.seed,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        weights=weights,
        kd_mode=args.kd_mode,
        init_mode=args.init,
        context_len=args.context_len,
        template=args.template,
    )


def _load_inputs(args):
    dataset = read_feature_file(args.features)
    vocab = read_vocab_file(args.vocab)
    config = _model_config(args)
    if dataset.d_feat != config.d_feat:
        raise DataError(
            f"feature file d_feat {dataset.d_feat} does not match --d-feat "
            f"{config.d_feat}"
        )
    if vocab.d_model != config.d_model:
        raise DataError(
            f"vocabulary d_model {vocab.d_model} does not match --d-model "
            f"{config.d_model}"
        )
    enc = init_text_encoder(config)
    return dataset, vocab, config, enc


def _cmd_gen_synthetic(args) -> None:
    config = _model_config(args)
    suite = build_synthetic_suite(
        n_classes=args.classes,
        items_per_class=args.per_class,
        model_config=config,
        seed=args.seed,
        sigma=args.sigma,
        align=args.align,
        noise_seed=args.noise_seed,
    )
    write_feature_file(args.out_features, suite.dataset)
    write_vocab_file(args.out_vocab, suite.vocab)
    zs = zero_shot_eval(suite.dataset, suite.vocab, suite.enc)
    print(f"features: {args.out_features} ({suite.dataset.n_items} items, "
          f"{suite.dataset.n_classes} classes, d_feat {suite.dataset.d_feat})")
    print(f"vocab:    {args.out_vocab} ({suite.vocab.vocab_size} tokens)")
    print(f"align:    {args.align}  zero-shot accuracy: {zs.accuracy:.4f}")


def _cmd_zero_shot(args) -> None:
    dataset, vocab, _, enc = _load_inputs(args)
    report = zero_shot_eval(dataset, vocab, enc, template=args.template)
    print(f"zero-shot accuracy: {report.accuracy:.4f} "
          f"({report.n_evaluated} items)")
    if args.out:
        write_json_report(args.out, report)
        print(f"report: {args.out}")


def _checkpoint_metadata(args, config, enc, table, context) -> dict:
    weights = _train_config(args).resolved_weights()
    return {
        "seed": args.seed,
        "shots": args.shots,
        "lambdas": {"lambda1": weights.l1, "lambda2": weights.l2,
                    "lambda3": weights.l3},
        "tau": config.tau,
        "kd_mode": args.kd_mode,
        "init_mode": args.init,
        "encoder_hash": enc.content_hash(),
        "class_names": table.class_names,
        "template": args.template,
        "context_len": context.length if context is not None else 0,
    }


def _cmd_train(args) -> None:
    dataset, vocab, config, enc = _load_inputs(args)
    tconfig = _train_config(args)
    split = sample_few_shot(dataset, tconfig.shots, tconfig.seed)
    table, context, trace = train(
        dataset, vocab, enc, config, tconfig, split=split
    )
    save_checkpoint(args.out, table, context,
                    _checkpoint_metadata(args, config, enc, table, context))
    print(f"checkpoint: {args.out}")
    print(f"steps: {len(trace.steps)}  final train accuracy: "
          f"{trace.epoch_train_accuracy[-1]:.4f}")
    if args.trace:
        write_trace_csv(args.trace, trace)
        print(f"trace: {args.trace}")
    if split.test_ids.shape[0]:
        report = evaluate(dataset, vocab, enc, table, context,
                          item_ids=split.test_ids, template=args.template,
                          seeds=[args.seed])
        print(f"test accuracy: {report.accuracy:.4f} ({report.n_evaluated} items)")


def _cmd_eval(args) -> None:
    dataset, vocab, config, enc = _load_inputs(args)
    table, context, metadata = load_checkpoint(
        args.checkpoint, expected_encoder_hash=enc.content_hash()
    )
    template = metadata.get("template", DEFAULT_TEMPLATE)
    report = evaluate(dataset, vocab, enc, table, context, template=template)
    print(f"accuracy: {report.accuracy:.4f} ({report.n_evaluated} items)")
    if args.out:
        write_json_report(args.out, report)
        print(f"report: {args.out}")


def _cmd_sweep(args) -> None:
    dataset, vocab, config, enc = _load_inputs(args)
    base = _train_config(args)
    shots = [int(s) for s in args.shots_list.split(",") if s]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if not shots or not seeds:
        raise UsageError("--shots-list and --seeds must be non-empty")
    rows = few_shot_sweep(dataset, vocab, enc, config, base,
                          shots=shots, seeds=seeds)
    for row in rows:
        per_seed = "  ".join(
            f"s{seed}={acc:.4f}" for seed, acc in sorted(row.seed_accuracies.items())
        )
        print(f"shots {row.shots:3d}: mean {row.mean_accuracy:.4f}  ({per_seed})")
    if args.out:
        write_json_report(args.out, rows)
        print(f"report: {args.out}")
    if args.csv:
        write_sweep_csv(args.csv, rows)
        print(f"csv: {args.csv}")


def _cmd_ablate(args) -> None:
    dataset, vocab, config, enc = _load_inputs(args)
    base = _train_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    rows = run_ablation(dataset, vocab, enc, config, base, seeds=seeds)
    for row in rows:
        flags = "+".join(
            name for name, on in (("WC", row.wc), ("COS", row.cos), ("KD", row.kd)) if on
        ) or "CE-only"
        print(f"{flags:12s} mean accuracy {row.mean_accuracy:.4f}")
    if args.out:
        write_json_report(args.out, rows)
        print(f"report: {args.out}")


def _cmd_incremental(args) -> None:
    dataset, vocab, config, enc = _load_inputs(args)
    tconfig = _train_config(args)
    report = run_incremental(
        dataset, vocab, enc, config, tconfig,
        mode=args.mode, joint_softmax=args.joint_softmax,
    )
    print(f"mode: {report.mode}")
    print(f"set1 before: {report.acc_set1_before:.4f}")
    print(f"set2:        {report.acc_set2:.4f}")
    print(f"set1 after:  {report.acc_set1_after:.4f}")
    print(f"degradation: {report.degradation:.4f}")
    print(f"set1 rows unchanged: {report.set1_rows_unchanged}")
    if args.out:
        write_json_report(args.out, report)
        print(f"report: {args.out}")


def _cmd_domain_shift(args) -> None:
    dataset, vocab, config, enc = _load_inputs(args)
    alt = read_feature_file(args.alt_features)
    table, context, metadata = load_checkpoint(
        args.checkpoint, expected_encoder_hash=enc.content_hash()
    )
    template = metadata.get("template", DEFAULT_TEMPLATE)
    in_domain = evaluate(dataset, vocab, enc, table, context, template=template)
    shifted = domain_shift_eval(alt, vocab, enc, table, context, template=template)
    print(f"in-domain accuracy: {in_domain.accuracy:.4f}")
    print(f"shifted accuracy:   {shifted.accuracy:.4f}")
    print(f"delta:              {in_domain.accuracy - shifted.accuracy:+.4f}")
    if args.out:
        write_json_report(args.out, {"in_domain": in_domain, "shifted": shifted})
        print(f"report: {args.out}")


def _cmd_validate(args) -> None:
    for path in args.paths:
        summary = validate(path)
        fields = "  ".join(f"{k}={v}" for k, v in summary.items() if k != "kind")
        print(f"{path}: ok  kind={summary['kind']}  {fields}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="labelalign",
        description="Label-alignment prompt tuning over frozen dual-encoder features.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="emit a synthetic FeatureFile + VocabFile")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.25)
    p.add_argument("--align", choices=ALIGN_MODES, default="random")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument(
        "--noise-seed", type=int, default=None,
        help="seed for per-item noise only (default: --seed); lets an "
        "alternate file share class means with a fresh noise draw",
    )
    p.add_argument("--out-features", required=True)
    p.add_argument("--out-vocab", required=True)
    _add_model_flags(p)
    p.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("zero-shot", help="reference-prompt baseline accuracy")
    _add_io_flags(p)
    _add_model_flags(p)
    p.add_argument("--template", default=DEFAULT_TEMPLATE)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_zero_shot)

    p = sub.add_parser("train", help="tune class rows on a few-shot split")
    _add_io_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--trace", default=None, help="optional per-step CSV")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a feature file")
    _add_io_flags(p)
    _add_model_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="shots x seeds protocol")
    _add_io_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--shots-list", default="1,2,4,8,16")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out", default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("ablate", help="regularizer on/off grid at fixed shots")
    _add_io_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("incremental", help="two-phase class-incremental protocol")
    _add_io_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--mode", choices=("lamm", "context-only"), default="lamm")
    p.add_argument("--joint-softmax", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_incremental)

    p = sub.add_parser("domain-shift", help="evaluate a checkpoint on alternate features")
    _add_io_flags(p)
    _add_model_flags(p)
    p.add_argument("--alt-features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_domain_shift)

    p = sub.add_parser("validate", help="structural check of any engine file")
    p.add_argument("paths", nargs="+", metavar="FILE")
    p.set_defaults(func=_cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except (UsageError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
