"""Command-line entry point.

Subcommands: gen-data, train, eval, eval-hat, inspect-capsules.
Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import Config, ConfigError, load_config


class UsageError(RuntimeError):
    """Bad invocation or configuration: exit code 2."""


def _load_cfg(path: str | None) -> Config:
    if path is None:
        return Config()
    try:
        return load_config(path)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def cmd_gen_data(args) -> int:
    from .synthetic import GenerationError, SyntheticSpec, generate_dataset

    if args.spec is not None:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise UsageError(f"spec not found: {spec_path}")
        spec = SyntheticSpec.from_file(spec_path)
    else:
        spec = SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    if args.samples is not None:
        spec.n_samples = args.samples
    if args.human_maps:
        spec.human_maps = True
    try:
        stats = generate_dataset(spec, args.out)
    except GenerationError as exc:
        print(f"generation error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote dataset to {args.out}")
    print(f"  train manifest: {Path(args.out) / 'manifest_train.jsonl'} "
          f"({stats['n_train']} samples)")
    print(f"  val manifest:   {Path(args.out) / 'manifest_val.jsonl'} "
          f"({stats['n_val']} samples)")
    print(f"  answers: {len(stats['answers'])}  image_size: {stats['image_size']}  "
          f"grid: {stats['grid'][0]}x{stats['grid'][1]}")
    return 0


def _build_or_load_model(cfg: Config, ckpt_in: str | None):
    import torch

    from .checkpoint import load_checkpoint, load_into_model
    from .model import build_model

    model = build_model(cfg.model, seed=cfg.seed)
    ckpt = None
    if ckpt_in is not None:
        ckpt = load_checkpoint(ckpt_in)
        try:
            load_into_model(model, ckpt)
        except RuntimeError as exc:
            raise UsageError(
                f"checkpoint {ckpt_in} does not match the configured model: {exc}"
            ) from exc
    torch.set_num_threads(min(4, torch.get_num_threads()))
    return model, ckpt


def cmd_train(args) -> int:
    from .training import TrainingDiverged, train_stage

    cfg = _load_cfg(args.config)
    stage = args.stage
    if stage == "pretrain2" and args.ckpt_in is None:
        raise UsageError("pretrain2 requires --ckpt-in with a pretrain1 checkpoint")
    if stage == "finetune" and args.ckpt_in is None and not args.from_scratch:
        raise UsageError(
            "finetune requires --ckpt-in with a pretrain2 checkpoint "
            "(or pass --from-scratch)"
        )
    model, ckpt = _build_or_load_model(cfg, args.ckpt_in)
    if ckpt is not None:
        expected = {"pretrain2": "pretrain1", "finetune": "pretrain2"}.get(stage)
        if expected is not None and ckpt.stage != expected:
            print(
                f"note: --ckpt-in stage is {ckpt.stage!r}, expected {expected!r}",
                file=sys.stderr,
            )
    settings = cfg.stage(stage)
    if args.lr is not None:
        settings.lr = args.lr
    if args.batch is not None:
        settings.batch_size = args.batch
    if args.epochs is not None:
        settings.epochs = args.epochs
    try:
        result = train_stage(
            model, stage, cfg, args.data, args.ckpt_out, log_path=args.log
        )
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    acc = "n/a" if result.val_accuracy is None else f"{result.val_accuracy:.4f}"
    print(
        f"stage {stage} finished: steps={result.steps} "
        f"final_loss={result.final_loss:.4f} val_accuracy={acc}"
    )
    print(f"checkpoint written to {result.ckpt_path}")
    return 0


def _eval_setup(args):
    from .data import load_manifest, open_dataset

    cfg = _load_cfg(args.config)
    model, _ = _build_or_load_model(cfg, args.ckpt)
    paths, tokenizer, answers = open_dataset(args.data)
    manifest = paths.val_manifest if args.split == "val" else paths.train_manifest
    samples = load_manifest(manifest)
    return cfg, model, tokenizer, answers, samples


def _parse_head(value: str) -> int | str:
    return "mean" if value == "mean" else int(value)


def _parse_layer(value: str) -> int:
    return -1 if value == "last" else int(value)


def cmd_eval(args) -> int:
    from .evaluation import EvalOptions, run_grounding_eval
    from .reports import write_report

    cfg, model, tokenizer, answers, samples = _eval_setup(args)
    targets = ("answer", "question") if args.target == "both" else (args.target,)
    options = EvalOptions(
        layer=_parse_layer(args.layer),
        head=_parse_head(args.head),
        detection_threshold=args.det_thresh,
        accept_threshold=args.accept_thresh,
        connectivity=args.connectivity,
        targets=targets,
        sweep=args.sweep,
        per_head=args.per_head,
        macro=args.macro,
        batch_size=args.batch,
        heatmap_dir=Path(args.out) / "heatmaps" if args.heatmaps else None,
        dump_attention_dir=Path(args.out) / "attention" if args.dump_attention else None,
    )
    reports, accuracy = run_grounding_eval(model, samples, tokenizer, answers, options)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"answer accuracy: {accuracy:.4f} over {len(samples)} samples")
    for target, report in reports.items():
        write_report(report, out, f"grounding_{target}")
        print(report.to_text())
    (out / "accuracy.json").write_text(
        json.dumps({"answer_accuracy": accuracy, "n_samples": len(samples)}) + "\n"
    )
    return 0


def cmd_eval_hat(args) -> int:
    from .evaluation import EvalOptions, run_hat_eval

    cfg, model, tokenizer, answers, samples = _eval_setup(args)
    options = EvalOptions(
        layer=_parse_layer(args.layer),
        head=_parse_head(args.head),
        batch_size=args.batch,
    )
    try:
        mean, std, rows = run_hat_eval(model, samples, tokenizer, answers, options)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rank_correlation.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    (out / "rank_correlation.json").write_text(
        json.dumps(
            {"mean": mean, "std": std, "n_samples": len(rows)}, indent=2, sort_keys=True
        )
        + "\n"
    )
    print(f"mean rank correlation: {mean:.4f} +/- {std:.4f} over {len(rows)} samples")
    return 0


def cmd_inspect_capsules(args) -> int:
    from .evaluation import run_capsule_summary, write_capsule_groups

    cfg, model, tokenizer, answers, samples = _eval_setup(args)
    vectors, ids = run_capsule_summary(
        model, samples, tokenizer, answers, batch_size=args.batch
    )
    summary = write_capsule_groups(Path(args.out), vectors, ids)
    nonempty = sum(1 for size in summary["group_sizes"].values() if size > 0)
    print(
        f"wrote capsule summaries for {summary['n_images']} images: "
        f"{nonempty} of {summary['n_capsules']} groups non-empty"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capvqa",
        description="Capsule-interleaved vision-language transformer: data, "
        "training, and grounding evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes-VQA dataset")
    p.add_argument("--spec", help="JSON file with dataset settings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--human-maps", action="store_true",
                   help="also write synthetic human attention maps")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", help="JSON config file (default: desk-scale)")
    p.add_argument("--stage", required=True,
                   choices=("pretrain1", "pretrain2", "finetune"))
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt-in", help="checkpoint to start from")
    p.add_argument("--ckpt-out", required=True, help="checkpoint to write")
    p.add_argument("--from-scratch", action="store_true",
                   help="allow finetune without a pretrained checkpoint")
    p.add_argument("--log", help="JSONL training log path")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    def add_eval_common(p):
        p.add_argument("--config")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="val", choices=("train", "val"))
        p.add_argument("--out", required=True)
        p.add_argument("--layer", default="last",
                       help="cross-attention layer index or 'last'")
        p.add_argument("--head", default="mean", help="head index or 'mean'")
        p.add_argument("--batch", type=int, default=32)

    p = sub.add_parser("eval", help="grounding metrics on a dataset split")
    add_eval_common(p)
    p.add_argument("--det-thresh", type=float, default=0.5,
                   help="attention binarization threshold (on the normalized map)")
    p.add_argument("--accept-thresh", type=float, default=0.5,
                   help="overlap/IOU acceptance threshold for true positives")
    p.add_argument("--connectivity", type=int, default=4, choices=(4, 8))
    p.add_argument("--target", default="answer",
                   choices=("answer", "question", "both"))
    p.add_argument("--sweep", action="store_true",
                   help="emit the 0.05..0.95 acceptance-threshold table")
    p.add_argument("--per-head", action="store_true")
    p.add_argument("--macro", action="store_true",
                   help="macro-average over samples instead of pooling counts")
    p.add_argument("--heatmaps", action="store_true")
    p.add_argument("--dump-attention", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-hat",
                       help="mean rank correlation against human attention maps")
    add_eval_common(p)
    p.set_defaults(func=cmd_eval_hat)

    p = sub.add_parser("inspect-capsules",
                       help="per-image capsule activations and argmax groups")
    add_eval_common(p)
    p.set_defaults(func=cmd_inspect_capsules)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
