"""Command-line interface.

Subcommands: gen-data, train, attack, audit, sweep, count-params, calibrate.
Every subcommand accepts --config <path> plus repeatable --set
section.key=value overrides. Exit codes: 0 success, 1 contract errors,
2 IO/format errors.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from .attacks import CanaryManifest, write_roc_csv
from .config import ExperimentConfig, apply_overrides, emit, load_config, resolve
from .data import save_encoded, save_jsonl
from .dp import calibrate_noise, spent_epsilon
from .errors import ContractError, FormatError
from .harness import (attack_from_checkpoint, load_corpora, prepare_data,
                      sweep_parameter_variation, train, write_sweep_csv)
from .model import get_profile
from .peft import PeftConfig, count_trainable_parameters


def _build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return apply_overrides(cfg, args.set or [])


def _add_common(parser):
    parser.add_argument("--config", help="config file path")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")


def cmd_gen_data(args) -> int:
    cfg = resolve(_build_config(args))
    seed = args.seed if args.seed is not None else cfg.train.seeds[0]
    os.makedirs(args.out, exist_ok=True)
    train_corpus, test_corpus = load_corpora(cfg, seed)
    save_jsonl(train_corpus, os.path.join(args.out, "train.jsonl"))
    save_jsonl(test_corpus, os.path.join(args.out, "test.jsonl"))
    _, train_enc, test_enc, _ = prepare_data(cfg, seed, with_canaries=False)
    save_encoded(train_enc, test_enc, os.path.join(args.out, "encoded.pdpd"))
    print(f"wrote {len(train_corpus)} train / {len(test_corpus)} test records to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve(_build_config(args))
    for seed in cfg.train.seeds:
        run_dir = os.path.join(args.out, f"seed{seed}")
        record = train(cfg, seed, run_dir=run_dir, with_canaries=False)
        final = record.metrics[-1]
        extra = ""
        if final.epsilon_spent is not None:
            extra = f" epsilon_spent={final.epsilon_spent:.4f}"
        print(f"run={record.run_id} test_acc={final.test_acc:.4f} "
              f"auc_full={final.auc_full:.4f}{extra}")
    return 0


def cmd_audit(args) -> int:
    cfg = resolve(_build_config(args))
    finals = []
    for seed in cfg.train.seeds:
        run_dir = os.path.join(args.out, f"seed{seed}")
        record = train(cfg, seed, run_dir=run_dir, with_canaries=True)
        write_roc_csv(record.report, os.path.join(run_dir, "roc.csv"))
        finals.append(record)
        final = record.metrics[-1]
        print(f"run={record.run_id} auc_full={record.report.auc_full:.4f} "
              f"auc_flipped={record.report.auc_flipped:.4f} "
              f"flipped_train_acc={final.flipped_train_acc:.4f}")
    print(f"mean auc_full={np.mean([r.report.auc_full for r in finals]):.4f} "
          f"auc_flipped={np.mean([r.report.auc_flipped for r in finals]):.4f} "
          f"flipped_train_acc="
          f"{np.mean([r.metrics[-1].flipped_train_acc for r in finals]):.4f}")
    return 0


def cmd_attack(args) -> int:
    cfg = _build_config(args)
    manifest = CanaryManifest.load_json(args.manifest) if args.manifest else None
    seed = args.seed if args.seed is not None else resolve(cfg).train.seeds[0]
    report = attack_from_checkpoint(cfg, args.checkpoint, seed, manifest)
    os.makedirs(args.out, exist_ok=True)
    write_roc_csv(report, os.path.join(args.out, "roc.csv"))
    summary = report.summary_line()
    with open(os.path.join(args.out, "attack.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary + "\n")
    print(summary)
    return 0


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    rows = sweep_parameter_variation(cfg, run_root=args.out)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep.csv")
    write_sweep_csv(rows, path)
    for r in rows:
        print(f"method={r.method} setting={r.setting} "
              f"trainable={r.trainable_parameters} auc_full={r.auc_full:.4f} "
              f"auc_flipped={r.auc_flipped:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_count_params(args) -> int:
    rows = [
        ("full", "distilbert-dims", "all-trainable",
         count_trainable_parameters("distilbert-dims", PeftConfig(mode="full"))),
        ("full", "distilbert-dims", "frozen-positional",
         count_trainable_parameters(
             get_profile("distilbert-dims", positional_embeddings_trainable=False),
             PeftConfig(mode="full"))),
        ("full", "bert-base-dims", "all-trainable",
         count_trainable_parameters("bert-base-dims", PeftConfig(mode="full"))),
    ]
    for b in (32, 128, 512):
        rows.append(("adapter", "distilbert-dims", f"bottleneck={b}",
                     count_trainable_parameters(
                         "distilbert-dims", PeftConfig(mode="adapter", adapter_bottleneck=b))))
    for r in (8, 96, 480):
        rows.append(("lora", "distilbert-dims", f"r={r}",
                     count_trainable_parameters(
                         "distilbert-dims", PeftConfig(mode="lora", lora_rank=r))))
    rows.append(("ia3", "distilbert-dims", "default",
                 count_trainable_parameters("distilbert-dims", PeftConfig(mode="ia3"))))
    for method, profile, setting, count in rows:
        print(f"method={method} profile={profile} setting={setting} trainable={count}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = resolve(_build_config(args))
    epsilon = args.epsilon if args.epsilon is not None else cfg.privacy.epsilon[0]
    delta = args.delta if args.delta is not None else cfg.privacy.delta
    n = args.dataset_size if args.dataset_size is not None else cfg.data.n_train
    batch = args.batch_size if args.batch_size is not None else cfg.train.batch_size
    epochs = args.epochs if args.epochs is not None else cfg.train.epochs
    q = batch / n
    total_steps = epochs * math.ceil(n / batch)
    sigma = calibrate_noise(epsilon, delta, q, total_steps)
    achieved, alpha = spent_epsilon(q, sigma, total_steps, delta)
    print(f"sigma={sigma:.6f} alpha={alpha} epsilon={achieved:.6f}")
    return 0


def cmd_show_config(args) -> int:
    cfg = resolve(_build_config(args))
    sys.stdout.write(emit(cfg))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peftdp",
        description="Fine-tune a small transformer (full or PEFT, optionally "
                    "under sample-level DP) and audit its privacy leakage.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _add_common(p)
    p.add_argument("--out", default="data", help="output directory")
    p.add_argument("--seed", type=int, help="generation seed (default: first config seed)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one run per configured seed")
    _add_common(p)
    p.add_argument("--out", default="runs", help="output root for run directories")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit", help="end-to-end: flip canaries, train, attack, report")
    _add_common(p)
    p.add_argument("--out", default="runs", help="output root for run directories")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("attack", help="run the MIA against a saved checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint path (.pdpa)")
    p.add_argument("--manifest", help="canary manifest JSON from an audit run")
    p.add_argument("--seed", type=int, help="data seed (default: first config seed)")
    p.add_argument("--out", default="attack-out", help="output directory")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="parameter-variation sweep (adapter b / lora r)")
    _add_common(p)
    p.add_argument("--out", default="sweep-out", help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("count-params", help="print the trainable-parameter table")
    _add_common(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("calibrate", help="calibrate the DP noise multiplier")
    _add_common(p)
    p.add_argument("--epsilon", type=float, help="privacy budget")
    p.add_argument("--delta", type=float, help="privacy slack")
    p.add_argument("--dataset-size", type=int, help="training-set size")
    p.add_argument("--batch-size", type=int, help="expected batch size")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("show-config", help="print the fully resolved config")
    _add_common(p)
    p.set_defaults(func=cmd_show_config)

    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
