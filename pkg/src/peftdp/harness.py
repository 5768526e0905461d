"""Run orchestration: data preparation, training loops, metrics, sweeps.

A run is fully determined by a resolved config plus one master seed; every
random draw (init, data order, dropout, DP noise, canary choice, synthetic
data) comes from a named stream derived from that seed, so re-running
reproduces artifacts byte for byte.

The DP loop Poisson-samples each step (every sample enters independently
with probability q = batch_size / n), computes per-sample gradients with
microbatches of one, clips them jointly, and applies the noisy average;
the accountant composes one subsampled-Gaussian step per update. Planned
steps are epochs * ceil(n / batch_size), and noise calibration targets
exactly that count, so the spent budget never exceeds the target.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .attacks import (AttackReport, LossTrace, canary_audit, flip_canaries,
                      flipped_train_accuracy, mia_loss_attack)
from .autodiff import GradientTape, backward
from .checkpoint import restore_into, save_checkpoint
from .config import AUTO, ExperimentConfig, config_hash, emit, resolve
from .data import (Corpus, EncodedSplit, build_vocab_and_encode,
                   generate_synthetic_task, load_jsonl, subsample_split)
from .dp import (RdpAccountant, calibrate_noise, clip_per_sample, dp_sgd_step,
                 epsilon_from_rdp)
from .errors import ContractError
from .model import (ParameterRegistry, build_model, forward_classify,
                    get_profile, loss_per_sample)
from .optim import make_optimizer
from .peft import PeftConfig, inject_peft
from .rng import rng_stream

EPSILON_REPORT_SLACK = 1e-3


@dataclass
class EpochMetrics:
    epoch: int
    train_acc: float
    test_acc: float
    train_loss: float
    auc_full: float
    auc_flipped: float | None = None
    flipped_train_acc: float | None = None
    epsilon_spent: float | None = None


@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    seed: int
    metrics: list
    report: AttackReport
    trace: LossTrace
    noise_multiplier: float | None = None
    checkpoint_path: str | None = None
    metrics_path: str | None = None
    attack_report_path: str | None = None
    registry: ParameterRegistry | None = None  # kept for in-process callers


def peft_config_from(cfg: ExperimentConfig) -> PeftConfig:
    p = cfg.peft
    return PeftConfig(mode=p.mode, lora_rank=p.lora_rank, lora_alpha=p.lora_alpha,
                      lora_dropout=p.lora_dropout, lora_targets=p.lora_targets,
                      adapter_bottleneck=p.adapter_bottleneck,
                      adapter_placement=p.adapter_placement, ia3_targets=p.ia3_targets,
                      head_trainable=p.head_trainable, head_counted=p.head_counted)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def load_corpora(cfg: ExperimentConfig, seed: int):
    if cfg.data.source == "synthetic":
        train, test = generate_synthetic_task(cfg.data.n_train, cfg.data.n_test,
                                              cfg.data.vocab_size,
                                              cfg.data.signal_strength, seed)
    else:
        train = Corpus(load_jsonl(cfg.data.train_path).records, "train")
        test = Corpus(load_jsonl(cfg.data.test_path).records, "test")
    if cfg.data.subsample_fraction < 1.0:
        train = subsample_split(train, cfg.data.subsample_fraction, seed)
    return train, test


def prepare_data(cfg: ExperimentConfig, seed: int, with_canaries: bool):
    """Corpora -> (optional flips) -> vocabulary -> encoded splits."""
    train, test = load_corpora(cfg, seed)
    manifest = None
    if with_canaries:
        n_classes = get_profile(cfg.model.profile).config.n_classes
        train, test, manifest = flip_canaries(train, test, cfg.attack.n_canaries,
                                              seed, n_classes)
    vocab, train_enc, test_enc = build_vocab_and_encode(
        train, test, cfg.data.vocab_size, cfg.data.max_len)
    return vocab, train_enc, test_enc, manifest


def _check_data_model_fit(cfg: ExperimentConfig, vocab_size: int):
    mc = get_profile(cfg.model.profile).config
    if vocab_size > mc.vocab_size:
        raise ContractError(f"dataset/model vocab mismatch: encoded vocabulary "
                            f"({vocab_size}) exceeds model vocab ({mc.vocab_size})")
    if cfg.data.max_len > mc.max_len:
        raise ContractError(f"data max_len {cfg.data.max_len} exceeds "
                            f"model max_len {mc.max_len}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_split(reg: ParameterRegistry, enc: EncodedSplit, batch_size: int = 256):
    """Evaluation-mode per-sample losses and accuracy for one split."""
    losses, correct = [], 0
    for start in range(0, len(enc), batch_size):
        sl = slice(start, start + batch_size)
        logits = forward_classify(reg, enc.token_ids[sl], enc.mask[sl], training=False)
        losses.append(loss_per_sample(logits, enc.labels[sl]).data)
        correct += int((logits.data.argmax(axis=1) == enc.labels[sl]).sum())
    return np.concatenate(losses), correct / len(enc)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _minibatch_gradients(reg, token_ids, mask, labels, dropout_rng, params):
    """Single batched backward pass from the mean loss (the non-DP path)."""
    with GradientTape() as tape:
        logits = forward_classify(reg, token_ids, mask, training=True,
                                  dropout_rng=dropout_rng)
        loss = ad.mean_all(loss_per_sample(logits, labels))
    return backward(tape, loss, params)


def _per_sample_gradients(reg, token_ids, mask, labels, dropout_rng, params):
    """Independent microbatch-of-one backward passes (the DP path)."""
    grads = []
    for i in range(len(labels)):
        with GradientTape() as tape:
            logits = forward_classify(reg, token_ids[i:i + 1], mask[i:i + 1],
                                      training=True, dropout_rng=dropout_rng)
            loss = ad.mean_all(loss_per_sample(logits, labels[i:i + 1]))
        grads.append(backward(tape, loss, params))
    return grads


def planned_steps(n: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n / batch_size)


def train(cfg: ExperimentConfig, seed: int, run_dir: str | None = None,
          with_canaries: bool = False) -> RunRecord:
    """Train one model per the config and record per-epoch attack telemetry.

    Returns a RunRecord carrying per-epoch metrics, the loss trace, and the
    final attack report; artifacts (resolved config, checkpoint, metrics CSV,
    loss trace, ROC) are written when run_dir is given.
    """
    cfg = resolve(cfg)
    vocab, train_enc, test_enc, manifest = prepare_data(cfg, seed, with_canaries)
    _check_data_model_fit(cfg, vocab.size)

    profile = get_profile(cfg.model.profile, cfg.model.positional_embeddings_trainable)
    reg = build_model(profile.config, seed)
    if cfg.peft.mode != "full":
        inject_peft(reg, peft_config_from(cfg), seed)
    params = reg.trainable_tensors()
    shapes = {p.name: p.data.shape for p in params}

    n = len(train_enc)
    batch_size = cfg.train.batch_size
    total_steps = planned_steps(n, batch_size, cfg.train.epochs)
    sigma, accountant, q = None, None, None
    if cfg.privacy.enabled:
        q = batch_size / n
        epsilon_target = cfg.privacy.epsilon[0]
        sigma = cfg.privacy.noise_multiplier
        if sigma is AUTO:
            sigma = calibrate_noise(epsilon_target, cfg.privacy.delta, q, total_steps)
        if sigma <= 0:
            raise ContractError("DP training needs a positive noise multiplier")
        accountant = RdpAccountant()

    optimizer = make_optimizer(cfg.train.optimizer, reg, cfg.train.learning_rate,
                               cfg.train.weight_decay)
    data_rng = rng_stream(seed, "data-order")
    dropout_rng = rng_stream(seed, "dropout")
    noise_rng = rng_stream(seed, "noise")

    trace = LossTrace()
    metrics: list[EpochMetrics] = []
    steps_per_epoch = math.ceil(n / batch_size)

    for epoch in range(1, cfg.train.epochs + 1):
        if cfg.privacy.enabled:
            for _ in range(steps_per_epoch):
                idx = np.flatnonzero(data_rng.random(n) < q)
                sample_grads = _per_sample_gradients(
                    reg, train_enc.token_ids[idx], train_enc.mask[idx],
                    train_enc.labels[idx], dropout_rng, params)
                clipped = clip_per_sample(sample_grads, cfg.privacy.clip_norm)
                update = dp_sgd_step(clipped, sigma, cfg.privacy.clip_norm,
                                     batch_size, noise_rng, shapes=shapes)
                optimizer.step(update)
                accountant.record_step(q, sigma)
        else:
            order = data_rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                grads = _minibatch_gradients(
                    reg, train_enc.token_ids[idx], train_enc.mask[idx],
                    train_enc.labels[idx], dropout_rng, params)
                optimizer.step(grads)

        train_losses, train_acc = evaluate_split(reg, train_enc, cfg.attack.eval_batch_size)
        test_losses, test_acc = evaluate_split(reg, test_enc, cfg.attack.eval_batch_size)
        for sid, flipped, loss in zip(train_enc.sample_ids, train_enc.flipped, train_losses):
            trace.add(int(sid), "member", bool(flipped), epoch, float(loss))
        for sid, flipped, loss in zip(test_enc.sample_ids, test_enc.flipped, test_losses):
            trace.add(int(sid), "nonmember", bool(flipped), epoch, float(loss))

        em = EpochMetrics(epoch=epoch, train_acc=train_acc, test_acc=test_acc,
                          train_loss=float(train_losses.mean()),
                          auc_full=mia_loss_attack(train_losses, test_losses).auc_full)
        if with_canaries:
            flipped_attack = mia_loss_attack(train_losses[train_enc.flipped],
                                             test_losses[test_enc.flipped])
            em.auc_flipped = flipped_attack.auc_full
            em.flipped_train_acc = flipped_train_accuracy(reg, train_enc,
                                                          cfg.attack.eval_batch_size)
        if cfg.privacy.enabled:
            em.epsilon_spent = epsilon_from_rdp(accountant, cfg.privacy.delta)[0]
            if em.epsilon_spent > cfg.privacy.epsilon[0] + EPSILON_REPORT_SLACK:
                raise ContractError(
                    f"privacy budget exceeded: spent {em.epsilon_spent:.4f} "
                    f"of {cfg.privacy.epsilon[0]}")
        metrics.append(em)

    if with_canaries:
        report = canary_audit(reg, train_enc, test_enc, manifest)
        report.flipped_train_accuracy = [m.flipped_train_acc for m in metrics]
    else:
        final = metrics[-1]
        train_losses, _ = evaluate_split(reg, train_enc, cfg.attack.eval_batch_size)
        test_losses, _ = evaluate_split(reg, test_enc, cfg.attack.eval_batch_size)
        report = mia_loss_attack(train_losses, test_losses)

    dp_tag = "dp" if cfg.privacy.enabled else "nondp"
    record = RunRecord(
        run_id=f"{cfg.model.profile}-{cfg.peft.mode}-{dp_tag}-seed{seed}",
        config_hash=config_hash(cfg), seed=seed, metrics=metrics,
        report=report, trace=trace, noise_multiplier=sigma)

    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.cfg"), "w", encoding="utf-8") as fh:
            fh.write(emit(cfg))
        record.checkpoint_path = os.path.join(run_dir, "model.pdpa")
        save_checkpoint(reg, record.checkpoint_path)
        record.metrics_path = os.path.join(run_dir, "metrics.csv")
        emit_metrics(record, record.metrics_path)
        trace.save_csv(os.path.join(run_dir, "trace.csv"))
        record.attack_report_path = os.path.join(run_dir, "attack.txt")
        with open(record.attack_report_path, "w", encoding="utf-8") as fh:
            fh.write(record.report.summary_line() + "\n")
        if manifest is not None:
            manifest.save_json(os.path.join(run_dir, "manifest.json"))
    record.registry = reg
    return record


def attack_from_checkpoint(cfg: ExperimentConfig, checkpoint_path: str, seed: int,
                           manifest=None) -> AttackReport:
    """Re-run the attack against a saved checkpoint.

    The dataset is rebuilt from the config and seed; a manifest, when given,
    re-applies the canary flips so the flipped-subset AUC can be reproduced.
    """
    cfg = resolve(cfg)
    train_corpus, test_corpus = load_corpora(cfg, seed)
    if manifest is not None:
        train_corpus = train_corpus.with_flipped_labels(manifest.new_labels("train"))
        test_corpus = test_corpus.with_flipped_labels(manifest.new_labels("test"))
    vocab, train_enc, test_enc = build_vocab_and_encode(
        train_corpus, test_corpus, cfg.data.vocab_size, cfg.data.max_len)
    _check_data_model_fit(cfg, vocab.size)

    profile = get_profile(cfg.model.profile, cfg.model.positional_embeddings_trainable)
    reg = build_model(profile.config, seed)
    if cfg.peft.mode != "full":
        inject_peft(reg, peft_config_from(cfg), seed)
    restore_into(reg, checkpoint_path)

    if manifest is not None:
        return canary_audit(reg, train_enc, test_enc, manifest)
    train_losses, _ = evaluate_split(reg, train_enc, cfg.attack.eval_batch_size)
    test_losses, _ = evaluate_split(reg, test_enc, cfg.attack.eval_batch_size)
    return mia_loss_attack(train_losses, test_losses)


# ---------------------------------------------------------------------------
# metrics CSV
# ---------------------------------------------------------------------------

def emit_metrics(record: RunRecord, path) -> None:
    """`epoch,metric,value` rows; floats via repr so parsing is lossless."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,metric,value\n")
        for em in record.metrics:
            rows = [("train_acc", em.train_acc), ("test_acc", em.test_acc),
                    ("train_loss", em.train_loss), ("auc_full", em.auc_full)]
            if em.auc_flipped is not None:
                rows.append(("auc_flipped", em.auc_flipped))
            if em.flipped_train_acc is not None:
                rows.append(("flipped_train_acc", em.flipped_train_acc))
            if em.epsilon_spent is not None:
                rows.append(("epsilon_spent", em.epsilon_spent))
            for metric, value in rows:
                fh.write(f"{em.epoch},{metric},{value!r}\n")


def read_metrics(path) -> dict:
    """Parse a metrics CSV back into {(epoch, metric): value}."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "epoch,metric,value":
            raise ContractError(f"unexpected metrics header {header!r}")
        for line in fh:
            epoch, metric, value = line.strip().split(",")
            out[(int(epoch), metric)] = float(value)
    return out


# ---------------------------------------------------------------------------
# parameter-variation sweep
# ---------------------------------------------------------------------------

DEFAULT_SWEEP = (("adapter", 32), ("adapter", 128), ("adapter", 512),
                 ("lora", 8), ("lora", 96), ("lora", 480))
# trainable-count column is reported under the published full-size dims
COUNT_REFERENCE_PROFILE = "distilbert-dims"


@dataclass
class SweepRow:
    method: str
    setting: int
    trainable_parameters: int
    auc_full: float
    auc_flipped: float


def sweep_parameter_variation(base_cfg: ExperimentConfig, variations=DEFAULT_SWEEP,
                              run_root: str | None = None) -> list[SweepRow]:
    """One audited run per variation per seed, seed-averaged into a table.

    `base_cfg` should be unresolved so per-mode defaults (epochs, learning
    rate) can re-resolve for each variation. The trainable-parameter column
    is the published-table arithmetic under the full-size reference dims.
    """
    from .peft import count_trainable_parameters  # local to avoid cycle noise

    rows = []
    for method, setting in variations:
        var_cfg = ExperimentConfig(
            data=replace(base_cfg.data), model=replace(base_cfg.model),
            peft=replace(base_cfg.peft), train=replace(base_cfg.train),
            privacy=replace(base_cfg.privacy), attack=replace(base_cfg.attack))
        var_cfg.peft.mode = method
        if method == "adapter":
            var_cfg.peft.adapter_bottleneck = setting
        elif method == "lora":
            var_cfg.peft.lora_rank = setting
        else:
            raise ContractError(f"sweep variation must be adapter or lora, got {method!r}")
        var_cfg.peft.head_counted = AUTO

        count = count_trainable_parameters(COUNT_REFERENCE_PROFILE,
                                           peft_config_from(resolve(var_cfg)))
        aucs_full, aucs_flipped = [], []
        for seed in var_cfg.train.seeds:
            run_dir = None
            if run_root is not None:
                run_dir = os.path.join(run_root, f"{method}-{setting}-seed{seed}")
            record = train(var_cfg, seed, run_dir=run_dir, with_canaries=True)
            aucs_full.append(record.report.auc_full)
            aucs_flipped.append(record.report.auc_flipped)
        rows.append(SweepRow(method, setting, count,
                             float(np.mean(aucs_full)), float(np.mean(aucs_flipped))))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method,setting,trainable_parameters,auc_full,auc_flipped\n")
        for r in rows:
            fh.write(f"{r.method},{r.setting},{r.trainable_parameters},"
                     f"{r.auc_full!r},{r.auc_flipped!r}\n")
