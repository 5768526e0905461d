"""Loss-based membership inference and the canary label-flip audit.

The attack scores each sample with its negative loss (members tend to have
lower loss), then measures separation between the training split (members)
and the held-out split (nonmembers) as ROC AUC. AUC is computed two ways —
the Mann-Whitney rank statistic with average-rank ties, and the trapezoidal
area of the threshold-sweep ROC — from shared integer pair counts, so the
two agree exactly.

Canaries are deliberately mislabelled training and test records; the AUC
restricted to that flipped subset (losses taken against the flipped labels)
isolates worst-case memorisation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import ParameterRegistry, forward_classify, loss_per_sample
from .rng import rng_stream

DEFAULT_CANARIES_PER_SPLIT = 30


# ---------------------------------------------------------------------------
# AUC / ROC
# ---------------------------------------------------------------------------

def _rank_auc(member_scores: np.ndarray, nonmember_scores: np.ndarray) -> float:
    """P(member score > nonmember score) + 0.5 P(equal), via average ranks."""
    m, n = len(member_scores), len(nonmember_scores)
    scores = np.concatenate([member_scores, nonmember_scores])
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(m + n)
    i = 0
    while i < m + n:
        j = i
        while j + 1 < m + n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average of ranks i+1..j+1
        i = j + 1
    u2 = int(round(2.0 * ranks[:m].sum())) - m * (m + 1)  # 2U is integral
    return u2 / (2.0 * m * n)


def roc_points(member_scores: np.ndarray, nonmember_scores: np.ndarray) -> list[tuple[float, float]]:
    """Threshold-sweep ROC: predict member when score >= threshold.

    Points run from (0,0) to (1,1), monotone in both coordinates; tied
    scores contribute diagonal segments.
    """
    m, n = len(member_scores), len(nonmember_scores)
    thresholds = np.unique(np.concatenate([member_scores, nonmember_scores]))[::-1]
    points = [(0.0, 0.0)]
    tp = fp = 0
    for t in thresholds:
        tp += int((member_scores == t).sum())
        fp += int((nonmember_scores == t).sum())
        points.append((fp / n, tp / m))
    return points


def _roc_area_exact(member_scores: np.ndarray, nonmember_scores: np.ndarray) -> float:
    """Trapezoidal ROC area from integer cumulative counts (no rounding drift)."""
    m, n = len(member_scores), len(nonmember_scores)
    thresholds = np.unique(np.concatenate([member_scores, nonmember_scores]))[::-1]
    area2 = 0  # accumulates 2 * area * m * n as an exact integer
    tp = fp = 0
    for t in thresholds:
        tp_next = tp + int((member_scores == t).sum())
        fp_next = fp + int((nonmember_scores == t).sum())
        area2 += (fp_next - fp) * (tp + tp_next)
        tp, fp = tp_next, fp_next
    return area2 / (2.0 * m * n)


@dataclass
class AttackReport:
    roc: list = field(default_factory=list)
    auc_full: float | None = None
    auc_flipped: float | None = None
    flipped_train_accuracy: list | None = None  # per-epoch series, set by the harness

    def summary_line(self) -> str:
        full = "nan" if self.auc_full is None else f"{self.auc_full:.6f}"
        flipped = "nan" if self.auc_flipped is None else f"{self.auc_flipped:.6f}"
        return f"auc_full={full} auc_flipped={flipped}"


def mia_loss_attack(member_losses, nonmember_losses) -> AttackReport:
    """Black-box loss MIA: score = -loss, report ROC and rank-statistic AUC."""
    member = np.asarray(member_losses, dtype=np.float64)
    nonmember = np.asarray(nonmember_losses, dtype=np.float64)
    if member.size == 0 or nonmember.size == 0:
        raise ContractError("member and nonmember loss sets must be non-empty")
    ms, ns = -member, -nonmember
    report = AttackReport(roc=roc_points(ms, ns), auc_full=_rank_auc(ms, ns))
    return report


def roc_area(report: AttackReport) -> float:
    """Trapezoidal integral of a report's own ROC curve."""
    pts = report.roc
    return sum((x1 - x0) * (y0 + y1) * 0.5
               for (x0, y0), (x1, y1) in zip(pts, pts[1:]))


def write_roc_csv(report: AttackReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fpr,tpr\n")
        for fpr, tpr in report.roc:
            fh.write(f"{fpr!r},{tpr!r}\n")


# ---------------------------------------------------------------------------
# loss traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossRecord:
    sample_id: int
    split: str  # "member" | "nonmember"
    flipped: bool
    epoch: int
    loss: float


class LossTrace:
    """Per-sample, per-epoch loss records feeding the attack metrics."""

    CSV_HEADER = "sample_id,split,flipped,epoch,loss"

    def __init__(self):
        self.records: list[LossRecord] = []
        self._seen: set[tuple] = set()

    def add(self, sample_id: int, split: str, flipped: bool, epoch: int, loss: float) -> None:
        if split not in ("member", "nonmember"):
            raise ContractError(f"split must be member|nonmember, got {split!r}")
        key = (split, epoch, sample_id)
        if key in self._seen:
            raise ContractError(f"duplicate sample {sample_id} in {split} at epoch {epoch}")
        self._seen.add(key)
        self.records.append(LossRecord(int(sample_id), split, bool(flipped), int(epoch), float(loss)))

    def epochs(self) -> list[int]:
        return sorted({r.epoch for r in self.records})

    def losses(self, split: str, epoch: int, flipped_only: bool = False) -> np.ndarray:
        vals = [r.loss for r in self.records
                if r.split == split and r.epoch == epoch and (r.flipped or not flipped_only)]
        return np.asarray(vals)

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.CSV_HEADER + "\n")
            for r in self.records:
                fh.write(f"{r.sample_id},{r.split},{int(r.flipped)},{r.epoch},{r.loss!r}\n")

    @classmethod
    def load_csv(cls, path) -> "LossTrace":
        trace = cls()
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != cls.CSV_HEADER:
                raise ContractError(f"unexpected loss-trace header {header!r}")
            for line in fh:
                sid, split, flipped, epoch, loss = line.strip().split(",")
                trace.add(int(sid), split, bool(int(flipped)), int(epoch), float(loss))
        return trace


def auc_at_final_epoch(trace: LossTrace) -> float:
    """Full-set MIA AUC using only the last epoch's losses."""
    if not trace.records:
        raise ContractError("empty loss trace")
    final = trace.epochs()[-1]
    member = trace.losses("member", final)
    nonmember = trace.losses("nonmember", final)
    if member.size == 0 or nonmember.size == 0:
        raise ContractError(f"final epoch {final} missing a split")
    return mia_loss_attack(member, nonmember).auc_full


# ---------------------------------------------------------------------------
# canary flipping and audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CanaryEntry:
    split: str  # "train" | "test"
    sample_id: int
    original_label: int
    new_label: int


@dataclass
class CanaryManifest:
    entries: list

    def ids(self, split: str) -> set[int]:
        return {e.sample_id for e in self.entries if e.split == split}

    def new_labels(self, split: str) -> dict[int, int]:
        return {e.sample_id: e.new_label for e in self.entries if e.split == split}

    def save_json(self, path) -> None:
        payload = [{"split": e.split, "sample_id": e.sample_id,
                    "original_label": e.original_label, "new_label": e.new_label}
                   for e in self.entries]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"entries": payload}, fh, indent=2)

    @classmethod
    def load_json(cls, path) -> "CanaryManifest":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        entries = [CanaryEntry(e["split"], int(e["sample_id"]),
                               int(e["original_label"]), int(e["new_label"]))
                   for e in payload["entries"]]
        return cls(entries)


def flip_canaries(train_corpus, test_corpus, k: int, seed: int, n_classes: int):
    """Mislabel k training and k test records, uniformly chosen and seeded.

    Labels move y -> (y + u) mod n_classes with u uniform over 1..n_classes-1
    (for binary tasks simply 1 - y). Returns poisoned copies of both corpora
    plus the manifest of what changed.
    """
    for name, corpus in (("train", train_corpus), ("test", test_corpus)):
        if k > len(corpus):
            raise ContractError(f"k={k} exceeds {name} split size {len(corpus)}")
    if n_classes < 2:
        raise ContractError("n_classes must be at least 2")
    rng = rng_stream(seed, "canary-selection")
    entries = []
    poisoned = []
    for split_name, corpus in (("train", train_corpus), ("test", test_corpus)):
        picked = rng.choice(len(corpus), size=k, replace=False)
        flips = {}
        for idx in sorted(int(i) for i in picked):
            rec = corpus.records[idx]
            u = int(rng.integers(1, n_classes))
            new_label = (rec.label + u) % n_classes
            flips[rec.id] = new_label
            entries.append(CanaryEntry(split_name, rec.id, rec.label, new_label))
        poisoned.append(corpus.with_flipped_labels(flips))
    manifest = CanaryManifest(entries)
    return poisoned[0], poisoned[1], manifest


def per_sample_losses(reg: ParameterRegistry, encoded, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode per-sample cross-entropy over an encoded split."""
    out = []
    for start in range(0, len(encoded.labels), batch_size):
        sl = slice(start, start + batch_size)
        logits = forward_classify(reg, encoded.token_ids[sl], encoded.mask[sl], training=False)
        out.append(loss_per_sample(logits, encoded.labels[sl]).data)
    return np.concatenate(out) if out else np.zeros(0)


def canary_audit(reg: ParameterRegistry, train_encoded, test_encoded,
                 manifest: CanaryManifest) -> AttackReport:
    """MIA on the poisoned dataset plus the flipped-subset AUC.

    Losses are computed against the labels as trained on — i.e. the flipped
    labels for canaries in both splits. The flipped-subset AUC compares the
    k flipped training members against the k flipped test nonmembers.
    """
    for split_name, enc in (("train", train_encoded), ("test", test_encoded)):
        want = manifest.ids(split_name)
        have = {int(s) for s, f in zip(enc.sample_ids, enc.flipped) if f}
        if want != have:
            raise ContractError(f"manifest does not match {split_name} split "
                                f"(manifest {len(want)} flipped, data {len(have)})")
        labels = manifest.new_labels(split_name)
        for sid, flag, label in zip(enc.sample_ids, enc.flipped, enc.labels):
            if flag and labels[int(sid)] != int(label):
                raise ContractError(f"{split_name} sample {sid} label differs from manifest")

    train_losses = per_sample_losses(reg, train_encoded)
    test_losses = per_sample_losses(reg, test_encoded)
    report = mia_loss_attack(train_losses, test_losses)
    flipped_report = mia_loss_attack(train_losses[train_encoded.flipped],
                                     test_losses[test_encoded.flipped])
    report.auc_flipped = flipped_report.auc_full
    return report


def flipped_train_accuracy(reg: ParameterRegistry, train_encoded, batch_size: int = 256) -> float:
    """Accuracy on flipped training samples, measured against flipped labels."""
    sel = np.flatnonzero(train_encoded.flipped)
    if sel.size == 0:
        raise ContractError("no flipped samples in the training split")
    correct = 0
    for start in range(0, sel.size, batch_size):
        idx = sel[start:start + batch_size]
        logits = forward_classify(reg, train_encoded.token_ids[idx], train_encoded.mask[idx],
                                  training=False)
        correct += int((logits.data.argmax(axis=1) == train_encoded.labels[idx]).sum())
    return correct / sel.size
