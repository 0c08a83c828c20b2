"""Metrics, probability-averaging ensembles, cross-domain matrices, and the
leakage-verification experiments."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MetricsReport",
    "CrossDomainMatrix",
    "VerificationReport",
    "compute_metrics",
    "ensemble_predict",
    "cross_domain_eval",
    "verify_no_leakage",
]


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray  # rows = true class, cols = predicted class
    n: int
    domain_tag: str = ""
    zero_division_events: int = 0

    def to_dict(self):
        return {
            "domain_tag": self.domain_tag,
            "n": self.n,
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "confusion": np.asarray(self.confusion).astype(int).tolist(),
            "zero_division_events": self.zero_division_events,
        }


def compute_metrics(pred_labels, true_labels, num_classes=2, domain_tag=""):
    """Accuracy plus macro precision/recall/F1 from the confusion matrix.

    Per-class ratios with an empty denominator use the 0/0 -> 0 convention;
    each such event is counted in the report.
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError(f"label vectors must match 1-d: {pred.shape} vs {true.shape}")
    n = pred.shape[0]
    if n < 1:
        raise ValueError("compute_metrics: need at least one sample")
    if pred.min(initial=0) < 0 or pred.max(initial=0) >= num_classes \
            or true.min(initial=0) < 0 or true.max(initial=0) >= num_classes:
        raise ValueError(f"labels out of range for {num_classes} classes")

    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    zero_events = 0
    precisions, recalls, f1s = [], [], []
    for c in range(num_classes):
        tp = cm[c, c]
        col = cm[:, c].sum()
        row = cm[c, :].sum()
        if col == 0:
            precisions.append(0.0)
            zero_events += 1
        else:
            precisions.append(tp / col)
        if row == 0:
            recalls.append(0.0)
            zero_events += 1
        else:
            recalls.append(tp / row)
        p, r = precisions[-1], recalls[-1]
        if p + r == 0:
            f1s.append(0.0)
            zero_events += 1
        else:
            f1s.append(2 * p * r / (p + r))
    return MetricsReport(
        accuracy=float(np.trace(cm) / n),
        macro_precision=float(np.mean(precisions)),
        macro_recall=float(np.mean(recalls)),
        macro_f1=float(np.mean(f1s)),
        confusion=cm,
        n=n,
        domain_tag=domain_tag,
        zero_division_events=zero_events,
    )


def ensemble_predict(models, x):
    """Arithmetic mean of each model's predicted probabilities.

    Member outputs are summed in a content-canonical order so the result is
    exactly invariant to model ordering; an ensemble of value-identical
    members returns the member probabilities bit-for-bit.
    """
    from .model import predict_proba

    if not models:
        raise ValueError("ensemble_predict: need at least one model")
    classes = {m.config.num_classes for m in models}
    if len(classes) > 1:
        raise ValueError(f"ensemble members disagree on class count: {sorted(classes)}")
    probs = [predict_proba(m, x) for m in models]
    first = probs[0]
    if all(np.array_equal(p, first) for p in probs[1:]):
        return first.copy()
    order = sorted(range(len(probs)), key=lambda i: probs[i].tobytes())
    acc = np.zeros(first.shape, dtype=np.float64)
    for i in order:
        acc += probs[i]
    return (acc / len(probs)).astype(first.dtype)


@dataclass
class CrossDomainMatrix:
    """Grid of MetricsReport cells: rows = training domain, cols = eval domain."""

    train_domains: list
    eval_domains: list
    cells: dict  # (train_domain, eval_domain) -> MetricsReport

    def accuracy_grid(self):
        g = np.zeros((len(self.train_domains), len(self.eval_domains)))
        for i, r in enumerate(self.train_domains):
            for j, c in enumerate(self.eval_domains):
                g[i, j] = self.cells[(r, c)].accuracy
        return g

    def to_rows(self):
        """Flat rows for CSV: train_domain, eval_domain, then metric columns."""
        rows = []
        for r in self.train_domains:
            for c in self.eval_domains:
                m = self.cells[(r, c)]
                rows.append({
                    "train_domain": r,
                    "eval_domain": c,
                    "n": m.n,
                    "accuracy": m.accuracy,
                    "macro_precision": m.macro_precision,
                    "macro_recall": m.macro_recall,
                    "macro_f1": m.macro_f1,
                })
        return rows


def cross_domain_eval(models, datasets):
    """Evaluate every model on every test set (Fig. 3-style grid)."""
    from .trainer import evaluate

    if not models or not datasets:
        raise ValueError("cross_domain_eval: empty model or dataset map")
    train_domains = sorted(models)
    eval_domains = sorted(datasets)
    cells = {}
    for r in train_domains:
        for c in eval_domains:
            cells[(r, c)] = evaluate(
                models[r], datasets[c], domain_tag=f"{r}->{c}"
            )
    return CrossDomainMatrix(train_domains, eval_domains, cells)


# ---------------------------------------------------------------------------
# leakage verification


@dataclass
class VerificationReport:
    experiment_a_pass: bool
    experiment_b_pass: bool
    checkpoint_sha_true: str = ""
    checkpoint_sha_rewritten: str = ""
    per_epoch_class_loss: list = field(default_factory=list)
    target_accuracy: float = float("nan")
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return self.experiment_a_pass and self.experiment_b_pass

    def to_text(self):
        lines = [
            f"experiment A (target-label rewrite -> identical checkpoint): "
            f"{'PASS' if self.experiment_a_pass else 'FAIL'}",
            f"  checkpoint sha256 (true labels):      {self.checkpoint_sha_true}",
            f"  checkpoint sha256 (rewritten labels): {self.checkpoint_sha_rewritten}",
            f"experiment B (target-only training stays at chance): "
            f"{'PASS' if self.experiment_b_pass else 'FAIL'}",
            f"  per-epoch class loss: {self.per_epoch_class_loss}",
            f"  balanced target accuracy: {self.target_accuracy:.4f}",
        ]
        lines += [f"note: {n}" for n in self.notes]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_no_leakage(cfg, source, target, model_config=None, workdir=None,
                      inject_leak=None):
    """Run the two architecture-verification experiments.

    A: train twice under one seed, once with the target's true class labels
    and once with them rewritten to zeros; the saved checkpoints must be
    byte-identical, proving target labels cannot reach any gradient.
    B: train on the target only (no source); the class loss must be exactly
    zero every epoch and final accuracy on the balanced target must sit in
    [0.45, 0.55] (chance).
    """
    import dataclasses
    import tempfile

    from .data import LabeledImageSet
    from .model import DannConfig, build_dann, desk_config
    from .trainer import evaluate, save_checkpoint, train

    if model_config is None:
        model_config = desk_config(input_shape=target.image_shape)
    if workdir is None:
        workdir = tempfile.mkdtemp(prefix="grla_verify_")
    os.makedirs(workdir, exist_ok=True)
    report = VerificationReport(False, False)

    # --- experiment A: rewrite target labels, demand bit-identical training
    rewritten = LabeledImageSet(
        target.images.copy(),
        np.zeros_like(target.class_labels),
        target.domain_id,
        dict(target.sublabel_map),
    )
    paths = {}
    for tag, tgt_set in (("true", target), ("rewritten", rewritten)):
        model = build_dann(model_config)
        model, manifest = train(model, source, tgt_set, cfg,
                                inject_leak=inject_leak)
        path = os.path.join(workdir, f"exp_a_{tag}.grla")
        save_checkpoint(model, manifest, path)
        paths[tag] = path
    report.checkpoint_sha_true = _sha256_file(paths["true"])
    report.checkpoint_sha_rewritten = _sha256_file(paths["rewritten"])
    with open(paths["true"], "rb") as f1, open(paths["rewritten"], "rb") as f2:
        report.experiment_a_pass = f1.read() == f2.read()
    if not report.experiment_a_pass:
        report.notes.append(
            "target class labels changed the trained parameters: leakage"
        )

    # --- experiment B: target-only training cannot learn the class task
    model = build_dann(model_config)
    model, manifest = train(model, None, target, cfg, inject_leak=inject_leak)
    losses = [r["class_loss"] for r in manifest.records]
    report.per_epoch_class_loss = losses
    metrics = evaluate(model, target, domain_tag="target")
    report.target_accuracy = metrics.accuracy
    loss_ok = all(v == 0.0 for v in losses)
    acc_ok = 0.45 <= metrics.accuracy <= 0.55
    report.experiment_b_pass = loss_ok and acc_ok
    if not loss_ok:
        report.notes.append("class loss was nonzero with no source rows: leakage")
    if not acc_ok:
        report.notes.append(
            f"target-only accuracy {metrics.accuracy:.3f} departs from chance"
        )
    return report
