"""Detection-performance metrics and backdoor efficacy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .features import extract_features
from .traffic import inject_backdoor


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    youdens_j: float
    backdoor_accuracy: float | None = None
    undefined: list = field(default_factory=list)   # metric names reported as 0 for 0/0


def confusion(labels, predictions) -> Confusion:
    """Counts with attack (1) as the positive class."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape or labels.ndim != 1:
        raise ValueError("labels and predictions must be equal-length vectors")
    if len(labels) == 0:
        raise ValueError("empty inputs")
    tp = int(np.sum((labels == 1) & (predictions == 1)))
    fp = int(np.sum((labels == 0) & (predictions == 1)))
    tn = int(np.sum((labels == 0) & (predictions == 0)))
    fn = int(np.sum((labels == 1) & (predictions == 0)))
    return Confusion(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def metrics_report(conf: Confusion) -> MetricsReport:
    """Accuracy, precision, recall, F1 and Youden's J from a confusion matrix.

    0/0 ratios are reported as 0 and listed in the undefined field rather
    than propagating NaNs.
    """
    undefined = []
    accuracy = _ratio(conf.tp + conf.tn, conf.total, "accuracy", undefined)
    precision = _ratio(conf.tp, conf.tp + conf.fp, "precision", undefined)
    recall_def = conf.tp + conf.fn > 0
    spec_def = conf.tn + conf.fp > 0
    recall = _ratio(conf.tp, conf.tp + conf.fn, "recall", undefined)
    specificity = conf.tn / (conf.tn + conf.fp) if spec_def else 0.0
    if recall_def and spec_def:
        youdens_j = recall + specificity - 1.0
    else:
        undefined.append("youdens_j")
        youdens_j = 0.0
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", undefined)
    return MetricsReport(accuracy=accuracy, precision=precision, recall=recall,
                         f1=f1, youdens_j=youdens_j, undefined=undefined)


def backdoored_features(flows) -> np.ndarray:
    """Raw feature matrix of the backdoored copies of the given flows."""
    return np.stack([extract_features(inject_backdoor(f)) for f in flows])


def backdoor_accuracy(scorer, attack_flows, target_label=0) -> float:
    """Fraction of backdoored attack flows the scorer assigns the target label.

    The scorer maps raw feature matrices to scores in [0,1] and is expected
    to apply the model's own normalization internally (see
    explain.forest_predictor / explain.mlp_predictor).
    """
    if not attack_flows:
        raise ValueError("no attack flows given")
    if any(f.label != 1 for f in attack_flows):
        raise ValueError("backdoor accuracy is defined on attack-labeled flows")
    scores = scorer(backdoored_features(attack_flows))
    labels = (np.asarray(scores) >= 0.5).astype(int)
    return float(np.mean(labels == target_label))


def report_to_dict(report: MetricsReport) -> dict:
    out = {
        "accuracy": report.accuracy,
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "youdens_j": report.youdens_j,
    }
    if report.backdoor_accuracy is not None:
        out["backdoor_accuracy"] = report.backdoor_accuracy
    if report.undefined:
        out["undefined"] = list(report.undefined)
    return out


def write_report_json(report: MetricsReport, path):
    with open(path, "w") as fh:
        json.dump(report_to_dict(report), fh, indent=2)
        fh.write("\n")
