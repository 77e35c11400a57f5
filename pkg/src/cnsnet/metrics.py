"""Classification and detection accuracy, confusion matrices and reports.

Predictions are integer arrays of known-family indices, with ``-1``
marking an instance rejected as unknown.
"""

import json
from fractions import Fraction
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UndefinedMetricError
from .recognition import UNKNOWN


def classification_accuracy(predicted, labels):
    """Share of known test instances accepted *and* assigned the right family."""
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    if labels.size == 0:
        raise UndefinedMetricError("classification accuracy of an empty set")
    return float(np.mean(predicted == labels))


def conditional_accuracy(predicted, labels):
    """Accuracy restricted to known instances that were not rejected."""
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    accepted = predicted != UNKNOWN
    if not accepted.any():
        raise UndefinedMetricError("no known instance was accepted")
    return float(np.mean(predicted[accepted] == labels[accepted]))


@dataclass
class DetectionCounts:
    tp_k: int
    fn_k: int
    tn_u: int
    fp_u: int

    @classmethod
    def from_predictions(cls, predicted, is_known):
        predicted, is_known = np.asarray(predicted), np.asarray(is_known, dtype=bool)
        accepted = predicted != UNKNOWN
        return cls(int(np.sum(accepted & is_known)), int(np.sum(~accepted & is_known)),
                   int(np.sum(~accepted & ~is_known)), int(np.sum(accepted & ~is_known)))

    def rates(self):
        if self.tp_k + self.fn_k == 0 or self.tn_u + self.fp_u == 0:
            raise UndefinedMetricError("detection rates need known and unknown instances")
        # exact rationals, rounded once, so (90, 10, 80, 20) gives 0.85 and not 0.8500000000000001
        tpr = Fraction(self.tp_k, self.tp_k + self.fn_k)
        tnr = Fraction(self.tn_u, self.tn_u + self.fp_u)
        return float(tpr), float(tnr), float((tpr + tnr) / 2)


def detection_rates(predicted, is_known):
    """``(TPR, TNR, D_Acc)`` from predictions and ground-truth known flags."""
    return DetectionCounts.from_predictions(predicted, is_known).rates()


def confusion_matrix(predicted, labels, k):
    """``k x k`` counts indexed ``[predicted][truth]`` plus per-family rejections.

    Instances rejected as unknown are left out of the matrix and counted in
    the returned rejection vector instead.
    """
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    cm = np.zeros((k, k), dtype=np.int64)
    accepted = predicted != UNKNOWN
    np.add.at(cm, (predicted[accepted], labels[accepted]), 1)
    rejected = np.bincount(labels[~accepted], minlength=k).astype(np.int64)
    return cm, rejected


def per_family_accuracy(cm, rejected):
    """Diagonal over column totals (rejections count as misses)."""
    totals = cm.sum(axis=0) + rejected
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, np.diag(cm) / np.maximum(totals, 1), np.nan)


@dataclass
class MetricsReport:
    c_acc: float
    c_acc_conditional: float
    tpr_known: float
    tnr_unknown: float
    d_acc: float
    counts: dict
    confusion: list
    rejected_per_family: list
    threshold: float
    config_digest: str = ""
    detection_defined: bool = True
    extra: dict = field(default_factory=dict)

    def to_json(self, path=None):
        """Serialize; the detection fields are left out when undefined."""
        d = asdict(self)
        if not self.detection_defined:
            for key in ("tpr_known", "tnr_unknown", "d_acc"):
                d.pop(key)
        text = json.dumps(d, indent=2, sort_keys=True)
        if path:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def build_report(known_pred, known_labels, unknown_pred, k, threshold, config_digest=""):
    """Assemble every metric for one evaluation.

    When no unknown instances are present the detection block is left as
    ``None`` and ``detection_defined`` is false.
    """
    known_pred = np.asarray(known_pred)
    unknown_pred = np.asarray(unknown_pred, dtype=np.int64)
    c_acc = classification_accuracy(known_pred, known_labels)
    try:
        c_cond = conditional_accuracy(known_pred, known_labels)
    except UndefinedMetricError:
        c_cond = None
    cm, rejected = confusion_matrix(known_pred, known_labels, k)
    pred = np.concatenate([known_pred, unknown_pred])
    is_known = np.concatenate([np.ones(len(known_pred), bool), np.zeros(len(unknown_pred), bool)])
    counts = DetectionCounts.from_predictions(pred, is_known)
    defined = len(unknown_pred) > 0
    if defined:
        tpr, tnr, d_acc = counts.rates()
    else:
        tpr = tnr = d_acc = None
    return MetricsReport(c_acc, c_cond, tpr, tnr, d_acc, asdict(counts), cm.tolist(),
                         rejected.tolist(), float(threshold), config_digest, defined)
