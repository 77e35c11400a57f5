"""Open-set inference: reject flat, low-confidence outputs, classify the rest."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .networks import predict_proba

UNKNOWN = -1
THETA_NUDGE = 1e-6


@dataclass(frozen=True)
class RecognitionOutcome:
    known: bool
    family: int = None
    confidence: float = None

    @classmethod
    def unknown(cls, confidence=None):
        return cls(False, None, confidence)

    def __str__(self):
        if not self.known:
            return "Unknown"
        return f"Known({self.family}, {self.confidence:.4f})"


def _check_theta(theta):
    if not 0 < theta < 1:
        raise InvalidConfigError(f"threshold must lie strictly inside (0, 1), got {theta}")


def detect(probs, theta):
    """True when every class probability is strictly below ``theta``."""
    _check_theta(theta)
    p = np.asarray(probs)
    return np.all(p < theta, axis=-1)


def classify(probs):
    """Index of the largest probability; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1)


def recognize_probs(probs, theta):
    """Vectorised decision over a ``(n, k)`` probability matrix.

    Returns ``(family, confidence)`` arrays where ``family`` is ``-1`` for
    instances rejected as unknown.
    """
    probs = np.asarray(probs)
    unknown = detect(probs, theta)
    family = np.where(unknown, UNKNOWN, classify(probs))
    return family.astype(np.int64), probs.max(axis=-1)


def recognize(clf, instance, theta):
    """Detect first, then classify a single instance."""
    x = np.asarray(instance, dtype=np.float32).reshape(1, -1)
    probs = predict_proba(clf, x)[0]
    conf = float(probs.max())
    if detect(probs, theta):
        return RecognitionOutcome.unknown(conf)
    return RecognitionOutcome(True, int(classify(probs)), conf)


# ---------------------------------------------------------------------------
# threshold calibration

@dataclass(frozen=True)
class ThresholdPolicy:
    kind: str = "percentile"   # fixed | percentile | sweep
    value: float = 5.0          # theta for fixed, q for percentile
    grid: tuple = ()

    @classmethod
    def parse(cls, text):
        """``fixed:0.5``, ``percentile:5`` or ``sweep:0.1,0.2,...``."""
        kind, _, rest = text.partition(":")
        kind = kind.strip().lower()
        if kind == "fixed":
            return cls("fixed", float(rest))
        if kind == "percentile":
            return cls("percentile", float(rest) if rest else 5.0)
        if kind == "sweep":
            grid = tuple(float(v) for v in rest.split(",") if v.strip())
            return cls("sweep", grid=grid)
        raise InvalidConfigError(f"unknown threshold policy {text!r}")

    def describe(self):
        if self.kind == "sweep":
            return "sweep:" + ",".join(str(v) for v in self.grid)
        return f"{self.kind}:{self.value:g}"


def _clamp_theta(theta):
    return float(min(max(theta, THETA_NUDGE), 1.0 - THETA_NUDGE))


def percentile_threshold(max_probs, q):
    mp = np.asarray(max_probs, dtype=np.float64)
    if mp.size == 0:
        raise InvalidInputError("percentile calibration needs a non-empty validation set")
    return _clamp_theta(np.percentile(mp, q, method="linear"))


def calibrate_threshold(clf, validation, policy, calibration_unknown=None):
    """Resolve a :class:`ThresholdPolicy` to a concrete threshold.

    ``validation`` holds known-family instances.  The sweep policy also needs
    ``calibration_unknown`` (held-out pseudo-unknown instances) and picks the
    grid value with the best detection accuracy.
    """
    if policy.kind == "fixed":
        _check_theta(policy.value)
        return float(policy.value)
    validation = np.asarray(validation, dtype=np.float32)
    if policy.kind == "percentile":
        if len(validation) == 0:
            raise InvalidInputError("percentile calibration needs a non-empty validation set")
        return percentile_threshold(predict_proba(clf, validation).max(axis=1), policy.value)
    if policy.kind == "sweep":
        if not policy.grid:
            raise InvalidConfigError("sweep policy needs a non-empty grid")
        if calibration_unknown is None or len(calibration_unknown) == 0 or len(validation) == 0:
            raise InvalidInputError("sweep calibration needs known and pseudo-unknown instances")
        known_mp = predict_proba(clf, validation).max(axis=1)
        unk_mp = predict_proba(clf, calibration_unknown).max(axis=1)
        best, best_acc = None, -1.0
        for theta in policy.grid:
            _check_theta(theta)
            acc = 0.5 * (np.mean(known_mp >= theta) + np.mean(unk_mp < theta))
            if acc > best_acc:
                best, best_acc = theta, acc
        return float(best)
    raise InvalidConfigError(f"unknown threshold policy kind {policy.kind!r}")


def write_outcomes_csv(path, family, confidence, instance_ids=None):
    """``instance_id,decision,family,confidence`` with an empty family for unknowns."""
    if instance_ids is None:
        instance_ids = range(len(family))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "decision", "family", "confidence"])
        for iid, fam, conf in zip(instance_ids, family, confidence):
            if fam == UNKNOWN:
                w.writerow([iid, "unknown", "", f"{conf:.9g}"])
            else:
                w.writerow([iid, "known", int(fam), f"{conf:.9g}"])
