"""Unlearning metrics: UA/RA/TA, membership inference, metric gaps and Average Gap."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .augment import AugmentPolicy, apply_policy
from .datasets import Dataset, ForgetPartition
from .errors import FitError, InputError
from .models import Model, accuracy_from_predictions, argmax_lowest, predict
from .rng import stream
from .tensor import softmax

METRICS = ("UA", "RA", "TA", "MIA")


@dataclass
class MetricsRecord:
    UA: float
    RA: float
    TA: float
    MIA: float
    RTE: float = 0.0
    method: str = ""
    policy: str = ""
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for m in METRICS:
            v = getattr(self, m)
            if not 0 <= v <= 100:
                raise InputError(f"{m}={v} is not a percentage")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GapRecord:
    UA: float
    RA: float
    TA: float
    MIA: float
    mode: str = "per-seed"

    @property
    def AG(self) -> float:
        return average_gap(self)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.UA, self.RA, self.TA, self.MIA)


@dataclass(frozen=True)
class MiaAttacker:
    """Flags a sample as a training member when its true-class confidence exceeds ``threshold``."""

    threshold: float
    fit_accuracy: float
    n_members: int
    n_nonmembers: int

    def is_member(self, confidence) -> np.ndarray:
        return np.asarray(confidence) > self.threshold


# ---------------------------------------------------------------- accuracies


def _maybe_augment(data: Dataset, policy: AugmentPolicy | None, seed: int) -> np.ndarray:
    if policy is None or policy.is_identity:
        return data.images
    return np.stack([apply_policy(policy, img, i, 0, seed) for i, img in enumerate(data.images)])


def core_accuracies(model: Model, partition: ForgetPartition, data: Dataset, test: Dataset,
                    policy: AugmentPolicy | None = None, seed: int = 0) -> tuple[float, float, float]:
    """(UA, RA, TA): accuracy on the forget set, the remain set and the test set.

    Clean images are used unless ``policy`` is given.
    """
    if partition.forget.size == 0 or partition.remain.size == 0 or len(test) == 0:
        raise InputError("UA/RA/TA need non-empty forget, remain and test sets")
    pred = argmax_lowest(predict(model, _maybe_augment(data, policy, seed)))
    tpred = argmax_lowest(predict(model, _maybe_augment(test, policy, seed)))
    return accuracies_from_predictions(pred, data.labels, partition, tpred, test.labels)


def accuracies_from_predictions(pred: np.ndarray, labels: np.ndarray, partition: ForgetPartition,
                                test_pred: np.ndarray, test_labels: np.ndarray) -> tuple[float, float, float]:
    return (accuracy_from_predictions(pred[partition.forget], labels[partition.forget]),
            accuracy_from_predictions(pred[partition.remain], labels[partition.remain]),
            accuracy_from_predictions(test_pred, test_labels))


def test_accuracy_excluding(model: Model, test: Dataset, excluded_class: int) -> float:
    keep = test.labels != excluded_class
    if not keep.any():
        raise InputError("no test samples left after excluding the forgotten class")
    return accuracy_from_predictions(argmax_lowest(predict(model, test.images[keep])), test.labels[keep])


# ---------------------------------------------------------------- membership inference


def true_class_confidence(model: Model, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    probs = softmax(predict(model, images).astype(np.float64))
    return probs[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)]


def fit_threshold(member_conf, nonmember_conf) -> MiaAttacker:
    """Threshold maximising balanced member/non-member accuracy; ties go to the lower threshold.

    Candidates are every observed confidence plus one value just below the
    minimum (which flags everything as a member).
    """
    mc = np.sort(np.asarray(member_conf, dtype=np.float64))
    nc = np.sort(np.asarray(nonmember_conf, dtype=np.float64))
    if mc.size == 0 or nc.size == 0:
        raise FitError("membership attacker needs both member and non-member samples")
    values = np.unique(np.concatenate([mc, nc]))
    candidates = np.concatenate([[np.nextafter(values[0], -np.inf)], values])
    # member iff confidence > t
    tpr = 1.0 - np.searchsorted(mc, candidates, side="right") / mc.size
    tnr = np.searchsorted(nc, candidates, side="right") / nc.size
    balanced = 0.5 * (tpr + tnr)
    best = int(np.argmax(balanced))
    return MiaAttacker(float(candidates[best]), float(100.0 * balanced[best]), int(mc.size), int(nc.size))


def balanced_attack_accuracy(attacker: MiaAttacker, member_conf, nonmember_conf) -> float:
    tpr = attacker.is_member(member_conf).mean()
    tnr = 1.0 - attacker.is_member(nonmember_conf).mean()
    return float(100.0 * 0.5 * (tpr + tnr))


def fit_mia_attacker(model: Model, members: Dataset, nonmembers: Dataset, seed: int,
                     max_samples: int | None = None) -> MiaAttacker:
    """Fit the confidence-threshold attacker on equal-size subsamples of members and non-members."""
    if len(members) == 0 or len(nonmembers) == 0:
        raise FitError("membership attacker needs both member and non-member samples")
    n = min(len(members), len(nonmembers))
    if max_samples is not None:
        n = min(n, max_samples)
    rng = stream(seed, "mia")
    mi = np.sort(rng.choice(len(members), size=n, replace=False))
    ni = np.sort(rng.choice(len(nonmembers), size=n, replace=False))
    mc = true_class_confidence(model, members.images[mi], members.labels[mi])
    nc = true_class_confidence(model, nonmembers.images[ni], nonmembers.labels[ni])
    return fit_threshold(mc, nc)


def mia_score_from_confidences(forget_conf, attacker: MiaAttacker) -> float:
    conf = np.asarray(forget_conf)
    if conf.size == 0:
        raise InputError("MIA score needs a non-empty forget set")
    return float(100.0 * int(attacker.is_member(conf).sum()) / conf.size)


def mia_score(model: Model, partition: ForgetPartition, data: Dataset, attacker: MiaAttacker) -> float:
    """Percentage of forget samples the attacker flags as training members."""
    if partition.forget.size == 0:
        raise InputError("MIA score needs a non-empty forget set")
    conf = true_class_confidence(model, data.images[partition.forget], data.labels[partition.forget])
    return mia_score_from_confidences(conf, attacker)


# ---------------------------------------------------------------- gaps


def metric_gap(mu_runs: Sequence[MetricsRecord], retrain_runs: Sequence[MetricsRecord],
               mode: str = "per-seed") -> GapRecord:
    """Absolute metric differences between unlearned runs and retrain runs.

    ``per-seed`` pairs runs by seed and averages ``|m_mu - m_retrain|``;
    ``of-means`` takes ``|mean(m_mu) - mean(m_retrain)|``.
    """
    if not mu_runs or not retrain_runs:
        raise InputError("metric gap needs at least one run on each side")
    if mode == "per-seed":
        retrain_by_seed = {r.seed: r for r in retrain_runs}
        if len(retrain_by_seed) != len(retrain_runs) or len({r.seed for r in mu_runs}) != len(mu_runs):
            raise InputError("duplicate seeds in per-seed gap")
        if {r.seed for r in mu_runs} != set(retrain_by_seed):
            raise InputError("per-seed gap needs the same seeds on both sides")
        gaps = {m: float(np.mean([abs(getattr(r, m) - getattr(retrain_by_seed[r.seed], m)) for r in mu_runs]))
                for m in METRICS}
    elif mode == "of-means":
        gaps = {m: abs(float(np.mean([getattr(r, m) for r in mu_runs]))
                       - float(np.mean([getattr(r, m) for r in retrain_runs]))) for m in METRICS}
    else:
        raise InputError(f"unknown gap mode {mode!r}")
    return GapRecord(mode=mode, **gaps)


def average_gap(gaps: GapRecord) -> float:
    return (gaps.UA + gaps.RA + gaps.TA + gaps.MIA) / 4
