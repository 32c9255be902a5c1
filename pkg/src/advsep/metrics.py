"""ROC AUC, expected ROC AUC over predicted classes (EROC) and attack success ratios."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .datasets import Dataset
from .detector import DetectorModel, scores


class EmptyEligibleSetError(ValueError):
    pass


def roc_auc(pos_scores, neg_scores) -> float:
    """P(random positive outscores random negative), ties counting one half."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("roc_auc needs at least one positive and one negative score")
    return kernels.rank_auc(pos, neg)


def eroc(per_class) -> float:
    """Weighted mean of per-class AUCs.

    ``per_class`` is a sequence of ``(pos_scores, neg_scores, adv_count)``;
    weights are ``adv_count / sum(adv_count)``. Classes with no adversarial
    examples contribute nothing and may have empty score lists.
    """
    return eroc_details(per_class)[0]


def eroc_details(per_class):
    counts = np.array([c for _, _, c in per_class], dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("eroc needs at least one adversarial example")
    aucs, weights = [], []
    for (pos, neg, c), w in zip(per_class, counts / total):
        if c == 0:
            aucs.append(float("nan"))
            weights.append(0.0)
            continue
        aucs.append(roc_auc(pos, neg))
        weights.append(float(w))
    # count-weighted sum over the total: stays <= 1 exactly when every AUC is 1
    value = float(sum(c * a for c, a in zip(counts, aucs) if c > 0) / total)
    return value, aucs, weights


def eroc_for_detector(det: DetectorModel, benign_x, adv_x):
    """EROC with class-conditional negatives.

    Adversarial examples are grouped by predicted class ``i``; their detection
    scores are the positives of class ``i``. Benign examples predicted as ``i``
    are the negatives. Classes with adversarial examples but no benign
    negatives are dropped and the weights renormalised.
    """
    b_pred, b_s = scores(det, benign_x)
    a_pred, a_s = scores(det, adv_x)
    per_class = []
    for c in range(det.k):
        pos, neg = a_s[a_pred == c], b_s[b_pred == c]
        count = len(pos) if len(neg) else 0
        per_class.append((pos, neg, count))
    return eroc_details(per_class)


def eligible_mask(det: DetectorModel, x, y) -> np.ndarray:
    """Correctly classified and not flagged before any attack."""
    pred, s = scores(det, x)
    return (pred == np.asarray(y)) & (s - det.thresholds[pred] <= 0.0)


def success_mask(det: DetectorModel, x_adv, y, target=None) -> np.ndarray:
    """Wrong class (the target class, when targeted) and undetected."""
    pred, s = scores(det, x_adv)
    flipped = pred != np.asarray(y) if target is None else pred == np.asarray(target)
    return flipped & (s - det.thresholds[pred] <= 0.0)


def asr(det: DetectorModel, attack_fn, test_data: Dataset, eligibility: DetectorModel | None = None, classifier_fn=None):
    """Attack success ratio at ``det``'s calibrated thresholds.

    Examples are eligible when ``eligibility`` (default: ``det``) classifies
    them correctly and does not flag them. ``attack_fn(x, y) -> x_adv`` is run
    on the eligible rows only. ``classifier_fn`` overrides the class used for
    the success test.
    """
    ref = eligibility or det
    ok = eligible_mask(ref, test_data.inputs, test_data.labels)
    if not ok.any():
        raise EmptyEligibleSetError("no eligible examples")
    x, y = test_data.inputs[ok], test_data.labels[ok]
    x_adv = attack_fn(x, y)
    if classifier_fn is None:
        hit = success_mask(det, x_adv, y)
    else:
        pred, s = scores(det, x_adv)
        hit = (np.asarray(classifier_fn(x_adv)) != y) & (s - det.thresholds[pred] <= 0.0)
    return float(hit.mean())


def asr_from_adversarials(det: DetectorModel, y, x_adv, target=None) -> float:
    """ASR of pre-computed adversarial rows, all assumed eligible."""
    if len(y) == 0:
        raise EmptyEligibleSetError("no eligible examples")
    return float(success_mask(det, x_adv, y, target).mean())


@dataclass
class EvalReport:
    attack_name: str
    norm: str
    epsilon: float
    targeted: bool = False
    alpha: float | None = None
    iters: int | None = None
    asr_by_p: dict = field(default_factory=dict)
    eroc: float | None = None
    per_class_auc: list = field(default_factory=list)
    per_class_weight: list = field(default_factory=list)
    n_eligible: int = 0
    seed: int = 0
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        for p, v in self.asr_by_p.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"ASR-{p} = {v} outside [0, 1]")
        if self.eroc is not None and not 0.0 <= self.eroc <= 1.0:
            raise ValueError("EROC outside [0, 1]")

    def worst_asr(self) -> float:
        return self.asr_by_p[min(self.asr_by_p)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["asr_by_p"] = {_p_key(k): v for k, v in sorted(self.asr_by_p.items())}
        d["per_class_auc"] = [None if a != a else a for a in self.per_class_auc]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _p_key(p) -> str:
    p = float(p)
    return str(int(p)) if p == int(p) else repr(p)


def sweep_worst_case(eval_fn, alpha_grid, k_fixed) -> EvalReport:
    """Run ``eval_fn(alpha, k)`` for every alpha; keep the report with the highest ASR.

    ASR is compared at the most conservative (smallest) ``p``; ties go to the
    higher EROC loss, i.e. the lower EROC, then to the earlier alpha.
    """
    if len(alpha_grid) == 0:
        raise ValueError("alpha_grid must not be empty")
    best = None
    for alpha in alpha_grid:
        rep = eval_fn(alpha, k_fixed)
        if best is None:
            best = rep
            continue
        key = (rep.worst_asr(), -(rep.eroc if rep.eroc is not None else 1.0))
        best_key = (best.worst_asr(), -(best.eroc if best.eroc is not None else 1.0))
        if key > best_key:
            best = rep
    return best
