"""Cluster-separation adversarial detector.

Benign representations of class ``c`` are trained toward the one-hot center
``mu_c``; adversarial representations (from a targeted attack run against the
current network during training) are trained toward an extra center ``mu_k``.
Inputs are classified by the nearest benign center and flagged when their
distance to it exceeds a per-class threshold.

Three modes share this interface:

``ours``
    benign terms toward ``mu_y``, adversarial terms toward ``mu_k``.
``l_ben``
    ablation: adversarial examples relabelled to their source class ``mu_y``.
``vanilla``
    cross-entropy classifier with a head; scores by ``1 - max softmax``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .attacks.whitebox import AttackConfig, AttackObjective, adapt, pgd
from .datasets import DataError, Dataset
from .losses import CenterDistance, ConfidenceGap, CrossEntropy, WrongCenterDistance
from .tensor import SGD, MlpModel, forward, grad, logits, model_arrays, model_from_arrays, softmax, write_npz

MODES = ("ours", "l_ben", "vanilla")
DETECTOR_FORMAT = "advsep-detector"


@dataclass(frozen=True)
class CenterSet:
    centers: np.ndarray  # (k + 1, k + 1); row k is the adversarial center
    k: int

    @property
    def m(self) -> int:
        return self.centers.shape[1]

    @property
    def benign(self) -> np.ndarray:
        return self.centers[: self.k]

    @property
    def adversarial(self) -> np.ndarray:
        return self.centers[self.k]


def make_centers(k: int) -> CenterSet:
    if k < 2:
        raise ValueError("need at least 2 classes")
    c = np.eye(k + 1)
    c.setflags(write=False)
    return CenterSet(c, k)


def center_loss(z, mu) -> float:
    """Euclidean (unsquared) distance ``||z - mu||_2``."""
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if z.shape != mu.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {mu.shape}")
    return float(np.sqrt(np.dot(z - mu, z - mu)))


def center_loss_grad(z, mu) -> np.ndarray:
    """``(z - mu) / ||z - mu||``; zero at ``z == mu``."""
    diff = np.asarray(z, dtype=np.float64) - mu
    d = np.sqrt(np.dot(diff, diff))
    return diff / d if d > 0 else np.zeros_like(diff)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    inner_attack: AttackConfig = field(
        default_factory=lambda: AttackConfig(epsilon=0.3, alpha=0.05, iters=10, targeted=True)
    )
    adv_ratio: float = 1.0
    adv_weight: float = 1.0
    regen_every: int = 1
    squared: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.adv_ratio < 0:
            raise ValueError("adv_ratio must be >= 0")
        if self.regen_every < 1:
            raise ValueError("regen_every must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 0, batch_size >= 1, lr > 0")


@dataclass
class DetectorModel:
    model: MlpModel
    centers: CenterSet
    thresholds: np.ndarray
    mode: str = "ours"
    history: list = field(default_factory=list)
    fpr_percent: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if self.thresholds.shape != (self.centers.k,) or np.any(self.thresholds < 0):
            raise ValueError("need one non-negative threshold per class")
        if self.mode == "vanilla":
            if self.model.num_classes != self.centers.k:
                raise ValueError("vanilla detector needs a k-way classifier head")
        elif self.model.rep_dim != self.centers.m:
            raise ValueError(f"representation dim {self.model.rep_dim} != center dim {self.centers.m}")

    @property
    def k(self) -> int:
        return self.centers.k

    def with_thresholds(self, thresholds, fpr_percent=None) -> DetectorModel:
        return replace(self, thresholds=np.asarray(thresholds, dtype=np.float64), fpr_percent=fpr_percent)


# ---------------------------------------------------------------- training


def _wrong_classes(rng, y, k):
    return (y + rng.integers(1, k, size=len(y))) % k


def _train(model, centers, data: Dataset, cfg: TrainConfig, mode):
    if data.labels.max(initial=0) >= centers.k:
        raise DataError("labels exceed the number of benign centers")
    model = model.copy()
    opt = SGD(cfg.lr, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 0])
    c_all = centers.centers
    use_adv = mode in ("ours", "l_ben") and cfg.adv_ratio > 0
    inner_obj = AttackObjective("center", centers=c_all)
    pool = None
    history = []
    step = 0
    n = len(data)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        target_rng = np.random.default_rng([cfg.seed, 1, epoch])
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = data.inputs[idx], data.labels[idx]
            w_ben = np.full(len(idx), 1.0 / len(idx))
            if not use_adv:
                loss = CenterDistance(c_all[yb], cfg.squared, w_ben)
                xin = xb
            else:
                if pool is None or step % cfg.regen_every == 0:
                    n_adv = max(1, int(round(cfg.adv_ratio * len(idx))))
                    src = idx[np.arange(n_adv) % len(idx)]
                    tgt = _wrong_classes(target_rng, data.labels[src], centers.k)
                    inner = cfg.inner_attack.replace(targeted=True, seed=cfg.inner_attack.seed + step)
                    x_adv = pgd(model, inner_obj, data.inputs[src], data.labels[src], inner, target=tgt)
                    pool = (x_adv, data.labels[src])
                x_adv, y_src = pool
                adv_targets = np.repeat(c_all[[centers.k]], len(y_src), axis=0) if mode == "ours" else c_all[y_src]
                xin = np.concatenate([xb, x_adv])
                w = np.concatenate([w_ben, np.full(len(y_src), cfg.adv_weight / len(y_src))])
                loss = CenterDistance(np.concatenate([c_all[yb], adv_targets]), cfg.squared, w)
            value, gp = grad(model, xin, loss)
            model = opt.step(model, gp)
            total += value
            batches += 1
            step += 1
        history.append(total / max(batches, 1))
    return model, history


def train_benign(model: MlpModel, centers: CenterSet, data: Dataset, cfg: TrainConfig) -> DetectorModel:
    """Minimise the mean distance of each representation to its class center."""
    trained, history = _train(model, centers, data, cfg, None)
    return DetectorModel(trained, centers, np.zeros(centers.k), "l_ben", history)


def train_separating(
    model: MlpModel, centers: CenterSet, data: Dataset, cfg: TrainConfig, mode: str = "ours"
) -> DetectorModel:
    """Benign terms toward ``mu_y`` plus adversarial terms toward ``mu_k`` (ours) or ``mu_y`` (l_ben).

    Adversarial examples come from targeted PGD toward a random wrong-class
    center, run against the current weights every ``cfg.regen_every`` batches.
    With ``adv_ratio == 0`` the trajectory is exactly that of :func:`train_benign`.
    """
    if mode not in ("ours", "l_ben"):
        raise ValueError("train_separating mode must be 'ours' or 'l_ben'")
    trained, history = _train(model, centers, data, cfg, mode)
    return DetectorModel(trained, centers, np.zeros(centers.k), mode, history)


def train_vanilla(model: MlpModel, data: Dataset, cfg: TrainConfig) -> DetectorModel:
    """Plain cross-entropy classifier; ``model`` must carry a k-way head."""
    k = data.num_classes
    if model.num_classes != k:
        raise ValueError("vanilla training needs a classifier head with one row per class")
    model = model.copy()
    opt = SGD(cfg.lr, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 0])
    history = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(data))
        total, batches = 0.0, 0
        for start in range(0, len(data), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss = CrossEntropy(data.labels[idx], np.full(len(idx), 1.0 / len(idx)))
            value, gp = grad(model, data.inputs[idx], loss)
            model = opt.step(model, gp)
            total += value
            batches += 1
        history.append(total / max(batches, 1))
    return DetectorModel(model, make_centers(k), np.zeros(k), "vanilla", history)


# ---------------------------------------------------------------- inference


def classify(det: DetectorModel, x) -> np.ndarray:
    """Nearest benign center (vanilla: argmax logits); lowest index wins ties."""
    return scores(det, x)[0]


def scores(det: DetectorModel, x):
    """Predicted class and raw detection score (larger = more suspicious)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if det.mode == "vanilla":
        p = softmax(logits(det.model, x2))
        pred = np.argmax(p, axis=1)
        s = 1.0 - p[np.arange(len(pred)), pred]
    else:
        d = kernels.center_distances(forward(det.model, x2), det.centers.benign)
        pred = np.argmin(d, axis=1)
        s = d[np.arange(len(pred)), pred]
    if single:
        return int(pred[0]), float(s[0])
    return pred, s


def detect_metric(det: DetectorModel, x):
    """``q(x) = score(x) - tau_c`` with ``c`` the predicted class; ``q > 0`` flags the input."""
    pred, s = scores(det, x)
    return s - det.thresholds[pred]


def probabilities(det: DetectorModel, x) -> np.ndarray:
    """Class probabilities exposed to query attackers (softmax of logits or of ``-distances``)."""
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if det.mode == "vanilla":
        return softmax(logits(det.model, x2))
    return softmax(-kernels.center_distances(forward(det.model, x2), det.centers.benign))


def calibrate_thresholds(det: DetectorModel, benign: Dataset, fpr_percent: float) -> DetectorModel:
    """Per-class thresholds at the ``(100 - p)``-th percentile of benign scores.

    Scores are grouped by predicted class; linear interpolation between order
    statistics. A class no benign example is predicted as falls back to the
    pooled percentile.
    """
    if not 0 < fpr_percent < 100:
        raise ValueError("fpr_percent must lie in (0, 100)")
    counts = benign.class_counts()
    if counts.min() < 20:
        raise DataError(f"calibration needs >= 20 benign examples per class, got {counts.min()}")
    pred, s = scores(det, benign.inputs)
    q = 100.0 - fpr_percent
    pooled = np.percentile(s, q)
    tau = np.array(
        [np.percentile(s[pred == c], q) if np.any(pred == c) else pooled for c in range(det.k)]
    )
    return det.with_thresholds(np.maximum(tau, 0.0), fpr_percent)


def metric_loss(det: DetectorModel, y, target=None):
    """Differentiable detector metric for adaptive attackers.

    Center modes use the distance to the target center or, untargeted, to the
    nearest wrong-class center. Vanilla uses ``1 - max softmax``. Both are
    offset by the calibrated thresholds so the value equals q once the input
    is classified as that class.
    """
    if det.mode == "vanilla":
        return ConfidenceGap(det.thresholds)
    return WrongCenterDistance(det.centers.benign, y, target, det.thresholds)


def adaptive_objective(det: DetectorModel, base: str = "cw", kappa: float = 0.0) -> AttackObjective:
    centers = None if det.mode == "vanilla" else det.centers.benign
    if base == "center" and centers is None:
        raise ValueError("center objective needs a center-based detector")
    plain = AttackObjective(base, centers=centers, kappa=kappa)
    return adapt(plain, lambda y, target: metric_loss(det, y, target), q_sign=1.0)


def base_objective(det: DetectorModel, base: str = "ce", kappa: float = 0.0) -> AttackObjective:
    centers = None if det.mode == "vanilla" else det.centers.benign
    return AttackObjective(base, centers=centers, kappa=kappa)


# ---------------------------------------------------------------- persistence


def save_detector(path, det: DetectorModel) -> None:
    arrays = {"format": np.array(DETECTOR_FORMAT), "version": np.array(1)}
    arrays.update(model_arrays(det.model, "model."))
    arrays["centers"] = det.centers.centers
    arrays["thresholds"] = det.thresholds
    arrays["history"] = np.asarray(det.history, dtype=np.float64)
    meta = {"mode": det.mode, "k": det.k, "fpr_percent": det.fpr_percent}
    arrays["detector_meta"] = np.array(json.dumps(meta, sort_keys=True))
    write_npz(path, arrays)


def load_detector(path) -> DetectorModel:
    with np.load(path, allow_pickle=False) as f:
        arrays = {k: f[k] for k in f.files}
    if str(arrays.get("format")) != DETECTOR_FORMAT:
        raise ValueError(f"{path} is not a detector checkpoint")
    meta = json.loads(str(arrays["detector_meta"]))
    centers = CenterSet(arrays["centers"], meta["k"])
    return DetectorModel(
        model_from_arrays(arrays, "model."),
        centers,
        arrays["thresholds"],
        meta["mode"],
        list(arrays["history"]),
        meta["fpr_percent"],
    )


def export_representations(det: DetectorModel, x, labels, is_adv, path) -> None:
    """CSV ``label,is_adv,z0..z{m-1}`` for external plotting."""
    z = forward(det.model, np.atleast_2d(x))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "is_adv"] + [f"z{i}" for i in range(z.shape[1])])
        for lab, adv, row in zip(labels, is_adv, z):
            w.writerow([int(lab), int(adv)] + [repr(float(v)) for v in row])
