"""Gradient-based evasion attacks: FGSM, PGD, MIM and a CW-logit search.

Every attack *minimises* the loss built by :meth:`AttackObjective.loss`.
Untargeted objectives are stored negated, so a descent step on them is the
usual ascent step on the classification loss, and targeted objectives are
minimised directly. Inputs are rows in [0, 1]; a single 1-d example works too.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .. import kernels
from ..losses import (
    CenterDistance,
    Composite,
    CrossEntropy,
    CWLogit,
    DistanceLogits,
    Loss,
    Scaled,
)
from ..tensor import MlpModel, input_grad, loss_values

INF = float("inf")
NORMS = (INF, 2.0, 1.0, 0.0)


def parse_norm(p) -> float:
    if isinstance(p, str):
        key = p.strip().lower().lstrip("l")
        if key in ("inf", "infty", "infinity"):
            return INF
        p = float(key)
    p = float(p)
    if p not in NORMS:
        raise ValueError(f"unsupported norm {p!r}; use one of 0, 1, 2, inf")
    return p


def norm_name(p) -> str:
    p = parse_norm(p)
    return "linf" if p == INF else f"l{int(p)}"


@dataclass(frozen=True)
class AttackConfig:
    norm: float = INF
    epsilon: float = 0.3
    alpha: float = 0.01
    iters: int = 1000
    targeted: bool = False
    momentum_decay: float = 0.0
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "norm", parse_norm(self.norm))
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.iters >= 1 and self.alpha <= 0:
            raise ValueError("alpha must be > 0 when iters >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not 0.0 <= self.momentum_decay <= 1.0:
            raise ValueError("momentum_decay must lie in [0, 1]")
        if self.norm == 0.0 and float(self.epsilon) != int(self.epsilon):
            raise ValueError("l0 budgets count coordinates; epsilon must be an integer")

    def replace(self, **changes) -> AttackConfig:
        return replace(self, **changes)


@dataclass
class AttackObjective:
    """What an attack minimises.

    ``base`` is ``"ce"``, ``"cw"`` or ``"center"``. With ``centers`` set, CE and
    CW act on ``-||z - mu_c||`` over those centers (nearest-center classifiers
    have no head) and ``"center"`` uses the distance to ``mu_y`` / ``mu_target``.
    ``metric(labels, targets)`` builds the detector metric q; when present the
    objective is ``base + q_sign * q``.
    """

    base: str = "ce"
    centers: np.ndarray | None = None
    kappa: float | np.ndarray = 0.0
    metric: Callable | None = None
    q_sign: float = 1.0

    def __post_init__(self):
        if self.base not in ("ce", "cw", "center"):
            raise ValueError(f"unknown base objective {self.base!r}")
        if self.base == "center" and self.centers is None:
            raise ValueError("center objective needs centers")

    def base_loss(self, y, target=None) -> Loss:
        y = np.asarray(y, dtype=np.int64)
        if self.base == "center":
            if target is None:
                return Scaled(CenterDistance(self.centers[y]), -1.0)
            return CenterDistance(self.centers[np.asarray(target)])
        if self.base == "ce":
            inner = Scaled(CrossEntropy(y), -1.0) if target is None else CrossEntropy(target)
        else:
            inner = CWLogit(y, target, self.kappa)
        if self.centers is not None:
            return DistanceLogits(inner, self.centers)
        return inner

    def loss(self, y, target=None) -> Loss:
        base = self.base_loss(y, target)
        if self.metric is None:
            return base
        return Composite(base, self.metric(y, target), self.q_sign)

    def with_kappa(self, kappa) -> AttackObjective:
        return replace(self, kappa=kappa)


def adapt(base: AttackObjective, q: Callable, q_sign: float = 1.0) -> AttackObjective:
    """Add a differentiable detector metric to ``base``.

    Detectors that flag inputs when ``q > 0`` are evaded by driving q down,
    hence ``q_sign=+1`` under the minimisation convention. Use ``-1`` for
    metrics that flag when they are too low.
    """
    return replace(base, metric=q, q_sign=q_sign)


# ---------------------------------------------------------------- geometry


def _rows(a):
    a = np.asarray(a, dtype=np.float64)
    return (a[None, :], True) if a.ndim == 1 else (a, False)


def _l2_rows(a):
    # scale by the row max first so tiny rows do not square into subnormals
    m = np.abs(a).max(axis=1, initial=0.0)
    safe = np.where(m > 0.0, m, 1.0)
    u = a / safe[:, None]
    return m * np.sqrt(np.einsum("nd,nd->n", u, u))


def step_direction(g, p) -> np.ndarray:
    """Steepest-ascent direction of unit ``p``-norm step for gradient ``g`` (row-wise)."""
    p = parse_norm(p)
    g2, single = _rows(g)
    if p == INF:
        out = np.sign(g2)
    elif p == 2.0:
        nrm = _l2_rows(g2)
        safe = np.where(nrm > 0.0, nrm, 1.0)
        out = np.where(nrm[:, None] > 0.0, g2 / safe[:, None], 0.0)
    else:
        idx = np.argmax(np.abs(g2), axis=1)
        rows = np.arange(g2.shape[0])
        out = np.zeros_like(g2)
        out[rows, idx] = np.sign(g2[rows, idx])
    return out[0] if single else out


def project(delta, p, epsilon) -> np.ndarray:
    """Nearest point of the ``p``-ball of radius ``epsilon`` (row-wise).

    For ``p=0`` the ``epsilon`` largest-magnitude coordinates are kept.
    """
    p = parse_norm(p)
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    d2, single = _rows(delta)
    if p == INF:
        out = np.clip(d2, -epsilon, epsilon)
    elif p == 2.0:
        nrm = _l2_rows(d2)
        over = nrm > epsilon * (1.0 + kernels.BALL_SLACK)
        scale = np.where(over, epsilon / np.where(over, nrm, 1.0), 1.0)
        out = d2 * scale[:, None]
    elif p == 1.0:
        out = kernels.project_l1_rows(d2, epsilon)
    else:
        if float(epsilon) != int(epsilon):
            raise ValueError("l0 budgets count coordinates; epsilon must be an integer")
        out = kernels.project_l0_rows(d2, int(epsilon))
    return out[0] if single else out


def lp_norm(delta, p) -> np.ndarray:
    p = parse_norm(p)
    d2, single = _rows(delta)
    if p == INF:
        out = np.abs(d2).max(axis=1, initial=0.0)
    elif p == 0.0:
        out = np.count_nonzero(d2, axis=1).astype(np.float64)
    elif p == 2.0:
        out = _l2_rows(d2)
    else:
        out = np.linalg.norm(d2, ord=p, axis=1)
    return out[0] if single else out


def _projected_step(x0, xt, direction, alpha, p, epsilon):
    delta = project(xt - alpha * direction - x0, p, epsilon)
    return np.clip(x0 + delta, 0.0, 1.0)


def _random_start(rng, x0, p, epsilon):
    n, d = x0.shape
    if p == INF:
        delta = rng.uniform(-epsilon, epsilon, size=(n, d))
    elif p == 2.0:
        u = rng.standard_normal((n, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        delta = u * epsilon * rng.uniform(size=(n, 1)) ** (1.0 / d)
    elif p == 1.0:
        delta = rng.laplace(size=(n, d))
        delta *= epsilon * rng.uniform(size=(n, 1)) / np.abs(delta).sum(axis=1, keepdims=True)
    else:
        delta = rng.uniform(-1.0, 1.0, size=(n, d))
    return np.clip(x0 + project(delta, p, epsilon), 0.0, 1.0)


def _check_targets(cfg, target):
    if cfg.targeted and target is None:
        raise ValueError("targeted attack needs target labels")
    return target if cfg.targeted else None


# ---------------------------------------------------------------- attacks


def fgsm(model: MlpModel, objective: AttackObjective, x, y, epsilon, p=INF, target=None) -> np.ndarray:
    x2, single = _rows(x)
    loss = objective.loss(y, target)
    _, g = input_grad(model, x2, loss)
    out = _projected_step(x2, x2, step_direction(g, p), epsilon, parse_norm(p), epsilon)
    return out[0] if single else out


def _iterate(model, objective, x, y, cfg: AttackConfig, target, decay):
    x2, single = _rows(x)
    if cfg.iters == 0 or cfg.epsilon == 0:
        out = x2.copy()
        return out[0] if single else out
    p, eps, alpha = cfg.norm, cfg.epsilon, cfg.alpha
    loss = objective.loss(y, target)
    rng = np.random.default_rng(cfg.seed)
    best_x = x2.copy()
    best_j = np.full(x2.shape[0], np.inf)
    for r in range(cfg.restarts):
        xt = x2.copy() if r == 0 else _random_start(rng, x2, p, eps)
        v = np.zeros_like(x2)
        for t in range(cfg.iters):
            j, g = input_grad(model, xt, loss)
            if t > 0:
                better = j < best_j
                best_j[better] = j[better]
                best_x[better] = xt[better]
            if decay > 0.0:
                l1 = np.abs(g).sum(axis=1, keepdims=True)
                v = decay * v + g / np.where(l1 > 0.0, l1, 1.0)
            else:
                v = g
            xt = _projected_step(x2, xt, step_direction(v, p), alpha, p, eps)
        j = loss_values(model, xt, loss)
        better = j < best_j
        best_j[better] = j[better]
        best_x[better] = xt[better]
    return best_x[0] if single else best_x


def pgd(model: MlpModel, objective: AttackObjective, x, y, cfg: AttackConfig, target=None) -> np.ndarray:
    """Projected gradient descent on the objective; returns the best iterate seen.

    Candidates are the iterates after at least one step, across all restarts.
    Restart 0 starts at ``x``; later restarts start at a random point of the ball.
    """
    return _iterate(model, objective, x, y, cfg, _check_targets(cfg, target), 0.0)


def mim(model: MlpModel, objective: AttackObjective, x, y, cfg: AttackConfig, target=None) -> np.ndarray:
    """PGD driven by an l1-normalised gradient velocity with decay ``cfg.momentum_decay``."""
    return _iterate(model, objective, x, y, cfg, _check_targets(cfg, target), cfg.momentum_decay)


def objective_values(model, objective: AttackObjective, x, y, target=None) -> np.ndarray:
    x2, single = _rows(x)
    out = loss_values(model, x2, objective.loss(y, target))
    return out[0] if single else out


def best_of(model, objective, x, y, candidates, target=None) -> np.ndarray:
    """Row-wise pick of the candidate with the lowest objective (first wins ties)."""
    best = np.array(candidates[0], dtype=np.float64, copy=True)
    best_j = objective_values(model, objective, best, y, target)
    for cand in candidates[1:]:
        j = objective_values(model, objective, cand, y, target)
        better = j < best_j
        best[better] = np.asarray(cand)[better]
        best_j = np.where(better, j, best_j)
    return best


def cw(
    model,
    objective: AttackObjective,
    x,
    y,
    cfg: AttackConfig,
    target=None,
    kappa_range=(0.0, 10.0),
    searches: int = 5,
    success_fn=None,
) -> np.ndarray:
    """PGD on the CW logit objective with a per-example binary search over kappa.

    A round that succeeds (``success_fn(x_adv) -> bool mask``; default: the
    objective's hinge reached ``-kappa``) raises kappa, a failed round lowers it.
    Each row returns its highest-kappa success, or the first round's output.
    """
    if objective.base != "cw":
        objective = replace(objective, base="cw")
    x2, single = _rows(x)
    y = np.broadcast_to(np.asarray(y), (x2.shape[0],))
    lo = np.full(x2.shape[0], float(kappa_range[0]))
    hi = np.full(x2.shape[0], float(kappa_range[1]))
    kappa = lo.copy()
    result = None
    found = np.zeros(x2.shape[0], dtype=bool)
    for _ in range(searches):
        obj = objective.with_kappa(kappa.copy())
        adv = pgd(model, obj, x2, y, cfg, target)
        if success_fn is None:
            base = obj.base_loss(y, _check_targets(cfg, target))
            ok = loss_values(model, adv, base) <= -kappa
        else:
            ok = np.asarray(success_fn(adv), dtype=bool)
        if result is None:
            result = adv.copy()
        result[ok] = adv[ok]
        found |= ok
        lo = np.where(ok, kappa, lo)
        hi = np.where(ok, hi, kappa)
        kappa = (lo + hi) / 2.0
    return result[0] if single else result
