"""Attacks without victim gradients: NES, Boundary and Transfer."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .whitebox import (
    AttackConfig,
    AttackObjective,
    _projected_step,
    _rows,
    pgd,
    step_direction,
)

# rows of (chunk x samples x dim) evaluated per query batch
_QUERY_CHUNK = 4_000_000


@dataclass
class QueryBudget:
    max_queries: int
    used: int = 0

    def __post_init__(self):
        if self.max_queries < 0 or not 0 <= self.used <= self.max_queries:
            raise ValueError("need 0 <= used <= max_queries")

    @property
    def remaining(self) -> int:
        return self.max_queries - self.used

    def spend(self, n: int) -> bool:
        """Spend ``n`` queries if they fit; return whether they did."""
        if n > self.remaining:
            return False
        self.used += n
        return True


def _nes_batch(fn, x2, sigma, n, rng):
    b, d = x2.shape
    half = n // 2
    out = np.empty_like(x2)
    step = max(1, _QUERY_CHUNK // max(1, n * d))
    for s in range(0, b, step):
        xs = x2[s : s + step]
        u = rng.standard_normal((len(xs), half, d))
        plus = (xs[:, None, :] + sigma * u).reshape(-1, d)
        minus = (xs[:, None, :] - sigma * u).reshape(-1, d)
        rows = np.repeat(np.arange(s, s + len(xs)), half)
        fp = np.asarray(fn(plus, rows), dtype=np.float64).reshape(len(xs), half)
        fm = np.asarray(fn(minus, rows), dtype=np.float64).reshape(len(xs), half)
        # pairwise differences first: a constant function cancels exactly
        out[s : s + step] = np.einsum("bj,bjd->bd", fp - fm, u) / (sigma * n)
    return out


def nes_grad(prob_fn, x, sigma: float, n: int, seed) -> np.ndarray:
    """Antithetic NES estimate of the gradient of ``prob_fn`` at ``x``.

    ``prob_fn`` maps a batch ``(N, d)`` to ``N`` scalars. The estimate is
    ``1/(sigma n) * sum_j f(x + sigma u_j) u_j`` with ``u_j`` standard normal in
    ``(u, -u)`` pairs. Rows of a 2-d ``x`` are estimated independently.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if n < 2 or n % 2:
        raise ValueError("n must be a positive even number (antithetic pairs)")
    x2, single = _rows(x)
    rng = np.random.default_rng(seed)
    out = _nes_batch(lambda pts, rows: prob_fn(pts), x2, sigma, n, rng)
    return out[0] if single else out


@dataclass
class BlackboxResult:
    x_adv: np.ndarray
    queries: np.ndarray  # per example
    exhausted: np.ndarray = None  # per example: query budget ran out
    found: np.ndarray = None  # boundary: an adversarial start existed
    log: list = field(default_factory=list)  # boundary: (iter, queries, distance, accepted) for row 0


def nes_attack(
    victim_probs_fn,
    x,
    y,
    cfg: AttackConfig,
    sigma: float,
    n: int,
    target=None,
    max_queries: int | None = None,
) -> BlackboxResult:
    """PGD with NES gradient estimates of ``log p_y`` (untargeted) or ``-log p_t`` (targeted).

    Each step spends ``n + 1`` queries per example (the estimate plus scoring the
    new iterate); an example stops once its next step would exceed ``max_queries``
    and keeps its best iterate so far.
    """
    x2, single = _rows(x)
    m = x2.shape[0]
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (m,))
    if cfg.targeted and target is None:
        raise ValueError("targeted attack needs target labels")
    anchor = np.broadcast_to(np.asarray(target if cfg.targeted else y, dtype=np.int64), (m,))
    sign = -1.0 if cfg.targeted else 1.0

    def objective(pts, rows):
        p = np.asarray(victim_probs_fn(pts))
        return sign * np.log(np.maximum(p[np.arange(len(rows)), anchor[rows]], 1e-300))

    budget = [QueryBudget(max_queries if max_queries is not None else 2**62) for _ in range(m)]
    rng = np.random.default_rng(cfg.seed)
    xt = x2.copy()
    best = x2.copy()
    best_j = np.full(m, np.inf)
    alive = np.ones(m, dtype=bool)
    exhausted = np.zeros(m, dtype=bool)
    for _ in range(cfg.iters):
        for i in np.flatnonzero(alive):
            if not budget[i].spend(n + 1):
                alive[i] = False
                exhausted[i] = True
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        g = _nes_batch(lambda pts, rows: objective(pts, idx[rows]), xt[idx], sigma, n, rng)
        xt[idx] = _projected_step(x2[idx], xt[idx], step_direction(g, cfg.norm), cfg.alpha, cfg.norm, cfg.epsilon)
        j = objective(xt[idx], idx)
        better = j < best_j[idx]
        best[idx[better]] = xt[idx[better]]
        best_j[idx[better]] = j[better]
    queries = np.array([b.used for b in budget])
    if single:
        return BlackboxResult(best[0], queries[:1], exhausted[:1])
    return BlackboxResult(best, queries, exhausted)


@dataclass
class BoundaryParams:
    orthogonal_step: float = 1e-2  # relative to the current distance
    contraction_step: float = 1e-2
    adapt_every: int = 10
    max_init: int = 1000


class BoundaryStartError(RuntimeError):
    pass


def boundary_attack(
    label_fn,
    x,
    y,
    iters: int,
    seed,
    step_params: BoundaryParams | None = None,
    strict: bool = True,
) -> BlackboxResult:
    """Decision-based random walk along the decision boundary (l2 geometry).

    Starts from a uniform sample of [0, 1]^d that ``label_fn`` does not map to
    ``y``. Each iteration proposes an orthogonal step on the sphere around ``x``
    followed by a contraction toward ``x``; the proposal is accepted only if it
    is still misclassified and strictly closer. Step sizes scale by 1.1 / 0.9
    toward 50% sphere-step and 25% proposal acceptance. Rows with no start
    raise :class:`BoundaryStartError` when ``strict`` and are returned unchanged
    with ``found=False`` otherwise.
    """
    sp = step_params or BoundaryParams()
    x2, single = _rows(x)
    m, d = x2.shape
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (m,))
    rng = np.random.default_rng(seed)
    queries = np.zeros(m, dtype=np.int64)

    adv = x2.copy()
    found = np.zeros(m, dtype=bool)
    for _ in range(sp.max_init):
        todo = np.flatnonzero(~found)
        if len(todo) == 0:
            break
        cand = rng.uniform(0.0, 1.0, size=(len(todo), d))
        queries[todo] += 1
        ok = np.asarray(label_fn(cand)) != y[todo]
        adv[todo[ok]] = cand[ok]
        found[todo[ok]] = True
    if strict and not found.all():
        raise BoundaryStartError(f"no adversarial start for {int((~found).sum())} example(s)")

    act = np.flatnonzero(found)
    dist = np.linalg.norm(adv - x2, axis=1)
    d_orth = np.full(m, sp.orthogonal_step)
    d_con = np.full(m, sp.contraction_step)
    sphere_hits = np.zeros(m)
    accepts = np.zeros(m)
    log = [(0, int(queries[0]), float(dist[0]), False)] if found[0] else []
    for t in range(1, iters + 1):
        if len(act) == 0:
            break
        xa, aa, da = x2[act], adv[act], dist[act]
        diff = aa - xa
        unit = diff / da[:, None]
        eta = rng.standard_normal((len(act), d))
        eta -= np.einsum("nd,nd->n", eta, unit)[:, None] * unit
        eta *= (d_orth[act] * da / np.linalg.norm(eta, axis=1))[:, None]
        moved = diff + eta
        sphere = np.clip(xa + moved * (da / np.linalg.norm(moved, axis=1))[:, None], 0.0, 1.0)
        cand = np.clip(sphere + d_con[act][:, None] * (xa - sphere), 0.0, 1.0)
        both = np.asarray(label_fn(np.concatenate([sphere, cand])))
        queries[act] += 2
        on_sphere = both[: len(act)] != y[act]
        cd = np.linalg.norm(cand - xa, axis=1)
        ok = (both[len(act) :] != y[act]) & (cd < da)
        adv[act[ok]] = cand[ok]
        dist[act[ok]] = cd[ok]
        sphere_hits[act] += on_sphere
        accepts[act] += ok
        if act[0] == 0:
            log.append((t, int(queries[0]), float(dist[0]), bool(ok[0])))
        if t % sp.adapt_every == 0:
            rate_s = sphere_hits[act] / sp.adapt_every
            rate_a = accepts[act] / sp.adapt_every
            d_orth[act] = np.minimum(d_orth[act] * np.where(rate_s > 0.5, 1.1, 0.9), 1.0)
            d_con[act] = np.minimum(d_con[act] * np.where(rate_a > 0.25, 1.1, 0.9), 0.9)
            sphere_hits[act] = 0.0
            accepts[act] = 0.0
    if single:
        return BlackboxResult(adv[0], queries[:1], found=found[:1], log=log)
    return BlackboxResult(adv, queries, found=found, log=log)


def write_query_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "queries", "distance", "accepted"])
        for it, q, dist, acc in log:
            w.writerow([it, q, repr(dist), int(acc)])


@dataclass
class TransferResult:
    x_adv: np.ndarray
    victim_labels: np.ndarray
    success_rate: float


def transfer_attack(surrogate, victim_eval_fn, x, y, cfg: AttackConfig, objective=None, target=None) -> TransferResult:
    """Whitebox PGD on a surrogate classifier, replayed against the victim.

    The surrogate is a classifier the attacker trained on the victim's training
    data; ``victim_eval_fn`` returns the victim's labels for a batch.
    """
    objective = objective or AttackObjective("ce")
    x_adv = pgd(surrogate, objective, x, y, cfg, target)
    pred = np.asarray(victim_eval_fn(np.atleast_2d(x_adv)))
    ref = np.broadcast_to(np.asarray(target if cfg.targeted else y), pred.shape)
    hit = pred == ref if cfg.targeted else pred != ref
    return TransferResult(x_adv, pred, float(hit.mean()) if hit.size else 0.0)

