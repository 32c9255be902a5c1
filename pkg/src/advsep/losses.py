"""Differentiable losses on the representation ``z`` and/or the logits ``g``.

A loss exposes ``evaluate(z, g) -> (values, dz, dg)`` where ``values`` holds
one unweighted loss per row and ``dz``/``dg`` are gradients of the weighted
total (either may be ``None``). :func:`advsep.tensor.evaluate` chains them
back through the head and the layers.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import softmax


class Loss:
    needs_head = False

    def __init__(self, weights=None):
        self.weights = None if weights is None else np.asarray(weights, dtype=np.float64)

    def total(self, values) -> float:
        if self.weights is None:
            return float(np.sum(values))
        return float(np.dot(self.weights, values))

    def _weigh(self, grad_rows):
        if self.weights is None:
            return grad_rows
        return grad_rows * self.weights[:, None]

    def evaluate(self, z, g):  # pragma: no cover - interface
        raise NotImplementedError


class CenterDistance(Loss):
    """``||z - mu||_2`` per row; ``squared=True`` gives ``||z - mu||^2``.

    At ``z == mu`` the unsquared gradient is taken as zero.
    """

    def __init__(self, targets, squared=False, weights=None):
        super().__init__(weights)
        self.targets = np.asarray(targets, dtype=np.float64)
        self.squared = squared

    def evaluate(self, z, g):
        diff = z - self.targets
        sq = np.einsum("nm,nm->n", diff, diff)
        if self.squared:
            return sq, self._weigh(2.0 * diff), None
        dist = np.sqrt(sq)
        safe = np.where(dist > 0.0, dist, 1.0)
        dz = np.where(dist[:, None] > 0.0, diff / safe[:, None], 0.0)
        return dist, self._weigh(dz), None


class CrossEntropy(Loss):
    needs_head = True

    def __init__(self, labels, weights=None):
        super().__init__(weights)
        self.labels = np.asarray(labels, dtype=np.int64)

    def evaluate(self, z, g):
        n = g.shape[0]
        y = np.broadcast_to(self.labels, (n,))
        s = g - g.max(axis=1, keepdims=True)
        lse = np.log(np.exp(s).sum(axis=1))
        values = lse - s[np.arange(n), y]
        dg = softmax(g)
        dg[np.arange(n), y] -= 1.0
        return values, None, self._weigh(dg)


def cw_logit_loss(g, y, y_target=None, kappa=0.0) -> float:
    """Hinged logit margin of a single logit vector.

    Untargeted: ``max(g[y] - max_{i != y} g[i], -kappa)``.
    Targeted: ``max(max_{i != t} g[i] - g[t], -kappa)``.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or g.shape[0] < 2:
        raise ValueError("cw_logit_loss needs a logit vector with at least 2 classes")
    loss = CWLogit(np.array([y]), None if y_target is None else np.array([y_target]), kappa)
    return float(loss.evaluate(None, g[None, :])[0][0])


class CWLogit(Loss):
    needs_head = True

    def __init__(self, labels, targets=None, kappa=0.0, weights=None):
        super().__init__(weights)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.targets = None if targets is None else np.asarray(targets, dtype=np.int64)
        self.kappa = np.asarray(kappa, dtype=np.float64)

    def evaluate(self, z, g):
        n, k = g.shape
        if k < 2:
            raise ValueError("CW logit loss needs at least 2 classes")
        rows = np.arange(n)
        anchor = np.broadcast_to(self.labels if self.targets is None else self.targets, (n,))
        others = g.copy()
        others[rows, anchor] = -np.inf
        rival = np.argmax(others, axis=1)  # lowest index on ties
        margin = g[rows, anchor] - g[rows, rival]
        sign = 1.0 if self.targets is None else -1.0
        raw = sign * margin
        values = np.maximum(raw, -self.kappa)
        active = raw > -self.kappa
        dg = np.zeros_like(g)
        dg[rows[active], anchor[active]] = sign
        dg[rows[active], rival[active]] = -sign
        return values, None, self._weigh(dg)


class DistanceLogits(Loss):
    """Run a logit loss on ``g_c = -||z - mu_c||`` over the given centers.

    Lets CE / CW objectives target nearest-center classifiers that have no head.
    """

    def __init__(self, inner, centers):
        super().__init__(None)
        self.inner = inner
        self.centers = np.asarray(centers, dtype=np.float64)

    def total(self, values):
        return self.inner.total(values)

    def evaluate(self, z, g):
        d = kernels.center_distances(z, self.centers)
        values, _, dg = self.inner.evaluate(None, -d)
        diff = z[:, None, :] - self.centers[None, :, :]
        safe = np.where(d > 0.0, d, 1.0)
        unit = np.where(d[:, :, None] > 0.0, diff / safe[:, :, None], 0.0)
        dz = -np.einsum("nc,ncm->nm", dg, unit)
        return values, dz, None


class WrongCenterDistance(Loss):
    """Distance to a wrong-class center, minus an optional per-class offset.

    With ``targets`` the center is fixed per row; otherwise it is the nearest
    center whose class differs from the label. This is the detection metric an
    adaptive attacker drives down against a nearest-center detector.
    """

    def __init__(self, centers, labels, targets=None, offsets=None, weights=None):
        super().__init__(weights)
        self.centers = np.asarray(centers, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.targets = None if targets is None else np.asarray(targets, dtype=np.int64)
        self.offsets = None if offsets is None else np.asarray(offsets, dtype=np.float64)

    def chosen(self, z):
        n = z.shape[0]
        if self.targets is not None:
            return np.broadcast_to(self.targets, (n,)).copy()
        d = kernels.center_distances(z, self.centers)
        d[np.arange(n), np.broadcast_to(self.labels, (n,))] = np.inf
        return np.argmin(d, axis=1)

    def evaluate(self, z, g):
        c = self.chosen(z)
        diff = z - self.centers[c]
        dist = np.sqrt(np.einsum("nm,nm->n", diff, diff))
        safe = np.where(dist > 0.0, dist, 1.0)
        dz = np.where(dist[:, None] > 0.0, diff / safe[:, None], 0.0)
        values = dist if self.offsets is None else dist - self.offsets[c]
        return values, self._weigh(dz), None


class ConfidenceGap(Loss):
    """``1 - max softmax(g)`` minus an optional per-predicted-class offset."""

    needs_head = True

    def __init__(self, offsets=None, weights=None):
        super().__init__(weights)
        self.offsets = None if offsets is None else np.asarray(offsets, dtype=np.float64)

    def evaluate(self, z, g):
        n = g.shape[0]
        p = softmax(g)
        top = np.argmax(p, axis=1)
        pm = p[np.arange(n), top]
        values = 1.0 - pm
        if self.offsets is not None:
            values = values - self.offsets[top]
        # d(1 - p_m)/dg = -p_m (e_m - p)
        dg = pm[:, None] * p
        dg[np.arange(n), top] -= pm
        return values, None, self._weigh(dg)


class Zero(Loss):
    def evaluate(self, z, g):
        return np.zeros(z.shape[0] if z is not None else g.shape[0]), None, None


class Scaled(Loss):
    """``factor * inner``; ``Scaled(L, -1)`` turns a maximised loss into a minimised one."""

    def __init__(self, inner, factor):
        super().__init__(None)
        self.inner = inner
        self.factor = float(factor)
        self.needs_head = inner.needs_head

    def total(self, values):
        return self.inner.total(values)

    def evaluate(self, z, g):
        values, dz, dg = self.inner.evaluate(z, g)
        f = self.factor
        return (
            f * values,
            None if dz is None else f * dz,
            None if dg is None else f * dg,
        )


class Composite(Loss):
    """``base + sign * extra`` with gradients summed."""

    def __init__(self, base, extra, sign=1.0):
        super().__init__(None)
        self.base = base
        self.extra = extra
        self.sign = float(sign)
        self.needs_head = base.needs_head or extra.needs_head

    def total(self, values):
        return self.base.total(values)

    def evaluate(self, z, g):
        bv, bdz, bdg = self.base.evaluate(z, g)
        ev, edz, edg = self.extra.evaluate(z, g)
        s = self.sign
        values = bv + s * ev
        dz = _add(bdz, None if edz is None else s * edz)
        dg = _add(bdg, None if edg is None else s * edg)
        return values, dz, dg


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b
