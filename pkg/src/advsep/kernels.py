"""Hot inner loops, each in a numba flavour and a pure-numpy flavour.

The public names at the bottom of the module are bound to one flavour at
import time (see :mod:`advsep._accel`). Both flavours are importable under
their private names so tests and ``benchmarks/bench_kernels.py`` can compare
them directly.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# Norms within this relative slack of the radius count as inside the ball.
# Without it a second projection could nudge bits and break idempotence.
BALL_SLACK = 1e-12


# ---------------------------------------------------------------- l1 ball


def _project_l1_rows_np(v, eps):
    v = np.asarray(v, dtype=np.float64)
    n, d = v.shape
    if eps <= 0.0:
        return np.zeros_like(v)
    out = v.copy()
    a = np.abs(v)
    outside = a.sum(axis=1) > eps * (1.0 + BALL_SLACK)
    if not outside.any():
        return out
    ao = a[outside]
    u = -np.sort(-ao, axis=1)
    css = np.cumsum(u, axis=1)
    j = np.arange(1, d + 1, dtype=np.float64)
    cond = u - (css - eps) / j > 0.0
    cond[:, 0] = True  # exact arithmetic always keeps the largest entry; rounding may not
    rho = d - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (css[np.arange(len(rho)), rho] - eps) / (rho + 1.0)
    proj = np.sign(v[outside]) * np.maximum(ao - theta[:, None], 0.0)
    # cancellation in ao - theta can leave the sum a few ulps of |v| above eps
    s = np.abs(proj).sum(axis=1)
    over = s > eps * (1.0 + BALL_SLACK)
    proj[over] *= (eps / s[over])[:, None]
    out[outside] = proj
    return out


@njit
def _project_l1_rows_nb(v, eps):
    n, d = v.shape
    out = v.copy()
    if eps <= 0.0:
        out[:, :] = 0.0
        return out
    a = np.empty(d)
    for r in range(n):
        total = 0.0
        for i in range(d):
            a[i] = abs(v[r, i])
            total += a[i]
        if total <= eps * (1.0 + BALL_SLACK):
            continue
        u = np.sort(a)[::-1]
        css = u[0]
        theta = u[0] - eps
        for j in range(1, d):
            css += u[j]
            t = (css - eps) / (j + 1.0)
            if u[j] - t > 0.0:
                theta = t
        s = 0.0
        for i in range(d):
            m = a[i] - theta
            if m > 0.0:
                out[r, i] = m if v[r, i] > 0.0 else -m
                s += m
            else:
                out[r, i] = 0.0
        if s > eps * (1.0 + BALL_SLACK):
            f = eps / s
            for i in range(d):
                out[r, i] *= f
    return out


# ---------------------------------------------------------------- l0 "ball"


def _project_l0_rows_np(v, k):
    v = np.asarray(v, dtype=np.float64)
    n, d = v.shape
    if k >= d:
        return v.copy()
    out = np.zeros_like(v)
    if k <= 0:
        return out
    keep = np.argsort(-np.abs(v), axis=1, kind="stable")[:, :k]
    rows = np.arange(n)[:, None]
    out[rows, keep] = v[rows, keep]
    return out


@njit
def _project_l0_rows_nb(v, k):
    n, d = v.shape
    if k >= d:
        return v.copy()
    out = np.zeros_like(v)
    if k <= 0:
        return out
    for r in range(n):
        keep = np.argsort(-np.abs(v[r]), kind="mergesort")[:k]
        for i in keep:
            out[r, i] = v[r, i]
    return out


# ---------------------------------------------------------------- rank AUC


def _rank_auc_np(pos, neg):
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    n_pos, n_neg = len(pos), len(neg)
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    # tie groups: [starts[g], ends[g]) in sorted order
    boundaries = np.flatnonzero(np.diff(s) != 0.0) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(s)]])
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@njit
def _rank_auc_nb(pos, neg):
    n_pos = pos.shape[0]
    n_neg = neg.shape[0]
    n = n_pos + n_neg
    scores = np.empty(n)
    scores[:n_pos] = pos
    scores[n_pos:] = neg
    order = np.argsort(scores, kind="mergesort")
    rank_sum = 0.0
    i = 0
    while i < n:
        j = i + 1
        while j < n and scores[order[j]] == scores[order[i]]:
            j += 1
        avg = (i + j + 1) / 2.0
        for t in range(i, j):
            if order[t] < n_pos:
                rank_sum += avg
        i = j
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# ---------------------------------------------------------------- distances


def _center_distances_np(z, centers):
    diff = z[:, None, :] - centers[None, :, :]
    return np.sqrt(np.einsum("ncm,ncm->nc", diff, diff))


@njit
def _center_distances_nb(z, centers):
    n, m = z.shape
    c = centers.shape[0]
    out = np.empty((n, c))
    for r in range(n):
        for j in range(c):
            acc = 0.0
            for i in range(m):
                t = z[r, i] - centers[j, i]
                acc += t * t
            out[r, j] = np.sqrt(acc)
    return out


def _as_rows(v):
    return np.ascontiguousarray(np.atleast_2d(np.asarray(v, dtype=np.float64)))


if USE_NUMBA:

    def project_l1_rows(v, eps):
        return _project_l1_rows_nb(_as_rows(v), float(eps))

    def project_l0_rows(v, k):
        return _project_l0_rows_nb(_as_rows(v), int(k))

    def rank_auc(pos, neg):
        return float(
            _rank_auc_nb(np.ascontiguousarray(pos, dtype=np.float64), np.ascontiguousarray(neg, dtype=np.float64))
        )

    def center_distances(z, centers):
        return _center_distances_nb(_as_rows(z), _as_rows(centers))

else:

    def project_l1_rows(v, eps):
        return _project_l1_rows_np(_as_rows(v), float(eps))

    def project_l0_rows(v, k):
        return _project_l0_rows_np(_as_rows(v), int(k))

    def rank_auc(pos, neg):
        return float(_rank_auc_np(pos, neg))

    def center_distances(z, centers):
        return _center_distances_np(_as_rows(z), _as_rows(centers))
