"""Deterministic dual solver for the hinge-loss template objective.

Solves min_w,b 0.5 ||w||^2 + C sum_i max(0, 1 - y_i (w.x_i + b)) through
its dual (bias unregularized, enforced by the equality constraint):

    min_a 0.5 a^T Q a - e^T a,  0 <= a_i <= C,  y^T a = 0

with Q_ij = y_i y_j x_i.x_j, by maximal-violating-pair coordinate updates.
Fully deterministic given the input order; no randomness anywhere.
"""

from __future__ import annotations

import numpy as np
from numba import njit

TAU = 1e-12


@njit(cache=True)
def _smo_kernel(Q, y, C, tol, max_iter):
    """Returns (alpha, bias, n_iter, gap) for the boxed dual above."""
    n = y.shape[0]
    alpha = np.zeros(n, dtype=np.float64)
    grad = np.full(n, -1.0)

    it = 0
    gmax = 0.0
    gmin = 0.0
    while it < max_iter:
        gmax = -1e300
        gmin = 1e300
        gi = -1
        gj = -1
        for t in range(n):
            v = -y[t] * grad[t]
            if (y[t] > 0.0 and alpha[t] < C) or (y[t] < 0.0 and alpha[t] > 0.0):
                if v > gmax:
                    gmax = v
                    gi = t
            if (y[t] > 0.0 and alpha[t] > 0.0) or (y[t] < 0.0 and alpha[t] < C):
                if v < gmin:
                    gmin = v
                    gj = t
        if gi < 0 or gj < 0 or gmax - gmin < tol:
            break
        i = gi
        j = gj
        old_i = alpha[i]
        old_j = alpha[j]

        if y[i] != y[j]:
            quad = Q[i, i] + Q[j, j] + 2.0 * Q[i, j]
            if quad <= 0.0:
                quad = TAU
            delta = (-grad[i] - grad[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0.0:
                if alpha[j] < 0.0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0.0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0.0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            quad = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
            if quad <= 0.0:
                quad = TAU
            delta = (grad[i] - grad[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = total - C
            else:
                if alpha[j] < 0.0:
                    alpha[j] = 0.0
                    alpha[i] = total
            if total > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = total - C
            else:
                if alpha[i] < 0.0:
                    alpha[i] = 0.0
                    alpha[j] = total
        d_i = alpha[i] - old_i
        d_j = alpha[j] - old_j
        for t in range(n):
            grad[t] += Q[t, i] * d_i + Q[t, j] * d_j
        it += 1

    # bias from free support vectors, else the midpoint of the violating gap
    nb_free = 0
    b_sum = 0.0
    for t in range(n):
        if 0.0 < alpha[t] < C:
            b_sum += -y[t] * grad[t]
            nb_free += 1
    if nb_free > 0:
        bias = b_sum / nb_free
    else:
        bias = (gmax + gmin) / 2.0
    return alpha, bias, it, gmax - gmin


def solve_hinge(X: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-6,
                max_iter: int = 500_000):
    """Train a linear max-margin classifier; returns a result dict.

    X is (n, d) float64, y is (n,) of +-1. The weight vector is recomputed
    from the support coefficients at the end so it does not depend on the
    update path.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    gram = X @ X.T
    Q = gram * np.outer(y, y)
    alpha, bias, n_iter, gap = _smo_kernel(Q, y, float(C), float(tol), int(max_iter))
    w = X.T @ (alpha * y)
    margins = y * (X @ w + bias)
    hinge = np.maximum(0.0, 1.0 - margins)
    objective = 0.5 * float(w @ w) + float(C) * float(hinge.sum())
    dual_obj = 0.5 * float(alpha @ (Q @ alpha)) - float(alpha.sum())
    return {
        "w": w,
        "bias": float(bias),
        "alpha": alpha,
        "objective": objective,
        "dual_objective": dual_obj,
        "gap": float(gap),
        "iterations": int(n_iter),
        "converged": gap < tol,
        "n_sv": int(np.sum(alpha > 0)),
    }


def platt_newton(scores: np.ndarray, labels: np.ndarray, max_iter: int = 100,
                 tol: float = 1e-10):
    """Sigmoid-fit calibration by Newton descent with smoothed targets.

    Minimizes the negative log-likelihood of p_i = 1/(1 + exp(a*s_i + b))
    against targets t+ = (n_pos+1)/(n_pos+2), t- = 1/(n_neg+2). Returns
    (a, b, converged).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    hi = (n_pos + 1.0) / (n_pos + 2.0)
    lo = 1.0 / (n_neg + 2.0)
    t = np.where(labels, hi, lo)

    a = 0.0
    b = np.log((n_neg + 1.0) / (n_pos + 1.0))
    sigma = 1e-12

    def nll(a_, b_):
        # F = sum t*f + log(1 + e^-f), computed overflow-safe
        f = a_ * scores + b_
        return float(np.sum(t * f + np.maximum(-f, 0.0) + np.log1p(np.exp(-np.abs(f)))))

    fval = nll(a, b)
    converged = False
    for _ in range(max_iter):
        f = a * scores + b
        with np.errstate(over="ignore"):
            p = 1.0 / (1.0 + np.exp(f))
        d1 = t - p  # dNLL/df per sample, sign folded below
        g_a = float(np.dot(scores, d1))
        g_b = float(np.sum(d1))
        if abs(g_a) < tol and abs(g_b) < tol:
            converged = True
            break
        d2 = p * (1.0 - p)
        h_aa = float(np.dot(scores * scores, d2)) + sigma
        h_ab = float(np.dot(scores, d2))
        h_bb = float(np.sum(d2)) + sigma
        det = h_aa * h_bb - h_ab * h_ab
        if det <= 0:
            break
        step_a = -(h_bb * g_a - h_ab * g_b) / det
        step_b = -(h_aa * g_b - h_ab * g_a) / det
        # backtracking line search on the NLL
        stepsize = 1.0
        while stepsize >= 1e-10:
            na, nb2 = a + stepsize * step_a, b + stepsize * step_b
            nval = nll(na, nb2)
            if nval < fval + 1e-4 * stepsize * (g_a * step_a + g_b * step_b):
                a, b, fval = na, nb2, nval
                break
            stepsize *= 0.5
        else:
            break
    return a, b, converged
