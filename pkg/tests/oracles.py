"""Independent reference computations used by the tests.

Everything here is written with explicit Python loops and the ``math``
module so it shares no code path with the vectorized implementation.
"""
import math

import numpy as np


def dense_forward_loops(x, W, b):
    B, n_in = x.shape
    n_out = W.shape[1]
    out = np.zeros((B, n_out))
    for i in range(B):
        for j in range(n_out):
            s = b[j]
            for k in range(n_in):
                s += x[i, k] * W[k, j]
            out[i, j] = s
    return out


def mlp_forward_loops(x, weights):
    """``weights`` is a list of (W, b); ReLU between layers."""
    h = x
    for li, (W, b) in enumerate(weights):
        h = dense_forward_loops(h, W, b)
        if li < len(weights) - 1:
            h = np.where(h > 0, h, 0.0)
    return h


def conv_im2col_loops(x, W, b, stride=1, padding=0):
    """Explicit patch extraction followed by a dense product."""
    B, C, H, Wd = x.shape
    co, ci, k, _ = W.shape
    xp = np.zeros((B, C, H + 2 * padding, Wd + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + Wd] = x
    ho = (H + 2 * padding - k) // stride + 1
    wo = (Wd + 2 * padding - k) // stride + 1
    out = np.zeros((B, co, ho, wo))
    for n in range(B):
        for i in range(ho):
            for j in range(wo):
                patch = []
                for c in range(C):
                    for a in range(k):
                        for d in range(k):
                            patch.append(xp[n, c, i * stride + a, j * stride + d])
                for o in range(co):
                    s = b[o]
                    wflat = W[o].ravel()
                    for q, v in enumerate(patch):
                        s += v * wflat[q]
                    out[n, o, i, j] = s
    return out


def ce_direct(z, y):
    total = 0.0
    for row, label in zip(z, y):
        total += -math.log(math.exp(row[label]) / sum(math.exp(v) for v in row))
    return total / len(y)


def softmax_direct(row, tau=1.0):
    e = [math.exp(v / tau) for v in row]
    s = sum(e)
    return [v / s for v in e]


def kl_direct(z_student, z_target, tau):
    total = 0.0
    for zs, zt in zip(z_student, z_target):
        ps, pt = softmax_direct(zs, tau), softmax_direct(zt, tau)
        total += sum(t * math.log(t / s) for s, t in zip(ps, pt))
    return tau * tau * total / len(z_student)


def central_diff(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (f(tp) - f(tm)) / (2 * h)
    return g


def max_rel_error(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def dirichlet_moments(alpha):
    """Closed-form mean and covariance of Dir(alpha)."""
    a = np.asarray(alpha, dtype=float)
    a0 = a.sum()
    mean = a / a0
    cov = -np.outer(a, a) / (a0 ** 2 * (a0 + 1))
    np.fill_diagonal(cov, a * (a0 - a) / (a0 ** 2 * (a0 + 1)))
    return mean, cov


def scaled_rel_error(a, b, scale=1e-3):
    """Per-component relative error with a floor at ``scale`` times the largest
    gradient component, so entries far below finite-difference roundoff
    (about eps * |loss| / h) do not dominate."""
    floor = scale * max(float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return max_rel_error(a, b, floor=floor)
