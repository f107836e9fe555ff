"""Slow, obviously-correct reference implementations used only by the tests."""

import itertools

import numpy as np


def naive_conv3d(x, w, b, stride, padding):
    n, c, t, h, wd = x.shape
    co, ci, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    xp = np.zeros((n, c, t + 2 * pt, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
    xp[:, :, pt : pt + t, ph : ph + h, pw : pw + wd] = x
    To = (t + 2 * pt - kt) // st + 1
    Ho = (h + 2 * ph - kh) // sh + 1
    Wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, co, To, Ho, Wo))
    for bi, o, i, j, k in itertools.product(range(n), range(co), range(To), range(Ho), range(Wo)):
        acc = 0.0 if b is None else float(b[o])
        for cc, a, bb, d in itertools.product(range(c), range(kt), range(kh), range(kw)):
            acc += xp[bi, cc, i * st + a, j * sh + bb, k * sw + d] * w[o, cc, a, bb, d]
        out[bi, o, i, j, k] = acc
    return out


def naive_conv3d_transpose(x, w, b, stride, padding, output_padding=(0, 0, 0)):
    """Scatter every input element times the kernel into the output."""
    n, ci, t, h, wd = x.shape
    _, co, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    full = ((t - 1) * st + kt, (h - 1) * sh + kh, (wd - 1) * sw + kw)
    acc = np.zeros((n, co) + tuple(f + op for f, op in zip(full, output_padding)))
    for bi, c, i, j, k in itertools.product(range(n), range(ci), range(t), range(h), range(wd)):
        acc[bi, :, i * st : i * st + kt, j * sh : j * sh + kh, k * sw : k * sw + kw] += x[bi, c, i, j, k] * w[c]
    To = (t - 1) * st - 2 * pt + kt + output_padding[0]
    Ho = (h - 1) * sh - 2 * ph + kh + output_padding[1]
    Wo = (wd - 1) * sw - 2 * pw + kw + output_padding[2]
    out = acc[:, :, pt : pt + To, ph : ph + Ho, pw : pw + Wo]
    if b is not None:
        out = out + np.asarray(b).reshape(1, -1, 1, 1, 1)
    return out


def pairwise_auc(scores, labels):
    """P(score_anomalous > score_normal) + 0.5 * P(tie), by enumerating all pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def loop_mean_squared(x):
    flat = np.asarray(x, dtype=np.float64).ravel()
    total = 0.0
    for v in flat:
        total += v * v
    return total / len(flat)


def central_difference(f, x, h):
    """Numerical gradient of scalar ``f`` (taking a numpy array) at ``x``."""
    x = np.array(x, dtype=np.float64, copy=True)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
