"""Independent reference computations used by the tests.

Nothing here imports the package's numerical code paths; every oracle is a
direct loop or an arbitrary-precision evaluation.
"""

from __future__ import annotations

import itertools
import math

import mpmath
import numpy as np


def dense_product(weight, x):
    """Row-by-row dot products with explicit Python sums."""
    return np.array([sum(float(w) * float(v) for w, v in zip(row, x)) for row in weight])


def conv2d_loops(x, kernel, bias):
    """Valid, stride 1 convolution by six nested loops; x is (H, W, C)."""
    h, w, c = x.shape
    k, _, _, f = kernel.shape
    out = np.zeros((h - k + 1, w - k + 1, f))
    for i, j, o in itertools.product(range(h - k + 1), range(w - k + 1), range(f)):
        s = float(bias[o])
        for di, dj, ci in itertools.product(range(k), range(k), range(c)):
            s += float(x[i + di, j + dj, ci]) * float(kernel[di, dj, ci, o])
        out[i, j, o] = s
    return out


def central_difference(f, a, eps=1e-4):
    """Gradient of scalar f at vector a by (f(a + e) - f(a - e)) / 2e per coordinate."""
    a = np.asarray(a, dtype=np.float64)
    g = np.empty_like(a)
    for i in range(a.size):
        up, dn = a.copy(), a.copy()
        up[i] += eps
        dn[i] -= eps
        g[i] = (f(up) - f(dn)) / (2 * eps)
    return g


def student_t_cdf_quad(t, df, dps=30):
    """P(T <= t) by numerically integrating the Student-t density."""
    mpmath.mp.dps = dps
    nu = mpmath.mpf(df)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    dens = lambda u: c * (1 + u * u / nu) ** (-(nu + 1) / 2)
    t = mpmath.mpf(t)
    tail = mpmath.quad(dens, [abs(t), mpmath.inf])
    return float(1 - tail) if t >= 0 else float(tail)


def two_sided_p_quad(t, df):
    return 2.0 * (1.0 - student_t_cdf_quad(abs(t), df))


def welch_quad(a, b):
    """Welch statistic in exact rationals via mpmath, p by quadrature."""
    mpmath.mp.dps = 30
    a = [mpmath.mpf(v) for v in a]
    b = [mpmath.mpf(v) for v in b]
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    va = sum((v - ma) ** 2 for v in a) / (len(a) - 1)
    vb = sum((v - mb) ** 2 for v in b) / (len(b) - 1)
    sa, sb = va / len(a), vb / len(b)
    t = (ma - mb) / mpmath.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa**2 / (len(a) - 1) + sb**2 / (len(b) - 1))
    return float(t), float(df), two_sided_p_quad(float(t), float(df))


def confusion_brute(pred, labels, n):
    m = [[0] * n for _ in range(n)]
    for p, y in zip(pred, labels):
        m[y][p] += 1
    return m


def metrics_brute(pred, labels, n):
    """Accuracy and per-class/macro precision, recall and F1 with 0/0 = 0."""
    m = confusion_brute(pred, labels, n)
    total = len(labels)
    correct = sum(m[i][i] for i in range(n))
    prec, rec, f1 = [], [], []
    for c in range(n):
        tp = m[c][c]
        col = sum(m[r][c] for r in range(n))
        row = sum(m[c])
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if (p + r) else 0.0)
    return {
        "confusion": m,
        "accuracy": correct / total,
        "precision": prec,
        "recall": rec,
        "f1": f1,
        "macro_precision": math.fsum(prec) / n,
        "macro_recall": math.fsum(rec) / n,
        "macro_f1": math.fsum(f1) / n,
    }
