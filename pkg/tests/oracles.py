"""Straight-line scalar re-implementations used as independent references.

Everything here works on plain Python floats and lists, one element at a
time, so it shares no code path with the vectorised package functions.
"""

import math

LOG_EPS = 1e-8


def clamp_log(p):
    return math.log(min(max(p, LOG_EPS), 1.0))


def softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = math.fsum(e)
    return [v / s for v in e]


def cross_entropy(p, onehot):
    return -math.fsum(y * clamp_log(q) for q, y in zip(p, onehot))


def kl_to_uniform(p):
    k = len(p)
    return math.fsum((1.0 / k) * (math.log(1.0 / k) - clamp_log(q)) for q in p)


def masked_l2(p, mask):
    return math.sqrt(math.fsum((q * m) ** 2 for q, m in zip(p, mask)))


def detection_rates(pred, is_known):
    tp = fn = tn = fp = 0
    for p, k in zip(pred, is_known):
        if k and p != -1:
            tp += 1
        elif k:
            fn += 1
        elif p == -1:
            tn += 1
        else:
            fp += 1
    tpr = tp / (tp + fn)
    tnr = tn / (tn + fp)
    return tpr, tnr, (tpr + tnr) / 2


def confusion(pred, truth, k):
    cm = [[0] * k for _ in range(k)]
    rejected = [0] * k
    for p, t in zip(pred, truth):
        if p == -1:
            rejected[t] += 1
        else:
            cm[p][t] += 1
    return cm, rejected


def dense_forward(params, layers, x):
    """``layers`` is a list of ``(w_name, b_name, activation)``; x is one row."""
    h = list(x)
    for w_name, b_name, act in layers:
        w, b = params[w_name], params[b_name]
        out = []
        for j in range(len(b)):
            s = math.fsum(h[i] * float(w[i][j]) for i in range(len(h))) + float(b[j])
            out.append(s)
        if act == "relu":
            out = [max(v, 0.0) for v in out]
        elif act == "sigmoid":
            out = [1.0 / (1.0 + math.exp(-v)) for v in out]
        h = out
    return h


def central_difference(f, x, h=1e-6):
    """Gradient of scalar ``f`` at the numpy array ``x`` (float64)."""
    import numpy as np

    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g
