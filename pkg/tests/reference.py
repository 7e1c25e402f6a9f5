"""Naive nested-loop CNN evaluation in float64, used only as a test oracle."""

import math

import numpy as np


def conv2d(x, w, b, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = float(b[o])
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            r = i * stride + u - pad
                            s = j * stride + v - pad
                            if 0 <= r < h and 0 <= s < wd:
                                acc += float(w[o, c, u, v]) * float(x[c, r, s])
                out[o, i, j] = acc
    return out


def maxpool(x, window, stride):
    c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((c, ho, wo))
    for k in range(c):
        for i in range(ho):
            for j in range(wo):
                best = -math.inf
                for u in range(window):
                    for v in range(window):
                        best = max(best, float(x[k, i * stride + u, j * stride + v]))
                out[k, i, j] = best
    return out


def softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def run(model, x, upto=None):
    """Outputs of every layer (list), stopping after ``upto`` if given."""
    x = np.asarray(x, dtype=np.float64)
    outs = []
    for spec in model.layers:
        p = spec.params
        wts = model.weights.get(spec.id)
        if spec.kind == "conv2d":
            x = conv2d(x, wts["weight"], wts["bias"], p.get("stride", 1), p.get("padding", 0))
        elif spec.kind == "relu":
            x = np.vectorize(lambda v: v if v > 0 else 0.0)(x)
        elif spec.kind == "maxpool2d":
            x = maxpool(x, p["window"], p.get("stride", p["window"]))
        elif spec.kind == "global_avg_pool":
            x = np.array([sum(float(v) for v in ch.ravel()) / ch.size for ch in x])
        elif spec.kind == "flatten":
            x = np.array([float(v) for v in x.ravel()])
        elif spec.kind == "dense":
            w, b = wts["weight"], wts["bias"]
            x = np.array([float(b[o]) + sum(float(w[o, i]) * float(x[i]) for i in range(w.shape[1])) for o in range(w.shape[0])])
        elif spec.kind == "softmax":
            x = np.array(softmax(list(x)))
        outs.append(x)
        if spec.id == upto:
            break
    return outs
