"""Independent brute-force reference implementations.

Plain Python loops over float64 values; nothing here shares code with the
package under test.
"""

import math

import numpy as np


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, b, stride=1, pad=0, relu=False):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh, ow = out_size(h, kh, stride, pad), out_size(wd, kw, stride, pad)
    y = np.zeros((n, f, oh, ow))
    for s in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = float(b[o])
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                r, q = i * stride + di - pad, j * stride + dj - pad
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += float(x[s, ch, r, q]) * float(w[o, ch, di, dj])
                    y[s, o, i, j] = max(acc, 0.0) if relu else acc
    return y


def pool2d(x, mode, kh, kw, stride, pad=0):
    """Max pooling ignores padded cells; average pooling divides by the full window."""
    n, c, h, wd = x.shape
    oh, ow = out_size(h, kh, stride, pad), out_size(wd, kw, stride, pad)
    y = np.zeros((n, c, oh, ow))
    arg = np.zeros((n, c, oh, ow), dtype=np.int64)
    for s in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    best, best_k, total = -math.inf, -1, 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            r, q = i * stride + di - pad, j * stride + dj - pad
                            if 0 <= r < h and 0 <= q < wd:
                                v = float(x[s, ch, r, q])
                                total += v
                                if v > best:
                                    best, best_k = v, di * kw + dj
                    y[s, ch, i, j] = best if mode == "max" else total / (kh * kw)
                    arg[s, ch, i, j] = best_k
    return y, arg


def lrn(x, size, alpha, beta, k):
    n, c, h, w = x.shape
    before = size // 2
    after = size - 1 - before
    y = np.zeros(x.shape)
    for s in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for cc in range(max(0, ch - before), min(c, ch + after + 1)):
                        acc += float(x[s, cc, i, j]) ** 2
                    y[s, ch, i, j] = float(x[s, ch, i, j]) / (k + alpha * acc) ** beta
    return y


def softmax(logits):
    out = np.zeros(logits.shape)
    for r, row in enumerate(logits):
        m = max(float(v) for v in row)
        exps = [math.exp(float(v) - m) for v in row]
        total = math.fsum(exps)
        out[r] = [e / total for e in exps]
    return out


def xent(logits, labels):
    p = softmax(logits)
    return -math.fsum(math.log(p[i, t]) for i, t in enumerate(labels)) / len(labels)


def dense(x, w, theta, relu=False):
    out = []
    for row in x:
        unit = []
        for j in range(w.shape[0]):
            z = math.fsum(float(w[j, i]) * float(row[i]) for i in range(w.shape[1])) - float(theta[j])
            unit.append(max(z, 0.0) if relu else z)
        out.append(unit)
    return np.array(out)


def caffenet_shape_table(c, h, w, channels, num_classes, fc_units=(256, 128)):
    """Per-node output shapes of MiniCaffeNet (5x5 conv1, 3x3 'same' convs, 3x3/2 pad-1 pools)."""
    table = {}
    for stage, ch in enumerate(channels, start=1):
        k = 5 if stage == 1 else 3
        h, w = out_size(h, k, 1, k // 2), out_size(w, k, 1, k // 2)
        table[f"conv{stage}"] = (ch, h, w)
        h, w = out_size(h, 3, 2, 1), out_size(w, 3, 2, 1)
        table[f"pool{stage}"] = (ch, h, w)
    for i, units in enumerate(list(fc_units) + [num_classes], start=1):
        table[f"fc{i}"] = (units,)
    return table


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar f at array x by central differences."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        plus = f(x)
        x[idx] = orig - eps
        minus = f(x)
        x[idx] = orig
        g[idx] = (plus - minus) / (2 * eps)
    return g
