"""Slow reference implementations written as plain loops, used as test oracles."""

import numpy as np


def conv3d(x, w, b=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    B, C, T, H, W = x.shape
    O, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    xp = np.zeros((B, C, T + 2 * pt, H + 2 * ph, W + 2 * pw))
    xp[:, :, pt:pt + T, ph:ph + H, pw:pw + W] = x
    To = (T + 2 * pt - kt) // st + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((B, O, To, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for t in range(To):
                for i in range(Ho):
                    for j in range(Wo):
                        acc = 0.0 if b is None else float(b[o])
                        for c in range(C):
                            for a in range(kt):
                                for p in range(kh):
                                    for q in range(kw):
                                        acc += xp[n, c, t * st + a, i * sh + p, j * sw + q] * w[o, c, a, p, q]
                        out[n, o, t, i, j] = acc
    return out


def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    y = conv3d(x[:, :, None], w[:, :, None], b, (1, *stride), (0, *padding))
    return y[:, :, 0]


def matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def pool3d(x, kind, kernel, stride, padding=(0, 0, 0), ceil_mode=False):
    """Max ignores padding; avg divides by the full window (padding counts as zero)."""
    B, C, T, H, W = x.shape
    ext = (T, H, W)
    outs = []
    for e, k, s, p in zip(ext, kernel, stride, padding):
        span = e + 2 * p - k
        if ceil_mode:
            o = -(-span // s) + 1
            if (o - 1) * s >= e + p:
                o -= 1
        else:
            o = span // s + 1
        outs.append(o)
    out = np.zeros((B, C, *outs))
    K = kernel[0] * kernel[1] * kernel[2]
    for n in range(B):
        for c in range(C):
            for t in range(outs[0]):
                for i in range(outs[1]):
                    for j in range(outs[2]):
                        vals = []
                        for a in range(kernel[0]):
                            for p in range(kernel[1]):
                                for q in range(kernel[2]):
                                    tt = t * stride[0] + a - padding[0]
                                    ii = i * stride[1] + p - padding[1]
                                    jj = j * stride[2] + q - padding[2]
                                    if 0 <= tt < T and 0 <= ii < H and 0 <= jj < W:
                                        vals.append(x[n, c, tt, ii, jj])
                                    else:
                                        vals.append(None)
                        real = [v for v in vals if v is not None]
                        if kind == "max":
                            out[n, c, t, i, j] = max(real)
                        else:
                            out[n, c, t, i, j] = sum(real) / K
    return out


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def lstm(x, w_ih, w_hh, b_ih, b_hh, reverse=False):
    """x [B,T,D] -> h [B,T,H], gates ordered input, forget, cell, output."""
    B, T, _ = x.shape
    H = w_hh.shape[1]
    out = np.zeros((B, T, H))
    for n in range(B):
        h = np.zeros(H)
        c = np.zeros(H)
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            z = w_ih @ x[n, t] + w_hh @ h + b_ih + b_hh
            i, f, g, o = _sigmoid(z[:H]), _sigmoid(z[H:2 * H]), np.tanh(z[2 * H:3 * H]), _sigmoid(z[3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
            out[n, t] = h
    return out


def batchnorm_train(x, gamma, beta, eps=1e-5):
    axes = tuple(i for i in range(x.ndim) if i != 1)
    shape = [1] * x.ndim
    shape[1] = -1
    mu = x.mean(axis=axes).reshape(shape)
    var = ((x - mu) ** 2).mean(axis=axes).reshape(shape)
    return (x - mu) / np.sqrt(var + eps) * gamma.reshape(shape) + beta.reshape(shape)


def cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)
