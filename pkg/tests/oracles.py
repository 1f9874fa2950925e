"""Naive loop implementations used as independent references."""

import math

import numpy as np


def conv2d_loop(x, k, stride=1, padding=0):
    B, C, H, W = x.shape
    O, _, kH, kW = k.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - kH) // stride + 1
    Wo = (W + 2 * padding - kW) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for u in range(kH):
                            for v in range(kW):
                                acc += xp[b, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def max_pool_loop(x, window, stride):
    B, C, H, W = x.shape
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    out = np.zeros((B, C, Ho, Wo))
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = -math.inf
                    for u in range(window):
                        for v in range(window):
                            best = max(best, x[b, c, i * stride + u, j * stride + v])
                    out[b, c, i, j] = best
    return out


def linear_loop(x, w, b):
    B, D = x.shape
    K = w.shape[1]
    out = np.zeros((B, K))
    for n in range(B):
        for k in range(K):
            out[n, k] = b[k] + sum(x[n, d] * w[d, k] for d in range(D))
    return out


def gram_loop(f):
    B, C, H, W = f.shape
    G = np.zeros((B, C, C))
    for b in range(B):
        for i in range(C):
            for j in range(C):
                acc = 0.0
                for h in range(H):
                    for w in range(W):
                        acc += f[b, i, h, w] * f[b, j, h, w]
                G[b, i, j] = acc / (C * H * W)
    return G


def channel_stats_loop(x, eps):
    B, C, H, W = x.shape
    mu = np.zeros((B, C))
    sigma = np.zeros((B, C))
    for b in range(B):
        for c in range(C):
            vals = [x[b, c, h, w] for h in range(H) for w in range(W)]
            m = sum(vals) / len(vals)
            var = sum((v - m) ** 2 for v in vals) / len(vals)
            mu[b, c] = m
            sigma[b, c] = math.sqrt(var + eps)
    return mu, sigma


def cross_entropy_loop(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


def adam_reference(x0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam, written out from the recurrence."""
    x, m, v, trace = x0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(x)
    return trace


def ldp_loop(x, gamma, beta, eps):
    B, C, H, W = x.shape
    mu, sigma = channel_stats_loop(x, eps)
    out = np.zeros_like(x)
    for b in range(B):
        for c in range(C):
            for h in range(H):
                for w in range(W):
                    out[b, c, h, w] = ((sigma[b, c] + gamma[c]) * (x[b, c, h, w] - mu[b, c]) / sigma[b, c]
                                       + mu[b, c] + beta[c])
    return out
